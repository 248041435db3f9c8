//! Two-stage training loop: adversarial style learning with the model
//! frozen, then an SGD step on the clean loss plus the loss on the
//! adversarial samples.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{
    adv_pixel_images, augmentation_calls, extract_style, learn_adversarial_style, mix_stats,
    perturb_gaussian, permute_stats, policy_select, restyle_images, sample_mix_lambda, AdvConfig,
    BatchStyle, RestyleHook, StyleLayout,
};
use crate::error::{invalid, Error, Result};
use crate::model::{build_model, ModelConfig, ModelState, StyleHook};
use crate::preaug::{pre_augment, PreAugConfig};
use crate::rng::rng_for;
use crate::synthetic::{Dataset, LabeledImage};
use crate::tensor::{Graph, Scalar, Tensor};

pub const TRAIN_LOG_HEADER: &str = "iter,lr,loss_clean,loss_adv,mu_shift_l2,sigma_shift_l2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Policy {
    #[default]
    None,
    AdvStyle,
    AdvPixel,
    RandStyle,
    MixStyle,
    CrossStyle,
    /// AdvStyle or AdvPixel, drawn uniformly each iteration.
    RandomAdvCombo,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::None,
        Policy::RandStyle,
        Policy::MixStyle,
        Policy::CrossStyle,
        Policy::AdvPixel,
        Policy::AdvStyle,
        Policy::RandomAdvCombo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::AdvStyle => "advstyle",
            Policy::AdvPixel => "advpixel",
            Policy::RandStyle => "randstyle",
            Policy::MixStyle => "mixstyle",
            Policy::CrossStyle => "crossstyle",
            Policy::RandomAdvCombo => "random_combo",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown policy {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_iter: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub model: ModelConfig,
    pub adv: AdvConfig,
    pub policy: Policy,
    pub seed: u64,
    pub rand_noise_std: f32,
    /// Fixed MixStyle weight; drawn from Beta(0.1, 0.1) when `None`.
    pub mix_lambda: Option<f32>,
    pub pixel_lr: f32,
    pub pixel_steps: usize,
    pub pre: PreAugConfig,
    /// Snapshot fingerprint cadence; `0` means `max_iter / 10`.
    pub checkpoint_every: usize,
    /// Keep the image-level adversarial samples of every n-th iteration (0 = off).
    pub harvest_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            batch_size: 8,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            model: ModelConfig::default(),
            adv: AdvConfig::default(),
            policy: Policy::None,
            seed: 0,
            rand_noise_std: 0.1,
            mix_lambda: None,
            pixel_lr: 10.0,
            pixel_steps: 1,
            pre: PreAugConfig::default(),
            checkpoint_every: 0,
            harvest_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iter == 0 {
            return bad("max_iter must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be > 0");
        }
        if !(self.poly_power > 0.0) {
            return bad("poly_power must be > 0");
        }
        if !(self.rand_noise_std >= 0.0) || !(self.pixel_lr >= 0.0) {
            return bad("noise and pixel lr must be >= 0");
        }
        if self.mix_lambda.is_some_and(|l| !(0.0..=1.0).contains(&l)) {
            return bad("mix lambda must lie in [0, 1]");
        }
        self.model.validate()?;
        self.adv.validate()?;
        Ok(())
    }

    fn checkpoint_interval(&self) -> usize {
        match self.checkpoint_every {
            0 => (self.max_iter / 10).max(1),
            n => n,
        }
    }
}

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(invalid(format!("poly_lr iteration {iter} outside 0..={max_iter}")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`; weight
/// decay only on parameters flagged for it. Leaves the state untouched and
/// errors if anything would become non-finite.
pub fn sgd_step<T: Scalar>(
    state: &mut ModelState<T>,
    grads: &[Vec<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(invalid("one gradient per parameter is required"));
    }
    let mut next = Vec::with_capacity(grads.len());
    for ((p, v), g) in state.params.iter().zip(&state.momentum).zip(grads) {
        if g.len() != p.value.numel() {
            return Err(invalid(format!("gradient length mismatch for {}", p.name)));
        }
        let wd = if p.decay { weight_decay } else { T::zero() };
        let mut vel = Vec::with_capacity(g.len());
        let mut theta = Vec::with_capacity(g.len());
        for ((&t, &vi), &gi) in p.value.data().iter().zip(v).zip(g) {
            let nv = momentum * vi + (gi + wd * t);
            let nt = t - lr * nv;
            if !nv.is_finite() || !nt.is_finite() {
                return Err(Error::NonFinite(format!("SGD update of {}", p.name)));
            }
            vel.push(nv);
            theta.push(nt);
        }
        next.push((vel, theta));
    }
    for ((p, v), (vel, theta)) in state.params.iter_mut().zip(&mut state.momentum).zip(next) {
        *v = vel;
        p.value.data_mut().copy_from_slice(&theta);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_clean: f64,
    /// Loss on the augmented samples; 0 when no augmentation is used.
    pub loss_adv: f64,
    /// Mean over samples of the L2 norm of the mean shift.
    pub mu_shift_l2: f64,
    pub sigma_shift_l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iter: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// Harvested image-level augmented samples.
    pub harvest: Vec<LabeledImage>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.iter, r.lr, r.loss_clean, r.loss_adv, r.mu_shift_l2, r.sigma_shift_l2
            );
        }
        s
    }
}

/// A stacked batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<LabeledImage>,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(samples: Vec<LabeledImage>) -> Result<Self> {
        let imgs: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        let images = Tensor::stack(&imgs)?;
        let labels = samples
            .iter()
            .flat_map(|s| s.label.data.iter().copied())
            .collect();
        Ok(Self {
            samples,
            images,
            labels,
        })
    }
}

/// Draws iteration `iter`'s batch (with replacement) and applies pre-augmentation.
pub fn sample_batch(cfg: &TrainConfig, data: &Dataset, iter: usize) -> Result<Batch> {
    let mut rng = rng_for(cfg.seed, &[1, iter as u64]);
    let samples = (0..cfg.batch_size)
        .map(|slot| {
            let x = &data.items[rng.gen_range(0..data.len())];
            if cfg.pre.is_noop() {
                Ok(x.clone())
            } else {
                let mut r = rng_for(cfg.seed, &[2, iter as u64, slot as u64]);
                pre_augment(x, &cfg.pre, &mut r)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::new(samples)
}

/// Stage-1 outcome: what Stage 2 feeds the model as the second term.
enum Plan {
    Clean,
    /// Replace the stats at the injection point.
    Restyle(StyleLayout, Box<dyn FnMut(&BatchStyle<f32>) -> Result<BatchStyle<f32>>>),
    /// Already-perturbed input images.
    Pixels(Tensor<f32>),
}

struct Stage1 {
    plan: Plan,
    shift: Option<(f64, f64)>,
}

/// Stage 1: learns or draws the augmentation for one batch. Never touches
/// the model parameters.
fn stage_one(cfg: &TrainConfig, model: &ModelState<f32>, batch: &Batch, iter: usize) -> Result<Stage1> {
    let pos = model.config.injection_position;
    let n = batch.samples.len();
    let mut rng = rng_for(cfg.seed, &[3, iter as u64]);
    let mut policy = cfg.policy;
    if policy == Policy::RandomAdvCombo {
        policy = *policy_select(&[Policy::AdvStyle, Policy::AdvPixel], &[0.5, 0.5], &mut rng)?;
    }
    let stage = match policy {
        Policy::None => Stage1 {
            plan: Plan::Clean,
            shift: Some((0.0, 0.0)),
        },
        Policy::AdvStyle if cfg.adv.gamma == 0.0 => Stage1 {
            plan: Plan::Pixels(batch.images.clone()),
            shift: Some((0.0, 0.0)),
        },
        Policy::AdvStyle => {
            let out = learn_adversarial_style(model, &batch.images, &batch.labels, pos, &cfg.adv)?;
            let shift = out.learned.shift_from(&out.initial);
            let learned = out.learned;
            Stage1 {
                plan: Plan::Restyle(cfg.adv.layout(), Box::new(move |_| Ok(learned.clone()))),
                shift: Some(shift),
            }
        }
        Policy::AdvPixel => {
            let adv = adv_pixel_images(model, &batch.images, &batch.labels, cfg.pixel_lr, cfg.pixel_steps)?;
            let layout = StyleLayout::default();
            let shift = extract_style(&layout, &adv)?.shift_from(&extract_style(&layout, &batch.images)?);
            Stage1 {
                plan: Plan::Pixels(adv),
                shift: Some(shift),
            }
        }
        Policy::RandStyle => {
            let noise = cfg.rand_noise_std;
            Stage1 {
                plan: Plan::Restyle(
                    StyleLayout::default(),
                    Box::new(move |s| perturb_gaussian(s, noise, &mut rng)),
                ),
                shift: None,
            }
        }
        Policy::MixStyle => {
            let mut partner: Vec<usize> = (0..n).collect();
            partner.shuffle(&mut rng);
            let lambdas: Vec<f32> = (0..n)
                .map(|_| cfg.mix_lambda.unwrap_or_else(|| sample_mix_lambda(&mut rng)))
                .collect();
            Stage1 {
                plan: Plan::Restyle(
                    StyleLayout::default(),
                    Box::new(move |s| mix_stats(s, &partner, &lambdas)),
                ),
                shift: None,
            }
        }
        Policy::CrossStyle => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut partner: Vec<usize> = (0..n).collect();
            for pair in order.chunks_exact(2) {
                partner[pair[0]] = pair[1];
                partner[pair[1]] = pair[0];
            }
            Stage1 {
                plan: Plan::Restyle(
                    StyleLayout::default(),
                    Box::new(move |s| permute_stats(s, &partner)),
                ),
                shift: None,
            }
        }
        Policy::RandomAdvCombo => unreachable!("resolved above"),
    };
    Ok(stage)
}

struct StepResult {
    grads: Vec<Vec<f32>>,
    loss_clean: f64,
    loss_adv: f64,
    shift: (f64, f64),
}

/// Stage 2: gradient of the clean loss plus the augmented loss wrt the parameters.
fn stage_two(model: &ModelState<f32>, batch: &Batch, stage: Stage1) -> Result<StepResult> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true)?;
    let x = g.constant(batch.images.clone())?;
    let logits = model.forward_graph(&mut g, &params, x, None)?;
    let clean = crate::model::seg_loss(&mut g, logits, &batch.labels)?;
    let mut shift = stage.shift.unwrap_or((0.0, 0.0));
    let (loss, adv) = match stage.plan {
        Plan::Clean => (clean, None),
        Plan::Pixels(images) => {
            let xa = g.constant(images)?;
            let la = model.forward_graph(&mut g, &params, xa, None)?;
            let adv = crate::model::seg_loss(&mut g, la, &batch.labels)?;
            (g.add(clean, adv)?, Some(adv))
        }
        Plan::Restyle(layout, transform) => {
            let xa = g.constant(batch.images.clone())?;
            let mut hook = RestyleHook::new(layout, transform);
            let la = model.forward_graph(&mut g, &params, xa, Some(&mut hook as &mut dyn StyleHook<f32>))?;
            if stage.shift.is_none() {
                if let Some((observed, applied)) = &hook.last {
                    shift = applied.shift_from(observed);
                }
            }
            let adv = crate::model::seg_loss(&mut g, la, &batch.labels)?;
            (g.add(clean, adv)?, Some(adv))
        }
    };
    let loss_clean = g.value(clean).data()[0] as f64;
    let loss_adv = adv.map_or(0.0, |a| g.value(a).data()[0] as f64);
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|p| g.grad(*p).map(<[f32]>::to_vec).ok_or_else(|| invalid("missing parameter gradient")))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepResult {
        grads,
        loss_clean,
        loss_adv,
        shift,
    })
}

/// Trains a fresh model on `source` according to `cfg`.
pub fn train(cfg: &TrainConfig, source: &Dataset) -> Result<(ModelState<f32>, TrainLog)> {
    let model = build_model(&cfg.model, cfg.seed)?;
    train_from(cfg, source, model)
}

/// Continues training `model` for `cfg.max_iter` iterations.
pub fn train_from(
    cfg: &TrainConfig,
    source: &Dataset,
    mut model: ModelState<f32>,
) -> Result<(ModelState<f32>, TrainLog)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.config != cfg.model {
        return Err(Error::Config("model does not match the configured architecture".into()));
    }
    let mut log = TrainLog::default();
    let every = cfg.checkpoint_interval();
    let mut last_good = model.clone();
    for iter in 0..cfg.max_iter {
        let batch = sample_batch(cfg, source, iter)?;
        let lr = poly_lr(iter, cfg.max_iter, cfg.lr0, cfg.poly_power)?;
        let (stage, harvest) = stage_one_with_harvest(cfg, &model, &batch, iter)?;
        let step = stage_two(&model, &batch, stage)?;
        if let Some(images) = harvest {
            for (i, s) in batch.samples.iter().enumerate() {
                log.harvest.push(s.restyled(images.index_outer(i)?)?);
            }
        }
        let diverged = |msg: String, last_good: &ModelState<f32>| Error::Diverged {
            iter,
            msg,
            last_good: Box::new(last_good.clone()),
        };
        if !step.loss_clean.is_finite() || !step.loss_adv.is_finite() {
            return Err(diverged(
                format!("loss clean={} adv={}", step.loss_clean, step.loss_adv),
                &last_good,
            ));
        }
        if let Err(e) = sgd_step(
            &mut model,
            &step.grads,
            lr as f32,
            cfg.momentum as f32,
            cfg.weight_decay as f32,
        ) {
            return Err(diverged(e.to_string(), &last_good));
        }
        log.records.push(LogRecord {
            iter,
            lr,
            loss_clean: step.loss_clean,
            loss_adv: step.loss_adv,
            mu_shift_l2: step.shift.0,
            sigma_shift_l2: step.shift.1,
        });
        let done = iter + 1;
        if done % every == 0 || done == cfg.max_iter {
            last_good = model.clone();
            log.checkpoints.push(Checkpoint {
                iter: done,
                fingerprint: model.fingerprint(),
            });
        }
    }
    Ok((model, log))
}

/// Stage 1 plus, on harvest iterations, the image-level augmented batch.
fn stage_one_with_harvest(
    cfg: &TrainConfig,
    model: &ModelState<f32>,
    batch: &Batch,
    iter: usize,
) -> Result<(Stage1, Option<Tensor<f32>>)> {
    let mut stage = stage_one(cfg, model, batch, iter)?;
    let want = cfg.harvest_every > 0 && iter % cfg.harvest_every == 0 && model.config.injection_position == 0;
    if !want {
        return Ok((stage, None));
    }
    let images = match &mut stage.plan {
        Plan::Clean => return Ok((stage, None)),
        Plan::Pixels(p) => p.clone(),
        Plan::Restyle(layout, f) => {
            let layout = *layout;
            let base = extract_style(&layout, &batch.images)?;
            let style = f(&base)?;
            let images = restyle_images(&layout, &batch.images, &style)?;
            // the transform may be stateful (random draws); replay the drawn style
            stage.plan = Plan::Restyle(layout, Box::new(move |_| Ok(style.clone())));
            images
        }
    };
    Ok((stage, Some(images)))
}

/// Parameter gradients of `L(x) + L(x_aug)` and of each term separately,
/// for the additivity check.
pub fn stage_two_gradients(
    model: &ModelState<f64>,
    images: &Tensor<f64>,
    augmented: &Tensor<f64>,
    labels: &[u8],
) -> Result<[Vec<Vec<f64>>; 3]> {
    let run = |which: u8| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let params = model.bind(&mut g, true)?;
        let mut terms = Vec::new();
        if which & 1 != 0 {
            let x = g.constant(images.clone())?;
            let l = model.forward_graph(&mut g, &params, x, None)?;
            terms.push(crate::model::seg_loss(&mut g, l, labels)?);
        }
        if which & 2 != 0 {
            let x = g.constant(augmented.clone())?;
            let l = model.forward_graph(&mut g, &params, x, None)?;
            terms.push(crate::model::seg_loss(&mut g, l, labels)?);
        }
        let loss = match terms.as_slice() {
            [a] => *a,
            [a, b] => g.add(*a, *b)?,
            _ => unreachable!(),
        };
        g.backward(loss)?;
        Ok(params.iter().map(|p| g.grad(*p).unwrap_or(&[]).to_vec()).collect())
    };
    Ok([run(3)?, run(1)?, run(2)?])
}

/// Evaluation counter guard: runs `f` and errors if it invoked any augmentation.
pub fn without_augmentation<R>(f: impl FnOnce() -> Result<R>) -> Result<R> {
    let before = augmentation_calls();
    let out = f()?;
    if augmentation_calls() != before {
        return Err(invalid("evaluation path invoked an augmentation"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        assert!(poly_lr(101, 100, 0.01, 0.9).is_err());
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("bogus".parse::<Policy>().is_err());
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut m = build_model(
            &ModelConfig {
                widths: vec![2],
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let before = m.clone();
        let mut grads: Vec<Vec<f32>> = m.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        grads[0][0] = f32::NAN;
        assert!(matches!(sgd_step(&mut m, &grads, 0.1, 0.9, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(m, before);
    }
}
