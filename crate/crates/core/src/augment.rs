//! Sample-generation strategies: adversarial style augmentation and the
//! baselines it is compared against.
//!
//! Adversarial style learning treats the per-channel mean/std of an image (or
//! of a feature map at the model's injection position) as free parameters,
//! takes one raw-gradient ascent step on the segmentation loss with the
//! model frozen, and recomposes the normalized content with the moved
//! statistics.

use std::cell::Cell;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rand_distr::{Beta, Normal};

use crate::error::{invalid, Error, Result};
use crate::model::{seg_loss, ModelState, StyleHook};
use crate::rng::rng_for;
use crate::style::{
    decompose_patches_var, decompose_var, recompose_patches_var, recompose_var, StyleStats,
    STYLE_EPS,
};
use crate::synthetic::LabeledImage;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Lower bound applied to any std produced by an augmentation.
pub const SIGMA_FLOOR: f32 = 1e-4;

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

fn count_call() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of augmentation invocations made on the current thread.
pub fn augmentation_calls() -> u64 {
    CALLS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ColorSpace {
    #[default]
    Rgb,
    /// Stats live in CIE Lab; the recomposed sample is converted back to RGB
    /// and gradients flow through that conversion.
    Lab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Granularity {
    #[default]
    Whole,
    /// Independent stats for each cell of an even 2x2 grid.
    Patches2x2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvConfig {
    /// Ascent step size on the style statistics.
    pub gamma: f32,
    pub steps: usize,
    pub clamp_std_min: f32,
    /// Clamp adversarial images to `[0, 1]` (export only; training keeps them raw).
    pub clamp_image: bool,
    pub space: ColorSpace,
    pub granularity: Granularity,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            steps: 1,
            clamp_std_min: SIGMA_FLOOR,
            clamp_image: false,
            space: ColorSpace::Rgb,
            granularity: Granularity::Whole,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(invalid(format!("adversarial gamma {} must be >= 0", self.gamma)));
        }
        if self.steps == 0 {
            return Err(invalid("adversarial steps must be >= 1"));
        }
        if !(self.clamp_std_min > 0.0) {
            return Err(invalid("clamp_std_min must be > 0"));
        }
        Ok(())
    }

    pub fn layout(&self) -> StyleLayout {
        StyleLayout {
            space: self.space,
            granularity: self.granularity,
        }
    }
}

/// Where and in which representation style statistics are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StyleLayout {
    pub space: ColorSpace,
    pub granularity: Granularity,
}

impl StyleLayout {
    fn grid(&self) -> (usize, usize) {
        match self.granularity {
            Granularity::Whole => (1, 1),
            Granularity::Patches2x2 => (2, 2),
        }
    }

    /// Normalized content plus `(mean, std)` handles per cell.
    pub fn split<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Vec<(Var, Var)>)> {
        let x = match self.space {
            ColorSpace::Rgb => x,
            ColorSpace::Lab => g.rgb_to_lab(x)?,
        };
        let eps = T::of(STYLE_EPS);
        match self.grid() {
            (1, 1) => {
                let d = decompose_var(g, x, eps)?;
                Ok((d.normalized, vec![(d.mean, d.std)]))
            }
            (r, c) => decompose_patches_var(g, x, r, c, eps),
        }
    }

    pub fn merge<T: Scalar>(&self, g: &mut Graph<T>, normalized: Var, stats: &[(Var, Var)]) -> Result<Var> {
        let out = match self.grid() {
            (1, 1) => {
                let (m, s) = *stats
                    .first()
                    .ok_or_else(|| invalid("missing style stats"))?;
                recompose_var(g, normalized, m, s)?
            }
            (r, c) => recompose_patches_var(g, normalized, r, c, stats)?,
        };
        match self.space {
            ColorSpace::Rgb => Ok(out),
            ColorSpace::Lab => g.lab_to_rgb(out),
        }
    }
}

/// Style statistics of a batch: per cell, `[N, C]` means and stds.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStyle<T = f32> {
    pub cells: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> BatchStyle<T> {
    fn read(g: &Graph<T>, stats: &[(Var, Var)]) -> Self {
        Self {
            cells: stats
                .iter()
                .map(|(m, s)| (g.value(*m).detached(), g.value(*s).detached()))
                .collect(),
        }
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<(Var, Var)>> {
        self.cells
            .iter()
            .map(|(m, s)| {
                if trainable {
                    Ok((g.param(m.clone())?, g.param(s.clone())?))
                } else {
                    Ok((g.constant(m.clone())?, g.constant(s.clone())?))
                }
            })
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.cells.first().map(|(m, _)| m.shape()[0]).unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.cells.first().map(|(m, _)| m.shape()[1]).unwrap_or(0)
    }

    /// Per-cell stats of sample `n`.
    pub fn sample(&self, n: usize) -> Vec<StyleStats<T>> {
        let c = self.channels();
        self.cells
            .iter()
            .map(|(m, s)| StyleStats {
                mean: m.data()[n * c..(n + 1) * c].to_vec(),
                std: s.data()[n * c..(n + 1) * c].to_vec(),
            })
            .collect()
    }

    /// Mean over samples of the L2 shift of the (means, stds) relative to `base`.
    pub fn shift_from(&self, base: &Self) -> (f64, f64) {
        let n = self.batch_size();
        if n == 0 {
            return (0.0, 0.0);
        }
        let (mut dm, mut ds) = (0.0, 0.0);
        for i in 0..n {
            let (mut a, mut b) = (0.0, 0.0);
            for (x, y) in self.sample(i).iter().zip(base.sample(i)) {
                let (sm, ss) = x.shift_l2(&y);
                a += sm * sm;
                b += ss * ss;
            }
            dm += a.sqrt();
            ds += b.sqrt();
        }
        (dm / n as f64, ds / n as f64)
    }

    pub fn cast<U: Scalar>(&self) -> BatchStyle<U> {
        BatchStyle {
            cells: self.cells.iter().map(|(m, s)| (m.cast(), s.cast())).collect(),
        }
    }

    pub fn map_stats(&self, mut f: impl FnMut(usize, usize, T, T) -> (T, T)) -> Result<Self> {
        let c = self.channels();
        let cells = self
            .cells
            .iter()
            .map(|(m, s)| {
                let mut mean = m.detached();
                let mut std = s.detached();
                for (i, (mv, sv)) in mean.data_mut().iter_mut().zip(std.data_mut()).enumerate() {
                    (*mv, *sv) = f(i / c, i % c, *mv, *sv);
                }
                Ok((mean, std))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells })
    }
}

/// Stage-1 hook: exposes the style statistics at the injection point as
/// differentiable leaves.
struct AdversarialHook<'a, T: Scalar> {
    layout: StyleLayout,
    start: Option<&'a BatchStyle<T>>,
    leaves: Vec<(Var, Var)>,
    observed: Option<BatchStyle<T>>,
}

impl<T: Scalar> StyleHook<T> for AdversarialHook<'_, T> {
    fn apply(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (normalized, stats) = self.layout.split(g, x)?;
        let observed = BatchStyle::read(g, &stats);
        self.leaves = self.start.unwrap_or(&observed).bind(g, true)?;
        self.observed = Some(observed);
        self.layout.merge(g, normalized, &self.leaves)
    }
}

/// Stage-2 hook: replaces the statistics at the injection point with
/// `transform(observed)`, held constant.
pub struct RestyleHook<T: Scalar, F> {
    pub layout: StyleLayout,
    pub transform: F,
    /// `(observed, applied)` of the last application.
    pub last: Option<(BatchStyle<T>, BatchStyle<T>)>,
}

impl<T: Scalar, F> RestyleHook<T, F>
where
    F: FnMut(&BatchStyle<T>) -> Result<BatchStyle<T>>,
{
    pub fn new(layout: StyleLayout, transform: F) -> Self {
        Self {
            layout,
            transform,
            last: None,
        }
    }
}

impl<T: Scalar, F> StyleHook<T> for RestyleHook<T, F>
where
    F: FnMut(&BatchStyle<T>) -> Result<BatchStyle<T>>,
{
    fn apply(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        count_call();
        let (normalized, stats) = self.layout.split(g, x)?;
        let observed = BatchStyle::read(g, &stats);
        let applied = (self.transform)(&observed)?;
        if applied.cells.len() != observed.cells.len()
            || applied
                .cells
                .iter()
                .zip(&observed.cells)
                .any(|(a, o)| a.0.shape() != o.0.shape() || a.1.shape() != o.1.shape())
        {
            return Err(invalid("restyle transform changed the stats layout"));
        }
        let leaves = applied.bind(g, false)?;
        let out = self.layout.merge(g, normalized, &leaves)?;
        self.last = Some((observed, applied));
        Ok(out)
    }
}

/// Result of adversarial style learning on a batch.
#[derive(Clone, Debug)]
pub struct AdvOutcome<T = f32> {
    pub initial: BatchStyle<T>,
    pub learned: BatchStyle<T>,
    /// Mini-batch segmentation loss before the first step.
    pub loss_before: f64,
}

fn check_position<T: Scalar>(model: &ModelState<T>, position: usize, layout: &StyleLayout) -> Result<()> {
    if position > model.num_stages() {
        return Err(invalid(format!(
            "injection position {position} exceeds {} stages",
            model.num_stages()
        )));
    }
    if layout.space == ColorSpace::Lab && position != 0 {
        return Err(invalid("Lab style space is only defined at the image level"));
    }
    Ok(())
}

/// Learns adversarial style statistics for a `[N, C, H, W]` batch at the
/// given injection position: `steps` ascent steps of size `gamma` on the raw
/// gradient of the mini-batch segmentation loss, model parameters frozen.
pub fn learn_adversarial_style<T: Scalar>(
    model: &ModelState<T>,
    images: &Tensor<T>,
    labels: &[u8],
    position: usize,
    cfg: &AdvConfig,
) -> Result<AdvOutcome<T>> {
    cfg.validate()?;
    let layout = cfg.layout();
    check_position(model, position, &layout)?;
    count_call();
    let gamma = T::of(cfg.gamma as f64);
    let floor = T::of(cfg.clamp_std_min as f64);
    let mut initial: Option<BatchStyle<T>> = None;
    let mut current: Option<BatchStyle<T>> = None;
    let mut loss_before = f64::NAN;
    let steps = if cfg.gamma == 0.0 { 1 } else { cfg.steps };
    for step in 0..steps {
        let mut g = Graph::new();
        let params = model.bind(&mut g, false)?;
        let x = g.constant(images.detached())?;
        let mut hook = AdversarialHook {
            layout,
            start: current.as_ref(),
            leaves: Vec::new(),
            observed: None,
        };
        let logits = model.forward_graph_at(&mut g, &params, x, position, Some(&mut hook))?;
        let (leaves, observed) = (hook.leaves, hook.observed);
        let base = match current.take() {
            Some(c) => c,
            None => observed.ok_or_else(|| invalid("style hook was not reached"))?,
        };
        if initial.is_none() {
            initial = Some(base.clone());
        }
        if cfg.gamma == 0.0 {
            current = Some(base);
            break;
        }
        let loss = seg_loss(&mut g, logits, labels)?;
        if step == 0 {
            loss_before = g.value(loss).data()[0].as_f64();
        }
        g.backward(loss)?;
        let cells = base
            .cells
            .iter()
            .zip(&leaves)
            .map(|((m, s), (vm, vs))| {
                let gm = g.grad(*vm).ok_or_else(|| invalid("missing mean gradient"))?;
                let gs = g.grad(*vs).ok_or_else(|| invalid("missing std gradient"))?;
                let mean = Tensor::new(
                    m.shape().to_vec(),
                    m.data().iter().zip(gm).map(|(v, d)| *v + gamma * *d).collect(),
                )?;
                let std = Tensor::new(
                    s.shape().to_vec(),
                    s.data()
                        .iter()
                        .zip(gs)
                        .map(|(v, d)| (*v + gamma * *d).max(floor))
                        .collect(),
                )?;
                Ok((mean, std))
            })
            .collect::<Result<Vec<_>>>()?;
        current = Some(BatchStyle { cells });
    }
    let learned = current.ok_or_else(|| invalid("no adversarial step was taken"))?;
    Ok(AdvOutcome {
        initial: initial.expect("set on the first step"),
        learned,
        loss_before,
    })
}

/// One adversarial style update for a single image given its normalized
/// content and current stats:
/// `mean += gamma * dL/dmean`, `std += gamma * dL/dstd`, then `std >= SIGMA_FLOOR`.
pub fn adv_style_step<T: Scalar>(
    model: &ModelState<T>,
    normalized: &Tensor<T>,
    stats: &StyleStats<T>,
    labels: &[u8],
    gamma: T,
) -> Result<StyleStats<T>> {
    if !(gamma >= T::zero()) {
        return Err(invalid(format!("adversarial gamma {gamma} must be >= 0")));
    }
    count_call();
    if gamma == T::zero() {
        return Ok(stats.clone());
    }
    let s = normalized.shape();
    if s.len() != 3 || s[0] != stats.channels() {
        return Err(Error::ChannelMismatch {
            op: "adv_style_step",
            expected: stats.channels(),
            found: s.first().copied().unwrap_or(0),
        });
    }
    let c = s[0];
    let mut g = Graph::new();
    let params = model.bind(&mut g, false)?;
    let xbar = g.constant(normalized.detached().reshape(vec![1, s[0], s[1], s[2]])?)?;
    let mean = g.param(Tensor::new(vec![1, c], stats.mean.clone())?)?;
    let std = g.param(Tensor::new(vec![1, c], stats.std.clone())?)?;
    let x = recompose_var(&mut g, xbar, mean, std)?;
    let logits = model.forward_graph_at(&mut g, &params, x, 0, None)?;
    let loss = seg_loss(&mut g, logits, labels)?;
    g.backward(loss)?;
    let floor = T::of(SIGMA_FLOOR as f64);
    let gm = g.grad(mean).expect("mean is a leaf");
    let gs = g.grad(std).expect("std is a leaf");
    Ok(StyleStats {
        mean: stats.mean.iter().zip(gm).map(|(v, d)| *v + gamma * *d).collect(),
        std: stats
            .std
            .iter()
            .zip(gs)
            .map(|(v, d)| (*v + gamma * *d).max(floor))
            .collect(),
    })
}

/// Recomposes `images` with `style` (per sample, per cell) under `layout`.
pub fn restyle_images<T: Scalar>(
    layout: &StyleLayout,
    images: &Tensor<T>,
    style: &BatchStyle<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(images.detached())?;
    let (normalized, _) = layout.split(&mut g, x)?;
    let leaves = style.bind(&mut g, false)?;
    let out = layout.merge(&mut g, normalized, &leaves)?;
    Ok(g.value(out).detached())
}

/// Style statistics of `images` under `layout`.
pub fn extract_style<T: Scalar>(layout: &StyleLayout, images: &Tensor<T>) -> Result<BatchStyle<T>> {
    let mut g = Graph::new();
    let x = g.constant(images.detached())?;
    let (_, stats) = layout.split(&mut g, x)?;
    Ok(BatchStyle::read(&g, &stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    AdvStyle,
    AdvPixel,
    RandStyle,
    MixStyle,
    CrossStyle,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::AdvStyle => "advstyle",
            Strategy::AdvPixel => "advpixel",
            Strategy::RandStyle => "randstyle",
            Strategy::MixStyle => "mixstyle",
            Strategy::CrossStyle => "crossstyle",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "advstyle" => Strategy::AdvStyle,
            "advpixel" => Strategy::AdvPixel,
            "randstyle" => Strategy::RandStyle,
            "mixstyle" => Strategy::MixStyle,
            "crossstyle" => Strategy::CrossStyle,
            other => return Err(invalid(format!("unknown strategy {other}"))),
        })
    }
}

/// Which strategy produced a sample and the per-cell stats before/after.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub strategy: Strategy,
    pub before: Vec<StyleStats>,
    pub after: Vec<StyleStats>,
}

#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub original: Vec<LabeledImage>,
    pub augmented: Vec<LabeledImage>,
    pub provenance: Vec<Provenance>,
}

fn stack_images(samples: &[LabeledImage]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = Tensor::stack(&images)?;
    let labels = samples
        .iter()
        .flat_map(|s| s.label.data.iter().copied())
        .collect();
    Ok((batch, labels))
}

fn unstack(samples: &[LabeledImage], images: &Tensor<f32>, clamp: bool) -> Result<Vec<LabeledImage>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut img = images.index_outer(i)?;
            if clamp {
                img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            s.restyled(img)
        })
        .collect()
}

/// Image-level adversarial style augmentation of a batch of equally sized samples.
pub fn adv_style_batch(
    model: &ModelState<f32>,
    samples: &[LabeledImage],
    cfg: &AdvConfig,
) -> Result<AugmentedBatch> {
    let (images, labels) = stack_images(samples)?;
    let outcome = learn_adversarial_style(model, &images, &labels, 0, cfg)?;
    let out = restyle_images(&cfg.layout(), &images, &outcome.learned)?;
    let augmented = unstack(samples, &out, cfg.clamp_image)?;
    let provenance = (0..samples.len())
        .map(|i| Provenance {
            strategy: Strategy::AdvStyle,
            before: outcome.initial.sample(i),
            after: outcome.learned.sample(i),
        })
        .collect();
    Ok(AugmentedBatch {
        original: samples.to_vec(),
        augmented,
        provenance,
    })
}

pub fn adv_style_augment(model: &ModelState<f32>, x: &LabeledImage, cfg: &AdvConfig) -> Result<LabeledImage> {
    let mut batch = adv_style_batch(model, std::slice::from_ref(x), cfg)?;
    Ok(batch.augmented.remove(0))
}

fn single_style(x: &LabeledImage) -> Result<(Tensor<f32>, BatchStyle<f32>)> {
    let c = x.channels();
    let s = x.image.shape();
    let batch = x.image.detached().reshape(vec![1, c, s[1], s[2]])?;
    let style = extract_style(&StyleLayout::default(), &batch)?;
    Ok((batch, style))
}

fn finish_single(x: &LabeledImage, batch: &Tensor<f32>, style: &BatchStyle<f32>) -> Result<LabeledImage> {
    let out = restyle_images(&StyleLayout::default(), batch, style)?;
    x.restyled(out.index_outer(0)?)
}

/// Adds `N(0, noise_std^2)` to every mean and std of a batch style, then
/// floors the stds at [`SIGMA_FLOOR`].
pub fn perturb_gaussian<R: Rng>(style: &BatchStyle<f32>, noise_std: f32, rng: &mut R) -> Result<BatchStyle<f32>> {
    if !(noise_std >= 0.0) {
        return Err(invalid("noise_std must be >= 0"));
    }
    if noise_std == 0.0 {
        return style.map_stats(|_, _, m, s| (m, s.max(SIGMA_FLOOR)));
    }
    let normal = Normal::new(0.0f32, noise_std).map_err(|e| invalid(e.to_string()))?;
    style.map_stats(|_, _, m, s| {
        let dm = normal.sample(rng);
        let ds = normal.sample(rng);
        (m + dm, (s + ds).max(SIGMA_FLOOR))
    })
}

/// Random style: Gaussian noise on the image's channel means and stds.
pub fn rand_style(x: &LabeledImage, noise_std: f32, seed: u64) -> Result<LabeledImage> {
    count_call();
    let (batch, style) = single_style(x)?;
    let mut rng = rng_for(seed, &[0x7a_6e]);
    let noisy = perturb_gaussian(&style, noise_std, &mut rng)?;
    finish_single(x, &batch, &noisy)
}

/// Draws a mixing weight from Beta(0.1, 0.1).
pub fn sample_mix_lambda<R: Rng>(rng: &mut R) -> f32 {
    Beta::new(0.1f32, 0.1).expect("valid beta").sample(rng)
}

/// Batch stats mixed with a partner: `lambda_i * s_i + (1 - lambda_i) * s_partner(i)`.
pub fn mix_stats(style: &BatchStyle<f32>, partner: &[usize], lambdas: &[f32]) -> Result<BatchStyle<f32>> {
    let n = style.batch_size();
    if partner.len() != n || lambdas.len() != n || partner.iter().any(|p| *p >= n) {
        return Err(invalid("mix partners/lambdas do not match the batch"));
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(invalid("mix lambda must lie in [0, 1]"));
    }
    let c = style.channels();
    let cells = style
        .cells
        .iter()
        .map(|(m, s)| {
            let mix = |t: &Tensor<f32>| {
                Tensor::from_fn(t.shape().to_vec(), |i| {
                    let (row, ch) = (i / c, i % c);
                    let l = lambdas[row];
                    l * t.data()[i] + (1.0 - l) * t.data()[partner[row] * c + ch]
                })
            };
            (mix(m), mix(s))
        })
        .collect();
    Ok(BatchStyle { cells })
}

/// Convex mix of two samples' styles applied to `a`'s content; keeps `a`'s label.
pub fn mix_style(a: &LabeledImage, b: &LabeledImage, lambda: f32) -> Result<LabeledImage> {
    count_call();
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mix lambda {lambda} outside [0, 1]")));
    }
    if a.channels() != b.channels() {
        return Err(Error::ChannelMismatch {
            op: "mix_style",
            expected: a.channels(),
            found: b.channels(),
        });
    }
    let (batch, sa) = single_style(a)?;
    let (_, sb) = single_style(b)?;
    let both = BatchStyle {
        cells: vec![(
            Tensor::stack(&[sa.cells[0].0.index_outer(0)?, sb.cells[0].0.index_outer(0)?])?,
            Tensor::stack(&[sa.cells[0].1.index_outer(0)?, sb.cells[0].1.index_outer(0)?])?,
        )],
    };
    let mixed = mix_stats(&both, &[1, 0], &[lambda, lambda])?;
    let only_a = BatchStyle {
        cells: vec![(
            mixed.cells[0].0.index_outer(0)?.reshape(vec![1, a.channels()])?,
            mixed.cells[0].1.index_outer(0)?.reshape(vec![1, a.channels()])?,
        )],
    };
    finish_single(a, &batch, &only_a)
}

/// Batch stats with sample `i` taking the stats of `partner[i]`.
pub fn permute_stats(style: &BatchStyle<f32>, partner: &[usize]) -> Result<BatchStyle<f32>> {
    mix_stats(style, partner, &vec![0.0; partner.len()])
}

/// Swaps the styles of two samples.
pub fn cross_style(a: &LabeledImage, b: &LabeledImage) -> Result<(LabeledImage, LabeledImage)> {
    count_call();
    if a.channels() != b.channels() {
        return Err(Error::ChannelMismatch {
            op: "cross_style",
            expected: a.channels(),
            found: b.channels(),
        });
    }
    let (ba, sa) = single_style(a)?;
    let (bb, sb) = single_style(b)?;
    Ok((finish_single(a, &ba, &sb)?, finish_single(b, &bb, &sa)?))
}

/// Pixel-space ascent on a batch: `x += lr * dL/dx`, `steps` times, model frozen.
pub fn adv_pixel_images<T: Scalar>(
    model: &ModelState<T>,
    images: &Tensor<T>,
    labels: &[u8],
    lr: T,
    steps: usize,
) -> Result<Tensor<T>> {
    if !(lr >= T::zero()) {
        return Err(invalid(format!("adversarial pixel lr {lr} must be >= 0")));
    }
    count_call();
    let mut x = images.detached();
    if lr == T::zero() {
        return Ok(x);
    }
    for _ in 0..steps {
        let mut g = Graph::new();
        let params = model.bind(&mut g, false)?;
        let xv = g.param(x.clone())?;
        let logits = model.forward_graph_at(&mut g, &params, xv, 0, None)?;
        let loss = seg_loss(&mut g, logits, labels)?;
        g.backward(loss)?;
        let grad = g.grad(xv).expect("input is a leaf");
        for (v, d) in x.data_mut().iter_mut().zip(grad) {
            *v = *v + lr * *d;
        }
    }
    Ok(x)
}

pub fn adv_pixel(model: &ModelState<f32>, x: &LabeledImage, lr: f32, steps: usize) -> Result<LabeledImage> {
    let s = x.image.shape();
    let batch = x.image.detached().reshape(vec![1, s[0], s[1], s[2]])?;
    let out = adv_pixel_images(model, &batch, &x.label.data, lr, steps)?;
    x.restyled(out.index_outer(0)?)
}

/// Seeded categorical choice among strategies.
pub fn policy_select<'a, S, R: Rng>(strategies: &'a [S], weights: &[f64], rng: &mut R) -> Result<&'a S> {
    if strategies.is_empty() {
        return Err(invalid("policy_select over an empty strategy list"));
    }
    if weights.len() != strategies.len() {
        return Err(invalid("one weight per strategy is required"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("policy weights sum to {total}, expected 1")));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| invalid(e.to_string()))?;
    Ok(&strategies[dist.sample(rng)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::style::decompose;
    use crate::synthetic::{generate_scene, DomainSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64) -> LabeledImage {
        generate_scene(&DomainSpec::source().with_size(12, 12), seed).unwrap()
    }

    fn tiny_model() -> ModelState<f32> {
        build_model(
            &ModelConfig {
                widths: vec![4],
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_gamma_leaves_image_unchanged() {
        let x = scene(1);
        let cfg = AdvConfig {
            gamma: 0.0,
            ..AdvConfig::default()
        };
        let out = adv_style_augment(&tiny_model(), &x, &cfg).unwrap();
        assert!(out.image.max_abs_diff(&x.image).unwrap() < 1e-5);
        assert!(std::sync::Arc::ptr_eq(&out.label, &x.label));
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let x = scene(1);
        let (n, s) = decompose(&x.image, 1e-6).unwrap();
        assert!(adv_style_step(&tiny_model(), &n, &s, &x.label.data, -1.0).is_err());
        let cfg = AdvConfig {
            gamma: -0.5,
            ..AdvConfig::default()
        };
        assert!(adv_style_augment(&tiny_model(), &x, &cfg).is_err());
    }

    #[test]
    fn mix_lambda_range_is_enforced() {
        assert!(mix_style(&scene(1), &scene(2), 1.5).is_err());
        assert!(mix_style(&scene(1), &scene(2), -0.1).is_err());
    }

    #[test]
    fn policy_select_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty: [Strategy; 0] = [];
        assert!(policy_select(&empty, &[], &mut rng).is_err());
        let one = [Strategy::AdvStyle];
        for _ in 0..20 {
            assert_eq!(*policy_select(&one, &[1.0], &mut rng).unwrap(), Strategy::AdvStyle);
        }
        let two = [Strategy::AdvPixel, Strategy::AdvStyle];
        for _ in 0..50 {
            assert_eq!(*policy_select(&two, &[1.0, 0.0], &mut rng).unwrap(), Strategy::AdvPixel);
        }
        assert!(policy_select(&two, &[0.3, 0.3], &mut rng).is_err());
    }

    #[test]
    fn lab_at_feature_level_is_rejected() {
        let model = build_model(
            &ModelConfig {
                widths: vec![4],
                injection_position: 1,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let x = scene(3);
        let s = x.image.shape().to_vec();
        let batch = x.image.clone().reshape(vec![1, s[0], s[1], s[2]]).unwrap();
        let cfg = AdvConfig {
            space: ColorSpace::Lab,
            ..AdvConfig::default()
        };
        assert!(learn_adversarial_style(&model, &batch, &x.label.data, 1, &cfg).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in [
            Strategy::AdvStyle,
            Strategy::AdvPixel,
            Strategy::RandStyle,
            Strategy::MixStyle,
            Strategy::CrossStyle,
        ] {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
    }
}
