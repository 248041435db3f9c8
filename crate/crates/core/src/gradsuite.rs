//! Registry of finite-difference checks: one case per differentiable op plus
//! the composed style-augmented forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{build_model, ModelConfig};
use crate::rng::rng_for;
use crate::style::{decompose_var, recompose_var, STYLE_EPS};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Graph, Reduction, Tensor, Var};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;
/// Name of the composed decompose -> affine -> model -> loss case.
pub const COMPOSED_CASE: &str = "advstyle_forward";

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub f: CaseFn,
    pub inputs: Vec<Tensor<f64>>,
}

impl GradCase {
    fn new(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            f: Box::new(f),
            inputs,
        }
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        grad_check(self.name.clone(), &self.f, &self.inputs, SUITE_EPS, SUITE_TOL)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero by at least `gap`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * w)` with fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_for(seed, &[99]);
    let w = uniform(&mut rng, g.shape(out).to_vec(), -1.0, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// The full registry: every entry of [`DIFFERENTIABLE_OPS`] once, then the
/// composed case.
pub fn suite() -> Vec<GradCase> {
    let mut rng = rng_for(2024, &[]);
    let r = &mut rng;
    let s = vec![2, 3, 4];
    let mut cases = vec![
        GradCase::new("add", vec![uniform(r, vec![2, 3, 3, 3], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)], |g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o, 1)
        }),
        GradCase::new("sub", vec![uniform(r, s.clone(), -1.0, 1.0), uniform(r, s.clone(), -1.0, 1.0)], |g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o, 2)
        }),
        GradCase::new("mul", vec![uniform(r, vec![2, 3, 3, 3], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)], |g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o, 3)
        }),
        GradCase::new("div", vec![uniform(r, s.clone(), -1.0, 1.0), uniform(r, s.clone(), 0.5, 1.5)], |g, v| {
            let o = g.div(v[0], v[1])?;
            project(g, o, 4)
        }),
        GradCase::new("neg", vec![uniform(r, s.clone(), -1.0, 1.0)], |g, v| {
            let o = g.neg(v[0])?;
            project(g, o, 5)
        }),
        GradCase::new("scale", vec![uniform(r, s.clone(), -1.0, 1.0)], |g, v| {
            let o = g.scale(v[0], -2.5)?;
            project(g, o, 6)
        }),
        GradCase::new("add_scalar", vec![uniform(r, s.clone(), -1.0, 1.0)], |g, v| {
            let o = g.add_scalar(v[0], 0.7)?;
            let sq = g.mul(o, o)?;
            g.sum(sq)
        }),
        GradCase::new("sum", vec![uniform(r, s.clone(), -1.0, 1.0)], |g, v| g.sum(v[0])),
        GradCase::new("reshape", vec![uniform(r, s.clone(), -1.0, 1.0)], |g, v| {
            let o = g.reshape(v[0], vec![6, 4])?;
            project(g, o, 9)
        }),
        GradCase::new("relu", vec![away_from_zero(r, s.clone(), 1e-3)], |g, v| {
            let o = g.relu(v[0])?;
            project(g, o, 10)
        }),
        GradCase::new(
            "conv2d",
            vec![
                uniform(r, vec![1, 2, 5, 5], -1.0, 1.0),
                uniform(r, vec![3, 2, 3, 3], -1.0, 1.0),
                uniform(r, vec![3], -1.0, 1.0),
            ],
            |g, v| {
                let o = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(g, o, 11)
            },
        ),
        GradCase::new("channel_mean", vec![uniform(r, vec![2, 3, 4, 4], 0.0, 1.0)], |g, v| {
            let o = g.channel_mean(v[0])?;
            project(g, o, 12)
        }),
        GradCase::new("channel_std", vec![uniform(r, vec![2, 3, 4, 4], 0.0, 1.0)], |g, v| {
            let o = g.channel_std(v[0])?;
            project(g, o, 13)
        }),
        GradCase::new(
            "channel_affine",
            vec![
                uniform(r, vec![2, 3, 4, 4], -1.0, 1.0),
                uniform(r, vec![2, 3], 0.1, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
            ],
            |g, v| {
                let o = g.channel_affine(v[0], v[1], v[2])?;
                project(g, o, 14)
            },
        ),
        GradCase::new("cross_entropy", vec![uniform(r, vec![2, 3, 2, 2], -2.0, 2.0)], |g, v| {
            let labels = [0, 1, 2, 255, 2, 2, 0, 1];
            let a = g.cross_entropy(v[0], &labels, Some(255), Reduction::Mean)?;
            let b = g.cross_entropy(v[0], &labels, Some(255), Reduction::SampleMeanSum)?;
            let b = g.scale(b, 0.5)?;
            g.add(a, b)
        }),
        GradCase::new("crop", vec![uniform(r, vec![2, 5, 6], -1.0, 1.0)], |g, v| {
            let o = g.crop(v[0], (1, 4), (2, 6))?;
            project(g, o, 16)
        }),
        GradCase::new(
            "stitch",
            vec![
                uniform(r, vec![2, 2, 3], -1.0, 1.0),
                uniform(r, vec![2, 2, 2], -1.0, 1.0),
                uniform(r, vec![2, 3, 3], -1.0, 1.0),
                uniform(r, vec![2, 3, 2], -1.0, 1.0),
            ],
            |g, v| {
                let o = g.stitch(v, &[(0, 2), (2, 5)], &[(0, 3), (3, 5)])?;
                project(g, o, 17)
            },
        ),
        GradCase::new("rgb_to_lab", vec![uniform(r, vec![3, 3, 3], 0.1, 0.9)], |g, v| {
            let o = g.rgb_to_lab(v[0])?;
            project(g, o, 18)
        }),
        GradCase::new("lab_to_rgb", vec![lab_inputs(r)], |g, v| {
            let o = g.lab_to_rgb(v[0])?;
            project(g, o, 19)
        }),
    ];
    cases.push(composed_case(r));
    cases
}

fn lab_inputs(r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![3, 3, 3]);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = if i < 9 {
            r.gen_range(30.0..80.0)
        } else {
            r.gen_range(-20.0..20.0)
        };
    }
    t
}

/// decompose(x) -> recompose with free (mean, std) -> tiny model -> loss,
/// differentiated wrt the image, the style stats and every model parameter.
fn composed_case(r: &mut ChaCha8Rng) -> GradCase {
    let cfg = ModelConfig {
        widths: vec![4, 4],
        num_classes: 3,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, 7).expect("valid config").cast::<f64>();
    let labels: Vec<u8> = (0..25).map(|_| r.gen_range(0..3)).collect();
    let mut inputs = vec![
        uniform(r, vec![1, 3, 5, 5], 0.0, 1.0),
        uniform(r, vec![1, 3], 0.2, 0.8),
        uniform(r, vec![1, 3], 0.1, 0.4),
    ];
    inputs.extend(model.params.iter().map(|p| p.value.clone()));
    GradCase::new(COMPOSED_CASE, inputs, move |g, v| {
        let d = decompose_var(g, v[0], STYLE_EPS)?;
        let x = recompose_var(g, d.normalized, v[1], v[2])?;
        let logits = model.forward_graph(g, &v[3..], x, None)?;
        crate::model::seg_loss(g, logits, &labels)
    })
}

/// A deliberately broken case: the square's adjoint is dropped by routing the
/// forward value through a constant, so the analytic gradient is wrong.
pub fn wrong_adjoint_fixture() -> GradCase {
    let mut rng = rng_for(5, &[]);
    GradCase::new("wrong_adjoint_fixture", vec![uniform(&mut rng, vec![4], 0.5, 1.0)], |g, v| {
        let sq = g.value(v[0]).map(|x| x * x);
        let c = g.constant(sq)?;
        let o = g.add(c, v[0])?;
        g.sum(o)
    })
}

/// Runs each case, returning reports in registry order.
pub fn run_suite(cases: &[GradCase]) -> Result<Vec<GradCheckReport>> {
    cases.iter().map(GradCase::run).collect()
}

/// Names of the registry in order; every differentiable op then the composed case.
pub fn registry_names() -> Vec<String> {
    suite().into_iter().map(|c| c.name).collect()
}
