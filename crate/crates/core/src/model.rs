//! A tiny fully-convolutional segmentation network.
//!
//! Stride-1 `conv -> relu` stages keep full resolution, followed by a 1x1
//! classifier head. A [`StyleHook`] can be spliced in at the input
//! (position 0) or after any stage (positions 1..=stages).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::{io, Graph, Reduction, Scalar, Tensor, Var};

/// Pixels carrying this label are skipped by the loss and the metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// 0 = input image, `p >= 1` = output of stage `p`.
    pub injection_position: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            widths: vec![16, 32, 32, 16],
            kernel: 3,
            injection_position: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(invalid("model widths must be non-empty and positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid(format!("kernel {} is not odd", self.kernel)));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(invalid("model needs at least one class and one input channel"));
        }
        if self.injection_position > self.widths.len() {
            return Err(invalid(format!(
                "injection position {} exceeds {} stages",
                self.injection_position,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Channel count of the map a hook sees at the configured position.
    pub fn injection_channels(&self) -> usize {
        match self.injection_position {
            0 => self.in_channels,
            p => self.widths[p - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (conv weights yes, biases no).
    pub decay: bool,
}

/// Network parameters plus SGD momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub momentum: Vec<Vec<T>>,
}

/// Transformation spliced into the forward pass at the injection position.
pub trait StyleHook<T: Scalar> {
    fn apply(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Hook that returns its input unchanged.
pub struct PassThrough;

impl<T: Scalar> StyleHook<T> for PassThrough {
    fn apply(&mut self, _g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

impl<T: Scalar, F> StyleHook<T> for F
where
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    fn apply(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self(g, x)
    }
}

/// He-initialized model: weights ~ N(0, 2/fan_in), biases zero.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelState<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut conv = |name: String, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng| {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| normal.sample(rng) as f32);
        params.push(Param {
            name: format!("{name}.weight"),
            value: w,
            decay: true,
        });
        params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(vec![cout]),
            decay: false,
        });
    };
    let mut cin = config.in_channels;
    for (i, &w) in config.widths.iter().enumerate() {
        conv(format!("stage{}", i + 1), w, cin, config.kernel, &mut rng);
        cin = w;
    }
    conv("head".into(), config.num_classes, cin, 1, &mut rng);
    let momentum = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
    Ok(ModelState {
        config: config.clone(),
        params,
        momentum,
    })
}

impl<T: Scalar> ModelState<T> {
    pub fn num_stages(&self) -> usize {
        self.config.widths.len()
    }

    pub fn weight_count(&self) -> usize {
        self.params.iter().filter(|p| p.decay).count()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            momentum: self
                .momentum
                .iter()
                .map(|m| m.iter().map(|v| U::of(v.as_f64())).collect())
                .collect(),
        }
    }

    /// Records the parameters as graph leaves. Frozen bindings record no
    /// parameter gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Builds the forward pass into `g` and returns `[N, K, H, W]` logits.
    /// The hook (if any) runs at the configured injection position.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        images: Var,
        hook: Option<&mut dyn StyleHook<T>>,
    ) -> Result<Var> {
        self.forward_graph_at(g, params, images, self.config.injection_position, hook)
    }

    /// Same as [`Self::forward_graph`] with an explicit hook position.
    pub fn forward_graph_at(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        images: Var,
        pos: usize,
        mut hook: Option<&mut dyn StyleHook<T>>,
    ) -> Result<Var> {
        if pos > self.num_stages() {
            return Err(invalid(format!("injection position {pos} exceeds {} stages", self.num_stages())));
        }
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape,
                right: vec![0, self.config.in_channels, 0, 0],
            });
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                op: "forward",
                expected: self.config.in_channels,
                found: shape[1],
            });
        }
        let pad = self.config.kernel / 2;
        let mut x = images;
        if pos == 0 {
            if let Some(h) = hook.as_deref_mut() {
                x = h.apply(g, x)?;
            }
        }
        for stage in 0..self.num_stages() {
            let y = g.conv2d(x, params[2 * stage], params[2 * stage + 1], 1, pad)?;
            x = g.relu(y)?;
            if pos == stage + 1 {
                if let Some(h) = hook.as_deref_mut() {
                    x = h.apply(g, x)?;
                }
            }
        }
        let head = 2 * self.num_stages();
        g.conv2d(x, params[head], params[head + 1], 1, 0)
    }

    /// Evaluation-mode logits for a `[N, C, H, W]` batch.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_hook(images, None)
    }

    pub fn forward_with_hook(
        &self,
        images: &Tensor<T>,
        hook: Option<&mut dyn StyleHook<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false)?;
        let x = g.constant(images.clone())?;
        let logits = self.forward_graph(&mut g, &params, x, hook)?;
        Ok(g.value(logits).detached())
    }

    /// SHA-256 over the checkpoint payload (config line plus every tensor).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest().as_bytes());
        for p in &self.params {
            h.update(io::encode(&p.value));
        }
        for (p, m) in self.params.iter().zip(&self.momentum) {
            let t = Tensor::new(p.value.shape().to_vec(), m.clone()).expect("momentum shape");
            h.update(io::encode(&t));
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    fn manifest(&self) -> String {
        let c = &self.config;
        let mut s = String::from("# advstyle checkpoint\n");
        let widths: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "in_channels = {}", c.in_channels);
        let _ = writeln!(s, "num_classes = {}", c.num_classes);
        let _ = writeln!(s, "widths = {}", widths.join(","));
        let _ = writeln!(s, "kernel = {}", c.kernel);
        let _ = writeln!(s, "injection_position = {}", c.injection_position);
        for (i, p) in self.params.iter().enumerate() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "tensor {i:02}_{}.atsr {} {}", p.name, p.name, dims.join("x"));
        }
        for (i, p) in self.params.iter().enumerate() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                s,
                "momentum {i:02}_mom.{}.atsr mom.{} {}",
                p.name,
                p.name,
                dims.join("x")
            );
        }
        s
    }

    /// Writes `manifest.txt` plus one ATSR file per parameter and momentum buffer.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        for (i, p) in self.params.iter().enumerate() {
            io::save(&dir.join(format!("{i:02}_{}.atsr", p.name)), &p.value)?;
            let m = Tensor::new(p.value.shape().to_vec(), self.momentum[i].clone())?;
            io::save(&dir.join(format!("{i:02}_mom.{}.atsr", p.name)), &m)?;
        }
        Ok(())
    }
}

impl ModelState<f32> {
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path)?;
        let bad = |msg: String| Error::Format {
            path: manifest_path.clone(),
            msg,
        };
        let mut config = ModelConfig::default();
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["tensor", file, name, _] => {
                    let value = io::load(&dir.join(file))?;
                    params.push(Param {
                        name: name.to_string(),
                        decay: name.ends_with(".weight"),
                        value,
                    });
                }
                ["momentum", file, _, _] => momentum.push(io::load(&dir.join(file))?.into_data()),
                [key, "=", value] => {
                    let num = || -> Result<usize> {
                        value.parse().map_err(|_| bad(format!("bad value for {key}")))
                    };
                    match *key {
                        "in_channels" => config.in_channels = num()?,
                        "num_classes" => config.num_classes = num()?,
                        "kernel" => config.kernel = num()?,
                        "injection_position" => config.injection_position = num()?,
                        "widths" => {
                            config.widths = value
                                .split(',')
                                .map(|w| w.parse().map_err(|_| bad("bad widths".into())))
                                .collect::<Result<_>>()?
                        }
                        other => return Err(bad(format!("unknown key {other}"))),
                    }
                }
                _ => return Err(bad(format!("unparsable line: {line}"))),
            }
        }
        config.validate()?;
        let expected = build_model(&config, 0)?;
        if expected.params.len() != params.len()
            || expected
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.value.shape() != b.value.shape())
        {
            return Err(bad("tensor shapes do not match the config".into()));
        }
        if momentum.len() != params.len() {
            momentum = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        Ok(ModelState {
            config,
            params,
            momentum,
        })
    }
}

/// Pixel-wise cross-entropy averaged over non-ignored pixels.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    g.cross_entropy(logits, labels, Some(IGNORE_INDEX), Reduction::Mean)
}
