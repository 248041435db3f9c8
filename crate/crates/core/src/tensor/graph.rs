use super::color::{lab_to_rgb_jac, rgb_to_lab_jac};
use super::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Names of every differentiable operation the graph records.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "sum",
    "reshape",
    "relu",
    "conv2d",
    "channel_mean",
    "channel_std",
    "channel_affine",
    "cross_entropy",
    "crop",
    "stitch",
    "rgb_to_lab",
    "lab_to_rgb",
];

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How pixel losses are combined by [`Graph::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over every non-ignored pixel of the batch.
    #[default]
    Mean,
    /// Per-sample mean over non-ignored pixels, summed over the batch.
    /// Each sample's gradient then equals its own single-sample gradient.
    SampleMeanSum,
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// Right operand has the leading (non-spatial) dims only.
    Spatial { plane: usize },
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geo: ConvGeometry,
    },
    ChannelMean {
        x: Var,
        plane: usize,
    },
    ChannelStd {
        x: Var,
        plane: usize,
        mean: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        plane: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
        weights: Vec<T>,
        classes: usize,
        plane: usize,
    },
    Crop {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    Stitch {
        cells: Vec<Var>,
        row_bounds: Vec<(usize, usize)>,
        col_bounds: Vec<(usize, usize)>,
    },
    RgbToLab(Var),
    LabToRgb(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
///
/// Values are computed eagerly as ops are recorded; [`Graph::backward`]
/// replays the record in reverse exactly once and then seals the graph.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn spatial_split(shape: &[usize]) -> (usize, usize) {
    let r = shape.len();
    if r < 2 {
        return (shape.iter().product(), 1);
    }
    (shape[..r - 2].iter().product(), shape[r - 2] * shape[r - 1])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// was marked with [`Tensor::requiring_grad`].
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let needs = tensor.requires_grad();
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.detached())
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.detached().requiring_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = if sa == sb {
            Broadcast::Same
        } else if sa.len() >= 2 && sb == sa[..sa.len() - 2] {
            Broadcast::Spatial {
                plane: spatial_split(&sa).1,
            }
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: sa,
                right: sb,
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = match bcast {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Spatial { plane } => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i / plane]))
                .collect(),
        };
        let needs = self.needs(&[a, b]);
        self.push(
            Tensor::new(sa, data)?,
            Op::Binary { kind, a, b, bcast },
            needs,
        )
    }

    /// Elementwise sum. `b` may match `a` or carry only `a`'s leading dims
    /// (broadcast over the two trailing spatial dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| -v);
        let needs = self.needs(&[a]);
        self.push(t, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|v| v + c);
        let needs = self.needs(&[a]);
        self.push(t, Op::AddScalar(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).detached().reshape(shape)?;
        let needs = self.needs(&[a]);
        self.push(t, Op::Reshape(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[a]);
        self.push(t, Op::Relu(a), needs)
    }

    /// 2-D cross-correlation over `[N, Cin, H, W]` with a square odd kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        if si[1] != sw[1] {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: sw[1],
                found: si[1],
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: sb,
                right: vec![sw[0]],
            });
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::InvalidConv(format!("kernel size {k} is not odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidConv("stride must be positive".into()));
        }
        let out_dim = |len: usize| -> Result<usize> {
            let span = len + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::InvalidConv(format!(
                    "output size ({len} + 2*{padding} - {k})/{stride} + 1 is not integral"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let geo = ConvGeometry {
            batch: si[0],
            in_channels: si[1],
            out_channels: sw[0],
            height: si[2],
            width: si[3],
            kernel: k,
            stride,
            padding,
            out_height: out_dim(si[2])?,
            out_width: out_dim(si[3])?,
        };
        let out = conv2d_forward(
            &geo,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(
            vec![geo.batch, geo.out_channels, geo.out_height, geo.out_width],
            out,
        )?;
        let needs = self.needs(&[input, weight, bias]);
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            needs,
        )
    }

    fn require_spatial(&self, op: &'static str, x: Var) -> Result<(Vec<usize>, usize, usize)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] * shape[shape.len() - 2] == 0 {
            return Err(Error::ShapeMismatch {
                op,
                left: shape,
                right: vec![],
            });
        }
        let (lead, plane) = spatial_split(&shape);
        Ok((shape, lead, plane))
    }

    /// Per-channel spatial mean; output has the leading dims of `x`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (shape, lead, plane) = self.require_spatial("channel_mean", x)?;
        let v = self.value(x).data();
        let inv = T::one() / T::of(plane as f64);
        let data: Vec<T> = (0..lead)
            .map(|c| v[c * plane..(c + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(shape[..shape.len() - 2].to_vec(), data)?,
            Op::ChannelMean { x, plane },
            needs,
        )
    }

    /// Per-channel population standard deviation (divides by H*W).
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let (shape, lead, plane) = self.require_spatial("channel_std", x)?;
        let v = self.value(x).data();
        let inv = T::one() / T::of(plane as f64);
        let mut mean = Vec::with_capacity(lead);
        let mut std = Vec::with_capacity(lead);
        for c in 0..lead {
            let s = &v[c * plane..(c + 1) * plane];
            let m = s.iter().copied().sum::<T>() * inv;
            let var = s.iter().map(|&x| (x - m) * (x - m)).sum::<T>() * inv;
            mean.push(m);
            std.push(var.sqrt());
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(shape[..shape.len() - 2].to_vec(), std)?,
            Op::ChannelStd { x, plane, mean },
            needs,
        )
    }

    pub fn channel_moments(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.channel_mean(x)?, self.channel_std(x)?))
    }

    /// `x * scale + shift` with per-channel `scale`/`shift`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (shape, lead, plane) = self.require_spatial("channel_affine", x)?;
        let lead_shape = &shape[..shape.len() - 2];
        for (name, v) in [("channel_affine scale", scale), ("channel_affine shift", shift)] {
            if self.shape(v) != lead_shape {
                return Err(match (self.shape(v).last(), lead_shape.last()) {
                    (Some(&found), Some(&expected)) if self.shape(v).len() == lead_shape.len() => {
                        Error::ChannelMismatch {
                            op: name,
                            expected,
                            found,
                        }
                    }
                    _ => Error::ShapeMismatch {
                        op: name,
                        left: lead_shape.to_vec(),
                        right: self.shape(v).to_vec(),
                    },
                });
            }
        }
        let xv = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut data = Vec::with_capacity(xv.len());
        for c in 0..lead {
            data.extend(xv[c * plane..(c + 1) * plane].iter().map(|&v| v * sc[c] + sh[c]));
        }
        let needs = self.needs(&[x, scale, shift]);
        self.push(
            Tensor::new(shape, data)?,
            Op::ChannelAffine {
                x,
                scale,
                shift,
                plane,
            },
            needs,
        )
    }

    /// Pixel-wise softmax cross-entropy over `[N, K, H, W]` logits.
    ///
    /// `labels` has `N*H*W` entries; pixels equal to `ignore_index` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore_index: Option<u8>,
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![],
            });
        }
        let (n, k, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if labels.len() != n * plane {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy labels",
                left: vec![n, shape[2], shape[3]],
                right: vec![labels.len()],
            });
        }
        for &l in labels {
            if Some(l) != ignore_index && l as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: k,
                });
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut pixel_loss = vec![T::zero(); n * plane];
        let mut valid = vec![false; n * plane];
        for s in 0..n {
            let base = s * k * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let mut m = z[at(0)];
                for c in 1..k {
                    m = m.max(z[at(c)]);
                }
                let mut denom = T::zero();
                for c in 0..k {
                    let e = (z[at(c)] - m).exp();
                    probs[at(c)] = e;
                    denom = denom + e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / denom;
                }
                let label = labels[s * plane + p];
                if Some(label) != ignore_index {
                    valid[s * plane + p] = true;
                    pixel_loss[s * plane + p] = m + denom.ln() - z[at(label as usize)];
                }
            }
        }
        let mut weights = vec![T::zero(); n * plane];
        match reduction {
            Reduction::Mean => {
                let count = valid.iter().filter(|v| **v).count();
                if count > 0 {
                    let w = T::one() / T::of(count as f64);
                    for (wi, _) in weights.iter_mut().zip(&valid).filter(|(_, v)| **v) {
                        *wi = w;
                    }
                }
            }
            Reduction::SampleMeanSum => {
                for s in 0..n {
                    let range = s * plane..(s + 1) * plane;
                    let count = valid[range.clone()].iter().filter(|v| **v).count();
                    if count > 0 {
                        let w = T::one() / T::of(count as f64);
                        for i in range.filter(|&i| valid[i]) {
                            weights[i] = w;
                        }
                    }
                }
            }
        }
        let loss: T = pixel_loss.iter().zip(&weights).map(|(l, w)| *l * *w).sum();
        let needs = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                weights,
                classes: k,
                plane,
            },
            needs,
        )
    }

    /// Spatial window `[rows.0, rows.1) x [cols.0, cols.1)` over the two trailing dims.
    pub fn crop(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (shape, lead, _) = self.require_spatial("crop", x)?;
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > h || cols.1 > w {
            return Err(invalid(format!(
                "crop window {rows:?}x{cols:?} outside {h}x{w}"
            )));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(lead * (rows.1 - rows.0) * (cols.1 - cols.0));
        for c in 0..lead {
            for r in rows.0..rows.1 {
                let off = (c * h + r) * w;
                data.extend_from_slice(&v[off + cols.0..off + cols.1]);
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([rows.1 - rows.0, cols.1 - cols.0]);
        let needs = self.needs(&[x]);
        self.push(Tensor::new(out_shape, data)?, Op::Crop { x, rows, cols }, needs)
    }

    /// Inverse of a grid of [`Graph::crop`]s: tiles row-major `cells` into one map.
    pub fn stitch(
        &mut self,
        cells: &[Var],
        row_bounds: &[(usize, usize)],
        col_bounds: &[(usize, usize)],
    ) -> Result<Var> {
        if cells.len() != row_bounds.len() * col_bounds.len() || cells.is_empty() {
            return Err(invalid("stitch: cell count does not match grid"));
        }
        let first = self.shape(cells[0]).to_vec();
        if first.len() < 2 {
            return Err(invalid("stitch: cells need two spatial dims"));
        }
        let lead_shape = first[..first.len() - 2].to_vec();
        let h = row_bounds.last().map(|b| b.1).unwrap_or(0);
        let w = col_bounds.last().map(|b| b.1).unwrap_or(0);
        let lead: usize = lead_shape.iter().product();
        let mut data = vec![T::zero(); lead * h * w];
        for (ri, rb) in row_bounds.iter().enumerate() {
            for (ci, cb) in col_bounds.iter().enumerate() {
                let cell = cells[ri * col_bounds.len() + ci];
                let mut expect = lead_shape.clone();
                expect.extend([rb.1 - rb.0, cb.1 - cb.0]);
                if self.shape(cell) != expect {
                    return Err(Error::ShapeMismatch {
                        op: "stitch",
                        left: expect,
                        right: self.shape(cell).to_vec(),
                    });
                }
                let v = self.value(cell).data();
                let cw = cb.1 - cb.0;
                for c in 0..lead {
                    for r in 0..rb.1 - rb.0 {
                        let src = &v[(c * (rb.1 - rb.0) + r) * cw..][..cw];
                        let off = (c * h + rb.0 + r) * w + cb.0;
                        data[off..off + cw].copy_from_slice(src);
                    }
                }
            }
        }
        let mut shape = lead_shape;
        shape.extend([h, w]);
        let needs = self.needs(cells);
        self.push(
            Tensor::new(shape, data)?,
            Op::Stitch {
                cells: cells.to_vec(),
                row_bounds: row_bounds.to_vec(),
                col_bounds: col_bounds.to_vec(),
            },
            needs,
        )
    }

    fn color_op(&mut self, x: Var, to_lab: bool) -> Result<Var> {
        let name = if to_lab { "rgb_to_lab" } else { "lab_to_rgb" };
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::ShapeMismatch {
                op: name,
                left: shape,
                right: vec![3, 0, 0],
            });
        }
        let axis = shape.len() - 3;
        if shape[axis] != 3 {
            return Err(Error::ChannelMismatch {
                op: name,
                expected: 3,
                found: shape[axis],
            });
        }
        let plane = shape[axis + 1] * shape[axis + 2];
        let outer: usize = shape[..axis].iter().product();
        let v = self.value(x).data();
        let mut data = vec![T::zero(); v.len()];
        for o in 0..outer {
            let base = o * 3 * plane;
            for p in 0..plane {
                let px = [0, 1, 2].map(|c| v[base + c * plane + p].as_f64());
                let out = if to_lab {
                    rgb_to_lab_jac(px).0
                } else {
                    lab_to_rgb_jac(px).0
                };
                for c in 0..3 {
                    data[base + c * plane + p] = T::of(out[c]);
                }
            }
        }
        let needs = self.needs(&[x]);
        let op = if to_lab {
            Op::RgbToLab(x)
        } else {
            Op::LabToRgb(x)
        };
        self.push(Tensor::new(shape, data)?, op, needs)
    }

    /// sRGB to CIE L*a*b* (D65) over the channel axis of `[.., 3, H, W]`.
    pub fn rgb_to_lab(&mut self, x: Var) -> Result<Var> {
        self.color_op(x, true)
    }

    pub fn lab_to_rgb(&mut self, x: Var) -> Result<Var> {
        self.color_op(x, false)
    }

    /// Reverse-mode sweep from a scalar loss. Populates the gradient of every
    /// leaf that requires one and seals the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(up) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(up);
                continue;
            }
            self.propagate(i, &up, &mut adj);
        }

        for (node, g) in self.nodes.iter_mut().zip(adj) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let n = node.value.numel();
                node.value.grad = Some(g.unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<T>>], v: Var, grad: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => add_into(existing, &grad),
            slot @ None => *slot = Some(grad),
        }
    }

    fn propagate(&self, i: usize, up: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let b_at = |j: usize| match bcast {
                    Broadcast::Same => j,
                    Broadcast::Spatial { plane } => j / plane,
                };
                if self.requires_grad(*a) {
                    let g: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => up.to_vec(),
                        Binary::Mul => up.iter().enumerate().map(|(j, u)| *u * bv[b_at(j)]).collect(),
                        Binary::Div => up.iter().enumerate().map(|(j, u)| *u / bv[b_at(j)]).collect(),
                    };
                    self.accumulate(adj, *a, g);
                }
                if self.requires_grad(*b) {
                    let mut g = vec![T::zero(); bv.len()];
                    for (j, &u) in up.iter().enumerate() {
                        let k = b_at(j);
                        let d = match kind {
                            Binary::Add => u,
                            Binary::Sub => -u,
                            Binary::Mul => u * av[j],
                            Binary::Div => -u * av[j] / (bv[k] * bv[k]),
                        };
                        g[k] = g[k] + d;
                    }
                    self.accumulate(adj, *b, g);
                }
            }
            Op::Neg(a) => self.accumulate(adj, *a, up.iter().map(|u| -*u).collect()),
            Op::Scale(a, c) => self.accumulate(adj, *a, up.iter().map(|u| *u * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(adj, *a, up.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, vec![up[0]; n]);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let g = up
                    .iter()
                    .zip(av)
                    .map(|(u, x)| if *x > T::zero() { *u } else { T::zero() })
                    .collect();
                self.accumulate(adj, *a, g);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            } => {
                let grads = conv2d_backward(
                    geo,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    up,
                    (
                        self.requires_grad(*input),
                        self.requires_grad(*weight),
                        self.requires_grad(*bias),
                    ),
                );
                if let Some(g) = grads.input {
                    self.accumulate(adj, *input, g);
                }
                if let Some(g) = grads.weight {
                    self.accumulate(adj, *weight, g);
                }
                if let Some(g) = grads.bias {
                    self.accumulate(adj, *bias, g);
                }
            }
            Op::ChannelMean { x, plane } => {
                let inv = T::one() / T::of(*plane as f64);
                let g = (0..self.value(*x).numel()).map(|j| up[j / plane] * inv).collect();
                self.accumulate(adj, *x, g);
            }
            Op::ChannelStd { x, plane, mean } => {
                let xv = self.value(*x).data();
                let std = node.value.data();
                let n = T::of(*plane as f64);
                let g = xv
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let c = j / plane;
                        if std[c] > T::zero() {
                            up[c] * (v - mean[c]) / (n * std[c])
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(adj, *x, g);
            }
            Op::ChannelAffine {
                x,
                scale,
                shift,
                plane,
            } => {
                let xv = self.value(*x).data();
                let sc = self.value(*scale).data();
                if self.requires_grad(*x) {
                    let g = up.iter().enumerate().map(|(j, u)| *u * sc[j / plane]).collect();
                    self.accumulate(adj, *x, g);
                }
                if self.requires_grad(*scale) {
                    let mut g = vec![T::zero(); sc.len()];
                    for (j, (u, v)) in up.iter().zip(xv).enumerate() {
                        g[j / plane] = g[j / plane] + *u * *v;
                    }
                    self.accumulate(adj, *scale, g);
                }
                if self.requires_grad(*shift) {
                    let g = up
                        .chunks(*plane)
                        .map(|c| c.iter().copied().sum::<T>())
                        .collect();
                    self.accumulate(adj, *shift, g);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                weights,
                classes,
                plane,
            } => {
                let mut g = vec![T::zero(); probs.len()];
                for (pix, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let (s, p) = (pix / plane, pix % plane);
                    let scale = up[0] * w;
                    for c in 0..*classes {
                        let at = (s * classes + c) * plane + p;
                        let onehot = if c == label as usize { T::one() } else { T::zero() };
                        g[at] = scale * (probs[at] - onehot);
                    }
                }
                self.accumulate(adj, *logits, g);
            }
            Op::Crop { x, rows, cols } => {
                let shape = self.shape(*x);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let lead = spatial_split(shape).0;
                let cw = cols.1 - cols.0;
                let ch = rows.1 - rows.0;
                let mut g = vec![T::zero(); lead * h * w];
                for c in 0..lead {
                    for r in 0..ch {
                        let off = (c * h + rows.0 + r) * w + cols.0;
                        g[off..off + cw].copy_from_slice(&up[(c * ch + r) * cw..][..cw]);
                    }
                }
                self.accumulate(adj, *x, g);
            }
            Op::Stitch {
                cells,
                row_bounds,
                col_bounds,
            } => {
                let shape = node.value.shape();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let lead = spatial_split(shape).0;
                for (ri, rb) in row_bounds.iter().enumerate() {
                    for (ci, cb) in col_bounds.iter().enumerate() {
                        let cell = cells[ri * col_bounds.len() + ci];
                        if !self.requires_grad(cell) {
                            continue;
                        }
                        let (ch, cw) = (rb.1 - rb.0, cb.1 - cb.0);
                        let mut g = Vec::with_capacity(lead * ch * cw);
                        for c in 0..lead {
                            for r in 0..ch {
                                let off = (c * h + rb.0 + r) * w + cb.0;
                                g.extend_from_slice(&up[off..off + cw]);
                            }
                        }
                        self.accumulate(adj, cell, g);
                    }
                }
            }
            Op::RgbToLab(x) | Op::LabToRgb(x) => {
                let to_lab = matches!(node.op, Op::RgbToLab(_));
                let xt = self.value(*x);
                let shape = xt.shape();
                let axis = shape.len() - 3;
                let plane = shape[axis + 1] * shape[axis + 2];
                let outer: usize = shape[..axis].iter().product();
                let v = xt.data();
                let mut g = vec![T::zero(); v.len()];
                for o in 0..outer {
                    let base = o * 3 * plane;
                    for p in 0..plane {
                        let px = [0, 1, 2].map(|c| v[base + c * plane + p].as_f64());
                        let jac = if to_lab {
                            rgb_to_lab_jac(px).1
                        } else {
                            lab_to_rgb_jac(px).1
                        };
                        let u = [0, 1, 2].map(|c| up[base + c * plane + p].as_f64());
                        for c in 0..3 {
                            let d = (0..3).map(|r| u[r] * jac[r][c]).sum::<f64>();
                            g[base + c * plane + p] = T::of(d);
                        }
                    }
                }
                self.accumulate(adj, *x, g);
            }
        }
    }
}
