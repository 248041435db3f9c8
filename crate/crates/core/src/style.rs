//! Style decomposition: an image (or feature map) is split into per-channel
//! mean/std statistics and a normalized content map, and recomposed from a
//! content map and any statistics.
//!
//! Graph-level variants (`*_var`) keep everything differentiable; the
//! tensor-level helpers evaluate the same ops on a throwaway graph.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Added to the std in the normalization denominator.
pub const STYLE_EPS: f64 = 1e-6;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats<T = f32> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> StyleStats<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(invalid(format!(
                "style stats with {} means and {} stds",
                mean.len(),
                std.len()
            )));
        }
        Ok(Self { mean, std })
    }

    /// Zero mean, unit std.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            std: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Euclidean distance between the mean vectors and between the std vectors.
    pub fn shift_l2(&self, other: &Self) -> (f64, f64) {
        let d = |a: &[T], b: &[T]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        (d(&self.mean, &other.mean), d(&self.std, &other.std))
    }

    pub fn cast<U: Scalar>(&self) -> StyleStats<U> {
        StyleStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            std: self.std.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Differentiable handles produced by [`decompose_var`].
#[derive(Clone, Copy, Debug)]
pub struct Decomposed {
    pub normalized: Var,
    pub mean: Var,
    pub std: Var,
}

/// `x_bar = (x - mean) / (std + eps)` per channel, inside a graph.
pub fn decompose_var<T: Scalar>(g: &mut Graph<T>, x: Var, eps: T) -> Result<Decomposed> {
    let (mean, std) = g.channel_moments(x)?;
    let centered = g.sub(x, mean)?;
    let denom = g.add_scalar(std, eps)?;
    let normalized = g.div(centered, denom)?;
    Ok(Decomposed {
        normalized,
        mean,
        std,
    })
}

/// `x_bar * std + mean` per channel, inside a graph.
pub fn recompose_var<T: Scalar>(g: &mut Graph<T>, normalized: Var, mean: Var, std: Var) -> Result<Var> {
    g.channel_affine(normalized, std, mean)
}

fn require_chw<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    Ok(x.shape()[0])
}

fn stats_from_vars<T: Scalar>(g: &Graph<T>, mean: Var, std: Var) -> StyleStats<T> {
    StyleStats {
        mean: g.value(mean).data().to_vec(),
        std: g.value(std).data().to_vec(),
    }
}

fn stats_to_vars<T: Scalar>(g: &mut Graph<T>, s: &StyleStats<T>) -> Result<(Var, Var)> {
    let c = s.channels();
    let mean = g.constant(Tensor::new(vec![c], s.mean.clone())?)?;
    let std = g.constant(Tensor::new(vec![c], s.std.clone())?)?;
    Ok((mean, std))
}

/// Splits a `[C, H, W]` image into its normalized content and style stats.
pub fn decompose<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, StyleStats<T>)> {
    require_chw("decompose", x)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let d = decompose_var(&mut g, xv, eps)?;
    Ok((g.value(d.normalized).detached(), stats_from_vars(&g, d.mean, d.std)))
}

/// Rebuilds an image from normalized content and style stats.
pub fn recompose<T: Scalar>(normalized: &Tensor<T>, s: &StyleStats<T>) -> Result<Tensor<T>> {
    let c = require_chw("recompose", normalized)?;
    if c != s.channels() {
        return Err(Error::ChannelMismatch {
            op: "recompose",
            expected: c,
            found: s.channels(),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(normalized.clone())?;
    let (mean, std) = stats_to_vars(&mut g, s)?;
    let out = recompose_var(&mut g, xv, mean, std)?;
    Ok(g.value(out).detached())
}

/// Even split of `len` into `parts` ranges; the last range absorbs any remainder.
pub fn patch_bounds(len: usize, parts: usize) -> Result<Vec<(usize, usize)>> {
    if parts == 0 || len < parts {
        return Err(invalid(format!("cannot split {len} pixels into {parts} patches")));
    }
    let step = len / parts;
    Ok((0..parts)
        .map(|i| (i * step, if i + 1 == parts { len } else { (i + 1) * step }))
        .collect())
}

/// Per-cell style statistics over a `rows x cols` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<StyleStats<T>>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn cell(&self, row: usize, col: usize) -> &StyleStats<T> {
        &self.cells[row * self.cols + col]
    }
}

/// Graph-level patch decomposition: returns the stitched normalized map and
/// `(mean, std)` handles per cell (row-major).
pub fn decompose_patches_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    rows: usize,
    cols: usize,
    eps: T,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(invalid("decompose_patches needs two spatial dims"));
    }
    let rb = patch_bounds(shape[shape.len() - 2], rows)?;
    let cb = patch_bounds(shape[shape.len() - 1], cols)?;
    let mut normalized = Vec::with_capacity(rows * cols);
    let mut stats = Vec::with_capacity(rows * cols);
    for r in &rb {
        for c in &cb {
            let cell = g.crop(x, *r, *c)?;
            let d = decompose_var(g, cell, eps)?;
            normalized.push(d.normalized);
            stats.push((d.mean, d.std));
        }
    }
    Ok((g.stitch(&normalized, &rb, &cb)?, stats))
}

pub fn recompose_patches_var<T: Scalar>(
    g: &mut Graph<T>,
    normalized: Var,
    rows: usize,
    cols: usize,
    stats: &[(Var, Var)],
) -> Result<Var> {
    if stats.len() != rows * cols {
        return Err(invalid(format!(
            "{} cell stats for a {rows}x{cols} grid",
            stats.len()
        )));
    }
    let shape = g.shape(normalized).to_vec();
    if shape.len() < 2 {
        return Err(invalid("recompose_patches needs two spatial dims"));
    }
    let rb = patch_bounds(shape[shape.len() - 2], rows)?;
    let cb = patch_bounds(shape[shape.len() - 1], cols)?;
    let mut out = Vec::with_capacity(stats.len());
    for (ri, r) in rb.iter().enumerate() {
        for (ci, c) in cb.iter().enumerate() {
            let cell = g.crop(normalized, *r, *c)?;
            let (mean, std) = stats[ri * cols + ci];
            out.push(recompose_var(g, cell, mean, std)?);
        }
    }
    g.stitch(&out, &rb, &cb)
}

/// Applies the decomposition independently to each cell of a `rows x cols` grid.
pub fn decompose_patches<T: Scalar>(
    x: &Tensor<T>,
    rows: usize,
    cols: usize,
    eps: T,
) -> Result<(Tensor<T>, PatchGrid<T>)> {
    require_chw("decompose_patches", x)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let (normalized, stats) = decompose_patches_var(&mut g, xv, rows, cols, eps)?;
    let cells = stats
        .iter()
        .map(|(m, s)| stats_from_vars(&g, *m, *s))
        .collect();
    Ok((
        g.value(normalized).detached(),
        PatchGrid { rows, cols, cells },
    ))
}

pub fn recompose_patches<T: Scalar>(normalized: &Tensor<T>, grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    let c = require_chw("recompose_patches", normalized)?;
    if let Some(bad) = grid.cells.iter().find(|s| s.channels() != c) {
        return Err(Error::ChannelMismatch {
            op: "recompose_patches",
            expected: c,
            found: bad.channels(),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(normalized.clone())?;
    let stats = grid
        .cells
        .iter()
        .map(|s| stats_to_vars(&mut g, s))
        .collect::<Result<Vec<_>>>()?;
    let out = recompose_patches_var(&mut g, xv, grid.rows, grid.cols, &stats)?;
    Ok(g.value(out).detached())
}

/// sRGB `[3, H, W]` to CIE L*a*b* under D65.
pub fn rgb_to_lab<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = g.rgb_to_lab(v)?;
    Ok(g.value(out).detached())
}

pub fn lab_to_rgb<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = g.lab_to_rgb(v)?;
    Ok(g.value(out).detached())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eps() -> f32 {
        STYLE_EPS as f32
    }

    #[test]
    fn constant_image_decomposes_to_zero_content() {
        let x = Tensor::full(vec![3, 4, 4], 0.5f32);
        let (n, s) = decompose(&x, eps()).unwrap();
        assert!(n.data().iter().all(|v| *v == 0.0));
        assert_eq!(s.mean, vec![0.5; 3]);
        assert_eq!(s.std, vec![0.0; 3]);
    }

    #[test]
    fn binary_channel_normalizes_to_unit_signs() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        let (n, s) = decompose(&x, eps()).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (0.5, 0.5));
        for (v, sign) in n.data().iter().zip([-1.0f32, 1.0, 1.0, -1.0]) {
            assert!((v - sign).abs() < 1e-5);
        }
    }

    #[test]
    fn recompose_identity_and_constant() {
        let x = Tensor::from_fn(vec![2, 3, 3], |i| (i as f32 * 0.3).cos());
        let out = recompose(&x, &StyleStats::identity(2)).unwrap();
        assert_eq!(out, x);
        let zero = Tensor::zeros(vec![2, 3, 3]);
        let out = recompose(&zero, &StyleStats::new(vec![0.7, 0.2], vec![5.0, 9.0]).unwrap()).unwrap();
        assert!(out.data()[..9].iter().all(|v| *v == 0.7));
        assert!(out.data()[9..].iter().all(|v| *v == 0.2));
    }

    #[test]
    fn recompose_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![3, 2, 2]);
        assert!(matches!(
            recompose(&x, &StyleStats::identity(2)),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn quadrant_constant_grid() {
        let mut x = Tensor::<f32>::zeros(vec![1, 4, 4]);
        let vals = [0.1f32, 0.2, 0.3, 0.4];
        for r in 0..4 {
            for c in 0..4 {
                x.data_mut()[r * 4 + c] = vals[(r / 2) * 2 + c / 2];
            }
        }
        let (_, grid) = decompose_patches(&x, 2, 2, eps()).unwrap();
        for (cell, v) in grid.cells.iter().zip(vals) {
            assert_eq!(cell.mean, vec![v]);
            assert_eq!(cell.std, vec![0.0]);
        }
    }

    #[test]
    fn uniform_image_has_identical_cells() {
        let x = Tensor::full(vec![3, 6, 6], 0.25f32);
        let (_, grid) = decompose_patches(&x, 2, 2, eps()).unwrap();
        assert!(grid.cells.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn remainder_goes_to_last_patch() {
        assert_eq!(patch_bounds(7, 2).unwrap(), vec![(0, 3), (3, 7)]);
        assert!(patch_bounds(1, 2).is_err());
    }

    #[test]
    fn shifted_grid_means_equal_global_shift() {
        let x = Tensor::from_fn(vec![3, 6, 8], |i| ((i * 37) % 11) as f32 / 11.0);
        let (n, mut grid) = decompose_patches(&x, 2, 2, eps()).unwrap();
        for cell in &mut grid.cells {
            cell.mean.iter_mut().for_each(|m| *m += 0.1);
        }
        let out = recompose_patches(&n, &grid).unwrap();
        let expect = x.map(|v| v + 0.1);
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-5);
    }

    #[test]
    fn single_cell_grid_matches_whole_image() {
        let x = Tensor::from_fn(vec![3, 5, 5], |i| ((i * 13) % 7) as f32 / 7.0);
        let (a, s) = decompose(&x, eps()).unwrap();
        let (b, grid) = decompose_patches(&x, 1, 1, eps()).unwrap();
        assert_eq!(a, b);
        assert_eq!(grid.cells[0], s);
    }

    #[test]
    fn lab_black_white_and_channel_check() {
        let black = rgb_to_lab(&Tensor::<f64>::zeros(vec![3, 1, 1])).unwrap();
        assert!(black.data().iter().all(|v| v.abs() < 1e-9));
        let white = rgb_to_lab(&Tensor::<f64>::full(vec![3, 1, 1], 1.0)).unwrap();
        assert!((white.data()[0] - 100.0).abs() < 1e-3);
        assert!(white.data()[1].abs() < 0.01 && white.data()[2].abs() < 0.01);
        assert!(matches!(
            rgb_to_lab(&Tensor::<f32>::zeros(vec![4, 2, 2])),
            Err(Error::ChannelMismatch { .. })
        ));
    }
}
