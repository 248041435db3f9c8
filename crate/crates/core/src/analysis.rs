//! Dataset-level style diagnostics: per-image style tables for external
//! embedding tools, and pooled pixel histograms compared by KL divergence.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::style::decompose;
use crate::synthetic::{Dataset, LabeledImage};

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_SMOOTHING: f64 = 1e-6;
pub const STYLE_TABLE_HEADER: &str = "id,mu_r,mu_g,mu_b,sd_r,sd_g,sd_b";
pub const KL_HEADER: &str = "source,target,kl";

/// One row per image: channel means then channel stds.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTable {
    pub rows: Vec<(String, [f64; 6])>,
}

impl StyleTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{STYLE_TABLE_HEADER}\n");
        for (id, v) in &self.rows {
            let _ = writeln!(s, "{id},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5]);
        }
        s
    }
}

fn style_row(item: &LabeledImage) -> Result<[f64; 6]> {
    if item.channels() != 3 {
        return Err(Error::ChannelMismatch {
            op: "style table",
            expected: 3,
            found: item.channels(),
        });
    }
    let (_, s) = decompose(&item.image.cast::<f64>(), 0.0)?;
    Ok([s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2]])
}

pub fn extract_style_features(data: &Dataset) -> Result<StyleTable> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = data
        .ids()
        .into_iter()
        .zip(data.iter())
        .map(|(id, item)| Ok((id, style_row(item)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleTable { rows })
}

/// Per-channel pixel histograms over `[0, 1]`, each L1-normalized and scaled
/// so a channel block sums to `bins`, concatenated in channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleHistogram {
    pub bins: usize,
    pub feature: Vec<f64>,
}

impl StyleHistogram {
    pub fn channels(&self) -> usize {
        self.feature.len() / self.bins
    }

    pub fn to_csv_row(&self) -> String {
        let cells: Vec<String> = self.feature.iter().map(|v| v.to_string()).collect();
        format!("{}\n", cells.join(","))
    }
}

/// Bin of a pixel value; out-of-range values land in the boundary bins.
fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

pub fn histogram_of<'a>(images: impl IntoIterator<Item = &'a LabeledImage>, bins: usize) -> Result<StyleHistogram> {
    if bins < 2 {
        return Err(invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts: Vec<u64> = Vec::new();
    let mut channels = None;
    for item in images {
        let c = item.channels();
        match channels {
            None => {
                channels = Some(c);
                counts = vec![0; c * bins];
            }
            Some(k) if k != c => {
                return Err(Error::ChannelMismatch {
                    op: "histogram",
                    expected: k,
                    found: c,
                })
            }
            _ => {}
        }
        let plane = item.image.numel() / c;
        for (i, v) in item.image.data().iter().enumerate() {
            if v.is_nan() {
                return Err(Error::NonFinite("NaN pixel in histogram input".into()));
            }
            counts[(i / plane) * bins + bin_of(*v, bins)] += 1;
        }
    }
    if channels.is_none() {
        return Err(Error::EmptyDataset);
    }
    let mut feature = Vec::with_capacity(counts.len());
    for block in counts.chunks(bins) {
        let total: u64 = block.iter().sum();
        feature.extend(block.iter().map(|&n| n as f64 / total as f64 * bins as f64));
    }
    Ok(StyleHistogram { bins, feature })
}

pub fn histogram_feature(data: &Dataset, bins: usize) -> Result<StyleHistogram> {
    histogram_of(data.iter(), bins)
}

/// Adds `smoothing` to each entry and rescales each channel block back to sum to `bins`.
fn smoothed(h: &StyleHistogram, smoothing: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.feature.len());
    for block in h.feature.chunks(h.bins) {
        let total: f64 = block.iter().map(|v| v + smoothing).sum();
        out.extend(block.iter().map(|v| (v + smoothing) / total * h.bins as f64));
    }
    out
}

/// `KL(p || q)` over the whole smoothed feature vector.
pub fn kl_distance(p: &StyleHistogram, q: &StyleHistogram, smoothing: f64) -> Result<f64> {
    if p.feature.len() != q.feature.len() || p.bins != q.bins {
        return Err(invalid(format!(
            "histogram lengths differ: {} vs {}",
            p.feature.len(),
            q.feature.len()
        )));
    }
    if !(smoothing > 0.0) {
        return Err(invalid("KL smoothing must be > 0"));
    }
    let (ps, qs) = (smoothed(p, smoothing), smoothed(q, smoothing));
    let kl: f64 = ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(kl.max(0.0))
}

pub fn kl_report_csv(rows: &[(String, String, f64)]) -> String {
    let mut s = format!("{KL_HEADER}\n");
    for (a, b, kl) in rows {
        let _ = writeln!(s, "{a},{b},{kl}");
    }
    s
}
