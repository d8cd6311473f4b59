//! Segmentation evaluation: Dice, Jaccard, 95th-percentile Hausdorff
//! distance and average symmetric surface distance, in voxel units.
//!
//! Surface distances use an exact separable squared Euclidean distance
//! transform, so they agree bit-for-bit with an all-pairs search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;

/// Overlap scores for one class. Both masks empty counts as a perfect score.
pub fn dice_jaccard(pred: &LabelVolume, gt: &LabelVolume, class: usize) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape("prediction and ground truth dims differ".into()));
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let in_p = p as usize == class;
        let in_g = g as usize == class;
        inter += (in_p && in_g) as usize;
        p_count += in_p as usize;
        g_count += in_g as usize;
    }
    if p_count == 0 && g_count == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (p_count + g_count) as f64;
    let union = p_count + g_count - inter;
    let jaccard = inter as f64 / union as f64;
    Ok((dice, jaccard))
}

/// Flat indices of mask voxels with at least one six-connected neighbor
/// outside the mask; the volume border counts as outside.
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                if !mask[idx] {
                    continue;
                }
                let exposed = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1
                    || !mask[idx - h * w]
                    || !mask[idx + h * w]
                    || !mask[idx - w]
                    || !mask[idx + w]
                    || !mask[idx - 1]
                    || !mask[idx + 1];
                if exposed {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                // first finite site
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let dq = q as f64 - p as f64;
            dq * dq + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest site.
pub fn squared_distance_field(sites: &[usize], dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let mut field = vec![f64::INFINITY; n];
    for &s in sites {
        field[s] = 0.0;
    }
    let mut buf_in = vec![0.0f64; d.max(h).max(w)];
    let mut buf_out = vec![0.0f64; d.max(h).max(w)];

    // along W
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            buf_in[..w].copy_from_slice(&field[base..base + w]);
            edt_1d(&buf_in[..w], &mut buf_out[..w]);
            field[base..base + w].copy_from_slice(&buf_out[..w]);
        }
    }
    // along H
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                buf_in[y] = field[(z * h + y) * w + x];
            }
            edt_1d(&buf_in[..h], &mut buf_out[..h]);
            for y in 0..h {
                field[(z * h + y) * w + x] = buf_out[y];
            }
        }
    }
    // along D
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                buf_in[z] = field[(z * h + y) * w + x];
            }
            edt_1d(&buf_in[..d], &mut buf_out[..d]);
            for z in 0..d {
                field[(z * h + y) * w + x] = buf_out[z];
            }
        }
    }
    field
}

/// 95th percentile by linear interpolation between order statistics of a
/// sorted slice.
fn percentile_95(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let rank = 0.95 * (m - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < m {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Pooled symmetric surface distances for one class: the 95th-percentile
/// Hausdorff distance and the average surface distance, both in voxel units.
/// Either mask empty for the class makes the metric undefined.
pub fn surface_distances(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class: usize,
) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape("prediction and ground truth dims differ".into()));
    }
    let dims = pred.dims();
    let p_mask: Vec<bool> = pred.data().iter().map(|&v| v as usize == class).collect();
    let g_mask: Vec<bool> = gt.data().iter().map(|&v| v as usize == class).collect();
    let p_surface = surface_voxels(&p_mask, dims);
    let g_surface = surface_voxels(&g_mask, dims);
    if p_surface.is_empty() || g_surface.is_empty() {
        return Err(Error::UndefinedMetric {
            class,
            reason: "empty mask".into(),
        });
    }

    let to_g = squared_distance_field(&g_surface, dims);
    let to_p = squared_distance_field(&p_surface, dims);
    let mut pooled: Vec<f64> = Vec::with_capacity(p_surface.len() + g_surface.len());
    for &v in &p_surface {
        pooled.push(to_g[v].sqrt());
    }
    for &v in &g_surface {
        pooled.push(to_p[v].sqrt());
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let hd95 = percentile_95(&pooled);
    Ok((hd95, asd))
}

/// Euclidean distance of every voxel to the nearest class boundary (a voxel
/// with a six-connected neighbor of a different label). Infinite when the
/// volume has a single label.
pub fn boundary_distance(labels: &LabelVolume) -> Vec<f64> {
    let [d, h, w] = labels.dims();
    let data = labels.data();
    let mut boundary = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let l = data[idx];
                let differs = (z > 0 && data[idx - h * w] != l)
                    || (z + 1 < d && data[idx + h * w] != l)
                    || (y > 0 && data[idx - w] != l)
                    || (y + 1 < h && data[idx + w] != l)
                    || (x > 0 && data[idx - 1] != l)
                    || (x + 1 < w && data[idx + 1] != l);
                if differs {
                    boundary.push(idx);
                }
            }
        }
    }
    if boundary.is_empty() {
        return vec![f64::INFINITY; data.len()];
    }
    squared_distance_field(&boundary, labels.dims())
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

/// Per-class scores; surface metrics are `None` where undefined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Evaluation over a set of classes plus means (undefined surface metrics
/// are excluded from means).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
}

/// Evaluate `pred` against `gt` over the given classes (typically the
/// foreground classes `1..N`).
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, classes: &[usize]) -> Result<MetricReport> {
    if classes.is_empty() {
        return Err(Error::Domain("no classes to evaluate".into()));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in classes {
        let (dice, jaccard) = dice_jaccard(pred, gt, class)?;
        let (hd95, asd) = match surface_distances(pred, gt, class) {
            Ok((hd95, asd)) => (Some(hd95), Some(asd)),
            Err(Error::UndefinedMetric { .. }) => (None, None),
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            class,
            dice,
            jaccard,
            hd95,
            asd,
        });
    }
    let mean = |extract: fn(&ClassMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = per_class.iter().filter_map(extract).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(MetricReport {
        mean_dice: per_class.iter().map(|c| c.dice).sum::<f64>() / per_class.len() as f64,
        mean_jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / per_class.len() as f64,
        mean_hd95: mean(|c| c.hd95),
        mean_asd: mean(|c| c.asd),
        per_class,
    })
}
