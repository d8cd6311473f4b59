//! Independent reference implementations used to cross-check the fast
//! paths: exhaustive focal-set-product fusion, the scalar belief-entropy
//! formula, and all-pairs surface distances. These deliberately share no
//! code with the implementations they validate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::metrics::surface_voxels;

/// One voxel's mass assignment: singleton masses plus the universal mass.
pub type VoxelMass = (Vec<f64>, f64);

/// Exhaustive Dempster combination of `T` sources at one voxel: enumerate
/// all `(N+1)^T` focal-set products, assign each product to the
/// intersection of its focal sets, and normalize once at the end. Returns
/// `None` on (numerically) total conflict.
pub fn dempster_brute_force(sources: &[VoxelMass]) -> Option<VoxelMass> {
    let t = sources.len();
    assert!(t >= 1, "need at least one source");
    let n = sources[0].0.len();
    // focal index 0..n-1 = singleton class, n = universal set
    let mut singles = vec![0.0f64; n];
    let mut universal = 0.0f64;
    let mut conflict = 0.0f64;
    let mut choice = vec![0usize; t];
    loop {
        let mut product = 1.0f64;
        for (src, &c) in sources.iter().zip(choice.iter()) {
            product *= if c == n { src.1 } else { src.0[c] };
        }
        if product != 0.0 {
            // intersection of the chosen focal sets
            let mut class: Option<usize> = None;
            let mut empty = false;
            for &c in &choice {
                if c == n {
                    continue;
                }
                match class {
                    None => class = Some(c),
                    Some(existing) if existing != c => {
                        empty = true;
                        break;
                    }
                    Some(_) => {}
                }
            }
            if empty {
                conflict += product;
            } else {
                match class {
                    Some(c) => singles[c] += product,
                    None => universal += product,
                }
            }
        }
        // odometer over choices
        let mut axis = 0usize;
        loop {
            if axis == t {
                let norm = 1.0 - conflict;
                if norm < 1e-9 {
                    return None;
                }
                for s in singles.iter_mut() {
                    *s /= norm;
                }
                return Some((singles, universal / norm));
            }
            choice[axis] += 1;
            if choice[axis] <= n {
                break;
            }
            choice[axis] = 0;
            axis += 1;
        }
    }
}

/// Straightforward evaluation of the dual-uncertainty formula at one voxel.
pub fn dual_uncertainty_reference(singles: &[f64], universal: f64) -> f64 {
    let n = singles.len();
    let denom = (2.0f64).powi(n as i32) - 1.0;
    let mut entropy = 0.0;
    for &f in singles {
        if f > 0.0 {
            entropy += f * f.log2();
        }
    }
    if universal > 0.0 {
        entropy += universal * (universal / denom).log2();
    }
    -universal * entropy
}

/// Uniformly random valid mass assignment over `n` classes.
pub fn random_mass(rng: &mut ChaCha8Rng, n: usize) -> VoxelMass {
    // exponential draws normalized: uniform on the simplex
    let mut draws: Vec<f64> = (0..=n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let total: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= total;
    }
    let universal = draws.pop().expect("n + 1 draws");
    (draws, universal)
}

/// All-pairs surface distances: the oracle counterpart of
/// [`crate::metrics::surface_distances`], sharing only the surface-voxel
/// definition.
pub fn surface_distances_brute_force(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class: usize,
) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape("prediction and ground truth dims differ".into()));
    }
    let dims = pred.dims();
    let [_, h, w] = dims;
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
    let coords = |flat: usize| -> (i64, i64, i64) {
        (
            (flat / (h * w)) as i64,
            ((flat / w) % h) as i64,
            (flat % w) as i64,
        )
    };
    let nearest_sq = |from: usize, to: &[usize]| -> i64 {
        let (z, y, x) = coords(from);
        to.iter()
            .map(|&t| {
                let (tz, ty, tx) = coords(t);
                (tz - z) * (tz - z) + (ty - y) * (ty - y) + (tx - x) * (tx - x)
            })
            .min()
            .expect("non-empty surface")
    };
    let mut pooled: Vec<f64> = Vec::with_capacity(p_surface.len() + g_surface.len());
    for &v in &p_surface {
        pooled.push((nearest_sq(v, &g_surface) as f64).sqrt());
    }
    for &v in &g_surface {
        pooled.push((nearest_sq(v, &p_surface) as f64).sqrt());
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let m = pooled.len();
    let hd95 = if m == 1 {
        pooled[0]
    } else {
        let rank = 0.95 * (m - 1) as f64;
        let lo = rank.floor() as usize;
        let frac = rank - lo as f64;
        if lo + 1 < m {
            pooled[lo] + frac * (pooled[lo + 1] - pooled[lo])
        } else {
            pooled[lo]
        }
    };
    Ok((hd95, asd))
}
