//! Dual uncertainty: belief entropy over the generalized mass assignment,
//! weighted by the original (universal-set) uncertainty, plus per-volume
//! normalization and the reliability map derived from it.
//!
//! These fields are plain values by design. They act as constant weights in
//! the losses and in prototype pooling; no gradient flows through them.

use crate::error::{Error, Result};
use crate::evidence::MassField;
use crate::tensor::Tensor;

/// Per-voxel non-negative dual uncertainty `U`.
#[derive(Debug, Clone)]
pub struct UncertaintyField {
    dims: [usize; 3],
    values: Vec<f64>,
}

/// Per-voxel importance weight `beta` in `[0, 1]`, non-increasing in the
/// normalized uncertainty.
#[derive(Debug, Clone)]
pub struct ReliabilityMap {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl UncertaintyField {
    pub fn new(dims: [usize; 3], values: Vec<f64>) -> Result<UncertaintyField> {
        if dims[0] * dims[1] * dims[2] != values.len() {
            return Err(Error::Shape("uncertainty dims/value count mismatch".into()));
        }
        Ok(UncertaintyField { dims, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `[1, D, H, W]` constant tensor view (no gradient).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.values.clone(),
            &[1, self.dims[0], self.dims[1], self.dims[2]],
        )
        .expect("dims validated at construction")
    }
}

impl ReliabilityMap {
    pub fn new(dims: [usize; 3], values: Vec<f64>) -> Result<ReliabilityMap> {
        if dims[0] * dims[1] * dims[2] != values.len() {
            return Err(Error::Shape("reliability dims/value count mismatch".into()));
        }
        if let Some(&bad) = values.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(format!("reliability {bad} outside [0,1]")));
        }
        Ok(ReliabilityMap { dims, values })
    }

    /// Every voxel fully reliable; used when a reliability branch is
    /// disabled.
    pub fn all_ones(dims: [usize; 3]) -> ReliabilityMap {
        ReliabilityMap {
            dims,
            values: vec![1.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.values.clone(),
            &[1, self.dims[0], self.dims[1], self.dims[2]],
        )
        .expect("dims validated at construction")
    }
}

/// Dual uncertainty of a mass field.
///
/// Per voxel, with `u = f(C_N)` and `N` singleton classes:
/// `U = -u * sum_{n=0}^{N} f(C_n) * log2(f(C_n) / (2^|C_n| - 1))`, where
/// `|C_n| = 1` for singletons and `|C_N| = N`. Terms with `f(C_n) = 0`
/// contribute zero (entropy limit convention).
pub fn dual_uncertainty(m: &MassField) -> UncertaintyField {
    let n = m.num_classes();
    let dims = m.spatial_dims();
    let voxels = m.voxel_count();
    let packed = m.channels().data();
    let (singles, universal) = packed.split_at(n * voxels);
    // 2^|C_N| - 1 for the universal set; singleton denominators are 1.
    let universal_denom = (2.0f64).powi(n as i32) - 1.0;

    let mut values = vec![0.0f64; voxels];
    for v in 0..voxels {
        let u = universal[v];
        if u == 0.0 {
            continue;
        }
        let mut entropy = 0.0f64;
        for c in 0..n {
            let f = singles[c * voxels + v];
            if f > 0.0 {
                entropy += f * f.log2();
            }
        }
        if u > 0.0 {
            entropy += u * (u / universal_denom).log2();
        }
        values[v] = -u * entropy;
    }
    UncertaintyField { dims, values }
}

/// Per-volume min-max normalization to `[0, 1]`. A constant field maps to
/// all zeros (no ranking signal, every voxel treated as reliable).
pub fn normalize01(field: &UncertaintyField) -> UncertaintyField {
    let min = field.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = field.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range <= 0.0 {
        vec![0.0; field.values.len()]
    } else {
        field.values.iter().map(|&v| (v - min) / range).collect()
    };
    UncertaintyField {
        dims: field.dims,
        values,
    }
}

/// Min-max normalization with the range pooled across several volumes, for
/// the per-batch normalization scope.
pub fn normalize01_joint(fields: &[UncertaintyField]) -> Vec<UncertaintyField> {
    let min = fields
        .iter()
        .flat_map(|f| f.values.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let max = fields
        .iter()
        .flat_map(|f| f.values.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    fields
        .iter()
        .map(|f| UncertaintyField {
            dims: f.dims,
            values: if range <= 0.0 {
                vec![0.0; f.values.len()]
            } else {
                f.values.iter().map(|&v| (v - min) / range).collect()
            },
        })
        .collect()
}

/// Reliability from normalized uncertainty: `beta = 1 - U_bar`.
pub fn reliability_map(normalized: &UncertaintyField) -> Result<ReliabilityMap> {
    if let Some(&bad) = normalized
        .values
        .iter()
        .find(|&&v| !(0.0..=1.0).contains(&v))
    {
        return Err(Error::Domain(format!(
            "normalized uncertainty {bad} outside [0,1]"
        )));
    }
    Ok(ReliabilityMap {
        dims: normalized.dims,
        values: normalized.values.iter().map(|&v| 1.0 - v).collect(),
    })
}
