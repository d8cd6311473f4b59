//! Generalized basic probability assignments over voxel grids: the
//! evidence-to-mass map, Dempster's combination rule for multi-classifier
//! fusion, Dirichlet induction and pseudo-label extraction.
//!
//! The frame of discernment is restricted to the `N` singleton classes plus
//! the universal set, whose mass plays the role of the classifier's
//! uncertainty. Masses are stored packed as an `[N+1, D, H, W]` tensor
//! (singleton channels first, universal last); the evidence map and the
//! pairwise combination run as fused kernels with analytic adjoints, so
//! fused masses stay differentiable with respect to the evidence heads.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::{CustomOp, Tensor};

/// Guard below which a universal mass is considered numerically zero for
/// Dirichlet induction.
const MIN_UNIVERSAL: f64 = 1e-12;

/// Guard on `1 - delta` below which two assignments are in total conflict.
const CONFLICT_GUARD: f64 = 1e-9;

/// Per-voxel generalized mass assignment: `N` singleton masses plus the
/// universal-set mass, summing to one.
#[derive(Debug, Clone)]
pub struct MassField {
    /// `[N+1, D, H, W]`; channel `N` is the universal set.
    packed: Tensor,
}

impl MassField {
    /// Validating constructor from separate `[N, D, H, W]` singleton and
    /// `[1, D, H, W]` universal components.
    pub fn new(singleton: Tensor, universal: Tensor) -> Result<MassField> {
        if singleton.rank() != 4 || universal.rank() != 4 {
            return Err(Error::Shape(
                "mass components must be [N,D,H,W] and [1,D,H,W]".into(),
            ));
        }
        if universal.shape()[0] != 1 || singleton.shape()[1..] != universal.shape()[1..] {
            return Err(Error::Shape(format!(
                "mass component shapes disagree: {:?} vs {:?}",
                singleton.shape(),
                universal.shape()
            )));
        }
        let packed = Tensor::concat(&[singleton, universal], 0)?;
        MassField::from_packed(packed)
    }

    /// Validating constructor from the packed channel layout.
    pub fn from_packed(packed: Tensor) -> Result<MassField> {
        let field = MassField::from_packed_unchecked(packed)?;
        field.validate()?;
        Ok(field)
    }

    /// Shape checks only; used where the sum invariant is intentionally
    /// relaxed (the unnormalized-universal fusion variant).
    pub(crate) fn from_packed_unchecked(packed: Tensor) -> Result<MassField> {
        if packed.rank() != 4 || packed.shape()[0] < 2 {
            return Err(Error::Shape(format!(
                "packed masses must be [N+1,D,H,W] with N >= 1, got {:?}",
                packed.shape()
            )));
        }
        Ok(MassField { packed })
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_classes();
        let voxels = self.voxel_count();
        let data = self.packed.data();
        for v in 0..voxels {
            let mut sum = 0.0;
            for c in 0..=n {
                let m = data[c * voxels + v];
                if m < -1e-12 {
                    return Err(Error::Domain(format!("negative mass {m}")));
                }
                sum += m;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!(
                    "voxel masses sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Total ignorance: all mass on the universal set.
    pub fn vacuous(num_classes: usize, dims: [usize; 3]) -> MassField {
        let [d, h, w] = dims;
        let voxels = d * h * w;
        let mut data = vec![0.0; (num_classes + 1) * voxels];
        data[num_classes * voxels..].fill(1.0);
        MassField {
            packed: Tensor::from_vec(data, &[num_classes + 1, d, h, w])
                .expect("constructed shape is consistent"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.packed.shape()[0] - 1
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [
            self.packed.shape()[1],
            self.packed.shape()[2],
            self.packed.shape()[3],
        ]
    }

    pub fn voxel_count(&self) -> usize {
        let [d, h, w] = self.spatial_dims();
        d * h * w
    }

    /// The packed `[N+1, D, H, W]` channel tensor (singletons then
    /// universal): the in-memory and on-disk layout.
    pub fn channels(&self) -> &Tensor {
        &self.packed
    }

    /// Singleton masses as `[N, D, H, W]` (differentiable slice).
    pub fn singleton(&self) -> Result<Tensor> {
        self.packed.slice_channels(0, self.num_classes())
    }

    /// Universal mass as `[1, D, H, W]` (differentiable slice).
    pub fn universal(&self) -> Result<Tensor> {
        self.packed.slice_channels(self.num_classes(), 1)
    }

    /// Masses of one voxel: (singletons, universal). For tests and tools.
    pub fn at(&self, z: usize, y: usize, x: usize) -> (Vec<f64>, f64) {
        let [_, h, w] = self.spatial_dims();
        let voxels = self.voxel_count();
        let flat = (z * h + y) * w + x;
        let data = self.packed.data();
        let singles = (0..self.num_classes())
            .map(|c| data[c * voxels + flat])
            .collect();
        (singles, data[self.num_classes() * voxels + flat])
    }

    /// Same masses, detached from the autodiff graph.
    pub fn detach(&self) -> MassField {
        MassField {
            packed: self.packed.detach(),
        }
    }
}

/// Per-voxel Dirichlet parameters induced from a mass field: strength `S`,
/// evidence `e_n = f(C_n) * S` and concentration `alpha_n = e_n + 1`.
#[derive(Debug, Clone)]
pub struct DirichletField {
    strength: Tensor,
    evidence: Tensor,
    alpha: Tensor,
}

impl DirichletField {
    pub fn strength(&self) -> &Tensor {
        &self.strength
    }

    pub fn evidence(&self) -> &Tensor {
        &self.evidence
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.shape()[0]
    }
}

/// Fused evidence-to-mass kernel: `S = sum(e) + (N-1)`, `f(C_n) = e_n / S`,
/// `f(C_N) = (N-1) / S`.
struct EvidenceToMassOp {
    evidence: Tensor,
}

impl CustomOp for EvidenceToMassOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.evidence.clone()]
    }

    fn backward(&self, node: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let n = self.evidence.shape()[0];
        let voxels = self.evidence.len() / n;
        let e = self.evidence.data();
        let out = node.data();
        let mut d_e = vec![0.0f64; self.evidence.len()];
        for v in 0..voxels {
            let mut s = (n - 1) as f64;
            for c in 0..n {
                s += e[c * voxels + v];
            }
            // G = sum over all N+1 outputs of g * out
            let mut g_dot_out = 0.0;
            for c in 0..=n {
                g_dot_out += grad[c * voxels + v] * out[c * voxels + v];
            }
            for c in 0..n {
                d_e[c * voxels + v] = (grad[c * voxels + v] - g_dot_out) / s;
            }
        }
        vec![d_e]
    }
}

/// Map non-negative evidence `[N, D, H, W]` to masses. This is the unique
/// forward map consistent with the Dirichlet induction `S = (N-1) / f(C_N)`
/// and with masses summing to one.
pub fn mass_from_evidence(evidence: &Tensor) -> Result<MassField> {
    if evidence.rank() != 4 {
        return Err(Error::Shape(format!(
            "evidence must be [N,D,H,W], got {:?}",
            evidence.shape()
        )));
    }
    let n = evidence.shape()[0];
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {n}")));
    }
    if let Some(&bad) = evidence.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!("negative evidence {bad}")));
    }
    let voxels = evidence.len() / n;
    let e = evidence.data();
    let mut out = vec![0.0f64; (n + 1) * voxels];
    for v in 0..voxels {
        let mut s = (n - 1) as f64;
        for c in 0..n {
            s += e[c * voxels + v];
        }
        let inv = 1.0 / s;
        for c in 0..n {
            out[c * voxels + v] = e[c * voxels + v] * inv;
        }
        out[n * voxels + v] = (n - 1) as f64 * inv;
    }
    let mut shape = evidence.shape().to_vec();
    shape[0] = n + 1;
    let packed = Tensor::from_custom_op(
        out,
        &shape,
        Arc::new(EvidenceToMassOp {
            evidence: evidence.clone(),
        }),
    )?;
    MassField::from_packed_unchecked(packed)
}

/// Options for pairwise Dempster combination. `normalize_universal: false`
/// reproduces the unnormalized universal-mass variant, whose outputs no
/// longer sum to one.
#[derive(Debug, Clone, Copy)]
pub struct FusionOptions {
    pub normalize_universal: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            normalize_universal: true,
        }
    }
}

/// Fused pairwise Dempster kernel over packed masses.
struct DempsterPairOp {
    m1: Tensor,
    m2: Tensor,
    normalize_universal: bool,
}

impl CustomOp for DempsterPairOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.m1.clone(), self.m2.clone()]
    }

    fn backward(&self, node: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let n = node.shape()[0] - 1;
        let voxels = node.len() / (n + 1);
        let p1 = self.m1.data();
        let p2 = self.m2.data();
        let out = node.data();
        let mut d1 = vec![0.0f64; p1.len()];
        let mut d2 = vec![0.0f64; p2.len()];
        for v in 0..voxels {
            let u1 = p1[n * voxels + v];
            let u2 = p2[n * voxels + v];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut dot = 0.0;
            for c in 0..n {
                let f1 = p1[c * voxels + v];
                let f2 = p2[c * voxels + v];
                s1 += f1;
                s2 += f2;
                dot += f1 * f2;
            }
            let k = 1.0 - (s1 * s2 - dot);
            let g_u = grad[n * voxels + v];
            // G collects every output whose 1/K factor depends on delta
            let mut g_dot_out = 0.0;
            let mut g_dot_f2 = 0.0;
            let mut g_dot_f1 = 0.0;
            for c in 0..n {
                let g = grad[c * voxels + v];
                g_dot_out += g * out[c * voxels + v];
                g_dot_f2 += g * p2[c * voxels + v];
                g_dot_f1 += g * p1[c * voxels + v];
            }
            if self.normalize_universal {
                g_dot_out += g_u * out[n * voxels + v];
            }
            for c in 0..n {
                let g = grad[c * voxels + v];
                let f1 = p1[c * voxels + v];
                let f2 = p2[c * voxels + v];
                d1[c * voxels + v] = (g * (f2 + u2) + g_dot_out * (s2 - f2)) / k;
                d2[c * voxels + v] = (g * (f1 + u1) + g_dot_out * (s1 - f1)) / k;
            }
            if self.normalize_universal {
                d1[n * voxels + v] = (g_dot_f2 + g_u * u2) / k;
                d2[n * voxels + v] = (g_dot_f1 + g_u * u1) / k;
            } else {
                d1[n * voxels + v] = g_dot_f2 / k + g_u * u2;
                d2[n * voxels + v] = g_dot_f1 / k + g_u * u1;
            }
        }
        vec![d1, d2]
    }
}

/// Dempster's rule for two congruent mass fields.
///
/// Per voxel, with `u = f(C_N)`:
/// `delta = sum_{a != b} f1(C_a) f2(C_b)`,
/// `f(C_n) = (f1(C_n) f2(C_n) + f1(C_n) u2 + f2(C_n) u1) / (1 - delta)`,
/// `f(C_N) = u1 u2 / (1 - delta)`.
pub fn dempster_pair(m1: &MassField, m2: &MassField) -> Result<MassField> {
    dempster_pair_opts(m1, m2, FusionOptions::default())
}

pub fn dempster_pair_opts(
    m1: &MassField,
    m2: &MassField,
    options: FusionOptions,
) -> Result<MassField> {
    if m1.num_classes() != m2.num_classes() || m1.spatial_dims() != m2.spatial_dims() {
        return Err(Error::Shape(format!(
            "cannot fuse masses with shapes {:?} and {:?}",
            m1.packed.shape(),
            m2.packed.shape()
        )));
    }
    let n = m1.num_classes();
    let voxels = m1.voxel_count();
    let [_, h, w] = m1.spatial_dims();
    let p1 = m1.packed.data();
    let p2 = m2.packed.data();
    let mut out = vec![0.0f64; (n + 1) * voxels];
    for v in 0..voxels {
        let u1 = p1[n * voxels + v];
        let u2 = p2[n * voxels + v];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut dot = 0.0;
        for c in 0..n {
            let f1 = p1[c * voxels + v];
            let f2 = p2[c * voxels + v];
            s1 += f1;
            s2 += f2;
            dot += f1 * f2;
        }
        // delta = (sum_a f1)(sum_b f2) - sum_a f1 f2: the product mass on
        // distinct singleton pairs
        let delta = s1 * s2 - dot;
        let k = 1.0 - delta;
        if k < CONFLICT_GUARD {
            return Err(Error::Conflict {
                x: v % w,
                y: (v / w) % h,
                z: v / (h * w),
            });
        }
        let inv = 1.0 / k;
        for c in 0..n {
            let f1 = p1[c * voxels + v];
            let f2 = p2[c * voxels + v];
            out[c * voxels + v] = (f1 * f2 + f1 * u2 + f2 * u1) * inv;
        }
        out[n * voxels + v] = if options.normalize_universal {
            u1 * u2 * inv
        } else {
            u1 * u2
        };
    }
    let packed = Tensor::from_custom_op(
        out,
        m1.packed.shape(),
        Arc::new(DempsterPairOp {
            m1: m1.packed.clone(),
            m2: m2.packed.clone(),
            normalize_universal: options.normalize_universal,
        }),
    )?;
    MassField::from_packed_unchecked(packed)
}

/// Left fold of [`dempster_pair`] over `T >= 1` classifier outputs.
pub fn dempster_fuse_all(masses: &[MassField]) -> Result<MassField> {
    dempster_fuse_all_opts(masses, FusionOptions::default())
}

pub fn dempster_fuse_all_opts(masses: &[MassField], options: FusionOptions) -> Result<MassField> {
    let Some(first) = masses.first() else {
        return Err(Error::Shape("cannot fuse zero mass fields".into()));
    };
    let mut fused = first.clone();
    for m in &masses[1..] {
        fused = dempster_pair_opts(&fused, m, options)?;
    }
    Ok(fused)
}

/// Arithmetic mean of congruent mass fields, renormalized per voxel. The
/// averaging counterpart used when evidential fusion is disabled.
pub fn average_masses(masses: &[MassField]) -> Result<MassField> {
    let Some(first) = masses.first() else {
        return Err(Error::Shape("cannot average zero mass fields".into()));
    };
    let mut packed = first.packed.clone();
    for m in &masses[1..] {
        if m.num_classes() != first.num_classes() || m.spatial_dims() != first.spatial_dims() {
            return Err(Error::Shape("cannot average incongruent mass fields".into()));
        }
        packed = packed.add(&m.packed)?;
    }
    let total = packed.sum_axes(&[0], true)?;
    MassField::from_packed_unchecked(packed.div_exact(&total)?)
}

/// Induce per-voxel Dirichlet parameters: `S = (N-1) / f(C_N)`,
/// `e_n = f(C_n) * S`, `alpha_n = e_n + 1`.
pub fn dirichlet_from_mass(m: &MassField) -> Result<DirichletField> {
    let n = m.num_classes();
    let voxels = m.voxel_count();
    let universal_data = &m.packed.data()[n * voxels..];
    if let Some(&u) = universal_data.iter().find(|&&u| u < MIN_UNIVERSAL) {
        return Err(Error::Domain(format!(
            "universal mass {u} too small for Dirichlet induction"
        )));
    }
    let strength = Tensor::scalar((n - 1) as f64).div_exact(&m.universal()?)?;
    let evidence = m.singleton()?.mul(&strength)?;
    let alpha = evidence.add_scalar(1.0)?;
    Ok(DirichletField {
        strength,
        evidence,
        alpha,
    })
}

/// Expected class probabilities of a Dirichlet field:
/// `p_n = alpha_n / sum_k alpha_k`.
pub fn expected_probs(d: &DirichletField) -> Result<Tensor> {
    let total = d.alpha.sum_axes(&[0], true)?;
    d.alpha.div_exact(&total)
}

/// Per-voxel argmax over singleton masses; ties break toward the lowest
/// class index.
pub fn pseudo_labels(m: &MassField) -> Result<LabelVolume> {
    if m.num_classes() > u8::MAX as usize {
        return Err(Error::Shape("more classes than a label volume can hold".into()));
    }
    let n = m.num_classes();
    let voxels = m.voxel_count();
    let data = m.packed.data();
    let mut labels = vec![0u8; voxels];
    for v in 0..voxels {
        let mut best = data[v];
        let mut arg = 0u8;
        for c in 1..n {
            let m_c = data[c * voxels + v];
            if m_c > best {
                best = m_c;
                arg = c as u8;
            }
        }
        labels[v] = arg;
    }
    LabelVolume::new(m.spatial_dims(), labels)
}
