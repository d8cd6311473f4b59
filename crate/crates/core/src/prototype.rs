//! Class prototypes: reliability-masked attention pooling over feature
//! volumes, ramped fusion of labeled and unlabeled prototypes, and the
//! cosine-softmax similarity head that turns features into per-class
//! probabilities.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::{CustomOp, Tensor, EPS_GUARD};
use crate::uncertainty::ReliabilityMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoSource {
    Labeled,
    Unlabeled,
    Fused,
}

/// One feature-space vector per class. Classes absent from the pooling batch
/// carry a zero vector and `valid = false`.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    vectors: Vec<Tensor>,
    valid: Vec<bool>,
    source: ProtoSource,
    dim: usize,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> ProtoSource {
        self.source
    }

    pub fn vector(&self, class: usize) -> &Tensor {
        &self.vectors[class]
    }

    pub fn is_valid(&self, class: usize) -> bool {
        self.valid[class]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn detach(&self) -> PrototypeSet {
        PrototypeSet {
            vectors: self.vectors.iter().map(|v| v.detach()).collect(),
            valid: self.valid.clone(),
            source: self.source,
            dim: self.dim,
        }
    }
}

/// Masked attention pooling of per-class prototypes.
///
/// Per class `C_n` and sample `b`:
/// `sum_xyz h * beta * 1[y = C_n] / sum_xyz 1[y = C_n]` — the reliability
/// weights appear in the numerator only, the denominator is the plain voxel
/// count. Samples without the class contribute nothing and the average runs
/// over contributing samples only; a class absent from every sample comes
/// back invalid.
pub fn pool_prototypes(
    features: &[Tensor],
    betas: &[ReliabilityMap],
    labels: &[LabelVolume],
    num_classes: usize,
    source: ProtoSource,
) -> Result<PrototypeSet> {
    if features.is_empty() || features.len() != betas.len() || features.len() != labels.len() {
        return Err(Error::Shape(
            "pool_prototypes needs matching non-empty feature/beta/label lists".into(),
        ));
    }
    let dim = features[0].shape()[0];
    for ((h, beta), y) in features.iter().zip(betas).zip(labels) {
        if h.rank() != 4 || h.shape()[0] != dim {
            return Err(Error::Shape(format!(
                "feature volume must be [F,D,H,W] with F={dim}, got {:?}",
                h.shape()
            )));
        }
        let dims = y.dims();
        if h.shape()[1..] != [dims[0], dims[1], dims[2]] || beta.dims() != dims {
            return Err(Error::Shape(
                "features, beta and labels must share spatial dims".into(),
            ));
        }
    }

    let mut vectors = Vec::with_capacity(num_classes);
    let mut valid = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut acc: Option<Tensor> = None;
        let mut contributing = 0usize;
        for ((h, beta), y) in features.iter().zip(betas).zip(labels) {
            let count = y.data().iter().filter(|&&v| v as usize == class).count();
            if count == 0 {
                continue;
            }
            // constant weight map: beta on the class's voxels, zero elsewhere
            let dims = y.dims();
            let weights: Vec<f64> = y
                .data()
                .iter()
                .zip(beta.values())
                .map(|(&l, &b)| if l as usize == class { b } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(weights, &[1, dims[0], dims[1], dims[2]])?;
            let pooled = h
                .mul(&mask)?
                .sum_axes(&[1, 2, 3], false)?
                .mul_scalar(1.0 / count as f64)?;
            acc = Some(match acc {
                Some(prev) => prev.add(&pooled)?,
                None => pooled,
            });
            contributing += 1;
        }
        match acc {
            Some(total) => {
                vectors.push(total.mul_scalar(1.0 / contributing as f64)?);
                valid.push(true);
            }
            None => {
                vectors.push(Tensor::zeros(&[dim]));
                valid.push(false);
            }
        }
    }
    Ok(PrototypeSet {
        vectors,
        valid,
        source,
        dim,
    })
}

/// Ramped combination `(1 - gamma) * labeled + gamma * unlabeled` per class;
/// a class valid on one side only keeps that side unchanged.
pub fn fuse_prototypes(
    labeled: &PrototypeSet,
    unlabeled: &PrototypeSet,
    gamma: f64,
) -> Result<PrototypeSet> {
    if labeled.num_classes() != unlabeled.num_classes() || labeled.dim != unlabeled.dim {
        return Err(Error::Shape(format!(
            "prototype sets disagree: {}x{} vs {}x{}",
            labeled.num_classes(),
            labeled.dim,
            unlabeled.num_classes(),
            unlabeled.dim
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0,1]")));
    }
    let mut vectors = Vec::with_capacity(labeled.num_classes());
    let mut valid = Vec::with_capacity(labeled.num_classes());
    for class in 0..labeled.num_classes() {
        match (labeled.valid[class], unlabeled.valid[class]) {
            (true, true) => {
                let l = labeled.vectors[class].mul_scalar(1.0 - gamma)?;
                let u = unlabeled.vectors[class].mul_scalar(gamma)?;
                vectors.push(l.add(&u)?);
                valid.push(true);
            }
            (true, false) => {
                vectors.push(labeled.vectors[class].clone());
                valid.push(true);
            }
            (false, true) => {
                vectors.push(unlabeled.vectors[class].clone());
                valid.push(true);
            }
            (false, false) => {
                vectors.push(Tensor::zeros(&[labeled.dim]));
                valid.push(false);
            }
        }
    }
    Ok(PrototypeSet {
        vectors,
        valid,
        source: ProtoSource::Fused,
        dim: labeled.dim,
    })
}

/// Fused cosine-similarity softmax head over the valid classes.
struct CosineSoftmaxOp {
    features: Tensor,
    protos: Vec<Tensor>,
    valid_rows: Vec<usize>,
    tau: f64,
}

impl CosineSoftmaxOp {
    fn proto_norm(p: &Tensor) -> f64 {
        p.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl CustomOp for CosineSoftmaxOp {
    fn inputs(&self) -> Vec<Tensor> {
        let mut inputs = vec![self.features.clone()];
        inputs.extend(self.protos.iter().cloned());
        inputs
    }

    fn backward(&self, node: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let dim = self.features.shape()[0];
        let voxels = self.features.len() / dim;
        let h = self.features.data();
        let out = node.data();
        let np: Vec<f64> = self.protos.iter().map(Self::proto_norm).collect();
        let mut d_h = vec![0.0f64; self.features.len()];
        let mut d_p: Vec<Vec<f64>> = self.protos.iter().map(|p| vec![0.0; p.len()]).collect();

        for v in 0..voxels {
            let mut nh2 = 0.0;
            for f in 0..dim {
                let x = h[f * voxels + v];
                nh2 += x * x;
            }
            let nh = nh2.sqrt();

            // softmax backward over the valid classes (the max shift is a
            // constant and drops out): d_s = p * (g - sum_k g_k p_k) / tau
            let mut g_dot_p = 0.0;
            for &row in &self.valid_rows {
                g_dot_p += grad[row * voxels + v] * out[row * voxels + v];
            }
            let mut d_nh = 0.0;
            for (ci, &row) in self.valid_rows.iter().enumerate() {
                let p_out = out[row * voxels + v];
                let d_s = p_out * (grad[row * voxels + v] - g_dot_p) / self.tau;
                if d_s == 0.0 {
                    continue;
                }
                let denom_raw = nh * np[ci];
                let denom = denom_raw.max(EPS_GUARD);
                // recover dot and cosine from the stored operands
                let proto = self.protos[ci].data();
                let mut dot = 0.0;
                for f in 0..dim {
                    dot += h[f * voxels + v] * proto[f];
                }
                let s = dot / denom;
                let d_dot = d_s / denom;
                let d_denom = if denom_raw >= EPS_GUARD {
                    -d_s * s / denom
                } else {
                    0.0
                };
                for f in 0..dim {
                    d_h[f * voxels + v] += d_dot * proto[f];
                    d_p[ci][f] += d_dot * h[f * voxels + v];
                }
                if np[ci] > 0.0 {
                    let d_np = d_denom * nh;
                    for f in 0..dim {
                        d_p[ci][f] += d_np * proto[f] / np[ci];
                    }
                }
                d_nh += d_denom * np[ci];
            }
            if d_nh != 0.0 && nh > 0.0 {
                for f in 0..dim {
                    d_h[f * voxels + v] += d_nh * h[f * voxels + v] / nh;
                }
            }
        }
        let mut adjoints = vec![d_h];
        adjoints.extend(d_p);
        adjoints
    }
}

/// Feature-to-prototype probabilities: per voxel the cosine similarity to
/// each valid prototype, softmaxed with temperature `tau`. Invalid classes
/// receive probability zero; rows sum to one over the valid classes.
/// Zero-norm features or prototypes read as cosine 0 rather than erroring.
pub fn similarity_probs(
    features: &Tensor,
    prototypes: &PrototypeSet,
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    if features.rank() != 4 || features.shape()[0] != prototypes.dim {
        return Err(Error::Shape(format!(
            "features {:?} do not match prototype dim {}",
            features.shape(),
            prototypes.dim
        )));
    }
    let valid_rows: Vec<usize> = (0..prototypes.num_classes())
        .filter(|&c| prototypes.valid[c])
        .collect();
    if valid_rows.is_empty() {
        return Err(Error::Domain("no valid prototype to compare against".into()));
    }
    let dim = prototypes.dim;
    let voxels = features.len() / dim;
    let h = features.data();
    let protos: Vec<Tensor> = valid_rows.iter().map(|&c| prototypes.vectors[c].clone()).collect();
    let np: Vec<f64> = protos.iter().map(CosineSoftmaxOp::proto_norm).collect();
    let n = prototypes.num_classes();
    let mut out = vec![0.0f64; n * voxels];
    let mut scores = vec![0.0f64; valid_rows.len()];
    for v in 0..voxels {
        let mut nh2 = 0.0;
        for f in 0..dim {
            let x = h[f * voxels + v];
            nh2 += x * x;
        }
        let nh = nh2.sqrt();
        let mut max_s = f64::NEG_INFINITY;
        for (ci, proto) in protos.iter().enumerate() {
            let pd = proto.data();
            let mut dot = 0.0;
            for f in 0..dim {
                dot += h[f * voxels + v] * pd[f];
            }
            let denom = (nh * np[ci]).max(EPS_GUARD);
            let s = dot / denom;
            scores[ci] = s;
            max_s = max_s.max(s);
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = ((*s - max_s) / tau).exp();
            total += *s;
        }
        for (ci, &row) in valid_rows.iter().enumerate() {
            out[row * voxels + v] = scores[ci] / total;
        }
    }
    let mut shape = features.shape().to_vec();
    shape[0] = n;
    Tensor::from_custom_op(
        out,
        &shape,
        Arc::new(CosineSoftmaxOp {
            features: features.clone(),
            protos,
            valid_rows,
            tau,
        }),
    )
}

/// Binary prototype record: `N` and `dim` as little-endian u32, `N * dim`
/// little-endian f32 vector entries, then `N` validity bytes.
pub fn write_prototypes(path: &Path, set: &PrototypeSet) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(&(set.num_classes() as u32).to_le_bytes())?;
    out.write_all(&(set.dim as u32).to_le_bytes())?;
    for v in &set.vectors {
        for &x in v.data() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    for &ok in &set.valid {
        out.write_all(&[ok as u8])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    let mut b4 = [0u8; 4];
    input
        .read_exact(&mut b4)
        .map_err(|_| Error::Format("truncated prototype record".into()))?;
    let n = u32::from_le_bytes(b4) as usize;
    input
        .read_exact(&mut b4)
        .map_err(|_| Error::Format("truncated prototype record".into()))?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            input
                .read_exact(&mut b4)
                .map_err(|_| Error::Format("truncated prototype record".into()))?;
            data.push(f32::from_le_bytes(b4) as f64);
        }
        vectors.push(Tensor::from_vec(data, &[dim])?);
    }
    let mut valid = vec![0u8; n];
    input
        .read_exact(&mut valid)
        .map_err(|_| Error::Format("truncated prototype record".into()))?;
    Ok(PrototypeSet {
        vectors,
        valid: valid.into_iter().map(|v| v != 0).collect(),
        source: ProtoSource::Fused,
        dim,
    })
}
