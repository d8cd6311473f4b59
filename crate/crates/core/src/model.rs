//! Small 3D encoder-decoder with several evidential classifier heads, plus
//! parameter containers, checkpointing and the teacher EMA update.
//!
//! Encoder stage 0 is a same-size conv; each further stage halves the
//! spatial extents with a stride-2 conv. The decoder mirrors it with
//! trilinear upsampling, channel-concatenated skip connections and a conv
//! per stage. Decoder "levels" count from the bottleneck (level 1) to the
//! full-resolution output (level = depth); `proto_stage` picks the level
//! whose features feed prototype pooling, upsampled to label resolution.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tensor::Tensor;
use crate::volfile::{self, Dtype};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    pub proto_stage: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_width: 8,
            depth: 3,
            num_classes: 2,
            num_heads: 2,
            proto_stage: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 1 || self.num_heads < 1 {
            return Err(Error::Config("base_width and num_heads must be >= 1".into()));
        }
        if self.depth < 1 || self.proto_stage < 1 || self.proto_stage > self.depth {
            return Err(Error::Config(format!(
                "need depth >= proto_stage >= 1, got depth {} proto_stage {}",
                self.depth, self.proto_stage
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    fn encoder_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// (in_channels, out_channels) of every conv layer in order.
    fn layer_channels(&self) -> Vec<(String, usize, usize, usize)> {
        let mut layers = Vec::new();
        layers.push(("enc0".to_string(), self.in_channels, self.encoder_width(0), KERNEL));
        for stage in 1..self.depth {
            layers.push((
                format!("enc{stage}"),
                self.encoder_width(stage - 1),
                self.encoder_width(stage),
                KERNEL,
            ));
        }
        for step in 1..self.depth {
            let skip = self.encoder_width(self.depth - 1 - step);
            let coarse = self.encoder_width(self.depth - step);
            layers.push((format!("dec{step}"), skip + coarse, skip, KERNEL));
        }
        for head in 0..self.num_heads {
            layers.push((
                format!("head{head}"),
                self.encoder_width(0),
                self.num_classes,
                1,
            ));
        }
        layers
    }

    /// Closed-form parameter count: every conv contributes
    /// `c_out * c_in * k^3` weights plus `c_out` biases.
    pub fn expected_param_count(&self) -> usize {
        self.layer_channels()
            .iter()
            .map(|(_, c_in, c_out, k)| c_out * c_in * k * k * k + c_out)
            .sum()
    }

    /// Feature channel count at the prototype stage.
    pub fn hidden_dim(&self) -> usize {
        self.encoder_width(self.depth - self.proto_stage)
    }

    fn downsample_factor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Ordered, named parameter tensors (all leaves).
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    /// Kaiming fan-in initialization with a seeded stream; biases start at
    /// zero.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Params> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, c_in, c_out, k) in config.layer_channels() {
            let fan_in = (c_in * k * k * k) as f64;
            let scale = (2.0 / fan_in).sqrt();
            let count = c_out * c_in * k * k * k;
            let weights: Vec<f64> = (0..count)
                .map(|_| scale * standard_normal(&mut rng))
                .collect();
            entries.push((
                format!("{name}.weight"),
                Tensor::from_vec(weights, &[c_out, c_in, k, k, k])?,
            ));
            entries.push((format!("{name}.bias"), Tensor::zeros(&[c_out, 1, 1, 1])));
        }
        Ok(Params { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replace every tensor via `f`, keeping names and order.
    pub fn map<F>(&self, mut f: F) -> Result<Params>
    where
        F: FnMut(&str, &Tensor) -> Result<Tensor>,
    {
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            entries.push((name.clone(), f(name, tensor)?));
        }
        Ok(Params { entries })
    }
}

/// `theta_t <- decay * theta_t + (1 - decay) * theta_s`, elementwise over
/// every parameter tensor.
pub fn ema_update(teacher: &Params, student: &Params, decay: f64) -> Result<Params> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("EMA decay {decay} outside [0,1]")));
    }
    if teacher.entries.len() != student.entries.len() {
        return Err(Error::Shape("parameter sets differ in length".into()));
    }
    let mut entries = Vec::with_capacity(teacher.entries.len());
    for ((name_t, t), (name_s, s)) in teacher.entries.iter().zip(&student.entries) {
        if name_t != name_s || t.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "parameter mismatch: {name_t} {:?} vs {name_s} {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&a, &b)| decay * a + (1.0 - decay) * b)
            .collect();
        entries.push((name_t.clone(), Tensor::from_vec(data, t.shape())?));
    }
    Ok(Params { entries })
}

/// Forward products: per-head evidence maps (post-softplus) and the hidden
/// feature volume at label resolution.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub evidence: Vec<Tensor>,
    pub hidden: Tensor,
}

impl ModelOutput {
    /// Values only, no graph: the teacher side of a training step.
    pub fn detach(&self) -> ModelOutput {
        ModelOutput {
            evidence: self.evidence.iter().map(|e| e.detach()).collect(),
            hidden: self.hidden.detach(),
        }
    }
}

fn conv_block(
    params: &Params,
    name: &str,
    input: &Tensor,
    stride: usize,
    relu: bool,
) -> Result<Tensor> {
    let weight = params.get(&format!("{name}.weight"))?;
    let bias = params.get(&format!("{name}.bias"))?;
    let k = weight.shape()[2];
    let padding = (k - 1) / 2;
    input.conv3d_fused(weight, Some(bias), relu, stride, padding)
}

/// Deterministic forward pass of the encoder-decoder plus heads.
pub fn forward(params: &Params, config: &NetConfig, volume: &Tensor) -> Result<ModelOutput> {
    config.validate()?;
    if volume.rank() != 4 || volume.shape()[0] != config.in_channels {
        return Err(Error::Shape(format!(
            "expected [{}, D, H, W] input, got {:?}",
            config.in_channels,
            volume.shape()
        )));
    }
    let factor = config.downsample_factor();
    let spatial = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
    for &e in &spatial {
        if e % factor != 0 {
            return Err(Error::Shape(format!(
                "spatial extent {e} not divisible by {factor}"
            )));
        }
    }

    // encoder
    let mut skips: Vec<Tensor> = Vec::with_capacity(config.depth);
    let mut x = conv_block(params, "enc0", volume, 1, true)?;
    skips.push(x.clone());
    for stage in 1..config.depth {
        x = conv_block(params, &format!("enc{stage}"), &x, 2, true)?;
        skips.push(x.clone());
    }

    // decoder; levels[0] is the bottleneck (level 1)
    let mut levels: Vec<Tensor> = vec![x.clone()];
    for step in 1..config.depth {
        let skip = &skips[config.depth - 1 - step];
        let target = [skip.shape()[1], skip.shape()[2], skip.shape()[3]];
        let up = x.trilinear_upsample(target)?;
        let merged = Tensor::concat(&[up, skip.clone()], 0)?;
        x = conv_block(params, &format!("dec{step}"), &merged, 1, true)?;
        levels.push(x.clone());
    }

    let hidden_raw = &levels[config.proto_stage - 1];
    let hidden = hidden_raw.trilinear_upsample(spatial)?;

    let mut evidence = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let logits = conv_block(params, &format!("head{head}"), &x, 1, false)?;
        evidence.push(logits.softplus()?);
    }
    Ok(ModelOutput { evidence, hidden })
}

/// Checkpoint layout: u32 LE header length, the JSON-encoded `NetConfig`,
/// then the ordered parameter tensors as f64 volume frames.
pub fn save_checkpoint(path: &Path, config: &NetConfig, params: &Params) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let header = serde_json::to_vec(config)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, tensor) in &params.entries {
        volfile::write_tensor_to(&mut out, tensor, Dtype::F64)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetConfig, Params)> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    let mut b4 = [0u8; 4];
    input
        .read_exact(&mut b4)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let header_len = u32::from_le_bytes(b4) as usize;
    let mut header = vec![0u8; header_len];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let config: NetConfig = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("checkpoint header decode: {e}")))?;
    config.validate()?;
    let mut entries = Vec::new();
    for (name, c_in, c_out, k) in config.layer_channels() {
        let weight = volfile::read_from(&mut input)?.into_tensor()?;
        if weight.shape() != [c_out, c_in, k, k, k] {
            return Err(Error::Format(format!(
                "checkpoint weight {name} has shape {:?}",
                weight.shape()
            )));
        }
        let bias = volfile::read_from(&mut input)?.into_tensor()?;
        entries.push((format!("{name}.weight"), weight));
        entries.push((format!("{name}.bias"), bias));
    }
    Ok((config, Params { entries }))
}
