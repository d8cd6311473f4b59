//! Mean-teacher semi-supervised training loop: per-step evidential fusion of
//! classifier heads, dual-uncertainty reliability maps, prototype pooling
//! and fusion, the combined loss, the optimizer step and the teacher EMA
//! update — with every component behind a config toggle.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::{
    average_masses, dempster_fuse_all_opts, dirichlet_from_mass, expected_probs,
    mass_from_evidence, pseudo_labels, FusionOptions, MassField,
};
use crate::labels::LabelVolume;
use crate::losses::{self, GedlVariant, LossReport};
use crate::metrics;
use crate::model::{self, ema_update, ModelOutput, NetConfig, Params};
use crate::prototype::{self, ProtoSource, PrototypeSet};
use crate::synth::{Dataset, Sample};
use crate::tensor::Tensor;
use crate::uncertainty::{
    dual_uncertainty, normalize01, normalize01_joint, reliability_map, ReliabilityMap,
    UncertaintyField,
};

/// How the heads of one model are combined into a single mass field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// Arithmetic mean of the per-head masses (the averaging baseline).
    Average,
    /// Dempster's combination rule over the heads.
    Dempster,
}

/// Which student prediction feeds the supervised segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegSource {
    /// Expected probabilities of the fused student Dirichlet.
    Fused,
    /// Expected probabilities induced from the first head alone.
    FirstHead,
}

/// Scope of the 0-1 normalization applied to dual uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    PerVolume,
    PerBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub labeled_ratio: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub lambda_max: f64,
    pub gamma_max: f64,
    pub proto_tau: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub use_mt: bool,
    pub fuse_heads_mode: FuseMode,
    pub student_fuse_heads: bool,
    pub use_prototypes: bool,
    pub use_lrm: bool,
    pub use_urm: bool,
    pub use_gedl_labeled: bool,
    pub use_gedl_unlabeled: bool,
    pub gedl_variant: GedlVariant,
    pub normalize_universal: bool,
    pub seg_source: SegSource,
    pub uncertainty_norm_scope: NormScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            labeled_ratio: 0.1,
            labeled_per_batch: 1,
            unlabeled_per_batch: 2,
            iterations: 2000,
            learning_rate: 1e-3,
            ema_decay: 0.99,
            lambda_max: 1.0,
            gamma_max: 0.5,
            proto_tau: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            use_mt: true,
            fuse_heads_mode: FuseMode::Dempster,
            student_fuse_heads: true,
            use_prototypes: true,
            use_lrm: true,
            use_urm: true,
            use_gedl_labeled: true,
            use_gedl_unlabeled: true,
            gedl_variant: GedlVariant::LogAlpha,
            normalize_universal: true,
            seg_source: SegSource::Fused,
            uncertainty_norm_scope: NormScope::PerVolume,
        }
    }
}

impl TrainConfig {
    /// Baseline with every semi-supervised component disabled: plain
    /// supervised segmentation training on the labeled subset.
    pub fn supervised_baseline(mut self) -> TrainConfig {
        self.use_mt = false;
        self.use_prototypes = false;
        self.use_lrm = false;
        self.use_urm = false;
        self.use_gedl_labeled = false;
        self.use_gedl_unlabeled = false;
        self.fuse_heads_mode = FuseMode::Average;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.labeled_per_batch == 0 {
            return Err(Error::Config("labeled_per_batch must be positive".into()));
        }
        if self.use_mt && self.unlabeled_per_batch == 0 {
            return Err(Error::Config(
                "unlabeled_per_batch must be positive when the teacher branch is on".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.proto_tau <= 0.0 {
            return Err(Error::Config("rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0,1]".into()));
        }
        Ok(())
    }

    fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            normalize_universal: self.normalize_universal,
        }
    }
}

/// Time-dependent Gaussian ramp `max * exp(-5 (1 - t/T)^2)`; equals `max`
/// at `t = T` and `max * e^-5` at `t = 0`.
pub fn gaussian_ramp(step: usize, total: usize, max: f64) -> f64 {
    if total == 0 {
        return max;
    }
    let progress = step as f64 / total as f64;
    max * (-5.0 * (1.0 - progress).powi(2)).exp()
}

/// Consistency-weight schedule.
pub fn lambda_con(step: usize, total: usize, lambda_max: f64) -> f64 {
    gaussian_ramp(step, total, lambda_max)
}

/// Prototype-fusion proportion schedule.
pub fn gamma_schedule(step: usize, total: usize, gamma_max: f64) -> f64 {
    gaussian_ramp(step, total, gamma_max)
}

/// The deterministic batch-sampling stream for a config; exposed so
/// reference loops can replay the exact sequence the trainer sees.
pub fn batch_rng(config: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c_5eed_ba7c)
}

/// Draw batch indices (with replacement) from the labeled pool, and from the
/// unlabeled pool when requested. Exposed so reference loops can replay the
/// exact stream.
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    labeled_len: usize,
    unlabeled_len: usize,
    config: &TrainConfig,
) -> (Vec<usize>, Vec<usize>) {
    let labeled: Vec<usize> = (0..config.labeled_per_batch)
        .map(|_| rng.gen_range(0..labeled_len))
        .collect();
    let unlabeled = if config.use_mt && unlabeled_len > 0 {
        (0..config.unlabeled_per_batch)
            .map(|_| rng.gen_range(0..unlabeled_len))
            .collect()
    } else {
        Vec::new()
    };
    (labeled, unlabeled)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(params: &Params) -> AdamState {
        AdamState {
            m: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_step(
    params: &Params,
    grads: &crate::tensor::Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<Params> {
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let mut index = 0usize;
    params.map(|_, tensor| {
        let grad = grads.get(tensor);
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        index += 1;
        let mut out = tensor.data().to_vec();
        for ((x, (&g, mi)), vi) in out
            .iter_mut()
            .zip(grad.data().iter().zip(m.iter_mut()))
            .zip(v.iter_mut())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Tensor::from_vec(out, tensor.shape())
    })
}

/// Mutable training state: step counter, both parameter sets, optimizer
/// moments and the batch-sampling RNG.
pub struct TrainState {
    pub step: usize,
    pub student: Params,
    pub teacher: Params,
    rng: ChaCha8Rng,
    adam: AdamState,
    last_prototypes: Option<PrototypeSet>,
}

impl TrainState {
    /// Teacher starts as a copy of the student (fresh tensor identities, so
    /// gradients can never alias across the two parameter sets).
    pub fn new(config: &TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let student = Params::init(&config.net, config.seed)?;
        let teacher = student.map(|_, t| Ok(t.detach()))?;
        Ok(TrainState {
            step: 0,
            adam: AdamState::new(&student),
            student,
            teacher,
            rng: batch_rng(config),
            last_prototypes: None,
        })
    }

    pub fn last_prototypes(&self) -> Option<&PrototypeSet> {
        self.last_prototypes.as_ref()
    }
}

/// Combine one model's per-head evidence into a mass field.
fn combine_heads(output: &ModelOutput, mode: FuseMode, options: FusionOptions) -> Result<MassField> {
    let masses: Vec<MassField> = output
        .evidence
        .iter()
        .map(mass_from_evidence)
        .collect::<Result<_>>()?;
    match mode {
        FuseMode::Average => average_masses(&masses),
        FuseMode::Dempster => dempster_fuse_all_opts(&masses, options),
    }
}

fn student_fuse_mode(config: &TrainConfig) -> FuseMode {
    if config.student_fuse_heads {
        config.fuse_heads_mode
    } else {
        FuseMode::Average
    }
}

/// Normalize a batch of uncertainty fields under the configured scope.
fn normalize_batch(fields: Vec<UncertaintyField>, scope: NormScope) -> Vec<UncertaintyField> {
    match scope {
        NormScope::PerVolume => fields.iter().map(normalize01).collect(),
        NormScope::PerBatch => normalize01_joint(&fields),
    }
}

/// Zero out reliability on voxels whose label class has no valid prototype,
/// so the prototype CE never scores against a missing class.
fn mask_invalid_classes(
    beta: &ReliabilityMap,
    labels: &LabelVolume,
    valid: &[bool],
) -> Result<ReliabilityMap> {
    if valid.iter().all(|&v| v) {
        return Ok(beta.clone());
    }
    let values: Vec<f64> = beta
        .values()
        .iter()
        .zip(labels.data())
        .map(|(&b, &l)| if valid[l as usize] { b } else { 0.0 })
        .collect();
    ReliabilityMap::new(beta.dims(), values)
}

/// Everything one optimization step produces besides the state update.
pub struct StepOutput {
    pub report: LossReport,
    pub gamma: f64,
}

/// One optimization step. Student forwards run on the labeled and unlabeled
/// batches, the teacher (detached) on the unlabeled batch only; heads are
/// fused per config, reliability maps derive from the fused masses, pseudo-
/// labels from the fused teacher mass, prototypes pool from student-labeled
/// and teacher-unlabeled features, and the combined loss steps the student
/// before the teacher EMA update.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    labeled_batch: &[&Sample],
    unlabeled_batch: &[&Sample],
) -> Result<StepOutput> {
    let step = state.step;
    let lambda = lambda_con(step, config.iterations, config.lambda_max);
    let gamma = gamma_schedule(step, config.iterations, config.gamma_max);
    let options = config.fusion_options();
    let n = config.net.num_classes;
    let zero = Tensor::scalar(0.0);

    // ---- student and teacher forwards ----
    // Forwards are pure in (params, input) and may run in parallel; the
    // result order is fixed by the batch order, so numerics are unchanged.
    let use_unlabeled = config.use_mt && !unlabeled_batch.is_empty();
    enum Pass {
        StudentLabeled(usize),
        StudentUnlabeled(usize),
        Teacher(usize),
    }
    let mut passes: Vec<Pass> = (0..labeled_batch.len()).map(Pass::StudentLabeled).collect();
    if use_unlabeled {
        passes.extend((0..unlabeled_batch.len()).map(Pass::StudentUnlabeled));
        passes.extend((0..unlabeled_batch.len()).map(Pass::Teacher));
    }
    use rayon::prelude::*;
    let outputs: Vec<Result<(usize, ModelOutput)>> = passes
        .par_iter()
        .enumerate()
        .map(|(slot, pass)| {
            let out = match pass {
                Pass::StudentLabeled(i) => {
                    model::forward(&state.student, &config.net, &labeled_batch[*i].image)?
                }
                Pass::StudentUnlabeled(i) => {
                    model::forward(&state.student, &config.net, &unlabeled_batch[*i].image)?
                }
                Pass::Teacher(i) => {
                    model::forward(&state.teacher, &config.net, &unlabeled_batch[*i].image)?
                        .detach()
                }
            };
            Ok((slot, out))
        })
        .collect();
    let mut labeled_out: Vec<ModelOutput> = Vec::with_capacity(labeled_batch.len());
    let mut unlabeled_out: Vec<ModelOutput> = Vec::with_capacity(unlabeled_batch.len());
    let mut teacher_out: Vec<ModelOutput> = Vec::with_capacity(unlabeled_batch.len());
    for result in outputs {
        let (slot, out) = result?;
        match passes[slot] {
            Pass::StudentLabeled(_) => labeled_out.push(out),
            Pass::StudentUnlabeled(_) => unlabeled_out.push(out),
            Pass::Teacher(_) => teacher_out.push(out),
        }
    }

    // ---- per-source head fusion ----
    let student_mode = student_fuse_mode(config);
    let labeled_mass: Vec<MassField> = labeled_out
        .iter()
        .map(|o| combine_heads(o, student_mode, options))
        .collect::<Result<_>>()?;
    let unlabeled_mass: Vec<MassField> = unlabeled_out
        .iter()
        .map(|o| combine_heads(o, student_mode, options))
        .collect::<Result<_>>()?;
    let teacher_mass: Vec<MassField> = teacher_out
        .iter()
        .map(|o| combine_heads(o, config.fuse_heads_mode, options))
        .collect::<Result<_>>()?;

    // ---- dual uncertainty and reliability ----
    let labeled_u = normalize_batch(
        labeled_mass.iter().map(dual_uncertainty).collect(),
        config.uncertainty_norm_scope,
    );
    let teacher_u = normalize_batch(
        teacher_mass.iter().map(dual_uncertainty).collect(),
        config.uncertainty_norm_scope,
    );
    let labeled_beta: Vec<ReliabilityMap> = if config.use_lrm {
        labeled_u.iter().map(reliability_map).collect::<Result<_>>()?
    } else {
        labeled_batch
            .iter()
            .map(|s| ReliabilityMap::all_ones(s.label.dims()))
            .collect()
    };
    let teacher_beta: Vec<ReliabilityMap> = if config.use_urm {
        teacher_u.iter().map(reliability_map).collect::<Result<_>>()?
    } else {
        unlabeled_batch
            .iter()
            .map(|s| ReliabilityMap::all_ones(s.label.dims()))
            .collect()
    };

    // ---- pseudo-labels from the fused teacher prediction ----
    let pseudo: Vec<LabelVolume> = teacher_mass
        .iter()
        .map(pseudo_labels)
        .collect::<Result<_>>()?;

    // ---- prototypes ----
    let mut proto_ce_labeled = zero.clone();
    let mut proto_ce_unlabeled = zero.clone();
    let mut fused_protos: Option<PrototypeSet> = None;
    if config.use_prototypes {
        let labeled_features: Vec<Tensor> =
            labeled_out.iter().map(|o| o.hidden.clone()).collect();
        let true_labels: Vec<LabelVolume> =
            labeled_batch.iter().map(|s| s.label.clone()).collect();
        let proto_l = prototype::pool_prototypes(
            &labeled_features,
            &labeled_beta,
            &true_labels,
            n,
            ProtoSource::Labeled,
        )?;
        let fused = if use_unlabeled {
            let teacher_features: Vec<Tensor> =
                teacher_out.iter().map(|o| o.hidden.clone()).collect();
            let proto_u = prototype::pool_prototypes(
                &teacher_features,
                &teacher_beta,
                &pseudo,
                n,
                ProtoSource::Unlabeled,
            )?;
            prototype::fuse_prototypes(&proto_l, &proto_u, gamma)?
        } else {
            proto_l
        };

        if fused.valid_mask().iter().any(|&v| v) {
            let mut acc = zero.clone();
            for ((out, sample), beta) in labeled_out.iter().zip(labeled_batch).zip(&labeled_beta) {
                let sim = prototype::similarity_probs(&out.hidden, &fused, config.proto_tau)?;
                let beta = mask_invalid_classes(beta, &sample.label, fused.valid_mask())?;
                acc = acc.add(&losses::proto_ce_loss(&sim, &sample.label, &beta)?)?;
            }
            proto_ce_labeled = acc.mul_scalar(1.0 / labeled_batch.len() as f64)?;

            if use_unlabeled {
                let mut acc = zero.clone();
                for ((out, labels), beta) in unlabeled_out.iter().zip(&pseudo).zip(&teacher_beta)
                {
                    let sim = prototype::similarity_probs(&out.hidden, &fused, config.proto_tau)?;
                    let beta = mask_invalid_classes(beta, labels, fused.valid_mask())?;
                    acc = acc.add(&losses::proto_ce_loss(&sim, labels, &beta)?)?;
                }
                proto_ce_unlabeled = acc.mul_scalar(1.0 / unlabeled_batch.len() as f64)?;
            }
            fused_protos = Some(fused.detach());
        }
    }

    // ---- evidential losses ----
    let mut gedl_labeled = zero.clone();
    if config.use_gedl_labeled {
        let mut acc = zero.clone();
        for ((mass, sample), u_bar) in labeled_mass.iter().zip(labeled_batch).zip(&labeled_u) {
            let d = dirichlet_from_mass(mass)?;
            acc = acc.add(&losses::gedl_loss(&d, &sample.label, u_bar, config.gedl_variant)?)?;
        }
        gedl_labeled = acc.mul_scalar(1.0 / labeled_batch.len() as f64)?;
    }
    let mut gedl_unlabeled = zero.clone();
    if config.use_gedl_unlabeled && use_unlabeled {
        let mut acc = zero.clone();
        for ((mass, labels), u_bar) in unlabeled_mass.iter().zip(&pseudo).zip(&teacher_u) {
            let d = dirichlet_from_mass(mass)?;
            acc = acc.add(&losses::gedl_loss(&d, labels, u_bar, config.gedl_variant)?)?;
        }
        gedl_unlabeled = acc.mul_scalar(1.0 / unlabeled_batch.len() as f64)?;
    }

    // ---- supervised segmentation loss ----
    let mut seg_acc = zero.clone();
    for ((mass, out), sample) in labeled_mass.iter().zip(&labeled_out).zip(labeled_batch) {
        let probs = match config.seg_source {
            SegSource::Fused => expected_probs(&dirichlet_from_mass(mass)?)?,
            SegSource::FirstHead => {
                let head_mass = mass_from_evidence(&out.evidence[0])?;
                expected_probs(&dirichlet_from_mass(&head_mass)?)?
            }
        };
        seg_acc = seg_acc.add(&losses::seg_loss(&probs, &sample.label)?)?;
    }
    let seg = seg_acc.mul_scalar(1.0 / labeled_batch.len() as f64)?;

    // ---- total, backward, optimize, EMA ----
    let (total, report) = losses::total_loss(
        &seg,
        &gedl_labeled,
        &proto_ce_labeled,
        &gedl_unlabeled,
        &proto_ce_unlabeled,
        lambda,
    )
    .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;

    let grads = total.backward()?;
    debug_assert!(
        state.teacher.tensors().all(|t| !grads.contains(t)),
        "teacher parameters must receive no gradient"
    );
    state.student = adam_step(&state.student, &grads, &mut state.adam, config.learning_rate)?;
    if config.use_mt {
        state.teacher = ema_update(&state.teacher, &state.student, config.ema_decay)?;
    }
    state.step += 1;
    if let Some(p) = fused_protos {
        state.last_prototypes = Some(p);
    }

    Ok(StepOutput { report, gamma })
}

/// Predict labels for one volume with the student parameters: forward,
/// combine heads as configured, take the per-voxel argmax.
pub fn predict(params: &Params, config: &TrainConfig, image: &Tensor) -> Result<LabelVolume> {
    let out = model::forward(params, &config.net, image)?.detach();
    let mass = combine_heads(&out, student_fuse_mode(config), config.fusion_options())?;
    pseudo_labels(&mass)
}

/// One line of the training log (deterministic; wall time goes to the
/// separate timing log so loss logs are byte-reproducible).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub gamma: f64,
}

/// Mean test metrics over the foreground classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_sample: Vec<metrics::MetricReport>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
}

/// Evaluate the student on a sample set over classes `1..N`.
pub fn evaluate_on(params: &Params, config: &TrainConfig, samples: &[Sample]) -> Result<EvalSummary> {
    let classes: Vec<usize> = (1..config.net.num_classes).collect();
    let mut per_sample = Vec::with_capacity(samples.len());
    for sample in samples {
        let pred = predict(params, config, &sample.image)?;
        per_sample.push(metrics::evaluate(&pred, &sample.label, &classes)?);
    }
    let mean = |f: fn(&metrics::MetricReport) -> Option<f64>| {
        let vals: Vec<f64> = per_sample.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(EvalSummary {
        mean_dice: per_sample.iter().map(|r| r.mean_dice).sum::<f64>()
            / per_sample.len().max(1) as f64,
        mean_jaccard: per_sample.iter().map(|r| r.mean_jaccard).sum::<f64>()
            / per_sample.len().max(1) as f64,
        mean_hd95: mean(|r| r.mean_hd95),
        mean_asd: mean(|r| r.mean_asd),
        per_sample,
    })
}

/// Paths produced by a full run.
pub struct RunArtifacts {
    pub log_path: PathBuf,
    pub timing_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_metrics: EvalSummary,
}

/// Train for `config.iterations` steps on the dataset, checkpointing
/// periodically, then evaluate on the held-out test set.
pub fn run(config: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    if dataset.labeled.is_empty() {
        return Err(Error::Config("dataset has no labeled samples".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut state = TrainState::new(config)?;
    let log_path = out_dir.join("train_log.jsonl");
    let timing_path = out_dir.join("timings.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut timing = BufWriter::new(File::create(&timing_path)?);
    let mut checkpoints = Vec::new();

    let save_ckpt = |state: &TrainState, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        let path = out_dir.join(format!("ckpt_{:05}.bin", state.step));
        model::save_checkpoint(&path, &config.net, &state.student)?;
        if let Some(protos) = state.last_prototypes() {
            prototype::write_prototypes(
                &out_dir.join(format!("protos_{:05}.bin", state.step)),
                protos,
            )?;
        }
        checkpoints.push(path);
        Ok(())
    };

    save_ckpt(&state, &mut checkpoints)?;

    for _ in 0..config.iterations {
        let started = Instant::now();
        let (labeled_idx, unlabeled_idx) = sample_batch(
            &mut state.rng,
            dataset.labeled.len(),
            dataset.unlabeled.len(),
            config,
        );
        let labeled_batch: Vec<&Sample> = labeled_idx.iter().map(|&i| &dataset.labeled[i]).collect();
        let unlabeled_batch: Vec<&Sample> =
            unlabeled_idx.iter().map(|&i| &dataset.unlabeled[i]).collect();
        let out = train_step(&mut state, config, &labeled_batch, &unlabeled_batch).map_err(|e| {
            match e {
                Error::Conflict { x, y, z } => Error::Numeric(format!(
                    "step {} aborted: total conflict at voxel ({x}, {y}, {z}) while fusing \
                     batch (labeled {labeled_idx:?}, unlabeled {unlabeled_idx:?})",
                    state.step
                )),
                other => other,
            }
        })?;
        let line = LogLine {
            step: state.step - 1,
            report: out.report,
            gamma: out.gamma,
        };
        let encoded = serde_json::to_string(&line)
            .map_err(|e| Error::Format(format!("log encode: {e}")))?;
        writeln!(log, "{encoded}")?;
        writeln!(
            timing,
            "{{\"step\":{},\"wall_ms\":{}}}",
            state.step - 1,
            started.elapsed().as_millis()
        )?;

        if config.checkpoint_every > 0
            && state.step % config.checkpoint_every == 0
            && state.step < config.iterations
        {
            save_ckpt(&state, &mut checkpoints)?;
        }
    }
    if config.iterations > 0 {
        save_ckpt(&state, &mut checkpoints)?;
    }
    log.flush()?;
    timing.flush()?;

    let final_metrics = evaluate_on(&state.student, config, &dataset.test)?;
    let metrics_path = out_dir.join("metrics.json");
    let encoded = serde_json::to_string_pretty(&final_metrics)
        .map_err(|e| Error::Format(format!("metrics encode: {e}")))?;
    std::fs::write(&metrics_path, encoded)?;

    Ok(RunArtifacts {
        log_path,
        timing_path,
        metrics_path,
        checkpoints,
        final_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, PhantomSpec, ShapeSpec};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                in_channels: 1,
                base_width: 2,
                depth: 2,
                num_classes: 2,
                num_heads: 2,
                proto_stage: 1,
            },
            iterations: 4,
            checkpoint_every: 2,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let spec = PhantomSpec {
            dims: [8, 8, 8],
            classes: vec![ShapeSpec {
                count: 1,
                radius_min: 2.0,
                radius_max: 3.0,
                intensity_mean: 1.0,
                intensity_std: 0.1,
            }],
            ..PhantomSpec::default()
        };
        make_dataset(&spec, 10, 0.3, 11).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let total = 1000;
        assert_eq!(lambda_con(total, total, 0.7), 0.7);
        let at_zero = lambda_con(0, total, 1.0);
        assert!((at_zero - (-5.0f64).exp()).abs() < 1e-12);
        let mut prev = -1.0;
        for t in 0..=total {
            let v = lambda_con(t, total, 1.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn single_step_runs_and_composes() {
        let config = tiny_train_config();
        let ds = tiny_dataset();
        let mut state = TrainState::new(&config).unwrap();
        let labeled: Vec<&Sample> = vec![&ds.labeled[0]];
        let unlabeled: Vec<&Sample> = vec![&ds.unlabeled[0], &ds.unlabeled[1]];
        let out = train_step(&mut state, &config, &labeled, &unlabeled).unwrap();
        assert!(out.report.composition_holds());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn loss_stream_is_deterministic() {
        let config = tiny_train_config();
        let ds = tiny_dataset();
        let run = || {
            let mut state = TrainState::new(&config).unwrap();
            let mut reports = Vec::new();
            for _ in 0..3 {
                let (li, ui) =
                    sample_batch(&mut state.rng, ds.labeled.len(), ds.unlabeled.len(), &config);
                let lb: Vec<&Sample> = li.iter().map(|&i| &ds.labeled[i]).collect();
                let ub: Vec<&Sample> = ui.iter().map(|&i| &ds.unlabeled[i]).collect();
                reports.push(train_step(&mut state, &config, &lb, &ub).unwrap().report);
            }
            reports
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn teacher_gets_no_gradient_and_follows_ema() {
        let config = tiny_train_config();
        let ds = tiny_dataset();
        let mut state = TrainState::new(&config).unwrap();
        let before_teacher = state.teacher.clone();
        let labeled: Vec<&Sample> = vec![&ds.labeled[0]];
        let unlabeled: Vec<&Sample> = vec![&ds.unlabeled[0], &ds.unlabeled[1]];
        train_step(&mut state, &config, &labeled, &unlabeled).unwrap();
        // teacher = decay * old_teacher + (1 - decay) * new_student, exactly
        for ((t_new, t_old), s) in state
            .teacher
            .tensors()
            .zip(before_teacher.tensors())
            .zip(state.student.tensors())
        {
            for ((&a, &b), &c) in t_new.data().iter().zip(t_old.data()).zip(s.data()) {
                let want = config.ema_decay * b + (1.0 - config.ema_decay) * c;
                assert_eq!(a.to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn mt_off_ignores_unlabeled_branch() {
        let mut config = tiny_train_config().supervised_baseline();
        config.use_gedl_labeled = false;
        let ds = tiny_dataset();
        let mut state = TrainState::new(&config).unwrap();
        let labeled: Vec<&Sample> = vec![&ds.labeled[0]];
        let out = train_step(&mut state, &config, &labeled, &[]).unwrap();
        assert_eq!(out.report.gedl_unlabeled, 0.0);
        assert_eq!(out.report.proto_ce_unlabeled, 0.0);
        assert_eq!(out.report.proto_ce_labeled, 0.0);
        assert_eq!(out.report.gedl_labeled, 0.0);
        assert!(out.report.seg > 0.0);
    }

    #[test]
    fn run_zero_iterations_emits_initial_artifacts() {
        let mut config = tiny_train_config();
        config.iterations = 0;
        let ds = tiny_dataset();
        let dir = std::env::temp_dir().join("epl-run-zero");
        let _ = std::fs::remove_dir_all(&dir);
        let artifacts = run(&config, &ds, &dir).unwrap();
        assert_eq!(artifacts.checkpoints.len(), 1);
        assert!(artifacts.metrics_path.exists());
        let log = std::fs::read_to_string(&artifacts.log_path).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn run_produces_deterministic_logs() {
        let config = tiny_train_config();
        let ds = tiny_dataset();
        let dir_a = std::env::temp_dir().join("epl-run-a");
        let dir_b = std::env::temp_dir().join("epl-run-b");
        let _ = std::fs::remove_dir_all(&dir_a);
        let _ = std::fs::remove_dir_all(&dir_b);
        let a = run(&config, &ds, &dir_a).unwrap();
        let b = run(&config, &ds, &dir_b).unwrap();
        let log_a = std::fs::read(&a.log_path).unwrap();
        let log_b = std::fs::read(&b.log_path).unwrap();
        assert_eq!(log_a, log_b);
        assert!(!log_a.is_empty());
    }
}
