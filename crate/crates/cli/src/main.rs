//! `epl`: generate synthetic datasets, train the mean-teacher model, fuse
//! mass files, compute uncertainty maps, render slices and evaluate
//! predictions. Diagnostics go to stderr; machine-readable output goes to
//! stdout or files.

mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use epl_core::error::Error;
use epl_core::evidence::{average_masses, dempster_fuse_all, MassField};
use epl_core::labels::LabelVolume;
use epl_core::metrics;
use epl_core::synth::{self, PhantomSpec};
use epl_core::trainer::{self, TrainConfig};
use epl_core::uncertainty::{dual_uncertainty, normalize01};
use epl_core::volfile::{self, Dtype, Volume};
use epl_core::Tensor;

#[derive(Parser)]
#[command(name = "epl", version, about = "Evidential fusion and semi-supervised segmentation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FuseModeArg {
    Dempster,
    Average,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with labeled/unlabeled/test splits.
    GenData {
        /// Phantom spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for volumes and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of training volumes.
        #[arg(long)]
        count: usize,
        /// Fraction of training volumes that keep labels.
        #[arg(long)]
        labeled_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a generated dataset.
    Train {
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (must hold manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for logs, checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a predicted label volume against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Classes to score (defaults to every foreground class in gt).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
    },
    /// Fuse mass-assignment volumes.
    Fuse {
        /// Input mass files ([N+1,D,H,W] volumes).
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FuseModeArg::Dempster)]
        mode: FuseModeArg,
    },
    /// Compute the dual uncertainty of a mass file.
    Uncertainty {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Min-max normalize the result to [0, 1].
        #[arg(long)]
        normalize: bool,
    },
    /// Render one slice of a volume as a binary PGM image.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Channel to slice when the volume is [C,D,H,W].
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
    /// Run the built-in oracle suites; exits non-zero on any failure.
    Selftest,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) | Error::Conflict { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenData {
            spec,
            out,
            count,
            labeled_ratio,
            seed,
        } => {
            let text = std::fs::read_to_string(&spec)?;
            let spec: PhantomSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Spec(format!("bad phantom spec: {e}")))?;
            let dataset = synth::make_dataset(&spec, count, labeled_ratio, seed)?;
            let manifest = synth::save_dataset(&out, &dataset, &spec, seed)?;
            eprintln!(
                "wrote {} labeled / {} unlabeled / {} test volumes",
                dataset.labeled.len(),
                dataset.unlabeled.len(),
                dataset.test.len()
            );
            println!("{}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, data, out } => {
            let text = std::fs::read_to_string(&config)?;
            let config: TrainConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad training config: {e}")))?;
            let (dataset, _) = synth::load_dataset(&data)?;
            let artifacts = trainer::run(&config, &dataset, &out)?;
            eprintln!(
                "trained {} steps; mean test dice {:.4}",
                config.iterations, artifacts.final_metrics.mean_dice
            );
            println!("{}", artifacts.metrics_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { pred, gt, classes } => {
            let pred = read_labels(&pred)?;
            let gt = read_labels(&gt)?;
            let classes = classes.unwrap_or_else(|| (1..=gt.max_class() as usize).collect());
            if classes.is_empty() {
                return Err(Error::Domain("ground truth has no foreground class".into()));
            }
            let report = metrics::evaluate(&pred, &gt, &classes)?;
            let encoded = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("report encode: {e}")))?;
            println!("{encoded}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Fuse { inputs, out, mode } => {
            let mut masses = Vec::with_capacity(inputs.len());
            for path in &inputs {
                let tensor = volfile::read(path)?.into_tensor()?;
                masses.push(MassField::from_packed(tensor)?);
            }
            let fused = match mode {
                FuseModeArg::Dempster => dempster_fuse_all(&masses)?,
                FuseModeArg::Average => average_masses(&masses)?,
            };
            volfile::write_tensor(&out, fused.channels(), Dtype::F64)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Uncertainty {
            input,
            out,
            normalize,
        } => {
            let tensor = volfile::read(&input)?.into_tensor()?;
            let mass = MassField::from_packed(tensor)?;
            let mut field = dual_uncertainty(&mass);
            if normalize {
                field = normalize01(&field);
            }
            let dims = field.dims();
            let volume = Tensor::from_vec(field.values().to_vec(), &[dims[0], dims[1], dims[2]])?;
            volfile::write_tensor(&out, &volume, Dtype::F64)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Render {
            input,
            axis,
            index,
            out,
            channel,
        } => {
            let (data, dims) = match volfile::read(&input)? {
                Volume::Tensor(t) => extract_channel(&t, channel)?,
                Volume::Labels(l) => {
                    let dims = l.dims();
                    (l.data().iter().map(|&v| v as f64).collect(), dims)
                }
            };
            let (pixels, width, height) = slice_volume(&data, dims, axis, index)?;
            write_pgm(&out, &pixels, width, height)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => Ok(selftest::run_all()),
    }
}

fn read_labels(path: &PathBuf) -> Result<LabelVolume, Error> {
    volfile::read(path)?.into_labels()
}

fn extract_channel(tensor: &Tensor, channel: usize) -> Result<(Vec<f64>, [usize; 3]), Error> {
    match tensor.rank() {
        3 => {
            if channel != 0 {
                return Err(Error::Shape("rank-3 volume has a single channel".into()));
            }
            let s = tensor.shape();
            Ok((tensor.data().to_vec(), [s[0], s[1], s[2]]))
        }
        4 => {
            let s = tensor.shape();
            if channel >= s[0] {
                return Err(Error::Shape(format!(
                    "channel {channel} out of range for {} channels",
                    s[0]
                )));
            }
            let voxels = s[1] * s[2] * s[3];
            let data = tensor.data()[channel * voxels..(channel + 1) * voxels].to_vec();
            Ok((data, [s[1], s[2], s[3]]))
        }
        r => Err(Error::Shape(format!("cannot render rank-{r} volume"))),
    }
}

/// Extract one plane; returns (values, width, height) in image order.
fn slice_volume(
    data: &[f64],
    dims: [usize; 3],
    axis: Axis,
    index: usize,
) -> Result<(Vec<f64>, usize, usize), Error> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    match axis {
        Axis::Z => {
            if index >= d {
                return Err(Error::Shape(format!("z index {index} out of range {d}")));
            }
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    out.push(at(index, y, x));
                }
            }
            Ok((out, w, h))
        }
        Axis::Y => {
            if index >= h {
                return Err(Error::Shape(format!("y index {index} out of range {h}")));
            }
            let mut out = Vec::with_capacity(d * w);
            for z in 0..d {
                for x in 0..w {
                    out.push(at(z, index, x));
                }
            }
            Ok((out, w, d))
        }
        Axis::X => {
            if index >= w {
                return Err(Error::Shape(format!("x index {index} out of range {w}")));
            }
            let mut out = Vec::with_capacity(d * h);
            for z in 0..d {
                for y in 0..h {
                    out.push(at(z, y, index));
                }
            }
            Ok((out, h, d))
        }
    }
}

/// 8-bit binary PGM with the slice min/max mapped to 0/255; a constant
/// slice renders as all zeros.
fn write_pgm(path: &PathBuf, pixels: &[f64], width: usize, height: usize) -> Result<(), Error> {
    let min = pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| {
            if range <= 0.0 {
                0u8
            } else {
                (((v - min) / range) * 255.0).round() as u8
            }
        })
        .collect();
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    std::fs::write(path, out)?;
    Ok(())
}
