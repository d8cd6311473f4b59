//! Evidential mass fusion, dual uncertainty and prototype learning over 3D
//! voxel grids, with a mean-teacher trainer on synthetic phantoms.

pub mod error;
pub mod evidence;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod prototype;
mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;
pub mod volfile;

pub use error::{Error, Result};
pub use evidence::{DirichletField, MassField};
pub use labels::LabelVolume;
pub use losses::LossReport;
pub use metrics::MetricReport;
pub use model::{ModelOutput, NetConfig, Params};
pub use prototype::PrototypeSet;
pub use synth::{Dataset, PhantomSpec, Sample};
pub use tensor::{Gradients, Precision, Tensor};
pub use trainer::{TrainConfig, TrainState};
pub use uncertainty::{ReliabilityMap, UncertaintyField};
