//! Seeded synthetic 3D phantoms: ellipsoids with per-sample intensity
//! variation, boundary blur and voxel noise, plus dataset splitting and
//! on-disk persistence.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;
use crate::volfile::{self, Dtype};

/// Shape population for one foreground class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_mean: f64,
    pub intensity_std: f64,
}

/// Generator parameters for one phantom volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub num_classes: usize,
    /// One entry per foreground class (classes `1..num_classes`).
    pub classes: Vec<ShapeSpec>,
    pub background_mean: f64,
    pub background_std: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            num_classes: 2,
            classes: vec![ShapeSpec {
                count: 2,
                radius_min: 4.0,
                radius_max: 8.0,
                intensity_mean: 1.0,
                intensity_std: 0.25,
            }],
            background_mean: 0.0,
            background_std: 0.15,
            noise_std: 0.25,
            blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Spec("zero volume extent".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least 2 classes".into()));
        }
        if self.classes.len() != self.num_classes - 1 {
            return Err(Error::Spec(format!(
                "{} foreground classes require {} shape specs, got {}",
                self.num_classes - 1,
                self.num_classes - 1,
                self.classes.len()
            )));
        }
        let min_extent = *self.dims.iter().min().unwrap() as f64;
        for (i, class) in self.classes.iter().enumerate() {
            if class.radius_min <= 0.0 || class.radius_max < class.radius_min {
                return Err(Error::Spec(format!("bad radius range for class {}", i + 1)));
            }
            if 2.0 * class.radius_max >= min_extent {
                return Err(Error::Spec(format!(
                    "radius {} does not fit inside extent {min_extent}",
                    class.radius_max
                )));
            }
            if class.intensity_std < 0.0 {
                return Err(Error::Spec("negative intensity std".into()));
            }
        }
        if self.noise_std < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::Spec("negative noise/blur parameter".into()));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
    class: u8,
    intensity: f64,
}

use crate::rng::standard_normal as normal;

/// Separable Gaussian blur with a truncated, per-position renormalized
/// kernel, so constants stay constant up to the border.
fn gaussian_blur(data: &mut Vec<f64>, dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for axis in 0..3 {
        let mut out = vec![0.0f64; data.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (len, pos) = match axis {
                        0 => (d as i64, z as i64),
                        1 => (h as i64, y as i64),
                        _ => (w as i64, x as i64),
                    };
                    let mut acc = 0.0;
                    let mut weight = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let o = pos + ki as i64 - radius;
                        if o < 0 || o >= len {
                            continue;
                        }
                        let v = match axis {
                            0 => data[idx(o as usize, y, x)],
                            1 => data[idx(z, o as usize, x)],
                            _ => data[idx(z, y, o as usize)],
                        };
                        acc += kv * v;
                        weight += kv;
                    }
                    out[idx(z, y, x)] = acc / weight;
                }
            }
        }
        *data = out;
    }
}

/// Generate one phantom: rejection-sampled non-overlapping ellipsoids per
/// foreground class, rasterized labels, blurred intensities plus voxel
/// noise, and per-volume standardization to zero mean / unit variance.
pub fn generate(spec: &PhantomSpec) -> Result<(Tensor, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;

    let mut shapes: Vec<Ellipsoid> = Vec::new();
    for (class_offset, class) in spec.classes.iter().enumerate() {
        let class_id = (class_offset + 1) as u8;
        for _ in 0..class.count {
            let mut placed = false;
            for _attempt in 0..1000 {
                let semi_axes = [
                    rng.gen_range(class.radius_min..=class.radius_max),
                    rng.gen_range(class.radius_min..=class.radius_max),
                    rng.gen_range(class.radius_min..=class.radius_max),
                ];
                let center = [
                    rng.gen_range(semi_axes[0]..=(d as f64 - 1.0 - semi_axes[0])),
                    rng.gen_range(semi_axes[1]..=(h as f64 - 1.0 - semi_axes[1])),
                    rng.gen_range(semi_axes[2]..=(w as f64 - 1.0 - semi_axes[2])),
                ];
                let max_r = semi_axes.iter().cloned().fold(0.0f64, f64::max);
                let overlaps = shapes.iter().any(|s| {
                    let s_max = s.semi_axes.iter().cloned().fold(0.0f64, f64::max);
                    let dist2: f64 = (0..3).map(|i| (center[i] - s.center[i]).powi(2)).sum();
                    dist2.sqrt() < max_r + s_max
                });
                if !overlaps {
                    let intensity =
                        class.intensity_mean + class.intensity_std * normal(&mut rng);
                    shapes.push(Ellipsoid {
                        center,
                        semi_axes,
                        class: class_id,
                        intensity,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                // volume too crowded; proceed with fewer shapes
                break;
            }
        }
    }

    let background = spec.background_mean + spec.background_std * normal(&mut rng);
    let voxels = d * h * w;
    let mut labels = vec![0u8; voxels];
    let mut intensity = vec![background; voxels];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                for s in &shapes {
                    let q: f64 = [(z, 0), (y, 1), (x, 2)]
                        .iter()
                        .map(|&(c, i)| ((c as f64 - s.center[i]) / s.semi_axes[i]).powi(2))
                        .sum();
                    if q <= 1.0 {
                        labels[idx] = s.class;
                        intensity[idx] = s.intensity;
                        break;
                    }
                }
            }
        }
    }

    gaussian_blur(&mut intensity, spec.dims, spec.blur_sigma);
    if spec.noise_std > 0.0 {
        for v in intensity.iter_mut() {
            *v += spec.noise_std * normal(&mut rng);
        }
    }

    // standardize per volume
    let mean = intensity.iter().sum::<f64>() / voxels as f64;
    let var = intensity.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / voxels as f64;
    let std = var.sqrt();
    if std > 1e-12 {
        for v in intensity.iter_mut() {
            *v = (*v - mean) / std;
        }
    } else {
        for v in intensity.iter_mut() {
            *v = 0.0;
        }
    }

    let image = Tensor::from_vec(intensity, &[1, d, h, w])?;
    let label = LabelVolume::new(spec.dims, labels)?;
    Ok((image, label))
}

/// One image/label pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: LabelVolume,
}

/// Labeled/unlabeled/test splits. Unlabeled samples keep their labels for
/// evaluation only; the trainer never reads them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        let max = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.test)
            .map(|s| s.label.max_class())
            .max()
            .unwrap_or(0);
        max as usize + 1
    }
}

/// Generate `count` training phantoms plus a held-out test set
/// (`ceil(count / 5)` volumes), splitting the training pool with a seeded
/// shuffle: `floor(ratio * count)` labeled, remainder unlabeled.
pub fn make_dataset(
    spec: &PhantomSpec,
    count: usize,
    labeled_ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    if count < 10 {
        return Err(Error::Spec(format!("dataset needs at least 10 samples, got {count}")));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::Spec(format!(
            "labeled ratio {labeled_ratio} outside (0, 1]"
        )));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let test_count = count.div_ceil(5);
    let mut all: Vec<Sample> = Vec::with_capacity(count + test_count);
    for _ in 0..count + test_count {
        let mut sample_spec = spec.clone();
        sample_spec.seed = seeder.gen();
        let (image, label) = generate(&sample_spec)?;
        all.push(Sample { image, label });
    }
    let test = all.split_off(count);

    let mut order: Vec<usize> = (0..count).collect();
    // Fisher-Yates with the same seeded stream
    for i in (1..count).rev() {
        let j = seeder.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_labeled = ((labeled_ratio * count as f64).floor() as usize).max(1);
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(count - n_labeled);
    let mut samples: Vec<Option<Sample>> = all.into_iter().map(Some).collect();
    for (rank, &idx) in order.iter().enumerate() {
        let sample = samples[idx].take().expect("each index visited once");
        if rank < n_labeled {
            labeled.push(sample);
        } else {
            unlabeled.push(sample);
        }
    }
    Ok(Dataset {
        labeled,
        unlabeled,
        test,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: String,
    pub image: String,
    pub label: String,
}

/// On-disk dataset layout: one manifest plus `.eplv` volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub samples: Vec<ManifestEntry>,
}

pub fn save_dataset(
    dir: &Path,
    dataset: &Dataset,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::new();
    let mut id = 0usize;
    for (split, set) in [
        ("labeled", &dataset.labeled),
        ("unlabeled", &dataset.unlabeled),
        ("test", &dataset.test),
    ] {
        for sample in set.iter() {
            let image = format!("img_{id:05}.eplv");
            let label = format!("lab_{id:05}.eplv");
            volfile::write_tensor(&dir.join(&image), &sample.image, Dtype::F32)?;
            volfile::write_labels(&dir.join(&label), &sample.label)?;
            samples.push(ManifestEntry {
                id,
                split: split.to_string(),
                image,
                label,
            });
            id += 1;
        }
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    let mut dataset = Dataset {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.samples {
        let image = volfile::read(&dir.join(&entry.image))?.into_tensor()?;
        let label = volfile::read(&dir.join(&entry.label))?.into_labels()?;
        let sample = Sample { image, label };
        match entry.split.as_str() {
            "labeled" => dataset.labeled.push(sample),
            "unlabeled" => dataset.unlabeled.push(sample),
            "test" => dataset.test.push(sample),
            other => return Err(Error::Format(format!("unknown split {other}"))),
        }
    }
    Ok((dataset, manifest))
}
