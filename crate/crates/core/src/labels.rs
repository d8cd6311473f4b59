//! Per-voxel integer class labels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense `[D, H, W]` volume of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<LabelVolume> {
        let n = dims[0] * dims[1] * dims[2];
        if n != data.len() {
            return Err(Error::Shape(format!(
                "label dims {:?} hold {} voxels, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> LabelVolume {
        LabelVolume {
            dims,
            data: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Ensure every voxel holds a class below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Domain(format!(
                "label value {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    /// One-hot `[N, D, H, W]` tensor (a constant; labels carry no gradient).
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor> {
        self.validate_classes(num_classes)?;
        let voxels = self.data.len();
        let mut out = vec![0.0f64; num_classes * voxels];
        for (i, &c) in self.data.iter().enumerate() {
            out[c as usize * voxels + i] = 1.0;
        }
        Tensor::from_vec(
            out,
            &[num_classes, self.dims[0], self.dims[1], self.dims[2]],
        )
    }

    /// Voxel count per class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for &c in &self.data {
            if (c as usize) < num_classes {
                counts[c as usize] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_layout() {
        let labels = LabelVolume::new([1, 1, 3], vec![0, 2, 1]).unwrap();
        let oh = labels.one_hot(3).unwrap();
        assert_eq!(oh.shape(), &[3, 1, 1, 3]);
        assert_eq!(
            oh.data(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let labels = LabelVolume::new([1, 1, 2], vec![0, 5]).unwrap();
        assert!(labels.one_hot(3).is_err());
        assert!(labels.validate_classes(6).is_ok());
    }
}
