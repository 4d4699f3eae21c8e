use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// Batch of images `[n, c, h, w]` tagged with the range its values live in.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Tensor, range: ValueRange) -> Result<Self> {
        let (_, _, h, w) = data.dims4()?;
        if h == 0 || w == 0 {
            return Err(shape_err!("image has empty spatial extent {h}x{w}"));
        }
        if !data.all_finite() {
            return Err(Error::Numerical("image contains non-finite values".into()));
        }
        let (lo, hi) = range.bounds();
        const SLACK: f64 = 1e-9;
        if let Some(v) = data.data().iter().find(|&&v| v < lo - SLACK || v > hi + SLACK) {
            return Err(Error::Data(format!(
                "value {v} outside the declared {range:?} range"
            )));
        }
        Ok(ImageTensor { data, range })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn batch(&self) -> usize {
        self.data.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }

    /// Same content expressed in the other range.
    pub fn to_range(&self, target: ValueRange) -> Result<ImageTensor> {
        let data = match (self.range, target) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Signed, ValueRange::Unit) => self.data.affine(0.5, 0.5)?,
            (ValueRange::Unit, ValueRange::Signed) => self.data.affine(2.0, -1.0)?,
            _ => unreachable!(),
        };
        ImageTensor::new(data, target)
    }
}

/// Maps signed-range data to the unit range, clamping numerical overshoot.
pub fn signed_to_unit(t: &Tensor) -> Result<Tensor> {
    t.affine(0.5, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_enforced() {
        let t = Tensor::new(vec![0.0, 0.5, 1.0, -0.5], &[1, 1, 2, 2]).unwrap();
        assert!(ImageTensor::new(t.clone(), ValueRange::Unit).is_err());
        let img = ImageTensor::new(t, ValueRange::Signed).unwrap();
        let unit = img.to_range(ValueRange::Unit).unwrap();
        assert_eq!(unit.tensor().to_vec(), vec![0.5, 0.75, 1.0, 0.25]);
    }

    #[test]
    fn rejects_nan_and_empty() {
        let t = Tensor::new(vec![f64::NAN], &[1, 1, 1, 1]).unwrap();
        assert!(ImageTensor::new(t, ValueRange::Signed).is_err());
        assert!(ImageTensor::new(Tensor::zeros(&[1, 1, 0, 3]), ValueRange::Unit).is_err());
    }
}
