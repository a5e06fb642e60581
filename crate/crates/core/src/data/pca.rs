//! Principal component projection fitted on present frames.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::emission::Frame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaTarget {
    /// Keep exactly this many components.
    Dim(usize),
    /// Keep the fewest leading components explaining at least this fraction
    /// of the total variance.
    Variance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// One row per retained component, each of length `input_dim`.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of every component, retained or not, in decreasing order.
    pub eigenvalues: Vec<f64>,
}

impl PcaTransform {
    pub fn fit(frames: &[&[f64]], target: PcaTarget) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::DegenerateData("PCA needs at least one frame".into()));
        };
        let d = first.len();
        if frames.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("PCA frames differ in dimension".into()));
        }
        if let PcaTarget::Dim(k) = target {
            if k == 0 || k > d {
                return Err(Error::InvalidArgument(format!(
                    "PCA target dimension {k} must be in 1..={d}"
                )));
            }
            if frames.len() <= k {
                return Err(Error::DegenerateData(format!(
                    "PCA to {k} dimensions needs more than {k} frames, got {}",
                    frames.len()
                )));
            }
        }
        if let PcaTarget::Variance(f) = target {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "PCA variance fraction {f} must be in (0, 1]"
                )));
            }
        }

        let n = frames.len() as f64;
        let mut mean = DVector::<f64>::zeros(d);
        for f in frames {
            mean += DVector::from_column_slice(f);
        }
        mean /= n;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for f in frames {
            let x = DVector::from_column_slice(f) - &mean;
            cov.ger(1.0, &x, &x, 1.0);
        }
        cov /= n;

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();

        let keep = match target {
            PcaTarget::Dim(k) => k,
            PcaTarget::Variance(f) => {
                let total: f64 = eigenvalues.iter().sum();
                let mut acc = 0.0;
                let mut k = d;
                for (i, v) in eigenvalues.iter().enumerate() {
                    acc += v;
                    if acc >= f * total {
                        k = i + 1;
                        break;
                    }
                }
                k
            }
        };

        let components = order[..keep]
            .iter()
            .map(|&i| {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                let mut pivot = 0;
                for (j, x) in v.iter().enumerate() {
                    if x.abs() > v[pivot].abs() {
                        pivot = j;
                    }
                }
                if v[pivot] < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(PcaTransform { mean: mean.iter().copied().collect(), components, eigenvalues })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "frame has {} values, PCA expects {}",
                y.len(),
                self.input_dim()
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(y).zip(&self.mean).map(|((c, y), m)| c * (y - m)).sum())
            .collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.mean.clone();
        for (c, &w) in self.components.iter().zip(z) {
            for (yi, ci) in y.iter_mut().zip(c) {
                *yi += w * ci;
            }
        }
        y
    }

    /// Projects present frames; missing frames stay missing in place.
    pub fn apply_frames(&self, frames: &[Frame]) -> Result<Vec<Frame>> {
        frames
            .iter()
            .map(|f| match f.values() {
                Some(v) => self.apply(v).map(Frame::present),
                None => Ok(Frame::missing()),
            })
            .collect()
    }
}
