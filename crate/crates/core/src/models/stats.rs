use ndarray::{Array1, Array4};

use crate::error::{ensure, Result};
use crate::nn::{norm::BN_EPS, BatchNorm2d, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsKind {
    /// Running statistics accumulated during source training.
    Stored,
    /// Statistics of the batch currently flowing through the network.
    Current,
}

/// Channel-wise mean and standard deviation at one batch-norm input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats<T = f32> {
    pub mean: Array1<T>,
    pub std: Array1<T>,
    pub kind: StatsKind,
}

impl<T: Scalar> LayerStats<T> {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    /// Stored statistics of a batch-norm layer: running mean and `sqrt(running_var + eps)`.
    pub fn stored(bn: &BatchNorm2d<T>) -> Self {
        Self {
            mean: bn.running_mean.clone(),
            std: bn.running_std(),
            kind: StatsKind::Stored,
        }
    }

    /// Per-channel mean and `sqrt(population variance + 1e-5)` over batch and
    /// spatial positions of an activation tensor.
    pub fn of_batch(activations: &Array4<T>) -> Result<Self> {
        let (b, c, h, w) = activations.dim();
        ensure!(b >= 2, "batch statistics need at least 2 samples, got {b}");
        let hw = h * w;
        let n = T::from_usize(b * hw).expect("count");
        let a = activations.as_standard_layout();
        let data = a.as_slice().expect("standard layout");
        let mut mean = Array1::zeros(c);
        let mut std = Array1::zeros(c);
        for ch in 0..c {
            let planes = || (0..b).map(move |bi| &data[(bi * c + ch) * hw..][..hw]);
            let mu = planes().map(|p| p.iter().cloned().sum::<T>()).sum::<T>() / n;
            let var = planes()
                .map(|p| p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                .sum::<T>()
                / n;
            mean[ch] = mu;
            std[ch] = (var + T::lit(BN_EPS)).sqrt();
        }
        Ok(Self {
            mean,
            std,
            kind: StatsKind::Current,
        })
    }
}
