//! Router training: class-balanced focal loss with teacher forcing along
//! labelled paths, optimised by AdamW under a warmup-cosine schedule.

mod optim;
mod train;

pub use optim::{lr_schedule, AdamW, AdamWConfig};
pub use train::{
    pooled_inputs, train_routers, write_epoch_log, EpochMetrics, LossConfig, LossMode, TrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::SupervisionExample;

pub use crate::numerics::Graph;

/// Label totals over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub skip: u64,
    pub execute: u64,
    pub repeat: u64,
}

impl ClassCounts {
    pub fn as_array(&self) -> [u64; 3] {
        [self.skip, self.execute, self.repeat]
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut c = ClassCounts::default();
        for seq in labels {
            for &l in seq {
                match l {
                    0 => c.skip += 1,
                    1 => c.execute += 1,
                    _ => c.repeat += 1,
                }
            }
        }
        c
    }
}

pub fn class_counts(dataset: &[SupervisionExample]) -> ClassCounts {
    ClassCounts::from_labels(dataset.iter().map(|e| e.labels.as_slice()))
}

/// `alpha_c = w_c / mean(w)` with `w_c = (1 - beta) / (1 - beta^n_c)`.
/// Classes with no samples get weight 0 and are left out of the mean.
pub fn effective_number_weights(counts: &ClassCounts, beta: f64) -> Result<[f64; 3]> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::input(format!("beta {beta} outside (0, 1)")));
    }
    let n = counts.as_array();
    if n.iter().all(|&c| c == 0) {
        return Err(Error::input("all class counts are zero"));
    }
    let w: Vec<f64> = n
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (1.0 - beta) / (1.0 - beta.powf(c as f64)) })
        .collect();
    let present = n.iter().filter(|&&c| c > 0).count() as f64;
    let mean = w.iter().sum::<f64>() / present;
    Ok([w[0] / mean, w[1] / mean, w[2] / mean])
}

/// Probability floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-(1/n) sum alpha_y (1 - p_y)^gamma log p_y` over rows of probabilities.
pub fn focal_loss(probs: &[[f64; 3]], labels: &[u8], alpha: [f64; 3], gamma: f64) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dim("focal_loss", format!("{} rows, {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let y = y as usize;
        if y > 2 {
            return Err(Error::input(format!("label {y} outside {{0,1,2}}")));
        }
        let py = p[y];
        total += -alpha[y] * (1.0 - py).max(0.0).powf(gamma) * py.max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        let eq = effective_number_weights(&ClassCounts { skip: 5, execute: 5, repeat: 5 }, 0.999).unwrap();
        assert_eq!(eq, [1.0, 1.0, 1.0]);
        let a = effective_number_weights(&ClassCounts { skip: 10, execute: 80, repeat: 10 }, 0.999).unwrap();
        for (x, y) in a.iter().zip([1.409, 0.182, 1.409]) {
            assert!((x - y).abs() < 1e-3, "{a:?}");
        }
        let p = effective_number_weights(&ClassCounts { skip: 4399, execute: 120_956, repeat: 1457 }, 0.999).unwrap();
        for (x, y) in p.iter().zip([0.916, 0.905, 1.179]) {
            assert!((x - y).abs() < 1e-3, "{p:?}");
        }
        assert!((p.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_count_class_is_excluded() {
        let a = effective_number_weights(&ClassCounts { skip: 0, execute: 8, repeat: 2 }, 0.999).unwrap();
        assert_eq!(a[0], 0.0);
        assert!(((a[1] + a[2]) / 2.0 - 1.0).abs() < 1e-12);
        assert!(effective_number_weights(&ClassCounts::default(), 0.999).is_err());
        assert!(effective_number_weights(&ClassCounts { skip: 1, execute: 1, repeat: 1 }, 1.0).is_err());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_loss(&[[0.0, 1.0, 0.0]], &[1], [1.0; 3], 2.0).unwrap(), 0.0);
        let ce = focal_loss(&[[0.25, 0.5, 0.25]], &[1], [1.0; 3], 0.0).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let f = focal_loss(&[[0.2, 0.7, 0.1]], &[1], [1.0; 3], 2.0).unwrap();
        assert!((f - 0.09 * -(0.7f64).ln()).abs() < 1e-15);
        assert!((f - 0.0321).abs() < 1e-4);
        // Clamped rather than infinite.
        let z = focal_loss(&[[1.0, 0.0, 0.0]], &[1], [1.0; 3], 2.0).unwrap();
        assert!((z + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn counts_of_default_labels() {
        let c = ClassCounts::from_labels([[1u8; 8].as_slice()]);
        assert_eq!(c, ClassCounts { skip: 0, execute: 8, repeat: 0 });
    }
}
