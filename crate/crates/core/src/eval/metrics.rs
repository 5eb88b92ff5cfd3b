use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class F1 for skip, execute and repeat plus their macro average.
///
/// A class that occurs in neither predictions nor gold reports 0 and is left
/// out of the macro average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub skip: f64,
    pub execute: f64,
    pub repeat: f64,
    pub macro_f1: f64,
}

impl ClassF1 {
    pub fn as_array(&self) -> [f64; 3] {
        [self.skip, self.execute, self.repeat]
    }
}

/// `confusion[gold][pred]` over labels in {0, 1, 2}.
pub fn confusion(pred: &[u8], gold: &[u8]) -> Result<[[u64; 3]; 3]> {
    if pred.len() != gold.len() {
        return Err(Error::dim("per_class_f1", format!("{} predictions, {} labels", pred.len(), gold.len())));
    }
    let mut m = [[0u64; 3]; 3];
    for (&p, &g) in pred.iter().zip(gold) {
        if p > 2 || g > 2 {
            return Err(Error::input(format!("label outside {{0,1,2}}: {p} / {g}")));
        }
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

pub fn per_class_f1(pred: &[u8], gold: &[u8]) -> Result<ClassF1> {
    let m = confusion(pred, gold)?;
    let mut f1 = [0.0; 3];
    let mut present = 0usize;
    let mut total = 0.0;
    for c in 0..3 {
        let tp = m[c][c] as f64;
        let predicted: u64 = (0..3).map(|g| m[g][c]).sum();
        let actual: u64 = m[c].iter().sum();
        if predicted == 0 && actual == 0 {
            continue;
        }
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        f1[c] = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        present += 1;
        total += f1[c];
    }
    Ok(ClassF1 {
        skip: f1[0],
        execute: f1[1],
        repeat: f1[2],
        macro_f1: if present == 0 { 0.0 } else { total / present as f64 },
    })
}
