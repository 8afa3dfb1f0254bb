use serde::{Deserialize, Serialize};

/// Statistics recorded at the end of one fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch training objective over the epoch.
    pub objective: f64,
    /// Mean squared norm of the layer likelihood gradients (bilevel only).
    pub penalty_norm_sq: Option<f64>,
    pub train_error: f64,
    pub valid_error: Option<f64>,
    pub test_error: Option<f64>,
    /// `max |θ_DBN - θ_ref|` after the epoch (boxed strategies only).
    pub box_distance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    /// Per layer, per pretraining epoch: mean reconstruction cross-entropy.
    pub pretrain: Vec<Vec<f64>>,
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn final_test_error(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_error)
    }
}
