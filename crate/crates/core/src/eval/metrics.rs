use crate::data::Bundle;
use crate::error::{Error, Result};
use crate::ids::ItemId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Multi-label set metrics of one predicted bundle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn bundle_metrics(predicted: &BTreeSet<ItemId>, target: &Bundle) -> Result<BundleMetrics> {
    if target.is_empty() {
        return Err(Error::Validation("empty target bundle".into()));
    }
    let hit = predicted.iter().filter(|i| target.contains(**i)).count() as f64;
    let union = predicted.len() as f64 + target.len() as f64 - hit;
    let precision = if predicted.is_empty() { 0.0 } else { hit / predicted.len() as f64 };
    let recall = hit / target.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BundleMetrics {
        precision,
        recall,
        f1,
        accuracy: hit / union,
    })
}
