use std::collections::BTreeMap;

use crate::curation::PreferencePair;
use crate::error::Result;

use super::dpo::ToyPolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct MarginGain {
    pub prompt_id: String,
    pub weight: f64,
    pub initial: f64,
    pub trained: f64,
}

impl MarginGain {
    pub fn gain(&self) -> f64 {
        self.trained - self.initial
    }
}

/// Implicit reward margin of every pair before and after training.
pub fn margin_gains(
    initial: &ToyPolicy,
    trained: &ToyPolicy,
    pairs: &[PreferencePair],
    gamma: f64,
) -> Result<Vec<MarginGain>> {
    pairs
        .iter()
        .map(|p| {
            let a = initial.locate(p)?;
            let b = trained.locate(p)?;
            Ok(MarginGain {
                prompt_id: p.prompt_id.clone(),
                weight: p.weight,
                initial: initial.margin(a, gamma),
                trained: trained.margin(b, gamma),
            })
        })
        .collect()
}

/// Mean margin gain of above-median versus below-median weight pairs, compared
/// only within groups of equal initial margin.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginComparison {
    pub buckets: usize,
    pub high_count: usize,
    pub low_count: usize,
    pub high_mean_gain: f64,
    pub low_mean_gain: f64,
}

impl MarginComparison {
    /// `None` when no bucket holds pairs on both sides of its median weight.
    pub fn from_gains(gains: &[MarginGain]) -> Option<Self> {
        // initial margins are matched to 1e-9
        let mut buckets: BTreeMap<i64, Vec<&MarginGain>> = BTreeMap::new();
        for g in gains {
            buckets.entry((g.initial * 1e9).round() as i64).or_default().push(g);
        }
        let (mut high, mut low) = (Vec::new(), Vec::new());
        let mut used = 0;
        for members in buckets.values() {
            let mut w: Vec<f64> = members.iter().map(|g| g.weight).collect();
            w.sort_by(f64::total_cmp);
            let median = if w.len() % 2 == 1 {
                w[w.len() / 2]
            } else {
                0.5 * (w[w.len() / 2 - 1] + w[w.len() / 2])
            };
            let hi: Vec<f64> = members.iter().filter(|g| g.weight > median).map(|g| g.gain()).collect();
            let lo: Vec<f64> = members.iter().filter(|g| g.weight < median).map(|g| g.gain()).collect();
            if hi.is_empty() || lo.is_empty() {
                continue;
            }
            used += 1;
            high.extend(hi);
            low.extend(lo);
        }
        if used == 0 {
            return None;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some(Self {
            buckets: used,
            high_count: high.len(),
            low_count: low.len(),
            high_mean_gain: mean(&high),
            low_mean_gain: mean(&low),
        })
    }

    pub fn high_weight_gains_more(&self) -> bool {
        self.high_mean_gain > self.low_mean_gain
    }
}
