//! Histogram density of PhyScores and the pair reweighting built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::PreferencePair;
use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Offsets closer than this (in bin widths) to a bin edge snap onto the edge,
/// so that decimal scores such as `0.29` land in bin 29 and not bin 28.
const EDGE_SNAP: f64 = 1e-9;

/// Fixed-width histogram over `[0, 1]`. Bin `k` covers `[k*w, (k+1)*w)`; a
/// score of exactly `1.0` belongs to the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    bin_width: f64,
    counts: Vec<u64>,
    total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSummary {
    pub index: usize,
    pub start: f64,
    pub count: u64,
    pub density: f64,
}

fn check_score(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::Range(format!("score {s} is outside [0, 1]")))
    }
}

impl ScoreHistogram {
    pub fn empty(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(Error::Config(format!("bin width {bin_width} must lie in (0, 1]")));
        }
        let bins = (1.0 / bin_width - EDGE_SNAP).ceil().max(1.0) as usize;
        Ok(Self {
            bin_width,
            counts: vec![0; bins],
            total: 0,
        })
    }

    pub fn build(scores: &[f64], bin_width: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("no scores to build a histogram from".into()));
        }
        let mut h = Self::empty(bin_width)?;
        for &s in scores {
            h.add(s)?;
        }
        Ok(h)
    }

    pub fn add(&mut self, score: f64) -> Result<()> {
        check_score(score)?;
        let k = self.bin_index(score);
        self.counts[k] += 1;
        self.total += 1;
        Ok(())
    }

    /// Combines counts from a histogram built over a disjoint shard.
    pub fn merge(&mut self, other: &ScoreHistogram) -> Result<()> {
        if self.bin_width != other.bin_width {
            return Err(Error::Config(format!(
                "cannot merge histograms with bin widths {} and {}",
                self.bin_width, other.bin_width
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_index(&self, score: f64) -> usize {
        let x = score / self.bin_width;
        let r = x.round();
        let k = if (x - r).abs() < EDGE_SNAP { r } else { x.floor() };
        (k.max(0.0) as usize).min(self.counts.len() - 1)
    }

    fn bin_density(&self, count: u64) -> f64 {
        count as f64 / (self.total as f64 * self.bin_width)
    }

    /// Empirical density at `score`; zero for an empty bin.
    pub fn density(&self, score: f64) -> Result<f64> {
        check_score(score)?;
        Ok(self.bin_density(self.counts[self.bin_index(score)]))
    }

    /// Density with empty bins floored at one phantom count, so that joint
    /// probabilities stay strictly positive.
    pub fn floored_density(&self, score: f64) -> Result<f64> {
        check_score(score)?;
        Ok(self.bin_density(self.counts[self.bin_index(score)].max(1)))
    }

    pub fn max_density(&self) -> f64 {
        self.bin_density(self.counts.iter().copied().max().unwrap_or(0))
    }

    /// `sum(density * width)` over all bins; 1 for any non-empty histogram.
    pub fn integral(&self) -> f64 {
        self.counts
            .iter()
            .map(|&c| self.bin_density(c) * self.bin_width)
            .sum()
    }

    pub fn nonempty_bins(&self) -> impl Iterator<Item = BinSummary> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(index, &count)| BinSummary {
                index,
                start: index as f64 * self.bin_width,
                count,
                density: self.bin_density(count),
            })
    }
}

/// `p(s_win) * p(s_lose)` with empty-bin flooring.
pub fn joint_probability(hist: &ScoreHistogram, s_win: f64, s_lose: f64) -> Result<f64> {
    Ok(hist.floored_density(s_win)? * hist.floored_density(s_lose)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum BetaMode {
    /// Peak density of the histogram.
    ComputedMaxDensity,
    Fixed(f64),
}

impl BetaMode {
    pub fn name(&self) -> &'static str {
        match self {
            BetaMode::ComputedMaxDensity => "computed_max_density",
            BetaMode::Fixed(_) => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub alpha: f64,
    pub beta: BetaMode,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: BetaMode::ComputedMaxDensity,
        }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a finite value >= 0, got {}", self.alpha)));
        }
        if let BetaMode::Fixed(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("fixed beta must be positive, got {b}")));
            }
        }
        Ok(())
    }

    pub fn resolve_beta(&self, hist: &ScoreHistogram) -> Result<f64> {
        self.validate()?;
        let beta = match self.beta {
            BetaMode::ComputedMaxDensity => hist.max_density(),
            BetaMode::Fixed(b) => b,
        };
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta resolved to {beta}; histogram is empty")));
        }
        Ok(beta)
    }
}

/// `(beta / P)^alpha`; exactly 1 when `alpha == 0`.
pub fn pair_weight(hist: &ScoreHistogram, s_win: f64, s_lose: f64, cfg: &ReweightConfig) -> Result<f64> {
    let beta = cfg.resolve_beta(hist)?;
    weight_with_beta(hist, s_win, s_lose, cfg.alpha, beta)
}

fn weight_with_beta(hist: &ScoreHistogram, s_win: f64, s_lose: f64, alpha: f64, beta: f64) -> Result<f64> {
    let p = joint_probability(hist, s_win, s_lose)?;
    if alpha == 0.0 {
        return Ok(1.0);
    }
    Ok((beta / p).powf(alpha))
}

/// Fills every pair's weight from the histogram. Weights depend only on the
/// pair scores, so reapplying is a no-op.
pub fn reweight_dataset(
    pairs: &[PreferencePair],
    hist: &ScoreHistogram,
    cfg: &ReweightConfig,
) -> Result<Vec<PreferencePair>> {
    let beta = cfg.resolve_beta(hist)?;
    pairs
        .par_iter()
        .map(|p| {
            let weight = weight_with_beta(hist, p.s_win, p.s_lose, cfg.alpha, beta)?;
            Ok(PreferencePair { weight, ..p.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> ScoreHistogram {
        ScoreHistogram::build(&[0.10, 0.10, 0.50, 0.90], 0.01).unwrap()
    }

    #[test]
    fn fixture_densities() {
        let h = fixture();
        assert_eq!(h.counts().len(), 100);
        assert_eq!(h.density(0.10).unwrap(), 50.0);
        assert_eq!(h.density(0.50).unwrap(), 25.0);
        assert_eq!(h.density(0.90).unwrap(), 25.0);
        assert_eq!(h.density(0.3).unwrap(), 0.0);
        assert!((h.integral() - 1.0).abs() < 1e-12);
        assert_eq!(h.max_density(), 50.0);
    }

    #[test]
    fn single_bin_mass() {
        let h = ScoreHistogram::build(&[0.421, 0.422, 0.425, 0.4299], 0.01).unwrap();
        assert!((h.density(0.42).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn edges() {
        let h = ScoreHistogram::empty(0.01).unwrap();
        assert_eq!(h.bin_index(0.0), 0);
        assert_eq!(h.bin_index(1.0), 99);
        assert_eq!(h.bin_index(0.29), 29);
        assert_eq!(h.bin_index(0.57), 57);
        assert_eq!(h.bin_index(0.999), 99);
        assert!(matches!(ScoreHistogram::build(&[1.2], 0.01), Err(Error::Range(_))));
        assert!(matches!(ScoreHistogram::build(&[f64::NAN], 0.01), Err(Error::Range(_))));
        assert!(matches!(ScoreHistogram::build(&[], 0.01), Err(Error::Empty(_))));
    }

    #[test]
    fn joint_and_weights() {
        let h = fixture();
        assert_eq!(joint_probability(&h, 0.90, 0.10).unwrap(), 1250.0);
        assert_eq!(joint_probability(&h, 0.50, 0.50).unwrap(), 625.0);
        assert_eq!(
            joint_probability(&h, 0.10, 0.90).unwrap(),
            joint_probability(&h, 0.90, 0.10).unwrap()
        );
        let cfg = ReweightConfig::default();
        assert!((pair_weight(&h, 0.90, 0.10, &cfg).unwrap() - 0.04).abs() < 1e-15);
        assert!((pair_weight(&h, 0.90, 0.50, &cfg).unwrap() - 0.08).abs() < 1e-15);
        let flat = ReweightConfig {
            alpha: 0.0,
            ..cfg
        };
        assert_eq!(pair_weight(&h, 0.90, 0.10, &flat).unwrap(), 1.0);
    }

    #[test]
    fn empty_bin_is_floored() {
        let h = fixture();
        // one phantom count: 1 / (4 * 0.01) = 25
        assert_eq!(h.floored_density(0.3).unwrap(), 25.0);
        assert!(pair_weight(&h, 0.3, 0.1, &ReweightConfig::default()).unwrap().is_finite());
    }

    #[test]
    fn fixed_beta() {
        let h = fixture();
        let cfg = ReweightConfig {
            alpha: 1.0,
            beta: BetaMode::Fixed(0.58),
        };
        assert!((pair_weight(&h, 0.90, 0.10, &cfg).unwrap() - 0.58 / 1250.0).abs() < 1e-15);
        let bad = ReweightConfig {
            alpha: 1.0,
            beta: BetaMode::Fixed(0.0),
        };
        assert!(matches!(pair_weight(&h, 0.9, 0.1, &bad), Err(Error::Config(_))));
        let neg_alpha = ReweightConfig {
            alpha: -1.0,
            beta: BetaMode::ComputedMaxDensity,
        };
        assert!(matches!(pair_weight(&h, 0.9, 0.1, &neg_alpha), Err(Error::Config(_))));
    }

    #[test]
    fn merge_matches_single_pass() {
        let all = [0.05, 0.31, 0.31, 0.77, 1.0, 0.0];
        let whole = ScoreHistogram::build(&all, 0.01).unwrap();
        let mut a = ScoreHistogram::build(&all[..2], 0.01).unwrap();
        a.merge(&ScoreHistogram::build(&all[2..], 0.01).unwrap()).unwrap();
        assert_eq!(a, whole);
    }
}
