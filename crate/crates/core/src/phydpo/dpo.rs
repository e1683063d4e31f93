//! Weighted DPO on a toy categorical policy.
//!
//! Each prompt owns a row of logits over its candidate items; `softmax(row)`
//! is the policy. A frozen copy of the initial logits serves as the reference
//! policy, so the DPO objective and its gradient are exact.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curation::PreferencePair;
use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    /// Temperature applied to the implicit reward margin.
    pub gamma: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Standard deviation of the seeded initial logits.
    pub init_scale: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            learning_rate: 0.5,
            steps: 500,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("invalid init scale {}", self.init_scale)));
        }
        Ok(())
    }
}

/// Per-prompt categorical policy with a frozen reference copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    prompts: Vec<String>,
    items: Vec<Vec<String>>,
    width: usize,
    logits: Vec<f64>,
    reference: Vec<f64>,
    row_of: HashMap<String, usize>,
}

/// Row and item columns of one preference pair inside a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub row: usize,
    pub win: usize,
    pub lose: usize,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl ToyPolicy {
    /// Builds a policy whose reference equals the given logits.
    pub fn new(prompts: Vec<String>, items: Vec<Vec<String>>, logits: Vec<f64>) -> Result<Self> {
        if prompts.is_empty() || prompts.len() != items.len() {
            return Err(Error::Dimension(format!(
                "{} prompts but {} item lists",
                prompts.len(),
                items.len()
            )));
        }
        let width = items[0].len();
        if width < 2 {
            return Err(Error::Dimension("a policy row needs at least 2 items".into()));
        }
        if let Some((p, row)) = prompts.iter().zip(&items).find(|(_, r)| r.len() != width) {
            return Err(Error::Dimension(format!(
                "prompt `{p}` has {} items, expected {width}",
                row.len()
            )));
        }
        if logits.len() != prompts.len() * width {
            return Err(Error::Dimension(format!(
                "expected {} logits, got {}",
                prompts.len() * width,
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Parameter("policy logits must be finite".into()));
        }
        let mut row_of = HashMap::new();
        for (i, p) in prompts.iter().enumerate() {
            if row_of.insert(p.clone(), i).is_some() {
                return Err(Error::Duplicate(p.clone()));
            }
        }
        Ok(Self {
            prompts,
            items,
            width,
            reference: logits.clone(),
            logits,
            row_of,
        })
    }

    pub fn uniform(prompts: Vec<String>, items: Vec<Vec<String>>) -> Result<Self> {
        let n = prompts.len() * items.first().map_or(0, Vec::len);
        Self::new(prompts, items, vec![0.0; n])
    }

    /// Initial logits drawn from `N(0, scale^2)` with a seeded generator.
    pub fn seeded(prompts: Vec<String>, items: Vec<Vec<String>>, seed: u64, scale: f64) -> Result<Self> {
        let n = prompts.len() * items.first().map_or(0, Vec::len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = if scale > 0.0 {
            let normal = Normal::new(0.0, scale).map_err(|e| Error::Parameter(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; n]
        };
        Self::new(prompts, items, logits)
    }

    /// Restores a trained policy with its original reference.
    pub fn with_reference(
        prompts: Vec<String>,
        items: Vec<Vec<String>>,
        logits: Vec<f64>,
        reference: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::new(prompts, items, reference)?;
        if logits.len() != p.logits.len() || logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Dimension("trained logits do not match the reference shape".into()));
        }
        p.logits = logits;
        Ok(p)
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn items(&self, row: usize) -> &[String] {
        &self.items[row]
    }

    pub fn rows(&self) -> usize {
        self.prompts.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn reference_logits(&self) -> &[f64] {
        &self.reference
    }

    pub fn row_logits(&self, row: usize) -> &[f64] {
        &self.logits[row * self.width..(row + 1) * self.width]
    }

    pub fn reference_row(&self, row: usize) -> &[f64] {
        &self.reference[row * self.width..(row + 1) * self.width]
    }

    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(Error::Dimension(format!(
                "expected {} logits, got {}",
                self.logits.len(),
                logits.len()
            )));
        }
        self.logits = logits;
        Ok(())
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn probabilities(&self, row: usize) -> Vec<f64> {
        log_softmax(self.row_logits(row)).into_iter().map(f64::exp).collect()
    }

    pub fn reference_probabilities(&self, row: usize) -> Vec<f64> {
        log_softmax(self.reference_row(row)).into_iter().map(f64::exp).collect()
    }

    pub fn row_of(&self, prompt_id: &str) -> Option<usize> {
        self.row_of.get(prompt_id).copied()
    }

    pub fn locate(&self, pair: &PreferencePair) -> Result<PairIndex> {
        let row = self
            .row_of(&pair.prompt_id)
            .ok_or_else(|| Error::Index(format!("prompt `{}` is not in the policy", pair.prompt_id)))?;
        let col = |id: &str| {
            self.items[row].iter().position(|x| x == id).ok_or_else(|| {
                Error::Index(format!("item `{id}` is not a candidate of prompt `{}`", pair.prompt_id))
            })
        };
        let (win, lose) = (col(&pair.win_video_id)?, col(&pair.lose_video_id)?);
        if win == lose {
            return Err(Error::Index(format!(
                "pair for `{}` uses the same item twice",
                pair.prompt_id
            )));
        }
        Ok(PairIndex { row, win, lose })
    }

    /// Implicit reward margin `gamma * (log-ratio(win) - log-ratio(lose))`.
    pub fn margin(&self, idx: PairIndex, gamma: f64) -> f64 {
        dpo_row(self.row_logits(idx.row), self.reference_row(idx.row), idx.win, idx.lose, gamma).margin
    }

    /// Mean over prompts of the expected per-item value under the policy (or
    /// its reference). `values` is laid out like the logits.
    pub fn expected_value(&self, values: &[f64], reference: bool) -> f64 {
        assert_eq!(values.len(), self.logits.len(), "value table shape");
        let total: f64 = (0..self.rows())
            .map(|r| {
                let p = if reference {
                    self.reference_probabilities(r)
                } else {
                    self.probabilities(r)
                };
                p.iter()
                    .zip(&values[r * self.width..(r + 1) * self.width])
                    .map(|(p, v)| p * v)
                    .sum::<f64>()
            })
            .sum();
        total / self.rows() as f64
    }
}

/// Loss and gradient of one pair with respect to its prompt's logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLoss {
    pub loss: f64,
    pub margin: f64,
    pub grad: Vec<f64>,
}

/// Standard DPO loss `-ln sigmoid(margin)` on a single logit row.
pub fn dpo_row(logits: &[f64], reference: &[f64], win: usize, lose: usize, gamma: f64) -> RowLoss {
    let lp = log_softmax(logits);
    let lr = log_softmax(reference);
    let margin = gamma * ((lp[win] - lr[win]) - (lp[lose] - lr[lose]));
    let loss = softplus(-margin);
    // d loss / d margin = -sigmoid(-margin); d margin / d z = gamma (e_win - e_lose),
    // the softmax normaliser cancels between the two log-probabilities.
    let coef = -gamma * crate::score::sigmoid(-margin);
    let mut grad = vec![0.0; logits.len()];
    grad[win] += coef;
    grad[lose] -= coef;
    RowLoss { loss, margin, grad }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub index: PairIndex,
    pub row: RowLoss,
}

pub fn dpo_loss(policy: &ToyPolicy, pair: &PreferencePair, cfg: &DpoConfig) -> Result<PairLoss> {
    cfg.validate()?;
    let index = policy.locate(pair)?;
    let row = dpo_row(
        policy.row_logits(index.row),
        policy.reference_row(index.row),
        index.win,
        index.lose,
        cfg.gamma,
    );
    Ok(PairLoss { index, row })
}

fn weighted_objective(
    policy: &ToyPolicy,
    resolved: &[(PairIndex, f64)],
    gamma: f64,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let mut grad = if want_grad { vec![0.0; policy.logits.len()] } else { Vec::new() };
    let n = resolved.len() as f64;
    let mut sum = 0.0;
    for &(idx, w) in resolved {
        let r = dpo_row(
            policy.row_logits(idx.row),
            policy.reference_row(idx.row),
            idx.win,
            idx.lose,
            gamma,
        );
        sum += w * r.loss;
        if want_grad {
            let base = idx.row * policy.width;
            for (g, d) in grad[base..base + policy.width].iter_mut().zip(&r.grad) {
                *g += w * d / n;
            }
        }
    }
    (sum / n, grad)
}

fn resolve(policy: &ToyPolicy, pairs: &[PreferencePair]) -> Result<Vec<(PairIndex, f64)>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no preference pairs".into()));
    }
    pairs
        .iter()
        .map(|p| {
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return Err(Error::Range(format!(
                    "pair for `{}` has invalid weight {}",
                    p.prompt_id, p.weight
                )));
            }
            Ok((policy.locate(p)?, p.weight))
        })
        .collect()
}

/// Mean of `weight * dpo_loss` over the pairs.
pub fn phydpo_loss(policy: &ToyPolicy, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<f64> {
    cfg.validate()?;
    let resolved = resolve(policy, pairs)?;
    Ok(weighted_objective(policy, &resolved, cfg.gamma, false).0)
}

/// [`phydpo_loss`] together with its gradient over all logits.
pub fn phydpo_loss_and_grad(
    policy: &ToyPolicy,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let resolved = resolve(policy, pairs)?;
    Ok(weighted_objective(policy, &resolved, cfg.gamma, true))
}

/// Unweighted mean DPO loss, summed in pair order.
pub fn mean_dpo_loss(policy: &ToyPolicy, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no preference pairs".into()));
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += dpo_loss(policy, p, cfg)?.row.loss;
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Loss before each update, then the loss of the returned policy.
    pub trace: Vec<f64>,
}

/// Full-batch gradient descent on the weighted DPO objective.
pub fn train_toy(policy: &ToyPolicy, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let resolved = resolve(policy, pairs)?;
    let mut policy = policy.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let last = step == cfg.steps;
        let (loss, grad) = weighted_objective(&policy, &resolved, cfg.gamma, !last);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        trace.push(loss);
        if !last {
            for (z, g) in policy.logits.iter_mut().zip(&grad) {
                *z -= cfg.learning_rate * g;
            }
        }
    }
    Ok(TrainOutcome { policy, trace })
}
