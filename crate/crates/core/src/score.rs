//! Subject-consistency scoring, score mixing and the Huber fit of the mixing
//! logit against human annotations.
//!
//! A video's PhyScore is a convex combination of two parts:
//!
//! * the subject score: mean cosine similarity of consecutive frame
//!   embeddings, z-normalised against corpus statistics and squashed through a
//!   sigmoid so that it lives in `(0, 1)`;
//! * the mechanics score in `{0, 0.5, 1}` produced by [`crate::mechanics`].
//!
//! The mixing weight is `sigmoid(lambda)` where `lambda` is fitted by plain
//! gradient descent on the mean Huber loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Huber transition point used for reward-model training.
pub const DEFAULT_HUBER_DELTA: f64 = 0.2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-frame embeddings of one video, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    video_id: String,
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSequence {
    /// Validates shape and rejects zero-norm or non-finite frames.
    pub fn new(video_id: impl Into<String>, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let video_id = video_id.into();
        if frames < 2 {
            return Err(Error::Dimension(format!(
                "video `{video_id}` has {frames} frame(s), at least 2 are required"
            )));
        }
        if dim == 0 {
            return Err(Error::Dimension(format!("video `{video_id}` has embedding dimension 0")));
        }
        if data.len() != frames * dim {
            return Err(Error::Dimension(format!(
                "video `{video_id}`: expected {frames}x{dim} = {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        for (t, row) in data.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!("video `{video_id}` frame {t} has a non-finite value")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!("video `{video_id}` frame {t} has zero norm")));
            }
        }
        Ok(Self {
            video_id,
            frames,
            dim,
            data,
        })
    }

    /// Builds a sequence from one vector per frame.
    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let video_id = video_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((t, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::Dimension(format!(
                "video `{video_id}` frame {t} has dimension {}, expected {dim}",
                r.len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(video_id, rows.len(), dim, data)
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between consecutive frames, in `[-1, 1]`.
pub fn subject_consistency(seq: &EmbeddingSequence) -> f64 {
    let frames: Vec<&[f32]> = seq.frames().collect();
    let sum: f64 = frames.windows(2).map(|w| cosine(w[0], w[1])).sum();
    sum / (seq.frame_count() - 1) as f64
}

/// Mean and population standard deviation of raw subject scores over a
/// reference corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub corpus_id: String,
    pub mu: f64,
    pub sigma: f64,
}

/// Name of the standard-deviation convention written next to the stats.
pub const STD_CONVENTION: &str = "population";

impl SubjectStats {
    pub fn new(corpus_id: impl Into<String>, mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Stats(format!("invalid subject statistics mu={mu}, sigma={sigma}")));
        }
        Ok(Self {
            corpus_id: corpus_id.into(),
            mu,
            sigma,
        })
    }
}

pub fn fit_subject_stats(corpus_id: impl Into<String>, corpus: &[f64]) -> Result<SubjectStats> {
    if corpus.len() < 2 {
        return Err(Error::Stats(format!(
            "need at least 2 raw scores to fit statistics, got {}",
            corpus.len()
        )));
    }
    if corpus.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("corpus contains a non-finite score".into()));
    }
    let n = corpus.len() as f64;
    let mu = corpus.iter().sum::<f64>() / n;
    let var = corpus.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    // Rounding residue of a constant corpus is not variance.
    if sigma <= 1e-12 * mu.abs().max(1.0) {
        return Err(Error::Stats("corpus has zero variance; normalization is undefined".into()));
    }
    SubjectStats::new(corpus_id, mu, sigma)
}

/// `sigmoid((raw - mu) / sigma)`.
pub fn normalize_subject(raw: f64, stats: &SubjectStats) -> f64 {
    sigmoid((raw - stats.mu) / stats.sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerParams {
    pub lambda: f64,
}

impl MixerParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::Parameter(format!("mixing logit must be finite, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    /// Effective weight on the subject score.
    pub fn subject_weight(&self) -> f64 {
        sigmoid(self.lambda)
    }
}

impl Default for MixerParams {
    fn default() -> Self {
        Self { lambda: 0.0 }
    }
}

fn convex_mix(weight: f64, subj: f64, mech: f64) -> f64 {
    let (lo, hi) = if subj < mech { (subj, mech) } else { (mech, subj) };
    (mech + weight * (subj - mech)).clamp(lo, hi)
}

/// `sigmoid(lambda) * s_subj + (1 - sigmoid(lambda)) * s_mech`.
pub fn mix_scores(s_subj_norm: f64, s_mech: f64, params: &MixerParams) -> Result<f64> {
    if !params.lambda.is_finite() {
        return Err(Error::Parameter(format!("mixing logit must be finite, got {}", params.lambda)));
    }
    for (name, v) in [("subject score", s_subj_norm), ("mechanics score", s_mech)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("{name} {v} is outside [0, 1]")));
        }
    }
    Ok(convex_mix(params.subject_weight(), s_subj_norm, s_mech))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyScoreRecord {
    pub video_id: String,
    pub s_subj_raw: f64,
    pub s_subj_norm: f64,
    pub s_mech: f64,
    pub s_phy: f64,
}

impl PhyScoreRecord {
    pub fn compute(
        video_id: impl Into<String>,
        s_subj_raw: f64,
        stats: &SubjectStats,
        s_mech: f64,
        params: &MixerParams,
    ) -> Result<Self> {
        let s_subj_norm = normalize_subject(s_subj_raw, stats);
        let s_phy = mix_scores(s_subj_norm, s_mech, params)?;
        Ok(Self {
            video_id: video_id.into(),
            s_subj_raw,
            s_subj_norm,
            s_mech,
            s_phy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    pub delta: f64,
}

impl HuberConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Parameter(format!("Huber delta must be positive, got {delta}")));
        }
        Ok(Self { delta })
    }
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_HUBER_DELTA,
        }
    }
}

pub fn huber_loss(residual: f64, cfg: &HuberConfig) -> f64 {
    let a = residual.abs();
    if a <= cfg.delta {
        0.5 * residual * residual
    } else {
        cfg.delta * (a - 0.5 * cfg.delta)
    }
}

pub fn huber_grad(residual: f64, cfg: &HuberConfig) -> f64 {
    if residual.abs() <= cfg.delta {
        residual
    } else {
        cfg.delta * residual.signum()
    }
}

/// One training row for the mixer: precomputed features plus the annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub s_subj_norm: f64,
    pub s_mech: f64,
    pub human_score: f64,
}

/// Human-annotated PhyScore for one generated video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub prompt_id: String,
    pub video_id: String,
    pub predicted_score: f64,
    pub human_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaFitConfig {
    pub init_lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for LambdaFitConfig {
    fn default() -> Self {
        Self {
            init_lambda: 0.0,
            learning_rate: 1.0,
            steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaFit {
    pub params: MixerParams,
    /// Loss before each update, followed by the loss at the returned params.
    pub loss_trace: Vec<f64>,
}

impl LambdaFit {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }
}

/// Mean Huber loss of the mixer at `lambda` and its derivative in `lambda`.
pub fn mixer_objective(rows: &[FeatureRow], lambda: f64, cfg: &HuberConfig) -> (f64, f64) {
    let w = sigmoid(lambda);
    let dw = w * (1.0 - w);
    let (mut loss, mut grad) = (0.0, 0.0);
    for row in rows {
        let pred = row.s_mech + w * (row.s_subj_norm - row.s_mech);
        let r = pred - row.human_score;
        loss += huber_loss(r, cfg);
        grad += huber_grad(r, cfg) * (row.s_subj_norm - row.s_mech) * dw;
    }
    let n = rows.len() as f64;
    (loss / n, grad / n)
}

/// Gradient descent on the mean Huber loss over the mixing logit only.
///
/// A loss that becomes non-finite, or rises above the previous step's loss by
/// more than `1e-12`, is reported as divergence: the step size is too large
/// for descent to hold.
pub fn fit_lambda(rows: &[FeatureRow], huber: &HuberConfig, opt: &LambdaFitConfig) -> Result<LambdaFit> {
    if rows.is_empty() {
        return Err(Error::Empty("no annotated samples to fit".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        for (name, v) in [
            ("s_subj_norm", r.s_subj_norm),
            ("s_mech", r.s_mech),
            ("human_score", r.human_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range(format!("sample {i}: {name} {v} is outside [0, 1]")));
            }
        }
    }
    if !opt.learning_rate.is_finite() || opt.learning_rate < 0.0 {
        return Err(Error::Parameter(format!("invalid learning rate {}", opt.learning_rate)));
    }
    let mut lambda = MixerParams::new(opt.init_lambda)?.lambda;
    let mut trace = Vec::with_capacity(opt.steps + 1);
    for step in 0..=opt.steps {
        let (loss, grad) = mixer_objective(rows, lambda, huber);
        if !loss.is_finite() || !grad.is_finite() || !lambda.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("non-finite state (lambda={lambda}, loss={loss})"),
            });
        }
        if let Some(&prev) = trace.last() {
            if loss > prev + 1e-12 {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss rose from {prev} to {loss}; learning rate too large"),
                });
            }
        }
        trace.push(loss);
        if step < opt.steps {
            lambda -= opt.learning_rate * grad;
        }
    }
    Ok(LambdaFit {
        params: MixerParams::new(lambda)?,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f32]]) -> EmbeddingSequence {
        let rows: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        EmbeddingSequence::from_rows("v", &rows).unwrap()
    }

    #[test]
    fn consistency_examples() {
        assert_eq!(subject_consistency(&seq(&[&[1.0, 0.0], &[1.0, 0.0]])), 1.0);
        assert_eq!(subject_consistency(&seq(&[&[1.0, 0.0], &[0.0, 1.0]])), 0.0);
        let s = subject_consistency(&seq(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0]]));
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consistency_rejects_bad_sequences() {
        assert!(matches!(
            EmbeddingSequence::from_rows("v", &[vec![1.0, 0.0]]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            EmbeddingSequence::from_rows("v", &[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            EmbeddingSequence::from_rows("v", &[vec![1.0, 0.0], vec![1.0]]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn stats_examples() {
        let s = fit_subject_stats("c", &[0.0, 1.0]).unwrap();
        assert_eq!((s.mu, s.sigma), (0.5, 0.5));
        assert!(matches!(fit_subject_stats("c", &[0.3, 0.3]), Err(Error::Stats(_))));
        assert!(matches!(fit_subject_stats("c", &[0.1, 0.1, 0.1]), Err(Error::Stats(_))));
        let s = fit_subject_stats("c", &[1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(s.mu, 0.5);
        assert!((s.sigma - 0.125f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let stats = SubjectStats::new("c", 0.9, 0.05).unwrap();
        assert_eq!(normalize_subject(0.9, &stats), 0.5);
        let v = normalize_subject(0.95, &stats);
        assert!((v - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn mix_examples() {
        let p = MixerParams::new(0.0).unwrap();
        assert!((mix_scores(0.8, 0.5, &p).unwrap() - 0.65).abs() < 1e-15);
        let p = MixerParams::new(50.0).unwrap();
        assert!((mix_scores(0.8, 0.5, &p).unwrap() - 0.8).abs() < 1e-9);
        for l in [-30.0, -1.0, 0.3, 7.0] {
            assert_eq!(mix_scores(0.5, 0.5, &MixerParams { lambda: l }).unwrap(), 0.5);
        }
        assert!(matches!(
            mix_scores(0.5, 0.5, &MixerParams { lambda: f64::NAN }),
            Err(Error::Parameter(_))
        ));
        assert!(MixerParams::new(f64::INFINITY).is_err());
    }

    #[test]
    fn huber_examples() {
        let c = HuberConfig::default();
        assert_eq!(huber_loss(0.0, &c), 0.0);
        assert!((huber_loss(0.1, &c) - 0.005).abs() < 1e-15);
        assert!((huber_loss(0.5, &c) - 0.08).abs() < 1e-15);
        assert!((huber_grad(0.1, &c) - 0.1).abs() < 1e-15);
        assert_eq!(huber_grad(0.5, &c), 0.2);
        assert_eq!(huber_grad(-0.5, &c), -0.2);
        assert!(HuberConfig::new(0.0).is_err());
    }

    #[test]
    fn zero_feature_gap_leaves_lambda_unchanged() {
        let rows: Vec<FeatureRow> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&m| FeatureRow {
                s_subj_norm: m,
                s_mech: m,
                human_score: 0.3,
            })
            .collect();
        let (_, g) = mixer_objective(&rows, 0.4, &HuberConfig::default());
        assert_eq!(g, 0.0);
        let fit = fit_lambda(
            &rows,
            &HuberConfig::default(),
            &LambdaFitConfig {
                init_lambda: 0.4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fit.params.lambda, 0.4);
    }

    #[test]
    fn oversized_step_is_divergence() {
        let rows: Vec<FeatureRow> = (0..50)
            .map(|i| {
                let s = (i as f64 * 0.37).fract();
                let m = [0.0, 0.5, 1.0][i % 3];
                FeatureRow {
                    s_subj_norm: s,
                    s_mech: m,
                    human_score: 0.7 * s + 0.3 * m,
                }
            })
            .collect();
        let opt = LambdaFitConfig {
            learning_rate: 1e3,
            ..Default::default()
        };
        assert!(matches!(
            fit_lambda(&rows, &HuberConfig::default(), &opt),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn fit_rejects_empty_and_out_of_range() {
        let c = HuberConfig::default();
        let o = LambdaFitConfig::default();
        assert!(matches!(fit_lambda(&[], &c, &o), Err(Error::Empty(_))));
        let bad = [FeatureRow {
            s_subj_norm: 0.5,
            s_mech: 0.5,
            human_score: 1.5,
        }];
        assert!(matches!(fit_lambda(&bad, &c, &o), Err(Error::Range(_))));
    }
}
