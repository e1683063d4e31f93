//! End-to-end commands behind the `physcorr` binary.
//!
//! Each command reads a [`PipelineConfig`], writes its artifacts into the
//! configured output directory together with a resolved-config snapshot, and
//! returns a [`CommandReport`] for the terminal. Outputs depend only on the
//! inputs and the config, so reruns are byte-identical.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{
    build_preference_dataset, compose_dpo_prompts, compose_rm_prompts, group_by_prompt, split_by_category,
    PreferencePair, DEFAULT_RATIO_TOLERANCE, DEFAULT_TIE_EPSILON, DEFAULT_VIDEOS_PER_PROMPT,
};
use crate::error::{Error, Result};
use crate::io::{
    format_float, parse_artifact, write_artifact, AnnotationTable, Artifact, EmbeddingSet, HistogramReport,
    LatentTable, LossTrace, MixerFile, PolicyFile, PreferenceTable, PromptList, QuestionTable, ScoreRow, ScoreTable,
    StatsFile, VerdictTable, VideoManifest,
};
use crate::mechanics::{
    question_pairs, run_mechanics_pipeline, validate_question_pair, ConstraintConfig, LiveBackend, QuestionPair,
    ReplayCache, VerdictBackend, VideoRef,
};
use crate::phydpo::{
    margin_gains, mean_dpo_loss, reweight_dataset, train_toy, BetaMode, DpoConfig, MarginComparison,
    ReweightConfig, ScoreHistogram, ToyPolicy, DEFAULT_ALPHA, DEFAULT_BIN_WIDTH,
};
use crate::score::{
    fit_lambda, fit_subject_stats, normalize_subject, subject_consistency, FeatureRow, HuberConfig, LambdaFitConfig,
    MixerParams, PhyScoreRecord, DEFAULT_HUBER_DELTA,
};

/// Output file names inside the output directory.
pub mod outputs {
    pub const SCORES: &str = "scores.jsonl";
    pub const STATS: &str = "subject_stats.txt";
    pub const MIXER: &str = "mixer.txt";
    pub const FIT_TRACE: &str = "fit_trace.jsonl";
    pub const PREFERENCES: &str = "preferences.jsonl";
    pub const WEIGHTED: &str = "weighted_preferences.jsonl";
    pub const HISTOGRAM: &str = "histogram.tsv";
    pub const POLICY: &str = "policy.jsonl";
    pub const POLICY_BASELINE: &str = "policy_baseline.jsonl";
    pub const TRACE: &str = "trace.jsonl";
    pub const TRACE_BASELINE: &str = "trace_baseline.jsonl";
    pub const TRAIN_REPORT: &str = "train_report.txt";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub embeddings: Option<PathBuf>,
    pub verdicts: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub videos: Option<PathBuf>,
    /// Preference-tuning prompt list; enables the composition report.
    pub prompts: Option<PathBuf>,
    /// Reward-model prompt list; enables the composition report in `fit-rm`.
    pub rm_prompts: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub latent: Option<PathBuf>,
    /// Subject statistics to score with; fitted on the scored corpus if unset.
    pub stats: Option<PathBuf>,
    /// Mixer parameters to score with; `mixer.init_lambda` if unset.
    pub mixer: Option<PathBuf>,
    /// Score table consumed by later stages; defaults to the one `score` writes.
    pub scores: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerSection {
    pub init_lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub huber_delta: f64,
}

impl Default for MixerSection {
    fn default() -> Self {
        let d = LambdaFitConfig::default();
        Self {
            init_lambda: d.init_lambda,
            learning_rate: d.learning_rate,
            steps: d.steps,
            huber_delta: DEFAULT_HUBER_DELTA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Replay,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanicsSection {
    pub tau: f64,
    pub backend: BackendMode,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for MechanicsSection {
    fn default() -> Self {
        Self {
            tau: crate::mechanics::DEFAULT_TAU,
            backend: BackendMode::Replay,
            endpoint: None,
            timeout_ms: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub n_videos: usize,
    pub epsilon: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            n_videos: DEFAULT_VIDEOS_PER_PROMPT,
            epsilon: DEFAULT_TIE_EPSILON,
        }
    }
}

/// `"max"` for the histogram peak density, or a fixed positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Fixed(f64),
    Named(String),
}

impl BetaSetting {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "max" {
            return Ok(BetaSetting::Named(s.into()));
        }
        s.parse()
            .map(BetaSetting::Fixed)
            .map_err(|_| Error::Config(format!("beta must be `max` or a number, got `{s}`")))
    }

    fn mode(&self) -> Result<BetaMode> {
        match self {
            BetaSetting::Fixed(b) => Ok(BetaMode::Fixed(*b)),
            BetaSetting::Named(s) if s == "max" => Ok(BetaMode::ComputedMaxDensity),
            BetaSetting::Named(s) => Err(Error::Config(format!("beta must be `max` or a number, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightSection {
    pub alpha: f64,
    pub beta: BetaSetting,
    pub bin_width: f64,
}

impl Default for ReweightSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: BetaSetting::Named("max".into()),
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_id: String,
    pub jobs: usize,
    pub paths: PathsConfig,
    pub mixer: MixerSection,
    pub mechanics: MechanicsSection,
    pub selection: SelectionSection,
    pub reweight: ReweightSection,
    pub dpo: DpoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_id: "default".into(),
            jobs: 1,
            paths: PathsConfig::default(),
            mixer: MixerSection::default(),
            mechanics: MechanicsSection::default(),
            selection: SelectionSection::default(),
            reweight: ReweightSection::default(),
            dpo: DpoConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<BetaSetting>,
    pub gamma: Option<f64>,
    pub n_videos: Option<usize>,
    pub tau: Option<f64>,
}

impl PipelineConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.embeddings,
            &mut p.verdicts,
            &mut p.questions,
            &mut p.videos,
            &mut p.prompts,
            &mut p.rm_prompts,
            &mut p.annotations,
            &mut p.latent,
            &mut p.stats,
            &mut p.mixer,
            &mut p.scores,
        ] {
            if let Some(x) = slot.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        }
        if p.output_dir.as_os_str().is_empty() {
            p.output_dir = PathBuf::from("out");
        }
        if p.output_dir.is_relative() {
            p.output_dir = base.join(&p.output_dir);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(s) = o.seed {
            self.dpo.seed = s;
        }
        if let Some(a) = o.alpha {
            self.reweight.alpha = a;
        }
        if let Some(b) = &o.beta {
            self.reweight.beta = b.clone();
        }
        if let Some(g) = o.gamma {
            self.dpo.gamma = g;
        }
        if let Some(n) = o.n_videos {
            self.selection.n_videos = n;
        }
        if let Some(t) = o.tau {
            self.mechanics.tau = t;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if !self.mixer.init_lambda.is_finite() {
            return bad("mixer.init_lambda must be finite".into());
        }
        if !(self.mixer.learning_rate >= 0.0 && self.mixer.learning_rate.is_finite()) {
            return bad(format!("mixer.learning_rate {} is invalid", self.mixer.learning_rate));
        }
        HuberConfig::new(self.mixer.huber_delta).map_err(|e| Error::Config(e.to_string()))?;
        ConstraintConfig::new(self.mechanics.tau)?;
        if self.mechanics.backend == BackendMode::Live && self.mechanics.endpoint.is_none() {
            return bad("mechanics.endpoint is required for the live backend".into());
        }
        if self.selection.n_videos < 2 {
            return bad("selection.n_videos must be at least 2".into());
        }
        if !(self.selection.epsilon >= 0.0) {
            return bad("selection.epsilon must be >= 0".into());
        }
        self.reweight_config()?.validate()?;
        ScoreHistogram::empty(self.reweight.bin_width)?;
        self.dpo.validate()
    }

    pub fn reweight_config(&self) -> Result<ReweightConfig> {
        Ok(ReweightConfig {
            alpha: self.reweight.alpha,
            beta: self.reweight.beta.mode()?,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }

    fn scores_path(&self) -> PathBuf {
        self.paths.scores.clone().unwrap_or_else(|| self.out(outputs::SCORES))
    }

    fn write_snapshot(&self, command: &str) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let path = self.out(&format!("{command}.resolved.toml"));
        std::fs::create_dir_all(&self.paths.output_dir).map_err(|e| Error::io(&self.paths.output_dir, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} worker(s): {e}", self.jobs)))
    }
}

fn required<'a>(slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    let p = slot
        .as_deref()
        .ok_or_else(|| Error::Config(format!("paths.{name} is required for this command")))?;
    if !p.exists() {
        return Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
        ));
    }
    Ok(p)
}

fn optional(slot: &Option<PathBuf>) -> Result<Option<&Path>> {
    match slot.as_deref() {
        Some(p) if !p.exists() => Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
        )),
        other => Ok(other),
    }
}

fn existing(p: PathBuf) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist (run the earlier stage first)"),
        ))
    }
}

/// Terminal output of a command: human-readable lines plus one
/// machine-readable summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandReport {
    pub lines: Vec<String>,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl CommandReport {
    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn put(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.into(), value.into());
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        let _ = writeln!(s, "summary {}", serde_json::Value::Object(self.summary.clone()));
        s
    }
}

/// Ten-bucket text bar chart of scores in `[0, 1]`.
pub fn histogram_sketch(scores: &[f64]) -> Vec<String> {
    let mut buckets = [0usize; 10];
    for &s in scores {
        buckets[((s * 10.0) as usize).min(9)] += 1;
    }
    let max = buckets.iter().copied().max().unwrap_or(0).max(1);
    buckets
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let bar = "#".repeat((c * 40).div_ceil(max));
            format!("  [{:.1}, {:.1}{} {:>5} {bar}", i as f64 / 10.0, (i + 1) as f64 / 10.0, if i == 9 { "]" } else { ")" }, c)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// score

pub fn cmd_score(cfg: &PipelineConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let emb_path = required(&cfg.paths.embeddings, "embeddings")?;
    let q_path = required(&cfg.paths.questions, "questions")?;
    let videos_path = required(&cfg.paths.videos, "videos")?;
    let verdicts_path = match cfg.mechanics.backend {
        BackendMode::Replay => Some(required(&cfg.paths.verdicts, "verdicts")?),
        BackendMode::Live => None,
    };
    let stats_path = optional(&cfg.paths.stats)?;
    let mixer_path = optional(&cfg.paths.mixer)?;
    cfg.write_snapshot("score")?;

    let embeddings = parse_artifact::<EmbeddingSet>(emb_path)?;
    let questions = parse_artifact::<QuestionTable>(q_path)?;
    let manifest = parse_artifact::<VideoManifest>(videos_path)?;

    let constraints = ConstraintConfig::new(cfg.mechanics.tau)?;
    let mut pairs: HashMap<String, QuestionPair> = HashMap::new();
    for pair in question_pairs(&questions.body.questions)? {
        if let Err(reason) = validate_question_pair(&pair, &constraints) {
            return Err(Error::Group(format!(
                "question pair for prompt `{}` rejected: {reason}",
                pair.prompt_id
            )));
        }
        pairs.insert(pair.prompt_id.clone(), pair);
    }

    let by_id: HashMap<&str, _> = embeddings
        .body
        .sequences
        .iter()
        .map(|s| (s.video_id(), s))
        .collect();
    let pool = cfg.thread_pool()?;
    let raws: Vec<f64> = pool.install(|| {
        manifest
            .body
            .videos
            .par_iter()
            .map(|v| {
                by_id
                    .get(v.video_id.as_str())
                    .map(|s| subject_consistency(s))
                    .ok_or_else(|| Error::for_video(&v.video_id, Error::Empty("no embeddings for this video".into())))
            })
            .collect::<Result<_>>()
    })?;

    let stats = match stats_path {
        Some(p) => parse_artifact::<StatsFile>(p)?.body.0,
        None => fit_subject_stats(embeddings.header.corpus_id.clone(), &raws)?,
    };
    let params = match mixer_path {
        Some(p) => MixerParams::new(parse_artifact::<MixerFile>(p)?.body.lambda)?,
        None => MixerParams::new(cfg.mixer.init_lambda)?,
    };

    let backend: Box<dyn VerdictBackend> = match cfg.mechanics.backend {
        BackendMode::Replay => {
            let table = parse_artifact::<VerdictTable>(verdicts_path.expect("checked above"))?;
            Box::new(ReplayCache::from_records(table.body.records)?)
        }
        BackendMode::Live => Box::new(LiveBackend::new(
            cfg.mechanics.endpoint.clone().expect("validated"),
            Duration::from_millis(cfg.mechanics.timeout_ms),
        )),
    };

    let rows: Vec<ScoreRow> = pool.install(|| {
        manifest
            .body
            .videos
            .par_iter()
            .zip(&raws)
            .map(|(v, &raw)| {
                let pair = pairs.get(&v.prompt_id).ok_or_else(|| {
                    Error::for_video(&v.video_id, Error::Group(format!("no questions for prompt `{}`", v.prompt_id)))
                })?;
                let video = VideoRef {
                    video_id: v.video_id.clone(),
                    uri: v.video_ref.clone(),
                };
                let mech = run_mechanics_pipeline(&video, pair, backend.as_ref())
                    .map_err(|e| Error::for_video(&v.video_id, e))?;
                let rec = PhyScoreRecord::compute(&v.video_id, raw, &stats, mech.value(), &params)
                    .map_err(|e| Error::for_video(&v.video_id, e))?;
                log::debug!(
                    "{}: subj {} mech {} phy {}",
                    rec.video_id,
                    format_float(rec.s_subj_norm),
                    format_float(rec.s_mech),
                    format_float(rec.s_phy)
                );
                Ok(ScoreRow {
                    prompt_id: v.prompt_id.clone(),
                    video_id: rec.video_id,
                    s_subj_raw: rec.s_subj_raw,
                    s_subj_norm: rec.s_subj_norm,
                    s_mech: rec.s_mech,
                    s_phy: rec.s_phy,
                })
            })
            .collect::<Result<_>>()
    })?;

    let table = Artifact::new(cfg.corpus_id.clone(), ScoreTable { rows })
        .header_meta("stats_corpus_id", stats.corpus_id.clone())
        .header_meta("mu", format_float(stats.mu))
        .header_meta("sigma", format_float(stats.sigma))
        .header_meta("lambda", format_float(params.lambda));
    write_artifact(&table, cfg.out(outputs::SCORES))?;

    let phy: Vec<f64> = table.body.rows.iter().map(|r| r.s_phy).collect();
    let mean = phy.iter().sum::<f64>() / phy.len().max(1) as f64;
    let mut report = CommandReport::default();
    report.line(format!("scored {} videos", phy.len()));
    report.line(format!("mean PhyScore {}", format_float(mean)));
    report.line(format!(
        "subject stats mu={} sigma={} (corpus `{}`), subject weight {}",
        format_float(stats.mu),
        format_float(stats.sigma),
        stats.corpus_id,
        format_float(params.subject_weight())
    ));
    report.line("PhyScore histogram:");
    report.lines.extend(histogram_sketch(&phy));
    report.put("command", "score");
    report.put("count", phy.len());
    report.put("mean_s_phy", mean);
    Ok(report)
}

impl<B: crate::io::ArtifactBody> Artifact<B> {
    fn header_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.header.meta.insert(key.into(), value.into());
        self
    }
}

// ---------------------------------------------------------------------------
// fit-rm

pub fn cmd_fit_rm(cfg: &PipelineConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let ann_path = required(&cfg.paths.annotations, "annotations")?;
    let rm_prompts = optional(&cfg.paths.rm_prompts)?;
    cfg.write_snapshot("fit-rm")?;

    let mut report = CommandReport::default();
    if let Some(p) = rm_prompts {
        let list = parse_artifact::<PromptList>(p)?;
        let (physics, neutral) = split_by_category(list.body.prompts);
        let set = compose_rm_prompts(physics, neutral, DEFAULT_RATIO_TOLERANCE)?;
        report.line(set.report.to_string());
    }

    let ann = parse_artifact::<AnnotationTable>(ann_path)?;
    let raws: Vec<f64> = ann.body.rows.iter().map(|r| r.s_subj_raw).collect();
    let stats = fit_subject_stats(ann.header.corpus_id.clone(), &raws)?;
    let rows: Vec<FeatureRow> = ann
        .body
        .rows
        .iter()
        .map(|r| FeatureRow {
            s_subj_norm: normalize_subject(r.s_subj_raw, &stats),
            s_mech: r.s_mech,
            human_score: r.human_score,
        })
        .collect();
    if rows.iter().all(|r| r.s_subj_norm == r.s_mech) {
        return Err(Error::Stats(
            "annotations carry no signal for the mixer: subject and mechanics features coincide".into(),
        ));
    }
    let huber = HuberConfig::new(cfg.mixer.huber_delta)?;
    let opt = LambdaFitConfig {
        init_lambda: cfg.mixer.init_lambda,
        learning_rate: cfg.mixer.learning_rate,
        steps: cfg.mixer.steps,
    };
    let fit = fit_lambda(&rows, &huber, &opt)?;
    log::debug!("fit trace has {} entries", fit.loss_trace.len());

    write_artifact(&Artifact::new(cfg.corpus_id.clone(), StatsFile(stats.clone())), cfg.out(outputs::STATS))?;
    let mixer = MixerFile {
        lambda: fit.params.lambda,
        subject_weight: fit.params.subject_weight(),
        huber_delta: huber.delta,
        final_loss: fit.final_loss(),
    };
    write_artifact(&Artifact::new(cfg.corpus_id.clone(), mixer), cfg.out(outputs::MIXER))?;
    write_artifact(
        &Artifact::new(
            cfg.corpus_id.clone(),
            LossTrace {
                losses: fit.loss_trace.clone(),
            },
        ),
        cfg.out(outputs::FIT_TRACE),
    )?;

    report.line(format!("fitted on {} annotated videos", rows.len()));
    report.line(format!(
        "lambda {} (subject weight {})",
        format_float(mixer.lambda),
        format_float(mixer.subject_weight)
    ));
    report.line(format!(
        "Huber loss {} -> {}",
        format_float(fit.loss_trace[0]),
        format_float(mixer.final_loss)
    ));
    report.put("command", "fit-rm");
    report.put("lambda", mixer.lambda);
    report.put("subject_weight", mixer.subject_weight);
    report.put("final_loss", mixer.final_loss);
    Ok(report)
}

// ---------------------------------------------------------------------------
// select-pairs

pub fn cmd_select_pairs(cfg: &PipelineConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let scores_path = existing(cfg.scores_path())?;
    let prompts = optional(&cfg.paths.prompts)?;
    cfg.write_snapshot("select-pairs")?;

    let mut report = CommandReport::default();
    if let Some(p) = prompts {
        let list = parse_artifact::<PromptList>(p)?;
        let (challenging, random) = split_by_category(list.body.prompts);
        let set = compose_dpo_prompts(challenging, random, DEFAULT_RATIO_TOLERANCE)?;
        report.line(set.report.to_string());
    }

    let table = parse_artifact::<ScoreTable>(&scores_path)?;
    let groups = group_by_prompt(table.body.rows.iter().map(|r| {
        (
            r.prompt_id.as_str(),
            PhyScoreRecord {
                video_id: r.video_id.clone(),
                s_subj_raw: r.s_subj_raw,
                s_subj_norm: r.s_subj_norm,
                s_mech: r.s_mech,
                s_phy: r.s_phy,
            },
        )
    }));
    if let Some(g) = groups.iter().find(|g| g.videos.len() != cfg.selection.n_videos) {
        return Err(Error::Group(format!(
            "prompt `{}` has {} videos, expected {}",
            g.prompt_id,
            g.videos.len(),
            cfg.selection.n_videos
        )));
    }
    let ds = build_preference_dataset(&groups, cfg.selection.epsilon)?;
    let art = Artifact::new(cfg.corpus_id.clone(), PreferenceTable { pairs: ds.pairs.clone() })
        .header_meta("epsilon", format_float(cfg.selection.epsilon))
        .header_meta("n_videos", cfg.selection.n_videos.to_string());
    write_artifact(&art, cfg.out(outputs::PREFERENCES))?;

    for s in &ds.skipped {
        report.line(s.to_string());
    }
    report.line(format!(
        "{} preference pairs from {} groups ({} degenerate)",
        ds.pairs.len(),
        groups.len(),
        ds.skipped.len()
    ));
    report.put("command", "select-pairs");
    report.put("pairs", ds.pairs.len());
    report.put("groups", groups.len());
    report.put("skipped", ds.skipped.len());
    Ok(report)
}

// ---------------------------------------------------------------------------
// reweight

pub fn cmd_reweight(cfg: &PipelineConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let scores_path = existing(cfg.scores_path())?;
    let prefs_path = existing(cfg.out(outputs::PREFERENCES))?;
    cfg.write_snapshot("reweight")?;

    let table = parse_artifact::<ScoreTable>(&scores_path)?;
    let prefs = parse_artifact::<PreferenceTable>(&prefs_path)?;
    let scores: Vec<f64> = table.body.rows.iter().map(|r| r.s_phy).collect();
    let hist = ScoreHistogram::build(&scores, cfg.reweight.bin_width)?;
    let rw = cfg.reweight_config()?;
    let beta = rw.resolve_beta(&hist)?;
    let pool = cfg.thread_pool()?;
    let pairs = pool.install(|| reweight_dataset(&prefs.body.pairs, &hist, &rw))?;

    let art = Artifact::new(cfg.corpus_id.clone(), PreferenceTable { pairs: pairs.clone() })
        .header_meta("alpha", format_float(rw.alpha))
        .header_meta("beta", format_float(beta))
        .header_meta("beta_mode", rw.beta.name())
        .header_meta("bin_width", format_float(hist.bin_width()))
        .header_meta("total", hist.total().to_string());
    write_artifact(&art, cfg.out(outputs::WEIGHTED))?;
    write_artifact(
        &Artifact::new(cfg.corpus_id.clone(), HistogramReport::from_histogram(&hist))
            .header_meta("bin_width", format_float(hist.bin_width()))
            .header_meta("total", hist.total().to_string()),
        cfg.out(outputs::HISTOGRAM),
    )?;

    let weights: Vec<f64> = pairs.iter().map(|p| p.weight).collect();
    let (min, max) = weights
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
    let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
    let mut report = CommandReport::default();
    report.line(format!(
        "histogram: {} scores, {} non-empty bins of width {}",
        hist.total(),
        hist.nonempty_bins().count(),
        format_float(hist.bin_width())
    ));
    report.line(format!(
        "alpha={} beta={} ({})",
        format_float(rw.alpha),
        format_float(beta),
        rw.beta.name()
    ));
    report.line(format!(
        "{} weights: min {} mean {} max {}",
        weights.len(),
        format_float(min),
        format_float(mean),
        format_float(max)
    ));
    report.put("command", "reweight");
    report.put("pairs", weights.len());
    report.put("alpha", rw.alpha);
    report.put("beta", beta);
    report.put("beta_mode", rw.beta.name());
    report.put("bin_width", hist.bin_width());
    report.put("total", hist.total());
    Ok(report)
}

// ---------------------------------------------------------------------------
// train-toy

/// Results of one weighted run and its unweighted baseline.
#[derive(Debug, Clone)]
pub struct ToyComparison {
    pub weighted: crate::phydpo::TrainOutcome,
    pub baseline: crate::phydpo::TrainOutcome,
    pub initial: ToyPolicy,
    /// Mean expected latent quality under (reference, weighted, baseline).
    pub latent: Option<(f64, f64, f64)>,
    pub margins: Option<MarginComparison>,
    pub baseline_matches_plain_dpo: bool,
}

/// Builds a policy over the score table's candidates and trains it twice on
/// the same seed: with the pairs' weights and with all weights set to 1.
pub fn run_toy_comparison(
    table: &ScoreTable,
    pairs: &[PreferencePair],
    latent: Option<&LatentTable>,
    cfg: &DpoConfig,
) -> Result<ToyComparison> {
    let groups = group_by_prompt(table.rows.iter().map(|r| {
        (
            r.prompt_id.as_str(),
            PhyScoreRecord {
                video_id: r.video_id.clone(),
                s_subj_raw: r.s_subj_raw,
                s_subj_norm: r.s_subj_norm,
                s_mech: r.s_mech,
                s_phy: r.s_phy,
            },
        )
    }));
    let prompts = groups.iter().map(|g| g.prompt_id.clone()).collect();
    let items = groups
        .iter()
        .map(|g| g.videos.iter().map(|v| v.video_id.clone()).collect())
        .collect();
    let initial = ToyPolicy::seeded(prompts, items, cfg.seed, cfg.init_scale)?;

    let weighted = train_toy(&initial, pairs, cfg)?;
    let unit: Vec<PreferencePair> = pairs
        .iter()
        .map(|p| PreferencePair { weight: 1.0, ..p.clone() })
        .collect();
    let baseline = train_toy(&initial, &unit, cfg)?;
    let plain = mean_dpo_loss(&baseline.policy, &unit, cfg)?;
    let baseline_matches_plain_dpo = plain.to_bits() == baseline.trace.last().expect("non-empty").to_bits();

    let latent = match latent {
        Some(t) => {
            let lookup: HashMap<(&str, &str), f64> = t
                .rows
                .iter()
                .map(|r| ((r.prompt_id.as_str(), r.video_id.as_str()), r.latent_quality))
                .collect();
            let mut values = Vec::with_capacity(initial.logits().len());
            for r in 0..initial.rows() {
                let p = &initial.prompts()[r];
                for item in initial.items(r) {
                    let q = lookup.get(&(p.as_str(), item.as_str())).ok_or_else(|| {
                        Error::Index(format!("no latent quality for `{p}`/`{item}`"))
                    })?;
                    values.push(*q);
                }
            }
            Some((
                initial.expected_value(&values, true),
                weighted.policy.expected_value(&values, false),
                baseline.policy.expected_value(&values, false),
            ))
        }
        None => None,
    };
    let gains = margin_gains(&initial, &weighted.policy, pairs, cfg.gamma)?;
    let margins = MarginComparison::from_gains(&gains);
    Ok(ToyComparison {
        weighted,
        baseline,
        initial,
        latent,
        margins,
        baseline_matches_plain_dpo,
    })
}

pub fn cmd_train_toy(cfg: &PipelineConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let scores_path = existing(cfg.scores_path())?;
    let weighted_path = existing(cfg.out(outputs::WEIGHTED))?;
    let latent_path = optional(&cfg.paths.latent)?;
    cfg.write_snapshot("train-toy")?;

    let table = parse_artifact::<ScoreTable>(&scores_path)?;
    let prefs = parse_artifact::<PreferenceTable>(&weighted_path)?;
    let latent = latent_path.map(parse_artifact::<LatentTable>).transpose()?;
    let file_alpha = prefs.header.meta.get("alpha").cloned().unwrap_or_else(|| "unset".into());
    if file_alpha != format_float(cfg.reweight.alpha) {
        log::warn!(
            "weights were computed with alpha={file_alpha}, config says {}",
            format_float(cfg.reweight.alpha)
        );
    }

    let cmp = run_toy_comparison(&table.body, &prefs.body.pairs, latent.as_ref().map(|a| &a.body), &cfg.dpo)?;

    let id = cfg.corpus_id.clone();
    write_artifact(
        &Artifact::new(id.clone(), PolicyFile::from_policy(&cmp.weighted.policy)),
        cfg.out(outputs::POLICY),
    )?;
    write_artifact(
        &Artifact::new(id.clone(), PolicyFile::from_policy(&cmp.baseline.policy)),
        cfg.out(outputs::POLICY_BASELINE),
    )?;
    write_artifact(
        &Artifact::new(
            id.clone(),
            LossTrace {
                losses: cmp.weighted.trace.clone(),
            },
        ),
        cfg.out(outputs::TRACE),
    )?;
    write_artifact(
        &Artifact::new(
            id,
            LossTrace {
                losses: cmp.baseline.trace.clone(),
            },
        ),
        cfg.out(outputs::TRACE_BASELINE),
    )?;

    let mut report = CommandReport::default();
    let (w0, w1) = (cmp.weighted.trace[0], *cmp.weighted.trace.last().expect("non-empty"));
    let (b0, b1) = (cmp.baseline.trace[0], *cmp.baseline.trace.last().expect("non-empty"));
    report.line(format!(
        "pairs {} prompts {} items/prompt {} gamma {} lr {} steps {} seed {}",
        prefs.body.pairs.len(),
        cmp.initial.rows(),
        cmp.initial.width(),
        format_float(cfg.dpo.gamma),
        format_float(cfg.dpo.learning_rate),
        cfg.dpo.steps,
        cfg.dpo.seed
    ));
    report.line(format!(
        "weighted (alpha={file_alpha}) loss {} -> {}",
        format_float(w0),
        format_float(w1)
    ));
    report.line(format!("baseline (alpha=0) loss {} -> {}", format_float(b0), format_float(b1)));
    report.line(format!("baseline_matches_plain_dpo {}", cmp.baseline_matches_plain_dpo));
    report.put("command", "train-toy");
    report.put("weighted_initial_loss", w0);
    report.put("weighted_final_loss", w1);
    report.put("baseline_initial_loss", b0);
    report.put("baseline_final_loss", b1);
    report.put("baseline_matches_plain_dpo", cmp.baseline_matches_plain_dpo);
    if let Some((r, w, b)) = cmp.latent {
        report.line(format!(
            "expected latent quality: reference {} weighted {} baseline {}",
            format_float(r),
            format_float(w),
            format_float(b)
        ));
        report.put("latent_reference", r);
        report.put("latent_weighted", w);
        report.put("latent_baseline", b);
    }
    match &cmp.margins {
        Some(m) => {
            report.line(format!(
                "margin gain at matched initial margins: high-weight {} (n={}) vs low-weight {} (n={}) -> {}",
                format_float(m.high_mean_gain),
                m.high_count,
                format_float(m.low_mean_gain),
                m.low_count,
                if m.high_weight_gains_more() {
                    "high-weight pairs gain more"
                } else {
                    "high-weight pairs do NOT gain more"
                }
            ));
            report.put("high_weight_margin_gain", m.high_mean_gain);
            report.put("low_weight_margin_gain", m.low_mean_gain);
        }
        None => report.line("margin comparison: all pairs share one weight"),
    }
    let text = report.render();
    let path = cfg.out(outputs::TRAIN_REPORT);
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// report

/// Summarises whatever artifacts exist in the output directory.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let mut report = CommandReport::default();
    report.put("command", "report");
    let dir = &cfg.paths.output_dir;
    report.line(format!("output directory {}", dir.display()));

    let scores_path = cfg.scores_path();
    if scores_path.exists() {
        let t = parse_artifact::<ScoreTable>(&scores_path)?;
        let phy: Vec<f64> = t.body.rows.iter().map(|r| r.s_phy).collect();
        let mean = phy.iter().sum::<f64>() / phy.len().max(1) as f64;
        report.line(format!("scores: {} videos, mean PhyScore {}", phy.len(), format_float(mean)));
        report.lines.extend(histogram_sketch(&phy));
        report.put("videos", phy.len());
    }
    let mixer = cfg.out(outputs::MIXER);
    if mixer.exists() {
        let m = parse_artifact::<MixerFile>(&mixer)?.body;
        report.line(format!(
            "mixer: lambda {} subject weight {} final Huber loss {}",
            format_float(m.lambda),
            format_float(m.subject_weight),
            format_float(m.final_loss)
        ));
    }
    let prefs = cfg.out(outputs::PREFERENCES);
    if prefs.exists() {
        let p = parse_artifact::<PreferenceTable>(&prefs)?;
        report.line(format!("preference pairs: {}", p.body.pairs.len()));
        report.put("pairs", p.body.pairs.len());
    }
    let weighted = cfg.out(outputs::WEIGHTED);
    if weighted.exists() {
        let p = parse_artifact::<PreferenceTable>(&weighted)?;
        let meta: Vec<String> = p.header.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
        report.line(format!("weighted pairs: {} ({})", p.body.pairs.len(), meta.join(" ")));
    }
    let train = cfg.out(outputs::TRAIN_REPORT);
    if train.exists() {
        let text = std::fs::read_to_string(&train).map_err(|e| Error::io(&train, e))?;
        report.line("toy training:");
        report
            .lines
            .extend(text.lines().filter(|l| !l.starts_with("summary ")).map(|l| format!("  {l}")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let mut cfg: PipelineConfig = toml::from_str("[reweight]\nbeta = 0.58\n").unwrap();
        assert_eq!(cfg.reweight_config().unwrap().beta, BetaMode::Fixed(0.58));
        assert_eq!(cfg.selection.n_videos, 4);
        cfg.apply(&Overrides {
            beta: Some(BetaSetting::parse("max").unwrap()),
            alpha: Some(0.0),
            ..Default::default()
        });
        assert_eq!(cfg.reweight_config().unwrap().beta, BetaMode::ComputedMaxDensity);
        assert_eq!(cfg.reweight.alpha, 0.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_config_values() {
        let bad = [
            "[reweight]\nbeta = \"peak\"\n",
            "[reweight]\nalpha = -1.0\n",
            "[mechanics]\ntau = 1.5\n",
            "[dpo]\ngamma = 0.0\n",
            "[selection]\nn_videos = 1\n",
            "[mechanics]\nbackend = \"live\"\n",
        ];
        for text in bad {
            let cfg: PipelineConfig = toml::from_str(text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{text}");
        }
        assert!(toml::from_str::<PipelineConfig>("[selection]\nbogus = 1\n").is_err());
    }

    #[test]
    fn sketch_has_ten_rows() {
        let rows = histogram_sketch(&[0.0, 0.05, 0.5, 1.0]);
        assert_eq!(rows.len(), 10);
        assert!(rows[9].contains("1.0]"));
    }
}
