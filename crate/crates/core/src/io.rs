//! On-disk artifacts.
//!
//! Every artifact starts with a one-line JSON header naming its format and
//! version. Text artifacts continue with one record per line: JSON objects
//! with a fixed field order, `key=value` lines, or a tab-separated table.
//! Floats are written with 9 significant digits, so writing a parsed artifact
//! reproduces a canonically written file byte for byte.
//!
//! Embeddings additionally have a binary encoding: after the header line come
//! records of `u32 id_len | id | u32 frames | u32 dim | frames*dim f32`, all
//! little-endian.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::curation::{PreferencePair, PromptRecord};
use crate::error::{Error, Result};
use crate::mechanics::{MechanicsScore, QuestionRecord, VerdictRecord};
use crate::score::{EmbeddingSequence, SubjectStats, STD_CONVENTION};

pub const CREATED_BY: &str = concat!("physcorr ", env!("CARGO_PKG_VERSION"));

/// Formats a float with 9 significant digits, dropping trailing zeros.
pub fn format_float(x: f64) -> String {
    fn trim(s: &str) -> &str {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.')
        } else {
            s
        }
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp) as usize, x);
        trim(&s).to_string()
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    #[serde(rename = "format")]
    pub format_name: String,
    #[serde(rename = "version")]
    pub format_version: u32,
    pub created_by: String,
    pub corpus_id: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ArtifactHeader {
    pub fn new<B: ArtifactBody>(corpus_id: impl Into<String>) -> Self {
        Self {
            format_name: B::FORMAT.to_string(),
            format_version: B::VERSION,
            created_by: CREATED_BY.to_string(),
            corpus_id: corpus_id.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    fn to_line(&self) -> String {
        let mut r = Record::new();
        r.str("format", &self.format_name)
            .int("version", u64::from(self.format_version))
            .str("created_by", &self.created_by)
            .str("corpus_id", &self.corpus_id);
        let mut meta = String::from("{");
        for (i, (k, v)) in self.meta.iter().enumerate() {
            if i > 0 {
                meta.push(',');
            }
            let _ = write!(meta, "{}:{}", json_str(k), json_str(v));
        }
        meta.push('}');
        r.raw("meta", &meta);
        r.finish()
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Builder for one canonical JSON record line.
#[derive(Debug, Default)]
pub struct Record {
    buf: String,
}

impl Record {
    pub fn new() -> Self {
        Self { buf: "{".into() }
    }

    fn key(&mut self, key: &str) {
        if self.buf.len() > 1 {
            self.buf.push(',');
        }
        self.buf.push_str(&json_str(key));
        self.buf.push(':');
    }

    fn raw(&mut self, key: &str, value: &str) -> &mut Self {
        self.key(key);
        self.buf.push_str(value);
        self
    }

    pub fn str(&mut self, key: &str, value: &str) -> &mut Self {
        self.raw(key, &json_str(value))
    }

    pub fn num(&mut self, key: &str, value: f64) -> &mut Self {
        self.raw(key, &format_float(value))
    }

    pub fn int(&mut self, key: &str, value: u64) -> &mut Self {
        self.raw(key, &value.to_string())
    }

    pub fn bool(&mut self, key: &str, value: bool) -> &mut Self {
        self.raw(key, if value { "true" } else { "false" })
    }

    pub fn nums(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let items: Vec<String> = values.iter().map(|&v| format_float(v)).collect();
        self.raw(key, &format!("[{}]", items.join(",")))
    }

    pub fn strs(&mut self, key: &str, values: &[String]) -> &mut Self {
        let items: Vec<String> = values.iter().map(|v| json_str(v)).collect();
        self.raw(key, &format!("[{}]", items.join(",")))
    }

    pub fn finish(&mut self) -> String {
        let mut s = std::mem::take(&mut self.buf);
        s.push('}');
        s
    }
}

/// Line-oriented view of an artifact body; line numbers are 1-based and
/// count the header.
pub struct Lines<'a> {
    path: &'a Path,
    lines: Vec<(usize, &'a str)>,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Result<Self> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::parse(path, text.lines().count() + 1, "last record is not newline-terminated"));
        }
        let lines = text
            .split_terminator('\n')
            .enumerate()
            .map(|(i, l)| (i + 2, l))
            .collect();
        Ok(Self { path, lines })
    }

    pub fn err(&self, line: usize, reason: impl Into<String>) -> Error {
        Error::parse(self.path, line, reason)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &'a str)> + '_ {
        self.lines.iter().copied()
    }

    /// Deserializes every line as a JSON record; blank lines are rejected.
    pub fn records<T: DeserializeOwned>(&self) -> Result<Vec<(usize, T)>> {
        self.iter()
            .map(|(n, l)| {
                if l.trim().is_empty() {
                    return Err(self.err(n, "blank line"));
                }
                serde_json::from_str(l)
                    .map(|r| (n, r))
                    .map_err(|e| self.err(n, e.to_string()))
            })
            .collect()
    }

    /// Parses `key=value` lines, requiring exactly the given keys in order.
    pub fn key_values(&self, keys: &[&str]) -> Result<Vec<String>> {
        let all: Vec<(usize, &str)> = self.iter().collect();
        if all.len() != keys.len() {
            return Err(self.err(
                all.last().map_or(1, |l| l.0),
                format!("expected {} key=value lines, found {}", keys.len(), all.len()),
            ));
        }
        all.iter()
            .zip(keys)
            .map(|(&(n, l), &key)| match l.split_once('=') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(self.err(n, format!("expected `{key}=...`"))),
            })
            .collect()
    }
}

/// Payload of an artifact file.
pub trait ArtifactBody: Sized {
    const FORMAT: &'static str;
    const VERSION: u32 = 1;

    fn write_body(&self, header: &ArtifactHeader, out: &mut Vec<u8>);

    fn parse_body(header: &ArtifactHeader, path: &Path, body: &[u8]) -> Result<Self>;
}

/// Text bodies parse from lines.
pub trait TextBody: Sized {
    const FORMAT: &'static str;

    fn write_lines(&self, out: &mut String);

    fn parse_lines(lines: &Lines<'_>) -> Result<Self>;
}

impl<T: TextBody> ArtifactBody for T {
    const FORMAT: &'static str = T::FORMAT;

    fn write_body(&self, _: &ArtifactHeader, out: &mut Vec<u8>) {
        let mut s = String::new();
        self.write_lines(&mut s);
        out.extend_from_slice(s.as_bytes());
    }

    fn parse_body(_: &ArtifactHeader, path: &Path, body: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(body).map_err(|e| Error::parse(path, 2, format!("invalid UTF-8: {e}")))?;
        T::parse_lines(&Lines::new(path, text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact<B> {
    pub header: ArtifactHeader,
    pub body: B,
}

impl<B: ArtifactBody> Artifact<B> {
    pub fn new(corpus_id: impl Into<String>, body: B) -> Self {
        Self {
            header: ArtifactHeader::new::<B>(corpus_id),
            body,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_line().into_bytes();
        out.push(b'\n');
        self.body.write_body(&self.header, &mut out);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, 1, "missing artifact header"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(path, 1, "header is not UTF-8"))?;
        let header: ArtifactHeader =
            serde_json::from_str(line).map_err(|e| Error::parse(path, 1, format!("missing or invalid header: {e}")))?;
        if header.format_name != B::FORMAT {
            return Err(Error::parse(
                path,
                1,
                format!("expected format `{}`, found `{}`", B::FORMAT, header.format_name),
            ));
        }
        if header.format_version != B::VERSION {
            return Err(Error::parse(
                path,
                1,
                format!(
                    "unsupported {} version {} (this build reads version {})",
                    B::FORMAT,
                    header.format_version,
                    B::VERSION
                ),
            ));
        }
        let body = B::parse_body(&header, path, &bytes[nl + 1..])?;
        Ok(Self { header, body })
    }
}

pub fn parse_artifact<B: ArtifactBody>(path: impl AsRef<Path>) -> Result<Artifact<B>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Artifact::from_bytes(path, &bytes)
}

pub fn write_artifact<B: ArtifactBody>(artifact: &Artifact<B>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, artifact.to_bytes()).map_err(|e| Error::io(path, e))
}

fn unit_range(lines: &Lines<'_>, n: usize, name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(lines.err(n, format!("{name} {v} is outside [0, 1]")))
    }
}

fn unique(lines: &Lines<'_>, seen: &mut HashSet<String>, n: usize, key: impl Into<String>) -> Result<()> {
    let key = key.into();
    if seen.insert(key.clone()) {
        Ok(())
    } else {
        Err(lines.err(n, format!("duplicate key `{key}`")))
    }
}

// ---------------------------------------------------------------------------
// Score table

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRow {
    pub prompt_id: String,
    pub video_id: String,
    pub s_subj_raw: f64,
    pub s_subj_norm: f64,
    pub s_mech: f64,
    pub s_phy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl TextBody for ScoreTable {
    const FORMAT: &'static str = "score_table";

    fn write_lines(&self, out: &mut String) {
        for r in &self.rows {
            let line = Record::new()
                .str("prompt_id", &r.prompt_id)
                .str("video_id", &r.video_id)
                .num("s_subj_raw", r.s_subj_raw)
                .num("s_subj_norm", r.s_subj_norm)
                .num("s_mech", r.s_mech)
                .num("s_phy", r.s_phy)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for (n, r) in lines.records::<ScoreRow>()? {
            unique(lines, &mut seen, n, format!("{}/{}", r.prompt_id, r.video_id))?;
            if !(-1.0..=1.0).contains(&r.s_subj_raw) {
                return Err(lines.err(n, format!("s_subj_raw {} is outside [-1, 1]", r.s_subj_raw)));
            }
            unit_range(lines, n, "s_subj_norm", r.s_subj_norm)?;
            unit_range(lines, n, "s_phy", r.s_phy)?;
            if MechanicsScore::from_value(r.s_mech).is_none() {
                return Err(lines.err(n, format!("s_mech {} is not one of 0, 0.5, 1", r.s_mech)));
            }
            rows.push(r);
        }
        Ok(Self { rows })
    }
}

// ---------------------------------------------------------------------------
// Preference dataset

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceTable {
    pub pairs: Vec<PreferencePair>,
}

impl TextBody for PreferenceTable {
    const FORMAT: &'static str = "preference_dataset";

    fn write_lines(&self, out: &mut String) {
        for p in &self.pairs {
            let line = Record::new()
                .str("prompt_id", &p.prompt_id)
                .str("win_video_id", &p.win_video_id)
                .str("lose_video_id", &p.lose_video_id)
                .num("s_win", p.s_win)
                .num("s_lose", p.s_lose)
                .num("delta", p.delta)
                .num("weight", p.weight)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut pairs = Vec::new();
        for (n, p) in lines.records::<PreferencePair>()? {
            unique(lines, &mut seen, n, p.prompt_id.clone())?;
            unit_range(lines, n, "s_win", p.s_win)?;
            unit_range(lines, n, "s_lose", p.s_lose)?;
            if p.s_win < p.s_lose {
                return Err(lines.err(n, "s_win is below s_lose"));
            }
            if p.win_video_id == p.lose_video_id {
                return Err(lines.err(n, "win and lose video are the same"));
            }
            if (p.delta - (p.s_win - p.s_lose)).abs() > 1e-8 {
                return Err(lines.err(n, format!("delta {} does not equal s_win - s_lose", p.delta)));
            }
            if !(p.weight >= 0.0 && p.weight.is_finite()) {
                return Err(lines.err(n, format!("weight {} must be finite and >= 0", p.weight)));
            }
            pairs.push(p);
        }
        Ok(Self { pairs })
    }
}

// ---------------------------------------------------------------------------
// Verdict cache, question fixtures, prompt lists, video manifests

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerdictTable {
    pub records: Vec<VerdictRecord>,
}

impl TextBody for VerdictTable {
    const FORMAT: &'static str = "verdict_cache";

    fn write_lines(&self, out: &mut String) {
        for v in &self.records {
            out.push_str(&verdict_line(v));
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (n, r) in lines.records::<VerdictRecord>()? {
            unique(lines, &mut seen, n, format!("{}/{}", r.video_id, r.question_id))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

fn verdict_line(v: &VerdictRecord) -> String {
    Record::new()
        .str("video_id", &v.video_id)
        .str("question_id", &v.question_id)
        .str("question_text", &v.question_text)
        .str("answer_text", &v.answer_text)
        .bool("correct", v.correct)
        .finish()
}

/// Appends verdicts to an existing cache file, refusing keys that are
/// already cached.
pub fn append_verdicts(path: impl AsRef<Path>, records: &[VerdictRecord]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let existing = parse_artifact::<VerdictTable>(path)?;
    let mut seen: HashSet<(String, String)> = existing
        .body
        .records
        .iter()
        .map(|r| (r.video_id.clone(), r.question_id.clone()))
        .collect();
    let mut text = String::new();
    for r in records {
        if !seen.insert((r.video_id.clone(), r.question_id.clone())) {
            return Err(Error::Duplicate(format!("{}/{}", r.video_id, r.question_id)));
        }
        text.push_str(&verdict_line(r));
        text.push('\n');
    }
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuestionTable {
    pub questions: Vec<QuestionRecord>,
}

impl TextBody for QuestionTable {
    const FORMAT: &'static str = "questions";

    fn write_lines(&self, out: &mut String) {
        for q in &self.questions {
            let line = Record::new()
                .str("question_id", &q.question_id)
                .str("prompt_id", &q.prompt_id)
                .str("text", &q.text)
                .int("difficulty", u64::from(q.difficulty))
                .str("domain_tag", &q.domain_tag)
                .num("relevance", q.relevance)
                .int("level", u64::from(q.level))
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut questions = Vec::new();
        for (n, q) in lines.records::<QuestionRecord>()? {
            unique(lines, &mut seen, n, q.question_id.clone())?;
            unit_range(lines, n, "relevance", q.relevance)?;
            if !(1..=2).contains(&q.level) {
                return Err(lines.err(n, format!("level {} must be 1 or 2", q.level)));
            }
            if q.difficulty < 1 {
                return Err(lines.err(n, "difficulty must be at least 1"));
            }
            questions.push(q);
        }
        Ok(Self { questions })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptList {
    pub prompts: Vec<PromptRecord>,
}

impl TextBody for PromptList {
    const FORMAT: &'static str = "prompts";

    fn write_lines(&self, out: &mut String) {
        for p in &self.prompts {
            let category = serde_json::to_value(p.category).expect("category serializes");
            let line = Record::new()
                .str("prompt_id", &p.prompt_id)
                .str("text", &p.text)
                .str("category", category.as_str().expect("category is a string"))
                .str("source", &p.source)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut prompts = Vec::new();
        for (n, p) in lines.records::<PromptRecord>()? {
            unique(lines, &mut seen, n, p.prompt_id.clone())?;
            prompts.push(p);
        }
        Ok(Self { prompts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub prompt_id: String,
    pub video_id: String,
    pub video_ref: String,
}

/// Which prompt each video was generated for, and where the video lives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoManifest {
    pub videos: Vec<VideoEntry>,
}

impl TextBody for VideoManifest {
    const FORMAT: &'static str = "videos";

    fn write_lines(&self, out: &mut String) {
        for v in &self.videos {
            let line = Record::new()
                .str("prompt_id", &v.prompt_id)
                .str("video_id", &v.video_id)
                .str("video_ref", &v.video_ref)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut videos = Vec::new();
        for (n, v) in lines.records::<VideoEntry>()? {
            unique(lines, &mut seen, n, v.video_id.clone())?;
            videos.push(v);
        }
        Ok(Self { videos })
    }
}

// ---------------------------------------------------------------------------
// Reward-model training inputs and outputs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRow {
    pub prompt_id: String,
    pub video_id: String,
    pub s_subj_raw: f64,
    pub s_mech: f64,
    pub human_score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationTable {
    pub rows: Vec<AnnotationRow>,
}

impl TextBody for AnnotationTable {
    const FORMAT: &'static str = "annotations";

    fn write_lines(&self, out: &mut String) {
        for r in &self.rows {
            let line = Record::new()
                .str("prompt_id", &r.prompt_id)
                .str("video_id", &r.video_id)
                .num("s_subj_raw", r.s_subj_raw)
                .num("s_mech", r.s_mech)
                .num("human_score", r.human_score)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for (n, r) in lines.records::<AnnotationRow>()? {
            unique(lines, &mut seen, n, format!("{}/{}", r.prompt_id, r.video_id))?;
            if !(-1.0..=1.0).contains(&r.s_subj_raw) {
                return Err(lines.err(n, format!("s_subj_raw {} is outside [-1, 1]", r.s_subj_raw)));
            }
            if MechanicsScore::from_value(r.s_mech).is_none() {
                return Err(lines.err(n, format!("s_mech {} is not one of 0, 0.5, 1", r.s_mech)));
            }
            unit_range(lines, n, "human_score", r.human_score)?;
            rows.push(r);
        }
        Ok(Self { rows })
    }
}

/// Subject statistics as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsFile(pub SubjectStats);

impl TextBody for StatsFile {
    const FORMAT: &'static str = "subject_stats";

    fn write_lines(&self, out: &mut String) {
        let s = &self.0;
        let _ = writeln!(out, "corpus_id={}", s.corpus_id);
        let _ = writeln!(out, "mu={}", format_float(s.mu));
        let _ = writeln!(out, "sigma={}", format_float(s.sigma));
        let _ = writeln!(out, "std_convention={STD_CONVENTION}");
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let v = lines.key_values(&["corpus_id", "mu", "sigma", "std_convention"])?;
        let num = |i: usize| {
            v[i].parse::<f64>()
                .map_err(|e| lines.err(i + 2, format!("invalid number `{}`: {e}", v[i])))
        };
        if v[3] != STD_CONVENTION {
            return Err(lines.err(5, format!("unsupported std_convention `{}`", v[3])));
        }
        let stats = SubjectStats::new(v[0].clone(), num(1)?, num(2)?).map_err(|e| lines.err(4, e.to_string()))?;
        Ok(Self(stats))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixerFile {
    pub lambda: f64,
    pub subject_weight: f64,
    pub huber_delta: f64,
    pub final_loss: f64,
}

impl TextBody for MixerFile {
    const FORMAT: &'static str = "mixer_params";

    fn write_lines(&self, out: &mut String) {
        let _ = writeln!(out, "lambda={}", format_float(self.lambda));
        let _ = writeln!(out, "subject_weight={}", format_float(self.subject_weight));
        let _ = writeln!(out, "huber_delta={}", format_float(self.huber_delta));
        let _ = writeln!(out, "final_loss={}", format_float(self.final_loss));
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let v = lines.key_values(&["lambda", "subject_weight", "huber_delta", "final_loss"])?;
        let mut nums = [0.0; 4];
        for (i, s) in v.iter().enumerate() {
            nums[i] = s
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| lines.err(i + 2, format!("invalid number `{s}`")))?;
        }
        Ok(Self {
            lambda: nums[0],
            subject_weight: nums[1],
            huber_delta: nums[2],
            final_loss: nums[3],
        })
    }
}

// ---------------------------------------------------------------------------
// Training traces, latent qualities, policies, histogram reports

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    step: usize,
    loss: f64,
}

impl TextBody for LossTrace {
    const FORMAT: &'static str = "loss_trace";

    fn write_lines(&self, out: &mut String) {
        for (step, &loss) in self.losses.iter().enumerate() {
            out.push_str(&Record::new().int("step", step as u64).num("loss", loss).finish());
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut losses = Vec::new();
        for (n, t) in lines.records::<TraceLine>()? {
            if t.step != losses.len() {
                return Err(lines.err(n, format!("expected step {}, found {}", losses.len(), t.step)));
            }
            losses.push(t.loss);
        }
        Ok(Self { losses })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentRow {
    pub prompt_id: String,
    pub video_id: String,
    pub latent_quality: f64,
}

/// Ground-truth quality of synthetic videos, used to judge a trained policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentTable {
    pub rows: Vec<LatentRow>,
}

impl TextBody for LatentTable {
    const FORMAT: &'static str = "latent_quality";

    fn write_lines(&self, out: &mut String) {
        for r in &self.rows {
            let line = Record::new()
                .str("prompt_id", &r.prompt_id)
                .str("video_id", &r.video_id)
                .num("latent_quality", r.latent_quality)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for (n, r) in lines.records::<LatentRow>()? {
            unique(lines, &mut seen, n, format!("{}/{}", r.prompt_id, r.video_id))?;
            if !r.latent_quality.is_finite() {
                return Err(lines.err(n, "latent quality must be finite"));
            }
            rows.push(r);
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRow {
    pub prompt_id: String,
    pub items: Vec<String>,
    pub logits: Vec<f64>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyFile {
    pub rows: Vec<PolicyRow>,
}

impl PolicyFile {
    pub fn from_policy(policy: &crate::phydpo::ToyPolicy) -> Self {
        let rows = (0..policy.rows())
            .map(|r| PolicyRow {
                prompt_id: policy.prompts()[r].clone(),
                items: policy.items(r).to_vec(),
                logits: policy.row_logits(r).to_vec(),
                reference: policy.reference_row(r).to_vec(),
            })
            .collect();
        Self { rows }
    }

    pub fn to_policy(&self) -> Result<crate::phydpo::ToyPolicy> {
        let prompts = self.rows.iter().map(|r| r.prompt_id.clone()).collect();
        let items = self.rows.iter().map(|r| r.items.clone()).collect();
        let logits = self.rows.iter().flat_map(|r| r.logits.iter().copied()).collect();
        let reference = self.rows.iter().flat_map(|r| r.reference.iter().copied()).collect();
        crate::phydpo::ToyPolicy::with_reference(prompts, items, logits, reference)
    }
}

impl TextBody for PolicyFile {
    const FORMAT: &'static str = "toy_policy";

    fn write_lines(&self, out: &mut String) {
        for r in &self.rows {
            let line = Record::new()
                .str("prompt_id", &r.prompt_id)
                .strs("items", &r.items)
                .nums("logits", &r.logits)
                .nums("reference", &r.reference)
                .finish();
            out.push_str(&line);
            out.push('\n');
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, r) in lines.records::<PolicyRow>()? {
            if r.items.len() != r.logits.len() || r.items.len() != r.reference.len() {
                return Err(lines.err(n, "items, logits and reference differ in length"));
            }
            rows.push(r);
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBinRow {
    pub bin_start: f64,
    pub count: u64,
    pub density: f64,
}

/// Tab-separated table of the non-empty histogram bins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistogramReport {
    pub bins: Vec<HistogramBinRow>,
}

const HISTOGRAM_COLUMNS: &str = "bin_start\tcount\tdensity";

impl HistogramReport {
    pub fn from_histogram(hist: &crate::phydpo::ScoreHistogram) -> Self {
        Self {
            bins: hist
                .nonempty_bins()
                .map(|b| HistogramBinRow {
                    bin_start: b.start,
                    count: b.count,
                    density: b.density,
                })
                .collect(),
        }
    }
}

impl TextBody for HistogramReport {
    const FORMAT: &'static str = "histogram_report";

    fn write_lines(&self, out: &mut String) {
        out.push_str(HISTOGRAM_COLUMNS);
        out.push('\n');
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                format_float(b.bin_start),
                b.count,
                format_float(b.density)
            );
        }
    }

    fn parse_lines(lines: &Lines<'_>) -> Result<Self> {
        let mut it = lines.iter();
        match it.next() {
            Some((_, l)) if l == HISTOGRAM_COLUMNS => {}
            other => return Err(lines.err(other.map_or(2, |o| o.0), "missing column header")),
        }
        let mut bins = Vec::new();
        for (n, l) in it {
            let cols: Vec<&str> = l.split('\t').collect();
            let parsed = match cols.as_slice() {
                [a, b, c] => a
                    .parse::<f64>()
                    .ok()
                    .zip(b.parse::<u64>().ok())
                    .zip(c.parse::<f64>().ok()),
                _ => None,
            };
            let ((bin_start, count), density) = parsed.ok_or_else(|| lines.err(n, "expected 3 numeric columns"))?;
            bins.push(HistogramBinRow {
                bin_start,
                count,
                density,
            });
        }
        Ok(Self { bins })
    }
}

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingEncoding {
    /// Little-endian `f32` records.
    Binary,
    /// One JSON object per video.
    Text,
}

impl EmbeddingEncoding {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingEncoding::Binary => "f32le",
            EmbeddingEncoding::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub encoding: EmbeddingEncoding,
    pub sequences: Vec<EmbeddingSequence>,
}

impl EmbeddingSet {
    pub fn artifact(corpus_id: impl Into<String>, encoding: EmbeddingEncoding, sequences: Vec<EmbeddingSequence>) -> Artifact<Self> {
        let mut a = Artifact::new(corpus_id, Self { encoding, sequences });
        a.header.meta.insert("encoding".into(), encoding.name().into());
        a
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingLine {
    video_id: String,
    frames: Vec<Vec<f32>>,
}

fn read_u32(body: &[u8], pos: &mut usize, path: &Path, record: usize) -> Result<u32> {
    let bytes = body
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::parse(path, record, format!("truncated record at byte offset {}", *pos)))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

impl ArtifactBody for EmbeddingSet {
    const FORMAT: &'static str = "embeddings";

    fn write_body(&self, _: &ArtifactHeader, out: &mut Vec<u8>) {
        match self.encoding {
            EmbeddingEncoding::Binary => {
                for s in &self.sequences {
                    let id = s.video_id().as_bytes();
                    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
                    out.extend_from_slice(id);
                    out.extend_from_slice(&(s.frame_count() as u32).to_le_bytes());
                    out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
                    for v in s.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            EmbeddingEncoding::Text => {
                for s in &self.sequences {
                    let frames: Vec<String> = s
                        .frames()
                        .map(|f| {
                            let vals: Vec<String> = f.iter().map(|&v| format_float(f64::from(v))).collect();
                            format!("[{}]", vals.join(","))
                        })
                        .collect();
                    let line = Record::new()
                        .str("video_id", s.video_id())
                        .raw("frames", &format!("[{}]", frames.join(",")))
                        .finish();
                    out.extend_from_slice(line.as_bytes());
                    out.push(b'\n');
                }
            }
        }
    }

    /// For the binary encoding, error "lines" are 1-based record indices
    /// after the header.
    fn parse_body(header: &ArtifactHeader, path: &Path, body: &[u8]) -> Result<Self> {
        let encoding = match header.meta.get("encoding").map(String::as_str) {
            Some("f32le") => EmbeddingEncoding::Binary,
            Some("text") => EmbeddingEncoding::Text,
            other => return Err(Error::parse(path, 1, format!("unknown embedding encoding {other:?}"))),
        };
        let mut seen = HashSet::new();
        let mut sequences = Vec::new();
        match encoding {
            EmbeddingEncoding::Binary => {
                let mut pos = 0;
                while pos < body.len() {
                    let rec = sequences.len() + 1;
                    let id_len = read_u32(body, &mut pos, path, rec)? as usize;
                    let id = body
                        .get(pos..pos + id_len)
                        .ok_or_else(|| Error::parse(path, rec, "truncated video id"))?;
                    let id = std::str::from_utf8(id)
                        .map_err(|_| Error::parse(path, rec, "video id is not UTF-8"))?
                        .to_string();
                    pos += id_len;
                    let frames = read_u32(body, &mut pos, path, rec)? as usize;
                    let dim = read_u32(body, &mut pos, path, rec)? as usize;
                    let n = frames * dim * 4;
                    let raw = body
                        .get(pos..pos + n)
                        .ok_or_else(|| Error::parse(path, rec, format!("truncated frames for `{id}`")))?;
                    pos += n;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    if !seen.insert(id.clone()) {
                        return Err(Error::parse(path, rec, format!("duplicate video `{id}`")));
                    }
                    let seq = EmbeddingSequence::new(id, frames, dim, data).map_err(|e| Error::parse(path, rec, e.to_string()))?;
                    sequences.push(seq);
                }
            }
            EmbeddingEncoding::Text => {
                let text = std::str::from_utf8(body).map_err(|e| Error::parse(path, 2, format!("invalid UTF-8: {e}")))?;
                let lines = Lines::new(path, text)?;
                for (n, l) in lines.records::<EmbeddingLine>()? {
                    if !seen.insert(l.video_id.clone()) {
                        return Err(lines.err(n, format!("duplicate video `{}`", l.video_id)));
                    }
                    let seq = EmbeddingSequence::from_rows(l.video_id, &l.frames).map_err(|e| lines.err(n, e.to_string()))?;
                    sequences.push(seq);
                }
            }
        }
        Ok(Self { encoding, sequences })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(-0.0), "0");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.65), "0.65");
        assert_eq!(format_float(0.1 + 0.2), "0.3");
        assert_eq!(format_float(std::f64::consts::PI), "3.14159265");
        assert_eq!(format_float(-2.5e-7), "-2.5e-7");
        assert_eq!(format_float(1.25e12), "1.25e12");
        assert_eq!(format_float(123456789.4), "123456789");
        assert_eq!(format_float(9.9999999999), "10");
        assert_eq!(format_float(0.000123456789), "0.000123456789");
    }

    fn table() -> Artifact<ScoreTable> {
        Artifact::new(
            "fixture",
            ScoreTable {
                rows: vec![ScoreRow {
                    prompt_id: "p0".into(),
                    video_id: "p0_v0".into(),
                    s_subj_raw: 0.93,
                    s_subj_norm: 0.71,
                    s_mech: 0.5,
                    s_phy: 0.605,
                }],
            },
        )
    }

    #[test]
    fn one_row_table_is_header_plus_record() {
        let bytes = table().to_bytes();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        assert!(text.starts_with("{\"format\":\"score_table\",\"version\":1,"));
    }

    #[test]
    fn header_errors() {
        let p = Path::new("t");
        let ok = table().to_bytes();
        let text = String::from_utf8(ok).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        let err = Artifact::<ScoreTable>::from_bytes(p, bumped.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("unsupported"), "{err}");
        let headless = text.lines().nth(1).unwrap().to_string() + "\n";
        assert!(matches!(
            Artifact::<ScoreTable>::from_bytes(p, headless.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(Artifact::<PreferenceTable>::from_bytes(p, text.as_bytes()).is_err());
    }

    #[test]
    fn range_violation_names_line() {
        let text = String::from_utf8(table().to_bytes()).unwrap().replace("\"s_phy\":0.605", "\"s_phy\":1.3");
        match Artifact::<ScoreTable>::from_bytes(Path::new("t"), text.as_bytes()) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("s_phy"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut a = table();
        a.body.rows.push(a.body.rows[0].clone());
        assert!(matches!(
            Artifact::<ScoreTable>::from_bytes(Path::new("t"), &a.to_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn embeddings_both_encodings() {
        let seqs = vec![
            EmbeddingSequence::from_rows("a", &[vec![1.0, 0.25], vec![0.5, -1.5e-3]]).unwrap(),
            EmbeddingSequence::from_rows("b", &[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.7, 0.1]]).unwrap(),
        ];
        for enc in [EmbeddingEncoding::Binary, EmbeddingEncoding::Text] {
            let a = EmbeddingSet::artifact("c", enc, seqs.clone());
            let bytes = a.to_bytes();
            let back = Artifact::<EmbeddingSet>::from_bytes(Path::new("e"), &bytes).unwrap();
            assert_eq!(back.body.sequences, seqs);
            assert_eq!(back.to_bytes(), bytes);
        }
        let mut bytes = EmbeddingSet::artifact("c", EmbeddingEncoding::Binary, seqs).to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Artifact::<EmbeddingSet>::from_bytes(Path::new("e"), &bytes).is_err());
    }

    #[test]
    fn zero_frame_rejected_at_ingestion() {
        let text = "{\"format\":\"embeddings\",\"version\":1,\"created_by\":\"x\",\"corpus_id\":\"c\",\"meta\":{\"encoding\":\"text\"}}\n\
                    {\"video_id\":\"a\",\"frames\":[[1,0],[0,0]]}\n";
        let err = Artifact::<EmbeddingSet>::from_bytes(Path::new("e"), text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("zero norm"), "{err}");
    }

    #[test]
    fn stats_file_round_trip() {
        let a = Artifact::new("c", StatsFile(SubjectStats::new("corpus-a", 0.91, 0.034).unwrap()));
        let bytes = a.to_bytes();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("std_convention=population\n"));
        let back = Artifact::<StatsFile>::from_bytes(Path::new("s"), &bytes).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn verdict_append_refuses_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        let rec = |q: &str| VerdictRecord {
            video_id: "v".into(),
            question_id: q.into(),
            question_text: "does it fall?".into(),
            answer_text: "yes".into(),
            correct: true,
        };
        write_artifact(&Artifact::new("c", VerdictTable { records: vec![rec("q1")] }), &path).unwrap();
        append_verdicts(&path, &[rec("q2")]).unwrap();
        assert!(matches!(append_verdicts(&path, &[rec("q1")]), Err(Error::Duplicate(_))));
        let back = parse_artifact::<VerdictTable>(&path).unwrap();
        assert_eq!(back.body.records.len(), 2);
    }
}
