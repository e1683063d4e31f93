//! Two-stage mechanics verification.
//!
//! Each prompt carries a first-level and a second-level physics question. A
//! video scores 0 if it fails the first question, 0.5 if it passes the first
//! and fails the second, and 1 if it passes both. The second question is never
//! asked when the first one fails.
//!
//! Verdicts come from a [`VerdictBackend`]: either a read-only [`ReplayCache`]
//! or a [`LiveBackend`] that talks to an inference endpoint.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MECHANICS_DOMAIN: &str = "mechanics";
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsQuestion {
    pub question_id: String,
    pub text: String,
    pub difficulty: u32,
    pub domain_tag: String,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionPair {
    pub prompt_id: String,
    pub q1: PhysicsQuestion,
    pub q2: PhysicsQuestion,
}

/// One line of a question fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub question_id: String,
    pub prompt_id: String,
    pub text: String,
    pub difficulty: u32,
    pub domain_tag: String,
    pub relevance: f64,
    /// 1 for the first-level question, 2 for the second.
    pub level: u8,
}

impl QuestionRecord {
    pub fn question(&self) -> PhysicsQuestion {
        PhysicsQuestion {
            question_id: self.question_id.clone(),
            text: self.text.clone(),
            difficulty: self.difficulty,
            domain_tag: self.domain_tag.clone(),
            relevance: self.relevance,
        }
    }
}

/// Assembles one question pair per prompt, in first-appearance order. Each
/// prompt needs exactly one level-1 and one level-2 question.
pub fn question_pairs(records: &[QuestionRecord]) -> Result<Vec<QuestionPair>> {
    let mut order: Vec<&str> = Vec::new();
    let mut slots: HashMap<&str, [Option<&QuestionRecord>; 2]> = HashMap::new();
    for r in records {
        let slot = slots.entry(&r.prompt_id).or_insert_with(|| {
            order.push(&r.prompt_id);
            [None, None]
        });
        let level = match r.level {
            1 | 2 => usize::from(r.level - 1),
            other => {
                return Err(Error::Range(format!(
                    "question `{}` has level {other}, expected 1 or 2",
                    r.question_id
                )))
            }
        };
        if slot[level].replace(r).is_some() {
            return Err(Error::Duplicate(format!("level-{} question for prompt `{}`", r.level, r.prompt_id)));
        }
    }
    order
        .into_iter()
        .map(|p| match slots[p] {
            [Some(q1), Some(q2)] => Ok(QuestionPair {
                prompt_id: p.to_string(),
                q1: q1.question(),
                q2: q2.question(),
            }),
            _ => Err(Error::Group(format!("prompt `{p}` needs one level-1 and one level-2 question"))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub tau: f64,
}

impl ConstraintConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("relevance threshold tau={tau} must lie in [0, 1)")));
        }
        Ok(Self { tau })
    }
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

/// First constraint a question pair violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    EmptyText,
    Difficulty,
    Domain,
    Relevance,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::EmptyText => "empty question text",
            Rejection::Difficulty => "difficulty",
            Rejection::Domain => "domain",
            Rejection::Relevance => "relevance",
        })
    }
}

/// Checks the generation constraints in the fixed order difficulty, domain,
/// relevance.
pub fn validate_question_pair(pair: &QuestionPair, cfg: &ConstraintConfig) -> Result<(), Rejection> {
    let (q1, q2) = (&pair.q1, &pair.q2);
    if q1.text.trim().is_empty() || q2.text.trim().is_empty() {
        return Err(Rejection::EmptyText);
    }
    if q1.difficulty >= q2.difficulty {
        return Err(Rejection::Difficulty);
    }
    if q1.domain_tag != MECHANICS_DOMAIN || q2.domain_tag != MECHANICS_DOMAIN {
        return Err(Rejection::Domain);
    }
    if !(q1.relevance > cfg.tau && q2.relevance > cfg.tau) {
        return Err(Rejection::Relevance);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanicsVerdict {
    pub video_id: String,
    pub question_id: String,
    pub answer_text: String,
    pub correct: bool,
    pub source: VerdictSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanicsScore {
    value: f64,
    stage_reached: u8,
}

impl MechanicsScore {
    pub const FIRST_LEVEL_FAILURE: Self = Self {
        value: 0.0,
        stage_reached: 1,
    };
    pub const PARTIAL: Self = Self {
        value: 0.5,
        stage_reached: 2,
    };
    pub const FULL: Self = Self {
        value: 1.0,
        stage_reached: 2,
    };

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn stage_reached(&self) -> u8 {
        self.stage_reached
    }

    /// Recovers the score from a stored value; only `0`, `0.5` and `1` exist.
    pub fn from_value(value: f64) -> Option<Self> {
        [Self::FIRST_LEVEL_FAILURE, Self::PARTIAL, Self::FULL]
            .into_iter()
            .find(|s| s.value == value)
    }
}

pub fn score_mechanics(v1: &MechanicsVerdict, v2: Option<&MechanicsVerdict>) -> Result<MechanicsScore> {
    match (v1.correct, v2) {
        (false, None) => Ok(MechanicsScore::FIRST_LEVEL_FAILURE),
        (true, Some(v2)) if v2.correct => Ok(MechanicsScore::FULL),
        (true, Some(_)) => Ok(MechanicsScore::PARTIAL),
        (false, Some(_)) => Err(Error::Contract(format!(
            "video `{}`: second-level verdict supplied after first-level failure",
            v1.video_id
        ))),
        (true, None) => Err(Error::Contract(format!(
            "video `{}`: first level passed but second-level verdict is missing",
            v1.video_id
        ))),
    }
}

/// A video as seen by a verdict backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub video_id: String,
    /// Path or URI handed to a live endpoint.
    pub uri: String,
}

pub trait VerdictBackend: Sync {
    fn acquire(&self, video: &VideoRef, question: &PhysicsQuestion) -> Result<MechanicsVerdict>;
}

impl<B: VerdictBackend + ?Sized> VerdictBackend for &B {
    fn acquire(&self, video: &VideoRef, question: &PhysicsQuestion) -> Result<MechanicsVerdict> {
        (**self).acquire(video, question)
    }
}

pub fn acquire_verdict(
    video: &VideoRef,
    question: &PhysicsQuestion,
    backend: &dyn VerdictBackend,
) -> Result<MechanicsVerdict> {
    backend.acquire(video, question)
}

/// Asks the first-level question and, only when it is answered correctly, the
/// second-level one.
pub fn run_mechanics_pipeline(
    video: &VideoRef,
    pair: &QuestionPair,
    backend: &dyn VerdictBackend,
) -> Result<MechanicsScore> {
    let v1 = acquire_verdict(video, &pair.q1, backend)?;
    if !v1.correct {
        return score_mechanics(&v1, None);
    }
    let v2 = acquire_verdict(video, &pair.q2, backend)?;
    score_mechanics(&v1, Some(&v2))
}

/// One line of a verdict cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub video_id: String,
    pub question_id: String,
    pub question_text: String,
    pub answer_text: String,
    pub correct: bool,
}

/// Read-only verdict store keyed by `(video_id, question_id)`.
#[derive(Debug, Clone, Default)]
pub struct ReplayCache {
    entries: HashMap<(String, String), VerdictRecord>,
    order: Vec<(String, String)>,
}

impl ReplayCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = VerdictRecord>) -> Result<Self> {
        let mut cache = Self::new();
        for r in records {
            cache.insert(r)?;
        }
        Ok(cache)
    }

    /// Adds a verdict. Cached verdicts are never overwritten.
    pub fn insert(&mut self, record: VerdictRecord) -> Result<()> {
        let key = (record.video_id.clone(), record.question_id.clone());
        if self.entries.contains_key(&key) {
            return Err(Error::Duplicate(format!("{}/{}", key.0, key.1)));
        }
        self.order.push(key.clone());
        self.entries.insert(key, record);
        Ok(())
    }

    pub fn get(&self, video_id: &str, question_id: &str) -> Option<&VerdictRecord> {
        self.entries.get(&(video_id.to_string(), question_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records in insertion order.
    pub fn records(&self) -> impl Iterator<Item = &VerdictRecord> + '_ {
        self.order.iter().map(move |k| &self.entries[k])
    }
}

impl VerdictBackend for ReplayCache {
    fn acquire(&self, video: &VideoRef, question: &PhysicsQuestion) -> Result<MechanicsVerdict> {
        let rec = self
            .get(&video.video_id, &question.question_id)
            .ok_or_else(|| Error::MissingVerdict {
                video_id: video.video_id.clone(),
                question_id: question.question_id.clone(),
            })?;
        Ok(MechanicsVerdict {
            video_id: rec.video_id.clone(),
            question_id: rec.question_id.clone(),
            answer_text: rec.answer_text.clone(),
            correct: rec.correct,
            source: VerdictSource::Replay,
        })
    }
}

#[derive(Debug, Serialize)]
struct LiveRequest<'a> {
    video_ref: &'a str,
    question_text: &'a str,
}

#[derive(Debug, Deserialize)]
struct LiveResponse {
    answer_text: String,
    correct: bool,
}

/// Verdict endpoint speaking one JSON object per line over TCP.
///
/// A request is `{"video_ref": ..., "question_text": ...}` and the reply is
/// `{"answer_text": ..., "correct": true|false}`. Connection failures,
/// timeouts and malformed replies are retried with exponential backoff.
#[derive(Debug, Clone)]
pub struct LiveBackend {
    pub addr: String,
    pub timeout: Duration,
    pub attempts: u32,
    pub backoff: Duration,
}

impl LiveBackend {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    fn exchange(&self, request: &[u8]) -> std::result::Result<LiveResponse, String> {
        let addr = self
            .addr
            .to_socket_addrs()
            .map_err(|e| format!("cannot resolve {}: {e}", self.addr))?
            .next()
            .ok_or_else(|| format!("no address for {}", self.addr))?;
        let mut stream =
            TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| format!("connect to {addr}: {e}"))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(|e| e.to_string())?;
        stream.set_write_timeout(Some(self.timeout)).map_err(|e| e.to_string())?;
        stream.write_all(request).map_err(|e| format!("send: {e}"))?;
        let mut line = String::new();
        BufReader::new(stream)
            .read_line(&mut line)
            .map_err(|e| format!("receive: {e}"))?;
        serde_json::from_str(line.trim()).map_err(|e| format!("malformed response: {e}"))
    }
}

impl VerdictBackend for LiveBackend {
    fn acquire(&self, video: &VideoRef, question: &PhysicsQuestion) -> Result<MechanicsVerdict> {
        let mut request = serde_json::to_vec(&LiveRequest {
            video_ref: &video.uri,
            question_text: &question.text,
        })
        .expect("request serializes");
        request.push(b'\n');

        let attempts = self.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.exchange(&request) {
                Ok(resp) => {
                    return Ok(MechanicsVerdict {
                        video_id: video.video_id.clone(),
                        question_id: question.question_id.clone(),
                        answer_text: resp.answer_text,
                        correct: resp.correct,
                        source: VerdictSource::Live,
                    })
                }
                Err(e) => {
                    log::debug!("verdict attempt {} for {} failed: {e}", attempt + 1, video.video_id);
                    last = e;
                }
            }
        }
        Err(Error::Backend {
            attempts,
            reason: last,
        })
    }
}
