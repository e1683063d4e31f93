//! Seeded synthetic inputs for tests, demos and the acceptance suite.
//!
//! Every video gets a latent quality in `[0, 1]`. Quality drives both scoring
//! channels: frame embeddings drift less for better videos, and the
//! probability of answering each mechanics question correctly grows with it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::curation::{PromptCategory, PromptRecord};
use crate::error::Result;
use crate::io::{
    write_artifact, AnnotationRow, AnnotationTable, Artifact, EmbeddingEncoding, EmbeddingSet, LatentRow,
    LatentTable, PromptList, QuestionTable, ScoreRow, ScoreTable, VerdictTable, VideoEntry, VideoManifest,
};
use crate::mechanics::{QuestionRecord, VerdictRecord, MECHANICS_DOMAIN};
use crate::score::{fit_subject_stats, normalize_subject, sigmoid, subject_consistency, EmbeddingSequence};

#[derive(Debug, Clone)]
pub struct PipelineFixtureSpec {
    pub prompts: usize,
    pub videos_per_prompt: usize,
    pub frames: usize,
    pub dim: usize,
    /// Prompts whose videos are exact copies of each other.
    pub degenerate_prompts: usize,
    pub encoding: EmbeddingEncoding,
    pub seed: u64,
}

impl Default for PipelineFixtureSpec {
    fn default() -> Self {
        Self {
            prompts: 108,
            videos_per_prompt: 4,
            frames: 8,
            dim: 16,
            degenerate_prompts: 0,
            encoding: EmbeddingEncoding::Binary,
            seed: 7,
        }
    }
}

/// In-memory contents of a pipeline fixture.
#[derive(Debug, Clone)]
pub struct PipelineFixture {
    pub prompts: PromptList,
    pub videos: VideoManifest,
    pub embeddings: EmbeddingSet,
    pub questions: QuestionTable,
    pub verdicts: VerdictTable,
    pub latent: LatentTable,
    /// Prompt ids of the degenerate groups.
    pub degenerate: Vec<String>,
}

pub const FIXTURE_CORPUS: &str = "synthetic";

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn frames_for(rng: &mut ChaCha8Rng, frames: usize, dim: usize, quality: f64) -> Vec<Vec<f32>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let base = unit_vector(rng, dim);
    let drift = 0.05 + 0.6 * (1.0 - quality);
    let mut current = base.clone();
    (0..frames)
        .map(|_| {
            let row: Vec<f32> = current.iter().map(|&x| x as f32).collect();
            for (c, b) in current.iter_mut().zip(&base) {
                *c = 0.5 * *c + 0.5 * b + drift * normal.sample(rng) / (dim as f64).sqrt();
            }
            row
        })
        .collect()
}

pub fn pipeline_fixture(spec: &PipelineFixtureSpec) -> Result<PipelineFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = PipelineFixture {
        prompts: PromptList::default(),
        videos: VideoManifest::default(),
        embeddings: EmbeddingSet {
            encoding: spec.encoding,
            sequences: Vec::new(),
        },
        questions: QuestionTable::default(),
        verdicts: VerdictTable::default(),
        latent: LatentTable::default(),
        degenerate: Vec::new(),
    };
    // Degenerate prompts are spread evenly through the list.
    let stride = spec.prompts.checked_div(spec.degenerate_prompts).unwrap_or(usize::MAX);
    for p in 0..spec.prompts {
        let prompt_id = format!("p{p:03}");
        let challenging = p % 3 == 0;
        out.prompts.prompts.push(PromptRecord {
            prompt_id: prompt_id.clone(),
            text: format!("synthetic scene {p}"),
            category: if challenging {
                PromptCategory::PhysicsChallenging
            } else {
                PromptCategory::Neutral
            },
            source: FIXTURE_CORPUS.into(),
        });
        let (q1, q2) = (format!("{prompt_id}_q1"), format!("{prompt_id}_q2"));
        for (id, level, relevance) in [(&q1, 1u8, 0.85), (&q2, 2u8, 0.75)] {
            out.questions.questions.push(QuestionRecord {
                question_id: id.clone(),
                prompt_id: prompt_id.clone(),
                text: format!("level {level} mechanics question for scene {p}"),
                difficulty: u32::from(level),
                domain_tag: MECHANICS_DOMAIN.into(),
                relevance,
            level,
            });
        }

        let degenerate = stride != usize::MAX && p % stride == stride - 1 && out.degenerate.len() < spec.degenerate_prompts;
        if degenerate {
            out.degenerate.push(prompt_id.clone());
        }
        let shared_quality: f64 = rng.gen();
        let shared_frames = frames_for(&mut rng, spec.frames, spec.dim, shared_quality);
        for v in 0..spec.videos_per_prompt {
            let video_id = format!("{prompt_id}_v{v}");
            let (quality, frames, pass1, pass2) = if degenerate {
                (shared_quality, shared_frames.clone(), true, false)
            } else {
                let q: f64 = rng.gen();
                let frames = frames_for(&mut rng, spec.frames, spec.dim, q);
                let pass1 = rng.gen::<f64>() < 0.2 + 0.75 * q;
                let pass2 = rng.gen::<f64>() < q * q;
                (q, frames, pass1, pass2)
            };
            out.videos.videos.push(VideoEntry {
                prompt_id: prompt_id.clone(),
                video_id: video_id.clone(),
                video_ref: format!("videos/{video_id}.mp4"),
            });
            out.embeddings
                .sequences
                .push(EmbeddingSequence::from_rows(&video_id, &frames)?);
            out.latent.rows.push(LatentRow {
                prompt_id: prompt_id.clone(),
                video_id: video_id.clone(),
                latent_quality: quality,
            });
            let verdict = |qid: &str, correct: bool| VerdictRecord {
                video_id: video_id.clone(),
                question_id: qid.to_string(),
                question_text: String::new(),
                answer_text: if correct { "consistent" } else { "violated" }.into(),
                correct,
            };
            out.verdicts.records.push(verdict(&q1, pass1));
            // Only videos that pass the first level are ever asked the second.
            if pass1 {
                out.verdicts.records.push(verdict(&q2, pass2));
            }
        }
    }
    Ok(out)
}

/// File names used by [`write_pipeline_fixture`].
pub mod files {
    pub const PROMPTS: &str = "prompts.jsonl";
    pub const VIDEOS: &str = "videos.jsonl";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const QUESTIONS: &str = "questions.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const LATENT: &str = "latent.jsonl";
    pub const ANNOTATIONS: &str = "annotations.jsonl";
    pub const CONFIG: &str = "physcorr.toml";
}

/// Writes the fixture plus an annotation set and a ready-to-run config file
/// into `dir`.
pub fn write_pipeline_fixture(dir: &Path, spec: &PipelineFixtureSpec) -> Result<PipelineFixture> {
    let fx = pipeline_fixture(spec)?;
    write_artifact(&Artifact::new(FIXTURE_CORPUS, fx.prompts.clone()), dir.join(files::PROMPTS))?;
    write_artifact(&Artifact::new(FIXTURE_CORPUS, fx.videos.clone()), dir.join(files::VIDEOS))?;
    write_artifact(
        &EmbeddingSet::artifact(FIXTURE_CORPUS, fx.embeddings.encoding, fx.embeddings.sequences.clone()),
        dir.join(files::EMBEDDINGS),
    )?;
    write_artifact(&Artifact::new(FIXTURE_CORPUS, fx.questions.clone()), dir.join(files::QUESTIONS))?;
    write_artifact(&Artifact::new(FIXTURE_CORPUS, fx.verdicts.clone()), dir.join(files::VERDICTS))?;
    write_artifact(&Artifact::new(FIXTURE_CORPUS, fx.latent.clone()), dir.join(files::LATENT))?;
    write_artifact(
        &Artifact::new(FIXTURE_CORPUS, annotation_fixture(&fx, 0.7, spec.seed)?),
        dir.join(files::ANNOTATIONS),
    )?;
    let config = format!(
        "corpus_id = \"{FIXTURE_CORPUS}\"\n\n\
         [paths]\n\
         embeddings = \"{}\"\n\
         verdicts = \"{}\"\n\
         questions = \"{}\"\n\
         videos = \"{}\"\n\
         prompts = \"{}\"\n\
         annotations = \"{}\"\n\
         latent = \"{}\"\n\
         output_dir = \"out\"\n\n\
         [selection]\n\
         n_videos = {}\n",
        files::EMBEDDINGS,
        files::VERDICTS,
        files::QUESTIONS,
        files::VIDEOS,
        files::PROMPTS,
        files::ANNOTATIONS,
        files::LATENT,
        spec.videos_per_prompt,
    );
    std::fs::write(dir.join(files::CONFIG), config).map_err(|e| crate::Error::io(dir.join(files::CONFIG), e))?;
    Ok(fx)
}

/// Human annotations generated by a known mixer with subject weight
/// `subject_weight` and no noise.
pub fn annotation_fixture(fx: &PipelineFixture, subject_weight: f64, seed: u64) -> Result<AnnotationTable> {
    let raws: Vec<f64> = fx.embeddings.sequences.iter().map(subject_consistency).collect();
    let stats = fit_subject_stats(FIXTURE_CORPUS, &raws)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rows = fx
        .videos
        .videos
        .iter()
        .zip(&raws)
        .map(|(v, &raw)| {
            let s_mech = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            let human = subject_weight * normalize_subject(raw, &stats) + (1.0 - subject_weight) * s_mech;
            AnnotationRow {
                prompt_id: v.prompt_id.clone(),
                video_id: v.video_id.clone(),
                s_subj_raw: raw,
                s_mech,
                human_score: human,
            }
        })
        .collect();
    Ok(AnnotationTable { rows })
}

/// Feature rows for a mixer with known subject weight: `n` samples, noiseless.
pub fn mixer_samples(n: usize, subject_weight: f64, seed: u64) -> Vec<crate::score::FeatureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s_subj_norm = sigmoid(rng.gen_range(-3.0..3.0));
            let s_mech = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            crate::score::FeatureRow {
                s_subj_norm,
                s_mech,
                human_score: subject_weight * s_subj_norm + (1.0 - subject_weight) * s_mech,
            }
        })
        .collect()
}

/// Scored candidates with known latent quality: PhyScores are the latent
/// quality plus Gaussian noise, clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ToyAlignmentFixture {
    pub scores: ScoreTable,
    pub latent: LatentTable,
}

pub fn toy_alignment_fixture(prompts: usize, items: usize, score_noise: f64, seed: u64) -> ToyAlignmentFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, score_noise).expect("valid noise");
    let mut scores = ScoreTable::default();
    let mut latent = LatentTable::default();
    for p in 0..prompts {
        let prompt_id = format!("t{p:02}");
        for i in 0..items {
            let video_id = format!("{prompt_id}_i{i}");
            let q: f64 = rng.gen();
            let s = (q + noise.sample(&mut rng)).clamp(0.0, 1.0);
            scores.rows.push(ScoreRow {
                prompt_id: prompt_id.clone(),
                video_id: video_id.clone(),
                s_subj_raw: 0.0,
                s_subj_norm: 0.5,
                s_mech: 0.5,
                s_phy: s,
            });
            latent.rows.push(LatentRow {
                prompt_id: prompt_id.clone(),
                video_id,
                latent_quality: q,
            });
        }
    }
    ToyAlignmentFixture { scores, latent }
}
