//! Prompt-set composition and win/lose pair selection.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::PhyScoreRecord;

/// Score spread below which a group yields no pair.
pub const DEFAULT_TIE_EPSILON: f64 = 1e-9;
pub const DEFAULT_VIDEOS_PER_PROMPT: usize = 4;
/// Relative deviation from the target ratio tolerated without a warning.
pub const DEFAULT_RATIO_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    PhysicsChallenging,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub text: String,
    pub category: PromptCategory,
    pub source: String,
}

/// Counts of the two prompt pools against their target proportion.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub label: &'static str,
    pub primary: usize,
    pub secondary: usize,
    pub target: (usize, usize),
    pub tolerance: f64,
}

impl RatioReport {
    pub fn observed(&self) -> f64 {
        self.primary as f64 / self.secondary as f64
    }

    pub fn expected(&self) -> f64 {
        self.target.0 as f64 / self.target.1 as f64
    }

    /// Relative deviation of the observed ratio from the target.
    pub fn deviation(&self) -> f64 {
        if self.secondary == 0 {
            return f64::INFINITY;
        }
        (self.observed() / self.expected() - 1.0).abs()
    }

    pub fn within_tolerance(&self) -> bool {
        self.deviation() <= self.tolerance
    }
}

impl fmt::Display for RatioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} + {} = {} prompts, ratio {}:{} target {}:{} ({})",
            self.label,
            self.primary,
            self.secondary,
            self.primary + self.secondary,
            self.primary,
            self.secondary,
            self.target.0,
            self.target.1,
            if self.within_tolerance() {
                "ok".to_string()
            } else {
                format!("WARNING: deviation {:.3} exceeds {}", self.deviation(), self.tolerance)
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub prompts: Vec<PromptRecord>,
    pub report: RatioReport,
}

fn compose(
    label: &'static str,
    primary: Vec<PromptRecord>,
    secondary: Vec<PromptRecord>,
    target: (usize, usize),
    tolerance: f64,
) -> Result<PromptSet> {
    let mut seen = HashSet::new();
    for p in primary.iter().chain(&secondary) {
        if !seen.insert(p.prompt_id.as_str()) {
            return Err(Error::Duplicate(p.prompt_id.clone()));
        }
    }
    let report = RatioReport {
        label,
        primary: primary.len(),
        secondary: secondary.len(),
        target,
        tolerance,
    };
    if !report.within_tolerance() {
        log::warn!("{report}");
    }
    let mut prompts = primary;
    prompts.extend(secondary);
    Ok(PromptSet { prompts, report })
}

/// Reward-model training prompts: physics-heavy and neutral at 50:250.
pub fn compose_rm_prompts(
    physics: Vec<PromptRecord>,
    neutral: Vec<PromptRecord>,
    tolerance: f64,
) -> Result<PromptSet> {
    compose("reward-model prompts", physics, neutral, (50, 250), tolerance)
}

/// Preference-tuning prompts: challenging and random at 36:72.
pub fn compose_dpo_prompts(
    challenging: Vec<PromptRecord>,
    random: Vec<PromptRecord>,
    tolerance: f64,
) -> Result<PromptSet> {
    compose("preference prompts", challenging, random, (36, 72), tolerance)
}

/// Splits a prompt list into its physics-challenging and neutral pools.
pub fn split_by_category(prompts: Vec<PromptRecord>) -> (Vec<PromptRecord>, Vec<PromptRecord>) {
    prompts
        .into_iter()
        .partition(|p| p.category == PromptCategory::PhysicsChallenging)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoGroup {
    pub prompt_id: String,
    pub videos: Vec<PhyScoreRecord>,
}

/// Groups scored videos by prompt, keeping first-appearance order of prompts
/// and input order within each group.
pub fn group_by_prompt<'a>(rows: impl IntoIterator<Item = (&'a str, PhyScoreRecord)>) -> Vec<VideoGroup> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<VideoGroup> = Vec::new();
    for (prompt_id, rec) in rows {
        let i = *index.entry(prompt_id.to_string()).or_insert_with(|| {
            groups.push(VideoGroup {
                prompt_id: prompt_id.to_string(),
                videos: Vec::new(),
            });
            groups.len() - 1
        });
        groups[i].videos.push(rec);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub win_video_id: String,
    pub lose_video_id: String,
    pub s_win: f64,
    pub s_lose: f64,
    pub delta: f64,
    pub weight: f64,
}

impl PreferencePair {
    pub fn new(
        prompt_id: impl Into<String>,
        win_video_id: impl Into<String>,
        lose_video_id: impl Into<String>,
        s_win: f64,
        s_lose: f64,
    ) -> Result<Self> {
        let (prompt_id, win_video_id, lose_video_id) = (prompt_id.into(), win_video_id.into(), lose_video_id.into());
        if win_video_id == lose_video_id {
            return Err(Error::Group(format!(
                "prompt `{prompt_id}`: win and lose video are both `{win_video_id}`"
            )));
        }
        if !(s_win >= s_lose) {
            return Err(Error::Range(format!(
                "prompt `{prompt_id}`: win score {s_win} is below lose score {s_lose}"
            )));
        }
        Ok(Self {
            prompt_id,
            win_video_id,
            lose_video_id,
            s_win,
            s_lose,
            delta: s_win - s_lose,
            weight: 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipNotice {
    pub prompt_id: String,
    pub spread: f64,
}

impl fmt::Display for SkipNotice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "skipped prompt `{}`: degenerate group (score spread {:e})",
            self.prompt_id, self.spread
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Pair(PreferencePair),
    Degenerate(SkipNotice),
}

/// Highest-scoring video wins, lowest-scoring loses; ties go to the lowest
/// index.
pub fn select_pair(group: &VideoGroup, epsilon: f64) -> Result<Selection> {
    if group.videos.len() < 2 {
        return Err(Error::Group(format!(
            "prompt `{}` has {} video(s), need at least 2",
            group.prompt_id,
            group.videos.len()
        )));
    }
    if let Some(v) = group.videos.iter().find(|v| !v.s_phy.is_finite()) {
        return Err(Error::Group(format!(
            "prompt `{}`: video `{}` has a non-finite score",
            group.prompt_id, v.video_id
        )));
    }
    let (mut win, mut lose) = (0, 0);
    for (i, v) in group.videos.iter().enumerate() {
        if v.s_phy > group.videos[win].s_phy {
            win = i;
        }
        if v.s_phy < group.videos[lose].s_phy {
            lose = i;
        }
    }
    let (w, l) = (&group.videos[win], &group.videos[lose]);
    let spread = w.s_phy - l.s_phy;
    if spread < epsilon {
        return Ok(Selection::Degenerate(SkipNotice {
            prompt_id: group.prompt_id.clone(),
            spread,
        }));
    }
    PreferencePair::new(&group.prompt_id, &w.video_id, &l.video_id, w.s_phy, l.s_phy).map(Selection::Pair)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkipNotice>,
}

pub fn build_preference_dataset(groups: &[VideoGroup], epsilon: f64) -> Result<PreferenceDataset> {
    if groups.is_empty() {
        return Err(Error::Empty("no video groups to select pairs from".into()));
    }
    let mut out = PreferenceDataset::default();
    for g in groups {
        match select_pair(g, epsilon)? {
            Selection::Pair(p) => out.pairs.push(p),
            Selection::Degenerate(n) => out.skipped.push(n),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompts(prefix: &str, n: usize, category: PromptCategory) -> Vec<PromptRecord> {
        (0..n)
            .map(|i| PromptRecord {
                prompt_id: format!("{prefix}{i}"),
                text: format!("prompt {i}"),
                category,
                source: "fixture".into(),
            })
            .collect()
    }

    pub(crate) fn group(scores: &[f64]) -> VideoGroup {
        VideoGroup {
            prompt_id: "p".into(),
            videos: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| PhyScoreRecord {
                    video_id: format!("v{i}"),
                    s_subj_raw: 0.0,
                    s_subj_norm: 0.5,
                    s_mech: 0.5,
                    s_phy: s,
                })
                .collect(),
        }
    }

    #[test]
    fn rm_composition() {
        use PromptCategory::*;
        let set = compose_rm_prompts(
            prompts("a", 50, PhysicsChallenging),
            prompts("b", 250, Neutral),
            DEFAULT_RATIO_TOLERANCE,
        )
        .unwrap();
        assert_eq!(set.prompts.len(), 300);
        assert!(set.report.within_tolerance());
        let small = compose_rm_prompts(
            prompts("a", 10, PhysicsChallenging),
            prompts("b", 50, Neutral),
            DEFAULT_RATIO_TOLERANCE,
        )
        .unwrap();
        assert!(small.report.within_tolerance());
        assert!(matches!(
            compose_rm_prompts(
                prompts("a", 2, PhysicsChallenging),
                prompts("a", 10, Neutral),
                DEFAULT_RATIO_TOLERANCE
            ),
            Err(Error::Duplicate(id)) if id == "a0"
        ));
    }

    #[test]
    fn dpo_composition() {
        use PromptCategory::*;
        let set = compose_dpo_prompts(
            prompts("c", 36, PhysicsChallenging),
            prompts("r", 72, Neutral),
            DEFAULT_RATIO_TOLERANCE,
        )
        .unwrap();
        assert_eq!(set.prompts.len(), 108);
        assert!(set.report.within_tolerance());
        let small = compose_dpo_prompts(prompts("c", 4, PhysicsChallenging), prompts("r", 8, Neutral), 0.05).unwrap();
        assert_eq!(small.prompts.len(), 12);
        assert!(small.report.within_tolerance());
        let off = compose_dpo_prompts(prompts("c", 36, PhysicsChallenging), prompts("r", 36, Neutral), 0.05).unwrap();
        assert!(!off.report.within_tolerance());
        assert!(off.report.to_string().contains("WARNING"));
    }

    #[test]
    fn selection_examples() {
        let Selection::Pair(p) = select_pair(&group(&[0.2, 0.8, 0.5]), DEFAULT_TIE_EPSILON).unwrap() else {
            panic!("expected a pair");
        };
        assert_eq!((p.win_video_id.as_str(), p.lose_video_id.as_str()), ("v1", "v0"));
        assert!((p.delta - 0.6).abs() < 1e-15);
        assert_eq!(p.weight, 1.0);

        assert!(matches!(
            select_pair(&group(&[0.5; 4]), DEFAULT_TIE_EPSILON).unwrap(),
            Selection::Degenerate(_)
        ));

        let Selection::Pair(p) = select_pair(&group(&[0.9, 0.9, 0.1]), DEFAULT_TIE_EPSILON).unwrap() else {
            panic!("expected a pair");
        };
        assert_eq!((p.win_video_id.as_str(), p.lose_video_id.as_str()), ("v0", "v2"));

        assert!(matches!(select_pair(&group(&[0.5]), 1e-9), Err(Error::Group(_))));
    }

    #[test]
    fn dataset_counts() {
        let mut groups: Vec<VideoGroup> = (0..10).map(|_| group(&[0.1, 0.7, 0.4, 0.3])).collect();
        groups[3] = group(&[0.4; 4]);
        groups[7] = group(&[0.2, 0.2 + 1e-12, 0.2, 0.2]);
        let ds = build_preference_dataset(&groups, DEFAULT_TIE_EPSILON).unwrap();
        assert_eq!(ds.pairs.len(), 8);
        assert_eq!(ds.skipped.len(), 2);
        assert!(matches!(build_preference_dataset(&[], 1e-9), Err(Error::Empty(_))));
    }

    #[test]
    fn grouping_keeps_order() {
        let rec = |id: &str| PhyScoreRecord {
            video_id: id.into(),
            s_subj_raw: 0.0,
            s_subj_norm: 0.5,
            s_mech: 0.0,
            s_phy: 0.25,
        };
        let groups = group_by_prompt([("b", rec("1")), ("a", rec("2")), ("b", rec("3"))]);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].prompt_id, "b");
        assert_eq!(groups[0].videos[1].video_id, "3");
    }
}
