//! Pure per-stage termination rules and the voting fallbacks.

use std::cmp::Ordering;

use serde::Serialize;

use super::config::{CascadeConfig, Stage3Gate};
use crate::error::{Error, Result};
use crate::prob::ProbVector;

/// Ranked (class, probability) candidates handed from an undecided stage to
/// later stages. Probabilities descend; ties are ordered by class id.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct StageKnowledge {
    entries: Vec<(usize, f32)>,
}

impl StageKnowledge {
    pub fn entries(&self) -> &[(usize, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.iter().any(|&(c, _)| c == class)
    }

    /// The stage's own first guess.
    pub fn top(&self) -> Option<(usize, f32)> {
        self.entries.first().copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(c, _)| c)
    }
}

/// The `k` most probable classes, lowest id first among equal probabilities.
pub fn top_k(p: &ProbVector, k: usize) -> Result<StageKnowledge> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("top_k: k = {k} outside 1..={}", p.len())));
    }
    let entries = p.ranked().into_iter().take(k).map(|c| (c, p.get(c))).collect();
    Ok(StageKnowledge { entries })
}

/// Threshold that ended the cascade; serialized under its config-key name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Rule {
    #[serde(rename = "min_prob_seg")]
    MinProbSeg,
    #[serde(rename = "min_delta_seg")]
    MinDeltaSeg,
    #[serde(rename = "min_mean_L1L2pred")]
    MinMeanL1L2,
    #[serde(rename = "min_prob_whole")]
    MinProbWhole,
    #[serde(rename = "min_delta_whole")]
    MinDeltaWhole,
    #[serde(rename = "min_mean_L1L3pred")]
    MinMeanL1L3,
    #[serde(rename = "min_mean_L2L3pred")]
    MinMeanL2L3,
    #[serde(rename = "min_prob_patch")]
    MinProbPatch,
    #[serde(rename = "min_delta_patch")]
    MinDeltaPatch,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::MinProbSeg => "min_prob_seg",
            Rule::MinDeltaSeg => "min_delta_seg",
            Rule::MinMeanL1L2 => "min_mean_L1L2pred",
            Rule::MinProbWhole => "min_prob_whole",
            Rule::MinDeltaWhole => "min_delta_whole",
            Rule::MinMeanL1L3 => "min_mean_L1L3pred",
            Rule::MinMeanL2L3 => "min_mean_L2L3pred",
            Rule::MinProbPatch => "min_prob_patch",
            Rule::MinDeltaPatch => "min_delta_patch",
        }
    }

    /// Stage (1..=3) the rule belongs to.
    pub fn stage(self) -> u8 {
        match self {
            Rule::MinProbSeg | Rule::MinDeltaSeg => 1,
            Rule::MinMeanL1L2 | Rule::MinProbWhole | Rule::MinDeltaWhole => 2,
            _ => 3,
        }
    }
}

/// How a plausible list was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PatchVote,
    MergedVote,
    RankedFallback,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PatchVote => "patch_vote",
            Method::MergedVote => "merged_vote",
            Method::RankedFallback => "ranked_fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type")]
pub enum Verdict {
    Decided { class: usize, stage: u8, rule: Rule },
    /// Classes with descending scores.
    Plausible { ranked: Vec<(usize, f64)>, method: Method },
}

impl Verdict {
    fn decided(class: usize, rule: Rule) -> Self {
        Verdict::Decided { class, stage: rule.stage(), rule }
    }

    /// The decided class, or the head of the plausible list.
    pub fn first_class(&self) -> usize {
        match self {
            Verdict::Decided { class, .. } => *class,
            Verdict::Plausible { ranked, .. } => ranked[0].0,
        }
    }

    pub fn is_decided(&self) -> bool {
        matches!(self, Verdict::Decided { .. })
    }
}

/// Result of stage 1 or 2: a final answer or the candidates to carry on.
#[derive(Clone, Debug, PartialEq)]
pub enum StageDecision {
    Decided { class: usize, rule: Rule },
    Defer(StageKnowledge),
}

fn top_two(p: &ProbVector) -> (usize, f64, f64) {
    let r = p.ranked();
    let second = r.get(1).map_or(0.0, |&c| f64::from(p.get(c)));
    (r[0], f64::from(p.get(r[0])), second)
}

pub fn stage1_decide(p1: &ProbVector, cfg: &CascadeConfig) -> Result<StageDecision> {
    let (c, top1, top2) = top_two(p1);
    if top1 >= cfg.min_prob_seg {
        return Ok(StageDecision::Decided { class: c, rule: Rule::MinProbSeg });
    }
    if top1 - top2 >= cfg.min_delta_seg {
        return Ok(StageDecision::Decided { class: c, rule: Rule::MinDeltaSeg });
    }
    Ok(StageDecision::Defer(top_k(p1, cfg.top_seg.min(p1.len()))?))
}

/// `k1` supplies both the membership gate and the stage-1 probability used
/// in the cross-stage mean.
pub fn stage2_decide(p2: &ProbVector, k1: &StageKnowledge, cfg: &CascadeConfig) -> Result<StageDecision> {
    let (l1_class, l1_prob) = k1.top().ok_or_else(|| Error::invalid("stage 2 needs stage-1 candidates"))?;
    let (c2, top1, top2) = top_two(p2);
    if k1.contains(c2) {
        if c2 == l1_class && (f64::from(l1_prob) + top1) / 2.0 >= cfg.min_mean_l1l2pred {
            return Ok(StageDecision::Decided { class: c2, rule: Rule::MinMeanL1L2 });
        }
        if top1 >= cfg.min_prob_whole {
            return Ok(StageDecision::Decided { class: c2, rule: Rule::MinProbWhole });
        }
        if top1 - top2 >= cfg.min_delta_whole {
            return Ok(StageDecision::Decided { class: c2, rule: Rule::MinDeltaWhole });
        }
    }
    Ok(StageDecision::Defer(top_k(p2, cfg.top_whole.min(p2.len()))?))
}

/// Elementwise mean of per-patch probability vectors.
pub fn aggregate_patches(patch_probs: &[ProbVector]) -> Result<ProbVector> {
    let first = patch_probs.first().ok_or_else(|| Error::invalid("no patch predictions to aggregate"))?;
    let k = first.len();
    if patch_probs.iter().any(|p| p.len() != k) {
        return Err(Error::shape("patch probability vectors differ in length"));
    }
    let mut acc = vec![0.0f64; k];
    for p in patch_probs {
        for (a, &v) in acc.iter_mut().zip(p.as_slice()) {
            *a += f64::from(v);
        }
    }
    let n = patch_probs.len() as f64;
    ProbVector::new(acc.into_iter().map(|s| (s / n) as f32).collect())
}

/// Everything stage 3 and the fallbacks look at.
#[derive(Clone, Copy, Debug)]
pub struct Stage3Evidence<'a> {
    pub p1: &'a ProbVector,
    pub p2: &'a ProbVector,
    /// Aggregated patch probabilities.
    pub p3: &'a ProbVector,
    /// Argmax of each patch that was classified.
    pub patch_preds: &'a [usize],
    pub k1: &'a StageKnowledge,
    pub k2: &'a StageKnowledge,
}

fn vote_counts(votes: &[usize], class_count: usize) -> Vec<usize> {
    let mut counts = vec![0usize; class_count];
    for &v in votes {
        if v < class_count {
            counts[v] += 1;
        }
    }
    counts
}

/// Highest count, lowest class id on ties.
fn modal(counts: &[usize]) -> (usize, usize) {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best })
}

/// Puts `head` first, then orders the rest by `key` descending and class id
/// ascending, truncated to `len`.
fn ranked_list(
    class_count: usize,
    head: Option<usize>,
    len: usize,
    score: impl Fn(usize) -> f64,
    tiebreak: impl Fn(usize) -> f64,
) -> Vec<(usize, f64)> {
    let mut rest: Vec<usize> = (0..class_count).filter(|&c| Some(c) != head).collect();
    rest.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(Ordering::Equal)
            .then(tiebreak(b).partial_cmp(&tiebreak(a)).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    head.into_iter().chain(rest).take(len.max(1)).map(|c| (c, score(c))).collect()
}

/// Plausible list ranked by the mean of whichever stage outputs exist.
pub fn ranked_fallback(probs: &[&ProbVector], len: usize) -> Result<Verdict> {
    let first = probs.first().ok_or_else(|| Error::invalid("ranked fallback needs at least one stage output"))?;
    let k = first.len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::shape("stage outputs differ in class count"));
    }
    let mean = |c: usize| probs.iter().map(|p| f64::from(p.get(c))).sum::<f64>() / probs.len() as f64;
    Ok(Verdict::Plausible { ranked: ranked_list(k, None, len, mean, |_| 0.0), method: Method::RankedFallback })
}

pub fn stage3_decide(ev: &Stage3Evidence<'_>, cfg: &CascadeConfig) -> Result<Verdict> {
    let k = ev.p3.len();
    if ev.p1.len() != k || ev.p2.len() != k {
        return Err(Error::shape("stage outputs differ in class count"));
    }
    let (c3, top1, top2) = top_two(ev.p3);
    let gate = match cfg.stage3_gate {
        Stage3Gate::Union => ev.k1.contains(c3) || ev.k2.contains(c3),
        Stage3Gate::Intersection => ev.k1.contains(c3) && ev.k2.contains(c3),
    };
    if gate {
        let p = |v: &ProbVector| f64::from(v.get(c3));
        if Some(c3) == ev.k1.top().map(|t| t.0) && (p(ev.p1) + top1) / 2.0 >= cfg.min_mean_l1l3pred {
            return Ok(Verdict::decided(c3, Rule::MinMeanL1L3));
        }
        if Some(c3) == ev.k2.top().map(|t| t.0) && (p(ev.p2) + top1) / 2.0 >= cfg.min_mean_l2l3pred {
            return Ok(Verdict::decided(c3, Rule::MinMeanL2L3));
        }
        if top1 >= cfg.min_prob_patch {
            return Ok(Verdict::decided(c3, Rule::MinProbPatch));
        }
        if top1 - top2 >= cfg.min_delta_patch {
            return Ok(Verdict::decided(c3, Rule::MinDeltaPatch));
        }
    }

    let len = cfg.plausible_len(k);
    let p3 = |c: usize| f64::from(ev.p3.get(c));

    if !ev.patch_preds.is_empty() {
        let counts = vote_counts(ev.patch_preds, k);
        let (mode, n) = modal(&counts);
        let share = |c: usize| counts[c] as f64 / cfg.patch_count as f64;
        if n as f64 / cfg.patch_count as f64 >= cfg.vote_rate {
            return Ok(Verdict::Plausible {
                ranked: ranked_list(k, Some(mode), len, share, p3),
                method: Method::PatchVote,
            });
        }
    }

    let votes = [ev.p1.argmax(), ev.p2.argmax(), c3];
    let counts = vote_counts(&votes, k);
    let (mode, n) = modal(&counts);
    let floor = cfg.min_prob_whole.min(cfg.min_prob_seg) / 2.0;
    let support = f64::from(ev.p1.get(mode)).min(f64::from(ev.p2.get(mode)));
    if n as f64 / votes.len() as f64 >= cfg.vote_merge_rate && support >= floor {
        let share = |c: usize| counts[c] as f64 / votes.len() as f64;
        let mean = |c: usize| (f64::from(ev.p1.get(c)) + f64::from(ev.p2.get(c)) + p3(c)) / 3.0;
        return Ok(Verdict::Plausible {
            ranked: ranked_list(k, Some(mode), len, share, mean),
            method: Method::MergedVote,
        });
    }

    ranked_fallback(&[ev.p1, ev.p2, ev.p3], len)
}
