//! The three-stage cascade: silhouette network, whole-leaf network, patch
//! classifier, then voting fallbacks.
//!
//! Later stages run only when earlier ones defer, so a stage model is never
//! invoked for an input an earlier stage already decided.

mod config;
mod decide;
mod eval;

use rayon::prelude::*;
use serde::Serialize;

pub use config::{CascadeConfig, Stage3Gate, KEYS as CONFIG_KEYS};
pub use decide::{
    aggregate_patches, ranked_fallback, stage1_decide, stage2_decide, stage3_decide, top_k, Method, Rule,
    Stage3Evidence, StageDecision, StageKnowledge, Verdict,
};
pub use eval::{evaluate, evaluate_samples, EvalReport};

use crate::error::{Error, Result};
use crate::preprocess::{sample_patches, LeafImage};
use crate::prob::ProbVector;
use crate::stage::StageModel;

/// The three probability providers, in cascade order.
#[derive(Clone, Copy)]
pub struct CascadeModels<'a> {
    pub silhouette: &'a dyn StageModel,
    pub whole: &'a dyn StageModel,
    pub patch: &'a dyn StageModel,
}

impl CascadeModels<'_> {
    pub fn class_count(&self) -> Result<usize> {
        let k = self.silhouette.class_count();
        if self.whole.class_count() != k || self.patch.class_count() != k {
            return Err(Error::invalid(format!(
                "stage models disagree on class count: {}, {}, {}",
                k,
                self.whole.class_count(),
                self.patch.class_count()
            )));
        }
        Ok(k)
    }
}

/// Every intermediate the cascade produced, for auditing.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageTrace {
    pub p1: Option<ProbVector>,
    pub k1: Option<StageKnowledge>,
    pub p2: Option<ProbVector>,
    pub k2: Option<StageKnowledge>,
    pub patch_origins: Vec<(usize, usize)>,
    pub patch_preds: Vec<usize>,
    pub p3: Option<ProbVector>,
    /// Degradations such as an unreachable stage or missing patches.
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CascadeOutcome {
    pub verdict: Verdict,
    pub trace: StageTrace,
}

impl CascadeOutcome {
    /// Stage that produced the verdict; plausible lists count as stage 3.
    pub fn final_stage(&self) -> u8 {
        match self.verdict {
            Verdict::Decided { stage, .. } => stage,
            Verdict::Plausible { .. } => 3,
        }
    }
}

fn unavailable_or(err: Error, trace: &mut StageTrace, stage: u8) -> Result<()> {
    match err {
        Error::ModelUnavailable(why) => {
            trace.notes.push(format!("stage {stage} unavailable: {why}"));
            Ok(())
        }
        other => Err(other),
    }
}

/// Classifies one leaf.
///
/// A stage-2 or stage-3 model reporting [`Error::ModelUnavailable`] ends the
/// cascade with a ranked fallback over the outputs gathered so far, as does
/// an image with no acceptable patch window.
pub fn run_cascade(leaf: &LeafImage, models: &CascadeModels<'_>, cfg: &CascadeConfig) -> Result<CascadeOutcome> {
    let k = models.class_count()?;
    cfg.validate_for(k)?;
    let len = cfg.plausible_len(k);
    let mut trace = StageTrace::default();

    let p1 = models.silhouette.predict(&leaf.silhouette_input(models.silhouette.input_dims())?)?;
    let k1 = match stage1_decide(&p1, cfg)? {
        StageDecision::Decided { class, rule } => {
            trace.p1 = Some(p1);
            return Ok(CascadeOutcome { verdict: Verdict::Decided { class, stage: 1, rule }, trace });
        }
        StageDecision::Defer(k1) => k1,
    };
    trace.k1 = Some(k1.clone());

    let p2 = match models.whole.predict(&leaf.color_input(models.whole.input_dims())?) {
        Ok(p) => p,
        Err(e) => {
            unavailable_or(e, &mut trace, 2)?;
            let verdict = ranked_fallback(&[&p1], len)?;
            trace.p1 = Some(p1);
            return Ok(CascadeOutcome { verdict, trace });
        }
    };
    let k2 = match stage2_decide(&p2, &k1, cfg)? {
        StageDecision::Decided { class, rule } => {
            trace.p1 = Some(p1);
            trace.p2 = Some(p2);
            return Ok(CascadeOutcome { verdict: Verdict::Decided { class, stage: 2, rule }, trace });
        }
        StageDecision::Defer(k2) => k2,
    };
    trace.k2 = Some(k2.clone());

    let [pc, ph, pw] = models.patch.input_dims();
    if pc != 3 || ph != pw {
        return Err(Error::shape(format!("patch model must take square RGB input, got {:?}", [pc, ph, pw])));
    }
    let set = sample_patches(leaf, cfg.patch_count, ph, cfg.min_leaf_fraction, cfg.patch_seed)?;
    trace.patch_origins = set.origins.clone();
    if set.len() < cfg.patch_count {
        trace.notes.push(format!("only {} of {} patches found", set.len(), cfg.patch_count));
    }
    let finish_without_p3 = |mut trace: StageTrace| -> Result<CascadeOutcome> {
        let verdict = ranked_fallback(&[&p1, &p2], len)?;
        trace.p1 = Some(p1.clone());
        trace.p2 = Some(p2.clone());
        Ok(CascadeOutcome { verdict, trace })
    };
    if set.is_empty() {
        return finish_without_p3(trace);
    }

    // stops handing out patches at the first failure, so an outage costs
    // one timeout per worker rather than one per patch
    let results: Result<Vec<ProbVector>> = set
        .patches
        .par_iter()
        .map(|patch| models.patch.predict(&patch.clone().reshape(&[1, 3, ph, pw])?))
        .collect();
    let patch_probs = match results {
        Ok(v) => v,
        Err(e) => {
            unavailable_or(e, &mut trace, 3)?;
            return finish_without_p3(trace);
        }
    };
    let p3 = aggregate_patches(&patch_probs)?;
    let patch_preds: Vec<usize> = patch_probs.iter().map(ProbVector::argmax).collect();
    let ev = Stage3Evidence { p1: &p1, p2: &p2, p3: &p3, patch_preds: &patch_preds, k1: &k1, k2: &k2 };
    let verdict = stage3_decide(&ev, cfg)?;
    trace.p1 = Some(p1);
    trace.p2 = Some(p2);
    trace.p3 = Some(p3);
    trace.patch_preds = patch_preds;
    Ok(CascadeOutcome { verdict, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::{CountingStage, FnStage};
    use crate::tensor::Tensor;

    fn leaf() -> LeafImage {
        let rgb = Tensor::from_fn(&[3, 120, 120], |i| (i % 120) as f32 / 120.0);
        LeafImage::new(rgb, Tensor::full(&[1, 120, 120], 1.0)).unwrap()
    }

    fn fixed(k: usize, dims: [usize; 3], p: ProbVector) -> CountingStage<FnStage<impl Fn(&Tensor) -> Result<ProbVector> + Send + Sync>> {
        CountingStage::new(FnStage::new(k, dims, move |_: &Tensor| Ok(p.clone())))
    }

    #[test]
    fn stage1_decision_skips_later_models() {
        let s = fixed(12, [1, 32, 32], ProbVector::peaked(12, 4, 0.99));
        let w = fixed(12, [3, 40, 40], ProbVector::uniform(12));
        let p = fixed(12, [3, 24, 24], ProbVector::uniform(12));
        let models = CascadeModels { silhouette: &s, whole: &w, patch: &p };
        let out = run_cascade(&leaf(), &models, &CascadeConfig::mk()).unwrap();
        assert_eq!(out.verdict, Verdict::Decided { class: 4, stage: 1, rule: Rule::MinProbSeg });
        assert_eq!((s.calls(), w.calls(), p.calls()), (1, 0, 0));
    }

    #[test]
    fn undecided_input_runs_all_patches() {
        let s = fixed(12, [1, 32, 32], ProbVector::uniform(12));
        let w = fixed(12, [3, 40, 40], ProbVector::uniform(12));
        let p = fixed(12, [3, 24, 24], ProbVector::uniform(12));
        let models = CascadeModels { silhouette: &s, whole: &w, patch: &p };
        let out = run_cascade(&leaf(), &models, &CascadeConfig::mk()).unwrap();
        assert_eq!((s.calls(), w.calls(), p.calls()), (1, 1, 7));
        assert!(matches!(out.verdict, Verdict::Plausible { .. }));
        assert_eq!(out.trace.patch_preds.len(), 7);
    }

    #[test]
    fn unavailable_stage_degrades_to_fallback() {
        let s = fixed(12, [1, 32, 32], ProbVector::peaked(12, 2, 0.5));
        let w = FnStage::new(12, [3, 40, 40], |_: &Tensor| Err(Error::ModelUnavailable("down".into())));
        let p = fixed(12, [3, 24, 24], ProbVector::uniform(12));
        let models = CascadeModels { silhouette: &s, whole: &w, patch: &p };
        let out = run_cascade(&leaf(), &models, &CascadeConfig::mk()).unwrap();
        assert!(matches!(&out.verdict, Verdict::Plausible { method: Method::RankedFallback, ranked } if ranked[0].0 == 2));
        assert_eq!(p.calls(), 0);
        assert_eq!(out.trace.notes.len(), 1);
    }

    #[test]
    fn patch_outage_stops_after_first_failure() {
        let s = fixed(12, [1, 32, 32], ProbVector::uniform(12));
        let w = fixed(12, [3, 40, 40], ProbVector::uniform(12));
        let p = CountingStage::new(FnStage::new(12, [3, 24, 24], |_: &Tensor| Err(Error::ModelUnavailable("down".into()))));
        let models = CascadeModels { silhouette: &s, whole: &w, patch: &p };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let out = pool.install(|| run_cascade(&leaf(), &models, &CascadeConfig::mk())).unwrap();
        assert_eq!(p.calls(), 1);
        assert!(matches!(out.verdict, Verdict::Plausible { method: Method::RankedFallback, .. }));
        assert!(out.trace.notes.iter().any(|n| n.contains("stage 3 unavailable")));
    }

    #[test]
    fn no_patches_falls_back_on_two_stages() {
        let s = fixed(12, [1, 32, 32], ProbVector::uniform(12));
        let w = fixed(12, [3, 40, 40], ProbVector::peaked(12, 7, 0.3));
        let p = fixed(12, [3, 24, 24], ProbVector::uniform(12));
        let models = CascadeModels { silhouette: &s, whole: &w, patch: &p };
        let empty = LeafImage::new(Tensor::zeros(&[3, 60, 60]), Tensor::zeros(&[1, 60, 60])).unwrap();
        let out = run_cascade(&empty, &models, &CascadeConfig::mk()).unwrap();
        assert_eq!(p.calls(), 0);
        assert_eq!(out.verdict.first_class(), 7);
    }

    #[test]
    fn outcome_serializes_with_rule_names() {
        let s = fixed(12, [1, 32, 32], ProbVector::peaked(12, 4, 0.99));
        let models = CascadeModels { silhouette: &s, whole: &s, patch: &s };
        let out = run_cascade(&leaf(), &models, &CascadeConfig::mk()).unwrap();
        let json = serde_json::to_value(&out).unwrap();
        assert_eq!(json["verdict"]["type"], "Decided");
        assert_eq!(json["verdict"]["rule"], "min_prob_seg");
    }
}
