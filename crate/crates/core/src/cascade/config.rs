use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// Which carried candidate sets a stage-3 prediction must belong to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage3Gate {
    #[default]
    Union,
    Intersection,
}

impl fmt::Display for Stage3Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage3Gate::Union => "union",
            Stage3Gate::Intersection => "intersection",
        })
    }
}

impl FromStr for Stage3Gate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(Stage3Gate::Union),
            "intersection" => Ok(Stage3Gate::Intersection),
            other => Err(Error::invalid(format!("stage3_gate must be union or intersection, got `{other}`"))),
        }
    }
}

/// Termination thresholds for the three stages plus the voting fallbacks.
///
/// The text form is `key = value` per line using the names in [`KEYS`];
/// `#` starts a comment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CascadeConfig {
    pub min_prob_seg: f64,
    pub min_delta_seg: f64,
    /// Candidates carried forward from stage 1 (N).
    pub top_seg: usize,
    pub min_mean_l1l2pred: f64,
    pub min_prob_whole: f64,
    pub min_delta_whole: f64,
    /// Candidates carried forward from stage 2 (M).
    pub top_whole: usize,
    /// Patches per image for stage 3 (P).
    pub patch_count: usize,
    pub min_mean_l1l3pred: f64,
    pub min_mean_l2l3pred: f64,
    pub min_prob_patch: f64,
    pub min_delta_patch: f64,
    pub vote_rate: f64,
    pub vote_merge_rate: f64,
    /// Leaf coverage a patch window needs to be accepted.
    pub min_leaf_fraction: f64,
    pub patch_seed: u64,
    pub stage3_gate: Stage3Gate,
}

/// Config-file keys, in file order.
pub const KEYS: [&str; 17] = [
    "min_prob_seg",
    "min_delta_seg",
    "top_seg",
    "min_mean_L1L2pred",
    "min_prob_whole",
    "min_delta_whole",
    "top_whole",
    "P",
    "min_mean_L1L3pred",
    "min_mean_L2L3pred",
    "min_prob_patch",
    "min_delta_patch",
    "vote_rate",
    "vote_merge_rate",
    "min_leaf_fraction",
    "patch_seed",
    "stage3_gate",
];

impl CascadeConfig {
    /// Thresholds tuned for MalayaKew.
    pub fn mk() -> Self {
        CascadeConfig {
            min_prob_seg: 0.98,
            min_delta_seg: 0.95,
            top_seg: 10,
            min_mean_l1l2pred: 0.80,
            min_prob_whole: 0.89,
            min_delta_whole: 0.85,
            top_whole: 6,
            patch_count: 7,
            min_mean_l1l3pred: 0.60,
            min_mean_l2l3pred: 0.60,
            min_prob_patch: 0.95,
            min_delta_patch: 0.85,
            vote_rate: 0.71,
            vote_merge_rate: 0.56,
            min_leaf_fraction: 1.0,
            patch_seed: 0,
            stage3_gate: Stage3Gate::Union,
        }
    }

    /// Thresholds tuned for Flavia; patches only need 98% leaf coverage.
    pub fn flavia() -> Self {
        CascadeConfig {
            min_prob_seg: 0.95,
            min_delta_seg: 0.91,
            top_seg: 6,
            min_mean_l1l2pred: 0.70,
            min_prob_whole: 0.78,
            min_delta_whole: 0.60,
            top_whole: 10,
            min_leaf_fraction: 0.98,
            ..CascadeConfig::mk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mk" => Ok(Self::mk()),
            "flavia" => Ok(Self::flavia()),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected mk or flavia)"))),
        }
    }

    fn thresholds(&self) -> [(&'static str, f64); 12] {
        [
            ("min_prob_seg", self.min_prob_seg),
            ("min_delta_seg", self.min_delta_seg),
            ("min_mean_L1L2pred", self.min_mean_l1l2pred),
            ("min_prob_whole", self.min_prob_whole),
            ("min_delta_whole", self.min_delta_whole),
            ("min_mean_L1L3pred", self.min_mean_l1l3pred),
            ("min_mean_L2L3pred", self.min_mean_l2l3pred),
            ("min_prob_patch", self.min_prob_patch),
            ("min_delta_patch", self.min_delta_patch),
            ("vote_rate", self.vote_rate),
            ("vote_merge_rate", self.vote_merge_rate),
            ("min_leaf_fraction", self.min_leaf_fraction),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.thresholds() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.min_leaf_fraction == 0.0 {
            return Err(Error::invalid("min_leaf_fraction must be > 0"));
        }
        for (name, v) in [("top_seg", self.top_seg), ("top_whole", self.top_whole), ("P", self.patch_count)] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Validation plus N, M <= `class_count`.
    pub fn validate_for(&self, class_count: usize) -> Result<()> {
        self.validate()?;
        if self.top_seg > class_count || self.top_whole > class_count {
            return Err(Error::invalid(format!(
                "top_seg {} / top_whole {} exceed class count {class_count}",
                self.top_seg, self.top_whole
            )));
        }
        Ok(())
    }

    /// Length of a plausible-species list.
    pub fn plausible_len(&self, class_count: usize) -> usize {
        self.top_seg.max(self.top_whole).min(class_count)
    }

    /// Parses the key=value form. A leading `preset = mk|flavia` line selects
    /// the base; without it all fourteen threshold and count keys must be present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CascadeConfig::mk();
        let mut seen = std::collections::HashSet::new();
        let mut based = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::invalid(format!("config line {}: {reason}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected key = value".into()))?;
            if key == "preset" {
                if !seen.is_empty() {
                    return Err(bad("preset must come before other keys".into()));
                }
                cfg = CascadeConfig::preset(value)?;
                based = true;
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|e| bad(e.to_string()))?;
        }
        if !based {
            // the last three keys have defaults
            let missing: Vec<_> = KEYS[..14].iter().filter(|k| !seen.contains(**k)).collect();
            if !missing.is_empty() {
                return Err(Error::invalid(format!("config is missing keys {missing:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn real(v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::invalid(format!("`{v}` is not a number")))
        }
        fn count(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::invalid(format!("`{v}` is not a non-negative integer")))
        }
        match key {
            "min_prob_seg" => self.min_prob_seg = real(value)?,
            "min_delta_seg" => self.min_delta_seg = real(value)?,
            "top_seg" => self.top_seg = count(value)?,
            "min_mean_L1L2pred" => self.min_mean_l1l2pred = real(value)?,
            "min_prob_whole" => self.min_prob_whole = real(value)?,
            "min_delta_whole" => self.min_delta_whole = real(value)?,
            "top_whole" => self.top_whole = count(value)?,
            "P" => self.patch_count = count(value)?,
            "min_mean_L1L3pred" => self.min_mean_l1l3pred = real(value)?,
            "min_mean_L2L3pred" => self.min_mean_l2l3pred = real(value)?,
            "min_prob_patch" => self.min_prob_patch = real(value)?,
            "min_delta_patch" => self.min_delta_patch = real(value)?,
            "vote_rate" => self.vote_rate = real(value)?,
            "vote_merge_rate" => self.vote_merge_rate = real(value)?,
            "min_leaf_fraction" => self.min_leaf_fraction = real(value)?,
            "patch_seed" => {
                self.patch_seed = value.parse().map_err(|_| Error::invalid(format!("`{value}` is not a seed")))?
            }
            "stage3_gate" => self.stage3_gate = value.parse()?,
            other => return Err(Error::invalid(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let values = [
            self.min_prob_seg.to_string(),
            self.min_delta_seg.to_string(),
            self.top_seg.to_string(),
            self.min_mean_l1l2pred.to_string(),
            self.min_prob_whole.to_string(),
            self.min_delta_whole.to_string(),
            self.top_whole.to_string(),
            self.patch_count.to_string(),
            self.min_mean_l1l3pred.to_string(),
            self.min_mean_l2l3pred.to_string(),
            self.min_prob_patch.to_string(),
            self.min_delta_patch.to_string(),
            self.vote_rate.to_string(),
            self.vote_merge_rate.to_string(),
            self.min_leaf_fraction.to_string(),
            self.patch_seed.to_string(),
            self.stage3_gate.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig::mk()
    }
}
