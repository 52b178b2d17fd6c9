use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use leafnet::netdef::{build_by_name, build_s_leafnet_scaled, ParamKind};
use leafnet::{weights_io, LocalStage, NetworkDef, Weights};

/// Which network architecture a stage uses: `s`, `w`, `p`, or a reduced
/// silhouette network written `s:INPUT_PX:WIDTH_DIVISOR`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetSpec {
    Named(String),
    ScaledS { input_px: usize, divisor: usize },
}

impl NetSpec {
    pub fn default_for(stage: u8) -> Self {
        NetSpec::Named(match stage {
            1 => "s",
            2 => "w",
            _ => "p",
        }
        .into())
    }

    pub fn build(&self, class_count: usize) -> Result<NetworkDef> {
        Ok(match self {
            NetSpec::Named(n) => build_by_name(n, class_count)?,
            NetSpec::ScaledS { input_px, divisor } => build_s_leafnet_scaled(class_count, *input_px, *divisor)?,
        })
    }
}

impl FromStr for NetSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [name] if ["s", "w", "p", "s_leafnet", "w_leafnet", "p_fallback"].contains(name) => Ok(NetSpec::Named(name.to_string())),
            ["s", px, div] => Ok(NetSpec::ScaledS {
                input_px: px.parse().context("input size")?,
                divisor: div.parse().context("width divisor")?,
            }),
            _ => bail!("unknown network {s:?}; use s, w, p or s:PX:DIV"),
        }
    }
}

/// Class count read off the bias of the last layer in an archive.
pub fn archive_class_count(weights: &Weights) -> Result<usize> {
    weights
        .iter()
        .filter(|(name, _)| ParamKind::from_name(name) == Some(ParamKind::Bias))
        .filter_map(|(name, t)| Some((name.split('.').nth(1)?.parse::<usize>().ok()?, t.len())))
        .max_by_key(|&(layer, _)| layer)
        .map(|(_, k)| k)
        .ok_or_else(|| anyhow!("archive has no bias tensors to infer the class count from"))
}

/// Loads a stage archive against its architecture.
pub fn load_stage(stage: u8, path: Option<&Path>, spec: &NetSpec, class_count: Option<usize>) -> Result<LocalStage> {
    let flag = format!("--stage{stage}-weights");
    let path = path.ok_or_else(|| anyhow!("stage {stage} weights missing: pass {flag} <archive>"))?;
    let weights = weights_io::load(path).with_context(|| format!("stage {stage} weights {}", path.display()))?;
    let k = match class_count {
        Some(k) => k,
        None => archive_class_count(&weights)?,
    };
    let def = spec.build(k)?;
    LocalStage::new(def, weights).with_context(|| format!("stage {stage} weights {} do not fit {spec:?}", path.display()))
}
