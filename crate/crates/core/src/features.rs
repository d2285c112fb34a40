//! Fixed-length node features: kind one-hot, geometry and sizing fields.
//!
//! Layout: `[kind one-hot (7) | width, height, area | L, NF, NFIN, R_L, R_W, C_M]`.

use serde::{Deserialize, Serialize};

use crate::graph::CircuitGraph;
use crate::netlist::{Design, DeviceKind, PlacementDB};
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 16;
pub const ONE_HOT: usize = 7;
pub const NUMERIC: usize = FEATURE_DIM - ONE_HOT;

pub type NodeFeatures = [f64; FEATURE_DIM];

/// Geometry proxies for devices without layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub unit_fin_pitch: f64,
    pub gate_overhead: f64,
    pub unit_cap_area: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            unit_fin_pitch: 1.0,
            gate_overhead: 1.0,
            unit_cap_area: 1.0,
        }
    }
}

/// Raw (unnormalized) features for every graph node, indexed by node id.
///
/// Devices take their size from the geometry proxies, or from `placement`
/// when a rectangle is available. A sub-circuit node sums the areas of its
/// members, assumes a square outline and averages their sizing fields.
pub fn raw_features(
    design: &Design,
    graph: &CircuitGraph,
    placement: Option<&PlacementDB>,
    geom: &GeometryConfig,
) -> Result<Vec<NodeFeatures>> {
    let mut out = vec![[0.0; FEATURE_DIM]; graph.len()];
    for node in &graph.nodes {
        if node.kind == DeviceKind::SubCircuit {
            continue;
        }
        let owner = node.owner.as_deref().expect("device nodes have an owner");
        let inst = &design.subckts[owner].instances[node.inst_index.expect("device index")];
        let p = &inst.params;
        let need = |v: Option<u64>, what: &str| {
            v.map(|x| x as f64).ok_or_else(|| {
                Error::Features(format!("`{}` in `{owner}` lacks {what}", inst.name))
            })
        };
        let f = &mut out[node.id];
        f[node.kind.index()] = 1.0;
        let (w, h) = match node.kind {
            k if k.is_transistor() => {
                let (l, nf, nfin) = (need(p.l, "L")?, need(p.nf, "NF")?, need(p.nfin, "NFIN")?);
                f[10] = l;
                f[11] = nf;
                f[12] = nfin;
                (nf * nfin * geom.unit_fin_pitch, l + geom.gate_overhead)
            }
            DeviceKind::Resistor => {
                let (l, w) = (need(p.l, "L")?, need(p.w, "W")?);
                f[13] = l;
                f[14] = w;
                (w, l)
            }
            _ => {
                let m = need(p.m, "M")?;
                f[15] = m;
                let side = (m * geom.unit_cap_area).sqrt();
                (side, side)
            }
        };
        let (w, h) = match placement.and_then(|pl| pl.get(owner, &inst.name)) {
            Some(r) => (r.w as f64, r.h as f64),
            None => (w, h),
        };
        f[7] = w;
        f[8] = h;
        f[9] = w * h;
    }
    // children occurrences always have larger ids than their parents
    for occ in graph.occurrences.iter().rev() {
        let mut f = [0.0; FEATURE_DIM];
        f[DeviceKind::SubCircuit.index()] = 1.0;
        let n = occ.members.len();
        if n > 0 {
            let area: f64 = occ.members.iter().map(|&m| out[m][9]).sum();
            f[7] = area.sqrt();
            f[8] = area.sqrt();
            f[9] = area;
            for k in 10..FEATURE_DIM {
                f[k] = occ.members.iter().map(|&m| out[m][k]).sum::<f64>() / n as f64;
            }
        }
        out[occ.node] = f;
    }
    Ok(out)
}

/// Per-field z-score statistics for the numeric block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

pub fn fit_stats(corpus: &[NodeFeatures]) -> Result<FeatureStats> {
    if corpus.is_empty() {
        return Err(Error::Features("cannot fit statistics on an empty corpus".into()));
    }
    let n = corpus.len() as f64;
    let mut mean = vec![0.0; NUMERIC];
    let mut std = vec![0.0; NUMERIC];
    for k in 0..NUMERIC {
        let m = corpus.iter().map(|f| f[ONE_HOT + k]).sum::<f64>() / n;
        let var = corpus
            .iter()
            .map(|f| (f[ONE_HOT + k] - m).powi(2))
            .sum::<f64>()
            / n;
        mean[k] = m;
        std[k] = if var.sqrt() < MIN_STD { 1.0 } else { var.sqrt() };
    }
    Ok(FeatureStats { mean, std })
}

pub fn normalize(f: &NodeFeatures, stats: &FeatureStats) -> NodeFeatures {
    let mut out = *f;
    for k in 0..NUMERIC {
        out[ONE_HOT + k] = (f[ONE_HOT + k] - stats.mean[k]) / stats.std[k];
    }
    out
}

pub fn denormalize(f: &NodeFeatures, stats: &FeatureStats) -> NodeFeatures {
    let mut out = *f;
    for k in 0..NUMERIC {
        out[ONE_HOT + k] = f[ONE_HOT + k] * stats.std[k] + stats.mean[k];
    }
    out
}
