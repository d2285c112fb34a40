//! The instance embedding network and its prediction heads.
//!
//! Node features pass through an edge-typed convolution and a GIN layer,
//! are joined with text features, mapped to `d` dimensions and refined by
//! multi-head self-attention within each sub-circuit occurrence. Heads turn
//! the resulting embeddings into relative distances, matching
//! probabilities or net wirelengths.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::features::{NodeFeatures, FEATURE_DIM};
use crate::graph::{CircuitGraph, EdgeType};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Cat,
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub use_text: bool,
    pub use_attention: bool,
    pub use_graph: bool,
    pub head: Head,
    pub text_dim: usize,
    pub gnn_hidden: usize,
    pub gnn_out: usize,
    pub d: usize,
    pub heads: usize,
    pub d_head: usize,
    pub fc_hidden: usize,
    pub metric_dim: usize,
    pub lse_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_text: true,
            use_attention: true,
            use_graph: true,
            head: Head::Norm,
            text_dim: 128,
            gnn_hidden: 64,
            gnn_out: 32,
            d: 64,
            heads: 4,
            d_head: 16,
            fc_hidden: 128,
            metric_dim: 64,
            lse_temperature: 0.1,
        }
    }
}

impl ModelConfig {
    /// Parse a variant name such as `TAG-NORM`, `G-CAT` or `TA-NORM`.
    pub fn variant(name: &str) -> Result<Self> {
        let (flags, head) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("bad variant `{name}`")))?;
        let head = match head.to_ascii_uppercase().as_str() {
            "CAT" => Head::Cat,
            "NORM" => Head::Norm,
            _ => return Err(Error::Config(format!("bad head in `{name}`"))),
        };
        let flags = flags.to_ascii_uppercase();
        if flags.is_empty() || flags.chars().any(|c| !"TAG".contains(c)) {
            return Err(Error::Config(format!("bad flags in `{name}`")));
        }
        let cfg = Self {
            use_text: flags.contains('T'),
            use_attention: flags.contains('A'),
            use_graph: flags.contains('G'),
            head,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant_name(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.use_text, 'T'), (self.use_attention, 'A'), (self.use_graph, 'G')] {
            if on {
                s.push(c);
            }
        }
        let head = match self.head {
            Head::Cat => "CAT",
            Head::Norm => "NORM",
        };
        format!("{s}-{head}")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_text && !self.use_graph {
            return Err(Error::Config("model needs text or graph input".into()));
        }
        if self.heads * self.d_head != self.d {
            return Err(Error::Config(format!(
                "{} heads of width {} do not make d = {}",
                self.heads, self.d_head, self.d
            )));
        }
        if self.lse_temperature <= 0.0 {
            return Err(Error::Config("lse temperature must be positive".into()));
        }
        Ok(())
    }

    fn combine_in(&self) -> usize {
        let mut n = 0;
        if self.use_graph {
            n += self.gnn_out;
        }
        if self.use_text {
            n += self.text_dim;
        }
        n
    }
}

/// Per-design tensors the network consumes, built once and reused.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    n: usize,
    // Per edge type, incoming edges weighted by 1 / in-degree.
    conv: Vec<Arc<SparseMatrix>>,
    // Identity plus one entry per incoming edge.
    gin: Arc<SparseMatrix>,
    features: Tensor,
    text: Option<Tensor>,
    groups: Vec<Vec<usize>>,
}

impl GraphInputs {
    pub fn new(graph: &CircuitGraph, features: &[NodeFeatures], text: Option<&[Vec<f64>]>) -> Result<Self> {
        let n = graph.len();
        if features.len() != n {
            return Err(Error::Features(format!("{} feature rows for {n} nodes", features.len())));
        }
        let mut conv: Vec<SparseMatrix> = (0..EdgeType::ALL.len()).map(|_| SparseMatrix::new(n, n)).collect();
        let mut gin = SparseMatrix::new(n, n);
        for i in 0..n {
            let inc = graph.incoming(i);
            gin.push(i, i, 1.0);
            for &(j, ty) in inc {
                conv[ty.index()].push(i, j, 1.0 / inc.len() as f64);
                gin.push(i, j, 1.0);
            }
        }
        let text = match text {
            Some(rows) => {
                if rows.len() != n {
                    return Err(Error::Features(format!("{} text rows for {n} nodes", rows.len())));
                }
                Some(Tensor::from_rows(rows)?)
            }
            None => None,
        };
        let feats: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
        Ok(Self {
            n,
            conv: conv.into_iter().map(Arc::new).collect(),
            gin: Arc::new(gin),
            features: Tensor::from_rows(&feats)?,
            text,
            groups: graph.occurrences.iter().map(|o| o.members.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn text(&self) -> Option<&Tensor> {
        self.text.as_ref()
    }
}

/// All `(a, b)` with `a < b < n`, in lexicographic order.
pub fn unordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            out.push((a, b));
        }
    }
    out
}

/// Distance of every member pair relative to the largest one, computed
/// directly on fixed vectors.
pub fn zero_shot_distances(rows: &[&[f64]]) -> Vec<f64> {
    let d: Vec<f64> = unordered_pairs(rows.len())
        .into_iter()
        .map(|(a, b)| {
            rows[a]
                .iter()
                .zip(rows[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mx = d.iter().cloned().fold(0.0, f64::max);
    d.iter().map(|v| if mx > 0.0 { v / mx } else { 0.0 }).collect()
}

pub const EMBEDDING_PREFIXES: [&str; 4] = ["conv.", "gin.", "combine.", "msa."];

#[derive(Debug, Clone, PartialEq)]
pub struct TagModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl TagModel {
    /// Fresh model with Glorot-uniform weights, zero biases and unit
    /// layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Init {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        if c.use_graph {
            b.weight("conv.self", FEATURE_DIM, c.gnn_hidden)?;
            for ty in EdgeType::ALL {
                b.weight(&format!("conv.{}", ty.name()), FEATURE_DIM, c.gnn_hidden)?;
            }
            b.weight("gin.w", c.gnn_hidden, c.gnn_out)?;
        }
        b.weight("combine.w", c.combine_in(), c.d)?;
        if c.use_attention {
            b.msa("msa", c)?;
        }
        b.constant("norm.ln.gamma", 1, c.d, 1.0)?;
        b.constant("norm.ln.beta", 1, c.d, 0.0)?;
        b.dense("norm.fc1", c.d, c.fc_hidden)?;
        b.dense("norm.fc2", c.fc_hidden, c.metric_dim)?;
        for head in ["cat", "match"] {
            b.dense(&format!("{head}.fc1"), 2 * c.d, c.fc_hidden)?;
            b.dense(&format!("{head}.fc2"), c.fc_hidden, 1)?;
        }
        b.msa("hpwl.msa", c)?;
        b.dense("hpwl.fc1", c.d, c.fc_hidden)?;
        b.dense("hpwl.fc2", c.fc_hidden, 1)?;
        Ok(Self { config, params: b.store })
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .id(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    /// Ids of parameters whose names start with any of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| prefixes.iter().any(|p| self.params.name(id).starts_with(p)))
            .collect()
    }

    pub fn set_embedding_frozen(&mut self, frozen: bool) {
        for id in self.ids_with_prefix(&EMBEDDING_PREFIXES) {
            self.params.set_frozen(id, frozen);
        }
    }

    fn p(&self, t: &mut Tape, name: &str) -> Result<Var> {
        Ok(t.param(&self.params, self.id(name)?))
    }

    fn linear(&self, t: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(t, &format!("{prefix}.w"))?;
        let b = self.p(t, &format!("{prefix}.b"))?;
        let y = t.matmul(x, w)?;
        t.add_row(y, b)
    }

    /// `ReLU(X·W_self + Σ_e A_e·X·W_e)` with `A_e` the in-degree-normalized
    /// incoming adjacency of edge type `e`.
    pub fn edge_typed_conv(&self, t: &mut Tape, g: &GraphInputs, x: Var) -> Result<Var> {
        let w = self.p(t, "conv.self")?;
        let mut acc = t.matmul(x, w)?;
        for ty in EdgeType::ALL {
            let a = &g.conv[ty.index()];
            if a.nnz() == 0 {
                continue;
            }
            let agg = t.spmm(a.clone(), x)?;
            let w = self.p(t, &format!("conv.{}", ty.name()))?;
            let m = t.matmul(agg, w)?;
            acc = t.add(acc, m)?;
        }
        Ok(t.relu(acc))
    }

    /// `(H + Σ_{incoming} H_j)·W`, one term per incoming edge.
    pub fn gin_layer(&self, t: &mut Tape, g: &GraphInputs, h: Var) -> Result<Var> {
        let s = t.spmm(g.gin.clone(), h)?;
        let w = self.p(t, "gin.w")?;
        t.matmul(s, w)
    }

    /// Multi-head self-attention over the rows of `z`, without positional
    /// terms.
    pub fn msa(&self, t: &mut Tape, prefix: &str, z: Var) -> Result<Var> {
        let c = &self.config;
        let scale = 1.0 / (c.d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let u = self.p(t, &format!("{prefix}.u{h}"))?;
            let qkv = t.matmul(z, u)?;
            let q = t.slice_cols(qkv, 0, c.d_head)?;
            let k = t.slice_cols(qkv, c.d_head, 2 * c.d_head)?;
            let v = t.slice_cols(qkv, 2 * c.d_head, 3 * c.d_head)?;
            let kt = t.transpose(k);
            let logits = t.matmul(q, kt)?;
            let logits = t.scale(logits, scale);
            let a = t.row_softmax(logits);
            heads.push(t.matmul_unordered(a, v)?);
        }
        let cat = t.concat(&heads, 1)?;
        let out = self.p(t, &format!("{prefix}.out"))?;
        t.matmul(cat, out)
    }

    /// Instance embeddings `Z`, one `d`-row per graph node.
    pub fn embed(&self, t: &mut Tape, g: &GraphInputs) -> Result<Var> {
        let c = &self.config;
        let mut parts = Vec::new();
        if c.use_graph {
            let x = t.constant(g.features.clone());
            let h1 = self.edge_typed_conv(t, g, x)?;
            parts.push(self.gin_layer(t, g, h1)?);
        }
        if c.use_text {
            let text = g
                .text
                .clone()
                .ok_or_else(|| Error::Features("text features required by the model".into()))?;
            if text.cols() != c.text_dim {
                return Err(Error::Features(format!(
                    "text features are {} wide, model expects {}",
                    text.cols(),
                    c.text_dim
                )));
            }
            parts.push(t.constant(text));
        }
        let hc = if parts.len() == 1 { parts[0] } else { t.concat(&parts, 1)? };
        let w = self.p(t, "combine.w")?;
        let h = t.matmul(hc, w)?;
        if !c.use_attention {
            return Ok(h);
        }
        let mut order = Vec::with_capacity(g.n);
        let mut blocks = Vec::new();
        let mut grouped = vec![false; g.n];
        for members in g.groups.iter().filter(|m| !m.is_empty()) {
            let rows = t.gather_rows(h, members)?;
            blocks.push(self.msa(t, "msa", rows)?);
            order.extend_from_slice(members);
            members.iter().for_each(|&m| grouped[m] = true);
        }
        let rest: Vec<usize> = (0..g.n).filter(|&i| !grouped[i]).collect();
        if !rest.is_empty() {
            blocks.push(t.gather_rows(h, &rest)?);
            order.extend(rest);
        }
        let stacked = t.concat(&blocks, 0)?;
        let mut inverse = vec![0; g.n];
        for (pos, &node) in order.iter().enumerate() {
            inverse[node] = pos;
        }
        t.gather_rows(stacked, &inverse)
    }

    /// Embeddings without gradient bookkeeping.
    pub fn embed_values(&self, g: &GraphInputs) -> Result<Tensor> {
        let mut t = Tape::new();
        let z = self.embed(&mut t, g)?;
        Ok(t.value(z).clone())
    }

    /// Metric-space rows `FC(LayerNorm(Z[members]))`.
    pub fn norm_embedding(&self, t: &mut Tape, z: Var, members: &[usize]) -> Result<Var> {
        let rows = t.gather_rows(z, members)?;
        let gamma = self.p(t, "norm.ln.gamma")?;
        let beta = self.p(t, "norm.ln.beta")?;
        let ln = t.layer_norm(rows, gamma, beta)?;
        let h = self.linear(t, ln, "norm.fc1")?;
        let h = t.relu(h);
        self.linear(t, h, "norm.fc2")
    }

    /// Predicted relative distance of every member pair, in
    /// [`unordered_pairs`] order, as a column.
    ///
    /// Each pairwise metric distance is divided by a smooth maximum
    /// `τ·log Σ exp(d/τ)` over all pairs of the group.
    pub fn dist_norm(&self, t: &mut Tape, z: Var, members: &[usize]) -> Result<Var> {
        if members.len() < 2 {
            return Err(Error::Dataset("distance head needs at least two instances".into()));
        }
        let e = self.norm_embedding(t, z, members)?;
        let (is, js): (Vec<usize>, Vec<usize>) = unordered_pairs(members.len()).into_iter().unzip();
        let a = t.gather_rows(e, &is)?;
        let b = t.gather_rows(e, &js)?;
        let diff = t.sub(a, b)?;
        let d = t.l2_norm_rows(diff);
        let tau = self.config.lse_temperature;
        let s = t.scale(d, 1.0 / tau);
        let lse = t.logsumexp(s);
        let den = t.scale(lse, tau);
        t.div_scalar(d, den)
    }

    fn pair_fc(&self, t: &mut Tape, head: &str, z: Var, is: &[usize], js: &[usize]) -> Result<Var> {
        let a = t.gather_rows(z, is)?;
        let b = t.gather_rows(z, js)?;
        let x = t.concat(&[a, b], 1)?;
        let h = self.linear(t, x, &format!("{head}.fc1"))?;
        let h = t.relu(h);
        let y = self.linear(t, h, &format!("{head}.fc2"))?;
        Ok(t.sigmoid(y))
    }

    fn symmetric_pair_fc(&self, t: &mut Tape, head: &str, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let fwd = self.pair_fc(t, head, z, &is, &js)?;
        let bwd = self.pair_fc(t, head, z, &js, &is)?;
        let s = t.add(fwd, bwd)?;
        Ok(t.scale(s, 0.5))
    }

    /// `sigmoid(FC([z_i; z_j]))` for node pairs in the given order.
    pub fn dist_cat_ordered(&self, t: &mut Tape, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        self.pair_fc(t, "cat", z, &is, &js)
    }

    /// Concatenation head averaged over both pair orders.
    pub fn dist_cat(&self, t: &mut Tape, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.symmetric_pair_fc(t, "cat", z, pairs)
    }

    /// Match probability of node pairs, averaged over both orders.
    pub fn matching(&self, t: &mut Tape, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.symmetric_pair_fc(t, "match", z, pairs)
    }

    /// Distance predictions of the configured head for all member pairs.
    pub fn dist(&self, t: &mut Tape, z: Var, members: &[usize]) -> Result<Var> {
        match self.config.head {
            Head::Norm => self.dist_norm(t, z, members),
            Head::Cat => {
                let pairs: Vec<_> = unordered_pairs(members.len())
                    .into_iter()
                    .map(|(a, b)| (members[a], members[b]))
                    .collect();
                self.dist_cat(t, z, &pairs)
            }
        }
    }

    /// Normalized wirelength of a net from the embeddings of its pins.
    pub fn hpwl(&self, t: &mut Tape, z: Var, pins: &[usize]) -> Result<Var> {
        if pins.len() < 2 {
            return Err(Error::Dataset("wirelength head needs at least two pins".into()));
        }
        let rows = t.gather_rows(z, pins)?;
        let m = self.msa(t, "hpwl.msa", rows)?;
        let pooled = t.mean_axis(m, 0)?;
        let h = self.linear(t, pooled, "hpwl.fc1")?;
        let h = t.relu(h);
        let y = self.linear(t, h, "hpwl.fc2")?;
        Ok(t.relu(y))
    }
}

struct Init {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let u = Uniform::new_inclusive(-limit, limit);
        let data = (0..fan_in * fan_out).map(|_| u.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::matrix(fan_in, fan_out, data))?;
        Ok(())
    }

    fn constant(&mut self, name: &str, r: usize, c: usize, v: f64) -> Result<()> {
        self.store.add(name, Tensor::matrix(r, c, vec![v; r * c]))?;
        Ok(())
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), fan_in, fan_out)?;
        self.constant(&format!("{prefix}.b"), 1, fan_out, 0.0)
    }

    fn msa(&mut self, prefix: &str, c: &ModelConfig) -> Result<()> {
        for h in 0..c.heads {
            self.weight(&format!("{prefix}.u{h}"), c.d, 3 * c.d_head)?;
        }
        self.weight(&format!("{prefix}.out"), c.heads * c.d_head, c.d)
    }
}
