//! Dataset assembly, distance pre-training, head fine-tuning and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape, Tensor, Var};
use crate::features::{fit_stats, normalize, raw_features, FeatureStats, GeometryConfig, NodeFeatures};
use crate::graph::{build_graph, CircuitGraph};
use crate::model::{unordered_pairs, zero_shot_distances, GraphInputs, Head, TagModel};
use crate::netlist::{net_hpwl, relative_distance, Design, MatchLabelDB, PinRole, PlacementDB};
use crate::textembed::{extract_sentences, instance_text_features, Sentence, WordEmbeddingModel};
use crate::{Error, Result};

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub mae: f64,
    pub smape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub ppv: f64,
    pub f1: f64,
    /// Rates whose denominator was zero; they are reported as 0.
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Regression(RegressionMetrics),
    Classification(ClassificationMetrics),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Regression,
    Classification,
}

pub const THRESHOLD: f64 = 0.5;

pub fn compute_metrics(y: &[f64], pred: &[f64], kind: MetricKind) -> Result<Metrics> {
    Ok(match kind {
        MetricKind::Regression => Metrics::Regression(regression_metrics(y, pred)?),
        MetricKind::Classification => Metrics::Classification(classification_metrics(y, pred)?),
    })
}

pub fn regression_metrics(y: &[f64], pred: &[f64]) -> Result<RegressionMetrics> {
    if y.len() != pred.len() {
        return Err(Error::Metrics(format!("{} targets vs {} predictions", y.len(), pred.len())));
    }
    if y.len() < 2 {
        return Err(Error::Metrics("regression metrics need at least two values".into()));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let mae = y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let smape = y
        .iter()
        .zip(pred)
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (a - b).abs() / den
            }
        })
        .sum::<f64>()
        / n;
    Ok(RegressionMetrics {
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        mae,
        smape,
    })
}

/// Confusion-matrix rates with both labels and scores thresholded at 0.5.
pub fn classification_metrics(y: &[f64], score: &[f64]) -> Result<ClassificationMetrics> {
    if y.len() != score.len() {
        return Err(Error::Metrics(format!("{} labels vs {} scores", y.len(), score.len())));
    }
    if y.is_empty() {
        return Err(Error::Metrics("classification metrics need at least one value".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (a, s) in y.iter().zip(score) {
        match (*a >= THRESHOLD, *s >= THRESHOLD) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fneg += 1,
        }
    }
    let mut undefined = Vec::new();
    let mut rate = |num: usize, den: usize, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let acc = (tp + tn) as f64 / y.len() as f64;
    let tpr = rate(tp, tp + fneg, "tpr");
    let fpr = rate(fp, fp + tn, "fpr");
    let ppv = rate(tp, tp + fp, "ppv");
    let f1 = rate(2 * tp, 2 * tp + fp + fneg, "f1");
    Ok(ClassificationMetrics {
        acc,
        tpr,
        fpr,
        ppv,
        f1,
        undefined,
    })
}

// ---------------------------------------------------------------- data

/// A parsed design together with its instance graph.
#[derive(Debug, Clone)]
pub struct DesignData {
    pub design: Design,
    pub graph: CircuitGraph,
}

/// Designs with their placements and match labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub designs: Vec<DesignData>,
    pub placement: PlacementDB,
    pub labels: MatchLabelDB,
}

impl Dataset {
    pub fn new(designs: Vec<Design>, placement: PlacementDB, labels: MatchLabelDB) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(designs.len());
        for design in designs {
            design.validate()?;
            placement.check_against(&design)?;
            labels.check_against(&design)?;
            if !seen.insert(design.name.clone()) {
                return Err(Error::Dataset(format!("design `{}` given twice", design.name)));
            }
            let graph = build_graph(&design);
            out.push(DesignData { design, graph });
        }
        Ok(Self {
            designs: out,
            placement,
            labels,
        })
    }

    pub fn sentences(&self) -> Vec<Sentence> {
        self.designs.iter().flat_map(|d| extract_sentences(&d.design)).collect()
    }

    pub fn raw_features(&self, geom: &GeometryConfig) -> Result<Vec<Vec<NodeFeatures>>> {
        self.designs
            .iter()
            .map(|d| raw_features(&d.design, &d.graph, None, geom))
            .collect()
    }

    /// Feature statistics over every node of the given designs.
    pub fn fit_stats(&self, designs: &[usize], geom: &GeometryConfig) -> Result<FeatureStats> {
        let mut all = Vec::new();
        for &i in designs {
            let d = &self.designs[i];
            all.extend(raw_features(&d.design, &d.graph, None, geom)?);
        }
        fit_stats(&all)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.designs.iter().position(|d| d.design.name == name)
    }

    /// Network inputs per design; text rows only when a word model is given.
    pub fn inputs(
        &self,
        stats: &FeatureStats,
        geom: &GeometryConfig,
        text: Option<&WordEmbeddingModel>,
    ) -> Result<Vec<GraphInputs>> {
        self.designs
            .iter()
            .map(|d| {
                let feats: Vec<NodeFeatures> = raw_features(&d.design, &d.graph, None, geom)?
                    .iter()
                    .map(|f| normalize(f, stats))
                    .collect();
                let rows = text.map(|m| instance_text_features(&d.graph, m));
                GraphInputs::new(&d.graph, &feats, rows.as_deref())
            })
            .collect()
    }
}

/// One sub-circuit occurrence with its pair targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub design: usize,
    pub occurrence: usize,
    pub def: String,
    pub path: String,
    /// Node ids whose pairs are scored, at most `max_members` of them.
    pub nodes: Vec<usize>,
    /// Relative distance of every node pair, in [`unordered_pairs`] order.
    pub targets: Vec<f64>,
    pub fingerprint: String,
}

impl Sample {
    pub fn label(&self, data: &Dataset) -> String {
        format!("{}:{} ({})", data.designs[self.design].design.name, self.path, self.def)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub min_members: usize,
    pub max_members: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            min_members: 4,
            max_members: 20,
        }
    }
}

/// Definition name plus the sorted multiset of member (kind, type, degree).
pub fn fingerprint(data: &DesignData, occurrence: usize) -> Result<String> {
    let occ = &data.graph.occurrences[occurrence];
    let mut items = Vec::with_capacity(occ.members.len());
    for &m in &occ.members {
        let n = &data.graph.nodes[m];
        items.push(format!("{}:{}:{}", n.kind.name(), n.type_name, data.graph.neighbors(m)?.len()));
    }
    items.sort();
    Ok(format!("{}|{}", occ.def, items.join(",")))
}

/// Samples of every fully placed occurrence of design `idx` with at least
/// `min_members` members. Larger ones keep a random `max_members` subset.
pub fn design_samples(
    data: &Dataset,
    idx: usize,
    cfg: &SplitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let d = &data.designs[idx];
    let mut out = Vec::new();
    for occ in &d.graph.occurrences {
        if occ.members.len() < cfg.min_members.max(2) {
            continue;
        }
        let def = &d.design.subckts[&occ.def];
        let placed = occ
            .members
            .iter()
            .all(|&m| data.placement.get(&def.name, &d.graph.nodes[m].instance).is_some());
        if !placed {
            continue;
        }
        let nodes: Vec<usize> = if occ.members.len() > cfg.max_members {
            let mut pick = sample(rng, occ.members.len(), cfg.max_members).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| occ.members[k]).collect()
        } else {
            occ.members.clone()
        };
        let name = |k: usize| d.graph.nodes[nodes[k]].instance.as_str();
        let targets = unordered_pairs(nodes.len())
            .into_iter()
            .map(|(a, b)| relative_distance(def, name(a), name(b), &data.placement))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            design: idx,
            occurrence: occ.id,
            def: occ.def.clone(),
            path: occ.path.clone(),
            nodes,
            targets,
            fingerprint: fingerprint(d, occ.id)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub train_samples: Vec<Sample>,
    pub val_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
    /// Validation and test samples dropped because training has them.
    pub removed: usize,
}

impl DatasetSplit {
    pub fn train_designs(&self, data: &Dataset) -> Vec<usize> {
        self.train.iter().filter_map(|n| data.index_of(n)).collect()
    }
}

/// Shuffle designs 60/20/20 and build their samples. Validation and test
/// sub-circuits whose fingerprint occurs in training are dropped.
pub fn split_dataset(data: &Dataset, cfg: &SplitConfig, seed: u64) -> Result<DatasetSplit> {
    let n = data.designs.len();
    if n < 5 {
        return Err(Error::Dataset(format!("need at least 5 designs to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let held = n / 5;
    let n_train = n - 2 * held;
    let parts = [&order[..n_train], &order[n_train..n_train + held], &order[n_train + held..]];
    let mut samples: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for part in parts {
        let mut s = Vec::new();
        for &i in part {
            s.extend(design_samples(data, i, cfg, &mut rng)?);
        }
        samples.push(s);
    }
    let seen: BTreeSet<String> = samples[0].iter().map(|s| s.fingerprint.clone()).collect();
    let mut removed = 0;
    for s in &mut samples[1..] {
        let before = s.len();
        s.retain(|x| !seen.contains(&x.fingerprint));
        removed += before - s.len();
    }
    let names = |p: &[usize]| p.iter().map(|&i| data.designs[i].design.name.clone()).collect();
    let test_samples = samples.pop().expect("three parts");
    let val_samples = samples.pop().expect("three parts");
    let train_samples = samples.pop().expect("three parts");
    Ok(DatasetSplit {
        train: names(parts[0]),
        val: names(parts[1]),
        test: names(parts[2]),
        train_samples,
        val_samples,
        test_samples,
        removed,
    })
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Share of the training sub-circuits used for fine-tuning.
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            epochs: 200,
            lr: 1e-3,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Sub-circuits per optimizer step.
    pub batch_size: usize,
    pub split: SplitConfig,
    pub finetune: FinetuneConfig,
    /// Worker threads for evaluation; training itself is sequential.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            patience: 20,
            batch_size: 8,
            split: SplitConfig::default(),
            finetune: FinetuneConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.finetune.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch size and threads must be positive".into()));
        }
        if !(self.finetune.fraction > 0.0 && self.finetune.fraction <= 1.0) {
            return Err(Error::Config("fine-tune fraction must lie in (0, 1]".into()));
        }
        if self.split.min_members < 2 || self.split.max_members < self.split.min_members {
            return Err(Error::Config("invalid sub-circuit size limits".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: Option<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 when none was recorded.
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,r2,mae,smape,acc,tpr,fpr,ppv,f1\n");
        for r in &self.records {
            let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
            let (reg, cls) = match &r.val {
                Some(Metrics::Regression(m)) => ([m.r2, Some(m.mae), Some(m.smape)], [None; 5]),
                Some(Metrics::Classification(m)) => {
                    ([None; 3], [Some(m.acc), Some(m.tpr), Some(m.fpr), Some(m.ppv), Some(m.f1)])
                }
                None => ([None; 3], [None; 5]),
            };
            let _ = write!(out, "{},{:.17e},{:.17e}", r.epoch, r.train_loss, r.val_loss);
            for v in reg.into_iter().chain(cls) {
                let _ = write!(out, ",{}", f(v));
            }
            out.push('\n');
        }
        out
    }
}

/// Run `f` over `0..n` on up to `threads` scoped workers, results in order.
pub fn par_map<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| s.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Consecutive runs of items sharing a design, cut into chunks of `size`.
fn design_batches<T>(items: &[T], design: impl Fn(&T) -> usize, size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, it) in items.iter().enumerate() {
        groups.entry(design(it)).or_default().push(k);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sq_error(pred: &[f64], y: &[f64]) -> f64 {
    mean(&pred.iter().zip(y).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>())
}

/// Predictions and losses of a distance model on a sample list.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEval {
    /// Mean over samples of the per-sample squared error.
    pub loss: f64,
    pub targets: Vec<f64>,
    pub predictions: Vec<f64>,
}

impl DistanceEval {
    pub fn metrics(&self) -> Result<RegressionMetrics> {
        regression_metrics(&self.targets, &self.predictions)
    }
}

pub fn evaluate_distance(
    model: &TagModel,
    inputs: &[GraphInputs],
    samples: &[Sample],
    threads: usize,
) -> Result<DistanceEval> {
    let batches = design_batches(samples, |s| s.design, usize::MAX);
    let per: Vec<Vec<(f64, Vec<f64>)>> = par_map(batches.len(), threads, |b| {
        let idx = &batches[b];
        let z = model.embed_values(&inputs[samples[idx[0]].design])?;
        let mut t = Tape::new();
        let zv = t.constant(z);
        idx.iter()
            .map(|&k| {
                let s = &samples[k];
                let p = model.dist(&mut t, zv, &s.nodes)?;
                let pred = t.value(p).data().to_vec();
                Ok((sq_error(&pred, &s.targets), pred))
            })
            .collect()
    })?;
    let mut losses = vec![0.0; samples.len()];
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); samples.len()];
    for (idx, res) in batches.iter().zip(per) {
        for (&k, (l, p)) in idx.iter().zip(res) {
            losses[k] = l;
            preds[k] = p;
        }
    }
    Ok(DistanceEval {
        loss: mean(&losses),
        targets: samples.iter().flat_map(|s| s.targets.iter().copied()).collect(),
        predictions: preds.into_iter().flatten().collect(),
    })
}

fn distance_val(model: &TagModel, inputs: &[GraphInputs], samples: &[Sample], threads: usize) -> Result<(f64, Option<Metrics>)> {
    if samples.is_empty() {
        return Ok((f64::NAN, None));
    }
    let ev = evaluate_distance(model, inputs, samples, threads)?;
    let m = ev.metrics().ok().map(Metrics::Regression);
    Ok((ev.loss, m))
}

/// Train embeddings and the configured distance head with Adam on the
/// mean squared error of every sub-circuit pair.
///
/// Each step accumulates up to `batch_size` sub-circuits of one design.
/// Training stops after `patience` epochs without a lower validation
/// loss, and the parameters of the best validation epoch are restored.
/// Without validation samples the training loss decides.
pub fn train_distance(
    model: &mut TagModel,
    data: &Dataset,
    inputs: &[GraphInputs],
    split: &DatasetSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    cfg.validate()?;
    if split.train_samples.is_empty() {
        return Err(Error::Dataset("no training sub-circuits".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    model.params.reset_optimizer();
    let samples = &split.train_samples;
    let mut batches = design_batches(samples, |s| s.design, cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.params.snapshot());
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        batches.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(samples.len());
        for batch in &batches {
            model.params.zero_grad();
            let mut t = Tape::new();
            let z = model.embed(&mut t, &inputs[samples[batch[0]].design])?;
            let mut terms = Vec::with_capacity(batch.len());
            let mut preds = Vec::with_capacity(batch.len());
            for &k in batch {
                let s = &samples[k];
                let p = model.dist(&mut t, z, &s.nodes)?;
                let l = t.mse_loss(p, &s.targets)?;
                let lv = t.value(l).item();
                if !lv.is_finite() {
                    return Err(non_finite(data, s, epoch));
                }
                losses.push(lv);
                preds.push(p);
                terms.push(l);
            }
            let total = sum_vars(&mut t, &terms)?;
            let loss = t.scale(total, 1.0 / terms.len() as f64);
            t.backward_into(loss, &mut model.params)?;
            if !model.params.grads_finite() {
                let bad = batch
                    .iter()
                    .zip(&preds)
                    .find(|(_, p)| t.value(**p).data().iter().any(|v| *v == 0.0 || !v.is_finite()))
                    .map_or(batch[0], |(k, _)| *k);
                return Err(non_finite(data, &samples[bad], epoch));
            }
            model.params.adam_step(&adam)?;
        }
        let train_loss = mean(&losses);
        let (val_loss, val) = distance_val(model, inputs, &split.val_samples, cfg.threads)?;
        let score = if split.val_samples.is_empty() { train_loss } else { val_loss };
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val,
        });
        if score < best.0 {
            best = (score, model.params.snapshot());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params.restore(&best.1);
    Ok(history)
}

fn non_finite(data: &Dataset, s: &Sample, epoch: usize) -> Error {
    Error::NonFinite {
        subckt: s.label(data),
        epoch,
    }
}

fn sum_vars(t: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(acc)
}

/// Distance predictions computed directly from word-embedding rows, with
/// no trained network.
pub fn zero_shot_text(data: &Dataset, text: &WordEmbeddingModel, samples: &[Sample]) -> Result<RegressionMetrics> {
    let mut cache: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let (mut y, mut pred) = (Vec::new(), Vec::new());
    for s in samples {
        let rows = cache
            .entry(s.design)
            .or_insert_with(|| instance_text_features(&data.designs[s.design].graph, text));
        let picked: Vec<&[f64]> = s.nodes.iter().map(|&n| rows[n].as_slice()).collect();
        pred.extend(zero_shot_distances(&picked));
        y.extend_from_slice(&s.targets);
    }
    regression_metrics(&y, &pred)
}

// ---------------------------------------------------------------- heads

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadTask {
    Matching,
    Hpwl,
}

/// Fine-tuning data of one sub-circuit occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    pub design: usize,
    pub label: String,
    /// Labeled member pairs (node ids).
    pub positives: Vec<(usize, usize)>,
    /// Unlabeled member pairs to draw negatives from.
    pub pool: Vec<(usize, usize)>,
    /// Pin node ids and normalized wirelength of each scored net.
    pub nets: Vec<(Vec<usize>, f64)>,
}

/// Fine-tuning sets for the occurrences of `samples` that carry data for
/// `task`: at least one labeled pair, or at least one net with two pins.
pub fn head_sets(data: &Dataset, samples: &[Sample], task: HeadTask) -> Result<Vec<HeadSet>> {
    let mut out = Vec::new();
    for s in samples {
        let d = &data.designs[s.design];
        let occ = &d.graph.occurrences[s.occurrence];
        let def = &d.design.subckts[&occ.def];
        let node_of: BTreeMap<usize, usize> = occ
            .members
            .iter()
            .map(|&m| (d.graph.nodes[m].inst_index.expect("member index"), m))
            .collect();
        let mut set = HeadSet {
            design: s.design,
            label: s.label(data),
            positives: Vec::new(),
            pool: Vec::new(),
            nets: Vec::new(),
        };
        match task {
            HeadTask::Matching => {
                for (a, b) in unordered_pairs(occ.members.len()) {
                    let (na, nb) = (occ.members[a], occ.members[b]);
                    let (ia, ib) = (&d.graph.nodes[na].instance, &d.graph.nodes[nb].instance);
                    if data.labels.is_labeled(&def.name, ia, ib) {
                        set.positives.push((na, nb));
                    } else {
                        set.pool.push((na, nb));
                    }
                }
                if set.positives.is_empty() {
                    continue;
                }
            }
            HeadTask::Hpwl => {
                for (net, pins) in &def.nets {
                    if d.design.is_global(net) {
                        continue;
                    }
                    let nodes: BTreeSet<usize> = pins
                        .iter()
                        .filter(|(_, role)| *role != PinRole::Bulk)
                        .filter_map(|(idx, _)| node_of.get(idx).copied())
                        .collect();
                    if nodes.len() < 2 {
                        continue;
                    }
                    set.nets.push((nodes.into_iter().collect(), net_hpwl(def, net, &data.placement)?));
                }
                if set.nets.is_empty() {
                    continue;
                }
            }
        }
        out.push(set);
    }
    Ok(out)
}

fn head_forward(
    model: &TagModel,
    t: &mut Tape,
    z: Var,
    set: &HeadSet,
    task: HeadTask,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<f64>)> {
    match task {
        HeadTask::Matching => {
            let k = set.positives.len().min(set.pool.len());
            let mut pairs = set.positives.clone();
            let mut picked = sample(rng, set.pool.len(), k).into_vec();
            picked.sort_unstable();
            pairs.extend(picked.into_iter().map(|i| set.pool[i]));
            let mut y = vec![1.0; set.positives.len()];
            y.resize(pairs.len(), 0.0);
            Ok((model.matching(t, z, &pairs)?, y))
        }
        HeadTask::Hpwl => {
            let mut outs = Vec::with_capacity(set.nets.len());
            for (pins, _) in &set.nets {
                outs.push(model.hpwl(t, z, pins)?);
            }
            let y = set.nets.iter().map(|(_, v)| *v).collect();
            let p = if outs.len() == 1 { outs[0] } else { t.concat(&outs, 0)? };
            Ok((p, y))
        }
    }
}

fn head_loss(t: &mut Tape, task: HeadTask, p: Var, y: &[f64]) -> Result<Var> {
    match task {
        HeadTask::Matching => t.bce_loss(p, y),
        HeadTask::Hpwl => t.mse_loss(p, y),
    }
}

fn head_loss_value(task: HeadTask, p: &[f64], y: &[f64]) -> f64 {
    match task {
        HeadTask::Matching => mean(
            &p.iter()
                .zip(y)
                .map(|(p, y)| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .collect::<Vec<_>>(),
        ),
        HeadTask::Hpwl => sq_error(p, y),
    }
}

const EVAL_STREAM: u64 = u64::MAX;

/// Predictions of a head on fixed evaluation sets; matching negatives are
/// drawn with a per-set generator so results do not depend on threading.
pub fn evaluate_head(
    model: &TagModel,
    inputs: &[GraphInputs],
    sets: &[HeadSet],
    task: HeadTask,
    seed: u64,
    threads: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    evaluate_head_cached(model, inputs, sets, task, seed, threads, &BTreeMap::new())
}

// Embeddings found in `cache` are used as is; the rest are recomputed.
fn evaluate_head_cached(
    model: &TagModel,
    inputs: &[GraphInputs],
    sets: &[HeadSet],
    task: HeadTask,
    seed: u64,
    threads: usize,
    cache: &BTreeMap<usize, Tensor>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let batches = design_batches(sets, |s| s.design, usize::MAX);
    let per: Vec<Vec<(f64, Vec<f64>, Vec<f64>)>> = par_map(batches.len(), threads, |b| {
        let idx = &batches[b];
        let d = sets[idx[0]].design;
        let z = match cache.get(&d) {
            Some(z) => z.clone(),
            None => model.embed_values(&inputs[d])?,
        };
        let mut t = Tape::new();
        let zv = t.constant(z);
        idx.iter()
            .map(|&k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(EVAL_STREAM - k as u64);
                let (p, y) = head_forward(model, &mut t, zv, &sets[k], task, &mut rng)?;
                let p = t.value(p).data().to_vec();
                Ok((head_loss_value(task, &p, &y), y, p))
            })
            .collect()
    })?;
    let mut rows: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = vec![None; sets.len()];
    for (idx, res) in batches.iter().zip(per) {
        for (&k, r) in idx.iter().zip(res) {
            rows[k] = Some(r);
        }
    }
    let (mut losses, mut ys, mut ps) = (Vec::new(), Vec::new(), Vec::new());
    for (l, y, p) in rows.into_iter().flatten() {
        losses.push(l);
        ys.extend(y);
        ps.extend(p);
    }
    Ok((mean(&losses), ys, ps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub metrics: Metrics,
    pub history: History,
    pub train_sets: usize,
    pub test_sets: usize,
}

fn task_metrics(task: HeadTask, y: &[f64], p: &[f64]) -> Result<Metrics> {
    compute_metrics(
        y,
        p,
        match task {
            HeadTask::Matching => MetricKind::Classification,
            HeadTask::Hpwl => MetricKind::Regression,
        },
    )
}

/// Train the matching or wirelength head on a seeded `fraction` of the
/// training sub-circuits and report test metrics.
///
/// With `frozen` set, embeddings are computed once and only head
/// parameters move; otherwise the whole network trains from its current
/// state. Matching negatives are redrawn 1:1 each epoch.
pub fn finetune_head(
    model: &mut TagModel,
    data: &Dataset,
    inputs: &[GraphInputs],
    split: &DatasetSplit,
    task: HeadTask,
    frozen: bool,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let ft = &cfg.finetune;
    let mut train = head_sets(data, &split.train_samples, task)?;
    let val = head_sets(data, &split.val_samples, task)?;
    let test = head_sets(data, &split.test_samples, task)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset(match task {
            HeadTask::Matching => "no labeled pairs".to_string(),
            HeadTask::Hpwl => "no nets with two placed pins".to_string(),
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train.shuffle(&mut rng);
    train.truncate(((train.len() as f64 * ft.fraction).ceil() as usize).max(1));
    train.sort_by_key(|s| s.design);
    if task == HeadTask::Hpwl {
        // Start the clamped output at the mean target with zero output
        // weights; a negative start would leave the ReLU without gradient.
        let y: Vec<f64> = train.iter().flat_map(|s| s.nets.iter().map(|n| n.1)).collect();
        let w = model.id("hpwl.fc2.w")?;
        model.params.value_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let b = model.id("hpwl.fc2.b")?;
        model.params.value_mut(b).data_mut()[0] = mean(&y);
    }

    model.set_embedding_frozen(frozen);
    model.params.reset_optimizer();
    let adam = AdamConfig {
        lr: ft.lr,
        ..AdamConfig::default()
    };
    let mut cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    if frozen {
        for s in train.iter().chain(&val).chain(&test) {
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(s.design) {
                e.insert(model.embed_values(&inputs[s.design])?);
            }
        }
    }
    let mut batches = design_batches(&train, |s| s.design, cfg.batch_size);
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.params.snapshot());
    let mut stale = 0;
    let result = (|| -> Result<()> {
        for epoch in 1..=ft.epochs {
            let mut erng = ChaCha8Rng::seed_from_u64(seed);
            erng.set_stream(epoch as u64);
            batches.shuffle(&mut erng);
            let mut losses = Vec::new();
            for batch in &batches {
                model.params.zero_grad();
                let mut t = Tape::new();
                let d = train[batch[0]].design;
                let z = match cache.get(&d) {
                    Some(z) => t.constant(z.clone()),
                    None => model.embed(&mut t, &inputs[d])?,
                };
                let mut terms = Vec::new();
                for &k in batch {
                    let (p, y) = head_forward(model, &mut t, z, &train[k], task, &mut erng)?;
                    let l = head_loss(&mut t, task, p, &y)?;
                    let lv = t.value(l).item();
                    if !lv.is_finite() {
                        return Err(Error::NonFinite {
                            subckt: train[k].label.clone(),
                            epoch,
                        });
                    }
                    losses.push(lv);
                    terms.push(l);
                }
                let total = sum_vars(&mut t, &terms)?;
                let loss = t.scale(total, 1.0 / terms.len() as f64);
                t.backward_into(loss, &mut model.params)?;
                if !model.params.grads_finite() {
                    return Err(Error::NonFinite {
                        subckt: train[batch[0]].label.clone(),
                        epoch,
                    });
                }
                model.params.adam_step(&adam)?;
            }
            let train_loss = mean(&losses);
            let (val_loss, val_metrics) = if val.is_empty() {
                (f64::NAN, None)
            } else {
                let (l, y, p) = evaluate_head_cached(model, inputs, &val, task, seed, cfg.threads, &cache)?;
                (l, task_metrics(task, &y, &p).ok())
            };
            let score = if val.is_empty() { train_loss } else { val_loss };
            history.records.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                val: val_metrics,
            });
            if score < best.0 {
                best = (score, model.params.snapshot());
                history.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= ft.patience {
                    break;
                }
            }
        }
        Ok(())
    })();
    model.set_embedding_frozen(false);
    result?;
    model.params.restore(&best.1);
    let (_, y, p) = evaluate_head_cached(model, inputs, &test, task, seed, cfg.threads, &cache)?;
    Ok(FinetuneReport {
        metrics: task_metrics(task, &y, &p)?,
        history,
        train_sets: train.len(),
        test_sets: test.len(),
    })
}

/// Fit a fresh model of the same configuration on the fine-tuning data,
/// training embeddings and head together.
pub fn from_scratch_head(
    like: &TagModel,
    data: &Dataset,
    inputs: &[GraphInputs],
    split: &DatasetSplit,
    task: HeadTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TagModel, FinetuneReport)> {
    let mut config = like.config.clone();
    config.head = Head::Norm;
    let mut model = TagModel::new(config, seed)?;
    let report = finetune_head(&mut model, data, inputs, split, task, false, cfg, seed)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::datagen::{generate_corpus, GenConfig};
    use crate::model::ModelConfig;
    use crate::netlist::{parse_netlist, Rect};
    use crate::textembed::{train_word_embeddings, TextConfig};

    fn corpus(designs: usize, seed: u64) -> Dataset {
        let c = generate_corpus(&GenConfig {
            seed,
            designs,
            deep_fraction: 0.0,
            ..GenConfig::default()
        })
        .unwrap();
        Dataset::new(c.designs, c.placement, c.labels).unwrap()
    }

    fn prepared(data: &Dataset, split: &DatasetSplit) -> Vec<GraphInputs> {
        let geom = GeometryConfig::default();
        let stats = data.fit_stats(&split.train_designs(data), &geom).unwrap();
        data.inputs(&stats, &geom, None).unwrap()
    }

    fn g_model(head: &str) -> TagModel {
        TagModel::new(ModelConfig::variant(head).unwrap(), 3).unwrap()
    }

    #[test]
    fn identical_prediction_is_perfect() {
        let y = [0.1, 0.5, 0.2, 0.9];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!(m.r2, Some(1.0));
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.smape, 0.0);
    }

    #[test]
    fn mean_prediction_has_zero_r2() {
        let y = [0.1, 0.5, 0.2, 0.9];
        let m = regression_metrics(&y, &[0.425; 4]).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-15);
    }

    #[test]
    fn constant_targets_leave_r2_undefined() {
        let m = regression_metrics(&[0.3, 0.3], &[0.1, 0.2]).unwrap();
        assert_eq!(m.r2, None);
        assert!(regression_metrics(&[0.3], &[0.1]).is_err());
        assert!(regression_metrics(&[0.3, 0.1], &[0.1]).is_err());
    }

    #[test]
    fn smape_zero_over_zero() {
        let m = regression_metrics(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.smape, 0.0);
        let m = regression_metrics(&[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.smape, 1.0);
    }

    #[test]
    fn all_positive_labels_flag_fpr() {
        let m = classification_metrics(&[1.0, 1.0, 1.0], &[0.9, 0.6, 0.7]).unwrap();
        assert_eq!(m.tpr, 1.0);
        assert_eq!(m.fpr, 0.0);
        assert_eq!(m.undefined, vec!["fpr".to_string()]);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn confusion_counts() {
        // tp=2 fp=1 tn=1 fn=1
        let m = classification_metrics(&[1.0, 1.0, 0.0, 0.0, 1.0], &[0.7, 0.5, 0.6, 0.1, 0.2]).unwrap();
        assert_eq!(m.acc, 0.6);
        assert_eq!(m.tpr, 2.0 / 3.0);
        assert_eq!(m.fpr, 0.5);
        assert_eq!(m.ppv, 2.0 / 3.0);
        assert_eq!(m.f1, 4.0 / 6.0);
        assert!(m.undefined.is_empty());
    }

    proptest! {
        #[test]
        fn metric_ranges(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..40)) {
            let (y, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = regression_metrics(&y, &p).unwrap();
            prop_assert!(m.r2.map_or(true, |r| r <= 1.0));
            prop_assert!(m.mae >= 0.0);
            prop_assert!((0.0..=2.0).contains(&m.smape));
            let c = classification_metrics(&y, &p).unwrap();
            for r in [c.acc, c.tpr, c.fpr, c.ppv, c.f1] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn split_allocation() {
        let data = corpus(10, 5);
        let s = split_dataset(&data, &SplitConfig::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, split_dataset(&data, &SplitConfig::default(), 1).unwrap());
        let small = corpus(4, 5);
        assert!(matches!(split_dataset(&small, &SplitConfig::default(), 1), Err(Error::Dataset(_))));
    }

    #[test]
    fn samples_respect_size_limits() {
        let data = corpus(10, 6);
        let s = split_dataset(&data, &SplitConfig::default(), 2).unwrap();
        for x in s.train_samples.iter().chain(&s.val_samples).chain(&s.test_samples) {
            assert!((4..=20).contains(&x.nodes.len()));
            assert_eq!(x.targets.len(), x.nodes.len() * (x.nodes.len() - 1) / 2);
            assert!(x.targets.iter().all(|t| (0.0..=1.0).contains(t)));
        }
        let tight = SplitConfig {
            min_members: 4,
            max_members: 5,
        };
        let s = split_dataset(&data, &tight, 2).unwrap();
        assert!(s.train_samples.iter().all(|x| x.nodes.len() <= 5));
        assert!(s.train_samples.iter().any(|x| data.designs[x.design].graph.occurrences[x.occurrence].members.len() > 5));
    }

    fn shared_corpus() -> Dataset {
        // Every design reuses `amp` with the same devices; only `d0` has
        // a small `tiny` block.
        let amp = ".SUBCKT amp a b\nMM1 a b vss vss nch_lvt_mac L=8 NF=1 NFIN=2\nMM2 b a vss vss nch_lvt_mac L=8 NF=1 NFIN=2\nMM3 a a vdd vdd pch_lvt_mac L=8 NF=1 NFIN=2\nMM4 b a vdd vdd pch_lvt_mac L=8 NF=1 NFIN=2\n.ENDS\n";
        let mut designs = Vec::new();
        let mut pl = PlacementDB::default();
        for k in 0..6 {
            let mut text = String::from(amp);
            text.push_str(".SUBCKT tiny a\nRR0 a b rupolym_m L=400 W=20\nRR1 b c rupolym_m L=400 W=20\nRR2 c a rupolym_m L=400 W=20\n.ENDS\n");
            text.push_str(&format!(".SUBCKT top{k} x y\nXA x y amp\nXT x tiny\n.ENDS\n.TOP top{k}\n"));
            let mut d = parse_netlist(&text).unwrap();
            d.name = format!("d{k}");
            for (i, n) in ["M1", "M2", "M3", "M4"].iter().enumerate() {
                pl.insert("amp", n, Rect { x: 10 * i as i64, y: 0, w: 5, h: 5 }).unwrap();
            }
            for (i, n) in ["R0", "R1", "R2"].iter().enumerate() {
                pl.insert("tiny", n, Rect { x: 10 * i as i64, y: 0, w: 5, h: 5 }).unwrap();
            }
            designs.push(d);
        }
        Dataset::new(designs, pl, MatchLabelDB::default()).unwrap()
    }

    #[test]
    fn shared_subcircuits_leave_held_out_sets() {
        let data = shared_corpus();
        let s = split_dataset(&data, &SplitConfig::default(), 0).unwrap();
        assert!(s.train_samples.iter().any(|x| x.def == "amp"));
        assert!(s.val_samples.is_empty() && s.test_samples.is_empty());
        assert_eq!(s.removed, 2);
        // three-instance blocks never yield pairs
        assert!(s.train_samples.iter().all(|x| x.def != "tiny"));
        let train: BTreeSet<&String> = s.train_samples.iter().map(|x| &x.fingerprint).collect();
        assert!(s.val_samples.iter().chain(&s.test_samples).all(|x| !train.contains(&x.fingerprint)));
    }

    #[test]
    fn one_epoch_history() {
        let data = corpus(6, 7);
        let split = split_dataset(&data, &SplitConfig::default(), 3).unwrap();
        let inputs = prepared(&data, &split);
        let mut m = g_model("G-CAT");
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let h = train_distance(&mut m, &data, &inputs, &split, &cfg, 0).unwrap();
        assert_eq!(h.records.len(), 1);
        assert!(h.records[0].train_loss.is_finite() && h.records[0].val_loss.is_finite());
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn best_epoch_parameters_are_restored() {
        let data = corpus(6, 8);
        let split = split_dataset(&data, &SplitConfig::default(), 4).unwrap();
        let inputs = prepared(&data, &split);
        let mut m = g_model("G-CAT");
        let cfg = TrainConfig {
            epochs: 6,
            lr: 0.02,
            ..TrainConfig::default()
        };
        let h = train_distance(&mut m, &data, &inputs, &split, &cfg, 1).unwrap();
        let min = h.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best().unwrap().val_loss, min);
        let again = evaluate_distance(&m, &inputs, &split.val_samples, 1).unwrap();
        assert_eq!(again.loss, min);
        let threaded = evaluate_distance(&m, &inputs, &split.val_samples, 3).unwrap();
        assert_eq!(threaded, again);
    }

    #[test]
    fn memorizes_two_designs() {
        let data = corpus(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SplitConfig::default();
        let mut train = design_samples(&data, 0, &cfg, &mut rng).unwrap();
        train.extend(design_samples(&data, 1, &cfg, &mut rng).unwrap());
        let split = DatasetSplit {
            train: vec![],
            val: vec![],
            test: vec![],
            train_samples: train,
            val_samples: vec![],
            test_samples: vec![],
            removed: 0,
        };
        let geom = GeometryConfig::default();
        let stats = data.fit_stats(&[0, 1], &geom).unwrap();
        let text = train_word_embeddings(&data.sentences(), &TextConfig::default(), 0).unwrap();
        let inputs = data.inputs(&stats, &geom, Some(&text)).unwrap();
        let mut m = g_model("TAG-NORM");
        let tc = TrainConfig {
            epochs: 50,
            patience: 50,
            ..TrainConfig::default()
        };
        let h = train_distance(&mut m, &data, &inputs, &split, &tc, 2).unwrap();
        let (first, last) = (h.records[0].train_loss, h.records.last().unwrap().train_loss);
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn isomorphic_mirror_nodes_fail_norm_head() {
        let data = corpus(6, 10);
        let split = split_dataset(&data, &SplitConfig::default(), 5).unwrap();
        let inputs = prepared(&data, &split);
        let mut m = g_model("G-NORM");
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let err = train_distance(&mut m, &data, &inputs, &split, &cfg, 0).unwrap_err();
        let Error::NonFinite { subckt, epoch } = err else { panic!("{err}") };
        assert_eq!(epoch, 1);
        assert!(subckt.contains(':'));
    }

    #[test]
    fn frozen_finetune_moves_only_the_head() {
        let data = corpus(10, 11);
        let split = split_dataset(&data, &SplitConfig::default(), 6).unwrap();
        let inputs = prepared(&data, &split);
        let cfg = TrainConfig {
            finetune: FinetuneConfig {
                fraction: 0.5,
                epochs: 3,
                ..FinetuneConfig::default()
            },
            ..TrainConfig::default()
        };
        for task in [HeadTask::Matching, HeadTask::Hpwl] {
            let mut m = g_model("G-CAT");
            let before = m.params.snapshot();
            let r = finetune_head(&mut m, &data, &inputs, &split, task, true, &cfg, 0).unwrap();
            assert!(r.train_sets >= 1 && r.test_sets >= 1);
            let after = m.params.snapshot();
            let head = if task == HeadTask::Matching { "match." } else { "hpwl." };
            for id in m.params.ids() {
                let same = before[id.index()] == after[id.index()];
                assert_eq!(same, !m.params.name(id).starts_with(head), "{}", m.params.name(id));
            }
        }
    }

    #[test]
    fn matching_sets_pair_up_negatives() {
        let data = corpus(10, 12);
        let split = split_dataset(&data, &SplitConfig::default(), 7).unwrap();
        let sets = head_sets(&data, &split.train_samples, HeadTask::Matching).unwrap();
        assert!(!sets.is_empty());
        let m = g_model("G-CAT");
        let inputs = prepared(&data, &split);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in sets.iter().take(5) {
            let mut t = Tape::new();
            let z = model_z(&m, &mut t, &inputs[s.design]);
            let (p, y) = head_forward(&m, &mut t, z, s, HeadTask::Matching, &mut rng).unwrap();
            let pos = y.iter().filter(|v| **v == 1.0).count();
            assert_eq!(pos, s.positives.len());
            assert_eq!(y.len() - pos, pos.min(s.pool.len()));
            assert!(t.value(p).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    fn model_z(m: &TagModel, t: &mut Tape, g: &GraphInputs) -> Var {
        m.embed(t, g).unwrap()
    }

    #[test]
    fn hpwl_sets_skip_supplies() {
        let data = corpus(6, 13);
        let split = split_dataset(&data, &SplitConfig::default(), 8).unwrap();
        let sets = head_sets(&data, &split.train_samples, HeadTask::Hpwl).unwrap();
        for s in &sets {
            for (pins, v) in &s.nets {
                assert!(pins.len() >= 2);
                assert!(*v > 0.0);
            }
        }
        assert!(!sets.is_empty());
    }

    #[test]
    fn par_map_keeps_order() {
        let out = par_map(10, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(out, (0..10).map(|i| i * i).collect::<Vec<_>>());
        assert!(par_map(4, 2, |i| if i == 3 { Err(Error::Dataset("x".into())) } else { Ok(i) }).is_err());
    }
}
