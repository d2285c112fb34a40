//! The `tag` command line: configuration, checkpoints and subcommands.
//!
//! Every subcommand prints one JSON object on standard output. Failures
//! print `error: <code>: <message>` on standard error and exit non-zero.
//! CSV and TSV outputs start with a `# config:` line recording the command,
//! seed and configuration.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{generate_corpus, GenConfig};
use crate::features::{FeatureStats, GeometryConfig};
use crate::graph::CircuitGraph;
use crate::model::{unordered_pairs, ModelConfig, TagModel};
use crate::netlist::{parse_netlist_with, relative_distance, Design, MatchLabelDB, ParseOptions, PlacementDB};
use crate::textembed::{cosine, sentences_from_text, train_word_embeddings, TextConfig, WordEmbeddingModel};
use crate::train::{
    evaluate_distance, finetune_head, from_scratch_head, split_dataset, train_distance, zero_shot_text, Dataset,
    DatasetSplit, FinetuneReport, HeadTask, History, Metrics, RegressionMetrics, TrainConfig,
};
use crate::{Error, Result};

// ---------------------------------------------------------------- config

/// Input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub netlist: Option<PathBuf>,
    pub placement: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Extra plain-text sentences for word-embedding training.
    pub text_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    pub geometry: GeometryConfig,
    pub datagen: GenConfig,
    // Locations are left out of echoes so outputs do not depend on them.
    #[serde(skip_serializing)]
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

// ---------------------------------------------------------------- checkpoint

pub const CHECKPOINT_FORMAT: &str = "tag-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the end of the manifest line.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    config: RunConfig,
    stats: Option<FeatureStats>,
    vocab: Vec<String>,
    counts: Vec<u64>,
    has_model: bool,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to reuse a trained pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: RunConfig,
    pub stats: Option<FeatureStats>,
    pub text: Option<WordEmbeddingModel>,
    pub model: Option<TagModel>,
}

/// Round every parameter to the nearest 32-bit float so that a saved
/// checkpoint reproduces the in-memory model exactly.
pub fn quantize(model: &mut TagModel) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.value_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, data: &mut dyn Iterator<Item = f32>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        if let Some(t) = &self.text {
            let d = t.dim();
            push("text.words", vec![t.vocab().len(), d], &mut t.word_table().iter().copied());
            push("text.buckets", vec![t.config().buckets, d], &mut t.bucket_table().iter().copied());
            push("text.output", vec![t.vocab().len(), d], &mut t.output_table().iter().copied());
        }
        if let Some(m) = &self.model {
            for id in m.params.ids() {
                let v = m.params.value(id);
                if v.data().iter().any(|x| (*x as f32) as f64 != *x) {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` is not representable in 32 bits; quantize first",
                        m.params.name(id)
                    )));
                }
                let (r, c) = v.dims();
                push(&format!("model.{}", m.params.name(id)), vec![r, c], &mut v.data().iter().map(|x| *x as f32));
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            stats: self.stats.clone(),
            vocab: self.text.as_ref().map_or_else(Vec::new, |t| t.vocab().to_vec()),
            counts: self.text.as_ref().map_or_else(Vec::new, |t| t.counts().to_vec()),
            has_model: self.model.is_some(),
            tensors,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
        let probe: Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|_| Error::Checkpoint("not a checkpoint file".into()))?;
        if probe.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = probe.get("version").and_then(Value::as_u64);
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let m: Manifest = serde_json::from_slice(&bytes[..nl])?;
        let blob = &bytes[nl + 1..];
        let mut next = 0u64;
        let mut read = |e: &TensorEntry| -> Result<Vec<f32>> {
            if e.dtype != "f32" || e.offset != next {
                return Err(Error::Checkpoint(format!("bad tensor entry `{}`", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let (lo, hi) = (e.offset as usize, e.offset as usize + 4 * n);
            let raw = blob
                .get(lo..hi)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` is truncated", e.name)))?;
            next = hi as u64;
            Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let mut text_parts: Vec<Vec<f32>> = Vec::new();
        let mut model = if m.has_model { Some(TagModel::new(m.config.model.clone(), 0)?) } else { None };
        let mut filled = 0;
        for e in &m.tensors {
            let data = read(e)?;
            if let Some(name) = e.name.strip_prefix("model.") {
                let model = model
                    .as_mut()
                    .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", e.name)))?;
                let id = model.id(name)?;
                let v = model.params.value_mut(id);
                if v.dims() != (e.shape[0], e.shape[1]) || e.shape.len() != 2 {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{}`", e.name)));
                }
                v.data_mut().iter_mut().zip(data).for_each(|(a, b)| *a = b as f64);
                filled += 1;
            } else if e.name.starts_with("text.") {
                text_parts.push(data);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor `{}`", e.name)));
            }
        }
        if next as usize != blob.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        if let Some(model) = &model {
            if filled != model.params.len() {
                return Err(Error::Checkpoint("model tensors are missing".into()));
            }
        }
        let text = match text_parts.len() {
            0 => None,
            3 => {
                let output = text_parts.pop().expect("three tables");
                let buckets = text_parts.pop().expect("three tables");
                let words = text_parts.pop().expect("three tables");
                Some(WordEmbeddingModel::from_parts(
                    m.config.text.clone(),
                    m.vocab,
                    m.counts,
                    words,
                    buckets,
                    output,
                )?)
            }
            _ => return Err(Error::Checkpoint("incomplete word embedding tables".into())),
        };
        Ok(Self {
            seed: m.seed,
            config: m.config,
            stats: m.stats,
            text,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

// ---------------------------------------------------------------- loading

/// Parse one netlist file, or every `.sp`/`.cir` file of a directory in
/// name order. Each design is named after its file stem.
pub fn load_designs(path: &Path) -> Result<Vec<Design>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("sp" | "cir")));
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!("no netlists under {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("design");
            parse_netlist_with(stem, &fs::read_to_string(f)?, &ParseOptions::default())
        })
        .collect()
}

// ---------------------------------------------------------------- commands

#[derive(Debug, Parser)]
#[command(name = "tag", version, about = "Spatial embeddings of circuit instances from layout placements")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Args)]
pub struct Opts {
    /// Netlist file, directory of netlists, or a generated corpus directory.
    #[arg(long, global = true)]
    pub netlist: Option<PathBuf>,
    #[arg(long, global = true)]
    pub placement: Option<PathBuf>,
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Model variant such as `TAG-NORM` or `G-CAT`.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Plain-text sentences added to word-embedding training.
    #[arg(long, global = true)]
    pub text_corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of netlists, placements and labels.
    Datagen,
    /// Train subword word embeddings on netlist sentences.
    TrainText,
    /// Train the embedding network on relative distances.
    Train,
    /// Evaluate distance prediction on the test split.
    Eval {
        /// Score raw word embeddings instead of the trained network.
        #[arg(long)]
        zero_shot_text: bool,
    },
    /// Fine-tune the matching head on frozen embeddings.
    FinetuneMatching {
        /// Train a fresh network on the fine-tuning data instead.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Fine-tune the wirelength head on frozen embeddings.
    FinetuneHpwl {
        #[arg(long)]
        from_scratch: bool,
    },
    /// Write one embedding row per graph node.
    Embed,
    /// Write predicted relative distances of every sub-circuit pair.
    PredictDistance,
    /// Write the vector of every vocabulary word.
    EmbedText,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Datagen => "datagen",
            Command::TrainText => "train-text",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::FinetuneMatching { .. } => "finetune-matching",
            Command::FinetuneHpwl { .. } => "finetune-hpwl",
            Command::Embed => "embed",
            Command::PredictDistance => "predict-distance",
            Command::EmbedText => "embed-text",
        }
    }
}

struct Ctx {
    command: &'static str,
    cfg: RunConfig,
    seed_flag: Option<u64>,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let o = &cli.opts;
        let mut cfg = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(t) = o.threads {
            cfg.train.threads = t;
        }
        if let Some(v) = &o.variant {
            let base = ModelConfig::variant(v)?;
            cfg.model.use_text = base.use_text;
            cfg.model.use_attention = base.use_attention;
            cfg.model.use_graph = base.use_graph;
            cfg.model.head = base.head;
        }
        let p = &mut cfg.paths;
        for (slot, flag) in [
            (&mut p.netlist, &o.netlist),
            (&mut p.placement, &o.placement),
            (&mut p.labels, &o.labels),
            (&mut p.checkpoint, &o.checkpoint),
            (&mut p.out, &o.out),
            (&mut p.text_corpus, &o.text_corpus),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        // A generated corpus directory supplies all three inputs.
        if let Some(n) = p.netlist.clone() {
            if n.join("netlists").is_dir() {
                p.netlist = Some(n.join("netlists"));
                for (slot, file) in [(&mut p.placement, "placement.txt"), (&mut p.labels, "labels.txt")] {
                    if slot.is_none() && n.join(file).is_file() {
                        *slot = Some(n.join(file));
                    }
                }
            }
        }
        Ok(Self {
            command: cli.command.name(),
            cfg,
            seed_flag: o.seed,
        })
    }

    fn echo(&self) -> String {
        let v = json!({"command": self.command, "config": self.cfg});
        format!("# config: {v}\n")
    }

    fn need(&self, p: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| Error::Config(format!("`{}` needs --{flag}", self.command)))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let d = self.need(&self.cfg.paths.out, "out")?;
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn write(&self, path: &Path, body: &str) -> Result<()> {
        fs::write(path, format!("{}{body}", self.echo()))?;
        Ok(())
    }

    fn designs(&self) -> Result<Vec<Design>> {
        load_designs(&self.need(&self.cfg.paths.netlist, "netlist")?)
    }

    fn dataset(&self) -> Result<Dataset> {
        let p = &self.cfg.paths;
        let placement = PlacementDB::parse(&fs::read_to_string(self.need(&p.placement, "placement")?)?)?;
        let labels = match &p.labels {
            Some(l) => MatchLabelDB::parse(&fs::read_to_string(l)?)?,
            None => MatchLabelDB::default(),
        };
        Dataset::new(self.designs()?, placement, labels)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::load(&self.need(&self.cfg.paths.checkpoint, "checkpoint")?)
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{v}");
            0
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<Value> {
    let ctx = Ctx::new(cli)?;
    ctx.cfg.model.validate()?;
    ctx.cfg.train.validate()?;
    match &cli.command {
        Command::Datagen => datagen(&ctx),
        Command::TrainText => train_text(&ctx),
        Command::Train => train(&ctx),
        Command::Eval { zero_shot_text } => eval(&ctx, *zero_shot_text),
        Command::FinetuneMatching { from_scratch } => finetune(&ctx, HeadTask::Matching, *from_scratch),
        Command::FinetuneHpwl { from_scratch } => finetune(&ctx, HeadTask::Hpwl, *from_scratch),
        Command::Embed => embed(&ctx),
        Command::PredictDistance => predict_distance(&ctx),
        Command::EmbedText => embed_text(&ctx),
    }
}

fn regression_json(m: &RegressionMetrics) -> Value {
    json!({"r2": m.r2, "mae": m.mae, "smape": m.smape})
}

fn metrics_json(m: &Metrics) -> Value {
    match m {
        Metrics::Regression(r) => regression_json(r),
        Metrics::Classification(c) => serde_json::to_value(c).expect("plain struct"),
    }
}

fn datagen(ctx: &Ctx) -> Result<Value> {
    let mut g = ctx.cfg.datagen.clone();
    g.seed = ctx.cfg.seed;
    let corpus = generate_corpus(&g)?;
    let out = ctx.out_dir()?;
    corpus.write(&out, &ctx.echo())?;
    let subckts: usize = corpus.designs.iter().map(|d| d.subckts.len()).sum();
    let instances: usize = corpus
        .designs
        .iter()
        .flat_map(|d| d.subckts.values())
        .map(|s| s.instances.len())
        .sum();
    Ok(json!({
        "designs": corpus.designs.len(),
        "subcircuits": subckts,
        "instances": instances,
        "placements": corpus.placement.len(),
        "labels": corpus.labels.len(),
    }))
}

fn text_model(ctx: &Ctx, designs: &[Design]) -> Result<WordEmbeddingModel> {
    let mut sentences: Vec<_> = designs.iter().flat_map(crate::textembed::extract_sentences).collect();
    if let Some(p) = &ctx.cfg.paths.text_corpus {
        sentences.extend(sentences_from_text(&fs::read_to_string(p)?));
    }
    train_word_embeddings(&sentences, &ctx.cfg.text, ctx.cfg.seed)
}

/// Mean cosine among PMOS device types and between PMOS and NMOS types.
pub fn type_cosines(designs: &[Design], text: &WordEmbeddingModel) -> (Option<f64>, Option<f64>) {
    let mut types = std::collections::BTreeSet::new();
    for d in designs {
        for s in d.subckts.values() {
            for i in s.instances.iter().filter(|i| i.kind.is_transistor()) {
                types.insert((i.kind.is_pmos(), i.type_name.clone()));
            }
        }
    }
    let vecs: Vec<(bool, Vec<f64>)> = types.into_iter().map(|(p, t)| (p, text.embed(&t))).collect();
    let (mut intra, mut cross) = (Vec::new(), Vec::new());
    for a in 0..vecs.len() {
        for b in a + 1..vecs.len() {
            let c = cosine(&vecs[a].1, &vecs[b].1);
            match (vecs[a].0, vecs[b].0) {
                (true, true) => intra.push(c),
                (x, y) if x != y => cross.push(c),
                _ => {}
            }
        }
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (avg(&intra), avg(&cross))
}

fn train_text(ctx: &Ctx) -> Result<Value> {
    let designs = ctx.designs()?;
    let text = text_model(ctx, &designs)?;
    let out = ctx.out_dir()?;
    Checkpoint {
        seed: ctx.cfg.seed,
        config: ctx.cfg.clone(),
        stats: None,
        text: Some(text.clone()),
        model: None,
    }
    .save(&out.join("text.ckpt"))?;
    let (intra, cross) = type_cosines(&designs, &text);
    Ok(json!({
        "designs": designs.len(),
        "vocab": text.vocab().len(),
        "pmos_cosine": intra,
        "pmos_nmos_cosine": cross,
    }))
}

struct Prepared {
    data: Dataset,
    split: DatasetSplit,
    inputs: Vec<crate::model::GraphInputs>,
}

// `cfg` supplies the split limits and geometry: the run configuration when
// training, the stored one when a checkpoint is reused.
fn prepare(
    ctx: &Ctx,
    cfg: &RunConfig,
    seed: u64,
    stats: Option<FeatureStats>,
    text: Option<&WordEmbeddingModel>,
) -> Result<(Prepared, FeatureStats)> {
    let data = ctx.dataset()?;
    let split = split_dataset(&data, &cfg.train.split, seed)?;
    let stats = match stats {
        Some(s) => s,
        None => data.fit_stats(&split.train_designs(&data), &cfg.geometry)?,
    };
    let inputs = data.inputs(&stats, &cfg.geometry, text)?;
    Ok((Prepared { data, split, inputs }, stats))
}

fn train(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let seed = cfg.seed;
    let text = if cfg.model.use_text {
        let pre = match &cfg.paths.checkpoint {
            Some(p) => Checkpoint::load(p)?.text,
            None => None,
        };
        Some(match pre {
            Some(t) => t,
            None => text_model(ctx, &ctx.designs()?)?,
        })
    } else {
        None
    };
    let mut model_cfg = cfg.model.clone();
    if let Some(t) = &text {
        model_cfg.text_dim = 2 * t.dim();
    }
    let (p, stats) = prepare(ctx, cfg, seed, None, text.as_ref())?;
    let mut model = TagModel::new(model_cfg.clone(), seed)?;
    let history = train_distance(&mut model, &p.data, &p.inputs, &p.split, &cfg.train, seed.wrapping_add(1))?;
    quantize(&mut model);
    let test = evaluate_distance(&model, &p.inputs, &p.split.test_samples, cfg.train.threads)?;
    let out = ctx.out_dir()?;
    let mut saved = cfg.clone();
    saved.model = model_cfg;
    if let Some(t) = &text {
        saved.text = t.config().clone();
    }
    Checkpoint {
        seed,
        config: saved,
        stats: Some(stats),
        text,
        model: Some(model.clone()),
    }
    .save(&out.join("model.ckpt"))?;
    ctx.write(&out.join("history.csv"), &history.to_csv())?;
    let mut v = regression_json(&test.metrics()?);
    let extra = json!({
        "variant": model.config.variant_name(),
        "best_epoch": history.best_epoch,
        "epochs": history.records.len(),
        "train_subcircuits": p.split.train_samples.len(),
        "val_subcircuits": p.split.val_samples.len(),
        "test_subcircuits": p.split.test_samples.len(),
        "removed": p.split.removed,
        "test_pairs": test.targets.len(),
    });
    merge(&mut v, extra);
    Ok(v)
}

fn merge(v: &mut Value, extra: Value) {
    if let (Value::Object(a), Value::Object(b)) = (v, extra) {
        a.extend(b);
    }
}

fn eval(ctx: &Ctx, zero_shot: bool) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let seed = ctx.seed_flag.unwrap_or(ck.seed);
    if zero_shot {
        let text = ck
            .text
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no word embeddings".into()))?;
        let data = ctx.dataset()?;
        let split = split_dataset(&data, &ck.config.train.split, seed)?;
        let m = zero_shot_text(&data, text, &split.test_samples)?;
        let mut v = regression_json(&m);
        merge(&mut v, json!({"mode": "zero-shot-text", "test_subcircuits": split.test_samples.len()}));
        return Ok(v);
    }
    let model = ck
        .model
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no model".into()))?;
    let (p, _) = prepare(ctx, &ck.config, seed, ck.stats.clone(), ck.text.as_ref())?;
    let ev = evaluate_distance(model, &p.inputs, &p.split.test_samples, ctx.cfg.train.threads)?;
    let mut v = regression_json(&ev.metrics()?);
    merge(
        &mut v,
        json!({
            "mode": "model",
            "variant": model.config.variant_name(),
            "test_subcircuits": p.split.test_samples.len(),
            "test_pairs": ev.targets.len(),
        }),
    );
    Ok(v)
}

fn finetune(ctx: &Ctx, task: HeadTask, scratch: bool) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let base = ck
        .model
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no model".into()))?;
    let seed = ctx.seed_flag.unwrap_or(ck.seed);
    let (p, _) = prepare(ctx, &ck.config, ck.seed, ck.stats.clone(), ck.text.as_ref())?;
    let mut tcfg = ck.config.train.clone();
    tcfg.finetune = ctx.cfg.train.finetune.clone();
    tcfg.threads = ctx.cfg.train.threads;
    let (mut model, report): (TagModel, FinetuneReport) = if scratch {
        from_scratch_head(&base, &p.data, &p.inputs, &p.split, task, &tcfg, seed)?
    } else {
        let mut m = base;
        let r = finetune_head(&mut m, &p.data, &p.inputs, &p.split, task, true, &tcfg, seed)?;
        (m, r)
    };
    quantize(&mut model);
    let name = match task {
        HeadTask::Matching => "matching",
        HeadTask::Hpwl => "hpwl",
    };
    let suffix = if scratch { "_scratch" } else { "" };
    let out = ctx.out_dir()?;
    let mut saved = ck.clone();
    saved.model = Some(model);
    saved.save(&out.join(format!("{name}{suffix}.ckpt")))?;
    ctx.write(&out.join(format!("{name}{suffix}_history.csv")), &report.history.to_csv())?;
    let mut v = metrics_json(&report.metrics);
    merge(&mut v, finetune_json(name, scratch, &report.history, &report));
    Ok(v)
}

fn finetune_json(task: &str, scratch: bool, h: &History, r: &FinetuneReport) -> Value {
    json!({
        "task": task,
        "mode": if scratch { "scratch" } else { "pretrained" },
        "best_epoch": h.best_epoch,
        "epochs": h.records.len(),
        "train_sets": r.train_sets,
        "test_sets": r.test_sets,
    })
}

fn model_inputs(ck: &Checkpoint, designs: &[Design]) -> Result<Vec<(CircuitGraph, crate::model::GraphInputs)>> {
    let stats = ck
        .stats
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no feature statistics".into()))?;
    designs
        .iter()
        .map(|d| {
            let g = crate::graph::build_graph(d);
            let feats: Vec<_> = crate::features::raw_features(d, &g, None, &ck.config.geometry)?
                .iter()
                .map(|f| crate::features::normalize(f, stats))
                .collect();
            let text = ck.text.as_ref().map(|t| crate::textembed::instance_text_features(&g, t));
            let gi = crate::model::GraphInputs::new(&g, &feats, text.as_deref())?;
            Ok((g, gi))
        })
        .collect()
}

fn loaded_model(ck: &Checkpoint) -> Result<&TagModel> {
    ck.model
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no model".into()))
}

fn embed(ctx: &Ctx) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let model = loaded_model(&ck)?;
    let designs = ctx.designs()?;
    let mut body = String::new();
    let mut rows = 0;
    for (d, (g, gi)) in designs.iter().zip(model_inputs(&ck, &designs)?) {
        let z = model.embed_values(&gi)?;
        for n in &g.nodes {
            body.push_str(&format!("{}\t{}", d.name, n.path));
            for v in z.row(n.id) {
                body.push_str(&format!("\t{v}"));
            }
            body.push('\n');
            rows += 1;
        }
    }
    let out = ctx.out_dir()?;
    ctx.write(&out.join("embeddings.tsv"), &body)?;
    Ok(json!({"rows": rows, "dim": model.config.d, "designs": designs.len()}))
}

fn predict_distance(ctx: &Ctx) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let model = loaded_model(&ck)?;
    let designs = ctx.designs()?;
    let placement = match &ctx.cfg.paths.placement {
        Some(p) => Some(PlacementDB::parse(&fs::read_to_string(p)?)?),
        None => None,
    };
    let mut body = String::from("design,occurrence,a,b,predicted,target\n");
    let mut pairs = 0;
    for (d, (g, gi)) in designs.iter().zip(model_inputs(&ck, &designs)?) {
        let z = model.embed_values(&gi)?;
        let mut t = crate::autodiff::Tape::new();
        let zv = t.constant(z);
        for occ in g.occurrences.iter().filter(|o| o.members.len() >= 2) {
            let p = model.dist(&mut t, zv, &occ.members)?;
            let pred = t.value(p).data().to_vec();
            let def = &d.subckts[&occ.def];
            for ((a, b), v) in unordered_pairs(occ.members.len()).into_iter().zip(pred) {
                let (na, nb) = (&g.nodes[occ.members[a]].instance, &g.nodes[occ.members[b]].instance);
                let target = placement
                    .as_ref()
                    .and_then(|pl| relative_distance(def, na, nb, pl).ok())
                    .map_or(String::new(), |x| x.to_string());
                body.push_str(&format!("{},{},{na},{nb},{v},{target}\n", d.name, occ.path));
                pairs += 1;
            }
        }
    }
    let out = ctx.out_dir()?;
    ctx.write(&out.join("distances.csv"), &body)?;
    Ok(json!({"pairs": pairs, "designs": designs.len(), "variant": model.config.variant_name()}))
}

fn embed_text(ctx: &Ctx) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let text = ck
        .text
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no word embeddings".into()))?;
    let mut body = String::new();
    for w in text.vocab() {
        body.push_str(w);
        for v in text.word_vector(w) {
            body.push_str(&format!("\t{v}"));
        }
        body.push('\n');
    }
    let out = ctx.out_dir()?;
    ctx.write(&out.join("words.tsv"), &body)?;
    Ok(json!({"words": text.vocab().len(), "dim": text.dim()}))
}
