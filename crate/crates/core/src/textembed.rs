//! Subword-hashed skip-gram word embeddings over netlist text.
//!
//! Every word is represented by its own vector plus the vectors of its
//! hashed character n-grams, so names never seen in training still get an
//! embedding from their spelling.

use std::collections::{BTreeSet, HashMap};

use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::graph::CircuitGraph;
use crate::netlist::Design;
use crate::{Error, Result};

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub dim: usize,
    pub window: usize,
    pub minn: usize,
    pub maxn: usize,
    pub buckets: usize,
    pub negatives: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 10,
            minn: 3,
            maxn: 15,
            buckets: 1 << 17,
            negatives: 5,
            lr: 0.05,
            epochs: 5,
        }
    }
}

/// Split a netlist identifier into lowercase tokens.
///
/// `/` separates hierarchy levels and a trailing bus range such as `<3:0>`
/// becomes its own token.
pub fn tokenize(name: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in name.to_lowercase().split('/') {
        match part.find('<') {
            Some(0) => out.push(part.to_string()),
            Some(i) => {
                out.push(part[..i].to_string());
                out.push(part[i..].to_string());
            }
            None if !part.is_empty() => out.push(part.to_string()),
            None => {}
        }
    }
    out
}

/// One sentence per definition (its name and its children's types) and one
/// per instance (name, type and connected nets).
pub fn extract_sentences(design: &Design) -> Vec<Sentence> {
    let mut out = Vec::new();
    for def in design.subckts.values() {
        let mut s = tokenize(&def.name);
        let mut seen = BTreeSet::new();
        for inst in &def.instances {
            if seen.insert(inst.type_name.as_str()) {
                s.extend(tokenize(&inst.type_name));
            }
        }
        out.push(s);
        for inst in &def.instances {
            let mut s = tokenize(&inst.name);
            s.extend(tokenize(&inst.type_name));
            let mut nets = BTreeSet::new();
            for (_, net) in &inst.pins {
                if nets.insert(net.as_str()) {
                    s.extend(tokenize(net));
                }
            }
            out.push(s);
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Whitespace-separated sentences, one per non-empty line.
pub fn sentences_from_text(text: &str) -> Vec<Sentence> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character n-grams of `<word>` with lengths in `[minn, maxn]`.
pub fn ngram_strings(word: &str, minn: usize, maxn: usize) -> Vec<String> {
    let padded: Vec<char> = format!("<{word}>").chars().collect();
    let mut out = Vec::new();
    for i in 0..padded.len() {
        for n in minn..=maxn {
            if i + n > padded.len() {
                break;
            }
            out.push(padded[i..i + n].iter().collect());
        }
    }
    out
}

/// Bucket ids of the character n-grams of `word`.
pub fn char_ngrams(word: &str, cfg: &TextConfig) -> Vec<usize> {
    ngram_strings(word, cfg.minn, cfg.maxn)
        .iter()
        .map(|g| (fnv1a(g.as_bytes()) % cfg.buckets as u64) as usize)
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingModel {
    config: TextConfig,
    vocab: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    words: Vec<f32>,
    buckets: Vec<f32>,
    output: Vec<f32>,
}

impl WordEmbeddingModel {
    /// Randomly initialized model over the vocabulary of `sentences`.
    pub fn init(sentences: &[Sentence], config: &TextConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.buckets == 0 || config.minn == 0 || config.minn > config.maxn {
            return Err(Error::Config("invalid text embedding config".into()));
        }
        let mut vocab = Vec::new();
        let mut counts = Vec::new();
        let mut index = HashMap::new();
        for w in sentences.iter().flatten() {
            let id = *index.entry(w.clone()).or_insert_with(|| {
                vocab.push(w.clone());
                counts.push(0);
                vocab.len() - 1
            });
            counts[id] += 1;
        }
        if vocab.is_empty() {
            return Err(Error::Dataset("empty text corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / config.dim as f32;
        let u = Uniform::new_inclusive(-bound, bound);
        let words = (0..vocab.len() * config.dim).map(|_| u.sample(&mut rng)).collect();
        let buckets = (0..config.buckets * config.dim).map(|_| u.sample(&mut rng)).collect();
        let output = vec![0.0; vocab.len() * config.dim];
        Ok(Self {
            config: config.clone(),
            vocab,
            counts,
            index,
            words,
            buckets,
            output,
        })
    }

    /// Reassemble a model from stored tables.
    pub fn from_parts(
        config: TextConfig,
        vocab: Vec<String>,
        counts: Vec<u64>,
        words: Vec<f32>,
        buckets: Vec<f32>,
        output: Vec<f32>,
    ) -> Result<Self> {
        let d = config.dim;
        if counts.len() != vocab.len()
            || words.len() != vocab.len() * d
            || output.len() != vocab.len() * d
            || buckets.len() != config.buckets * d
        {
            return Err(Error::Checkpoint("word embedding tables do not match config".into()));
        }
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            config,
            vocab,
            counts,
            index,
            words,
            buckets,
            output,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn word_table(&self) -> &[f32] {
        &self.words
    }

    pub fn bucket_table(&self) -> &[f32] {
        &self.buckets
    }

    pub fn output_table(&self) -> &[f32] {
        &self.output
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    // Input rows of one word: `Ok(word id)` or `Err(bucket id)`.
    fn rows(&self, word: &str) -> Vec<std::result::Result<usize, usize>> {
        let mut r: Vec<_> = self.index.get(word).map(|&i| Ok(i)).into_iter().collect();
        r.extend(char_ngrams(word, &self.config).into_iter().map(Err));
        r
    }

    fn row(&self, r: std::result::Result<usize, usize>) -> &[f32] {
        let d = self.config.dim;
        match r {
            Ok(i) => &self.words[i * d..(i + 1) * d],
            Err(b) => &self.buckets[b * d..(b + 1) * d],
        }
    }

    fn row_mut(&mut self, r: std::result::Result<usize, usize>) -> &mut [f32] {
        let d = self.config.dim;
        match r {
            Ok(i) => &mut self.words[i * d..(i + 1) * d],
            Err(b) => &mut self.buckets[b * d..(b + 1) * d],
        }
    }

    /// Vector of a single token: mean of its word row (if known) and its
    /// n-gram rows.
    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let rows = self.rows(word);
        let mut v = vec![0.0; self.config.dim];
        for &r in &rows {
            for (o, x) in v.iter_mut().zip(self.row(r)) {
                *o += f64::from(*x);
            }
        }
        if !rows.is_empty() {
            v.iter_mut().for_each(|x| *x /= rows.len() as f64);
        }
        v
    }

    /// Embedding of an arbitrary name: mean over its tokens. Never fails.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let toks = tokenize(text);
        let mut v = vec![0.0; self.config.dim];
        for t in &toks {
            for (o, x) in v.iter_mut().zip(self.word_vector(t)) {
                *o += x;
            }
        }
        if !toks.is_empty() {
            v.iter_mut().for_each(|x| *x /= toks.len() as f64);
        }
        v
    }

    /// Skip-gram training with negative sampling and a linearly decaying
    /// learning rate.
    pub fn train(&mut self, sentences: &[Sentence], epochs: usize, seed: u64) -> Result<()> {
        let ids: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| s.iter().filter_map(|w| self.index.get(w).copied()).collect())
            .collect();
        let total: usize = ids.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::Dataset("empty text corpus".into()));
        }
        let weights: Vec<f64> = self.counts.iter().map(|&c| (c as f64).sqrt()).collect();
        let neg_dist = WeightedIndex::new(&weights).map_err(|e| Error::Dataset(e.to_string()))?;
        let inputs: Vec<Vec<std::result::Result<usize, usize>>> =
            self.vocab.clone().iter().map(|w| self.rows(w)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.dim;
        let budget = (epochs * total) as f64;
        let mut seen = 0usize;
        let mut hidden = vec![0.0f32; d];
        let mut grad = vec![0.0f32; d];
        for _ in 0..epochs {
            for sent in &ids {
                for (pos, &w) in sent.iter().enumerate() {
                    let lr = (self.config.lr * (1.0 - seen as f64 / budget)) as f32;
                    seen += 1;
                    let b = rng.gen_range(1..=self.config.window.max(1));
                    let lo = pos.saturating_sub(b);
                    let hi = (pos + b).min(sent.len() - 1);
                    for c in lo..=hi {
                        if c == pos {
                            continue;
                        }
                        self.update(&inputs[w], sent[c], lr, &neg_dist, &mut rng, &mut hidden, &mut grad);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        &mut self,
        input: &[std::result::Result<usize, usize>],
        target: usize,
        lr: f32,
        neg_dist: &WeightedIndex<f64>,
        rng: &mut ChaCha8Rng,
        hidden: &mut [f32],
        grad: &mut [f32],
    ) {
        let d = self.config.dim;
        hidden.iter_mut().for_each(|h| *h = 0.0);
        for &r in input {
            for (h, x) in hidden.iter_mut().zip(self.row(r)) {
                *h += x;
            }
        }
        let inv = 1.0 / input.len() as f32;
        hidden.iter_mut().for_each(|h| *h *= inv);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for k in 0..=self.config.negatives {
            let (t, label) = if k == 0 {
                (target, 1.0f32)
            } else {
                let mut n = neg_dist.sample(rng);
                let mut tries = 0;
                while n == target && tries < 16 {
                    n = neg_dist.sample(rng);
                    tries += 1;
                }
                if n == target {
                    continue;
                }
                (n, 0.0)
            };
            let out = &mut self.output[t * d..(t + 1) * d];
            let score: f32 = out.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum();
            let alpha = lr * (label - sigmoid(f64::from(score)) as f32);
            for j in 0..d {
                grad[j] += alpha * out[j];
                out[j] += alpha * hidden[j];
            }
        }
        for &r in input {
            for (x, g) in self.row_mut(r).iter_mut().zip(grad.iter()) {
                *x += g;
            }
        }
    }
}

/// Initialize and train a model on `sentences`.
pub fn train_word_embeddings(sentences: &[Sentence], config: &TextConfig, seed: u64) -> Result<WordEmbeddingModel> {
    let mut m = WordEmbeddingModel::init(sentences, config, seed)?;
    m.train(sentences, config.epochs, seed.wrapping_add(1))?;
    Ok(m)
}

/// Per-node `embed(name) ⊕ embed(type)`, `2·dim` wide.
pub fn instance_text_features(graph: &CircuitGraph, model: &WordEmbeddingModel) -> Vec<Vec<f64>> {
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(graph.len());
    for node in &graph.nodes {
        let mut v = Vec::with_capacity(2 * model.dim());
        for s in [node.instance.as_str(), node.type_name.as_str()] {
            let e = cache.entry(s).or_insert_with(|| model.embed(s));
            v.extend_from_slice(e);
        }
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::netlist::parse_netlist;

    fn small_cfg() -> TextConfig {
        TextConfig {
            dim: 16,
            buckets: 1 << 12,
            window: 4,
            epochs: 5,
            ..TextConfig::default()
        }
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("MM1A"), ["mm1a"]);
        assert_eq!(tokenize("top/I0/out<3:0>"), ["top", "i0", "out", "<3:0>"]);
        assert_eq!(tokenize("//"), Vec::<String>::new());
    }

    #[test]
    fn sentence_rules() {
        let d = parse_netlist(
            ".SUBCKT ota inp out\nMM1A out inp t vss nch_lvt_mac L=8 NF=2 NFIN=4\n\
             MM2 out out vdd vdd pch_lvt_mac L=8 NF=2 NFIN=4\n.ENDS\n.TOP ota",
        )
        .unwrap();
        let s = extract_sentences(&d);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], ["ota", "nch_lvt_mac", "pch_lvt_mac"]);
        assert_eq!(s[1], ["m1a", "nch_lvt_mac", "out", "inp", "t", "vss"]);
        assert_eq!(s[2], ["m2", "pch_lvt_mac", "out", "vdd"]);
    }

    #[test]
    fn one_instance_two_sentences() {
        let d = parse_netlist(".SUBCKT t a b\nRR0 a b rupolym_m L=1 W=1\n.ENDS\n").unwrap();
        assert_eq!(extract_sentences(&d).len(), 2);
    }

    #[test]
    fn ngrams_of_short_word() {
        assert_eq!(ngram_strings("ab", 3, 15), ["<ab", "<ab>", "ab>"]);
        let cfg = TextConfig::default();
        assert_eq!(char_ngrams("ab", &cfg).len(), 3);
        assert_eq!(char_ngrams("nch_lvt_mac", &cfg), char_ngrams("nch_lvt_mac", &cfg));
        assert!(char_ngrams("ab", &cfg).iter().all(|&b| b < cfg.buckets));
    }

    #[test]
    fn shared_substrings_share_buckets() {
        let cfg = TextConfig::default();
        let a: BTreeSet<_> = char_ngrams("nch_ulvt_mac", &cfg).into_iter().collect();
        let b: BTreeSet<_> = char_ngrams("nch_lvt_mac", &cfg).into_iter().collect();
        let shared = ngram_strings("nch_ulvt_mac", 3, 15)
            .into_iter()
            .filter(|g| ngram_strings("nch_lvt_mac", 3, 15).contains(g))
            .count();
        assert!(shared > 0);
        assert!(a.intersection(&b).count() >= 1);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let s = vec![vec!["a".to_string(), "b".to_string()]];
        let cfg = TextConfig {
            epochs: 0,
            ..small_cfg()
        };
        let init = WordEmbeddingModel::init(&s, &cfg, 3).unwrap();
        let trained = train_word_embeddings(&s, &cfg, 3).unwrap();
        assert_eq!(init, trained);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_word_embeddings(&[], &small_cfg(), 0).is_err());
    }

    #[test]
    fn oov_words_embed_through_buckets() {
        let s = vec![vec!["nch_lvt_mac".to_string()]];
        let m = WordEmbeddingModel::init(&s, &small_cfg(), 1).unwrap();
        let v = m.embed("never_seen_before");
        assert_eq!(v.len(), 16);
        assert!(v.iter().any(|x| *x != 0.0));
        assert!(m.embed("").iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cooccurring_words_move_together() {
        // The [a b] sentence repeats against a background of unrelated
        // sentences so that negatives are not forced onto the pair itself.
        let mut s = Vec::new();
        for i in 0..40 {
            s.push(vec!["a".to_string(), "b".to_string()]);
            s.push(vec![format!("x{}", i % 7), format!("y{}", i % 5), format!("z{}", i % 3)]);
        }
        let cfg = small_cfg();
        let mut m = WordEmbeddingModel::init(&s, &cfg, 11).unwrap();
        let before = cosine(&m.embed("a"), &m.embed("b"));
        let mut cos = Vec::new();
        for e in 0..4 {
            m.train(&s, 1, 100 + e).unwrap();
            cos.push(cosine(&m.embed("a"), &m.embed("b")));
        }
        assert!(cos[3] > before + 0.2, "{before} -> {cos:?}");
        assert!(cos.windows(2).filter(|w| w[1] >= w[0]).count() >= 2, "{cos:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let s = sentences_from_text("a b c\nb c d\nd a\n");
        let a = train_word_embeddings(&s, &small_cfg(), 5).unwrap();
        let b = train_word_embeddings(&s, &small_cfg(), 5).unwrap();
        assert_eq!(a, b);
        let c = train_word_embeddings(&s, &small_cfg(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn node_text_features() {
        let d = parse_netlist(
            ".SUBCKT cell a b\nMM1A a b vss vss nch_lvt_mac L=8 NF=2 NFIN=4\n.ENDS\n\
             .SUBCKT top a b\nXI0 a b cell\nXI1 a b cell\n.ENDS\n.TOP top",
        )
        .unwrap();
        let g = build_graph(&d);
        let m = train_word_embeddings(&extract_sentences(&d), &small_cfg(), 2).unwrap();
        let f = instance_text_features(&g, &m);
        assert_eq!(f.len(), g.len());
        assert!(f.iter().all(|v| v.len() == 32 && v.iter().all(|x| x.is_finite())));
        let m1 = g.node_by_path("top/I0/M1A").unwrap();
        let m2 = g.node_by_path("top/I1/M1A").unwrap();
        assert_eq!(f[m1], f[m2]);
        assert_eq!(&f[0][..16], &m.embed("top")[..]);
        assert_eq!(&f[0][16..], &m.embed("top")[..]);
        let i0 = g.node_by_path("top/I0").unwrap();
        assert_eq!(&f[i0][16..], &m.embed("cell")[..]);
    }
}
