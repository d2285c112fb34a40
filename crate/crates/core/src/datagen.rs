//! Synthetic hierarchical designs with planted placement conventions.
//!
//! Leaf sub-circuits are assembled from blocks: differential pairs placed
//! mirror-symmetric about the vertical axis, unit arrays at constant pitch,
//! common-centroid quads and passive chains. Transistors of each polarity
//! share a half of the layout (PMOS on top). Parents arrange their children
//! on a grid in chain order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netlist::{
    parse_netlist_with, Design, MatchLabelDB, MatchPattern, ParseOptions, PlacementDB, Rect,
};
use crate::{Error, Result};

const DEVICE_GAP: i64 = 20;
const ROW_GAP: i64 = 40;
const BLOCK_GAP: i64 = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternWeights {
    pub diff_pair: f64,
    pub array: f64,
    pub quad: f64,
    pub passive: f64,
}

impl Default for PatternWeights {
    fn default() -> Self {
        Self {
            diff_pair: 0.35,
            array: 0.3,
            quad: 0.2,
            passive: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub designs: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Fraction of designs with three hierarchy levels instead of two.
    pub deep_fraction: f64,
    pub min_children: usize,
    pub max_children: usize,
    pub weights: PatternWeights,
    /// Probability that a leaf gets a pair of dummy devices.
    pub dummy_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            designs: 300,
            min_instances: 4,
            max_instances: 20,
            deep_fraction: 0.25,
            min_children: 2,
            max_children: 5,
            weights: PatternWeights::default(),
            dummy_prob: 0.3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ws = [w.diff_pair, w.array, w.quad, w.passive];
        if ws.iter().any(|x| *x < 0.0 || !x.is_finite()) || (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Generator("pattern weights must be non-negative and sum to 1".into()));
        }
        if self.min_instances < 4 || self.min_instances > self.max_instances {
            return Err(Error::Generator(format!(
                "instance range [{}, {}] is infeasible",
                self.min_instances, self.max_instances
            )));
        }
        if self.min_children < 2 || self.min_children > self.max_children {
            return Err(Error::Generator("children range is infeasible".into()));
        }
        if self.designs == 0 {
            return Err(Error::Generator("no designs requested".into()));
        }
        if !(0.0..=1.0).contains(&self.deep_fraction) || !(0.0..=1.0).contains(&self.dummy_prob) {
            return Err(Error::Generator("fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Designs with their placements and match labels.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub designs: Vec<Design>,
    pub netlists: Vec<String>,
    pub placement: PlacementDB,
    pub labels: MatchLabelDB,
}

impl Corpus {
    /// Write `netlists/<design>.sp`, `placement.txt` and `labels.txt`,
    /// each starting with `header` (comment lines) when it is non-empty.
    pub fn write(&self, dir: &Path, header: &str) -> Result<()> {
        let nl = dir.join("netlists");
        fs::create_dir_all(&nl)?;
        for (d, text) in self.designs.iter().zip(&self.netlists) {
            fs::write(nl.join(format!("{}.sp", d.name)), format!("{header}{text}"))?;
        }
        fs::write(dir.join("placement.txt"), format!("{header}{}", self.placement.write()))?;
        fs::write(dir.join("labels.txt"), format!("{header}{}", self.labels.write()))?;
        Ok(())
    }
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut corpus = Corpus::default();
    for k in 0..cfg.designs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let mut g = DesignGen {
            cfg,
            rng,
            tag: format!("{k:03}"),
            text: String::from(".GLOBAL vdd vss\n"),
            placement: PlacementDB::default(),
            labels: MatchLabelDB::default(),
            count: 0,
        };
        let deep = g.rng.gen_bool(cfg.deep_fraction);
        let top = g.parent("top", if deep { 2 } else { 1 })?;
        let _ = writeln!(g.text, ".TOP {}", top.name);
        let name = format!("design{k:03}");
        let design = parse_netlist_with(&name, &g.text, &ParseOptions::default())?;
        g.placement.check_against(&design)?;
        g.labels.check_against(&design)?;
        corpus.designs.push(design);
        corpus.netlists.push(g.text);
        corpus.placement.extend(g.placement);
        corpus.labels.extend(g.labels);
    }
    Ok(corpus)
}

struct Placed {
    name: String,
    w: i64,
    h: i64,
}

struct DesignGen<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
    tag: String,
    text: String,
    placement: PlacementDB,
    labels: MatchLabelDB,
    count: usize,
}

#[derive(Clone)]
struct Cell {
    name: String,
    w: i64,
    h: i64,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Region {
    N,
    Mid,
    P,
}

struct Row {
    region: Region,
    cells: Vec<Cell>,
}

#[derive(Default)]
struct Leaf {
    lines: Vec<String>,
    rows: Vec<Row>,
    labels: Vec<(String, String, MatchPattern)>,
    size: usize,
    pair: usize,
    unit: usize,
    quad: usize,
    res: usize,
    cap: usize,
    net: usize,
}

#[derive(Clone, Copy)]
struct Mos {
    l: i64,
    nf: i64,
    nfin: i64,
}

impl Mos {
    fn cell(&self, name: &str) -> Cell {
        Cell {
            name: name.to_string(),
            w: self.nf * self.nfin * 12 + 24,
            h: 4 * self.l + 48,
        }
    }

    fn params(&self) -> String {
        format!("L={} NF={} NFIN={}", self.l, self.nf, self.nfin)
    }
}

impl DesignGen<'_> {
    fn mos(&mut self) -> Mos {
        Mos {
            l: *[8, 12, 16, 20].choose(&mut self.rng).unwrap(),
            nf: *[1, 2, 4].choose(&mut self.rng).unwrap(),
            nfin: *[2, 4, 8].choose(&mut self.rng).unwrap(),
        }
    }

    /// Matched pairs stay narrower than one row pitch so the two halves
    /// sit closer to each other than to anything in a neighboring row.
    fn pair_mos(&mut self) -> Mos {
        let (nf, nfin) = *[(1, 2), (1, 4), (2, 2)].choose(&mut self.rng).unwrap();
        Mos {
            l: *[8, 12, 16, 20].choose(&mut self.rng).unwrap(),
            nf,
            nfin,
        }
    }

    fn mos_type(&mut self, pmos: bool) -> String {
        let flavor = if self.rng.gen_bool(0.5) { "lvt" } else { "ulvt" };
        format!("{}_{flavor}_mac", if pmos { "pch" } else { "nch" })
    }

    /// A parent with 2..=max children; `levels` counts levels below it.
    fn parent(&mut self, base: &str, levels: usize) -> Result<Placed> {
        let n = self.rng.gen_range(self.cfg.min_children..=self.cfg.max_children);
        let mut kids = Vec::with_capacity(n);
        for _ in 0..n {
            kids.push(if levels > 1 { self.parent("blk", levels - 1)? } else { self.leaf()? });
        }
        self.count += 1;
        let name = format!("{base}{}_{}", self.tag, self.count);
        let mut body = format!(".SUBCKT {name} in out vb\n");
        for (j, kid) in kids.iter().enumerate() {
            let a = if j == 0 { "in".to_string() } else { format!("s{j}") };
            let b = if j + 1 == n { "out".to_string() } else { format!("s{}", j + 1) };
            let _ = writeln!(body, "XI{j} {a} {b} vb {}", kid.name);
        }
        body.push_str(".ENDS\n");
        self.text.push_str(&body);

        let cols = (n as f64).sqrt().ceil() as usize;
        let cw = kids.iter().map(|k| k.w).max().unwrap_or(0) + BLOCK_GAP;
        let ch = kids.iter().map(|k| k.h).max().unwrap_or(0) + BLOCK_GAP;
        let (mut w, mut h) = (0, 0);
        for (j, kid) in kids.iter().enumerate() {
            let (x, y) = ((j % cols) as i64 * cw, (j / cols) as i64 * ch);
            self.placement.insert(&name, &format!("I{j}"), Rect { x, y, w: kid.w, h: kid.h })?;
            w = w.max(x + kid.w);
            h = h.max(y + kid.h);
        }
        Ok(Placed { name, w, h })
    }

    fn leaf(&mut self) -> Result<Placed> {
        let cfg = self.cfg;
        let target = self.rng.gen_range(cfg.min_instances..=cfg.max_instances);
        let w = &cfg.weights;
        let dist = WeightedIndex::new([w.diff_pair, w.array, w.quad, w.passive])
            .map_err(|e| Error::Generator(e.to_string()))?;
        let mut leaf = Leaf::default();
        let mut input = "in".to_string();
        let mut kinds = Vec::new();
        let mut stalls = 0;
        while leaf.size < target && stalls < 32 {
            let room = cfg.max_instances - leaf.size;
            let kind = dist.sample(&mut self.rng);
            let out = match kind {
                0 if room >= 2 => self.diff_pair(&mut leaf, &input, room),
                1 if room >= 3 => self.array(&mut leaf, &input, room),
                2 if room >= 4 => self.quad(&mut leaf, &input),
                3 if room >= 2 => self.passive(&mut leaf, &input, room),
                _ => {
                    stalls += 1;
                    continue;
                }
            };
            kinds.push(kind);
            input = out;
        }
        if leaf.size < cfg.min_instances {
            return Err(Error::Generator("could not fill a leaf sub-circuit".into()));
        }
        if self.rng.gen_bool(cfg.dummy_prob) {
            self.dummies(&mut leaf);
        }
        let stem = ["ota", "drv", "cm", "rc"][kinds[0]];
        self.count += 1;
        let name = format!("{stem}{}_{}", self.tag, self.count);
        // The last block drives the output port.
        let _ = writeln!(self.text, ".SUBCKT {name} in out vb");
        for l in &leaf.lines {
            let toks: Vec<&str> = l
                .split_whitespace()
                .map(|t| if t == input { "out" } else { t })
                .collect();
            let _ = writeln!(self.text, "{}", toks.join(" "));
        }
        self.text.push_str(".ENDS\n");
        for (a, b, p) in &leaf.labels {
            self.labels.insert(&name, a, b, *p)?;
        }
        let (w, h) = self.place_rows(&name, &leaf.rows)?;
        Ok(Placed { name, w, h })
    }

    fn fresh_net(leaf: &mut Leaf, stem: &str) -> String {
        leaf.net += 1;
        format!("{stem}{}", leaf.net)
    }

    fn diff_pair(&mut self, leaf: &mut Leaf, input: &str, room: usize) -> String {
        leaf.pair += 1;
        let k = leaf.pair;
        let nt = self.mos_type(false);
        let sz = self.pair_mos();
        let (on, op, inn, tail) = (format!("on{k}"), format!("op{k}"), format!("inn{k}"), format!("tail{k}"));
        let p = sz.params();
        leaf.lines.push(format!("MM{k}A {on} {input} {tail} vss {nt} {p}"));
        leaf.lines.push(format!("MM{k}B {op} {inn} {tail} vss {nt} {p}"));
        leaf.labels.push((format!("M{k}A"), format!("M{k}B"), MatchPattern::Symmetry));
        leaf.size += 2;
        leaf.rows.push(Row {
            region: Region::N,
            cells: vec![sz.cell(&format!("M{k}A")), sz.cell(&format!("M{k}B"))],
        });
        let mut used = 2;
        if room >= 3 && self.rng.gen_bool(0.7) {
            let tsz = self.mos();
            leaf.lines.push(format!("MMT{k} {tail} vb vss vss {nt} {}", tsz.params()));
            leaf.rows.push(Row {
                region: Region::N,
                cells: vec![tsz.cell(&format!("MT{k}"))],
            });
            leaf.size += 1;
            used += 1;
        }
        if room >= used + 2 && self.rng.gen_bool(0.6) {
            leaf.pair += 1;
            let j = leaf.pair;
            let pt = self.mos_type(true);
            let psz = self.pair_mos();
            let pp = psz.params();
            leaf.lines.push(format!("MM{j}A {on} {on} vdd vdd {pt} {pp}"));
            leaf.lines.push(format!("MM{j}B {op} {on} vdd vdd {pt} {pp}"));
            leaf.labels.push((format!("M{j}A"), format!("M{j}B"), MatchPattern::Symmetry));
            leaf.size += 2;
            leaf.rows.push(Row {
                region: Region::P,
                cells: vec![psz.cell(&format!("M{j}A")), psz.cell(&format!("M{j}B"))],
            });
        }
        op
    }

    fn array(&mut self, leaf: &mut Leaf, input: &str, room: usize) -> String {
        let n = self.rng.gen_range(3..=8.min(room));
        let pmos = self.rng.gen_bool(0.5);
        let stem = if self.rng.gen_bool(0.5) { "SEG" } else { "INV" };
        let ty = self.mos_type(pmos);
        let sz = self.mos();
        let out = Self::fresh_net(leaf, if stem == "SEG" { "pad" } else { "y" });
        let supply = if pmos { "vdd" } else { "vss" };
        let mut cells = Vec::with_capacity(n);
        let mut prev: Option<String> = None;
        for _ in 0..n {
            let i = leaf.unit;
            leaf.unit += 1;
            let name = format!("{stem}{i}");
            leaf.lines.push(format!("M{name} {out} {input} {supply} {supply} {ty} {}", sz.params()));
            if let Some(p) = prev {
                leaf.labels.push((p, name.clone(), MatchPattern::Interdigitation));
            }
            cells.push(sz.cell(&name));
            prev = Some(name);
        }
        leaf.size += n;
        leaf.rows.push(Row {
            region: if pmos { Region::P } else { Region::N },
            cells,
        });
        out
    }

    fn quad(&mut self, leaf: &mut Leaf, input: &str) -> String {
        leaf.quad += 1;
        let k = leaf.quad;
        let pmos = self.rng.gen_bool(0.4);
        let ty = self.mos_type(pmos);
        let sz = self.mos();
        let supply = if pmos { "vdd" } else { "vss" };
        let (qa, qb, qs) = (format!("qa{k}"), format!("qb{k}"), format!("qs{k}"));
        let n = |u: &str| format!("Q{k}{u}");
        for (u, d) in [("A0", &qa), ("B0", &qb), ("B1", &qb), ("A1", &qa)] {
            leaf.lines.push(format!("MQ{k}{u} {d} {input} {qs} {supply} {ty} {}", sz.params()));
        }
        for (a, b) in [("A0", "B0"), ("A0", "B1"), ("A1", "B0"), ("A1", "B1")] {
            leaf.labels.push((n(a), n(b), MatchPattern::CommonCentroid));
        }
        leaf.size += 4;
        let region = if pmos { Region::P } else { Region::N };
        leaf.rows.push(Row {
            region,
            cells: vec![sz.cell(&n("A0")), sz.cell(&n("B0"))],
        });
        leaf.rows.push(Row {
            region,
            cells: vec![sz.cell(&n("B1")), sz.cell(&n("A1"))],
        });
        qb
    }

    fn passive(&mut self, leaf: &mut Leaf, input: &str, room: usize) -> String {
        let nr = self.rng.gen_range(1..=3.min(room - 1));
        let nc = self.rng.gen_range(1..=2.min(room - nr).max(1));
        let l = *[400, 800, 1200].choose(&mut self.rng).unwrap();
        let w = *[20, 40].choose(&mut self.rng).unwrap();
        let m = *[1, 2, 4].choose(&mut self.rng).unwrap();
        let mut cells = Vec::new();
        let mut node = input.to_string();
        for _ in 0..nr {
            let i = leaf.res;
            leaf.res += 1;
            let next = Self::fresh_net(leaf, "rn");
            leaf.lines.push(format!("RR{i} {node} {next} rupolym_m L={l} W={w}"));
            cells.push(Cell {
                name: format!("R{i}"),
                w: w + 20,
                h: l / 8 + 20,
            });
            node = next;
        }
        for _ in 0..nc {
            let i = leaf.cap;
            leaf.cap += 1;
            leaf.lines.push(format!("CC{i} {node} vss cfmom_2t M={m}"));
            cells.push(Cell {
                name: format!("C{i}"),
                w: 40 * m,
                h: 40 * m,
            });
        }
        leaf.size += nr + nc;
        leaf.rows.push(Row {
            region: Region::Mid,
            cells,
        });
        node
    }

    fn dummies(&mut self, leaf: &mut Leaf) {
        let Some(row) = leaf.rows.iter_mut().find(|r| r.region != Region::Mid) else {
            return;
        };
        let pmos = row.region == Region::P;
        let ty = if pmos { "pch_lvt_mac" } else { "nch_lvt_mac" };
        let s = if pmos { "vdd" } else { "vss" };
        let w = row.cells[0].w;
        let h = row.cells[0].h;
        for i in 0..2 {
            leaf.lines.push(format!("MDUMMY{i} {s} {s} {s} {s} {ty} L=8 NF=1 NFIN=2"));
        }
        row.cells.insert(0, Cell { name: "DUMMY0".into(), w, h });
        row.cells.push(Cell { name: "DUMMY1".into(), w, h });
    }

    /// Stack rows (NMOS from the bottom, PMOS from the top, passives
    /// between), each centered on the vertical axis.
    fn place_rows(&mut self, subckt: &str, rows: &[Row]) -> Result<(i64, i64)> {
        let row_w = |r: &Row| r.cells.iter().map(|c| c.w).sum::<i64>() + DEVICE_GAP * (r.cells.len() as i64 - 1);
        let row_h = |r: &Row| r.cells.iter().map(|c| c.h).max().unwrap_or(0);
        let width = rows.iter().map(row_w).max().unwrap_or(0);
        let stack = |region: Region| -> i64 {
            let rs: Vec<&Row> = rows.iter().filter(|r| r.region == region).collect();
            rs.iter().map(|r| row_h(r)).sum::<i64>() + ROW_GAP * (rs.len() as i64 - 1).max(0)
        };
        let (hn, hm, hp) = (stack(Region::N), stack(Region::Mid), stack(Region::P));
        let side = hn.max(hp);
        let has = |region: Region| rows.iter().any(|r| r.region == region);
        let mid_base = if has(Region::N) { side + ROW_GAP } else { 0 };
        let top = if has(Region::P) {
            mid_base + hm + if has(Region::Mid) { ROW_GAP } else { 0 } + side
        } else {
            0
        };
        let (mut yn, mut ym, mut yp) = (0, mid_base, top);
        let mut height = 0;
        for r in rows {
            let h = row_h(r);
            let base = match r.region {
                Region::N => {
                    let b = yn;
                    yn += h + ROW_GAP;
                    b
                }
                Region::Mid => {
                    let b = ym;
                    ym += h + ROW_GAP;
                    b
                }
                Region::P => {
                    yp -= h;
                    let b = yp;
                    yp -= ROW_GAP;
                    b
                }
            };
            let mut x = (width - row_w(r)) / 2;
            for c in &r.cells {
                let y = base + (h - c.h) / 2;
                self.placement.insert(subckt, &c.name, Rect { x, y, w: c.w, h: c.h })?;
                x += c.w + DEVICE_GAP;
            }
            height = height.max(base + h);
        }
        Ok((width, height))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::graph::build_graph;
    use crate::netlist::{parse_netlist_with, relative_distance, write_netlist};

    fn small(designs: usize, seed: u64) -> Corpus {
        generate_corpus(&GenConfig {
            seed,
            designs,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn center(c: &Corpus, sub: &str, inst: &str) -> (f64, f64) {
        c.placement.get(sub, inst).unwrap().center()
    }

    #[test]
    fn single_shallow_design_is_self_consistent() {
        let c = generate_corpus(&GenConfig {
            designs: 1,
            deep_fraction: 0.0,
            seed: 3,
            ..GenConfig::default()
        })
        .unwrap();
        let d = &c.designs[0];
        d.validate().unwrap();
        let top = d.top_def();
        assert!(top.instances.iter().all(|i| d.subckt(&i.type_name).unwrap().instances.iter().all(|j| j.type_name.contains('_'))));
        let g = build_graph(d);
        assert!(g.len() > top.instances.len());
        let again = parse_netlist_with(&d.name, &write_netlist(d), &ParseOptions::default()).unwrap();
        assert_eq!(build_graph(&again).edges, g.edges);
        for def in d.subckts.values() {
            for inst in &def.instances {
                assert!(c.placement.get(&def.name, &inst.name).is_some(), "{}/{}", def.name, inst.name);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = small(4, 9);
        let b = small(4, 9);
        assert_eq!(a.netlists, b.netlists);
        assert_eq!(a.placement.write(), b.placement.write());
        assert_eq!(a.labels.write(), b.labels.write());
        assert_ne!(small(4, 10).netlists, a.netlists);
    }

    #[test]
    fn planted_patterns_hold() {
        let c = small(30, 1);
        let mut sym = 0;
        for d in &c.designs {
            for def in d.subckts.values() {
                let Some((x0, y0, x1, y1)) = c.placement.bbox(def) else { continue };
                let labels = c.labels.get(&def.name);
                for l in labels {
                    let (a, b) = (center(&c, &def.name, &l.a), center(&c, &def.name, &l.b));
                    match l.pattern {
                        MatchPattern::Symmetry => {
                            assert!((a.0 + b.0 - (x0 + x1)).abs() <= 1.0, "{} {} {}", def.name, l.a, l.b);
                            assert_eq!(a.1, b.1);
                            sym += 1;
                            let names: Vec<&str> =
                                def.instances.iter().filter(|i| !i.excluded).map(|i| i.name.as_str()).collect();
                            let mut all = Vec::new();
                            for i in 0..names.len() {
                                for j in i + 1..names.len() {
                                    all.push(relative_distance(def, names[i], names[j], &c.placement).unwrap());
                                }
                            }
                            all.sort_by(f64::total_cmp);
                            let rd = relative_distance(def, &l.a, &l.b, &c.placement).unwrap();
                            assert!(rd < all[all.len() / 2], "{} {}", def.name, l.a);
                        }
                        MatchPattern::Interdigitation => assert_eq!(a.1, b.1),
                        MatchPattern::CommonCentroid => {}
                    }
                }
                let quads: Vec<&str> = def.instances.iter().filter(|i| i.name.starts_with('Q') && i.name.ends_with("A0")).map(|i| i.name.as_str()).collect();
                for q in quads {
                    let k = &q[..q.len() - 2];
                    let c2 = |u: &str, v: &str| {
                        let (p, r) = (center(&c, &def.name, &format!("{k}{u}")), center(&c, &def.name, &format!("{k}{v}")));
                        ((p.0 + r.0) / 2.0, (p.1 + r.1) / 2.0)
                    };
                    assert_eq!(c2("A0", "A1"), c2("B0", "B1"));
                }
                let (mut pmax, mut nmin) = (f64::MIN, f64::MAX);
                let (mut pmin, mut nmax) = (f64::MAX, f64::MIN);
                for i in def.instances.iter().filter(|i| i.kind.is_transistor()) {
                    let y = center(&c, &def.name, &i.name).1;
                    if i.kind.is_pmos() {
                        pmin = pmin.min(y);
                        pmax = pmax.max(y);
                    } else {
                        nmin = nmin.min(y);
                        nmax = nmax.max(y);
                    }
                }
                if pmax > f64::MIN && nmin < f64::MAX {
                    let mid = (y0 + y1) / 2.0;
                    assert!(pmin > mid && nmax < mid, "{}", def.name);
                }
            }
        }
        assert!(sym > 20);
    }

    #[test]
    fn array_pitch_is_constant() {
        let c = small(20, 4);
        let mut arrays = 0;
        for d in &c.designs {
            for def in d.subckts.values() {
                let mut groups: BTreeMap<&str, Vec<(usize, f64, f64)>> = BTreeMap::new();
                for i in &def.instances {
                    let Some(idx) = ["SEG", "INV"].iter().find_map(|s| i.name.strip_prefix(s)) else { continue };
                    let (x, y) = center(&c, &def.name, &i.name);
                    groups.entry(i.pins[0].1.as_str()).or_default().push((idx.parse().unwrap(), x, y));
                }
                for units in groups.values_mut() {
                    units.sort_by_key(|u| u.0);
                    let pitch = units[1].1 - units[0].1;
                    assert!(pitch > 0.0);
                    for w in units.windows(2) {
                        assert_eq!(w[1].1 - w[0].1, pitch);
                        assert_eq!(w[1].2, w[0].2);
                    }
                    arrays += 1;
                }
            }
        }
        assert!(arrays > 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = |f: fn(&mut GenConfig)| {
            let mut c = GenConfig::default();
            f(&mut c);
            generate_corpus(&c).is_err()
        };
        assert!(bad(|c| c.weights.quad = 0.9));
        assert!(bad(|c| c.min_instances = 3));
        assert!(bad(|c| c.max_instances = 2));
        assert!(bad(|c| c.max_children = 1));
        assert!(bad(|c| c.designs = 0));
    }
}
