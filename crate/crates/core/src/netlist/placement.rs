//! Placement rectangles, match labels and the normalized layout targets
//! derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::{is_excluded_name, Design, PinRole, SubCircuitDef};
use crate::{Error, Result};

/// Axis-aligned instance rectangle in nm, local to its sub-circuit layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl Rect {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }
}

/// Rectangles keyed by `(subckt, instance)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlacementDB {
    rects: BTreeMap<(String, String), Rect>,
}

impl PlacementDB {
    /// Parse `subckt instance x y w h` records, one per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut db = PlacementDB::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Placement(format!("line {}: {m}", i + 1));
            if toks.len() != 6 {
                return Err(bad("expected `subckt instance x y w h`"));
            }
            let mut nums = [0i64; 4];
            for (slot, tok) in nums.iter_mut().zip(&toks[2..]) {
                *slot = tok
                    .parse()
                    .map_err(|_| bad(&format!("`{tok}` is not an integer")))?;
            }
            let [x, y, w, h] = nums;
            if w <= 0 || h <= 0 {
                return Err(bad(&format!("non-positive size {w}x{h}")));
            }
            let key = (toks[0].to_string(), toks[1].to_string());
            if db.rects.insert(key, Rect { x, y, w, h }).is_some() {
                return Err(bad(&format!("duplicate record for {} {}", toks[0], toks[1])));
            }
        }
        Ok(db)
    }

    pub fn insert(&mut self, subckt: &str, instance: &str, rect: Rect) -> Result<()> {
        if rect.w <= 0 || rect.h <= 0 {
            return Err(Error::Placement(format!(
                "{subckt} {instance}: non-positive size {}x{}",
                rect.w, rect.h
            )));
        }
        self.rects
            .insert((subckt.to_string(), instance.to_string()), rect);
        Ok(())
    }

    pub fn get(&self, subckt: &str, instance: &str) -> Option<&Rect> {
        self.rects.get(&(subckt.to_string(), instance.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Rect)> {
        self.rects
            .iter()
            .map(|((s, i), r)| (s.as_str(), i.as_str(), r))
    }

    /// Merge another database; later records win.
    pub fn extend(&mut self, other: PlacementDB) {
        self.rects.extend(other.rects);
    }

    /// Every record for a sub-circuit of `design` must name one of its
    /// instances; unknown dummy/decap names are tolerated.
    pub fn check_against(&self, design: &Design) -> Result<()> {
        for ((sub, inst), _) in &self.rects {
            let Some(def) = design.subckt(sub) else { continue };
            if def.instance(inst).is_none() && !is_excluded_name(inst, "") {
                return Err(Error::Placement(format!(
                    "placed instance `{inst}` does not exist in `{sub}`"
                )));
            }
        }
        Ok(())
    }

    /// Bounding box `(x0, y0, x1, y1)` over placed instances of `def`.
    pub fn bbox(&self, def: &SubCircuitDef) -> Option<(f64, f64, f64, f64)> {
        let mut acc: Option<(f64, f64, f64, f64)> = None;
        for inst in &def.instances {
            if let Some(r) = self.get(&def.name, &inst.name) {
                let (x0, y0) = (r.x as f64, r.y as f64);
                let (x1, y1) = (x0 + r.w as f64, y0 + r.h as f64);
                acc = Some(match acc {
                    None => (x0, y0, x1, y1),
                    Some((a, b, c, d)) => (a.min(x0), b.min(y0), c.max(x1), d.max(y1)),
                });
            }
        }
        acc
    }

    /// Diagonal of the sub-circuit bounding box.
    pub fn diagonal(&self, def: &SubCircuitDef) -> Option<f64> {
        self.bbox(def)
            .map(|(x0, y0, x1, y1)| ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt())
    }

    pub fn placed_count(&self, def: &SubCircuitDef) -> usize {
        def.instances
            .iter()
            .filter(|i| self.get(&def.name, &i.name).is_some())
            .count()
    }

    pub fn write(&self) -> String {
        let mut out = String::new();
        for ((s, i), r) in &self.rects {
            let _ = writeln!(out, "{s} {i} {} {} {} {}", r.x, r.y, r.w, r.h);
        }
        out
    }
}

fn placed_center(pl: &PlacementDB, def: &SubCircuitDef, inst: &str) -> Result<(f64, f64)> {
    pl.get(&def.name, inst)
        .map(Rect::center)
        .ok_or_else(|| Error::MissingPlacement {
            subckt: def.name.clone(),
            instance: inst.to_string(),
        })
}

/// Center-to-center distance of `a` and `b`, divided by the diagonal of
/// the bounding box of all placed rectangles of the sub-circuit.
pub fn relative_distance(def: &SubCircuitDef, a: &str, b: &str, pl: &PlacementDB) -> Result<f64> {
    let (ax, ay) = placed_center(pl, def, a)?;
    let (bx, by) = placed_center(pl, def, b)?;
    if pl.placed_count(def) < 2 {
        return Err(Error::Placement(format!(
            "`{}` has fewer than two placed instances",
            def.name
        )));
    }
    let diag = pl.diagonal(def).expect("placed instances exist");
    Ok(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() / diag)
}

/// Half-perimeter wirelength over the centers of the placed, non-excluded
/// instances on `net`, normalized by the sub-circuit bounding-box diagonal.
pub fn net_hpwl(def: &SubCircuitDef, net: &str, pl: &PlacementDB) -> Result<f64> {
    let pins = def
        .nets
        .get(net)
        .ok_or_else(|| Error::Placement(format!("net `{net}` not in `{}`", def.name)))?;
    let mut seen = BTreeSet::new();
    let mut centers = Vec::new();
    for &(idx, role) in pins {
        let inst = &def.instances[idx];
        if role == PinRole::Bulk || inst.excluded || !seen.insert(idx) {
            continue;
        }
        if let Some(r) = pl.get(&def.name, &inst.name) {
            centers.push(r.center());
        }
    }
    if centers.len() < 2 {
        return Err(Error::Placement(format!(
            "net `{net}` in `{}` has fewer than two placed pins",
            def.name
        )));
    }
    let diag = pl.diagonal(def).expect("placed instances exist");
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in centers {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Ok(((x1 - x0) + (y1 - y0)) / diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatchPattern {
    Symmetry,
    CommonCentroid,
    Interdigitation,
}

impl fmt::Display for MatchPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchPattern::Symmetry => "symmetry",
            MatchPattern::CommonCentroid => "common-centroid",
            MatchPattern::Interdigitation => "interdigitation",
        })
    }
}

impl FromStr for MatchPattern {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "symmetry" => Ok(MatchPattern::Symmetry),
            "common-centroid" => Ok(MatchPattern::CommonCentroid),
            "interdigitation" => Ok(MatchPattern::Interdigitation),
            other => Err(format!("unknown pattern `{other}`")),
        }
    }
}

/// An unordered labeled pair; `a < b` always.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MatchLabel {
    pub a: String,
    pub b: String,
    pub pattern: MatchPattern,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchLabelDB {
    labels: BTreeMap<String, Vec<MatchLabel>>,
}

impl MatchLabelDB {
    /// Parse `subckt instA instB pattern` records.
    pub fn parse(text: &str) -> Result<Self> {
        let mut db = MatchLabelDB::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Labels(format!("line {}: {m}", i + 1));
            if toks.len() != 4 {
                return Err(bad("expected `subckt instA instB pattern`".into()));
            }
            let pattern: MatchPattern = toks[3].parse().map_err(bad)?;
            db.insert(toks[0], toks[1], toks[2], pattern)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(db)
    }

    pub fn insert(&mut self, subckt: &str, a: &str, b: &str, pattern: MatchPattern) -> Result<()> {
        if a == b {
            return Err(Error::Labels(format!("`{a}` paired with itself")));
        }
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let list = self.labels.entry(subckt.to_string()).or_default();
        if list.iter().any(|l| l.a == a && l.b == b) {
            return Err(Error::Labels(format!("duplicate pair {a} {b} in {subckt}")));
        }
        list.push(MatchLabel {
            a: a.to_string(),
            b: b.to_string(),
            pattern,
        });
        Ok(())
    }

    pub fn get(&self, subckt: &str) -> &[MatchLabel] {
        self.labels.get(subckt).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_labeled(&self, subckt: &str, a: &str, b: &str) -> bool {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        self.get(subckt).iter().any(|l| l.a == a && l.b == b)
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extend(&mut self, other: MatchLabelDB) {
        for (k, v) in other.labels {
            self.labels.entry(k).or_default().extend(v);
        }
    }

    pub fn check_against(&self, design: &Design) -> Result<()> {
        for (sub, list) in &self.labels {
            let Some(def) = design.subckt(sub) else { continue };
            for l in list {
                for n in [&l.a, &l.b] {
                    if def.instance(n).is_none() {
                        return Err(Error::Labels(format!(
                            "labeled instance `{n}` does not exist in `{sub}`"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write(&self) -> String {
        let mut out = String::new();
        for (s, list) in &self.labels {
            for l in list {
                let _ = writeln!(out, "{s} {} {} {}", l.a, l.b, l.pattern);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::parse_netlist;
    use proptest::prelude::*;

    fn four_resistors() -> Design {
        parse_netlist(
            ".SUBCKT s a b\nRR0 a n1 rupolym_m L=1 W=1\nRR1 n1 b rupolym_m L=1 W=1\nRR2 a n2 rupolym_m L=1 W=1\nRR3 n2 b rupolym_m L=1 W=1\n.ENDS\n.TOP s",
        )
        .unwrap()
    }

    #[test]
    fn one_record() {
        let db = PlacementDB::parse("ota M1A 0 0 100 200\n").unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(
            db.get("ota", "M1A"),
            Some(&Rect {
                x: 0,
                y: 0,
                w: 100,
                h: 200
            })
        );
    }

    #[test]
    fn negative_width_rejected() {
        assert!(matches!(
            PlacementDB::parse("ota M1A 0 0 -5 200"),
            Err(Error::Placement(_))
        ));
        assert!(PlacementDB::parse("ota M1A 0 0 5").is_err());
        assert!(PlacementDB::parse("ota M1A 0 0 5 x").is_err());
    }

    #[test]
    fn identical_rectangles_are_zero_apart() {
        let d = four_resistors();
        let pl = PlacementDB::parse("s R0 0 0 1 1\ns R1 0 0 1 1\ns R2 5 5 1 1\n").unwrap();
        assert_eq!(relative_distance(d.top_def(), "R0", "R1", &pl).unwrap(), 0.0);
    }

    #[test]
    fn opposite_corner_squares() {
        let d = four_resistors();
        let pl = PlacementDB::parse("s R0 0 0 1 1\ns R1 2 3 1 1\n").unwrap();
        let got = relative_distance(d.top_def(), "R0", "R1", &pl).unwrap();
        assert!((got - 13f64.sqrt() / 5.0).abs() < 1e-15);
    }

    #[test]
    fn missing_placement_is_an_error() {
        let d = four_resistors();
        let pl = PlacementDB::parse("s R0 0 0 1 1\ns R1 2 3 1 1\n").unwrap();
        assert!(matches!(
            relative_distance(d.top_def(), "R0", "R3", &pl),
            Err(Error::MissingPlacement { .. })
        ));
    }

    #[test]
    fn hpwl_examples() {
        let d = four_resistors();
        // centers (0,0) and (3,4) for R0 and R2 on net `a`; bbox 6x8 → diag 10
        let pl = PlacementDB::parse("s R0 -1 -1 2 2\ns R2 2 3 2 2\ns R1 -1 -1 6 8\n").unwrap();
        let got = net_hpwl(d.top_def(), "a", &pl).unwrap();
        assert!((got - 0.7).abs() < 1e-15, "{got}");
        let same = PlacementDB::parse("s R0 0 0 2 2\ns R2 0 0 2 2\n").unwrap();
        assert_eq!(net_hpwl(d.top_def(), "a", &same).unwrap(), 0.0);
        // n1 has R0 and R1; only R0 placed
        let one = PlacementDB::parse("s R0 0 0 2 2\ns R2 0 0 2 2\n").unwrap();
        assert!(net_hpwl(d.top_def(), "n1", &one).is_err());
    }

    #[test]
    fn check_against_design() {
        let d = four_resistors();
        let ok = PlacementDB::parse("s R0 0 0 1 1\ns DUMMY9 0 0 1 1\nother X 0 0 1 1\n").unwrap();
        ok.check_against(&d).unwrap();
        let bad = PlacementDB::parse("s R7 0 0 1 1\n").unwrap();
        assert!(bad.check_against(&d).is_err());
    }

    #[test]
    fn labels_parse_and_normalize() {
        let db = MatchLabelDB::parse("s R1 R0 symmetry\ns R2 R3 common-centroid\n").unwrap();
        assert_eq!(db.len(), 2);
        assert!(db.is_labeled("s", "R0", "R1"));
        assert_eq!(db.get("s")[0].a, "R0");
        assert!(MatchLabelDB::parse("s R0 R1 symmetry\ns R1 R0 symmetry").is_err());
        assert!(MatchLabelDB::parse("s R0 R1 mirrored").is_err());
        let d = four_resistors();
        db.check_against(&d).unwrap();
        let bad = MatchLabelDB::parse("s R0 R9 symmetry").unwrap();
        assert!(bad.check_against(&d).is_err());
        assert_eq!(MatchLabelDB::parse(&db.write()).unwrap(), db);
    }

    fn rects() -> impl Strategy<Value = Vec<(i64, i64, i64, i64)>> {
        prop::collection::vec((-500i64..500, -500i64..500, 1i64..200, 1i64..200), 4)
    }

    fn db_of(rs: &[(i64, i64, i64, i64)], shift: (i64, i64), scale: i64) -> PlacementDB {
        let mut db = PlacementDB::default();
        for (k, &(x, y, w, h)) in rs.iter().enumerate() {
            let r = Rect {
                x: (x + shift.0) * scale,
                y: (y + shift.1) * scale,
                w: w * scale,
                h: h * scale,
            };
            db.insert("s", &format!("R{k}"), r).unwrap();
        }
        db
    }

    proptest! {
        #[test]
        fn distance_properties(rs in rects(), dx in -1000i64..1000, dy in -1000i64..1000, s in 1i64..7) {
            let d = four_resistors();
            let def = d.top_def();
            let base = db_of(&rs, (0, 0), 1);
            let moved = db_of(&rs, (dx, dy), s);
            for a in 0..4 {
                for b in 0..4 {
                    let (a, b) = (format!("R{a}"), format!("R{b}"));
                    let v = relative_distance(def, &a, &b, &base).unwrap();
                    let w = relative_distance(def, &b, &a, &base).unwrap();
                    let m = relative_distance(def, &a, &b, &moved).unwrap();
                    prop_assert_eq!(v, w);
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert!((v - m).abs() < 1e-12);
                }
            }
            for net in ["a", "b", "n1", "n2"] {
                let h = net_hpwl(def, net, &base).unwrap();
                let hm = net_hpwl(def, net, &moved).unwrap();
                prop_assert!(h >= 0.0);
                prop_assert!((h - hm).abs() < 1e-12);
            }
        }
    }
}
