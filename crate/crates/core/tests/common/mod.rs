//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

/// Two five-transistor OTAs inside a parent, with a dummy device, a load
/// capacitor and a resistor to ground.
pub const FIG3: &str = "\
.GLOBAL vdd vss
.SUBCKT ota inp inn out vb
MM0 x inp t vss nch_lvt_mac L=16 NF=2 NFIN=4
MM1 out inn t vss nch_lvt_mac L=16 NF=2 NFIN=4
MM2 x x vdd vdd pch_lvt_mac L=16 NF=2 NFIN=4
MM3 out x vdd vdd pch_lvt_mac L=16 NF=2 NFIN=4
MM4 t vb vss vss nch_lvt_mac L=32 NF=4 NFIN=4
MDUMMY0 t t t vss nch_lvt_mac L=16 NF=1 NFIN=4
.ENDS
.SUBCKT amp in1 in2 o vb
XI0 in1 in2 mid vb ota
XI1 mid mid o vb ota
CC0 mid o cap_mim M=2
RR0 o vss rupolym_m L=200 W=2
.ENDS
.TOP amp
";

/// Edge `(from path, to path, type name)`.
pub type PathEdge = (String, String, &'static str);

struct Line {
    name: String,
    /// (net, role) with roles named like edge types; `None` for bulk.
    pins: Vec<(String, Option<&'static str>)>,
    child: Option<String>,
    excluded: bool,
}

fn read_defs(text: &str) -> (BTreeMap<String, Vec<Line>>, BTreeSet<String>, String) {
    let mut defs: BTreeMap<String, Vec<Line>> = BTreeMap::new();
    let mut globals = BTreeSet::new();
    let mut top = String::new();
    let mut cur = String::new();
    for raw in text.lines() {
        let t: Vec<&str> = raw.split_whitespace().collect();
        let Some(&head) = t.first() else { continue };
        match head {
            ".GLOBAL" => globals.extend(t[1..].iter().map(|s| s.to_string())),
            ".SUBCKT" => {
                cur = t[1].to_string();
                defs.insert(cur.clone(), Vec::new());
            }
            ".ENDS" => {}
            ".TOP" => top = t[1].to_string(),
            _ => {
                let name = head[1..].to_string();
                let positional: Vec<&str> = t[1..].iter().copied().filter(|s| !s.contains('=')).collect();
                let (pins, child) = match head.as_bytes()[0] {
                    b'M' => (
                        vec![
                            (positional[0].to_string(), Some("drain")),
                            (positional[1].to_string(), Some("gate")),
                            (positional[2].to_string(), Some("source")),
                            (positional[3].to_string(), None),
                        ],
                        None,
                    ),
                    b'R' | b'C' => (
                        positional[..2].iter().map(|n| (n.to_string(), Some("passive"))).collect(),
                        None,
                    ),
                    b'X' => {
                        let (sub, nets) = positional.split_last().unwrap();
                        (
                            nets.iter().map(|n| (n.to_string(), Some("subckt_pin"))).collect(),
                            Some(sub.to_string()),
                        )
                    }
                    _ => panic!("unexpected line {raw}"),
                };
                let excluded = name.to_ascii_uppercase().starts_with("DUMMY");
                defs.get_mut(&cur).unwrap().push(Line { name, pins, child, excluded });
            }
        }
    }
    (defs, globals, top)
}

/// Node paths and directed edges obtained by visiting every occurrence and
/// every ordered pair of distinct instances on each signal net.
pub fn enumerate(text: &str) -> (Vec<String>, BTreeSet<PathEdge>) {
    let (defs, globals, top) = read_defs(text);
    let supply = |n: &str| {
        let l = n.to_ascii_lowercase();
        globals.contains(n) || ["vdd", "vss", "gnd", "avdd", "avss"].iter().any(|p| l.starts_with(p))
    };
    let mut nodes = vec![top.clone()];
    let mut edges = BTreeSet::new();
    let mut stack = vec![(top.clone(), top.clone())];
    while let Some((path, def)) = stack.pop() {
        let lines: Vec<&Line> = defs[&def].iter().filter(|l| !l.excluded).collect();
        for l in &lines {
            let p = format!("{path}/{}", l.name);
            nodes.push(p.clone());
            edges.insert((p.clone(), path.clone(), "hierarchy"));
            if let Some(c) = &l.child {
                stack.push((p, c.clone()));
            }
        }
        for u in &lines {
            for v in &lines {
                if u.name == v.name {
                    continue;
                }
                for (net_v, role) in &v.pins {
                    let Some(role) = role else { continue };
                    let shares = u.pins.iter().any(|(n, r)| n == net_v && r.is_some());
                    if shares && !supply(net_v) {
                        edges.insert((format!("{path}/{}", u.name), format!("{path}/{}", v.name), *role));
                    }
                }
            }
        }
    }
    nodes.sort();
    (nodes, edges)
}
