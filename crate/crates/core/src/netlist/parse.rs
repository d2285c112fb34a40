//! Line-oriented netlist reader and writer.
//!
//! ```text
//! .GLOBAL <net>+
//! .SUBCKT <name> <port>*
//! M<id> <d> <g> <s> [<b>] <type> L=<int> NF=<int> NFIN=<int>
//! R<id> <a> <b> <type> L=<int> W=<int>
//! C<id> <a> <b> <type> M=<int>
//! X<id> <net>* <subckt-name>
//! .ENDS
//! .TOP <name>
//! ```
//!
//! `#` starts a comment. The element letter is not part of the instance
//! name: `MM1A` is instance `M1A`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::{
    classify_transistor, is_excluded_name, Design, DeviceKind, Instance, PinRole, Sizing,
    SubCircuitDef,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    /// Type-name substrings marking thick-gate transistors.
    pub thick_gate_markers: Vec<String>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            thick_gate_markers: vec!["25".into(), "33".into(), "hv".into()],
        }
    }
}

/// Parse with default options. The design is named `design`.
pub fn parse_netlist(text: &str) -> Result<Design> {
    parse_netlist_with("design", text, &ParseOptions::default())
}

pub fn parse_netlist_with(name: &str, text: &str, opts: &ParseOptions) -> Result<Design> {
    let mut subckts: BTreeMap<String, SubCircuitDef> = BTreeMap::new();
    let mut globals = BTreeSet::new();
    let mut top: Option<String> = None;
    let mut current: Option<SubCircuitDef> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        let Some(first) = toks.first() else { continue };
        let syntax = |msg: String| Error::Syntax { line: line_no, msg };

        if let Some(cmd) = first.strip_prefix('.') {
            match cmd.to_ascii_uppercase().as_str() {
                "GLOBAL" => {
                    if toks.len() < 2 {
                        return Err(syntax(".GLOBAL needs at least one net".into()));
                    }
                    globals.extend(toks[1..].iter().map(|s| s.to_string()));
                }
                "SUBCKT" => {
                    if current.is_some() {
                        return Err(syntax("nested .SUBCKT".into()));
                    }
                    if toks.len() < 2 {
                        return Err(syntax(".SUBCKT needs a name".into()));
                    }
                    if subckts.contains_key(toks[1]) {
                        return Err(syntax(format!("sub-circuit `{}` redefined", toks[1])));
                    }
                    let ports: Vec<String> = toks[2..].iter().map(|s| s.to_string()).collect();
                    let unique: BTreeSet<&String> = ports.iter().collect();
                    if unique.len() != ports.len() {
                        return Err(syntax("duplicate port name".into()));
                    }
                    current = Some(SubCircuitDef::new(toks[1], ports));
                }
                "ENDS" => {
                    let def = current
                        .take()
                        .ok_or_else(|| syntax(".ENDS without .SUBCKT".into()))?;
                    if let Some(n) = toks.get(1) {
                        if *n != def.name {
                            return Err(syntax(format!(
                                ".ENDS {n} closes sub-circuit `{}`",
                                def.name
                            )));
                        }
                    }
                    subckts.insert(def.name.clone(), def);
                }
                "TOP" => {
                    if toks.len() != 2 {
                        return Err(syntax(".TOP takes exactly one name".into()));
                    }
                    if top.is_some() {
                        return Err(syntax("multiple .TOP lines".into()));
                    }
                    top = Some(toks[1].to_string());
                }
                other => return Err(syntax(format!("unknown command .{other}"))),
            }
            continue;
        }

        let def = current
            .as_mut()
            .ok_or_else(|| syntax("element outside .SUBCKT".into()))?;
        let inst = parse_element(&toks, opts).map_err(syntax)?;
        def.push(inst)?;
    }

    if let Some(def) = current {
        return Err(Error::Syntax {
            line: text.lines().count(),
            msg: format!("sub-circuit `{}` is missing .ENDS", def.name),
        });
    }
    let top = match top {
        Some(t) => t,
        None => infer_top(&subckts)?,
    };
    let design = Design {
        name: name.to_string(),
        subckts,
        top,
        globals,
    };
    design.validate()?;
    Ok(design)
}

/// The unique definition nobody instantiates.
fn infer_top(subckts: &BTreeMap<String, SubCircuitDef>) -> Result<String> {
    let used: BTreeSet<&str> = subckts
        .values()
        .flat_map(|d| d.instances.iter())
        .filter(|i| i.kind == DeviceKind::SubCircuit)
        .map(|i| i.type_name.as_str())
        .collect();
    let roots: Vec<&String> = subckts.keys().filter(|k| !used.contains(k.as_str())).collect();
    match roots.as_slice() {
        [one] => Ok((*one).clone()),
        _ => Err(Error::Design(format!(
            "no .TOP line and {} candidate top sub-circuits",
            roots.len()
        ))),
    }
}

fn parse_element(toks: &[&str], opts: &ParseOptions) -> std::result::Result<Instance, String> {
    let head = toks[0];
    let mut chars = head.chars();
    let letter = chars.next().unwrap().to_ascii_uppercase();
    let name: String = chars.collect();
    if name.is_empty() {
        return Err(format!("element `{head}` has no instance name"));
    }
    let mut positional: Vec<&str> = Vec::new();
    let mut kv: BTreeMap<String, u64> = BTreeMap::new();
    for t in &toks[1..] {
        if let Some((k, v)) = t.split_once('=') {
            if letter == 'X' {
                return Err("sub-circuit instances take no parameters".into());
            }
            let key = k.to_ascii_uppercase();
            let val: u64 = v
                .parse()
                .map_err(|_| format!("parameter {k}: `{v}` is not a non-negative integer"))?;
            if kv.insert(key, val).is_some() {
                return Err(format!("parameter {k} given twice"));
            }
        } else {
            if !kv.is_empty() {
                return Err(format!("positional token `{t}` after parameters"));
            }
            positional.push(t);
        }
    }
    let take = |kv: &mut BTreeMap<String, u64>, key: &str| -> std::result::Result<u64, String> {
        kv.remove(key)
            .ok_or_else(|| format!("`{head}` is missing parameter {key}"))
    };

    let (kind, type_name, pins, params) = match letter {
        'M' => {
            let (nets, ty) = match positional.len() {
                4 | 5 => positional.split_at(positional.len() - 1),
                n => return Err(format!("transistor `{head}` needs 4 or 5 fields, got {n}")),
            };
            let ty = ty[0];
            let kind = classify_transistor(ty, &opts.thick_gate_markers)
                .ok_or_else(|| format!("cannot tell polarity of transistor type `{ty}`"))?;
            let roles = [PinRole::Drain, PinRole::Gate, PinRole::Source, PinRole::Bulk];
            let pins = nets
                .iter()
                .zip(roles)
                .map(|(n, r)| (r, n.to_string()))
                .collect();
            let params = Sizing {
                l: Some(take(&mut kv, "L")?),
                nf: Some(take(&mut kv, "NF")?),
                nfin: Some(take(&mut kv, "NFIN")?),
                ..Sizing::default()
            };
            (kind, ty.to_string(), pins, params)
        }
        'R' | 'C' => {
            if positional.len() != 3 {
                return Err(format!(
                    "passive `{head}` needs 2 nets and a type, got {} fields",
                    positional.len()
                ));
            }
            let pins = vec![
                (PinRole::Terminal(0), positional[0].to_string()),
                (PinRole::Terminal(1), positional[1].to_string()),
            ];
            let (kind, params) = if letter == 'R' {
                let l = take(&mut kv, "L")?;
                let w = take(&mut kv, "W")?;
                (
                    DeviceKind::Resistor,
                    Sizing {
                        l: Some(l),
                        w: Some(w),
                        ..Sizing::default()
                    },
                )
            } else {
                let m = take(&mut kv, "M")?;
                (
                    DeviceKind::Capacitor,
                    Sizing {
                        m: Some(m),
                        ..Sizing::default()
                    },
                )
            };
            (kind, positional[2].to_string(), pins, params)
        }
        'X' => {
            let Some((sub, nets)) = positional.split_last() else {
                return Err(format!("sub-circuit instance `{head}` names no sub-circuit"));
            };
            let pins = nets
                .iter()
                .enumerate()
                .map(|(i, n)| (PinRole::Port(i), n.to_string()))
                .collect();
            (DeviceKind::SubCircuit, sub.to_string(), pins, Sizing::default())
        }
        other => return Err(format!("unknown element type `{other}`")),
    };
    if let Some(k) = kv.keys().next() {
        return Err(format!("unexpected parameter {k} on `{head}`"));
    }
    let excluded = is_excluded_name(&name, &type_name);
    Ok(Instance {
        name,
        kind,
        type_name,
        pins,
        params,
        excluded,
    })
}

/// Serialize a design back to the netlist grammar.
pub fn write_netlist(design: &Design) -> String {
    let mut out = String::new();
    if !design.globals.is_empty() {
        let g: Vec<&str> = design.globals.iter().map(String::as_str).collect();
        let _ = writeln!(out, ".GLOBAL {}", g.join(" "));
    }
    for def in design.subckts.values() {
        let mut head = format!(".SUBCKT {}", def.name);
        for p in &def.ports {
            head.push(' ');
            head.push_str(p);
        }
        let _ = writeln!(out, "{head}");
        for inst in &def.instances {
            let nets: Vec<&str> = inst.pins.iter().map(|(_, n)| n.as_str()).collect();
            let nets = nets.join(" ");
            let p = &inst.params;
            let line = match inst.kind {
                k if k.is_transistor() => format!(
                    "M{} {} {} L={} NF={} NFIN={}",
                    inst.name,
                    nets,
                    inst.type_name,
                    p.l.unwrap_or(0),
                    p.nf.unwrap_or(0),
                    p.nfin.unwrap_or(0)
                ),
                DeviceKind::Resistor => format!(
                    "R{} {} {} L={} W={}",
                    inst.name,
                    nets,
                    inst.type_name,
                    p.l.unwrap_or(0),
                    p.w.unwrap_or(0)
                ),
                DeviceKind::Capacitor => format!(
                    "C{} {} {} M={}",
                    inst.name,
                    nets,
                    inst.type_name,
                    p.m.unwrap_or(0)
                ),
                _ => {
                    if nets.is_empty() {
                        format!("X{} {}", inst.name, inst.type_name)
                    } else {
                        format!("X{} {} {}", inst.name, nets, inst.type_name)
                    }
                }
            };
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, ".ENDS");
    }
    let _ = writeln!(out, ".TOP {}", design.top);
    out
}
