//! Hierarchical netlist model, placement rectangles and match labels.
//!
//! The text formats are line oriented. See [`parse_netlist`] for the
//! netlist grammar and [`PlacementDB::parse`] / [`MatchLabelDB::parse`] for
//! the two record formats.

mod parse;
mod placement;

pub use parse::{parse_netlist, parse_netlist_with, write_netlist, ParseOptions};
pub use placement::{
    net_hpwl, relative_distance, MatchLabel, MatchLabelDB, MatchPattern, PlacementDB, Rect,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Net name prefixes treated as power/ground regardless of `.GLOBAL`.
pub const SUPPLY_PREFIXES: [&str; 5] = ["vdd", "vss", "gnd", "avdd", "avss"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceKind {
    RegularNmos,
    RegularPmos,
    ThickGateNmos,
    ThickGatePmos,
    Resistor,
    Capacitor,
    SubCircuit,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 7] = [
        DeviceKind::RegularNmos,
        DeviceKind::RegularPmos,
        DeviceKind::ThickGateNmos,
        DeviceKind::ThickGatePmos,
        DeviceKind::Resistor,
        DeviceKind::Capacitor,
        DeviceKind::SubCircuit,
    ];

    /// Position of this kind in the one-hot feature block.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_transistor(self) -> bool {
        matches!(
            self,
            DeviceKind::RegularNmos
                | DeviceKind::RegularPmos
                | DeviceKind::ThickGateNmos
                | DeviceKind::ThickGatePmos
        )
    }

    pub fn is_pmos(self) -> bool {
        matches!(self, DeviceKind::RegularPmos | DeviceKind::ThickGatePmos)
    }

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::RegularNmos => "nmos",
            DeviceKind::RegularPmos => "pmos",
            DeviceKind::ThickGateNmos => "nmos_thick",
            DeviceKind::ThickGatePmos => "pmos_thick",
            DeviceKind::Resistor => "resistor",
            DeviceKind::Capacitor => "capacitor",
            DeviceKind::SubCircuit => "subckt",
        }
    }
}

/// Classify a transistor type name into one of the four transistor kinds.
///
/// Polarity comes from a `p`/`n` first letter or a `pch`/`pmos`/`nch`/`nmos`
/// substring; thick-gate devices are recognized by any of `thick_markers`.
pub fn classify_transistor(type_name: &str, thick_markers: &[String]) -> Option<DeviceKind> {
    let t = type_name.to_ascii_lowercase();
    let pmos = t.contains("pch") || t.contains("pmos");
    let nmos = t.contains("nch") || t.contains("nmos");
    let is_p = match (pmos, nmos) {
        (true, false) => true,
        (false, true) => false,
        _ => match t.chars().next() {
            Some('p') => true,
            Some('n') => false,
            _ => return None,
        },
    };
    let thick = thick_markers
        .iter()
        .any(|m| !m.is_empty() && t.contains(&m.to_ascii_lowercase()));
    Some(match (is_p, thick) {
        (false, false) => DeviceKind::RegularNmos,
        (true, false) => DeviceKind::RegularPmos,
        (false, true) => DeviceKind::ThickGateNmos,
        (true, true) => DeviceKind::ThickGatePmos,
    })
}

/// Role of one pin of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PinRole {
    Drain,
    Gate,
    Source,
    Bulk,
    /// Terminal 0 or 1 of a two-terminal passive.
    Terminal(u8),
    /// Port position of a sub-circuit instance.
    Port(usize),
}

/// Sizing parameters; fields not applicable to a kind are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Sizing {
    pub l: Option<u64>,
    pub nf: Option<u64>,
    pub nfin: Option<u64>,
    pub w: Option<u64>,
    pub m: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub name: String,
    pub kind: DeviceKind,
    /// Foundry device type, or the definition name for sub-circuit instances.
    pub type_name: String,
    pub pins: Vec<(PinRole, String)>,
    pub params: Sizing,
    /// Dummy and decap devices are kept in the model but left out of the graph.
    pub excluded: bool,
}

impl Instance {
    /// Nets this instance touches through pins that carry signal edges
    /// (everything but transistor bulk), deduplicated in pin order.
    pub fn signal_nets(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (role, net) in &self.pins {
            if *role != PinRole::Bulk && !out.contains(&net.as_str()) {
                out.push(net);
            }
        }
        out
    }
}

/// Whether an instance name or type marks a dummy/decap device.
pub fn is_excluded_name(name: &str, type_name: &str) -> bool {
    let n = name.to_ascii_uppercase();
    let t = type_name.to_ascii_lowercase();
    n.starts_with("DUMMY") || n.starts_with("DECAP") || t.contains("dummy") || t.contains("decap")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubCircuitDef {
    pub name: String,
    pub ports: Vec<String>,
    pub instances: Vec<Instance>,
    /// Net name to the (instance index, pin role) pairs attached to it.
    pub nets: BTreeMap<String, Vec<(usize, PinRole)>>,
    index: HashMap<String, usize>,
}

impl SubCircuitDef {
    pub fn new(name: impl Into<String>, ports: Vec<String>) -> Self {
        Self {
            name: name.into(),
            ports,
            instances: Vec::new(),
            nets: BTreeMap::new(),
            index: HashMap::new(),
        }
    }

    /// Append an instance; fails on a duplicate name.
    pub fn push(&mut self, inst: Instance) -> Result<usize, crate::Error> {
        if self.index.contains_key(&inst.name) {
            return Err(crate::Error::DuplicateInstance {
                subckt: self.name.clone(),
                instance: inst.name,
            });
        }
        let idx = self.instances.len();
        for (role, net) in &inst.pins {
            self.nets.entry(net.clone()).or_default().push((idx, *role));
        }
        self.index.insert(inst.name.clone(), idx);
        self.instances.push(inst);
        Ok(idx)
    }

    pub fn instance_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn instance(&self, name: &str) -> Option<&Instance> {
        self.instance_index(name).map(|i| &self.instances[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Design {
    pub name: String,
    pub subckts: BTreeMap<String, SubCircuitDef>,
    pub top: String,
    pub globals: BTreeSet<String>,
}

impl Design {
    /// Power/ground test: listed under `.GLOBAL` or carrying a supply prefix.
    pub fn is_global(&self, net: &str) -> bool {
        if self.globals.contains(net) {
            return true;
        }
        let lower = net.to_ascii_lowercase();
        SUPPLY_PREFIXES.iter().any(|p| lower.starts_with(p))
    }

    pub fn subckt(&self, name: &str) -> Option<&SubCircuitDef> {
        self.subckts.get(name)
    }

    pub fn top_def(&self) -> &SubCircuitDef {
        &self.subckts[&self.top]
    }

    /// Check every invariant of a well-formed design: references resolve,
    /// arities match, the instantiation relation is acyclic and the top exists.
    pub fn validate(&self) -> Result<(), crate::Error> {
        if !self.subckts.contains_key(&self.top) {
            return Err(crate::Error::Design(format!(
                "top sub-circuit `{}` is not defined",
                self.top
            )));
        }
        for def in self.subckts.values() {
            for inst in &def.instances {
                if inst.kind != DeviceKind::SubCircuit {
                    continue;
                }
                let child = self.subckts.get(&inst.type_name).ok_or_else(|| {
                    crate::Error::UndefinedSubckt {
                        name: inst.type_name.clone(),
                        instance: inst.name.clone(),
                        parent: def.name.clone(),
                    }
                })?;
                if child.ports.len() != inst.pins.len() {
                    return Err(crate::Error::PortArity {
                        instance: inst.name.clone(),
                        subckt: child.name.clone(),
                        expected: child.ports.len(),
                        got: inst.pins.len(),
                    });
                }
            }
        }
        self.check_acyclic()
    }

    fn check_acyclic(&self) -> Result<(), crate::Error> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: HashMap<&str, u8> = HashMap::new();
        fn visit<'a>(
            d: &'a Design,
            name: &'a str,
            state: &mut HashMap<&'a str, u8>,
        ) -> Result<(), crate::Error> {
            match state.get(name) {
                Some(1) => {
                    return Err(crate::Error::Design(format!(
                        "sub-circuit `{name}` instantiates itself"
                    )))
                }
                Some(2) => return Ok(()),
                _ => {}
            }
            state.insert(name, 1);
            for inst in &d.subckts[name].instances {
                if inst.kind == DeviceKind::SubCircuit {
                    visit(d, &inst.type_name, state)?;
                }
            }
            state.insert(name, 2);
            Ok(())
        }
        for name in self.subckts.keys() {
            visit(self, name, &mut state)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transistor_classification() {
        let m = ParseOptions::default().thick_gate_markers;
        assert_eq!(
            classify_transistor("nch_lvt_mac", &m),
            Some(DeviceKind::RegularNmos)
        );
        assert_eq!(
            classify_transistor("pch_ulvt_mac", &m),
            Some(DeviceKind::RegularPmos)
        );
        assert_eq!(
            classify_transistor("nch_25_mac", &m),
            Some(DeviceKind::ThickGateNmos)
        );
        assert_eq!(
            classify_transistor("pch_hvt33", &m),
            Some(DeviceKind::ThickGatePmos)
        );
        assert_eq!(classify_transistor("xyz", &m), None);
    }

    #[test]
    fn globals_by_prefix_and_list() {
        let mut d = parse_netlist(".GLOBAL vbias\n.SUBCKT t a\n.ENDS\n.TOP t").unwrap();
        assert!(d.is_global("vbias"));
        assert!(d.is_global("VDD"));
        assert!(d.is_global("avss_core"));
        assert!(d.is_global("gnd!"));
        assert!(!d.is_global("out"));
        d.globals.clear();
        assert!(!d.is_global("vbias"));
    }

    #[test]
    fn excluded_names() {
        assert!(is_excluded_name("DUMMY3", "nch_lvt_mac"));
        assert!(is_excluded_name("decap_1", "nch"));
        assert!(is_excluded_name("M0", "decap_mos"));
        assert!(!is_excluded_name("M0", "nch_lvt_mac"));
    }
}
