//! Heterogeneous hierarchical instance graph.
//!
//! One node per non-excluded device instance and per sub-circuit
//! occurrence. Every signal net is decomposed into a directed clique over
//! the instances touching it, typed by the pin role of the target
//! instance. Each child points at the node of the sub-circuit occurrence
//! that owns it with a [`EdgeType::Hierarchy`] edge; there are no
//! parent-to-child edges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::netlist::{Design, DeviceKind, PinRole};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    Gate,
    Drain,
    Source,
    Passive,
    SubCircuitPin,
    Hierarchy,
}

impl EdgeType {
    pub const ALL: [EdgeType; 6] = [
        EdgeType::Gate,
        EdgeType::Drain,
        EdgeType::Source,
        EdgeType::Passive,
        EdgeType::SubCircuitPin,
        EdgeType::Hierarchy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::Gate => "gate",
            EdgeType::Drain => "drain",
            EdgeType::Source => "source",
            EdgeType::Passive => "passive",
            EdgeType::SubCircuitPin => "subckt_pin",
            EdgeType::Hierarchy => "hierarchy",
        }
    }

    /// Edge type induced by a pin of the target instance; bulk pins induce none.
    pub fn from_pin(role: PinRole) -> Option<EdgeType> {
        match role {
            PinRole::Gate => Some(EdgeType::Gate),
            PinRole::Drain => Some(EdgeType::Drain),
            PinRole::Source => Some(EdgeType::Source),
            PinRole::Bulk => None,
            PinRole::Terminal(_) => Some(EdgeType::Passive),
            PinRole::Port(_) => Some(EdgeType::SubCircuitPin),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    /// Definition that instantiates this node; `None` for the top.
    pub owner: Option<String>,
    pub instance: String,
    pub kind: DeviceKind,
    pub type_name: String,
    /// Slash-separated occurrence path, unique within the design.
    pub path: String,
    /// Occurrence this node is a member of; `None` for the top.
    pub parent: Option<usize>,
    /// Index of the instance inside its owner definition.
    pub inst_index: Option<usize>,
    /// Occurrence represented by a sub-circuit node.
    pub occurrence: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub ty: EdgeType,
}

/// One instantiation of a sub-circuit definition in the occurrence tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Occurrence {
    pub id: usize,
    pub def: String,
    pub node: usize,
    pub path: String,
    /// Member node ids in definition instance order.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub occurrences: Vec<Occurrence>,
    incoming: Vec<Vec<(usize, EdgeType)>>,
    outgoing: Vec<Vec<(usize, EdgeType)>>,
}

/// Build the instance graph of a validated design.
pub fn build_graph(design: &Design) -> CircuitGraph {
    let mut b = Builder {
        design,
        nodes: Vec::new(),
        edges: BTreeSet::new(),
        occurrences: Vec::new(),
    };
    let top = design.top_def();
    b.nodes.push(Node {
        id: 0,
        owner: None,
        instance: top.name.clone(),
        kind: DeviceKind::SubCircuit,
        type_name: top.name.clone(),
        path: top.name.clone(),
        parent: None,
        inst_index: None,
        occurrence: None,
    });
    b.expand(0, &top.name);
    CircuitGraph::from_parts(b.nodes, b.edges.into_iter().collect(), b.occurrences)
}

struct Builder<'a> {
    design: &'a Design,
    nodes: Vec<Node>,
    edges: BTreeSet<Edge>,
    occurrences: Vec<Occurrence>,
}

impl Builder<'_> {
    fn expand(&mut self, node: usize, def_name: &str) {
        let design = self.design;
        let def = &design.subckts[def_name];
        let occ_id = self.occurrences.len();
        self.nodes[node].occurrence = Some(occ_id);
        let path = self.nodes[node].path.clone();
        self.occurrences.push(Occurrence {
            id: occ_id,
            def: def.name.clone(),
            node,
            path: path.clone(),
            members: Vec::new(),
        });

        let mut by_inst: BTreeMap<usize, usize> = BTreeMap::new();
        for (idx, inst) in def.instances.iter().enumerate() {
            if inst.excluded {
                continue;
            }
            let id = self.nodes.len();
            self.nodes.push(Node {
                id,
                owner: Some(def.name.clone()),
                instance: inst.name.clone(),
                kind: inst.kind,
                type_name: inst.type_name.clone(),
                path: format!("{path}/{}", inst.name),
                parent: Some(occ_id),
                inst_index: Some(idx),
                occurrence: None,
            });
            by_inst.insert(idx, id);
            self.occurrences[occ_id].members.push(id);
            self.edges.insert(Edge {
                u: id,
                v: node,
                ty: EdgeType::Hierarchy,
            });
        }

        for (net, pins) in &def.nets {
            if design.is_global(net) {
                continue;
            }
            let mut roles: BTreeMap<usize, BTreeSet<EdgeType>> = BTreeMap::new();
            for &(idx, role) in pins {
                let (Some(&id), Some(ty)) = (by_inst.get(&idx), EdgeType::from_pin(role)) else {
                    continue;
                };
                roles.entry(id).or_default().insert(ty);
            }
            for &u in roles.keys() {
                for (&v, types) in &roles {
                    if u == v {
                        continue;
                    }
                    for &ty in types {
                        self.edges.insert(Edge { u, v, ty });
                    }
                }
            }
        }

        for (&idx, &id) in &by_inst {
            let inst = &def.instances[idx];
            if inst.kind == DeviceKind::SubCircuit {
                self.expand(id, &inst.type_name);
            }
        }
    }
}

impl CircuitGraph {
    /// Assemble a graph from explicit parts; edges are sorted and
    /// deduplicated.
    pub fn from_parts(nodes: Vec<Node>, mut edges: Vec<Edge>, occurrences: Vec<Occurrence>) -> Self {
        edges.sort();
        edges.dedup();
        let n = nodes.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for e in &edges {
            incoming[e.v].push((e.u, e.ty));
            outgoing[e.u].push((e.v, e.ty));
        }
        CircuitGraph {
            nodes,
            edges,
            occurrences,
            incoming,
            outgoing,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Incoming `(source, type)` pairs of `node`, sorted.
    pub fn incoming(&self, node: usize) -> &[(usize, EdgeType)] {
        &self.incoming[node]
    }

    /// All neighbors of `node`, sorted by neighbor id, then edge type,
    /// then direction.
    pub fn neighbors(&self, node: usize) -> Result<Vec<(usize, EdgeType, Direction)>> {
        if node >= self.nodes.len() {
            return Err(Error::Design(format!("unknown node id {node}")));
        }
        let mut out: Vec<(usize, EdgeType, Direction)> = self.incoming[node]
            .iter()
            .map(|&(u, t)| (u, t, Direction::In))
            .chain(self.outgoing[node].iter().map(|&(v, t)| (v, t, Direction::Out)))
            .collect();
        out.sort();
        Ok(out)
    }

    pub fn count_edges(&self, ty: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.ty == ty).count()
    }

    pub fn node_by_path(&self, path: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.path == path)
    }

    /// Line-oriented dump: a `node` table followed by `u v type` edge lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "node {} {} {} {}", n.id, n.kind.name(), n.type_name, n.path);
        }
        for e in &self.edges {
            let _ = writeln!(out, "{} {} {}", e.u, e.v, e.ty.name());
        }
        out
    }
}
