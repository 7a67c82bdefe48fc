//! Cross-layer pairing of SUs through shared memory layouts and the
//! network-wide search over paired SU combinations.
//!
//! Every producer tensor forms a group with its consumers. Under a bank
//! layout, a group is satisfiable by an SU tuple when one memory layout holds
//! a write pattern of the producer SU and a read pattern of every consumer SU.
//! Groups are encoded as bitmasks over memory-layout candidates, and the
//! network search assigns SUs layer by layer in topological order with those
//! masks as forward checks.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{evaluate_with_layout, naive_schedule, natural_schedule, pd_eff};
use crate::factors::LayoutFactors;
use crate::hardware::{AcceleratorConfig, MemoryGeometry};
use crate::layermapper::{
    adjusted_cost, log10_combinations, prune_su_pool, CostSource, LayerwiseResult, Metric, PortAdjust,
    PruningConfig, SUPool, SpatialUnrolling, StreamPort,
};
use crate::layout::{
    enumerate_bank_layouts, enumerate_md_layouts, natural_layout, natural_rpd, port_candidates, role_tile, NaturalLayout,
    su_supports_bank_layout, BankLayout, MemLayout, PortLayout, Role,
};
use crate::workload::NetworkGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerChoice {
    pub su: SpatialUnrolling,
    /// Layer-wise cost of `su` under an ideal port.
    pub base: LayerwiseResult,
}

/// Placement of one producer's output tensor. `md.base` is the bank layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorLayout {
    pub producer: usize,
    pub md: MemLayout,
    pub wpd: LayoutFactors,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeLayout {
    pub producer: usize,
    pub consumer: usize,
    pub rpd: LayoutFactors,
    /// Layout left to the producer's natural order instead of matched.
    pub cut: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSchedule {
    pub source: CostSource,
    /// Shared bank layout of matched tensors, if any tensor is matched.
    pub bank_layout: Option<BankLayout>,
    /// Indexed by layer.
    pub layers: Vec<LayerChoice>,
    pub tensors: Vec<TensorLayout>,
    pub edges: Vec<EdgeLayout>,
}

impl NetworkSchedule {
    pub fn tensor_of(&self, producer: usize) -> Option<&TensorLayout> {
        self.tensors.iter().find(|t| t.producer == producer)
    }

    pub fn cut_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.cut).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SUPair {
    pub producer_layer: usize,
    pub producer_su: SpatialUnrolling,
    pub consumer_layer: usize,
    pub consumer_su: SpatialUnrolling,
    pub md: MemLayout,
    pub wpd: PortLayout,
    pub rpd: PortLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsumerSide {
    pub layer: usize,
    /// `(pool index, first fitting read layout)`.
    pub options: Vec<(usize, PortLayout)>,
}

/// All SUs of one producer group that fit a single memory layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub md: MemLayout,
    pub producer: usize,
    /// `(pool index, first fitting write layout)`.
    pub producers: Vec<(usize, PortLayout)>,
    pub consumers: Vec<ConsumerSide>,
}

impl PairSet {
    pub fn pairs(&self, pools: &[SUPool]) -> Vec<SUPair> {
        let mut out = Vec::new();
        for &(pi, wpd) in &self.producers {
            for side in &self.consumers {
                for &(ci, rpd) in &side.options {
                    out.push(SUPair {
                        producer_layer: self.producer,
                        producer_su: pools[self.producer].results[pi].su,
                        consumer_layer: side.layer,
                        consumer_su: pools[side.layer].results[ci].su,
                        md: self.md,
                        wpd,
                        rpd,
                    });
                }
            }
        }
        out
    }
}

const MAX_MD_CANDIDATES: usize = 128;

fn first_port(tile: &LayoutFactors, bl: &BankLayout, md: &MemLayout, geo: &MemoryGeometry) -> Option<LayoutFactors> {
    let eff = md.effective();
    port_candidates(tile, bl, geo).into_iter().find(|p| p.divides(&eff))
}

/// Memory-layout compatibility of one producer group under a bank layout.
#[derive(Clone, Debug)]
pub struct GroupTable {
    pub producer: usize,
    pub consumers: Vec<usize>,
    pub mds: Vec<MemLayout>,
    /// Member 0 is the producer, then consumers in topological order.
    /// Each maps pool index to the set of memory layouts it fits.
    masks: Vec<HashMap<usize, u128>>,
    pub valid: u128,
}

impl GroupTable {
    pub fn build(
        graph: &NetworkGraph,
        producer: usize,
        pools: &[SUPool],
        domains: &[Vec<usize>],
        bl: &BankLayout,
        geo: &MemoryGeometry,
    ) -> Self {
        let mds = enumerate_md_layouts(bl, geo);
        assert!(mds.len() <= MAX_MD_CANDIDATES, "too many memory layout candidates");
        let consumers = graph.consumers_of(producer).to_vec();
        let members: Vec<(usize, Role)> = std::iter::once((producer, Role::Producer))
            .chain(consumers.iter().map(|&c| (c, Role::Consumer)))
            .collect();
        let mut cache: HashMap<LayoutFactors, u128> = HashMap::new();
        let mut masks = Vec::with_capacity(members.len());
        let mut valid = u128::MAX;
        for &(layer, role) in &members {
            let mut member = HashMap::new();
            let mut any = 0u128;
            for &idx in &domains[layer] {
                let su = &pools[layer].results[idx].su;
                if !su_supports_bank_layout(su, role, graph.layer(layer), bl) {
                    continue;
                }
                let tile = role_tile(su, role, graph.layer(layer));
                let mask = *cache.entry(tile).or_insert_with(|| {
                    let ports = port_candidates(&tile, bl, geo);
                    mds.iter().enumerate().fold(0u128, |acc, (i, md)| {
                        let eff = md.effective();
                        if ports.iter().any(|p| p.divides(&eff)) {
                            acc | (1 << i)
                        } else {
                            acc
                        }
                    })
                });
                if mask != 0 {
                    member.insert(idx, mask);
                    any |= mask;
                }
            }
            valid &= any;
            masks.push(member);
        }
        for member in &mut masks {
            member.retain(|_, m| {
                *m &= valid;
                *m != 0
            });
        }
        GroupTable {
            producer,
            consumers,
            mds,
            masks,
            valid,
        }
    }

    fn member_index(&self, layer: usize, role: Role) -> Option<usize> {
        match role {
            Role::Producer => (layer == self.producer).then_some(0),
            Role::Consumer => self.consumers.iter().position(|&c| c == layer).map(|i| i + 1),
        }
    }

    pub fn mask(&self, layer: usize, role: Role, pool_idx: usize) -> u128 {
        self.member_index(layer, role)
            .and_then(|m| self.masks[m].get(&pool_idx).copied())
            .unwrap_or(0)
    }

    pub fn pair_sets(&self, graph: &NetworkGraph, pools: &[SUPool], domains: &[Vec<usize>], bl: &BankLayout, geo: &MemoryGeometry) -> Vec<PairSet> {
        let p = self.producer;
        let mut out = Vec::new();
        for (i, md) in self.mds.iter().enumerate() {
            if self.valid & (1 << i) == 0 {
                continue;
            }
            let fits = |layer: usize, role: Role| -> Vec<(usize, PortLayout)> {
                domains[layer]
                    .iter()
                    .filter(|&&idx| self.mask(layer, role, idx) & (1 << i) != 0)
                    .map(|&idx| {
                        let tile = role_tile(&pools[layer].results[idx].su, role, graph.layer(layer));
                        let port = first_port(&tile, bl, md, geo).expect("mask implies a fitting port");
                        let port = match role {
                            Role::Producer => PortLayout::write(port),
                            Role::Consumer => PortLayout::read(port),
                        };
                        (idx, port)
                    })
                    .collect()
            };
            out.push(PairSet {
                md: *md,
                producer: p,
                producers: fits(p, Role::Producer),
                consumers: self
                    .consumers
                    .iter()
                    .map(|&c| ConsumerSide {
                        layer: c,
                        options: fits(c, Role::Consumer),
                    })
                    .collect(),
            });
        }
        out
    }
}

/// Pair sets of one producer group: for each memory layout that some
/// producer SU and some SU of every consumer can share.
pub fn pair_sus(
    graph: &NetworkGraph,
    producer: usize,
    pools: &[SUPool],
    domains: &[Vec<usize>],
    bl: &BankLayout,
    geo: &MemoryGeometry,
) -> Vec<PairSet> {
    GroupTable::build(graph, producer, pools, domains, bl, geo).pair_sets(graph, pools, domains, bl, geo)
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub pool_idx: usize,
    pub energy: f64,
    pub latency: f64,
    /// One mask per group slot of the position.
    masks: Vec<u128>,
}

/// Layers in topological order, each with candidate SUs and the group
/// constraints they take part in.
#[derive(Clone, Debug)]
pub struct ChainProblem {
    pub order: Vec<usize>,
    pub cands: Vec<Vec<Candidate>>,
    slots: Vec<Vec<usize>>,
    group_count: usize,
}

impl ChainProblem {
    /// `tables[layer]` holds the constraint of the tensor produced by
    /// `layer`, or `None` when that tensor is unconstrained.
    pub fn new(graph: &NetworkGraph, pools: &[SUPool], domains: &[Vec<usize>], tables: &[Option<GroupTable>]) -> Self {
        let order = graph.topo_order().to_vec();
        let group_ids: Vec<Option<usize>> = {
            let mut next = 0;
            tables
                .iter()
                .map(|t| {
                    t.as_ref().map(|_| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        let group_count = group_ids.iter().flatten().count();
        let mut cands = Vec::with_capacity(order.len());
        let mut slots = Vec::with_capacity(order.len());
        for &l in &order {
            let mut member: Vec<(usize, usize, Role)> = Vec::new();
            if let (Some(_), Some(g)) = (&tables[l], group_ids[l]) {
                member.push((g, l, Role::Producer));
            }
            for &p in graph.producers_of(l) {
                if let Some(g) = group_ids[p] {
                    member.push((g, p, Role::Consumer));
                }
            }
            let list = domains[l]
                .iter()
                .filter_map(|&idx| {
                    let masks: Vec<u128> = member
                        .iter()
                        .map(|&(_, owner, role)| tables[owner].as_ref().unwrap().mask(l, role, idx))
                        .collect();
                    if masks.contains(&0) {
                        return None;
                    }
                    let r = &pools[l].results[idx];
                    Some(Candidate {
                        pool_idx: idx,
                        energy: r.energy_pj,
                        latency: r.latency_cycles,
                        masks,
                    })
                })
                .collect();
            cands.push(list);
            slots.push(member.iter().map(|m| m.0).collect());
        }
        ChainProblem {
            order,
            cands,
            slots,
            group_count,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn fits(&self, pos: usize, cand: usize, masks: &[u128]) -> bool {
        self.slots[pos]
            .iter()
            .zip(&self.cands[pos][cand].masks)
            .all(|(&g, &m)| masks[g] & m != 0)
    }

    fn apply(&self, pos: usize, cand: usize, masks: &mut [u128]) {
        for (&g, &m) in self.slots[pos].iter().zip(&self.cands[pos][cand].masks) {
            masks[g] &= m;
        }
    }

    /// Lowest memory-layout index shared by a complete assignment, per group
    /// owner layer.
    pub fn shared_md(&self, chosen: &[usize], tables: &[Option<GroupTable>]) -> HashMap<usize, usize> {
        let mut masks = vec![u128::MAX; self.group_count];
        for (pos, &c) in chosen.iter().enumerate() {
            self.apply(pos, c, &mut masks);
        }
        let mut g = 0;
        let mut out = HashMap::new();
        for (layer, t) in tables.iter().enumerate() {
            if t.is_some() {
                out.insert(layer, masks[g].trailing_zeros() as usize);
                g += 1;
            }
        }
        out
    }
}

/// Scalar key the search orders partial assignments by.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Metric(Metric),
    Weighted { energy: f64, latency: f64 },
}

impl Objective {
    /// Per-layer key whose sum bounds the network metric from below. For EDP
    /// the square root of each layer's product is used:
    /// `(sum sqrt(e_i l_i))^2 <= (sum e_i)(sum l_i)`.
    pub fn key(&self, energy: f64, latency: f64) -> f64 {
        match *self {
            Objective::Metric(Metric::Energy) => energy,
            Objective::Metric(Metric::Latency) => latency,
            Objective::Metric(Metric::Edp) => (energy * latency).sqrt(),
            Objective::Weighted { energy: we, latency: wl } => we * energy + wl * latency,
        }
    }
}

/// True cost of a candidate given the candidates chosen at earlier positions.
/// `None` means the candidate's stored (ideal) cost.
pub trait PositionCost: Sync {
    fn cost(&self, problem: &ChainProblem, pos: usize, cand: usize, chosen: &[usize]) -> Option<(f64, f64)>;
}

pub struct StaticCost;

impl PositionCost for StaticCost {
    fn cost(&self, _: &ChainProblem, _: usize, _: usize, _: &[usize]) -> Option<(f64, f64)> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combination {
    /// Candidate index per position.
    pub cands: Vec<usize>,
    /// Pool index per layer.
    pub pool_indices: Vec<usize>,
    pub key_sum: f64,
    pub energy: f64,
    pub latency: f64,
}

const ROOT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parent: u32,
    pos: u32,
    rank: u32,
    exact: bool,
    /// Accumulated over positions before `pos` when inexact, through `pos`
    /// once exact.
    g: f64,
    e: f64,
    l: f64,
}

#[derive(PartialEq)]
struct Entry {
    f: f64,
    seq: u64,
    node: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lazy best-first enumeration of every feasible complete assignment in
/// non-decreasing key order. Each node stands for "this candidate at this
/// position plus every later-ranked sibling", expanded on demand.
pub struct ChainStream<'a> {
    problem: &'a ChainProblem,
    cost: &'a dyn PositionCost,
    objective: Objective,
    ranked: Vec<Vec<usize>>,
    lb: Vec<Vec<f64>>,
    h: Vec<f64>,
    arena: Vec<Node>,
    heap: BinaryHeap<Entry>,
    seq: u64,
    cap: u64,
    pub expansions: u64,
    pub truncated: bool,
}

impl<'a> ChainStream<'a> {
    pub fn new(problem: &'a ChainProblem, cost: &'a dyn PositionCost, objective: Objective, cap: u64) -> Self {
        let lb: Vec<Vec<f64>> = problem
            .cands
            .iter()
            .map(|cs| cs.iter().map(|c| objective.key(c.energy, c.latency)).collect())
            .collect();
        let ranked = lb
            .iter()
            .map(|keys| {
                let mut idx: Vec<usize> = (0..keys.len()).collect();
                idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
                idx
            })
            .collect::<Vec<_>>();
        let mut h = vec![0.0; problem.len() + 1];
        for pos in (0..problem.len()).rev() {
            let min = lb[pos].iter().copied().fold(f64::INFINITY, f64::min);
            h[pos] = h[pos + 1] + min;
        }
        let mut stream = ChainStream {
            problem,
            cost,
            objective,
            ranked,
            lb,
            h,
            arena: Vec::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            cap,
            expansions: 0,
            truncated: false,
        };
        if !problem.is_empty() && stream.h[0].is_finite() {
            let masks = vec![u128::MAX; problem.group_count];
            if let Some(rank) = stream.next_rank(0, 0, &masks) {
                stream.push_inexact(ROOT, 0, rank, 0.0, 0.0, 0.0);
            }
        }
        stream
    }

    fn next_rank(&self, pos: usize, from: usize, masks: &[u128]) -> Option<usize> {
        (from..self.ranked[pos].len()).find(|&r| self.problem.fits(pos, self.ranked[pos][r], masks))
    }

    fn push(&mut self, node: Node, f: f64) {
        let idx = self.arena.len() as u32;
        self.arena.push(node);
        self.heap.push(Entry { f, seq: self.seq, node: idx });
        self.seq += 1;
    }

    fn push_inexact(&mut self, parent: u32, pos: usize, rank: usize, g: f64, e: f64, l: f64) {
        let cand = self.ranked[pos][rank];
        let f = g + self.lb[pos][cand] + self.h[pos + 1];
        self.push(
            Node {
                parent,
                pos: pos as u32,
                rank: rank as u32,
                exact: false,
                g,
                e,
                l,
            },
            f,
        );
    }

    /// Candidates chosen at positions `0..pos` along the parent chain, and
    /// the group masks they leave.
    fn path(&self, mut parent: u32, pos: usize) -> (Vec<usize>, Vec<u128>) {
        let mut chosen = vec![0; pos];
        while parent != ROOT {
            let n = &self.arena[parent as usize];
            chosen[n.pos as usize] = self.ranked[n.pos as usize][n.rank as usize];
            parent = n.parent;
        }
        let mut masks = vec![u128::MAX; self.problem.group_count];
        for (p, &c) in chosen.iter().enumerate() {
            self.problem.apply(p, c, &mut masks);
        }
        (chosen, masks)
    }
}

impl Iterator for ChainStream<'_> {
    type Item = Combination;

    fn next(&mut self) -> Option<Combination> {
        let last = self.problem.len().checked_sub(1)?;
        while let Some(Entry { node: idx, .. }) = self.heap.pop() {
            if self.expansions >= self.cap {
                self.truncated = true;
                self.heap.clear();
                return None;
            }
            self.expansions += 1;
            let node = self.arena[idx as usize];
            let pos = node.pos as usize;
            let cand = self.ranked[pos][node.rank as usize];
            let (mut chosen, mut masks) = self.path(node.parent, pos);

            let node = if node.exact {
                node
            } else {
                if let Some(rank) = self.next_rank(pos, node.rank as usize + 1, &masks) {
                    self.push_inexact(node.parent, pos, rank, node.g, node.e, node.l);
                }
                let c = &self.problem.cands[pos][cand];
                let (e, l) = self
                    .cost
                    .cost(self.problem, pos, cand, &chosen)
                    .unwrap_or((c.energy, c.latency));
                let key = self.objective.key(e, l);
                let exact = Node {
                    exact: true,
                    g: node.g + key,
                    e: node.e + e,
                    l: node.l + l,
                    ..node
                };
                if key > self.lb[pos][cand] {
                    let f = exact.g + self.h[pos + 1];
                    self.arena[idx as usize] = exact;
                    self.heap.push(Entry { f, seq: self.seq, node: idx });
                    self.seq += 1;
                    continue;
                }
                self.arena[idx as usize] = exact;
                exact
            };

            chosen.push(cand);
            if pos == last {
                let mut pool_indices = vec![0; self.problem.len()];
                for (p, &c) in chosen.iter().enumerate() {
                    pool_indices[self.problem.order[p]] = self.problem.cands[p][c].pool_idx;
                }
                return Some(Combination {
                    cands: chosen,
                    pool_indices,
                    key_sum: node.g,
                    energy: node.e,
                    latency: node.l,
                });
            }
            self.problem.apply(pos, cand, &mut masks);
            if let Some(rank) = self.next_rank(pos + 1, 0, &masks) {
                self.push_inexact(idx, pos + 1, rank, node.g, node.e, node.l);
            }
        }
        None
    }
}

/// Every feasible assignment of a problem with fixed per-candidate costs,
/// cheapest total energy first.
pub fn chain_combinations(problem: &ChainProblem) -> ChainStream<'_> {
    ChainStream::new(problem, &StaticCost, Objective::Metric(Metric::Energy), u64::MAX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub best: Combination,
    pub value: f64,
    pub evaluated: u64,
}

/// Metric-minimal combination of a stream ordered by
/// `Objective::Metric(metric)`, stopping once the stream's lower bound
/// passes the incumbent or `beam` combinations were evaluated. Ties go to
/// the lexicographically smallest pool-index vector.
pub fn select_best(stream: impl Iterator<Item = Combination>, metric: Metric, beam: u64) -> Option<Selection> {
    let mut best: Option<Selection> = None;
    let mut evaluated = 0;
    for c in stream {
        let bound = match metric {
            Metric::Edp => c.key_sum * c.key_sum,
            _ => c.key_sum,
        };
        if let Some(b) = &best {
            if bound > b.value * (1.0 + 1e-12) {
                break;
            }
        }
        evaluated += 1;
        let value = metric.value(c.energy, c.latency);
        let better = match &best {
            None => true,
            Some(b) => value < b.value || (value == b.value && c.pool_indices < b.best.pool_indices),
        };
        if better {
            best = Some(Selection {
                best: c,
                value,
                evaluated,
            });
        }
        if evaluated >= beam {
            break;
        }
    }
    best.map(|mut s| {
        s.evaluated = evaluated;
        s
    })
}

/// Complete assignment found by the layout-variable solver: one pool index
/// per layer and one value per tensor variable.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pool_indices: Vec<usize>,
    pub values: Vec<u16>,
    pub energy: f64,
    pub latency: f64,
}

/// Cost table of one layer over the values of the tensor variables it
/// touches: its own output first, then its inputs in producer order. Each
/// tuple keeps the energy/latency Pareto front of fitting candidates.
#[derive(Clone, Debug)]
struct Factor {
    own: Option<usize>,
    inputs: Vec<usize>,
    /// `(own value, inputs tuple) -> front`.
    fronts: Vec<(u16, Vec<u16>, Vec<(f64, f64, usize)>)>,
    by_inputs: HashMap<Vec<u16>, Vec<usize>>,
}

impl Factor {
    fn new(own: Option<usize>, inputs: Vec<usize>) -> Self {
        Factor {
            own,
            inputs,
            fronts: Vec::new(),
            by_inputs: HashMap::new(),
        }
    }

    fn insert(&mut self, own: u16, inputs: Vec<u16>, e: f64, l: f64, idx: usize) {
        let slot = self.slot(own, inputs);
        pareto_insert(&mut self.fronts[slot].2, e, l, idx);
    }

    fn slot(&mut self, own: u16, inputs: Vec<u16>) -> usize {
        let slots = self.by_inputs.entry(inputs.clone()).or_default();
        match slots.iter().find(|&&s| self.fronts[s].0 == own) {
            Some(&s) => s,
            None => {
                slots.push(self.fronts.len());
                self.fronts.push((own, inputs, Vec::new()));
                self.fronts.len() - 1
            }
        }
    }
}

/// Adds `(e, l)` to a Pareto front unless an existing point is at least as
/// good on both axes.
fn pareto_insert(front: &mut Vec<(f64, f64, usize)>, e: f64, l: f64, idx: usize) {
    if front.iter().any(|&(fe, fl, _)| fe <= e && fl <= l) {
        return;
    }
    front.retain(|&(fe, fl, _)| !(e <= fe && l <= fl));
    front.push((e, l, idx));
}

/// Layers in topological order, each a factor over tensor variables with
/// small domains (memory layouts, or natural layouts of cut tensors).
#[derive(Clone, Debug)]
struct LayoutProblem {
    order: Vec<usize>,
    domains: Vec<usize>,
    factors: Vec<Factor>,
    /// Position after which each variable is no longer needed.
    last_use: Vec<usize>,
}

impl LayoutProblem {
    fn new(graph: &NetworkGraph, var_of: &[Option<usize>], domains: Vec<usize>, factors: Vec<Factor>) -> Self {
        let order = graph.topo_order().to_vec();
        let mut last_use = vec![0; domains.len()];
        for (pos, &l) in order.iter().enumerate() {
            let touched = var_of[l].into_iter().chain(graph.producers_of(l).iter().filter_map(|&p| var_of[p]));
            for v in touched {
                last_use[v] = last_use[v].max(pos);
            }
        }
        LayoutProblem {
            order,
            domains,
            factors,
            last_use,
        }
    }

    /// Exact minimum of the summed weighted key by dynamic programming over
    /// the variables still open at each layer. At most `beam` frontier states
    /// are kept per layer.
    fn solve(&self, objective: Objective, beam: u64, log: &mut SolveLog) -> Option<Assignment> {
        struct State {
            vals: Vec<u16>,
            g: f64,
            e: f64,
            l: f64,
        }
        log.solved += 1;
        let mut open: Vec<usize> = Vec::new();
        let mut states = vec![State {
            vals: Vec::new(),
            g: 0.0,
            e: 0.0,
            l: 0.0,
        }];
        // Per position: (previous state, pool index, own value) per state.
        let mut history: Vec<Vec<(u32, usize, u16)>> = Vec::with_capacity(self.order.len());
        for (pos, factor) in self.factors.iter().enumerate() {
            let best: Vec<Option<(f64, f64, f64, usize)>> = factor
                .fronts
                .iter()
                .map(|(_, _, front)| {
                    front.iter().fold(None, |acc: Option<(f64, f64, f64, usize)>, &(e, l, idx)| {
                        let k = objective.key(e, l);
                        match acc {
                            Some(a) if a.0 < k || (a.0 == k && a.3 < idx) => Some(a),
                            _ => Some((k, e, l, idx)),
                        }
                    })
                })
                .collect();
            let input_slots: Vec<usize> = factor
                .inputs
                .iter()
                .map(|v| open.iter().position(|o| o == v).expect("input variable is open"))
                .collect();
            let mut next_open = open.clone();
            if let Some(v) = factor.own {
                next_open.push(v);
            }
            let keep: Vec<usize> = (0..next_open.len())
                .filter(|&i| self.last_use[next_open[i]] > pos)
                .collect();
            let next_open: Vec<usize> = keep.iter().map(|&i| next_open[i]).collect();

            let mut next: Vec<State> = Vec::new();
            let mut back: Vec<(u32, usize, u16)> = Vec::new();
            let mut index: HashMap<Vec<u16>, usize> = HashMap::new();
            for (si, s) in states.iter().enumerate() {
                let key: Vec<u16> = input_slots.iter().map(|&i| s.vals[i]).collect();
                let Some(slots) = factor.by_inputs.get(&key) else {
                    continue;
                };
                for &slot in slots {
                    let Some((k, e, l, idx)) = best[slot] else {
                        continue;
                    };
                    let own = factor.fronts[slot].0;
                    let mut full = s.vals.clone();
                    if factor.own.is_some() {
                        full.push(own);
                    }
                    let vals: Vec<u16> = keep.iter().map(|&i| full[i]).collect();
                    let g = s.g + k;
                    let cand = State {
                        vals,
                        g,
                        e: s.e + e,
                        l: s.l + l,
                    };
                    match index.get(&cand.vals) {
                        Some(&ni) if next[ni].g <= g => {}
                        Some(&ni) => {
                            next[ni] = cand;
                            back[ni] = (si as u32, idx, own);
                        }
                        None => {
                            index.insert(cand.vals.clone(), next.len());
                            next.push(cand);
                            back.push((si as u32, idx, own));
                        }
                    }
                }
            }
            log.expansions += next.len() as u64;
            if next.len() as u64 > beam {
                log.truncated = true;
                let mut kept: Vec<usize> = (0..next.len()).collect();
                kept.sort_by(|&a, &b| next[a].g.total_cmp(&next[b].g).then_with(|| next[a].vals.cmp(&next[b].vals)));
                kept.truncate(beam as usize);
                kept.sort_unstable();
                let mut slots: Vec<Option<State>> = next.into_iter().map(Some).collect();
                next = kept.iter().map(|&i| slots[i].take().expect("kept once")).collect();
                back = kept.iter().map(|&i| back[i]).collect();
            }
            if next.is_empty() {
                return None;
            }
            history.push(back);
            states = next;
            open = next_open;
        }
        let (mut si, last) = states
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.g.total_cmp(&b.1.g).then(a.0.cmp(&b.0)))?;
        let (energy, latency) = (last.e, last.l);
        let mut pool_indices = vec![0; self.order.len()];
        let mut values = vec![0u16; self.domains.len()];
        for pos in (0..self.order.len()).rev() {
            let (prev, idx, own) = history[pos][si];
            pool_indices[self.order[pos]] = idx;
            if let Some(v) = self.factors[pos].own {
                values[v] = own;
            }
            si = prev as usize;
        }
        Some(Assignment {
            pool_indices,
            values,
            energy,
            latency,
        })
    }
}

#[derive(Default)]
struct SolveLog {
    expansions: u64,
    solved: u64,
    truncated: bool,
}

const MAX_HULL_SOLVES: usize = 64;

/// Assignments at vertices of the lower-left convex hull of the
/// (energy, latency) cloud. Energy, latency and EDP minima all sit on such
/// vertices: EDP is quasi-concave and increasing in both coordinates. Only
/// points within `limit` (energy, latency) can be selected later, so hull
/// segments that cannot hold such a point with a better EDP are skipped.
fn hull_points(problem: &LayoutProblem, metric: Metric, scale: (f64, f64), limit: (f64, f64), beam: u64, log: &mut SolveLog) -> Vec<Assignment> {
    let tiny = 1e-9;
    let energy_first = Objective::Weighted {
        energy: 1.0 / scale.0,
        latency: tiny / scale.1,
    };
    let latency_first = Objective::Weighted {
        energy: tiny / scale.0,
        latency: 1.0 / scale.1,
    };
    match metric {
        Metric::Energy => return problem.solve(energy_first, beam, log).into_iter().collect(),
        Metric::Latency => return problem.solve(latency_first, beam, log).into_iter().collect(),
        Metric::Edp => {}
    }
    let slack = 1.0 + 1e-9;
    let within = |p: &Assignment| p.energy <= limit.0 * slack && p.latency <= limit.1 * slack;
    let note = |best: &mut f64, p: &Assignment| {
        if within(p) {
            *best = best.min(p.energy * p.latency);
        }
    };
    let mut best = f64::INFINITY;
    let Some(a) = problem.solve(energy_first, beam, log) else {
        return Vec::new();
    };
    let Some(b) = problem.solve(latency_first, beam, log) else {
        return vec![a];
    };
    note(&mut best, &a);
    note(&mut best, &b);
    let mut points = vec![a.clone(), b.clone()];
    let mut stack = vec![(a, b)];
    let mut solves = 2;
    while let Some((a, b)) = stack.pop() {
        if solves >= MAX_HULL_SOLVES {
            break;
        }
        // Vertices between `a` and `b` have energy >= a's and latency >= b's.
        if a.energy > limit.0 * slack || b.latency > limit.1 * slack || a.energy * b.latency >= best {
            continue;
        }
        // Weights under which `a` and `b` tie.
        let we = a.latency - b.latency;
        let wl = b.energy - a.energy;
        if we <= 0.0 || wl <= 0.0 {
            continue;
        }
        let objective = Objective::Weighted {
            energy: we,
            latency: wl,
        };
        solves += 1;
        let Some(c) = problem.solve(objective, beam, log) else {
            continue;
        };
        let at = |p: &Assignment| objective.key(p.energy, p.latency);
        if at(&c) < at(&a) * (1.0 - 1e-12) {
            note(&mut best, &c);
            points.push(c.clone());
            stack.push((a, c.clone()));
            stack.push((c, b));
        }
    }
    points
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleOptions {
    pub theta: f64,
    pub metric: Metric,
    /// Bound on partial assignments kept per layer during the search.
    pub beam: u64,
    /// Allow cutting unpairable edges and leaving those tensors in the
    /// producer's natural layout.
    pub fallback: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            theta: 0.1,
            metric: Metric::Edp,
            beam: 1_000_000,
            fallback: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Every edge shares a memory layout under one bank layout.
    Matched,
    /// Some edges were cut and left to natural layouts.
    Segmented,
    /// Nothing beat each layer's memory-unaware optimum on both axes.
    LayerwiseOptimum,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchStats {
    pub log10_unpruned: f64,
    pub log10_pruned: f64,
    pub pool_sizes: Vec<usize>,
    pub pruned_sizes: Vec<usize>,
    pub bank_layouts: usize,
    pub valid_bank_layouts: usize,
    pub pairable_bank_layouts: usize,
    pub solves: u64,
    /// Partial assignments generated over all solves.
    pub states: u64,
    pub truncated: bool,
    pub candidates: usize,
    pub cut_edges: usize,
    pub origin: Origin,
}

impl SearchStats {
    pub fn reduction_factor(&self) -> f64 {
        10f64.powf(self.log10_unpruned - self.log10_pruned)
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub schedule: NetworkSchedule,
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub stats: SearchStats,
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("no feasible schedule: {stage} stage found nothing ({detail})")]
    Infeasible { stage: &'static str, detail: String },
    #[error("network has no layers")]
    Empty,
}

fn bits(mask: u128) -> Vec<u16> {
    (0..128u16).filter(|&i| mask & (1 << i) != 0).collect()
}

fn for_each_tuple(lists: &[Vec<u16>], mut f: impl FnMut(&[u16])) {
    if lists.iter().any(Vec::is_empty) {
        return;
    }
    let mut at = vec![0usize; lists.len()];
    let mut tuple: Vec<u16> = lists.iter().map(|l| l[0]).collect();
    loop {
        f(&tuple);
        let mut i = lists.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            at[i] += 1;
            if at[i] < lists[i].len() {
                tuple[i] = lists[i][at[i]];
                break;
            }
            at[i] = 0;
            tuple[i] = lists[i][0];
        }
    }
}

fn schedule_from(
    graph: &NetworkGraph,
    pools: &[SUPool],
    assignment: &Assignment,
    bl: Option<BankLayout>,
    tables: &[Option<GroupTable>],
    var_of: &[Option<usize>],
    geo: &MemoryGeometry,
) -> NetworkSchedule {
    let choices: Vec<LayerChoice> = assignment
        .pool_indices
        .iter()
        .enumerate()
        .map(|(l, &i)| LayerChoice {
            su: pools[l].results[i].su,
            base: pools[l].results[i].clone(),
        })
        .collect();
    let source = pools.first().map_or(CostSource::Builtin, |p| p.source);
    let mut schedule = natural_schedule(graph, choices, source, geo);
    let Some(bl) = bl else {
        return schedule;
    };
    schedule.bank_layout = Some(bl);
    let md_of = |p: usize| -> Option<MemLayout> {
        let table = tables[p].as_ref()?;
        Some(table.mds[usize::from(assignment.values[var_of[p]?])])
    };
    for tensor in &mut schedule.tensors {
        let Some(md) = md_of(tensor.producer) else {
            continue;
        };
        let su = &schedule.layers[tensor.producer].su;
        tensor.md = md;
        tensor.wpd = first_port(&su.output_tile(), &bl, &md, geo).expect("shared layout holds a write port");
    }
    for edge in &mut schedule.edges {
        let Some(md) = md_of(edge.producer) else {
            continue;
        };
        let tile = schedule.layers[edge.consumer].su.input_tile(graph.layer(edge.consumer));
        edge.rpd = first_port(&tile, &bl, &md, geo).expect("shared layout holds a read port");
        edge.cut = false;
    }
    schedule
}

struct Found {
    schedule: NetworkSchedule,
    origin: Origin,
}

/// Per-layer pool indices that support `bl` in the given roles.
fn role_domain(pools: &[SUPool], graph: &NetworkGraph, bl: &BankLayout, l: usize, producer: bool, consumer: bool) -> Vec<usize> {
    let layer = graph.layer(l);
    (0..pools[l].len())
        .filter(|&i| {
            let su = &pools[l].results[i].su;
            (!producer || su_supports_bank_layout(su, Role::Producer, layer, bl))
                && (!consumer || su_supports_bank_layout(su, Role::Consumer, layer, bl))
        })
        .collect()
}

fn tensor_vars(graph: &NetworkGraph) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..graph.len())
        .map(|l| {
            (!graph.consumers_of(l).is_empty()).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

struct PassResult {
    found: Vec<Found>,
    log: SolveLog,
    valid: bool,
    pairable: bool,
}

/// Search under one bank layout. Every producer tensor is matched to a
/// memory layout shared with all its readers when possible. With `allow_cut`
/// the rest are cut: they stay in the producer's natural layout and readers
/// pay the resulting port penalty. Without it, any unmatched tensor makes the
/// bank layout unusable.
fn layout_pass(
    graph: &NetworkGraph,
    pools: &[SUPool],
    hw: &AcceleratorConfig,
    bl: BankLayout,
    opts: &ScheduleOptions,
    scale: (f64, f64),
    limit: (f64, f64),
    allow_cut: bool,
) -> PassResult {
    let geo = &hw.act_mem;
    let n = graph.len();
    let mut log = SolveLog::default();
    let unusable = |valid| PassResult {
        found: Vec::new(),
        log: SolveLog::default(),
        valid,
        pairable: false,
    };
    let mut matched: Vec<bool> = (0..n).map(|l| !graph.consumers_of(l).is_empty()).collect();
    let mut tables: Vec<Option<GroupTable>> = vec![None; n];
    let mut domains: Vec<Vec<usize>>;
    loop {
        domains = (0..n)
            .map(|l| {
                let consumes = graph.producers_of(l).iter().any(|&p| matched[p]);
                role_domain(pools, graph, &bl, l, matched[l], consumes)
            })
            .collect();
        if !allow_cut && domains.iter().any(Vec::is_empty) {
            return unusable(false);
        }
        let mut changed = false;
        for l in 0..n {
            if !matched[l] {
                tables[l] = None;
                continue;
            }
            let members_ok = std::iter::once(l)
                .chain(graph.consumers_of(l).iter().copied())
                .all(|m| !domains[m].is_empty());
            match members_ok.then(|| GroupTable::build(graph, l, pools, &domains, &bl, geo)) {
                Some(t) if t.valid != 0 => tables[l] = Some(t),
                _ if !allow_cut => return unusable(true),
                _ => {
                    matched[l] = false;
                    tables[l] = None;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Distinct natural layouts of each cut tensor, in domain order.
    let mut naturals: Vec<Vec<NaturalLayout>> = vec![Vec::new(); n];
    let mut natural_of: Vec<HashMap<usize, u16>> = vec![HashMap::new(); n];
    for l in (0..n).filter(|&l| !matched[l] && !graph.consumers_of(l).is_empty()) {
        for &idx in &domains[l] {
            let nat = natural_layout(graph.layer(l), &pools[l].results[idx].su, geo);
            let i = naturals[l].iter().position(|x| *x == nat).unwrap_or_else(|| {
                naturals[l].push(nat);
                naturals[l].len() - 1
            });
            natural_of[l].insert(idx, i as u16);
        }
    }

    let var_of = tensor_vars(graph);
    let var_domains: Vec<usize> = (0..n)
        .filter(|&l| var_of[l].is_some())
        .map(|l| tables[l].as_ref().map_or(naturals[l].len(), |t| t.mds.len()))
        .collect();
    let factors = graph
        .topo_order()
        .iter()
        .map(|&l| layer_factor(graph, pools, hw, l, &domains[l], &tables, &naturals, &natural_of, &var_of))
        .collect();
    let problem = LayoutProblem::new(graph, &var_of, var_domains, factors);
    let any_matched = matched.iter().any(|&m| m);
    let found = hull_points(&problem, opts.metric, scale, limit, opts.beam, &mut log)
        .iter()
        .map(|a| {
            let schedule = schedule_from(graph, pools, a, any_matched.then_some(bl), &tables, &var_of, geo);
            Found {
                origin: if schedule.cut_edges() > 0 { Origin::Segmented } else { Origin::Matched },
                schedule,
            }
        })
        .collect();
    PassResult {
        found,
        log,
        valid: true,
        pairable: any_matched,
    }
}

/// Cost table of one layer. Candidates with the same layout signature
/// (allowed variable values, read patterns on cut inputs, write port) are
/// enumerated together, keeping only their energy/latency front per port.
#[allow(clippy::too_many_arguments)]
fn layer_factor(
    graph: &NetworkGraph,
    pools: &[SUPool],
    hw: &AcceleratorConfig,
    l: usize,
    domain: &[usize],
    tables: &[Option<GroupTable>],
    naturals: &[Vec<NaturalLayout>],
    natural_of: &[HashMap<usize, u16>],
    var_of: &[Option<usize>],
) -> Factor {
    let geo = &hw.act_mem;
    let layer = graph.layer(l);
    let inputs: Vec<usize> = graph.producers_of(l).to_vec();
    let mut factor = Factor::new(var_of[l], inputs.iter().filter_map(|&p| var_of[p]).collect());

    type Signature = (Vec<Vec<u16>>, Vec<Option<LayoutFactors>>, Option<StreamPort>);
    let mut groups: Vec<(Signature, Vec<usize>)> = Vec::new();
    let mut group_of: HashMap<Signature, usize> = HashMap::new();
    for &idx in domain {
        let su = &pools[l].results[idx].su;
        let own = match (&tables[l], var_of[l]) {
            (Some(t), _) => bits(t.mask(l, Role::Producer, idx)),
            (None, Some(_)) => vec![natural_of[l][&idx]],
            (None, None) => vec![0],
        };
        let mut lists = vec![own];
        let mut rpds = Vec::with_capacity(inputs.len());
        for &p in &inputs {
            match &tables[p] {
                Some(t) => {
                    lists.push(bits(t.mask(l, Role::Consumer, idx)));
                    rpds.push(None);
                }
                None => {
                    lists.push((0..naturals[p].len() as u16).collect());
                    rpds.push(Some(natural_rpd(layer, su, graph.layer(p), geo)));
                }
            }
        }
        let write = (tables[l].is_none() && var_of[l].is_some()).then(|| {
            let nat = &naturals[l][usize::from(natural_of[l][&idx])];
            pd_eff(&nat.bl, &nat.wpd, &nat.md, geo).stream()
        });
        let sig = (lists, rpds, write);
        match group_of.get(&sig) {
            Some(&g) => groups[g].1.push(idx),
            None => {
                group_of.insert(sig.clone(), groups.len());
                groups.push((sig, vec![idx]));
            }
        }
    }

    for ((lists, rpds, write), members) in &groups {
        let mut fronts: HashMap<PortAdjust, Vec<(f64, f64, usize)>> = HashMap::new();
        for_each_tuple(lists, |t| {
            let mut port = PortAdjust::ideal(geo);
            if let Some(w) = write {
                port.write = *w;
            }
            for (i, &p) in inputs.iter().enumerate() {
                let Some(rpd) = rpds[i] else {
                    continue;
                };
                let nat = &naturals[p][usize::from(t[i + 1])];
                let r = pd_eff(&nat.bl, &rpd, &nat.md, geo).stream();
                if r.badness_key() < port.read.badness_key() {
                    port.read = r;
                }
            }
            let front = fronts.entry(port).or_insert_with(|| {
                let mut front = Vec::new();
                for &idx in members {
                    let r = adjusted_cost(pools[l].source, &pools[l].results[idx], layer, hw, &port);
                    pareto_insert(&mut front, r.energy_pj, r.latency_cycles, idx);
                }
                front
            });
            for &(e, lat, idx) in front.iter() {
                factor.insert(t[0], t[1..].to_vec(), e, lat, idx);
            }
        });
    }
    factor
}

/// Full search: prune, try every bank layout for a fully matched schedule,
/// fall back to cutting unpairable edges, and keep the metric-best schedule
/// that costs no more energy and no more latency than each layer's
/// memory-unaware optimum.
pub fn schedule_network(
    graph: &NetworkGraph,
    pools: &[SUPool],
    hw: &AcceleratorConfig,
    opts: &ScheduleOptions,
) -> Result<ScheduleOutcome, ScheduleError> {
    if graph.is_empty() {
        return Err(ScheduleError::Empty);
    }
    let geo = &hw.act_mem;
    let cfg = PruningConfig::new(opts.theta, opts.metric, pools);
    let pruned = prune_su_pool(pools, &cfg);
    let scale = pruned.iter().fold((0.0, 0.0), |(e, l), p| {
        (e + p.best().energy_pj, l + p.best().latency_cycles)
    });
    let scale = (scale.0.max(f64::MIN_POSITIVE), scale.1.max(f64::MIN_POSITIVE));

    let naive = naive_schedule(graph, pools, geo);
    let naive_eval = evaluate_with_layout(graph, &naive, hw);
    let limit = (naive_eval.energy_pj, naive_eval.latency_cycles);
    let admissible = |e: f64, l: f64| e <= limit.0 * (1.0 + 1e-9) && l <= limit.1 * (1.0 + 1e-9);

    let bank_layouts = enumerate_bank_layouts(geo);
    let strict: Vec<PassResult> = bank_layouts
        .par_iter()
        .map(|&bl| layout_pass(graph, &pruned, hw, bl, opts, scale, limit, false))
        .collect();
    let fully_matched: Vec<bool> = strict.iter().map(|r| r.pairable).collect();

    let mut stats = SearchStats {
        log10_unpruned: log10_combinations(pools),
        log10_pruned: log10_combinations(&pruned),
        pool_sizes: pools.iter().map(SUPool::len).collect(),
        pruned_sizes: pruned.iter().map(SUPool::len).collect(),
        bank_layouts: bank_layouts.len(),
        valid_bank_layouts: strict.iter().filter(|r| r.valid).count(),
        pairable_bank_layouts: strict.iter().filter(|r| r.pairable).count(),
        solves: 0,
        states: 0,
        truncated: false,
        candidates: 0,
        cut_edges: 0,
        origin: Origin::LayerwiseOptimum,
    };
    let absorb = |stats: &mut SearchStats, r: &PassResult| {
        stats.solves += r.log.solved;
        stats.states += r.log.expansions;
        stats.truncated |= r.log.truncated;
    };

    let mut found: Vec<Found> = Vec::new();
    for r in strict {
        absorb(&mut stats, &r);
        found.extend(r.found);
    }
    let strict_empty = found.is_empty();
    if strict_empty && !opts.fallback {
        let (stage, detail) = if stats.valid_bank_layouts == 0 {
            ("bank layout", "no bank layout keeps an SU for every layer".to_string())
        } else if stats.pairable_bank_layouts == 0 {
            ("memory layout pairing", "some tensor has no memory layout shared by its producer and consumers".to_string())
        } else {
            ("combination", "no SU assignment satisfies every tensor at once".to_string())
        };
        return Err(ScheduleError::Infeasible { stage, detail });
    }

    let mut evaluated: Vec<(f64, f64)> = found
        .iter()
        .map(|f| {
            let ev = evaluate_with_layout(graph, &f.schedule, hw);
            (ev.energy_pj, ev.latency_cycles)
        })
        .collect();
    if opts.fallback {
        // Where every tensor already matched, cutting finds the same problem.
        let segmented: Vec<PassResult> = bank_layouts
            .par_iter()
            .zip(&fully_matched)
            .filter(|(_, &done)| !done)
            .map(|(&bl, _)| layout_pass(graph, &pruned, hw, bl, opts, scale, limit, true))
            .collect();
        for r in segmented {
            absorb(&mut stats, &r);
            for f in r.found {
                let ev = evaluate_with_layout(graph, &f.schedule, hw);
                evaluated.push((ev.energy_pj, ev.latency_cycles));
                found.push(f);
            }
        }
    }
    stats.candidates = found.len();

    let mut best: Option<(usize, f64)> = None;
    for (i, &(e, l)) in evaluated.iter().enumerate() {
        if !admissible(e, l) {
            continue;
        }
        let v = opts.metric.value(e, l);
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    let naive_value = opts.metric.value(naive_eval.energy_pj, naive_eval.latency_cycles);
    let (schedule, origin, energy, latency) = match best {
        Some((i, v)) if v <= naive_value => {
            let f = found.swap_remove(i);
            (f.schedule, f.origin, evaluated[i].0, evaluated[i].1)
        }
        _ => (naive, Origin::LayerwiseOptimum, naive_eval.energy_pj, naive_eval.latency_cycles),
    };
    stats.origin = origin;
    stats.cut_edges = schedule.cut_edges();
    Ok(ScheduleOutcome {
        schedule,
        energy_pj: energy,
        latency_cycles: latency,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub id: String,
    pub su: SpatialUnrolling,
    pub base_energy_pj: f64,
    pub base_latency_cycles: f64,
    pub read_port: StreamPort,
    pub write_port: StreamPort,
    pub energy_pj: f64,
    pub latency_cycles: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDoc {
    pub producer: String,
    pub bank_layout: LayoutFactors,
    pub md: LayoutFactors,
    pub wpd: LayoutFactors,
    pub write_pd_eff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub producer: String,
    pub consumer: String,
    pub rpd: LayoutFactors,
    pub cut: bool,
    pub read_pd_eff: f64,
}

/// Exported schedule: per-layer SUs, per-tensor and per-edge layouts in
/// canonical layout syntax, and cost totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDoc {
    pub hardware: String,
    pub cost_source: CostSource,
    pub bank_layout: Option<LayoutFactors>,
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub layers: Vec<LayerDoc>,
    pub tensors: Vec<TensorDoc>,
    pub edges: Vec<EdgeDoc>,
}

impl ScheduleDoc {
    pub fn new(graph: &NetworkGraph, schedule: &NetworkSchedule, hw: &AcceleratorConfig) -> Self {
        let geo = &hw.act_mem;
        let eval = evaluate_with_layout(graph, schedule, hw);
        let id = |l: usize| graph.layer(l).id.clone();
        let mut layers: Vec<LayerDoc> = eval
            .layers
            .iter()
            .map(|lc| {
                let l = graph.find(&lc.layer).expect("evaluated layer exists");
                let base = &schedule.layers[l].base;
                LayerDoc {
                    id: lc.layer.clone(),
                    su: lc.su,
                    base_energy_pj: base.energy_pj,
                    base_latency_cycles: base.latency_cycles,
                    read_port: lc.read,
                    write_port: lc.write,
                    energy_pj: lc.energy_pj,
                    latency_cycles: lc.latency_cycles,
                }
            })
            .collect();
        layers.sort_by_key(|d| graph.find(&d.id).unwrap());
        ScheduleDoc {
            hardware: hw.name.clone(),
            cost_source: schedule.source,
            bank_layout: schedule.bank_layout,
            energy_pj: eval.energy_pj,
            latency_cycles: eval.latency_cycles,
            layers,
            tensors: schedule
                .tensors
                .iter()
                .map(|t| TensorDoc {
                    producer: id(t.producer),
                    bank_layout: t.md.base,
                    md: t.md.effective(),
                    wpd: t.wpd,
                    write_pd_eff: schedule.write_port(t, geo).pd_eff,
                })
                .collect(),
            edges: schedule
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    producer: id(e.producer),
                    consumer: id(e.consumer),
                    rpd: e.rpd,
                    cut: e.cut,
                    read_pd_eff: schedule.read_port(e, geo).pd_eff,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    /// Rebuilds the schedule against a graph, checking ids and layout shapes.
    pub fn to_schedule(&self, graph: &NetworkGraph, geo: &MemoryGeometry) -> Result<NetworkSchedule, String> {
        let find = |id: &str| graph.find(id).ok_or_else(|| format!("unknown layer `{id}`"));
        let mut layers: Vec<Option<LayerChoice>> = vec![None; graph.len()];
        for d in &self.layers {
            let l = find(&d.id)?;
            layers[l] = Some(LayerChoice {
                su: d.su,
                base: LayerwiseResult::new(d.su, d.base_energy_pj, d.base_latency_cycles),
            });
        }
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(l, c)| c.ok_or_else(|| format!("layer `{}` missing from schedule", graph.layer(l).id)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tensors = Vec::new();
        for t in &self.tensors {
            let producer = find(&t.producer)?;
            if t.bank_layout.product() != u64::from(geo.bd_words()) {
                return Err(format!("tensor of `{}`: bank layout {} does not fill a bank row", t.producer, t.bank_layout));
            }
            if t.md.product() != u64::from(geo.md_words()) {
                return Err(format!("tensor of `{}`: memory layout {} does not span all banks", t.producer, t.md));
            }
            let md = MemLayout::from_effective(t.bank_layout, t.md)
                .ok_or_else(|| format!("tensor of `{}`: bank layout not contained in memory layout", t.producer))?;
            tensors.push(TensorLayout {
                producer,
                md,
                wpd: t.wpd,
            });
        }
        let mut edges = Vec::new();
        for e in &self.edges {
            let producer = find(&e.producer)?;
            let consumer = find(&e.consumer)?;
            if !tensors.iter().any(|t| t.producer == producer) {
                return Err(format!("edge {} -> {} has no tensor layout", e.producer, e.consumer));
            }
            edges.push(EdgeLayout {
                producer,
                consumer,
                rpd: e.rpd,
                cut: e.cut,
            });
        }
        Ok(NetworkSchedule {
            source: self.cost_source,
            bank_layout: self.bank_layout,
            layers,
            tensors,
            edges,
        })
    }
}
