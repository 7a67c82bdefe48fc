//! Spatial-unrolling enumeration, the built-in layer-wise cost model, SU pools
//! and threshold pruning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{is_pow2, LayoutFactors};
use crate::hardware::{AcceleratorConfig, MemoryGeometry};
use crate::workload::{Layer, LayerKind, NetworkGraph};

/// Parallelism per loop dimension. For depthwise layers `c` always equals `k`
/// (the channel loops are coupled) and does not consume extra PEs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpatialUnrolling {
    pub ox: u32,
    pub oy: u32,
    pub k: u32,
    pub c: u32,
    pub fx: u32,
    pub fy: u32,
}

const SU_DIMS: [&str; 6] = ["OX", "OY", "K", "C", "FX", "FY"];

impl SpatialUnrolling {
    pub const ONES: SpatialUnrolling = SpatialUnrolling {
        ox: 1,
        oy: 1,
        k: 1,
        c: 1,
        fx: 1,
        fy: 1,
    };

    fn values(&self) -> [u32; 6] {
        [self.ox, self.oy, self.k, self.c, self.fx, self.fy]
    }

    fn from_values(v: [u32; 6]) -> Self {
        SpatialUnrolling {
            ox: v[0],
            oy: v[1],
            k: v[2],
            c: v[3],
            fx: v[4],
            fy: v[5],
        }
    }

    /// Ordering key for deterministic tie-breaks; larger keys win.
    pub fn tie_key(&self) -> [u32; 6] {
        [self.oy, self.ox, self.k, self.c, self.fx, self.fy]
    }

    pub fn pe_usage(&self, kind: LayerKind) -> u64 {
        let c = if kind == LayerKind::Depthwise { 1 } else { self.c };
        [self.ox, self.oy, self.k, c, self.fx, self.fy]
            .iter()
            .map(|&v| u64::from(v))
            .product()
    }

    /// Depthwise layers mirror the K factor onto C.
    pub fn normalized(mut self, kind: LayerKind) -> Self {
        if kind == LayerKind::Depthwise {
            self.c = self.k;
        }
        self
    }

    /// Output words produced per cycle along the layout dimensions.
    pub fn output_tile(&self) -> LayoutFactors {
        LayoutFactors::new(self.ox, self.oy, self.k)
    }

    /// Input words consumed per cycle, expressed in the producer's output
    /// dimensions: channels map onto K, input pixels onto OX/OY anchored at
    /// the output pixel (stride dilates the span).
    pub fn input_tile(&self, layer: &Layer) -> LayoutFactors {
        let s = layer.dims.stride;
        let chan = if layer.kind == LayerKind::Depthwise {
            self.k
        } else {
            self.c
        };
        LayoutFactors::new(
            (self.ox * s).next_power_of_two(),
            (self.oy * s).next_power_of_two(),
            chan,
        )
    }

    /// Checks power-of-two factors, per-dimension bounds and PE budget.
    pub fn check(&self, layer: &Layer, pe_count: u32) -> Result<(), String> {
        let d = &layer.dims;
        let bounds = [d.ox, d.oy, d.k, d.c, d.fx, d.fy];
        for ((name, v), bound) in SU_DIMS.iter().zip(self.values()).zip(bounds) {
            if !is_pow2(u64::from(v)) {
                return Err(format!("{name}u = {v} is not a power of two"));
            }
            if v > bound.next_power_of_two() {
                return Err(format!("{name}u = {v} exceeds the layer bound {bound}"));
            }
        }
        if layer.kind == LayerKind::Depthwise && self.c != self.k {
            return Err("depthwise layers need Cu = Ku".into());
        }
        if self.pe_usage(layer.kind) > u64::from(pe_count) {
            return Err(format!(
                "uses {} PEs, array has {pe_count}",
                self.pe_usage(layer.kind)
            ));
        }
        Ok(())
    }
}

impl fmt::Display for SpatialUnrolling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        let mut first = true;
        for (name, v) in SU_DIMS.iter().zip(self.values()) {
            if v == 1 {
                continue;
            }
            if !first {
                f.write_str(", ")?;
            }
            write!(f, "{name}:{v}")?;
            first = false;
        }
        f.write_str("}")
    }
}

impl Serialize for SpatialUnrolling {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, u32> = SU_DIMS
            .iter()
            .zip(self.values())
            .filter(|(_, v)| *v != 1)
            .map(|(n, v)| (*n, v))
            .collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SpatialUnrolling {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, u32>::deserialize(deserializer)?;
        let mut v = [1u32; 6];
        for (key, value) in map {
            let slot = SU_DIMS
                .iter()
                .position(|d| *d == key)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown SU dimension `{key}`")))?;
            v[slot] = value;
        }
        Ok(SpatialUnrolling::from_values(v))
    }
}

/// All valid SUs of a layer in a fixed nested-loop order.
pub fn enumerate_su(layer: &Layer, pe_count: u32) -> Vec<SpatialUnrolling> {
    let d = &layer.dims;
    let options = |bound: u32| -> Vec<u32> {
        let top = bound.next_power_of_two();
        (0..=top.trailing_zeros())
            .map(|e| 1 << e)
            .filter(|&v| v <= pe_count)
            .collect()
    };
    let depthwise = layer.kind == LayerKind::Depthwise;
    let budget = u64::from(pe_count);
    let c_opts = if depthwise { vec![1] } else { options(d.c) };
    let mut out = Vec::new();
    for &ox in &options(d.ox) {
        for &oy in &options(d.oy) {
            for &k in &options(d.k) {
                for &c in &c_opts {
                    for &fx in &options(d.fx) {
                        for &fy in &options(d.fy) {
                            let usage = [ox, oy, k, c, fx, fy]
                                .iter()
                                .map(|&v| u64::from(v))
                                .product::<u64>();
                            if usage <= budget {
                                let su = SpatialUnrolling {
                                    ox,
                                    oy,
                                    k,
                                    c,
                                    fx,
                                    fy,
                                };
                                out.push(su.normalized(layer.kind));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Energy,
    Latency,
    Edp,
}

impl Metric {
    pub fn value(self, energy: f64, latency: f64) -> f64 {
        match self {
            Metric::Energy => energy,
            Metric::Latency => latency,
            Metric::Edp => energy * latency,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Energy => "energy",
            Metric::Latency => "latency",
            Metric::Edp => "edp",
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "energy" => Ok(Metric::Energy),
            "latency" => Ok(Metric::Latency),
            "edp" => Ok(Metric::Edp),
            other => Err(format!("unknown metric `{other}` (expected energy, latency or edp)")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Words and banks delivered per memory transaction on one traffic stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamPort {
    pub word_eff: u32,
    pub bank_eff: u32,
}

impl StreamPort {
    pub fn ideal(geo: &MemoryGeometry) -> Self {
        StreamPort {
            word_eff: geo.bd_words(),
            bank_eff: geo.port_banks(),
        }
    }

    pub fn words_per_access(&self) -> u32 {
        self.word_eff * self.bank_eff
    }

    /// Orders ports from worst to best: fewer words per access first, then
    /// fewer words per activated row.
    pub fn badness_key(&self) -> (u32, u32) {
        (self.words_per_access(), self.word_eff)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortAdjust {
    pub read: StreamPort,
    pub write: StreamPort,
}

impl PortAdjust {
    pub fn ideal(geo: &MemoryGeometry) -> Self {
        PortAdjust {
            read: StreamPort::ideal(geo),
            write: StreamPort::ideal(geo),
        }
    }
}

/// Access counts behind one layer evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LayerBreakdown {
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub macs: u64,
    pub act_read_words: u64,
    pub act_write_words: u64,
    pub read_transactions: u64,
    pub write_transactions: u64,
    pub read_rows: u64,
    pub write_rows: u64,
    pub weight_reads: u64,
    pub dram_words: u64,
    pub mac_energy_pj: f64,
    pub act_energy_pj: f64,
    pub weight_energy_pj: f64,
    pub dram_energy_pj: f64,
}

impl LayerBreakdown {
    pub fn energy_pj(&self) -> f64 {
        self.mac_energy_pj + self.act_energy_pj + self.weight_energy_pj + self.dram_energy_pj
    }

    pub fn latency_cycles(&self) -> u64 {
        self.compute_cycles.max(self.memory_cycles)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseResult {
    pub su: SpatialUnrolling,
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub edp: f64,
}

impl LayerwiseResult {
    pub fn new(su: SpatialUnrolling, energy_pj: f64, latency_cycles: f64) -> Self {
        LayerwiseResult {
            su,
            energy_pj,
            latency_cycles,
            edp: energy_pj * latency_cycles,
        }
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        metric.value(self.energy_pj, self.latency_cycles)
    }
}

fn tile_count(bound: u32, par: u32) -> u64 {
    u64::from(bound.div_ceil(par))
}

/// Sum over tiles of the input span each output tile touches along one axis.
fn input_span_sum(out: u32, par: u32, stride: u32, filter: u32) -> u64 {
    let span = |n: u32| u64::from((n - 1) * stride + filter);
    let full = u64::from(out / par);
    let rem = out % par;
    full * span(par.min(out)) + if rem > 0 { span(rem) } else { 0 }
}

/// Access and cycle counts for a fixed output-stationary loop order:
/// each output tile streams its input window once per K tile, weights once
/// per spatial output tile, and writes every output word once.
pub fn layer_breakdown(
    layer: &Layer,
    su: &SpatialUnrolling,
    hw: &AcceleratorConfig,
    port: Option<&PortAdjust>,
) -> LayerBreakdown {
    let d = &layer.dims;
    let depthwise = layer.kind == LayerKind::Depthwise;
    let b = u64::from(d.b);
    let t_k = tile_count(d.k, su.k);
    let t_c = if depthwise { 1 } else { tile_count(d.c, su.c) };
    let t_ox = tile_count(d.ox, su.ox);
    let t_oy = tile_count(d.oy, su.oy);
    let t_fx = tile_count(d.fx, su.fx);
    let t_fy = tile_count(d.fy, su.fy);
    let compute_cycles = b * t_k * t_c * t_ox * t_oy * t_fx * t_fy;

    let span_x = input_span_sum(d.ox, su.ox, d.stride, d.fx);
    let span_y = input_span_sum(d.oy, su.oy, d.stride, d.fy);
    let (act_read_words, weights) = if depthwise {
        (b * u64::from(d.k) * span_x * span_y, u64::from(d.k) * u64::from(d.fx * d.fy))
    } else {
        (
            b * t_k * u64::from(d.c) * span_x * span_y,
            u64::from(d.k) * u64::from(d.c) * u64::from(d.fx * d.fy),
        )
    };
    let act_write_words = layer.output_words();
    let weight_reads = b * t_ox * t_oy * weights;

    let geo = &hw.act_mem;
    let ideal = PortAdjust::ideal(geo);
    let port = port.unwrap_or(&ideal);
    let stream = |words: u64, p: &StreamPort| {
        let tx = words.div_ceil(u64::from(p.words_per_access()));
        (tx, tx * u64::from(p.bank_eff))
    };
    let (read_transactions, read_rows) = stream(act_read_words, &port.read);
    let (write_transactions, write_rows) = stream(act_write_words, &port.write);

    let macs = layer.macs();
    let e = &hw.energy;
    LayerBreakdown {
        compute_cycles,
        memory_cycles: read_transactions + write_transactions,
        macs,
        act_read_words,
        act_write_words,
        read_transactions,
        write_transactions,
        read_rows,
        write_rows,
        weight_reads,
        dram_words: weights,
        mac_energy_pj: macs as f64 * e.mac_pj,
        act_energy_pj: (read_rows + write_rows) as f64 * hw.row_energy_pj(),
        weight_energy_pj: weight_reads as f64 * e.weight_mem_access_pj,
        dram_energy_pj: weights as f64 * e.dram_access_pj,
    }
}

pub fn evaluate_layer(
    layer: &Layer,
    su: &SpatialUnrolling,
    hw: &AcceleratorConfig,
    port: Option<&PortAdjust>,
) -> LayerwiseResult {
    let br = layer_breakdown(layer, su, hw, port);
    LayerwiseResult::new(*su, br.energy_pj(), br.latency_cycles() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    Builtin,
    Imported,
}

#[derive(Clone, Debug)]
pub struct SUPool {
    pub layer_id: String,
    pub metric: Metric,
    pub source: CostSource,
    pub results: Vec<LayerwiseResult>,
}

impl SUPool {
    pub fn new(layer_id: String, metric: Metric, source: CostSource, mut results: Vec<LayerwiseResult>) -> Self {
        sort_results(&mut results, metric);
        SUPool {
            layer_id,
            metric,
            source,
            results,
        }
    }

    pub fn p_su_min(&self) -> f64 {
        self.results[0].metric(self.metric)
    }

    pub fn best(&self) -> &LayerwiseResult {
        &self.results[0]
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn adjusted(&self, entry: &LayerwiseResult, layer: &Layer, hw: &AcceleratorConfig, port: &PortAdjust) -> LayerwiseResult {
        adjusted_cost(self.source, entry, layer, hw, port)
    }
}

/// Memory-aware cost of one pool entry under a port adjustment. Imported
/// entries keep their external cost and add the built-in model's penalty.
pub fn adjusted_cost(
    source: CostSource,
    entry: &LayerwiseResult,
    layer: &Layer,
    hw: &AcceleratorConfig,
    port: &PortAdjust,
) -> LayerwiseResult {
    if *port == PortAdjust::ideal(&hw.act_mem) {
        return entry.clone();
    }
    let adj = evaluate_layer(layer, &entry.su, hw, Some(port));
    match source {
        CostSource::Builtin => adj,
        CostSource::Imported => {
            let base = evaluate_layer(layer, &entry.su, hw, None);
            LayerwiseResult::new(
                entry.su,
                entry.energy_pj + (adj.energy_pj - base.energy_pj),
                entry.latency_cycles + (adj.latency_cycles - base.latency_cycles),
            )
        }
    }
}

/// Ascending by metric, ties broken towards the larger SU tie key.
pub fn sort_results(results: &mut [LayerwiseResult], metric: Metric) {
    results.sort_by(|a, b| {
        a.metric(metric)
            .total_cmp(&b.metric(metric))
            .then_with(|| b.su.tie_key().cmp(&a.su.tie_key()))
    });
}

/// Built-in pools for every layer of the graph, in layer order.
pub fn build_pools(graph: &NetworkGraph, hw: &AcceleratorConfig, metric: Metric) -> Vec<SUPool> {
    graph
        .layers()
        .par_iter()
        .map(|layer| {
            let results = enumerate_su(layer, hw.pe_count())
                .iter()
                .map(|su| evaluate_layer(layer, su, hw, None))
                .collect();
            SUPool::new(layer.id.clone(), metric, CostSource::Builtin, results)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruningConfig {
    pub theta: f64,
    pub metric: Metric,
    pub p_ideal_network: f64,
}

impl PruningConfig {
    pub fn new(theta: f64, metric: Metric, pools: &[SUPool]) -> Self {
        assert!(theta >= 0.0, "theta must be non-negative");
        PruningConfig {
            theta,
            metric,
            p_ideal_network: pools.iter().map(|p| p.results[0].metric(metric)).sum(),
        }
    }

    pub fn retains(&self, p_su: f64, p_su_min: f64) -> bool {
        self.theta.is_infinite() || (p_su - p_su_min) / self.p_ideal_network <= self.theta
    }
}

pub fn prune_su_pool(pools: &[SUPool], cfg: &PruningConfig) -> Vec<SUPool> {
    pools
        .iter()
        .map(|pool| {
            let mut results = pool.results.clone();
            sort_results(&mut results, cfg.metric);
            let min = results[0].metric(cfg.metric);
            results.retain(|r| cfg.retains(r.metric(cfg.metric), min));
            SUPool {
                layer_id: pool.layer_id.clone(),
                metric: cfg.metric,
                source: pool.source,
                results,
            }
        })
        .collect()
}

/// `log10` of the number of cross-layer SU combinations.
pub fn log10_combinations(pools: &[SUPool]) -> f64 {
    pools.iter().map(|p| (p.len() as f64).log10()).sum()
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("malformed cost table: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("row {row}: unknown layer `{layer}`")]
    UnknownLayer { row: usize, layer: String },
    #[error("row {row}: SU {su} invalid for layer `{layer}`: {reason}")]
    InvalidSu {
        row: usize,
        layer: String,
        su: SpatialUnrolling,
        reason: String,
    },
    #[error("row {row}: duplicate SU {su} for layer `{layer}`")]
    Duplicate {
        row: usize,
        layer: String,
        su: SpatialUnrolling,
    },
    #[error("row {row}: costs must be finite and positive")]
    BadCost { row: usize },
    #[error("no cost rows for layer `{0}`")]
    MissingLayer(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostRow {
    layer_id: String,
    factors: SpatialUnrolling,
    energy_pj: f64,
    latency_cycles: f64,
}

/// Pools from an external per-SU cost table, one per graph layer in layer order.
pub fn import_layerwise_results(
    text: &str,
    graph: &NetworkGraph,
    hw: &AcceleratorConfig,
    metric: Metric,
) -> Result<Vec<SUPool>, ImportError> {
    let rows: Vec<CostRow> = serde_json::from_str(text)?;
    let mut per_layer: HashMap<usize, Vec<LayerwiseResult>> = HashMap::new();
    let mut seen = HashSet::new();
    for (row, r) in rows.into_iter().enumerate() {
        let idx = graph.find(&r.layer_id).ok_or_else(|| ImportError::UnknownLayer {
            row,
            layer: r.layer_id.clone(),
        })?;
        let layer = graph.layer(idx);
        let su = r.factors.normalized(layer.kind);
        su.check(layer, hw.pe_count()).map_err(|reason| ImportError::InvalidSu {
            row,
            layer: r.layer_id.clone(),
            su,
            reason,
        })?;
        if !seen.insert((idx, su)) {
            return Err(ImportError::Duplicate {
                row,
                layer: r.layer_id,
                su,
            });
        }
        if !(r.energy_pj.is_finite() && r.latency_cycles.is_finite() && r.energy_pj > 0.0 && r.latency_cycles > 0.0) {
            return Err(ImportError::BadCost { row });
        }
        per_layer
            .entry(idx)
            .or_default()
            .push(LayerwiseResult::new(su, r.energy_pj, r.latency_cycles));
    }
    graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let results = per_layer
                .remove(&i)
                .ok_or_else(|| ImportError::MissingLayer(layer.id.clone()))?;
            Ok(SUPool::new(layer.id.clone(), metric, CostSource::Imported, results))
        })
        .collect()
}
