//! Port effectiveness under a layout, memory-aware re-evaluation of a
//! schedule, reshuffle-buffer sizing and the three-scenario comparison.

use serde::{Deserialize, Serialize};

use crate::crosslayer::{
    schedule_network, EdgeLayout, LayerChoice, NetworkSchedule, ScheduleError, ScheduleOptions, ScheduleOutcome,
    TensorLayout,
};
use crate::factors::{lcm, LayoutDim, LayoutFactors};
use crate::hardware::{multiplexer_count, AcceleratorConfig, MemoryGeometry};
use crate::layermapper::{adjusted_cost, CostSource, PortAdjust, SUPool, SpatialUnrolling, StreamPort};
use crate::layout::{natural_layout, natural_rpd, BankLayout, MemLayout};
use crate::workload::NetworkGraph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectivePort {
    pub word_eff: u32,
    pub bank_eff: u32,
    pub pd_eff: f64,
    pub pd_adjust_words: u32,
}

impl EffectivePort {
    pub fn stream(&self) -> StreamPort {
        StreamPort {
            word_eff: self.word_eff,
            bank_eff: self.bank_eff,
        }
    }
}

/// Useful words per activated bank row.
pub fn word_eff(bl: &BankLayout, p: &LayoutFactors) -> u32 {
    LayoutDim::FILL_ORDER
        .iter()
        .map(|&d| bl.get(d).min(p.get(d)))
        .product()
}

/// Banks opened per port access. A port factor smaller than the bank-row
/// factor still touches one chunk along that dimension, so the ratio is
/// clamped at 1.
pub fn bank_eff(bl: &BankLayout, p: &LayoutFactors, md: &MemLayout, geo: &MemoryGeometry) -> u32 {
    let spread: u32 = LayoutDim::FILL_ORDER
        .iter()
        .map(|&d| {
            let chunks = (p.get(d) / bl.get(d)).max(1);
            md.bank_factors.get(d).min(chunks)
        })
        .product();
    geo.port_banks().min(spread)
}

pub fn pd_eff(bl: &BankLayout, p: &LayoutFactors, md: &MemLayout, geo: &MemoryGeometry) -> EffectivePort {
    let w = word_eff(bl, p);
    let b = bank_eff(bl, p, md, geo);
    EffectivePort {
        word_eff: w,
        bank_eff: b,
        pd_eff: f64::from(w * b) / f64::from(geo.pd_words()),
        pd_adjust_words: w * b,
    }
}

/// Registers (one word each) needed to turn a producer's output order into
/// a consumer's read pattern.
pub fn reshuffle_buffer_regs(producer_su: &SpatialUnrolling, rpd: &LayoutFactors) -> u64 {
    let out = producer_su.output_tile();
    LayoutDim::FILL_ORDER
        .iter()
        .map(|&d| lcm(u64::from(out.get(d)), u64::from(rpd.get(d))))
        .product()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NaiveNoReshuffle,
    ReshuffleBuffer,
    Cmds,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::NaiveNoReshuffle, Scenario::ReshuffleBuffer, Scenario::Cmds];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::NaiveNoReshuffle => "naive_no_reshuffle",
            Scenario::ReshuffleBuffer => "reshuffle_buffer",
            Scenario::Cmds => "cmds",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScenarioCost {
    pub scenario: Scenario,
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub buffer_regs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub su: SpatialUnrolling,
    pub read: StreamPort,
    pub write: StreamPort,
    pub energy_pj: f64,
    pub latency_cycles: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub layers: Vec<LayerCost>,
}

impl NetworkSchedule {
    pub fn write_port(&self, tensor: &TensorLayout, geo: &MemoryGeometry) -> EffectivePort {
        pd_eff(&tensor.md.base, &tensor.wpd, &tensor.md, geo)
    }

    pub fn read_port(&self, edge: &EdgeLayout, geo: &MemoryGeometry) -> EffectivePort {
        let tensor = self.tensor_of(edge.producer).expect("every edge has a tensor layout");
        pd_eff(&tensor.md.base, &edge.rpd, &tensor.md, geo)
    }

    /// Per-layer ports: reads take the worst incoming edge, writes the
    /// tensor's write layout; layers without edges see the ideal port.
    pub fn layer_ports(&self, graph: &NetworkGraph, geo: &MemoryGeometry) -> Vec<PortAdjust> {
        let mut ports = vec![PortAdjust::ideal(geo); graph.len()];
        for t in &self.tensors {
            ports[t.producer].write = self.write_port(t, geo).stream();
        }
        for e in &self.edges {
            let r = self.read_port(e, geo).stream();
            let slot = &mut ports[e.consumer].read;
            if r.badness_key() < slot.badness_key() {
                *slot = r;
            }
        }
        ports
    }
}

/// Re-runs each layer's cost with the port efficiency its layouts allow,
/// summing energy and latency over layers.
pub fn evaluate_with_layout(graph: &NetworkGraph, schedule: &NetworkSchedule, hw: &AcceleratorConfig) -> Evaluation {
    let ports = schedule.layer_ports(graph, &hw.act_mem);
    let mut layers = Vec::with_capacity(graph.len());
    let (mut energy, mut latency) = (0.0, 0.0);
    for &l in graph.topo_order() {
        let choice = &schedule.layers[l];
        let r = adjusted_cost(schedule.source, &choice.base, graph.layer(l), hw, &ports[l]);
        energy += r.energy_pj;
        latency += r.latency_cycles;
        layers.push(LayerCost {
            layer: graph.layer(l).id.clone(),
            su: choice.su,
            read: ports[l].read,
            write: ports[l].write,
            energy_pj: r.energy_pj,
            latency_cycles: r.latency_cycles,
        });
    }
    Evaluation {
        energy_pj: energy,
        latency_cycles: latency,
        layers,
    }
}

/// Layouts a memory-unaware flow ends up with for given per-layer choices:
/// every tensor packed in its producer's output order, every consumer
/// reading in its own natural order.
pub fn natural_schedule(
    graph: &NetworkGraph,
    choices: Vec<LayerChoice>,
    source: CostSource,
    geo: &MemoryGeometry,
) -> NetworkSchedule {
    let tensors = graph
        .producer_groups()
        .into_iter()
        .map(|(p, _)| {
            let nat = natural_layout(graph.layer(p), &choices[p].su, geo);
            TensorLayout {
                producer: p,
                md: nat.md,
                wpd: nat.wpd,
            }
        })
        .collect();
    let edges = graph
        .edges()
        .iter()
        .map(|e| EdgeLayout {
            producer: e.producer,
            consumer: e.consumer,
            rpd: natural_rpd(graph.layer(e.consumer), &choices[e.consumer].su, graph.layer(e.producer), geo),
            cut: true,
        })
        .collect();
    NetworkSchedule {
        source,
        bank_layout: None,
        layers: choices,
        tensors,
        edges,
    }
}

/// Each layer's layer-wise optimum with the layouts that choice implies.
pub fn naive_schedule(graph: &NetworkGraph, pools: &[SUPool], geo: &MemoryGeometry) -> NetworkSchedule {
    let choices = pools
        .iter()
        .map(|p| LayerChoice {
            su: p.best().su,
            base: p.best().clone(),
        })
        .collect();
    let source = pools.first().map_or(CostSource::Builtin, |p| p.source);
    natural_schedule(graph, choices, source, geo)
}

/// Sum of every layer's memory-unaware optimum.
pub fn ideal_cost(pools: &[SUPool]) -> (f64, f64) {
    pools.iter().fold((0.0, 0.0), |(e, l), p| {
        (e + p.best().energy_pj, l + p.best().latency_cycles)
    })
}

/// Naive SUs behind a register reshuffle stage: ports behave ideally, every
/// mismatched edge pays one register write and one read per transferred word.
pub fn reshuffle_scenario(graph: &NetworkGraph, naive: &NetworkSchedule, hw: &AcceleratorConfig) -> ScenarioCost {
    let geo = &hw.act_mem;
    let (mut energy, latency) = naive
        .layers
        .iter()
        .fold((0.0, 0.0), |(e, l), c| (e + c.base.energy_pj, l + c.base.latency_cycles));
    let mut regs = 0;
    for edge in &naive.edges {
        regs = regs.max(reshuffle_buffer_regs(&naive.layers[edge.producer].su, &edge.rpd));
        if naive.read_port(edge, geo).pd_eff < 1.0 {
            let words = graph.layer(edge.producer).output_words() as f64;
            energy += 2.0 * hw.energy.reg_access_pj * words;
        }
    }
    ScenarioCost {
        scenario: Scenario::ReshuffleBuffer,
        energy_pj: energy,
        latency_cycles: latency,
        buffer_regs: regs,
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub ideal: LayerwiseTotals,
    pub scenarios: [ScenarioCost; 3],
    pub naive_schedule: NetworkSchedule,
    pub naive_eval: Evaluation,
    pub cmds_eval: Evaluation,
    pub outcome: ScheduleOutcome,
    pub multiplexers: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerwiseTotals {
    pub energy_pj: f64,
    pub latency_cycles: f64,
}

impl Comparison {
    pub fn scenario(&self, s: Scenario) -> &ScenarioCost {
        self.scenarios.iter().find(|c| c.scenario == s).expect("all scenarios present")
    }

    /// `(energy, latency)` of a scenario divided by the ideal totals.
    pub fn normalized(&self, s: Scenario) -> (f64, f64) {
        let c = self.scenario(s);
        (c.energy_pj / self.ideal.energy_pj, c.latency_cycles / self.ideal.latency_cycles)
    }
}

/// Naive, reshuffle-buffer and cross-layer scheduled costs for one network
/// on one accelerator, all on the same memory-aware model.
pub fn compare_scenarios(
    graph: &NetworkGraph,
    pools: &[SUPool],
    hw: &AcceleratorConfig,
    opts: &ScheduleOptions,
) -> Result<Comparison, ScheduleError> {
    let geo = &hw.act_mem;
    let naive = naive_schedule(graph, pools, geo);
    let naive_eval = evaluate_with_layout(graph, &naive, hw);
    let outcome = schedule_network(graph, pools, hw, opts)?;
    let cmds_eval = evaluate_with_layout(graph, &outcome.schedule, hw);
    let (ie, il) = ideal_cost(pools);
    let scenarios = [
        ScenarioCost {
            scenario: Scenario::NaiveNoReshuffle,
            energy_pj: naive_eval.energy_pj,
            latency_cycles: naive_eval.latency_cycles,
            buffer_regs: 0,
        },
        reshuffle_scenario(graph, &naive, hw),
        ScenarioCost {
            scenario: Scenario::Cmds,
            energy_pj: cmds_eval.energy_pj,
            latency_cycles: cmds_eval.latency_cycles,
            buffer_regs: 0,
        },
    ];
    Ok(Comparison {
        ideal: LayerwiseTotals {
            energy_pj: ie,
            latency_cycles: il,
        },
        scenarios,
        naive_schedule: naive,
        naive_eval,
        cmds_eval,
        outcome,
        multiplexers: multiplexer_count(geo),
    })
}
