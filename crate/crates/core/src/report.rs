//! Run reports: a JSON document, an aligned text table and, for scenario
//! comparisons, a CSV of normalized bars. Every report embeds the manifest
//! that produced it and contains no timing or host data, so equal inputs
//! give byte-identical files.

use serde::{Deserialize, Serialize};

use crate::costmodel::{Comparison, Scenario};
use crate::crosslayer::{Origin, ScheduleOutcome};
use crate::factors::LayoutFactors;
use crate::layermapper::Metric;
use crate::workload::NetworkGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Network file path or shipped benchmark name, as given.
    pub network: String,
    /// Preset name or hardware file path, as given.
    pub hardware: String,
    pub theta: f64,
    pub metric: Metric,
    pub beam: u64,
    pub seed: u64,
    pub out: String,
    pub costs: Option<String>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub id: String,
    pub su: String,
    pub read_words_per_access: u32,
    pub write_words_per_access: u32,
    pub energy_pj: f64,
    pub latency_cycles: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleSummary {
    pub origin: Origin,
    pub bank_layout: Option<LayoutFactors>,
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub naive_energy_pj: f64,
    pub naive_latency_cycles: f64,
    pub log10_combinations_unpruned: f64,
    pub log10_combinations_pruned: f64,
    pub reduction_factor: f64,
    pub pool_sizes: Vec<usize>,
    pub pruned_sizes: Vec<usize>,
    pub bank_layouts: usize,
    pub valid_bank_layouts: usize,
    pub pairable_bank_layouts: usize,
    pub candidates: usize,
    pub cut_edges: usize,
    pub search_truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub manifest: RunManifest,
    pub summary: ScheduleSummary,
    pub layers: Vec<LayerRow>,
}

impl ScheduleReport {
    pub fn new(manifest: RunManifest, graph: &NetworkGraph, comparison: &Comparison) -> Self {
        let outcome: &ScheduleOutcome = &comparison.outcome;
        let stats = &outcome.stats;
        let naive = comparison.scenario(Scenario::NaiveNoReshuffle);
        let layers = comparison
            .cmds_eval
            .layers
            .iter()
            .map(|lc| LayerRow {
                id: lc.layer.clone(),
                su: lc.su.to_string(),
                read_words_per_access: lc.read.words_per_access(),
                write_words_per_access: lc.write.words_per_access(),
                energy_pj: lc.energy_pj,
                latency_cycles: lc.latency_cycles,
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(layers.len(), graph.len());
        ScheduleReport {
            manifest,
            summary: ScheduleSummary {
                origin: stats.origin,
                bank_layout: outcome.schedule.bank_layout,
                energy_pj: outcome.energy_pj,
                latency_cycles: outcome.latency_cycles,
                naive_energy_pj: naive.energy_pj,
                naive_latency_cycles: naive.latency_cycles,
                log10_combinations_unpruned: stats.log10_unpruned,
                log10_combinations_pruned: stats.log10_pruned,
                reduction_factor: stats.reduction_factor(),
                pool_sizes: stats.pool_sizes.clone(),
                pruned_sizes: stats.pruned_sizes.clone(),
                bank_layouts: stats.bank_layouts,
                valid_bank_layouts: stats.valid_bank_layouts,
                pairable_bank_layouts: stats.pairable_bank_layouts,
                candidates: stats.candidates,
                cut_edges: stats.cut_edges,
                search_truncated: stats.truncated,
            },
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let mut out = manifest_text(&self.manifest);
        let bl = s.bank_layout.map_or_else(|| "natural (per tensor)".to_string(), |b| b.to_string());
        out += &format!("origin          {}\n", origin_name(s.origin));
        out += &format!("bank layout     {bl}\n");
        out += &format!("energy (pJ)     {:.1}   naive {:.1}\n", s.energy_pj, s.naive_energy_pj);
        out += &format!("latency (cyc)   {:.0}   naive {:.0}\n", s.latency_cycles, s.naive_latency_cycles);
        out += &format!(
            "SU combinations 10^{:.2} unpruned, 10^{:.2} pruned, reduction {}\n",
            s.log10_combinations_unpruned,
            s.log10_combinations_pruned,
            reduction_text(s.log10_combinations_unpruned - s.log10_combinations_pruned)
        );
        out += &format!(
            "bank layouts    {} total, {} serve every layer, {} pair every tensor; {} candidates, {} cut edges{}\n\n",
            s.bank_layouts,
            s.valid_bank_layouts,
            s.pairable_bank_layouts,
            s.candidates,
            s.cut_edges,
            if s.search_truncated { " (search truncated)" } else { "" }
        );
        let rows: Vec<Vec<String>> = self
            .layers
            .iter()
            .map(|r| {
                vec![
                    r.id.clone(),
                    r.su.clone(),
                    r.read_words_per_access.to_string(),
                    r.write_words_per_access.to_string(),
                    format!("{:.1}", r.energy_pj),
                    format!("{:.0}", r.latency_cycles),
                ]
            })
            .collect();
        out += &table(&["layer", "su", "read words", "write words", "energy_pj", "latency"], &rows, 2);
        out
    }
}

fn origin_name(o: Origin) -> &'static str {
    match o {
        Origin::Matched => "matched",
        Origin::Segmented => "segmented",
        Origin::LayerwiseOptimum => "layerwise_optimum",
    }
}

fn reduction_text(log10: f64) -> String {
    if log10 < 6.0 {
        format!("{:.1}x", 10f64.powf(log10))
    } else {
        format!("10^{log10:.2}")
    }
}

fn manifest_text(m: &RunManifest) -> String {
    format!(
        "network {}  hardware {}  theta {}  metric {}  beam {}  seed {}{}{}\n",
        m.network,
        m.hardware,
        m.theta,
        m.metric,
        m.beam,
        m.seed,
        m.costs.as_ref().map_or(String::new(), |c| format!("  costs {c}")),
        if m.fallback { "" } else { "  no-fallback" }
    )
}

/// Aligned columns; the first `left` are labels, the rest right-aligned.
pub fn table(header: &[&str], rows: &[Vec<String>], left: usize) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < left {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("{c:>w$}"));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub network: String,
    pub hardware: String,
    pub scenario: Scenario,
    pub energy_pj: f64,
    pub latency_cycles: f64,
    pub normalized_energy: f64,
    pub normalized_latency: f64,
    pub buffer_regs: u64,
}

/// Reshuffle-buffer registers per network (rows) and hardware (columns).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegisterTable {
    pub networks: Vec<String>,
    pub hardware: Vec<String>,
    pub registers: Vec<Vec<Option<u64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub manifest: RunManifest,
    pub rows: Vec<ScenarioRow>,
    pub register_table: RegisterTable,
}

/// One finished comparison, labelled for the report.
pub struct CompareEntry<'a> {
    pub network: String,
    pub hardware: String,
    pub comparison: &'a Comparison,
}

impl CompareReport {
    pub fn new(manifest: RunManifest, entries: &[CompareEntry<'_>]) -> Self {
        let mut networks: Vec<String> = Vec::new();
        let mut hardware: Vec<String> = Vec::new();
        for e in entries {
            if !networks.contains(&e.network) {
                networks.push(e.network.clone());
            }
            if !hardware.contains(&e.hardware) {
                hardware.push(e.hardware.clone());
            }
        }
        let mut registers = vec![vec![None; hardware.len()]; networks.len()];
        let mut rows = Vec::new();
        for e in entries {
            let n = networks.iter().position(|x| *x == e.network).unwrap();
            let h = hardware.iter().position(|x| *x == e.hardware).unwrap();
            registers[n][h] = Some(e.comparison.scenario(Scenario::ReshuffleBuffer).buffer_regs);
            for s in Scenario::ALL {
                let c = e.comparison.scenario(s);
                let (ne, nl) = e.comparison.normalized(s);
                rows.push(ScenarioRow {
                    network: e.network.clone(),
                    hardware: e.hardware.clone(),
                    scenario: s,
                    energy_pj: c.energy_pj,
                    latency_cycles: c.latency_cycles,
                    normalized_energy: ne,
                    normalized_latency: nl,
                    buffer_regs: c.buffer_regs,
                });
            }
        }
        CompareReport {
            manifest,
            rows,
            register_table: RegisterTable {
                networks,
                hardware,
                registers,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Normalized bars, one line per (network, hardware, scenario).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("network,hardware,scenario,normalized_energy,normalized_latency,buffer_regs\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{},{:.6},{:.6},{}\n",
                r.network,
                r.hardware,
                r.scenario.name(),
                r.normalized_energy,
                r.normalized_latency,
                r.buffer_regs
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = manifest_text(&self.manifest);
        out += "Energy and latency normalized to the memory-unaware layer-wise optimum\n\n";
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.network.clone(),
                    r.hardware.clone(),
                    r.scenario.name().to_string(),
                    format!("{:.3}", r.normalized_energy),
                    format!("{:.3}", r.normalized_latency),
                    format!("{:.1}", r.energy_pj),
                    format!("{:.0}", r.latency_cycles),
                ]
            })
            .collect();
        out += &table(
            &["network", "hardware", "scenario", "energy", "latency", "energy_pj", "latency_cyc"],
            &rows,
            3,
        );
        out += "\nReshuffle buffer registers (8b words)\n\n";
        let t = &self.register_table;
        let mut header = vec!["network"];
        header.extend(t.hardware.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = t
            .networks
            .iter()
            .zip(&t.registers)
            .map(|(n, regs)| {
                let mut r = vec![n.clone()];
                r.extend(regs.iter().map(|v| v.map_or_else(|| "-".to_string(), |x| x.to_string())));
                r
            })
            .collect();
        out += &table(&header, &rows, 1);
        out
    }
}
