//! Transaction-level model of a banked activation memory. Places tensor
//! coordinates into (bank, row, offset) slots, serves per-cycle demand sets
//! through the port and counts what each transaction really delivers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::costmodel::pd_eff;
use crate::crosslayer::NetworkSchedule;
use crate::factors::LayoutFactors;
use crate::hardware::MemoryGeometry;
use crate::layermapper::SpatialUnrolling;
use crate::layout::{tensor_extent, BankLayout, MemLayout};
use crate::workload::NetworkGraph;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("tensor needs {needed} rows per bank but banks hold {available}")]
    Capacity { needed: u64, available: u64 },
    #[error("coordinate ({ox}, {oy}, {k}) lies outside the placed tensor")]
    OutOfDomain { ox: u32, oy: u32, k: u32 },
}

pub type Coord = (u32, u32, u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Location {
    pub bank: u32,
    pub row: u64,
    pub offset: u32,
}

/// Coordinates are linearized with bank-layout factors innermost (word
/// offset), bank factors next (bank index) and the rest outermost (row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub md: MemLayout,
    pub extent: LayoutFactors,
    row_grid: LayoutFactors,
}

pub fn build_placement(md: &MemLayout, extent: LayoutFactors, geo: &MemoryGeometry) -> Result<Placement, SimError> {
    let eff = md.effective();
    let row_grid = extent.zip_with(&eff, |e, m| e.div_ceil(m));
    let needed = row_grid.product();
    if needed > geo.bank_rows() {
        return Err(SimError::Capacity {
            needed,
            available: geo.bank_rows(),
        });
    }
    Ok(Placement { md: *md, extent, row_grid })
}

fn mixed_radix(digits: [u32; 3], radix: LayoutFactors) -> u64 {
    u64::from(digits[0]) + u64::from(radix.ox) * (u64::from(digits[1]) + u64::from(radix.oy) * u64::from(digits[2]))
}

impl Placement {
    pub fn locate(&self, (x, y, k): Coord) -> Result<Location, SimError> {
        if x >= self.extent.ox || y >= self.extent.oy || k >= self.extent.k {
            return Err(SimError::OutOfDomain { ox: x, oy: y, k });
        }
        let bl = self.md.base;
        let bf = self.md.bank_factors;
        let offset = mixed_radix([x % bl.ox, y % bl.oy, k % bl.k], bl) as u32;
        let (cx, cy, ck) = (x / bl.ox, y / bl.oy, k / bl.k);
        let bank = mixed_radix([cx % bf.ox, cy % bf.oy, ck % bf.k], bf) as u32;
        let row = mixed_radix([cx / bf.ox, cy / bf.oy, ck / bf.k], self.row_grid);
        Ok(Location { bank, row, offset })
    }

    pub fn rows_per_bank(&self) -> u64 {
        self.row_grid.product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Activation {
    pub bank: u32,
    pub row: u64,
    pub words: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Transaction {
    pub cycle: u64,
    pub activations: Vec<Activation>,
    /// Issued only because two rows of one bank were demanded together.
    pub stall: bool,
}

impl Transaction {
    pub fn useful_words(&self) -> u64 {
        self.activations.iter().map(|a| u64::from(a.words)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccessTrace {
    pub transactions: Vec<Transaction>,
}

impl AccessTrace {
    pub fn useful_words(&self) -> u64 {
        self.transactions.iter().map(Transaction::useful_words).sum()
    }

    pub fn row_activations(&self) -> u64 {
        self.transactions.iter().map(|t| t.activations.len() as u64).sum()
    }

    pub fn stalls(&self) -> u64 {
        self.transactions.iter().filter(|t| t.stall).count() as u64
    }

    /// One JSON object per transaction.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.transactions {
            let banks: Vec<u32> = t.activations.iter().map(|a| a.bank).collect();
            let rows: Vec<u64> = t.activations.iter().map(|a| a.row).collect();
            let _ = writeln!(
                out,
                "{}",
                serde_json::json!({
                    "cycle": t.cycle,
                    "banks": banks,
                    "rows": rows,
                    "useful_words": t.useful_words(),
                    "stall": t.stall,
                })
            );
        }
        out
    }
}

/// Serves each demand set in as few transactions as the port allows: every
/// transaction opens one row in each of up to `port_banks` banks, taking the
/// banks with the most rows still pending first.
pub fn simulate_stream(placement: &Placement, demand: &[Vec<Coord>], geo: &MemoryGeometry) -> Result<AccessTrace, SimError> {
    let port_banks = geo.port_banks() as usize;
    let mut trace = AccessTrace::default();
    let mut cycle = 0;
    for set in demand {
        // bank -> (first appearance, rows in order of appearance with word counts)
        let mut pending: BTreeMap<u32, (usize, Vec<(u64, u32)>)> = BTreeMap::new();
        for (i, &c) in set.iter().enumerate() {
            let loc = placement.locate(c)?;
            let entry = pending.entry(loc.bank).or_insert_with(|| (i, Vec::new()));
            match entry.1.iter_mut().find(|(r, _)| *r == loc.row) {
                Some((_, w)) => *w += 1,
                None => entry.1.push((loc.row, 1)),
            }
        }
        let rows: usize = pending.values().map(|(_, r)| r.len()).sum();
        let floor = rows.div_ceil(port_banks.max(1));
        let mut queues: Vec<(u32, usize, std::collections::VecDeque<(u64, u32)>)> = pending
            .into_iter()
            .map(|(bank, (first, r))| (bank, first, r.into()))
            .collect();
        let mut issued = 0;
        while queues.iter().any(|q| !q.2.is_empty()) {
            queues.sort_by(|a, b| b.2.len().cmp(&a.2.len()).then(a.1.cmp(&b.1)));
            let mut activations: Vec<Activation> = queues
                .iter_mut()
                .filter(|q| !q.2.is_empty())
                .take(port_banks)
                .map(|q| {
                    let (row, words) = q.2.pop_front().unwrap();
                    Activation { bank: q.0, row, words }
                })
                .collect();
            activations.sort_by_key(|a| a.bank);
            issued += 1;
            trace.transactions.push(Transaction {
                cycle,
                activations,
                stall: issued > floor,
            });
            cycle += 1;
        }
    }
    Ok(trace)
}

/// Port-sized boxes tiling `extent`, aligned to `port`, OX fastest.
pub fn port_demand(port: &LayoutFactors, extent: &LayoutFactors) -> Vec<Vec<Coord>> {
    let mut out = Vec::new();
    for bk in (0..extent.k).step_by(port.k as usize) {
        for by in (0..extent.oy).step_by(port.oy as usize) {
            for bx in (0..extent.ox).step_by(port.ox as usize) {
                let mut set = Vec::with_capacity(port.product() as usize);
                for k in bk..(bk + port.k).min(extent.k) {
                    for y in by..(by + port.oy).min(extent.oy) {
                        for x in bx..(bx + port.ox).min(extent.ox) {
                            set.push((x, y, k));
                        }
                    }
                }
                out.push(set);
            }
        }
    }
    out
}

/// Useful words over port capacity, as the exact pair `(useful, capacity)`.
pub fn measured_ratio(trace: &AccessTrace, geo: &MemoryGeometry) -> (u64, u64) {
    (
        trace.useful_words(),
        trace.transactions.len() as u64 * u64::from(geo.pd_words()),
    )
}

pub fn measured_pd_eff(trace: &AccessTrace, geo: &MemoryGeometry) -> f64 {
    let (useful, capacity) = measured_ratio(trace, geo);
    useful as f64 / capacity as f64
}

/// Smallest extent covering `extent` that whole port boxes and whole memory
/// rows tile exactly, so boundary boxes do not skew the steady state.
pub fn steady_extent(extent: &LayoutFactors, port: &LayoutFactors, md: &MemLayout) -> LayoutFactors {
    let eff = md.effective();
    let unit = port.zip_with(&eff, |p, m| p.max(m));
    extent.zip_with(&unit, |e, u| e.div_ceil(u) * u)
}

/// Per-access counts seen by streaming `port` boxes over a tensor laid out
/// as `md`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PortMeasurement {
    /// Useful words per row activation, when every activation agrees.
    pub words_per_row: Option<u32>,
    /// Banks per transaction, when every transaction agrees.
    pub banks_per_access: Option<u32>,
    pub useful_words: u64,
    pub transactions: u64,
    pub stalls: u64,
}

impl PortMeasurement {
    pub fn pd_eff(&self, geo: &MemoryGeometry) -> f64 {
        self.useful_words as f64 / (self.transactions as f64 * f64::from(geo.pd_words()))
    }
}

fn uniform(mut values: impl Iterator<Item = u32>) -> Option<u32> {
    let first = values.next()?;
    values.all(|v| v == first).then_some(first)
}

pub fn measure_port(md: &MemLayout, port: &LayoutFactors, extent: &LayoutFactors, geo: &MemoryGeometry) -> Result<(PortMeasurement, AccessTrace), SimError> {
    let extent = steady_extent(extent, port, md);
    let placement = build_placement(md, extent, geo)?;
    let trace = simulate_stream(&placement, &port_demand(port, &extent), geo)?;
    let m = PortMeasurement {
        words_per_row: uniform(trace.transactions.iter().flat_map(|t| t.activations.iter().map(|a| a.words))),
        banks_per_access: uniform(trace.transactions.iter().map(|t| t.activations.len() as u32)),
        useful_words: trace.useful_words(),
        transactions: trace.transactions.len() as u64,
        stalls: trace.stalls(),
    };
    Ok((m, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PortCheck {
    pub producer: String,
    /// `None` for the producer's write stream.
    pub consumer: Option<String>,
    pub port: LayoutFactors,
    pub analytic_pd_eff: f64,
    pub measured_pd_eff: f64,
    pub transactions: u64,
    pub stalls: u64,
}

impl PortCheck {
    pub fn matches(&self) -> bool {
        (self.analytic_pd_eff - self.measured_pd_eff).abs() <= 1e-12
    }
}

/// Replays every tensor write and edge read of a schedule. The analytic side
/// comes from `recorded` when given (a schedule document's stored values),
/// otherwise from the cost model.
pub fn replay_schedule(
    graph: &NetworkGraph,
    schedule: &NetworkSchedule,
    geo: &MemoryGeometry,
    recorded: Option<&dyn Fn(usize, Option<usize>) -> Option<f64>>,
) -> Result<(Vec<PortCheck>, AccessTrace), SimError> {
    let mut checks = Vec::new();
    let mut full = AccessTrace::default();
    let mut append = |trace: AccessTrace| {
        let base = full.transactions.len() as u64;
        full.transactions.extend(trace.transactions.into_iter().map(|mut t| {
            t.cycle += base;
            t
        }));
    };
    for t in &schedule.tensors {
        let extent = tensor_extent(graph.layer(t.producer));
        let (m, trace) = measure_port(&t.md, &t.wpd, &extent, geo)?;
        let analytic = recorded
            .and_then(|f| f(t.producer, None))
            .unwrap_or_else(|| pd_eff(&t.md.base, &t.wpd, &t.md, geo).pd_eff);
        checks.push(PortCheck {
            producer: graph.layer(t.producer).id.clone(),
            consumer: None,
            port: t.wpd,
            analytic_pd_eff: analytic,
            measured_pd_eff: m.pd_eff(geo),
            transactions: m.transactions,
            stalls: m.stalls,
        });
        append(trace);
        for e in schedule.edges.iter().filter(|e| e.producer == t.producer) {
            let (m, trace) = measure_port(&t.md, &e.rpd, &extent, geo)?;
            let analytic = recorded
                .and_then(|f| f(e.producer, Some(e.consumer)))
                .unwrap_or_else(|| pd_eff(&t.md.base, &e.rpd, &t.md, geo).pd_eff);
            checks.push(PortCheck {
                producer: graph.layer(e.producer).id.clone(),
                consumer: Some(graph.layer(e.consumer).id.clone()),
                port: e.rpd,
                analytic_pd_eff: analytic,
                measured_pd_eff: m.pd_eff(geo),
                transactions: m.transactions,
                stalls: m.stalls,
            });
            append(trace);
        }
    }
    Ok((checks, full))
}

fn block_coords(index: Coord, size: &LayoutFactors) -> impl Iterator<Item = Coord> + '_ {
    let (bx, by, bk) = (index.0 * size.ox, index.1 * size.oy, index.2 * size.k);
    (0..size.k).flat_map(move |k| (0..size.oy).flat_map(move |y| (0..size.ox).map(move |x| (bx + x, by + y, bk + k))))
}

/// Words a reshuffle buffer holds when producer output tiles are written
/// until everything buffered drains as whole read groups with nothing left
/// over. Starts from the tile at the origin and keeps writing every tile
/// that a partially buffered read group still needs.
pub fn simulate_reshuffle_buffer(out_tile: &LayoutFactors, rpd: &LayoutFactors) -> u64 {
    let block_of = |c: Coord, s: &LayoutFactors| (c.0 / s.ox, c.1 / s.oy, c.2 / s.k);
    let mut written: HashSet<Coord> = block_coords((0, 0, 0), out_tile).collect();
    loop {
        let groups: BTreeSet<Coord> = written.iter().map(|&c| block_of(c, rpd)).collect();
        let missing: BTreeSet<Coord> = groups
            .iter()
            .flat_map(|&g| block_coords(g, rpd))
            .filter(|c| !written.contains(c))
            .map(|c| block_of(c, out_tile))
            .collect();
        if missing.is_empty() {
            return written.len() as u64;
        }
        for tile in missing {
            written.extend(block_coords(tile, out_tile));
        }
    }
}

/// One randomized layout instance for checking the analytic port model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCase {
    pub geo: MemoryGeometry,
    pub su: SpatialUnrolling,
    pub bl: BankLayout,
    pub md: MemLayout,
    pub port: LayoutFactors,
    pub extent: LayoutFactors,
}

fn pick<R: Rng, T: Copy>(rng: &mut R, items: &[T]) -> T {
    *items.choose(rng).expect("non-empty choice")
}

pub fn random_case<R: Rng>(rng: &mut R) -> OracleCase {
    let bd_words = pick(rng, &[2u32, 4, 8]);
    let port_banks = pick(rng, &[1u32, 2, 4]);
    let bank_count = pick(rng, &[2u32, 4, 8, 16].map(|b| b.max(port_banks)));
    let geo = MemoryGeometry {
        word_bits: 8,
        bd_bits: bd_words * 8,
        pd_bits: bd_words * port_banks * 8,
        md_bits: bd_words * bank_count * 8,
        size_bytes: u64::from(bd_words * bank_count) * 4096,
    };
    let pd_words = u64::from(geo.pd_words());
    // Output tile of an SU large enough to fill the port.
    let su_tile = loop {
        let e = [rng.gen_range(0..5u32), rng.gen_range(0..5u32), rng.gen_range(0..5u32)];
        let t = LayoutFactors::from_exponents(e);
        if t.product() >= pd_words && t.product() <= 64 * pd_words {
            break t;
        }
    };
    let su = SpatialUnrolling {
        ox: su_tile.ox,
        oy: su_tile.oy,
        k: su_tile.k,
        ..SpatialUnrolling::ONES
    };
    let ports: Vec<LayoutFactors> = LayoutFactors::all_with_product(pd_words)
        .into_iter()
        .filter(|p| p.divides(&su_tile))
        .collect();
    let port = pick(rng, &ports);
    let bl = pick(rng, &LayoutFactors::all_with_product(u64::from(bd_words)));
    let bank_factors = pick(rng, &LayoutFactors::all_with_product(u64::from(bank_count)));
    let md = MemLayout { base: bl, bank_factors };
    let eff = md.effective();
    let scale = LayoutFactors::new(pick(rng, &[1, 2]), pick(rng, &[1, 2]), pick(rng, &[1, 2]));
    let extent = port.zip_with(&eff, |p, m| p.max(m)).zip_with(&scale, |a, b| a * b);
    OracleCase {
        geo,
        su,
        bl,
        md,
        port,
        extent,
    }
}
