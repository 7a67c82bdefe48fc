//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use memsched::banksim::{measure_port, random_case, simulate_reshuffle_buffer};
use memsched::benchmarks::{benchmark, two_layer_hardware, two_layer_network, BENCHMARKS, TWO_LAYER_COSTS};
use memsched::costmodel::{
    bank_eff, compare_scenarios, naive_schedule, pd_eff, reshuffle_buffer_regs, reshuffle_scenario, word_eff, Scenario,
};
use memsched::crosslayer::{
    chain_combinations, schedule_network, select_best, ChainProblem, ChainStream, GroupTable, Objective, ScheduleDoc,
    ScheduleOptions, StaticCost,
};
use memsched::layermapper::{
    build_pools, import_layerwise_results, layer_breakdown, prune_su_pool, CostSource, LayerwiseResult, PortAdjust,
    PruningConfig, SUPool, StreamPort,
};
use memsched::layout::MemLayout;
use memsched::report::{CompareEntry, CompareReport, RunManifest, ScheduleReport};
use memsched::{AcceleratorConfig, Layer, LayerDims, LayerKind, LayoutFactors, MemoryGeometry, Metric, NetworkGraph, SpatialUnrolling};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    if t > budget {
        Err(format!("{what} took {t:.2?}, budget {budget:?}"))
    } else {
        Ok(())
    }
}

fn f(ox: u32, oy: u32, k: u32) -> LayoutFactors {
    LayoutFactors::new(ox, oy, k)
}

fn su(ox: u32, oy: u32, k: u32, c: u32) -> SpatialUnrolling {
    SpatialUnrolling {
        ox,
        oy,
        k,
        c,
        ..SpatialUnrolling::ONES
    }
}

// Criterion 1: the two-layer chain with a four-word bank row.
fn two_layer_layouts() -> Outcome {
    let start = Instant::now();
    let graph = two_layer_network();
    let hw = two_layer_hardware();
    let geo = hw.act_mem;
    ensure!(
        (geo.bd_words(), geo.port_banks(), geo.bank_count()) == (4, 2, 4),
        "unexpected geometry {geo:?}"
    );
    let pools = import_layerwise_results(TWO_LAYER_COSTS, &graph, &hw, Metric::Edp).map_err(|e| e.to_string())?;
    let su1 = su(4, 4, 1, 1);
    let su2 = su(1, 4, 1, 4);
    ensure!(pools[0].best().su == su1 && pools[1].best().su == su2, "layer-wise optima differ from the example");

    // Memory-unaware flow: the tensor lands grouped along OX.
    let naive = naive_schedule(&graph, &pools, &geo);
    let case1 = naive.tensors[0].md;
    ensure!(case1.base == f(4, 1, 1), "naive bank layout is {}", case1.base);
    let rpd = naive.edges[0].rpd;
    let read1 = pd_eff(&case1.base, &rpd, &case1, &geo);
    ensure!(read1.word_eff == 1, "case 1 word_eff = {}", read1.word_eff);

    // Case 2: grouped along OY with the memory layout of the example.
    let case2 = MemLayout::from_effective(f(1, 4, 1), f(2, 4, 2)).ok_or("case 2 layout not constructible")?;
    let rpd2 = f(1, 4, 2);
    let wpd2 = f(2, 4, 1);
    let read2 = pd_eff(&case2.base, &rpd2, &case2, &geo);
    let write2 = pd_eff(&case2.base, &wpd2, &case2, &geo);
    ensure!(read2.pd_eff == 1.0 && write2.pd_eff == 1.0, "case 2 pd_eff {} / {}", read2.pd_eff, write2.pd_eff);

    let port = |read: StreamPort| PortAdjust {
        read,
        write: StreamPort::ideal(&geo),
    };
    let rows1 = layer_breakdown(graph.layer(1), &su2, &hw, Some(&port(read1.stream()))).read_rows;
    let rows2 = layer_breakdown(graph.layer(1), &su2, &hw, Some(&port(read2.stream()))).read_rows;
    ensure!(rows1 == 4 * rows2, "read row activations {rows1} vs {rows2}, expected exactly 4x");

    let out = schedule_network(&graph, &pools, &hw, &ScheduleOptions::default()).map_err(|e| e.to_string())?;
    let t = &out.schedule.tensors[0];
    ensure!(out.schedule.bank_layout == Some(f(1, 4, 1)), "scheduler chose {:?}", out.schedule.bank_layout);
    ensure!(t.md.effective() == f(2, 4, 2), "scheduler memory layout {}", t.md.effective());
    let sel_read = out.schedule.read_port(&out.schedule.edges[0], &geo);
    ensure!(sel_read.pd_eff == 1.0, "selected read pd_eff {}", sel_read.pd_eff);
    within(start, Duration::from_secs(1), "two-layer check")?;
    Ok(format!(
        "case 1 word_eff=1, read rows {rows1} = 4 x {rows2}; case 2 pd_eff=1.0 selected as {} with MD {}",
        f(1, 4, 1),
        t.md.effective()
    ))
}

// Criterion 2: analytic port model against the bank simulator.
fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 600;
    for i in 0..cases {
        let c = random_case(&mut rng);
        ensure!(
            (2..=16).contains(&c.geo.bank_count()) && [2, 4, 8].contains(&c.geo.bd_words()) && [1, 2, 4].contains(&c.geo.port_banks()),
            "case {i} outside the sampled geometry range"
        );
        let (m, _) = measure_port(&c.md, &c.port, &c.extent, &c.geo).map_err(|e| format!("case {i}: {e}"))?;
        let w = word_eff(&c.bl, &c.port);
        let b = bank_eff(&c.bl, &c.port, &c.md, &c.geo);
        ensure!(m.words_per_row == Some(w), "case {i}: words/row {:?} vs {w} ({c:?})", m.words_per_row);
        ensure!(m.banks_per_access == Some(b), "case {i}: banks {:?} vs {b} ({c:?})", m.banks_per_access);
        // Rational pd_eff equality without division.
        ensure!(
            m.useful_words == m.transactions * u64::from(w * b),
            "case {i}: {} useful words over {} transactions",
            m.useful_words,
            m.transactions
        );
    }
    within(start, Duration::from_secs(60), "oracle cases")?;
    Ok(format!("{cases} seeded cases, exact word/bank/pd_eff agreement"))
}

fn random_pool<R: Rng>(rng: &mut R, id: &str, metric: Metric, size: usize) -> SUPool {
    let mut sus: Vec<SpatialUnrolling> = Vec::new();
    for ox in [1, 2, 4] {
        for oy in [1, 2, 4] {
            for k in [1, 2, 4] {
                for c in [1, 2, 4] {
                    sus.push(su(ox, oy, k, c));
                }
            }
        }
    }
    sus.shuffle(rng);
    let results = sus[..size]
        .iter()
        .map(|&s| LayerwiseResult::new(s, f64::from(rng.gen_range(1..200u32)), f64::from(rng.gen_range(1..200u32))))
        .collect();
    SUPool::new(id.to_string(), metric, CostSource::Imported, results)
}

// Criterion 3: threshold pruning against a direct filter.
fn pruning_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let thetas = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 4.0];
    let mut checked = 0;
    for trial in 0..300 {
        let metric = [Metric::Energy, Metric::Latency, Metric::Edp][trial % 3];
        let layers = rng.gen_range(1..8);
        let pools: Vec<SUPool> = (0..layers)
            .map(|l| {
                let size = rng.gen_range(1..20);
                random_pool(&mut rng, &format!("l{l}"), metric, size)
            })
            .collect();
        let value = |r: &LayerwiseResult| match metric {
            Metric::Energy => r.energy_pj,
            Metric::Latency => r.latency_cycles,
            Metric::Edp => r.energy_pj * r.latency_cycles,
        };
        let mins: Vec<f64> = pools
            .iter()
            .map(|p| p.results.iter().map(value).fold(f64::INFINITY, f64::min))
            .collect();
        let ideal: f64 = mins.iter().sum();
        let mut previous: Option<Vec<BTreeSet<SpatialUnrolling>>> = None;
        for &theta in &thetas {
            let pruned = prune_su_pool(&pools, &PruningConfig::new(theta, metric, &pools));
            let kept: Vec<BTreeSet<SpatialUnrolling>> = pruned.iter().map(|p| p.results.iter().map(|r| r.su).collect()).collect();
            for (l, p) in pools.iter().enumerate() {
                let expect: BTreeSet<SpatialUnrolling> = p
                    .results
                    .iter()
                    .filter(|r| (value(r) - mins[l]) / ideal <= theta)
                    .map(|r| r.su)
                    .collect();
                ensure!(kept[l] == expect, "trial {trial} layer {l} theta {theta}: retained set differs");
                ensure!(
                    p.results.iter().filter(|r| value(r) == mins[l]).all(|r| kept[l].contains(&r.su)),
                    "trial {trial}: layer optimum dropped at theta {theta}"
                );
            }
            if let Some(prev) = &previous {
                ensure!(
                    prev.iter().zip(&kept).all(|(a, b)| a.is_subset(b)),
                    "trial {trial}: retained sets shrink when theta grows to {theta}"
                );
            }
            previous = Some(kept);
            checked += 1;
        }
    }
    within(start, Duration::from_secs(10), "pruning checks")?;
    Ok(format!("{checked} (pool set, theta) cases match the direct filter; monotone; optima kept"))
}

fn small_conv(id: &str) -> Layer {
    Layer::new(
        id,
        LayerKind::Conv,
        LayerDims {
            b: 1,
            k: 8,
            c: 8,
            ox: 8,
            oy: 8,
            fx: 3,
            fy: 3,
            stride: 1,
            word_bits: 8,
        },
    )
    .expect("valid layer")
}

fn random_dag<R: Rng>(rng: &mut R) -> NetworkGraph {
    let n = rng.gen_range(2..=6);
    let layers: Vec<Layer> = (0..n).map(|i| small_conv(&format!("n{i}"))).collect();
    let mut edges = BTreeSet::new();
    for j in 1..n {
        edges.insert((rng.gen_range(0..j), j));
        if j >= 2 && rng.gen_bool(0.3) {
            edges.insert((rng.gen_range(0..j), j));
        }
    }
    let edges: Vec<(String, String)> = edges.into_iter().map(|(a, b)| (format!("n{a}"), format!("n{b}"))).collect();
    NetworkGraph::new(layers, &edges).expect("random DAG is valid")
}

/// A port of `pd_words` words between the bank layout and the SU's tile that
/// also fits inside the memory layout.
fn fits(tile: &LayoutFactors, bl: &LayoutFactors, md_eff: &LayoutFactors, geo: &MemoryGeometry) -> bool {
    LayoutFactors::all_with_product(u64::from(geo.pd_words()))
        .iter()
        .any(|p| bl.divides(p) && p.divides(tile) && p.divides(md_eff))
}

fn tuple_valid(graph: &NetworkGraph, pools: &[SUPool], tuple: &[usize], bl: &LayoutFactors, geo: &MemoryGeometry) -> bool {
    (0..graph.len()).all(|p| {
        let consumers = graph.consumers_of(p);
        if consumers.is_empty() {
            return true;
        }
        LayoutFactors::all_with_product(u64::from(geo.bank_count())).iter().any(|bf| {
            let eff = bl.zip_with(bf, |a, b| a * b);
            fits(&pools[p].results[tuple[p]].su.output_tile(), bl, &eff, geo)
                && consumers
                    .iter()
                    .all(|&c| fits(&pools[c].results[tuple[c]].su.input_tile(graph.layer(c)), bl, &eff, geo))
        })
    })
}

fn all_tuples(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &s in sizes {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..s).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

// Criterion 4: tuple enumeration and selection against exhaustive search.
fn join_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let geo = MemoryGeometry {
        word_bits: 8,
        bd_bits: 16,
        pd_bits: 32,
        md_bits: 64,
        size_bytes: 4096,
    };
    let (mut graphs, mut nonempty, mut tuples_seen) = (0, 0, 0usize);
    for trial in 0..400 {
        let graph = random_dag(&mut rng);
        let pools: Vec<SUPool> = (0..graph.len())
            .map(|l| {
                let size = rng.gen_range(1..=4);
                random_pool(&mut rng, &graph.layer(l).id, Metric::Energy, size)
            })
            .collect();
        let bl = *LayoutFactors::all_with_product(u64::from(geo.bd_words())).choose(&mut rng).unwrap();
        let domains: Vec<Vec<usize>> = pools.iter().map(|p| (0..p.len()).collect()).collect();
        let tables: Vec<Option<GroupTable>> = (0..graph.len())
            .map(|l| (!graph.consumers_of(l).is_empty()).then(|| GroupTable::build(&graph, l, &pools, &domains, &bl, &geo)))
            .collect();
        let problem = ChainProblem::new(&graph, &pools, &domains, &tables);
        let mut got: Vec<Vec<usize>> = chain_combinations(&problem).map(|c| c.pool_indices).collect();
        got.sort();
        let sizes: Vec<usize> = pools.iter().map(SUPool::len).collect();
        let expect: Vec<Vec<usize>> = all_tuples(&sizes)
            .into_iter()
            .filter(|t| tuple_valid(&graph, &pools, t, &bl, &geo))
            .collect();
        ensure!(got == expect, "trial {trial}: {} tuples enumerated, {} valid", got.len(), expect.len());
        graphs += 1;
        tuples_seen += expect.len();
        if expect.is_empty() {
            continue;
        }
        nonempty += 1;
        for metric in [Metric::Energy, Metric::Latency, Metric::Edp] {
            let best = expect
                .iter()
                .map(|t| {
                    let (e, l) = t.iter().enumerate().fold((0.0, 0.0), |(e, l), (layer, &i)| {
                        let r = &pools[layer].results[i];
                        (e + r.energy_pj, l + r.latency_cycles)
                    });
                    metric.value(e, l)
                })
                .fold(f64::INFINITY, f64::min);
            let stream = ChainStream::new(&problem, &StaticCost, Objective::Metric(metric), u64::MAX);
            let sel = select_best(stream, metric, u64::MAX).ok_or(format!("trial {trial}: no selection"))?;
            ensure!(sel.value == best, "trial {trial} {metric}: selected {} vs exhaustive {best}", sel.value);
        }
    }
    within(start, Duration::from_secs(30), "join checks")?;
    Ok(format!(
        "{graphs} random DAGs ({nonempty} feasible, {tuples_seen} valid tuples) match exhaustive filtering and minima"
    ))
}

// Criterion 5: scheduled cost never above the naive flow, with one large gap.
fn dominance() -> Outcome {
    let start = Instant::now();
    let mut worst = (1.0f64, String::new());
    let mut gaps = Vec::new();
    for name in BENCHMARKS {
        let graph = benchmark(name).unwrap().map_err(|e| e.to_string())?;
        for preset in AcceleratorConfig::PRESETS {
            let hw = AcceleratorConfig::preset(preset).unwrap();
            let pools = build_pools(&graph, &hw, Metric::Edp);
            let cmp = compare_scenarios(&graph, &pools, &hw, &ScheduleOptions::default()).map_err(|e| e.to_string())?;
            let naive = cmp.scenario(Scenario::NaiveNoReshuffle);
            let cmds = cmp.scenario(Scenario::Cmds);
            // Equal evaluations may differ in the last bits of a float sum.
            let tol = 1.0 + 1e-9;
            ensure!(
                cmds.energy_pj <= naive.energy_pj * tol && cmds.latency_cycles <= naive.latency_cycles * tol,
                "{name}/{preset}: cmds ({}, {}) above naive ({}, {})",
                cmds.energy_pj,
                cmds.latency_cycles,
                naive.energy_pj,
                naive.latency_cycles
            );
            let gap = naive.energy_pj / cmds.energy_pj;
            if gap > worst.0 {
                worst = (gap, format!("{name}/{preset}"));
            }
            gaps.push(gap);
        }
    }
    ensure!(worst.0 >= 2.0, "largest naive/cmds energy gap {:.3} at {}", worst.0, worst.1);
    within(start, Duration::from_secs(300), "dominance sweep")?;
    Ok(format!(
        "{} pairs dominated (tolerance 1e-9 relative); largest energy gap {:.2}x at {}",
        gaps.len(),
        worst.0,
        worst.1
    ))
}

// Criterion 6: register count formula against a buffering simulation.
fn buffer_size() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let pow = |rng: &mut ChaCha8Rng, max: u32| 1u32 << rng.gen_range(0..=max);
    let pairs = 300;
    for i in 0..pairs {
        let s = su(pow(&mut rng, 4), pow(&mut rng, 4), pow(&mut rng, 4), pow(&mut rng, 2));
        let rpd = f(pow(&mut rng, 3), pow(&mut rng, 3), pow(&mut rng, 3));
        let formula = reshuffle_buffer_regs(&s, &rpd);
        let simulated = simulate_reshuffle_buffer(&s.output_tile(), &rpd);
        ensure!(formula == simulated, "pair {i}: {s} vs {rpd}: formula {formula}, simulation {simulated}");
    }
    let mut networks = 0;
    for name in BENCHMARKS {
        let graph = benchmark(name).unwrap().map_err(|e| e.to_string())?;
        for preset in AcceleratorConfig::PRESETS {
            let hw = AcceleratorConfig::preset(preset).unwrap();
            let pools = build_pools(&graph, &hw, Metric::Edp);
            let naive = naive_schedule(&graph, &pools, &hw.act_mem);
            let size = reshuffle_scenario(&graph, &naive, &hw).buffer_regs;
            let max = naive
                .edges
                .iter()
                .map(|e| simulate_reshuffle_buffer(&naive.layers[e.producer].su.output_tile(), &e.rpd))
                .max()
                .unwrap_or(0);
            ensure!(size == max, "{name}/{preset}: network size {size}, pairwise simulated max {max}");
            networks += 1;
        }
    }
    within(start, Duration::from_secs(30), "buffer checks")?;
    Ok(format!("{pairs} random pairs exact; network size equals pairwise max on {networks} networks"))
}

// Criterion 7: pruning leverage and end-to-end runtime on the ResNet20-like graph.
fn pruning_leverage() -> Outcome {
    let graph = benchmark("resnet20").unwrap().map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for preset in AcceleratorConfig::PRESETS {
        let start = Instant::now();
        let hw = AcceleratorConfig::preset(preset).unwrap();
        let pools = build_pools(&graph, &hw, Metric::Edp);
        let cmp = compare_scenarios(&graph, &pools, &hw, &ScheduleOptions::default()).map_err(|e| e.to_string())?;
        let manifest = manifest("resnet20", preset);
        let report = ScheduleReport::new(manifest, &graph, &cmp).to_json();
        let doc = ScheduleDoc::new(&graph, &cmp.outcome.schedule, &hw).to_json();
        ensure!(!report.is_empty() && !doc.is_empty(), "empty output");
        let stats = &cmp.outcome.stats;
        let log_reduction = stats.log10_unpruned - stats.log10_pruned;
        ensure!(log_reduction >= 1.0, "{preset}: reduction only 10^{log_reduction:.2}");
        within(start, Duration::from_secs(60), &format!("resnet20 on {preset}"))?;
        parts.push(format!("{preset} 10^{log_reduction:.1} in {:.1?}", start.elapsed()));
    }
    Ok(format!("theta 0.1 reductions (floor 10x, 60 s each): {}", parts.join(", ")))
}

fn manifest(network: &str, hardware: &str) -> RunManifest {
    RunManifest {
        network: network.into(),
        hardware: hardware.into(),
        theta: 0.1,
        metric: Metric::Edp,
        beam: ScheduleOptions::default().beam,
        seed: 0,
        out: "out".into(),
        costs: None,
        fallback: true,
    }
}

fn run_outputs(network: &str, preset: &str) -> Result<Vec<String>, String> {
    let graph = benchmark(network).unwrap().map_err(|e| e.to_string())?;
    let hw = AcceleratorConfig::preset(preset).unwrap();
    let pools = build_pools(&graph, &hw, Metric::Edp);
    let cmp = compare_scenarios(&graph, &pools, &hw, &ScheduleOptions::default()).map_err(|e| e.to_string())?;
    let report = ScheduleReport::new(manifest(network, preset), &graph, &cmp);
    let compare = CompareReport::new(
        manifest(network, preset),
        &[CompareEntry {
            network: network.into(),
            hardware: preset.into(),
            comparison: &cmp,
        }],
    );
    Ok(vec![
        ScheduleDoc::new(&graph, &cmp.outcome.schedule, &hw).to_json(),
        report.to_json(),
        report.to_text(),
        compare.to_json(),
        compare.to_text(),
        compare.to_csv(),
    ])
}

// Criterion 8: identical runs give identical bytes.
fn reproducibility() -> Outcome {
    let mut files = 0;
    for (network, preset) in [("mobilenetv2", "proposed"), ("resnet18", "vlsi21")] {
        let a = run_outputs(network, preset)?;
        let b = run_outputs(network, preset)?;
        ensure!(a == b, "{network}/{preset}: outputs differ between runs");
        files += a.len();
    }
    Ok(format!("{files} schedule/report files byte-identical across two runs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("two-layer layout example", two_layer_layouts),
        ("analytic port model vs simulator", oracle_equivalence),
        ("pruning soundness", pruning_soundness),
        ("cross-layer join correctness", join_correctness),
        ("dominance over the naive flow", dominance),
        ("reshuffle buffer size", buffer_size),
        ("pruning leverage", pruning_leverage),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let t = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({t:.2?}) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({t:.2?}) {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
