//! Data layouts at bank-row, port and memory-row granularity, plus the
//! compatibility checks between layouts and spatial unrollings.

use serde::{Deserialize, Serialize};

use crate::factors::{LayoutDim, LayoutFactors};
use crate::hardware::MemoryGeometry;
use crate::layermapper::{SUPool, SpatialUnrolling};
use crate::workload::{Layer, NetworkGraph};

/// Words grouped inside one bank row. Product equals `bd_words`.
pub type BankLayout = LayoutFactors;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortKind {
    Write,
    Read,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PortLayout {
    pub kind: PortKind,
    pub factors: LayoutFactors,
}

impl PortLayout {
    pub fn write(factors: LayoutFactors) -> Self {
        PortLayout {
            kind: PortKind::Write,
            factors,
        }
    }

    pub fn read(factors: LayoutFactors) -> Self {
        PortLayout {
            kind: PortKind::Read,
            factors,
        }
    }
}

/// A bank layout spread over all banks: `bank_factors` multiplies to the
/// bank count and selects which bank a bank-row chunk lands in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemLayout {
    pub base: BankLayout,
    pub bank_factors: LayoutFactors,
}

impl MemLayout {
    pub fn effective(&self) -> LayoutFactors {
        self.base.zip_with(&self.bank_factors, |a, b| a * b)
    }

    /// Recovers the bank split from an effective memory-row layout.
    pub fn from_effective(base: BankLayout, effective: LayoutFactors) -> Option<Self> {
        base.divides(&effective).then(|| MemLayout {
            base,
            bank_factors: effective.zip_with(&base, |a, b| a / b),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Producer,
    Consumer,
}

pub fn enumerate_bank_layouts(geo: &MemoryGeometry) -> Vec<BankLayout> {
    LayoutFactors::all_with_product(u64::from(geo.bd_words()))
}

/// Parallel words an SU touches per cycle in the given role, in producer
/// output dimensions.
pub fn role_tile(su: &SpatialUnrolling, role: Role, layer: &Layer) -> LayoutFactors {
    match role {
        Role::Producer => su.output_tile(),
        Role::Consumer => su.input_tile(layer),
    }
}

pub fn su_supports_bank_layout(su: &SpatialUnrolling, role: Role, layer: &Layer, bl: &BankLayout) -> bool {
    bl.divides(&role_tile(su, role, layer))
}

/// Per-layer indices of pool entries that can work with `bl` in every role
/// the layer plays. Layers without edges are unconstrained.
pub fn surviving_indices(pools: &[SUPool], graph: &NetworkGraph, bl: &BankLayout) -> Vec<Vec<usize>> {
    (0..graph.len())
        .map(|l| {
            let layer = graph.layer(l);
            let produces = !graph.consumers_of(l).is_empty();
            let consumes = !graph.producers_of(l).is_empty();
            pools[l]
                .results
                .iter()
                .enumerate()
                .filter(|(_, r)| {
                    (!produces || su_supports_bank_layout(&r.su, Role::Producer, layer, bl))
                        && (!consumes || su_supports_bank_layout(&r.su, Role::Consumer, layer, bl))
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Bank layouts under which every layer keeps at least one SU, with the
/// surviving pool indices per layer.
pub fn valid_bank_layouts(
    pools: &[SUPool],
    graph: &NetworkGraph,
    geo: &MemoryGeometry,
) -> Vec<(BankLayout, Vec<Vec<usize>>)> {
    enumerate_bank_layouts(geo)
        .into_iter()
        .map(|bl| (bl, surviving_indices(pools, graph, &bl)))
        .filter(|(_, keep)| keep.iter().all(|k| !k.is_empty()))
        .collect()
}

/// Factor triples with product `pd_words` sandwiched between `bl` and `tile`.
pub fn port_candidates(tile: &LayoutFactors, bl: &BankLayout, geo: &MemoryGeometry) -> Vec<LayoutFactors> {
    LayoutFactors::all_with_product(u64::from(geo.pd_words()))
        .into_iter()
        .filter(|p| bl.divides(p) && p.divides(tile))
        .collect()
}

pub fn wpd_candidates(su: &SpatialUnrolling, bl: &BankLayout, geo: &MemoryGeometry) -> Vec<PortLayout> {
    port_candidates(&su.output_tile(), bl, geo)
        .into_iter()
        .map(PortLayout::write)
        .collect()
}

pub fn rpd_candidates(su: &SpatialUnrolling, layer: &Layer, bl: &BankLayout, geo: &MemoryGeometry) -> Vec<PortLayout> {
    port_candidates(&su.input_tile(layer), bl, geo)
        .into_iter()
        .map(PortLayout::read)
        .collect()
}

pub fn enumerate_md_layouts(bl: &BankLayout, geo: &MemoryGeometry) -> Vec<MemLayout> {
    LayoutFactors::all_with_product(u64::from(geo.bank_count()))
        .into_iter()
        .map(|bank_factors| MemLayout {
            base: *bl,
            bank_factors,
        })
        .collect()
}

pub fn md_contains(md: &MemLayout, p: &PortLayout) -> bool {
    p.factors.divides(&md.effective())
}

/// Doubles factors of `start` in fill order until the product reaches
/// `total`, staying within each stage's limits before moving to the next.
/// Whatever is left lands on K.
pub fn grow(start: LayoutFactors, total: u64, stages: &[LayoutFactors]) -> LayoutFactors {
    let mut f = start;
    for limit in stages {
        for dim in LayoutDim::FILL_ORDER {
            while f.product() < total && f.get(dim) < limit.get(dim) {
                f.set(dim, f.get(dim) * 2);
            }
        }
    }
    while f.product() < total {
        f.k *= 2;
    }
    f
}

/// Power-of-two extents of a layer's output tensor.
pub fn tensor_extent(layer: &Layer) -> LayoutFactors {
    let d = &layer.dims;
    LayoutFactors::new(
        d.ox.next_power_of_two(),
        d.oy.next_power_of_two(),
        d.k.next_power_of_two(),
    )
}

/// Layout a memory-unaware flow would give a tensor: the producer's output
/// order packed greedily into a bank row, then the port, then the memory row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NaturalLayout {
    pub bl: BankLayout,
    pub wpd: LayoutFactors,
    pub md: MemLayout,
}

pub fn natural_layout(producer: &Layer, su: &SpatialUnrolling, geo: &MemoryGeometry) -> NaturalLayout {
    let stages = [su.output_tile(), tensor_extent(producer)];
    let bl = grow(LayoutFactors::ONES, u64::from(geo.bd_words()), &stages);
    let wpd = grow(bl, u64::from(geo.pd_words()), &stages);
    let eff = grow(wpd, u64::from(geo.md_words()), &stages);
    let md = MemLayout::from_effective(bl, eff).expect("grown layouts nest");
    NaturalLayout { bl, wpd, md }
}

/// Read pattern a consumer SU naturally issues on a producer's tensor.
pub fn natural_rpd(consumer: &Layer, su: &SpatialUnrolling, producer: &Layer, geo: &MemoryGeometry) -> LayoutFactors {
    grow(
        LayoutFactors::ONES,
        u64::from(geo.pd_words()),
        &[su.input_tile(consumer), tensor_extent(producer)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layermapper::{CostSource, LayerwiseResult, Metric};
    use crate::workload::{LayerDims, LayerKind};
    use proptest::prelude::*;

    fn geo(bd: u32, pd: u32, md: u32) -> MemoryGeometry {
        MemoryGeometry {
            word_bits: 8,
            bd_bits: bd * 8,
            pd_bits: pd * 8,
            md_bits: md * 8,
            size_bytes: 1 << 16,
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

    fn conv(id: &str) -> Layer {
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
        .unwrap()
    }

    #[test]
    fn bank_layouts_for_four_words() {
        let got = enumerate_bank_layouts(&geo(4, 8, 16));
        assert_eq!(
            got,
            vec![f(4, 1, 1), f(1, 4, 1), f(1, 1, 4), f(2, 2, 1), f(2, 1, 2), f(1, 2, 2)]
        );
        assert_eq!(enumerate_bank_layouts(&geo(1, 2, 4)), vec![LayoutFactors::ONES]);
    }

    #[test]
    fn support_follows_two_layer_example() {
        let l = conv("x");
        assert!(su_supports_bank_layout(&su(4, 4, 1, 1), Role::Producer, &l, &f(1, 4, 1)));
        assert!(!su_supports_bank_layout(&su(1, 4, 1, 4), Role::Consumer, &l, &f(4, 1, 1)));
        assert!(su_supports_bank_layout(&su(1, 4, 1, 4), Role::Consumer, &l, &f(1, 4, 1)));
        assert!(su_supports_bank_layout(&SpatialUnrolling::ONES, Role::Consumer, &l, &LayoutFactors::ONES));
    }

    fn pool(id: &str, sus: &[SpatialUnrolling]) -> SUPool {
        SUPool::new(
            id.into(),
            Metric::Energy,
            CostSource::Imported,
            sus.iter().map(|s| LayerwiseResult::new(*s, 1.0, 1.0)).collect(),
        )
    }

    #[test]
    fn valid_layouts_for_two_layer_chain() {
        let g = NetworkGraph::new(vec![conv("a"), conv("b")], &[("a".into(), "b".into())]).unwrap();
        let pools = vec![pool("a", &[su(4, 4, 1, 1)]), pool("b", &[su(1, 4, 1, 4)])];
        let valid: Vec<_> = valid_bank_layouts(&pools, &g, &geo(4, 8, 16)).into_iter().map(|(bl, _)| bl).collect();
        assert!(valid.contains(&f(1, 4, 1)));
        assert!(!valid.contains(&f(4, 1, 1)));
    }

    #[test]
    fn single_layer_unconstrained() {
        let g = NetworkGraph::new(vec![conv("a")], &[]).unwrap();
        let pools = vec![pool("a", &[su(1, 1, 1, 1)])];
        assert_eq!(valid_bank_layouts(&pools, &g, &geo(4, 8, 16)).len(), 6);
    }

    #[test]
    fn port_candidates_examples() {
        let g = geo(4, 8, 16);
        let w = wpd_candidates(&su(4, 4, 1, 1), &f(1, 4, 1), &g);
        assert!(w.iter().any(|p| p.factors == f(2, 4, 1)));
        let same = geo(4, 4, 16);
        assert_eq!(
            wpd_candidates(&su(4, 4, 1, 1), &f(1, 4, 1), &same),
            vec![PortLayout::write(f(1, 4, 1))]
        );
        let l = conv("x");
        let r = rpd_candidates(&su(1, 4, 1, 4), &l, &f(1, 4, 1), &g);
        assert!(r.iter().any(|p| p.factors == f(1, 4, 2)));
        assert_eq!(
            rpd_candidates(&su(1, 4, 1, 4), &l, &f(1, 4, 1), &same),
            vec![PortLayout::read(f(1, 4, 1))]
        );
    }

    #[test]
    fn wpd_matches_brute_force() {
        let g = geo(2, 8, 32);
        let s = su(4, 4, 2, 1);
        let bl = f(1, 2, 1);
        let mut expect = Vec::new();
        for ox in [1, 2, 4, 8] {
            for oy in [1, 2, 4, 8] {
                for k in [1, 2, 4, 8] {
                    if ox * oy * k == 8 && ox <= 4 && oy <= 4 && k <= 2 && oy % 2 == 0 {
                        expect.push(f(ox, oy, k));
                    }
                }
            }
        }
        let mut got: Vec<_> = wpd_candidates(&s, &bl, &g).into_iter().map(|p| p.factors).collect();
        got.sort();
        expect.sort();
        assert_eq!(got, expect);
    }

    #[test]
    fn strided_consumer_dilates_read_tile() {
        let mut l = conv("s");
        l.dims.stride = 2;
        let g = geo(4, 8, 16);
        let r = rpd_candidates(&su(2, 2, 1, 2), &l, &f(4, 1, 1), &g);
        // OXu = 2 at stride 2 spans four input columns.
        assert!(r.iter().all(|p| p.factors.ox == 4));
        assert!(!r.is_empty());
    }

    #[test]
    fn md_layouts_and_containment() {
        let g = geo(4, 8, 16);
        let mds = enumerate_md_layouts(&f(1, 4, 1), &g);
        let target = mds.iter().find(|m| m.bank_factors == f(2, 1, 2)).unwrap();
        assert_eq!(target.effective().to_string(), "[OY:4, OX:2, K:2]");
        assert!(md_contains(target, &PortLayout::write(f(2, 4, 1))));
        assert!(md_contains(target, &PortLayout::read(f(1, 4, 2))));
        let wide = MemLayout {
            base: f(1, 4, 1),
            bank_factors: f(4, 1, 1),
        };
        assert!(!md_contains(&wide, &PortLayout::read(f(1, 4, 2))));
        assert_eq!(enumerate_md_layouts(&f(1, 4, 1), &geo(4, 4, 4)).len(), 1);
        assert_eq!(enumerate_md_layouts(&f(1, 4, 1), &geo(4, 8, 64)).len(), 15);
        let mut brute = 0;
        for a in [1, 2, 4, 8, 16] {
            for b in [1, 2, 4, 8, 16] {
                for c in [1, 2, 4, 8, 16] {
                    if a * b * c == 16 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(brute, 15);
    }

    #[test]
    fn natural_layouts_for_two_layer_example() {
        let g = geo(4, 8, 16);
        let nat = natural_layout(&conv("a"), &su(4, 4, 1, 1), &g);
        assert_eq!(nat.bl, f(4, 1, 1));
        assert_eq!(nat.wpd, f(4, 2, 1));
        assert_eq!(nat.md.bank_factors, f(1, 4, 1));
        assert_eq!(natural_rpd(&conv("b"), &su(1, 4, 1, 4), &conv("a"), &g), f(1, 4, 2));
    }

    proptest! {
        #[test]
        fn candidates_contain_bank_layout(eo in 0u32..4, ey in 0u32..4, ek in 0u32..4, bl_idx in 0usize..6) {
            let g = geo(4, 16, 64);
            let bl = enumerate_bank_layouts(&g)[bl_idx];
            let s = su(1 << eo, 1 << ey, 1 << ek, 1);
            let cands = wpd_candidates(&s, &bl, &g);
            for p in &cands {
                prop_assert!(bl.divides(&p.factors));
                prop_assert_eq!(p.factors.product(), 16);
            }
            if su_supports_bank_layout(&s, Role::Producer, &conv("x"), &bl) && s.output_tile().product() >= 16 {
                prop_assert!(!cands.is_empty());
            }
        }

        #[test]
        fn containment_monotone_in_bank_factors(e in prop::array::uniform3(0u32..3), p in prop::array::uniform3(0u32..3), grow_dim in 0usize..3) {
            let md = MemLayout { base: LayoutFactors::ONES, bank_factors: LayoutFactors::from_exponents(e) };
            let port = PortLayout::read(LayoutFactors::from_exponents(p));
            let mut bigger = md;
            let dim = LayoutDim::FILL_ORDER[grow_dim];
            bigger.bank_factors.set(dim, md.bank_factors.get(dim) * 2);
            prop_assert!(!md_contains(&md, &port) || md_contains(&bigger, &port));
        }
    }
}
