//! Network skeletons shipped with the crate, plus the two-layer chain used
//! as the worked layout example.

use crate::hardware::{parse_config, AcceleratorConfig};
use crate::workload::{parse_network, GraphError, NetworkGraph};

pub const BENCHMARKS: [&str; 4] = ["resnet20", "resnet18", "darknet53", "mobilenetv2"];

pub fn benchmark_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "resnet20" => include_str!("../benchmarks/resnet20.json"),
        "resnet18" => include_str!("../benchmarks/resnet18.json"),
        "darknet53" => include_str!("../benchmarks/darknet53.json"),
        "mobilenetv2" => include_str!("../benchmarks/mobilenetv2.json"),
        "two_layer" => TWO_LAYER_NETWORK,
        _ => return None,
    })
}

pub fn benchmark(name: &str) -> Option<Result<NetworkGraph, GraphError>> {
    benchmark_source(name).map(parse_network)
}

/// Two 3x3 convolutions, 8 channels over an 8x8 map, one feeding the other.
pub const TWO_LAYER_NETWORK: &str = include_str!("../benchmarks/two_layer.json");

/// Four-word bank rows, two banks per port, four banks, 16 PEs.
pub const TWO_LAYER_HARDWARE: &str = include_str!("../benchmarks/two_layer_hw.json");

/// Per-SU costs for the two-layer chain. `{OX:4, OY:4}` is the best SU of
/// the first layer and `{OY:4, C:4}` of the second.
pub const TWO_LAYER_COSTS: &str = include_str!("../benchmarks/two_layer_costs.json");

pub fn two_layer_network() -> NetworkGraph {
    parse_network(TWO_LAYER_NETWORK).expect("shipped network parses")
}

pub fn two_layer_hardware() -> AcceleratorConfig {
    parse_config(TWO_LAYER_HARDWARE).expect("shipped hardware parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_graphs_parse_and_stay_small() {
        for name in BENCHMARKS {
            let g = benchmark(name).unwrap().unwrap();
            assert!(g.len() <= 25, "{name} has {} layers", g.len());
            assert!(!g.edges().is_empty());
            assert!(g.producer_groups().iter().any(|(_, c)| c.len() > 1), "{name} has no skip edge");
        }
        assert!(benchmark("vgg").is_none());
    }

    #[test]
    fn two_layer_pieces() {
        let g = two_layer_network();
        assert_eq!(g.len(), 2);
        let hw = two_layer_hardware();
        assert_eq!(hw.act_mem.bd_words(), 4);
        assert_eq!(hw.act_mem.port_banks(), 2);
        assert_eq!(hw.act_mem.bank_count(), 4);
        assert_eq!(hw.pe_count(), 16);
    }
}
