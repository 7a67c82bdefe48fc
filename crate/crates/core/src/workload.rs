//! Network graphs: layers with seven-dimensional loop bounds and the
//! producer/consumer edges between them.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::is_pow2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed network document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },
    #[error("edge {producer} -> {consumer}: {reason}")]
    Edge {
        producer: String,
        consumer: String,
        reason: String,
    },
    #[error("cycle through layer `{0}`")]
    Cycle(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Pointwise,
    Depthwise,
    FullyConnected,
}

/// Loop bounds of one layer. Input extents are derived, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerDims {
    pub b: u32,
    pub k: u32,
    pub c: u32,
    pub ox: u32,
    pub oy: u32,
    pub fx: u32,
    pub fy: u32,
    pub stride: u32,
    pub word_bits: u32,
}

impl LayerDims {
    pub fn ix(&self) -> u32 {
        (self.ox - 1) * self.stride + self.fx
    }

    pub fn iy(&self) -> u32 {
        (self.oy - 1) * self.stride + self.fy
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub dims: LayerDims,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind, dims: LayerDims) -> Result<Self, GraphError> {
        let layer = Layer {
            id: id.into(),
            kind,
            dims,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let fail = |reason: &str| GraphError::Layer {
            layer: self.id.clone(),
            reason: reason.to_string(),
        };
        let d = &self.dims;
        if self.id.is_empty() {
            return Err(fail("empty layer id"));
        }
        if [d.b, d.k, d.c, d.ox, d.oy, d.fx, d.fy, d.stride].contains(&0) {
            return Err(fail("loop bounds and stride must be >= 1"));
        }
        if !is_pow2(u64::from(d.word_bits)) {
            return Err(fail("word_bits must be a power of two"));
        }
        match self.kind {
            LayerKind::Pointwise if d.fx != 1 || d.fy != 1 => {
                Err(fail("pointwise layers need FX = FY = 1"))
            }
            LayerKind::Depthwise if d.k != d.c => Err(fail("depthwise layers need K = C")),
            LayerKind::FullyConnected if d.ox != 1 || d.oy != 1 || d.fx != 1 || d.fy != 1 => {
                Err(fail("fully connected layers need OX = OY = FX = FY = 1"))
            }
            _ => Ok(()),
        }
    }

    /// Multiply-accumulate count of the unpadded loop nest.
    pub fn macs(&self) -> u64 {
        let d = &self.dims;
        let channels = match self.kind {
            LayerKind::Depthwise => u64::from(d.k),
            _ => u64::from(d.k) * u64::from(d.c),
        };
        u64::from(d.b) * channels * u64::from(d.ox) * u64::from(d.oy) * u64::from(d.fx) * u64::from(d.fy)
    }

    /// Output activation count (one tensor word per element).
    pub fn output_words(&self) -> u64 {
        let d = &self.dims;
        u64::from(d.b) * u64::from(d.k) * u64::from(d.ox) * u64::from(d.oy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub producer: usize,
    pub consumer: usize,
}

/// Validated, immutable DAG of layers.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    layers: Vec<Layer>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    topo: Vec<usize>,
    rank: Vec<usize>,
    consumers: Vec<Vec<usize>>,
    producers: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn new(layers: Vec<Layer>, edges: &[(String, String)]) -> Result<Self, GraphError> {
        let mut index = HashMap::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if index.insert(layer.id.clone(), i).is_some() {
                return Err(GraphError::Layer {
                    layer: layer.id.clone(),
                    reason: "duplicate layer id".into(),
                });
            }
        }

        let n = layers.len();
        let mut resolved = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for (p, c) in edges {
            let fail = |reason: &str| GraphError::Edge {
                producer: p.clone(),
                consumer: c.clone(),
                reason: reason.to_string(),
            };
            let pi = *index.get(p).ok_or_else(|| fail("unknown producer"))?;
            let ci = *index.get(c).ok_or_else(|| fail("unknown consumer"))?;
            if pi == ci {
                return Err(fail("self loop"));
            }
            if !seen.insert((pi, ci)) {
                return Err(fail("duplicate edge"));
            }
            check_edge_shapes(&layers[pi], &layers[ci]).map_err(|r| fail(&r))?;
            resolved.push(Edge {
                producer: pi,
                consumer: ci,
            });
        }

        let mut consumers = vec![Vec::new(); n];
        let mut producers = vec![Vec::new(); n];
        for e in &resolved {
            consumers[e.producer].push(e.consumer);
            producers[e.consumer].push(e.producer);
        }

        // Kahn's algorithm, lowest declaration index first for determinism.
        let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(next) = ready.pop_first() {
            topo.push(next);
            for &c in &consumers[next] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
            return Err(GraphError::Cycle(layers[stuck].id.clone()));
        }
        let mut rank = vec![0; n];
        for (r, &l) in topo.iter().enumerate() {
            rank[l] = r;
        }
        for list in consumers.iter_mut().chain(producers.iter_mut()) {
            list.sort_by_key(|&l| rank[l]);
        }

        Ok(NetworkGraph {
            layers,
            edges: resolved,
            index,
            topo,
            rank,
            consumers,
            producers,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Layer indices in topological order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn rank(&self, layer: usize) -> usize {
        self.rank[layer]
    }

    pub fn consumers_of(&self, layer: usize) -> &[usize] {
        &self.consumers[layer]
    }

    pub fn producers_of(&self, layer: usize) -> &[usize] {
        &self.producers[layer]
    }

    /// `(producer, consumers)` for each layer with out-degree >= 1, producers
    /// and consumers both in topological order.
    pub fn producer_groups(&self) -> Vec<(usize, Vec<usize>)> {
        self.topo
            .iter()
            .filter(|&&l| !self.consumers[l].is_empty())
            .map(|&l| (l, self.consumers[l].clone()))
            .collect()
    }

    pub fn dependency_pairs(&self) -> Vec<(&Layer, Vec<&Layer>)> {
        self.producer_groups()
            .into_iter()
            .map(|(p, cs)| (&self.layers[p], cs.iter().map(|&c| &self.layers[c]).collect()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let doc = NetworkDoc {
            layers: self.layers.iter().map(LayerDoc::from).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| (self.layers[e.producer].id.clone(), self.layers[e.consumer].id.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("network serializes")
    }
}

/// Channel and spatial agreement between a producer and one consumer.
///
/// Spatial extents may match either unpadded (`IX = OX_producer`) or with
/// "same" padding (`ceil(OX_producer / stride) = OX_consumer`).
fn check_edge_shapes(producer: &Layer, consumer: &Layer) -> Result<(), String> {
    let p = &producer.dims;
    let c = &consumer.dims;
    if c.c != p.k {
        return Err(format!("consumer C = {} does not match producer K = {}", c.c, p.k));
    }
    if c.b != p.b {
        return Err(format!("batch mismatch ({} vs {})", p.b, c.b));
    }
    let fits = |produced: u32, out: u32, derived_in: u32| {
        produced == derived_in || produced.div_ceil(c.stride) == out
    };
    if !fits(p.ox, c.ox, c.ix()) || !fits(p.oy, c.oy, c.iy()) {
        return Err(format!(
            "consumer input {}x{} does not match producer output {}x{}",
            c.ix(),
            c.iy(),
            p.ox,
            p.oy
        ));
    }
    Ok(())
}

fn one() -> u32 {
    1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    layers: Vec<LayerDoc>,
    #[serde(default)]
    edges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    id: String,
    kind: LayerKind,
    #[serde(rename = "B")]
    b: u32,
    #[serde(rename = "K")]
    k: u32,
    #[serde(rename = "C")]
    c: u32,
    #[serde(rename = "OX")]
    ox: u32,
    #[serde(rename = "OY")]
    oy: u32,
    #[serde(rename = "FX")]
    fx: u32,
    #[serde(rename = "FY")]
    fy: u32,
    #[serde(default = "one")]
    stride: u32,
}

impl From<&Layer> for LayerDoc {
    fn from(l: &Layer) -> Self {
        let d = &l.dims;
        LayerDoc {
            id: l.id.clone(),
            kind: l.kind,
            b: d.b,
            k: d.k,
            c: d.c,
            ox: d.ox,
            oy: d.oy,
            fx: d.fx,
            fy: d.fy,
            stride: d.stride,
        }
    }
}

/// Default activation word width; the network document does not carry it.
pub const DEFAULT_WORD_BITS: u32 = 8;

pub fn parse_network(text: &str) -> Result<NetworkGraph, GraphError> {
    let doc: NetworkDoc = serde_json::from_str(text)?;
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            Layer::new(
                l.id,
                l.kind,
                LayerDims {
                    b: l.b,
                    k: l.k,
                    c: l.c,
                    ox: l.ox,
                    oy: l.oy,
                    fx: l.fx,
                    fy: l.fy,
                    stride: l.stride,
                    word_bits: DEFAULT_WORD_BITS,
                },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    NetworkGraph::new(layers, &doc.edges)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn conv(id: &str, k: u32, c: u32, o: u32, f: u32, stride: u32) -> Layer {
        Layer::new(
            id,
            if f == 1 { LayerKind::Pointwise } else { LayerKind::Conv },
            LayerDims {
                b: 1,
                k,
                c,
                ox: o,
                oy: o,
                fx: f,
                fy: f,
                stride,
                word_bits: 8,
            },
        )
        .unwrap()
    }

    fn edges(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    pub fn five_layer_skip() -> NetworkGraph {
        let layers = (1..=5).map(|i| conv(&format!("layer{i}"), 16, 16, 8, 3, 1)).collect();
        NetworkGraph::new(
            layers,
            &edges(&[
                ("layer1", "layer2"),
                ("layer2", "layer3"),
                ("layer3", "layer4"),
                ("layer4", "layer5"),
                ("layer2", "layer5"),
            ]),
        )
        .unwrap()
    }

    #[test]
    fn skip_connection_gives_two_consumers() {
        let g = five_layer_skip();
        let l2 = g.find("layer2").unwrap();
        assert_eq!(g.consumers_of(l2).len(), 2);
        let pairs = g.dependency_pairs();
        let entry = pairs.iter().find(|(p, _)| p.id == "layer2").unwrap();
        let ids: Vec<_> = entry.1.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, ["layer3", "layer5"]);
        // Output-only final layer never appears as a producer.
        assert!(pairs.iter().all(|(p, _)| p.id != "layer5"));
    }

    #[test]
    fn single_layer_without_edges() {
        let g = NetworkGraph::new(vec![conv("only", 8, 8, 4, 3, 1)], &[]).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.dependency_pairs().is_empty());
    }

    #[test]
    fn chain_has_n_minus_one_pairs() {
        let layers: Vec<_> = (0..6).map(|i| conv(&format!("l{i}"), 8, 8, 4, 3, 1)).collect();
        let e: Vec<_> = (0..5).map(|i| (format!("l{i}"), format!("l{}", i + 1))).collect();
        let g = NetworkGraph::new(layers, &e).unwrap();
        let pairs = g.dependency_pairs();
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().all(|(_, c)| c.len() == 1));
    }

    #[test]
    fn channel_mismatch_names_edge() {
        let err = NetworkGraph::new(
            vec![conv("a", 32, 8, 4, 3, 1), conv("b", 8, 64, 4, 3, 1)],
            &edges(&[("a", "b")]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a -> b"), "{msg}");
        assert!(msg.contains("C = 64"), "{msg}");
    }

    #[test]
    fn cycle_and_dangling_edges_rejected() {
        let layers = vec![conv("a", 8, 8, 4, 3, 1), conv("b", 8, 8, 4, 3, 1)];
        let err = NetworkGraph::new(layers.clone(), &edges(&[("a", "b"), ("b", "a")])).unwrap_err();
        assert!(matches!(err, GraphError::Cycle(_)));
        let err = NetworkGraph::new(layers, &edges(&[("a", "zz")])).unwrap_err();
        assert!(err.to_string().contains("unknown consumer"));
    }

    #[test]
    fn spatial_mismatch_rejected_and_strided_accepted() {
        let ok = NetworkGraph::new(
            vec![conv("a", 8, 8, 16, 3, 1), conv("b", 8, 8, 8, 3, 2)],
            &edges(&[("a", "b")]),
        );
        assert!(ok.is_ok());
        let bad = NetworkGraph::new(
            vec![conv("a", 8, 8, 16, 3, 1), conv("b", 8, 8, 4, 3, 1)],
            &edges(&[("a", "b")]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn kind_invariants() {
        let dims = LayerDims {
            b: 1,
            k: 8,
            c: 4,
            ox: 4,
            oy: 4,
            fx: 3,
            fy: 3,
            stride: 1,
            word_bits: 8,
        };
        assert!(Layer::new("dw", LayerKind::Depthwise, dims).is_err());
        assert!(Layer::new("pw", LayerKind::Pointwise, dims).is_err());
        assert!(Layer::new("fc", LayerKind::FullyConnected, dims).is_err());
        assert!(Layer::new("zero", LayerKind::Conv, LayerDims { k: 0, ..dims }).is_err());
        assert!(Layer::new("wb", LayerKind::Conv, LayerDims { word_bits: 6, ..dims }).is_err());
    }

    #[test]
    fn derived_input_extent() {
        let l = conv("a", 8, 8, 7, 3, 1);
        assert_eq!(l.dims.ix(), 7 + 3 - 1);
        let s = conv("s", 8, 8, 7, 3, 2);
        assert_eq!(s.dims.ix(), 6 * 2 + 3);
    }

    #[test]
    fn parse_rejects_unknown_fields_and_syntax() {
        let text = r#"{"layers":[{"id":"a","kind":"conv","B":1,"K":8,"C":8,"OX":4,"OY":4,"FX":3,"FY":3,"pad":1}],"edges":[]}"#;
        assert!(matches!(parse_network(text), Err(GraphError::Syntax(_))));
        assert!(matches!(parse_network("{ nope"), Err(GraphError::Syntax(_))));
    }

    #[test]
    fn parse_defaults_stride() {
        let text = r#"{"layers":[{"id":"a","kind":"pointwise","B":1,"K":8,"C":8,"OX":4,"OY":4,"FX":1,"FY":1}]}"#;
        let g = parse_network(text).unwrap();
        assert_eq!(g.layer(0).dims.stride, 1);
    }
}
