use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::evaluate;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

/// Canonical name of the data input and of the final output node in every
/// model graph built here.
pub const INPUT: &str = "input";
pub const OUTPUT: &str = "output";

/// A computation graph plus concrete values for its trainable inputs.
/// Graphs are batch-flexible: shapes are resolved at evaluation time, so the
/// same model runs on any leading batch size.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: Graph,
    pub params: BTreeMap<String, Tensor>,
    /// Named intermediate activations probes may attach to.
    pub taps: Vec<String>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl Model {
    /// Parameter bindings merged with caller-supplied tensors.
    pub fn bindings_with(&self, extra: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
        let mut b = self.params.clone();
        for (k, v) in extra {
            b.insert(k.clone(), v.clone());
        }
        b
    }

    /// Value of a named node for a batched input tensor.
    pub fn value_at(&self, name: &str, batch: &Tensor) -> Result<Tensor> {
        let node = self.graph.node(name)?;
        let mut bindings = self.params.clone();
        bindings.insert(INPUT.into(), batch.clone());
        let mut values = evaluate(&self.graph, &bindings)?;
        Ok(values.swap_remove(node))
    }

    pub fn forward_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.value_at(OUTPUT, batch)
    }

    /// Run one unbatched sample; the batch axis is added and stripped here.
    pub fn forward_one(&self, sample: &Tensor) -> Result<Tensor> {
        let batch = Tensor::stack(std::slice::from_ref(sample))?;
        let out = self.forward_batch(&batch)?;
        Ok(out.unstack()?.swap_remove(0))
    }

    /// Flattened activation vector of a tap for one unbatched sample.
    pub fn activations(&self, tap: &str, sample: &Tensor) -> Result<Vec<f64>> {
        let batch = Tensor::stack(std::slice::from_ref(sample))?;
        Ok(self.value_at(tap, &batch)?.data)
    }

    /// Consistency between the graph's trainable inputs and `params`.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let trainable: Vec<String> = self
            .graph
            .inputs()
            .into_iter()
            .filter(|(_, t, _)| *t)
            .map(|(n, _, _)| n)
            .collect();
        for name in &trainable {
            if !self.params.contains_key(name) {
                return Err(Error::Graph(format!("missing parameter value for {name}")));
            }
        }
        for name in self.params.keys() {
            if !trainable.iter().any(|t| t == name) {
                return Err(Error::Graph(format!(
                    "parameter {name} has no trainable input node"
                )));
            }
        }
        for tap in &self.taps {
            self.graph.node(tap)?;
        }
        self.graph.node(OUTPUT)?;
        Ok(())
    }

    /// Split a sequential model at a tap into (encoder, decoder): the
    /// encoder maps the original input to the tap value and the decoder maps
    /// a fresh input named `input` through the remaining layers. Parameters
    /// are partitioned by which side still references them.
    pub fn split_at_tap(&self, tap: &str) -> Result<(Model, Model)> {
        let cut = self.graph.node(tap)?;
        let out = self.graph.node(OUTPUT)?;
        let enc_graph = self.graph.extract_up_to(cut, OUTPUT)?;
        let dec_graph = self.graph.extract_from(cut, INPUT, out, OUTPUT)?;
        let pick = |g: &Graph| -> BTreeMap<String, Tensor> {
            g.inputs()
                .into_iter()
                .filter_map(|(name, _, _)| {
                    self.params
                        .get(&name)
                        .map(|t| (name.clone(), t.clone()))
                })
                .collect()
        };
        for (name, _, _) in dec_graph.inputs() {
            if name != INPUT && !self.params.contains_key(&name) {
                return Err(Error::Graph(format!(
                    "decoder would depend on non-parameter input {name}"
                )));
            }
        }
        let encoder = Model {
            params: pick(&enc_graph),
            graph: enc_graph,
            taps: vec![],
            seed: self.seed,
        };
        let decoder = Model {
            params: pick(&dec_graph),
            graph: dec_graph,
            taps: vec![],
            seed: self.seed,
        };
        encoder.validate()?;
        decoder.validate()?;
        Ok((encoder, decoder))
    }

    // ── serialization: one JSON header line, then all parameter tensors as
    //    little-endian f64 in key order ──

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            graph: self.graph.clone(),
            taps: self.taps.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamSpec {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for t in self.params.values() {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Data("model file has no header line".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != FORMAT_NAME {
            return Err(Error::Data(format!(
                "unexpected model format {}",
                header.format
            )));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model version {}",
                header.version
            )));
        }
        let blob = &bytes[split + 1..];
        let expect: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if blob.len() != expect * 8 {
            return Err(Error::Data(format!(
                "parameter blob is {} bytes, expected {}",
                blob.len(),
                expect * 8
            )));
        }
        let mut params = BTreeMap::new();
        let mut off = 0;
        for spec in &header.params {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f64> = (0..numel)
                .map(|i| {
                    let s = off + i * 8;
                    f64::from_le_bytes(blob[s..s + 8].try_into().unwrap())
                })
                .collect();
            off += numel * 8;
            params.insert(spec.name.clone(), Tensor::from_vec(spec.shape.clone(), data)?);
        }
        let model = Model {
            graph: header.graph,
            params,
            taps: header.taps,
            seed: header.seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_bytes(&std::fs::read(path)?)
    }
}

const FORMAT_NAME: &str = "probemax-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    graph: Graph,
    taps: Vec<String>,
    seed: u64,
    params: Vec<ParamSpec>,
}

#[derive(Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
}

/// Incremental construction of a model graph with seeded parameter
/// initialization: uniform in ±sqrt(1/fan_in) for weights and biases.
pub struct ModelBuilder {
    pub graph: Graph,
    params: BTreeMap<String, Tensor>,
    taps: Vec<String>,
    rng: Prng,
    seed: u64,
}

impl ModelBuilder {
    pub fn new(seed: u64) -> Self {
        ModelBuilder {
            graph: Graph::new(),
            params: BTreeMap::new(),
            taps: vec![],
            rng: rng::derive(seed, 0),
            seed,
        }
    }

    pub fn input(&mut self) -> NodeId {
        self.graph.input(INPUT, false)
    }

    fn param(&mut self, name: &str, shape: &[usize], fan_in: usize) -> NodeId {
        let r = (1.0 / fan_in as f64).sqrt();
        let value = rng::uniform_tensor(shape, -r, r, &mut self.rng);
        self.params.insert(name.into(), value);
        self.graph.input(name, true)
    }

    /// x[B,in] -> x·W + b, W [in,out], b [out].
    pub fn dense(&mut self, x: NodeId, in_dim: usize, out_dim: usize, name: &str) -> NodeId {
        let w = self.param(&format!("{name}.w"), &[in_dim, out_dim], in_dim);
        let b = self.param(&format!("{name}.b"), &[out_dim], in_dim);
        let xw = self.graph.matmul(x, w);
        self.graph.add(xw, b)
    }

    /// x[B,cin,H,W] -> conv(x,K) + b, K [cout,cin,k,k], b [cout,1,1].
    pub fn conv(&mut self, x: NodeId, cin: usize, cout: usize, k: usize, name: &str) -> NodeId {
        let fan_in = cin * k * k;
        let kernel = self.param(&format!("{name}.k"), &[cout, cin, k, k], fan_in);
        let bias = self.param(&format!("{name}.b"), &[cout, 1, 1], fan_in);
        let conv = self.graph.conv2d(x, kernel);
        self.graph.add(conv, bias)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.graph.relu(x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.graph.sigmoid(x)
    }

    /// Flatten everything after the batch axis.
    pub fn flatten(&mut self, x: NodeId, numel: usize) -> NodeId {
        self.graph.reshape_tail(x, vec![numel])
    }

    pub fn reshape_tail(&mut self, x: NodeId, tail: Vec<usize>) -> NodeId {
        self.graph.reshape_tail(x, tail)
    }

    /// Mark an activation as probe-attachable.
    pub fn tap(&mut self, name: &str, node: NodeId) {
        self.graph.register(name, node);
        self.taps.push(name.into());
    }

    pub fn build(mut self, output: NodeId) -> Model {
        self.graph.register(OUTPUT, output);
        Model {
            graph: self.graph,
            params: self.params,
            taps: self.taps,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mlp(seed: u64) -> Model {
        let mut b = ModelBuilder::new(seed);
        let x = b.input();
        let h = b.dense(x, 3, 4, "l1");
        let h = b.relu(h);
        b.tap("hidden", h);
        let y = b.dense(h, 4, 2, "l2");
        let y = b.sigmoid(y);
        b.build(y)
    }

    #[test]
    fn builder_initializes_within_fan_in_bound() {
        let m = tiny_mlp(1);
        m.validate().unwrap();
        let r = (1.0f64 / 3.0).sqrt();
        for v in &m.params["l1.w"].data {
            assert!(v.abs() <= r);
        }
        assert_eq!(m.params["l1.w"].shape, vec![3, 4]);
        assert_eq!(m.params["l2.b"].shape, vec![2]);
    }

    #[test]
    fn same_seed_same_init_different_seed_differs() {
        let a = tiny_mlp(42);
        let b = tiny_mlp(42);
        let c = tiny_mlp(43);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn batch_and_single_evaluation_agree() {
        let m = tiny_mlp(7);
        let s1 = Tensor::from_vec(vec![3], vec![0.1, -0.4, 0.7]).unwrap();
        let s2 = Tensor::from_vec(vec![3], vec![1.0, 0.2, -0.3]).unwrap();
        let batch = Tensor::stack(&[s1.clone(), s2.clone()]).unwrap();
        let out = m.forward_batch(&batch).unwrap();
        let o1 = m.forward_one(&s1).unwrap();
        let o2 = m.forward_one(&s2).unwrap();
        assert_eq!(out.unstack().unwrap(), vec![o1, o2]);
    }

    #[test]
    fn serialization_round_trips_bit_exact() {
        let m = tiny_mlp(9);
        let bytes = m.to_bytes().unwrap();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(m.params, back.params);
        assert_eq!(m.taps, back.taps);
        assert_eq!(m.seed, back.seed);
        let s = Tensor::from_vec(vec![3], vec![0.5, -0.2, 0.9]).unwrap();
        assert_eq!(
            m.forward_one(&s).unwrap(),
            back.forward_one(&s).unwrap()
        );
        // Serialization itself is deterministic.
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let m = tiny_mlp(3);
        let mut bytes = m.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(Model::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn save_load_round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let m = tiny_mlp(5);
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(m.params, back.params);
    }

    #[test]
    fn split_at_tap_partitions_model() {
        let m = tiny_mlp(11);
        let (enc, dec) = m.split_at_tap("hidden").unwrap();
        assert!(enc.params.contains_key("l1.w"));
        assert!(!enc.params.contains_key("l2.w"));
        assert!(dec.params.contains_key("l2.w"));
        assert!(!dec.params.contains_key("l1.w"));
        let s = Tensor::from_vec(vec![3], vec![0.3, 0.1, -0.8]).unwrap();
        let z = enc.forward_one(&s).unwrap();
        let via_split = dec.forward_one(&z).unwrap();
        let direct = m.forward_one(&s).unwrap();
        assert_eq!(via_split, direct);
    }

    #[test]
    fn validate_catches_missing_and_orphan_params() {
        let mut m = tiny_mlp(2);
        let removed = m.params.remove("l1.b").unwrap();
        assert!(m.validate().is_err());
        m.params.insert("l1.b".into(), removed);
        m.params.insert("ghost".into(), Tensor::zeros(&[1]));
        assert!(m.validate().is_err());
    }
}
