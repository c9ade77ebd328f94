use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::maximise::{AdapterGraph, ModalityAdapter};
use crate::nn::{Model, INPUT};
use crate::rng;
use crate::tensor::Tensor;

/// Vector inputs: the perturbation is an additive offset and its size is the
/// Euclidean norm of the offset alone.
pub struct TabularAdapter {
    pub dim: usize,
}

impl TabularAdapter {
    pub fn new(dim: usize) -> Self {
        TabularAdapter { dim }
    }
}

pub const OFFSET: &str = "offset";

impl ModalityAdapter for TabularAdapter {
    fn pert_specs(&self) -> Vec<(String, Vec<usize>)> {
        vec![(OFFSET.into(), vec![self.dim])]
    }

    fn zero_effect(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[self.dim])]
    }

    fn init(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = rng::derive(seed, 3);
        vec![rng::uniform_tensor(&[self.dim], -1e-3, 1e-3, &mut rng)]
    }

    fn build(
        &self,
        g: &mut Graph,
        model: &Model,
        tap: &str,
        sample: &Tensor,
        perts: &[NodeId],
    ) -> Result<AdapterGraph> {
        if sample.shape != [self.dim] {
            return Err(Error::ShapeMismatch {
                op: "tabular combine".into(),
                lhs: sample.shape.clone(),
                rhs: vec![self.dim],
            });
        }
        let tap_src = model.graph.node(tap)?;
        let s = g.constant(Tensor::stack(std::slice::from_ref(sample))?);
        let offset = g.reshape(perts[0], vec![1, self.dim]);
        let combined = g.add(s, offset);
        let mut input_map = BTreeMap::new();
        input_map.insert(INPUT.to_string(), combined);
        let map = model
            .graph
            .inline_into(g, &input_map, &model.params, "model/")?;
        let sq = g.l2_norm_sq(perts[0]);
        let distance = g.pow_const(sq, 0.5);
        Ok(AdapterGraph {
            combined,
            tap_value: map[tap_src],
            distance,
        })
    }
}

/// Value-level combine: s + s*.
pub fn tabular_combine(sample: &Tensor, offset: &Tensor) -> Result<Tensor> {
    if sample.shape != offset.shape {
        return Err(Error::ShapeMismatch {
            op: "tabular combine".into(),
            lhs: sample.shape.clone(),
            rhs: offset.shape.clone(),
        });
    }
    let data = sample
        .data
        .iter()
        .zip(&offset.data)
        .map(|(a, b)| a + b)
        .collect();
    Tensor::from_vec(sample.shape.clone(), data)
}

/// Value-level distance: the L2 norm of the offset.
pub fn tabular_distance(sample: &Tensor, offset: &Tensor) -> Result<f64> {
    if sample.shape != offset.shape {
        return Err(Error::ShapeMismatch {
            op: "tabular distance".into(),
            lhs: sample.shape.clone(),
            rhs: offset.shape.clone(),
        });
    }
    Ok(offset.data.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maximise::{build_objective, MaximiseConfig};
    use crate::nn::ModelBuilder;
    use crate::probe::{Probe, ConceptKind};
    use crate::autodiff::evaluate;

    fn toy_model() -> Model {
        // Identity network: output == tap == input.
        let mut b = ModelBuilder::new(7);
        let x = b.input();
        b.tap("features", x);
        b.build(x)
    }

    fn toy_probe(weights: Vec<f64>) -> Probe {
        Probe {
            kind: ConceptKind::Scalar,
            tap: "features".into(),
            lambda: 0.0,
            weights,
            bias: 0.0,
        }
    }

    #[test]
    fn combine_and_distance_match_scalar_loops() {
        let s = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let sp = Tensor::from_vec(vec![3], vec![0.25, 0.0, -1.5]).unwrap();
        let c = tabular_combine(&s, &sp).unwrap();
        assert_eq!(c.data, vec![1.25, -2.0, -1.0]);
        let d = tabular_distance(&s, &sp).unwrap();
        let expect = (0.25f64 * 0.25 + 1.5 * 1.5).sqrt();
        assert!((d - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_offset_costs_nothing_and_changes_nothing() {
        let s = Tensor::from_vec(vec![4], vec![0.4, -1.0, 2.0, 0.0]).unwrap();
        let zero = Tensor::zeros(&[4]);
        assert_eq!(tabular_combine(&s, &zero).unwrap(), s);
        assert_eq!(tabular_distance(&s, &zero).unwrap(), 0.0);
    }

    #[test]
    fn graph_path_matches_value_path() {
        let model = toy_model();
        let probe = toy_probe(vec![0.5, -1.0, 2.0]);
        let adapter = TabularAdapter::new(3);
        let cfg = MaximiseConfig::default();
        let s = Tensor::from_vec(vec![3], vec![0.1, 0.2, -0.3]).unwrap();
        let sp = Tensor::from_vec(vec![3], vec![-0.05, 0.6, 0.01]).unwrap();

        let og = build_objective(&model, &probe, &adapter, &s, &cfg).unwrap();
        let mut binds = BTreeMap::new();
        binds.insert(OFFSET.to_string(), sp.clone());
        let values = evaluate(&og.graph, &binds).unwrap();

        let combined = tabular_combine(&s, &sp).unwrap();
        let got = &values[og.graph.node("combined").unwrap()];
        assert_eq!(got.data, combined.data);
        let d = values[og.graph.node("distance").unwrap()].data[0];
        assert!((d - tabular_distance(&s, &sp).unwrap()).abs() < 1e-15);
        let p = values[og.graph.node("probe_out").unwrap()].data[0];
        let manual: f64 = combined
            .data
            .iter()
            .zip(&probe.weights)
            .map(|(a, w)| a * w)
            .sum();
        assert!((p - manual).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_sample() {
        let model = toy_model();
        let probe = toy_probe(vec![1.0, 0.0, 0.0]);
        let adapter = TabularAdapter::new(3);
        let s = Tensor::zeros(&[5]);
        let err = build_objective(&model, &probe, &adapter, &s, &MaximiseConfig::default());
        assert!(err.is_err());
    }
}
