use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::backprop;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Model, OUTPUT};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// First-order parameter updates. Adam keeps per-parameter moment estimates
/// (β1 = 0.9, β2 = 0.999, ε = 1e-8) with bias correction.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.t += 1;
        for (name, value) in params.iter_mut() {
            let grad = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if grad.shape != value.shape {
                return Err(Error::ShapeMismatch {
                    op: format!("optimizer step for {name}"),
                    lhs: value.shape.clone(),
                    rhs: grad.shape.clone(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in value.data.iter_mut().zip(&grad.data) {
                        *p -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = value.numel();
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - BETA2.powi(self.t as i32);
                    for i in 0..n {
                        let g = grad.data[i];
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        value.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Model graph extended with a `target` input and a scalar `loss` node.
fn build_loss_graph(model: &Model, loss: LossKind) -> Result<(Graph, NodeId)> {
    let mut g = model.graph.clone();
    let pred = g.node(OUTPUT)?;
    let target = g.input("target", false);
    let loss_node = match loss {
        LossKind::SquaredError => {
            let diff = g.sub(pred, target);
            let sq = g.mul(diff, diff);
            g.mean(sq)
        }
        LossKind::BinaryCrossEntropy => {
            // Predictions are squeezed into [eps, 1-eps] so the logs stay
            // finite when the model saturates.
            let eps = 1e-7;
            let scale = g.constant_scalar(1.0 - 2.0 * eps);
            let offset = g.constant_scalar(eps);
            let scaled = g.mul(pred, scale);
            let p = g.add(scaled, offset);
            let one = g.constant_scalar(1.0);
            let ln_p = g.ln(p);
            let pos = g.mul(target, ln_p);
            let not_t = g.sub(one, target);
            let not_p = g.sub(one, p);
            let ln_np = g.ln(not_p);
            let neg = g.mul(not_t, ln_np);
            let s = g.add(pos, neg);
            let mean = g.mean(s);
            let minus_one = g.constant_scalar(-1.0);
            g.mul(mean, minus_one)
        }
    };
    g.register("loss", loss_node);
    Ok((g, loss_node))
}

/// Mini-batch gradient descent on any graph with `input`/`target` leaves
/// and a scalar loss node. This single loop trains models and probes alike.
/// A non-finite loss or parameter aborts with a divergence error.
pub fn fit_graph(
    loss_graph: &Graph,
    loss_node: NodeId,
    mut params: BTreeMap<String, Tensor>,
    inputs: &[Tensor],
    targets: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(BTreeMap<String, Tensor>, Vec<f64>)> {
    cfg.validate()?;
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Data(format!(
            "training needs matching non-empty inputs/targets, got {}/{}",
            inputs.len(),
            targets.len()
        )));
    }
    let param_names: Vec<String> = params.keys().cloned().collect();
    let wrt: Vec<&str> = param_names.iter().map(|s| s.as_str()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut shuffle_rng = rng::derive(cfg.seed, 1);
    let mut curve = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut order, &mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<Tensor> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let t: Vec<Tensor> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let mut bindings = params.clone();
            bindings.insert("input".into(), Tensor::stack(&x)?);
            bindings.insert("target".into(), Tensor::stack(&t)?);
            let result = match backprop(loss_graph, &bindings, loss_node, &wrt) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let batch_loss = result.values[loss_node].item()?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            optimizer.step(&mut params, &result.grads)?;
            if params.values().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            total += batch_loss * chunk.len() as f64;
        }
        curve.push(total / inputs.len() as f64);
    }
    Ok((params, curve))
}

/// Train a model's parameters against paired inputs/targets. Returns the
/// trained model and the mean loss per epoch.
pub fn train_supervised(
    mut model: Model,
    inputs: &[Tensor],
    targets: &[Tensor],
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    let (loss_graph, loss_node) = build_loss_graph(&model, loss)?;
    let params = std::mem::take(&mut model.params);
    let (params, curve) = fit_graph(&loss_graph, loss_node, params, inputs, targets, cfg)?;
    model.params = params;
    Ok((model, curve))
}

/// Mean loss of a model over a dataset, without gradients.
pub fn evaluate_loss(
    model: &Model,
    inputs: &[Tensor],
    targets: &[Tensor],
    loss: LossKind,
) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Data("evaluation needs matching non-empty data".into()));
    }
    let (loss_graph, loss_node) = build_loss_graph(model, loss)?;
    let mut bindings = model.params.clone();
    bindings.insert("input".into(), Tensor::stack(inputs)?);
    bindings.insert("target".into(), Tensor::stack(targets)?);
    let values = crate::autodiff::evaluate(&loss_graph, &bindings)?;
    values[loss_node].item()
}
