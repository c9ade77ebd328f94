use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::Model;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{fit_graph, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    /// Labels in {0,1}; probe output is a sigmoid, read as a probability.
    Binary,
    /// Finite real labels; probe output is affine.
    Scalar,
}

/// Deterministic map from a raw sample to a concept value. Returning `None`
/// excludes the sample (the concept is undefined for it) without failing.
pub struct ConceptFunction<S> {
    pub name: String,
    pub kind: ConceptKind,
    pub eval: Box<dyn Fn(&S) -> Option<f64>>,
}

impl<S> ConceptFunction<S> {
    pub fn new(
        name: &str,
        kind: ConceptKind,
        eval: impl Fn(&S) -> Option<f64> + 'static,
    ) -> Self {
        ConceptFunction {
            name: name.into(),
            kind,
            eval: Box::new(eval),
        }
    }
}

/// Affine map (sigmoid-wrapped for binary concepts) from a layer's
/// flattened activations to a concept value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub kind: ConceptKind,
    pub tap: String,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ConceptKind,
    /// Held-out accuracy at the 0.5 threshold (binary probes).
    pub accuracy: Option<f64>,
    /// Held-out rank AUC (binary probes; absent if one class is missing).
    pub auc: Option<f64>,
    /// Held-out coefficient of determination (scalar probes).
    pub r_squared: Option<f64>,
    pub weight_l1: f64,
    pub loss_curve: Vec<f64>,
    pub train_count: usize,
    pub held_out_count: usize,
}

/// One (flattened activation, concept label) pair.
pub type ProbePair = (Vec<f64>, f64);

/// Run samples through the model, collect the tap activation for each, and
/// pair it with the concept value. Samples where the concept is undefined
/// are skipped and counted. Order is preserved.
pub fn build_probe_dataset<S>(
    model: &Model,
    tap: &str,
    samples: &[S],
    input_of: impl Fn(&S) -> Tensor,
    concept: &ConceptFunction<S>,
) -> Result<(Vec<ProbePair>, usize)> {
    if samples.is_empty() {
        return Err(Error::Data("probe dataset needs at least one sample".into()));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    // Batched tap evaluation; chunk size bounds peak memory.
    for chunk in samples.chunks(256) {
        let kept: Vec<(&S, f64)> = chunk
            .iter()
            .filter_map(|s| match (concept.eval)(s) {
                Some(label) => Some((s, label)),
                None => {
                    skipped += 1;
                    None
                }
            })
            .collect();
        if kept.is_empty() {
            continue;
        }
        let inputs: Vec<Tensor> = kept.iter().map(|(s, _)| input_of(s)).collect();
        let batch = Tensor::stack(&inputs)?;
        let acts = model.value_at(tap, &batch)?;
        for (row, (_, label)) in acts.unstack()?.into_iter().zip(&kept) {
            if concept.kind == ConceptKind::Binary && *label != 0.0 && *label != 1.0 {
                return Err(Error::Data(format!(
                    "binary concept {} produced non-binary label {label}",
                    concept.name
                )));
            }
            if !label.is_finite() {
                return Err(Error::Data(format!(
                    "concept {} produced non-finite label",
                    concept.name
                )));
            }
            pairs.push((row.data, *label));
        }
    }
    Ok((pairs, skipped))
}

/// Loss graph for probe fitting: mean squared error of the (optionally
/// sigmoid-wrapped) affine prediction, plus lambda times the L1 mass of the
/// weights and of the bias. The data term is averaged rather than summed so
/// lambda keeps its meaning across dataset sizes.
fn probe_loss_graph(dim: usize, kind: ConceptKind, lambda: f64) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let acts = g.input("input", false);
    let target = g.input("target", false);
    let w = g.input("probe.w", true);
    let b = g.input("probe.b", true);
    let _ = dim;
    let lin = g.matmul(acts, w);
    let pred_lin = g.add(lin, b);
    let pred = match kind {
        ConceptKind::Binary => g.sigmoid(pred_lin),
        ConceptKind::Scalar => pred_lin,
    };
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    let data = g.mean(sq);
    let wl1 = g.l1_norm(w);
    let bl1 = g.l1_norm(b);
    let pen_sum = g.add(wl1, bl1);
    let lam = g.constant_scalar(lambda);
    let pen = g.mul(lam, pen_sum);
    let loss = g.add(data, pen);
    g.register("loss", loss);
    (g, loss)
}

/// Fit a probe on (activation, label) pairs by gradient descent and report
/// held-out quality on a seeded 80/20 split.
pub fn train_probe(
    pairs: &[ProbePair],
    kind: ConceptKind,
    tap: &str,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(Probe, ProbeReport)> {
    if pairs.is_empty() {
        return Err(Error::Data("no probe pairs to train on".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "probe lambda must be non-negative, got {lambda}"
        )));
    }
    let dim = pairs[0].0.len();
    if dim == 0 || pairs.iter().any(|(a, _)| a.len() != dim) {
        return Err(Error::Data("probe activations have inconsistent size".into()));
    }
    if kind == ConceptKind::Binary {
        let ones = pairs.iter().filter(|(_, y)| *y == 1.0).count();
        if ones == 0 || ones == pairs.len() {
            return Err(Error::Data(format!(
                "binary concept is degenerate: all {} labels are {}",
                pairs.len(),
                if ones == 0 { 0 } else { 1 }
            )));
        }
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut split_rng = rng::derive(cfg.seed, 2);
    rng::shuffle(&mut order, &mut split_rng);
    let n_train = ((pairs.len() * 4) / 5).max(1);
    let (train_idx, held_idx) = order.split_at(n_train.min(pairs.len()));

    let inputs: Vec<Tensor> = train_idx
        .iter()
        .map(|&i| Tensor::from_vec(vec![dim], pairs[i].0.clone()))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = train_idx
        .iter()
        .map(|&i| Tensor::from_vec(vec![1], vec![pairs[i].1]))
        .collect::<Result<_>>()?;

    let (graph, loss_node) = probe_loss_graph(dim, kind, lambda);
    let mut init_rng = rng::derive(cfg.seed, 0);
    let r = (1.0 / dim as f64).sqrt();
    let mut params = BTreeMap::new();
    params.insert(
        "probe.w".to_string(),
        rng::uniform_tensor(&[dim, 1], -r, r, &mut init_rng),
    );
    params.insert(
        "probe.b".to_string(),
        rng::uniform_tensor(&[1], -r, r, &mut init_rng),
    );
    let (params, curve) = fit_graph(&graph, loss_node, params, &inputs, &targets, cfg)?;

    let probe = Probe {
        kind,
        tap: tap.into(),
        lambda,
        weights: params["probe.w"].data.clone(),
        bias: params["probe.b"].data[0],
    };

    // Held-out metrics; fall back to the training slice if the split left
    // nothing out (tiny datasets).
    let eval_idx: &[usize] = if held_idx.is_empty() { train_idx } else { held_idx };
    let mut outputs = Vec::with_capacity(eval_idx.len());
    let mut labels = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        let act = Tensor::from_vec(vec![dim], pairs[i].0.clone())?;
        outputs.push(probe_predict(&probe, &act)?);
        labels.push(pairs[i].1);
    }
    let weight_l1: f64 = probe.weights.iter().map(|w| w.abs()).sum();
    let report = match kind {
        ConceptKind::Binary => {
            let correct = outputs
                .iter()
                .zip(&labels)
                .filter(|(&p, &y)| (p > 0.5) == (y == 1.0))
                .count();
            ProbeReport {
                kind,
                accuracy: Some(correct as f64 / outputs.len() as f64),
                auc: rank_auc(&outputs, &labels),
                r_squared: None,
                weight_l1,
                loss_curve: curve,
                train_count: train_idx.len(),
                held_out_count: held_idx.len(),
            }
        }
        ConceptKind::Scalar => {
            let mean = labels.iter().sum::<f64>() / labels.len() as f64;
            let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
            if ss_tot == 0.0 {
                return Err(Error::Data(
                    "scalar concept is constant on the evaluation split".into(),
                ));
            }
            let ss_res: f64 = outputs
                .iter()
                .zip(&labels)
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            ProbeReport {
                kind,
                accuracy: None,
                auc: None,
                r_squared: Some(1.0 - ss_res / ss_tot),
                weight_l1,
                loss_curve: curve,
                train_count: train_idx.len(),
                held_out_count: held_idx.len(),
            }
        }
    };
    Ok((probe, report))
}

/// Rank-based AUC (Mann-Whitney), ties shared; None if one class is absent.
fn rank_auc(outputs: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..outputs.len()).collect();
    idx.sort_by(|&a, &b| outputs[a].partial_cmp(&outputs[b]).unwrap());
    let mut rank_sum = 0.0; // sum of positive ranks, 1-based, ties averaged
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && outputs[idx[j + 1]] == outputs[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1.0 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Probe output for one activation tensor (any shape; flattened).
pub fn probe_predict(probe: &Probe, activation: &Tensor) -> Result<f64> {
    if activation.numel() != probe.weights.len() {
        return Err(Error::ShapeMismatch {
            op: "probe_predict".into(),
            lhs: activation.shape.clone(),
            rhs: vec![probe.weights.len()],
        });
    }
    let dot: f64 = probe
        .weights
        .iter()
        .zip(&activation.data)
        .map(|(w, a)| w * a)
        .sum();
    let lin = dot + probe.bias;
    Ok(match probe.kind {
        ConceptKind::Binary => sigmoid(lin),
        ConceptKind::Scalar => lin,
    })
}

impl Probe {
    /// Splice the probe into a graph as constants. `activation` must be a
    /// [1, D] node; the returned node is the scalar probe output.
    pub fn attach(&self, g: &mut Graph, activation: NodeId) -> Result<NodeId> {
        let d = self.weights.len();
        let w = g.constant(Tensor::from_vec(vec![d, 1], self.weights.clone())?);
        let b = g.constant(Tensor::from_vec(vec![1], vec![self.bias])?);
        let lin = g.matmul(activation, w);
        let pred_lin = g.add(lin, b);
        let pred = match self.kind {
            ConceptKind::Binary => g.sigmoid(pred_lin),
            ConceptKind::Scalar => pred_lin,
        };
        Ok(g.sum(pred))
    }

    // ── serialization: single JSON document; f64 round-trips bit-exactly ──

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ProbeFile {
            format: PROBE_FORMAT.into(),
            version: 1,
            probe: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Probe> {
        let file: ProbeFile = serde_json::from_str(text)?;
        if file.format != PROBE_FORMAT {
            return Err(Error::Data(format!("unexpected probe format {}", file.format)));
        }
        if file.version != 1 {
            return Err(Error::Data(format!(
                "unsupported probe version {}",
                file.version
            )));
        }
        Ok(file.probe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Probe> {
        Probe::from_json(&std::fs::read_to_string(path)?)
    }
}

const PROBE_FORMAT: &str = "probemax-probe";

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    format: String,
    version: u32,
    probe: Probe,
}
