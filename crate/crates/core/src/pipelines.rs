//! End-to-end model and probe recipes for the three modalities, shared by
//! the command-line tools, the acceptance suite, and the browser demo.

use serde::{Deserialize, Serialize};

use crate::chess::Board;
use crate::data::boards::{self, aux_targets};
use crate::data::images::ImageDataset;
use crate::data::tabular::{self, TabularDataset};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelBuilder};
use crate::probe::{
    build_probe_dataset, train_probe, ConceptFunction, ConceptKind, Probe, ProbeReport,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{train_supervised, LossKind, TrainConfig};

/// Tap names exposed by the builders below.
pub const HOUSING_TAP: &str = "features";
pub const LATENT_TAP: &str = "latent";
pub const FASHION_TAP: &str = "features";
pub const CHESS_TAP: &str = "features";

pub const LATENT_DIM: usize = 16;
const IMG: usize = crate::data::images::SIDE;

// ─── architectures ───

/// Housing regressor: 6 → 16 → 16 → 1 with the second hidden layer tapped.
pub fn housing_model(seed: u64) -> Model {
    let mut b = ModelBuilder::new(seed);
    let x = b.input();
    let d1 = b.dense(x, tabular::FEATURES.len(), 16, "dense1");
    let h1 = b.relu(d1);
    let d2 = b.dense(h1, 16, 16, "dense2");
    // Tap the pre-activation: perturbation search needs the probe to keep a
    // live gradient, and both relu (dead zones) and sigmoid (saturation)
    // stall it on a fair share of samples when tapped post-activation.
    b.tap(HOUSING_TAP, d2);
    let h2 = b.relu(d2);
    let out = b.dense(h2, 16, 1, "head");
    b.build(out)
}

/// Convolutional autoencoder over 28x28 grayscale images with a 12-d
/// bottleneck tapped as "latent". Sigmoid output keeps pixels in [0,1].
pub fn image_autoencoder(seed: u64) -> Model {
    let mut b = ModelBuilder::new(seed);
    let x = b.input();
    let c1 = b.conv(x, 1, 4, 3, "enc_conv");
    let h1 = b.relu(c1);
    let flat = b.flatten(h1, 4 * IMG * IMG);
    let d1 = b.dense(flat, 4 * IMG * IMG, 48, "enc_dense");
    let h2 = b.relu(d1);
    let z = b.dense(h2, 48, LATENT_DIM, "bottleneck");
    b.tap(LATENT_TAP, z);
    let d2 = b.dense(z, LATENT_DIM, 96, "dec_dense1");
    let h3 = b.relu(d2);
    let d3 = b.dense(h3, 96, IMG * IMG, "dec_dense2");
    let s = b.sigmoid(d3);
    let out = b.reshape_tail(s, vec![1, IMG, IMG]);
    b.build(out)
}

/// Four-class clothing classifier with the 32-unit hidden activation tapped.
pub fn fashion_model(seed: u64) -> Model {
    let mut b = ModelBuilder::new(seed);
    let x = b.input();
    let c1 = b.conv(x, 1, 6, 3, "conv1");
    let h1 = b.relu(c1);
    let flat = b.flatten(h1, 6 * IMG * IMG);
    let d1 = b.dense(flat, 6 * IMG * IMG, 32, "dense1");
    let h2 = b.relu(d1);
    b.tap(FASHION_TAP, h2);
    let d2 = b.dense(h2, 32, crate::data::images::FASHION_CLASSES, "head");
    let out = b.sigmoid(d2);
    b.build(out)
}

/// Board model: two 3x3 convolutions over the 11 planes, then a 48-unit
/// tapped layer feeding three regression heads (material, check, count).
pub fn chess_model(seed: u64) -> Model {
    let mut b = ModelBuilder::new(seed);
    let x = b.input();
    let c1 = b.conv(x, crate::chess::PLANES, 16, 3, "conv1");
    let h1 = b.relu(c1);
    let c2 = b.conv(h1, 16, 16, 3, "conv2");
    let h2 = b.relu(c2);
    // Third conv: rook and queen attacks span the whole 6x6 board, and two
    // 3x3 layers only see 5x5.
    let c3 = b.conv(h2, 16, 16, 3, "conv3");
    let h3 = b.relu(c3);
    let cells = crate::chess::SIZE * crate::chess::SIZE;
    let flat = b.flatten(h3, 16 * cells);
    let d1 = b.dense(flat, 16 * cells, 48, "dense1");
    let h4 = b.relu(d1);
    b.tap(CHESS_TAP, h4);
    let out = b.dense(h4, 48, boards::AUX_TARGETS, "head");
    b.build(out)
}

// ─── training glue ───

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionReport {
    pub held_out_mse: f64,
    pub held_out_r_squared: f64,
    pub loss_curve: Vec<f64>,
    pub train_count: usize,
    pub held_out_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub held_out_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub train_count: usize,
    pub held_out_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderReport {
    /// Mean absolute reconstruction error per pixel on held-out images.
    pub held_out_error_per_pixel: f64,
    pub loss_curve: Vec<f64>,
    pub train_count: usize,
    pub held_out_count: usize,
}

/// Seeded 80/20 split of 0..n; the held-out part is never empty.
fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Data(format!(
            "need at least 5 samples to carve out a held-out set, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::derive(seed, 2);
    rng::shuffle(&mut order, &mut split_rng);
    let held = (n / 5).max(1);
    let (held_idx, train_idx) = order.split_at(held);
    Ok((train_idx.to_vec(), held_idx.to_vec()))
}

fn gather(items: &[Tensor], idx: &[usize]) -> Vec<Tensor> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn mse_and_r2(model: &Model, inputs: &[Tensor], targets: &[Tensor]) -> Result<(f64, f64)> {
    let preds = model.forward_batch(&Tensor::stack(inputs)?)?.unstack()?;
    let mut flat_t = Vec::new();
    let mut flat_p = Vec::new();
    for (p, t) in preds.iter().zip(targets) {
        if p.numel() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "evaluation".into(),
                lhs: p.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        flat_p.extend_from_slice(&p.data);
        flat_t.extend_from_slice(&t.data);
    }
    let n = flat_t.len() as f64;
    let mse = flat_p
        .iter()
        .zip(&flat_t)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    let mean = flat_t.iter().sum::<f64>() / n;
    let sst = flat_t.iter().map(|t| (t - mean).powi(2)).sum::<f64>();
    let r2 = if sst < 1e-12 {
        0.0
    } else {
        1.0 - mse * n / sst
    };
    Ok((mse, r2))
}

/// Train the housing regressor on a (normalized) tabular dataset.
pub fn train_housing_model(
    data: &TabularDataset,
    cfg: &TrainConfig,
) -> Result<(Model, RegressionReport)> {
    let inputs: Vec<Tensor> = (0..data.len()).map(|i| data.features(i)).collect();
    let targets: Vec<Tensor> = data
        .target
        .iter()
        .map(|&t| Tensor::from_vec(vec![1], vec![t]))
        .collect::<Result<_>>()?;
    let (train_idx, held_idx) = split_indices(data.len(), cfg.seed)?;
    let (model, loss_curve) = train_supervised(
        housing_model(cfg.seed),
        &gather(&inputs, &train_idx),
        &gather(&targets, &train_idx),
        LossKind::SquaredError,
        cfg,
    )?;
    let (held_out_mse, held_out_r_squared) =
        mse_and_r2(&model, &gather(&inputs, &held_idx), &gather(&targets, &held_idx))?;
    let report = RegressionReport {
        held_out_mse,
        held_out_r_squared,
        loss_curve,
        train_count: train_idx.len(),
        held_out_count: held_idx.len(),
    };
    Ok((model, report))
}

/// Train an autoencoder (images as their own targets) and report held-out
/// mean absolute error per pixel.
pub fn train_autoencoder(
    data: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<(Model, AutoencoderReport)> {
    let (train_idx, held_idx) = split_indices(data.len(), cfg.seed)?;
    let train: Vec<Tensor> = gather(&data.images, &train_idx);
    let (model, loss_curve) = train_supervised(
        image_autoencoder(cfg.seed),
        &train,
        &train,
        LossKind::SquaredError,
        cfg,
    )?;
    let held = gather(&data.images, &held_idx);
    let recon = model.forward_batch(&Tensor::stack(&held)?)?.unstack()?;
    let mut err = 0.0;
    let mut pixels = 0usize;
    for (r, s) in recon.iter().zip(&held) {
        err += r.data.iter().zip(&s.data).map(|(a, b)| (a - b).abs()).sum::<f64>();
        pixels += s.numel();
    }
    let report = AutoencoderReport {
        held_out_error_per_pixel: err / pixels as f64,
        loss_curve,
        train_count: train_idx.len(),
        held_out_count: held_idx.len(),
    };
    Ok((model, report))
}

fn one_hot(label: u8, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data[label as usize] = 1.0;
    t
}

/// Train the clothing classifier; accuracy is argmax agreement held out.
pub fn train_fashion_model(
    data: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<(Model, ClassificationReport)> {
    let classes = crate::data::images::FASHION_CLASSES;
    let targets: Vec<Tensor> = data.labels.iter().map(|&l| one_hot(l, classes)).collect();
    let (train_idx, held_idx) = split_indices(data.len(), cfg.seed)?;
    let (model, loss_curve) = train_supervised(
        fashion_model(cfg.seed),
        &gather(&data.images, &train_idx),
        &gather(&targets, &train_idx),
        LossKind::BinaryCrossEntropy,
        cfg,
    )?;
    let mut correct = 0usize;
    for &i in &held_idx {
        let scores = model.forward_one(&data.images[i])?;
        let pred = scores
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        if pred == data.labels[i] as usize {
            correct += 1;
        }
    }
    let report = ClassificationReport {
        held_out_accuracy: correct as f64 / held_idx.len() as f64,
        loss_curve,
        train_count: train_idx.len(),
        held_out_count: held_idx.len(),
    };
    Ok((model, report))
}

/// Train the board model against the auxiliary regression targets.
pub fn train_chess_model(
    positions: &[Board],
    cfg: &TrainConfig,
) -> Result<(Model, RegressionReport)> {
    let inputs: Vec<Tensor> = positions.iter().map(Board::encode).collect();
    let targets: Vec<Tensor> = positions.iter().map(aux_targets).collect();
    let (train_idx, held_idx) = split_indices(positions.len(), cfg.seed)?;
    let (model, loss_curve) = train_supervised(
        chess_model(cfg.seed),
        &gather(&inputs, &train_idx),
        &gather(&targets, &train_idx),
        LossKind::SquaredError,
        cfg,
    )?;
    let (held_out_mse, held_out_r_squared) =
        mse_and_r2(&model, &gather(&inputs, &held_idx), &gather(&targets, &held_idx))?;
    let report = RegressionReport {
        held_out_mse,
        held_out_r_squared,
        loss_curve,
        train_count: train_idx.len(),
        held_out_count: held_idx.len(),
    };
    Ok((model, report))
}

// ─── probe glue ───

/// Bedrooms-per-occupant read off the housing model's tapped layer. The
/// concept is computed on the row in original units; the model sees the
/// normalized features.
pub fn train_housing_probe(
    model: &Model,
    data: &TabularDataset,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(Probe, ProbeReport)> {
    let samples: Vec<(Tensor, Vec<f64>)> = (0..data.len())
        .map(|i| (data.features(i), data.original_row(i)))
        .collect();
    let concept = ConceptFunction::new(
        "bedrooms-per-occupant",
        ConceptKind::Scalar,
        |s: &(Tensor, Vec<f64>)| tabular::concept_bedrooms_ratio(&s.1),
    );
    let (pairs, _) = build_probe_dataset(model, HOUSING_TAP, &samples, |s| s.0.clone(), &concept)?;
    train_probe(&pairs, ConceptKind::Scalar, HOUSING_TAP, lambda, cfg)
}

/// Loop-containing-digit probe on the autoencoder's latent tap.
pub fn train_loopiness_probe(
    autoencoder: &Model,
    data: &ImageDataset,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(Probe, ProbeReport)> {
    let samples: Vec<(Tensor, u8)> = data
        .images
        .iter()
        .cloned()
        .zip(data.labels.iter().copied())
        .collect();
    let concept = ConceptFunction::new("loopiness", ConceptKind::Binary, |s: &(Tensor, u8)| {
        crate::data::images::concept_loopiness(s.1).ok()
    });
    let (pairs, _) =
        build_probe_dataset(autoencoder, LATENT_TAP, &samples, |s| s.0.clone(), &concept)?;
    train_probe(&pairs, ConceptKind::Binary, LATENT_TAP, lambda, cfg)
}

/// Lightness probe on the classifier's tapped layer (scalar in [0,1]).
pub fn train_lightness_probe(
    classifier: &Model,
    data: &ImageDataset,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(Probe, ProbeReport)> {
    let concept = ConceptFunction::new("lightness", ConceptKind::Scalar, |s: &Tensor| {
        Some(crate::data::images::concept_lightness(s))
    });
    let (pairs, _) =
        build_probe_dataset(classifier, FASHION_TAP, &data.images, Clone::clone, &concept)?;
    train_probe(&pairs, ConceptKind::Scalar, FASHION_TAP, lambda, cfg)
}

/// Queen-threat probe on the board model's tapped layer. Positions without
/// a side-to-move queen are skipped (the concept is undefined there).
pub fn train_queen_threat_probe(
    model: &Model,
    positions: &[Board],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(Probe, ProbeReport)> {
    let concept = ConceptFunction::new("queen-threat", ConceptKind::Binary, |b: &Board| {
        boards::concept_queen_threat(b)
    });
    let (pairs, _) = build_probe_dataset(model, CHESS_TAP, positions, Board::encode, &concept)?;
    train_probe(&pairs, ConceptKind::Binary, CHESS_TAP, lambda, cfg)
}
