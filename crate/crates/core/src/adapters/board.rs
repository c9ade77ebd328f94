use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::evaluate;
use crate::chess::{Board, PIECE_PLANES, PLANES, SIZE};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::maximise::{AdapterGraph, ModalityAdapter};
use crate::nn::{Model, ModelBuilder, INPUT, OUTPUT};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{train_supervised, LossKind, TrainConfig};

pub const REMOVE_MASK: &str = "remove_mask";
pub const ADD_MASK: &str = "add_mask";

const CELLS: usize = SIZE * SIZE;

/// Board inputs: two trainable mask tensors over the piece planes, passed
/// through a straight-through binarization. Removals only take effect on
/// occupied squares, additions only on squares left vacant, with per-square
/// plane conflicts resolved by the highest raw activation. The distance is
/// the trained illegality score of the perturbed board plus the L1 mass of
/// both effective masks.
pub struct BoardAdapter {
    pub classifier: Model,
}

struct MaskedNodes {
    combined: NodeId,
    eff_remove: NodeId,
    eff_add: NodeId,
}

/// Shared construction of (s - s⁻) + s⁺ so the graph path, the value-level
/// helpers and the adapter cannot drift apart.
fn build_masked(g: &mut Graph, sample: NodeId, remove: NodeId, add: NodeId) -> MaskedNodes {
    let pieces = g.slice_axis1(sample, 0, PIECE_PLANES);
    let stm = g.slice_axis1(sample, PIECE_PLANES, PLANES);
    let remove_bin = g.binarize_ste(remove);
    let eff_remove = g.mul(remove_bin, pieces);
    let after_remove = g.sub(pieces, eff_remove);
    // Per-square occupancy after removals: sum over piece planes.
    let flat = g.reshape(after_remove, vec![PIECE_PLANES, CELLS]);
    let ones = g.constant(Tensor::filled(&[1, PIECE_PLANES], 1.0));
    let occupancy_flat = g.matmul(ones, flat);
    let occupancy = g.reshape(occupancy_flat, vec![1, 1, SIZE, SIZE]);
    let one = g.constant_scalar(1.0);
    let vacant = g.sub(one, occupancy);
    let add_bin = g.binarize_ste(add);
    // One plane per square: highest raw activation wins, lowest index on
    // ties.
    let selection = g.plane_argmax_one_hot(add);
    let gated = g.mul(add_bin, selection);
    let eff_add = g.mul(gated, vacant);
    let new_pieces = g.add(after_remove, eff_add);
    let combined = g.concat_axis1(new_pieces, stm);
    MaskedNodes {
        combined,
        eff_remove,
        eff_add,
    }
}

fn mask_shape_check(mask: &Tensor, what: &str) -> Result<()> {
    if mask.shape != [PIECE_PLANES, SIZE, SIZE] {
        return Err(Error::ShapeMismatch {
            op: format!("board {what}"),
            lhs: mask.shape.clone(),
            rhs: vec![PIECE_PLANES, SIZE, SIZE],
        });
    }
    Ok(())
}

fn board_const(g: &mut Graph, sample: &Tensor) -> Result<NodeId> {
    // Decoding validates the one-hot-or-empty invariant and the constant
    // side-to-move plane.
    Board::decode(sample)?;
    Ok(g.constant(Tensor::stack(std::slice::from_ref(sample))?))
}

impl ModalityAdapter for BoardAdapter {
    fn pert_specs(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (REMOVE_MASK.into(), vec![PIECE_PLANES, SIZE, SIZE]),
            (ADD_MASK.into(), vec![PIECE_PLANES, SIZE, SIZE]),
        ]
    }

    fn zero_effect(&self) -> Vec<Tensor> {
        vec![
            Tensor::zeros(&[PIECE_PLANES, SIZE, SIZE]),
            Tensor::zeros(&[PIECE_PLANES, SIZE, SIZE]),
        ]
    }

    fn init(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = rng::derive(seed, 3);
        vec![
            rng::uniform_tensor(&[PIECE_PLANES, SIZE, SIZE], -1e-3, 1e-3, &mut rng),
            rng::uniform_tensor(&[PIECE_PLANES, SIZE, SIZE], -1e-3, 1e-3, &mut rng),
        ]
    }

    fn build(
        &self,
        g: &mut Graph,
        model: &Model,
        tap: &str,
        sample: &Tensor,
        perts: &[NodeId],
    ) -> Result<AdapterGraph> {
        let tap_src = model.graph.node(tap)?;
        let sample_node = board_const(g, sample)?;
        let remove = g.reshape(perts[0], vec![1, PIECE_PLANES, SIZE, SIZE]);
        let add = g.reshape(perts[1], vec![1, PIECE_PLANES, SIZE, SIZE]);
        let masked = build_masked(g, sample_node, remove, add);

        let mut input_map = BTreeMap::new();
        input_map.insert(INPUT.to_string(), masked.combined);
        let model_map = model
            .graph
            .inline_into(g, &input_map, &model.params, "model/")?;

        let classifier_map = self.classifier.graph.inline_into(
            g,
            &input_map,
            &self.classifier.params,
            "legality/",
        )?;
        let score = classifier_map[self.classifier.graph.node(OUTPUT)?];
        let illegality = g.sum(score);
        let add_mass = g.l1_norm(masked.eff_add);
        let remove_mass = g.l1_norm(masked.eff_remove);
        let partial = g.add(illegality, add_mass);
        let distance = g.add(partial, remove_mass);
        Ok(AdapterGraph {
            combined: masked.combined,
            tap_value: model_map[tap_src],
            distance,
        })
    }

    /// Raw masks live in [0, 1]; anything outside binarizes the same but
    /// drifts without bound, so clamp after every step.
    fn project(&self, perts: &mut BTreeMap<String, Tensor>) {
        for t in perts.values_mut() {
            for v in t.data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Value-level combine: (s - s⁻) + s⁺ with the same gating as the graph
/// path. Returns the perturbed board encoding.
pub fn board_combine(sample: &Tensor, remove: &Tensor, add: &Tensor) -> Result<Tensor> {
    mask_shape_check(remove, "remove mask")?;
    mask_shape_check(add, "add mask")?;
    let mut g = Graph::new();
    let s = board_const(&mut g, sample)?;
    let r = g.constant(Tensor::stack(std::slice::from_ref(remove))?);
    let a = g.constant(Tensor::stack(std::slice::from_ref(add))?);
    let masked = build_masked(&mut g, s, r, a);
    let values = evaluate(&g, &BTreeMap::new())?;
    Ok(values[masked.combined].unstack()?.swap_remove(0))
}

/// The binarized, occupancy/vacancy-gated masks actually applied by
/// `board_combine`, in (remove, add) order. These are what reports emit;
/// raw optimizer masks stay internal.
pub fn effective_masks(sample: &Tensor, remove: &Tensor, add: &Tensor) -> Result<(Tensor, Tensor)> {
    mask_shape_check(remove, "remove mask")?;
    mask_shape_check(add, "add mask")?;
    let mut g = Graph::new();
    let s = board_const(&mut g, sample)?;
    let r = g.constant(Tensor::stack(std::slice::from_ref(remove))?);
    let a = g.constant(Tensor::stack(std::slice::from_ref(add))?);
    let masked = build_masked(&mut g, s, r, a);
    let values = evaluate(&g, &BTreeMap::new())?;
    let rm = values[masked.eff_remove].unstack()?.swap_remove(0);
    let ad = values[masked.eff_add].unstack()?.swap_remove(0);
    Ok((rm, ad))
}

/// Value-level distance: classifier illegality score on the combined board
/// plus the L1 mass of both effective masks.
pub fn board_distance(
    sample: &Tensor,
    remove: &Tensor,
    add: &Tensor,
    classifier: &Model,
) -> Result<f64> {
    mask_shape_check(remove, "remove mask")?;
    mask_shape_check(add, "add mask")?;
    let mut g = Graph::new();
    let s = board_const(&mut g, sample)?;
    let r = g.constant(Tensor::stack(std::slice::from_ref(remove))?);
    let a = g.constant(Tensor::stack(std::slice::from_ref(add))?);
    let masked = build_masked(&mut g, s, r, a);
    let mut input_map = BTreeMap::new();
    input_map.insert(INPUT.to_string(), masked.combined);
    let map = classifier
        .graph
        .inline_into(&mut g, &input_map, &classifier.params, "legality/")?;
    let score = map[classifier.graph.node(OUTPUT)?];
    let illegality = g.sum(score);
    let add_mass = g.l1_norm(masked.eff_add);
    let remove_mass = g.l1_norm(masked.eff_remove);
    let partial = g.add(illegality, add_mass);
    let distance = g.add(partial, remove_mass);
    let values = evaluate(&g, &BTreeMap::new())?;
    Ok(values[distance].data[0])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub held_out_accuracy: f64,
    pub train_count: usize,
    pub held_out_count: usize,
    pub loss_curve: Vec<f64>,
    pub imbalance_warning: Option<String>,
}

/// Train a small convolutional classifier mapping board encodings to an
/// illegality probability (0 = legal, 1 = illegal).
pub fn train_legality_classifier(
    legal: &[Tensor],
    illegal: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(Model, ClassifierReport)> {
    if legal.is_empty() || illegal.is_empty() {
        return Err(Error::Data(
            "legality training needs both legal and illegal boards".into(),
        ));
    }
    let (larger, smaller) = if legal.len() >= illegal.len() {
        (legal.len(), illegal.len())
    } else {
        (illegal.len(), legal.len())
    };
    let imbalance_warning = if larger > smaller * 100 {
        Some(format!(
            "class imbalance beyond 100:1 ({larger} vs {smaller}); accuracy may be vacuous"
        ))
    } else {
        None
    };

    let mut b = ModelBuilder::new(cfg.seed);
    let x = b.input();
    let c1 = b.conv(x, PLANES, 8, 3, "conv1");
    let h1 = b.relu(c1);
    let flat = b.flatten(h1, 8 * CELLS);
    let d1 = b.dense(flat, 8 * CELLS, 32, "dense1");
    let h2 = b.relu(d1);
    let d2 = b.dense(h2, 32, 1, "dense2");
    let out = b.sigmoid(d2);
    let model = b.build(out);

    let mut inputs: Vec<Tensor> = Vec::with_capacity(legal.len() + illegal.len());
    let mut targets: Vec<Tensor> = Vec::with_capacity(legal.len() + illegal.len());
    for t in legal {
        inputs.push(t.clone());
        targets.push(Tensor::from_vec(vec![1], vec![0.0])?);
    }
    for t in illegal {
        inputs.push(t.clone());
        targets.push(Tensor::from_vec(vec![1], vec![1.0])?);
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut split_rng = rng::derive(cfg.seed, 2);
    rng::shuffle(&mut order, &mut split_rng);
    let held = (inputs.len() / 5).max(1).min(inputs.len() - 1);
    let (held_idx, train_idx) = order.split_at(held);
    let train_in: Vec<Tensor> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
    let train_tg: Vec<Tensor> = train_idx.iter().map(|&i| targets[i].clone()).collect();

    let (model, loss_curve) = train_supervised(
        model,
        &train_in,
        &train_tg,
        LossKind::BinaryCrossEntropy,
        cfg,
    )?;

    let mut correct = 0usize;
    for &i in held_idx {
        let p = model.forward_one(&inputs[i])?.data[0];
        let predicted = if p > 0.5 { 1.0 } else { 0.0 };
        if predicted == targets[i].data[0] {
            correct += 1;
        }
    }
    let report = ClassifierReport {
        held_out_accuracy: correct as f64 / held_idx.len() as f64,
        train_count: train_idx.len(),
        held_out_count: held_idx.len(),
        loss_curve,
        imbalance_warning,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::{self, Color, PieceKind};

    fn kings_only() -> Board {
        let mut b = Board::empty(Color::White);
        b.set(0, 0, Some((Color::White, PieceKind::King)));
        b.set(5, 5, Some((Color::Black, PieceKind::King)));
        b
    }

    fn zero_mask() -> Tensor {
        Tensor::zeros(&[PIECE_PLANES, SIZE, SIZE])
    }

    fn mask_at(plane: usize, rank: usize, file: usize) -> Tensor {
        let mut t = zero_mask();
        t.data[plane * CELLS + rank * SIZE + file] = 1.0;
        t
    }

    #[test]
    fn zero_masks_leave_the_board_alone() {
        let b = Board::starting_position();
        let out = board_combine(&b.encode(), &zero_mask(), &zero_mask()).unwrap();
        assert_eq!(out, b.encode());
    }

    #[test]
    fn removal_takes_a_piece_off() {
        let b = Board::starting_position();
        let plane = chess::plane_of(Color::White, PieceKind::Rook);
        let out = board_combine(&b.encode(), &mask_at(plane, 0, 0), &zero_mask()).unwrap();
        let decoded = Board::decode(&out).unwrap();
        assert_eq!(decoded.get(0, 0), None);
        assert_eq!(decoded.get(0, 5), Some((Color::White, PieceKind::Rook)));
    }

    #[test]
    fn removal_of_an_absent_piece_is_inert() {
        let b = kings_only();
        let plane = chess::plane_of(Color::Black, PieceKind::Queen);
        let out = board_combine(&b.encode(), &mask_at(plane, 3, 3), &zero_mask()).unwrap();
        assert_eq!(out, b.encode());
    }

    #[test]
    fn addition_lands_only_on_vacant_squares() {
        let b = kings_only();
        let queen = chess::plane_of(Color::Black, PieceKind::Queen);
        let onto_empty = board_combine(&b.encode(), &zero_mask(), &mask_at(queen, 3, 3)).unwrap();
        let decoded = Board::decode(&onto_empty).unwrap();
        assert_eq!(decoded.get(3, 3), Some((Color::Black, PieceKind::Queen)));

        // The white king occupies (0, 0); the addition is suppressed.
        let onto_taken = board_combine(&b.encode(), &zero_mask(), &mask_at(queen, 0, 0)).unwrap();
        assert_eq!(onto_taken, b.encode());
    }

    #[test]
    fn removal_then_addition_reuses_the_square() {
        let b = Board::starting_position();
        let rook = chess::plane_of(Color::White, PieceKind::Rook);
        let knight = chess::plane_of(Color::Black, PieceKind::Knight);
        let out = board_combine(&b.encode(), &mask_at(rook, 0, 0), &mask_at(knight, 0, 0)).unwrap();
        let decoded = Board::decode(&out).unwrap();
        assert_eq!(decoded.get(0, 0), Some((Color::Black, PieceKind::Knight)));
    }

    #[test]
    fn conflicting_additions_pick_the_highest_activation() {
        let b = kings_only();
        let q = chess::plane_of(Color::White, PieceKind::Queen);
        let n = chess::plane_of(Color::White, PieceKind::Knight);
        let mut add = zero_mask();
        add.data[q * CELLS + 3 * SIZE + 3] = 0.9;
        add.data[n * CELLS + 3 * SIZE + 3] = 0.7;
        let out = board_combine(&b.encode(), &zero_mask(), &add).unwrap();
        let decoded = Board::decode(&out).unwrap();
        assert_eq!(decoded.get(3, 3), Some((Color::White, PieceKind::Queen)));
    }

    #[test]
    fn combine_preserves_encoding_validity_for_random_masks() {
        // Property: any raw mask pair yields a valid one-hot-or-empty
        // encoding with the side-to-move plane untouched.
        let mut rng = rng::seeded(5);
        let boards: Vec<Tensor> = (0..20)
            .map(|i| {
                if i == 0 {
                    Board::starting_position().encode()
                } else {
                    random_legalish_board(&mut rng).encode()
                }
            })
            .collect();
        for round in 0..50 {
            let remove = rng::uniform_tensor(&[PIECE_PLANES, SIZE, SIZE], -1.0, 2.0, &mut rng);
            let add = rng::uniform_tensor(&[PIECE_PLANES, SIZE, SIZE], -1.0, 2.0, &mut rng);
            for b in &boards {
                let out = board_combine(b, &remove, &add).unwrap();
                let decoded = Board::decode(&out).expect("valid encoding");
                assert_eq!(
                    decoded.side_to_move,
                    Board::decode(b).unwrap().side_to_move,
                    "round {round} altered the side to move"
                );
            }
        }
    }

    fn random_legalish_board(rng: &mut rng::Prng) -> Board {
        use rand::Rng;
        let mut b = Board::empty(Color::White);
        b.set(rng.gen_range(0..SIZE), rng.gen_range(0..3), Some((Color::White, PieceKind::King)));
        loop {
            let (r, f) = (rng.gen_range(0..SIZE), rng.gen_range(3..SIZE));
            if b.get(r, f).is_none() {
                b.set(r, f, Some((Color::Black, PieceKind::King)));
                break;
            }
        }
        for _ in 0..rng.gen_range(0..6) {
            let (r, f) = (rng.gen_range(0..SIZE), rng.gen_range(0..SIZE));
            if b.get(r, f).is_none() {
                b.set(r, f, chess::piece_of_plane(rng.gen_range(0..PIECE_PLANES)));
            }
        }
        b
    }

    #[test]
    fn distance_counts_effective_mask_mass() {
        // Constant-zero classifier: distance reduces to the L1 mass of the
        // effective masks.
        let classifier = constant_zero_classifier();
        let b = Board::starting_position();
        let rook = chess::plane_of(Color::White, PieceKind::Rook);
        let knight = chess::plane_of(Color::Black, PieceKind::Knight);

        let d0 = board_distance(&b.encode(), &zero_mask(), &zero_mask(), &classifier).unwrap();
        assert_eq!(d0, 0.0);

        // One effective removal plus one effective addition.
        let d2 = board_distance(
            &b.encode(),
            &mask_at(rook, 0, 0),
            &mask_at(knight, 3, 3),
            &classifier,
        )
        .unwrap();
        assert_eq!(d2, 2.0);

        // Inert masks (removing an absent piece, adding onto an occupied
        // square) cost nothing.
        let d_inert = board_distance(
            &b.encode(),
            &mask_at(knight, 3, 3),
            &mask_at(rook, 0, 0),
            &classifier,
        )
        .unwrap();
        assert_eq!(d_inert, 0.0);
    }

    fn constant_zero_classifier() -> Model {
        let mut bd = ModelBuilder::new(0);
        let x = bd.input();
        let flat = bd.flatten(x, PLANES * CELLS);
        let zeros = bd.graph.constant(Tensor::zeros(&[PLANES * CELLS, 1]));
        let out = bd.graph.matmul(flat, zeros);
        bd.build(out)
    }

    #[test]
    fn classifier_separates_a_duplicated_pair() {
        let legal = vec![kings_only().encode(); 8];
        let mut bad = kings_only();
        bad.set(2, 2, Some((Color::White, PieceKind::King)));
        let illegal = vec![bad.encode(); 8];
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (model, report) = train_legality_classifier(&legal, &illegal, &cfg).unwrap();
        assert!(report.imbalance_warning.is_none());
        let p_legal = model.forward_one(&kings_only().encode()).unwrap().data[0];
        let p_illegal = model.forward_one(&bad.encode()).unwrap().data[0];
        assert!(
            p_legal < 0.5 && p_illegal > 0.5,
            "scores: legal {p_legal}, illegal {p_illegal}"
        );
    }

    #[test]
    fn imbalance_warning_fires_past_100_to_1() {
        let legal = vec![kings_only().encode(); 202];
        let mut bad = kings_only();
        bad.set(4, 4, Some((Color::Black, PieceKind::King)));
        let illegal = vec![bad.encode(); 2];
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let (_, report) = train_legality_classifier(&legal, &illegal, &cfg).unwrap();
        assert!(report.imbalance_warning.is_some());
    }
}
