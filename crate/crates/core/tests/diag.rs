//! Scratch calibration runs; not part of the suite (deleted before ship).

use probemax::adapters::board;
use probemax::data::boards::{self, concept_queen_threat};
use probemax::pipelines;
use probemax::train::{OptimizerKind, TrainConfig};

#[test]
#[ignore]
fn queen_probe_grid() {
    let fresh = boards::generate_queen_boards(20, 73, false);
    let _ = concept_queen_threat(&fresh[0]);
    for &(half, mepochs) in &[(200usize, 40usize), (600, 40), (600, 80)] {
        let mut positions = boards::generate_queen_boards(half, 70, false);
        positions.extend(boards::generate_queen_boards(half, 71, true));
        let (model, mrep) = pipelines::train_chess_model(
            &positions,
            &TrainConfig {
                learning_rate: 3e-3,
                epochs: mepochs,
                seed: 70,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        println!(
            "model half {half} epochs {mepochs}: held-out mse {:.5}",
            mrep.held_out_mse
        );
        for &(lambda, epochs, lr) in &[(1e-2, 300, 3e-3), (1e-3, 300, 3e-3)] {
            let cfg = TrainConfig {
                learning_rate: lr,
                epochs,
                seed: 70,
                ..TrainConfig::default()
            };
            let (probe, rep) =
                pipelines::train_queen_threat_probe(&model, &positions, lambda, &cfg).unwrap();
            // Fresh unthreatened boards should read LOW; confidently wrong
            // ones fake instant convergence in the maximiser.
            let mut outputs = Vec::new();
            for b in &fresh {
                let acts = model.activations(&probe.tap, &b.encode()).unwrap();
                let n = acts.len();
                let t = probemax::tensor::Tensor::from_vec(vec![n], acts).unwrap();
                let p = probemax::probe::probe_predict(&probe, &t).unwrap();
                outputs.push(p);
            }
            let high = outputs.iter().filter(|&&p| p > 0.8).count();
            let max = outputs.iter().cloned().fold(0.0, f64::max);
            println!(
                "  probe lambda {lambda:.0e} epochs {epochs} lr {lr:.0e}: acc {:?} fresh>0.8: {high}/20 max {max:.3}",
                rep.accuracy
            );
        }
    }
}

#[test]
#[ignore]
fn legality_classifier_grid() {
    for &n in &[1000usize, 2000, 4000] {
        let (legal, illegal) = boards::generate_classifier_data(n, 72);
        println!("corpus: {} legal, {} illegal", legal.len(), illegal.len());
        for &(epochs, lr) in &[(40usize, 3e-3), (80, 3e-3), (80, 1e-3)] {
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: 32,
                epochs,
                optimizer: OptimizerKind::Adam,
                seed: 72,
            };
            let (_, rep) = board::train_legality_classifier(&legal, &illegal, &cfg).unwrap();
            let first = rep.loss_curve.first().unwrap();
            let last = rep.loss_curve.last().unwrap();
            println!(
                "  n {n} epochs {epochs:>3} lr {lr:.0e}: acc {:.3} loss {first:.4}->{last:.4}",
                rep.held_out_accuracy
            );
        }
    }
}
