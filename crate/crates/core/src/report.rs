//! Artifact emission: run manifests, delta tables, grayscale images, board
//! diagrams, and machine-readable reports. Every artifact except the
//! manifest is a pure function of its inputs, so reruns with the same seed
//! produce byte-identical files; wall-clock timestamps live only in the
//! manifest.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::chess::{self, Board};
use crate::data::boards::concept_queen_threat;
use crate::data::tabular::FEATURES;
use crate::error::{Error, Result};
use crate::maximise::RunStatus;
use crate::tensor::Tensor;

// ─── manifest ───

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    /// Echo of the parsed configuration so the artifact set is
    /// self-describing.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Artifact file names relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub version: String,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_path: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config_path: config_path.into(),
            config,
            seed,
            outputs: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn record(&mut self, artifact: &str) {
        self.outputs.push(artifact.to_string());
    }

    /// Stamp the finish time and write `manifest.json` into `dir`.
    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_unix_ms = now_ms();
        save_json(&dir.join("manifest.json"), self)
    }
}

// ─── generic JSON ───

/// Pretty JSON plus trailing newline. f64 values round-trip bit-exactly
/// (shortest-representation printing, exact parsing).
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ─── tabular deltas ───

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRow {
    pub sample_index: usize,
    /// Per-feature input changes in original (denormalized) units.
    pub deltas: Vec<f64>,
    pub probe_before: f64,
    pub probe_after: f64,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::from("sample");
        for f in FEATURES {
            out.push_str(",d");
            out.push_str(f);
        }
        out.push_str(",probe_before,probe_after,status\n");
        for row in &self.rows {
            if row.deltas.len() != FEATURES.len() {
                return Err(Error::Data(format!(
                    "delta row has {} features, expected {}",
                    row.deltas.len(),
                    FEATURES.len()
                )));
            }
            out.push_str(&row.sample_index.to_string());
            for d in &row.deltas {
                out.push(',');
                out.push_str(&format!("{d}"));
            }
            out.push_str(&format!(
                ",{},{},{}\n",
                row.probe_before,
                row.probe_after,
                row.status.as_str()
            ));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

// ─── grayscale images ───

/// Binary PGM (P5, maxval 255) bytes for a [1, H, W] image in [0, 1].
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: "PGM image".into(),
            lhs: image.shape.clone(),
            rhs: vec![1, 0, 0],
        });
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn save_pgm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(image)?)?;
    Ok(())
}

// ─── board diagrams ───

/// Before/after text diagrams with rule-oracle verdicts: legality of each
/// position and the ground-truth queen-threat value where defined.
pub fn board_report(before: &Board, after: &Board) -> String {
    let mut out = String::new();
    for (title, board) in [("before", before), ("after", after)] {
        out.push_str("== ");
        out.push_str(title);
        out.push_str(" ==\n");
        out.push_str(&board.to_text());
        let violations = chess::legality_violations(board);
        if violations.is_empty() {
            out.push_str("legal: yes\n");
        } else {
            out.push_str("legal: no\n");
            for v in &violations {
                out.push_str("  violation: ");
                out.push_str(v);
                out.push('\n');
            }
        }
        match concept_queen_threat(board) {
            Some(v) => out.push_str(&format!("queen threatened: {}\n", v == 1.0)),
            None => out.push_str("queen threatened: undefined (no queen for the mover)\n"),
        }
        out.push('\n');
    }
    out
}

// ─── lambda sweeps ───

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda2: f64,
    pub probe_output: f64,
    pub distance: f64,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("lambda2,probe_output,distance,status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.lambda2,
                r.probe_output,
                r.distance,
                r.status.as_str()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}
