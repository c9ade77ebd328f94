use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Column order used everywhere, including emitted delta tables.
pub const FEATURES: [&str; 6] = ["MedInc", "HAge", "AveRms", "AveBedrms", "Pop", "AveOcp"];
pub const TARGET: &str = "Target";

pub const MED_INC: usize = 0;
pub const H_AGE: usize = 1;
pub const AVE_RMS: usize = 2;
pub const AVE_BEDRMS: usize = 3;
pub const POP: usize = 4;
pub const AVE_OCP: usize = 5;

/// Per-feature z-score statistics; standard deviations of degenerate
/// (constant) columns are clamped to 1 so normalization stays invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    /// Deltas transform without the mean shift.
    pub fn delta_to_original(&self, delta: &[f64]) -> Vec<f64> {
        delta.iter().zip(&self.stds).map(|(d, s)| d * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    /// One row per sample, `FEATURES` order.
    pub rows: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    /// Present once `normalize` has run; maps rows back to original units.
    pub normalization: Option<Normalization>,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn features(&self, i: usize) -> Tensor {
        Tensor {
            shape: vec![FEATURES.len()],
            data: self.rows[i].clone(),
        }
    }

    /// The row in original units regardless of normalization state.
    pub fn original_row(&self, i: usize) -> Vec<f64> {
        match &self.normalization {
            Some(n) => n.invert(&self.rows[i]),
            None => self.rows[i].clone(),
        }
    }
}

pub fn load_tabular_csv(path: &Path) -> Result<TabularDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = FEATURES.iter().copied().chain([TARGET]).collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Data(format!(
            "CSV header must be {expected:?}, got {got:?}"
        )));
    }
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut values = Vec::with_capacity(expected.len());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "row {}: column {} is not numeric: {cell:?}",
                    i + 1,
                    expected[j]
                ))
            })?;
            values.push(v);
        }
        if values.len() != expected.len() {
            return Err(Error::Data(format!(
                "row {}: expected {} cells, got {}",
                i + 1,
                expected.len(),
                values.len()
            )));
        }
        target.push(values.pop().unwrap());
        rows.push(values);
    }
    Ok(TabularDataset {
        rows,
        target,
        normalization: None,
    })
}

pub fn save_tabular_csv(path: &Path, dataset: &TabularDataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<&str> = FEATURES.iter().copied().chain([TARGET]).collect();
    writer.write_record(&header)?;
    for (row, t) in dataset.rows.iter().zip(&dataset.target) {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        record.push(format!("{t}"));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-feature z-score normalization. Statistics are computed from the
/// input and retained so deltas can be reported in original units.
pub fn normalize(dataset: &TabularDataset) -> Result<TabularDataset> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot normalize an empty dataset".into()));
    }
    let n = dataset.len() as f64;
    let dim = FEATURES.len();
    let mut means = vec![0.0; dim];
    for row in &dataset.rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut stds = vec![0.0; dim];
    for row in &dataset.rows {
        for ((s, v), m) in stds.iter_mut().zip(row).zip(&means) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in stds.iter_mut() {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let stats = Normalization { means, stds };
    let rows = dataset.rows.iter().map(|r| stats.apply(r)).collect();
    // Composed statistics keep pointing at the original units.
    let normalization = match &dataset.normalization {
        None => stats,
        Some(prev) => Normalization {
            means: prev
                .means
                .iter()
                .zip(prev.stds.iter().zip(&stats.means))
                .map(|(m0, (s0, m1))| m0 + s0 * m1)
                .collect(),
            stds: prev
                .stds
                .iter()
                .zip(&stats.stds)
                .map(|(s0, s1)| s0 * s1)
                .collect(),
        },
    };
    Ok(TabularDataset {
        rows,
        target: dataset.target.clone(),
        normalization: Some(normalization),
    })
}

/// Ratio of bedrooms per occupant, on a row in original units. Zero
/// occupancy has no defined ratio, so such samples are skipped.
pub fn concept_bedrooms_ratio(row: &[f64]) -> Option<f64> {
    if row[AVE_OCP] == 0.0 {
        None
    } else {
        Some(row[AVE_BEDRMS] / row[AVE_OCP])
    }
}

/// Seeded synthetic dataset with the same column semantics as the
/// California-housing-style schema: income, house age, rooms, bedrooms,
/// population, occupancy, and a price-like target that depends on income
/// and on the bedrooms-per-occupant ratio so the ratio is recoverable from
/// a trained regressor's features.
pub fn generate_housing(n: usize, seed: u64) -> TabularDataset {
    let mut rng = rng::derive(seed, 10);
    let mut rows = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for _ in 0..n {
        let med_inc = (rng::normal(&mut rng) * 0.5 + 1.1).exp().clamp(0.5, 15.0);
        let h_age = (rng::uniform(&mut rng, 1.0, 52.0)).round();
        let ave_rms = (rng::normal(&mut rng) * 1.2 + 5.3).clamp(1.0, 12.0);
        let ave_bedrms = (ave_rms * rng::uniform(&mut rng, 0.15, 0.30)).clamp(0.3, 4.0);
        let pop = rng::uniform(&mut rng, 300.0, 3600.0).round();
        let ave_ocp = (rng::normal(&mut rng) * 0.8 + 3.0).clamp(0.8, 8.0);
        let ratio = ave_bedrms / ave_ocp;
        let noise = rng::normal(&mut rng) * 0.25;
        let price = (0.45 * med_inc + 1.8 * ratio + 0.12 * ave_rms - 0.02 * h_age
            - 0.00005 * pop
            + noise)
            .max(0.15);
        rows.push(vec![med_inc, h_age, ave_rms, ave_bedrms, pop, ave_ocp]);
        target.push(price);
    }
    TabularDataset {
        rows,
        target,
        normalization: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TabularDataset {
        TabularDataset {
            rows: vec![
                vec![2.0, 10.0, 4.0, 1.0, 1000.0, 2.0],
                vec![4.0, 30.0, 6.0, 2.0, 2000.0, 4.0],
            ],
            target: vec![1.0, 2.0],
            normalization: None,
        }
    }

    #[test]
    fn two_row_statistics_match_hand_arithmetic() {
        let d = normalize(&toy()).unwrap();
        let stats = d.normalization.as_ref().unwrap();
        assert_eq!(stats.means, vec![3.0, 20.0, 5.0, 1.5, 1500.0, 3.0]);
        // Population std of {a, b} is |a - b| / 2.
        assert_eq!(stats.stds, vec![1.0, 10.0, 1.0, 0.5, 500.0, 1.0]);
        assert_eq!(d.rows[0], vec![-1.0; 6]);
        assert_eq!(d.rows[1], vec![1.0; 6]);
    }

    #[test]
    fn constant_column_gets_unit_std_and_zeroed_values() {
        let mut t = toy();
        t.rows[0][1] = 25.0;
        t.rows[1][1] = 25.0;
        let d = normalize(&t).unwrap();
        let stats = d.normalization.as_ref().unwrap();
        assert_eq!(stats.stds[1], 1.0);
        assert_eq!(d.rows[0][1], 0.0);
        assert_eq!(d.rows[1][1], 0.0);
    }

    #[test]
    fn normalize_is_idempotent_and_invertible() {
        let raw = generate_housing(200, 4);
        let once = normalize(&raw).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.rows.iter().zip(&twice.rows) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        // Round trip back to original units, including through the second
        // normalization's composed statistics.
        for i in 0..raw.len() {
            for (x, y) in raw.rows[i].iter().zip(&once.original_row(i)) {
                assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in raw.rows[i].iter().zip(&twice.original_row(i)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ratio_concept_handles_edge_cases() {
        let mut row = vec![3.0, 20.0, 5.0, 1.0, 1200.0, 1.0];
        assert_eq!(concept_bedrooms_ratio(&row), Some(1.0));
        row[AVE_BEDRMS] = 0.0;
        assert_eq!(concept_bedrooms_ratio(&row), Some(0.0));
        row[AVE_BEDRMS] = 2.0;
        row[AVE_OCP] = 4.0;
        assert_eq!(concept_bedrooms_ratio(&row), Some(0.5));
        row[AVE_OCP] = 0.0;
        assert_eq!(concept_bedrooms_ratio(&row), None);
    }

    #[test]
    fn csv_round_trip_and_header_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("housing.csv");
        let d = generate_housing(50, 9);
        save_tabular_csv(&path, &d).unwrap();
        let loaded = load_tabular_csv(&path).unwrap();
        assert_eq!(loaded.rows, d.rows);
        assert_eq!(loaded.target, d.target);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "MedInc,HAge\n1,2\n").unwrap();
        assert!(load_tabular_csv(&bad).is_err());

        let nonnum = dir.path().join("nonnum.csv");
        std::fs::write(
            &nonnum,
            "MedInc,HAge,AveRms,AveBedrms,Pop,AveOcp,Target\n1,2,3,x,5,6,7\n",
        )
        .unwrap();
        let err = load_tabular_csv(&nonnum).unwrap_err();
        assert!(err.to_string().contains("AveBedrms"));
    }

    #[test]
    fn generator_is_deterministic_and_plausible() {
        let a = generate_housing(300, 7);
        let b = generate_housing(300, 7);
        assert_eq!(a, b);
        let c = generate_housing(300, 8);
        assert_ne!(a, c);
        for (row, t) in a.rows.iter().zip(&a.target) {
            assert!(row[MED_INC] > 0.0 && row[MED_INC] <= 15.0);
            assert!(row[AVE_BEDRMS] <= row[AVE_RMS]);
            assert!(row[AVE_OCP] > 0.0);
            assert!(*t > 0.0);
        }
        // The target visibly tracks the probed ratio.
        let ratios: Vec<f64> = a
            .rows
            .iter()
            .map(|r| concept_bedrooms_ratio(r).unwrap())
            .collect();
        let corr = correlation(&ratios, &a.target);
        assert!(corr > 0.2, "ratio/target correlation too weak: {corr}");
    }

    fn correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }
}
