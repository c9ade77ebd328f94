use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

pub const SIDE: usize = 28;
const PIXELS: usize = SIDE * SIDE;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// Tensors of shape [1, H, W] with values in [0, 1].
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub source: String,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Data(format!("IDX file truncated at byte {at}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "image file magic must be {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(Error::Data(format!(
            "image file should hold {need} bytes for {n} {rows}x{cols} images, has {}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let at = 16 + i * rows * cols;
        let data: Vec<f64> = bytes[at..at + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::from_vec(vec![1, rows, cols], data)?);
    }
    Ok(images)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "label file magic must be {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n = read_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Data(format!(
            "label file should hold {} bytes for {n} labels, has {}",
            8 + n,
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

pub fn emit_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first() {
        Some(t) if t.rank() == 3 && t.shape[0] == 1 => (t.shape[1], t.shape[2]),
        Some(t) => {
            return Err(Error::ShapeMismatch {
                op: "IDX image".into(),
                lhs: t.shape.clone(),
                rhs: vec![1, SIDE, SIDE],
            })
        }
        None => (SIDE, SIDE),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for t in images {
        if t.shape != [1, rows, cols] {
            return Err(Error::ShapeMismatch {
                op: "IDX image".into(),
                lhs: t.shape.clone(),
                rhs: vec![1, rows, cols],
            });
        }
        out.extend(t.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn emit_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let source = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(ImageDataset {
        images,
        labels,
        source,
    })
}

pub fn save_idx(dataset: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    std::fs::write(images_path, emit_idx_images(&dataset.images)?)?;
    std::fs::write(labels_path, emit_idx_labels(&dataset.labels))?;
    Ok(())
}

/// Whether the canonical drawing of the digit contains a closed loop:
/// exactly the digits 0, 6, 8 and 9.
pub fn concept_loopiness(label: u8) -> Result<f64> {
    if label > 9 {
        return Err(Error::Data(format!("digit label out of range: {label}")));
    }
    Ok(if matches!(label, 0 | 6 | 8 | 9) { 1.0 } else { 0.0 })
}

pub const LIGHTNESS_THRESHOLD: f64 = 0.3;

/// Fraction of pixels strictly brighter than the threshold.
pub fn concept_lightness(image: &Tensor) -> f64 {
    let lit = image
        .data
        .iter()
        .filter(|&&v| v > LIGHTNESS_THRESHOLD)
        .count();
    lit as f64 / image.numel() as f64
}

// ─── synthetic rasterizer ───

struct Canvas {
    data: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            data: vec![0.0; PIXELS],
        }
    }

    fn stamp(&mut self, x: f64, y: f64, radius: f64, intensity: f64) {
        let x0 = ((x - radius).floor().max(0.0)) as usize;
        let y0 = ((y - radius).floor().max(0.0)) as usize;
        let x1 = ((x + radius).ceil().min(SIDE as f64 - 1.0)) as usize;
        let y1 = ((y + radius).ceil().min(SIDE as f64 - 1.0)) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - x;
                let dy = py as f64 - y;
                if dx * dx + dy * dy <= radius * radius {
                    let cell = &mut self.data[py * SIDE + px];
                    *cell = cell.max(intensity);
                }
            }
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, radius: f64, intensity: f64) {
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (len / 0.3).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.stamp(x0 + t * (x1 - x0), y0 + t * (y1 - y0), radius, intensity);
        }
    }

    /// Elliptic arc in screen coordinates (y grows downward): angle 0
    /// points east, pi/2 points to the bottom of the canvas.
    #[allow(clippy::too_many_arguments)]
    fn arc(
        &mut self,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        th0: f64,
        th1: f64,
        radius: f64,
        intensity: f64,
    ) {
        let span = (th1 - th0).abs();
        let steps = ((span * rx.max(ry)) / 0.3).ceil().max(4.0) as usize;
        for i in 0..=steps {
            let th = th0 + (th1 - th0) * i as f64 / steps as f64;
            self.stamp(cx + rx * th.cos(), cy + ry * th.sin(), radius, intensity);
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, radius: f64, intensity: f64) {
        self.arc(cx, cy, rx, ry, 0.0, 2.0 * std::f64::consts::PI, radius, intensity);
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, intensity: f64) {
        let xa = x0.max(0.0).round() as usize;
        let ya = y0.max(0.0).round() as usize;
        let xb = x1.min(SIDE as f64 - 1.0).round() as usize;
        let yb = y1.min(SIDE as f64 - 1.0).round() as usize;
        for py in ya..=yb {
            for px in xa..=xb {
                let cell = &mut self.data[py * SIDE + px];
                *cell = cell.max(intensity);
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        Tensor {
            shape: vec![1, SIDE, SIDE],
            data: self.data,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_digit(c: &mut Canvas, digit: u8, cx: f64, cy: f64, w: f64, h: f64, r: f64, i: f64) {
    use std::f64::consts::PI;
    match digit {
        0 => c.ellipse(cx, cy, w, h, r, i),
        1 => {
            c.line(cx, cy - h, cx, cy + h, r, i);
            c.line(cx, cy - h, cx - 0.5 * w, cy - 0.55 * h, r, i);
        }
        2 => {
            c.arc(cx, cy - 0.45 * h, w, 0.5 * h, PI, 2.0 * PI, r, i);
            c.line(cx + w, cy - 0.45 * h, cx - w, cy + h, r, i);
            c.line(cx - w, cy + h, cx + w, cy + h, r, i);
        }
        3 => {
            c.arc(cx - 0.15 * w, cy - 0.5 * h, w, 0.52 * h, -0.5 * PI, 0.5 * PI, r, i);
            c.arc(cx - 0.15 * w, cy + 0.5 * h, w, 0.52 * h, -0.5 * PI, 0.5 * PI, r, i);
        }
        4 => {
            c.line(cx + 0.2 * w, cy - h, cx - w, cy + 0.15 * h, r, i);
            c.line(cx - w, cy + 0.15 * h, cx + w, cy + 0.15 * h, r, i);
            c.line(cx + 0.45 * w, cy - 0.4 * h, cx + 0.45 * w, cy + h, r, i);
        }
        5 => {
            c.line(cx + w, cy - h, cx - w, cy - h, r, i);
            c.line(cx - w, cy - h, cx - w, cy - 0.1 * h, r, i);
            c.arc(cx - 0.1 * w, cy + 0.45 * h, 1.1 * w, 0.55 * h, -0.5 * PI, 1.05 * PI, r, i);
        }
        6 => {
            c.ellipse(cx, cy + 0.45 * h, 0.8 * w, 0.55 * h, r, i);
            c.line(cx - 0.72 * w, cy + 0.2 * h, cx + 0.6 * w, cy - h, r, i);
        }
        7 => {
            c.line(cx - w, cy - h, cx + w, cy - h, r, i);
            c.line(cx + w, cy - h, cx - 0.2 * w, cy + h, r, i);
        }
        8 => {
            c.ellipse(cx, cy - 0.5 * h, 0.75 * w, 0.5 * h, r, i);
            c.ellipse(cx, cy + 0.5 * h, 0.9 * w, 0.55 * h, r, i);
        }
        9 => {
            c.ellipse(cx, cy - 0.45 * h, 0.8 * w, 0.55 * h, r, i);
            c.line(cx + 0.72 * w, cy - 0.2 * h, cx + 0.4 * w, cy + h, r, i);
        }
        _ => unreachable!("digit labels are 0-9"),
    }
}

/// Seeded stroke-drawn digits: balanced labels 0-9 with jittered geometry.
/// Closed loops appear exactly in the glyphs for 0, 6, 8 and 9.
pub fn generate_digits(n: usize, seed: u64) -> ImageDataset {
    let mut rng = rng::derive(seed, 11);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let digit = (k % 10) as u8;
        let mut c = Canvas::new();
        let cx = 13.5 + rng::uniform(&mut rng, -1.5, 1.5);
        let cy = 13.5 + rng::uniform(&mut rng, -1.5, 1.5);
        let w = rng::uniform(&mut rng, 4.0, 6.0);
        let h = rng::uniform(&mut rng, 7.0, 9.5);
        let r = rng::uniform(&mut rng, 0.8, 1.4);
        let i = rng::uniform(&mut rng, 0.75, 1.0);
        draw_digit(&mut c, digit, cx, cy, w, h, r, i);
        images.push(c.into_tensor());
        labels.push(digit);
    }
    ImageDataset {
        images,
        labels,
        source: "synthetic-digits".into(),
    }
}

fn draw_fashion(c: &mut Canvas, label: u8, rng: &mut Prng) {
    use std::f64::consts::PI;
    let cx = 13.5 + rng::uniform(rng, -1.0, 1.0);
    let cy = 13.5 + rng::uniform(rng, -1.0, 1.0);
    let bw = rng::uniform(rng, 4.0, 6.5);
    let bh = rng::uniform(rng, 6.0, 8.5);
    let i = rng::uniform(rng, 0.15, 1.0);
    match label {
        // Shirt: torso block plus sleeves.
        0 => {
            c.fill_rect(cx - bw, cy - bh, cx + bw, cy + bh, i);
            c.fill_rect(cx - bw - 3.0, cy - bh, cx - bw, cy - bh + 4.0, i);
            c.fill_rect(cx + bw, cy - bh, cx + bw + 3.0, cy - bh + 4.0, i);
        }
        // Trousers: waistband and two legs.
        1 => {
            let leg = (0.55 * bw).max(2.0);
            c.fill_rect(cx - bw, cy - bh, cx + bw, cy - bh + 3.0, i);
            c.fill_rect(cx - bw, cy - bh, cx - bw + leg, cy + bh, i);
            c.fill_rect(cx + bw - leg, cy - bh, cx + bw, cy + bh, i);
        }
        // Bag: body plus a handle arc.
        2 => {
            c.fill_rect(cx - bw, cy - 1.0, cx + bw, cy + bh, i);
            c.arc(cx, cy - 1.0, 0.6 * bw, 5.0, PI, 2.0 * PI, 0.9, i);
        }
        // Shoe: sole wedge plus ankle shaft on the left.
        3 => {
            c.fill_rect(cx - bw - 2.0, cy + 1.0, cx + bw + 2.0, cy + 0.55 * bh, i);
            c.fill_rect(cx - bw - 2.0, cy - 0.7 * bh, cx - bw + 2.5, cy + 1.0, i);
        }
        _ => unreachable!("fashion labels are 0-3"),
    }
}

pub const FASHION_CLASSES: usize = 4;

/// Seeded clothing silhouettes in four classes (shirt, trousers, bag,
/// shoe). Fill intensity varies across samples and per-pixel speckle
/// varies within them, so the fraction of pixels above the lightness
/// threshold moves smoothly with the base intensity instead of jumping.
pub fn generate_fashion(n: usize, seed: u64) -> ImageDataset {
    let mut rng = rng::derive(seed, 12);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = (k % FASHION_CLASSES) as u8;
        let mut c = Canvas::new();
        draw_fashion(&mut c, label, &mut rng);
        for v in &mut c.data {
            if *v > 0.0 {
                *v = (*v * rng::uniform(&mut rng, 0.6, 1.4)).clamp(0.0, 1.0);
            }
        }
        images.push(c.into_tensor());
        labels.push(label);
    }
    ImageDataset {
        images,
        labels,
        source: "synthetic-fashion".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_idx_fixture_parses() {
        // Two 2x2 images, pixel bytes 0, 51, 102, 153 and 204, 255, 0, 255.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255]);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].shape, vec![1, 2, 2]);
        assert_eq!(
            images[0].data,
            vec![0.0, 51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0]
        );
        assert_eq!(images[1].data[1], 1.0);
        // Byte-identical round trip through the emitter.
        assert_eq!(emit_idx_images(&images).unwrap(), bytes);
    }

    #[test]
    fn empty_image_file_is_fine_but_corruption_is_not() {
        let mut empty = Vec::new();
        empty.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        empty.extend_from_slice(&0u32.to_be_bytes());
        empty.extend_from_slice(&28u32.to_be_bytes());
        empty.extend_from_slice(&28u32.to_be_bytes());
        assert!(parse_idx_images(&empty).unwrap().is_empty());

        let mut bad_magic = empty.clone();
        bad_magic[3] = 0x01;
        assert!(parse_idx_images(&bad_magic).is_err());

        let mut truncated = empty.clone();
        truncated[7] = 3;
        assert!(parse_idx_images(&truncated).is_err());
    }

    #[test]
    fn label_file_round_trip_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_digits(30, 3);
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        save_idx(&d, &ip, &lp).unwrap();
        let loaded = load_idx_images(&ip, &lp).unwrap();
        assert_eq!(loaded.labels, d.labels);
        assert_eq!(loaded.len(), 30);
        // Quantization to bytes is exact for data that came from bytes.
        let re_emitted = emit_idx_images(&loaded.images).unwrap();
        assert_eq!(re_emitted, std::fs::read(&ip).unwrap());

        let short = emit_idx_labels(&d.labels[..29]);
        std::fs::write(&lp, short).unwrap();
        assert!(load_idx_images(&ip, &lp).is_err());
    }

    #[test]
    fn loopiness_follows_the_digit_set() {
        for (digit, expect) in [
            (0, 1.0),
            (1, 0.0),
            (2, 0.0),
            (3, 0.0),
            (4, 0.0),
            (5, 0.0),
            (6, 1.0),
            (7, 0.0),
            (8, 1.0),
            (9, 1.0),
        ] {
            assert_eq!(concept_loopiness(digit).unwrap(), expect);
        }
        assert!(concept_loopiness(10).is_err());
    }

    #[test]
    fn lightness_counts_strictly_above_threshold() {
        let dark = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(concept_lightness(&dark), 0.0);
        let bright = Tensor::filled(&[1, 4, 4], 1.0);
        assert_eq!(concept_lightness(&bright), 1.0);
        let mut half = Tensor::zeros(&[1, 4, 4]);
        for i in 0..8 {
            half.data[i] = 0.9;
        }
        assert_eq!(concept_lightness(&half), 0.5);
        let boundary = Tensor::filled(&[1, 4, 4], LIGHTNESS_THRESHOLD);
        assert_eq!(concept_lightness(&boundary), 0.0);
    }

    #[test]
    fn generators_are_deterministic_and_in_range() {
        let a = generate_digits(40, 5);
        let b = generate_digits(40, 5);
        assert_eq!(a, b);
        assert_ne!(a, generate_digits(40, 6));
        for (img, label) in a.images.iter().zip(&a.labels) {
            assert!(*label <= 9);
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let ink: f64 = img.data.iter().sum();
            assert!(ink > 5.0, "digit {label} drew almost nothing");
        }
        assert_eq!(a.labels[..10], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);

        let f = generate_fashion(40, 5);
        assert_eq!(f, generate_fashion(40, 5));
        for (img, label) in f.images.iter().zip(&f.labels) {
            assert!(*label < FASHION_CLASSES as u8);
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Fill intensity spans the lightness threshold, so the concept
        // takes genuinely different values across samples.
        let values: Vec<f64> = f.images.iter().map(concept_lightness).collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(0.0, f64::max);
        assert!(lo == 0.0, "expected some fully-dark samples, min {lo}");
        assert!(hi > 0.2, "expected some bright samples, max {hi}");
    }

    #[test]
    fn digit_classes_are_visually_distinct() {
        let d = generate_digits(10, 1);
        for a in 0..10 {
            for b in (a + 1)..10 {
                let diff: f64 = d.images[a]
                    .data
                    .iter()
                    .zip(&d.images[b].data)
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(
                    diff > 10.0,
                    "digits {a} and {b} are nearly identical (L1 {diff})"
                );
            }
        }
    }
}
