//! Datasets: IDX files and synthetic oriented-bar images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One `c x h x w` tensor per sample.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return param_err(format!("{} images but {} labels", images.len(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return param_err(format!("label {l} out of range for {classes} classes"));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated header while reading {what}"),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated payload: expected {len} bytes starting at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn check_magic(c: &mut Cursor, expected: u32) -> Result<()> {
    let magic = c.u32_be("magic")?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Images from an IDX3 unsigned-byte buffer, scaled to `[0, 1]`, shaped `1 x rows x cols`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    check_magic(&mut c, IDX_IMAGES_MAGIC)?;
    let n = c.u32_be("image count")? as usize;
    let rows = c.u32_be("row count")? as usize;
    let cols = c.u32_be("column count")? as usize;
    let plane = rows * cols;
    let payload = c.payload(n * plane)?;
    payload
        .chunks(plane.max(1))
        .take(n)
        .map(|px| Tensor::from_vec(&[1, rows, cols], px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, pos: 0 };
    check_magic(&mut c, IDX_LABELS_MAGIC)?;
    let n = c.u32_be("label count")? as usize;
    Ok(c.payload(n)?.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labs = parse_idx_labels(&std::fs::read(labels)?)?;
    if imgs.len() != labs.len() {
        return param_err(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            imgs.len(),
            labels.display(),
            labs.len()
        ));
    }
    let classes = labs.iter().max().map_or(0, |m| m + 1);
    Dataset::new(imgs, labs, classes)
}

/// Serializes `1 x rows x cols` images with values in `[0, 1]` as IDX3.
pub fn encode_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first().map(|t| t.shape()) {
        Some([1, r, c]) => (*r, *c),
        Some(s) => return param_err(format!("IDX images must be 1 x rows x cols, got {s:?}")),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub noise: f64,
}

fn default_size() -> usize {
    12
}

/// Class-conditional oriented bars: class `c` draws a bar at angle `c * pi / classes`
/// with random center and length, plus Gaussian pixel noise. Classes are
/// assigned round-robin so every class is equally represented.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.classes < 2 {
        return param_err("synthetic data needs at least two classes");
    }
    if spec.size < 6 {
        return param_err("synthetic images must be at least 6 x 6");
    }
    if !(spec.noise >= 0.0) {
        return param_err("noise must be non-negative");
    }
    let s = spec.size as f64;
    let mut images = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let theta = class as f64 * std::f64::consts::PI / spec.classes as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let cx = s / 2.0 - 0.5 + (rng.uniform() - 0.5) * s / 3.0;
        let cy = s / 2.0 - 0.5 + (rng.uniform() - 0.5) * s / 3.0;
        let half = s / 4.0 + rng.uniform() * s / 12.0;
        let mut img = Tensor::zeros(&[1, spec.size, spec.size]);
        for r in 0..spec.size {
            for c in 0..spec.size {
                let (px, py) = (c as f64 - cx, r as f64 - cy);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                let mut v = if across.abs() <= 0.5 && along.abs() <= half { 1.0 } else { 0.0 };
                if spec.noise > 0.0 {
                    v += spec.noise * rng.standard_normal();
                }
                img.data_mut()[r * spec.size + c] = v;
            }
        }
        images.push(img);
        labels.push(class);
    }
    Dataset::new(images, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Four 2x3 images and their labels, byte for byte.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend_from_slice(&[0, 255, 0, 255, 0, 255]);
        img.extend_from_slice(&[255, 255, 255, 0, 0, 0]);
        img.extend_from_slice(&[51, 102, 153, 204, 255, 0]);
        img.extend_from_slice(&[0, 0, 0, 0, 0, 1]);
        let lab = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 4, 3, 1, 0, 2];
        (img, lab)
    }

    #[test]
    fn fixture_parses_to_known_pixels() {
        let (img, lab) = fixture();
        let images = parse_idx_images(&img).unwrap();
        assert_eq!(images.len(), 4);
        assert_eq!(images[0].shape(), &[1, 2, 3]);
        assert_eq!(images[0].data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(images[2].data(), &[0.2, 0.4, 0.6, 0.8, 1.0, 0.0]);
        assert_eq!(images[3].data()[5], 1.0 / 255.0);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 1, 0, 2]);
    }

    #[test]
    fn bad_magic_names_offset() {
        let (mut img, _) = fixture();
        img[3] = 0x01;
        match parse_idx_images(&img) {
            Err(Error::Format { offset: 0, msg }) => assert!(msg.contains("magic")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_offset() {
        let (img, lab) = fixture();
        match parse_idx_images(&img[..30]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_labels(&lab[..6]), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn count_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture();
        let lab = encode_idx_labels(&[0, 1, 2]);
        std::fs::write(dir.path().join("i"), img).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        assert!(load_idx(&dir.path().join("i"), &dir.path().join("l")).is_err());
    }

    #[test]
    fn encode_round_trip() {
        let (img, lab) = fixture();
        let images = parse_idx_images(&img).unwrap();
        assert_eq!(encode_idx_images(&images).unwrap(), img);
        assert_eq!(encode_idx_labels(&parse_idx_labels(&lab).unwrap()), lab);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec { classes: 4, samples: 40, size: 12, noise: 0.2 };
        let a = synth_dataset(&spec, &mut Rng::new(1, 0)).unwrap();
        let b = synth_dataset(&spec, &mut Rng::new(1, 0)).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn noiseless_bars_have_class_orientation() {
        let spec = SynthSpec { classes: 4, samples: 8, size: 12, noise: 0.0 };
        let d = synth_dataset(&spec, &mut Rng::new(2, 0)).unwrap();
        for (img, &l) in d.images.iter().zip(&d.labels) {
            let on: Vec<(usize, usize)> = (0..144)
                .filter(|&i| img.data()[i] == 1.0)
                .map(|i| (i / 12, i % 12))
                .collect();
            assert!(on.len() >= 3);
            let rows: std::collections::BTreeSet<_> = on.iter().map(|p| p.0).collect();
            let cols: std::collections::BTreeSet<_> = on.iter().map(|p| p.1).collect();
            match l {
                0 => assert_eq!(rows.len(), 1, "horizontal bar"),
                2 => assert_eq!(cols.len(), 1, "vertical bar"),
                _ => assert!(rows.len() > 1 && cols.len() > 1, "diagonal bar"),
            }
        }
    }
}
