//! Seeded synthetic "abnormality" datasets: Gaussian blobs over a noisy
//! background, with ground-truth masks and optional text reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageBuffer, Luma};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::io::OutputLock;

/// One blob family; each family is a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobKind {
    pub name: &'static str,
    /// +1 for bright blobs, −1 for dark ones.
    pub sign: f64,
    pub radius_scale: usize,
}

pub const BLOB_KINDS: [BlobKind; 3] = [
    BlobKind {
        name: "nodule",
        sign: 1.0,
        radius_scale: 1,
    },
    BlobKind {
        name: "cavity",
        sign: -1.0,
        radius_scale: 1,
    },
    BlobKind {
        name: "mass",
        sign: 1.0,
        radius_scale: 2,
    },
];

const FILLER: [&str; 12] = [
    "lungs",
    "clear",
    "heart",
    "size",
    "normal",
    "no",
    "acute",
    "process",
    "stable",
    "chest",
    "view",
    "unremarkable",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub side: usize,
    /// Mask radius of the base blob; the Gaussian σ is half of it.
    pub radius: usize,
    pub intensity: f64,
    pub noise_sigma: f64,
    pub background: f64,
    /// Number of blob families (1 to 3), one class each.
    pub classes: usize,
    /// Put half of the positives' evidence only in the report text.
    pub text_split: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 500,
            seed: 0,
            side: 32,
            radius: 3,
            intensity: 0.4,
            noise_sigma: 0.1,
            background: 0.5,
            classes: 1,
            text_split: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub class: usize,
    pub row: usize,
    pub col: usize,
    pub radius: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// Row-major `side × side` intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// Union of the drawn blobs' supports (distance ≤ radius).
    pub mask: Vec<bool>,
    pub labels: Vec<bool>,
    pub blobs: Vec<Blob>,
    pub report: Option<String>,
}

impl SyntheticSpec {
    pub fn kinds(&self) -> &'static [BlobKind] {
        &BLOB_KINDS[..self.classes]
    }

    pub fn class_names(&self) -> Vec<String> {
        self.kinds().iter().map(|k| k.name.to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            bail!("need at least 4 images, got {}", self.n);
        }
        if !(1..=BLOB_KINDS.len()).contains(&self.classes) {
            bail!("classes must be between 1 and {}", BLOB_KINDS.len());
        }
        if self.radius == 0 {
            bail!("blob radius must be positive");
        }
        let widest = self
            .kinds()
            .iter()
            .map(|k| k.radius_scale)
            .max()
            .unwrap_or(1)
            * self.radius;
        if 2 * widest + 1 > self.side {
            bail!(
                "a blob of radius {widest} does not fit in a {0}x{0} image",
                self.side
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bail!("noise sigma must be finite and non-negative");
        }
        Ok(())
    }
}

/// Generates the samples in memory. Each class is present independently with
/// probability 1/2.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let side = spec.side;
    let mut samples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut clean = vec![spec.background; side * side];
        let mut mask = vec![false; side * side];
        let mut labels = Vec::with_capacity(spec.classes);
        let mut blobs = Vec::new();
        let mut mentions = Vec::new();
        for (class, kind) in spec.kinds().iter().enumerate() {
            let positive = rng.random_bool(0.5);
            labels.push(positive);
            if !positive {
                continue;
            }
            if spec.text_split && rng.random_bool(0.5) {
                mentions.push(kind.name);
                continue;
            }
            let radius = spec.radius * kind.radius_scale;
            let row = rng.random_range(radius..side - radius);
            let col = rng.random_range(radius..side - radius);
            let sigma = radius as f64 / 2.0;
            for r in 0..side {
                for c in 0..side {
                    let d2 = (r as f64 - row as f64).powi(2) + (c as f64 - col as f64).powi(2);
                    clean[r * side + c] +=
                        kind.sign * spec.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                    if d2 <= (radius * radius) as f64 {
                        mask[r * side + c] = true;
                    }
                }
            }
            blobs.push(Blob {
                class,
                row,
                col,
                radius,
            });
        }
        let pixels = clean
            .iter()
            .map(|v| {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (v + n).clamp(0.0, 1.0)
            })
            .collect();
        let report = spec.text_split.then(|| {
            let words = rng.random_range(4..8);
            let mut text: Vec<&str> = (0..words)
                .map(|_| *FILLER.choose(&mut rng).expect("non-empty"))
                .collect();
            for m in &mentions {
                text.push(m);
                text.push("seen");
            }
            text.join(" ")
        });
        samples.push(SyntheticSample {
            pixels,
            mask,
            labels,
            blobs,
            report,
        });
    }
    Ok(samples)
}

fn stem(i: usize) -> String {
    format!("img_{i:04}")
}

/// Writes images (16-bit PNG), masks (8-bit PNG), reports and `manifest.csv`
/// under `out`; returns the manifest path.
pub fn write_dataset(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    let samples = generate(spec)?;
    let _lock = OutputLock::acquire(out)?;
    for sub in ["images", "masks"] {
        fs::create_dir_all(out.join(sub))?;
    }
    if spec.text_split {
        fs::create_dir_all(out.join("reports"))?;
    }
    let names = spec.class_names();
    let side = spec.side as u32;
    let manifest = out.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    writer.write_record(["image", "labels", "report"])?;
    let mut truth = csv::Writer::from_path(out.join("blobs.csv"))?;
    truth.write_record(["image", "class", "row", "col", "radius"])?;

    for (i, s) in samples.iter().enumerate() {
        let image_rel = format!("images/{}.png", stem(i));
        let levels: Vec<u16> = s
            .pixels
            .iter()
            .map(|v| (v * 65535.0).round() as u16)
            .collect();
        ImageBuffer::<Luma<u16>, _>::from_raw(side, side, levels)
            .expect("buffer matches size")
            .save(out.join(&image_rel))
            .with_context(|| format!("cannot write {image_rel}"))?;
        let mask: Vec<u8> = s.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        GrayImage::from_raw(side, side, mask)
            .expect("buffer matches size")
            .save(out.join(format!("masks/{}.png", stem(i))))?;
        let report_rel = match &s.report {
            Some(text) => {
                let rel = format!("reports/{}.txt", stem(i));
                fs::write(out.join(&rel), text)?;
                rel
            }
            None => String::new(),
        };
        let labels: Vec<&str> = names
            .iter()
            .zip(&s.labels)
            .filter(|(_, &on)| on)
            .map(|(n, _)| n.as_str())
            .collect();
        writer.write_record([image_rel.as_str(), &labels.join("|"), &report_rel])?;
        for b in &s.blobs {
            truth.write_record([
                image_rel.clone(),
                names[b.class].clone(),
                b.row.to_string(),
                b.col.to_string(),
                b.radius.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    truth.flush()?;
    Ok(manifest)
}
