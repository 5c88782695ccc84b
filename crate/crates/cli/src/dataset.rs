//! CSV manifests and image decoding.
//!
//! A manifest has the header `image,labels,report`. `labels` holds
//! `|`-separated class names (possibly empty) and `report` an optional path to
//! a text file. Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pixelhop::{ImageF64, LabelMatrix};
use rayon::prelude::*;
use serde::Deserialize;

/// Side length images are resized to unless configured otherwise.
pub const DEFAULT_SIDE: usize = 206;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub image: PathBuf,
    pub labels: Vec<String>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub classes: Vec<String>,
}

#[derive(Deserialize)]
struct RawRow {
    image: String,
    #[serde(default)]
    labels: String,
    #[serde(default)]
    report: Option<String>,
}

fn row_error(failures: Vec<(usize, String)>) -> anyhow::Error {
    let more = failures.len() - 1;
    let (row, msg) = &failures[0];
    if more == 0 {
        anyhow!("row {row}: {msg}")
    } else {
        anyhow!("row {row}: {msg} (and {more} more invalid rows)")
    }
}

impl DatasetManifest {
    /// Parses and validates a manifest. Rows are numbered from 1, header
    /// excluded. With `classes = None` the vocabulary is the sorted set of
    /// labels that appear.
    pub fn read(path: &Path, classes: Option<&[String]>) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .with_context(|| format!("cannot open manifest {}", path.display()))?;
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("image") || headers.get(1) != Some("labels") {
            bail!(
                "manifest {} must start with the header image,labels[,report]",
                path.display()
            );
        }

        let mut rows = Vec::new();
        let mut failures = Vec::new();
        let mut seen = HashSet::new();
        for (i, record) in reader.deserialize::<RawRow>().enumerate() {
            let n = i + 1;
            let raw = match record {
                Ok(r) => r,
                Err(e) => {
                    failures.push((n, format!("malformed record: {e}")));
                    continue;
                }
            };
            let image = root.join(&raw.image);
            if raw.image.is_empty() {
                failures.push((n, "empty image path".into()));
                continue;
            }
            if !image.is_file() {
                failures.push((n, format!("missing image file {}", image.display())));
                continue;
            }
            if !seen.insert(raw.image.clone()) {
                failures.push((n, format!("duplicate image entry {}", raw.image)));
                continue;
            }
            let report = raw.report.filter(|r| !r.is_empty()).map(|r| root.join(r));
            if let Some(r) = &report {
                if !r.is_file() {
                    failures.push((n, format!("missing report file {}", r.display())));
                    continue;
                }
            }
            let labels = raw
                .labels
                .split('|')
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            rows.push((
                n,
                ManifestRow {
                    image,
                    labels,
                    report,
                },
            ));
        }

        let classes = match classes {
            Some(c) => c.to_vec(),
            None => {
                let mut all: Vec<String> =
                    rows.iter().flat_map(|(_, r)| r.labels.clone()).collect();
                all.sort();
                all.dedup();
                all
            }
        };
        for (n, row) in &rows {
            if let Some(bad) = row.labels.iter().find(|l| !classes.contains(l)) {
                failures.push((*n, format!("unknown label {bad:?}")));
            }
        }
        if !failures.is_empty() {
            failures.sort_by_key(|f| f.0);
            return Err(row_error(failures));
        }
        if rows.is_empty() {
            bail!("manifest {} has no rows", path.display());
        }
        Ok(Self {
            root,
            rows: rows.into_iter().map(|(_, r)| r).collect(),
            classes,
        })
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        let rows = self
            .rows
            .iter()
            .map(|r| self.classes.iter().map(|c| r.labels.contains(c)).collect())
            .collect();
        LabelMatrix::new(self.classes.clone(), rows).expect("rows match vocabulary")
    }
}

/// Decoded images, labels and (when any row has one) report texts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageF64>,
    pub labels: LabelMatrix,
    pub texts: Option<Vec<String>>,
}

/// Reads a manifest and decodes every image to a `side × side` grayscale
/// tensor in `[0, 1]`.
pub fn load_dataset(path: &Path, side: usize, classes: Option<&[String]>) -> Result<Dataset> {
    let manifest = DatasetManifest::read(path, classes)?;
    let decoded: Vec<Result<ImageF64>> = manifest
        .rows
        .par_iter()
        .map(|r| load_image(&r.image, side))
        .collect();
    let failures: Vec<(usize, String)> = decoded
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| (i + 1, format!("{e:#}"))))
        .collect();
    if !failures.is_empty() {
        return Err(row_error(failures));
    }
    let images = decoded.into_iter().map(|r| r.expect("checked")).collect();

    let texts = if manifest.rows.iter().any(|r| r.report.is_some()) {
        let mut texts = Vec::with_capacity(manifest.rows.len());
        for (i, row) in manifest.rows.iter().enumerate() {
            texts.push(match &row.report {
                Some(p) => fs::read_to_string(p)
                    .with_context(|| format!("row {}: cannot read report", i + 1))?,
                None => String::new(),
            });
        }
        Some(texts)
    } else {
        None
    };
    let labels = manifest.label_matrix();
    Ok(Dataset {
        manifest,
        images,
        labels,
        texts,
    })
}

/// Decodes one image file to grayscale (the image crate's luma weights) and
/// resizes it to `side × side`.
pub fn load_image(path: &Path, side: usize) -> Result<ImageF64> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode image {}", path.display()))?
        .to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v).clamp(0.0, 1.0))
        .collect();
    let data = if (h, w) == (side, side) {
        data
    } else {
        resize_bilinear(&data, h, w, side, side)
    };
    Ok(ImageF64::new(side, side, 1, data)?)
}

/// Bilinear resampling with half-pixel centres (corners not aligned):
/// output pixel `i` samples source coordinate `(i + 0.5)·in/out − 0.5`,
/// clamped to the image.
pub fn resize_bilinear(
    src: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), height * width);
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(out_h, height);
    let cols = axis(out_w, width);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            let top = src[r0 * width + c0] * (1.0 - tx) + src[r0 * width + c1] * tx;
            let bottom = src[r1 * width + c0] * (1.0 - tx) + src[r1 * width + c1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}
