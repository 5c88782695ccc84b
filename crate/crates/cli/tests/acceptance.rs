//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use common::{
    gaussian_patches, logistic_loss, max_principal_angle, oracle_ac_kernels, pairwise_auc, rng,
};
use nalgebra::{DMatrix, DVector};
use pixelhop::{
    apply_saab, auc, fit_saab, level_geometry, loss_and_gradient, render_heatmap, train_tree,
    ChannelId, HopConfig, HopModelF64, ImageF64, PatchMatrix,
};
use pixelhop_cli::bundle::{load_encoder, save_encoder, BLOB_FILE, HEADER_FILE};
use pixelhop_cli::dataset::load_dataset;
use pixelhop_cli::pipeline::{strongest_ac_output, Encoder};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn random_images(seed: u64, count: usize, side: usize) -> Vec<ImageF64> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| ImageF64::from_fn(side, side, 1, |_, _, _| r.random_range(0.0..1.0)))
        .collect()
}

/// Smooth random ramps plus small noise, so energy decays across channels.
fn textured_images(seed: u64, count: usize, side: usize) -> Vec<ImageF64> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let (a, b, f) = (
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(0.1..0.6),
            );
            let noise: Vec<f64> = (0..side * side)
                .map(|_| r.random_range(-0.05..0.05))
                .collect();
            ImageF64::from_fn(side, side, 1, |y, x, _| {
                0.5 + 0.2 * (a * x as f64 * f).sin()
                    + 0.2 * (b * y as f64 * f).cos()
                    + noise[y * side + x]
            })
        })
        .collect()
}

fn patch_matrix(data: &[f64], n: usize) -> PatchMatrix<f64> {
    PatchMatrix::from_matrix(DMatrix::from_row_slice(data.len() / n, n, data))
}

fn kernel_orthonormality() -> Result<Outcome> {
    let start = Instant::now();
    let images = random_images(101, 200, 32);
    let model = train_tree(&images, &HopConfig::default())?;
    let mut worst = 0.0f64;
    let mut units = 0;
    for unit in model.units().iter().flatten() {
        let g = unit.kernels.kernel_stack();
        let dev = (&g * g.transpose() - DMatrix::identity(g.nrows(), g.nrows()))
            .abs()
            .max();
        worst = worst.max(dev);
        units += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-7 && elapsed < Duration::from_secs(30),
        format!(
            "{units} units, max |GGt - I| = {worst:.2e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn energy_conservation() -> Result<Outcome> {
    let images = textured_images(102, 20, 32);
    let cfg = HopConfig {
        energy_threshold: 0.0,
        ..HopConfig::default()
    };
    let model = train_tree(&images, &cfg)?;
    let mut worst = 0.0f64;
    for unit in model.units().iter().flatten() {
        let parent = unit
            .input
            .as_ref()
            .map_or(1.0, |id| model.node(id).expect("parent").energy);
        let children: f64 = (0..=unit.kernels.k())
            .map(|j| model.node(&unit.child_id(j)).expect("child").energy)
            .sum();
        worst = worst.max((children - parent).abs());
    }
    outcome(
        worst <= 1e-6,
        format!("max |sum(children) - parent| = {worst:.2e}"),
    )
}

fn pca_oracle() -> Result<Outcome> {
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = [4, 9, 27][trial % 3];
        let rows = r.random_range(60..300);
        let data = gaussian_patches(&mut r, rows, n, trial % 2 == 0);
        let k = r.random_range(1..n);
        let kernels = fit_saab(&patch_matrix(&data, n), Some(k))?;
        let got: Vec<Vec<f64>> = kernels
            .ac_kernels()
            .row_iter()
            .map(|v| v.iter().copied().collect())
            .collect();
        let (_, oracle) = oracle_ac_kernels(&data, n, k);
        worst = worst.max(max_principal_angle(&got, &oracle));
    }
    outcome(
        worst <= 1e-6,
        format!("50 patch sets, max principal angle {worst:.2e} rad"),
    )
}

fn reconstruction() -> Result<Outcome> {
    let mut r = rng(104);
    let mut worst = 0.0f64;
    for n in [4, 9, 27] {
        let data = gaussian_patches(&mut r, 200, n, false);
        let kernels = fit_saab(&patch_matrix(&data, n), None)?;
        ensure!(
            kernels.k() == n - 1,
            "expected a full kernel set for n = {n}"
        );
        for _ in 0..100 {
            let patch: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
            let y = apply_saab(&kernels, &patch_matrix(&patch, n))?;
            let back = kernels.reconstruct(&y.row(0).iter().copied().collect::<Vec<_>>())?;
            let err = back
                .iter()
                .zip(&patch)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
    }
    outcome(worst <= 1e-6, format!("max relative error {worst:.2e}"))
}

fn geometry() -> Result<Outcome> {
    let cfg = HopConfig::default();
    let sizes = |side| -> Result<Vec<(usize, usize)>> {
        Ok(level_geometry(&cfg, side, side)?
            .iter()
            .map(|g| (g.unit_output.0, g.pooled.0))
            .collect())
    };
    let big = sizes(206)?;
    let small = sizes(32)?;
    let model = train_tree(&random_images(105, 2, 206), &cfg)?;
    let out = model.infer(&random_images(106, 1, 206)[0])?;
    let maps_ok = !out.is_empty() && out.iter().all(|(_, m)| m.shape() == (24, 24));
    outcome(
        big == [(204, 102), (100, 50), (48, 24)] && small == [(30, 15), (13, 6), (4, 2)] && maps_ok,
        format!(
            "206: {big:?}; 32: {small:?}; {} output maps of 24x24: {maps_ok}",
            out.len()
        ),
    )
}

fn pruning_monotonicity() -> Result<Outcome> {
    let mut counts = Vec::new();
    let mut nested = true;
    for seed in [107, 108, 109] {
        let images = textured_images(seed, 10, 32);
        let mut previous: Option<Vec<ChannelId>> = None;
        let mut row = Vec::new();
        for e in [0.0, 1e-5, 5e-5, 1e-3] {
            let cfg = HopConfig {
                energy_threshold: e,
                ..HopConfig::default()
            };
            let surviving = train_tree(&images, &cfg)?.surviving_ids();
            if let Some(prev) = &previous {
                nested &= surviving.iter().all(|id| prev.contains(id));
            }
            row.push(surviving.len());
            previous = Some(surviving);
        }
        counts.push(row);
    }
    outcome(nested, format!("surviving counts per dataset {counts:?}"))
}

fn auc_oracle() -> Result<Outcome> {
    let mut r = rng(110);
    let mut worst = 0.0f64;
    let mut invariant = true;
    for trial in 0..1000 {
        let m = r.random_range(2..80);
        let mut labels: Vec<bool> = (0..m).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = match trial % 4 {
            0 => 2.0,
            1 => 5.0,
            _ => 0.0,
        };
        let scores: Vec<f64> = (0..m)
            .map(|_| {
                let s: f64 = r.random_range(0.0..1.0);
                if levels > 0.0 {
                    (s * levels).floor()
                } else {
                    s
                }
            })
            .collect();
        let a = auc(&scores, &labels)?;
        worst = worst.max((a - pairwise_auc(&scores, &labels)).abs());
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + s).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
        invariant &= auc(&cubed, &labels)? == a && auc(&shifted, &labels)? == a;
    }
    outcome(
        worst <= 1e-12 && invariant,
        format!(
            "1000 vectors, max |rank - pairwise| = {worst:.1e}, transform-invariant: {invariant}"
        ),
    )
}

fn probe_gradients() -> Result<Outcome> {
    let mut r = rng(111);
    let (m, d, l2, h) = (40, 8, 1e-3, 1e-5);
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let y: Vec<bool> = (0..m).map(|_| r.random_bool(0.5)).collect();
    let x = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let w: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = r.random_range(-1.0..1.0);
        let (_, gw, gb) = loss_and_gradient(&x, &y, &DVector::from_vec(w.clone()), b, l2);
        let rel = |a: f64, f: f64| (a - f).abs() / f.abs().max(1e-8);
        for j in 0..d {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (logistic_loss(&rows, &y, &up, b, l2)
                - logistic_loss(&rows, &y, &down, b, l2))
                / (2.0 * h);
            worst = worst.max(rel(gw[j], fd));
        }
        let fd = (logistic_loss(&rows, &y, &w, b + h, l2)
            - logistic_loss(&rows, &y, &w, b - h, l2))
            / (2.0 * h);
        worst = worst.max(rel(gb, fd));
    }
    outcome(
        worst <= 1e-4,
        format!(
            "5 points x {} parameters, max relative error {worst:.2e}",
            d + 1
        ),
    )
}

fn cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_pixelhop"))
        .args(args)
        .output()?;
    if !out.status.success() {
        bail!(
            "pixelhop {} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr).trim()
        );
    }
    Ok(())
}

fn macro_auc(metrics: &Path) -> Result<f64> {
    let text = fs::read_to_string(metrics)?;
    let line = text
        .lines()
        .find(|l| l.starts_with("macro_avg,"))
        .context("metrics.csv has no macro_avg row")?;
    Ok(line["macro_avg,".len()..].parse()?)
}

/// gen-synthetic → train-encoder → extract → train-probe → evaluate.
fn run_pipeline(work: &Path, gen_extra: &[&str], extract_extra: &[&str], tag: &str) -> Result<f64> {
    let s = |p: PathBuf| p.display().to_string();
    let data = work.join("data");
    if !data.join("manifest.csv").exists() {
        let mut gen = vec![
            "gen-synthetic",
            "--n",
            "500",
            "--seed",
            "7",
            "--side",
            "32",
            "--out",
        ];
        let data_s = s(data.clone());
        gen.push(&data_s);
        gen.extend_from_slice(gen_extra);
        cli(&gen)?;
    }
    let (manifest, model) = (s(data.join("manifest.csv")), s(work.join("model")));
    if !work.join("model").join(HEADER_FILE).exists() {
        cli(&[
            "train-encoder",
            "--manifest",
            &manifest,
            "--out",
            &model,
            "--side",
            "32",
            "--window",
            "3",
            "--stride",
            "1",
            "--energy",
            "5e-5",
            "--pool",
            "2",
            "--seed",
            "7",
        ])?;
    }
    let (features, probe, eval) = (
        s(work.join(format!("features-{tag}"))),
        s(work.join(format!("probe-{tag}"))),
        work.join(format!("eval-{tag}")),
    );
    let mut extract = vec![
        "extract",
        "--bundle",
        &model,
        "--manifest",
        &manifest,
        "--out",
        &features,
    ];
    extract.extend_from_slice(extract_extra);
    cli(&extract)?;
    cli(&[
        "train-probe",
        "--features",
        &features,
        "--out",
        &probe,
        "--seed",
        "7",
    ])?;
    cli(&[
        "evaluate",
        "--probe",
        &probe,
        "--features",
        &features,
        "--out",
        &s(eval.clone()),
    ])?;
    macro_auc(&eval.join("metrics.csv"))
}

fn synthetic_end_to_end(work: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let value = run_pipeline(work, &[], &[], "image")?;
    let elapsed = start.elapsed();
    outcome(
        value >= 0.90 && elapsed < Duration::from_secs(300),
        format!(
            "held-out macro AUC {value:.4}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn localization(work: &Path) -> Result<Outcome> {
    let data = work.join("data");
    let encoder = load_encoder(&work.join("model"))?;
    let channel = strongest_ac_output(&encoder.hop).context("model has no AC output channel")?;
    let set = load_dataset(&data.join("manifest.csv"), 32, None)?;
    let mut hits = 0;
    let mut checked = 0;
    for (i, row) in set.manifest.rows.iter().enumerate() {
        if row.labels.is_empty() {
            continue;
        }
        let maps = encoder.hop.infer(&set.images[i])?;
        let map = &maps
            .iter()
            .find(|(id, _)| *id == channel)
            .expect("output channel")
            .1;
        let heat = render_heatmap(map, 32, 32);
        let stem = row
            .image
            .file_stem()
            .expect("stem")
            .to_string_lossy()
            .into_owned();
        let mask = image::open(data.join("masks").join(format!("{stem}.png")))?.to_luma8();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for (h, m) in heat.pixels().zip(mask.pixels()) {
            if m.0[0] > 0 {
                inside += f64::from(h.0[0]);
                n_in += 1;
            } else {
                outside += f64::from(h.0[0]);
                n_out += 1;
            }
        }
        if n_in > 0 && inside / n_in as f64 > outside / n_out as f64 {
            hits += 1;
        }
        checked += 1;
        if checked == 50 {
            break;
        }
    }
    let rate = hits as f64 / checked as f64;
    outcome(
        checked == 50 && rate >= 0.8,
        format!("channel {channel}: inside > outside on {hits}/{checked} positive images"),
    )
}

fn persistence(work: &Path) -> Result<Outcome> {
    let first = work.join("model");
    let (second, third) = (work.join("model-copy"), work.join("model-copy2"));
    let loaded = load_encoder(&first)?;
    save_encoder(&second, &loaded)?;
    save_encoder(&third, &load_encoder(&second)?)?;
    let same = |a: &Path, b: &Path| -> Result<bool> {
        Ok(
            fs::read(a.join(HEADER_FILE))? == fs::read(b.join(HEADER_FILE))?
                && fs::read(a.join(BLOB_FILE))? == fs::read(b.join(BLOB_FILE))?,
        )
    };
    let bytes_ok = same(&first, &second)? && same(&second, &third)?;

    let images = textured_images(112, 12, 32);
    let in_memory = Encoder::train(&images, &HopConfig::default(), 4, 64)?;
    let dir = work.join("model-roundtrip");
    save_encoder(&dir, &in_memory)?;
    let reloaded = load_encoder(&dir)?;
    let probe = random_images(113, 3, 32);
    let mut exact = reloaded == in_memory;
    for im in &probe {
        exact &= reloaded.encode(im)? == in_memory.encode(im)?;
        exact &= reloaded.hop.infer(im)? == in_memory.hop.infer(im)?;
    }
    let hop: &HopModelF64 = &reloaded.hop;
    outcome(
        bytes_ok && exact,
        format!(
            "save-load-save identical: {bytes_ok}; reloaded inference exact: {exact} ({} units)",
            hop.units().iter().map(Vec::len).sum::<usize>()
        ),
    )
}

fn multimodal(work: &Path) -> Result<Outcome> {
    let image_only = run_pipeline(work, &["--text-split"], &["--no-text"], "image")?;
    let with_text = run_pipeline(work, &["--text-split"], &[], "text")?;
    let gain = with_text - image_only;
    outcome(
        gain >= 0.03,
        format!("image-only {image_only:.4}, image+text {with_text:.4}, gain {gain:+.4}"),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let base = scratch.path().join("blobs");
    let split = scratch.path().join("text-split");
    type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("kernel orthonormality", Box::new(kernel_orthonormality)),
        ("energy conservation", Box::new(energy_conservation)),
        ("PCA oracle equivalence", Box::new(pca_oracle)),
        ("reconstruction", Box::new(reconstruction)),
        ("geometry", Box::new(geometry)),
        ("pruning monotonicity", Box::new(pruning_monotonicity)),
        ("AUC oracle", Box::new(auc_oracle)),
        ("probe gradients", Box::new(probe_gradients)),
        (
            "synthetic end-to-end",
            Box::new(|| synthetic_end_to_end(&base)),
        ),
        ("localization", Box::new(|| localization(&base))),
        ("persistence", Box::new(|| persistence(&base))),
        ("multimodal sanity", Box::new(|| multimodal(&split))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (status, detail) = match check() {
            Ok(o) if o.pass => ("PASS", o.detail),
            Ok(o) => ("FAIL", o.detail),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {:>2} {status} {name}: {detail}", i + 1);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
