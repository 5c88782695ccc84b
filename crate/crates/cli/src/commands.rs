use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pixelhop::{
    evaluate, render_heatmap, roc_curve, train_probe, ChannelId, HopConfig, LabelMatrix,
    ProbeParams,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::{
    load_encoder, load_features, load_probe, save_encoder, save_features, save_probe,
    FeatureLayout, FeatureMeta, FeatureSet, ProbeMeta, SplitMeta,
};
use crate::dataset::{load_dataset, load_image, DEFAULT_SIDE};
use crate::io::OutputLock;
use crate::pipeline::{
    hstack, select_rows, split_indices, text_matrix, Encoder, DEFAULT_COMPONENTS,
    DEFAULT_TARGET_DIM, DEFAULT_TEST_FRACTION,
};
use crate::synthetic::{write_dataset, SyntheticSpec};
use crate::text::DEFAULT_BUCKETS;

#[derive(Debug, Parser)]
#[command(
    name = "pixelhop",
    version,
    about = "Successive-subspace image encoder, linear probe and heatmaps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic blob dataset with masks and a manifest
    GenSynthetic(GenSyntheticArgs),
    /// Train the channel tree and PCA block on a manifest
    TrainEncoder(TrainEncoderArgs),
    /// Encode every manifest row into a feature file
    Extract(ExtractArgs),
    /// Fit per-class logistic probes on the training split of a feature file
    TrainProbe(TrainProbeArgs),
    /// Write per-class AUC and ROC points for a probe
    Evaluate(EvaluateArgs),
    /// Render per-channel heatmaps for one image
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 3)]
    pub radius: usize,
    #[arg(long, default_value_t = 0.4)]
    pub intensity: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub background: f64,
    /// Number of blob families, one label each (1 to 3)
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    /// Move half of the positive evidence into report text only
    #[arg(long)]
    pub text_split: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Train/test split shared by every command that trains or scores.
#[derive(Debug, Clone, Copy, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Images are resized to side × side
    #[arg(long, default_value_t = DEFAULT_SIDE)]
    pub side: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 2)]
    pub pool: usize,
    /// Energy threshold E for discarding channels
    #[arg(long, default_value_t = 5e-5)]
    pub energy: f64,
    #[arg(long)]
    pub max_kernels: Option<usize>,
    #[arg(long)]
    pub max_patches: Option<usize>,
    /// PCA components kept per output channel
    #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
    pub components: usize,
    /// Width D of each feature vector
    #[arg(long, default_value_t = DEFAULT_TARGET_DIM)]
    pub dim: usize,
    /// Train on a seeded random subset of this many training images
    #[arg(long)]
    pub subset: Option<usize>,
    /// Comma-separated class vocabulary (default: labels found in the manifest)
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUCKETS)]
    pub text_buckets: usize,
    /// Ignore report text even when the manifest lists reports
    #[arg(long)]
    pub no_text: bool,
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Directory for metrics.csv and roc.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Rows to score, using the split recorded with the probe
    #[arg(long, value_enum, default_value_t = SplitPart::Test)]
    pub split: SplitPart,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only render this channel (e.g. 0-1-0)
    #[arg(long)]
    pub channel: Option<ChannelId>,
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(&a),
        Command::TrainEncoder(a) => train_encoder(&a),
        Command::Extract(a) => extract(&a),
        Command::TrainProbe(a) => probe(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Visualize(a) => visualize(&a),
    }
}

fn gen_synthetic(a: &GenSyntheticArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: a.n,
        seed: a.seed,
        side: a.side,
        radius: a.radius,
        intensity: a.intensity,
        noise_sigma: a.noise_sigma,
        background: a.background,
        classes: a.classes,
        text_split: a.text_split,
    };
    let manifest = write_dataset(&spec, &a.out)?;
    println!("wrote {} images to {}", a.n, manifest.display());
    Ok(())
}

fn train_encoder(a: &TrainEncoderArgs) -> Result<()> {
    let data = load_dataset(&a.manifest, a.side, a.classes.as_deref())?;
    let (mut train, _) = split_indices(data.images.len(), a.split.test_fraction, a.split.seed)?;
    if let Some(n) = a.subset {
        ensure!(n >= 2, "subset must keep at least 2 images");
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(a.split.seed));
        train.truncate(n);
        train.sort_unstable();
    }
    let images: Vec<_> = train.iter().map(|&i| data.images[i].clone()).collect();
    let config = HopConfig {
        levels: a.levels,
        window: a.window,
        stride: a.stride,
        pool_size: a.pool,
        energy_threshold: a.energy,
        max_kernels_per_unit: a.max_kernels,
        max_patches_per_unit: a.max_patches,
    };
    let encoder = Encoder::train(&images, &config, a.components, a.dim)?;
    save_encoder(&a.out, &encoder)?;
    println!(
        "trained on {} images: {} output channels, {} feature vectors of width {}",
        images.len(),
        encoder.hop.output_ids().len(),
        encoder.block.vector_count(),
        encoder.block.target_dim()
    );
    Ok(())
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let encoder = load_encoder(&a.bundle)?;
    let (side, _, _) = encoder.hop.input_shape();
    let data = load_dataset(&a.manifest, side, a.classes.as_deref())?;
    let visual = encoder.encode_all(&data.images)?;
    let (features, text_buckets) = match &data.texts {
        Some(texts) if !a.no_text => {
            ensure!(a.text_buckets >= 1, "text buckets must be at least 1");
            (
                hstack(&visual, &text_matrix(texts, a.text_buckets)),
                a.text_buckets,
            )
        }
        _ => (visual, 0),
    };
    let root = &data.manifest.root;
    let images = data
        .manifest
        .rows
        .iter()
        .map(|r| {
            r.image
                .strip_prefix(root)
                .unwrap_or(&r.image)
                .display()
                .to_string()
        })
        .collect();
    let set = FeatureSet {
        meta: FeatureMeta {
            classes: data.labels.classes().to_vec(),
            layout: FeatureLayout {
                visual_dim: encoder.feature_dim(),
                text_buckets,
            },
            images,
        },
        features,
        labels: data.labels,
    };
    save_features(&a.out, &set)?;
    println!(
        "extracted {} rows of {} features",
        set.features.nrows(),
        set.features.ncols()
    );
    Ok(())
}

fn probe(a: &TrainProbeArgs) -> Result<()> {
    let set = load_features(&a.features)?;
    let rows = set.features.nrows();
    let (train, _) = split_indices(rows, a.split.test_fraction, a.split.seed)?;
    let params = ProbeParams {
        lr: a.lr,
        epochs: a.epochs,
        l2: a.l2,
    };
    let x = select_rows(&set.features, &train);
    let (model, report) = train_probe(&x, &set.labels.select(&train), &params)?;
    for w in &report.warnings {
        eprintln!("warning: class {}: {}", w.class, w.reason);
    }
    let meta = ProbeMeta {
        classes: model.classes.clone(),
        layout: set.meta.layout,
        lr: a.lr,
        epochs: a.epochs,
        l2: a.l2,
        split: SplitMeta {
            seed: a.split.seed,
            test_fraction: a.split.test_fraction,
            rows,
        },
        skipped: report.warnings.iter().map(|w| w.class.clone()).collect(),
    };
    save_probe(&a.out, &meta, &model)?;
    println!(
        "trained {} class probes on {} rows",
        model.classes.len(),
        train.len()
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let (meta, model) = load_probe(&a.probe)?;
    let set = load_features(&a.features)?;
    ensure!(
        meta.layout == set.meta.layout,
        "probe and feature file have different feature layouts"
    );
    ensure!(
        meta.classes == set.meta.classes,
        "probe and feature file have different classes"
    );
    ensure!(
        meta.split.rows == set.features.nrows(),
        "probe was trained on a feature file with {} rows, this one has {}",
        meta.split.rows,
        set.features.nrows()
    );
    let (train, test) = split_indices(meta.split.rows, meta.split.test_fraction, meta.split.seed)?;
    let rows = match a.split {
        SplitPart::Train => train,
        SplitPart::Test => test,
        SplitPart::All => (0..meta.split.rows).collect(),
    };
    ensure!(!rows.is_empty(), "the selected split is empty");
    let x = select_rows(&set.features, &rows);
    let labels = set.labels.select(&rows);
    let report = evaluate(&model, &x, &labels)?;
    let scores = model.predict(&x)?;

    let _lock = OutputLock::acquire(&a.out)?;
    let mut metrics = csv::Writer::from_path(a.out.join("metrics.csv"))?;
    metrics.write_record(["class", "auc"])?;
    for c in &report.per_class {
        metrics.write_record([
            c.class.clone(),
            c.auc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    metrics.write_record(["macro_avg".to_string(), report.macro_avg.to_string()])?;
    metrics.flush()?;
    write_roc(&a.out.join("roc.csv"), &scores, &labels, &report.per_class)?;
    for class in report.skipped() {
        eprintln!("warning: class {class} has no positives or no negatives in this split");
    }
    println!("macro AUC {:.4} over {} rows", report.macro_avg, rows.len());
    Ok(())
}

fn write_roc(
    path: &Path,
    scores: &nalgebra::DMatrix<f64>,
    labels: &LabelMatrix,
    per_class: &[pixelhop::ClassAuc],
) -> Result<()> {
    let mut roc = csv::Writer::from_path(path)?;
    roc.write_record(["class", "fpr", "tpr"])?;
    for (c, entry) in per_class.iter().enumerate() {
        if entry.auc.is_none() {
            continue;
        }
        let col: Vec<f64> = scores.column(c).iter().copied().collect();
        for (fpr, tpr) in roc_curve(&col, &labels.column(c))? {
            roc.write_record([entry.class.clone(), fpr.to_string(), tpr.to_string()])?;
        }
    }
    roc.flush()?;
    Ok(())
}

/// File name of a channel heatmap.
pub fn heatmap_name(stem: &str, id: &ChannelId) -> String {
    format!("{stem}_ch{id}.png")
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let encoder = load_encoder(&a.bundle)?;
    let (h, w, _) = encoder.hop.input_shape();
    let image = load_image(&a.image, h)?;
    let maps = encoder.hop.infer(&image)?;
    if let Some(id) = &a.channel {
        ensure!(
            maps.iter().any(|(m, _)| m == id),
            "channel {id} is not an output channel of this model"
        );
    }
    let stem = a
        .image
        .file_stem()
        .context("image path has no file name")?
        .to_string_lossy()
        .into_owned();
    let _lock = OutputLock::acquire(&a.out)?;
    let mut written = 0;
    for (id, map) in &maps {
        if a.channel.as_ref().is_some_and(|c| c != id) {
            continue;
        }
        let path = a.out.join(heatmap_name(&stem, id));
        render_heatmap(map, h, w)
            .save(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        written += 1;
    }
    println!("wrote {written} heatmaps to {}", a.out.display());
    Ok(())
}
