//! Command implementations. Each returns through `anyhow` so the binary can
//! print a single machine-parseable error line and exit nonzero.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use histokind_core::codebook::parse_codebook;
use histokind_core::embednet::{
    load_checkpoint, predict_bag_probs, read_bags, save_checkpoint, train, write_bags, Bag,
    Checkpoint, ModelParams, TrainConfig,
};
use histokind_core::ensemble::{
    collect_slide_codes, read_bag_predictions, write_bag_predictions, BagPrediction, Thresholds,
};
use histokind_core::knowspace::{
    classify_batch, export_space, read_diagnoses, write_diagnoses, Diagnosis,
};
use histokind_core::metrics::{compute_metrics, confusion, MetricReport};
use histokind_core::synth::{
    generate_dataset, read_manifest, write_manifest, ManifestRecord, Split, SynthConfig,
};
use histokind_core::{Codebook, Scale};

use crate::parse::{apply_thresholds, default_grid, parse_counts, parse_grid};
use crate::{
    EvaluateArgs, ExportSpaceArgs, PredictArgs, ReportArgs, SplitFilter, SweepArgs, SynthArgs,
    TrainArgs, BAGS_FILE, INSTANCES_FILE, MANIFEST_FILE,
};

fn load_codebook(path: &Path) -> Result<Codebook> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read codebook `{}`", path.display()))?;
    parse_codebook(&text).with_context(|| format!("codebook `{}`", path.display()))
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("cannot open `{}`", path.display())
    })?))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create `{}`", path.display())
    })?))
}

fn dataset_file(
    explicit: Option<&PathBuf>,
    dataset: Option<&PathBuf>,
    name: &str,
) -> Result<PathBuf> {
    match (explicit, dataset) {
        (Some(path), _) => Ok(path.clone()),
        (None, Some(dir)) => Ok(dir.join(name)),
        (None, None) => bail!("either --{} or --dataset is required", name.trim_end_matches(".jsonl")),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cb = load_codebook(&args.codebook)?;
    let cfg = SynthConfig {
        seed: args.seed,
        slides_per_subtype: args.slides_per_subtype,
        subtype_slide_counts: args.counts.as_deref().map(parse_counts).transpose()?,
        bags_per_slide: args.bags,
        instances_per_bag: args.instances,
        instance_width: args.width,
        flip_noise: args.noise,
        prob_jitter: args.jitter,
    };
    let entries = generate_dataset(&cb, &cfg)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create `{}`", args.out.display()))?;
    let records: Vec<ManifestRecord> = entries.iter().map(ManifestRecord::from_entry).collect();
    write_manifest(create_writer(&args.out.join(MANIFEST_FILE))?, &records)?;

    let probs: Vec<BagPrediction> =
        entries.iter().flat_map(|e| e.slide.bag_probs.iter().cloned()).collect();
    write_bag_predictions(create_writer(&args.out.join(BAGS_FILE))?, &probs)?;

    let bags: Vec<Bag> = entries.iter().flat_map(|e| e.slide.bags.iter().cloned()).collect();
    write_bags(create_writer(&args.out.join(INSTANCES_FILE))?, &bags)?;

    println!(
        "wrote {} slides ({} bags per scale) to {}",
        entries.len(),
        probs.len() / 3,
        args.out.display()
    );
    Ok(())
}

pub fn checkpoint_path(dir: &Path, scale: Scale) -> PathBuf {
    dir.join(format!("scale{}.json", scale.number()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let bags = read_bags(open_reader(&args.dataset.join(INSTANCES_FILE))?)?;
    std::fs::create_dir_all(&args.checkpoint_dir)
        .with_context(|| format!("cannot create `{}`", args.checkpoint_dir.display()))?;

    for scale in Scale::ALL {
        let scale_bags: Vec<Bag> =
            bags.iter().filter(|b| b.scale == scale).cloned().collect();
        let cfg = TrainConfig {
            epochs: args.epochs,
            learning_rate: args.lr,
            momentum: args.momentum,
            seed: args.seed + scale.number() as u64,
            hidden_width: args.hidden,
        };
        let report = train(&scale_bags, &cfg)
            .with_context(|| format!("training the scale-{scale} model"))?;
        for (epoch, loss) in report.epoch_mean_loss.iter().enumerate() {
            println!("scale {scale} epoch {}/{} mean loss {loss:.6}", epoch + 1, cfg.epochs);
        }
        let path = checkpoint_path(&args.checkpoint_dir, scale);
        save_checkpoint(
            create_writer(&path)?,
            &Checkpoint::new(scale, cfg, report.params),
        )?;
        println!("saved {}", path.display());
    }
    Ok(())
}

fn predictions_from_checkpoints(
    checkpoint_dir: &Path,
    dataset: &Path,
) -> Result<Vec<BagPrediction>> {
    let bags = read_bags(open_reader(&dataset.join(INSTANCES_FILE))?)?;
    let mut params: BTreeMap<Scale, ModelParams> = BTreeMap::new();
    for scale in Scale::ALL {
        let path = checkpoint_path(checkpoint_dir, scale);
        let ckpt = load_checkpoint(open_reader(&path)?)
            .with_context(|| format!("checkpoint `{}`", path.display()))?;
        if ckpt.scale != scale {
            bail!("checkpoint `{}` was trained for scale {}", path.display(), ckpt.scale);
        }
        params.insert(scale, ckpt.params);
    }
    bags.iter()
        .map(|bag| {
            predict_bag_probs(&params[&bag.scale], bag)
                .with_context(|| format!("predicting slide `{}` bag {}", bag.slide_id, bag.bag_id))
        })
        .collect()
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let cb = load_codebook(&args.codebook)?;
    let thresholds = apply_thresholds(&args.thresholds)?;

    let preds = match (&args.bags, &args.checkpoint_dir, &args.dataset) {
        (Some(bags_path), None, _) => read_bag_predictions(open_reader(bags_path)?)?,
        (None, Some(ckpt_dir), Some(dataset)) => predictions_from_checkpoints(ckpt_dir, dataset)?,
        (None, Some(_), None) => bail!("--checkpoint-dir needs --dataset for the instance vectors"),
        (Some(_), Some(_), _) => bail!("--bags and --checkpoint-dir are mutually exclusive"),
        (None, None, _) => bail!("either --bags or --checkpoint-dir is required"),
    };
    if preds.is_empty() {
        bail!("no bag predictions to vote over");
    }

    let codes = collect_slide_codes(&preds, &thresholds)?;
    let diagnoses = classify_batch(&codes, &cb)?;
    write_diagnoses(create_writer(&args.out)?, &diagnoses)?;
    println!("wrote {} diagnoses to {}", diagnoses.len(), args.out.display());
    Ok(())
}

fn manifest_by_slide(records: Vec<ManifestRecord>) -> BTreeMap<String, ManifestRecord> {
    records.into_iter().map(|r| (r.slide_id.clone(), r)).collect()
}

fn split_matches(split: Split, filter: SplitFilter) -> bool {
    match filter {
        SplitFilter::All => true,
        SplitFilter::Train => split == Split::Train,
        SplitFilter::Test => split == Split::Test,
    }
}

/// Pair each diagnosis with its manifest truth, honoring the split filter.
/// A diagnosis without any manifest record is a hard error; an empty
/// intersection after filtering is too.
fn paired_truths<'a>(
    diagnoses: &'a [Diagnosis],
    manifest: &'a BTreeMap<String, ManifestRecord>,
    filter: SplitFilter,
) -> Result<Vec<(&'a Diagnosis, &'a ManifestRecord)>> {
    let mut pairs = Vec::new();
    for diag in diagnoses {
        match manifest.get(&diag.slide_id) {
            None => bail!("slide `{}` appears in the diagnoses but not in the manifest", diag.slide_id),
            Some(record) if split_matches(record.split, filter) => pairs.push((diag, record)),
            Some(_) => {}
        }
    }
    if pairs.is_empty() {
        bail!("no slides shared between the diagnoses and the selected manifest split");
    }
    Ok(pairs)
}

/// Labels in manifest order of first appearance, then any predicted subtype
/// the manifest never mentions.
fn label_order(pairs: &[(&Diagnosis, &ManifestRecord)]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for (_, record) in pairs {
        if !labels.contains(&record.subtype) {
            labels.push(record.subtype.clone());
        }
    }
    for (diag, _) in pairs {
        if !labels.contains(&diag.predicted) {
            labels.push(diag.predicted.clone());
        }
    }
    labels
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport> {
    let diagnoses = read_diagnoses(open_reader(&args.diagnoses)?)?;
    let manifest_path = dataset_file(args.manifest.as_ref(), args.dataset.as_ref(), MANIFEST_FILE)?;
    let manifest = manifest_by_slide(read_manifest(open_reader(&manifest_path)?)?);
    let pairs = paired_truths(&diagnoses, &manifest, args.split)?;

    let labels = label_order(&pairs);
    let truths: Vec<String> = pairs.iter().map(|(_, r)| r.subtype.clone()).collect();
    let preds: Vec<String> = pairs.iter().map(|(d, _)| d.predicted.clone()).collect();
    let cm = confusion(&truths, &preds, &labels)?;
    let report = compute_metrics(&cm)?;

    if let Some(out) = &args.out {
        let mut writer = create_writer(out)?;
        serde_json::to_writer_pretty(&mut writer, &report)?;
        writer.write_all(b"\n")?;
    }
    println!("{}", cm.to_table());
    println!("{}", report.to_table());
    Ok(report)
}

/// Accuracy of voted-and-classified codes against the manifest, as a plain
/// correct/total ratio over the filtered slides.
fn vote_classify_accuracy(
    preds: &[BagPrediction],
    cb: &Codebook,
    thresholds: &Thresholds,
    manifest: &BTreeMap<String, ManifestRecord>,
    filter: SplitFilter,
) -> Result<f64> {
    let codes = collect_slide_codes(preds, thresholds)?;
    let diagnoses = classify_batch(&codes, cb)?;
    let pairs = paired_truths(&diagnoses, manifest, filter)?;
    let correct = pairs.iter().filter(|(d, r)| d.predicted == r.subtype).count();
    Ok(correct as f64 / pairs.len() as f64)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cb = load_codebook(&args.codebook)?;
    let bags_path = dataset_file(args.bags.as_ref(), args.dataset.as_ref(), BAGS_FILE)?;
    let preds = read_bag_predictions(open_reader(&bags_path)?)?;
    let manifest_path = dataset_file(args.manifest.as_ref(), args.dataset.as_ref(), MANIFEST_FILE)?;
    let manifest = manifest_by_slide(read_manifest(open_reader(&manifest_path)?)?);
    let grid = match &args.grid {
        Some(spec) => parse_grid(spec)?,
        None => default_grid(),
    };

    let mut writer = create_writer(&args.out)?;
    writeln!(writer, "scale,v,accuracy")?;
    for scale in Scale::ALL {
        for &v in &grid {
            // One scale swept at a time; the others stay at the 0.5 default.
            let mut thresholds = Thresholds::default();
            thresholds.set(scale, v)?;
            let accuracy = vote_classify_accuracy(&preds, &cb, &thresholds, &manifest, args.split)?;
            writeln!(writer, "{},{},{}", scale.number(), v, accuracy)?;
        }
    }
    println!("wrote sweep over {} thresholds to {}", grid.len(), args.out.display());
    Ok(())
}

pub fn cmd_export_space(args: &ExportSpaceArgs) -> Result<()> {
    let cb = load_codebook(&args.codebook)?;
    let diagnoses = read_diagnoses(open_reader(&args.diagnoses)?)?;
    let truths: BTreeMap<String, String> = match &args.manifest {
        Some(path) => read_manifest(open_reader(path)?)?
            .into_iter()
            .map(|r| (r.slide_id, r.subtype))
            .collect(),
        None => BTreeMap::new(),
    };
    let predictions: Vec<(Diagnosis, Option<String>)> = diagnoses
        .into_iter()
        .map(|d| {
            let truth = truths.get(&d.slide_id).cloned();
            (d, truth)
        })
        .collect();
    export_space(create_writer(&args.out)?, &cb, &predictions)?;
    println!("wrote knowledge space to {}", args.out.display());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let diagnoses = read_diagnoses(open_reader(&args.diagnoses)?)?;
    let diag = diagnoses
        .iter()
        .find(|d| d.slide_id == args.slide)
        .with_context(|| format!("slide `{}` not found in `{}`", args.slide, args.diagnoses.display()))?;
    Ok(render_report(diag))
}

pub fn render_report(diag: &Diagnosis) -> String {
    let mut out = String::new();
    out.push_str(&format!("slide {}\n", diag.slide_id));
    for (scale, features) in &diag.per_scale_features {
        if features.is_empty() {
            out.push_str(&format!("  scale {scale}: no features detected\n"));
        } else {
            out.push_str(&format!("  scale {scale}: {}\n", features.join(", ")));
        }
    }
    out.push_str(&format!(
        "  coordinate: ({}, {}, {})\n",
        diag.projected_coord[0], diag.projected_coord[1], diag.projected_coord[2]
    ));
    out.push_str("  distance to nearest knowledge point per subtype:\n");
    for (subtype, dist) in &diag.per_subtype_min_distance {
        out.push_str(&format!("    {subtype}: {dist:.6}\n"));
    }
    match &diag.shortcut_rule {
        Some(rule) => out.push_str(&format!(
            "  predicted: {} (shortcut rule fired: {} at scale {})\n",
            diag.predicted, rule.feature, rule.scale
        )),
        None => out.push_str(&format!("  predicted: {}\n", diag.predicted)),
    }
    if diag.tie {
        out.push_str("  note: minimum distance tied across subtypes; first in codebook order wins\n");
    }
    out
}
