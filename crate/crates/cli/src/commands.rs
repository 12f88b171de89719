use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use skullstrip_core::data::{
    generate_dataset, load_tensor, prepare_image, save_tensor, Dataset, Sample, Split, MANIFEST_FILE,
};
use skullstrip_core::metrics::{aggregate_stats, confusion_counts, segmentation_metrics, AggregateStats};
use skullstrip_core::model::{load_checkpoint, save_checkpoint, Model};
use skullstrip_core::nn::StrategyKind;
use skullstrip_core::tensor::Tensor;
use skullstrip_core::training::{evaluate_subjects, train, EpochRecord, TrainObserver};

use crate::args::{Cli, Command, EvalArgs, GenDataArgs, OverlayArgs, PlotArgs, PredictArgs, TrainArgs};
use crate::config::RunConfig;
use crate::render::{self, Series};
use crate::tables;
use crate::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.ssck";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides())?;
    let quiet = cli.common.quiet;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, &a),
        Command::Train(a) => {
            apply_train_args(&mut cfg, &a);
            cmd_train(&cfg, quiet).map(|_| ())
        }
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Predict(a) => cmd_predict(&cfg, &a),
        Command::Compare => cmd_compare(&cfg, quiet).map(|_| ()),
        Command::Plot(a) => cmd_plot(&cfg, &a),
        Command::Overlay(a) => cmd_overlay(&cfg, &a),
    }
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.initial_lr = lr;
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::new("format", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn gen_data(mut cfg: RunConfig, a: &GenDataArgs) -> CliResult<()> {
    let g = &mut cfg.generate;
    if let Some(n) = a.subjects {
        g.subjects = n;
    }
    if let Some((h, w)) = a.size {
        (g.height, g.width) = (h, w);
    }
    if let Some(z) = a.slices {
        g.slices = z;
    }
    if let Some(t) = a.timepoints {
        g.timepoints = t;
    }
    let out = cfg.out_or("data");
    let manifest = generate_dataset(&out, &cfg.generate)?;
    cfg.data = Some(out.join(MANIFEST_FILE));
    cfg.write_provenance(&out)?;
    let count = |s| manifest.subjects_in(s).count();
    println!(
        "wrote {} subjects ({} train / {} val / {} test) to {}",
        manifest.subjects.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let manifest = cfg.manifest()?;
    Ok(Dataset::load(manifest, cfg.normalization)?)
}

struct Progress {
    tag: String,
    epochs: usize,
    quiet: bool,
    start: Instant,
}

impl TrainObserver<f32> for Progress {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if !self.quiet {
            eprintln!(
                "[{}] epoch {}/{} train_loss {:.5} val_loss {:.5} val_acc {:.4} lr {:e} ({:.0}s)",
                self.tag,
                r.epoch,
                self.epochs,
                r.train_loss,
                r.val_loss,
                r.val_accuracy,
                r.lr,
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    strategy: StrategyKind,
    label: &'static str,
    parameter_count: usize,
    epochs: usize,
    best_epoch: usize,
    best_val_loss: f64,
    best_val_accuracy: f64,
    train_slices: usize,
    val_slices: usize,
}

/// Trains `cfg.model` on `data` and writes the checkpoint, history and
/// summary into `out`. Returns the best model.
fn train_into(cfg: &RunConfig, data: &Dataset, out: &Path, quiet: bool) -> CliResult<Model<f32>> {
    create_dir(out)?;
    cfg.write_provenance(out)?;
    let model = Model::<f32>::build(cfg.model.clone())?;
    let parameter_count = model.parameter_count();
    let tag = cfg.model.strategy.key().to_string();
    if !quiet {
        eprintln!("[{tag}] {parameter_count} parameters, {} train / {} val slices", data.train.len(), data.val.len());
    }
    let mut progress = Progress { tag, epochs: cfg.train.epochs, quiet, start: Instant::now() };
    let outcome = train(model, data, &cfg.train, &mut progress)?;
    let records = &outcome.history.records;
    tables::write_history(&out.join(HISTORY_FILE), records)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &outcome.best)?;
    let best = records[outcome.best_epoch - 1];
    let summary = TrainSummary {
        strategy: cfg.model.strategy,
        label: cfg.model.strategy.label(),
        parameter_count,
        epochs: records.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: best.val_loss,
        best_val_accuracy: best.val_accuracy,
        train_slices: data.train.len(),
        val_slices: data.val.len(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(outcome.best)
}

pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> CliResult<Model<f32>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let out = cfg.out_or("runs/train");
    let best = train_into(cfg, &data, &out, quiet)?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(best)
}

/// Per-subject metrics on `samples`, written to `path`.
fn evaluate_into(model: &mut Model<f32>, samples: &[Sample], batch: usize, path: &Path) -> CliResult<AggregateStats> {
    if samples.is_empty() {
        return Err(CliError::new("data", "the evaluation split is empty"));
    }
    let records = evaluate_subjects(model, samples, batch)?;
    let stats = aggregate_stats(&records)?;
    tables::write_metrics(path, &records, &stats)?;
    Ok(stats)
}

fn print_stats(name: &str, s: &AggregateStats) {
    println!(
        "{name}: dice {:.4}±{:.4} sensitivity {:.4}±{:.4} specificity {:.4}±{:.4} accuracy {:.4}±{:.4} ({} subjects)",
        s.dice.mean,
        s.dice.sd,
        s.sensitivity.mean,
        s.sensitivity.sd,
        s.specificity.mean,
        s.specificity.sd,
        s.accuracy.mean,
        s.accuracy.sd,
        s.count
    );
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    load_checkpoint::<f32>(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> CliResult<()> {
    cfg.validate()?;
    let mut model = load_model(&a.checkpoint)?;
    let data = load_dataset(cfg)?;
    let out = cfg.out_or("runs/eval");
    create_dir(&out)?;
    cfg.write_provenance(&out)?;
    let stats = evaluate_into(&mut model, data.split(a.split), cfg.train.batch_size, &out.join(METRICS_FILE))?;
    print_stats(model.config().strategy.label(), &stats);
    Ok(())
}

/// Masks for one image tensor: `[H, W]` for a single slice, `[Z, H, W]`
/// otherwise.
pub fn predict_image(model: &mut Model<f32>, image: Tensor<f32>, cfg: &RunConfig, id: &str) -> CliResult<Tensor<u8>> {
    let single = image.ndim() == 2;
    let slices = prepare_image(id, image, cfg.normalization)?;
    let (h, w) = (slices[0].shape()[1], slices[0].shape()[2]);
    let mut masks = Vec::with_capacity(slices.len() * h * w);
    for chunk in slices.chunks(cfg.train.batch_size) {
        let data: Vec<f32> = chunk.iter().flat_map(|s| s.data().iter().copied()).collect();
        let x = Tensor::new(&[chunk.len(), 1, h, w], data)?;
        masks.extend_from_slice(model.predict(&x)?.data());
    }
    let shape: Vec<usize> = if single { vec![h, w] } else { vec![slices.len(), h, w] };
    Ok(Tensor::new(&shape, masks)?)
}

pub fn cmd_predict(cfg: &RunConfig, a: &PredictArgs) -> CliResult<()> {
    cfg.validate()?;
    let mut model = load_model(&a.checkpoint)?;
    let out = cfg.out_or("runs/predict");
    let mut stems = HashSet::new();
    let mut jobs = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if stem.is_empty() || !stems.insert(stem.clone()) {
            return Err(CliError::usage(format!("{}: input names must have distinct file stems", path.display())));
        }
        jobs.push((path, stem));
    }
    create_dir(&out)?;
    cfg.write_provenance(&out)?;
    for (path, stem) in jobs {
        let image = load_tensor(path)?.to_float::<f32>().map_err(|e| CliError::from(e).context(path.display()))?;
        let mask = predict_image(&mut model, image, cfg, &stem).map_err(|e| e.context(path.display()))?;
        let target = out.join(format!("{stem}_mask.sstn"));
        save_tensor(&target, mask)?;
        println!("wrote {}", target.display());
    }
    Ok(())
}

/// Trains and tests every strategy in `cfg.strategies` under one shared
/// configuration and seed. Returns the comparison rows in order.
pub fn cmd_compare(cfg: &RunConfig, quiet: bool) -> CliResult<Vec<(StrategyKind, AggregateStats)>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    if data.test.is_empty() {
        return Err(CliError::new("data", "the test split is empty"));
    }
    let out = cfg.out_or("runs/compare");
    create_dir(&out)?;
    cfg.write_provenance(&out)?;
    let mut rows = Vec::with_capacity(cfg.strategies.len());
    for &kind in &cfg.strategies {
        let run = || -> CliResult<AggregateStats> {
            let mut sub = cfg.clone();
            sub.model.strategy = kind;
            sub.strategies = vec![kind];
            let dir = out.join(kind.key());
            sub.out = Some(dir.clone());
            let mut best = train_into(&sub, &data, &dir, quiet)?;
            evaluate_into(&mut best, &data.test, cfg.train.batch_size, &dir.join(METRICS_FILE))
        };
        let stats = run().map_err(|e| e.context(format!("strategy {}", kind.label())))?;
        print_stats(kind.label(), &stats);
        rows.push((kind, stats));
    }
    tables::write_comparison(&out.join(COMPARISON_FILE), &rows)?;
    println!("wrote {}", out.join(COMPARISON_FILE).display());
    Ok(rows)
}

fn series_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn cmd_plot(cfg: &RunConfig, a: &PlotArgs) -> CliResult<()> {
    if !a.labels.is_empty() && a.labels.len() != a.histories.len() {
        return Err(CliError::usage("give one --label per --history, or none"));
    }
    let mut series = Vec::with_capacity(a.histories.len());
    for (i, path) in a.histories.iter().enumerate() {
        let records = tables::read_history(path)?;
        if records.is_empty() {
            return Err(CliError::new("data", format!("{}: empty history", path.display())));
        }
        let name = a.labels.get(i).cloned().unwrap_or_else(|| series_name(path));
        series.push(Series { name, records });
    }
    let out = cfg.out_or("runs/plot");
    create_dir(&out)?;
    cfg.write_provenance(&out)?;

    let csv_path = out.join("curves.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let header = std::iter::once("series").chain(tables::HISTORY_HEADER);
    w.write_record(header).map_err(|e| CliError::io(&csv_path, e))?;
    for s in &series {
        for row in tables::history_rows(&s.records) {
            let full = std::iter::once(s.name.clone()).chain(row);
            w.write_record(full).map_err(|e| CliError::io(&csv_path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;

    let svg_path = out.join("curves.svg");
    fs::write(&svg_path, render::curves_svg(&series)).map_err(|e| CliError::io(&svg_path, e))?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct OverlayPanel {
    title: String,
    checkpoint: Option<PathBuf>,
    dice: Option<f64>,
}

#[derive(Debug, Serialize)]
struct OverlaySidecar {
    subject: String,
    slice: usize,
    split: Split,
    scale: u32,
    height: usize,
    width: usize,
    /// RGB colours of true positives, false positives and false negatives.
    colors: [[u8; 3]; 3],
    panels: Vec<OverlayPanel>,
}

pub fn cmd_overlay(cfg: &RunConfig, a: &OverlayArgs) -> CliResult<()> {
    let data = load_dataset(cfg)?;
    let samples = data.split(a.split);
    let subject = match &a.subject {
        Some(s) => s.clone(),
        None => {
            samples.first().map(|s| s.subject.clone()).ok_or_else(|| CliError::new("data", "the split is empty"))?
        }
    };
    let slices: Vec<&Sample> = samples.iter().filter(|s| s.subject == subject).collect();
    if slices.is_empty() {
        return Err(CliError::new("data", format!("no subject {subject:?} in the {:?} split", a.split)));
    }
    let slice = a.slice.unwrap_or(slices.len() / 2);
    let sample = slices
        .iter()
        .find(|s| s.slice == slice)
        .ok_or_else(|| CliError::new("data", format!("subject {subject} has no slice {slice}")))?;
    let (h, w) = (sample.mask.shape()[0], sample.mask.shape()[1]);
    let x = sample.image.reshape(&[1, 1, h, w])?;

    let mut panels = vec![render::image_panel(sample.image.data(), h, w), render::mask_panel(sample.mask.data(), h, w)];
    let mut meta = vec![
        OverlayPanel { title: "image".into(), checkpoint: None, dice: None },
        OverlayPanel { title: "ground truth".into(), checkpoint: None, dice: None },
    ];
    for path in &a.checkpoints {
        let mut model = load_model(path)?;
        let pred = model.predict(&x).map_err(|e| CliError::from(e).context(path.display()))?;
        let pred = pred.reshape(&[h, w])?;
        let dice = segmentation_metrics(&confusion_counts(&pred, &sample.mask)?)?.dice;
        panels.push(render::prediction_panel(sample.image.data(), pred.data(), sample.mask.data(), h, w));
        meta.push(OverlayPanel {
            title: model.config().strategy.label().into(),
            checkpoint: Some(path.clone()),
            dice: Some(dice),
        });
    }

    let out = cfg.out_or("runs/overlay");
    create_dir(&out)?;
    cfg.write_provenance(&out)?;
    let ppm_path = out.join("overlay.ppm");
    let ppm = render::compose_ppm(&panels, a.scale as usize, 2);
    fs::write(&ppm_path, ppm).map_err(|e| CliError::io(&ppm_path, e))?;
    let sidecar = OverlaySidecar {
        subject,
        slice,
        split: a.split,
        scale: a.scale,
        height: h,
        width: w,
        colors: [render::TP_COLOR, render::FP_COLOR, render::FN_COLOR],
        panels: meta,
    };
    write_json(&out.join("overlay.json"), &sidecar)?;
    println!("wrote {} ({} panels)", ppm_path.display(), panels.len());
    Ok(())
}
