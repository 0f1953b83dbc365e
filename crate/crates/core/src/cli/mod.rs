//! `mdbanet` command line: phantom generation, scar statistics, training,
//! prediction, evaluation and overlay reports.

mod config;
pub mod render;

pub use config::{PhantomOptions, ReportOptions, RunConfig, SplitSelection};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use ndarray::{s, Array2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{aggregate_eval, format_method_table, scar_histogram, Connectivity, ScarSizeHistogram};
use crate::network::{load_checkpoint, FusionMode, Network};
use crate::phantom::write_phantom_dataset;
use crate::train::{case_metrics, evaluate_cases, train_cases, TrainOutcome};
use crate::volume_io::{
    load_case_with, load_label_map, save_label_map, split_dataset, BranchTarget, DatasetManifest, LabelEncoding,
    LabelMap, ManifestEntry, Split, Volume,
};

/// Process exit status for success, bad input and runtime failure.
pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Parser)]
#[command(name = "mdbanet", version, about = "Left atrium and atrial scar segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled dataset and its manifest.
    Phantom(PhantomArgs),
    /// Scar-size histogram (count / volume per size bin) over labelled cases.
    Stats(StatsArgs),
    /// Train one network, or one per fusion mode.
    Train(TrainArgs),
    /// Write predicted label maps for a split.
    Predict(PredictArgs),
    /// DS / HD report for a checkpoint or a directory of predictions.
    Evaluate(EvaluateArgs),
    /// Axial slice overlays of reference and predicted scar contours.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags take precedence over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub count: Option<usize>,
    /// Assign this many cases to the train split, the rest to eval.
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_scars: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Component connectivity: 6, 18, 26 (repeatable).
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Vec<Connectivity>,
    /// Evaluate all three connectivities.
    #[arg(long)]
    pub all_connectivities: bool,
    /// Raw-to-canonical label mapping, e.g. "0:0,420:1,421:2".
    #[arg(long)]
    pub label_encoding: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion_mode: Option<FusionMode>,
    /// Train one network per mode (comma separated) and tabulate them.
    #[arg(long, value_parser = parse_fusion, value_delimiter = ',')]
    pub fusion_modes: Vec<FusionMode>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitSelection>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<case_id>_pred.nii.gz` label maps.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitSelection>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Method name in reports built from prediction files.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub label_encoding: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitSelection>,
    /// Axial slice indices (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub slices: Vec<usize>,
    #[arg(long)]
    pub zoom: Option<u32>,
    #[arg(long)]
    pub label_encoding: Option<String>,
}

fn parse_connectivity(s: &str) -> std::result::Result<Connectivity, String> {
    s.parse::<u8>()
        .map_err(|e| e.to_string())
        .and_then(|v| Connectivity::try_from(v).map_err(|e| e.to_string()))
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse::<FusionMode>().map_err(|e| e.to_string())
}

fn base_config(common: &CommonArgs, command: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.command = Some(command.to_string());
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &common.output_dir {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.require_output_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir.join("resolved_config.json"))?;
    Ok(dir)
}

fn encoding(cfg: &RunConfig) -> Result<LabelEncoding> {
    match &cfg.label_encoding {
        Some(s) => LabelEncoding::parse(s).map_err(|e| Error::InvalidConfig(format!("label_encoding: {e}"))),
        None => Ok(LabelEncoding::default()),
    }
}

/// Parses arguments, resolves the configuration and runs the command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, "phantom")?;
    if let Some(c) = a.count {
        cfg.phantom.count = c;
    }
    if a.n_train.is_some() {
        cfg.phantom.n_train = a.n_train;
    }
    if let Some(n) = a.n_scars {
        cfg.phantom.spec.n_scars = n;
    }
    if let Some(s) = a.noise_sigma {
        cfg.phantom.spec.noise_sigma = s;
    }
    cfg.resolve()?;
    if cfg.phantom.count == 0 {
        return Err(Error::InvalidConfig("phantom.count: must be >= 1".into()));
    }
    let dir = prepare_output(&cfg)?;
    let manifest = write_phantom_dataset(&dir, &cfg.phantom.spec, cfg.phantom.count)?;
    if let Some(n) = cfg.phantom.n_train {
        split_dataset(&manifest, n, cfg.seed)?.save(&dir.join("manifest.json"))?;
    }
    info!("wrote {} phantoms to {}", cfg.phantom.count, dir.display());
    Ok(())
}

/// Histogram of one connectivity over all labelled cases.
#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub connectivity: u8,
    pub cases: usize,
    pub total_count: usize,
    pub total_volume_mm3: f64,
    pub histogram: ScarSizeHistogram,
}

/// Aggregates scar-size histograms per requested connectivity.
pub fn compute_stats(manifest: &DatasetManifest, connectivity: &[Connectivity], enc: &LabelEncoding) -> Result<Vec<StatsReport>> {
    let labeled: Vec<&ManifestEntry> = manifest.labeled().collect();
    if labeled.is_empty() {
        return Err(Error::Manifest("no labelled cases in the manifest".into()));
    }
    let mut hists = vec![ScarSizeHistogram::default(); connectivity.len()];
    for e in &labeled {
        let l = load_label_map(e.label.as_deref().expect("labelled"), enc)?;
        for (h, &c) in hists.iter_mut().zip(connectivity) {
            h.merge(&scar_histogram(&l, c));
        }
    }
    Ok(hists
        .into_iter()
        .zip(connectivity)
        .map(|(h, c)| StatsReport {
            connectivity: c.as_u8(),
            cases: labeled.len(),
            total_count: h.total_count(),
            total_volume_mm3: h.total_volume(),
            histogram: h,
        })
        .collect())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, "stats")?;
    if a.all_connectivities {
        cfg.connectivity = Connectivity::ALL.to_vec();
    } else if !a.connectivity.is_empty() {
        cfg.connectivity = a.connectivity.clone();
    }
    if a.label_encoding.is_some() {
        cfg.label_encoding = a.label_encoding.clone();
    }
    cfg.resolve()?;
    let enc = encoding(&cfg)?;
    let manifest = cfg.require_manifest()?;
    if manifest.labeled().next().is_none() {
        return Err(Error::Manifest("no labelled cases in the manifest".into()));
    }
    let dir = prepare_output(&cfg)?;
    let reports = compute_stats(&manifest, &cfg.connectivity, &enc)?;
    for r in &reports {
        let stem = format!("scar_stats_c{}", r.connectivity);
        let table = r.histogram.to_table();
        fs::write(dir.join(format!("{stem}.tsv")), &table).map_err(|e| Error::io(&dir, e))?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(r)? + "\n").map_err(|e| Error::io(&dir, e))?;
        render::render_histogram(&r.histogram).save(dir.join(format!("{stem}.png")))?;
        println!(
            "connectivity {}: {} scars, {:.2} mm3 total over {} cases",
            r.connectivity, r.total_count, r.total_volume_mm3, r.cases
        );
        print!("{table}");
    }
    Ok(())
}

fn train_data(manifest: &DatasetManifest, split: Split, enc: &LabelEncoding) -> Result<Vec<(Volume, LabelMap)>> {
    manifest
        .in_split(split)
        .map(|e| {
            let label = e
                .label
                .as_deref()
                .ok_or_else(|| Error::Manifest(format!("case {} has no label file", e.case_id)))?;
            let (mut v, l) = load_case_with(&e.image, Some(label), enc)?;
            v.case_id = e.case_id.clone();
            Ok((v, l.expect("label requested")))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, "train")?;
    if let Some(m) = a.fusion_mode {
        cfg.network = cfg.network.clone().with_fusion(m);
    }
    if !a.fusion_modes.is_empty() {
        cfg.fusion_modes = a.fusion_modes.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        t.steps_per_epoch = v;
    }
    if let Some(v) = a.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.no_augment {
        t.augment = crate::train::AugmentConfig::disabled();
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    cfg.resolve()?;
    let enc = encoding(&cfg)?;
    let manifest = cfg.require_manifest()?;
    if manifest.in_split(Split::Train).next().is_none() {
        return Err(Error::Manifest("no cases assigned to the train split".into()));
    }
    let dir = prepare_output(&cfg)?;
    let train = train_data(&manifest, Split::Train, &enc)?;
    let eval = train_data(&manifest, Split::Eval, &enc)?;
    let modes = cfg.modes();
    let ablation = modes.len() > 1;
    let mut results = Vec::new();
    for mode in modes {
        let net_cfg = cfg.network.clone().with_fusion(mode);
        let mut net = Network::new(net_cfg, cfg.seed)?;
        let run_dir = if ablation {
            let d = dir.join(net.config().method_name());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            d
        } else {
            dir.clone()
        };
        let TrainOutcome { log, best_eval } = train_cases(&mut net, &train, &eval, &cfg.train, Some(&run_dir))?;
        if let Some(last) = log.last() {
            info!("{}: final loss {:.4}", net.config().method_name(), last.total);
        }
        if let Some((step, ds)) = best_eval {
            info!("best eval scar DS {ds:.4} at step {step}");
        }
        if eval.is_empty() {
            warn!("no eval split; skipping the evaluation report");
            continue;
        }
        let res = evaluate_cases(&net, &eval, cfg.train.la_target, cfg.threshold)?;
        res.write_csv(&run_dir.join("eval.csv"))?;
        res.write_json(&run_dir.join("eval.json"))?;
        results.push(res);
    }
    if !results.is_empty() {
        let table = format_method_table(&results);
        fs::write(dir.join("methods.tsv"), &table).map_err(|e| Error::io(&dir, e))?;
        print!("{table}");
    }
    Ok(())
}

fn prediction_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_pred.nii.gz"))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, "predict")?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    if a.split.is_some() {
        cfg.split = a.split;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    cfg.split.get_or_insert(SplitSelection::All);
    cfg.resolve()?;
    let ckpt = cfg.require_existing("checkpoint", cfg.checkpoint.as_deref())?;
    let manifest = cfg.require_manifest()?;
    let entries = cfg.split.expect("defaulted").select(&manifest);
    if entries.is_empty() {
        return Err(Error::Manifest("no cases in the selected split".into()));
    }
    let net = load_checkpoint(&ckpt, None)?.network;
    let dir = prepare_output(&cfg)?;
    for e in entries {
        let (v, _) = load_case_with(&e.image, None, &LabelEncoding::default())?;
        let pred = net.predict_case(&v, cfg.threshold)?;
        save_label_map(&pred, &prediction_path(&dir, &e.case_id))?;
        info!("predicted {}", e.case_id);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, "evaluate")?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    if a.predictions.is_some() {
        cfg.predictions = a.predictions.clone();
    }
    if a.split.is_some() {
        cfg.split = a.split;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if a.method.is_some() {
        cfg.method = a.method.clone();
    }
    if a.label_encoding.is_some() {
        cfg.label_encoding = a.label_encoding.clone();
    }
    cfg.split.get_or_insert(SplitSelection::Eval);
    cfg.resolve()?;
    let enc = encoding(&cfg)?;
    let manifest = cfg.require_manifest()?;
    let entries = cfg.split.expect("defaulted").select(&manifest);
    if entries.is_empty() {
        return Err(Error::Manifest("no cases in the selected split".into()));
    }
    if let Some(e) = entries.iter().find(|e| e.label.is_none()) {
        return Err(Error::Manifest(format!("case {} has no label file", e.case_id)));
    }
    let source = match (&cfg.checkpoint, &cfg.predictions) {
        (Some(_), Some(_)) => return Err(Error::InvalidConfig("checkpoint and predictions are mutually exclusive".into())),
        (Some(c), None) => Source::Network(Box::new(load_checkpoint(&cfg.require_existing("checkpoint", Some(c))?, None)?.network)),
        (None, Some(p)) => Source::Files(cfg.require_existing("predictions", Some(p))?),
        (None, None) => return Err(Error::InvalidConfig("checkpoint or predictions: one is required".into())),
    };
    let dir = prepare_output(&cfg)?;
    let result = match &source {
        Source::Network(net) => {
            let cases = entries
                .iter()
                .map(|e| {
                    let (mut v, l) = load_case_with(&e.image, e.label.as_deref(), &enc)?;
                    v.case_id = e.case_id.clone();
                    Ok((v, l.expect("labelled")))
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate_cases(net, &cases, cfg.train.la_target, cfg.threshold)?
        }
        Source::Files(pdir) => {
            let per_case = entries
                .iter()
                .map(|e| {
                    let gt = load_label_map(e.label.as_deref().expect("checked"), &enc)?;
                    let pred = load_label_map(&prediction_path(pdir, &e.case_id), &LabelEncoding::default())?;
                    if pred.shape() != gt.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: prediction {:?} vs reference {:?}",
                            e.case_id,
                            pred.shape(),
                            gt.shape()
                        )));
                    }
                    let with_la = pred.labels.iter().any(|&v| BranchTarget::La(cfg.train.la_target).contains(v))
                        || gt.count(crate::volume_io::LA) > 0;
                    case_metrics(&e.case_id, &pred, &gt, cfg.train.la_target, with_la)
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate_eval(cfg.method.as_deref().unwrap_or("prediction"), per_case)?
        }
    };
    result.write_csv(&dir.join("eval.csv"))?;
    result.write_json(&dir.join("eval.json"))?;
    print!("{}", format_method_table(std::slice::from_ref(&result)));
    Ok(())
}

enum Source {
    Network(Box<Network>),
    Files(PathBuf),
}

/// Axial slice with the most voxels of `mask`, or the middle slice.
fn busiest_slice(mask: &ndarray::Array3<bool>) -> usize {
    let counts: Vec<usize> = mask.axis_iter(Axis(0)).map(|s| s.iter().filter(|&&v| v).count()).collect();
    match counts.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))) {
        Some((i, &c)) if c > 0 => i,
        _ => mask.dim().0 / 2,
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut cfg = base_config(&a.common, "report")?;
    if a.predictions.is_some() {
        cfg.predictions = a.predictions.clone();
    }
    if a.split.is_some() {
        cfg.split = a.split;
    }
    if !a.slices.is_empty() {
        cfg.report.slices = a.slices.clone();
    }
    if let Some(z) = a.zoom {
        cfg.report.zoom = z;
    }
    if a.label_encoding.is_some() {
        cfg.label_encoding = a.label_encoding.clone();
    }
    cfg.split.get_or_insert(SplitSelection::All);
    cfg.resolve()?;
    let enc = encoding(&cfg)?;
    let pdir = cfg.require_existing("predictions", cfg.predictions.as_deref())?;
    let manifest = cfg.require_manifest()?;
    let entries: Vec<&ManifestEntry> = cfg
        .split
        .expect("defaulted")
        .select(&manifest)
        .into_iter()
        .filter(|e| e.label.is_some())
        .collect();
    if entries.is_empty() {
        return Err(Error::Manifest("no labelled cases in the selected split".into()));
    }
    let dir = prepare_output(&cfg)?;
    for e in entries {
        let (v, gt) = load_case_with(&e.image, e.label.as_deref(), &enc)?;
        let gt = gt.expect("labelled");
        let pred = load_label_map(&prediction_path(&pdir, &e.case_id), &LabelEncoding::default())?;
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: prediction {:?} vs reference {:?}",
                e.case_id,
                pred.shape(),
                gt.shape()
            )));
        }
        let gmask = gt.target_mask(BranchTarget::Scar);
        let pmask = pred.target_mask(BranchTarget::Scar);
        let slices = if cfg.report.slices.is_empty() {
            vec![busiest_slice(&gmask)]
        } else {
            cfg.report.slices.clone()
        };
        for z in slices {
            if z >= v.shape()[0] {
                return Err(Error::InvalidArgument(format!("slice {z} outside {} (depth {})", e.case_id, v.shape()[0])));
            }
            let img: Array2<f32> = v.voxels.slice(s![z, .., ..]).to_owned();
            let r: Array2<bool> = gmask.slice(s![z, .., ..]).to_owned();
            let p: Array2<bool> = pmask.slice(s![z, .., ..]).to_owned();
            render::render_overlay(&img, &r, &p, cfg.report.zoom)?.save(dir.join(format!("{}_z{z:03}.png", e.case_id)))?;
        }
    }
    Ok(())
}
