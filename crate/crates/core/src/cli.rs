//! Command implementations behind the `prema` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::aggregator::AggregationVariant;
use crate::checkpoint::{load_model, save_encoder, save_model, Dtype};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, load_manifest, DatasetManifest, NoiseConfig, Split};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, f1_at_k, ndcg, pr_auc, MetricsReport};
use crate::retrieval::rank_all;
use crate::train::{
    attention_localization, evaluate, init_encoder, init_prema, load_split, train_stage1,
    train_stage2, EpochLog, Stage1Model,
};

#[derive(Debug, Parser)]
#[command(name = "prema", version, about = "Part-based recurrent multi-view aggregation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural dataset and write its manifest.
    Generate(CommonArgs),
    /// Two-stage training; writes stage-1/stage-2 checkpoints and a log.
    Train(CommonArgs),
    /// Retrieval metrics and accuracies of a checkpoint.
    Evaluate(CommonArgs),
    /// Train and compare every aggregation variant.
    Ablate(CommonArgs),
    /// Missing-view, occlusion and clutter sweeps of a checkpoint.
    Robust(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub missing: Option<usize>,
    #[arg(long = "occluder-scale")]
    pub occluder_scale: Option<f64>,
    #[arg(long)]
    pub clutter: Option<usize>,
    /// Output directory (the dataset directory for `generate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self, generate: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(m) = self.missing {
            cfg.missing_views = m;
        }
        if let Some(o) = self.occluder_scale {
            cfg.occluder_scale = o;
        }
        if let Some(c) = self.clutter {
            cfg.clutter_count = c;
        }
        if let Some(o) = &self.out {
            if generate {
                cfg.dataset_dir = o.clone();
            } else {
                cfg.out_dir = o.clone();
            }
        }
        cfg.validate()?;
        log::info!("resolved configuration:\n{}", cfg.to_text());
        Ok(cfg)
    }

    fn checkpoint(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join("stage2.prma"))
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn start_run(cfg: &RunConfig) -> Result<()> {
    mkdir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("resolved_config.txt"), &cfg.to_text())
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let m = load_manifest(&cfg.dataset_dir)?;
    if m.meta.image_size != cfg.image_size || m.meta.class_count != cfg.class_count {
        return Err(Error::Config(format!(
            "dataset at {} has {} classes of {}px views; config expects {} of {}px",
            cfg.dataset_dir.display(),
            m.meta.class_count,
            m.meta.image_size,
            cfg.class_count,
            cfg.image_size
        )));
    }
    Ok(m)
}

pub fn cmd_generate(args: &CommonArgs) -> Result<PathBuf> {
    let cfg = args.resolve(true)?;
    mkdir(&cfg.dataset_dir)?;
    generate_dataset(&cfg.generate_options(), &cfg.dataset_dir)?;
    let path = cfg.dataset_dir.join("manifest.jsonl");
    println!("{}", path.display());
    Ok(path)
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_csv(
        path,
        &["stage", "epoch", "lr", "mean_loss"],
        log.iter().map(|l| (l.stage, l.epoch, l.lr, l.mean_loss)),
    )
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve(false)?;
    let m = manifest(&cfg)?;
    start_run(&cfg)?;
    let data = load_split(&m, Split::Train)?;
    let model = cfg.model_config();
    let tc = cfg.train_config();
    let stage1 = Stage1Model::init(init_encoder(&model, cfg.seed)?, model.classes, cfg.seed);
    let (encoder, mut log) = train_stage1(&tc, &data, stage1)?;
    save_encoder(&cfg.out_dir.join("stage1.prma"), &encoder, Dtype::F64)?;
    let (params, log2) = train_stage2(&tc, &data, init_prema(&model, encoder, cfg.seed)?)?;
    save_model(&cfg.out_dir.join("stage2.prma"), &params, Dtype::F64)?;
    log.extend(log2);
    write_log(&cfg.out_dir.join("train_log.csv"), &log)?;
    println!("{}", cfg.out_dir.join("stage2.prma").display());
    Ok(())
}

#[derive(Serialize)]
struct QueryRow {
    query: String,
    ap: f64,
    auc_pr: f64,
    ndcg: f64,
    f1_at_k: f64,
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    write_csv(&dir.join(format!("{stem}_pr_curve.csv")), &["recall", "precision"], report.pr_curve.iter().copied())
}

pub fn cmd_evaluate(args: &CommonArgs) -> Result<MetricsReport> {
    let cfg = args.resolve(false)?;
    let params = load_model(&args.checkpoint(&cfg))?;
    let m = manifest(&cfg)?;
    start_run(&cfg)?;
    let noise = cfg.noise();
    let (report, emb) = evaluate(&params, &m, cfg.eval_split, &noise, cfg.f1_k)?;
    write_report(&cfg.out_dir, "metrics", &report)?;
    let results = rank_all(&emb.items)?;
    write_csv(
        &cfg.out_dir.join("per_query.csv"),
        &["query", "ap", "auc_pr", "ndcg", "f1_at_k"],
        results.iter().filter_map(|r| {
            Some(QueryRow {
                query: r.query.clone(),
                ap: average_precision(&r.relevant)?,
                auc_pr: pr_auc(&r.relevant)?,
                ndcg: ndcg(&r.relevant)?,
                f1_at_k: f1_at_k(&r.relevant, cfg.f1_k)?,
            })
        }),
    )?;
    if cfg.export_confidence && params.rau.is_some() {
        let n = emb.confidences.first().and_then(|c| c.first()).map_or(0, |c| c.conf.numel());
        let mut header = vec!["shape_id".to_string(), "view".to_string()];
        header.extend((0..n).map(|i| format!("c{i}")));
        let path = cfg.out_dir.join("confidence_maps.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        w.write_record(&header).map_err(|e| Error::format(&path, e.to_string()))?;
        for (item, confs) in emb.items.iter().zip(&emb.confidences) {
            for (k, c) in confs.iter().enumerate() {
                let mut row = vec![item.shape_id.clone(), k.to_string()];
                row.extend(c.conf.data().iter().map(|v| format!("{v:e}")));
                w.write_record(&row).map_err(|e| Error::format(&path, e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let loc = attention_localization(&params, &m, cfg.eval_split)?;
        write_json(&cfg.out_dir.join("localization.json"), &loc)?;
    }
    println!(
        "mAP {:.4}  auc_pr {:.4}  ndcg {:.4}  f1@{} {:.4}  acc {:.4}/{:.4}",
        report.map,
        report.auc_pr,
        report.ndcg,
        report.k,
        report.f1_at_k,
        report.accuracy_per_instance,
        report.accuracy_per_class
    );
    Ok(report)
}

#[derive(Serialize)]
struct SweepRow {
    setting: String,
    #[serde(rename = "mAP")]
    map: f64,
    auc_pr: f64,
    ndcg: f64,
    f1_at_k: f64,
    accuracy_per_instance: f64,
    accuracy_per_class: f64,
}

impl SweepRow {
    fn new(setting: String, r: &MetricsReport) -> Self {
        SweepRow {
            setting,
            map: r.map,
            auc_pr: r.auc_pr,
            ndcg: r.ndcg,
            f1_at_k: r.f1_at_k,
            accuracy_per_instance: r.accuracy_per_instance,
            accuracy_per_class: r.accuracy_per_class,
        }
    }
}

const SWEEP_HEADER: [&str; 7] = [
    "setting",
    "mAP",
    "auc_pr",
    "ndcg",
    "f1_at_k",
    "accuracy_per_instance",
    "accuracy_per_class",
];

pub fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve(false)?;
    let m = manifest(&cfg)?;
    start_run(&cfg)?;
    let data = load_split(&m, Split::Train)?;
    let tc = cfg.train_config();
    let base = cfg.model_config();
    let stage1 = Stage1Model::init(init_encoder(&base, cfg.seed)?, base.classes, cfg.seed);
    let (encoder, log1) = train_stage1(&tc, &data, stage1)?;
    write_log(&cfg.out_dir.join("stage1_log.csv"), &log1)?;
    let mut rows = Vec::new();
    for variant in AggregationVariant::ALL {
        let model = crate::aggregator::ModelConfig { variant, ..base.clone() };
        let (params, log) = train_stage2(&tc, &data, init_prema(&model, encoder.clone(), cfg.seed)?)?;
        write_log(&cfg.out_dir.join(format!("stage2_{variant}_log.csv")), &log)?;
        save_model(&cfg.out_dir.join(format!("stage2_{variant}.prma")), &params, Dtype::F64)?;
        let (report, _) = evaluate(&params, &m, cfg.eval_split, &cfg.noise(), cfg.f1_k)?;
        println!("{variant:<22} mAP {:.4}  auc_pr {:.4}", report.map, report.auc_pr);
        rows.push(SweepRow::new(variant.to_string(), &report));
    }
    write_json(
        &cfg.out_dir.join("ablation.json"),
        &rows.iter().map(|r| (&r.setting, r.map, r.auc_pr)).collect::<Vec<_>>(),
    )?;
    write_csv(&cfg.out_dir.join("ablation.csv"), &SWEEP_HEADER, rows)
}

pub const MISSING_SWEEP: [usize; 5] = [0, 2, 4, 6, 8];
pub const OCCLUDER_SWEEP: [f64; 4] = [0.8, 1.0, 1.2, 1.4];
pub const CLUTTER_SWEEP: [usize; 2] = [0, 4];

#[derive(Serialize)]
struct TrendSummary {
    missing_map: Vec<f64>,
    missing_non_increasing: bool,
    missing_drop: f64,
    occlusion_map: Vec<f64>,
    occlusion_drop: f64,
    clutter_map: Vec<f64>,
    clutter_drop: f64,
}

pub fn cmd_robust(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve(false)?;
    let params = load_model(&args.checkpoint(&cfg))?;
    let m = manifest(&cfg)?;
    start_run(&cfg)?;
    let base = NoiseConfig {
        noise_seed: cfg.noise_seed,
        ..NoiseConfig::default()
    };
    let sweep = |name: &str, settings: Vec<(String, NoiseConfig)>| -> Result<Vec<f64>> {
        let mut rows = Vec::new();
        let mut maps = Vec::new();
        for (label, noise) in settings {
            let (report, _) = evaluate(&params, &m, cfg.eval_split, &noise, cfg.f1_k)?;
            write_csv(
                &cfg.out_dir.join(format!("pr_{name}_{label}.csv")),
                &["recall", "precision"],
                report.pr_curve.iter().copied(),
            )?;
            println!("{name} {label}: mAP {:.4}", report.map);
            maps.push(report.map);
            rows.push(SweepRow::new(label, &report));
        }
        write_csv(&cfg.out_dir.join(format!("robust_{name}.csv")), &SWEEP_HEADER, rows)?;
        Ok(maps)
    };
    let missing = sweep(
        "missing",
        MISSING_SWEEP
            .iter()
            .map(|&k| (k.to_string(), NoiseConfig { missing_view_count: k, ..base }))
            .collect(),
    )?;
    let occlusion = sweep(
        "occlusion",
        OCCLUDER_SWEEP
            .iter()
            .map(|&s| (format!("{s:.1}"), NoiseConfig { occluder_scale: s, ..base }))
            .collect(),
    )?;
    let clutter = sweep(
        "clutter",
        CLUTTER_SWEEP
            .iter()
            .map(|&c| (c.to_string(), NoiseConfig { clutter_count: c, ..base }))
            .collect(),
    )?;
    let summary = TrendSummary {
        missing_non_increasing: missing.windows(2).all(|w| w[1] <= w[0] + 0.01),
        missing_drop: missing[0] - missing[missing.len() - 1],
        occlusion_drop: occlusion[0] - occlusion[occlusion.len() - 1],
        clutter_drop: clutter[0] - clutter[clutter.len() - 1],
        missing_map: missing,
        occlusion_map: occlusion,
        clutter_map: clutter,
    };
    write_json(&cfg.out_dir.join("robust_summary.json"), &summary)
}

/// Parses `argv`, runs the command and maps failures to exit codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| ()),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Robust(a) => cmd_robust(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
