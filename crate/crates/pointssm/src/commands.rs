//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pointssm_core::data::{
    generate_named, parse_by_extension, synthetic_datasets, to_ply, ShapeKind,
};
use pointssm_core::geometry::{chamfer_distance, PointCloud};
use pointssm_core::model::{prepare, reconstruct, ModelConfig, Stage};
use pointssm_core::serialization::{locality_score, serialize, CurveKind, DEFAULT_GRID_BITS};
use pointssm_core::ssm::BlockKind;
use pointssm_core::training::{evaluate, finetune, pretrain, MetricRow, ModelCheckpoint};
use toml::Value;

use crate::bench::{bench_csv, doubling_report, doublings, run_bench};
use crate::checkpoint::{load_checkpoint, round_to_f32, save_checkpoint};
use crate::config::{env_seed, ConfigBuilder, Profile, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report::{
    line_plot_svg, metrics_csv, parse_metrics_csv, plot_series, write_manifest, write_text,
    RunManifest, BUILD_ID,
};

#[derive(Debug, Parser)]
#[command(name = "pointssm", version = BUILD_ID, about = "Point cloud serialization and selective state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Order a point cloud along a space-filling curve and write the ranks as CSV.
    Serialize(SerializeArgs),
    /// Masked-patch reconstruction pretraining on synthetic shapes.
    Pretrain(TrainArgs),
    /// Classification training, optionally from a pretrained checkpoint.
    Train(TrainArgs),
    /// Test accuracy of a classification checkpoint.
    Eval(EvalArgs),
    /// Block time and closed-form cost against sequence length.
    Bench(BenchArgs),
    /// PLY files of input, visible and reconstructed clouds, plus a loss plot.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SerializeArgs {
    /// Point cloud file (.off, .xyz, .txt, .pts or ascii .ply).
    #[arg(long, conflicts_with = "shape", required_unless_present = "shape")]
    pub input: Option<PathBuf>,
    /// Synthetic shape: sphere, cube, torus or cylinder.
    #[arg(long)]
    pub shape: Option<String>,
    /// Points to sample for --shape.
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    /// Gaussian noise for --shape.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// hilbert, trans_hilbert, z_order, trans_z_order or random.
    #[arg(long, default_value = "hilbert")]
    pub curve: String,
    /// Grid resolution per axis, in bits.
    #[arg(long, default_value_t = DEFAULT_GRID_BITS)]
    pub bits: u32,
    /// Seed for shape sampling and the random curve [default: $POINTSSM_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also compare the curve against this many random orders of the same cloud.
    #[arg(long, value_name = "TRIALS", num_args = 0..=1, default_missing_value = "20")]
    pub compare: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with [model], [data], [train] and [bench] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `train.lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed [default: $POINTSSM_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoder block: selective_ssm, identity, masked_attention or mlp [default: selective_ssm].
    #[arg(long)]
    pub block_kind: Option<String>,
    /// Initialize from this pretraining checkpoint (train only).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Train the head only (train only).
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Classification checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TOML file; only [data] is read [default: the checkpoint's data settings].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one data key, e.g. `data.seed=3` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Also write per-class accuracy CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML file; only [bench] is read.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated ascending lengths [default: 1024,2048,4096,8192].
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// selective_ssm and/or masked_attention, comma-separated [default: both].
    #[arg(long, value_delimiter = ',')]
    pub block: Option<Vec<String>>,
    /// Timed runs per row; the median is reported [default: 5].
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Token width C [default: 16].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Pretraining checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `KIND:SEED` for a synthetic shape or a point cloud file (repeatable).
    #[arg(long = "sample", required = true)]
    pub samples: Vec<String>,
    /// Masking seed.
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Which serialization of the curve bank to mask.
    #[arg(long, default_value_t = 0)]
    pub curve_slot: usize,
    /// Metrics CSV for the loss plot [default: metrics.csv beside the checkpoint].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Serialize(a) => cmd_serialize(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.map_or(0, |s| s as u64),
    })
}

fn read_cloud(path: &Path) -> CliResult<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    parse_by_extension(ext, &text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("# effective configuration (sha256 {})", cfg.hash());
    for line in cfg.to_toml().lines() {
        eprintln!("  {line}");
    }
}

pub fn cmd_serialize(a: &SerializeArgs) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    let cloud = match (&a.input, &a.shape) {
        (Some(p), _) => read_cloud(p)?,
        (None, Some(kind)) => {
            ShapeKind::parse(kind).map_err(|e| CliError::usage(e.to_string()))?;
            generate_named(kind, a.points, a.noise, seed)
                .map_err(|e| CliError::usage(e.to_string()))?
        }
        (None, None) => return Err(CliError::usage("one of --input or --shape is required")),
    };
    let curve = CurveKind::parse(&a.curve, seed).map_err(|e| CliError::usage(e.to_string()))?;
    let order =
        serialize(cloud.points(), curve, a.bits).map_err(|e| CliError::usage(e.to_string()))?;
    let mut csv = String::from("rank,index,x,y,z,curve_code\n");
    for (rank, &i) in order.order.iter().enumerate() {
        let [x, y, z] = cloud.points()[i];
        csv.push_str(&format!("{rank},{i},{x},{y},{z},{}\n", curve.code()));
    }
    emit(a.out.as_deref(), &csv)?;
    let score = if cloud.len() >= 2 {
        Some(locality_score(&order, cloud.points())?)
    } else {
        None
    };
    let say = |s: String| {
        if a.out.is_some() {
            println!("{s}")
        } else {
            eprintln!("{s}")
        }
    };
    match score {
        Some(s) => say(format!("locality_score {s}")),
        None => say("locality_score undefined for a single point".to_string()),
    }
    if let (Some(trials), Some(score)) = (a.compare, score) {
        let mut wins = 0;
        for t in 0..trials as u64 {
            let r = serialize(
                cloud.points(),
                CurveKind::Random(seed.wrapping_add(t)),
                a.bits,
            )?;
            let rs = locality_score(&r, cloud.points())?;
            wins += usize::from(score < rs);
            say(format!("trial {t}: {} {score} random {rs}", curve.name()));
        }
        say(format!(
            "{} beats random in {wins}/{trials} trials",
            curve.name()
        ));
    }
    Ok(())
}

fn training_config(a: &TrainArgs, profile: Profile) -> CliResult<RunConfig> {
    let mut b = ConfigBuilder::new(profile)
        .file(a.config.as_deref())?
        .overrides(&a.sets)?;
    if let Some(e) = a.epochs {
        b = b.set("train", "epochs", Value::Integer(e as i64));
    }
    if let Some(s) = a.seed {
        let s = i64::try_from(s).map_err(|_| CliError::usage("--seed must be at most 2^63 - 1"))?;
        b = b.set("train", "seed", Value::Integer(s));
    }
    if let Some(k) = &a.block_kind {
        BlockKind::parse(k).map_err(|e| CliError::usage(e.to_string()))?;
        b = b.set("model", "block_kind", Value::String(k.clone()));
    }
    if a.freeze_encoder {
        b = b.set("train", "freeze_encoder", Value::Boolean(true));
    }
    b.build()
}

fn progress(quiet: bool) -> impl FnMut(&[MetricRow]) {
    move |rows: &[MetricRow]| {
        if !quiet {
            let parts: Vec<String> = rows
                .iter()
                .map(|r| format!("{} {} {:.6}", r.split, r.metric, r.value))
                .collect();
            eprintln!("epoch {}: {}", rows[0].epoch, parts.join(", "));
        }
    }
}

fn finish_run(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    ck: &ModelCheckpoint,
    ck_name: &str,
    history: &[MetricRow],
) -> CliResult<()> {
    let ck_path = out.join(ck_name);
    save_checkpoint(&ck_path, ck)?;
    write_text(&out.join("metrics.csv"), &metrics_csv(history))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_text(
        &out.join("loss.svg"),
        &line_plot_svg(command, &plot_series(history)),
    )?;
    write_manifest(
        &out.join("manifest.json"),
        &RunManifest {
            command,
            build_id: BUILD_ID,
            config_sha256: cfg.hash(),
            seeds: vec![("train", cfg.train.seed), ("data", cfg.data.seed)],
            outputs: vec![
                ck_name.to_string(),
                "metrics.csv".into(),
                "config.toml".into(),
                "loss.svg".into(),
            ],
        },
    )?;
    println!("checkpoint {}", ck_path.display());
    Ok(())
}

pub fn cmd_pretrain(a: &TrainArgs) -> CliResult<()> {
    if a.pretrained.is_some() || a.freeze_encoder {
        return Err(CliError::usage(
            "--pretrained and --freeze-encoder apply to `train` only",
        ));
    }
    let cfg = training_config(a, Profile::Pretrain)?;
    echo_config(&cfg);
    let (train, _) = synthetic_datasets(&cfg.data)?;
    let mut hook = progress(a.quiet);
    let run = pretrain(&cfg.model, &cfg.train, &train, Some(&mut hook))?;
    let losses = run.series("train", "chamfer");
    let mut ck = ModelCheckpoint::new(Stage::Pretrain, cfg.model.clone(), run.params);
    ck.train = Some(cfg.train.clone());
    ck.data = Some(cfg.data);
    ck.optimizer = Some(run.optimizer);
    ck.seeds = vec![cfg.train.seed, cfg.data.seed];
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        ck.metrics.insert("first_epoch_chamfer".into(), *first);
        ck.metrics.insert("final_epoch_chamfer".into(), *last);
        println!("chamfer epoch 1 {first} final {last}");
    }
    finish_run(&a.out, "pretrain", &cfg, &ck, "pretrain.ckpt", &run.history)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = training_config(a, Profile::Classify)?;
    echo_config(&cfg);
    let pre = match &a.pretrained {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.stage != Stage::Pretrain {
                return Err(CliError::data(format!(
                    "{}: not a pretraining checkpoint",
                    p.display()
                )));
            }
            Some(ck)
        }
        None => None,
    };
    let (train, test) = synthetic_datasets(&cfg.data)?;
    let mut hook = progress(a.quiet);
    let out = finetune(
        &cfg.model,
        &cfg.train,
        pre.as_ref().map(|c| &c.params),
        &train,
        &test,
        Some(&mut hook),
    )?;
    if let Some(rep) = &out.transfer {
        eprintln!("loaded {} pretrained tensors", rep.copied.len());
        if !rep.dropped.is_empty() {
            eprintln!("dropped {}", rep.dropped.join(", "));
        }
    }
    let mut params = out.run.params;
    round_to_f32(&mut params);
    let eval = evaluate(&cfg.model, &params, &test)?;
    let mut ck = ModelCheckpoint::new(Stage::Classify, cfg.model.clone(), params);
    ck.train = Some(cfg.train.clone());
    ck.data = Some(cfg.data);
    ck.optimizer = Some(out.run.optimizer);
    ck.seeds = vec![cfg.train.seed, cfg.data.seed];
    ck.metrics.insert("test_accuracy".into(), eval.overall);
    println!("accuracy {}", eval.overall);
    finish_run(&a.out, "train", &cfg, &ck, "train.ckpt", &out.run.history)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.stage != Stage::Classify {
        return Err(CliError::data(format!(
            "{}: not a classification checkpoint",
            a.checkpoint.display()
        )));
    }
    let mut b = ConfigBuilder::new(Profile::Classify);
    if let Some(d) = ck.data {
        let t = toml::Table::try_from(d).map_err(|e| CliError::data(e.to_string()))?;
        for (k, v) in t {
            b = b.set("data", &k, v);
        }
    }
    let model_table =
        toml::Table::try_from(&ck.model).map_err(|e| CliError::data(e.to_string()))?;
    for (k, v) in model_table {
        b = b.set("model", &k, v);
    }
    let cfg = b.file(a.config.as_deref())?.overrides(&a.sets)?.build()?;
    if cfg.model != ck.model {
        return Err(CliError::usage(
            "eval reads the model from the checkpoint; [model] overrides are not allowed",
        ));
    }
    let (_, test) = synthetic_datasets(&cfg.data)?;
    let e = evaluate(&ck.model, &ck.params, &test)?;
    println!("accuracy {}", e.overall);
    if let Some(r) = ck.metrics.get("test_accuracy") {
        println!("recorded_accuracy {r}");
    }
    let mut csv = String::from("class,accuracy\n");
    for (name, acc) in test.class_names.iter().zip(&e.per_class) {
        println!("class {name} {acc}");
        csv.push_str(&format!("{name},{acc}\n"));
    }
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let mut b = ConfigBuilder::new(Profile::Classify).file(a.config.as_deref())?;
    if let Some(l) = &a.lengths {
        b = b.set(
            "bench",
            "lengths",
            Value::Array(l.iter().map(|&x| Value::Integer(x as i64)).collect()),
        );
    }
    if let Some(k) = &a.block {
        b = b.set(
            "bench",
            "blocks",
            Value::Array(
                k.iter()
                    .map(|s| Value::String(s.trim().to_string()))
                    .collect(),
            ),
        );
    }
    if let Some(r) = a.repeat {
        b = b.set("bench", "repeat", Value::Integer(r as i64));
    }
    if let Some(d) = a.dim {
        b = b.set("bench", "d_model", Value::Integer(d as i64));
    }
    let cfg = b.build()?;
    eprintln!("# bench {:?}", cfg.bench);
    let rows = run_bench(&cfg.bench, |r| {
        let t = r
            .median_ms
            .map_or_else(|| "oom".to_string(), |m| format!("{m:.3} ms"));
        eprintln!("{} L={}: {t}", r.block, r.length);
    })?;
    emit(a.out.as_deref(), &bench_csv(&rows))?;
    eprint!("{}", doubling_report(&doublings(&rows)));
    Ok(())
}

fn sample_cloud(sample: &str, cfg: &ModelConfig) -> CliResult<(String, PointCloud)> {
    if let Some((kind, seed)) = sample.split_once(':') {
        if ShapeKind::parse(kind).is_ok() {
            let seed: u64 = seed
                .parse()
                .map_err(|_| CliError::usage(format!("sample `{sample}`: bad seed")))?;
            let cloud = generate_named(kind, cfg.num_points, 0.0, seed)?;
            return Ok((format!("{kind}_{seed}"), cloud));
        }
    }
    let path = Path::new(sample);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    Ok((stem, read_cloud(path)?))
}

pub fn cmd_export(a: &ExportArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.stage != Stage::Pretrain {
        return Err(CliError::data(format!(
            "{}: export needs a pretraining checkpoint",
            a.checkpoint.display()
        )));
    }
    if a.curve_slot >= ck.model.curves.len() {
        return Err(CliError::usage(format!(
            "--curve-slot {} with {} curves",
            a.curve_slot,
            ck.model.curves.len()
        )));
    }
    let mut outputs = Vec::new();
    for sample in &a.samples {
        let (stem, cloud) = sample_cloud(sample, &ck.model)?;
        let prep = prepare(&cloud, &ck.model, None)?;
        let rec = reconstruct(&prep, &ck.model, &ck.params, a.curve_slot, a.mask_seed)?;
        for (suffix, pts) in [
            ("input", cloud.points()),
            ("visible", &rec.visible_points),
            ("reconstructed", &rec.reconstructed_points),
        ] {
            let name = format!("{stem}_{suffix}.ply");
            write_text(&a.out.join(&name), &to_ply(pts))?;
            outputs.push(name);
        }
        let cd = chamfer_distance(&rec.reconstructed_points, cloud.points())?;
        println!("chamfer {stem} {cd}");
    }
    let metrics = a
        .metrics
        .clone()
        .or_else(|| a.checkpoint.parent().map(|d| d.join("metrics.csv")));
    match metrics.filter(|p| p.exists()) {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let rows = parse_metrics_csv(&text)?;
            write_text(
                &a.out.join("loss.svg"),
                &line_plot_svg("pretraining loss", &plot_series(&rows)),
            )?;
            outputs.push("loss.svg".into());
        }
        None => eprintln!("no metrics CSV found; skipping loss.svg"),
    }
    eprintln!("wrote {}", outputs.join(", "));
    Ok(())
}
