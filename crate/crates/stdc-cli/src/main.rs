//! Command line front end: dataset generation, model training, detector
//! evaluation, coupling sweeps, and slice rendering over STDC containers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stdc::cube::{compute_climatology, DataCube, MaskSet};
use stdc::metrics::{evaluate_drivers, Counts, MultiVarCounts, Region};
use stdc::model::{Hyper, MicroModel, ModelCfg, ModelData};
use stdc::render::{write_overlay, write_pgm};
use stdc::store::{read_cube, write_cube};
use stdc::sweep::{correlation_sweep, rows_to_csv, run_detector, Detector};
use stdc::synth::{synthesize_dataset, GenConfig, Synthesis, SynthesisReport};

/// Benchmark toolkit for spatio-temporal driver detection.
#[derive(Parser)]
#[command(name = "stdc", version, about)]
struct Cli {
    /// Worker thread cap (defaults to STDC_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset from a TOML or JSON recipe.
    Generate(GenerateArgs),
    /// Train the quantization-bottleneck model on a generated cube.
    Train(TrainArgs),
    /// Score a detector or a checkpoint on one split of a generated cube.
    Eval(EvalArgs),
    /// Score detectors across coupled-variable counts.
    Sweep(SweepArgs),
    /// Render value, mask, and prediction slices as PGM/PPM images.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Recipe path (.toml, or .json with the same schema).
    config: PathBuf,
    /// Output directory for cube.stdc, report.json, and ledger.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the recipe seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Prints the fully resolved recipe as TOML and exits.
    #[arg(long)]
    print_effective_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Generated dataset (cube.stdc with ground-truth masks).
    dataset: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON training-report path (defaults to the checkpoint path + .json).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training seed (batch order and parameter initialization).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_commit: Option<f64>,
    #[arg(long)]
    lambda_ent: Option<f64>,
    #[arg(long)]
    lambda_div: Option<f64>,
    #[arg(long)]
    lambda_driver: Option<f64>,
    /// Fraction of steps before the driver penalty ramps up.
    #[arg(long)]
    driver_ramp: Option<f64>,
    /// Driver-penalty fraction held from step one.
    #[arg(long)]
    driver_floor: Option<f64>,
    /// Convention-repair cadence in steps (0 disables).
    #[arg(long)]
    fix_every: Option<usize>,
    /// Prints the resolved hyperparameters as JSON and exits.
    #[arg(long)]
    print_effective_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Generated dataset (cube.stdc with ground-truth masks).
    dataset: PathBuf,
    /// Detector name: naive|zscore|iforest|model|oracle.
    #[arg(long, conflicts_with = "checkpoint")]
    detector: Option<String>,
    /// Trained checkpoint to score instead of a named detector.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// z-score threshold override.
    #[arg(long)]
    threshold: Option<f64>,
    /// Appends result rows to this CSV (header written when absent).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base recipe; each cell regenerates it with a different coupling.
    config: PathBuf,
    /// Coupled-variable counts, comma separated or as a-b range.
    #[arg(long, default_value = "1-6")]
    counts: String,
    /// Comma-separated detector names.
    #[arg(long, default_value = "naive,zscore")]
    detectors: String,
    #[arg(long, default_value = "val")]
    split: String,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the recipe seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Prints the fully resolved recipe as TOML and exits.
    #[arg(long)]
    print_effective_config: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Generated dataset (cube.stdc).
    dataset: PathBuf,
    /// Week index to render.
    #[arg(long)]
    week: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint for prediction overlays and the extreme-probability panel.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Failures split by exit code: usage/config problems exit 2, runtime
/// failures exit 1.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<stdc::Error> for CliError {
    fn from(e: stdc::Error) -> Self {
        match e {
            stdc::Error::Config(_) | stdc::Error::Validation(_) | stdc::Error::Toml(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("STDC_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Plot(args) => cmd_plot(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Loads a recipe, accepting TOML and, for .json paths, the same schema as
/// JSON. Missing files and parse failures are usage errors naming the path.
fn load_config(path: &Path) -> CliResult<GenConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        usage(format!("cannot read config {}: {e}", path.display()))
    })?;
    let parsed = if path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str::<GenConfig>(&text)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?
    } else {
        GenConfig::from_toml_str(&text)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?
    };
    parsed.validate().map_err(|e| usage(e.to_string()))?;
    Ok(parsed)
}

fn print_variable_table(report: &SynthesisReport) {
    println!(
        "{:<10} {:>8} {:>6} {:>5} {:>5} {:>9} {:>9}",
        "variable", "coupled", "delta", "lead", "lag", "driver%", "random%"
    );
    for v in &report.variables {
        println!(
            "{:<10} {:>8} {:>6} {:>5} {:>5} {:>9.3} {:>9.3}",
            v.name, v.coupled, v.delta, v.lead, v.lag, v.driver_pct, v.random_pct
        );
    }
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.print_effective_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let synth = synthesize_dataset(&cfg)?;
    fs::create_dir_all(&args.out)?;

    let meta = serde_json::json!({
        "config": cfg,
        "report": synth.report,
    });
    let cube_path = args.out.join("cube.stdc");
    write_cube(&cube_path, &synth.cube, Some(&synth.masks), meta)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&synth.report)?,
    )?;
    let mut ledger = String::new();
    for entry in &synth.ledger {
        ledger.push_str(&serde_json::to_string(entry)?);
        ledger.push('\n');
    }
    fs::write(args.out.join("ledger.jsonl"), ledger)?;

    let r = &synth.report;
    println!(
        "{} seed {} hash {} -> {}",
        r.name,
        r.seed,
        &r.config_hash[..12.min(r.config_hash.len())],
        cube_path.display()
    );
    println!(
        "grid {}x{}x{} weeks, {} variables, {} valid pixels",
        r.lat, r.lon, r.t, r.vars, r.valid_pixels
    );
    println!(
        "ratios: extreme {:.3}% correlated {:.3}% random {:.3}%",
        r.ratios.extreme_pct, r.ratios.correlated_pct, r.ratios.random_pct
    );
    print_variable_table(r);
    Ok(())
}

/// Reads a generated cube plus the recipe and report stored in its header.
fn load_dataset(path: &Path) -> CliResult<(DataCube, MaskSet, GenConfig, SynthesisReport)> {
    if !path.exists() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    let (cube, masks, meta) = read_cube(path)?;
    let masks = masks.ok_or_else(|| {
        usage(format!("dataset {} has no ground-truth masks", path.display()))
    })?;
    let cfg: GenConfig = serde_json::from_value(meta["config"].clone()).map_err(|_| {
        usage(format!(
            "dataset {} header lacks the generating recipe; regenerate it with this tool",
            path.display()
        ))
    })?;
    let report: SynthesisReport = serde_json::from_value(meta["report"].clone()).map_err(|_| {
        usage(format!(
            "dataset {} header lacks the synthesis report; regenerate it with this tool",
            path.display()
        ))
    })?;
    Ok((cube, masks, cfg, report))
}

fn resolve_hyper(args: &TrainArgs) -> Hyper {
    let mut hyper = Hyper::default();
    if let Some(v) = args.steps {
        hyper.steps = v;
    }
    if let Some(v) = args.lr {
        hyper.lr = v;
    }
    if let Some(v) = args.tile {
        hyper.tile = v;
    }
    if let Some(v) = args.batch {
        hyper.batch = v;
    }
    if let Some(v) = args.seed {
        hyper.seed = v;
    }
    if let Some(v) = args.lambda_commit {
        hyper.lambdas.commit = v;
    }
    if let Some(v) = args.lambda_ent {
        hyper.lambdas.ent = v;
    }
    if let Some(v) = args.lambda_div {
        hyper.lambdas.div = v;
    }
    if let Some(v) = args.lambda_driver {
        hyper.lambdas.driver = v;
    }
    if let Some(v) = args.driver_ramp {
        hyper.driver_ramp_frac = v;
    }
    if let Some(v) = args.driver_floor {
        hyper.driver_floor = v;
    }
    if let Some(v) = args.fix_every {
        hyper.fix_every = v;
    }
    hyper
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let hyper = resolve_hyper(&args);
    if args.print_effective_config {
        println!("{}", serde_json::to_string_pretty(&hyper)?);
        return Ok(());
    }
    let (cube, masks, cfg, report) = load_dataset(&args.dataset)?;
    let ranges = cfg.week_ranges();
    let train_years = 0..cfg.splits.train_years;
    let clim = compute_climatology(&cube, train_years.clone())?;
    let data = ModelData::prepare(&cube, &masks.extremes, &clim)?;
    let mut model = MicroModel::init(ModelCfg::new(cube.dims.vars), hyper.seed);

    let mut train_report =
        model.train(&data, ranges.train.clone(), &hyper).map_err(CliError::from)?;

    let mut val_scores = None;
    if !ranges.val.is_empty() && hyper.steps > 0 {
        let inf = model.infer(&data, ranges.val.clone())?;
        let region = Region::new(cube.dims.spatial(), &cube.valid, ranges.val.clone());
        let counts = evaluate_drivers(&inf.drivers, &masks.drivers, &region);
        let extreme = extreme_counts(&inf.extreme_probs, &masks.extremes, &region, cube.dims.plane());
        train_report.final_driver_f1 = Some(counts.micro.scores().f1);
        train_report.final_extreme_f1 = Some(extreme.scores().f1);
        val_scores = Some(counts);
    }

    let extra = serde_json::json!({
        "hyper": hyper,
        "dataset": args.dataset.display().to_string(),
        "config_hash": report.config_hash,
        "train_years": [train_years.start, train_years.end],
        "final_driver_f1": train_report.final_driver_f1,
        "final_extreme_f1": train_report.final_extreme_f1,
    });
    model.save_checkpoint(&args.out, extra)?;

    let report_path = args
        .report
        .unwrap_or_else(|| PathBuf::from(format!("{}.json", args.out.display())));
    let first = train_report.history.first().cloned();
    let last = train_report.history.last().cloned();
    let report_json = serde_json::json!({
        "steps": hyper.steps,
        "wall_secs": train_report.wall_secs,
        "initial_losses": first,
        "final_losses": last,
        "final_driver_f1": train_report.final_driver_f1,
        "final_extreme_f1": train_report.final_extreme_f1,
    });
    fs::write(&report_path, serde_json::to_string_pretty(&report_json)?)?;

    println!(
        "trained {} steps in {:.1}s -> {}",
        hyper.steps,
        train_report.wall_secs,
        args.out.display()
    );
    if let Some(l) = train_report.history.last() {
        println!(
            "final losses: total {:.4} extreme {:.4} commit {:.4} ent {:.4} div {:.4} driver {:.4}",
            l.total, l.extreme, l.commit, l.ent, l.div, l.driver
        );
    }
    if let Some(counts) = val_scores {
        print_counts("val", "model", &counts);
    }
    Ok(())
}

/// Confusion counts of thresholded extreme probabilities against the
/// extreme ground truth over one split.
fn extreme_counts(probs: &[f32], extremes: &[u8], region: &Region, plane: usize) -> Counts {
    let mut c = Counts::default();
    for t in region.weeks.clone() {
        for p in 0..plane {
            if region.valid[p] == 0 {
                continue;
            }
            let pred = probs[t * plane + p] > 0.5;
            let gt = extremes[t * plane + p] != 0;
            match (pred, gt) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fneg += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

fn print_counts(split: &str, detector: &str, counts: &MultiVarCounts) {
    let s = counts.micro.scores();
    println!(
        "{split} {detector}: tp {} fp {} fn {} tn {} | F1 {:.2} IoU {:.2} OA {:.2}",
        counts.micro.tp, counts.micro.fp, counts.micro.fneg, counts.micro.tn, s.f1, s.iou, s.oa
    );
}

fn csv_append(path: &Path, rows: &[(String, String, usize, Counts)]) -> CliResult<()> {
    let mut text = String::new();
    if !path.exists() {
        text.push_str("split,detector,coupled_count,tp,fp,fn,tn,f1,iou,oa\n");
    }
    for (split, det, count, c) in rows {
        let s = c.scores();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            split, det, count, c.tp, c.fp, c.fneg, c.tn, s.f1, s.iou, s.oa
        ));
    }
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let (cube, masks, cfg, report) = load_dataset(&args.dataset)?;
    let ranges = cfg.week_ranges();
    let weeks = ranges
        .get(&args.split)
        .ok_or_else(|| usage(format!("unknown split '{}'", args.split)))?;
    if weeks.is_empty() {
        return Err(usage(format!("split '{}' has no weeks in this dataset", args.split)));
    }
    let region = Region::new(cube.dims.spatial(), &cube.valid, weeks.clone());
    let coupled = report.variables.iter().filter(|v| v.coupled).count();

    let (name, counts) = match (&args.detector, &args.checkpoint) {
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        (None, None) => return Err(usage("pass --detector NAME or --checkpoint PATH")),
        (Some(det_name), None) => {
            let mut det = Detector::from_name(det_name).map_err(CliError::from)?;
            if let (Detector::Zscore { threshold }, Some(t)) = (&mut det, args.threshold) {
                *threshold = t;
            }
            let synth = Synthesis {
                cube,
                masks,
                report,
                ledger: Vec::new(),
            };
            let counts = run_detector(&det, &synth, &args.split)?;
            (det_name.clone(), counts)
        }
        (None, Some(ckpt)) => {
            if !ckpt.exists() {
                return Err(usage(format!("checkpoint not found: {}", ckpt.display())));
            }
            let (model, extra) = MicroModel::load_checkpoint(ckpt)?;
            let train_years: (usize, usize) = extra["extra"]["train_years"]
                .as_array()
                .and_then(|a| Some((a.first()?.as_u64()? as usize, a.get(1)?.as_u64()? as usize)))
                .unwrap_or((0, cfg.splits.train_years));
            let clim = compute_climatology(&cube, train_years.0..train_years.1)?;
            let data = ModelData::prepare(&cube, &masks.extremes, &clim)?;
            let inf = model.infer(&data, weeks.clone())?;
            let counts = evaluate_drivers(&inf.drivers, &masks.drivers, &region);
            ("checkpoint".to_string(), counts)
        }
    };

    print_counts(&args.split, &name, &counts);
    for (v, c) in counts.per_var.iter().enumerate() {
        let s = c.scores();
        println!(
            "  var {v}: tp {} fp {} fn {} | F1 {:.2} IoU {:.2} OA {:.2}",
            c.tp, c.fp, c.fneg, s.f1, s.iou, s.oa
        );
    }
    if let Some(csv) = &args.csv {
        csv_append(csv, &[(args.split.clone(), name, coupled, counts.micro)])?;
        println!("appended -> {}", csv.display());
    }
    Ok(())
}

fn parse_counts(text: &str) -> CliResult<Vec<usize>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once('-') {
        let (a, b): (usize, usize) = (
            a.trim().parse().map_err(|_| usage(format!("bad counts range '{text}'")))?,
            b.trim().parse().map_err(|_| usage(format!("bad counts range '{text}'")))?,
        );
        if a > b {
            return Err(usage(format!("bad counts range '{text}'")));
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|c| {
            c.trim()
                .parse()
                .map_err(|_| usage(format!("bad count '{c}' in '{text}'")))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.print_effective_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let counts = parse_counts(&args.counts)?;
    let detectors: Vec<Detector> = args
        .detectors
        .split(',')
        .map(|name| Detector::from_name(name.trim()).map_err(CliError::from))
        .collect::<CliResult<_>>()?;
    let rows = correlation_sweep(&cfg, &counts, &detectors, &args.split)?;
    let csv = rows_to_csv(&rows);
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Linear byte mapping of one spatial plane; constant planes render black.
fn plane_range(plane: &[f32]) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in plane {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn cmd_plot(args: PlotArgs) -> CliResult<()> {
    let (cube, masks, _cfg, report) = load_dataset(&args.dataset)?;
    let dims = cube.dims;
    if args.week >= dims.t {
        return Err(usage(format!(
            "week {} outside the series (0..{})",
            args.week, dims.t
        )));
    }
    fs::create_dir_all(&args.out)?;
    let plane = dims.plane();
    let w = args.week;

    let inference = match &args.checkpoint {
        Some(ckpt) => {
            if !ckpt.exists() {
                return Err(usage(format!("checkpoint not found: {}", ckpt.display())));
            }
            let (model, extra) = MicroModel::load_checkpoint(ckpt)?;
            let train_years: (usize, usize) = extra["extra"]["train_years"]
                .as_array()
                .and_then(|a| Some((a.first()?.as_u64()? as usize, a.get(1)?.as_u64()? as usize)))
                .unwrap_or((0, report.train_weeks[1] / cube.weeks_per_year.max(1)));
            let clim = compute_climatology(&cube, train_years.0..train_years.1)?;
            let data = ModelData::prepare(&cube, &masks.extremes, &clim)?;
            Some(model.infer(&data, w..w + 1)?)
        }
        None => None,
    };

    for (v, name) in cube.var_names.iter().enumerate() {
        let start = v * dims.per_var() + w * plane;
        let values = &cube.values[start..start + plane];
        let path = args.out.join(format!("{name}_values_w{w}.pgm"));
        write_pgm(&path, values, dims.lon, dims.lat, plane_range(values))?;

        let gt: Vec<u8> = (0..plane)
            .map(|p| u8::from(masks.drivers[v].get(w * plane + p)))
            .collect();
        match &inference {
            Some(inf) => {
                let pred: Vec<u8> = (0..plane)
                    .map(|p| u8::from(inf.drivers[v].get(w * plane + p)))
                    .collect();
                let path = args.out.join(format!("{name}_drivers_w{w}.ppm"));
                write_overlay(&path, &pred, &gt, &cube.valid, dims.lon, dims.lat)?;
            }
            None => {
                let field: Vec<f32> = gt.iter().map(|&b| b as f32).collect();
                let path = args.out.join(format!("{name}_drivers_w{w}.pgm"));
                write_pgm(&path, &field, dims.lon, dims.lat, (0.0, 1.0))?;
            }
        }
    }

    match &inference {
        Some(inf) => {
            let probs = &inf.extreme_probs[w * plane..(w + 1) * plane];
            let path = args.out.join(format!("extreme_prob_w{w}.pgm"));
            write_pgm(&path, probs, dims.lon, dims.lat, (0.0, 1.0))?;
        }
        None => {
            let field: Vec<f32> = masks.extremes[w * plane..(w + 1) * plane]
                .iter()
                .map(|&b| b as f32)
                .collect();
            let path = args.out.join(format!("extremes_w{w}.pgm"));
            write_pgm(&path, &field, dims.lon, dims.lat, (0.0, 1.0))?;
        }
    }

    println!("wrote {} images -> {}", cube.var_names.len() + 1, args.out.display());
    Ok(())
}
