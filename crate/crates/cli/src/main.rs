//! Command-line driver: forwards, cost reports, sweeps, overlays, gradient
//! checks, and wall-clock benchmarks, all runnable with zero assets through
//! seeded synthetic inputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchsel::backbone::SelectionConfig;
use patchsel::backbone::{forward, patch_embed, single_stream_forward, SelectiveVit};
use patchsel::bench::bench_selection;
use patchsel::cost::{
    model_flops, speedup_estimate, sweep, CostConfig, CostReport, FlopsConvention, SweepRow,
};
use patchsel::grad::{check_selection_pipeline, GradReport, PipelineConfig};
use patchsel::io::{
    emit_trace_json, load_image_ppm, load_tensor, parse_list, parse_mode, save_image_ppm,
    save_overlay, synthetic_guidance, synthetic_image, FileError, GuidanceSourceFile, ImageSource,
    RunConfig,
};
use patchsel::select::{GuidanceMode, GuidanceSource};
use patchsel::tensor::{seeded_init, SeededRng, Tensor};
use patchsel::ForwardTrace;

#[derive(Parser)]
#[command(
    name = "patchsel",
    about = "Text-guided ViT patch selection: forwards, cost model, overlays, checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// key=value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for emitted files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Guidance mode: text-cls | image-cls | multimodal-cls.
    #[arg(long)]
    mode: Option<String>,
    /// Discard inattentive tokens instead of fusing them.
    #[arg(long)]
    no_itf: bool,
    /// Score by the image CLS attention row even in text-cls mode.
    #[arg(long)]
    no_td_att: bool,
    /// Selection layer indices, e.g. "5,10" ("none" disables selection).
    #[arg(long)]
    locations: Option<String>,
    /// Keep rate per selection layer, e.g. "0.7,0.7".
    #[arg(long)]
    rates: Option<String>,
    /// Square input image size in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    /// FLOPs convention: mac | 2mac.
    #[arg(long, value_parser = ["mac", "2mac"])]
    flops_convention: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the backbone and emit a selection trace.
    Forward(CommonArgs),
    /// Print one analytic cost report at reference scale.
    Cost(CommonArgs),
    /// Emit a cost table over a built-in row set.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Row set: "locations" (keep-rate grid at 384) or "resolutions"
        /// (resolution column at locations 5,10 rate 0.7).
        #[arg(long, default_value = "locations", value_parser = ["locations", "resolutions"])]
        set: String,
    },
    /// Write per-selection-layer overlay images.
    Visualize(CommonArgs),
    /// Compare analytic and finite-difference gradients; nonzero exit on
    /// failure.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Random instances to check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Time forwards with and without selection and print the speedup.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
}

enum CliError {
    Config(String),
    Io(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Io(_) => 2,
            Self::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Io(m) | Self::Check(m) => m,
        }
    }
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Config { .. } => Self::Config(e.to_string()),
            FileError::Io(_) | FileError::Format { .. } => Self::Io(e.to_string()),
        }
    }
}

impl From<patchsel::KernelError> for CliError {
    fn from(e: patchsel::KernelError) -> Self {
        Self::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("patchsel: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Forward(common) => cmd_forward(&common, false),
        Command::Cost(common) => cmd_cost(&common),
        Command::Sweep { common, set } => cmd_sweep(&common, &set),
        Command::Visualize(common) => cmd_forward(&common, true),
        Command::Gradcheck {
            common,
            instances,
            eps,
        } => cmd_gradcheck(&common, instances, eps),
        Command::Bench {
            common,
            repeats,
            warmup,
        } => cmd_bench(&common, repeats, warmup),
    }
}

/// Loads the run config and applies CLI overrides.
fn resolve_run_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &common.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if common.no_itf {
        cfg.no_itf = true;
    }
    if common.no_td_att {
        cfg.no_td_att = true;
    }
    if let Some(locations) = &common.locations {
        cfg.locations = parse_list(locations, "location")?;
        if cfg.locations.is_empty() {
            cfg.rates.clear();
        }
    }
    if let Some(rates) = &common.rates {
        cfg.rates = parse_list(rates, "rate")?;
    }
    if let Some(size) = common.image_size {
        cfg.image_size = size;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.to_string_lossy().into_owned());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<Option<PathBuf>, CliError> {
    match &cfg.out_dir {
        Some(dir) => {
            let path = PathBuf::from(dir);
            std::fs::create_dir_all(&path)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
            Ok(Some(path))
        }
        None => Ok(None),
    }
}

fn resolve_image(cfg: &RunConfig) -> Result<Tensor, CliError> {
    match &cfg.image {
        ImageSource::Synthetic => Ok(synthetic_image(cfg.image_size, cfg.seed)),
        ImageSource::Path(path) => Ok(load_image_ppm(Path::new(path))?),
    }
}

fn resolve_guidance(cfg: &RunConfig) -> Result<Tensor, CliError> {
    match &cfg.guidance {
        GuidanceSourceFile::Seeded => Ok(synthetic_guidance(cfg.width, cfg.seed ^ 0x5EED)),
        GuidanceSourceFile::Path(path) => {
            let t = load_tensor(Path::new(path))?;
            if t.len() != cfg.width {
                return Err(CliError::Config(format!(
                    "guidance length {} does not match width {}",
                    t.len(),
                    cfg.width
                )));
            }
            Ok(t)
        }
    }
}

/// Synthetic text for the single-stream mode: 8 seeded token embeddings.
fn synthetic_text(cfg: &RunConfig) -> Tensor {
    seeded_init(&[8, cfg.width], 1.0, &mut SeededRng::new(cfg.seed ^ 0x7E47))
}

fn run_traced(cfg: &RunConfig) -> Result<(Tensor, ForwardTrace, usize), CliError> {
    let model_config = cfg.to_model_config()?;
    let patch = model_config.patch_size;
    let model = SelectiveVit::<f64>::seeded(model_config.clone())?;
    let image = resolve_image(cfg)?;
    let seq = patch_embed(&image, &model)?;
    let trace = match model_config.mode.source {
        GuidanceSource::MultimodalCls => {
            let text = synthetic_text(cfg);
            let (_, trace) = single_stream_forward(&model, &text, &seq)?;
            trace
        }
        GuidanceSource::TextCls if !model_config.mode.disable_td_att => {
            let guidance = resolve_guidance(cfg)?;
            let (_, trace) = forward(&model, &seq, Some(&guidance))?;
            trace
        }
        _ => {
            let (_, trace) = forward(&model, &seq, None)?;
            trace
        }
    };
    Ok((image, trace, patch))
}

fn cmd_forward(common: &CommonArgs, visualize: bool) -> Result<(), CliError> {
    let cfg = resolve_run_config(common)?;
    let dir = out_dir(&cfg)?;
    let (image, trace, patch) = run_traced(&cfg)?;

    let lengths: Vec<String> = trace.lengths.iter().map(|l| l.to_string()).collect();
    println!("layer lengths: {}", lengths.join(" "));
    for record in &trace.selections {
        println!(
            "selection layer {}: {} -> {} (k={}, fused_mass={:.6})",
            record.layer,
            record.n_before,
            record.n_after,
            record.outcome.k,
            record.outcome.fused_mass
        );
    }
    println!(
        "final length: {}",
        trace.lengths.last().copied().unwrap_or(0)
    );

    if visualize {
        let dir = dir.ok_or_else(|| {
            CliError::Config("visualize needs --out (or out_dir in the config)".into())
        })?;
        let input_path = dir.join("input.ppm");
        save_image_ppm(&image, &input_path)?;
        println!("input written: {}", input_path.display());
        for record in &trace.selections {
            let path = dir.join(format!("overlay_layer{}.ppm", record.layer));
            save_overlay(&image, &trace, record.layer, patch, &path)?;
            println!("overlay written: {}", path.display());
        }
    } else if let Some(dir) = dir {
        let path = dir.join("trace.jsonl");
        emit_trace_json(&trace, &path)?;
        println!("trace written: {}", path.display());
    }
    Ok(())
}

fn flops_convention(common: &CommonArgs) -> FlopsConvention {
    match common.flops_convention.as_deref() {
        Some("2mac") => FlopsConvention::TwoPerMac,
        _ => FlopsConvention::MacCount,
    }
}

/// Reference-scale cost configuration with CLI overrides; image size defaults
/// to 384 here (the keep-rate table setting), not the desk-scale default.
fn cost_config(common: &CommonArgs) -> Result<(CostConfig, CostConfig), CliError> {
    let image_size = common.image_size.unwrap_or(384);
    let locations = match &common.locations {
        Some(s) => parse_list(s, "location")?,
        None => vec![5, 10],
    };
    let rates = match &common.rates {
        Some(s) => parse_list(s, "rate")?,
        None => vec![0.7; locations.len()],
    };
    let tokens = CostConfig::tokens_for_image(image_size);
    let mut config = CostConfig::reference_scale(tokens, SelectionConfig::new(locations, rates));
    config.convention = flops_convention(common);
    let mut baseline = CostConfig::reference_scale(tokens, SelectionConfig::none());
    baseline.convention = config.convention;
    Ok((config, baseline))
}

fn print_report(report: &CostReport, baseline: Option<&CostReport>) {
    println!("per-layer lengths: {:?}", report.lengths);
    println!("vision GFLOPs: {:.3}", report.vision_flops as f64 / 1e9);
    println!("text   GFLOPs: {:.3}", report.text_flops as f64 / 1e9);
    println!("fusion GFLOPs: {:.3}", report.fusion_flops as f64 / 1e9);
    println!(
        "total  GFLOPs: {:.3} ({:?})",
        report.gflops(),
        report.convention
    );
    println!("overall keep rate: {}", report.overall_keep_rate);
    if let Some(base) = baseline {
        println!("ratio to baseline: {:.4}", speedup_estimate(report, base));
    }
}

fn cmd_cost(common: &CommonArgs) -> Result<(), CliError> {
    let (config, baseline) = cost_config(common)?;
    let report = model_flops(&config)?;
    let base_report = model_flops(&baseline)?;
    print_report(&report, Some(&base_report));
    Ok(())
}

fn builtin_rows(set: &str) -> Vec<SweepRow> {
    match set {
        "resolutions" => [224, 256, 304, 384, 464, 512]
            .iter()
            .map(|&size| SweepRow {
                label: format!("{size}x{size}"),
                locations: vec![5, 10],
                rates: vec![0.7, 0.7],
                image_size: size,
            })
            .collect(),
        _ => {
            let grid: &[(&[usize], f64)] = &[
                (&[2], 0.5),
                (&[10], 0.5),
                (&[2, 4], 0.5),
                (&[4, 8], 0.5),
                (&[5, 10], 0.5),
                (&[6, 12], 0.5),
                (&[2, 4], 0.7),
                (&[4, 8], 0.7),
                (&[5, 10], 0.7),
                (&[6, 12], 0.7),
                (&[2, 6, 10], 0.7),
                (&[3, 6, 9], 0.7),
                (&[4, 8, 12], 0.7),
            ];
            grid.iter()
                .map(|&(locs, rate)| SweepRow {
                    label: format!("{locs:?}@{rate}"),
                    locations: locs.to_vec(),
                    rates: vec![rate; locs.len()],
                    image_size: 384,
                })
                .collect()
        }
    }
}

fn cmd_sweep(common: &CommonArgs, set: &str) -> Result<(), CliError> {
    let (_, baseline) = cost_config(common)?;
    let rows = builtin_rows(set);
    let reports = sweep(&baseline, &rows)?;

    let mut tsv = String::from("label\tlocations\trates\timage_size\tkeep_pct\tgflops\tratio\n");
    for (row, report) in rows.iter().zip(&reports) {
        tsv.push_str(&format!(
            "{}\t{:?}\t{:?}\t{}\t{}\t{:.3}\t{:.4}\n",
            row.label,
            row.locations,
            row.rates,
            row.image_size,
            report.overall_keep_rate,
            report.gflops(),
            report.baseline_ratio.unwrap_or(f64::NAN),
        ));
    }
    print!("{tsv}");

    let cfg = resolve_run_config(common)?;
    if let Some(dir) = out_dir(&cfg)? {
        let tsv_path = dir.join("sweep.tsv");
        std::fs::write(&tsv_path, &tsv).map_err(|e| CliError::Io(e.to_string()))?;
        let json_path = dir.join("sweep.json");
        std::fs::write(&json_path, patchsel::cost::reports_to_json(&reports))
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!(
            "sweep written: {} and {}",
            tsv_path.display(),
            json_path.display()
        );
    }
    Ok(())
}

fn print_grad_report(report: &GradReport) {
    println!(
        "tie margin: {:.3e} (eps {:.1e}, valid: {})",
        report.tie_margin, report.eps, report.valid
    );
    for p in &report.per_param {
        println!(
            "  {:>14}: rel error {:.3e} (max |diff| {:.3e})",
            p.name, p.rel_error, p.max_abs_diff
        );
    }
}

fn cmd_gradcheck(common: &CommonArgs, instances: usize, eps: f64) -> Result<(), CliError> {
    let cfg = resolve_run_config(common)?;
    let mode = GuidanceMode {
        source: match cfg.mode {
            GuidanceSource::MultimodalCls => {
                return Err(CliError::Config(
                    "gradcheck covers the text-cls and image-cls paths".into(),
                ))
            }
            source => source,
        },
        disable_fusion: cfg.no_itf,
        disable_td_att: cfg.no_td_att,
    };
    let tolerance = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut seed = cfg.seed;
    while checked < instances {
        let pipeline = PipelineConfig::small(seed, mode);
        seed = seed.wrapping_add(1);
        let report = check_selection_pipeline(&pipeline, eps)?;
        if !report.valid {
            // Tie margin too small for this draw; resample.
            continue;
        }
        checked += 1;
        worst = worst.max(report.max_rel_error);
        if checked == 1 {
            print_grad_report(&report);
        }
        if report.max_rel_error > tolerance {
            print_grad_report(&report);
            return Err(CliError::Check(format!(
                "instance seed {}: rel error {:.3e} above {tolerance:.1e}",
                seed.wrapping_sub(1),
                report.max_rel_error
            )));
        }
    }
    println!("gradcheck: {checked} instances, worst rel error {worst:.3e} (<= {tolerance:.1e})");
    Ok(())
}

fn cmd_bench(common: &CommonArgs, repeats: usize, warmup: usize) -> Result<(), CliError> {
    let cfg = resolve_run_config(common)?;
    let model_config = cfg.to_model_config()?;
    if model_config.selection.is_empty() {
        return Err(CliError::Config(
            "bench needs a selection schedule to compare against baseline".into(),
        ));
    }
    let report = bench_selection(&model_config, warmup, repeats)?;
    println!(
        "baseline: {:.3} ms (min of {} after {} warmup)",
        report.baseline_secs * 1e3,
        report.repeats,
        report.warmup
    );
    println!("selected: {:.3} ms", report.selected_secs * 1e3);
    println!("speedup: {:.3}x", report.speedup);
    Ok(())
}
