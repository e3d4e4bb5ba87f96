use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;

use skipwise::autodiff::ParamStore;
use skipwise::dataflow_hw::{analyze, write_summary_csv, DataflowReport, FixtureTable, HwConfig, Variant};
use skipwise::graph_ir::{
    build_basic_block, build_quartznet, build_residual_mlp, build_resnet_basic, build_resnet_bottleneck, validate,
    NetworkGraph, Precision, TensorShape,
};
use skipwise::kd_train::{
    pretrain, train_hardware_aware, Dataset, KdLossConfig, Model, SgdConfig, SyntheticTask, TrainPlan, TrainReport,
};
use skipwise::pe_array::{compare, schedule, Comparison, MemoryTraffic, PEArrayConfig, PerformanceSummary};
use skipwise::transforms::{self, AlterMode};

use crate::{BuildArgs, EstimateArgs, Family, ModeArg, PeArrayArgs, TrainArgs, TransformArgs, VariantArg};

/// Bad flag values that clap cannot catch.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A graph file that parses but breaks structural rules.
#[derive(Debug)]
struct ValidationError(String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

/// 2 usage, 3 validation, 4 I/O.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<ValidationError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<skipwise::Error>() {
            return match e {
                skipwise::Error::InvalidParams(_) => 2,
                skipwise::Error::Json(_) | skipwise::Error::Csv(_) | skipwise::Error::Io(_) => 4,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    inputs: Vec<String>,
    output: String,
    config: serde_json::Value,
    tool_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl RunManifest {
    fn new(command: &'static str, inputs: &[&Path], output: &Path, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output: output.display().to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_graph(path: &Path, graph: &NetworkGraph) -> Result<()> {
    let mut text = graph.to_json()?;
    text.push('\n');
    write_text(path, &text)
}

fn load_graph(path: &Path) -> Result<NetworkGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = NetworkGraph::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let violations = validate(&graph);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(ValidationError(format!("{} is not a valid graph:\n  {}", path.display(), list.join("\n  "))).into());
    }
    Ok(graph)
}

fn parse<T: FromStr<Err = skipwise::Error>>(text: &str) -> Result<T> {
    text.parse::<T>().map_err(|e| UsageError(e.to_string()).into())
}

fn describe(graph: &NetworkGraph) -> String {
    format!(
        "{}: {} layer groups, {} convs, {} skips, max span {}",
        graph.name(),
        graph.layers().len(),
        graph.conv_count(),
        graph.skips().len(),
        graph.max_span()
    )
}

fn alter_mode(mode: ModeArg) -> AlterMode {
    match mode {
        ModeArg::Remove => AlterMode::Remove,
        ModeArg::Shorten => AlterMode::Shorten,
    }
}

pub fn build(args: &BuildArgs) -> Result<()> {
    let shape = |default: String| -> Result<TensorShape> { parse(args.input.as_deref().unwrap_or(&default)) };
    let graph = match args.family {
        Family::ResnetBasic => build_resnet_basic(args.depth, args.filters, shape("32x32x3".into())?)?,
        Family::ResnetBottleneck => build_resnet_bottleneck(shape("224x224x3".into())?)?,
        Family::Quartznet => build_quartznet(args.blocks.unwrap_or(10), args.span, shape("1x64x32".into())?)?,
        Family::BasicBlock => build_basic_block(args.filters, shape(format!("32x32x{}", args.filters))?)?,
        Family::ResidualMlp => {
            build_residual_mlp(args.features, args.hidden, args.blocks.unwrap_or(6), args.layers_per_block, args.classes)?
        }
    };
    write_graph(&args.out, &graph)?;
    println!("{}", describe(&graph));
    Ok(())
}

pub fn transform(args: &TransformArgs) -> Result<()> {
    let mut graph = load_graph(&args.input)?;
    let mode = alter_mode(args.mode);
    let limit = match args.steps.as_str() {
        "all" => None,
        n => Some(n.parse::<usize>().map_err(|_| UsageError(format!("--steps must be a count or `all`, got {n:?}")))?),
    };
    let mut done = 0;
    while limit.is_none_or(|l| done < l) {
        let Some((next, alt)) = transforms::step(&graph, mode) else {
            println!("no {mode} candidates left after {done} steps");
            break;
        };
        done += 1;
        let created: Vec<String> = alt.created.iter().map(|s| s.to_string()).collect();
        if created.is_empty() {
            println!("step {done}: {mode} {}", alt.altered);
        } else {
            println!("step {done}: {mode} {} -> {}", alt.altered, created.join(", "));
        }
        graph = next;
    }
    write_graph(&args.out, &graph)?;
    println!("{}", describe(&graph));
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || UsageError(format!("--seeds expects `a..b` or `a..=b`, got {text:?}"));
    let (a, b, inclusive) = if let Some((a, b)) = text.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = text.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad().into());
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        return Err(bad().into());
    }
    Ok(seeds)
}

fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.seed{seed}{ext}"))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    manifest: RunManifest,
    teacher_accuracy: f64,
    #[serde(flatten)]
    report: &'a TrainReport,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let graph = load_graph(&args.teacher)?;
    let teacher_params: Option<ParamStore> = match &args.teacher_params {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let quantize = args.quantize.as_deref().map(parse::<Precision>).transpose()?;
    let dataset = match SyntheticTask::from_str(&args.data) {
        Ok(task) => task.generate(args.samples, args.data_seed),
        Err(_) if Path::new(&args.data).exists() => Dataset::from_csv(Path::new(&args.data))?,
        Err(e) => return Err(UsageError(format!("{e}; no CSV file at that path either")).into()),
    };
    let data = dataset.split(0.8, args.data_seed);
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![args.seed],
    };

    let run = |seed: u64| -> Result<()> {
        let sgd = SgdConfig { learning_rate: args.lr, batch_size: args.batch_size, seed };
        let plan = TrainPlan {
            alpha: args.alpha,
            total_epochs: args.epochs,
            mode: alter_mode(args.mode),
            loss: KdLossConfig { beta: args.beta, ..KdLossConfig::default() },
            sgd,
            quantize_student: quantize,
        };
        plan.validate()?;
        let teacher = match &teacher_params {
            Some(p) => Model::new(graph.clone(), p.clone()),
            None => pretrain(&graph, &data, args.pretrain_epochs, &sgd)?,
        };
        let report = train_hardware_aware(&teacher, teacher.clone(), &plan, &data)?;
        let out = if seeds.len() > 1 { seeded_path(&args.out, seed) } else { args.out.clone() };
        let mut inputs = vec![args.teacher.as_path()];
        if let Some(p) = &args.teacher_params {
            inputs.push(p.as_path());
        }
        let output = TrainOutput {
            manifest: RunManifest::new("train", &inputs, &out, args, Some(seed)),
            teacher_accuracy: teacher.accuracy(&data.eval, None)?,
            report: &report,
        };
        write_json(&out, &output)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        write_text(&out.with_extension("csv"), &String::from_utf8(csv)?)?;
        println!(
            "seed {seed}: teacher accuracy {:.4}, student accuracy {:.4}, {} skips left, alterations at {:?}",
            output.teacher_accuracy,
            report.final_accuracy,
            report.student.graph.skips().len(),
            report.alteration_epochs
        );
        Ok(())
    };

    if seeds.len() == 1 {
        return run(seeds[0]);
    }
    info!("running {} seeds", seeds.len());
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || run(s))).collect();
        handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
    });
    results.into_iter().collect()
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    manifest: RunManifest,
    reports: &'a [DataflowReport],
}

/// The graph in the shape `variant` expects.
fn graph_for(graph: &NetworkGraph, variant: Variant) -> NetworkGraph {
    match variant {
        Variant::Removed if !graph.skips().is_empty() => transforms::apply_all(graph, AlterMode::Remove),
        Variant::Shortened if graph.max_span() > 1 => transforms::apply_all(graph, AlterMode::Shorten),
        _ => graph.clone(),
    }
}

pub fn estimate(args: &EstimateArgs) -> Result<()> {
    let graph = load_graph(&args.input)?;
    let precision: Precision = parse(&args.precision)?;
    let cfg = HwConfig::new(precision, args.reuse).map_err(|e| UsageError(e.to_string()))?;
    let table = FixtureTable::active()?;
    let variants = match args.variant {
        VariantArg::Traditional => vec![Variant::Traditional],
        VariantArg::Removed => vec![Variant::Removed],
        VariantArg::Shortened => vec![Variant::Shortened],
        VariantArg::All => Variant::ALL.to_vec(),
    };
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let r = analyze(&graph_for(&graph, v), v, &cfg, &table)?;
        println!(
            "{v}: LUT {} FF {} DSP {} BRAM {} latency {} cycles, II {}, fifo depths {:?}",
            r.resources.lut,
            r.resources.ff,
            r.resources.dsp,
            r.resources.bram,
            r.latency_cycles,
            r.initiation_interval,
            r.fifos.iter().map(|f| f.depth).collect::<Vec<_>>()
        );
        reports.push(r);
    }
    let manifest = RunManifest::new("estimate", &[args.input.as_path()], &args.out, args, None);
    write_json(&args.out, &EstimateOutput { manifest, reports: &reports })?;
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        write_summary_csv(&reports, &mut buf)?;
        write_text(path, &String::from_utf8(buf)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PeArrayOutput {
    manifest: RunManifest,
    config: PEArrayConfig,
    with_skips: PerformanceSummary,
    without_skips: PerformanceSummary,
    ratios: Comparison,
    traffic_with_skips: MemoryTraffic,
    traffic_without_skips: MemoryTraffic,
}

pub fn pearray(args: &PeArrayArgs) -> Result<()> {
    let graph = load_graph(&args.input)?;
    let base = PEArrayConfig::default();
    let cfg = PEArrayConfig {
        rows: args.rows.unwrap_or(base.rows),
        cols: args.cols.unwrap_or(base.cols),
        clock_hz: args.clock_hz.unwrap_or(base.clock_hz),
        batch: args.batch.unwrap_or(base.batch),
        bits_in: args.bits.unwrap_or(base.bits_in),
        bits_weight: args.bits.unwrap_or(base.bits_weight),
        bits_out: args.bits.unwrap_or(base.bits_out),
        per_invocation_overhead_cycles: args.overhead_cycles.unwrap_or(base.per_invocation_overhead_cycles),
        utilization: args.utilization.unwrap_or(base.utilization),
        dram_bits_per_cycle: match args.dram_bits_per_cycle {
            Some(0.0) => None,
            Some(bw) => Some(bw),
            None => base.dram_bits_per_cycle,
        },
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let with = schedule(&graph, &cfg)?;
    let without = schedule(&transforms::apply_all(&graph, AlterMode::Remove), &cfg)?;
    let ratios = compare(&with, &without);
    println!(
        "with skips: {:.2} fps, {:.2} Mb/image; without: {:.2} fps, {:.2} Mb/image; fps ratio {:.3}, memory ratio {:.3}",
        with.fps,
        with.mem_mb_per_image(),
        without.fps,
        without.mem_mb_per_image(),
        ratios.fps_ratio,
        ratios.memory_ratio
    );
    let output = PeArrayOutput {
        manifest: RunManifest::new("pearray", &[args.input.as_path()], &args.out, args, None),
        config: cfg,
        with_skips: with.summary(args.accuracy),
        without_skips: without.summary(None),
        ratios,
        traffic_with_skips: with.traffic,
        traffic_without_skips: without.traffic,
    };
    write_json(&args.out, &output)
}
