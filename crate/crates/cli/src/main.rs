use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use brnpa::bench::run_bench;
use brnpa::data::{
    generate_shapes, read_external_array_file, read_volume_file, save_checkpoint, write_volume,
    DataError, ShapesSpec,
};
use brnpa::metrics::{overlay, render, sparsity, MetricsError, RgbImage};
use brnpa::net::{
    distill_resolution_study, network_gradcheck, run_ablation_grid, run_rank_head_experiment,
    train, Assertion, ExperimentConfig, HeadKind, NetError,
};
use brnpa::npa::{
    extract_representatives, npa_gradcheck, AttentionStack, FeatureVolume, NpaConfig, NpaError,
    SelectionMode,
};

const EXIT_IO: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_ASSERTION: u8 = 4;
const EXIT_DIVERGENCE: u8 = 5;

/// Relative error bound for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "brnpa",
    version,
    about = "Representative-vector attention toolkit"
)]
struct Cli {
    /// Seed for model init, data generation and random selection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact, including manifest.json.
    #[arg(long, global = true, default_value = "brnpa-out")]
    out_dir: PathBuf,
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract representative vectors and attention maps from a volume file.
    Extract(ExtractArgs),
    /// Render an attention stack as an RGB image.
    Render(RenderArgs),
    /// Attention sparsity of a stack over a volume, as JSON.
    Sparsity(SparsityArgs),
    /// Generate the shapes dataset.
    GenData,
    /// Train one model.
    Train,
    /// Resolution study: train a teacher, then distill a finer student.
    Distill(DistillArgs),
    /// Selection × refinement ablation grid.
    Ablate,
    /// Main head plus subset heads over ranked representatives.
    RankHeads,
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Time extraction against the learned-attention head.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    Active,
    Random,
}

#[derive(Args)]
struct ExtractArgs {
    /// Volume file, or an external .npy array (C,H,W or N,C,H,W).
    #[arg(long)]
    input: PathBuf,
    /// Batch entry to use for rank-4 arrays.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, value_enum, default_value = "active")]
    selection: Selection,
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    stack: PathBuf,
    /// Background image (PNG or PPM) to blend under the maps.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    blend: f64,
    /// Integer upscaling factor.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Output file name inside --out-dir; .png gives PNG, anything else PPM.
    #[arg(long, default_value = "attention.ppm")]
    output: String,
}

#[derive(Args)]
struct SparsityArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    stack: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher config; --config gives the student.
    #[arg(long)]
    teacher_config: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Non-degenerate trials per check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Volume shape as C,H,W.
    #[arg(long, default_value = "512,56,56")]
    shape: String,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::InvalidSpec(_) => EXIT_VALIDATION,
        _ => EXIT_IO,
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::new(data_code(&e), e)
    }
}

/// Attaches the offending path to a read failure.
fn reading<T, E: Into<Failure>>(path: &Path, r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| {
        let f: Failure = e.into();
        Failure::new(
            f.code,
            f.error.context(format!("reading {}", path.display())),
        )
    })
}

impl From<NpaError> for Failure {
    fn from(e: NpaError) -> Self {
        Self::new(EXIT_VALIDATION, e)
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::Encode(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self::new(code, e)
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let code = match &e {
            NetError::Divergence { .. } => EXIT_DIVERGENCE,
            NetError::Data(d) => data_code(d),
            _ => EXIT_VALIDATION,
        };
        Self::new(code, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_IO, e)
    }
}

type Outcome = Result<(), Failure>;

trait IoContext<T> {
    fn io(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.with_context(what)
            .map_err(|e| Failure::new(EXIT_IO, e))
    }
}

struct Run {
    out_dir: PathBuf,
    seed: Option<u64>,
    config: Option<PathBuf>,
    command: &'static str,
    outputs: Vec<String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Outcome {
        let path = self.path(name);
        fs::write(&path, bytes).io(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Outcome {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        self.write(name, text + "\n")
    }

    fn experiment_config(&self) -> Result<ExperimentConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.dataset.seed = seed;
            config.npa.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    fn manifest(&mut self, resolved: Value) -> Outcome {
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "seed": self.seed,
            "resolved": resolved,
            "outputs": self.outputs,
        });
        self.write_json("manifest.json", &manifest)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).io(|| format!("reading config {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        ExperimentConfig::from_json_str(&text)
    } else {
        ExperimentConfig::from_toml_str(&text)
    };
    parsed.map_err(|e| {
        Failure::new(
            EXIT_VALIDATION,
            anyhow!(e).context(format!("{}", path.display())),
        )
    })
}

fn check_assertions(assertions: &[Assertion]) -> Outcome {
    for a in assertions {
        println!(
            "{} {}: {}",
            if a.passed { "PASS" } else { "FAIL" },
            a.name,
            a.detail
        );
    }
    match assertions.iter().find(|a| !a.passed) {
        Some(a) => Err(Failure::new(
            EXIT_ASSERTION,
            anyhow!("assertion failed: {} ({})", a.name, a.detail),
        )),
        None => Ok(()),
    }
}

fn read_volume_any(path: &Path, index: usize) -> Result<FeatureVolume, Failure> {
    if path.extension().is_some_and(|e| e == "npy") {
        let mut array = reading(path, read_external_array_file(path))?;
        let count = array.volumes.len();
        if index >= count {
            return Err(Failure::new(
                EXIT_VALIDATION,
                anyhow!("--index {index} out of range for {count} volumes"),
            ));
        }
        Ok(array.volumes.swap_remove(index))
    } else {
        reading(path, read_volume_file(path))
    }
}

/// Stacks are stored as N×H×W volumes.
fn read_stack(path: &Path) -> Result<AttentionStack, Failure> {
    let v = reading(path, read_volume_file(path))?;
    let hw = v.positions();
    let maps = v.data().chunks(hw).map(<[f64]>::to_vec).collect();
    Ok(AttentionStack::from_weights(v.height(), v.width(), maps)?)
}

fn extract(run: &mut Run, args: &ExtractArgs) -> Outcome {
    let volume = read_volume_any(&args.input, args.index)?;
    let config = NpaConfig::default()
        .with_n(args.n)
        .with_selection(match args.selection {
            Selection::Active => SelectionMode::Active,
            Selection::Random => SelectionMode::Random,
        })
        .with_refine(!args.no_refine)
        .with_seed(run.seed.unwrap_or(0));
    config.validate()?;
    let ex = extract_representatives(&volume, &config)?;
    let (features, stack) = ex.into_parts();

    let matrix = FeatureVolume::new(features.rows, 1, features.cols, features.data.clone())?;
    let maps: Vec<f64> = stack
        .maps
        .iter()
        .flat_map(|m| m.weights.iter().copied())
        .collect();
    let stack_volume = FeatureVolume::new(stack.len(), stack.height, stack.width, maps)?;
    run.write("features.npav", write_volume(&matrix))?;
    run.write("stack.npav", write_volume(&stack_volume))?;

    let (h, w) = (volume.height(), volume.width());
    for m in &stack.maps {
        let sum: f64 = m.weights.iter().sum();
        let fallback = if m.fallback { " fallback" } else { "" };
        println!(
            "rank {} index {} (h {}, w {}) weight sum {sum:.12}{fallback}",
            m.rank,
            m.index,
            m.index / w,
            m.index % w
        );
    }
    run.manifest(json!({
        "input": args.input,
        "volume": [volume.channels(), h, w],
        "npa": config,
    }))
}

fn render_cmd(run: &mut Run, args: &RenderArgs) -> Outcome {
    let volume = reading(&args.volume, read_volume_file(&args.volume))?;
    let stack = read_stack(&args.stack)?;
    if args.scale == 0 {
        return Err(Failure::new(
            EXIT_VALIDATION,
            anyhow!("--scale must be at least 1"),
        ));
    }
    let mut image = render(&stack, &volume)?;
    image = image.upscale(image.width * args.scale, image.height * args.scale)?;
    if let Some(src) = &args.image {
        let bytes = fs::read(src).io(|| format!("reading {}", src.display()))?;
        let background = RgbImage::decode(&bytes)?;
        let maps = image.upscale(background.width, background.height)?;
        image = overlay(&background, &maps, args.blend)?;
    }
    let path = run.path(&args.output);
    image.save(&path)?;
    run.outputs.push(args.output.clone());
    println!(
        "wrote {} ({}×{})",
        path.display(),
        image.width,
        image.height
    );
    run.manifest(json!({
        "volume": args.volume,
        "stack": args.stack,
        "image": args.image,
        "blend": args.blend,
        "scale": args.scale,
    }))
}

fn sparsity_cmd(run: &mut Run, args: &SparsityArgs) -> Outcome {
    let volume = reading(&args.volume, read_volume_file(&args.volume))?;
    let stack = read_stack(&args.stack)?;
    let report = sparsity(&stack, &volume)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    run.write_json("sparsity.json", &report)?;
    run.manifest(json!({ "volume": args.volume, "stack": args.stack }))
}

fn gen_data(run: &mut Run) -> Outcome {
    let mut spec = match &run.config {
        Some(_) => run.experiment_config()?.dataset,
        None => ShapesSpec::default(),
    };
    if let Some(seed) = run.seed {
        spec.seed = seed;
    }
    let dataset = generate_shapes(&spec)?;
    run.write("dataset.bin", dataset.to_bytes())?;
    let split = |samples: &[brnpa::data::Sample]| {
        let mut counts = [0usize; 3];
        for s in samples {
            counts[s.label] += 1;
        }
        let fg: Vec<f64> = samples.iter().map(|s| s.foreground_fraction()).collect();
        json!({
            "samples": samples.len(),
            "class_counts": counts,
            "foreground_min": fg.iter().copied().fold(f64::INFINITY, f64::min),
            "foreground_max": fg.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    };
    let summary = json!({ "train": split(&dataset.train), "test": split(&dataset.test) });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    run.write_json("dataset.json", &summary)?;
    for (i, s) in dataset.train.iter().take(6).enumerate() {
        let img = RgbImage::from_gray(spec.size, spec.size, s.image.data())?;
        run.write(&format!("sample_{i}_{}.ppm", s.kind().name()), img.to_ppm())?;
    }
    run.manifest(json!({ "dataset": spec }))
}

fn train_cmd(run: &mut Run) -> Outcome {
    let config = run.experiment_config()?;
    let trained = train(&config)?;
    let path = run.path("model.ckpt");
    save_checkpoint(&path, &trained.model.checkpoint())?;
    run.outputs.push("model.ckpt".into());
    run.write("metrics.jsonl", trained.log_jsonl())?;
    run.write_json(
        "report.json",
        &json!({
            "test": trained.test,
            "grad_groups": trained.grad_groups,
            "grad_norm_variance": trained.grad_norm_variance,
            "steps": trained.steps,
        }),
    )?;
    println!(
        "test accuracy {:.4}, sparsity {}",
        trained.test.accuracy,
        trained
            .test
            .sparsity
            .map_or("n/a".into(), |s| format!("{s:.4}"))
    );
    run.manifest(serde_json::to_value(&config).expect("config serializes"))
}

fn distill_cmd(run: &mut Run, args: &DistillArgs) -> Outcome {
    let student = run.experiment_config()?;
    let mut teacher = load_config(&args.teacher_config)?;
    if let Some(seed) = run.seed {
        teacher.seed = seed;
        teacher.dataset.seed = seed;
        teacher.npa.seed = seed;
    }
    let (report, t, s) = distill_resolution_study(&teacher, &student)?;
    save_checkpoint(run.path("teacher.ckpt"), &t.model.checkpoint())?;
    save_checkpoint(run.path("student.ckpt"), &s.model.checkpoint())?;
    run.outputs
        .extend(["teacher.ckpt".into(), "student.ckpt".into()]);
    run.write("teacher_metrics.jsonl", t.log_jsonl())?;
    run.write("student_metrics.jsonl", s.log_jsonl())?;
    run.write_json("report.json", &report)?;
    if let Some(flag) = &report.degenerate {
        println!("{flag}");
    }
    println!(
        "teacher {}×{} acc {:.4}; student {}×{} acc {:.4}",
        report.teacher.map_extent,
        report.teacher.map_extent,
        report.teacher.test_acc,
        report.student.map_extent,
        report.student.map_extent,
        report.student.test_acc
    );
    run.manifest(json!({ "teacher": teacher, "student": student }))?;
    check_assertions(&report.assertions)
}

fn ablate_cmd(run: &mut Run) -> Outcome {
    let config = run.experiment_config()?;
    let report = run_ablation_grid(&config)?;
    println!("{:<12} {:>9} {:>9}", "variant", "train", "test");
    for r in &report.rows {
        println!("{:<12} {:>9.4} {:>9.4}", r.label, r.train_acc, r.test_acc);
    }
    run.write_json("report.json", &report)?;
    run.manifest(serde_json::to_value(&config).expect("config serializes"))?;
    check_assertions(&report.assertions)
}

fn rank_heads_cmd(run: &mut Run) -> Outcome {
    let config = run.experiment_config()?;
    let (report, trained) = run_rank_head_experiment(&config)?;
    for r in &report.rows {
        println!("{:<12} {:.4}", r.label, r.test_acc);
    }
    save_checkpoint(run.path("model.ckpt"), &trained.model.checkpoint())?;
    run.outputs.push("model.ckpt".into());
    run.write("metrics.jsonl", trained.log_jsonl())?;
    run.write_json("report.json", &report)?;
    run.manifest(serde_json::to_value(&config).expect("config serializes"))?;
    check_assertions(&report.assertions)
}

fn gradcheck_cmd(run: &mut Run, args: &GradcheckArgs) -> Outcome {
    let seed = run.seed.unwrap_or(0);
    let mut results = Vec::new();
    let mut assertions = Vec::new();
    let mut record = |name: String, evaluated: usize, max: f64, detail: Value| {
        assertions.push(Assertion {
            name: name.clone(),
            passed: evaluated >= args.trials && max < GRADCHECK_TOLERANCE,
            detail: format!("{evaluated} trials, max relative error {max:.3e}"),
        });
        results.push(json!({ "check": name, "report": detail }));
    };
    for (selection, refine) in [
        (SelectionMode::Active, true),
        (SelectionMode::Active, false),
        (SelectionMode::Random, true),
    ] {
        let config = NpaConfig::default()
            .with_selection(selection)
            .with_refine(refine)
            .with_seed(seed);
        let r = npa_gradcheck((4, 4, 4), &config, args.trials, seed)?;
        let name = format!("npa {selection:?} refine={refine}");
        record(name, r.evaluated, r.max_relative_error, json!(r));
    }
    for head in [HeadKind::Npa, HeadKind::LearnedAttention, HeadKind::AvgPool] {
        let r = network_gradcheck(head, args.trials, seed)?;
        record(
            format!("network {}", head.name()),
            r.evaluated,
            r.max_relative_error,
            json!(r),
        );
    }
    run.write_json("gradcheck.json", &results)?;
    run.manifest(json!({ "trials": args.trials, "seed": seed }))?;
    check_assertions(&assertions)
}

fn parse_shape(text: &str) -> Result<(usize, usize, usize), Failure> {
    let dims: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::new(EXIT_VALIDATION, anyhow!("--shape {text:?}: {e}")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Failure::new(
            EXIT_VALIDATION,
            anyhow!("--shape expects three positive extents C,H,W, got {text:?}"),
        )),
    }
}

fn bench_cmd(run: &mut Run, args: &BenchArgs) -> Outcome {
    let shape = parse_shape(&args.shape)?;
    let report = run_bench(shape, args.n, args.iters, run.seed.unwrap_or(0))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    run.write_json("bench.json", &report)?;
    run.manifest(json!({ "shape": report.shape, "n": args.n, "iters": args.iters }))
}

fn dispatch(cli: Cli) -> Outcome {
    fs::create_dir_all(&cli.out_dir).io(|| format!("creating {}", cli.out_dir.display()))?;
    let name = match &cli.command {
        Command::Extract(_) => "extract",
        Command::Render(_) => "render",
        Command::Sparsity(_) => "sparsity",
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::Distill(_) => "distill",
        Command::Ablate => "ablate",
        Command::RankHeads => "rank-heads",
        Command::Gradcheck(_) => "gradcheck",
        Command::Bench(_) => "bench",
    };
    let mut run = Run {
        out_dir: cli.out_dir,
        seed: cli.seed,
        config: cli.config,
        command: name,
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Extract(a) => extract(&mut run, a),
        Command::Render(a) => render_cmd(&mut run, a),
        Command::Sparsity(a) => sparsity_cmd(&mut run, a),
        Command::GenData => gen_data(&mut run),
        Command::Train => train_cmd(&mut run),
        Command::Distill(a) => distill_cmd(&mut run, a),
        Command::Ablate => ablate_cmd(&mut run),
        Command::RankHeads => rank_heads_cmd(&mut run),
        Command::Gradcheck(a) => gradcheck_cmd(&mut run, a),
        Command::Bench(a) => bench_cmd(&mut run, a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
