//! The `cfcount` command line.
//!
//! Commands that talk to a model write into `OUT/run-<hash>`, where the hash
//! covers the manifest bytes, the configuration grid and the endpoint
//! identity, so repeated invocations land in the same directory and can
//! `--resume`. Every command writes `run.json` metadata next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::BackgroundMode;
use crate::client::{
    encode_image_file, Capabilities, ChatClient, ClientError, Feature, GenerateRequest, GenerateResponse,
    InferenceClient, RecordingClient, ReplayClient, RetryPolicy, SidecarClient,
};
use crate::config::{enumerate_configs, parse_config_label, ModulationConfig, RegionKind, SweepGrid};
use crate::manifest::{load_manifest, ImageKind, Manifest, ManifestError};
use crate::metrics::{
    attention_gap_curve, attention_table, compute_category_report, convergence_analysis, convergence_table,
    emit_table, report_table, Averaging, EvalRecord, RecordFilter, ReportRow, Table, TableFormat,
};
use crate::questions::{build_question, QuestionFormat};
use crate::region::{region_tokens, TokenGrid, DEFAULT_TOKEN_THRESHOLD};
use crate::sweep::{read_records, run_sweep, select_best, Granularity, SweepError, SweepOptions, RECORDS_FILE};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Validation found problems in the inputs.
    pub const INVALID: i32 = 1;
    /// Command-line usage error.
    pub const USAGE: i32 = 2;
    /// Unreadable or malformed input files, or output I/O failure.
    pub const INPUT: i32 = 3;
    /// The model endpoint failed or lacks a required capability.
    pub const MODEL: i32 = 4;
    /// The run finished but some cells failed.
    pub const INCOMPLETE: i32 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(e: impl std::fmt::Display) -> Self {
        Self {
            code: exit::INPUT,
            message: e.to_string(),
        }
    }

    fn model(e: impl std::fmt::Display) -> Self {
        Self {
            code: exit::MODEL,
            message: e.to_string(),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Client(c) => Self::model(c),
            other => Self::input(other),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Fixture(_) => Self::input(e),
            other => Self::model(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cfcount", version, about = "Counterfactual counting evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest and every file it references.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write the question set for a manifest.
    GenQuestions {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        questions: QuestionArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate one or more explicit configurations (Baseline by default).
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Configuration label, e.g. `TupBmask(1.5,0,MBB,All)`. Repeatable.
        #[arg(long = "config", default_value = "Baseline")]
        configs: Vec<String>,
        #[arg(long, value_enum, default_value_t = KindArg::Cf)]
        image_kind: KindArg,
    },
    /// Evaluate every configuration of a sweep grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid file (JSON) or `standard` for the built-in grid.
        #[arg(long, default_value = "standard")]
        grid: String,
        #[arg(long, value_enum, default_value_t = KindArg::Cf)]
        image_kind: KindArg,
    },
    /// Accuracy spread over category-balanced subsamples of baseline records.
    Converge {
        /// Run directory holding `records.jsonl`.
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',', default_value = "20,40,60,80,100,120,140,160")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::Oe)]
        format: FormatArg,
    },
    /// Per-layer attention to all visual tokens and to a region.
    Attn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "Baseline")]
        config: String,
        /// Region whose tokens form the selected set.
        #[arg(long, value_enum, default_value_t = RegionArg::Mbb)]
        region: RegionArg,
        #[arg(long, value_enum, default_value_t = KindArg::Cf)]
        image_kind: KindArg,
    },
    /// Per-category accuracy and bias reports and best configurations for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        micro: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct QuestionArgs {
    #[arg(long, value_enum, default_value_t = FormatArg::Both)]
    pub format: FormatArg,
    /// Use the neutral object name instead of the specific one.
    #[arg(long)]
    pub neutral: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EndpointArgs {
    /// Inference endpoint base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, value_enum, default_value_t = BackendArg::Sidecar)]
    pub backend: BackendArg,
    /// Model name sent to chat-completions endpoints.
    #[arg(long)]
    pub model: Option<String>,
    /// Serve responses from a recorded fixture instead of an endpoint.
    #[arg(long, conflicts_with_all = ["endpoint", "record"])]
    pub replay: Option<PathBuf>,
    /// Append every exchange to a fixture file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub questions: QuestionArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub max_inflight: usize,
    #[arg(long)]
    pub resume: bool,
    /// Print the plan and exit without contacting the endpoint.
    #[arg(long)]
    pub dry_run: bool,
    /// Apply background dampening to text tokens too.
    #[arg(long)]
    pub literal_background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Oe,
    Mcq,
    Both,
}

impl FormatArg {
    fn formats(self) -> Vec<QuestionFormat> {
        match self {
            FormatArg::Oe => vec![QuestionFormat::Oe],
            FormatArg::Mcq => vec![QuestionFormat::Mcq],
            FormatArg::Both => vec![QuestionFormat::Oe, QuestionFormat::Mcq],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Cf,
    Factual,
    Both,
}

impl KindArg {
    fn kinds(self) -> Vec<ImageKind> {
        match self {
            KindArg::Cf => vec![ImageKind::Counterfactual],
            KindArg::Factual => vec![ImageKind::Factual],
            KindArg::Both => vec![ImageKind::Factual, ImageKind::Counterfactual],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Sidecar,
    Chat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    Mask,
    Bb,
    Mbb,
    Whole,
}

impl From<RegionArg> for RegionKind {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Mask => RegionKind::Mask,
            RegionArg::Bb => RegionKind::BB,
            RegionArg::Mbb => RegionKind::MaskBB,
            RegionArg::Whole => RegionKind::WholeImg,
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Human-readable output goes to `stdout`, errors to stderr.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<i32> {
    match cli.command {
        Command::Validate { manifest } => cmd_validate(&manifest, out),
        Command::GenQuestions { manifest, questions, out: dir } => cmd_gen_questions(&manifest, &questions, &dir, out),
        Command::Eval {
            run,
            configs,
            image_kind,
        } => {
            let configs = configs
                .iter()
                .map(|l| parse_config_label(l).map_err(CliError::input))
                .collect::<CliResult<Vec<_>>>()?;
            let grid_id = configs.iter().map(|c| c.label()).collect::<Vec<_>>().join(";");
            cmd_run("eval", &run, configs, &grid_id, image_kind, out)
        }
        Command::Sweep { run, grid, image_kind } => {
            let grid = load_grid(&grid)?;
            let configs = enumerate_configs(&grid).map_err(CliError::input)?;
            let grid_id = serde_json::to_string(&grid).expect("grid serializes");
            cmd_run("sweep", &run, configs, &grid_id, image_kind, out)
        }
        Command::Converge {
            run,
            sizes,
            draws,
            seed,
            format,
        } => cmd_converge(&run, &sizes, draws, seed, format, out),
        Command::Attn {
            run,
            config,
            region,
            image_kind,
        } => cmd_attn(&run, &config, region.into(), image_kind, out),
        Command::Report { run, micro } => cmd_report(&run, micro, out),
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult {
    out.write_all(text.as_ref().as_bytes()).map_err(CliError::input)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_grid(spec: &str) -> CliResult<SweepGrid> {
    if spec == "standard" {
        return Ok(SweepGrid::standard());
    }
    let text = fs::read_to_string(spec).map_err(|e| CliError::input(format!("{spec}: {e}")))?;
    let grid: SweepGrid = serde_json::from_str(&text).map_err(|e| CliError::input(format!("{spec}: {e}")))?;
    grid.validate().map_err(CliError::input)?;
    Ok(grid)
}

fn open_manifest(path: &Path) -> CliResult<Manifest> {
    load_manifest(path).map_err(|e| CliError {
        code: match e {
            ManifestError::Io { .. } => exit::INPUT,
            _ => exit::INVALID,
        },
        message: e.to_string(),
    })
}

/// Identity of the inference backend for run-directory hashing.
fn endpoint_identity(args: &EndpointArgs) -> CliResult<String> {
    if let Some(fixture) = &args.replay {
        return Ok(format!("replay:{}", sha256_hex(&read_bytes(fixture)?)));
    }
    let url = args.endpoint.as_deref().unwrap_or("");
    Ok(match args.backend {
        BackendArg::Sidecar => format!("sidecar:{url}"),
        BackendArg::Chat => format!("chat:{url}:{}", args.model.as_deref().unwrap_or("")),
    })
}

fn build_client(args: &EndpointArgs) -> CliResult<Box<dyn InferenceClient>> {
    let client: Box<dyn InferenceClient> = if let Some(fixture) = &args.replay {
        Box::new(ReplayClient::open(fixture)?)
    } else {
        let url = args
            .endpoint
            .clone()
            .ok_or_else(|| CliError::input("--endpoint or --replay is required"))?;
        match args.backend {
            BackendArg::Sidecar => Box::new(SidecarClient::new(url)?),
            BackendArg::Chat => {
                let model = args
                    .model
                    .clone()
                    .ok_or_else(|| CliError::input("--model is required for the chat backend"))?;
                Box::new(ChatClient::new(url, model)?)
            }
        }
    };
    Ok(match &args.record {
        Some(path) => Box::new(RecordingClient::new(client, path)?),
        None => client,
    })
}

fn run_dir(root: &Path, manifest_bytes: &[u8], grid_id: &str, endpoint_id: &str) -> PathBuf {
    let mut h = Sha256::new();
    for part in [manifest_bytes, grid_id.as_bytes(), endpoint_id.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    root.join(format!("run-{}", &hex::encode(h.finalize())[..16]))
}

/// Run metadata. Holds no timestamps or credentials so it is reproducible.
#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    manifest_sha256: String,
    seed: u64,
    formats: Vec<QuestionFormat>,
    neutral: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    capabilities: Option<Capabilities>,
    #[serde(skip_serializing_if = "Option::is_none")]
    configs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    background_mode: Option<BackgroundMode>,
}

impl<'a> RunMeta<'a> {
    fn new(command: &'a str, manifest_bytes: &[u8], q: &QuestionArgs) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            manifest_sha256: sha256_hex(manifest_bytes),
            seed: q.seed,
            formats: q.format.formats(),
            neutral: q.neutral,
            endpoint: None,
            capabilities: None,
            configs: None,
            grid: None,
            background_mode: None,
        }
    }

    fn write(&self, dir: &Path) -> CliResult {
        let mut json = serde_json::to_string_pretty(self).expect("metadata serializes");
        json.push('\n');
        write_file(&dir.join("run.json"), json)
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

pub fn cmd_validate(path: &Path, out: &mut dyn Write) -> CliResult<i32> {
    let manifest = open_manifest(path)?;
    let hist = manifest.category_histogram();
    emit(out, format!("ok: {} instances\n", manifest.instances.len()))?;
    for (cat, n) in hist {
        emit(out, format!("  {cat:<8} {n}\n"))?;
    }
    Ok(exit::OK)
}

pub fn cmd_gen_questions(manifest_path: &Path, q: &QuestionArgs, root: &Path, out: &mut dyn Write) -> CliResult<i32> {
    let bytes = read_bytes(manifest_path)?;
    let manifest = open_manifest(manifest_path)?;
    let dir = run_dir(root, &bytes, "", "");
    create_dir(&dir)?;
    let mut text = String::new();
    let mut count = 0;
    for inst in &manifest.instances {
        for format in q.format.formats() {
            let record = build_question(inst, format, q.neutral, q.seed).map_err(|e| CliError {
                code: exit::INVALID,
                message: format!("instance {}: {e}", inst.id),
            })?;
            text.push_str(&serde_json::to_string(&record).expect("question serializes"));
            text.push('\n');
            count += 1;
        }
    }
    let path = dir.join("questions.jsonl");
    write_file(&path, text)?;
    RunMeta::new("gen-questions", &bytes, q).write(&dir)?;
    emit(out, format!("{count} questions -> {}\n", path.display()))?;
    Ok(exit::OK)
}

fn cmd_run(
    command: &str,
    run: &RunArgs,
    configs: Vec<ModulationConfig>,
    grid_id: &str,
    image_kind: KindArg,
    out: &mut dyn Write,
) -> CliResult<i32> {
    if run.max_inflight == 0 {
        return Err(CliError::input("--max-inflight must be at least 1"));
    }
    let bytes = read_bytes(&run.manifest)?;
    let manifest = open_manifest(&run.manifest)?;
    let formats = run.questions.format.formats();
    let kinds = image_kind.kinds();
    let cells = manifest.instances.len() * kinds.len() * formats.len() * configs.len();
    if run.dry_run {
        emit(
            out,
            format!(
                "plan: {} configurations x {} instances x {} image kinds x {} formats = {cells} cells\n",
                configs.len(),
                manifest.instances.len(),
                kinds.len(),
                formats.len()
            ),
        )?;
        for c in &configs {
            emit(out, format!("{c}\n"))?;
        }
        return Ok(exit::OK);
    }

    let endpoint_id = endpoint_identity(&run.endpoint)?;
    let dir = run_dir(&run.out, &bytes, grid_id, &endpoint_id);
    let client = build_client(&run.endpoint)?;
    let retry = RetryPolicy {
        max_attempts: run.endpoint.max_attempts.max(1),
        ..RetryPolicy::default()
    };
    let caps = retry.run(|| client.capabilities())?;
    let background_mode = if run.literal_background {
        BackgroundMode::Literal
    } else {
        BackgroundMode::VisualOnly
    };
    let options = SweepOptions {
        formats,
        image_kinds: kinds,
        neutral: run.questions.neutral,
        seed: run.questions.seed,
        max_inflight: run.max_inflight,
        resume: run.resume,
        out_dir: dir.clone(),
        retry,
        background_mode,
        token_threshold: DEFAULT_TOKEN_THRESHOLD,
    };
    let mut meta = RunMeta::new(command, &bytes, &run.questions);
    meta.endpoint = Some(client.describe());
    meta.capabilities = Some(caps);
    meta.configs = Some(configs.len());
    meta.grid = Some(grid_id.to_string());
    meta.background_mode = Some(background_mode);
    create_dir(&dir)?;
    meta.write(&dir)?;

    let outcome = run_sweep(&manifest, &configs, client.as_ref(), &options)?;
    emit(
        out,
        format!(
            "{} records ({} reused, {} failed) -> {}\n",
            outcome.records.len(),
            outcome.reused,
            outcome.failures.len(),
            dir.display()
        ),
    )?;
    Ok(if outcome.is_complete() { exit::OK } else { exit::INCOMPLETE })
}

fn records_in(run: &Path) -> CliResult<Vec<EvalRecord>> {
    Ok(read_records(&run.join(RECORDS_FILE))?)
}

pub fn cmd_converge(run: &Path, sizes: &[usize], draws: usize, seed: u64, format: FormatArg, out: &mut dyn Write) -> CliResult<i32> {
    let format = match format {
        FormatArg::Oe => QuestionFormat::Oe,
        FormatArg::Mcq => QuestionFormat::Mcq,
        FormatArg::Both => return Err(CliError::input("converge takes a single --format")),
    };
    let filter = RecordFilter {
        config: Some(ModulationConfig::baseline()),
        format: Some(format),
        image_kind: Some(ImageKind::Counterfactual),
        neutral: Some(false),
    };
    let records: Vec<EvalRecord> = records_in(run)?.into_iter().filter(|r| filter.matches(r)).collect();
    let points = convergence_analysis(&records, sizes, draws, seed).map_err(CliError::input)?;
    let table = convergence_table(&points);
    write_file(&run.join("convergence.csv"), emit_table(&table, TableFormat::Csv))?;
    write_file(&run.join("convergence.plotdata"), emit_table(&table, TableFormat::Plotdata))?;
    emit(out, emit_table(&table, TableFormat::AlignedText))?;
    Ok(exit::OK)
}

pub fn cmd_attn(run: &RunArgs, config: &str, region: RegionKind, image_kind: KindArg, out: &mut dyn Write) -> CliResult<i32> {
    let config = parse_config_label(config).map_err(CliError::input)?;
    let bytes = read_bytes(&run.manifest)?;
    let manifest = open_manifest(&run.manifest)?;
    let kinds = image_kind.kinds();
    if run.dry_run {
        emit(
            out,
            format!("plan: {} attention requests under {config}\n", manifest.instances.len() * kinds.len()),
        )?;
        return Ok(exit::OK);
    }
    let client = build_client(&run.endpoint)?;
    let retry = RetryPolicy {
        max_attempts: run.endpoint.max_attempts.max(1),
        ..RetryPolicy::default()
    };
    let caps = retry.run(|| client.capabilities())?;
    if !caps.supports(Feature::Attention) {
        return Err(CliError::model(ClientError::Unsupported {
            endpoint: client.describe(),
            feature: Feature::Attention.to_string(),
        }));
    }
    crate::sweep::check_capabilities(&caps, &[config], &client.describe())?;
    let (gw, gh) = caps
        .grid()
        .ok_or_else(|| CliError::model("endpoint reports no token grid"))?;
    let grid = TokenGrid::new(gw, gh, manifest.image_width, manifest.image_height).map_err(CliError::input)?;
    let layers = caps
        .n_layers
        .map(|n| crate::config::layer_group_indices(config.layer_group(), n))
        .transpose()
        .map_err(CliError::input)?
        .unwrap_or_default();
    let background_mode = if run.literal_background {
        BackgroundMode::Literal
    } else {
        BackgroundMode::VisualOnly
    };

    let mut responses: Vec<GenerateResponse> = Vec::new();
    for inst in &manifest.instances {
        let ann = manifest.load_annotation(inst).map_err(CliError::input)?;
        let selected = region_tokens(&ann, region, &grid, DEFAULT_TOKEN_THRESHOLD)
            .map_err(CliError::input)?
            .to_vec();
        let target_region = if config.region().is_local() { config.region() } else { RegionKind::WholeImg };
        let target = region_tokens(&ann, target_region, &grid, DEFAULT_TOKEN_THRESHOLD)
            .map_err(CliError::input)?
            .to_vec();
        for &kind in &kinds {
            let q = build_question(inst, QuestionFormat::Oe, run.questions.neutral, run.questions.seed)
                .map_err(CliError::input)?;
            let path = manifest.resolve(inst.image(kind));
            let image = encode_image_file(&path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let mut req = GenerateRequest::new(Some(image), q.prompt);
            req.return_attention = true;
            req.attention_token_set = Some(selected.clone());
            if !config.is_baseline() {
                req.modulation = Some(crate::client::ModulationSpec {
                    alpha: config.alpha(),
                    beta: config.beta(),
                    target_indices: target.clone(),
                    background_mode,
                    layer_indices: layers.clone(),
                });
            }
            responses.push(retry.run(|| client.generate(&req))?);
        }
    }
    let curve = attention_gap_curve(&responses).map_err(CliError::model)?;

    let endpoint_id = endpoint_identity(&run.endpoint)?;
    let grid_id = format!("attn:{config}:{region}");
    let dir = run_dir(&run.out, &bytes, &grid_id, &endpoint_id);
    create_dir(&dir)?;
    let mut meta = RunMeta::new("attn", &bytes, &run.questions);
    meta.formats = vec![QuestionFormat::Oe];
    meta.endpoint = Some(client.describe());
    meta.capabilities = Some(caps);
    meta.grid = Some(grid_id);
    meta.background_mode = Some(background_mode);
    meta.write(&dir)?;
    let table = attention_table(&curve);
    write_file(&dir.join("attention.plotdata"), emit_table(&table, TableFormat::Plotdata))?;
    write_file(&dir.join("attention.csv"), emit_table(&table, TableFormat::Csv))?;
    let mut json = serde_json::to_string_pretty(&curve).expect("curve serializes");
    json.push('\n');
    write_file(&dir.join("attention.json"), json)?;
    emit(
        out,
        format!(
            "late-half mean attention: all visual {:.6}, {region} {:.6} -> {}\n",
            curve.late_all_visual,
            curve.late_selected,
            dir.display()
        ),
    )?;
    Ok(exit::OK)
}

/// One table per (image kind, format, neutrality) slice, Baseline first,
/// every row annotated against that slice's Baseline when present.
pub fn report_tables(records: &[EvalRecord], averaging: Averaging) -> CliResult<Vec<(String, Table, Table)>> {
    let mut slices: std::collections::BTreeMap<(ImageKind, QuestionFormat, bool), Vec<ModulationConfig>> =
        Default::default();
    for r in records {
        let configs = slices.entry((r.image_kind, r.format, r.neutral)).or_default();
        if !configs.contains(&r.config) {
            configs.push(r.config);
        }
    }
    let mut out = Vec::new();
    for ((kind, format, neutral), mut configs) in slices {
        configs.sort_by_key(|c| (!c.is_baseline(), c.label()));
        let base_filter = RecordFilter {
            config: None,
            format: Some(format),
            image_kind: Some(kind),
            neutral: Some(neutral),
        };
        let reports = configs
            .iter()
            .map(|c| {
                let f = RecordFilter {
                    config: Some(*c),
                    ..base_filter.clone()
                };
                compute_category_report(records, &f, averaging).map_err(CliError::input)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let baseline = configs.iter().position(|c| c.is_baseline()).map(|i| &reports[i]);
        let rows: Vec<ReportRow<'_>> = configs
            .iter()
            .zip(&reports)
            .map(|(c, r)| ReportRow {
                label: c.label(),
                report: r,
                baseline,
            })
            .collect();
        let kind_name = match kind {
            ImageKind::Factual => "factual",
            ImageKind::Counterfactual => "cf",
        };
        let name = format!("{kind_name}-{format}{}", if neutral { "-neutral" } else { "" });
        out.push((
            name,
            report_table(&rows, false).map_err(CliError::input)?,
            report_table(&rows, true).map_err(CliError::input)?,
        ));
    }
    Ok(out)
}

pub fn cmd_report(run: &Path, micro: bool, out: &mut dyn Write) -> CliResult<i32> {
    let records = records_in(run)?;
    if records.is_empty() {
        return Err(CliError::input(format!("{} holds no records", run.display())));
    }
    let averaging = if micro { Averaging::Micro } else { Averaging::Macro };
    for (name, plain, annotated) in report_tables(&records, averaging)? {
        write_file(&run.join(format!("report-{name}.csv")), emit_table(&plain, TableFormat::Csv))?;
        let text = emit_table(&annotated, TableFormat::AlignedText);
        write_file(&run.join(format!("report-{name}.txt")), &text)?;
        emit(out, format!("== {name}\n{text}"))?;
    }

    let mut best = Table {
        header: ["slice_set", "image", "format", "neutral", "slice", "config", "Avg Acc", "Avg Bias"]
            .map(String::from)
            .to_vec(),
        rows: Vec::new(),
    };
    let mut keys: Vec<(ImageKind, QuestionFormat, bool)> =
        records.iter().map(|r| (r.image_kind, r.format, r.neutral)).collect();
    keys.sort();
    keys.dedup();
    for (kind, format, neutral) in keys {
        let slice: Vec<EvalRecord> = records
            .iter()
            .filter(|r| (r.image_kind, r.format, r.neutral) == (kind, format, neutral))
            .cloned()
            .collect();
        for (set, g) in [
            ("overall", Granularity::Overall),
            ("per_family", Granularity::PerFamily),
            ("per_layer_group", Granularity::PerLayerGroup),
        ] {
            for b in select_best(&slice, g)? {
                best.rows.push(vec![
                    set.to_string(),
                    format!("{kind:?}").to_lowercase(),
                    format.to_string(),
                    neutral.to_string(),
                    b.slice,
                    b.config.label(),
                    format!("{:.2}", b.avg_acc),
                    format!("{:.2}", b.avg_bias),
                ]);
            }
        }
    }
    write_file(&run.join("best.csv"), emit_table(&best, TableFormat::Csv))?;
    Ok(exit::OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dir_depends_on_all_parts() {
        let root = Path::new("out");
        let a = run_dir(root, b"m", "g", "e");
        assert_eq!(a, run_dir(root, b"m", "g", "e"));
        assert_ne!(a, run_dir(root, b"m2", "g", "e"));
        assert_ne!(a, run_dir(root, b"m", "g2", "e"));
        assert_ne!(a, run_dir(root, b"m", "g", "e2"));
        // length prefixes keep part boundaries unambiguous
        assert_ne!(run_dir(root, b"ab", "c", ""), run_dir(root, b"a", "bc", ""));
    }

    #[test]
    fn usage_errors() {
        let mut sink = Vec::new();
        assert_eq!(run_from(["cfcount", "nope"], &mut sink), exit::USAGE);
        assert_eq!(run_from(["cfcount", "validate"], &mut sink), exit::USAGE);
        assert_eq!(run_from(["cfcount", "--help"], &mut sink), exit::OK);
    }

    #[test]
    fn standard_grid_dry_run() {
        let cli = Cli::try_parse_from(["cfcount", "sweep", "--manifest", "m.json", "--dry-run"]).unwrap();
        let Command::Sweep { grid, run, .. } = cli.command else { panic!() };
        assert_eq!(grid, "standard");
        assert!(run.dry_run);
        assert_eq!(run.max_inflight, 1);
        assert_eq!(enumerate_configs(&load_grid(&grid).unwrap()).unwrap().len(), 445);
    }
}
