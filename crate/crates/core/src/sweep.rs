//! Checkpointed evaluation runs over (instance × image × format × config)
//! cells, and best-configuration selection.
//!
//! A run directory holds three files:
//!
//! - `checkpoint.jsonl`: append-only log of completed cells, keyed by a hash of
//!   the cell identity. A torn final line (interrupted write) is discarded.
//! - `records.jsonl`: every [`EvalRecord`] sorted by instance, image, format,
//!   neutrality and config label. Rewritten at the end of each run.
//! - `failures.jsonl`: cells whose requests failed after retries.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::BackgroundMode;
use crate::client::{
    encode_image_file, Capabilities, ClientError, Feature, GenerateRequest, InferenceClient, ModulationSpec,
    RetryPolicy,
};
use crate::config::{layer_group_indices, ConfigError, Family, LayerGroup, ModulationConfig, RegionKind};
use crate::extract::{build_judge_prompt, categorize, extract_numbers, resolve_prediction};
use crate::manifest::{ImageKind, InstanceRecord, Manifest, ManifestError};
use crate::metrics::{compute_category_report, Averaging, EvalRecord, MetricsError, RecordFilter};
use crate::questions::{build_question, QuestionError, QuestionFormat};
use crate::region::{region_tokens, RegionError, TokenGrid, DEFAULT_TOKEN_THRESHOLD};

pub const CHECKPOINT_FILE: &str = "checkpoint.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed line {line} in {path}: {message}")]
    Checkpoint { path: PathBuf, line: usize, message: String },
    #[error("{0} already exists; pass --resume to continue it")]
    CheckpointExists(PathBuf),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("instance {id}: {source}")]
    Question { id: String, source: QuestionError },
    #[error("instance {0}: counterfactual count equals the canonical prior")]
    Categorize(String),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub formats: Vec<QuestionFormat>,
    pub image_kinds: Vec<ImageKind>,
    pub neutral: bool,
    /// Mixed into every instance's option-shuffle seed.
    pub seed: u64,
    pub max_inflight: usize,
    pub resume: bool,
    pub out_dir: PathBuf,
    pub retry: RetryPolicy,
    pub background_mode: BackgroundMode,
    pub token_threshold: f64,
}

impl SweepOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            formats: vec![QuestionFormat::Oe],
            image_kinds: vec![ImageKind::Counterfactual],
            neutral: false,
            seed: 0,
            max_inflight: 1,
            resume: false,
            out_dir: out_dir.into(),
            retry: RetryPolicy::default(),
            background_mode: BackgroundMode::VisualOnly,
            token_threshold: DEFAULT_TOKEN_THRESHOLD,
        }
    }
}

/// A cell that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCell {
    pub instance_id: String,
    pub image_kind: ImageKind,
    pub format: QuestionFormat,
    pub config: ModulationConfig,
    pub error: String,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<FailedCell>,
    /// Cells served from the checkpoint without model calls.
    pub reused: usize,
    pub total_cells: usize,
}

impl SweepOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.records.len() == self.total_cells
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell<'a> {
    instance: &'a InstanceRecord,
    kind: ImageKind,
    format: QuestionFormat,
    config: &'a ModulationConfig,
}

fn cell_key(instance_id: &str, kind: ImageKind, format: QuestionFormat, neutral: bool, config: &ModulationConfig, seed: u64) -> String {
    let ident = serde_json::json!([instance_id, kind, format, neutral, config.label(), seed]);
    hex::encode(Sha256::digest(ident.to_string().as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct CheckpointLine {
    key: String,
    record: EvalRecord,
}

/// Reads the checkpoint, dropping a torn last line. Returns the records and
/// the byte length of the intact prefix.
fn read_checkpoint(path: &Path) -> Result<(HashMap<String, EvalRecord>, u64), SweepError> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((done, 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut good = 0u64;
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        n += 1;
        if !line.ends_with('\n') {
            log::warn!("discarding torn checkpoint line {n} in {}", path.display());
            break;
        }
        let entry: CheckpointLine = serde_json::from_str(line.trim_end()).map_err(|e| SweepError::Checkpoint {
            path: path.to_path_buf(),
            line: n,
            message: e.to_string(),
        })?;
        done.insert(entry.key, entry.record);
        good += read as u64;
    }
    Ok((done, good))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), SweepError> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, SweepError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SweepError::Checkpoint {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Per-instance inputs shared by all of the instance's cells.
struct Prepared {
    images: HashMap<ImageKind, String>,
    /// Grid indices per region kind, present when modulation is needed.
    regions: HashMap<RegionKind, Vec<usize>>,
}

struct Context<'a> {
    client: &'a dyn InferenceClient,
    options: &'a SweepOptions,
    layers: HashMap<LayerGroup, Vec<usize>>,
    prepared: HashMap<&'a str, Prepared>,
}

impl Context<'_> {
    fn call(&self, req: &GenerateRequest) -> Result<String, ClientError> {
        self.options.retry.run(|| self.client.generate(req)).map(|r| r.text)
    }

    fn evaluate(&self, cell: Cell<'_>) -> Result<EvalRecord, SweepError> {
        let inst = cell.instance;
        let q = build_question(inst, cell.format, self.options.neutral, self.options.seed).map_err(|source| {
            SweepError::Question {
                id: inst.id.clone(),
                source,
            }
        })?;
        let prep = &self.prepared[inst.id.as_str()];
        let mut req = GenerateRequest::new(Some(prep.images[&cell.kind].clone()), q.prompt.clone());
        if !cell.config.is_baseline() {
            let region = if cell.config.family() == Family::Whole {
                RegionKind::WholeImg
            } else {
                cell.config.region()
            };
            req.modulation = Some(ModulationSpec {
                alpha: cell.config.alpha(),
                beta: cell.config.beta(),
                target_indices: prep.regions[&region].clone(),
                background_mode: self.options.background_mode,
                layer_indices: self.layers[&cell.config.layer_group()].clone(),
            });
        }
        let raw_text = self.call(&req)?;
        let expected = inst.expected_count(cell.kind);
        let extraction = resolve_prediction(extract_numbers(&raw_text), || {
            let judge = GenerateRequest::new(None, build_judge_prompt(&q.prompt, &raw_text, u64::from(expected)));
            self.call(&judge)
        })?;
        let label = categorize(extraction.prediction, expected, inst.canonical_count, cell.kind)
            .map_err(|_| SweepError::Categorize(inst.id.clone()))?;
        Ok(EvalRecord {
            instance_id: inst.id.clone(),
            category: inst.category,
            image_kind: cell.kind,
            format: cell.format,
            neutral: self.options.neutral,
            config: *cell.config,
            expected,
            prior: inst.canonical_count,
            prompt: q.prompt,
            raw_text,
            extraction,
            label,
        })
    }
}

/// Checks that the backend can serve every config, before any generation.
pub fn check_capabilities(caps: &Capabilities, configs: &[ModulationConfig], endpoint: &str) -> Result<(), SweepError> {
    if configs.iter().any(|c| !c.is_baseline()) {
        if !caps.supports(Feature::Modulation) {
            return Err(ClientError::Unsupported {
                endpoint: endpoint.to_string(),
                feature: Feature::Modulation.to_string(),
            }
            .into());
        }
        if caps.grid().is_none() || caps.n_layers.is_none() {
            return Err(SweepError::Setup(format!(
                "{endpoint} supports modulation but reports no token grid or layer count"
            )));
        }
    }
    Ok(())
}

/// Evaluates every cell, reusing checkpointed ones, and writes the run
/// directory. Failed cells are recorded, never fabricated; a capability or
/// request-validity error aborts the run.
pub fn run_sweep(
    manifest: &Manifest,
    configs: &[ModulationConfig],
    client: &dyn InferenceClient,
    options: &SweepOptions,
) -> Result<SweepOutcome, SweepError> {
    if options.max_inflight == 0 {
        return Err(SweepError::Setup("max_inflight must be at least 1".into()));
    }
    fs::create_dir_all(&options.out_dir).map_err(io_err(&options.out_dir))?;
    let ckpt_path = options.out_dir.join(CHECKPOINT_FILE);
    if !options.resume && ckpt_path.exists() {
        return Err(SweepError::CheckpointExists(ckpt_path));
    }
    let (done, intact) = read_checkpoint(&ckpt_path)?;

    let mut cells = Vec::new();
    for inst in &manifest.instances {
        for &kind in &options.image_kinds {
            for &format in &options.formats {
                for config in configs {
                    cells.push(Cell {
                        instance: inst,
                        kind,
                        format,
                        config,
                    });
                }
            }
        }
    }
    let key_of = |c: &Cell<'_>| cell_key(&c.instance.id, c.kind, c.format, options.neutral, c.config, options.seed);
    let pending: Vec<Cell<'_>> = cells.iter().copied().filter(|c| !done.contains_key(&key_of(c))).collect();
    let reused = cells.len() - pending.len();
    log::info!("{} cells, {reused} from checkpoint, {} to run", cells.len(), pending.len());

    let mut records: Vec<EvalRecord> = cells.iter().filter_map(|c| done.get(&key_of(c)).cloned()).collect();
    let mut failures = Vec::new();

    if !pending.is_empty() {
        let needs_modulation = configs.iter().any(|c| !c.is_baseline());
        let (layers, grid) = if needs_modulation {
            let caps = options.retry.run(|| client.capabilities())?;
            check_capabilities(&caps, configs, &client.describe())?;
            let (gw, gh) = caps.grid().expect("checked");
            let n_layers = caps.n_layers.expect("checked");
            let mut layers = HashMap::new();
            for g in LayerGroup::ALL_GROUPS {
                layers.insert(g, layer_group_indices(g, n_layers)?);
            }
            (layers, Some(TokenGrid::new(gw, gh, manifest.image_width, manifest.image_height)?))
        } else {
            (HashMap::new(), None)
        };

        let mut prepared = HashMap::new();
        let pending_ids: std::collections::BTreeSet<&str> = pending.iter().map(|c| c.instance.id.as_str()).collect();
        for inst in manifest.instances.iter().filter(|i| pending_ids.contains(i.id.as_str())) {
            let mut images = HashMap::new();
            for &kind in &options.image_kinds {
                let path = manifest.resolve(inst.image(kind));
                images.insert(kind, encode_image_file(&path).map_err(io_err(&path))?);
            }
            let mut regions = HashMap::new();
            if let Some(grid) = &grid {
                let ann = manifest.load_annotation(inst)?;
                for kind in [RegionKind::WholeImg, RegionKind::Mask, RegionKind::BB, RegionKind::MaskBB] {
                    regions.insert(kind, region_tokens(&ann, kind, grid, options.token_threshold)?.to_vec());
                }
            }
            prepared.insert(inst.id.as_str(), Prepared { images, regions });
        }
        let ctx = Context {
            client,
            options,
            layers,
            prepared,
        };

        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&ckpt_path)
            .and_then(|f| f.set_len(intact))
            .map_err(io_err(&ckpt_path))?;
        let mut ckpt = OpenOptions::new().append(true).open(&ckpt_path).map_err(io_err(&ckpt_path))?;

        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = options.max_inflight.min(pending.len());
        let mut fatal = None;
        std::thread::scope(|s| {
            let (tx, rx) = mpsc::channel();
            for _ in 0..workers {
                let tx = tx.clone();
                let (ctx, pending, next, abort) = (&ctx, &pending, &next, &abort);
                s.spawn(move || loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&cell) = pending.get(i) else { break };
                    if tx.send((cell, ctx.evaluate(cell))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (cell, result) in rx {
                match result {
                    Ok(record) => {
                        let mut line = serde_json::to_string(&CheckpointLine {
                            key: key_of(&cell),
                            record: record.clone(),
                        })
                        .expect("record serializes");
                        line.push('\n');
                        if let Err(e) = ckpt.write_all(line.as_bytes()).and_then(|_| ckpt.flush()) {
                            abort.store(true, Ordering::SeqCst);
                            fatal.get_or_insert(io_err(&ckpt_path)(e));
                        }
                        records.push(record);
                    }
                    Err(e) if is_fatal(&e) => {
                        abort.store(true, Ordering::SeqCst);
                        fatal.get_or_insert(e);
                    }
                    Err(e) => {
                        log::warn!("cell {} {:?} {} {} failed: {e}", cell.instance.id, cell.kind, cell.format, cell.config);
                        failures.push(FailedCell {
                            instance_id: cell.instance.id.clone(),
                            image_kind: cell.kind,
                            format: cell.format,
                            config: *cell.config,
                            error: e.to_string(),
                        });
                    }
                }
            }
        });
        if let Some(e) = fatal {
            return Err(e);
        }
    }

    records.sort_by_key(EvalRecord::sort_key);
    failures.sort_by_key(|f| (f.instance_id.clone(), f.image_kind, f.format, f.config.label()));
    write_jsonl(&options.out_dir.join(RECORDS_FILE), &records)?;
    write_jsonl(&options.out_dir.join(FAILURES_FILE), &failures)?;
    Ok(SweepOutcome {
        records,
        failures,
        reused,
        total_cells: cells.len(),
    })
}

fn is_fatal(e: &SweepError) -> bool {
    !matches!(
        e,
        SweepError::Client(
            ClientError::Transport(_) | ClientError::Http { .. } | ClientError::Malformed(_) | ClientError::ReplayMiss(_)
        )
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Overall,
    PerFamily,
    PerLayerGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub slice: String,
    pub config: ModulationConfig,
    pub avg_acc: f64,
    pub avg_bias: f64,
}

/// Highest macro Avg Acc per slice. Ties go to lower Avg Bias, then α closer
/// to 1, then β closer to 1, then the lexicographically smaller label.
pub fn select_best(records: &[EvalRecord], granularity: Granularity) -> Result<Vec<BestRow>, SweepError> {
    let mut by_config: BTreeMap<String, (ModulationConfig, Vec<EvalRecord>)> = BTreeMap::new();
    for r in records {
        by_config
            .entry(r.config.label())
            .or_insert_with(|| (r.config, Vec::new()))
            .1
            .push(r.clone());
    }
    let mut slices: BTreeMap<String, Vec<BestRow>> = BTreeMap::new();
    for (config, recs) in by_config.values() {
        let report = compute_category_report(recs, &RecordFilter::default(), Averaging::Macro)?;
        let slice = match granularity {
            Granularity::Overall => "overall".to_string(),
            Granularity::PerFamily => config.family().to_string(),
            Granularity::PerLayerGroup => config.layer_group().to_string(),
        };
        slices.entry(slice.clone()).or_default().push(BestRow {
            slice,
            config: *config,
            avg_acc: report.avg_acc(),
            avg_bias: report.avg_bias(),
        });
    }
    if slices.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    Ok(slices
        .into_values()
        .map(|rows| rows.into_iter().min_by(rank).expect("non-empty slice"))
        .collect())
}

fn rank(a: &BestRow, b: &BestRow) -> std::cmp::Ordering {
    b.avg_acc
        .total_cmp(&a.avg_acc)
        .then(a.avg_bias.total_cmp(&b.avg_bias))
        .then((a.config.alpha() - 1.0).abs().total_cmp(&(b.config.alpha() - 1.0).abs()))
        .then((a.config.beta() - 1.0).abs().total_cmp(&(b.config.beta() - 1.0).abs()))
        .then(a.config.label().cmp(&b.config.label()))
}
