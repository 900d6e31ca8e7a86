//! Aggregation of evaluation records into report tables, convergence curves
//! and per-layer attention series.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{GenerateResponse, LayerAttention};
use crate::config::ModulationConfig;
use crate::extract::{categorize, ExtractionResult, Label};
use crate::manifest::{Category, ImageKind};
use crate::questions::QuestionFormat;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records match the filter")]
    Empty,
    #[error("category sets differ between report and baseline")]
    CategoryMismatch,
    #[error("sample size {size} exceeds the {available} available records")]
    SizeTooLarge { size: usize, available: usize },
    #[error("sample size must be at least 1")]
    ZeroSize,
    #[error("response {index} carries {got} attention layers, expected {expected}")]
    LayerMismatch { index: usize, got: usize, expected: usize },
    #[error("response {0} carries no attention statistics")]
    MissingAttention(usize),
}

/// Outcome of one (instance, image, format, config) evaluation cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub category: Category,
    pub image_kind: ImageKind,
    pub format: QuestionFormat,
    pub neutral: bool,
    pub config: ModulationConfig,
    /// Count visible in the image.
    pub expected: u32,
    /// Canonical count of the object class.
    pub prior: u32,
    pub prompt: String,
    pub raw_text: String,
    pub extraction: ExtractionResult,
    pub label: Label,
}

impl EvalRecord {
    pub fn prediction(&self) -> Option<u64> {
        self.extraction.prediction
    }

    /// Whether `label` agrees with re-categorizing the stored prediction.
    pub fn is_consistent(&self) -> bool {
        categorize(self.prediction(), self.expected, self.prior, self.image_kind).ok() == Some(self.label)
    }

    /// Deterministic output order: instance, image, format, neutrality, config.
    pub fn sort_key(&self) -> (String, ImageKind, QuestionFormat, bool, String) {
        (
            self.instance_id.clone(),
            self.image_kind,
            self.format,
            self.neutral,
            self.config.label(),
        )
    }
}

/// Record selection. `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordFilter {
    pub config: Option<ModulationConfig>,
    pub format: Option<QuestionFormat>,
    pub image_kind: Option<ImageKind>,
    pub neutral: Option<bool>,
}

impl RecordFilter {
    pub fn matches(&self, r: &EvalRecord) -> bool {
        self.config.is_none_or(|c| c == r.config)
            && self.format.is_none_or(|f| f == r.format)
            && self.image_kind.is_none_or(|k| k == r.image_kind)
            && self.neutral.is_none_or(|n| n == r.neutral)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub n: usize,
    pub accurate: usize,
    pub bias: usize,
    pub other: usize,
}

impl CategoryStats {
    fn add(&mut self, label: Label) {
        self.n += 1;
        match label {
            Label::Accurate => self.accurate += 1,
            Label::Bias => self.bias += 1,
            Label::Other => self.other += 1,
        }
    }

    fn pct(&self, k: usize) -> f64 {
        100.0 * k as f64 / self.n as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.pct(self.accurate)
    }

    pub fn bias_rate(&self) -> f64 {
        self.pct(self.bias)
    }

    pub fn other_rate(&self) -> f64 {
        self.pct(self.other)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over categories.
    #[default]
    Macro,
    /// Pooled over all records.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub categories: BTreeMap<Category, CategoryStats>,
    pub averaging: Averaging,
}

impl CategoryReport {
    fn average(&self, f: impl Fn(&CategoryStats) -> f64, pooled: impl Fn(&CategoryStats) -> usize) -> f64 {
        match self.averaging {
            Averaging::Macro => {
                self.categories.values().map(&f).sum::<f64>() / self.categories.len() as f64
            }
            Averaging::Micro => {
                let n: usize = self.categories.values().map(|s| s.n).sum();
                let k: usize = self.categories.values().map(pooled).sum();
                100.0 * k as f64 / n as f64
            }
        }
    }

    pub fn avg_acc(&self) -> f64 {
        self.average(CategoryStats::accuracy, |s| s.accurate)
    }

    pub fn avg_bias(&self) -> f64 {
        self.average(CategoryStats::bias_rate, |s| s.bias)
    }

    pub fn total(&self) -> usize {
        self.categories.values().map(|s| s.n).sum()
    }
}

pub fn compute_category_report(
    records: &[EvalRecord],
    filter: &RecordFilter,
    averaging: Averaging,
) -> Result<CategoryReport, MetricsError> {
    let mut categories: BTreeMap<Category, CategoryStats> = BTreeMap::new();
    for r in records.iter().filter(|r| filter.matches(r)) {
        categories.entry(r.category).or_default().add(r.label);
    }
    if categories.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(CategoryReport { categories, averaging })
}

/// A value and its difference from the baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaCell {
    pub value: f64,
    pub delta: f64,
}

impl DeltaCell {
    /// `"44.58 (+4.84)"`.
    pub fn render(&self) -> String {
        format!("{:.2} ({})", self.value, format_delta(self.delta))
    }
}

/// Signed two-decimal rendering; values that round to zero print as `+0.00`.
pub fn format_delta(delta: f64) -> String {
    let rounded = (delta * 100.0).round() / 100.0;
    if rounded == 0.0 {
        "+0.00".to_string()
    } else if rounded > 0.0 {
        format!("+{rounded:.2}")
    } else {
        format!("{rounded:.2}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub accuracy: BTreeMap<Category, DeltaCell>,
    pub bias: BTreeMap<Category, DeltaCell>,
    pub avg_acc: DeltaCell,
    pub avg_bias: DeltaCell,
}

pub fn delta_report(report: &CategoryReport, baseline: &CategoryReport) -> Result<DeltaReport, MetricsError> {
    if !report.categories.keys().eq(baseline.categories.keys()) {
        return Err(MetricsError::CategoryMismatch);
    }
    let cell = |value: f64, base: f64| DeltaCell {
        value,
        delta: value - base,
    };
    let per = |f: fn(&CategoryStats) -> f64| {
        report
            .categories
            .iter()
            .map(|(c, s)| (*c, cell(f(s), f(&baseline.categories[c]))))
            .collect()
    };
    Ok(DeltaReport {
        accuracy: per(CategoryStats::accuracy),
        bias: per(CategoryStats::bias_rate),
        avg_acc: cell(report.avg_acc(), baseline.avg_acc()),
        avg_bias: cell(report.avg_bias(), baseline.avg_bias()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub size: usize,
    /// Mean overall accuracy over draws, in percent.
    pub mean: f64,
    /// Population standard deviation over draws, in percent.
    pub std: f64,
}

/// Accuracy spread over repeated category-balanced subsamples.
///
/// Each draw shuffles the categories and the records within each category,
/// then hands out slots one category at a time in that shuffled order until
/// `size` records are allocated, skipping exhausted categories. Statistics
/// are computed from integer counts so a full-size sample has std exactly 0.
pub fn convergence_analysis(
    records: &[EvalRecord],
    sizes: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<ConvergencePoint>, MetricsError> {
    let mut by_cat: BTreeMap<Category, Vec<bool>> = BTreeMap::new();
    for r in records {
        by_cat.entry(r.category).or_default().push(r.label == Label::Accurate);
    }
    if draws == 0 || by_cat.is_empty() {
        return Err(MetricsError::Empty);
    }
    let available = records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(MetricsError::ZeroSize);
        }
        if size > available {
            return Err(MetricsError::SizeTooLarge { size, available });
        }
        let mut sum: u128 = 0;
        let mut sum_sq: u128 = 0;
        for _ in 0..draws {
            let mut order: Vec<&Vec<bool>> = by_cat.values().collect();
            order.shuffle(&mut rng);
            let mut take = vec![0usize; order.len()];
            let mut left = size;
            while left > 0 {
                for (i, pool) in order.iter().enumerate() {
                    if left > 0 && take[i] < pool.len() {
                        take[i] += 1;
                        left -= 1;
                    }
                }
            }
            let mut correct = 0u128;
            for (pool, &k) in order.iter().zip(&take) {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                idx.shuffle(&mut rng);
                correct += idx[..k].iter().filter(|&&i| pool[i]).count() as u128;
            }
            sum += correct;
            sum_sq += correct * correct;
        }
        let d = draws as u128;
        let var_num = d * sum_sq - sum * sum;
        let scale = d as f64 * size as f64;
        out.push(ConvergencePoint {
            size,
            mean: 100.0 * sum as f64 / scale,
            std: 100.0 * (var_num as f64).sqrt() / scale,
        });
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties. `None` when a
/// series is constant or lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCurve {
    pub layers: Vec<LayerAttention>,
    /// Means over the late half of the layers, `⌈n/2⌉..n`.
    pub late_all_visual: f64,
    pub late_selected: f64,
}

pub fn attention_gap_curve(responses: &[GenerateResponse]) -> Result<AttentionCurve, MetricsError> {
    let series: Vec<&Vec<LayerAttention>> = responses
        .iter()
        .enumerate()
        .map(|(i, r)| r.per_layer_attention.as_ref().ok_or(MetricsError::MissingAttention(i)))
        .collect::<Result<_, _>>()?;
    let Some(first) = series.first() else {
        return Err(MetricsError::Empty);
    };
    let n = first.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let mut sums = vec![(0.0, 0.0); n];
    for (i, s) in series.iter().enumerate() {
        if s.len() != n {
            return Err(MetricsError::LayerMismatch {
                index: i,
                got: s.len(),
                expected: n,
            });
        }
        for (acc, l) in sums.iter_mut().zip(s.iter()) {
            acc.0 += l.mean_all_visual;
            acc.1 += l.mean_selected;
        }
    }
    let count = series.len() as f64;
    let layers: Vec<LayerAttention> = sums
        .into_iter()
        .map(|(a, s)| LayerAttention {
            mean_all_visual: a / count,
            mean_selected: s / count,
        })
        .collect();
    let late = &layers[n.div_ceil(2)..];
    let late_mean = |f: fn(&LayerAttention) -> f64| {
        if late.is_empty() {
            f(&layers[n - 1])
        } else {
            late.iter().map(f).sum::<f64>() / late.len() as f64
        }
    };
    Ok(AttentionCurve {
        late_all_visual: late_mean(|l| l.mean_all_visual),
        late_selected: late_mean(|l| l.mean_selected),
        layers,
    })
}

/// A rendered table: header plus rows of preformatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    AlignedText,
    Plotdata,
}

/// One row of a per-category report.
#[derive(Debug, Clone)]
pub struct ReportRow<'a> {
    pub label: String,
    pub report: &'a CategoryReport,
    pub baseline: Option<&'a CategoryReport>,
}

/// Per-category accuracy, Avg Acc and Avg Bias, one row per configuration.
/// `annotate` renders deltas against the row's baseline inline, as in
/// `44.58 (+4.84)`; otherwise deltas get their own columns.
pub fn report_table(rows: &[ReportRow<'_>], annotate: bool) -> Result<Table, MetricsError> {
    let mut header = vec!["Config".to_string()];
    header.extend(Category::ALL.iter().map(|c| c.short_name().to_string()));
    header.push("Avg Acc".into());
    header.push("Avg Bias".into());
    if !annotate {
        header.push("Avg Acc Delta".into());
        header.push("Avg Bias Delta".into());
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let deltas = row.baseline.map(|b| delta_report(row.report, b)).transpose()?;
        let mut cells = vec![row.label.clone()];
        for c in Category::ALL {
            cells.push(match (row.report.categories.get(&c), &deltas) {
                (None, _) => "-".into(),
                (Some(_), Some(d)) if annotate => d.accuracy[&c].render(),
                (Some(s), _) => format!("{:.2}", s.accuracy()),
            });
        }
        match (&deltas, annotate) {
            (Some(d), true) => {
                cells.push(d.avg_acc.render());
                cells.push(d.avg_bias.render());
            }
            _ => {
                cells.push(format!("{:.2}", row.report.avg_acc()));
                cells.push(format!("{:.2}", row.report.avg_bias()));
            }
        }
        if !annotate {
            match &deltas {
                Some(d) => {
                    cells.push(format_delta(d.avg_acc.delta));
                    cells.push(format_delta(d.avg_bias.delta));
                }
                None => cells.extend(["".to_string(), "".to_string()]),
            }
        }
        out.push(cells);
    }
    Ok(Table { header, rows: out })
}

pub fn convergence_table(points: &[ConvergencePoint]) -> Table {
    Table {
        header: vec!["size".into(), "mean".into(), "std".into()],
        rows: points
            .iter()
            .map(|p| vec![p.size.to_string(), format!("{:.6}", p.mean), format!("{:.6}", p.std)])
            .collect(),
    }
}

/// `(x, y, series)` triples: one point per layer for each attention series.
pub fn attention_table(curve: &AttentionCurve) -> Table {
    let mut rows = Vec::with_capacity(curve.layers.len() * 2);
    for (series, f) in [
        ("all_visual", (|l: &LayerAttention| l.mean_all_visual) as fn(&LayerAttention) -> f64),
        ("selected", |l: &LayerAttention| l.mean_selected),
    ] {
        for (i, l) in curve.layers.iter().enumerate() {
            rows.push(vec![i.to_string(), format!("{:.8}", f(l)), series.to_string()]);
        }
    }
    Table {
        header: vec!["x".into(), "y".into(), "series".into()],
        rows,
    }
}

pub fn emit_table(table: &Table, format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.header).expect("in-memory write");
            for row in &table.rows {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
        }
        TableFormat::AlignedText => {
            let cols = table.header.len();
            let mut widths = vec![0; cols];
            for row in std::iter::once(&table.header).chain(&table.rows) {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.chars().count());
                }
            }
            let mut out = String::new();
            let line = |out: &mut String, row: &[String]| {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                out.push_str(cells.join("  ").trim_end());
                out.push('\n');
            };
            line(&mut out, &table.header);
            let rule: usize = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(rule));
            out.push('\n');
            for row in &table.rows {
                line(&mut out, row);
            }
            out
        }
        TableFormat::Plotdata => {
            let mut out = format!("# {}\n", table.header.join(" "));
            for row in &table.rows {
                let _ = writeln!(out, "{}", row.join(" "));
            }
            out
        }
    }
}
