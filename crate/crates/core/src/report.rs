//! Result persistence: CSV/JSON files, summary tables, PPM exports and the
//! run manifest.
//!
//! CSV schema (version 1):
//!
//! - `aggregates.csv`: `target,block,level,transformer,layer,matrix,bit,index,tensor,metric,mean,std,count`
//! - `trials.csv`: `target,trial,seed,tensor,element,bit,original,flipped,non_finite,prompt,metric,value`
//! - `baseline.csv`: `prompt_index,prompt,metric,value`
//!
//! Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::campaign::{CampaignResult, ImageCache};
use crate::config::{Metric, Target};
use crate::selector::{BlockKind, LayerKind, MatrixRole};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed result file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown grouping `{0}` (expected by-block, by-layer or by-bit)")]
    UnknownGrouping(String),
    #[error("metric `{0}` was not recorded in this result")]
    MissingMetric(Metric),
    #[error("no cached images for {0}; re-run the campaign to export images")]
    MissingCache(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ReportError> {
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_results(result: &CampaignResult, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    match format {
        ReportFormat::Json => {
            let path = dir.join("result.json");
            write_file(&path, result.to_json())?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let files = [
                ("aggregates.csv", aggregates_csv(result)?),
                ("trials.csv", trials_csv(result)?),
                ("baseline.csv", baseline_csv(result)?),
            ];
            let mut out = Vec::new();
            for (name, bytes) in files {
                let path = dir.join(name);
                write_file(&path, bytes)?;
                out.push(path);
            }
            Ok(out)
        }
    }
}

pub fn load_result(path: &Path) -> Result<CampaignResult, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(CampaignResult::from_json(&text)?)
}

fn block_str(b: BlockKind) -> &'static str {
    match b {
        BlockKind::Down => "down",
        BlockKind::Mid => "mid",
        BlockKind::Up => "up",
    }
}

fn layer_str(l: LayerKind) -> &'static str {
    match l {
        LayerKind::SelfAttention => "sa",
        LayerKind::CrossAttention => "ca",
        LayerKind::FeedForward => "ffn",
    }
}

fn matrix_str(m: MatrixRole) -> &'static str {
    match m {
        MatrixRole::Wq => "wq",
        MatrixRole::Wk => "wk",
        MatrixRole::Wv => "wv",
        MatrixRole::Wo => "wo",
        MatrixRole::Wf1 => "w1",
        MatrixRole::Wf2 => "w2",
    }
}

pub fn aggregates_csv(result: &CampaignResult) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "target", "block", "level", "transformer", "layer", "matrix", "bit", "index", "tensor", "metric", "mean", "std",
        "count",
    ])?;
    for t in &result.targets {
        let s = t.target.selector;
        for (m, a) in &t.aggregates {
            w.write_record([
                t.id.clone(),
                block_str(s.block).into(),
                s.level.to_string(),
                s.transformer.to_string(),
                layer_str(s.layer).into(),
                matrix_str(s.matrix).into(),
                t.target.bit.index().to_string(),
                t.target.index.map(|i| i.to_string()).unwrap_or_default(),
                t.tensor.clone(),
                m.to_string(),
                a.mean.to_string(),
                a.std.to_string(),
                a.count.to_string(),
            ])?;
        }
    }
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

pub fn trials_csv(result: &CampaignResult) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "target", "trial", "seed", "tensor", "element", "bit", "original", "flipped", "non_finite", "prompt", "metric",
        "value",
    ])?;
    for t in &result.targets {
        for o in &t.trials {
            for (m, values) in &o.values {
                for (p, v) in values.iter().enumerate() {
                    w.write_record([
                        o.target.clone(),
                        o.trial.to_string(),
                        o.seed.to_string(),
                        o.record.tensor.clone(),
                        o.record.index.to_string(),
                        o.record.bit.index().to_string(),
                        format!("0x{:04X}", o.record.original.0),
                        format!("0x{:04X}", o.record.flipped.0),
                        o.non_finite.to_string(),
                        p.to_string(),
                        m.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

pub fn baseline_csv(result: &CampaignResult) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["prompt_index", "prompt", "metric", "value"])?;
    for (i, s) in result.baseline.iter().enumerate() {
        for (m, v) in &s.values {
            w.write_record([i.to_string(), s.prompt.clone(), m.to_string(), v.to_string()])?;
        }
    }
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Rows are blocks (`DB1`, `MB`, `UB2`), columns `SA-T1`, `CA-T1`, ...
    ByBlock,
    /// One row, columns `SA`, `CA`, `FC1`, `FC2`.
    ByLayer,
    /// One row, columns are flipped bits from 15 down to 0.
    ByBit,
}

impl FromStr for Grouping {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by-block" | "block" => Ok(Grouping::ByBlock),
            "by-layer" | "layer" => Ok(Grouping::ByLayer),
            "by-bit" | "bit" => Ok(Grouping::ByBit),
            other => Err(ReportError::UnknownGrouping(other.into())),
        }
    }
}

/// Block label: down blocks count from the input side, up blocks in
/// execution order (deepest first), so the first up block mirrors the last
/// down block.
pub fn block_label(block: BlockKind, level: usize, num_levels: usize) -> String {
    match block {
        BlockKind::Down => format!("DB{}", level + 1),
        BlockKind::Mid => "MB".into(),
        BlockKind::Up => format!("UB{}", num_levels - level),
    }
}

/// `SA`, `CA`, `FC1`, `FC2`.
pub fn layer_label(layer: LayerKind, matrix: MatrixRole) -> &'static str {
    match (layer, matrix) {
        (LayerKind::SelfAttention, _) => "SA",
        (LayerKind::CrossAttention, _) => "CA",
        (LayerKind::FeedForward, MatrixRole::Wf1) => "FC1",
        (LayerKind::FeedForward, _) => "FC2",
    }
}

fn layer_rank(label: &str) -> usize {
    ["SA", "CA", "FC1", "FC2"].iter().position(|l| *l == label).unwrap_or(4)
}

/// Tab-separated table with a blank corner cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub decimals: usize,
}

impl SummaryTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(label);
            for cell in cells {
                out.push('\t');
                match cell {
                    Some(v) => {
                        let _ = write!(out, "{v:.*}", self.decimals);
                    }
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn decimals_for(metric: Metric) -> usize {
    match metric {
        Metric::Clip | Metric::ComponentCount | Metric::MeanComponentArea => 2,
        Metric::Deviation | Metric::CorruptedFraction => 6,
    }
}

/// Means of `metric` grouped as the paper-style tables. Targets that land in
/// the same cell are pooled over all their trial values.
pub fn summary_table(result: &CampaignResult, grouping: Grouping, metric: Metric) -> Result<SummaryTable, ReportError> {
    let num_levels = result.config.model.num_levels();
    let mut cells: BTreeMap<(String, (usize, String)), Vec<(&Target, f64, usize)>> = BTreeMap::new();
    let mut row_order: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in &result.targets {
        let a = t.aggregates.get(&metric).ok_or(ReportError::MissingMetric(metric))?;
        let s = t.target.selector;
        let (row, col) = match grouping {
            Grouping::ByBlock => {
                let layer = layer_label(s.layer, s.matrix);
                (
                    block_label(s.block, s.level, num_levels),
                    ((s.transformer * 4 + layer_rank(layer)), format!("{layer}-T{}", s.transformer + 1)),
                )
            }
            Grouping::ByLayer => {
                let layer = layer_label(s.layer, s.matrix);
                (metric.label().to_string(), (layer_rank(layer), layer.to_string()))
            }
            Grouping::ByBit => {
                let b = t.target.bit.index() as usize;
                (metric.label().to_string(), (15 - b, b.to_string()))
            }
        };
        let rank = match (grouping, s.block) {
            (Grouping::ByBlock, BlockKind::Down) => (0, s.level),
            (Grouping::ByBlock, BlockKind::Mid) => (1, 0),
            (Grouping::ByBlock, BlockKind::Up) => (2, num_levels - s.level),
            _ => (0, 0),
        };
        row_order.insert(row.clone(), rank);
        cells.entry((row, col)).or_default().push((&t.target, a.mean, a.count));
    }
    let mut columns: Vec<(usize, String)> = cells.keys().map(|(_, c)| c.clone()).collect();
    columns.sort();
    columns.dedup();
    let mut rows: Vec<(String, (usize, usize))> = row_order.into_iter().collect();
    rows.sort_by_key(|(label, rank)| (*rank, label.clone()));
    let rows = rows
        .into_iter()
        .map(|(label, _)| {
            let values = columns
                .iter()
                .map(|c| {
                    cells.get(&(label.clone(), c.clone())).map(|entries| {
                        let n: usize = entries.iter().map(|e| e.2).sum();
                        entries.iter().map(|e| e.1 * e.2 as f64).sum::<f64>() / n.max(1) as f64
                    })
                })
                .collect();
            (label, values)
        })
        .collect();
    Ok(SummaryTable {
        columns: columns.into_iter().map(|(_, c)| c).collect(),
        rows,
        decimals: decimals_for(metric),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageSet {
    Baseline,
    Exemplars,
}

/// Writes PPM files: `baseline_p{i}.ppm`, or `{target id}_p{i}.ppm` for the
/// first trial of every target.
pub fn export_images(
    result: &CampaignResult,
    cache: Option<&ImageCache>,
    which: ImageSet,
    dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    let cache = cache.ok_or_else(|| ReportError::MissingCache("this result".into()))?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = Vec::new();
    match which {
        ImageSet::Baseline => {
            if cache.baseline.len() != result.baseline.len() {
                return Err(ReportError::MissingCache("baseline".into()));
            }
            for (i, img) in cache.baseline.iter().enumerate() {
                let path = dir.join(format!("baseline_p{i}.ppm"));
                write_file(&path, img.to_ppm())?;
                out.push(path);
            }
        }
        ImageSet::Exemplars => {
            for t in &result.targets {
                let imgs = cache
                    .exemplars
                    .get(&t.id)
                    .ok_or_else(|| ReportError::MissingCache(t.id.clone()))?;
                for (i, img) in imgs.iter().enumerate() {
                    let path = dir.join(format!("{}_p{i}.ppm", file_stem(&t.id)));
                    write_file(&path, img.to_ppm())?;
                    out.push(path);
                }
            }
        }
    }
    Ok(out)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// What is needed to re-run a result: the exact config and seed, plus
/// bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ReportError> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&path, text)?;
        Ok(path)
    }
}
