// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk artifacts: world JSON, training log and heatmap CSVs, covariance
//! and plan archives, and metric reports.
//!
//! Every artifact carries the crate version and the hash of the
//! configuration that produced it. None carries a timestamp, so re-running a
//! command with the same inputs rewrites identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use kedit_core::edit::{DiffEntry, EditMode, EditPlan, LayerEdit, TargetMode, TargetSummary};
use kedit_core::experiment::{EditRecord, Metrics, TraceSummary};
use kedit_core::hash::Fingerprint;
use kedit_core::kv::{Covariance, CovarianceConfig, Pathway};
use kedit_core::model::Site;
use kedit_core::trace::{TraceCell, TraceReport};
use kedit_core::train::LogEntry;
use kedit_core::world::{Counterfact, FactWorld};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::archive::{write_atomic, Archive, Tensor};
use crate::LabError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: &str) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            config_hash: config_hash.to_string(),
        }
    }
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LabError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T, LabError> {
    let bytes = read_artifact(path, what)?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::parse(path, e))
}

fn read_artifact(path: &Path, what: &'static str) -> Result<Vec<u8>, LabError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LabError::Missing {
            what,
            path: path.to_path_buf(),
        }),
        Err(e) => Err(LabError::io(path, e)),
    }
}

pub fn load_archive(path: &Path, what: &'static str) -> Result<Archive, LabError> {
    Archive::from_bytes(&read_artifact(path, what)?)
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    #[serde(flatten)]
    provenance: Provenance,
    world: FactWorld,
}

pub fn save_world(world: &FactWorld, provenance: &Provenance, path: &Path) -> Result<(), LabError> {
    write_json(
        path,
        &WorldFile {
            provenance: provenance.clone(),
            world: world.clone(),
        },
    )
}

pub fn load_world(path: &Path) -> Result<FactWorld, LabError> {
    Ok(read_json::<WorldFile>(path, "world")?.world)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

fn read_csv<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>, LabError> {
    let bytes = read_artifact(path, what)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| LabError::parse(path, e))
}

/// `step,loss,lr,recall`; recall is empty on steps where it was not measured.
pub fn write_train_log(entries: &[LogEntry], path: &Path) -> Result<(), LabError> {
    write_atomic(path, &csv_bytes(entries))
}

pub fn read_train_log(path: &Path) -> Result<Vec<LogEntry>, LabError> {
    read_csv(path, "training log")
}

/// One heatmap CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub site: String,
    pub layer: usize,
    pub position: usize,
    pub prob_effect: f64,
    pub ld_effect: f64,
}

impl From<&TraceCell> for HeatmapRow {
    fn from(c: &TraceCell) -> Self {
        Self {
            site: c.site.name().to_string(),
            layer: c.layer,
            position: c.position,
            prob_effect: c.prob_effect,
            ld_effect: c.ld_effect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub tokens: Vec<u32>,
    pub subject_positions: Vec<usize>,
    pub answer: u32,
    pub contrast: u32,
    pub noise_scale: f64,
    pub seed: u64,
    pub n_layers: usize,
    pub n_positions: usize,
    pub sites: Vec<String>,
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub ld_clean: f64,
    pub ld_corrupted: f64,
}

pub fn heatmap_rows(report: &TraceReport) -> Vec<HeatmapRow> {
    report.cells.iter().map(HeatmapRow::from).collect()
}

/// Writes `csv_path` and a JSON sidecar of reference values next to it.
pub fn export_heatmap(report: &TraceReport, provenance: &Provenance, csv_path: &Path) -> Result<(), LabError> {
    write_atomic(csv_path, &csv_bytes(&heatmap_rows(report)))?;
    let q = &report.query;
    let sidecar = HeatmapSidecar {
        provenance: provenance.clone(),
        tokens: q.tokens.clone(),
        subject_positions: q.subject_positions.clone(),
        answer: q.answer,
        contrast: report.contrast,
        noise_scale: q.noise_scale,
        seed: q.seed,
        n_layers: report.n_layers,
        n_positions: report.n_positions,
        sites: q.sites.iter().map(|s| s.name().to_string()).collect(),
        p_clean: report.p_clean,
        p_corrupted: report.p_corrupted,
        ld_clean: report.ld_clean,
        ld_corrupted: report.ld_corrupted,
    };
    write_json(&sidecar_path(csv_path), &sidecar)
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn read_heatmap(csv_path: &Path) -> Result<Vec<HeatmapRow>, LabError> {
    let rows: Vec<HeatmapRow> = read_csv(csv_path, "heatmap")?;
    if let Some(r) = rows.iter().find(|r| Site::from_name(&r.site).is_none()) {
        return Err(LabError::parse(csv_path, format!("unknown site {:?}", r.site)));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummaryFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub checkpoint_hash: String,
    pub localization_ratio: f64,
    pub summary: TraceSummary,
}

/// Cache key of a preserved-key statistic.
pub fn covariance_key(checkpoint_hash: &str, pathway: Pathway, layer: usize, cfg: &CovarianceConfig) -> String {
    let mut f = Fingerprint::new();
    f.bytes(checkpoint_hash.as_bytes())
        .bytes(pathway.name().as_bytes())
        .bytes(&(layer as u64).to_le_bytes())
        .bytes(&cfg.seed.to_le_bytes())
        .bytes(&(cfg.n_samples as u64).to_le_bytes())
        .bytes(&(cfg.max_prefix_len as u64).to_le_bytes());
    f.hex()
}

pub fn covariance_path(dir: &Path, key: &str, pathway: Pathway, layer: usize) -> PathBuf {
    dir.join(format!("{}_{layer}_{}.kedit", pathway.name(), &key[..16]))
}

#[derive(Serialize, Deserialize)]
struct CovarianceMeta {
    key: String,
    pathway: Pathway,
    layer: usize,
    sample_count: usize,
    version: String,
}

pub fn save_covariance(cov: &Covariance, key: &str, path: &Path) -> Result<(), LabError> {
    let meta = CovarianceMeta {
        key: key.to_string(),
        pathway: cov.pathway,
        layer: cov.layer,
        sample_count: cov.sample_count,
        version: crate::VERSION.to_string(),
    };
    let mut a = Archive::new("covariance", serde_json::to_value(meta).expect("meta serializes"));
    a.push("c0", Tensor::F64(cov.c0.clone()));
    a.save(path)
}

/// The cached statistic at `path`, or `None` if absent or made for another key.
pub fn load_covariance(key: &str, path: &Path) -> Result<Option<Covariance>, LabError> {
    if !path.exists() {
        return Ok(None);
    }
    let a = Archive::load(path)?;
    let meta: CovarianceMeta = serde_json::from_value(a.meta.clone()).map_err(|e| LabError::parse(path, e))?;
    if a.kind != "covariance" || meta.key != key {
        return Ok(None);
    }
    Ok(Some(Covariance {
        pathway: meta.pathway,
        layer: meta.layer,
        c0: a.f64("c0")?.clone(),
        sample_count: meta.sample_count,
    }))
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    pathway: Pathway,
    layer: usize,
    scale: f64,
    rank_deficient: bool,
    normal_residual: f64,
    covariance_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    #[serde(flatten)]
    provenance: Provenance,
    base_hash: String,
    mode: EditMode,
    alpha: f64,
    s_mlp: Vec<usize>,
    s_attn: Vec<usize>,
    edits: Vec<Counterfact>,
    targets: Vec<TargetSummary>,
    layers: Vec<LayerHeader>,
}

/// Plan matrices go to the payload as `{i}.keys`, `{i}.residual` and
/// `{i}.delta`; everything else to the JSON header.
pub fn plan_archive(plan: &EditPlan, provenance: &Provenance) -> Archive {
    let header = PlanHeader {
        provenance: provenance.clone(),
        base_hash: plan.base_hash.clone(),
        mode: plan.mode,
        alpha: plan.alpha,
        s_mlp: plan.s_mlp.clone(),
        s_attn: plan.s_attn.clone(),
        edits: plan.edits.clone(),
        targets: plan.targets.clone(),
        layers: plan
            .layers
            .iter()
            .map(|l| LayerHeader {
                pathway: l.pathway,
                layer: l.layer,
                scale: l.scale,
                rank_deficient: l.rank_deficient,
                normal_residual: l.normal_residual,
                covariance_hash: l.covariance_hash.clone(),
            })
            .collect(),
    };
    let mut a = Archive::new("plan", serde_json::to_value(header).expect("plan header serializes"));
    for (i, l) in plan.layers.iter().enumerate() {
        a.push(format!("{i}.keys"), Tensor::F64(l.keys.clone()));
        a.push(format!("{i}.residual"), Tensor::F64(l.residual.clone()));
        a.push(format!("{i}.delta"), Tensor::F64(l.delta.clone()));
    }
    a
}

pub fn plan_from_archive(a: &Archive) -> Result<EditPlan, LabError> {
    if a.kind != "plan" {
        return Err(LabError::Format(format!("expected a plan, found {}", a.kind)));
    }
    let h: PlanHeader =
        serde_json::from_value(a.meta.clone()).map_err(|e| LabError::Format(format!("plan header: {e}")))?;
    let layers = h
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(LayerEdit {
                pathway: l.pathway,
                layer: l.layer,
                keys: a.f64(&format!("{i}.keys"))?.clone(),
                residual: a.f64(&format!("{i}.residual"))?.clone(),
                delta: a.f64(&format!("{i}.delta"))?.clone(),
                scale: l.scale,
                rank_deficient: l.rank_deficient,
                normal_residual: l.normal_residual,
                covariance_hash: l.covariance_hash,
            })
        })
        .collect::<Result<_, LabError>>()?;
    Ok(EditPlan {
        base_hash: h.base_hash,
        mode: h.mode,
        alpha: h.alpha,
        s_mlp: h.s_mlp,
        s_attn: h.s_attn,
        edits: h.edits,
        targets: h.targets,
        layers,
    })
}

pub fn save_plan(plan: &EditPlan, provenance: &Provenance, path: &Path) -> Result<(), LabError> {
    plan_archive(plan, provenance).save(path)
}

pub fn load_plan(path: &Path) -> Result<EditPlan, LabError> {
    plan_from_archive(&load_archive(path, "edit plan")?)
}

/// Where a cell's balance factor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    /// Measured by tracing.
    Auto,
    Config,
    /// Overridden on the command line.
    Flag,
    /// A point of a sweep grid.
    Sweep,
}

/// Everything needed to re-run one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub mode: EditMode,
    pub target: TargetMode,
    pub t: usize,
    pub seed: u64,
    pub alpha: f64,
    pub alpha_source: AlphaSource,
    pub s_mlp: Vec<usize>,
    pub s_attn: Vec<usize>,
}

impl CellSpec {
    /// Directory-safe identifier.
    pub fn id(&self) -> String {
        let target = match self.target {
            TargetMode::Counterfact => "cf",
            TargetMode::Identity => "id",
        };
        format!(
            "{}_{target}_t{}_s{}_a{:.4}",
            self.mode.name(),
            self.t,
            self.seed,
            self.alpha
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub cell: CellSpec,
    pub checkpoint_hash: String,
    pub edited_hash: String,
    pub trace_seed: u64,
    pub covariance_seed: u64,
    pub context_seed: u64,
    pub metrics: Metrics,
    pub records: Vec<EditRecord>,
    pub targets: Vec<TargetSummary>,
    pub diff: Vec<DiffEntry>,
    pub max_normal_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub mode: String,
    pub target: String,
    pub alpha: f64,
    pub alpha_source: String,
    pub t: usize,
    pub seed: u64,
    pub edit_success: Option<f64>,
    pub portability: Option<f64>,
    pub locality: Option<f64>,
    pub fluency: Option<f64>,
    /// Empty unless the cell failed.
    pub error: String,
}

impl SummaryRow {
    pub fn failed(cell: &CellSpec, error: &str) -> Self {
        Self {
            cell: cell.id(),
            mode: cell.mode.name().to_string(),
            target: target_name(cell.target).to_string(),
            alpha: cell.alpha,
            alpha_source: source_name(cell.alpha_source).to_string(),
            t: cell.t,
            seed: cell.seed,
            edit_success: None,
            portability: None,
            locality: None,
            fluency: None,
            error: error.to_string(),
        }
    }
}

fn target_name(t: TargetMode) -> &'static str {
    match t {
        TargetMode::Counterfact => "counterfact",
        TargetMode::Identity => "identity",
    }
}

fn source_name(s: AlphaSource) -> &'static str {
    match s {
        AlphaSource::Auto => "auto",
        AlphaSource::Config => "config",
        AlphaSource::Flag => "flag",
        AlphaSource::Sweep => "sweep",
    }
}

impl From<&MetricsReport> for SummaryRow {
    fn from(r: &MetricsReport) -> Self {
        let c = &r.cell;
        Self {
            cell: c.id(),
            mode: c.mode.name().to_string(),
            target: target_name(c.target).to_string(),
            alpha: c.alpha,
            alpha_source: source_name(c.alpha_source).to_string(),
            t: c.t,
            seed: c.seed,
            edit_success: Some(r.metrics.edit_success),
            portability: r.metrics.portability,
            locality: Some(r.metrics.locality),
            fluency: Some(r.metrics.fluency),
            error: String::new(),
        }
    }
}

/// One row per cell: mode, α, T and the four metrics.
pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<(), LabError> {
    write_atomic(path, &csv_bytes(rows))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, LabError> {
    read_csv(path, "sweep summary")
}
