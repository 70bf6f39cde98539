// SPDX-License-Identifier: MIT OR Apache-2.0

//! The experiment stages and their artifact layout.
//!
//! ```text
//! <out_dir>/
//!   world.json
//!   checkpoint.kedit  train_log.csv  train.json
//!   trace/summary.json  trace/probe_NNN.csv  trace/probe_NNN.json
//!   cache/<pathway>_<layer>_<key>.kedit
//!   cells/<cell>/cell.json  plan.kedit  edited.kedit  report.json
//!   sweep/<cell>.json  sweep/summary.csv
//! ```
//!
//! Each stage reads the artifacts of the stages before it and fails with the
//! expected path when one is missing.

use std::path::{Path, PathBuf};

use kedit_core::edit::{self, EditMode, EditPlan, EditRequest, TargetMode};
use kedit_core::experiment::{self, CellOutcome, ExperimentError, TraceSummary};
use kedit_core::hash::params_hash;
use kedit_core::kv::{self, Covariance, Pathway};
use kedit_core::model::ModelParams;
use kedit_core::train;
use kedit_core::world::{build_world, FactWorld};
use serde::{Deserialize, Serialize};

use crate::archive::{load_checkpoint, save_checkpoint};
use crate::artifacts::{self, AlphaSource, CellSpec, MetricsReport, Provenance, SummaryRow, TraceSummaryFile};
use crate::config::{AlphaSetting, ExperimentConfig};
use crate::LabError;

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.kedit")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.root.join("train.json")
    }

    pub fn trace_summary(&self) -> PathBuf {
        self.root.join("trace").join("summary.json")
    }

    pub fn heatmap(&self, probe: usize) -> PathBuf {
        self.root.join("trace").join(format!("probe_{probe:03}.csv"))
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn cell(&self, id: &str) -> PathBuf {
        self.root.join("cells").join(id)
    }

    pub fn sweep_report(&self, id: &str) -> PathBuf {
        self.root.join("sweep").join(format!("{id}.json"))
    }

    pub fn sweep_summary(&self) -> PathBuf {
        self.root.join("sweep").join("summary.csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub steps: usize,
    pub final_recall: f64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub summary: TraceSummary,
    pub localization_ratio: f64,
    pub warnings: Vec<String>,
}

/// Per-command overrides of the `[edit]` section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditOverrides {
    pub mode: Option<EditMode>,
    pub alpha: Option<AlphaSetting>,
    pub t: Option<usize>,
    pub target: Option<TargetMode>,
    pub seed: Option<u64>,
}

/// A loaded configuration plus its hash and layout.
pub struct Lab {
    pub config: ExperimentConfig,
    pub hash: String,
    pub layout: Layout,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self, LabError> {
        config.validate()?;
        let hash = config.hash();
        let layout = Layout::new(config.paths.out_dir.clone());
        Ok(Self { config, hash, layout })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(&self.hash)
    }

    pub fn build_world(&self) -> Result<FactWorld, LabError> {
        let world = build_world(&self.config.world)?;
        artifacts::save_world(&world, &self.provenance(), &self.layout.world())?;
        Ok(world)
    }

    pub fn load_world(&self) -> Result<FactWorld, LabError> {
        artifacts::load_world(&self.layout.world())
    }

    pub fn load_checkpoint(&self) -> Result<ModelParams, LabError> {
        let path = self.layout.checkpoint();
        if !path.exists() {
            return Err(LabError::Missing {
                what: "checkpoint",
                path,
            });
        }
        load_checkpoint(&path)
    }

    pub fn train(&self) -> Result<TrainSummary, LabError> {
        let world = self.load_world()?;
        let mut params = ModelParams::init(&self.config.model)?;
        let log = train::train(&mut params, &world, &self.config.train)?;
        save_checkpoint(&params, &self.layout.checkpoint(), Some(&self.hash))?;
        artifacts::write_train_log(&log.entries, &self.layout.train_log())?;
        let summary = TrainSummary {
            provenance: self.provenance(),
            steps: self.config.train.steps,
            final_recall: log.final_recall,
            checkpoint_hash: params_hash(&params),
        };
        artifacts::write_json(&self.layout.train_summary(), &summary)?;
        Ok(summary)
    }

    pub fn trace(&self) -> Result<TraceOutcome, LabError> {
        let world = self.load_world()?;
        let params = self.load_checkpoint()?;
        let (reports, summary) = experiment::trace_probes(&params, &world, &self.config.trace)?;
        let prov = self.provenance();
        for (i, r) in reports.iter().enumerate() {
            artifacts::export_heatmap(r, &prov, &self.layout.heatmap(i))?;
        }
        let ratio = summary.localization_ratio();
        let mut warnings = Vec::new();
        let chance = 1.0 / world.config.n_objects as f64;
        if summary.mean_p_clean < 2.0 * chance {
            warnings.push(format!(
                "clean-run P(answer) is {:.4}, near chance ({chance:.4}); is the checkpoint trained?",
                summary.mean_p_clean
            ));
        }
        if summary.alpha.is_none() {
            warnings.push("no positive causal effect in either window; alpha cannot be derived".into());
        }
        artifacts::write_json(
            &self.layout.trace_summary(),
            &TraceSummaryFile {
                provenance: prov,
                checkpoint_hash: params_hash(&params),
                localization_ratio: ratio,
                summary: summary.clone(),
            },
        )?;
        Ok(TraceOutcome {
            summary,
            localization_ratio: ratio,
            warnings,
        })
    }

    /// The traced summary of `params`, or `None` when tracing is disabled.
    pub fn load_trace(&self, params: &ModelParams) -> Result<Option<TraceSummary>, LabError> {
        if !self.config.stages.trace {
            return Ok(None);
        }
        let path = self.layout.trace_summary();
        let f: TraceSummaryFile = artifacts::read_json(&path, "trace summary")?;
        if f.checkpoint_hash != params_hash(params) {
            return Err(LabError::parse(
                &path,
                "traced a different checkpoint; run `kedit trace` again",
            ));
        }
        Ok(Some(f.summary))
    }

    /// MLP and attention windows of `mode`.
    pub fn windows(&self, mode: EditMode, trace: Option<&TraceSummary>) -> Result<(Vec<usize>, Vec<usize>), LabError> {
        match trace {
            Some(s) => Ok(experiment::edit_windows(mode, s)),
            None => {
                let t = &self.config.trace;
                let (m, a) = (
                    t.s_mlp.clone().unwrap_or_default(),
                    t.s_attn.clone().unwrap_or_default(),
                );
                if mode == EditMode::SingleLayer && m.len() != 1 {
                    return Err(LabError::Config(
                        "single mode without tracing needs trace.s_mlp to name one layer".into(),
                    ));
                }
                Ok((m, a))
            }
        }
    }

    /// Resolves mode, α and windows for the configured cell.
    pub fn cell_spec(&self, o: &EditOverrides, trace: Option<&TraceSummary>) -> Result<CellSpec, LabError> {
        let e = &self.config.edit;
        let mode = o.mode.unwrap_or(e.mode);
        let (alpha, alpha_source) = match mode {
            EditMode::Dual => {
                let (setting, from_flag) = match o.alpha {
                    Some(a) => (a, true),
                    None => (e.alpha, false),
                };
                match setting {
                    AlphaSetting::Fixed(a) => (
                        a,
                        if from_flag {
                            AlphaSource::Flag
                        } else {
                            AlphaSource::Config
                        },
                    ),
                    AlphaSetting::Auto => {
                        let a = trace.and_then(|s| s.alpha).ok_or_else(|| {
                            LabError::Config("alpha is \"auto\" but tracing measured no balance factor".into())
                        })?;
                        (a, AlphaSource::Auto)
                    }
                }
            }
            EditMode::AttnOnly => (1.0, AlphaSource::Config),
            EditMode::MlpOnly | EditMode::SingleLayer => (0.0, AlphaSource::Config),
        };
        let (s_mlp, s_attn) = self.windows(mode, trace)?;
        Ok(CellSpec {
            mode,
            target: o.target.unwrap_or(e.target),
            t: o.t.unwrap_or(e.t),
            seed: o.seed.unwrap_or(e.seed),
            alpha,
            alpha_source,
            s_mlp,
            s_attn,
        })
    }

    /// Preserved-key statistics for the given layers, through the cache.
    pub fn covariances(
        &self,
        params: &ModelParams,
        world: &FactWorld,
        mlp_layers: &[usize],
        attn_layers: &[usize],
    ) -> Result<Vec<Covariance>, LabError> {
        let cfg = &self.config.covariance;
        let ckpt = params_hash(params);
        let mut out = Vec::new();
        let mut prompts = None;
        for (pathway, layers) in [(Pathway::Mlp, mlp_layers), (Pathway::Attn, attn_layers)] {
            let mut layers = layers.to_vec();
            layers.sort_unstable();
            layers.dedup();
            for layer in layers {
                let key = artifacts::covariance_key(&ckpt, pathway, layer, cfg);
                let path = artifacts::covariance_path(&self.layout.cache(), &key, pathway, layer);
                if let Some(c) = artifacts::load_covariance(&key, &path)? {
                    out.push(c);
                    continue;
                }
                if prompts.is_none() {
                    prompts = Some(kv::covariance_prompts(world, cfg).map_err(ExperimentError::from)?);
                }
                let prompts = prompts.as_ref().expect("just filled");
                let mut c =
                    kv::covariance_from_prompts(params, prompts, pathway, &[layer]).map_err(ExperimentError::from)?;
                let c = c.pop().expect("one layer requested");
                artifacts::save_covariance(&c, &key, &path)?;
                out.push(c);
            }
        }
        Ok(out)
    }

    fn request(&self, world: &FactWorld, spec: &CellSpec) -> Result<EditRequest, LabError> {
        Ok(EditRequest {
            edits: experiment::cell_edits(world, spec.t, spec.seed, spec.target)?,
            mode: spec.mode,
            alpha: spec.alpha,
            s_mlp: spec.s_mlp.clone(),
            s_attn: spec.s_attn.clone(),
            target: spec.target,
        })
    }

    fn report(&self, spec: &CellSpec, outcome: &CellOutcome) -> MetricsReport {
        MetricsReport {
            provenance: self.provenance(),
            cell: spec.clone(),
            checkpoint_hash: outcome.plan.base_hash.clone(),
            edited_hash: params_hash(&outcome.edited),
            trace_seed: self.config.trace.seed,
            covariance_seed: self.config.covariance.seed,
            context_seed: self.config.edit.plan.context_seed,
            metrics: outcome.metrics.clone(),
            records: outcome.records.clone(),
            targets: outcome.plan.targets.clone(),
            diff: outcome.diff.clone(),
            max_normal_residual: outcome
                .plan
                .layers
                .iter()
                .map(|l| l.normal_residual)
                .fold(0.0, f64::max),
        }
    }

    /// Plans, applies and evaluates one cell, writing its plan, edited
    /// checkpoint and report.
    pub fn edit(&self, overrides: &EditOverrides) -> Result<(MetricsReport, EditPlan), LabError> {
        let world = self.load_world()?;
        let params = self.load_checkpoint()?;
        let trace = self.load_trace(&params)?;
        let spec = self.cell_spec(overrides, trace.as_ref())?;
        let covs = self.covariances(&params, &world, &spec.s_mlp, &spec.s_attn)?;
        let request = self.request(&world, &spec)?;
        let outcome = experiment::run_cell(
            &params,
            &world,
            &request,
            &covs,
            &self.config.edit.plan,
            &self.config.eval,
        )?;
        let dir = self.layout.cell(&spec.id());
        let prov = self.provenance();
        artifacts::write_json(&dir.join("cell.json"), &spec)?;
        artifacts::save_plan(&outcome.plan, &prov, &dir.join("plan.kedit"))?;
        save_checkpoint(&outcome.edited, &dir.join("edited.kedit"), Some(&self.hash))?;
        let report = self.report(&spec, &outcome);
        artifacts::write_json(&dir.join("report.json"), &report)?;
        Ok((report, outcome.plan))
    }

    /// Re-applies a saved plan and recomputes its report.
    pub fn eval(&self, cell: &Path) -> Result<MetricsReport, LabError> {
        let world = self.load_world()?;
        let params = self.load_checkpoint()?;
        let spec: CellSpec = artifacts::read_json(&cell.join("cell.json"), "cell spec")?;
        let plan = artifacts::load_plan(&cell.join("plan.kedit"))?;
        let outcome = experiment::evaluate_plan(&params, &world, plan, &self.config.eval)?;
        let report = self.report(&spec, &outcome);
        artifacts::write_json(&cell.join("report.json"), &report)?;
        Ok(report)
    }

    /// Runs the grid `modes × alphas × ts`. Dual cells share one plan per
    /// batch size and differ only in scales; with the identity control every
    /// dual cell is repeated with identity targets. A failing cell is recorded
    /// in the summary and the grid continues.
    pub fn sweep(&self, modes: &[EditMode], alphas: &[f64], ts: &[usize]) -> Result<Vec<SummaryRow>, LabError> {
        let world = self.load_world()?;
        let params = self.load_checkpoint()?;
        let trace = self.load_trace(&params)?;
        let seed = self.config.edit.seed;
        let mut targets = vec![TargetMode::Counterfact];
        if self.config.sweep.identity_control {
            targets.push(TargetMode::Identity);
        }

        let mut mlp_layers = Vec::new();
        let mut attn_layers = Vec::new();
        for &m in modes {
            let (a, b) = self.windows(m, trace.as_ref())?;
            mlp_layers.extend(a);
            attn_layers.extend(b);
        }
        let covs = self.covariances(&params, &world, &mlp_layers, &attn_layers)?;

        let mut rows = Vec::new();
        for &t in ts {
            for &mode in modes {
                let cell_targets: &[TargetMode] = if mode == EditMode::Dual {
                    &targets
                } else {
                    &targets[..1]
                };
                for &target in cell_targets {
                    let base = CellSpec {
                        target,
                        t,
                        seed,
                        ..self.cell_spec(
                            &EditOverrides {
                                mode: Some(mode),
                                alpha: Some(AlphaSetting::Fixed(0.0)),
                                ..Default::default()
                            },
                            trace.as_ref(),
                        )?
                    };
                    let points: Vec<CellSpec> = if mode == EditMode::Dual {
                        alphas
                            .iter()
                            .map(|&alpha| CellSpec {
                                alpha,
                                alpha_source: AlphaSource::Sweep,
                                ..base.clone()
                            })
                            .collect()
                    } else {
                        vec![base.clone()]
                    };
                    let plan = self.request(&world, &base).and_then(|r| {
                        edit::plan_edit(&params, &world, &r, &covs, &self.config.edit.plan)
                            .map_err(|e| ExperimentError::from(e).into())
                    });
                    for spec in points {
                        let result = match &plan {
                            Ok(p) => self.sweep_cell(&params, &world, p, &spec),
                            Err(e) => Err(e.to_string()),
                        };
                        rows.push(match result {
                            Ok(r) => SummaryRow::from(&r),
                            Err(e) => SummaryRow::failed(&spec, &e),
                        });
                    }
                }
            }
        }
        artifacts::write_summary(&rows, &self.layout.sweep_summary())?;
        Ok(rows)
    }

    fn sweep_cell(
        &self,
        params: &ModelParams,
        world: &FactWorld,
        plan: &EditPlan,
        spec: &CellSpec,
    ) -> Result<MetricsReport, String> {
        let run = || -> Result<MetricsReport, LabError> {
            let plan = if spec.mode == EditMode::Dual {
                plan.with_alpha(spec.alpha).map_err(ExperimentError::from)?
            } else {
                plan.clone()
            };
            let outcome = experiment::evaluate_plan(params, world, plan, &self.config.eval)?;
            let report = self.report(spec, &outcome);
            artifacts::write_json(&self.layout.sweep_report(&spec.id()), &report)?;
            Ok(report)
        };
        run().map_err(|e| e.to_string())
    }
}
