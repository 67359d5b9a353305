//! Train-and-select distillation.
//!
//! Cycle 0 trains (or loads) a core-free Matryoshka model and selects an
//! initial core from its smallest prefix. Every later cycle copies the
//! selected encoder rows into slots `0..c` of a fresh model, freezes them,
//! retrains everything else from scratch, and reselects over `[0, c + m_0)`.
//! The distilled core is the part of the last selection that was already in
//! the previous core.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attribution::{
    select_core_by_attribution, select_core_cycle0, AttributionConfig, AttributionScores,
    CoreSelection,
};
use crate::data::PreparedData;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::report::{self, read_json, write_json, write_text};
use crate::sae::{
    read_core_rows, write_core_rows, AdamConfig, Checkpoint, InitScheme, LossConfig,
    MatryoshkaConfig, SaeParams, SparsityPolicy, TrainConfig, TrainState, TrainingLog,
};
use crate::transfer::k_noncore;

pub const CYCLE_DIR_PREFIX: &str = "cycle_";
pub const RUN_CONFIG_FILE: &str = "run.json";
pub const LINEAGE_FILE: &str = "lineage.json";
pub const DISTILLED_CORE_FILE: &str = "distilled_core.json";
pub const CORE_SIDECAR_FILE: &str = "core.bin";

/// Purposes for [`derive_seed`] within one cycle.
pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const ATTRIBUTION_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationConfig {
    /// Total dictionary width K.
    pub width: usize,
    pub cycles: usize,
    /// Sparsity target k.
    pub k: usize,
    /// Cumulative non-core prefix ends below the full non-core width; the
    /// first one is m_0.
    pub prefix_boundaries: Vec<usize>,
    pub tokens_per_cycle: u64,
    /// Token budget of the core-free cycle-0 model; defaults to
    /// `tokens_per_cycle`.
    pub cycle0_tokens: Option<u64>,
    pub batch_size: usize,
    /// Cycle `t` uses seed `seed + t`.
    pub seed: u64,
    /// Scale the non-core target as the core grows instead of using k as is.
    pub scale_noncore_target: bool,
    pub attribution: AttributionConfig,
    pub init: InitScheme,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub normalize_decoder: bool,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            width: 512,
            cycles: 3,
            k: 16,
            prefix_boundaries: vec![32, 64, 128, 256],
            tokens_per_cycle: 256_000,
            cycle0_tokens: None,
            batch_size: 256,
            seed: 0,
            scale_noncore_target: false,
            attribution: AttributionConfig::default(),
            init: InitScheme::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            normalize_decoder: true,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.width < 2 {
            return Err(Error::Config("width must be at least 2".into()));
        }
        self.attribution.validate()
    }

    pub fn cycle_seed(&self, cycle: usize) -> u64 {
        self.seed.wrapping_add(cycle as u64)
    }

    pub fn cycle_tokens(&self, cycle: usize) -> u64 {
        match (cycle, self.cycle0_tokens) {
            (0, Some(t)) => t,
            _ => self.tokens_per_cycle,
        }
    }

    pub fn matryoshka(&self, core_size: usize) -> Result<MatryoshkaConfig> {
        if core_size >= self.width {
            return Err(Error::Driver(format!(
                "core of {core_size} leaves no non-core latents in width {}",
                self.width
            )));
        }
        MatryoshkaConfig::for_width(self.width - core_size, &self.prefix_boundaries)
    }

    /// Non-core BatchTopK target for a cycle whose core has `core_size` rows.
    pub fn noncore_target(&self, core_size: usize) -> usize {
        if self.scale_noncore_target {
            k_noncore(self.k, self.width, core_size)
        } else {
            self.k
        }
    }

    pub fn train_config(&self, core_size: usize) -> Result<TrainConfig> {
        Ok(TrainConfig {
            matryoshka: self.matryoshka(core_size)?,
            loss: self.loss,
            adam: self.adam,
            normalize_decoder: self.normalize_decoder,
        })
    }
}

/// Fresh model for the next cycle: the selected encoder rows, in selection
/// order, become frozen slots `0..c`; all other parameters are redrawn from
/// `seed`.
pub fn restart_init(
    prev: &SaeParams,
    selection: &CoreSelection,
    width: usize,
    scheme: &InitScheme,
    seed: u64,
) -> Result<SaeParams> {
    if selection.is_empty() {
        return Err(Error::Driver("empty core".into()));
    }
    let indices = selection.indices();
    if let Some(bad) = indices.iter().find(|&&j| j >= prev.width()) {
        return Err(Error::Driver(format!(
            "selected latent {bad} outside width {}",
            prev.width()
        )));
    }
    let rows = prev.enc_weights.select(Axis(0), &indices);
    SaeParams::with_core(rows.view(), width, scheme, seed)
}

/// Identity of one selected feature across cycles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub id: u64,
    pub first_selected_cycle: usize,
    /// Latent index at each cycle where the feature was selected.
    pub slots: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageRegistry {
    pub entries: Vec<LineageEntry>,
}

impl LineageRegistry {
    /// Labels `selection` in place. `core_ids[i]` is the lineage held by core
    /// slot `i` of the model that produced it; any other index is a newly
    /// learned latent and gets a fresh ID.
    pub fn assign(&mut self, selection: &mut CoreSelection, core_ids: &[u64]) -> Result<()> {
        let cycle = selection.cycle;
        for latent in &mut selection.latents {
            let id = match core_ids.get(latent.index) {
                Some(&id) => id,
                None => {
                    let id = self.entries.len() as u64;
                    self.entries.push(LineageEntry {
                        id,
                        first_selected_cycle: cycle,
                        slots: Vec::new(),
                    });
                    id
                }
            };
            let entry = self
                .entries
                .get_mut(id as usize)
                .ok_or_else(|| Error::Driver(format!("unknown lineage id {id}")))?;
            if cycle > entry.first_selected_cycle
                && entry.slots.get(cycle - 1).copied().flatten().is_none()
            {
                return Err(Error::Driver(format!(
                    "lineage {id} was not selected in cycle {} but occupies a core slot in cycle {cycle}",
                    cycle - 1
                )));
            }
            if entry.slots.len() <= cycle {
                entry.slots.resize(cycle + 1, None);
            }
            entry.slots[cycle] = Some(latent.index);
            latent.lineage_id = Some(id);
        }
        Ok(())
    }

    pub fn first_selected(&self, id: u64) -> Option<usize> {
        self.entries
            .get(id as usize)
            .map(|e| e.first_selected_cycle)
    }

    /// `(origin_cycle, count)` over a labelled selection, origins ascending.
    pub fn origin_histogram(&self, selection: &CoreSelection) -> Result<Vec<(usize, usize)>> {
        let mut counts = std::collections::BTreeMap::new();
        for latent in &selection.latents {
            let id = latent.lineage_id.ok_or_else(|| {
                Error::Driver(format!(
                    "latent {} of cycle {} has no lineage",
                    latent.index, selection.cycle
                ))
            })?;
            let origin = self
                .first_selected(id)
                .ok_or_else(|| Error::Driver(format!("unknown lineage id {id}")))?;
            *counts.entry(origin).or_insert(0) += 1;
        }
        Ok(counts.into_iter().collect())
    }
}

/// Lineage IDs of the last selection's members that sit in the previous
/// core's slots, in selection order.
pub fn distilled_core(last: &CoreSelection, prev_core_size: usize) -> Vec<u64> {
    let ids: Vec<u64> = last
        .latents
        .iter()
        .filter(|l| l.index < prev_core_size)
        .filter_map(|l| l.lineage_id)
        .collect();
    if ids.is_empty() {
        log::warn!(
            "cycle {} reselected none of the previous {prev_core_size} core latents; distilled core is empty",
            last.cycle
        );
    }
    ids
}

/// Distilled core with its encoder rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistilledCore {
    pub cycle: usize,
    pub lineage_ids: Vec<u64>,
    /// Row index of each member in the final cycle's model.
    pub cycle_indices: Vec<usize>,
    pub dim: usize,
    /// Sidecar file holding the rows, relative to the run directory.
    pub rows_file: String,
    #[serde(skip)]
    pub rows: Array2<f64>,
}

impl DistilledCore {
    pub fn len(&self) -> usize {
        self.lineage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lineage_ids.is_empty()
    }

    /// Reads `distilled_core.json` and its sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut core: DistilledCore = read_json(path)?;
        let sidecar = path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&core.rows_file);
        core.rows = read_core_rows(&sidecar)?;
        if core.rows.nrows() != core.lineage_ids.len() || core.rows.ncols() != core.dim {
            return Err(Error::Contract(format!(
                "{} holds {:?} rows but the description lists {} of dimension {}",
                sidecar.display(),
                core.rows.dim(),
                core.lineage_ids.len(),
                core.dim
            )));
        }
        Ok(core)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginCount {
    pub origin_cycle: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    /// Frozen core rows during this cycle's training.
    pub core_size: usize,
    pub noncore_target: usize,
    pub steps: usize,
    pub tokens: u64,
    pub selected: usize,
    pub origin_histogram: Vec<OriginCount>,
    /// Selected latents first chosen in an earlier cycle.
    pub carried_over: usize,
    pub loss_first: Option<f64>,
    pub loss_final: Option<f64>,
    pub l0_core_final: Option<f64>,
    pub l0_noncore_final: Option<f64>,
    pub eval_threshold: Option<f64>,
    pub achieved_coverage: f64,
    pub total_attribution: f64,
    pub zero_norm_latents: Vec<usize>,
}

/// Steps averaged for the `*_final` report fields.
const FINAL_WINDOW: usize = 100;

fn summarize(series: &[f64]) -> Option<f64> {
    (!series.is_empty()).then(|| TrainingLog::tail_mean(series, FINAL_WINDOW))
}

/// Trained state, selection, and training log of one cycle.
#[derive(Clone, Debug)]
pub struct CycleOutput {
    pub state: TrainState,
    pub selection: CoreSelection,
    pub log: TrainingLog,
    pub scores: AttributionScores,
}

/// Trains `params` for the cycle's token budget with a dense core, then
/// reselects over `[0, c + m_0)` using the trained masking rule.
pub fn run_cycle(
    params: SaeParams,
    cycle: usize,
    data: &PreparedData,
    config: &DistillationConfig,
) -> Result<CycleOutput> {
    let c = params.core_size();
    let seed = config.cycle_seed(cycle);
    let train = config.train_config(c)?;
    let first_prefix = train.matryoshka.first();
    let policy = SparsityPolicy::dense_core(config.noncore_target(c));
    let mut state = TrainState::new(params, train, policy)?;
    let log = state
        .train_tokens(
            data.train_activations.view(),
            config.batch_size,
            config.cycle_tokens(cycle),
            derive_seed(seed, SHUFFLE_STREAM),
        )
        .map_err(|e| Error::Driver(format!("cycle {cycle} aborted: {e}")))?;

    let (acts, grads) = data.attribution_split(config.attribution.held_out)?;
    let attribution = AttributionConfig {
        seed: derive_seed(seed, ATTRIBUTION_STREAM),
        ..config.attribution.clone()
    };
    let (selection, scores) = if c == 0 {
        select_core_cycle0(
            &state.params,
            first_prefix,
            acts.view(),
            grads.view(),
            state.policy.target,
            &attribution,
        )?
    } else {
        select_core_by_attribution(
            &state.params,
            first_prefix,
            acts.view(),
            grads.view(),
            &state.policy,
            &attribution,
            cycle,
        )?
    };
    Ok(CycleOutput {
        state,
        selection: CoreSelection { cycle, ..selection },
        log,
        scores,
    })
}

/// Everything a distillation run produced.
#[derive(Clone, Debug)]
pub struct DistillationOutcome {
    pub selections: Vec<CoreSelection>,
    pub reports: Vec<CycleReport>,
    pub lineage: LineageRegistry,
    pub distilled: DistilledCore,
    /// Final cycle's trained parameters.
    pub final_params: SaeParams,
}

pub fn cycle_dir(run_dir: &Path, cycle: usize) -> PathBuf {
    run_dir.join(format!("{CYCLE_DIR_PREFIX}{cycle}"))
}

/// Runs cycle 0 and `config.cycles` train-and-select cycles, persisting each
/// cycle before the next begins. Cycles whose `report.json` already exists
/// are loaded instead of retrained. With `initial` (a core-free model), the
/// cycle-0 selection is made on it directly.
pub fn run_distillation(
    config: &DistillationConfig,
    run_dir: impl AsRef<Path>,
    data: &PreparedData,
    initial: Option<SaeParams>,
) -> Result<DistillationOutcome> {
    config.validate()?;
    let run_dir = run_dir.as_ref();
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    check_run_config(run_dir, config)?;
    if let Some(p) = &initial {
        if p.core_size() != 0 {
            return Err(Error::Contract(
                "initial checkpoint must have no core".into(),
            ));
        }
        if p.width() != config.width || p.dim() != data.dim() {
            return Err(Error::Contract(format!(
                "initial checkpoint is {}x{} but the run expects width {} over dimension {}",
                p.width(),
                p.dim(),
                config.width,
                data.dim()
            )));
        }
    }

    let mut lineage = LineageRegistry::default();
    let mut selections: Vec<CoreSelection> = Vec::new();
    let mut reports = Vec::new();
    let mut core_ids: Vec<u64> = Vec::new();
    let mut prev_params: Option<SaeParams> = None;
    let supplied_cycle0 = initial.is_some();
    let mut initial = initial;

    for cycle in 0..=config.cycles {
        let dir = cycle_dir(run_dir, cycle);
        let (params, mut selection, report) = if dir.join("report.json").exists() {
            let ckpt = Checkpoint::read(dir.join("checkpoint.bin"))?;
            let selection: CoreSelection = read_json(dir.join("selection.json"))?;
            let report: CycleReport = read_json(dir.join("report.json"))?;
            log::info!("cycle {cycle}: resumed from {}", dir.display());
            (ckpt.params, selection, Some(report))
        } else {
            let params = match (cycle, &prev_params, initial.take()) {
                (0, _, Some(p)) => p,
                (0, _, None) => {
                    SaeParams::random(data.dim(), config.width, &config.init, config.cycle_seed(0))
                }
                (_, Some(prev), _) => restart_init(
                    prev,
                    selections.last().expect("previous selection"),
                    config.width,
                    &config.init,
                    config.cycle_seed(cycle),
                )?,
                (_, None, _) => unreachable!("cycle 0 always sets the previous model"),
            };
            let out = if cycle == 0 && supplied_cycle0 {
                // A supplied cycle-0 model is used as is.
                let cfg = DistillationConfig {
                    cycle0_tokens: Some(0),
                    ..config.clone()
                };
                run_cycle(params, cycle, data, &cfg)?
            } else {
                run_cycle(params, cycle, data, config)?
            };
            check_frozen(&out, prev_params.as_ref(), selections.last())?;
            write_cycle(&dir, &out)?;
            (out.state.params.clone(), out.selection, None)
        };

        let stored_ids = selection.lineage_ids();
        lineage.assign(&mut selection, &core_ids)?;
        if report.is_some() && stored_ids != selection.lineage_ids() {
            return Err(Error::Driver(format!(
                "{}: stored lineage does not match the replayed run",
                dir.display()
            )));
        }
        let report = match report {
            Some(r) => r,
            None => {
                let r = build_report(&dir, &params, &selection, &lineage, config)?;
                write_json(dir.join("selection.json"), &selection)?;
                write_json(dir.join("report.json"), &r)?;
                r
            }
        };
        write_json(run_dir.join(LINEAGE_FILE), &lineage)?;
        log::info!(
            "cycle {cycle}: core {} -> selected {} ({} carried over)",
            report.core_size,
            report.selected,
            report.carried_over
        );
        core_ids = selection.lineage_ids().into_iter().flatten().collect();
        selections.push(selection);
        reports.push(report);
        prev_params = Some(params);
    }

    let final_params = prev_params.expect("at least one cycle ran");
    let last = selections.last().expect("at least one selection");
    let prev_core = final_params.core_size();
    let ids = distilled_core(last, prev_core);
    let cycle_indices: Vec<usize> = last
        .latents
        .iter()
        .filter(|l| l.index < prev_core)
        .map(|l| l.index)
        .collect();
    let rows = final_params.enc_weights.select(Axis(0), &cycle_indices);
    let distilled = DistilledCore {
        cycle: last.cycle,
        lineage_ids: ids,
        cycle_indices,
        dim: final_params.dim(),
        rows_file: CORE_SIDECAR_FILE.into(),
        rows,
    };
    write_core_rows(run_dir.join(CORE_SIDECAR_FILE), &distilled.rows)?;
    write_json(run_dir.join(DISTILLED_CORE_FILE), &distilled)?;
    report::emit_reports(run_dir)?;

    Ok(DistillationOutcome {
        selections,
        reports,
        lineage,
        distilled,
        final_params,
    })
}

fn check_run_config(run_dir: &Path, config: &DistillationConfig) -> Result<()> {
    let path = run_dir.join(RUN_CONFIG_FILE);
    if path.exists() {
        let stored: serde_json::Value = read_json(&path)?;
        let current = serde_json::to_value(config).map_err(|e| Error::json(&path, e))?;
        if stored != current {
            return Err(Error::Config(format!(
                "{} holds a different configuration; use a fresh run directory",
                path.display()
            )));
        }
        Ok(())
    } else {
        write_json(&path, config)
    }
}

fn check_frozen(
    out: &CycleOutput,
    prev: Option<&SaeParams>,
    prev_sel: Option<&CoreSelection>,
) -> Result<()> {
    let (Some(prev), Some(sel)) = (prev, prev_sel) else {
        return Ok(());
    };
    let params = &out.state.params;
    for (slot, &j) in sel.indices().iter().enumerate() {
        let same = params
            .enc_weights
            .row(slot)
            .iter()
            .zip(prev.enc_weights.row(j))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Driver(format!(
                "core slot {slot} drifted from its source row {j}"
            )));
        }
    }
    if !out.state.moments.core_rows_zero(params.core_size()) {
        return Err(Error::Driver(
            "frozen rows accumulated optimizer moments".into(),
        ));
    }
    Ok(())
}

fn write_cycle(dir: &Path, out: &CycleOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.state.checkpoint().write(dir.join("checkpoint.bin"))?;
    write_text(
        dir.join(report::L0_TRAJECTORY_FILE),
        &report::l0_trajectory_csv(&out.log),
    )?;
    write_json(dir.join(SCORES_FILE), &out.scores)?;
    write_json(dir.join(LOG_SUMMARY_FILE), &LogSummary::new(out))
}

const LOG_SUMMARY_FILE: &str = "training.json";
pub const SCORES_FILE: &str = "scores.json";

/// Training facts kept until the report is assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LogSummary {
    steps: usize,
    noncore_target: usize,
    loss_first: Option<f64>,
    loss_final: Option<f64>,
    l0_core_final: Option<f64>,
    l0_noncore_final: Option<f64>,
    eval_threshold: Option<f64>,
    zero_norm_latents: Vec<usize>,
}

impl LogSummary {
    fn new(out: &CycleOutput) -> Self {
        let log = &out.log;
        Self {
            steps: log.len(),
            noncore_target: out.state.policy.target,
            loss_first: log.loss.first().copied(),
            loss_final: summarize(&log.loss),
            l0_core_final: summarize(&log.l0_core),
            l0_noncore_final: summarize(&log.l0_noncore),
            eval_threshold: out.state.policy.eval_threshold,
            zero_norm_latents: out.scores.zero_norm_latents.clone(),
        }
    }
}

fn build_report(
    dir: &Path,
    params: &SaeParams,
    selection: &CoreSelection,
    lineage: &LineageRegistry,
    config: &DistillationConfig,
) -> Result<CycleReport> {
    let summary: LogSummary = read_json(dir.join(LOG_SUMMARY_FILE))?;
    let histogram = lineage.origin_histogram(selection)?;
    let carried_over = histogram
        .iter()
        .filter(|(o, _)| *o < selection.cycle)
        .map(|(_, n)| n)
        .sum();
    Ok(CycleReport {
        cycle: selection.cycle,
        core_size: params.core_size(),
        noncore_target: summary.noncore_target,
        steps: summary.steps,
        tokens: summary.steps as u64 * config.batch_size as u64,
        selected: selection.len(),
        origin_histogram: histogram
            .into_iter()
            .map(|(origin_cycle, count)| OriginCount {
                origin_cycle,
                count,
            })
            .collect(),
        carried_over,
        loss_first: summary.loss_first,
        loss_final: summary.loss_final,
        l0_core_final: summary.l0_core_final,
        l0_noncore_final: summary.l0_noncore_final,
        eval_threshold: summary.eval_threshold,
        achieved_coverage: selection.achieved_coverage,
        total_attribution: selection.total_attribution,
        zero_norm_latents: summary.zero_norm_latents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{select_core_by_coverage, SelectedLatent};
    use crate::data::{gen_synthetic_world, SyntheticWorldConfig};

    fn selection(cycle: usize, indices: &[usize]) -> CoreSelection {
        CoreSelection {
            cycle,
            pool: 0..20,
            q: Some(0.99),
            coverage_target: 0.9,
            total_attribution: 1.0,
            achieved_coverage: 1.0,
            latents: indices
                .iter()
                .map(|&index| SelectedLatent {
                    index,
                    lineage_id: None,
                    score: 1.0,
                    cumulative_fraction: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn restart_copies_rows_in_selection_order() {
        let prev = SaeParams::random(5, 12, &InitScheme::default(), 1);
        let sel = selection(0, &[7, 2, 9]);
        let next = restart_init(&prev, &sel, 12, &InitScheme::default(), 4).unwrap();
        assert_eq!(next.core_size(), 3);
        for (slot, j) in [7, 2, 9].into_iter().enumerate() {
            for (a, b) in next
                .enc_weights
                .row(slot)
                .iter()
                .zip(prev.enc_weights.row(j))
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let again = restart_init(&prev, &sel, 12, &InitScheme::default(), 4).unwrap();
        assert_eq!(next, again);
        assert_ne!(next.dec_weights, prev.dec_weights);
        assert_ne!(next.enc_bias, prev.enc_bias);
        let err =
            restart_init(&prev, &selection(0, &[]), 12, &InitScheme::default(), 4).unwrap_err();
        assert!(err.to_string().contains("empty core"));
    }

    #[test]
    fn lineage_follows_core_slots() {
        let mut reg = LineageRegistry::default();
        let mut s0 = selection(0, &[4, 1]);
        reg.assign(&mut s0, &[]).unwrap();
        assert_eq!(s0.lineage_ids(), vec![Some(0), Some(1)]);
        // Cycle 1: slot 0 holds lineage 0, slot 1 lineage 1; index 5 is new.
        let mut s1 = selection(1, &[1, 5]);
        reg.assign(&mut s1, &[0, 1]).unwrap();
        assert_eq!(s1.lineage_ids(), vec![Some(1), Some(2)]);
        let mut s2 = selection(2, &[1, 0, 3]);
        reg.assign(&mut s2, &[1, 2]).unwrap();
        assert_eq!(s2.lineage_ids(), vec![Some(2), Some(1), Some(3)]);
        let mut s3 = selection(3, &[1, 0]);
        reg.assign(&mut s3, &[2, 1, 3]).unwrap();

        let e = &reg.entries[1];
        assert_eq!(e.first_selected_cycle, 0);
        assert_eq!(e.slots, vec![Some(1), Some(1), Some(0), Some(1)]);
        let e = &reg.entries[2];
        assert_eq!(e.first_selected_cycle, 1);
        assert_eq!(e.slots.iter().flatten().count(), 3);
        assert_eq!(
            reg.origin_histogram(&s2).unwrap(),
            vec![(0, 1), (1, 1), (2, 1)]
        );
        assert_eq!(reg.origin_histogram(&s3).unwrap(), vec![(0, 1), (1, 1)]);
    }

    #[test]
    fn distilled_core_rule() {
        let mut s = selection(3, &[0, 2, 7, 9]);
        for (i, l) in s.latents.iter_mut().enumerate() {
            l.lineage_id = Some(100 + i as u64);
        }
        assert_eq!(distilled_core(&s, 5), vec![100, 101]);
        let mut disjoint = selection(3, &[5, 6]);
        disjoint
            .latents
            .iter_mut()
            .for_each(|l| l.lineage_id = Some(1));
        assert!(distilled_core(&disjoint, 5).is_empty());
        let mut full = selection(3, &[0, 1, 2, 3, 4]);
        for (i, l) in full.latents.iter_mut().enumerate() {
            l.lineage_id = Some(i as u64);
        }
        assert_eq!(distilled_core(&full, 5), vec![0, 1, 2, 3, 4]);
    }

    fn small_world() -> PreparedData {
        let world = gen_synthetic_world(&SyntheticWorldConfig {
            dim: 8,
            num_features: 12,
            features_per_token: 2,
            vocab_size: 6,
            num_tokens: 600,
            ..SyntheticWorldConfig::default()
        })
        .unwrap();
        PreparedData::new(&world.into_dataset(), 0.25, false).unwrap()
    }

    fn small_config() -> DistillationConfig {
        DistillationConfig {
            width: 24,
            cycles: 2,
            k: 3,
            prefix_boundaries: vec![6, 12],
            tokens_per_cycle: 64 * 30,
            batch_size: 64,
            seed: 9,
            attribution: AttributionConfig {
                batch_size: 64,
                ..AttributionConfig::default()
            },
            ..DistillationConfig::default()
        }
    }

    #[test]
    fn zero_budget_cycle_selects_on_input() {
        let data = small_world();
        let cfg = DistillationConfig {
            tokens_per_cycle: 0,
            normalize_decoder: false,
            ..small_config()
        };
        let params = SaeParams::random(8, 24, &cfg.init, 3);
        let out = run_cycle(params.clone(), 0, &data, &cfg).unwrap();
        assert_eq!(out.state.params, params);
        let (a, g) = data.attribution_split(true).unwrap();
        let attribution = AttributionConfig {
            seed: derive_seed(cfg.cycle_seed(0), ATTRIBUTION_STREAM),
            ..cfg.attribution.clone()
        };
        let (direct, scores) =
            select_core_cycle0(&params, 6, a.view(), g.view(), 3, &attribution).unwrap();
        assert_eq!(out.selection, direct);
        assert_eq!(
            select_core_by_coverage(&scores.per_latent, 0.9)
                .unwrap()
                .indices(),
            direct.indices()
        );
        assert!(direct.indices().iter().all(|&j| j < 6));
    }

    #[test]
    fn end_to_end_persists_and_resumes() {
        let data = small_world();
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let first = run_distillation(&cfg, dir.path(), &data, None).unwrap();
        assert_eq!(first.selections.len(), 3);
        for (t, sel) in first.selections.iter().enumerate() {
            assert_eq!(sel.cycle, t);
            let c = first.reports[t].core_size;
            assert!(sel.indices().iter().all(|&j| j < c + 6));
            let hist: usize = first.reports[t]
                .origin_histogram
                .iter()
                .map(|o| o.count)
                .sum();
            assert_eq!(hist, sel.len());
        }
        for name in [
            RUN_CONFIG_FILE,
            LINEAGE_FILE,
            DISTILLED_CORE_FILE,
            CORE_SIDECAR_FILE,
            report::CARRYOVER_FILE,
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let core = DistilledCore::load(dir.path().join(DISTILLED_CORE_FILE)).unwrap();
        assert_eq!(core.rows, first.distilled.rows);

        let checkpoint_bytes = fs::read(cycle_dir(dir.path(), 2).join("checkpoint.bin")).unwrap();
        fs::remove_dir_all(cycle_dir(dir.path(), 2)).unwrap();
        let resumed = run_distillation(&cfg, dir.path(), &data, None).unwrap();
        assert_eq!(resumed.selections, first.selections);
        assert_eq!(resumed.reports, first.reports);
        assert_eq!(
            fs::read(cycle_dir(dir.path(), 2).join("checkpoint.bin")).unwrap(),
            checkpoint_bytes
        );

        let other = DistillationConfig { k: 4, ..cfg };
        assert!(matches!(
            run_distillation(&other, dir.path(), &data, None),
            Err(Error::Config(_))
        ));
    }
}
