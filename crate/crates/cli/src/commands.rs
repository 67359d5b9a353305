//! Subcommand bodies. Each loads its run configuration, applies flag
//! overrides, echoes the result into `--out`, and writes everything there.

use std::fs;
use std::path::{Path, PathBuf};

use dmsae_core::attribution::{
    select_core_by_attribution, select_core_cycle0, AttributionConfig, AttributionScores,
};
use dmsae_core::data::{gen_synthetic_world, PreparedData};
use dmsae_core::distill::{
    cycle_dir, run_distillation, DistillationConfig, DistilledCore, RUN_CONFIG_FILE, SCORES_FILE,
};
use dmsae_core::report::{self, read_json, write_json, write_text};
use dmsae_core::sae::{Checkpoint, Regime};
use dmsae_core::transfer::{
    eval_metrics, random_core, run_parallel, sweep as transfer_sweep, tau_sweep, transfer_train,
    TransferConfig, TransferOutcome, TAU_SWEEP_HEADER,
};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{
    self, DataConfig, DistillRun, EvalRun, GenRun, SelectRun, SweepGrid, SweepRun, TrainRun,
    TransferRun, CONFIG_ECHO,
};
use crate::{CliError, Common, DataArgs, ModelArgs, SelectionArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const DICTIONARY_FILE: &str = "dictionary.json";
pub const CARRYOVER_SWEEP_FILE: &str = "carryover.csv";
pub const CARRYOVER_SWEEP_HEADER: &str = "k,cycle,origin_cycle,count";
pub const TAU_SWEEP_FILE: &str = "tau_sweep.csv";

type CliResult<T = ()> = Result<T, CliError>;

pub struct WorldFlags {
    pub dim: Option<usize>,
    pub features: Option<usize>,
    pub features_per_token: Option<usize>,
    pub noise: Option<f64>,
    pub vocab: Option<usize>,
    pub tokens: Option<usize>,
    pub rate_decay: Option<f64>,
}

pub struct DistillFlags {
    pub cycles: Option<usize>,
    pub tokens_per_cycle: Option<u64>,
    pub cycle0_tokens: Option<u64>,
    pub scale_noncore: bool,
    pub initial: Option<PathBuf>,
}

pub struct SweepFlags {
    pub grid: Option<SweepGrid>,
    pub ks: Option<Vec<usize>>,
    pub taus: Option<Vec<f64>>,
    pub regimes: Option<Vec<Regime>>,
    pub core: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub cycle: Option<usize>,
    pub tokens: Option<u64>,
    pub jobs: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_data(cfg: &mut DataConfig, args: &DataArgs) {
    if args.data.is_some() {
        cfg.path = args.data.clone();
    }
    set(&mut cfg.held_out_fraction, args.held_out_fraction);
    cfg.center |= args.center;
}

fn apply_model_transfer(cfg: &mut TransferConfig, args: &ModelArgs) {
    set(&mut cfg.width, args.width);
    set(&mut cfg.k, args.k);
    set(&mut cfg.prefix_boundaries, args.prefixes.clone());
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.adam.learning_rate, args.lr);
}

fn apply_model_distill(cfg: &mut DistillationConfig, args: &ModelArgs) {
    set(&mut cfg.width, args.width);
    set(&mut cfg.k, args.k);
    set(&mut cfg.prefix_boundaries, args.prefixes.clone());
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.adam.learning_rate, args.lr);
}

fn apply_selection(cfg: &mut AttributionConfig, args: &SelectionArgs) {
    set(&mut cfg.quantile, args.q);
    set(&mut cfg.coverage, args.tau);
    if args.num_tokens.is_some() {
        cfg.num_tokens = args.num_tokens;
    }
    if args.score_on_train {
        cfg.held_out = false;
    }
}

/// Creates `--out` and writes the resolved configuration into it.
fn start_run<T: Serialize>(common: &Common, resolved: &T) -> CliResult {
    fs::create_dir_all(&common.out).map_err(|e| {
        CliError::Usage(format!(
            "cannot create output directory {}: {e}",
            common.out.display()
        ))
    })?;
    write_json(common.out.join(CONFIG_ECHO), resolved)?;
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

fn load_core(path: &Path) -> CliResult<Array2<f64>> {
    Ok(DistilledCore::load(path)?.rows)
}

fn write_training(out: &Path, outcome: &TransferOutcome, cfg: &TransferConfig) -> CliResult {
    outcome
        .state
        .checkpoint()
        .write(out.join(CHECKPOINT_FILE))?;
    write_text(
        out.join(report::L0_TRAJECTORY_FILE),
        &report::l0_trajectory_csv(&outcome.log),
    )?;
    write_text(
        out.join(report::METRICS_FILE),
        &report::metrics_csv(&[outcome.metrics_row(cfg)]),
    )?;
    write_json(out.join(EVAL_FILE), &outcome.metrics)?;
    log::info!(
        "mse {:.6} fve {:.4} l0_core {:.2} l0_noncore {:.2}",
        outcome.metrics.mse,
        outcome.metrics.fve,
        outcome.metrics.l0_core,
        outcome.metrics.l0_noncore
    );
    Ok(())
}

#[derive(Serialize)]
struct DictionaryDump<'a> {
    directions: Vec<Vec<f64>>,
    rates: &'a [f64],
    magnitude_low: f64,
    magnitude_high: f64,
    head: Vec<Vec<f64>>,
    head_features: &'a [usize],
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn gen(common: &Common, flags: WorldFlags) -> CliResult {
    let mut run: GenRun = config::load(common.config.as_deref())?;
    let w = &mut run.world;
    set(&mut w.dim, flags.dim);
    set(&mut w.num_features, flags.features);
    set(&mut w.features_per_token, flags.features_per_token);
    set(&mut w.noise_std, flags.noise);
    set(&mut w.vocab_size, flags.vocab);
    set(&mut w.num_tokens, flags.tokens);
    set(&mut w.rate_decay, flags.rate_decay);
    set(&mut w.seed, config::resolve_seed(common.seed)?);
    run.world
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    start_run(common, &run)?;

    let world = gen_synthetic_world(&run.world)?;
    let dict = &world.dictionary;
    write_json(
        common.out.join(DICTIONARY_FILE),
        &DictionaryDump {
            directions: rows(&dict.directions),
            rates: &dict.rates,
            magnitude_low: dict.magnitude_low,
            magnitude_high: dict.magnitude_high,
            head: rows(&dict.head),
            head_features: &dict.head_features,
        },
    )?;
    let base = common.out.join(&run.name);
    world.into_dataset().save(&base)?;
    log::info!(
        "wrote {} tokens to {}.*",
        run.world.num_tokens,
        base.display()
    );
    Ok(())
}

pub fn train(
    common: &Common,
    data: &DataArgs,
    model: &ModelArgs,
    core: Option<PathBuf>,
    tokens: Option<u64>,
) -> CliResult {
    let mut run: TrainRun = config::load(common.config.as_deref())?;
    apply_data(&mut run.data, data);
    apply_model_transfer(&mut run.training, model);
    if core.is_some() {
        run.core = core;
    }
    set(&mut run.training.tokens, tokens);
    set(&mut run.training.seed, config::resolve_seed(common.seed)?);
    start_run(common, &run)?;

    let prepared = run.data.load()?;
    let core_rows = match &run.core {
        Some(p) => load_core(p)?,
        None => Array2::zeros((0, prepared.dim())),
    };
    let outcome = transfer_train(&run.training, core_rows.view(), &prepared)?;
    write_training(&common.out, &outcome, &run.training)
}

pub fn select_core(
    common: &Common,
    data: &DataArgs,
    selection: &SelectionArgs,
    checkpoint: Option<PathBuf>,
    cycle: Option<usize>,
) -> CliResult {
    let mut run: SelectRun = config::load(common.config.as_deref())?;
    apply_data(&mut run.data, data);
    apply_selection(&mut run.attribution, selection);
    if checkpoint.is_some() {
        run.checkpoint = checkpoint;
    }
    set(&mut run.cycle, cycle);
    set(
        &mut run.attribution.seed,
        config::resolve_seed(common.seed)?,
    );
    run.attribution
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let ckpt_path = require(&run.checkpoint, "--checkpoint")?.to_path_buf();
    start_run(common, &run)?;

    let prepared = run.data.load()?;
    let ckpt = Checkpoint::read(&ckpt_path)?;
    let first_prefix = *ckpt.noncore_prefixes.first().ok_or_else(|| {
        CliError::Runtime(dmsae_core::Error::Contract(format!(
            "{} lists no prefixes",
            ckpt_path.display()
        )))
    })?;
    let (acts, grads) = prepared.attribution_split(run.attribution.held_out)?;
    let (mut sel, scores) = if ckpt.params.core_size() == 0 {
        select_core_cycle0(
            &ckpt.params,
            first_prefix,
            acts.view(),
            grads.view(),
            ckpt.policy.target,
            &run.attribution,
        )?
    } else {
        select_core_by_attribution(
            &ckpt.params,
            first_prefix,
            acts.view(),
            grads.view(),
            &ckpt.policy,
            &run.attribution,
            run.cycle,
        )?
    };
    sel.cycle = run.cycle;
    write_json(common.out.join(SELECTION_FILE), &sel)?;
    write_json(common.out.join(SCORES_FILE), &scores)?;
    log::info!(
        "selected {} of {} latents (coverage {:.4})",
        sel.len(),
        sel.pool.len(),
        sel.achieved_coverage
    );
    Ok(())
}

pub fn distill(
    common: &Common,
    data: &DataArgs,
    model: &ModelArgs,
    selection: &SelectionArgs,
    flags: DistillFlags,
) -> CliResult {
    let mut run: DistillRun = config::load(common.config.as_deref())?;
    apply_data(&mut run.data, data);
    let d = &mut run.distillation;
    apply_model_distill(d, model);
    apply_selection(&mut d.attribution, selection);
    set(&mut d.cycles, flags.cycles);
    set(&mut d.tokens_per_cycle, flags.tokens_per_cycle);
    if flags.cycle0_tokens.is_some() {
        d.cycle0_tokens = flags.cycle0_tokens;
    }
    d.scale_noncore_target |= flags.scale_noncore;
    if flags.initial.is_some() {
        run.initial = flags.initial;
    }
    set(
        &mut run.distillation.seed,
        config::resolve_seed(common.seed)?,
    );
    run.distillation
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    start_run(common, &run)?;

    let prepared = run.data.load()?;
    let initial = match &run.initial {
        Some(p) => Some(Checkpoint::read(p)?.params),
        None => None,
    };
    let outcome = run_distillation(&run.distillation, &common.out, &prepared, initial)?;
    log::info!("distilled core: {} latents", outcome.distilled.len());
    Ok(())
}

pub fn transfer(
    common: &Common,
    data: &DataArgs,
    model: &ModelArgs,
    core: Option<PathBuf>,
    random: Option<usize>,
    regime: Option<Regime>,
    tokens: Option<u64>,
) -> CliResult {
    let mut run: TransferRun = config::load(common.config.as_deref())?;
    apply_data(&mut run.data, data);
    apply_model_transfer(&mut run.transfer, model);
    if core.is_some() {
        run.core = core;
        run.random_core = None;
    }
    if random.is_some() {
        run.random_core = random;
        run.core = None;
    }
    set(&mut run.transfer.regime, regime);
    set(&mut run.transfer.tokens, tokens);
    set(&mut run.transfer.seed, config::resolve_seed(common.seed)?);
    if run.core.is_some() == run.random_core.is_some() {
        return Err(CliError::Usage(
            "give exactly one of --core and --random-core".into(),
        ));
    }
    start_run(common, &run)?;

    let prepared = run.data.load()?;
    let core_rows = match (&run.core, run.random_core) {
        (Some(p), _) => load_core(p)?,
        (None, Some(c)) => random_core(c, prepared.dim(), &run.transfer.init, run.random_core_seed),
        (None, None) => unreachable!("checked above"),
    };
    let outcome = transfer_train(&run.transfer, core_rows.view(), &prepared)?;
    write_training(&common.out, &outcome, &run.transfer)
}

pub fn eval(common: &Common, data: &DataArgs, checkpoint: Option<PathBuf>) -> CliResult {
    let mut run: EvalRun = config::load(common.config.as_deref())?;
    apply_data(&mut run.data, data);
    if checkpoint.is_some() {
        run.checkpoint = checkpoint;
    }
    let ckpt_path = require(&run.checkpoint, "--checkpoint")?.to_path_buf();
    start_run(common, &run)?;

    let prepared = run.data.load()?;
    let ckpt = Checkpoint::read(&ckpt_path)?;
    let metrics = eval_metrics(
        &ckpt.params,
        &ckpt.policy,
        prepared.held_out_activations.view(),
    )?;
    write_json(common.out.join(EVAL_FILE), &metrics)?;
    log::info!("mse {:.6} fve {:.4}", metrics.mse, metrics.fve);
    Ok(())
}

pub fn sweep(common: &Common, data: &DataArgs, model: &ModelArgs, flags: SweepFlags) -> CliResult {
    let mut run: SweepRun = config::load(common.config.as_deref())?;
    apply_data(&mut run.data, data);
    apply_model_transfer(&mut run.transfer, model);
    apply_model_distill(&mut run.distillation, model);
    set(&mut run.grid, flags.grid);
    set(&mut run.ks, flags.ks);
    set(&mut run.taus, flags.taus);
    set(&mut run.regimes, flags.regimes);
    if flags.core.is_some() {
        run.core = flags.core;
    }
    if flags.run.is_some() {
        run.run = flags.run;
    }
    set(&mut run.cycle, flags.cycle);
    if let Some(t) = flags.tokens {
        run.transfer.tokens = t;
        run.distillation.tokens_per_cycle = t;
    }
    set(&mut run.jobs, flags.jobs);
    if let Some(seed) = config::resolve_seed(common.seed)? {
        run.transfer.seed = seed;
        run.distillation.seed = seed;
    }
    if run.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match run.grid {
        SweepGrid::Transfer => {
            require(&run.core, "--core for the transfer grid")?;
            if run.ks.is_empty() || run.regimes.is_empty() {
                return Err(CliError::Usage(
                    "the transfer grid needs --ks and --regimes".into(),
                ));
            }
        }
        SweepGrid::Carryover if run.ks.is_empty() => {
            return Err(CliError::Usage("the carryover grid needs --ks".into()));
        }
        SweepGrid::Tau if run.taus.is_empty() || run.cycle == 0 => {
            return Err(CliError::Usage(
                "the tau grid needs --taus and a --cycle of at least 1".into(),
            ));
        }
        _ => {}
    }
    if run.grid == SweepGrid::Tau && run.data.path.is_none() {
        // Fall back to the data the source run was distilled on.
        if let Some(dir) = &run.run {
            if let Ok(source) = config::load::<DistillRun>(Some(&dir.join(CONFIG_ECHO))) {
                run.data = source.data;
            }
        }
    }
    start_run(common, &run)?;

    let prepared = run.data.load()?;
    match run.grid {
        SweepGrid::Transfer => sweep_transfer(common, &run, &prepared),
        SweepGrid::Carryover => sweep_carryover(common, &run, &prepared),
        SweepGrid::Tau => sweep_tau(common, &run, &prepared),
    }
}

fn sweep_transfer(common: &Common, run: &SweepRun, data: &PreparedData) -> CliResult {
    let core = load_core(run.core.as_deref().expect("checked"))?;
    let configs: Vec<TransferConfig> = run
        .regimes
        .iter()
        .flat_map(|&regime| {
            run.ks.iter().map(move |&k| TransferConfig {
                k,
                regime,
                ..run.transfer.clone()
            })
        })
        .collect();
    let rows = transfer_sweep(&configs, core.view(), data, run.jobs, Some(&common.out))?;
    report_failures(
        rows.iter().filter(|r| r.result.is_err()).count(),
        rows.len(),
    )
}

fn sweep_carryover(common: &Common, run: &SweepRun, data: &PreparedData) -> CliResult {
    let configs: Vec<DistillationConfig> = run
        .ks
        .iter()
        .map(|&k| DistillationConfig {
            k,
            ..run.distillation.clone()
        })
        .collect();
    let results = run_parallel(&configs, run.jobs, |_, cfg| {
        let dir = common.out.join(format!("k_{}", cfg.k));
        let outcome = run_distillation(cfg, &dir, data, None)?;
        report::carryover_rows(&outcome.selections, &outcome.lineage)
    });
    let mut table = Vec::new();
    let mut failed = Vec::new();
    for (row, cfg) in results.iter().zip(&configs) {
        match &row.result {
            Ok(counts) => table.extend(counts.iter().map(|&(cycle, origin, count)| {
                vec![
                    cfg.k.to_string(),
                    cycle.to_string(),
                    origin.to_string(),
                    count.to_string(),
                ]
            })),
            Err(e) => failed.push(vec![row.index.to_string(), e.replace([',', '\n'], ";")]),
        }
    }
    write_text(
        common.out.join(CARRYOVER_SWEEP_FILE),
        &report::csv(CARRYOVER_SWEEP_HEADER, table),
    )?;
    if !failed.is_empty() {
        write_text(
            common.out.join("failures.csv"),
            &report::csv(report::FAILURES_HEADER, failed.clone()),
        )?;
    }
    report_failures(failed.len(), configs.len())
}

fn sweep_tau(common: &Common, run: &SweepRun, data: &PreparedData) -> CliResult {
    let t = run.cycle;
    let (run_dir, config) = match &run.run {
        Some(dir) => {
            let config: DistillationConfig = read_json(dir.join(RUN_CONFIG_FILE))?;
            (dir.clone(), config)
        }
        None => {
            let dir = common.out.join("run");
            let config = DistillationConfig {
                cycles: t,
                ..run.distillation.clone()
            };
            run_distillation(&config, &dir, data, None)?;
            (dir, config)
        }
    };
    let source = cycle_dir(&run_dir, t);
    let prev = Checkpoint::read(source.join(CHECKPOINT_FILE))?;
    let scores: AttributionScores = read_json(source.join(SCORES_FILE))?;
    let rows = tau_sweep(
        &prev.params,
        &scores.per_latent,
        scores.pool.start,
        &run.taus,
        t + 1,
        &config,
        data,
        run.jobs,
    )?;
    let ok: Vec<Vec<String>> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().ok().map(|row| row.fields()))
        .collect();
    write_text(
        common.out.join(TAU_SWEEP_FILE),
        &report::csv(TAU_SWEEP_HEADER, ok),
    )?;
    let failed: Vec<Vec<String>> = rows
        .iter()
        .filter_map(|r| {
            r.result
                .as_ref()
                .err()
                .map(|e| vec![r.index.to_string(), e.replace([',', '\n'], ";")])
        })
        .collect();
    let n_failed = failed.len();
    if n_failed > 0 {
        write_text(
            common.out.join("failures.csv"),
            &report::csv(report::FAILURES_HEADER, failed),
        )?;
    }
    report_failures(n_failed, rows.len())
}

fn report_failures(failed: usize, total: usize) -> CliResult {
    if failed == 0 {
        return Ok(());
    }
    Err(CliError::Runtime(dmsae_core::Error::Driver(format!(
        "{failed} of {total} sweep rows failed; see failures.csv"
    ))))
}
