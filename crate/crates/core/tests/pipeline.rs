//! Distillation into transfer on a small world, checking the artifacts
//! between stages.

use std::collections::BTreeMap;

use dmsae_core::attribution::CoreSelection;
use dmsae_core::data::{gen_synthetic_world, PreparedData, SyntheticWorldConfig};
use dmsae_core::distill::{
    cycle_dir, run_distillation, DistillationConfig, DistilledCore, DISTILLED_CORE_FILE,
};
use dmsae_core::report::{read_json, CARRYOVER_FILE, CARRYOVER_HEADER, MANIFEST_FILE};
use dmsae_core::sae::{
    InitScheme, MatryoshkaConfig, SaeParams, SparsityPolicy, TrainConfig, TrainState,
};
use dmsae_core::transfer::{k_noncore, random_core, transfer_train, TransferConfig};
use ndarray::{s, Array2};

fn data(seed: u64) -> PreparedData {
    let world = gen_synthetic_world(&SyntheticWorldConfig {
        dim: 16,
        num_features: 24,
        vocab_size: 8,
        num_tokens: 4000,
        seed,
        ..SyntheticWorldConfig::default()
    })
    .unwrap();
    PreparedData::new(&world.into_dataset(), 0.1, false).unwrap()
}

fn config(cycles: usize) -> DistillationConfig {
    DistillationConfig {
        width: 64,
        cycles,
        k: 4,
        prefix_boundaries: vec![8, 16, 32],
        tokens_per_cycle: 300 * 32,
        batch_size: 32,
        seed: 9,
        ..DistillationConfig::default()
    }
}

fn transfer_config(k: usize) -> TransferConfig {
    TransferConfig {
        width: 64,
        k,
        prefix_boundaries: vec![8, 16, 32],
        tokens: 200 * 32,
        batch_size: 32,
        seed: 3,
        ..TransferConfig::default()
    }
}

#[test]
fn one_cycle_then_transfer_from_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(1);
    let out = run_distillation(&config(1), dir.path(), &d, None).unwrap();

    let csv = std::fs::read_to_string(dir.path().join(CARRYOVER_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CARRYOVER_HEADER));
    let mut per_cycle: BTreeMap<usize, usize> = BTreeMap::new();
    for line in lines {
        let f: Vec<usize> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(f[1] <= 1, "origin {} in a one-cycle run", f[1]);
        *per_cycle.entry(f[0]).or_default() += f[2];
    }
    for t in 0..=1 {
        let sel: CoreSelection =
            read_json(cycle_dir(dir.path(), t).join("selection.json")).unwrap();
        assert_eq!(per_cycle[&t], sel.len(), "cycle {t}");
    }
    assert!(dir.path().join(MANIFEST_FILE).exists());

    let core = DistilledCore::load(dir.path().join(DISTILLED_CORE_FILE)).unwrap();
    assert_eq!(core, out.distilled);
    let c = core.len();
    assert!(c > 0);
    let cfg = transfer_config(4);
    let transferred = transfer_train(&cfg, core.rows.view(), &d).unwrap();
    let baseline = transfer_train(&cfg, Array2::zeros((0, 16)).view(), &d).unwrap();
    // Same number of optimizer steps as a core-free model.
    assert_eq!(transferred.log.len(), baseline.log.len());
    assert_eq!(transferred.k_noncore, k_noncore(4, 64, c));
    assert_eq!(transferred.state.params.core_rows(), core.rows);
}

#[test]
fn distilled_core_is_in_last_two_cores() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_distillation(&config(3), dir.path(), &data(2), None).unwrap();
    let ids = |sel: &CoreSelection| {
        sel.lineage_ids()
            .into_iter()
            .flatten()
            .collect::<Vec<u64>>()
    };
    let last = ids(&out.selections[3]);
    let prev = ids(&out.selections[2]);
    for id in &out.distilled.lineage_ids {
        assert!(last.contains(id) && prev.contains(id), "lineage {id}");
    }
    for (t, sel) in out.selections.iter().enumerate() {
        assert_eq!(sel.cycle, t);
        assert!(sel.latents.iter().all(|l| l.lineage_id.is_some()));
    }
}

#[test]
fn dense_core_budget_is_filled() {
    let d = data(3);
    let core = random_core(5, 16, &InitScheme::default(), 4);
    for k in [2usize, 6] {
        let kn = k_noncore(k, 64, 5);
        let params = SaeParams::with_core(core.view(), 64, &InitScheme::default(), 8).unwrap();
        let train = TrainConfig {
            matryoshka: MatryoshkaConfig::for_width(59, &[8, 16, 32]).unwrap(),
            loss: Default::default(),
            adam: Default::default(),
            normalize_decoder: true,
        };
        let mut state = TrainState::new(params, train, SparsityPolicy::dense_core(kn)).unwrap();
        for start in (0..3200).step_by(32) {
            let r = state
                .train_step(d.train_activations.slice(s![start..start + 32, ..]))
                .unwrap();
            assert_eq!(r.noncore_active, (32 * kn).min(r.noncore_positive));
            assert_eq!(r.sparsity.l0_noncore, r.noncore_active as f64 / 32.0);
        }
    }
}
