//! Analytic gradients against central finite differences of an independent
//! scalar-loop loss that holds the BatchTopK and auxiliary masks fixed.

use dmsae_core::sae::{
    backward, forward, matryoshka_loss, InitScheme, LossConfig, MatryoshkaConfig, SaeParams,
    SparsityPolicy,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    params: SaeParams,
    x: Array2<f64>,
    policy: SparsityPolicy,
    config: MatryoshkaConfig,
    loss: LossConfig,
    dead: Vec<bool>,
}

fn instance(seed: u64, core: usize, dense: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let width = rng.random_range((core + 2).max(4)..=16);
    let b = rng.random_range(2..=8);
    let mut params = SaeParams::random(d, width, &InitScheme::default(), seed);
    params
        .enc_bias
        .mapv_inplace(|_| rng.random_range(-0.3..0.3));
    params
        .dec_bias
        .mapv_inplace(|_| rng.random_range(-0.3..0.3));
    params
        .dec_weights
        .mapv_inplace(|v| v * rng.random_range(0.5..1.5));
    let core_rows = Array2::from_shape_fn((core, d), |_| rng.random_range(-1.0..1.0));
    let mut p =
        SaeParams::with_core(core_rows.view(), width, &InitScheme::default(), seed).unwrap();
    p.enc_bias = params.enc_bias;
    p.dec_bias = params.dec_bias;
    p.dec_weights = params.dec_weights;
    p.enc_weights
        .slice_mut(ndarray::s![core.., ..])
        .assign(&params.enc_weights.slice(ndarray::s![core.., ..]));
    let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
    let noncore = width - core;
    let config = MatryoshkaConfig::for_width(noncore, &[1, 2, 4]).unwrap();
    let config = MatryoshkaConfig::new(
        config.noncore_prefixes.clone(),
        config
            .noncore_prefixes
            .iter()
            .map(|_| rng.random_range(0.5..2.0))
            .collect(),
    )
    .unwrap();
    let k = rng.random_range(1..=3);
    let policy = if dense {
        SparsityPolicy::dense_core(k)
    } else {
        SparsityPolicy::sparse_core(k)
    };
    let dead: Vec<bool> = (0..width).map(|_| rng.random_bool(0.4)).collect();
    let loss = LossConfig {
        aux_coefficient: 0.25,
        k_aux: Some(2),
        dead_threshold: 1,
    };
    Instance {
        params: p,
        x,
        policy,
        config,
        loss,
        dead,
    }
}

/// Σ_i w_i mean_u ‖x_u − x̂_i‖² + α mean_u ‖x_u − x̂_L − ê_u‖², by loops.
fn oracle_loss(
    p: &SaeParams,
    x: &Array2<f64>,
    active: &Array2<bool>,
    aux: Option<&Array2<bool>>,
    config: &MatryoshkaConfig,
    alpha: f64,
) -> f64 {
    let (b, d) = x.dim();
    let width = p.width();
    let c = p.core_size();
    let mut total = 0.0;
    let mut pre = Array2::<f64>::zeros((b, width));
    for u in 0..b {
        for j in 0..width {
            let mut acc = p.enc_bias[j];
            for i in 0..d {
                acc += p.enc_weights[[j, i]] * x[[u, i]];
            }
            pre[[u, j]] = acc;
        }
    }
    let mut last_resid = Array2::<f64>::zeros((b, d));
    for (pi, (&m, &w)) in config
        .noncore_prefixes
        .iter()
        .zip(&config.prefix_weights)
        .enumerate()
    {
        let mut sum = 0.0;
        for u in 0..b {
            for i in 0..d {
                let mut xhat = p.dec_bias[i];
                for j in 0..c + m {
                    if active[[u, j]] {
                        xhat += p.dec_weights[[i, j]] * pre[[u, j]];
                    }
                }
                let r = x[[u, i]] - xhat;
                sum += r * r;
                if pi + 1 == config.noncore_prefixes.len() {
                    last_resid[[u, i]] = r;
                }
            }
        }
        total += w * sum / b as f64;
    }
    if let Some(aux) = aux {
        let mut sum = 0.0;
        for u in 0..b {
            for i in 0..d {
                let mut e = 0.0;
                for j in 0..width {
                    if aux[[u, j]] {
                        e += p.dec_weights[[i, j]] * pre[[u, j]];
                    }
                }
                let q = last_resid[[u, i]] - e;
                sum += q * q;
            }
        }
        total += alpha * sum / b as f64;
    }
    total
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Maximum relative error over every unfrozen parameter, plus a check that
/// the frozen block is exactly zero.
fn check(inst: &Instance) -> (f64, bool) {
    let h = 1e-5;
    let fwd = forward(
        &inst.params,
        inst.x.view(),
        &inst.policy,
        &inst.config,
        &inst.loss,
        &inst.dead,
    )
    .unwrap();
    let grads = backward(&inst.params, inst.x.view(), &fwd, &inst.config, &inst.loss);
    let aux = fwd.aux.as_ref().map(|a| a.mask.clone());
    let alpha = inst.loss.aux_coefficient;

    let analytic = matryoshka_loss(
        inst.x.view(),
        &fwd.reconstructions,
        fwd.aux.as_ref(),
        &inst.config,
        &inst.loss,
    )
    .total;
    let direct = oracle_loss(
        &inst.params,
        &inst.x,
        &fwd.masked.active,
        aux.as_ref(),
        &inst.config,
        alpha,
    );
    assert!(
        (analytic - direct).abs() < 1e-10 * analytic.abs().max(1.0),
        "{analytic} vs {direct}"
    );

    let c = inst.params.core_size();
    assert!(grads
        .enc_weights
        .rows()
        .into_iter()
        .take(c)
        .all(|r| r.iter().all(|v| *v == 0.0)));

    let mut worst = 0.0f64;
    let fd = |perturb: &dyn Fn(&mut SaeParams, f64)| {
        let mut plus = inst.params.clone();
        perturb(&mut plus, h);
        let mut minus = inst.params.clone();
        perturb(&mut minus, -h);
        (oracle_loss(
            &plus,
            &inst.x,
            &fwd.masked.active,
            aux.as_ref(),
            &inst.config,
            alpha,
        ) - oracle_loss(
            &minus,
            &inst.x,
            &fwd.masked.active,
            aux.as_ref(),
            &inst.config,
            alpha,
        )) / (2.0 * h)
    };
    let (width, d) = (inst.params.width(), inst.params.dim());
    for j in c..width {
        for i in 0..d {
            let n = fd(&|p, e| p.enc_weights[[j, i]] += e);
            worst = worst.max(rel_err(grads.enc_weights[[j, i]], n));
        }
    }
    for j in 0..width {
        let n = fd(&|p, e| p.enc_bias[j] += e);
        worst = worst.max(rel_err(grads.enc_bias[j], n));
        for i in 0..d {
            let n = fd(&|p, e| p.dec_weights[[i, j]] += e);
            worst = worst.max(rel_err(grads.dec_weights[[i, j]], n));
        }
    }
    for i in 0..d {
        let n = fd(&|p, e| p.dec_bias[i] += e);
        worst = worst.max(rel_err(grads.dec_bias[i], n));
    }
    (worst, aux.is_some_and(|m| m.iter().any(|v| *v)))
}

#[test]
fn fixed_instance_d3_k5_c1_b4() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let core = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
    let mut params = SaeParams::with_core(core.view(), 5, &InitScheme::default(), 5).unwrap();
    params.enc_bias.mapv_inplace(|_| rng.random_range(0.0..0.3));
    let inst = Instance {
        params,
        x: Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
        policy: SparsityPolicy::dense_core(2),
        config: MatryoshkaConfig::uniform(vec![2, 4]).unwrap(),
        loss: LossConfig {
            aux_coefficient: 1.0 / 32.0,
            k_aux: Some(2),
            dead_threshold: 1,
        },
        dead: vec![false, true, false, true, true],
    };
    let (worst, _) = check(&inst);
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn random_instances_both_regimes() {
    let mut seed = 0;
    let mut with_aux = 0;
    for &core in &[0usize, 1, 3] {
        for dense in [true, false] {
            for _ in 0..6 {
                seed += 1;
                let (worst, aux) = check(&instance(seed, core, dense));
                with_aux += aux as usize;
                assert!(
                    worst < 1e-5,
                    "seed {seed} core {core} dense {dense}: {worst}"
                );
            }
        }
    }
    assert!(
        with_aux >= 18,
        "only {with_aux} instances exercised the auxiliary term"
    );
}
