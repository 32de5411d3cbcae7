mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rispls::channel::{sample_many, ChannelRealization, PowerBudget};
use rispls::hetgraph::InputScaling;
use rispls::model::*;

fn model(head: HeadKind, flags: ModelFlags, seed: u64) -> HgnnModel {
    let cfg = common::scenario(4, 4, 2, 2, 0);
    HgnnModel::new(4, common::tiny_dims(), head, flags, InputScaling::from_scenario(&cfg), seed).unwrap()
}

fn budget() -> PowerBudget {
    PowerBudget { p_max: 1.0, p_c: 0.5 }
}

#[test]
fn full_model_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = common::scenario(4, 4, 2, 2, 2);
    let mut worst: f64 = 0.0;
    for trial in 0..6 {
        let head = if trial % 2 == 0 { HeadKind::ModelBased } else { HeadKind::BeamDirect };
        let m = model(head, ModelFlags::default(), trial);
        let chs = sample_many(&cfg, 2 * trial, 2).unwrap();
        let refs: Vec<&ChannelRealization> = chs.iter().collect();
        let (a, n) = common::model_gradients(&m, &refs, &budget(), 40, &mut rng);
        worst = worst.max(common::max_rel_err(&a, &n));
    }
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn zero_forcing_and_mrt_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, dims) in [(4, 4, 2, 2), (4, 3, 3, 1), (5, 2, 2, 3), (3, 4, 1, 0)].into_iter().enumerate() {
        let cfg = common::scenario(dims.0, dims.1, dims.2, dims.3, i as u64);
        for s in 0..10 {
            let ch = common::channel(&cfg, s);
            let phi: Vec<f64> = (0..ch.l).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let c = common::zf_check(&ch, &phi);
            assert!(c.zf_leak < 1e-8, "{dims:?}: zf leak {:e}", c.zf_leak);
            assert!(c.an_leak < 1e-8, "{dims:?}: AN leak {:e}", c.an_leak);
            assert!(c.mrt_cos > 1.0 - 1e-10, "{dims:?}: cos {}", c.mrt_cos);
            assert!(c.unit < 1e-12, "{dims:?}: norm {:e}", c.unit);
        }
    }
}

#[test]
fn outputs_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = common::scenario(4, 4, 2, 2, 4);
    for head in [HeadKind::ModelBased, HeadKind::BeamDirect] {
        let m = model(head, ModelFlags::default(), 1);
        for s in 0..10 {
            let ch = common::channel(&cfg, s);
            let dev = common::equivariance_error(&m, &ch, &budget(), &mut rng);
            assert!(dev < 1e-9, "{head:?}: {dev:e}");
        }
    }
}

#[test]
fn designs_are_feasible_for_any_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = common::scenario(4, 4, 2, 2, 6);
    let chs = sample_many(&cfg, 0, 16).unwrap();
    let refs: Vec<_> = chs.iter().collect();
    for head in [HeadKind::ModelBased, HeadKind::BeamDirect] {
        for seed in 0..4 {
            let m = model(head, ModelFlags::default(), seed);
            let p_max = 10f64.powf(rng.random_range(-4.0..1.0));
            for d in m.infer(&refs, &PowerBudget { p_max, p_c: 0.5 }).unwrap() {
                assert!(d.total_power() <= p_max * (1.0 + 1e-9));
                d.check_feasible(p_max * (1.0 + 1e-9)).unwrap();
            }
        }
    }
}

#[test]
fn one_model_serves_every_size() {
    let m = model(HeadKind::ModelBased, ModelFlags::default(), 0);
    let count = m.params.scalar_count();
    for (l, k, mm) in [(4, 2, 2), (4, 1, 2), (4, 3, 0), (2, 2, 2), (7, 2, 2), (4, 2, 1), (4, 1, 3)] {
        let ch = common::channel(&common::scenario(4, l, k, mm, 0), 0);
        let d = m.infer(&[&ch], &budget()).unwrap().remove(0);
        assert_eq!((d.phi.len(), d.w.len(), d.z.len()), (l, k, mm));
    }
    assert_eq!(m.params.scalar_count(), count);
}

#[test]
fn batched_and_single_forwards_agree() {
    let cfg = common::scenario(4, 4, 2, 2, 9);
    let chs = sample_many(&cfg, 0, 5).unwrap();
    let refs: Vec<_> = chs.iter().collect();
    let m = model(HeadKind::ModelBased, ModelFlags::default(), 2);
    let batched = m.infer(&refs, &budget()).unwrap();
    for (ch, b) in chs.iter().zip(&batched) {
        let single = m.infer(&[ch], &budget()).unwrap().remove(0);
        for (x, y) in single.w.iter().flatten().zip(b.w.iter().flatten()) {
            assert!((x - y).norm() < 1e-12);
        }
        for (x, y) in single.phi.iter().zip(&b.phi) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn without_the_first_stage_phases_are_zero() {
    let flags = ModelFlags {
        residual: true,
        two_stage: false,
    };
    let m = model(HeadKind::BeamDirect, flags, 0);
    let ch = common::channel(&common::scenario(4, 4, 2, 2, 0), 0);
    let d = m.infer(&[&ch], &budget()).unwrap().remove(0);
    assert!(d.phi.iter().all(|p| *p == 0.0));
}

#[test]
fn residual_switch_changes_the_output() {
    let ch = common::channel(&common::scenario(4, 4, 2, 2, 0), 0);
    let on = model(HeadKind::BeamDirect, ModelFlags::default(), 0);
    let off = model(
        HeadKind::BeamDirect,
        ModelFlags {
            residual: false,
            two_stage: true,
        },
        0,
    );
    assert_eq!(on.params.scalar_count(), off.params.scalar_count());
    let a = on.infer(&[&ch], &budget()).unwrap().remove(0);
    let b = off.infer(&[&ch], &budget()).unwrap().remove(0);
    assert_ne!(a.w, b.w);
}

#[test]
fn configuration_errors() {
    let mut dims = common::tiny_dims();
    dims.stage2_layers[0] = LayerWidth::new(1, 4);
    assert!(HgnnModel::new(4, dims, HeadKind::BeamDirect, ModelFlags::default(), InputScaling::unit(), 0).is_err());
    assert!(HgnnModel::new(0, common::tiny_dims(), HeadKind::BeamDirect, ModelFlags::default(), InputScaling::unit(), 0).is_err());
    let m = model(HeadKind::ModelBased, ModelFlags::default(), 0);
    // Zero forcing with AN nulling needs k + 1 <= n_t.
    let crowded = common::channel(&common::scenario(4, 4, 4, 1, 0), 0);
    assert!(m.infer(&[&crowded], &budget()).is_err());
    let wrong_nt = common::channel(&common::scenario(3, 4, 2, 2, 0), 0);
    assert!(m.infer(&[&wrong_nt], &budget()).is_err());
    assert!("sideways".parse::<HeadKind>().is_err());
    assert_eq!("beam-direct".parse::<HeadKind>().unwrap(), HeadKind::BeamDirect);
}

#[test]
fn initialization_is_seeded() {
    let a = model(HeadKind::ModelBased, ModelFlags::default(), 4);
    let b = model(HeadKind::ModelBased, ModelFlags::default(), 4);
    let c = model(HeadKind::ModelBased, ModelFlags::default(), 5);
    let vals = |m: &HgnnModel| m.params.iter().flat_map(|(_, p)| p.value.to_vec()).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}
