use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::sigmoid;

fn small_config() -> FlowConfig {
    FlowConfig {
        transforms: 3,
        hidden: vec![16, 16],
        spline: SplineSpec::default(),
    }
}

/// Flow with every parameter (output layers included) drawn at random.
fn random_flow(config: FlowConfig, seed: u64, scale: f64) -> FlowModel {
    let mut flow = FlowModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for tensor in flow.params_mut() {
        for v in tensor.iter_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
    flow
}

fn random_raw(spec: &SplineSpec, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
    (0..spec.n_params()).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn zero_parameters_give_identity_spline() {
    let spec = SplineSpec::default();
    let knots = spec.knots(&vec![0.0; spec.n_params()]).unwrap();
    for x in [-6.0, -5.0, -2.3, 0.0, 0.7, 4.999, 5.0, 7.5] {
        let (y, logdet) = spec.forward(&knots, x);
        assert!((y - x).abs() < 1e-12, "{x} -> {y}");
        assert!(logdet.abs() < 1e-12);
    }
}

#[test]
fn knots_are_strictly_increasing_with_positive_derivatives() {
    let spec = SplineSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let knots = spec.knots(&random_raw(&spec, &mut rng, 8.0)).unwrap();
        assert_eq!(knots.xs.len(), spec.bins + 1);
        assert_eq!((knots.xs[0], knots.xs[spec.bins]), (-5.0, 5.0));
        assert_eq!((knots.ys[0], knots.ys[spec.bins]), (-5.0, 5.0));
        assert!(knots.xs.windows(2).all(|w| w[1] > w[0]));
        assert!(knots.ys.windows(2).all(|w| w[1] > w[0]));
        assert!(knots.ds.iter().all(|&d| d > 0.0));
    }
}

#[test]
fn spline_round_trip_on_random_points() {
    let spec = SplineSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let knots = spec.knots(&random_raw(&spec, &mut rng, 3.0)).unwrap();
        let x: f64 = rng.random_range(-6.0..6.0);
        let (y, logdet) = spec.forward(&knots, x);
        let (back, inv_logdet) = spec.inverse(&knots, y);
        worst = worst.max((back - x).abs());
        assert!((logdet - inv_logdet).abs() < 1e-8);
    }
    assert!(worst < 1e-8, "worst round-trip error {worst}");
}

#[test]
fn spline_log_derivative_matches_finite_differences() {
    let spec = SplineSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-6;
    for _ in 0..500 {
        let knots = spec.knots(&random_raw(&spec, &mut rng, 3.0)).unwrap();
        let x: f64 = rng.random_range(-4.9..4.9);
        // stay off knots, where only one-sided derivatives agree
        if knots.xs.iter().any(|k| (k - x).abs() < 10.0 * h) {
            continue;
        }
        let fd = (spec.forward(&knots, x + h).0 - spec.forward(&knots, x - h).0) / (2.0 * h);
        let (_, logdet) = spec.forward(&knots, x);
        assert!(fd > 0.0);
        assert!((fd.ln() - logdet).abs() < 1e-5, "x = {x}: fd {} vs {logdet}", fd.ln());
    }
}

#[test]
fn non_finite_conditioner_output_is_numeric_error() {
    let spec = SplineSpec::default();
    let mut raw = vec![0.0; spec.n_params()];
    raw[4] = f64::NAN;
    assert!(matches!(spec.knots(&raw), Err(Error::Numeric(_))));
    let tape = Tape::new();
    let x = DualTensor::vector(vec![0.5]);
    let raw = DualTensor::constant(vec![1, spec.n_params()], raw).unwrap();
    assert!(matches!(spec.forward_tape(&tape, &x, &raw), Err(Error::Numeric(_))));
}

#[test]
fn tape_spline_matches_scalar_spline() {
    let spec = SplineSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 300;
    let raw: Vec<f64> = (0..n).flat_map(|_| random_raw(&spec, &mut rng, 3.0)).collect();
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-7.0..7.0)).collect();
    let tape = Tape::new();
    let (y, logdet) = spec
        .forward_tape(
            &tape,
            &DualTensor::vector(xs.clone()),
            &DualTensor::constant(vec![n, spec.n_params()], raw.clone()).unwrap(),
        )
        .unwrap();
    for i in 0..n {
        let knots = spec.knots(&raw[i * spec.n_params()..(i + 1) * spec.n_params()]).unwrap();
        let (ys, ls) = spec.forward(&knots, xs[i]);
        assert!((y.values()[i] - ys).abs() < 1e-12);
        assert!((logdet.values()[i] - ls).abs() < 1e-10);
    }
}

#[test]
fn tape_spline_gradients_match_finite_differences() {
    let spec = SplineSpec {
        bins: 4,
        ..SplineSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = spec.n_params();
    let n = 3;
    let raw = random_raw(&spec, &mut rng, 1.5);
    let xs = [-1.7, 0.4, 6.0];
    let mut point = raw.clone();
    point.extend(xs);
    let f = |tape: &Tape, v: &DualTensor| -> Result<DualTensor> {
        let raw1 = tape.slice(v, 0, vec![1, p])?;
        let raw = tape.index_select(&raw1, &Arc::new((0..n).flat_map(|_| 0..p).collect()), vec![n, p])?;
        let x = tape.slice(v, p, vec![n])?;
        let (y, logdet) = spec.forward_tape(tape, &x, &raw)?;
        Ok(tape.add(&tape.sum(&tape.mul(&y, &y)?), &tape.sum(&logdet))?)
    };
    let err = crate::autodiff::grad_check(f, &[p + n], &point, 1e-6).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn conditioner_is_autoregressive() {
    let made = Made::new(3, &[16, 16], 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = made.init(&mut rng);
    for v in params.iter_mut().flatten() {
        *v += rng.random_range(-0.5..0.5);
    }
    let base = [0.3, -0.8, 1.1];
    let out = made.forward(&base, 1, &params);
    for j in 0..3 {
        let mut moved = base;
        moved[j] += 2.0;
        let out2 = made.forward(&moved, 1, &params);
        // outputs of coordinates 0..=j cannot see input j
        for o in 0..(j + 1) * 5 {
            assert_eq!(out[o], out2[o], "output {o} depends on input {j}");
        }
    }
    let sensitive = (5..15).any(|o| out[o] != made.forward(&[1.0, -0.8, 1.1], 1, &params)[o]);
    assert!(sensitive);
}

#[test]
fn identity_flow_samples_are_standard_normal_in_z() {
    let flow = FlowModel::new(FlowConfig::default(), 5).unwrap();
    let tape = Tape::new();
    let pass = flow.pass(&tape, &flow.param_tensors(), &FlowModel::base_noise(10_000, 99)).unwrap();
    for j in 0..DIM {
        let col: Vec<f64> = pass.z.values().iter().skip(j).step_by(DIM).cloned().collect();
        let mean = crate::stats::mean(&col);
        let var = crate::stats::variance(&col);
        assert!(mean.abs() < 0.05, "coordinate {j}: mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "coordinate {j}: variance {var}");
    }
}

#[test]
fn samples_stay_inside_support_and_log_density_is_consistent() {
    for flow in [
        FlowModel::new(small_config(), 1).unwrap(),
        random_flow(small_config(), 2, 0.3),
        random_flow(FlowConfig::default(), 3, 0.1),
    ] {
        let draws = flow.sample(100, 7).unwrap();
        let betas: Vec<[f64; 3]> = draws.iter().map(|d| d.beta).collect();
        let log_q = flow.log_prob_batch(&betas).unwrap();
        for (d, lq) in draws.iter().zip(log_q) {
            assert!(d.beta.iter().all(|&b| b > 0.0 && b < 2.0));
            assert_eq!(d.theta.constrained().map(|b| (b * 1e9).round()), d.beta.map(|b| (b * 1e9).round()));
            assert!((d.log_q - lq).abs() < 1e-8, "{} vs {lq}", d.log_q);
        }
    }
}

#[test]
fn flow_round_trip_recovers_base_points() {
    let flow = random_flow(FlowConfig::default(), 21, 0.1);
    let eps = FlowModel::base_noise(1000, 4);
    let tape = Tape::new();
    let pass = flow.pass(&tape, &flow.param_tensors(), &eps).unwrap();
    let betas: Vec<[f64; 3]> = pass.beta.values().chunks_exact(3).map(|b| [b[0], b[1], b[2]]).collect();
    let (z0, _) = flow.invert(&betas).unwrap();
    let worst = z0.iter().zip(&eps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "worst round-trip error {worst}");
}

#[test]
fn identity_flow_log_density_at_centre() {
    let flow = FlowModel::new(FlowConfig::default(), 0).unwrap();
    // N(0; I₃) over |dβ/dz| = 2 · ¼ per coordinate
    let expected = -1.5 * (2.0 * PI).ln() - 3.0 * (0.5f64).ln();
    assert!((expected - (-0.677374)).abs() < 1e-6);
    let got = flow.log_prob([1.0, 1.0, 1.0]).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn identity_flow_integrates_to_one() {
    let flow = FlowModel::new(FlowConfig::default(), 0).unwrap();
    let m = 40;
    let h = 2.0 / m as f64;
    let mid = |i: usize| (i as f64 + 0.5) * h;
    let grid: Vec<[f64; 3]> = (0..m)
        .flat_map(|a| (0..m).flat_map(move |b| (0..m).map(move |c| [mid(a), mid(b), mid(c)])))
        .collect();
    let total: f64 = flow.log_prob_batch(&grid).unwrap().iter().map(|lq| lq.exp()).sum::<f64>() * h.powi(3);
    assert!((total - 1.0).abs() < 0.02, "integral {total}");
}

#[test]
fn squash_inverse_recovers_z() {
    for i in 0..=100 {
        let z = -5.0 + 0.1 * i as f64;
        let beta = BETA_MAX * sigmoid(z);
        let back = beta.ln() - (BETA_MAX - beta).ln();
        assert!((back - z).abs() < 1e-10);
        let jac = BETA_MAX * sigmoid(z) * (1.0 - sigmoid(z));
        assert!((squash_log_jacobian(z) - jac.ln()).abs() < 1e-12);
    }
}

#[test]
fn log_prob_rejects_boundary_points() {
    let flow = FlowModel::new(small_config(), 0).unwrap();
    for beta in [[0.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, -0.1], [f64::NAN, 1.0, 1.0]] {
        assert!(matches!(flow.log_prob(beta), Err(Error::Domain { .. })), "{beta:?}");
    }
}

#[test]
fn sample_with_zero_count_is_contract_error() {
    let flow = FlowModel::new(small_config(), 0).unwrap();
    assert!(matches!(flow.sample(0, 1), Err(Error::Contract(_))));
}

#[test]
fn prior_density_and_draws() {
    let prior = Prior::default();
    assert!((prior.log_density(&[0.5, 1.0, 1.9]) + 3.0 * 2f64.ln()).abs() < 1e-15);
    assert_eq!(prior.log_density(&[0.5, 2.1, 1.0]), f64::NEG_INFINITY);
    let draws = prior.sample(1000, 3);
    assert!(draws.iter().flatten().all(|&b| b > 0.0 && b < 2.0));
    let mean = crate::stats::mean(&draws.iter().map(|b| b[0]).collect::<Vec<_>>());
    assert!((mean - 1.0).abs() < 0.1);
}

#[test]
fn reparameterized_gradient_matches_finite_differences() {
    let flow = random_flow(FlowConfig::default(), 31, 0.05);
    let eps = FlowModel::base_noise(10_000, 17);
    let objective = |flow: &FlowModel| -> f64 {
        let tape = Tape::new();
        let pass = flow.pass(&tape, &flow.param_tensors(), &eps).unwrap();
        pass.beta.values().iter().map(|b| b * b).sum::<f64>() / 10_000.0
    };
    let tape = Tape::new();
    let params = flow.bind(&tape);
    let pass = flow.pass(&tape, &params, &eps).unwrap();
    let loss = tape.mul_scalar(&tape.sum(&tape.mul(&pass.beta, &pass.beta).unwrap()), 1.0 / 10_000.0);
    let grads = tape.backward(&loss).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 6 {
        let t = rng.random_range(0..flow.params().len());
        let i = rng.random_range(0..flow.params()[t].len());
        let analytic = grads.wrt(&params[t])[i];
        if analytic.abs() < 1e-4 {
            continue; // masked or dead unit
        }
        let mut plus = flow.clone();
        plus.params_mut()[t][i] += h;
        let mut minus = flow.clone();
        minus.params_mut()[t][i] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-3, "param ({t}, {i}): analytic {analytic} vs numeric {numeric}");
        checked += 1;
    }
}

#[test]
fn checkpoint_round_trip_and_architecture_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.json");
    let flow = random_flow(small_config(), 4, 0.2);
    let meta = CheckpointMeta {
        epoch: 12,
        loss: Some(3.5),
        label: "best".into(),
    };
    flow.save(&path, meta.clone()).unwrap();
    let (loaded, loaded_meta) = FlowModel::load(&path, Some(&small_config())).unwrap();
    assert_eq!(loaded.params(), flow.params());
    assert_eq!(loaded_meta, meta);

    let other = FlowConfig::default();
    assert!(matches!(
        FlowModel::load(&path, Some(&other)),
        Err(Error::ArchitectureMismatch { .. })
    ));

    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"bins\":8", "\"bins\":6", 1);
    assert_ne!(tampered, text);
    std::fs::write(&path, tampered).unwrap();
    assert!(matches!(FlowModel::load(&path, None), Err(Error::ArchitectureMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spline_is_strictly_increasing(seed in any::<u64>(), a in -6.0f64..6.0, gap in 1e-6f64..1.0) {
        let spec = SplineSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let knots = spec.knots(&random_raw(&spec, &mut rng, 5.0)).unwrap();
        let (ya, la) = spec.forward(&knots, a);
        let (yb, _) = spec.forward(&knots, a + gap);
        prop_assert!(yb > ya);
        prop_assert!(la.is_finite());
    }

    #[test]
    fn change_of_variables_holds_along_sampled_path(seed in any::<u64>()) {
        let flow = random_flow(small_config(), seed, 0.3);
        let eps = FlowModel::base_noise(8, seed);
        let tape = Tape::new();
        let pass = flow.pass(&tape, &flow.param_tensors(), &eps).unwrap();
        let betas: Vec<[f64; 3]> = pass.beta.values().chunks_exact(3).map(|b| [b[0], b[1], b[2]]).collect();
        let (z0, log_q) = flow.invert(&betas).unwrap();
        for i in 0..8 {
            prop_assert!((log_q[i] - pass.log_q.values()[i]).abs() < 1e-8);
            for j in 0..3 {
                prop_assert!((z0[i * 3 + j] - eps[i * 3 + j]).abs() < 1e-8);
            }
        }
    }
}
