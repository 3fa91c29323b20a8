use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::population::{AgeClass, PopulationConfig};
use crate::stats;

fn population(n: usize, seed: u64) -> Arc<Population> {
    let cfg = PopulationConfig {
        n_agents: n,
        ..PopulationConfig::default()
    };
    Arc::new(Population::synthesize(&cfg, seed).unwrap())
}

#[test]
fn profile_shape() {
    let (a, d) = (2.0, 14.0);
    assert_eq!(infectious_profile(a, a, d), 1.0);
    assert_eq!(infectious_profile(0.0, a, d), 0.0);
    assert_eq!(infectious_profile(-1.0, a, d), 0.0);
    assert_eq!(infectious_profile(14.5, a, d), 0.0);
    let expected = 2.0 * (-1.0f64).exp();
    assert!((infectious_profile(4.0, a, d) - expected).abs() < 1e-15);
    assert!((expected - 0.735759).abs() < 1e-6);
    for s in 1..=14 {
        assert!(infectious_profile(s as f64, a, d) <= 1.0);
    }
}

#[test]
fn infection_probability_cases() {
    assert_eq!(infection_probability(1.0, 0.9, 0.5, 0.0).unwrap(), 0.0);
    assert_eq!(infection_probability(1.0, 0.0, 0.5, 3.0).unwrap(), 0.0);
    let p = infection_probability(1.0, 0.9, 0.5, 2.0).unwrap();
    assert!((p - (1.0 - (-0.9f64).exp())).abs() < 1e-15);
    assert!((p - 0.593430).abs() < 1e-6);
    // load exp(-1/2) as a stand-in infectious weight
    let p = infection_probability(1.0, 0.9, 0.5, 0.606531).unwrap();
    assert!((p - 0.238861).abs() < 1e-6, "{p}");
    assert!(matches!(infection_probability(1.0, -0.1, 0.5, 1.0), Err(Error::Domain { .. })));
}

#[test]
fn relaxed_bernoulli_symmetry_point() {
    let tape = Tape::new();
    let p = tape.var(vec![1], vec![0.5]).unwrap();
    let draw = relaxed_bernoulli(&tape, &p, &[0.5], 0.1).unwrap();
    assert_eq!(draw.soft.values(), &[0.5]);
    assert_eq!(draw.hard, vec![0.0]);

    // dy/dp = (σ'(0)/τ) · dlogit/dp = 2.5 · 1/(p(1-p))
    let g = tape.backward(&tape.sum(&draw.soft)).unwrap().wrt(&p)[0];
    let dy_dlogit = g * 0.5 * 0.5;
    assert!((dy_dlogit - 2.5).abs() < 1e-12, "{dy_dlogit}");
}

#[test]
fn relaxed_bernoulli_marginal_is_exact() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in [0.1, 0.5, 0.9] {
        let u: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
        let tape = Tape::new();
        let probs = DualTensor::vector(vec![p; n]);
        let draw = relaxed_bernoulli(&tape, &probs, &u, 0.1).unwrap();
        let freq = draw.hard.iter().sum::<f64>() / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "p={p}: freq={freq}");
    }
}

#[test]
fn relaxed_bernoulli_rejects_bad_temperature() {
    let tape = Tape::new();
    let p = DualTensor::vector(vec![0.3]);
    assert!(matches!(relaxed_bernoulli(&tape, &p, &[0.5], 0.0), Err(Error::Config { .. })));
}

#[test]
fn theta_round_trip() {
    let theta = ThetaVector::from_constrained([0.9, 0.6, 0.3]).unwrap();
    let back = theta.constrained();
    for (a, b) in back.iter().zip([0.9, 0.6, 0.3]) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(ThetaVector::from_constrained([2.0, 0.5, 0.5]).is_err());
    assert!(ThetaVector::from_constrained([0.0, 0.5, 0.5]).is_err());
}

#[test]
fn zero_transmission_means_no_new_infections() {
    let sim = Simulator::new(population(1000, 1), SimConfig::default()).unwrap();
    let out = sim.run_values([1e-12; 3], 5).unwrap();
    assert!(out.counts.values().iter().all(|&c| c == 0.0));
    assert_eq!(out.state.infected_count(), sim.n_seeds());
}

#[test]
fn fixed_seed_is_bit_identical() {
    let sim = Simulator::new(population(1000, 1), SimConfig::default()).unwrap();
    let bits = |o: &SimOutput| o.log_series.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let a = sim.run_values([0.9, 0.6, 0.3], 42).unwrap();
    let b = sim.run_values([0.9, 0.6, 0.3], 42).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.state, b.state);
}

#[test]
fn seeding_count_and_day_zero() {
    let cfg = SimConfig {
        seed_fraction: 0.0125,
        ..SimConfig::default()
    };
    let sim = Simulator::new(population(1000, 1), cfg).unwrap();
    assert_eq!(sim.n_seeds(), 13);
    let out = sim.run_values([0.5, 0.5, 0.5], 3).unwrap();
    let day0 = out.state.infection_day.iter().filter(|d| **d == Some(0)).count();
    assert_eq!(day0, 13);
}

/// Two retired agents sharing a household, one seeded: after one day the
/// other is infected iff its uniform exceeds `1 − p`, with
/// `p = 1 − exp(−ψ β Δt I(1))`.
#[test]
fn single_household_closed_form() {
    let pop = Arc::new(Population::from_records(&[(AgeClass::Retired, 0, None), (AgeClass::Retired, 0, None)], 1.0).unwrap());
    let cfg = SimConfig {
        seed_fraction: 0.1,
        horizon: 1,
        ..SimConfig::default()
    };
    let sim = Simulator::new(pop, cfg.clone()).unwrap();
    assert_eq!(sim.n_seeds(), 1);

    let profile = (0.5f64) * (0.5f64).exp();
    assert!((cfg.profile(1.0) - profile).abs() < 1e-15);
    let p = 1.0 - (-0.9 * 0.5 * profile).exp();
    assert!((p - infection_probability(1.0, 0.9, 0.5, profile).unwrap()).abs() < 1e-15);

    let mut hits = 0;
    for seed in 0..400 {
        let out = sim.run_values([0.9, 1.0, 1.0], seed).unwrap();
        let other = 1 - sim.seed_agents(seed)[0];
        let u = sim.noise(seed)[0][other];
        let expected = if u > 1.0 - p { 1.0 } else { 0.0 };
        assert_eq!(out.counts.values(), &[expected], "seed {seed}");
        hits += expected as usize;
    }
    let freq = hits as f64 / 400.0;
    assert!((freq - p).abs() < 3.0 * (p * (1.0 - p) / 400.0).sqrt(), "{freq} vs {p}");
}

#[test]
fn non_finite_hazard_names_day_and_group() {
    let pop = Arc::new(
        Population::from_records(&[(AgeClass::Child, 0, Some(0)), (AgeClass::Child, 0, Some(0)), (AgeClass::Child, 0, Some(0))], f64::MAX)
            .unwrap(),
    );
    let cfg = SimConfig {
        seed_fraction: 0.3,
        horizon: 2,
        ..SimConfig::default()
    };
    let sim = Simulator::new(pop, cfg).unwrap();
    match sim.run_values([2.0, 2.0, 2.0], 0) {
        Err(Error::Numeric(msg)) => {
            assert!(msg.contains("day 1"), "{msg}");
            assert!(msg.contains("household 0"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn rejects_out_of_support_beta() {
    let sim = Simulator::new(population(100, 1), SimConfig::default()).unwrap();
    assert!(matches!(sim.run_values([0.0, 0.5, 0.5], 0), Err(Error::Domain { .. })));
    assert!(matches!(sim.run_values([0.5, 2.5, 0.5], 0), Err(Error::Domain { .. })));
}

#[test]
fn trajectory_csv_round_trip_and_errors() {
    let traj = Trajectory::from_counts(vec![0.0, 3.0, 12.0]);
    let csv = traj.to_csv();
    assert_eq!(
        csv,
        "day,new_infections,log_new_infections\n1,0.000000,0.000000\n2,3.000000,1.386294\n3,12.000000,2.564949\n"
    );
    let back = Trajectory::parse_csv(&csv).unwrap();
    assert_eq!(back.new_infections, traj.new_infections);
    assert_eq!(back.horizon(), 3);

    let bad = "day,new_infections,log_new_infections\n1,0,0\n2,abc,1\n";
    assert!(matches!(Trajectory::parse_csv(bad), Err(Error::Parse { line: 3, .. })));
    assert!(matches!(Trajectory::parse_csv(""), Err(Error::Parse { line: 1, .. })));
    let skipped = "day,new_infections,log_new_infections\n1,0,0\n3,1,1\n";
    assert!(matches!(Trajectory::parse_csv(skipped), Err(Error::Parse { line: 3, .. })));
}

/// Averaged over noise seeds, straight-through gradients of `Σ x̃_t` agree
/// in sign with macroscopic central differences in the unconstrained space.
#[test]
fn straight_through_gradient_sign_matches_finite_differences() {
    let cfg = SimConfig {
        seed_fraction: 0.05,
        horizon: 10,
        ..SimConfig::default()
    };
    let sim = Simulator::new(population(100, 4), cfg).unwrap();
    let theta = ThetaVector::from_constrained([0.9, 0.6, 0.3]).unwrap().unconstrained();
    let delta = 0.05;
    let total = |u: [f64; 3], seed: u64| -> f64 {
        let beta = ThetaVector::from_unconstrained(u).constrained();
        sim.run_values(beta, seed).unwrap().log_series.values().iter().sum()
    };

    let seeds = 0..300u64;
    let mut analytic = [0.0; 3];
    let mut numeric = [0.0; 3];
    for seed in seeds.clone() {
        let tape = Tape::new();
        let u = tape.var(vec![3], theta.to_vec()).unwrap();
        let beta = ThetaVector::constrain(&tape, &u);
        let out = sim.run(&tape, &beta, seed).unwrap();
        let loss = tape.sum(&out.log_series);
        let g = tape.backward(&loss).unwrap().wrt(&u);
        for k in 0..3 {
            assert!(g[k].is_finite());
            analytic[k] += g[k];
            let mut up = theta;
            up[k] += delta;
            let mut down = theta;
            down[k] -= delta;
            numeric[k] += (total(up, seed) - total(down, seed)) / (2.0 * delta);
        }
    }
    for k in 0..3 {
        assert!(numeric[k].abs() > 1.0, "coordinate {k}: no finite-difference signal");
        assert_eq!(analytic[k].signum(), numeric[k].signum(), "coordinate {k}: {} vs {}", analytic[k], numeric[k]);
    }
}

#[test]
fn soft_mode_is_differentiable_and_matches_finite_differences() {
    let cfg = SimConfig {
        seed_fraction: 0.05,
        horizon: 5,
        relaxation: Relaxation::Soft,
        ..SimConfig::default()
    };
    let sim = Simulator::new(population(100, 4), cfg).unwrap();
    let theta = ThetaVector::from_constrained([0.9, 0.6, 0.3]).unwrap().unconstrained();
    let f = |tape: &Tape, u: &DualTensor| -> Result<DualTensor> {
        let beta = ThetaVector::constrain(tape, u);
        let out = sim.run(tape, &beta, 17)?;
        Ok(tape.sum(&out.log_series))
    };
    let err = crate::autodiff::grad_check(f, &[3], &theta, 1e-5).unwrap();
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conservation(n in 20usize..200, pop_seed in any::<u64>(), seed in any::<u64>(),
                    b in prop::array::uniform3(1e-6f64..2.0)) {
        let sim = Simulator::new(population(n, pop_seed), SimConfig { seed_fraction: 0.02, ..SimConfig::default() }).unwrap();
        let out = sim.run_values(b, seed).unwrap();
        let mut cumulative = out.seeds as f64;
        for (t, &c) in out.counts.values().iter().enumerate() {
            prop_assert!(c >= 0.0 && c.fract() == 0.0);
            cumulative += c;
            prop_assert!(cumulative <= n as f64);
            prop_assert_eq!(out.susceptible[t] + cumulative as usize, n);
        }
        prop_assert_eq!(out.state.infected_count(), cumulative as usize);
        for x in out.log_series.values() {
            prop_assert!(*x >= 0.0);
        }
    }

    /// Distributional monotonicity: with common random numbers, the paired
    /// mean difference of cumulative counts is not significantly negative.
    /// Single paths can dip by an agent or two because the peaked profile
    /// moves infectiousness in time.
    #[test]
    fn more_transmission_never_fewer_infections(pop_seed in any::<u64>(), seed0 in any::<u64>(),
                                                b in prop::array::uniform3(0.05f64..1.5),
                                                k in 0usize..3, bump in 0.05f64..0.5) {
        let sim = Simulator::new(population(150, pop_seed), SimConfig { seed_fraction: 0.02, ..SimConfig::default() }).unwrap();
        let mut hi = b;
        hi[k] += bump;
        let horizon = sim.config().horizon;
        let cumulative = |beta: [f64; 3], seed: u64| -> Vec<f64> {
            let mut total = 0.0;
            sim.run_values(beta, seed).unwrap().counts.values().iter().map(|c| { total += c; total }).collect()
        };
        let mut diffs = vec![Vec::new(); horizon];
        for r in 0..64u64 {
            let seed = seed0.wrapping_add(r);
            let (lo, up) = (cumulative(b, seed), cumulative(hi, seed));
            for t in 0..horizon {
                diffs[t].push(up[t] - lo[t]);
            }
        }
        for (t, d) in diffs.iter().enumerate() {
            let mean = crate::stats::mean(d);
            let se = crate::stats::std_error(d);
            prop_assert!(mean >= -3.0 * se, "day {}: mean difference {} (se {})", t + 1, mean, se);
        }
    }
}

#[test]
fn mean_epidemic_size_increases_with_beta() {
    let sim = Simulator::new(population(500, 2), SimConfig::default()).unwrap();
    let size = |b: [f64; 3]| {
        let totals: Vec<f64> = (0..20)
            .map(|s| sim.run_values(b, s).unwrap().counts.values().iter().sum())
            .collect();
        stats::mean(&totals)
    };
    assert!(size([0.3, 0.2, 0.1]) < size([0.9, 0.6, 0.3]));
}
