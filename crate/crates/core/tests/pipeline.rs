use gvi_abm::config::RunConfig;
use gvi_abm::flow::{CheckpointMeta, FlowModel, Prior};
use gvi_abm::gvi::StopReason;
use gvi_abm::pipeline;
use gvi_abm::population::Population;
use gvi_abm::predictive::{self, Band, ThetaSource};
use gvi_abm::simulator::Trajectory;
use gvi_abm::Error;

const SMALL: &str = r#"
seed = 5

[population]
n_agents = 500

[simulator]
horizon = 10
seed_fraction = 0.02

[flow]
hidden = [16, 16]

[kl]
samples = 300

[train]
batch_size = 3
validation_batch_size = 2
max_epochs = 4
budget = 200
learning_rate = 0.01
"#;

fn small() -> RunConfig {
    RunConfig::parse(SMALL).unwrap()
}

#[test]
fn calibration_is_a_pure_function_of_config_and_data() {
    let cfg = small();
    let pop = pipeline::population(&cfg).unwrap();
    let sim = pipeline::simulator(&cfg, pop.clone()).unwrap();
    let truth = pipeline::generate_truth(&cfg, &sim, [0.9, 0.6, 0.3]).unwrap();
    assert_eq!(truth.horizon(), 10);

    let a = pipeline::calibrate(&cfg, pop.clone(), &truth, |_| {}).unwrap();
    let mut epochs = Vec::new();
    let b = pipeline::calibrate(&cfg, pop, &truth, |r| epochs.push(r.epoch)).unwrap();

    assert_eq!(epochs, vec![1, 2, 3, 4]);
    assert_eq!(a.summary.stop_reason, StopReason::MaxEpochs);
    assert_eq!(a.summary.sims_used, 4 * (3 + 2));
    let losses = |c: &pipeline::Calibration| c.outcome.log.iter().map(|r| r.total_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.summary.posterior.means, b.summary.posterior.means);
    assert!(a.summary.posterior.means.iter().all(|m| *m > 0.0 && *m < 2.0));
}

#[test]
fn calibration_rejects_a_series_of_the_wrong_length() {
    let cfg = small();
    let pop = pipeline::population(&cfg).unwrap();
    let short = Trajectory {
        new_infections: vec![1.0; 9],
        log_series: vec![2f64.ln(); 9],
    };
    assert!(matches!(pipeline::calibrate(&cfg, pop, &short, |_| {}), Err(Error::Contract(_))));
}

#[test]
fn truth_and_population_files_round_trip() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let pop = pipeline::population(&cfg).unwrap();
    pop.save(dir.path().join("pop.txt")).unwrap();
    let loaded = std::sync::Arc::new(Population::load(dir.path().join("pop.txt")).unwrap());
    assert_eq!(loaded.config_hash(), cfg.population.hash());

    let beta = [1.1, 0.5, 0.7];
    let direct = pipeline::generate_truth(&cfg, &pipeline::simulator(&cfg, pop).unwrap(), beta).unwrap();
    let via_file = pipeline::generate_truth(&cfg, &pipeline::simulator(&cfg, loaded).unwrap(), beta).unwrap();
    assert_eq!(direct, via_file);

    let path = dir.path().join("truth.csv");
    direct.write_csv(&path).unwrap();
    let read = Trajectory::read_csv(&path).unwrap();
    for (x, y) in read.log_series.iter().zip(&direct.log_series) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_preserves_density_and_predictive_draws() {
    let cfg = small();
    let pop = pipeline::population(&cfg).unwrap();
    let sim = pipeline::simulator(&cfg, pop.clone()).unwrap();
    let truth = pipeline::generate_truth(&cfg, &sim, [0.9, 0.6, 0.3]).unwrap();
    let flow = pipeline::calibrate(&cfg, pop, &truth, |_| {}).unwrap().outcome.best;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.json");
    let meta = CheckpointMeta {
        epoch: 2,
        loss: Some(1.5),
        label: "best".into(),
    };
    flow.save(&path, meta.clone()).unwrap();
    let (loaded, read_meta) = FlowModel::load(&path, Some(&cfg.flow)).unwrap();
    assert_eq!(read_meta, meta);
    for beta in [[0.2, 1.7, 0.9], [1.0, 1.0, 1.0], [1.9, 0.1, 0.4]] {
        assert_eq!(flow.log_prob(beta).unwrap().to_bits(), loaded.log_prob(beta).unwrap().to_bits());
    }

    let thetas = |f: &FlowModel| predictive::draw_thetas(ThetaSource::Flow, Some(f), &Prior::default(), 20, 9).unwrap();
    assert_eq!(thetas(&flow), thetas(&loaded));
    let trajectories = predictive::simulate(&sim, &thetas(&loaded), 9).unwrap();
    assert_eq!(trajectories.len(), 20);
    let band = Band::of(&trajectories, 0.05, 0.95).unwrap();
    assert!(band.lower.iter().zip(&band.upper).all(|(lo, hi)| lo <= hi));
    for t in &trajectories {
        assert!(band.coverage(&t.log_series) > 0.0);
    }
}
