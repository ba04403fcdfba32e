#![allow(clippy::field_reassign_with_default)]

use whalefl::harness::{
    run_experiment, DataSource, ExperimentConfig, Seeds, Simulation, Strategy, ThresholdMode,
};
use whalefl::scheduler::{select, UtilityTerms};
use whalefl::subnet::width_mask;
use whalefl::sysmodel::{gen_trace, MarkovConfig};
use whalefl::Error;

fn small(strategy: Strategy, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = strategy.name().into();
    cfg.strategy = strategy;
    cfg.rounds = rounds;
    cfg.model.widths = vec![20, 32, 10];
    cfg.data.source = DataSource::Blobs;
    cfg.data.train_limit = None;
    cfg.data.blob_train_per_class = 60;
    cfg.data.blob_test_per_class = 20;
    cfg.target_accuracy = None;
    cfg.stop_at_target = false;
    cfg.seeds = Seeds::from_base(3);
    cfg
}

#[test]
fn fedavg_and_heterofl_agree_when_every_cap_is_full_width() {
    let mut f = small(Strategy::Fedavg, 4);
    f.fleet.max_levels = [1; 5];
    let mut h = f.clone();
    h.strategy = Strategy::Heterofl;
    let (a, b) = (run_experiment(&f).unwrap(), run_experiment(&h).unwrap());
    assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
}

#[test]
fn heterofl_trains_every_client_at_its_cap() {
    let mut sim = Simulation::new(small(Strategy::Heterofl, 3)).unwrap();
    sim.run().unwrap();
    for r in &sim.log().rounds {
        for c in &r.clients {
            assert_eq!(c.level, sim.clients()[c.client].device.max_level);
        }
    }
}

#[test]
fn whale_levels_match_a_replayed_scheduler() {
    let mut cfg = small(Strategy::Whale, 4);
    cfg.scheduler.threshold_mode = ThresholdMode::Fixed;
    cfg.scheduler.round_seconds = 0.01;
    cfg.scheduler.u_threshold = 30.0;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run_round().unwrap();
    let mut distinct = std::collections::BTreeSet::new();
    for round in 2..=4 {
        let expected: Vec<_> = (0..sim.clients().len())
            .map(|c| {
                let view = sim.unit_view(c, round).unwrap();
                select(
                    &view,
                    &sim.clients()[c].history,
                    round,
                    &sim.scheduler_params(),
                    UtilityTerms::Both,
                    None,
                )
                .unwrap()
            })
            .collect();
        let record = sim.run_round().unwrap().clone();
        for (e, got) in expected.iter().zip(&record.clients) {
            assert_eq!(e.level, got.level, "round {round} client {}", got.client);
            assert_eq!(Some(e.u_n), got.u_n);
            distinct.insert(got.level);
        }
    }
    assert!(
        distinct.len() > 1,
        "scheduler never varied the level: {distinct:?}"
    );
}

#[test]
fn weights_outside_every_submodel_keep_their_initial_value() {
    let mut cfg = small(Strategy::Heterofl, 3);
    cfg.fleet.max_levels = [3; 5];
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    let before = sim.global().clone();
    sim.run().unwrap();
    let after = sim.global();
    let spec = cfg.scheduler.level_spec();
    let arch = cfg.arch().unwrap();
    let kept = width_mask(&arch, 3, &spec).unwrap().kept(1).to_vec();
    let (w0, w1) = (&before.layers()[0].weight, &after.layers()[0].weight);
    for j in 0..arch.hidden_widths()[0] {
        let moved = w0.row(j) != w1.row(j);
        assert_eq!(moved, kept.contains(&j), "hidden neuron {j}");
    }
}

#[test]
fn partial_participation_samples_the_right_number_of_clients() {
    let mut cfg = small(Strategy::Whale, 5);
    cfg.train.participation = 0.3;
    let log = run_experiment(&cfg).unwrap();
    let mut sets = std::collections::BTreeSet::new();
    for r in &log.rounds {
        let ids: Vec<usize> = r.clients.iter().map(|c| c.client).collect();
        assert_eq!(ids.len(), 6);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        sets.insert(ids);
    }
    assert!(sets.len() > 1);
}

#[test]
fn output_does_not_depend_on_the_thread_count() {
    let cfg = small(Strategy::WhaleDropout, 3);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).unwrap().to_csv_string().unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn every_strategy_runs_and_logs_each_client() {
    for s in Strategy::ALL {
        let log = run_experiment(&small(s, 2)).unwrap();
        assert_eq!(log.rounds.len(), 2, "{s}");
        assert!(log
            .rounds
            .iter()
            .all(|r| r.clients.len() == 20 && r.test_acc.is_finite()));
        assert!(log.rounds[1].cum_time_s > log.rounds[0].cum_time_s);
    }
}

#[test]
fn zero_rounds_is_a_config_error() {
    let cfg = small(Strategy::Whale, 0);
    match run_experiment(&cfg) {
        Err(Error::InvalidConfig(msgs)) => assert!(msgs.iter().any(|m| m.contains("rounds"))),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn divergence_names_the_client_and_round() {
    let mut cfg = small(Strategy::Fedavg, 3);
    cfg.train.learning_rate = 1e300;
    // the second local step runs on the blown-up weights
    cfg.train.local_epochs = 2;
    match run_experiment(&cfg) {
        Err(Error::ClientFailure { round, .. }) => assert_eq!(round, 1),
        other => panic!("expected a client failure, got {other:?}"),
    }
}

#[test]
fn markov_chains_visit_states_at_the_stationary_rate() {
    let cfg = MarkovConfig::default();
    let rounds = 100_000;
    let trace = gen_trace(1, rounds, 11, &cfg).unwrap();
    let mut link = [0usize; 3];
    let mut load = [0usize; 3];
    for r in 1..=rounds {
        let e = trace.at(r, 0).unwrap();
        // fading keeps the three link bands disjoint: [56, 80], [14, 20], [7, 10] Mbit/s
        let l = if e.link_bps > 40e6 {
            0
        } else if e.link_bps > 12e6 {
            1
        } else {
            2
        };
        link[l] += 1;
        load[cfg
            .compute_levels
            .iter()
            .position(|&m| m == e.compute_multiplier)
            .unwrap()] += 1;
    }
    for n in link.into_iter().chain(load) {
        let f = n as f64 / rounds as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.03, "frequency {f}");
    }
}
