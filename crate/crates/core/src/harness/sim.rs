use std::sync::Arc;

use rayon::prelude::*;

use super::config::{
    Bootstrap, DataSource, ExperimentConfig, Strategy, ThresholdMode, TraceConfig,
};
use super::metrics::{ClientRecord, MetricsLog, RoundRecord};
use crate::data::{load_mnist_subset, partition_noniid, synth_blobs, Batcher, Dataset, Partition};
use crate::error::{Error, Result};
use crate::fisher::{self, FisherHistory};
use crate::nn::{Arch, Model};
use crate::scheduler::{self, ClientView, SchedulerParams, Selection, UtilityTerms};
use crate::seed::{self, Stream};
use crate::subnet::{self, Mask, MaskKind, SubModel};
use crate::sysmodel::{self, DeviceProfile, DynamicsTrace};

/// Everything a run reads but never mutates.
#[derive(Debug)]
pub struct Environment {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub fleet: Vec<DeviceProfile>,
    pub trace: DynamicsTrace,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Mnist => {
            let m = load_mnist_subset(&d.mnist_dir, d.train_limit, d.test_limit)?;
            Ok((m.train, m.test))
        }
        DataSource::Blobs => {
            let n_train = d.blob_train_per_class;
            let all = synth_blobs(
                d.blob_classes,
                n_train + d.blob_test_per_class,
                d.blob_dim,
                d.blob_spread,
                cfg.seeds.data,
            )?;
            // blobs come shuffled, so split by per-class quota
            let mut seen = vec![0usize; d.blob_classes];
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for (i, &y) in all.labels().iter().enumerate() {
                if seen[y] < n_train {
                    tr.push(i);
                } else {
                    te.push(i);
                }
                seen[y] += 1;
            }
            let pick = |idx: &[usize]| {
                Dataset::new(
                    all.inputs().select(ndarray::Axis(0), idx),
                    idx.iter().map(|&i| all.labels()[i]).collect(),
                    d.blob_classes,
                )
            };
            let mut train = pick(&tr)?;
            if let Some(l) = d.train_limit {
                train = train.head(l);
            }
            let mut test = pick(&te)?;
            if let Some(l) = d.test_limit {
                test = test.head(l);
            }
            Ok((train, test))
        }
    }
}

pub fn build_trace(cfg: &ExperimentConfig, clients: usize) -> Result<DynamicsTrace> {
    let trace = match &cfg.trace {
        TraceConfig::Markov(m) => sysmodel::gen_trace(clients, cfg.rounds, cfg.seeds.trace, m)?,
        TraceConfig::File { path } => DynamicsTrace::read_csv(path)?,
    };
    if trace.rounds() < cfg.rounds || trace.clients() < clients {
        return Err(Error::InvalidConfig(vec![format!(
            "trace covers {} rounds × {} clients, run needs {} × {clients}",
            trace.rounds(),
            trace.clients(),
            cfg.rounds
        )]));
    }
    Ok(trace)
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_datasets(cfg)?;
        Self::with_data(cfg, train, test)
    }

    /// Builds around already-loaded datasets.
    pub fn with_data(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        let fleet = sysmodel::make_fleet(&cfg.fleet)?;
        let partition = partition_noniid(&train, fleet.len(), cfg.data.sigma, cfg.seeds.partition)?;
        let trace = build_trace(cfg, fleet.len())?;
        Ok(Self {
            train,
            test,
            partition,
            fleet,
            trace,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub device: DeviceProfile,
    pub batcher: Batcher,
    pub history: FisherHistory,
}

/// Result of one client's local work in a round.
struct LocalUpdate {
    sub: SubModel,
    fisher: Vec<f64>,
}

pub struct Simulation {
    cfg: ExperimentConfig,
    arch: Arch,
    env: Arc<Environment>,
    clients: Vec<ClientState>,
    global: Model,
    round: usize,
    cum_time: f64,
    u_threshold: f64,
    calibrated: bool,
    log: MetricsLog,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let env = Arc::new(Environment::build(&cfg)?);
        Self::with_environment(cfg, env)
    }

    pub fn with_environment(cfg: ExperimentConfig, env: Arc<Environment>) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.arch()?;
        if env.train.dim() != arch.input_dim() || env.train.class_count() != arch.class_count() {
            return Err(Error::InvalidConfig(vec![format!(
                "data has dimension {} and {} classes, model is {:?}",
                env.train.dim(),
                env.train.class_count(),
                arch.widths()
            )]));
        }
        let s = &cfg.scheduler;
        let clients = env
            .fleet
            .iter()
            .enumerate()
            .map(|(id, &device)| {
                let batcher = Batcher::new(
                    env.partition.clients[id].clone(),
                    cfg.data.batch_size,
                    seed::derive(cfg.seeds.batching, Stream::Batching, &[id as u64]),
                    cfg.data.reshuffle,
                )?;
                let history =
                    FisherHistory::new(batcher.batch_count(), s.window, s.history_capacity)?;
                Ok(ClientState {
                    id,
                    device,
                    batcher,
                    history,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global = Model::init(&arch, cfg.seeds.init);
        let log = MetricsLog::new(cfg.strategy.name(), clients.len());
        Ok(Self {
            u_threshold: s.u_threshold,
            calibrated: s.threshold_mode == ThresholdMode::Fixed,
            cfg,
            arch,
            env,
            clients,
            global,
            round: 0,
            cum_time: 0.0,
            log,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn environment(&self) -> &Arc<Environment> {
        &self.env
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_log(self) -> MetricsLog {
        self.log
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Threshold in effect (after calibration, if any).
    pub fn u_threshold(&self) -> f64 {
        self.u_threshold
    }

    pub fn scheduler_params(&self) -> SchedulerParams {
        let s = &self.cfg.scheduler;
        SchedulerParams {
            beta: s.beta,
            round_seconds: s.round_seconds,
            u_threshold: self.u_threshold,
            levels: s.level_spec(),
        }
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let m = self.clients.len();
        let frac = self.cfg.train.participation;
        if frac >= 1.0 {
            return (0..m).collect();
        }
        let k = ((frac * m as f64).ceil() as usize).clamp(1, m);
        let mut rng = seed::rng(
            self.cfg.seeds.participation,
            Stream::Participation,
            &[round as u64],
        );
        let mut picked = rand::seq::index::sample(&mut rng, m, k).into_vec();
        picked.sort_unstable();
        picked
    }

    fn local_steps(&self, client: usize) -> usize {
        self.cfg.train.local_epochs * self.clients[client].batcher.batch_count()
    }

    /// Delays of the smallest subnetwork, which feed system efficiency.
    pub fn unit_view(&self, client: usize, round: usize) -> Result<ClientView> {
        let spec = self.cfg.scheduler.level_spec();
        let unit = subnet::width_mask(&self.arch, spec.levels, &spec)?;
        let c = &self.clients[client];
        let entry = self.env.trace.at(round, client)?;
        let cost = sysmodel::estimate(
            unit.param_count(),
            unit.flops_per_example(),
            self.local_steps(client),
            self.cfg.data.batch_size,
            &c.device,
            &entry,
            &self.cfg.cost,
        )?;
        Ok(ClientView {
            client,
            cap_level: c.device.max_level,
            unit_tx_seconds: cost.tx_seconds,
            unit_compute_seconds: cost.compute_seconds,
        })
    }

    fn utility_terms(&self) -> UtilityTerms {
        match self.cfg.strategy {
            Strategy::WhaleSeOnly => UtilityTerms::SystemOnly,
            Strategy::WhaleTeOnly => UtilityTerms::TrainingOnly,
            _ => UtilityTerms::Both,
        }
    }

    /// Level choice for every participant, in participant order.
    fn choose_levels(&mut self, round: usize, participants: &[usize]) -> Result<Vec<Selection>> {
        let views: Vec<ClientView> = participants
            .iter()
            .map(|&c| self.unit_view(c, round))
            .collect::<Result<_>>()?;
        let strategy = self.cfg.strategy;
        if !strategy.is_adaptive() {
            return views
                .iter()
                .map(|v| {
                    let level = match strategy {
                        Strategy::Fedavg => 1,
                        _ => v.cap_level,
                    };
                    let se = scheduler::system_efficiency(
                        v.unit_tx_seconds,
                        v.unit_compute_seconds,
                        self.cfg.scheduler.round_seconds,
                    )?;
                    Ok(Selection {
                        client: v.client,
                        level,
                        util: f64::NAN,
                        u_n: f64::NAN,
                        se,
                        te: self.clients[v.client].history.training_efficiency(round),
                    })
                })
                .collect();
        }

        let terms = self.utility_terms();
        let bootstrap = match self.cfg.scheduler.bootstrap {
            Bootstrap::Cap => 1,
            Bootstrap::Level(l) => l,
        };
        if !self.calibrated {
            // Calibrate on the first round where utilities are defined.
            let mut max_util: f64 = 0.0;
            let mut any = false;
            for v in &views {
                let h = &self.clients[v.client].history;
                if terms != UtilityTerms::SystemOnly && h.windowed(round).next().is_none() {
                    continue;
                }
                let s = scheduler::select(v, h, round, &self.scheduler_params(), terms, None)?;
                max_util = max_util.max(s.util);
                any = true;
            }
            if any && max_util > 0.0 {
                self.u_threshold = self.cfg.scheduler.calibration_scale * max_util;
                self.calibrated = true;
            }
        }
        let params = self.scheduler_params();
        views
            .iter()
            .map(|v| {
                scheduler::select(
                    v,
                    &self.clients[v.client].history,
                    round,
                    &params,
                    terms,
                    Some(bootstrap),
                )
            })
            .collect()
    }

    fn build_mask(&self, round: usize, client: usize, level: usize) -> Result<Mask> {
        let spec = self.cfg.scheduler.level_spec();
        match self.cfg.strategy.mask_kind() {
            MaskKind::Width => subnet::width_mask(&self.arch, level, &spec),
            MaskKind::Dropout => {
                let mut rng = seed::rng(
                    self.cfg.seeds.dropout,
                    Stream::Dropout,
                    &[round as u64, client as u64],
                );
                subnet::dropout_mask(&self.arch, level, &spec, &mut rng)
            }
            MaskKind::Rolling => subnet::rolling_mask(&self.arch, level, &spec, round - 1),
        }
    }

    fn train_client(&self, round: usize, client: usize, mask: &Mask) -> Result<LocalUpdate> {
        let state = &self.clients[client];
        let mut sub = subnet::extract(&self.global, mask)?;
        let mut rng = seed::rng(
            self.cfg.seeds.fisher,
            Stream::Fisher,
            &[round as u64, client as u64],
        );
        let epochs = self.cfg.train.local_epochs;
        let lr = self.cfg.train.learning_rate;
        let mode = self.cfg.scheduler.fisher_mode;
        let mut traces = vec![0.0; state.batcher.batch_count()];
        let class_mask = self.cfg.train.mask_absent_classes.then(|| {
            let mut present = vec![false; self.arch.class_count()];
            for &i in state.batcher.shard() {
                present[self.env.train.labels()[i]] = true;
            }
            present
        });
        for e in 0..epochs {
            let epoch = ((round - 1) * epochs + e) as u64;
            for (k, idx) in state.batcher.batches(epoch).iter().enumerate() {
                let batch = self.env.train.batch(idx)?;
                let (grads, trace, probs) = sub
                    .model
                    .loss_grad_and_trace(&batch, class_mask.as_deref())?;
                if e == 0 {
                    // measured on the parameters before this step
                    traces[k] = fisher::trace_from_forward(
                        &sub.model,
                        &trace,
                        &probs,
                        &batch.labels,
                        mode,
                        &mut rng,
                    );
                }
                sub.model.sgd_step(&grads, lr)?;
            }
        }
        if !sub.model.is_finite() {
            return Err(Error::NumericFailure("local model diverged".into()));
        }
        Ok(LocalUpdate {
            sub,
            fisher: traces,
        })
    }

    /// One synchronous round: select, extract, train, aggregate, evaluate.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let round = self.round + 1;
        let participants = self.participants(round);
        let selections = self.choose_levels(round, &participants)?;
        let masks: Vec<Mask> = selections
            .iter()
            .map(|s| self.build_mask(round, s.client, s.level))
            .collect::<Result<_>>()?;

        let updates: Vec<LocalUpdate> = participants
            .par_iter()
            .zip(masks.par_iter())
            .map(|(&c, mask)| {
                self.train_client(round, c, mask)
                    .map_err(|e| Error::ClientFailure {
                        client: c,
                        round,
                        source: Box::new(e),
                    })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?;

        let mut records = Vec::with_capacity(participants.len());
        for ((sel, mask), update) in selections.iter().zip(&masks).zip(&updates) {
            let c = sel.client;
            let entry = self.env.trace.at(round, c)?;
            let cost = sysmodel::estimate(
                mask.param_count(),
                mask.flops_per_example(),
                self.local_steps(c),
                self.cfg.data.batch_size,
                &self.clients[c].device,
                &entry,
                &self.cfg.cost,
            )?;
            let fi = update.fisher.iter().sum::<f64>() / update.fisher.len() as f64;
            let adaptive = self.cfg.strategy.is_adaptive();
            records.push(ClientRecord {
                client: c,
                level: sel.level,
                latency_s: cost.total(),
                tx_s: cost.tx_seconds,
                compute_s: cost.compute_seconds,
                u_n: adaptive.then_some(sel.u_n),
                util: (adaptive && sel.util.is_finite()).then_some(sel.util),
                te: sel.te,
                se: sel.se,
                fi,
            });
        }

        let subs: Vec<SubModel> = updates.iter().map(|u| u.sub.clone()).collect();
        self.global = subnet::aggregate(&self.global, &subs)?;
        for (update, &c) in updates.into_iter().zip(&participants) {
            self.clients[c].history.record_round(round, update.fisher)?;
        }

        let latencies: Vec<f64> = records.iter().map(|r| r.latency_s).collect();
        let round_latency = sysmodel::round_latency(&latencies)?;
        self.cum_time += round_latency;
        let (test_acc, test_loss) = self.global.evaluate(&self.env.test)?;
        let train_loss = if self.cfg.train.eval_train_loss {
            Some(self.global.evaluate(&self.env.train)?.1)
        } else {
            None
        };
        let n = records.len() as f64;
        let record = RoundRecord {
            round,
            cum_time_s: self.cum_time,
            round_latency_s: round_latency,
            test_acc,
            test_loss,
            train_loss,
            mean_fi: records.iter().map(|r| r.fi).sum::<f64>() / n,
            mean_level: records.iter().map(|r| r.level as f64).sum::<f64>() / n,
            clients: records,
        };
        self.round = round;
        self.log.rounds.push(record);
        Ok(self.log.last().expect("just pushed"))
    }

    /// Runs to `rounds`, or until the target accuracy when early stopping.
    pub fn run(&mut self) -> Result<()> {
        while self.round < self.cfg.rounds {
            let acc = self.run_round()?.test_acc;
            if self.cfg.stop_at_target && self.cfg.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
        Ok(())
    }
}

/// Validates, builds the environment, and runs the whole experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    let mut sim = Simulation::new(cfg.clone())?;
    sim.run()?;
    Ok(sim.into_log())
}

/// As [`run_experiment`] on a prebuilt environment.
pub fn run_with_environment(cfg: &ExperimentConfig, env: Arc<Environment>) -> Result<MetricsLog> {
    let mut sim = Simulation::with_environment(cfg.clone(), env)?;
    sim.run()?;
    Ok(sim.into_log())
}
