//! The end-to-end synthetic study: simulate a pretraining pool and held-out
//! drivers, pretrain generic models, personalize them per driver, and score
//! everything on each driver's held-out round.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::datagen::{make_driver_cohort, make_driver_cohort_with, simulate_highway, CohortRanges, Density, DriverProfile, ScenarioConfig};
use crate::error::{Error, Result};
use crate::eval::{
    compare_models, duration_sweep, mean_reduction, reduction_csv, rmse_reduction, ComparisonTable, ConstantVelocity, Network, Predictor,
    SweepMatrix,
};
use crate::graph::{extract_target_windows, extract_windows_where, GraphConfig, GraphSample, VehicleTrack, DT};
use crate::model::{init_params, ModelConfig};
use crate::numeric::ModelParams;
use crate::training::{finetune, temporal_split, train, window_span, LossReport, TrainConfig};

/// Column names of the comparison table, in order.
pub const COLUMNS: [&str; 5] = ["cv", "seq2seq", "generic", "individual", "personalized"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub lane_count: u32,
    pub road_length: f64,
    pub dt_sim: f64,
    pub warmup: f64,
    /// Drivers in the pretraining pool (also the background traffic).
    pub pool_size: usize,
    pub personal_drivers: usize,
    pub pretrain_episodes: usize,
    pub pretrain_episode_secs: f64,
    /// Anchor stride for pretraining windows.
    pub pretrain_stride: usize,
    /// Pretraining targets must be within this distance of the ego, m.
    pub target_radius: f64,
    pub round_secs: f64,
    /// Densities of the personal rounds; the last one is the test round.
    pub rounds: Vec<Density>,
    pub personal_stride: usize,
    pub val_fraction: f64,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub individual: TrainConfig,
    /// Fine-tuning durations for the sweep; `0` is the untuned model.
    pub sweep_minutes: Vec<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            lane_count: 3,
            road_length: 2000.0,
            dt_sim: 0.1,
            warmup: 60.0,
            pool_size: 50,
            personal_drivers: 5,
            pretrain_episodes: 6,
            pretrain_episode_secs: 300.0,
            pretrain_stride: 15,
            target_radius: 300.0,
            round_secs: 600.0,
            rounds: vec![Density::Low, Density::Medium, Density::High, Density::Medium],
            personal_stride: 1,
            val_fraction: 0.2,
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            individual: TrainConfig::pretrain(),
            sweep_minutes: vec![0, 5, 10, 15, 20, 25, 30],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.model.validate()?;
        for t in [&self.pretrain, &self.finetune, &self.individual] {
            t.validate()?;
        }
        if self.graph.t_in != self.model.t_in || self.graph.t_out != self.model.t_out {
            return Err(Error::Config("graph and model window lengths differ".into()));
        }
        if self.rounds.len() < 2 {
            return Err(Error::Config("need at least one training round and one test round".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.pool_size == 0 || self.personal_drivers == 0 || self.pretrain_episodes == 0 {
            return Err(Error::Config("pool, driver and episode counts must be >= 1".into()));
        }
        if self.pretrain_stride == 0 || self.personal_stride == 0 {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        if self.sweep_minutes.iter().any(|&m| m as f64 * 60.0 > self.train_secs() + 1e-9) {
            return Err(Error::Config(format!(
                "sweep minutes exceed the {:.0} training minutes per driver",
                self.train_secs() / 60.0
            )));
        }
        Ok(())
    }

    /// Seconds of training timeline per personal driver.
    pub fn train_secs(&self) -> f64 {
        (self.rounds.len() - 1) as f64 * self.round_secs
    }
}

/// Mixes a base seed with a stage label and index (SplitMix64 finalizer
/// over an FNV-1a hash of the label).
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The two driver populations of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohorts {
    pub pool: Vec<DriverProfile>,
    pub personal: Vec<DriverProfile>,
}

pub fn cohorts(cfg: &ExperimentConfig) -> Result<Cohorts> {
    Ok(Cohorts {
        pool: make_driver_cohort(cfg.pool_size, derive_seed(cfg.seed, "pool", 0))?,
        personal: make_driver_cohort_with(
            cfg.personal_drivers,
            derive_seed(cfg.seed, "personal", 0),
            &CohortRanges::personal(),
        )?,
    })
}

pub fn driver_name(index: usize) -> String {
    format!("d{}", index + 1)
}

/// Parses `d3` (or `3`) into a zero-based driver index.
pub fn parse_driver(name: &str, count: usize) -> Result<usize> {
    let n: usize = name
        .trim_start_matches('d')
        .parse()
        .map_err(|_| Error::Config(format!("bad driver id `{name}` (expected d1..d{count})")))?;
    if n == 0 || n > count {
        return Err(Error::Config(format!("driver `{name}` out of range d1..d{count}")));
    }
    Ok(n - 1)
}

/// A named scenario to simulate.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub name: String,
    pub scenario: ScenarioConfig,
}

fn scenario(
    cfg: &ExperimentConfig,
    ego: DriverProfile,
    pool: &[DriverProfile],
    density: Density,
    secs: f64,
    t0: f64,
    seed: u64,
) -> ScenarioConfig {
    ScenarioConfig {
        lane_count: cfg.lane_count,
        road_length: cfg.road_length,
        density,
        duration: secs,
        warmup: cfg.warmup,
        dt_sim: cfg.dt_sim,
        t0,
        ego,
        background: pool.to_vec(),
        seed,
    }
}

/// Pretraining episodes: egos cycle through the pool, densities cycle
/// low/medium/high.
pub fn pretrain_specs(cfg: &ExperimentConfig, c: &Cohorts) -> Vec<EpisodeSpec> {
    let densities = [Density::Low, Density::Medium, Density::High];
    (0..cfg.pretrain_episodes)
        .map(|e| EpisodeSpec {
            name: format!("pretrain_{:02}", e + 1),
            scenario: scenario(
                cfg,
                c.pool[e % c.pool.len()],
                &c.pool,
                densities[e % 3],
                cfg.pretrain_episode_secs,
                0.0,
                derive_seed(cfg.seed, "pretrain_episode", e as u64),
            ),
        })
        .collect()
}

/// One episode per round for a personal driver, laid end to end in time.
pub fn driver_specs(cfg: &ExperimentConfig, c: &Cohorts, driver: usize) -> Vec<EpisodeSpec> {
    cfg.rounds
        .iter()
        .enumerate()
        .map(|(r, &density)| EpisodeSpec {
            name: format!("{}_round{}", driver_name(driver), r + 1),
            scenario: scenario(
                cfg,
                c.personal[driver],
                &c.pool,
                density,
                cfg.round_secs,
                r as f64 * cfg.round_secs,
                derive_seed(cfg.seed, &format!("round_{driver}"), r as u64),
            ),
        })
        .collect()
}

/// Simulated (or ingested) tracks of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTracks {
    pub name: String,
    pub tracks: Vec<VehicleTrack>,
    pub ego_id: u64,
}

pub fn simulate(spec: &EpisodeSpec) -> Result<EpisodeTracks> {
    let ep = simulate_highway(&spec.scenario)?;
    Ok(EpisodeTracks {
        name: spec.name.clone(),
        tracks: ep.tracks,
        ego_id: ep.ego_id,
    })
}

/// Train and validation windows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<GraphSample>,
    pub val: Vec<GraphSample>,
}

fn span_of(tracks: &[VehicleTrack]) -> Option<(f64, f64)> {
    let lo = tracks.iter().map(|t| t.points[0].t).min_by(f64::total_cmp)?;
    let hi = tracks
        .iter()
        .map(|t| t.points.last().expect("non-empty").t)
        .max_by(f64::total_cmp)?;
    Some((lo, hi))
}

/// Windows of every vehicle near the ego, split per episode at the last
/// `val_fraction` of its timeline.
pub fn pretrain_windows(cfg: &ExperimentConfig, episodes: &[EpisodeTracks]) -> Result<Split> {
    let mut split = Split::default();
    for ep in episodes {
        let ego = ep
            .tracks
            .iter()
            .find(|t| t.vehicle_id == ep.ego_id)
            .ok_or_else(|| Error::InsufficientData(format!("{}: no ego track", ep.name)))?;
        let ego_x: HashMap<i64, f64> = ego.points.iter().map(|p| ((p.t / DT).round() as i64, p.x)).collect();
        let radius = cfg.target_radius;
        let windows = extract_windows_where(&ep.tracks, &cfg.graph, cfg.pretrain_stride, |t, k| {
            let p = t.points[k];
            ego_x.get(&((p.t / DT).round() as i64)).is_some_and(|&x| (p.x - x).abs() <= radius)
        })?;
        let (lo, hi) = span_of(&ep.tracks).expect("episode has tracks");
        let (a, b) = temporal_split(&windows, hi - cfg.val_fraction * (hi - lo));
        split.train.extend(a);
        split.val.extend(b);
    }
    if split.train.is_empty() {
        return Err(Error::InsufficientData("no pretraining windows".into()));
    }
    Ok(split)
}

/// A personal driver's windows: the whole training timeline plus the test round.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverData {
    pub name: String,
    pub train: Vec<GraphSample>,
    pub test: Vec<GraphSample>,
    /// First timestamp of the training timeline, s.
    pub train_start: f64,
    /// Length of the training timeline, s.
    pub train_secs: f64,
}

impl DriverData {
    pub fn available_minutes(&self) -> f64 {
        self.train_secs / 60.0
    }

    /// Train/validation windows from the first `minutes` of the timeline.
    ///
    /// The prefix is cut into blocks of [`VAL_BLOCK_SECS`]; the last
    /// `val_fraction` of every block validates, so that validation sees each
    /// traffic condition the prefix covers. Windows straddling a cut are
    /// dropped.
    pub fn prefix_split(&self, minutes: u32, val_fraction: f64) -> Result<Split> {
        let secs = minutes as f64 * 60.0;
        if secs > self.train_secs + 1e-9 {
            return Err(Error::InsufficientData(format!(
                "{}: {minutes} min requested, {:.1} min available",
                self.name,
                self.available_minutes()
            )));
        }
        let end = self.train_start + secs;
        let mut split = Split::default();
        let mut b0 = self.train_start;
        while b0 < end - 1e-9 {
            let b1 = (b0 + VAL_BLOCK_SECS).min(end);
            let cut = b1 - val_fraction * (b1 - b0);
            for s in &self.train {
                let (lo, hi) = window_span(s);
                if lo >= b0 - 1e-9 && hi <= cut + 1e-9 {
                    split.train.push(s.clone());
                } else if lo >= cut - 1e-9 && hi <= b1 + 1e-9 {
                    split.val.push(s.clone());
                }
            }
            b0 = b1;
        }
        Ok(split)
    }
}

/// Block length for the driver train/validation split, s.
pub const VAL_BLOCK_SECS: f64 = 300.0;

/// Ego-only windows of a driver's rounds; the last round is the test set.
pub fn driver_windows(cfg: &ExperimentConfig, name: &str, rounds: &[EpisodeTracks]) -> Result<DriverData> {
    let (test_round, train_rounds) = rounds
        .split_last()
        .ok_or_else(|| Error::InsufficientData(format!("{name}: no rounds")))?;
    if train_rounds.is_empty() {
        return Err(Error::InsufficientData(format!("{name}: no training rounds")));
    }
    let ego_windows = |ep: &EpisodeTracks| extract_target_windows(&ep.tracks, &cfg.graph, cfg.personal_stride, |id| id == ep.ego_id);
    let mut train = Vec::new();
    let mut start = f64::INFINITY;
    for ep in train_rounds {
        train.extend(ego_windows(ep)?);
        start = start.min(span_of(&ep.tracks).map_or(f64::INFINITY, |s| s.0));
    }
    let test = ego_windows(test_round)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!("{name}: rounds too short for a window")));
    }
    Ok(DriverData {
        name: name.to_string(),
        train,
        test,
        train_start: start,
        train_secs: train_rounds.len() as f64 * cfg.round_secs,
    })
}

/// Models fitted on the pretraining pool.
#[derive(Clone, Debug, PartialEq)]
pub struct GenericModels {
    pub gcn: ModelParams,
    pub gcn_report: LossReport,
    pub seq2seq: ModelParams,
    pub seq2seq_report: LossReport,
}

pub fn pretrain_models(cfg: &ExperimentConfig, data: &Split) -> Result<GenericModels> {
    let gcn_init = init_params(&cfg.model, derive_seed(cfg.seed, "init_gcn", 0))?;
    let tc = cfg.pretrain.with_seed(derive_seed(cfg.seed, "train_gcn", 0));
    let (gcn, gcn_report) = train(&data.train, &data.val, &gcn_init, &cfg.model, &tc)?;
    let s2s_cfg = cfg.model.seq2seq();
    let s2s_init = init_params(&s2s_cfg, derive_seed(cfg.seed, "init_seq2seq", 0))?;
    let tc = cfg.pretrain.with_seed(derive_seed(cfg.seed, "train_seq2seq", 0));
    let (seq2seq, seq2seq_report) = train(&data.train, &data.val, &s2s_init, &s2s_cfg, &tc)?;
    Ok(GenericModels {
        gcn,
        gcn_report,
        seq2seq,
        seq2seq_report,
    })
}

/// Fine-tunes the generic model on the first `minutes` of a driver's data.
/// `minutes = 0` returns the generic model itself.
pub fn personalize(cfg: &ExperimentConfig, generic: &ModelParams, driver: &DriverData, minutes: u32) -> Result<(ModelParams, LossReport)> {
    if minutes == 0 {
        return Ok((generic.clone(), LossReport::default()));
    }
    let split = driver.prefix_split(minutes, cfg.val_fraction)?;
    let tc = cfg
        .finetune
        .with_seed(derive_seed(cfg.seed, &format!("finetune_{}", driver.name), 0));
    finetune(generic, &split.train, &split.val, &cfg.model, &tc)
}

/// GCN-LSTM trained from scratch on one driver's full training timeline.
pub fn train_individual(cfg: &ExperimentConfig, driver: &DriverData) -> Result<(ModelParams, LossReport)> {
    let split = driver.prefix_split((driver.train_secs / 60.0).floor() as u32, cfg.val_fraction)?;
    let init = init_params(&cfg.model, derive_seed(cfg.seed, &format!("init_individual_{}", driver.name), 0))?;
    let tc = cfg
        .individual
        .with_seed(derive_seed(cfg.seed, &format!("train_individual_{}", driver.name), 0));
    train(&split.train, &split.val, &init, &cfg.model, &tc)
}

/// Per-driver outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverResult {
    pub name: String,
    pub table: ComparisonTable,
    pub personalized_report: LossReport,
    pub individual_report: LossReport,
    pub sweep: Option<SweepMatrix>,
}

impl DriverResult {
    pub fn reduction(&self) -> Result<[Option<f64>; 5]> {
        Ok(rmse_reduction(&self.table.rmse("generic")?, &self.table.rmse("personalized")?))
    }
}

/// Trained models of one driver plus the shared generic ones.
pub struct ModelSet<'a> {
    pub cfg: &'a ExperimentConfig,
    pub generic: &'a GenericModels,
    pub individual: &'a ModelParams,
    pub personalized: &'a ModelParams,
}

pub fn compare_driver(set: &ModelSet<'_>, test: &[GraphSample]) -> ComparisonTable {
    let s2s_cfg = set.cfg.model.seq2seq();
    let seq2seq = Network {
        params: &set.generic.seq2seq,
        config: &s2s_cfg,
    };
    let generic = Network {
        params: &set.generic.gcn,
        config: &set.cfg.model,
    };
    let individual = Network {
        params: set.individual,
        config: &set.cfg.model,
    };
    let personalized = Network {
        params: set.personalized,
        config: &set.cfg.model,
    };
    let models: [(&str, &dyn Predictor); 5] = [
        (COLUMNS[0], &ConstantVelocity),
        (COLUMNS[1], &seq2seq),
        (COLUMNS[2], &generic),
        (COLUMNS[3], &individual),
        (COLUMNS[4], &personalized),
    ];
    compare_models(test, &models)
}

/// Runs the personalization stage and evaluation for one driver.
pub fn run_driver(cfg: &ExperimentConfig, generic: &GenericModels, driver: &DriverData, with_sweep: bool) -> Result<DriverResult> {
    let full = (driver.train_secs / 60.0).floor() as u32;
    let (personalized, personalized_report) = personalize(cfg, &generic.gcn, driver, full)?;
    let (individual, individual_report) = train_individual(cfg, driver)?;
    let set = ModelSet {
        cfg,
        generic,
        individual: &individual,
        personalized: &personalized,
    };
    let table = compare_driver(&set, &driver.test);
    let sweep = if with_sweep {
        Some(duration_sweep(
            &cfg.sweep_minutes,
            driver.available_minutes(),
            &driver.test,
            &cfg.model,
            |m| {
                if m == full {
                    Ok(personalized.clone())
                } else {
                    personalize(cfg, &generic.gcn, driver, m).map(|p| p.0)
                }
            },
        )?)
    } else {
        None
    };
    Ok(DriverResult {
        name: driver.name.clone(),
        table,
        personalized_report,
        individual_report,
        sweep,
    })
}

/// Everything the study reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub pretrain_samples: (usize, usize),
    pub generic: GenericModels,
    pub drivers: Vec<DriverResult>,
}

impl ExperimentReport {
    /// Pooled table over all drivers' test sets.
    pub fn pooled(&self) -> Result<ComparisonTable> {
        let mut table = ComparisonTable::empty(&COLUMNS);
        for d in &self.drivers {
            table.merge(&d.table)?;
        }
        Ok(table)
    }

    /// Mean over drivers of the per-driver reduction percentages.
    pub fn mean_reduction(&self) -> Result<[Option<f64>; 5]> {
        let rows: Vec<[Option<f64>; 5]> = self.drivers.iter().map(DriverResult::reduction).collect::<Result<_>>()?;
        Ok(mean_reduction(&rows))
    }

    pub fn table_csv(&self) -> Result<String> {
        self.pooled()?.to_csv()
    }

    pub fn reduction_csv(&self) -> Result<String> {
        Ok(reduction_csv(&self.mean_reduction()?))
    }

    /// Plain-text summary of every number in the study.
    pub fn summary(&self) -> Result<String> {
        let mut out = String::new();
        let pooled = self.pooled()?;
        let _ = writeln!(
            out,
            "pretraining windows: {} train / {} val; generic best epoch {}, seq2seq best epoch {}",
            self.pretrain_samples.0, self.pretrain_samples.1, self.generic.gcn_report.best_epoch, self.generic.seq2seq_report.best_epoch
        );
        let _ = writeln!(
            out,
            "pooled RMSE (m) over {} test windows, {} excluded",
            pooled.samples, pooled.excluded
        );
        out.push_str(&pooled.to_csv()?);
        for d in &self.drivers {
            let _ = writeln!(out, "driver {} ({} test windows)", d.name, d.table.samples);
            out.push_str(&d.table.to_csv()?);
            let red: Vec<String> = d
                .reduction()?
                .iter()
                .map(|r| r.map_or("NA".into(), |v| format!("{v:.2}%")))
                .collect();
            let _ = writeln!(out, "reduction by horizon: {}", red.join(" "));
            if let Some(s) = &d.sweep {
                out.push_str(&s.to_csv());
            }
        }
        let _ = writeln!(out, "mean reduction");
        out.push_str(&self.reduction_csv()?);
        Ok(out)
    }
}

/// Pretraining data, simulated from the config.
pub fn simulate_pretraining(cfg: &ExperimentConfig, c: &Cohorts) -> Result<Vec<EpisodeTracks>> {
    use rayon::prelude::*;
    pretrain_specs(cfg, c).par_iter().map(simulate).collect()
}

/// One driver's rounds, simulated from the config.
pub fn simulate_driver(cfg: &ExperimentConfig, c: &Cohorts, driver: usize) -> Result<Vec<EpisodeTracks>> {
    use rayon::prelude::*;
    driver_specs(cfg, c, driver).par_iter().map(simulate).collect()
}

/// Simulates, trains and evaluates the whole study in memory. `log`
/// receives one line per completed stage.
pub fn run_experiment(cfg: &ExperimentConfig, with_sweep: bool, mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let c = cohorts(cfg)?;
    let pre = pretrain_windows(cfg, &simulate_pretraining(cfg, &c)?)?;
    log(&format!(
        "pretraining data: {} train / {} val windows",
        pre.train.len(),
        pre.val.len()
    ));
    let generic = pretrain_models(cfg, &pre)?;
    log(&format!(
        "pretrained: gcn {} epochs (best {}), seq2seq {} epochs (best {})",
        generic.gcn_report.epochs(),
        generic.gcn_report.best_epoch,
        generic.seq2seq_report.epochs(),
        generic.seq2seq_report.best_epoch
    ));
    let mut drivers = Vec::with_capacity(cfg.personal_drivers);
    for d in 0..cfg.personal_drivers {
        let name = driver_name(d);
        let data = driver_windows(cfg, &name, &simulate_driver(cfg, &c, d)?)?;
        let result = run_driver(cfg, &generic, &data, with_sweep)?;
        let g = result.table.rmse("generic")?;
        let p = result.table.rmse("personalized")?;
        log(&format!("{name}: generic@5s {:.3} m, personalized@5s {:.3} m", g[4], p[4]));
        drivers.push(result);
    }
    Ok(ExperimentReport {
        pretrain_samples: (pre.train.len(), pre.val.len()),
        generic,
        drivers,
    })
}
