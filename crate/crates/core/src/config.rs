//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! rounds = low,medium,high,medium
//! pretrain.epochs = 50
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key, so a
//! resolved config read back yields the same run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datagen::Density;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::numeric::OptimizerKind;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Simulated or ingested data to use instead of regenerating it.
    pub data_dir: Option<PathBuf>,
    /// Pretraining output to personalize and evaluate.
    pub base_checkpoint: Option<PathBuf>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> std::result::Result<bool, String> {
    match field {
        "lr" => t.lr = parse_num(key, v)?,
        "batch_size" => t.batch_size = parse_num(key, v)?,
        "epochs" => t.epochs = parse_num(key, v)?,
        "patience" => t.patience = parse_num(key, v)?,
        "optimizer" => {
            t.optimizer = match v {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                _ => return Err(format!("`{key}`: expected adam or sgd, got `{v}`")),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("`{key}`: {e}"))
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let e = &mut self.experiment;
        let v = value.trim();
        match key {
            "seed" => e.seed = parse_num(key, v)?,
            "lane_count" => e.lane_count = parse_num(key, v)?,
            "road_length" => e.road_length = parse_num(key, v)?,
            "dt_sim" => e.dt_sim = parse_num(key, v)?,
            "warmup" => e.warmup = parse_num(key, v)?,
            "pool_size" => e.pool_size = parse_num(key, v)?,
            "personal_drivers" => e.personal_drivers = parse_num(key, v)?,
            "pretrain_episodes" => e.pretrain_episodes = parse_num(key, v)?,
            "pretrain_episode_secs" => e.pretrain_episode_secs = parse_num(key, v)?,
            "pretrain_stride" => e.pretrain_stride = parse_num(key, v)?,
            "target_radius" => e.target_radius = parse_num(key, v)?,
            "round_secs" => e.round_secs = parse_num(key, v)?,
            "rounds" => e.rounds = list(key, v, |s| Density::parse(s).map_err(|e| e.to_string()))?,
            "personal_stride" => e.personal_stride = parse_num(key, v)?,
            "val_fraction" => e.val_fraction = parse_num(key, v)?,
            "sweep_minutes" => e.sweep_minutes = list(key, v, |s| parse_num(key, s))?,
            "t_in" => {
                e.graph.t_in = parse_num(key, v)?;
                e.model.t_in = e.graph.t_in;
            }
            "t_out" => {
                e.graph.t_out = parse_num(key, v)?;
                e.model.t_out = e.graph.t_out;
            }
            "graph.tau" => e.graph.tau = parse_num(key, v)?,
            "graph.lane_tolerance" => e.graph.lane_tolerance = parse_num(key, v)?,
            "graph.max_neighbors" => e.graph.max_neighbors = parse_num(key, v)?,
            "model.embed_dim" => e.model.embed_dim = parse_num(key, v)?,
            "model.gcn_hidden" => e.model.gcn_hidden = parse_num(key, v)?,
            "model.decoder_hidden" => e.model.decoder_hidden = parse_num(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "base_checkpoint" => self.base_checkpoint = Some(PathBuf::from(v)),
            _ => {
                let handled = match key.split_once('.') {
                    Some(("pretrain", f)) => set_train(&mut e.pretrain, f, key, v)?,
                    Some(("finetune", f)) => set_train(&mut e.finetune, f, key, v)?,
                    Some(("individual", f)) => set_train(&mut e.individual, f, key, v)?,
                    _ => false,
                };
                if !handled {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            cfg.set(k.trim(), v).map_err(err)?;
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let e = &self.experiment;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", e.seed.to_string());
        kv("lane_count", e.lane_count.to_string());
        kv("road_length", e.road_length.to_string());
        kv("dt_sim", e.dt_sim.to_string());
        kv("warmup", e.warmup.to_string());
        kv("pool_size", e.pool_size.to_string());
        kv("personal_drivers", e.personal_drivers.to_string());
        kv("pretrain_episodes", e.pretrain_episodes.to_string());
        kv("pretrain_episode_secs", e.pretrain_episode_secs.to_string());
        kv("pretrain_stride", e.pretrain_stride.to_string());
        kv("target_radius", e.target_radius.to_string());
        kv("round_secs", e.round_secs.to_string());
        kv("rounds", e.rounds.iter().map(|d| d.name()).collect::<Vec<_>>().join(","));
        kv("personal_stride", e.personal_stride.to_string());
        kv("val_fraction", e.val_fraction.to_string());
        kv(
            "sweep_minutes",
            e.sweep_minutes.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("t_in", e.graph.t_in.to_string());
        kv("t_out", e.graph.t_out.to_string());
        kv("graph.tau", e.graph.tau.to_string());
        kv("graph.lane_tolerance", e.graph.lane_tolerance.to_string());
        kv("graph.max_neighbors", e.graph.max_neighbors.to_string());
        kv("model.embed_dim", e.model.embed_dim.to_string());
        kv("model.gcn_hidden", e.model.gcn_hidden.to_string());
        kv("model.decoder_hidden", e.model.decoder_hidden.to_string());
        for (name, t) in [("pretrain", &e.pretrain), ("finetune", &e.finetune), ("individual", &e.individual)] {
            kv(&format!("{name}.optimizer"), optimizer_name(t.optimizer).into());
            kv(&format!("{name}.lr"), t.lr.to_string());
            kv(&format!("{name}.batch_size"), t.batch_size.to_string());
            kv(&format!("{name}.epochs"), t.epochs.to_string());
            kv(&format!("{name}.patience"), t.patience.to_string());
        }
        if let Some(p) = &self.data_dir {
            kv("data_dir", p.display().to_string());
        }
        if let Some(p) = &self.base_checkpoint {
            kv("base_checkpoint", p.display().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("rounds", "high, low").unwrap();
        cfg.set("finetune.optimizer", "sgd").unwrap();
        cfg.set("sweep_minutes", "0,5").unwrap();
        cfg.set("data_dir", "runs/x").unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text, "resolved").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse("seed = 3\n\nlearning_rate = 0.1\n", "c.cfg")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("c.cfg:3:") && err.contains("learning_rate"), "{err}");
        assert!(RunConfig::parse("pretrain.momentum = 1", "c").is_err());
        assert!(RunConfig::parse("seed", "c").is_err());
    }

    #[test]
    fn comments_and_shared_window_keys() {
        let cfg = RunConfig::parse("# hi\nt_out = 6 # shorter\nsweep_minutes = 0,5\n", "c").unwrap();
        assert_eq!(cfg.experiment.graph.t_out, 6);
        assert_eq!(cfg.experiment.model.t_out, 6);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("pretrain.lr = -1", "c").is_err());
        assert!(RunConfig::parse("rounds = low,fast", "c").is_err());
        assert!(RunConfig::parse("sweep_minutes = 45", "c").is_err());
    }
}
