//! Horizon RMSE, model comparison tables, personalization gains and the
//! fine-tuning duration sweep.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::baselines::cv_predict_sample;
use crate::error::{Error, Result};
use crate::graph::{GraphSample, DT};
use crate::model::{predict, ModelConfig};
use crate::numeric::ModelParams;

/// Evaluated horizons in seconds.
pub const HORIZONS_S: [u32; 5] = [1, 2, 3, 4, 5];

/// Future step (1-based) reached at `seconds`.
pub fn horizon_step(seconds: u32) -> usize {
    (seconds as f64 / DT).round() as usize
}

/// `sqrt(mean over samples of squared Euclidean error)` at future step
/// `step` (1-based). Both coordinates share one root.
pub fn rmse_at_horizon(predictions: &[Vec<[f64; 2]>], truths: &[Vec<[f64; 2]>], step: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InsufficientData("RMSE over zero samples".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            op: "rmse_at_horizon",
            lhs: vec![predictions.len()],
            rhs: vec![truths.len()],
        });
    }
    let mut sse = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        if step == 0 || step > p.len() || step > t.len() {
            return Err(Error::Config(format!("step {step} outside prediction of length {}", p.len())));
        }
        sse += sq_err(p[step - 1], t[step - 1]);
    }
    Ok((sse / predictions.len() as f64).sqrt())
}

fn sq_err(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Anything that maps a sample to an absolute future trajectory.
pub trait Predictor: Sync {
    fn predict(&self, sample: &GraphSample) -> Result<Vec<[f64; 2]>>;
}

pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn predict(&self, sample: &GraphSample) -> Result<Vec<[f64; 2]>> {
        cv_predict_sample(sample)
    }
}

/// A trained network of either architecture.
pub struct Network<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl Predictor for Network<'_> {
    fn predict(&self, sample: &GraphSample) -> Result<Vec<[f64; 2]>> {
        predict(sample, self.params, self.config)
    }
}

impl<F> Predictor for F
where
    F: Fn(&GraphSample) -> Result<Vec<[f64; 2]>> + Sync,
{
    fn predict(&self, sample: &GraphSample) -> Result<Vec<[f64; 2]>> {
        self(sample)
    }
}

/// Summed squared errors per model and horizon; tables over several test
/// sets merge by adding sums, so the RMSE is pooled over all samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    /// `sse[model][horizon]`
    pub sse: Vec<[f64; 5]>,
    /// Samples every model was scored on.
    pub samples: usize,
    /// Samples dropped because at least one model failed on them.
    pub excluded: usize,
}

impl ComparisonTable {
    pub fn empty(models: &[&str]) -> Self {
        Self {
            models: models.iter().map(|m| m.to_string()).collect(),
            sse: vec![[0.0; 5]; models.len()],
            samples: 0,
            excluded: 0,
        }
    }

    pub fn merge(&mut self, other: &ComparisonTable) -> Result<()> {
        if self.models != other.models {
            return Err(Error::Config(format!(
                "cannot merge tables over {:?} and {:?}",
                self.models, other.models
            )));
        }
        for (a, b) in self.sse.iter_mut().zip(&other.sse) {
            for h in 0..5 {
                a[h] += b[h];
            }
        }
        self.samples += other.samples;
        self.excluded += other.excluded;
        Ok(())
    }

    fn index(&self, model: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::Config(format!("no model `{model}` in table")))
    }

    /// RMSE per horizon for one model.
    pub fn rmse(&self, model: &str) -> Result<[f64; 5]> {
        if self.samples == 0 {
            return Err(Error::InsufficientData("table has no scored samples".into()));
        }
        let i = self.index(model)?;
        Ok(self.sse[i].map(|s| (s / self.samples as f64).sqrt()))
    }

    /// `horizon_s,<model>,...`
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("horizon_s,{}\n", self.models.join(","));
        let cols: Vec<[f64; 5]> = self.models.iter().map(|m| self.rmse(m)).collect::<Result<_>>()?;
        for (h, s) in HORIZONS_S.iter().enumerate() {
            let row: Vec<String> = cols.iter().map(|c| format!("{:.6}", c[h])).collect();
            let _ = writeln!(out, "{s},{}", row.join(","));
        }
        Ok(out)
    }
}

/// Scores every model on the same samples. A sample on which any model
/// fails is dropped for all of them and counted in `excluded`.
pub fn compare_models(samples: &[GraphSample], models: &[(&str, &dyn Predictor)]) -> ComparisonTable {
    let names: Vec<&str> = models.iter().map(|(n, _)| *n).collect();
    let mut table = ComparisonTable::empty(&names);
    let per_sample: Vec<Option<Vec<[f64; 5]>>> = samples
        .par_iter()
        .map(|s| {
            models
                .iter()
                .map(|(_, m)| {
                    let pred = m.predict(s).ok()?;
                    let truth = s.future_absolute();
                    let mut row = [0.0; 5];
                    for (h, &sec) in HORIZONS_S.iter().enumerate() {
                        let k = horizon_step(sec);
                        if k > pred.len() || k > truth.len() || pred.len() != truth.len() {
                            return None;
                        }
                        let e = sq_err(pred[k - 1], truth[k - 1]);
                        if !e.is_finite() {
                            return None;
                        }
                        row[h] = e;
                    }
                    Some(row)
                })
                .collect()
        })
        .collect();
    for rows in per_sample {
        match rows {
            Some(rows) => {
                for (acc, r) in table.sse.iter_mut().zip(rows) {
                    for h in 0..5 {
                        acc[h] += r[h];
                    }
                }
                table.samples += 1;
            }
            None => table.excluded += 1,
        }
    }
    table
}

/// `100 * (generic - personalized) / generic` per horizon; `None` where the
/// generic RMSE is zero.
pub fn rmse_reduction(generic: &[f64; 5], personalized: &[f64; 5]) -> [Option<f64>; 5] {
    std::array::from_fn(|h| (generic[h] != 0.0).then(|| 100.0 * (generic[h] - personalized[h]) / generic[h]))
}

/// Mean of several reduction rows, ignoring undefined entries.
pub fn mean_reduction(rows: &[[Option<f64>; 5]]) -> [Option<f64>; 5] {
    std::array::from_fn(|h| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r[h]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    })
}

/// `horizon_s,reduction_pct`
pub fn reduction_csv(reduction: &[Option<f64>; 5]) -> String {
    let mut out = String::from("horizon_s,reduction_pct\n");
    for (s, r) in HORIZONS_S.iter().zip(reduction) {
        match r {
            Some(v) => writeln!(out, "{s},{v:.4}"),
            None => writeln!(out, "{s},NA"),
        }
        .expect("write to String");
    }
    out
}

/// Fine-tuning minutes against RMSE per horizon, one driver.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepMatrix {
    pub rows: Vec<(u32, [f64; 5])>,
}

impl SweepMatrix {
    pub fn at(&self, minutes: u32) -> Option<[f64; 5]> {
        self.rows.iter().find(|(m, _)| *m == minutes).map(|(_, r)| *r)
    }

    /// `minutes,h1,h2,h3,h4,h5`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("minutes,h1,h2,h3,h4,h5\n");
        for (m, r) in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{m},{}", cells.join(","));
        }
        out
    }
}

/// RMSE per horizon of one predictor.
pub fn rmse_row(samples: &[GraphSample], model: &dyn Predictor) -> Result<[f64; 5]> {
    let table = compare_models(samples, &[("m", model)]);
    if table.excluded > 0 {
        return Err(Error::InsufficientData(format!("{} samples failed to predict", table.excluded)));
    }
    table.rmse("m")
}

/// Evaluates one model per fine-tuning duration on a fixed test set.
///
/// `tune(minutes)` must fine-tune from the same base every time using the
/// first `minutes` of the driver's training timeline; `0` means no tuning.
pub fn duration_sweep<F>(
    minutes: &[u32],
    available_minutes: f64,
    test: &[GraphSample],
    config: &ModelConfig,
    tune: F,
) -> Result<SweepMatrix>
where
    F: Fn(u32) -> Result<ModelParams>,
{
    if let Some(&m) = minutes.iter().find(|&&m| m as f64 > available_minutes + 1e-9) {
        return Err(Error::InsufficientData(format!(
            "sweep asks for {m} min but only {available_minutes:.1} min of driver data are available"
        )));
    }
    let mut rows = Vec::with_capacity(minutes.len());
    for &m in minutes {
        let params = tune(m)?;
        rows.push((m, rmse_row(test, &Network { params: &params, config })?));
    }
    Ok(SweepMatrix { rows })
}

/// True when each horizon's RMSE is at least `(1 - tol)` times the previous.
pub fn is_roughly_monotone(rmse: &[f64; 5], tol: f64) -> bool {
    rmse.windows(2).all(|w| w[1] >= w[0] * (1.0 - tol))
}
