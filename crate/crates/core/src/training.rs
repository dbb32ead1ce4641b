//! L1 trajectory loss, the minibatch training loop, and personalization by
//! fine-tuning the decoder of a pretrained model.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{GraphSample, DT};
use crate::model::{
    compute_target_embedding, decode_offsets, forward_offsets, init_params, motion_prior, random_sample, ModelConfig, DECODER_LSTM,
    ENCODER_GROUPS, OUTPUT_HEAD,
};
use crate::numeric::{
    grad_check, BoundParams, GradCheckReport, GradMap, ModelParams, Optimizer, OptimizerConfig, OptimizerKind, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Samples whose gradients are averaged into one update.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            patience: 10,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 5e-4,
            epochs: 30,
            ..Self::pretrain()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Zero epochs is accepted and means "return the initial parameters".
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
        }
    }
}

/// Per-epoch mean losses in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub train: Vec<f64>,
    /// Empty validation sets leave `NaN` here.
    pub val: Vec<f64>,
    /// Epoch (1-based) whose parameters were returned; 0 means the initial ones.
    pub best_epoch: usize,
}

impl LossReport {
    pub fn epochs(&self) -> usize {
        self.train.len()
    }

    /// `epoch,train_loss,val_loss`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            let _ = writeln!(out, "{},{t:.9},{v:.9}", i + 1);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Splits windows at time `boundary` (s): windows ending at or before it go
/// to the first set, windows starting at or after it to the second, and
/// windows straddling it are dropped.
pub fn temporal_split(samples: &[GraphSample], boundary: f64) -> (Vec<GraphSample>, Vec<GraphSample>) {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for s in samples {
        let (start, end) = window_span(s);
        if end <= boundary + 1e-9 {
            before.push(s.clone());
        } else if start >= boundary - 1e-9 {
            after.push(s.clone());
        }
    }
    (before, after)
}

/// First and last timestamps a window touches.
pub fn window_span(s: &GraphSample) -> (f64, f64) {
    let t = s.origin.t;
    (t - (s.history_len - 1) as f64 * DT, t + s.t_out() as f64 * DT)
}

/// Mean over samples of `(1/T_out) * sum_t |dx| + |dy|`, in meters.
pub fn l1_loss(predicted: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::InsufficientData("loss over zero samples".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            op: "l1_loss",
            lhs: vec![predicted.len()],
            rhs: vec![truth.len()],
        });
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::Shape {
                op: "l1_loss",
                lhs: vec![p.len(), 2],
                rhs: vec![t.len(), 2],
            });
        }
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum();
        total += s / p.len() as f64;
    }
    Ok(total / predicted.len() as f64)
}

/// Single-sample loss on the tape for a `T_out x 2` prediction.
pub fn l1_loss_var(tape: &mut Tape, predicted: Var, truth: &[[f64; 2]]) -> Result<Var> {
    let t = truth.len();
    let target = tape.constant(Tensor::matrix(t, 2, truth.iter().flatten().copied().collect())?);
    let diff = tape.sub(predicted, target)?;
    let abs = tape.abs(diff);
    let sum = tape.sum(abs)?;
    tape.scale(sum, 1.0 / t as f64)
}

/// What a training run optimizes: a set of items and a per-item loss.
pub trait Objective: Sync {
    type Item: Sync;

    fn bind(&self, params: &ModelParams, tape: &mut Tape) -> BoundParams;

    fn loss(&self, tape: &mut Tape, bound: &BoundParams, item: &Self::Item) -> Result<Var>;
}

/// Full model: every group on the tape.
pub struct FullModel<'a> {
    pub config: &'a ModelConfig,
}

impl Objective for FullModel<'_> {
    type Item = GraphSample;

    fn bind(&self, params: &ModelParams, tape: &mut Tape) -> BoundParams {
        params.bind(tape)
    }

    fn loss(&self, tape: &mut Tape, bound: &BoundParams, item: &GraphSample) -> Result<Var> {
        let out = forward_offsets(tape, bound, item, self.config)?;
        l1_loss_var(tape, out, &item.future)
    }
}

/// Decoder + head only, driven by precomputed embeddings of a frozen encoder.
pub struct CachedDecoder<'a> {
    pub config: &'a ModelConfig,
}

/// Frozen-encoder output for one sample, paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSample {
    pub embedding: Tensor,
    pub prior: Tensor,
    pub future: Vec<[f64; 2]>,
}

impl Objective for CachedDecoder<'_> {
    type Item = EmbeddedSample;

    fn bind(&self, params: &ModelParams, tape: &mut Tape) -> BoundParams {
        params.bind_groups(tape, |g| g == DECODER_LSTM || g == OUTPUT_HEAD)
    }

    fn loss(&self, tape: &mut Tape, bound: &BoundParams, item: &EmbeddedSample) -> Result<Var> {
        let emb = tape.constant(item.embedding.clone());
        let out = decode_offsets(tape, bound, emb, &item.prior, self.config)?;
        l1_loss_var(tape, out, &item.future)
    }
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        other => other,
    }
}

fn item_loss<O: Objective>(obj: &O, params: &ModelParams, item: &O::Item) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = obj.bind(params, &mut tape);
    let loss = obj.loss(&mut tape, &bound, item)?;
    Ok(tape.value(loss).item().expect("scalar loss"))
}

fn item_grad<O: Objective>(obj: &O, params: &ModelParams, item: &O::Item) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let bound = obj.bind(params, &mut tape);
    let loss = obj.loss(&mut tape, &bound, item)?;
    let value = tape.value(loss).item().expect("scalar loss");
    Ok((value, bound.gradients(&tape.backward(loss)?)))
}

/// Mean per-item loss; `NaN` for an empty set.
pub fn mean_loss<O: Objective>(obj: &O, params: &ModelParams, items: &[O::Item]) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = items.par_iter().map(|it| item_loss(obj, params, it)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / items.len() as f64)
}

/// Minibatch training with per-epoch shuffling and early stopping on the
/// validation loss. Returns the parameters of the best epoch.
///
/// Per-sample gradients may be computed in parallel but are always summed
/// in batch order, so results do not depend on the thread count.
pub fn train_objective<O: Objective>(
    obj: &O,
    items: &[O::Item],
    val: &[O::Item],
    init: &ModelParams,
    config: &TrainConfig,
) -> Result<(ModelParams, LossReport)> {
    config.validate()?;
    let mut report = LossReport::default();
    if config.epochs == 0 {
        return Ok((init.clone(), report));
    }
    if items.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }

    let mut params = init.clone();
    let mut best = init.clone();
    let mut best_score = f64::INFINITY;
    let mut since_best = 0;
    let mut optimizer = Optimizer::new(config.optimizer())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| item_grad(obj, &params, &items[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(e, epoch, step))?;
            let k = 1.0 / batch.len() as f64;
            let mut sum = GradMap::new();
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                epoch_loss += loss;
                for (key, g) in grads {
                    match sum.get_mut(&key) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(key, g);
                        }
                    }
                }
            }
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
            optimizer.step(&mut params, &sum)?;
        }
        let train_loss = epoch_loss / items.len() as f64;
        let val_loss = mean_loss(obj, &params, val).map_err(|e| diverged(e, epoch, usize::MAX))?;
        report.train.push(train_loss);
        report.val.push(val_loss);

        let score = if val.is_empty() { train_loss } else { val_loss };
        if score < best_score {
            best_score = score;
            best = params.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best, report))
}

/// Trains every group of `init` on graph samples.
pub fn train(
    samples: &[GraphSample],
    val: &[GraphSample],
    init: &ModelParams,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, LossReport)> {
    train_objective(&FullModel { config: model }, samples, val, init, config)
}

/// Runs the frozen encoder once per sample.
pub fn embed_samples(samples: &[GraphSample], params: &ModelParams, model: &ModelConfig) -> Result<Vec<EmbeddedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(EmbeddedSample {
                embedding: compute_target_embedding(s, params, model)?,
                prior: motion_prior(s, model),
                future: s.future.clone(),
            })
        })
        .collect()
}

/// Personalizes `base`: the encoder LSTM and GCN are frozen, the decoder
/// LSTM and output head are trained on the driver's samples.
///
/// Because the encoder cannot change, its outputs are computed once and the
/// loop only differentiates the decoder. Freeze flags of the result match
/// `base`.
pub fn finetune(
    base: &ModelParams,
    samples: &[GraphSample],
    val: &[GraphSample],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, LossReport)> {
    let mut start = base.clone();
    for g in base.groups() {
        let frozen = ENCODER_GROUPS.contains(&g.name.as_str());
        start.set_frozen(&g.name, frozen)?;
    }
    let items = embed_samples(samples, base, model)?;
    let val_items = embed_samples(val, base, model)?;
    let (mut tuned, report) = train_objective(&CachedDecoder { config: model }, &items, &val_items, &start, config)?;
    for g in base.groups() {
        tuned.set_frozen(&g.name, g.frozen)?;
    }
    Ok((tuned, report))
}

/// End-to-end gradient check: GCN-LSTM with every width set to 4 and the
/// L1 loss on a random 3-node scene.
///
/// The scene is shrunk to walking pace so that positions stay O(1): at
/// highway scale the 100 m offsets cancel against the truth and finite
/// differences lose about five digits to rounding.
pub fn model_grad_check(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        embed_dim: 4,
        gcn_hidden: 4,
        decoder_hidden: 4,
        input_shift: [0.0; 3],
        input_scale: [1.0; 3],
        output_scale: [1.0; 2],
        ..ModelConfig::default()
    };
    let mut sample = random_sample(3, config.t_in, config.t_out, seed);
    let shrink = 0.05;
    sample.node_features.iter_mut().for_each(|v| *v *= shrink);
    sample.future.iter_mut().flatten().for_each(|v| *v *= shrink);
    let params = init_params(&config, seed)?;
    grad_check(&params, 1e-5, |tape, bound| {
        let out = forward_offsets(tape, bound, &sample, &config)?;
        l1_loss_var(tape, out, &sample.future)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Origin, FEATURES};
    use crate::model::{init_params, predict_offsets, ENCODER_LSTM, GCN};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            gcn_hidden: 8,
            decoder_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn samples(count: usize, seed: u64) -> Vec<GraphSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let n = rng.gen_range(1..4);
                let v: f64 = rng.gen_range(20.0..30.0);
                let mut feats = Vec::new();
                for node in 0..n {
                    let off = node as f64 * 10.0;
                    for k in 0..11 {
                        feats.extend_from_slice(&[off + v * 0.5 * (k as f64 - 10.0), 0.0, v]);
                    }
                }
                debug_assert_eq!(feats.len(), n * 11 * FEATURES);
                let mut adj = vec![0.0; n * n];
                for i in 1..n {
                    adj[i] = 1.0;
                    adj[i * n] = 1.0;
                }
                GraphSample {
                    num_nodes: n,
                    history_len: 11,
                    node_features: feats,
                    adjacency: Tensor::matrix(n, n, adj).unwrap(),
                    target_index: 0,
                    future: (1..=10).map(|k| [v * 0.5 * k as f64, rng.gen_range(-0.5..0.5)]).collect(),
                    origin: Origin { x: 0.0, y: 0.0, t: 0.0 },
                    node_ids: (0..n as u64).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn l1_hand_example() {
        let p = vec![vec![[1.0, 1.0], [2.0, 0.0]]];
        let t = vec![vec![[0.0, 0.0], [0.0, 0.0]]];
        assert_eq!(l1_loss(&p, &t).unwrap(), 2.0);
        assert_eq!(l1_loss(&t, &t).unwrap(), 0.0);
        assert!(l1_loss(&[], &[]).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let pred = [[1.5, -2.0], [0.25, 4.0], [3.0, 3.0]];
        let truth = [[1.0, 1.0], [-0.5, 4.0], [2.0, 2.5]];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(3, 2, pred.iter().flatten().copied().collect()).unwrap());
        let l = l1_loss_var(&mut tape, p, &truth).unwrap();
        let plain = l1_loss(&[pred.to_vec()], &[truth.to_vec()]).unwrap();
        assert!((tape.value(l).item().unwrap() - plain).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn l1_properties(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..12),
            k in 0.01f64..100.0,
        ) {
            let p: Vec<[f64; 2]> = pts.iter().map(|q| [q.0, q.1]).collect();
            let t: Vec<[f64; 2]> = pts.iter().map(|q| [q.2, q.3]).collect();
            let (p, t) = (vec![p], vec![t]);
            let l = l1_loss(&p, &t).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - l1_loss(&t, &p).unwrap()).abs() < 1e-12);
            let scale = |v: &Vec<Vec<[f64; 2]>>| -> Vec<Vec<[f64; 2]>> {
                v.iter().map(|s| s.iter().map(|q| [q[0] * k, q[1] * k]).collect()).collect()
            };
            let lk = l1_loss(&scale(&p), &scale(&t)).unwrap();
            prop_assert!((lk - k * l).abs() <= 1e-9 * (1.0 + k * l));
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let config = tiny();
        let init = init_params(&config, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::pretrain()
        };
        let (p, report) = train(&samples(4, 1), &[], &init, &config, &cfg).unwrap();
        assert!(p.bit_eq(&init));
        assert_eq!(report.epochs(), 0);
        let (q, _) = finetune(&init, &samples(4, 1), &[], &config, &cfg).unwrap();
        assert!(q.bit_eq(&init));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let config = tiny();
        let init = init_params(&config, 2).unwrap();
        let data = samples(24, 3);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 10,
            lr: 3e-3,
            ..TrainConfig::pretrain()
        };
        let (a, ra) = train(&data, &data[..6], &init, &config, &cfg).unwrap();
        let (b, rb) = train(&data, &data[..6], &init, &config, &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ra, rb);
        assert!(ra.train.iter().all(|v| v.is_finite()));
        assert!(ra.train.last().unwrap() < &ra.train[0], "{:?}", ra.train);
        assert_eq!(ra.to_csv().lines().count(), ra.epochs() + 1);
    }

    #[test]
    fn finetune_keeps_encoder_bits() {
        let config = tiny();
        let base = init_params(&config, 5).unwrap();
        let data = samples(12, 6);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::finetune()
        };
        let (tuned, _) = finetune(&base, &data, &data[..3], &config, &cfg).unwrap();
        assert!(tuned.group_bit_eq(&base, ENCODER_LSTM));
        assert!(tuned.group_bit_eq(&base, GCN));
        assert!(!tuned.group_bit_eq(&base, DECODER_LSTM));
        assert!(!tuned.group_bit_eq(&base, OUTPUT_HEAD));
    }

    #[test]
    fn cached_decoder_matches_full_forward() {
        let config = tiny();
        let params = init_params(&config, 8).unwrap();
        let s = &samples(1, 9)[0];
        let emb = embed_samples(std::slice::from_ref(s), &params, &config).unwrap();
        let cached = item_loss(&CachedDecoder { config: &config }, &params, &emb[0]).unwrap();
        let pred = predict_offsets(s, &params, &config).unwrap();
        let full = l1_loss(&[pred], std::slice::from_ref(&s.future)).unwrap();
        assert!((cached - full).abs() < 1e-12);
    }

    #[test]
    fn temporal_split_drops_straddling_windows() {
        let mut data = samples(40, 2);
        for (i, s) in data.iter_mut().enumerate() {
            s.origin.t = 5.0 + i as f64 * DT;
        }
        let boundary = 15.0;
        let (a, b) = temporal_split(&data, boundary);
        assert!(a.iter().all(|s| window_span(s).1 <= boundary));
        assert!(b.iter().all(|s| window_span(s).0 >= boundary));
        // Spans are 10 s long, so 19 anchors straddle the boundary.
        assert_eq!(a.len() + b.len(), data.len() - 19);
    }

    #[test]
    fn rejects_bad_config() {
        let config = tiny();
        let init = init_params(&config, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::pretrain()
        };
        assert!(train(&samples(2, 1), &[], &init, &config, &cfg).is_err());
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::pretrain()
        };
        assert!(train(&samples(2, 1), &[], &init, &config, &cfg).is_err());
    }
}
