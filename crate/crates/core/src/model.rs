//! GCN-LSTM encoder-decoder.
//!
//! One shared-weight LSTM embeds every node's history, a two-layer GCN mixes
//! the embeddings over the normalized traffic graph, and an LSTM decoder fed
//! with the target's GCN row emits `T_out` future offsets through a linear
//! head. The sequence-to-sequence baseline reuses the same LSTM code without
//! the graph block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, to_absolute, GraphSample, Origin, DT, FEATURES};
use crate::numeric::{BoundParams, ModelParams, ParamGroup, Tape, Tensor, Var};

pub const ENCODER_LSTM: &str = "encoder_lstm";
pub const GCN: &str = "gcn";
pub const DECODER_LSTM: &str = "decoder_lstm";
pub const OUTPUT_HEAD: &str = "output_head";

/// Groups frozen during personalization.
pub const ENCODER_GROUPS: [&str; 2] = [ENCODER_LSTM, GCN];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Shared LSTM embedder + 2-layer GCN + LSTM decoder.
    GcnLstm,
    /// LSTM encoder + LSTM decoder over the target history only.
    Seq2Seq,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::GcnLstm => "gcn_lstm",
            Architecture::Seq2Seq => "seq2seq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gcn_lstm" => Ok(Architecture::GcnLstm),
            "seq2seq" => Ok(Architecture::Seq2Seq),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub gcn_hidden: usize,
    pub decoder_hidden: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Subtracted from (x, y, speed) before scaling.
    pub input_shift: [f64; 3],
    /// Divisors applied to (x, y, speed) before the encoder.
    pub input_scale: [f64; 3],
    /// Meters per head output unit for (x, y).
    pub output_scale: [f64; 2],
    /// Head output is a correction to the constant-velocity extrapolation of
    /// the target's last observed step rather than the offset itself.
    pub cv_residual: bool,
    /// The decoder also receives the target's own encoder state next to its
    /// GCN row (GCN-LSTM only).
    pub target_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::GcnLstm,
            embed_dim: 32,
            gcn_hidden: 32,
            decoder_hidden: 32,
            t_in: 10,
            t_out: 10,
            input_shift: [0.0, 0.0, 25.0],
            input_scale: [50.0, 4.0, 5.0],
            output_scale: [4.0, 1.0],
            cv_residual: true,
            target_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn seq2seq(self) -> Self {
        Self {
            architecture: Architecture::Seq2Seq,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.embed_dim, self.gcn_hidden, self.decoder_hidden, self.t_in, self.t_out].contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.input_scale.iter().chain(&self.output_scale).any(|s| !(*s > 0.0)) {
            return Err(Error::Config("input/output scales must be > 0".into()));
        }
        if self.input_shift[..2] != [0.0, 0.0] || !self.input_shift[2].is_finite() {
            return Err(Error::Config("only the speed input may be shifted".into()));
        }
        Ok(())
    }

    /// Width of the vector the decoder receives at every step.
    pub fn decoder_input(&self) -> usize {
        match self.architecture {
            Architecture::GcnLstm if self.target_skip => self.gcn_hidden + self.embed_dim,
            Architecture::GcnLstm => self.gcn_hidden,
            Architecture::Seq2Seq => self.embed_dim,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn lstm_group(rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> ParamGroup {
    let k = 1.0 / (hidden as f64).sqrt();
    ParamGroup::new(name)
        .with("w_x", uniform(rng, input, 4 * hidden, k))
        .with("w_h", uniform(rng, hidden, 4 * hidden, k))
        .with("b", uniform(rng, 1, 4 * hidden, k))
}

/// Draws fresh weights, each uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = vec![lstm_group(&mut rng, ENCODER_LSTM, FEATURES, config.embed_dim)];
    if config.architecture == Architecture::GcnLstm {
        let (d, g) = (config.embed_dim, config.gcn_hidden);
        groups.push(
            ParamGroup::new(GCN)
                .with("w0", uniform(&mut rng, d, g, 1.0 / (d as f64).sqrt()))
                .with("w1", uniform(&mut rng, g, g, 1.0 / (g as f64).sqrt())),
        );
    }
    groups.push(lstm_group(&mut rng, DECODER_LSTM, config.decoder_input(), config.decoder_hidden));
    let k = 1.0 / (config.decoder_hidden as f64).sqrt();
    groups.push(
        ParamGroup::new(OUTPUT_HEAD)
            .with("w", uniform(&mut rng, config.decoder_hidden, 2, k))
            .with("b", uniform(&mut rng, 1, 2, k)),
    );
    ModelParams::new(groups)
}

/// Tape handles for one LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

impl LstmWeights {
    pub fn bind(bound: &BoundParams, group: &str) -> Result<Self> {
        Ok(Self {
            w_x: bound.var(group, "w_x")?,
            w_h: bound.var(group, "w_h")?,
            b: bound.var(group, "b")?,
        })
    }
}

/// `x W_x + b`, the input half of the gate pre-activations.
pub fn lstm_input_projection(tape: &mut Tape, x: Var, w: &LstmWeights) -> Result<Var> {
    let xw = tape.matmul(x, w.w_x)?;
    tape.add_row(xw, w.b)
}

/// One gated update from an already projected input.
pub fn lstm_step_projected(tape: &mut Tape, x_proj: Var, state: (Var, Var), w: &LstmWeights) -> Result<(Var, Var)> {
    let (h, c) = state;
    let hidden = tape.value(h).cols();
    let hw = tape.matmul(h, w.w_h)?;
    let gates = tape.add(x_proj, hw)?;
    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new)?;
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// Standard LSTM cell with gate order input, forget, candidate, output.
pub fn lstm_step(tape: &mut Tape, x: Var, state: (Var, Var), w: &LstmWeights) -> Result<(Var, Var)> {
    let x_proj = lstm_input_projection(tape, x, w)?;
    lstm_step_projected(tape, x_proj, state, w)
}

fn zero_state(tape: &mut Tape, rows: usize, hidden: usize) -> (Var, Var) {
    let h = tape.constant(Tensor::zeros(&[rows, hidden]));
    let c = tape.constant(Tensor::zeros(&[rows, hidden]));
    (h, c)
}

fn scaled_step(sample: &GraphSample, step: usize, nodes: &[usize], config: &ModelConfig) -> Tensor {
    let mut data = Vec::with_capacity(nodes.len() * FEATURES);
    for &n in nodes {
        let h = sample.node_history(n);
        for f in 0..FEATURES {
            data.push((h[step * FEATURES + f] - config.input_shift[f]) / config.input_scale[f]);
        }
    }
    Tensor::matrix(nodes.len(), FEATURES, data).expect("non-empty node list")
}

/// Runs the shared encoder LSTM over the histories of `nodes`; returns the
/// final hidden states, one row per node in the given order.
pub fn encode_nodes(tape: &mut Tape, w: &LstmWeights, sample: &GraphSample, nodes: &[usize], config: &ModelConfig) -> Result<Var> {
    let hidden = tape.value(w.w_h).rows();
    let mut state = zero_state(tape, nodes.len(), hidden);
    for step in 0..sample.history_len {
        let x = tape.constant(scaled_step(sample, step, nodes, config));
        state = lstm_step(tape, x, state, w)?;
    }
    Ok(state.0)
}

/// `N x D` embedding of every node's history.
pub fn encode_history(tape: &mut Tape, w: &LstmWeights, sample: &GraphSample, config: &ModelConfig) -> Result<Var> {
    let nodes: Vec<usize> = (0..sample.num_nodes).collect();
    encode_nodes(tape, w, sample, &nodes, config)
}

/// `A (ReLU(A X W0)) W1` with `A` already normalized; no final activation.
pub fn gcn_forward(tape: &mut Tape, x_embed: Var, a_norm: Var, w0: Var, w1: Var) -> Result<Var> {
    let ax = tape.matmul(a_norm, x_embed)?;
    let axw = tape.matmul(ax, w0)?;
    let h0 = tape.relu(axw)?;
    let ah = tape.matmul(a_norm, h0)?;
    tape.matmul(ah, w1)
}

/// Feeds `embedding` (1 x width) to the decoder LSTM at every one of
/// `t_out` steps from a zero state; returns `t_out x 2` head outputs.
pub fn decode_future(tape: &mut Tape, w: &LstmWeights, head_w: Var, head_b: Var, embedding: Var, t_out: usize) -> Result<Var> {
    let hidden = tape.value(w.w_h).rows();
    let x_proj = lstm_input_projection(tape, embedding, w)?;
    let mut state = zero_state(tape, 1, hidden);
    let mut steps = Vec::with_capacity(t_out);
    for _ in 0..t_out {
        state = lstm_step_projected(tape, x_proj, state, w)?;
        let y = tape.matmul(state.0, head_w)?;
        steps.push(tape.add_row(y, head_b)?);
    }
    tape.concat_rows(&steps)
}

/// Nodes whose features can reach the target through two GCN layers.
fn receptive_field(sample: &GraphSample) -> Vec<usize> {
    let n = sample.num_nodes;
    let mut hops = vec![usize::MAX; n];
    hops[sample.target_index] = 0;
    for depth in 0..2 {
        for i in 0..n {
            if hops[i] == depth {
                for (j, h) in hops.iter_mut().enumerate() {
                    if sample.adjacency.get(i, j) != 0.0 && *h == usize::MAX {
                        *h = depth + 1;
                    }
                }
            }
        }
    }
    (0..n).filter(|&i| hops[i] != usize::MAX).collect()
}

/// Target embedding handed to the decoder (1 x decoder input width).
///
/// For the GCN path only nodes within two hops of the target are encoded;
/// the normalized adjacency is still computed on the full graph, so the
/// target row is the same as that of the full `gcn_forward` output.
pub fn target_embedding(tape: &mut Tape, bound: &BoundParams, sample: &GraphSample, config: &ModelConfig) -> Result<Var> {
    let enc = LstmWeights::bind(bound, ENCODER_LSTM)?;
    match config.architecture {
        Architecture::Seq2Seq => encode_nodes(tape, &enc, sample, &[sample.target_index], config),
        Architecture::GcnLstm => {
            let nodes = receptive_field(sample);
            let full = normalize_adjacency(&sample.adjacency)?;
            let m = nodes.len();
            let mut sub = Vec::with_capacity(m * m);
            for &i in &nodes {
                for &j in &nodes {
                    sub.push(full.get(i, j));
                }
            }
            let a_norm = tape.constant(Tensor::matrix(m, m, sub)?);
            let x = encode_nodes(tape, &enc, sample, &nodes, config)?;
            let out = gcn_forward(tape, x, a_norm, bound.var(GCN, "w0")?, bound.var(GCN, "w1")?)?;
            let row = nodes
                .iter()
                .position(|&i| i == sample.target_index)
                .expect("target is in its own receptive field");
            let gcn_row = tape.slice_rows(out, row, row + 1)?;
            if config.target_skip {
                let own = tape.slice_rows(x, row, row + 1)?;
                tape.concat_cols(&[gcn_row, own])
            } else {
                Ok(gcn_row)
            }
        }
    }
}

/// Offsets the head output is added to (`t_out x 2`): zero, or the target
/// continuing at the velocity of its last observed step.
pub fn motion_prior(sample: &GraphSample, config: &ModelConfig) -> Tensor {
    let mut data = vec![0.0; config.t_out * 2];
    if config.cv_residual && sample.history_len >= 2 {
        let h = sample.node_history(sample.target_index);
        let last = (sample.history_len - 1) * FEATURES;
        let prev = last - FEATURES;
        for k in 0..config.t_out {
            let steps = (k + 1) as f64;
            for d in 0..2 {
                data[k * 2 + d] = h[last + d] + steps * (h[last + d] - h[prev + d]);
            }
        }
    }
    Tensor::matrix(config.t_out, 2, data).expect("t_out >= 1")
}

/// Decoder + head from a target embedding, scaled to meters and added to
/// `prior` (`t_out x 2`).
pub fn decode_offsets(tape: &mut Tape, bound: &BoundParams, embedding: Var, prior: &Tensor, config: &ModelConfig) -> Result<Var> {
    let dec = LstmWeights::bind(bound, DECODER_LSTM)?;
    let raw = decode_future(
        tape,
        &dec,
        bound.var(OUTPUT_HEAD, "w")?,
        bound.var(OUTPUT_HEAD, "b")?,
        embedding,
        config.t_out,
    )?;
    let scaled = tape.scale_cols(raw, &config.output_scale)?;
    let prior = tape.constant(prior.clone());
    tape.add(scaled, prior)
}

/// Full forward pass: target-centric offsets in meters (`t_out x 2`).
pub fn forward_offsets(tape: &mut Tape, bound: &BoundParams, sample: &GraphSample, config: &ModelConfig) -> Result<Var> {
    if sample.history_len != config.t_in + 1 || sample.t_out() != config.t_out {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![sample.history_len, sample.t_out()],
            rhs: vec![config.t_in + 1, config.t_out],
        });
    }
    let emb = target_embedding(tape, bound, sample, config)?;
    decode_offsets(tape, bound, emb, &motion_prior(sample, config), config)
}

fn rows_to_points(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Predicted target-centric offsets in meters.
pub fn predict_offsets(sample: &GraphSample, params: &ModelParams, config: &ModelConfig) -> Result<Vec<[f64; 2]>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_offsets(&mut tape, &bound, sample, config)?;
    Ok(rows_to_points(tape.value(out)))
}

/// Absolute predicted trajectory (`t_out` points).
pub fn predict(sample: &GraphSample, params: &ModelParams, config: &ModelConfig) -> Result<Vec<[f64; 2]>> {
    Ok(to_absolute(&predict_offsets(sample, params, config)?, &sample.origin))
}

/// Value of the target embedding without keeping a tape around.
pub fn compute_target_embedding(sample: &GraphSample, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_groups(&mut tape, |g| ENCODER_GROUPS.contains(&g));
    let emb = target_embedding(&mut tape, &bound, sample, config)?;
    Ok(tape.value(emb).clone())
}

/// A plausible random highway scene for property checks: node 0 is the
/// target, every node drives at 20-30 m/s with small jitter, edges are
/// drawn with probability 1/2 and the future continues the target's motion
/// with noise.
pub fn random_sample(num_nodes: usize, t_in: usize, t_out: usize, seed: u64) -> GraphSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let history_len = t_in + 1;
    let mut node_features = Vec::with_capacity(num_nodes * history_len * FEATURES);
    let mut target_v = 0.0;
    for node in 0..num_nodes {
        let (x0, y0) = if node == 0 {
            (0.0, 0.0)
        } else {
            (rng.gen_range(-30.0..30.0), [-3.7, 0.0, 3.7][rng.gen_range(0..3)])
        };
        let v: f64 = rng.gen_range(20.0..30.0);
        if node == 0 {
            target_v = v;
        }
        for k in 0..history_len {
            let back = (t_in - k) as f64 * DT;
            node_features.extend_from_slice(&[
                x0 - v * back + rng.gen_range(-0.2..0.2),
                y0 + rng.gen_range(-0.1..0.1),
                v + rng.gen_range(-0.5..0.5),
            ]);
        }
    }
    let mut adj = vec![0.0; num_nodes * num_nodes];
    for i in 0..num_nodes {
        for j in (i + 1)..num_nodes {
            if rng.gen_bool(0.5) {
                adj[i * num_nodes + j] = 1.0;
                adj[j * num_nodes + i] = 1.0;
            }
        }
    }
    let future = (1..=t_out)
        .map(|k| [target_v * DT * k as f64 + rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)])
        .collect();
    GraphSample {
        num_nodes,
        history_len,
        node_features,
        adjacency: Tensor::matrix(num_nodes, num_nodes, adj).expect("num_nodes >= 1"),
        target_index: 0,
        future,
        origin: Origin {
            x: rng.gen_range(0.0..1000.0),
            y: rng.gen_range(0.0..11.0),
            t: rng.gen_range(0.0..600.0),
        },
        node_ids: (0..num_nodes as u64).collect(),
    }
}
