//! Comparison models: a constant-velocity Kalman filter over the target's
//! positions, and the graph-free sequence-to-sequence LSTM.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::graph::{GraphSample, DT};
use crate::model::{predict, Architecture, ModelConfig};
use crate::numeric::ModelParams;

/// White-noise acceleration density, m/s^2.
pub const PROCESS_NOISE: f64 = 0.5;
/// Position measurement standard deviation, m.
pub const MEASUREMENT_NOISE: f64 = 0.1;

/// Filter state `(x, y, vx, vy)` with its covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvKalman {
    pub dt: f64,
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl Default for CvKalman {
    fn default() -> Self {
        Self {
            dt: DT,
            process_noise: PROCESS_NOISE,
            measurement_noise: MEASUREMENT_NOISE,
        }
    }
}

impl CvKalman {
    fn transition(&self) -> Matrix4<f64> {
        let mut f = Matrix4::identity();
        f[(0, 2)] = self.dt;
        f[(1, 3)] = self.dt;
        f
    }

    fn process_cov(&self) -> Matrix4<f64> {
        let (dt, q) = (self.dt, self.process_noise * self.process_noise);
        let (a, b, c) = (dt.powi(4) / 4.0 * q, dt.powi(3) / 2.0 * q, dt * dt * q);
        Matrix4::new(
            a, 0.0, b, 0.0, //
            0.0, a, 0.0, b, //
            b, 0.0, c, 0.0, //
            0.0, b, 0.0, c,
        )
    }

    fn observation() -> Matrix2x4<f64> {
        Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    }

    /// Starts from the first two positions: position = second point,
    /// velocity = their finite difference.
    pub fn init(&self, p0: [f64; 2], p1: [f64; 2]) -> KalmanState {
        let r = self.measurement_noise * self.measurement_noise;
        let v = 2.0 * r / (self.dt * self.dt);
        KalmanState {
            x: Vector4::new(p1[0], p1[1], (p1[0] - p0[0]) / self.dt, (p1[1] - p0[1]) / self.dt),
            p: Matrix4::from_diagonal(&Vector4::new(r, r, v, v)),
        }
    }

    pub fn predict_step(&self, s: &KalmanState) -> KalmanState {
        let f = self.transition();
        KalmanState {
            x: f * s.x,
            p: f * s.p * f.transpose() + self.process_cov(),
        }
    }

    /// Measurement update in Joseph form, which keeps `P` symmetric PSD.
    pub fn update(&self, s: &KalmanState, z: [f64; 2]) -> KalmanState {
        let h = Self::observation();
        let r = Matrix2::identity() * self.measurement_noise * self.measurement_noise;
        let innovation = Vector2::new(z[0], z[1]) - h * s.x;
        let s_cov = h * s.p * h.transpose() + r;
        let s_inv = s_cov.try_inverse().expect("innovation covariance is positive definite");
        let k: Matrix4x2<f64> = s.p * h.transpose() * s_inv;
        let ikh = Matrix4::identity() - k * h;
        let p = ikh * s.p * ikh.transpose() + k * r * k.transpose();
        KalmanState {
            x: s.x + k * innovation,
            p: (p + p.transpose()) * 0.5,
        }
    }

    /// Assimilates every position of `history` (oldest first).
    pub fn filter(&self, history: &[[f64; 2]]) -> Result<KalmanState> {
        if history.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "constant-velocity filter needs >= 2 points, got {}",
                history.len()
            )));
        }
        let mut s = self.init(history[0], history[1]);
        for &z in &history[2..] {
            s = self.update(&self.predict_step(&s), z);
        }
        Ok(s)
    }

    /// Filters `history` then rolls the motion model `t_out` steps ahead.
    pub fn predict(&self, history: &[[f64; 2]], t_out: usize) -> Result<Vec<[f64; 2]>> {
        let mut s = self.filter(history)?;
        let mut out = Vec::with_capacity(t_out);
        for _ in 0..t_out {
            s = self.predict_step(&s);
            out.push([s.x[0], s.x[1]]);
        }
        Ok(out)
    }
}

/// Constant-velocity prediction with default noise scales.
pub fn cv_kalman_predict(history: &[[f64; 2]], t_out: usize) -> Result<Vec<[f64; 2]>> {
    CvKalman::default().predict(history, t_out)
}

/// Absolute CV prediction for a graph sample's target.
pub fn cv_predict_sample(sample: &GraphSample) -> Result<Vec<[f64; 2]>> {
    cv_kalman_predict(&sample.target_history_absolute(), sample.t_out())
}

/// Graph-free LSTM encoder-decoder prediction (absolute coordinates).
pub fn seq2seq_predict(sample: &GraphSample, params: &ModelParams, config: &ModelConfig) -> Result<Vec<[f64; 2]>> {
    if config.architecture != Architecture::Seq2Seq {
        return Err(Error::Config("seq2seq_predict needs a seq2seq model config".into()));
    }
    predict(sample, params, config)
}
