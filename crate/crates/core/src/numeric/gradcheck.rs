use super::params::{param_key, BoundParams, ModelParams};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms: central
/// differences cannot resolve them to more than a few digits.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    /// `group/tensor[index]` where the maximum occurred.
    pub worst: String,
    /// Tape and finite-difference gradients at `worst`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Compares tape gradients with central differences for every scalar of
/// every parameter, frozen groups included.
///
/// `loss_fn` must build a scalar loss on the given tape from the bound
/// parameters.
pub fn grad_check<F>(params: &ModelParams, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("eps must lie in (0, 1e-3], got {eps}")));
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &bound)?;
    let analytic = bound.gradients(&tape.backward(loss)?);

    let eval = |p: &ModelParams, name: &str| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound).map_err(|e| match e {
            Error::NonFinite { .. } => Error::ProbeNonFinite { param: name.to_string() },
            other => other,
        })?;
        let v = tape
            .value(loss)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.value(loss).shape().to_vec()))?;
        if !v.is_finite() {
            return Err(Error::ProbeNonFinite { param: name.to_string() });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let mut probe = params.clone();
    let keys: Vec<(String, String, usize)> = params.iter().map(|(g, n, t)| (g.to_string(), n.to_string(), t.numel())).collect();
    for (g, n, numel) in keys {
        let key = param_key(&g, &n);
        for i in 0..numel {
            let name = format!("{key}[{i}]");
            let orig = probe.get(&g, &n).expect("present").data()[i];
            probe.tensor_mut(&g, &n).expect("present").data_mut()[i] = orig + eps;
            let plus = eval(&probe, &name)?;
            probe.tensor_mut(&g, &n).expect("present").data_mut()[i] = orig - eps;
            let minus = eval(&probe, &name)?;
            probe.tensor_mut(&g, &n).expect("present").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[&key].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel;
                report.worst = name;
                report.worst_pair = (a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamGroup, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 1);
        let p = ModelParams::new(vec![ParamGroup::new("lin").with("w", random(&mut rng, 2, 3))]).unwrap();
        let report = grad_check(&p, 1e-5, |tape, b| {
            let xv = tape.constant(x.clone());
            let y = tape.matmul(b.var("lin", "w")?, xv)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::new(vec![ParamGroup::new("g")
            .with("a", random(&mut rng, 3, 4))
            .with("b", random(&mut rng, 4, 4))
            .with("r", random(&mut rng, 1, 4))])
        .unwrap();
        let report = grad_check(&p, 1e-5, |t, b| {
            let (a, w, r) = (b.var("g", "a")?, b.var("g", "b")?, b.var("g", "r")?);
            let m = t.matmul(a, w)?;
            let m = t.add_row(m, r)?;
            let s = t.sigmoid(m)?;
            let th = t.tanh(m)?;
            let re = t.relu(m)?;
            let prod = t.mul(s, th)?;
            let sum = t.add(prod, re)?;
            let diff = t.sub(sum, a)?;
            let top = t.slice_rows(diff, 0, 2)?;
            let left = t.slice_cols(diff, 1, 3)?;
            let cat_r = t.concat_rows(&[top, diff])?;
            let cat_c = t.concat_cols(&[left, diff])?;
            let sc = t.scale(cat_c, 0.7)?;
            let scc = t.scale_cols(sc, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.5])?;
            let ab = t.abs(scc);
            let s1 = t.mean(ab)?;
            let s2 = t.sum(cat_r)?;
            let total = t.add(s1, s2)?;
            Ok(total)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn frozen_groups_still_get_gradients() {
        let mut g = ParamGroup::new("frozen").with("w", Tensor::from_rows(&[[2.0, -1.0]]).unwrap());
        g.frozen = true;
        let p = ModelParams::new(vec![g]).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let a = tape.abs(b.var("frozen", "w").unwrap());
        let loss = tape.sum(a).unwrap();
        let grads = b.gradients(&tape.backward(loss).unwrap());
        assert_eq!(grads["frozen/w"].data(), &[1.0, -1.0]);
        let report = grad_check(&p, 1e-5, |t, b| {
            let a = t.abs(b.var("frozen", "w")?);
            t.sum(a)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn rejects_bad_eps() {
        let p = ModelParams::default();
        assert!(grad_check(&p, 0.0, |t, _| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
        assert!(grad_check(&p, 1e-2, |t, _| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        // w * f64::MAX is finite at w = 1 and overflows at w = 1 + eps.
        let p = ModelParams::new(vec![ParamGroup::new("g").with("w", Tensor::scalar(1.0))]).unwrap();
        let err = grad_check(&p, 1e-4, |t, b| t.scale(b.var("g", "w")?, f64::MAX)).unwrap_err();
        match err {
            Error::ProbeNonFinite { param } => assert_eq!(param, "g/w[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
