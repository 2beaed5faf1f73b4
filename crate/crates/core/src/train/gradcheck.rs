//! Central finite-difference gradient checks in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Magnitude below which gradients are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input index or parameter name of the worst entry, with its flat offset.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = label();
        }
    }
}

/// Compares analytic gradients of `f` with central differences on every
/// entry of `inputs` and every parameter in `store`.
///
/// The output of `f` is projected onto a fixed random direction drawn from
/// `seed`, so `f` may return a tensor of any shape.
pub fn grad_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], record: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = if record { Tape::new() } else { Tape::inference() };
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let dir = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let dir = tape.constant(dir);
        let proj = tape.mul(out, dir)?;
        let loss = tape.sum_all(proj);
        Ok((tape, vars, loss))
    };
    let scalar = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss) = eval(store, inputs, false)?;
        Ok(tape.value(loss).data()[0])
    };

    let (tape, vars, loss) = eval(store, inputs, true)?;
    let grads = tape.backward(loss);
    let pgrads = tape.param_grads(&grads);
    let mut report = GradCheckReport::default();

    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            probe[i].data_mut()[k] = x0 + STEP;
            let up = scalar(store, &probe)?;
            probe[i].data_mut()[k] = x0 - STEP;
            let down = scalar(store, &probe)?;
            probe[i].data_mut()[k] = x0;
            report.record(|| format!("input {i}[{k}]"), analytic.data()[k], (up - down) / (2.0 * STEP));
        }
    }

    let mut pstore = store.clone();
    let names: Vec<String> = store.names().filter(|n| store.is_trainable(n)).cloned().collect();
    for name in names {
        let numel = store.get(&name).numel();
        let analytic = pgrads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(store.get(&name).shape()));
        for k in 0..numel {
            let x0 = store.get(&name).data()[k];
            pstore.get_mut(&name).expect("registered").data_mut()[k] = x0 + STEP;
            let up = scalar(&pstore, inputs)?;
            pstore.get_mut(&name).expect("registered").data_mut()[k] = x0 - STEP;
            let down = scalar(&pstore, inputs)?;
            pstore.get_mut(&name).expect("registered").data_mut()[k] = x0;
            report.record(|| format!("{name}[{k}]"), analytic.data()[k], (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let store = ParamStore::new();
        let x = Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        let ok = grad_check(&store, &[x.clone()], 1, |t, _, v| Ok(t.tanh(v[0]))).unwrap();
        assert!(ok.max_rel_err < 1e-6, "{ok:?}");
        // Detaching hides the true gradient, so the check must notice.
        let bad = grad_check(&store, &[x], 1, |t, _, v| {
            let d = t.detach(v[0]);
            let s = t.tanh(v[0]);
            t.add(s, d)
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }

    #[test]
    fn covers_parameters() {
        let mut store = ParamStore::new();
        store.init_conv(&mut ChaCha8Rng::seed_from_u64(2), "c", 2, 2, 3, 1);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[2, 4, 4], 1.0);
        let r = grad_check(&store, &[x], 4, |t, s, v| crate::nn::conv(t, s, "c", v[0], 1, 1)).unwrap();
        assert_eq!(r.checked, 32 + 36 + 2);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
