//! Parameter storage, layer helpers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which parameters receive gradients, by name prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum ParamMask {
    #[default]
    All,
    /// Only parameters whose name starts with one of the prefixes.
    Only(Vec<String>),
    /// Every parameter except those whose name starts with one of the prefixes.
    AllExcept(Vec<String>),
}

impl ParamMask {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            ParamMask::All => true,
            ParamMask::Only(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            ParamMask::AllExcept(p) => !p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    mask: ParamMask,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), mask: ParamMask::All }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    /// Panics if `name` is not registered; model code only requests
    /// parameters it registered at construction.
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn set_mask(&mut self, mask: ParamMask) {
        self.mask = mask;
    }

    pub fn mask(&self) -> &ParamMask {
        &self.mask
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.mask.allows(name)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    /// Registers a conv layer `name.w [cout, cin/groups, k, k]` and `name.b [cout]`.
    pub fn init_conv(&mut self, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, groups: usize) {
        let fan_in = cin / groups * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(format!("{name}.w"), uniform(rng, &[cout, cin / groups, k, k], bound));
        self.insert(format!("{name}.b"), uniform(rng, &[cout], bound));
    }

    /// Registers a transposed conv layer `name.w [cin, cout, k, k]` and `name.b [cout]`.
    pub fn init_deconv(&mut self, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cout * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(format!("{name}.w"), uniform(rng, &[cin, cout, k, k], bound));
        self.insert(format!("{name}.b"), uniform(rng, &[cout], bound));
    }
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

/// `conv2d` with the parameters registered under `name`.
pub fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    conv_grouped(tape, store, name, x, stride, pad, 1)
}

pub fn conv_grouped<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    tape.conv2d(x, w, Some(b), stride, pad, groups)
}

/// Transposed conv with the parameters registered under `name`.
pub fn deconv<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    tape.deconv2d(x, w, Some(b), stride, pad, out_pad)
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn lrelu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters outside the store's mask are skipped
    /// even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mask_prefixes() {
        let m = ParamMask::Only(vec!["fer.".into()]);
        assert!(m.allows("fer.enc4.agg_l.w"));
        assert!(!m.allows("ctx.enc1.w"));
        let m = ParamMask::AllExcept(vec!["fer.".into()]);
        assert!(!m.allows("fer.x"));
        assert!(m.allows("em.x"));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&store, "x");
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum_all(sq);
            let g = tape.backward(loss);
            let grads = tape.param_grads(&g);
            opt.step(&mut store, &grads);
        }
        assert!(store.get("x").max_abs() < 1e-2);
    }

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        a.init_conv(&mut ChaCha8Rng::seed_from_u64(7), "c", 4, 8, 3, 1);
        b.init_conv(&mut ChaCha8Rng::seed_from_u64(7), "c", 4, 8, 3, 1);
        assert_eq!(a.get("c.w"), b.get("c.w"));
    }
}
