use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::nn::{ParamStore, TensorRecord};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can live in a checkpoint next to the weights.
#[derive(Debug)]
pub struct Adam {
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { step: 0, m, v })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone,
    /// but their moments still decay as if the gradient were zero.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, var) in store.iter() {
            let m = self.m.get_mut(name).ok_or_else(|| missing(name))?;
            let v = self.v.get_mut(name).ok_or_else(|| missing(name))?;
            let p = var.as_tensor();
            match grads.get(p) {
                Some(g) => {
                    *m = ((&*m * ADAM_BETA1)? + (g * (1.0 - ADAM_BETA1))?)?;
                    *v = ((&*v * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
                }
                None => {
                    *m = (&*m * ADAM_BETA1)?;
                    *v = (&*v * ADAM_BETA2)?;
                }
            }
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + ADAM_EPS)?)?;
            var.set(&(p - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn export(&self) -> Result<BTreeMap<String, TensorRecord>> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.m {
            out.insert(format!("{M_PREFIX}{name}"), TensorRecord::from_tensor(t)?);
        }
        for (name, t) in &self.v {
            out.insert(format!("{V_PREFIX}{name}"), TensorRecord::from_tensor(t)?);
        }
        Ok(out)
    }

    /// Restores moments written by [`Self::export`].
    pub fn restore(store: &ParamStore, records: &BTreeMap<String, TensorRecord>, step: usize) -> Result<Self> {
        let mut adam = Self::new(store)?;
        adam.step = step;
        for (name, var) in store.iter() {
            for (prefix, slot) in [(M_PREFIX, &mut adam.m), (V_PREFIX, &mut adam.v)] {
                let key = format!("{prefix}{name}");
                let rec = records
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if rec.shape != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has shape {:?}", rec.shape)));
                }
                slot.insert(name.clone(), rec.to_tensor(store.dtype(), store.device())?);
            }
        }
        Ok(adam)
    }
}

pub fn is_optimizer_key(name: &str) -> bool {
    name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX)
}

fn missing(name: &str) -> Error {
    Error::InvalidInput(format!("parameter {name} was added after the optimizer was built"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn first_step_moves_each_weight_by_lr_times_sign() {
        // With bias correction the first update is lr·g/(|g|+eps).
        let mut store = ParamStore::new(DType::F64, 3);
        let w = store.uniform("w", &[5], 1.0).unwrap();
        let before = w.to_vec1::<f64>().unwrap();
        let loss = (w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(&store).unwrap();
        adam.step(&store, &grads, 0.01).unwrap();
        let after = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for (b, a) in before.iter().zip(&after) {
            let expect = b - 0.01 * b / (b.abs() + ADAM_EPS);
            assert!((a - expect).abs() < 1e-12, "{a} vs {expect}");
        }
    }

    #[test]
    fn matches_scalar_reference_over_several_steps() {
        let mut store = ParamStore::new(DType::F64, 0);
        store.uniform("w", &[1], 1.0).unwrap();
        let mut x = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0];
        let (mut m, mut v) = (0.0, 0.0);
        let mut adam = Adam::new(&store).unwrap();
        for t in 1..=10 {
            let w = store.get("w").unwrap().as_tensor().clone();
            let loss = w.sqr().unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&store, &grads, 0.05).unwrap();

            let g = 4.0 * x * x * x;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let mh = m / (1.0 - ADAM_BETA1.powi(t));
            let vh = v / (1.0 - ADAM_BETA2.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + ADAM_EPS);
        }
        let got = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - x).abs() < 1e-12);
    }

    #[test]
    fn state_round_trips() {
        let mut store = ParamStore::new(DType::F32, 1);
        let w = store.uniform("a.w", &[3, 2], 1.0).unwrap();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(&store).unwrap();
        adam.step(&store, &grads, 0.1).unwrap();
        let records = adam.export().unwrap();
        assert!(records.keys().all(|k| is_optimizer_key(k)));
        let back = Adam::restore(&store, &records, adam.step_count()).unwrap();
        assert_eq!(back.export().unwrap(), records);
        assert_eq!(back.step_count(), 1);
    }
}
