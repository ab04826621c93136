//! Central finite-difference verification of autograd gradients.
//!
//! Meant for float64 parameter stores. The relative error of one entry is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`; the floor keeps
//! entries whose true gradient is numerically zero from dominating the report.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Every entry of every parameter.
pub fn all_entries(store: &ParamStore) -> Vec<(String, usize)> {
    store
        .iter()
        .flat_map(|(name, var)| (0..var.elem_count()).map(move |i| (name.clone(), i)))
        .collect()
}

/// A seeded random subset holding `fraction` of all entries (at least one).
pub fn sample_entries(store: &ParamStore, fraction: f64, seed: u64) -> Vec<(String, usize)> {
    let mut all = all_entries(store);
    let n = ((all.len() as f64 * fraction).ceil() as usize).clamp(1, all.len().max(1));
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(n);
    all.sort();
    all
}

/// Compares the backprop gradient of `loss_fn` against central differences
/// with step `h` on the selected parameter entries.
pub fn check_gradients<F>(
    store: &ParamStore,
    entries: &[(String, usize)],
    h: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::InvalidInput("gradient checks need a float64 store".into()));
    }
    let loss = loss_fn()?;
    let grads = loss.backward()?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let eval = || -> Result<f64> { Ok(loss_fn()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };

    let mut current: Option<(String, Vec<f64>, Vec<f64>)> = None;
    for (name, idx) in entries {
        let var = store
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if current.as_ref().map(|c| &c.0) != Some(name) {
            let values = var.flatten_all()?.to_vec1::<f64>()?;
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
                None => vec![0.0; values.len()],
            };
            current = Some((name.clone(), values, analytic));
        }
        let (_, values, analytic) = current.as_ref().unwrap();
        let shape = var.dims().to_vec();
        let set = |vals: &[f64]| -> Result<()> {
            var.set(&Tensor::from_slice(vals, shape.as_slice(), var.device())?)?;
            Ok(())
        };

        let mut probe = values.clone();
        probe[*idx] = values[*idx] + h;
        set(&probe)?;
        let plus = eval()?;
        probe[*idx] = values[*idx] - h;
        set(&probe)?;
        let minus = eval()?;
        set(values)?;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[*idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), *idx, a, numeric));
        }
    }
    Ok(report)
}
