//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, FafError, Result};
use crate::tensor::data::Real;
use crate::tensor::params::ParamStore;
use crate::tensor::tape::{Tape, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// A parameter coordinate: (entry name, flat element index).
pub type Coord = (String, usize);

/// Deterministically sample up to `count` coordinates across all entries.
pub fn sample_coords<T: Real>(params: &ParamStore<T>, count: usize, seed: u64) -> Vec<Coord> {
    let mut all: Vec<Coord> = Vec::new();
    for e in params.iter() {
        for i in 0..e.value.numel() {
            all.push((e.name.clone(), i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(count);
    all
}

/// Compare the tape's analytic gradient against central differences
/// (f(p+h) - f(p-h)) / 2h at the sampled coordinates.
///
/// `build` must construct the scalar loss on the supplied tape from the
/// supplied store; it is re-run on perturbed clones of `params`, so any
/// in-place state updates it makes (batch-norm running stats) are discarded
/// between evaluations. Non-deterministic computations are rejected by
/// evaluating the unperturbed loss twice and comparing bits.
pub fn finite_diff_check<T, F>(
    build: F,
    params: &ParamStore<T>,
    step: T,
    coords: &[Coord],
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &mut ParamStore<T>) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(arg_err("finite_diff_check", format!("step must be positive, got {step}")));
    }

    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::new();
        let mut local = store.clone();
        let loss = build(&mut tape, &mut local)?;
        if !tape.value(loss).is_scalar() {
            return Err(FafError::NonScalarLoss { numel: tape.value(loss).numel() });
        }
        Ok(tape.value(loss).scalar_value())
    };

    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a.to_f64() != base_b.to_f64() {
        return Err(FafError::NonDeterministic {
            detail: format!("two evaluations differ: {base_a} vs {base_b}"),
        });
    }

    // Analytic gradients via one backward pass.
    let mut analytic = params.clone();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, &mut analytic)?;
        tape.backward(loss, &mut analytic)?;
    }

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coords_checked: 0 };
    let two = T::of(2.0);
    for (name, idx) in coords {
        let mut plus = params.clone();
        plus.get_mut(name)?.data_mut()[*idx] += step;
        let f_plus = eval(&plus)?;

        let mut minus = params.clone();
        minus.get_mut(name)?.data_mut()[*idx] -= step;
        let f_minus = eval(&minus)?;

        let numeric = ((f_plus - f_minus) / (two * step)).as_f64();
        let grad = analytic.grad(name)?.data()[*idx].as_f64();
        let denom = grad.abs().max(numeric.abs()).max(1e-8);
        let rel = (grad - numeric).abs() / denom;
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name.clone(), *idx));
        }
    }
    Ok(report)
}
