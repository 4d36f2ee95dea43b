//! Finite-difference verification of tape gradients over named parameters.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Parameters;

/// Denominator floor for the relative error, so that an identically
/// vanishing gradient compares as an absolute difference.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    /// Entries compared.
    pub checked: usize,
    /// Sampled entries dropped because a perturbation crossed a relu, abs
    /// or max-pool switch, where central differences are not valid.
    pub kinked: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)` over the checked entries.
    pub rel_error: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Compare the tape gradient of `loss` with central differences of step
/// `step` for every parameter tensor of `params`. Tensors with more than
/// `max_entries` elements are checked on a seeded random subset. Samples
/// whose perturbation changes the branch signature of the tape are dropped
/// and counted in [`GroupCheck::kinked`].
pub fn check_parameters<P, F>(params: &P, loss: F, step: f64, max_entries: usize, seed: u64) -> Result<Vec<GroupCheck>>
where
    P: Parameters + Clone,
    F: for<'t> Fn(&'t Tape, &P) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let l = loss(&tape, params)?;
    let base = tape.branch_signature();
    let grads = tape.backward(l)?;
    let eval = |p: &P| -> Result<(f64, u64)> {
        let tape = Tape::inference();
        let v = loss(&tape, p)?.item()?;
        Ok((v, tape.branch_signature()))
    };

    let mut groups = Vec::new();
    params.visit(&mut |p| groups.push((p.name.clone(), p.value.len())));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(groups.len());
    let mut work = params.clone();
    for (g, (name, len)) in groups.into_iter().enumerate() {
        let full = grads.param(&name).unwrap_or_else(|| vec![0.0; len]);
        let idx: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        let mut kinked = 0;
        for &i in &idx {
            let nudge = |w: &mut P, delta: f64| {
                let mut k = 0;
                w.visit_mut(&mut |q| {
                    if k == g {
                        q.value.data_mut()[i] += delta;
                    }
                    k += 1;
                });
            };
            let original = {
                let mut k = 0;
                let mut v = 0.0;
                work.visit(&mut |q| {
                    if k == g {
                        v = q.value.data()[i];
                    }
                    k += 1;
                });
                v
            };
            nudge(&mut work, step);
            let plus = eval(&work)?;
            nudge(&mut work, -2.0 * step);
            let minus = eval(&work)?;
            // restore exactly rather than by a third addition
            let mut k = 0;
            work.visit_mut(&mut |q| {
                if k == g {
                    q.value.data_mut()[i] = original;
                }
                k += 1;
            });
            if plus.1 != base || minus.1 != base {
                kinked += 1;
                continue;
            }
            analytic.push(full[i]);
            numeric.push((plus.0 - minus.0) / (2.0 * step));
        }
        out.push(GroupCheck {
            name,
            checked: analytic.len(),
            kinked,
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}
