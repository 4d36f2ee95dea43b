use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-label sigmoid cross-entropy of logits `x: [N, I]` against binary
/// labels `z`, averaged over all `N·I` entries. Uses
/// `max(x, 0) - x·z + ln(1 + e^-|x|)`, which never overflows.
pub fn bce_loss<'t>(x: Var<'t>, z: &Tensor) -> Result<Var<'t>> {
    let xs = x.shape();
    if xs.as_slice() != z.shape() {
        return Err(Error::dim("bce_loss", &xs, z.shape()));
    }
    if let Some(bad) = z.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!("bce_loss labels must be 0 or 1, found {bad}")));
    }
    let zt = x.tape().constant(z.clone());
    let per = x.relu().sub(x.mul(zt)?)?.add(x.abs().neg().softplus())?;
    Ok(per.mean())
}

/// Sum of the enabled branch losses; a disabled branch contributes nothing.
pub fn overall_loss<'t>(human: Option<Var<'t>>, object: Option<Var<'t>>, interaction: Var<'t>) -> Result<Var<'t>> {
    let mut total = interaction;
    for l in [human, object].into_iter().flatten() {
        total = l.add(total)?;
    }
    Ok(total)
}

/// Final per-verb score `(S_h + S_o) · S_i`, or `S_h · S_i` without an
/// object. Missing human and object scores (disabled branches) count as 0 in
/// the sum; with both missing the interaction score stands alone. Values
/// are left unclipped in `[0, 2]`.
pub fn fuse_scores(human: Option<&[f64]>, object: Option<&[f64]>, interaction: &[f64]) -> Vec<f64> {
    interaction
        .iter()
        .enumerate()
        .map(|(v, &si)| match (human, object) {
            (None, None) => si,
            (h, o) => (h.map_or(0.0, |h| h[v]) + o.map_or(0.0, |o| o[v])) * si,
        })
        .collect()
}
