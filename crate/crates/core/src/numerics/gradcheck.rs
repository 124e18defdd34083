//! Central finite-difference gradient checking.

use super::{NumericsError, ParamGrads, ParamStore, Tape, Var};

/// Central-difference gradient of `loss` for every scalar of every parameter.
pub fn numeric_gradient<E>(
    store: &mut ParamStore,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64, E>,
) -> Result<ParamGrads, E> {
    let mut out = ParamGrads::new(store);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut grad = store.get(id).map(|_| 0.0);
        for k in 0..grad.numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = loss(store);
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            grad.data_mut()[k] = (plus? - minus?) / (2.0 * eps);
        }
        out.accumulate_owned(id, grad);
    }
    Ok(out)
}

/// Compares precomputed analytic gradients against central differences of
/// `loss`, returning `max |a - n| / max(1, |a|, |n|)` over all scalars.
///
/// The loss is evaluated twice at the base point first; differing values
/// are reported as [`NumericsError::NonDeterministicLoss`].
pub fn gradcheck_fn<E: From<NumericsError>>(
    store: &mut ParamStore,
    eps: f64,
    analytic: &ParamGrads,
    mut loss: impl FnMut(&ParamStore) -> Result<f64, E>,
) -> Result<f64, E> {
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("gradcheck eps {eps} must be positive")).into());
    }
    let first = loss(store)?;
    let second = loss(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministicLoss { first, second }.into());
    }
    let numeric = numeric_gradient(store, eps, &mut loss)?;
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = numeric.get(id).expect("numeric gradient for every parameter");
        for (k, &nv) in n.data().iter().enumerate() {
            let av = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (av - nv).abs() / 1f64.max(av.abs()).max(nv.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Gradient check for a loss recorded on a fresh [`Tape`] by `build_loss`.
pub fn gradcheck<F>(store: &mut ParamStore, eps: f64, build_loss: F) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&mut Tape<'t>, &'t ParamStore) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, store)?;
        let grads = tape.backward(loss)?;
        let mut out = ParamGrads::new(store);
        grads.accumulate_into(&mut out);
        out
    };
    gradcheck_fn(store, eps, &analytic, |s| {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, s)?;
        Ok(tape.value(loss).item())
    })
}
