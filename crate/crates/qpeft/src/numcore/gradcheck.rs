use crate::error::{Error, Result};
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::rng::DetRng;
use crate::numcore::scalar::Scalar;
use crate::numcore::tape::GradMap;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across sampled coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub samples: usize,
    /// Worst coordinate: (parameter name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients against central finite differences.
///
/// `f(store, want_grad)` must deterministically return the loss, plus the
/// gradient map when asked. Coordinates are sampled without replacement from
/// the trainable tensors (all of them if there are fewer than `samples`).
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-12); meant
/// for double precision.
pub fn finite_diff_check<S, F>(
    store: &mut ParamStore<S>,
    mut f: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>, bool) -> Result<(S, Option<GradMap<S>>)>,
{
    let (loss0, grads) = f(store, true)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite("gradient check base loss".into()));
    }
    let grads = grads.ok_or_else(|| {
        Error::Contract("loss function returned no gradients when asked".into())
    })?;

    // Enumerate every trainable coordinate, then sample.
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        let t = store.tensor(id);
        if t.trainable() {
            for k in 0..t.value().len() {
                coords.push((id, k));
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::Contract("no trainable coordinates to check".into()));
    }
    let mut rng = DetRng::new(seed);
    rng.shuffle(&mut coords);
    coords.truncate(samples.max(1));

    let eps_s = S::from_c(eps);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        samples: coords.len(),
        worst: None,
    };
    for (id, k) in coords {
        let orig = store.value(id).as_slice()[k];
        store.tensor_mut(id).value_mut().as_mut_slice()[k] = orig + eps_s;
        let loss_p = f(store, false)?.0;
        store.tensor_mut(id).value_mut().as_mut_slice()[k] = orig - eps_s;
        let loss_m = f(store, false)?.0;
        store.tensor_mut(id).value_mut().as_mut_slice()[k] = orig;

        let numeric = (loss_p.into_f64() - loss_m.into_f64()) / (2.0 * eps);
        let analytic = grads
            .get(&id)
            .map(|g| g.as_slice()[k].into_f64())
            .unwrap_or(0.0);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((
                store.tensor(id).name().to_string(),
                k,
                analytic,
                numeric,
            ));
        }
    }
    Ok(report)
}
