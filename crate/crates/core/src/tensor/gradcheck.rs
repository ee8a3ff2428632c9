//! Central finite-difference checking of tape gradients.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Per-parameter agreement between autodiff and finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; vectors that are both below
/// `floor` in norm are compared absolutely.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar built by `loss` against central
/// differences with step `h`, for each parameter in `which` (all when empty).
pub fn check_gradients<'a, F>(
    store: &ParamStore,
    which: &[ParamId],
    h: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'a>, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out, store)?;
    drop(tape);

    let ids: Vec<ParamId> = if which.is_empty() {
        store.ids().collect()
    } else {
        which.to_vec()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.scalar(v))
    };
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).values()[k];
            work.get_mut(id).values_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).values_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).values_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let err = relative_error(grads.get(id).values(), &numeric, 1e-7);
        entries.push((store.name(id).to_string(), err));
    }
    Ok(GradCheckReport { entries })
}
