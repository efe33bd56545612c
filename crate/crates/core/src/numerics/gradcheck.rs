use crate::Result;

use super::{ParamStore, Tape, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Checks `d loss / d params` from the tape against
/// `(f(x+eps) − f(x−eps)) / 2eps` for every coordinate of every trainable
/// parameter.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Parameter values are restored after each probe.
pub fn finite_difference_check<F>(
    store: &mut ParamStore<f64>,
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    tape.backward(l)?;
    tape.accumulate_param_grads(store);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, store)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.get(id).grad[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((store.get(id).name.clone(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}
