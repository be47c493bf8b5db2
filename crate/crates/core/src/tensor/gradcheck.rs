use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::{Tape, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over scalars of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`
    pub max_rel_error: f64,
    /// Worst error per named parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub scalars_checked: usize,
}

impl GradCheckReport {
    pub fn error_for(&self, name: &str) -> Option<f64> {
        self.per_param.iter().find(|(n, _)| n == name).map(|&(_, e)| e)
    }
}

/// Checks every parameter of `store` against central finite differences.
///
/// `f` must build the scalar loss on the supplied tape, reading parameters via
/// [`Tape::param`]. Parameter gradients already in `store` are left untouched.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(s, &mut tape)?;
        Ok(tape.value(loss)[0])
    };

    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let base = tape.value(loss)[0];
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::contract("loss function is not deterministic"));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut by_param = vec![None; store.len()];
        for (id, var) in tape.bound_params() {
            by_param[id.index()] = grads.get(var).map(<[f64]>::to_vec);
        }
        by_param
    };

    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut max_rel_error: f64 = 0.0;
    let mut scalars_checked = 0;
    for id in store.ids() {
        let n = store.get(id).numel();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let fd = (up - down) / (2.0 * h);
            let ad = analytic[id.index()].as_ref().map_or(0.0, |g| g[k]);
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(err);
            scalars_checked += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        scalars_checked,
    })
}
