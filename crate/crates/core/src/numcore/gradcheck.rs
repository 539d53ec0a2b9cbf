//! Central-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(auto: f64, fd: f64) -> f64 {
    (auto - fd).abs() / fd.abs().max(1.0)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.scalar(out);
    if !y.is_finite() {
        return Err(Error::NonFinite("finite difference evaluation".into()));
    }
    Ok(y)
}

/// Max over coordinates of `|g_auto - g_fd| / max(1, |g_fd|)` where
/// `g_fd = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let root = f(&mut tape, v)?;
    let grads = tape.backward(root)?;
    let auto = grads
        .of(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst: f64 = 0.0;
    let mut probe = x.detached();
    for (i, &a) in auto.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Checks gradients of a loss with respect to stored parameters.
///
/// `loss` builds the loss on the given tape from the store. At most
/// `coords_per_param` coordinates of each parameter are probed, chosen with
/// `seed`; `None` probes all of them.
pub fn param_finite_diff_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
    loss: F,
) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = loss(store, &mut tape)?;
    let grads = tape.backward(root)?;
    let mut probe = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &id in params {
        let n = store.get(id).len();
        let auto = grads.param(id).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            let mut value_at = |x: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = x;
                let mut t = Tape::new();
                let r = loss(&probe, &mut t)?;
                let y = t.scalar(r);
                if !y.is_finite() {
                    return Err(Error::NonFinite("finite difference evaluation".into()));
                }
                Ok(y)
            };
            let up = value_at(orig + h)?;
            let down = value_at(orig - h)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(auto[i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}
