//! Central finite-difference oracle for the reverse-mode engine.
//!
//! Always run in `f64`: with `eps = 1e-5` the truncation error is ~1e-10 and
//! the cancellation error ~1e-11 for O(1) losses, far inside the 1e-4
//! tolerance the analytic gradients are held to.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

/// `|a - n| / max(floor, |a| + |n|)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Largest relative error between the analytic gradient of the scalar
/// function `f` at `x` and its central difference, over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input_with_grad(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.input(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.input(probe);
        let l = f(&mut tape, v)?;
        Ok(tape.scalar(l))
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

/// Finite-difference check of every parameter in `stores` against the
/// analytic gradient of `f`. Parameters with more than `max_coords`
/// scalars are checked on a seeded random subset of coordinates.
pub fn grad_check_params<F>(
    f: F,
    stores: &mut [&mut ParamStore<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<f64>, &[&ParamStore<f64>]) -> Result<Var>,
{
    let eval = |stores: &[&mut ParamStore<f64>], track: bool| -> Result<(Tape<f64>, Var)> {
        let views: Vec<&ParamStore<f64>> = stores.iter().map(|s| &**s).collect();
        let mut tape = if track { Tape::new() } else { Tape::inference() };
        let loss = f(&mut tape, &views)?;
        Ok((tape, loss))
    };

    for s in stores.iter_mut() {
        s.zero_grad();
    }
    let (mut tape, loss) = eval(stores, true)?;
    let grads = tape.backward(loss)?;
    for s in stores.iter_mut() {
        s.accumulate(&grads);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for si in 0..stores.len() {
        for pi in 0..stores[si].len() {
            let id = crate::autograd::ParamId(pi);
            let (name, len, analytic) = {
                let p = stores[si].get(id);
                let g = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (p.name.clone(), p.value.len(), g)
            };
            let coords: Vec<usize> = if len <= max_coords {
                (0..len).collect()
            } else {
                let mut c = sample(&mut rng, len, max_coords).into_vec();
                c.sort_unstable();
                c
            };
            let mut worst = 0.0f64;
            for &c in &coords {
                let orig = stores[si].get(id).value.data()[c];
                stores[si].get_mut(id).value.data_mut()[c] = orig + eps;
                let (t, l) = eval(stores, false)?;
                let up = t.scalar(l);
                stores[si].get_mut(id).value.data_mut()[c] = orig - eps;
                let (t, l) = eval(stores, false)?;
                let down = t.scalar(l);
                stores[si].get_mut(id).value.data_mut()[c] = orig;
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(relative_error(analytic.data()[c], numeric));
            }
            out.push(ParamCheck {
                name,
                coords_checked: coords.len(),
                max_rel_error: worst,
            });
        }
    }
    for s in stores.iter_mut() {
        s.zero_grad();
    }
    Ok(out)
}
