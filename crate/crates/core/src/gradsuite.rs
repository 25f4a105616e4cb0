//! The finite-difference suite behind `sit gradcheck`: every differentiable
//! tape op on random instances, then a tiny 64-bit model through each
//! pretraining objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::data::synthetic_dataset;
use crate::error::Result;
use crate::gradcheck::{grad_check, relative_error_floored, DEFAULT_EPS, TOLERANCE};
use crate::losses::{
    cross_entropy, fixed_weighted_total, l1_reconstruction, nt_xent, rotation_ce, soft_cross_entropy, uncertainty_total,
    ContrastiveConfig, TaskLosses, UncertaintyWeights,
};
use crate::model::{ModelConfig, SiTModel};
use crate::pretext::{make_pretext_batch, AugmentParams, CorruptionParams, PretextBatch, PretextParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    /// Random instances for op checks, checked coordinates for model checks.
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub instances: usize,
    /// Per-parameter cap on perturbed coordinates in the model checks.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 10,
            max_coords: 64,
            seed: 0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate carries a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.input(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

/// Wrap a unary op `f` applied to an input of `shape` drawn from `[lo, hi)`.
fn unary<F>(shape: &'static [usize], lo: f64, hi: f64, f: F) -> OpCase
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + Clone + 'static,
{
    Box::new(move |rng| {
        let x = uniform(rng, shape, lo, hi);
        let mut probe = Tape::inference();
        let xv = probe.input(x.clone());
        let out_shape = {
            let y = f(&mut probe, xv)?;
            probe.shape(y).to_vec()
        };
        let r = uniform(rng, &out_shape, -1.0, 1.0);
        let f = f.clone();
        grad_check(move |t, v| {
            let y = f(t, v)?;
            project(t, y, &r)
        }, &x, DEFAULT_EPS)
    })
}

/// Gradient with respect to the first operand of a binary op whose second
/// operand is a fixed random tensor of `other` shape.
fn binary<F>(shape: &'static [usize], other: &'static [usize], swap: bool, f: F) -> OpCase
where
    F: Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + Clone + 'static,
{
    Box::new(move |rng| {
        let x = uniform(rng, shape, -1.0, 1.0);
        let c = uniform(rng, other, -1.0, 1.0);
        let f = f.clone();
        let apply = move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
            let cv = t.input(c.clone());
            if swap {
                f(t, cv, v)
            } else {
                f(t, v, cv)
            }
        };
        let mut probe = Tape::inference();
        let xv = probe.input(x.clone());
        let y = apply(&mut probe, xv)?;
        let r = uniform(rng, probe.shape(y), -1.0, 1.0);
        grad_check(move |t, v| {
            let y = apply(t, v)?;
            project(t, y, &r)
        }, &x, DEFAULT_EPS)
    })
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    let mut cases: Vec<(&'static str, OpCase)> = vec![
        ("add", binary(&[3, 4], &[3, 4], false, |t, a, b| t.add(a, b))),
        ("add (bias broadcast)", binary(&[4], &[3, 4], true, |t, a, b| t.add(a, b))),
        ("sub (lhs)", binary(&[3, 4], &[3, 4], false, |t, a, b| t.sub(a, b))),
        ("sub (rhs)", binary(&[3, 4], &[3, 4], true, |t, a, b| t.sub(a, b))),
        ("mul", binary(&[3, 4], &[3, 4], false, |t, a, b| t.mul(a, b))),
        ("mul_scalar (tensor)", binary(&[3, 4], &[1], false, |t, a, s| t.mul_scalar(a, s))),
        ("mul_scalar (scale)", binary(&[1], &[3, 4], true, |t, a, s| t.mul_scalar(a, s))),
        ("scale", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.scale(x, -1.7)))),
        ("offset", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.offset(x, 0.3)))),
        ("neg", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.neg(x)))),
        ("exp", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.exp(x)))),
        ("log", unary(&[3, 4], 0.3, 2.0, |t, x| Ok(t.log(x)))),
        ("abs", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.abs(x)))),
        ("gelu", unary(&[3, 4], -3.0, 3.0, |t, x| Ok(t.gelu(x)))),
        ("matmul (lhs)", binary(&[3, 4], &[4, 5], false, |t, a, b| t.matmul(a, b))),
        ("matmul (rhs)", binary(&[4, 5], &[3, 4], true, |t, a, b| t.matmul(a, b))),
        ("matmul batched a^T b", binary(&[2, 4, 3], &[2, 4, 5], false, |t, a, b| t.matmul_t(a, b, true, false))),
        ("matmul batched a b^T", binary(&[2, 5, 4], &[2, 3, 4], true, |t, a, b| t.matmul_t(a, b, false, true))),
        ("matmul batched a^T b^T", binary(&[2, 4, 3], &[2, 5, 4], false, |t, a, b| t.matmul_t(a, b, true, true))),
        ("linear (input)", binary(&[2, 3, 4], &[4, 5], false, |t, x, w| t.linear(x, w, None))),
        ("linear (weight)", binary(&[4, 5], &[2, 3, 4], true, |t, x, w| t.linear(x, w, None))),
        (
            "linear (bias)",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = uniform(rng, &[3, 4], -1.0, 1.0);
                let w = uniform(rng, &[4, 2], -1.0, 1.0);
                let b = uniform(rng, &[2], -1.0, 1.0);
                let r = uniform(rng, &[3, 2], -1.0, 1.0);
                grad_check(
                    move |t, bv| {
                        let (xv, wv) = (t.input(x.clone()), t.input(w.clone()));
                        let y = t.linear(xv, wv, Some(bv))?;
                        project(t, y, &r)
                    },
                    &b,
                    DEFAULT_EPS,
                )
            }),
        ),
        ("softmax (last axis)", unary(&[3, 5], -2.0, 2.0, |t, x| t.softmax(x, 1))),
        ("softmax (inner axis)", unary(&[2, 3, 4], -2.0, 2.0, |t, x| t.softmax(x, 1))),
        ("log_softmax", unary(&[3, 5], -2.0, 2.0, |t, x| t.log_softmax(x, 1))),
        ("reshape", unary(&[2, 6], -1.0, 1.0, |t, x| t.reshape(x, &[3, 4]))),
        ("permute", unary(&[2, 3, 4], -1.0, 1.0, |t, x| t.permute(x, &[2, 0, 1]))),
        ("narrow", unary(&[3, 5], -1.0, 1.0, |t, x| t.narrow(x, 1, 1, 3))),
        ("concat", binary(&[2, 3], &[2, 2], false, |t, a, b| t.concat(&[b, a, b], 1))),
        ("expand", unary(&[3, 2], -1.0, 1.0, |t, x| t.expand(x, 4))),
        ("sum", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.sum(x)))),
        ("mean", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.mean(x)))),
        ("sum_last", unary(&[2, 3, 4], -1.0, 1.0, |t, x| t.sum_last(x))),
        ("pick", unary(&[3, 4], -1.0, 1.0, |t, x| t.pick(x, &[2, 0, 3]))),
        ("l2_normalize", unary(&[3, 4], -1.0, 1.0, |t, x| Ok(t.l2_normalize(x, 1e-12)))),
    ];
    cases.push((
        "layer_norm (input)",
        Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[3, 6], -2.0, 2.0);
            let g = uniform(rng, &[6], 0.5, 1.5);
            let b = uniform(rng, &[6], -0.5, 0.5);
            let r = uniform(rng, &[3, 6], -1.0, 1.0);
            grad_check(
                move |t, xv| {
                    let (gv, bv) = (t.input(g.clone()), t.input(b.clone()));
                    let y = t.layer_norm(xv, gv, bv, 1e-6)?;
                    project(t, y, &r)
                },
                &x,
                DEFAULT_EPS,
            )
        }),
    ));
    cases.push((
        "layer_norm (gain and shift)",
        Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[3, 6], -2.0, 2.0);
            let gb = uniform(rng, &[2, 6], -1.0, 1.0);
            let r = uniform(rng, &[3, 6], -1.0, 1.0);
            grad_check(
                move |t, v| {
                    let xv = t.input(x.clone());
                    let g = t.narrow(v, 0, 0, 1)?;
                    let g = t.reshape(g, &[6])?;
                    let b = t.narrow(v, 0, 1, 1)?;
                    let b = t.reshape(b, &[6])?;
                    let y = t.layer_norm(xv, g, b, 1e-6)?;
                    project(t, y, &r)
                },
                &gb,
                DEFAULT_EPS,
            )
        }),
    ));
    cases.push((
        "cross_entropy",
        Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[4, 5], -2.0, 2.0);
            let y: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            grad_check(move |t, v| cross_entropy(t, v, &y), &x, DEFAULT_EPS)
        }),
    ));
    cases.push((
        "soft_cross_entropy",
        Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[4, 5], -2.0, 2.0);
            let q = uniform(rng, &[4, 5], 0.0, 1.0);
            let sums: Vec<f64> = q.data().chunks(5).map(|c| c.iter().sum()).collect();
            let q = Tensor::from_vec(&[4, 5], q.data().iter().enumerate().map(|(i, v)| v / sums[i / 5]).collect())?;
            grad_check(move |t, v| soft_cross_entropy(t, v, q.clone()), &x, DEFAULT_EPS)
        }),
    ));
    cases.push((
        "l1_reconstruction",
        Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[2, 3, 4], 0.0, 1.0);
            let target = uniform(rng, &[2, 3, 4], 0.0, 1.0);
            grad_check(
                move |t, v| {
                    let tv = t.input(target.clone());
                    l1_reconstruction(t, tv, v)
                },
                &x,
                DEFAULT_EPS,
            )
        }),
    ));
    cases.push((
        "nt_xent",
        Box::new(|rng: &mut ChaCha8Rng| {
            let z = uniform(rng, &[6, 4], -1.0, 1.0);
            let pair = vec![1, 0, 3, 2, 5, 4];
            let tau = rng.gen_range(0.2..1.0);
            grad_check(
                move |t, v| nt_xent(t, v, &pair, ContrastiveConfig { temperature: tau }),
                &z,
                DEFAULT_EPS,
            )
        }),
    ));
    cases
}

/// Every op case on `opts.instances` seeded random instances.
pub fn op_checks(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    op_cases()
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for _ in 0..opts.instances {
                worst = worst.max(case(&mut rng)?);
            }
            Ok(CheckResult {
                name: format!("op {name}"),
                instances: opts.instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// The 64-bit model used by the full-forward checks.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        contrastive_dim: 4,
        ..ModelConfig::tiny_cifar()
    }
}

/// A pretext batch of four views (two sources) in 64-bit precision.
fn suite_batch(seed: u64) -> Result<(PretextBatch, Tensor<f64>, Tensor<f64>)> {
    let data = synthetic_dataset(2, 2, 8, seed)?;
    let params = PretextParams {
        augment: AugmentParams::default(),
        corruption: CorruptionParams::default(),
        image_size: 8,
        patch_size: 4,
        rotate: true,
    };
    let batch = make_pretext_batch(&data.images, &params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let views = batch.corrupted_views.cast::<f64>();
    let targets = batch.clean_targets.cast::<f64>();
    Ok((batch, views, targets))
}

/// Central differences over every parameter of `model` and `weights`
/// (at most `max_coords` coordinates each) against one backward pass.
fn check_objective<F>(
    model: &mut SiTModel<f64>,
    weights: &mut UncertaintyWeights<f64>,
    f: F,
    max_coords: usize,
    seed: u64,
) -> Result<(usize, f64)>
where
    F: Fn(&mut Tape<f64>, &SiTModel<f64>, &UncertaintyWeights<f64>) -> Result<Var>,
{
    model.params_mut().zero_grad();
    weights.params_mut().zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, model, weights)?;
    // Round-off in the central difference is about |L| * 1e-16 / eps, so
    // coordinates whose true gradient is zero (the key bias, which softmax
    // cancels) read as ~1e-9 noise; the denominator floor scales with |L|.
    let floor = 1e-6 * tape.scalar(loss).abs().max(1.0);
    let grads = tape.backward(loss)?;
    model.params_mut().accumulate(&grads);
    weights.params_mut().accumulate(&grads);

    let eval = |model: &SiTModel<f64>, weights: &UncertaintyWeights<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let l = f(&mut tape, model, weights)?;
        Ok(tape.scalar(l))
    };
    fn store_of<'a>(m: &'a mut SiTModel<f64>, w: &'a mut UncertaintyWeights<f64>, which: usize) -> &'a mut ParamStore<f64> {
        if which == 0 {
            m.params_mut()
        } else {
            w.params_mut()
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut coords_checked, mut worst) = (0usize, 0.0f64);
    for which in 0..2 {
        let count = store_of(model, weights, which).len();
        for pi in 0..count {
            let id = ParamId(pi);
            let (len, analytic) = {
                let p = store_of(model, weights, which).get(id);
                (p.value.len(), p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            };
            let coords: Vec<usize> = if len <= max_coords {
                (0..len).collect()
            } else {
                let mut c = rand::seq::index::sample(&mut rng, len, max_coords).into_vec();
                c.sort_unstable();
                c
            };
            for c in coords {
                let orig = store_of(model, weights, which).get(id).value.data()[c];
                store_of(model, weights, which).get_mut(id).value.data_mut()[c] = orig + DEFAULT_EPS;
                let up = eval(model, weights)?;
                store_of(model, weights, which).get_mut(id).value.data_mut()[c] = orig - DEFAULT_EPS;
                let down = eval(model, weights)?;
                store_of(model, weights, which).get_mut(id).value.data_mut()[c] = orig;
                let numeric = (up - down) / (2.0 * DEFAULT_EPS);
                worst = worst.max(relative_error_floored(analytic.data()[c], numeric, floor));
                coords_checked += 1;
            }
        }
    }
    model.params_mut().zero_grad();
    weights.params_mut().zero_grad();
    Ok((coords_checked, worst))
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &SiTModel<f64>, &UncertaintyWeights<f64>) -> Result<Var>>;

/// Each pretraining objective through the full model forward pass.
pub fn model_checks(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let (batch, views, targets) = suite_batch(opts.seed)?;
    let rot = batch.rotation_labels.clone();
    let pair = batch.pair_index.clone();
    let con = ContrastiveConfig::default();

    let all_losses = {
        let (views, targets, rot, pair) = (views.clone(), targets.clone(), rot.clone(), pair.clone());
        move |t: &mut Tape<f64>, m: &SiTModel<f64>| -> Result<TaskLosses> {
            let out = m.forward(t, &views)?;
            let tv = t.input(targets.clone());
            Ok(TaskLosses {
                recons: Some(l1_reconstruction(t, tv, out.recon)?),
                rotation: Some(rotation_ce(t, out.rot_logits, &rot)?),
                contrastive: Some(nt_xent(t, out.contr_embed, &pair, con)?),
            })
        }
    };

    let objectives: Vec<(&str, Objective)> = vec![
        ("forward sum(recon)+sum(rot)+sum(contr)", {
            let views = views.clone();
            Box::new(move |t, m, _| {
                let out = m.forward(t, &views)?;
                let a = t.sum(out.recon);
                let b = t.sum(out.rot_logits);
                let c = t.sum(out.contr_embed);
                let ab = t.add(a, b)?;
                t.add(ab, c)
            })
        }),
        ("reconstruction objective", {
            let (views, targets) = (views.clone(), targets.clone());
            Box::new(move |t, m, _| {
                let out = m.forward(t, &views)?;
                let tv = t.input(targets.clone());
                l1_reconstruction(t, tv, out.recon)
            })
        }),
        ("rotation objective", {
            let views = views.clone();
            Box::new(move |t, m, _| {
                let out = m.forward(t, &views)?;
                rotation_ce(t, out.rot_logits, &rot)
            })
        }),
        ("contrastive objective", {
            let views = views.clone();
            Box::new(move |t, m, _| {
                let out = m.forward(t, &views)?;
                nt_xent(t, out.contr_embed, &pair, con)
            })
        }),
        ("fixed-weight total", {
            let all = all_losses.clone();
            Box::new(move |t, m, _| {
                let l = all(t, m)?;
                Ok(fixed_weighted_total(t, &l, [1.0, 0.5, 0.25])?.0)
            })
        }),
        ("uncertainty-weighted total", {
            let all = all_losses;
            Box::new(move |t, m, w| {
                let l = all(t, m)?;
                Ok(uncertainty_total(t, &l, w)?.0)
            })
        }),
    ];

    let mut model = SiTModel::<f64>::new(suite_model_config())?;
    let mut weights = UncertaintyWeights::<f64>::from_values([0.3, -0.2, 0.1]);
    objectives
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let (coords, worst) = check_objective(&mut model, &mut weights, f, opts.max_coords, opts.seed + i as u64)?;
            Ok(CheckResult {
                name: format!("model {name}"),
                instances: coords,
                max_rel_error: worst,
            })
        })
        .collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(opts)?;
    out.extend(model_checks(opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_a_few_instances() {
        let opts = SuiteOptions {
            instances: 2,
            ..SuiteOptions::default()
        };
        for r in op_checks(&opts).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn objectives_pass_on_sampled_coordinates() {
        let opts = SuiteOptions {
            max_coords: 2,
            ..SuiteOptions::default()
        };
        let results = model_checks(&opts).unwrap();
        assert_eq!(results.len(), 6);
        for r in results {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        }
    }
}
