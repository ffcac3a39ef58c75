//! RMSprop and the magnitude MSE objective.

use indexmap::IndexMap;

use crate::arch::Model;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

/// Mean over every element of `(est − target)²`.
pub fn mse_loss<T: Real>(g: &mut Graph<T>, est: Var, target: Var) -> Result<Var> {
    if g.shape(est) != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            left: g.shape(est).to_vec(),
            right: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(est, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState<T> {
    /// Running mean of squared gradients, keyed like the parameters.
    pub acc: IndexMap<String, Tensor<T>>,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<T: Real> RmspropState<T> {
    pub fn new(model: &Model<T>, lr: f64) -> Self {
        Self::for_params(model.params(), lr)
    }

    pub fn for_params(params: &IndexMap<String, Tensor<T>>, lr: f64) -> Self {
        RmspropState {
            acc: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros_like(v)))
                .collect(),
            rho: RMSPROP_RHO,
            eps: RMSPROP_EPS,
            lr,
        }
    }
}

/// `acc ← ρ·acc + (1−ρ)·g²`, `θ ← θ − lr·g/(√acc + ε)`. Parameters without
/// a gradient are treated as having a zero gradient. A non-finite gradient
/// refuses the whole step before anything is modified.
pub fn rmsprop_step<'a, T: Real + 'a>(
    params: impl IntoIterator<Item = (&'a String, &'a mut Tensor<T>)>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut RmspropState<T>,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NanGradient { name: name.clone() });
        }
    }
    let params: Vec<_> = params.into_iter().collect();
    for (name, p) in &params {
        let acc = state.acc.get(*name).ok_or_else(|| Error::MissingParam(format!("rmsprop accumulator for {name}")))?;
        if acc.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "rmsprop_step",
                left: p.shape().to_vec(),
                right: acc.shape().to_vec(),
            });
        }
        if let Some(g) = grads.get(*name) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "rmsprop_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
    }
    let (rho, eps, lr) = (state.rho, state.eps, state.lr);
    for (name, p) in params {
        let acc = state.acc.get_mut(name).expect("checked above");
        match grads.get(name) {
            Some(g) => {
                for ((a, th), gv) in acc.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                    let gv = gv.as_f64();
                    let an = rho * a.as_f64() + (1.0 - rho) * gv * gv;
                    *a = T::from_f64_lossy(an);
                    let step = lr * gv / (an.sqrt() + eps);
                    if step != 0.0 {
                        *th = T::from_f64_lossy(th.as_f64() - step);
                    }
                }
            }
            None => acc
                .data_mut()
                .iter_mut()
                .for_each(|a| *a = T::from_f64_lossy(rho * a.as_f64())),
        }
    }
    Ok(())
}
