//! Rectified-flow primitives: straight-line interpolation between noise and
//! data, its constant velocity, the flow-matching loss, the Euler sampler and
//! the single-step approximation used by Direct Forcing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that predicts a velocity `v(x_t, t | cond)`.
pub trait VelocityField {
    type Cond;

    fn velocity(&self, x_t: &Tensor, t: f64, cond: &Self::Cond) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub x_t: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityTarget {
    pub u: Tensor,
}

fn check_t(t: f64, what: &'static str) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Range {
            what,
            value: t,
            range: "[0, 1]",
        })
    }
}

/// `x_t = t·x + (1−t)·eps`.
pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<FlowSample> {
    check_t(t, "t")?;
    let x_t = x.zip_map(eps, |a, e| t * a + (1.0 - t) * e)?;
    Ok(FlowSample {
        x: x.clone(),
        eps: eps.clone(),
        t,
        x_t,
    })
}

/// `u = x − eps`, the time derivative of the interpolation.
pub fn velocity_target(x: &Tensor, eps: &Tensor) -> Result<VelocityTarget> {
    Ok(VelocityTarget {
        u: x.zip_map(eps, |a, e| a - e)?,
    })
}

/// Mean squared error between a predicted velocity on the tape and its target.
pub fn fm_loss_var(tape: &mut Tape, v_pred: Var, u: &VelocityTarget) -> Result<Var> {
    if tape.dims(v_pred) != u.u.dims() {
        return Err(Error::shape("fm_loss", tape.dims(v_pred), u.u.dims()));
    }
    let target = tape.constant(u.u.clone());
    let diff = tape.sub(v_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn fm_loss(v_pred: &Tensor, u: &VelocityTarget) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(v_pred.clone());
    let l = fm_loss_var(&mut tape, v, u)?;
    Ok(tape.value(l).item())
}

pub fn standard_normal(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| StandardNormal.sample(rng))
}

/// Left-endpoint Euler integration from noise drawn with `seed` to `t = 1`.
pub fn euler_sample<F: VelocityField>(
    field: &F,
    cond: &F::Cond,
    dims: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = standard_normal(dims, &mut rng);
    euler_sample_from(field, cond, x0, steps)
}

/// Euler integration from a given starting noise: `x_{i+1} = x_i + v(x_i, i/S)/S`.
pub fn euler_sample_from<F: VelocityField>(field: &F, cond: &F::Cond, x0: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Contract("euler_sample needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let v = field.velocity(&x, t, cond)?;
        x = x.zip_map(&v, |a, b| a + dt * b)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneStep {
    /// Detached estimate of the clean segment.
    pub x1: Tensor,
    /// Set when `t == 1`, where the step length vanishes and `x_t` is returned.
    pub degenerate: bool,
}

/// `x̃₁ = x_t + (1−t)·v(x_t, t)`. The result is a plain value, never on a tape.
pub fn one_step_approx<F: VelocityField>(field: &F, x_t: &Tensor, t: f64, cond: &F::Cond) -> Result<OneStep> {
    check_t(t, "t")?;
    if t == 1.0 {
        return Ok(OneStep {
            x1: x_t.clone(),
            degenerate: true,
        });
    }
    let v = field.velocity(x_t, t, cond)?;
    let dt = 1.0 - t;
    Ok(OneStep {
        x1: x_t.zip_map(&v, |a, b| a + dt * b)?,
        degenerate: false,
    })
}
