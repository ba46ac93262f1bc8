//! Flow-matching objective and the deterministic Euler sampler.
//!
//! The path is the linear (rectified-flow) interpolant
//! `x_t = (1 - t) eps + t x1` with constant target velocity `u = x1 - eps`;
//! training regresses the network output onto `u` at a uniformly drawn `t`,
//! and sampling integrates the learned velocity from noise to data.

use ndarray::Array4;

use crate::dit::{DitModel, Leaves};
use crate::error::{Error, Result};
use crate::grid::CalendarTime;
use crate::rng::SeedStream;
use crate::tape::{Real, Tape};

/// Linear interpolant between a noise draw and a data latent.
#[derive(Debug, Clone)]
pub struct FlowPath<T> {
    pub noise: Array4<T>,
    pub data: Array4<T>,
}

impl<T: Real> FlowPath<T> {
    pub fn new(noise: Array4<T>, data: Array4<T>) -> Result<Self> {
        if noise.dim() != data.dim() {
            return Err(Error::Data("noise/data shape mismatch".into()));
        }
        Ok(FlowPath { noise, data })
    }

    /// `x_t = (1 - t) eps + t x1`.
    pub fn at(&self, t: f64) -> Array4<T> {
        let a = T::cast_f64(1.0 - t);
        let b = T::cast_f64(t);
        let mut out = self.noise.mapv(|v| v * a);
        out.zip_mut_with(&self.data, |o, &d| *o += d * b);
        out
    }

    /// Constant target velocity `u = x1 - eps`, independent of `t`.
    pub fn velocity(&self) -> Array4<T> {
        &self.data - &self.noise
    }
}

/// Euler sampler settings: `n_steps` uniform steps on [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n_steps: 20 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler needs n_steps >= 1".into()));
        }
        Ok(())
    }
}

/// One training draw: the flow time and the per-target-frame noise.
///
/// Draw order is fixed: first `t ~ U(0,1)`, then the noise in
/// `[frame, channel, y, x]` row-major order.
#[derive(Debug, Clone)]
pub struct FlowDraw<T> {
    pub t: f64,
    pub noise: Array4<T>,
}

pub fn draw_flow<T: Real>(
    stream: &mut SeedStream,
    shape: (usize, usize, usize, usize),
) -> FlowDraw<T> {
    let t = stream.uniform();
    let noise = gaussian4(stream, shape);
    FlowDraw { t, noise }
}

pub(crate) fn gaussian4<T: Real>(
    stream: &mut SeedStream,
    shape: (usize, usize, usize, usize),
) -> Array4<T> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<T> = (0..n).map(|_| T::cast_f64(stream.normal())).collect();
    Array4::from_shape_vec(shape, data).expect("noise shape")
}

fn frames_to_rows<T: Real>(frames: &Array4<T>) -> ndarray::Array2<T> {
    let (f, c, h, w) = frames.dim();
    let s = h * w;
    ndarray::Array2::from_shape_fn((f * s, c), |(r, ci)| {
        let fi = r / s;
        let y = (r % s) / w;
        let x = r % w;
        frames[[fi, ci, y, x]]
    })
}

/// Flow-matching loss with gradients.
///
/// Samples `t` and the noise from `stream`, forms the interpolant, runs the
/// velocity network and accumulates `d loss / d theta` into the parameter
/// store (callers zero the gradients between optimizer steps). Returns the
/// scalar loss.
pub fn fm_loss<T: Real>(
    model: &mut DitModel<T>,
    ctx: &Array4<T>,
    target: &Array4<T>,
    stamps: &[CalendarTime],
    stream: &mut SeedStream,
) -> Result<f64> {
    let draw = draw_flow(stream, target.dim());
    fm_loss_with_draw(model, ctx, target, stamps, &draw)
}

/// Deterministic core of [`fm_loss`] given a fixed draw.
pub fn fm_loss_with_draw<T: Real>(
    model: &mut DitModel<T>,
    ctx: &Array4<T>,
    target: &Array4<T>,
    stamps: &[CalendarTime],
    draw: &FlowDraw<T>,
) -> Result<f64> {
    let path = FlowPath::new(draw.noise.clone(), target.clone())?;
    let noisy = path.at(draw.t);
    let u_rows = frames_to_rows(&path.velocity());

    let (loss, named_grads) = {
        let tape = Tape::new();
        let leaves = Leaves::new(&tape, &model.params);
        let pred = model.build_forward(&tape, &leaves, ctx, &noisy, draw.t, stamps)?;
        let u_var = tape.leaf(u_rows.into_dyn());
        let loss_var = tape.mse(pred, u_var);
        let loss = tape.value(loss_var)[[0]].to_f64_lossy();
        if !loss.is_finite() {
            let ctx_norm = ctx.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            let tgt_norm = target
                .iter()
                .map(|v| v.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            return Err(Error::Divergence(format!(
                "flow-matching loss is non-finite at t={}, |ctx|={ctx_norm:.3e}, |target|={tgt_norm:.3e}",
                draw.t
            )));
        }
        let grads = tape.backward(loss_var);
        (loss, leaves.take_grads(&grads))
    };
    for (name, grad) in named_grads {
        model.params.add_to_grad(&name, &grad);
    }
    Ok(loss)
}

/// Loss value (no gradients) for an arbitrary velocity function; shares the
/// interpolant and target-velocity construction with [`fm_loss`]. Used to
/// check the objective against stub velocities.
pub fn fm_loss_with_velocity<T, F>(
    velocity: F,
    target: &Array4<T>,
    stamps: &[CalendarTime],
    draw: &FlowDraw<T>,
) -> Result<f64>
where
    T: Real,
    F: Fn(&Array4<T>, f64, &[CalendarTime]) -> Result<Array4<T>>,
{
    let path = FlowPath::new(draw.noise.clone(), target.clone())?;
    let noisy = path.at(draw.t);
    let u = path.velocity();
    let pred = velocity(&noisy, draw.t, stamps)?;
    if pred.dim() != u.dim() {
        return Err(Error::Data("velocity shape mismatch".into()));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(u.iter()) {
        let d = p.to_f64_lossy() - t.to_f64_lossy();
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// Euler integration of an arbitrary velocity field from `noise` at t=0 to
/// t=1 on a uniform grid. Aborts if the state stops being finite.
pub fn sample_with<T, F>(
    velocity: F,
    noise: Array4<T>,
    sampler: &SamplerConfig,
) -> Result<Array4<T>>
where
    T: Real,
    F: Fn(&Array4<T>, f64) -> Result<Array4<T>>,
{
    sampler.validate()?;
    let n = sampler.n_steps;
    let dt = T::cast_f64(1.0 / n as f64);
    let mut x = noise;
    for k in 0..n {
        let t = k as f64 / n as f64;
        let v = velocity(&x, t)?;
        x.zip_mut_with(&v, |xv, &vv| *xv += dt * vv);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "sampler state became non-finite after step {k} (t={t})"
            )));
        }
    }
    Ok(x)
}

/// Sample target latents for the model: integrate the learned velocity from
/// seeded noise. Deterministic given the seed.
pub fn sample<T: Real>(
    model: &DitModel<T>,
    ctx: &Array4<T>,
    stamps: &[CalendarTime],
    n_target_frames: usize,
    seed: u64,
    sampler: &SamplerConfig,
) -> Result<Array4<T>> {
    let shape = (
        n_target_frames,
        model.config.latent_channels,
        model.config.latent_h,
        model.config.latent_w,
    );
    let mut stream = SeedStream::new(seed);
    let noise = gaussian4::<T>(&mut stream, shape);
    sample_with(|x, t| model.forward(ctx, x, t, stamps), noise, sampler)
}
