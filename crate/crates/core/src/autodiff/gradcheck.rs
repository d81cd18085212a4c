//! Finite-difference verification of the tape primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::array::Array;
use crate::error::Result;

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Every primitive the engine records, in a form the checker can drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Linear,
    AddBias,
    Conv2d,
    Conv2dStrided,
    Conv2dPointwise,
    Conv2dDense,
    BatchNorm,
    BatchNormFixed,
    Relu,
    Add,
    ChannelAdd,
    Scale,
    Sum,
    Mean,
    GlobalAvgPool,
    LogSoftmax,
    CrossEntropy,
    KlDivergence,
    Mse,
    ParamSlice,
}

const LABELS: [usize; 3] = [2, 0, 1];

enum Handle {
    Input(Var),
    Param(String),
}

impl Primitive {
    pub const ALL: [Primitive; 21] = [
        Primitive::MatMul,
        Primitive::Linear,
        Primitive::AddBias,
        Primitive::Conv2d,
        Primitive::Conv2dStrided,
        Primitive::Conv2dPointwise,
        Primitive::Conv2dDense,
        Primitive::BatchNorm,
        Primitive::BatchNormFixed,
        Primitive::Relu,
        Primitive::Add,
        Primitive::ChannelAdd,
        Primitive::Scale,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::GlobalAvgPool,
        Primitive::LogSoftmax,
        Primitive::CrossEntropy,
        Primitive::KlDivergence,
        Primitive::Mse,
        Primitive::ParamSlice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Linear => "linear",
            Primitive::AddBias => "add_bias",
            Primitive::Conv2d => "conv2d",
            Primitive::Conv2dStrided => "conv2d_strided",
            Primitive::Conv2dPointwise => "conv2d_pointwise",
            Primitive::Conv2dDense => "conv2d_dense",
            Primitive::BatchNorm => "batch_norm",
            Primitive::BatchNormFixed => "batch_norm_fixed",
            Primitive::Relu => "relu",
            Primitive::Add => "add",
            Primitive::ChannelAdd => "channel_add",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::KlDivergence => "kl_divergence",
            Primitive::Mse => "mse",
            Primitive::ParamSlice => "param_slice",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    /// Input shapes of the canonical check instance.
    fn shapes(self) -> Vec<Vec<usize>> {
        match self {
            Primitive::MatMul => vec![vec![3, 4], vec![4, 2]],
            Primitive::Linear => vec![vec![3, 4], vec![5, 4]],
            Primitive::AddBias => vec![vec![2, 3, 2, 2], vec![3]],
            Primitive::Conv2d => vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3]],
            Primitive::Conv2dStrided => vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]],
            Primitive::Conv2dPointwise => vec![vec![2, 3, 2, 2], vec![2, 3, 1, 1]],
            Primitive::Conv2dDense => vec![vec![3, 4, 1, 1], vec![2, 4, 1, 1]],
            Primitive::BatchNorm | Primitive::BatchNormFixed => vec![vec![4, 3, 2, 2], vec![3], vec![3]],
            Primitive::Relu | Primitive::Scale | Primitive::Sum | Primitive::Mean => vec![vec![3, 4]],
            Primitive::Add => vec![vec![3, 4], vec![3, 4]],
            Primitive::ChannelAdd => vec![vec![2, 3, 2, 2], vec![2, 5, 2, 2]],
            Primitive::GlobalAvgPool => vec![vec![2, 3, 2, 3]],
            Primitive::LogSoftmax => vec![vec![3, 4]],
            Primitive::CrossEntropy => vec![vec![3, 4]],
            Primitive::KlDivergence => vec![vec![3, 4], vec![3, 4]],
            Primitive::Mse => vec![vec![3, 2]],
            Primitive::ParamSlice => vec![vec![4, 3, 3, 3]],
        }
    }

    /// Draws a random point away from non-differentiable loci.
    pub fn sample_point(self, rng: &mut impl Rng) -> Vec<Array> {
        self.shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let mut v: f64 = rng.random_range(-1.0..1.0);
                        if self == Primitive::Relu && v.abs() < 0.05 {
                            v += 0.1_f64.copysign(v);
                        }
                        // keep normalization gains away from zero
                        if matches!(self, Primitive::BatchNorm | Primitive::BatchNormFixed) && i == 1 {
                            v = 0.5 + v.abs();
                        }
                        v
                    })
                    .collect();
                Array::new(shape, data).expect("valid shape")
            })
            .collect()
    }

    fn apply(self, tape: &mut Tape, point: &[Array]) -> Result<(Var, Vec<Handle>)> {
        let mut handles = Vec::new();
        let mut vars = Vec::new();
        if self == Primitive::ParamSlice {
            let v = tape.param_slice("w", &point[0], &[1..3, 0..2, 1..2, 0..3])?;
            return Ok((v, vec![Handle::Param("w".into())]));
        }
        for a in point {
            let v = tape.input(a.clone(), true)?;
            handles.push(Handle::Input(v));
            vars.push(v);
        }
        let out = match self {
            Primitive::MatMul => tape.matmul(vars[0], vars[1])?,
            Primitive::Linear => tape.linear(vars[0], vars[1])?,
            Primitive::AddBias => tape.add_bias(vars[0], vars[1])?,
            Primitive::Conv2d => tape.conv2d(vars[0], vars[1], 1, 1)?,
            Primitive::Conv2dStrided => tape.conv2d(vars[0], vars[1], 2, 1)?,
            Primitive::Conv2dPointwise | Primitive::Conv2dDense => tape.conv2d(vars[0], vars[1], 1, 0)?,
            Primitive::BatchNorm => tape.batch_norm(vars[0], vars[1], vars[2], 1e-5)?.0,
            Primitive::BatchNormFixed => {
                tape.batch_norm_fixed(vars[0], vars[1], vars[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.8], 1e-5)?
            }
            Primitive::Relu => tape.relu(vars[0])?,
            Primitive::Add => tape.add(vars[0], vars[1])?,
            Primitive::ChannelAdd => tape.channel_add(vars[0], vars[1])?,
            Primitive::Scale => tape.scale(vars[0], -1.7)?,
            Primitive::Sum => tape.sum(vars[0])?,
            Primitive::Mean => tape.mean(vars[0])?,
            Primitive::GlobalAvgPool => tape.global_avg_pool(vars[0])?,
            Primitive::LogSoftmax => tape.log_softmax(vars[0])?,
            Primitive::CrossEntropy => tape.cross_entropy(vars[0], &LABELS)?,
            Primitive::KlDivergence => tape.kl_div(vars[0], vars[1])?,
            Primitive::Mse => {
                let target = Array::new(vec![3, 2], vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.9])?;
                tape.mse(vars[0], &target)?
            }
            Primitive::ParamSlice => unreachable!(),
        };
        Ok((out, handles))
    }
}

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub primitive: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `Σ r ⊙ primitive(point)` (fixed random
/// `r`) against central differences with step [`FD_STEP`].
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check(primitive: Primitive, point: &[Array], tolerance: f64) -> GradCheckReport {
    let report = |err: f64| GradCheckReport {
        primitive: primitive.name(),
        max_rel_error: err,
        tolerance,
        passed: err < tolerance,
    };
    match check_inner(primitive, point) {
        Ok(err) => report(err),
        Err(_) => report(f64::INFINITY),
    }
}

fn projected(primitive: Primitive, point: &[Array], proj: &Option<Array>) -> Result<(f64, Array, Tape, Var)> {
    let mut tape = Tape::new();
    let (out, _) = primitive.apply(&mut tape, point)?;
    let y = tape.value(out).clone();
    let value = match proj {
        Some(r) => y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    Ok((value, y, tape, out))
}

fn check_inner(primitive: Primitive, point: &[Array]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (_, y, _, _) = projected(primitive, point, &None)?;
    let r = Array::new(y.shape().to_vec(), (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let proj = Some(r.clone());

    let mut tape = Tape::new();
    let (out, handles) = primitive.apply(&mut tape, point)?;
    let grads = tape.backward(out, &r)?;

    let mut worst: f64 = 0.0;
    for (idx, handle) in handles.iter().enumerate() {
        let analytic = match handle {
            Handle::Input(v) => grads.input(*v).cloned(),
            Handle::Param(name) => grads.param(name).cloned(),
        }
        .unwrap_or_else(|| Array::zeros(point[idx].shape()));
        for j in 0..point[idx].len() {
            let mut plus = point.to_vec();
            plus[idx].data_mut()[j] += FD_STEP;
            let mut minus = point.to_vec();
            minus[idx].data_mut()[j] -= FD_STEP;
            let fp = projected(primitive, &plus, &proj)?.0;
            let fm = projected(primitive, &minus, &proj)?.0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
