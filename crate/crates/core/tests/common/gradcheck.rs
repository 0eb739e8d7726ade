//! Central finite-difference oracle for every differentiable tensor op.
//!
//! Each case builds `loss = sum(op(inputs) * R)` for a fixed random `R` and
//! compares the tape gradient of every differentiable input with
//! `(f(x + h) - f(x - h)) / 2h`, elementwise.

use lesionforge::tensor::{BnMode, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum OpKind {
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize },
    Depthwise { stride: usize, pad: usize },
    MaxPool,
    GlobalAvgPool,
    BatchNormTrain,
    BatchNormInfer,
    Relu,
    Sigmoid,
    Silu,
    Dense,
    Dropout,
    Add,
    Mul,
    Concat,
    ScaleChannels,
    Sum,
    Mean,
    Bce,
    L2,
}

/// How input values are drawn.
#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform,
    /// Values bounded away from zero so ReLU kinks are never crossed.
    AwayFromZero,
    /// A shuffled ladder with gaps of 0.1 so pooling argmaxes are stable.
    Distinct,
    Probability,
    /// Constant input (targets, running statistics): not differentiated.
    Binary,
    PositiveConst,
}

struct Input {
    shape: Vec<usize>,
    init: Init,
    differentiable: bool,
}

fn inp(shape: &[usize], init: Init) -> Input {
    let differentiable = !matches!(init, Init::Binary | Init::PositiveConst);
    Input {
        shape: shape.to_vec(),
        init,
        differentiable,
    }
}

pub const ALL_OPS: &[(&str, OpKind)] = &[
    ("conv2d", OpKind::Conv2d { stride: 1, pad: 1 }),
    ("conv2d_strided", OpKind::Conv2d { stride: 2, pad: 1 }),
    ("conv2d_pointwise", OpKind::Conv2d { stride: 1, pad: 0 }),
    ("conv_transpose2d", OpKind::ConvTranspose2d { stride: 2 }),
    ("depthwise_conv2d", OpKind::Depthwise { stride: 2, pad: 2 }),
    ("max_pool2d", OpKind::MaxPool),
    ("global_avg_pool", OpKind::GlobalAvgPool),
    ("batch_norm_train", OpKind::BatchNormTrain),
    ("batch_norm_infer", OpKind::BatchNormInfer),
    ("relu", OpKind::Relu),
    ("sigmoid", OpKind::Sigmoid),
    ("silu", OpKind::Silu),
    ("dense", OpKind::Dense),
    ("dropout", OpKind::Dropout),
    ("add", OpKind::Add),
    ("mul", OpKind::Mul),
    ("concat_channels", OpKind::Concat),
    ("scale_channels", OpKind::ScaleChannels),
    ("sum", OpKind::Sum),
    ("mean", OpKind::Mean),
    ("bce_loss", OpKind::Bce),
    ("l2_penalty", OpKind::L2),
];

fn inputs_for(kind: OpKind) -> Vec<Input> {
    use Init::*;
    match kind {
        OpKind::Conv2d { pad: 0, .. } => vec![
            inp(&[2, 3, 4, 4], Uniform),
            inp(&[2, 3, 1, 1], Uniform),
            inp(&[2], Uniform),
        ],
        OpKind::Conv2d { .. } => vec![
            inp(&[2, 2, 5, 5], Uniform),
            inp(&[3, 2, 3, 3], Uniform),
            inp(&[3], Uniform),
        ],
        OpKind::ConvTranspose2d { .. } => vec![
            inp(&[2, 3, 3, 3], Uniform),
            inp(&[3, 2, 2, 2], Uniform),
            inp(&[2], Uniform),
        ],
        OpKind::Depthwise { .. } => vec![
            inp(&[2, 3, 6, 6], Uniform),
            inp(&[3, 1, 5, 5], Uniform),
            inp(&[3], Uniform),
        ],
        OpKind::MaxPool => vec![inp(&[2, 2, 4, 4], Distinct)],
        OpKind::GlobalAvgPool => vec![inp(&[2, 3, 3, 4], Uniform)],
        OpKind::BatchNormTrain => vec![
            inp(&[3, 2, 3, 3], Uniform),
            inp(&[2], Uniform),
            inp(&[2], Uniform),
        ],
        OpKind::BatchNormInfer => vec![
            inp(&[3, 2, 3, 3], Uniform),
            inp(&[2], Uniform),
            inp(&[2], Uniform),
            inp(&[2], Binary),
            inp(&[2], PositiveConst),
        ],
        OpKind::Relu => vec![inp(&[3, 7], AwayFromZero)],
        OpKind::Sigmoid | OpKind::Silu | OpKind::Sum | OpKind::Mean => vec![inp(&[3, 7], Uniform)],
        OpKind::Dropout => vec![inp(&[4, 6], Uniform)],
        OpKind::Dense => vec![
            inp(&[3, 4], Uniform),
            inp(&[4, 5], Uniform),
            inp(&[5], Uniform),
        ],
        OpKind::Add | OpKind::Mul => vec![inp(&[2, 3, 4], Uniform), inp(&[2, 3, 4], Uniform)],
        OpKind::Concat => vec![inp(&[2, 2, 3, 3], Uniform), inp(&[2, 3, 3, 3], Uniform)],
        OpKind::ScaleChannels => vec![inp(&[2, 3, 3, 3], Uniform), inp(&[2, 3], Uniform)],
        OpKind::Bce => vec![inp(&[4, 5], Probability), inp(&[4, 5], Binary)],
        OpKind::L2 => vec![inp(&[3, 3], Uniform), inp(&[5], Uniform)],
    }
}

fn apply<T: Scalar>(kind: OpKind, g: &mut Graph<T>, v: &[Var], consts: &[Tensor<T>]) -> Var {
    let r = match kind {
        OpKind::Conv2d { stride, pad } => g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        OpKind::ConvTranspose2d { stride } => g.conv_transpose2d(v[0], v[1], Some(v[2]), stride),
        OpKind::Depthwise { stride, pad } => {
            g.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, pad)
        }
        OpKind::MaxPool => g.max_pool2d(v[0], 2, 2),
        OpKind::GlobalAvgPool => g.global_avg_pool(v[0]),
        OpKind::BatchNormTrain => g
            .batch_norm_with(v[0], v[1], v[2], BnMode::Train, T::from_f64(1e-3))
            .map(|r| r.0),
        OpKind::BatchNormInfer => {
            let mode = BnMode::Infer {
                mean: consts[0].data(),
                var: consts[1].data(),
            };
            g.batch_norm_with(v[0], v[1], v[2], mode, T::from_f64(1e-3))
                .map(|r| r.0)
        }
        OpKind::Relu => g.relu(v[0]),
        OpKind::Sigmoid => g.sigmoid(v[0]),
        OpKind::Silu => g.silu(v[0]),
        OpKind::Dense => g.dense(v[0], v[1], v[2]),
        OpKind::Dropout => g.dropout(v[0], 0.4, true, &mut ChaCha8Rng::seed_from_u64(99)),
        OpKind::Add => g.add(v[0], v[1]),
        OpKind::Mul => g.mul(v[0], v[1]),
        OpKind::Concat => g.concat_channels(v[0], v[1]),
        OpKind::ScaleChannels => g.scale_channels(v[0], v[1]),
        OpKind::Sum => g.sum(v[0]),
        OpKind::Mean => g.mean(v[0]),
        OpKind::Bce => {
            let t = g.constant(consts[0].clone());
            g.bce_loss(v[0], t)
        }
        OpKind::L2 => g.l2_penalty(v, T::from_f64(0.3)),
    };
    r.expect("op under test failed")
}

fn draw(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Uniform => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        Init::AwayFromZero => (0..n)
            .map(|_| {
                let m = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Init::Distinct => {
            let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
            for i in (1..n).rev() {
                v.swap(i, rng.gen_range(0..=i));
            }
            v
        }
        Init::Probability => (0..n).map(|_| rng.gen_range(0.1..0.9)).collect(),
        Init::Binary => (0..n)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect(),
        Init::PositiveConst => (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
    }
}

fn to_t<T: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| T::from_f64(x)).collect()).unwrap()
}

/// Evaluates the weighted loss and (optionally) the tape gradients.
fn eval<T: Scalar>(
    kind: OpKind,
    specs: &[Input],
    values: &[Vec<f64>],
    weights: &[f64],
    with_grad: bool,
) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut g = Graph::<T>::new();
    let mut vars = Vec::new();
    let mut consts = Vec::new();
    for (spec, vals) in specs.iter().zip(values) {
        let t = to_t::<T>(&spec.shape, vals);
        if spec.differentiable {
            vars.push(g.parameter(t));
        } else {
            consts.push(t);
        }
    }
    let out = apply(kind, &mut g, &vars, &consts);
    let shape = g.shape(out).to_vec();
    let w = g.constant(to_t::<T>(&shape, weights));
    let weighted = g.mul(out, w).unwrap();
    let loss = g.sum(weighted).unwrap();
    let value = g.value(loss).item().as_f64();
    if !with_grad {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|t| t.data().iter().map(|x| x.as_f64()).collect())
        })
        .collect();
    (value, grads)
}

/// Largest relative error `||a - n|| / max(||a||, ||n||, floor)` (Euclidean
/// norms per input tensor) over every differentiable input of one random
/// instance.
pub fn max_relative_error<T: Scalar>(kind: OpKind, seed: u64, h: f64, floor: f64) -> f64 {
    let specs = inputs_for(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| draw(s.init, &s.shape, &mut rng))
        .collect();
    // Output shape is needed for the weights; probe with a forward pass.
    let probe_len = {
        let mut g = Graph::<T>::new();
        let mut vars = Vec::new();
        let mut consts = Vec::new();
        for (spec, vals) in specs.iter().zip(&values) {
            let t = to_t::<T>(&spec.shape, vals);
            if spec.differentiable {
                vars.push(g.parameter(t));
            } else {
                consts.push(t);
            }
        }
        let out = apply(kind, &mut g, &vars, &consts);
        g.value(out).numel()
    };
    let weights: Vec<f64> = (0..probe_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, analytic) = eval::<T>(kind, &specs, &values, &weights, true);

    let mut worst = 0.0f64;
    let mut grad_slot = 0;
    for (i, spec) in specs.iter().enumerate() {
        if !spec.differentiable {
            continue;
        }
        let a = analytic[grad_slot]
            .clone()
            .expect("differentiable input received no gradient");
        grad_slot += 1;
        let numeric: Vec<f64> = (0..values[i].len())
            .map(|j| {
                let mut plus = values.clone();
                plus[i][j] += h;
                let mut minus = values.clone();
                minus[i][j] -= h;
                let fp = eval::<T>(kind, &specs, &plus, &weights, false).0;
                let fm = eval::<T>(kind, &specs, &minus, &weights, false).0;
                (fp - fm) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let denom = norm(&a).max(norm(&numeric)).max(floor);
        worst = worst.max(norm(&diff) / denom);
    }
    worst
}
