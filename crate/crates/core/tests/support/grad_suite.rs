//! Finite-difference gradient checks for every differentiable op, layer,
//! residual variant and a small end-to-end network, all in f64.
//!
//! Each check contracts the output with a fixed random tensor `R`, so the
//! scalar `L = sum(y * R)` exercises every output element with a distinct
//! weight, then compares `dL/d(input)` and `dL/d(parameter)` per tensor.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use skullstrip_core::model::{Model, ModelConfig};
use skullstrip_core::nn::{
    BatchNorm2d, ChannelSe, Combine, Conv2d, ConvTranspose2d, Forward, Linear, Mode, ParamStore, ResidualBlock, Scse,
    SpatialSe, StrategyKind,
};
use skullstrip_core::tensor::gradcheck::finite_difference_gradient;
use skullstrip_core::tensor::{Tape, Tensor, Var};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const PRIMITIVE_STEP: f64 = 1e-5;
/// Max-combined gates put kinks inside every attention module; a smaller step
/// keeps central differences from straddling them.
const MODULE_STEP: f64 = 1e-6;
/// Gradients that vanish identically (a conv bias feeding batch norm) leave
/// only rounding noise, so the error denominator never drops below this
/// fraction of the loss scale.
const NOISE_FLOOR: f64 = 1e-4;

type R<T> = skullstrip_core::tensor::Result<T>;

/// Worst relative error of one case over all its tensors.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub case: String,
    pub worst_tensor: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std).unwrap()
}

/// Inputs are drawn from U(-1, 1).
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(floor);
    diff / scale
}

fn worst(case: &str, errs: Vec<(String, f64)>, tolerance: f64) -> CaseResult {
    let (worst_tensor, rel_err) =
        errs.into_iter().fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 || e.is_nan() { (n, e) } else { acc });
    CaseResult { case: case.to_string(), worst_tensor, rel_err, tolerance }
}

/// Checks a pure tape computation with respect to each of `inputs`.
pub fn check_tape(
    case: &str,
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> R<Var>,
) -> CaseResult {
    let eval = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = build(&mut tape, &vars).unwrap();
        tape.value(y).unwrap().clone()
    };
    let y0 = eval(inputs);
    let weights = normal(rng, y0.shape(), 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true))).collect();
    let y = build(&mut tape, &vars).unwrap();
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let floor = NOISE_FLOOR * tape.value(loss).unwrap().item().unwrap().abs().max(1.0);
    tape.backward(loss).unwrap();

    let mut errs = Vec::new();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).unwrap().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric = finite_difference_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                dot(eval(&xs).data(), weights.data())
            },
            &inputs[k],
            PRIMITIVE_STEP,
        )
        .unwrap();
        errs.push((format!("input{k}"), rel_err(&analytic, numeric.data(), floor)));
    }
    worst(case, errs, LAYER_TOLERANCE)
}

/// Perturbs every trainable parameter so zero-initialized tensors (biases,
/// BN shifts) take generic values.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.sample::<f64, _>(StandardNormal) * std;
        }
    }
}

/// Checks a module forward pass with respect to its input and every
/// trainable parameter.
pub fn check_module<E: std::fmt::Debug>(
    case: &str,
    mut store: ParamStore<f64>,
    x: Tensor<f64>,
    mode: Mode,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    forward: impl Fn(&mut Forward<f64>, Var) -> Result<Var, E>,
) -> CaseResult {
    jitter(&mut store, rng, 0.2);
    let run = |store: &mut ParamStore<f64>, x: &Tensor<f64>| -> Tensor<f64> {
        let mut f = Forward::new(store, mode);
        let xv = f.input(x.clone());
        let y = forward(&mut f, xv).unwrap();
        f.value(y).unwrap().clone()
    };
    let weights = normal(rng, run(&mut store.clone(), &x).shape(), 1.0);

    let mut analytic_store = store.clone();
    let mut f = Forward::new(&mut analytic_store, mode);
    let xv = f.input(x.clone().with_requires_grad(true));
    let y = forward(&mut f, xv).unwrap();
    let wv = f.tape_mut().constant(weights.clone());
    let prod = f.tape_mut().mul(y, wv).unwrap();
    let loss = f.tape_mut().sum(prod).unwrap();
    let floor = NOISE_FLOOR * f.value(loss).unwrap().item().unwrap().abs().max(1.0);
    let grads = f.backward(loss).unwrap();
    let dx = f.grad(xv).unwrap().unwrap().to_vec();

    let mut errs = Vec::new();
    let mut scratch = store.clone();
    let numeric_x =
        finite_difference_gradient(|p| dot(run(&mut scratch, p).data(), weights.data()), &x, MODULE_STEP).unwrap();
    errs.push(("input".to_string(), rel_err(&dx, numeric_x.data(), floor)));

    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let analytic = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let value = store.get(id).clone();
        let numeric = finite_difference_gradient(
            |p| {
                scratch.set(id, p.clone()).unwrap();
                dot(run(&mut scratch, &x).data(), weights.data())
            },
            &value,
            MODULE_STEP,
        )
        .unwrap();
        scratch.set(id, value).unwrap();
        errs.push((store.name(id).to_string(), rel_err(&analytic, numeric.data(), floor)));
    }
    worst(case, errs, tolerance)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let n = rng.random_range(1..=2);
    let c = [2, 4][rng.random_range(0..2)];
    let h = [4, 6][rng.random_range(0..2)];
    let w = [4, 6][rng.random_range(0..2)];
    (n, c, h, w)
}

/// Elementwise, reduction, shape, convolution, pooling, normalization and
/// loss ops, each on freshly drawn shapes and values.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<CaseResult> {
    let mut out = Vec::new();
    let (n, c, h, w) = dims(rng);
    let x = uniform(rng, &[n, c, h, w]);
    let same = uniform(rng, &[n, c, h, w]);
    let per_channel = uniform(rng, &[1, c, 1, 1]);
    let per_pixel = uniform(rng, &[n, 1, h, w]);
    let per_sample = uniform(rng, &[n, c, 1, 1]);

    out.push(check_tape("add (broadcast)", &[x.clone(), per_channel.clone()], rng, |t, v| t.add(v[0], v[1])));
    out.push(check_tape("sub", &[x.clone(), same.clone()], rng, |t, v| t.sub(v[0], v[1])));
    out.push(check_tape("mul (channel gate)", &[x.clone(), per_sample], rng, |t, v| t.mul(v[0], v[1])));
    out.push(check_tape("mul (spatial gate)", &[x.clone(), per_pixel], rng, |t, v| t.mul(v[0], v[1])));
    out.push(check_tape("maximum", &[x.clone(), same.clone()], rng, |t, v| t.maximum(v[0], v[1])));
    let factor: f64 = rng.random_range(-2.0..2.0);
    out.push(check_tape("scale", std::slice::from_ref(&x), rng, move |t, v| t.scale(v[0], factor)));
    out.push(check_tape("add_scalar", std::slice::from_ref(&x), rng, move |t, v| t.add_scalar(v[0], factor)));
    out.push(check_tape("relu", std::slice::from_ref(&x), rng, |t, v| t.relu(v[0])));
    out.push(check_tape("sigmoid", std::slice::from_ref(&x), rng, |t, v| t.sigmoid(v[0])));
    out.push(check_tape("softmax_channel", std::slice::from_ref(&x), rng, |t, v| t.softmax_channel(v[0])));
    out.push(check_tape("sum", std::slice::from_ref(&x), rng, |t, v| t.sum(v[0])));
    out.push(check_tape("mean", std::slice::from_ref(&x), rng, |t, v| t.mean(v[0])));
    out.push(check_tape("mean_spatial", std::slice::from_ref(&x), rng, |t, v| t.mean_spatial(v[0])));
    out.push(check_tape("reshape", std::slice::from_ref(&x), rng, move |t, v| t.reshape(v[0], &[n, c * h * w])));
    out.push(check_tape("concat_channels", &[x.clone(), same.clone()], rng, |t, v| t.concat_channels(v[0], v[1])));

    let fin = c * 2;
    let lx = uniform(rng, &[n, fin]);
    let lw = normal(rng, &[c, fin], 0.5);
    let lb = normal(rng, &[c], 0.5);
    out.push(check_tape("linear", &[lx, lw, lb], rng, |t, v| t.linear(v[0], v[1], v[2])));

    let cout = [2, 3][rng.random_range(0..2)];
    let b = normal(rng, &[cout], 0.5);
    for (name, k, stride, pad) in [
        ("conv2d 3x3", 3, 1, 1),
        ("conv2d 3x3 stride 2", 3, 2, 1),
        ("conv2d 1x1", 1, 1, 0),
        ("conv2d 1x1 stride 2", 1, 2, 0),
    ] {
        let wt = normal(rng, &[cout, c, k, k], 0.5);
        out.push(check_tape(name, &[x.clone(), wt, b.clone()], rng, move |t, v| {
            t.conv2d(v[0], v[1], v[2], stride, pad)
        }));
    }
    let wt = normal(rng, &[c, cout, 2, 2], 0.5);
    out.push(check_tape("conv_transpose2d", &[x.clone(), wt, b], rng, |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2)));
    out.push(check_tape("maxpool2x2", std::slice::from_ref(&x), rng, |t, v| t.maxpool2x2(v[0])));

    let gamma = normal(rng, &[c], 0.5);
    let beta = normal(rng, &[c], 0.5);
    let xb = if n * h * w < 2 { uniform(rng, &[2, c, h, w]) } else { x.clone() };
    out.push(check_tape("batch_norm train", &[xb, gamma.clone(), beta.clone()], rng, |t, v| {
        Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
    }));
    let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    out.push(check_tape("batch_norm eval", &[x.clone(), gamma, beta], rng, move |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)
    }));

    let k = c;
    let labels = Tensor::from_fn(&[n, h, w], |_| rng.random_range(0..k) as u8).unwrap();
    out.push(check_tape("sparse_cross_entropy", &[x], rng, move |t, v| t.sparse_cross_entropy(v[0], &labels)));
    out
}

fn seeded(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

/// Layers, attention gates and every residual variant, with and without a
/// projection skip.
pub fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<CaseResult> {
    let mut out = Vec::new();
    let (n, c, h, w) = dims(rng);
    let n = n.max(2);
    let x = uniform(rng, &[n, c, h, w]);
    let tol = LAYER_TOLERANCE;
    let mut init = seeded(rng);

    let mut s = ParamStore::new();
    let conv = Conv2d::new(&mut s, "conv", c, 3, 3, 1, 1, 2f64.sqrt(), &mut init).unwrap();
    out.push(check_module("Conv2d", s, x.clone(), Mode::Train, tol, rng, |f, v| conv.forward(f, v)));

    let mut s = ParamStore::new();
    let up = ConvTranspose2d::new(&mut s, "up", c, 2, &mut init).unwrap();
    out.push(check_module("ConvTranspose2d", s, x.clone(), Mode::Train, tol, rng, |f, v| up.forward(f, v)));

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "fc", c, 3, 1.0, &mut init).unwrap();
    let flat = uniform(rng, &[n, c]);
    out.push(check_module("Linear", s, flat, Mode::Train, tol, rng, |f, v| lin.forward(f, v)));

    let mut s = ParamStore::new();
    let bn = BatchNorm2d::new(&mut s, "bn", c).unwrap();
    out.push(check_module("BatchNorm2d train", s, x.clone(), Mode::Train, tol, rng, |f, v| bn.forward(f, v)));
    let mut s = ParamStore::new();
    let bn = BatchNorm2d::new(&mut s, "bn", c).unwrap();
    out.push(check_module("BatchNorm2d eval", s, x.clone(), Mode::Eval, tol, rng, |f, v| bn.forward(f, v)));

    let mut s = ParamStore::new();
    let cse = ChannelSe::new(&mut s, "cse", c, 2, &mut init).unwrap();
    out.push(check_module("cSE", s, x.clone(), Mode::Train, tol, rng, |f, v| cse.forward(f, v)));

    let mut s = ParamStore::new();
    let sse = SpatialSe::new(&mut s, "sse", c, &mut init).unwrap();
    out.push(check_module("sSE", s, x.clone(), Mode::Train, tol, rng, |f, v| sse.forward(f, v)));

    for (name, combine) in [("scSE max", Combine::Max), ("scSE add", Combine::Add)] {
        let mut s = ParamStore::new();
        let scse = Scse::new(&mut s, "scse", c, 2, combine, &mut init).unwrap();
        out.push(check_module(name, s, x.clone(), Mode::Train, tol, rng, |f, v| scse.forward(f, v)));
    }

    for kind in StrategyKind::ALL {
        for (shape, cout, stride) in [("identity skip", c, 1), ("projection skip", 2 * c, 2)] {
            let mut s = ParamStore::new();
            let block = ResidualBlock::new(&mut s, "blk", c, cout, stride, kind, 2, Combine::Max, &mut init).unwrap();
            let name = format!("residual {} ({shape})", kind.label());
            out.push(check_module(&name, s, x.clone(), Mode::Train, tol, rng, |f, v| block.forward(f, v)));
        }
    }
    out
}

/// Depth-2 network with base width 4 on a 16x16 batch of two.
pub fn end_to_end_case(kind: StrategyKind, rng: &mut ChaCha8Rng) -> CaseResult {
    let config = ModelConfig { strategy: kind, depth: 2, base_channels: 4, seed: rng.random(), ..Default::default() };
    let mut model = Model::<f64>::build(config).unwrap();
    let x = uniform(rng, &[2, 1, 16, 16]);
    let (network, params) = model.parts_mut();
    let store = params.clone();
    let name = format!("end-to-end depth 2 {}", kind.label());
    check_module(&name, store, x, Mode::Train, END_TO_END_TOLERANCE, rng, |f, v| network.forward(f, v))
}

/// All op and layer cases for one seeded trial.
pub fn trial(seed: u64) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = op_cases(&mut rng);
    out.extend(layer_cases(&mut rng));
    out
}
