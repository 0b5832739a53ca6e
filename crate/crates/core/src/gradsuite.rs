//! Finite-difference sweep over every differentiable primitive and the full
//! network, repeated across seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_inputs, Probe};
use crate::lewin::{window_partition, window_reverse, LeWinBlock, Leff, WindowAttention, WindowSpec};
use crate::loss::{final_loss, FeatureExtractor, LossWeights};
use crate::model::{Eformer, Mode, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::edge::SobelKernelSet;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst error over all seeds.
    pub max_rel_error: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < TOLERANCE
    }
}

type Case = fn(u64) -> Result<f64>;

/// Contracts an output with fixed random weights and squares it, so every
/// element of the output contributes a distinct, O(1) gradient.
fn probe_loss(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.dims(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd));
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    let s = t.sum(m);
    let s2 = t.mul(s, s)?;
    let lin = t.sum(m);
    t.add(s2, lin)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(dims, 1.0, r)
}

fn check(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let rep = grad_check_inputs(
        |t, v| {
            let y = f(t, v)?;
            probe_loss(t, y, seed)
        },
        &inputs,
        STEP,
        Probe::All,
    )?;
    Ok(rep.max_rel_error)
}

fn elementwise(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (a, b) = (randn(&[2, 3], &mut r), randn(&[2, 3], &mut r));
    let c = r.random_range(-2.0..2.0);
    check(vec![a, b], seed, move |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let k = t.scale(m, c);
        t.sub(k, v[0])
    })
}

fn scalar_and_bias(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = vec![randn(&[2, 3, 4], &mut r), randn(&[1], &mut r), randn(&[4], &mut r)];
    check(inputs, seed, |t, v| {
        let m = t.mul_scalar(v[0], v[1])?;
        t.add_bias(m, v[2])
    })
}

fn reductions(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    check(vec![randn(&[3, 4], &mut r)], seed, |t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0]);
        let p = t.mul(s, m)?;
        let q = t.mul(v[0], v[0])?;
        let q = t.mean(q);
        t.add(p, q)
    })
}

fn shapes(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = vec![randn(&[2, 3, 4], &mut r), randn(&[2, 2, 4], &mut r)];
    check(inputs, seed, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let tr = t.transpose_last(p)?;
        let rs = t.reshape(tr, &[4, 10])?;
        let n = t.narrow(rs, 1, 3, 5)?;
        t.mul(n, n)
    })
}

fn matmul(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = vec![
        randn(&[2, 3, 4], &mut r),
        randn(&[2, 4, 5], &mut r),
        randn(&[4, 5], &mut r),
        randn(&[3, 4], &mut r),
    ];
    check(inputs, seed, |t, v| {
        let paired = t.matmul(v[0], v[1])?;
        let bb = t.matmul(v[0], v[2])?;
        let ba = t.matmul(v[3], v[1])?;
        let s = t.add(paired, bb)?;
        t.add(s, ba)
    })
}

fn conv(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let inputs = vec![randn(&[2, 2, 6, 5], &mut r), randn(&[3, 2, 3, 3], &mut r), randn(&[3], &mut r)];
    check(inputs, seed, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, 1))
}

fn conv_transpose(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = vec![randn(&[1, 3, 3, 4], &mut r), randn(&[3, 2, 4, 4], &mut r), randn(&[2], &mut r)];
    check(inputs, seed, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1))
}

fn depthwise(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let inputs = vec![randn(&[2, 3, 5, 6], &mut r), randn(&[3, 1, 3, 3], &mut r), randn(&[3], &mut r)];
    check(inputs, seed, move |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, 1))
}

fn pad(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mode = [PadMode::Zeros, PadMode::Reflect, PadMode::Replicate][(seed % 3) as usize];
    check(vec![randn(&[1, 2, 4, 3], &mut r)], seed, move |t, v| {
        let p = t.pad2d(v[0], 2, mode)?;
        t.mul(p, p)
    })
}

fn norm_softmax_gelu(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = vec![randn(&[3, 5], &mut r), randn(&[5], &mut r), randn(&[5], &mut r)];
    check(inputs, seed, |t, v| {
        let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let s = t.softmax(n);
        let g = t.gelu(v[0]);
        t.add(s, g)
    })
}

fn edge(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let per_kernel = seed % 2 == 1;
    let set = SobelKernelSet::new(&mut store, "alpha", per_kernel, 2.0)?;
    let img = Tensor::uniform(&[1, 1, 6, 6], 0.5, &mut r).map(|v| v + 0.5);
    let mut inputs = store.values().to_vec();
    inputs.push(img);
    check(inputs, seed, move |t, v| {
        let p = Bound::from_vars(vec![v[0]]);
        set.forward(t, &p, v[1])
    })
}

fn windows(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    check(vec![randn(&[1, 2, 4, 8], &mut r)], seed, |t, v| {
        let w = window_partition(t, v[0], 2)?;
        let sq = t.mul(w, w)?;
        window_reverse(t, sq, 4, 8)
    })
}

fn with_store<F>(seed: u64, build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<F>, input: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let f = build(&mut store, &mut r)?;
    // perturb away from the zero-initialized biases so every path is exercised
    for v in store.values_mut() {
        for x in v.data_mut() {
            *x += 0.1 * r.random_range(-1.0..1.0);
        }
    }
    let n = store.len();
    let mut inputs = store.values().to_vec();
    inputs.push(input);
    check(inputs, seed, move |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        f(t, &p, v[n])
    })
}

fn attention(seed: u64) -> Result<f64> {
    let x = randn(&[2, 4, 4], &mut rng(seed + 1000));
    with_store(
        seed,
        |s, r| {
            let a = WindowAttention::new(s, "a", WindowSpec::new(2, 2, 4)?, r)?;
            Ok(move |t: &mut Tape, p: &Bound, x: Var| a.forward(t, p, x))
        },
        x,
    )
}

fn leff(seed: u64) -> Result<f64> {
    let x = randn(&[2, 4, 3], &mut rng(seed + 1000));
    with_store(
        seed,
        |s, r| {
            let l = Leff::new(s, "l", 3, 5, r)?;
            Ok(move |t: &mut Tape, p: &Bound, x: Var| l.forward(t, p, x))
        },
        x,
    )
}

fn lewin(seed: u64) -> Result<f64> {
    let x = randn(&[1, 4, 4, 4], &mut rng(seed + 1000));
    with_store(
        seed,
        |s, r| {
            let b = LeWinBlock::new(s, "b", WindowSpec::new(2, 2, 4)?, 1, 8, r)?;
            Ok(move |t: &mut Tape, p: &Bound, x: Var| b.forward(t, p, x))
        },
        x,
    )
}

/// Small configuration used for whole-network checks.
pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        stages: 2,
        base_channels: 4,
        window: 4,
        heads: 2,
        lewin_depth: 1,
        mode,
        ffn_mult: 2,
        unet_skips: false,
        per_kernel_alpha: false,
    }
}

/// Ten sampled parameter coordinates plus the loss path, on a 16×16 input.
fn full_model(seed: u64) -> Result<f64> {
    let mode = if seed.is_multiple_of(2) { Mode::Residual } else { Mode::Deterministic };
    let model = Eformer::new(tiny_config(mode), seed)?;
    let mut r = rng(seed + 2000);
    let x = Tensor::uniform(&[1, 1, 16, 16], 0.5, &mut r).map(|v| v + 0.5);
    let y = Tensor::uniform(&[1, 1, 16, 16], 0.5, &mut r).map(|v| v + 0.5);
    let ex = FeatureExtractor::default();
    let w = LossWeights::default();
    let rep = grad_check_inputs(
        |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let pred = model.estimate(t, &p, xv)?;
            let l = final_loss(t, pred, yv, &w, &ex)?.total;
            let d = t.sub(pred, yv)?;
            let extra = probe_loss(t, d, seed)?;
            // fixed scale keeps the loss gradients O(1)
            let l = t.scale(l, 256.0);
            t.add(l, extra)
        },
        model.params.values(),
        STEP,
        Probe::Sample { count: 10, seed },
    )?;
    Ok(rep.max_rel_error)
}

pub const CASES: &[(&str, Case)] = &[
    ("add/sub/mul/scale", elementwise),
    ("mul_scalar/add_bias", scalar_and_bias),
    ("sum/mean", reductions),
    ("concat/permute/transpose/reshape/narrow", shapes),
    ("matmul", matmul),
    ("conv2d", conv),
    ("conv_transpose2d", conv_transpose),
    ("depthwise_conv2d", depthwise),
    ("pad2d", pad),
    ("layer_norm/softmax/gelu", norm_softmax_gelu),
    ("sobel edge block", edge),
    ("window partition/reverse", windows),
    ("window attention", attention),
    ("leff", leff),
    ("lewin block", lewin),
    ("full network + loss", full_model),
];

/// Runs every case for seeds `0..seeds`.
pub fn run(seeds: u64) -> Result<SuiteReport> {
    let mut cases = Vec::with_capacity(CASES.len());
    for &(name, case) in CASES {
        let mut worst: f64 = 0.0;
        for s in 0..seeds {
            let e = case(s)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        cases.push(CaseResult {
            name,
            max_rel_error: worst,
            seeds: seeds as usize,
        });
    }
    Ok(SuiteReport { cases })
}
