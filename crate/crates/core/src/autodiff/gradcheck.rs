use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ConvGeometry, Tape, Var};
use crate::blocks::{BlockKind, BlockPlan, ConvOp, ResidualParams, SacParams};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Shape, Tensor};

/// Activation inputs closer than this to a kink make a finite-difference
/// comparison meaningless; such samples are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

/// Gradient magnitudes below this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements: usize,
    pub min_kink_distance: f64,
}

fn eval_sum<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).sum())
}

/// Compares reverse-mode gradients of `sum(f(inputs))` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)` for every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        elements: 0,
        min_kink_distance: tape.min_kink_distance(),
    };
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.of(&tape, v);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval_sum(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval_sum(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("central difference for input {i}[{j}]")));
            }
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.elements += 1;
        }
    }
    Ok(report)
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(Shape::new(1, v.len(), 1, 1), v.to_vec()).expect("length matches")
}

/// Learnable tensors of a block, in the order [`block_on_tape`] consumes them.
pub fn block_tensors(p: &ResidualParams<f64>) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    for unit in &p.convs {
        out.push(vec_tensor(&unit.bn.gamma));
        out.push(vec_tensor(&unit.bn.beta));
        match &unit.op {
            ConvOp::Conv(k) => out.push(k.weight.clone()),
            ConvOp::Sac(s) => out.extend(sac_tensors(s)),
        }
    }
    if let Some(se) = &p.se {
        out.push(se.weight.clone());
        if let Some(b) = &se.bias {
            out.push(vec_tensor(b));
        }
    }
    if let Some(k) = &p.shortcut {
        out.push(k.weight.clone());
    }
    out
}

pub fn sac_tensors(s: &SacParams<f64>) -> Vec<Tensor<f64>> {
    vec![
        s.shared_conv.weight.clone(),
        s.switch.weight.clone(),
        vec_tensor(&[s.switch.bias]),
        s.pre_context.weight.clone(),
        vec_tensor(&s.pre_context.bias),
        s.post_context.weight.clone(),
        vec_tensor(&s.post_context.bias),
    ]
}

fn next(vars: &mut std::slice::Iter<'_, Var>) -> Result<Var> {
    vars.next()
        .copied()
        .ok_or_else(|| Error::contract("too few tape variables for block parameters"))
}

pub fn se_on_tape(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let z = tape.global_avg_pool(x)?;
    let pre = tape.fully_connected(z, w, bias)?;
    let s = tape.activation(pre, Activation::HardSigmoid)?;
    tape.mul(x, s)
}

pub fn global_context_on_tape(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.global_avg_pool(x)?;
    let ctx = tape.fully_connected(z, w, Some(b))?;
    tape.add(x, ctx)
}

/// SAC with variables in [`sac_tensors`] order.
pub fn sac_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &mut std::slice::Iter<'_, Var>,
    rate: usize,
    pool_window: usize,
) -> Result<Var> {
    let w = next(vars)?;
    let sw = next(vars)?;
    let sb = next(vars)?;
    let (pre_w, pre_b) = (next(vars)?, next(vars)?);
    let (post_w, post_b) = (next(vars)?, next(vars)?);
    let pre = global_context_on_tape(tape, x, pre_w, pre_b)?;
    let pooled = tape.avg_pool(pre, pool_window, 1, pool_window / 2)?;
    let logits = tape.conv2d(pooled, sw, Some(sb), ConvGeometry::dense(1, 1))?;
    let s = tape.activation(logits, Activation::Sigmoid)?;
    let small = tape.conv2d(pre, w, None, ConvGeometry::dense(1, rate))?;
    let large = tape.conv2d(pre, w, None, ConvGeometry::dense(1, 3 * rate))?;
    let keep = tape.one_minus(s)?;
    let a = tape.mul(small, keep)?;
    let b = tape.mul(large, s)?;
    let y = tape.add(a, b)?;
    global_context_on_tape(tape, y, post_w, post_b)
}

/// Residual block on the tape. `template` supplies the geometry and the
/// batch-norm statistics; `vars` the learnable tensors in
/// [`block_tensors`] order.
pub fn block_on_tape(
    tape: &mut Tape,
    x: Var,
    plan: &BlockPlan,
    template: &ResidualParams<f64>,
    vars: &[Var],
) -> Result<Var> {
    let mut it = vars.iter();
    let mut y = x;
    for (i, unit) in template.convs.iter().enumerate() {
        let gamma = next(&mut it)?;
        let beta = next(&mut it)?;
        let bn = tape.batch_norm(y, gamma, beta, unit.bn.mean.clone(), unit.bn.var.clone(), unit.bn.eps)?;
        let act = tape.activation(bn, Activation::Relu)?;
        y = match &unit.op {
            ConvOp::Conv(k) => {
                let w = next(&mut it)?;
                let stride = if i == 0 { plan.stride } else { 1 };
                tape.conv2d(act, w, None, ConvGeometry::dense(stride, k.rate))?
            }
            ConvOp::Sac(s) => sac_on_tape(tape, act, &mut it, s.shared_conv.rate, s.switch.pool_window)?,
        };
    }
    if let Some(se) = &template.se {
        let w = next(&mut it)?;
        let b = match se.bias {
            Some(_) => Some(next(&mut it)?),
            None => None,
        };
        y = se_on_tape(tape, y, w, b)?;
    }
    let short = match &template.shortcut {
        Some(_) => {
            let w = next(&mut it)?;
            tape.conv2d(x, w, None, ConvGeometry::dense(plan.stride, 1))?
        }
        None => x,
    };
    tape.add(short, y)
}

/// The ops covered by the gradient-check suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedOp {
    Conv2d,
    AtrousConv2d,
    AvgPool,
    GlobalAvgPool,
    FullyConnected,
    HardSigmoid,
    SeModule,
    Sac,
    BasicBlock,
    BottleneckBlock,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 10] = [
        CheckedOp::Conv2d,
        CheckedOp::AtrousConv2d,
        CheckedOp::AvgPool,
        CheckedOp::GlobalAvgPool,
        CheckedOp::FullyConnected,
        CheckedOp::HardSigmoid,
        CheckedOp::SeModule,
        CheckedOp::Sac,
        CheckedOp::BasicBlock,
        CheckedOp::BottleneckBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d",
            CheckedOp::AtrousConv2d => "conv2d_rate2_stride2",
            CheckedOp::AvgPool => "avg_pool",
            CheckedOp::GlobalAvgPool => "global_avg_pool",
            CheckedOp::FullyConnected => "fully_connected",
            CheckedOp::HardSigmoid => "hard_sigmoid",
            CheckedOp::SeModule => "se_module",
            CheckedOp::Sac => "sac",
            CheckedOp::BasicBlock => "basic_block",
            CheckedOp::BottleneckBlock => "bottleneck_block",
        }
    }
}

fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(Shape::new(shape[0], shape[1], shape[2], shape[3]), 1.0, rng)
}

/// Random non-trivial block parameters: perturbed batch norm, random SAC
/// switch and context weights.
fn random_block(plan: &BlockPlan, rng: &mut ChaCha8Rng) -> Result<ResidualParams<f64>> {
    let mut p = ResidualParams::<f64>::init(plan, rng)?;
    for unit in &mut p.convs {
        for c in 0..unit.bn.channels() {
            unit.bn.mean[c] = rng.random_range(-0.2..0.2);
            unit.bn.var[c] = rng.random_range(0.5..1.5);
            unit.bn.gamma[c] = rng.random_range(0.5..1.5);
            unit.bn.beta[c] = rng.random_range(-0.2..0.2);
        }
        if let ConvOp::Sac(s) = &mut unit.op {
            let (cin, cout) = (s.shared_conv.in_channels(), s.shared_conv.out_channels());
            *s = SacParams::random(cin, cout, s.shared_conv.rate, rng)?;
        }
    }
    Ok(p)
}

fn single_case(op: CheckedOp, rng: &mut ChaCha8Rng, eps: f64) -> Result<GradCheckReport> {
    match op {
        CheckedOp::Conv2d => {
            let inputs = [randn([2, 3, 6, 5], rng), randn([4, 3, 3, 3], rng), randn([1, 4, 1, 1], rng)];
            grad_check(
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::dense(1, 1)),
                &inputs,
                eps,
            )
        }
        CheckedOp::AtrousConv2d => {
            let inputs = [randn([1, 2, 9, 8], rng), randn([3, 2, 3, 3], rng)];
            grad_check(
                |t, v| t.conv2d(v[0], v[1], None, ConvGeometry::dense(2, 2)),
                &inputs,
                eps,
            )
        }
        CheckedOp::AvgPool => {
            let inputs = [randn([1, 3, 9, 9], rng)];
            // Weighted sum so the gradient is not uniform.
            let weights = randn([1, 3, 9, 9], rng);
            grad_check(
                |t, v| {
                    let w = t.leaf(weights.clone())?;
                    let p = t.avg_pool(v[0], 5, 1, 2)?;
                    t.mul(p, w)
                },
                &inputs,
                eps,
            )
        }
        CheckedOp::GlobalAvgPool => {
            let inputs = [randn([2, 3, 4, 5], rng)];
            let weights = randn([2, 3, 1, 1], rng);
            grad_check(
                |t, v| {
                    let w = t.leaf(weights.clone())?;
                    let p = t.global_avg_pool(v[0])?;
                    t.mul(p, w)
                },
                &inputs,
                eps,
            )
        }
        CheckedOp::FullyConnected => {
            let inputs = [randn([2, 5, 1, 1], rng), randn([3, 5, 1, 1], rng), randn([1, 3, 1, 1], rng)];
            let weights = randn([2, 3, 1, 1], rng);
            grad_check(
                |t, v| {
                    let w = t.leaf(weights.clone())?;
                    let y = t.fully_connected(v[0], v[1], Some(v[2]))?;
                    t.mul(y, w)
                },
                &inputs,
                eps,
            )
        }
        CheckedOp::HardSigmoid => {
            let shape = Shape::new(1, 1, 8, 8);
            let data = (0..shape.numel())
                .map(|_| loop {
                    let v: f64 = rng.random_range(-5.0..5.0);
                    if (v.abs() - 3.0).abs() > 0.1 {
                        break v;
                    }
                })
                .collect();
            let inputs = [Tensor::new(shape, data)?];
            grad_check(|t, v| t.activation(v[0], Activation::HardSigmoid), &inputs, eps)
        }
        CheckedOp::SeModule => {
            let inputs = [randn([2, 4, 5, 5], rng), randn([4, 4, 1, 1], rng)];
            grad_check(|t, v| se_on_tape(t, v[0], v[1], None), &inputs, eps)
        }
        CheckedOp::Sac => {
            let s = SacParams::<f64>::random(3, 4, 1, rng)?;
            let mut inputs = vec![randn([1, 3, 7, 7], rng)];
            inputs.extend(sac_tensors(&s));
            grad_check(
                |t, v| sac_on_tape(t, v[0], &mut v[1..].iter(), 1, 5),
                &inputs,
                eps,
            )
        }
        CheckedOp::BasicBlock | CheckedOp::BottleneckBlock => {
            let plan = if op == CheckedOp::BasicBlock {
                BlockPlan {
                    kind: BlockKind::Basic,
                    in_channels: 3,
                    mid_channels: 4,
                    inner_channels: 4,
                    out_channels: 4,
                    stride: 2,
                    rate: 1,
                    multigrid: 1,
                    use_se: true,
                    use_sac: false,
                    survival_rate: 1.0,
                }
            } else {
                BlockPlan {
                    kind: BlockKind::Bottleneck,
                    in_channels: 4,
                    mid_channels: 2,
                    inner_channels: 3,
                    out_channels: 6,
                    stride: 1,
                    rate: 2,
                    multigrid: 1,
                    use_se: true,
                    use_sac: true,
                    survival_rate: 0.8,
                }
            };
            let params = random_block(&plan, rng)?;
            let mut inputs = vec![randn([1, plan.in_channels, 6, 6], rng)];
            inputs.extend(block_tensors(&params));
            grad_check(
                |t, v| block_on_tape(t, v[0], &plan, &params, &v[1..]),
                &inputs,
                eps,
            )
        }
    }
}

/// Runs the gradient check for `op` on random inputs drawn from `seed`,
/// redrawing until no activation input lies within [`KINK_MARGIN`] of a kink.
pub fn check_op(op: CheckedOp, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..100 {
        let report = single_case(op, &mut rng, eps)?;
        if report.min_kink_distance > KINK_MARGIN {
            return Ok(report);
        }
        last = Some(report);
    }
    Err(Error::invalid(format!(
        "{}: no kink-free sample in 100 draws (closest {:?})",
        op.name(),
        last.map(|r| r.min_kink_distance)
    )))
}
