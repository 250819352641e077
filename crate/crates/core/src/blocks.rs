//! Squeeze-and-excitation, switchable atrous convolution, global context
//! modules, pre-activation residual blocks and drop path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    activation, add, avg_pool2d, batch_norm_inference, conv2d, fully_connected, global_avg_pool,
    mul_broadcast, Activation, BatchNormParams, ConvKernel, Element, Shape, Tensor,
};

/// Simplified SE: a single fully connected layer gated by a hard sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams<T = f32> {
    /// `(c, c, 1, 1)`
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

/// `s = hard_sigmoid(W * gap(x))`; the output is `x` scaled per channel by `s`.
pub fn se_module<T: Element>(x: &Tensor<T>, p: &SeParams<T>) -> Result<Tensor<T>> {
    let c = x.shape().c;
    let ws = p.weight.shape();
    if ws.n != c || ws.c != c {
        return Err(Error::contract(format!(
            "SE weight {}x{} on {c} channels",
            ws.n, ws.c
        )));
    }
    let z = global_avg_pool(x)?;
    let s = activation(
        Activation::HardSigmoid,
        &fully_connected(&z, &p.weight, p.bias.as_deref())?,
    );
    mul_broadcast(x, &s)
}

/// Residual global context module: `x + FC(gap(x))` broadcast over space.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalContextParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn global_context<T: Element>(x: &Tensor<T>, p: &GlobalContextParams<T>) -> Result<Tensor<T>> {
    let c = x.shape().c;
    let ws = p.weight.shape();
    if ws.n != c || ws.c != c {
        return Err(Error::contract(format!(
            "global context weight {}x{} on {c} channels",
            ws.n, ws.c
        )));
    }
    let ctx = fully_connected(&global_avg_pool(x)?, &p.weight, Some(&p.bias))?;
    add(x, &ctx)
}

/// Switch of a SAC: average pooling, then a 1x1 conv to one channel, then a
/// sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchParams<T = f32> {
    pub pool_window: usize,
    /// `(1, c, 1, 1)`
    pub weight: Tensor<T>,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacParams<T = f32> {
    /// The only 3x3 weight tensor; its `rate` is the small rate, the large
    /// branch runs at three times that.
    pub shared_conv: ConvKernel<T>,
    pub switch: SwitchParams<T>,
    pub pre_context: GlobalContextParams<T>,
    pub post_context: GlobalContextParams<T>,
}

impl<T: Element> SacParams<T> {
    pub fn rates(&self) -> (usize, usize) {
        (self.shared_conv.rate, 3 * self.shared_conv.rate)
    }
}

/// Switch map `S(x)` of shape `(n, 1, h, w)`, values in `(0, 1)`.
pub fn sac_switch<T: Element>(x: &Tensor<T>, p: &SwitchParams<T>) -> Result<Tensor<T>> {
    if p.pool_window % 2 == 0 {
        return Err(Error::invalid("switch pool window must be odd"));
    }
    let pooled = avg_pool2d(x, p.pool_window, 1, p.pool_window / 2)?;
    let k = ConvKernel::new(p.weight.clone(), 1, 1)?.with_bias(vec![p.bias])?;
    Ok(activation(Activation::Sigmoid, &conv2d(&pooled, &k)?))
}

/// The two branch outputs `(conv(x, w, r), conv(x, w, 3r))` sharing one weight.
pub fn sac_branches<T: Element>(x: &Tensor<T>, p: &SacParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (small, large) = p.rates();
    let k_small = p.shared_conv.clone().with_rate(small)?;
    let k_large = p.shared_conv.clone().with_rate(large)?;
    Ok((conv2d(x, &k_small)?, conv2d(x, &k_large)?))
}

/// Convex combination of the two branches, `(1 - s) * a + s * b`.
pub fn blend<T: Element>(a: &Tensor<T>, b: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let one_minus = s.map(|v| T::one() - v);
    add(&mul_broadcast(a, &one_minus)?, &mul_broadcast(b, s)?)
}

/// Switchable atrous convolution without the surrounding context modules.
pub fn sac_core<T: Element>(x: &Tensor<T>, p: &SacParams<T>) -> Result<Tensor<T>> {
    let s = sac_switch(x, &p.switch)?;
    let (a, b) = sac_branches(x, p)?;
    blend(&a, &b, &s)
}

pub fn sac<T: Element>(x: &Tensor<T>, p: &SacParams<T>) -> Result<Tensor<T>> {
    if x.shape().c != p.shared_conv.in_channels() {
        return Err(Error::contract(format!(
            "SAC over {} channels applied to {}",
            p.shared_conv.in_channels(),
            x.shape()
        )));
    }
    let pre = global_context(x, &p.pre_context)?;
    let y = sac_core(&pre, p)?;
    global_context(&y, &p.post_context)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convs: `in -> mid -> out`.
    Basic,
    /// 1x1 reduce `in -> mid`, 3x3 `mid -> inner`, 1x1 expand `inner -> out`.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPlan {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub mid_channels: usize,
    /// Output width of the 3x3 conv in a bottleneck; equals `out_channels`
    /// for basic blocks.
    pub inner_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Effective atrous rate: stage unit rate times the multi-grid factor.
    pub rate: usize,
    pub multigrid: usize,
    pub use_se: bool,
    pub use_sac: bool,
    pub survival_rate: f64,
}

impl BlockPlan {
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    /// Channel widths `(in, out)` of each conv on the branch, in order.
    pub fn branch_convs(&self) -> Vec<(usize, usize, usize)> {
        match self.kind {
            BlockKind::Basic => vec![
                (self.in_channels, self.mid_channels, 3),
                (self.mid_channels, self.out_channels, 3),
            ],
            BlockKind::Bottleneck => vec![
                (self.in_channels, self.mid_channels, 1),
                (self.mid_channels, self.inner_channels, 3),
                (self.inner_channels, self.out_channels, 1),
            ],
        }
    }

    /// Index of the conv replaced by SAC when `use_sac` is set.
    pub fn sac_index(&self) -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stride) {
            return Err(Error::invalid(format!("block stride {} not in {{1, 2}}", self.stride)));
        }
        if self.rate == 0 {
            return Err(Error::invalid("block rate must be >= 1"));
        }
        if !(self.survival_rate > 0.0 && self.survival_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "survival rate {} outside (0, 1]",
                self.survival_rate
            )));
        }
        if self.kind == BlockKind::Basic && self.inner_channels != self.out_channels {
            return Err(Error::invalid("basic block inner width must equal its output width"));
        }
        Ok(())
    }
}

/// The op applied after a pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvOp<T = f32> {
    Conv(ConvKernel<T>),
    Sac(SacParams<T>),
}

impl<T: Element> ConvOp<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            ConvOp::Conv(k) => conv2d(x, k),
            ConvOp::Sac(p) => sac(x, p),
        }
    }
}

/// `BN -> ReLU -> op`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreActConv<T = f32> {
    pub bn: BatchNormParams<T>,
    pub op: ConvOp<T>,
}

impl<T: Element> PreActConv<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = activation(Activation::Relu, &batch_norm_inference(x, &self.bn)?);
        self.op.apply(&a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualParams<T = f32> {
    pub convs: Vec<PreActConv<T>>,
    pub se: Option<SeParams<T>>,
    /// 1x1 projection on the raw input.
    pub shortcut: Option<ConvKernel<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropMode {
    Train,
    Inference,
}

/// Per-batch-item stochastic depth with scale-at-train: kept items are
/// divided by `survival_rate`, dropped items become zero.
pub fn drop_path<T: Element, R: Rng + ?Sized>(
    branch: &Tensor<T>,
    survival_rate: f64,
    mode: DropMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(survival_rate > 0.0 && survival_rate <= 1.0) {
        return Err(Error::invalid(format!(
            "survival rate {survival_rate} outside (0, 1]"
        )));
    }
    if mode == DropMode::Inference || survival_rate == 1.0 {
        return Ok(branch.clone());
    }
    let s = branch.shape();
    let per_item = s.c * s.plane();
    let inv = T::from_f64_lossy(1.0 / survival_rate);
    let mut out = branch.clone();
    for n in 0..s.n {
        let keep = rng.random::<f64>() < survival_rate;
        for v in &mut out.data_mut()[n * per_item..(n + 1) * per_item] {
            *v = if keep { *v * inv } else { T::zero() };
        }
    }
    Ok(out)
}

fn check_block<T: Element>(x: &Tensor<T>, plan: &BlockPlan, params: &ResidualParams<T>) -> Result<()> {
    plan.validate()?;
    if x.shape().c != plan.in_channels {
        return Err(Error::contract(format!(
            "block expects {} channels, got {}",
            plan.in_channels,
            x.shape().c
        )));
    }
    if params.convs.len() != plan.branch_convs().len() {
        return Err(Error::contract("block params do not match the block kind"));
    }
    if params.shortcut.is_some() != plan.has_projection() {
        return Err(Error::contract("projection shortcut present iff shape changes"));
    }
    if params.se.is_some() != plan.use_se {
        return Err(Error::contract("SE params present iff use_se"));
    }
    Ok(())
}

/// The residual branch, including SE when present.
pub fn residual_branch<T: Element>(
    x: &Tensor<T>,
    plan: &BlockPlan,
    params: &ResidualParams<T>,
) -> Result<Tensor<T>> {
    check_block(x, plan, params)?;
    let mut y = x.clone();
    for unit in &params.convs {
        y = unit.apply(&y)?;
    }
    if let Some(se) = &params.se {
        y = se_module(&y, se)?;
    }
    Ok(y)
}

pub fn shortcut<T: Element>(x: &Tensor<T>, params: &ResidualParams<T>) -> Result<Tensor<T>> {
    match &params.shortcut {
        Some(k) => conv2d(x, k),
        None => Ok(x.clone()),
    }
}

/// Inference-mode residual block: `shortcut(x) + branch(x)`.
pub fn residual_block<T: Element>(
    x: &Tensor<T>,
    plan: &BlockPlan,
    params: &ResidualParams<T>,
) -> Result<Tensor<T>> {
    let branch = residual_branch(x, plan, params)?;
    add(&shortcut(x, params)?, &branch)
}

/// Residual block with drop path applied to the branch.
pub fn residual_block_stochastic<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    plan: &BlockPlan,
    params: &ResidualParams<T>,
    mode: DropMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let branch = drop_path(&residual_branch(x, plan, params)?, plan.survival_rate, mode, rng)?;
    add(&shortcut(x, params)?, &branch)
}

fn he_conv<T: Element, R: Rng + ?Sized>(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    rate: usize,
    rng: &mut R,
) -> Result<ConvKernel<T>> {
    let std = (2.0 / (cout * k * k) as f64).sqrt();
    ConvKernel::new(Tensor::randn(Shape::new(cout, cin, k, k), std, rng), stride, rate)
}

fn fc_matrix<T: Element, R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(Shape::new(cout, cin, 1, 1), (1.0 / cin as f64).sqrt(), rng)
}

impl<T: Element> SacParams<T> {
    /// Fan-out normal shared conv, 5x5 switch pooling, zero-initialised
    /// switch and context weights.
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        rate: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            shared_conv: he_conv(cin, cout, 3, 1, rate, rng)?,
            switch: SwitchParams {
                pool_window: 5,
                weight: Tensor::zeros(Shape::new(1, cin, 1, 1)),
                bias: T::zero(),
            },
            pre_context: GlobalContextParams {
                weight: Tensor::zeros(Shape::new(cin, cin, 1, 1)),
                bias: vec![T::zero(); cin],
            },
            post_context: GlobalContextParams {
                weight: Tensor::zeros(Shape::new(cout, cout, 1, 1)),
                bias: vec![T::zero(); cout],
            },
        })
    }

    /// Random non-trivial parameters, for testing.
    pub fn random<R: Rng + ?Sized>(cin: usize, cout: usize, rate: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            shared_conv: he_conv(cin, cout, 3, 1, rate, rng)?,
            switch: SwitchParams {
                pool_window: 5,
                weight: Tensor::randn(Shape::new(1, cin, 1, 1), 1.0, rng),
                bias: T::from_f64_lossy(rng.random_range(-0.5..0.5)),
            },
            pre_context: GlobalContextParams {
                weight: fc_matrix(cin, cin, rng),
                bias: Tensor::<T>::randn(Shape::new(1, cin, 1, 1), 0.1, rng).into_data(),
            },
            post_context: GlobalContextParams {
                weight: fc_matrix(cout, cout, rng),
                bias: Tensor::<T>::randn(Shape::new(1, cout, 1, 1), 0.1, rng).into_data(),
            },
        })
    }
}

impl<T: Element> ResidualParams<T> {
    /// Fan-out normal conv weights, identity batch norm, SE weights from a
    /// `1/sqrt(c)` normal.
    pub fn init<R: Rng + ?Sized>(plan: &BlockPlan, rng: &mut R) -> Result<Self> {
        plan.validate()?;
        let eps = T::from_f64_lossy(1e-5);
        let convs = plan
            .branch_convs()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k))| {
                let stride = if i == 0 { plan.stride } else { 1 };
                let rate = if k == 3 { plan.rate } else { 1 };
                let op = if plan.use_sac && i == plan.sac_index() {
                    ConvOp::Sac(SacParams::init(cin, cout, rate, rng)?)
                } else {
                    ConvOp::Conv(he_conv(cin, cout, k, stride, rate, rng)?)
                };
                Ok(PreActConv {
                    bn: BatchNormParams::identity(cin, eps),
                    op,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let se = plan.use_se.then(|| SeParams {
            weight: fc_matrix(plan.out_channels, plan.out_channels, rng),
            bias: None,
        });
        let shortcut = if plan.has_projection() {
            Some(he_conv(plan.in_channels, plan.out_channels, 1, plan.stride, 1, rng)?)
        } else {
            None
        };
        Ok(Self { convs, se, shortcut })
    }

    /// Visits every learnable tensor with a path relative to the block.
    pub fn visit_parameters(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        for (i, unit) in self.convs.iter().enumerate() {
            f(format!("{prefix}/conv{}/bn/gamma", i + 1), &unit.bn.gamma);
            f(format!("{prefix}/conv{}/bn/beta", i + 1), &unit.bn.beta);
            match &unit.op {
                ConvOp::Conv(k) => f(format!("{prefix}/conv{}/weight", i + 1), k.weight.data()),
                ConvOp::Sac(p) => {
                    let base = format!("{prefix}/conv{}/sac", i + 1);
                    f(format!("{base}/shared_weight"), p.shared_conv.weight.data());
                    f(format!("{base}/switch/weight"), p.switch.weight.data());
                    f(format!("{base}/switch/bias"), std::slice::from_ref(&p.switch.bias));
                    f(format!("{base}/pre_context/weight"), p.pre_context.weight.data());
                    f(format!("{base}/pre_context/bias"), &p.pre_context.bias);
                    f(format!("{base}/post_context/weight"), p.post_context.weight.data());
                    f(format!("{base}/post_context/bias"), &p.post_context.bias);
                }
            }
        }
        if let Some(se) = &self.se {
            f(format!("{prefix}/se/weight"), se.weight.data());
            if let Some(b) = &se.bias {
                f(format!("{prefix}/se/bias"), b);
            }
        }
        if let Some(k) = &self.shortcut {
            f(format!("{prefix}/shortcut/weight"), k.weight.data());
        }
    }
}
