//! Instantiated networks and Panoptic-DeepLab style inference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchPlan, AsppPlan, DecoderPlan, StageKind};
use crate::blocks::{residual_block, ResidualParams};
use crate::error::{Error, Result};
use crate::tensor::{
    activation, batch_norm_inference, bilinear_resize, concat_channels, conv2d, global_avg_pool,
    Activation, BatchNormParams, ConvKernel, Shape, Tensor,
};

const BN_EPS: f32 = 1e-5;

/// `conv -> BN -> ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvKernel<f32>,
    pub bn: BatchNormParams<f32>,
}

impl ConvBn {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let y = batch_norm_inference(&conv2d(x, &self.conv)?, &self.bn)?;
        Ok(activation(Activation::Relu, &y))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f32])) {
        f(format!("{prefix}/weight"), self.conv.weight.data());
        f(format!("{prefix}/bn/gamma"), &self.bn.gamma);
        f(format!("{prefix}/bn/beta"), &self.bn.beta);
    }
}

/// A head conv, dense or depthwise + pointwise.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadConv {
    Dense(ConvBn),
    Separable { depthwise: ConvBn, pointwise: ConvBn },
}

impl HeadConv {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            HeadConv::Dense(c) => c.apply(x),
            HeadConv::Separable { depthwise, pointwise } => pointwise.apply(&depthwise.apply(x)?),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f32])) {
        match self {
            HeadConv::Dense(c) => c.visit(prefix, f),
            HeadConv::Separable { depthwise, pointwise } => {
                depthwise.visit(&format!("{prefix}/depthwise"), f);
                pointwise.visit(&format!("{prefix}/pointwise"), f);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aspp {
    /// The 1x1 branch followed by one branch per atrous rate.
    pub branches: Vec<HeadConv>,
    pub pool: ConvBn,
    pub project: ConvBn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skip {
    pub project: ConvBn,
    pub fuse: HeadConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    pub conv: HeadConv,
    /// 1x1 with bias.
    pub classifier: ConvKernel<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub aspp: Aspp,
    pub skips: Vec<Skip>,
    pub heads: Vec<OutputHead>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub plan: ArchPlan,
    pub seed: u64,
    pub stem: Vec<ConvBn>,
    /// Residual blocks of conv2..conv6.
    pub stages: Vec<Vec<ResidualParams<f32>>>,
    /// Closes the pre-activation backbone.
    pub final_bn: BatchNormParams<f32>,
    pub semantic: Decoder,
    pub instance: Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub semantic_logits: Tensor,
    /// Sigmoid scores in `[0, 1]`.
    pub center_heatmap: Tensor,
    /// `(dy, dx)` in pixels.
    pub offsets: Tensor,
}

impl NetworkOutputs {
    /// Per-pixel argmax of the semantic logits for batch item `n`; ties go
    /// to the smaller class.
    pub fn semantic_classes(&self, n: usize) -> Vec<usize> {
        let s = self.semantic_logits.shape();
        let mut best = vec![0usize; s.plane()];
        let mut score = self.semantic_logits.plane(n, 0).to_vec();
        for c in 1..s.c {
            for (i, &v) in self.semantic_logits.plane(n, c).iter().enumerate() {
                if v > score[i] {
                    score[i] = v;
                    best[i] = c;
                }
            }
        }
        best
    }
}

fn he_weight<R: Rng + ?Sized>(shape: Shape, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_out as f64).sqrt(), rng)
}

fn conv_bn<R: Rng + ?Sized>(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    rate: usize,
    rng: &mut R,
) -> Result<ConvBn> {
    let w = he_weight(Shape::new(cout, cin, k, k), cout * k * k, rng);
    Ok(ConvBn {
        conv: ConvKernel::new(w, stride, rate)?,
        bn: BatchNormParams::identity(cout, BN_EPS),
    })
}

fn head_conv<R: Rng + ?Sized>(
    cin: usize,
    cout: usize,
    k: usize,
    rate: usize,
    separable: bool,
    rng: &mut R,
) -> Result<HeadConv> {
    if !separable || k == 1 {
        return Ok(HeadConv::Dense(conv_bn(cin, cout, k, 1, rate, rng)?));
    }
    let dw = he_weight(Shape::new(cin, 1, k, k), k * k, rng);
    Ok(HeadConv::Separable {
        depthwise: ConvBn {
            conv: ConvKernel::depthwise(dw, 1, rate)?,
            bn: BatchNormParams::identity(cin, BN_EPS),
        },
        pointwise: conv_bn(cin, cout, 1, 1, 1, rng)?,
    })
}

fn init_aspp<R: Rng + ?Sized>(p: &AsppPlan, sep: bool, rng: &mut R) -> Result<Aspp> {
    let mut branches = vec![head_conv(p.in_channels, p.channels, 1, 1, false, rng)?];
    for &r in &p.rates {
        branches.push(head_conv(p.in_channels, p.channels, 3, r, sep, rng)?);
    }
    Ok(Aspp {
        branches,
        pool: conv_bn(p.in_channels, p.channels, 1, 1, 1, rng)?,
        project: conv_bn(p.channels * p.branches(), p.channels, 1, 1, 1, rng)?,
    })
}

fn init_decoder<R: Rng + ?Sized>(p: &DecoderPlan, sep: bool, k: usize, rng: &mut R) -> Result<Decoder> {
    let aspp = init_aspp(&p.aspp, sep, rng)?;
    let mut prev = p.aspp.channels;
    let mut skips = Vec::with_capacity(p.skips.len());
    for s in &p.skips {
        skips.push(Skip {
            project: conv_bn(s.in_channels, s.project_channels, 1, 1, 1, rng)?,
            fuse: head_conv(prev + s.project_channels, s.fuse_channels, k, 1, sep, rng)?,
        });
        prev = s.fuse_channels;
    }
    let heads = p
        .heads
        .iter()
        .map(|h| {
            let conv = head_conv(h.in_channels, h.mid_channels, k, 1, sep, rng)?;
            let w = he_weight(Shape::new(h.out_channels, h.mid_channels, 1, 1), h.out_channels, rng);
            let classifier = ConvKernel::new(w, 1, 1)?.with_bias(vec![0.0; h.out_channels])?;
            Ok(OutputHead { conv, classifier })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decoder { aspp, skips, heads })
}

/// Builds parameters for `plan` from a ChaCha8 stream seeded with `seed`.
/// Conv weights are fan-out normal, batch norms are identity.
pub fn instantiate(plan: &ArchPlan, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_plan = &plan.stages[0];
    if stem_plan.kind != StageKind::Stem {
        return Err(Error::contract("first stage must be the stem"));
    }
    let stem = stem_plan
        .convs
        .iter()
        .map(|c| conv_bn(c.in_channels, c.out_channels, 3, c.stride, 1, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let stages = plan.stages[1..]
        .iter()
        .map(|s| s.blocks.iter().map(|b| ResidualParams::init(b, &mut rng)).collect())
        .collect::<Result<Vec<_>>>()?;
    let last = plan.stages.last().expect("plan has stages").out_channels;
    let sep = plan.head.sep_conv;
    let k = plan.head.head_kernel;
    Ok(Network {
        plan: plan.clone(),
        seed,
        stem,
        stages,
        final_bn: BatchNormParams::identity(last, BN_EPS),
        semantic: init_decoder(&plan.head.semantic, sep, k, &mut rng)?,
        instance: init_decoder(&plan.head.instance, sep, k, &mut rng)?,
    })
}

fn aspp_forward(a: &Aspp, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let mut parts = a.branches.iter().map(|b| b.apply(x)).collect::<Result<Vec<_>>>()?;
    let pooled = a.pool.apply(&global_avg_pool(x)?)?;
    parts.push(bilinear_resize(&pooled, s.h, s.w)?);
    let refs: Vec<&Tensor> = parts.iter().collect();
    a.project.apply(&concat_channels(&refs)?)
}

impl Network {
    /// Stage outputs conv1..conv6; the last one passes through the final
    /// BN + ReLU.
    pub fn backbone(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::contract(format!("network input needs 3 channels, got {}", s.c)));
        }
        self.plan.check_input(s.h, s.w)?;
        let mut y = x.clone();
        for c in &self.stem {
            y = c.apply(&y)?;
        }
        let mut feats = vec![y.clone()];
        for (stage, params) in self.plan.stages[1..].iter().zip(&self.stages) {
            for (b, p) in stage.blocks.iter().zip(params) {
                y = residual_block(&y, b, p)?;
            }
            feats.push(y.clone());
        }
        let top = feats.last_mut().expect("six stages");
        *top = activation(Activation::Relu, &batch_norm_inference(top, &self.final_bn)?);
        Ok(feats)
    }

    fn decode(&self, d: &Decoder, p: &DecoderPlan, feats: &[Tensor], h: usize, w: usize) -> Result<Vec<Tensor>> {
        let mut y = aspp_forward(&d.aspp, feats.last().expect("six stages"))?;
        for (skip, sp) in d.skips.iter().zip(&p.skips) {
            let idx = self
                .plan
                .stages
                .iter()
                .position(|s| s.name == sp.stage)
                .ok_or_else(|| Error::contract(format!("skip stage {} not in plan", sp.stage)))?;
            let f = &feats[idx];
            let proj = skip.project.apply(f)?;
            let up = bilinear_resize(&y, f.shape().h, f.shape().w)?;
            y = skip.fuse.apply(&concat_channels(&[&up, &proj])?)?;
        }
        d.heads
            .iter()
            .map(|head| {
                let z = conv2d(&head.conv.apply(&y)?, &head.classifier)?;
                bilinear_resize(&z, h, w)
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<NetworkOutputs> {
        let feats = self.backbone(x)?;
        let s = x.shape();
        let mut sem = self.decode(&self.semantic, &self.plan.head.semantic, &feats, s.h, s.w)?;
        let mut ins = self.decode(&self.instance, &self.plan.head.instance, &feats, s.h, s.w)?;
        let offsets = ins.pop().expect("offset head");
        let center = activation(Activation::Sigmoid, &ins.pop().expect("center head"));
        Ok(NetworkOutputs {
            semantic_logits: sem.pop().expect("semantic head"),
            center_heatmap: center,
            offsets,
        })
    }

    /// Visits every learnable tensor in a fixed order with its layer path.
    pub fn visit_parameters(&self, f: &mut dyn FnMut(String, &[f32])) {
        for (i, c) in self.stem.iter().enumerate() {
            c.visit(&format!("backbone/conv1/conv{}", i + 1), f);
        }
        for (stage, params) in self.plan.stages[1..].iter().zip(&self.stages) {
            for (j, p) in params.iter().enumerate() {
                p.visit_parameters(&format!("backbone/{}/block{}", stage.name, j + 1), f);
            }
        }
        f("backbone/final_bn/gamma".into(), &self.final_bn.gamma);
        f("backbone/final_bn/beta".into(), &self.final_bn.beta);
        for (name, d) in [("semantic", &self.semantic), ("instance", &self.instance)] {
            let base = format!("head/{name}");
            for (i, b) in d.aspp.branches.iter().enumerate() {
                b.visit(&format!("{base}/aspp/branch{}", i + 1), f);
            }
            d.aspp.pool.visit(&format!("{base}/aspp/pool"), f);
            d.aspp.project.visit(&format!("{base}/aspp/project"), f);
            for (i, s) in d.skips.iter().enumerate() {
                s.project.visit(&format!("{base}/skip{}/project", i + 1), f);
                s.fuse.visit(&format!("{base}/skip{}/fuse", i + 1), f);
            }
            let plan = if name == "semantic" { &self.plan.head.semantic } else { &self.plan.head.instance };
            for (h, hp) in d.heads.iter().zip(&plan.heads) {
                h.conv.visit(&format!("{base}/{}/conv", hp.name), f);
                f(format!("{base}/{}/classifier/weight", hp.name), h.classifier.weight.data());
                if let Some(b) = &h.classifier.bias {
                    f(format!("{base}/{}/classifier/bias", hp.name), b);
                }
            }
        }
    }

    /// Parameter tensors keyed by layer path.
    pub fn parameter_store(&self) -> BTreeMap<String, Vec<f32>> {
        let mut m = BTreeMap::new();
        self.visit_parameters(&mut |k, v| {
            let prev = m.insert(k.clone(), v.to_vec());
            debug_assert!(prev.is_none(), "duplicate parameter path {k}");
        });
        m
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_parameters(&mut |_, v| n += v.len());
        n
    }

    /// Sets every conv and FC weight (and bias) to zero; batch norms keep
    /// their statistics.
    pub fn zero_weights(&mut self) {
        fn zero_conv(k: &mut ConvKernel<f32>) {
            k.weight.data_mut().fill(0.0);
            if let Some(b) = &mut k.bias {
                b.fill(0.0);
            }
        }
        fn zero_head(h: &mut HeadConv) {
            match h {
                HeadConv::Dense(c) => zero_conv(&mut c.conv),
                HeadConv::Separable { depthwise, pointwise } => {
                    zero_conv(&mut depthwise.conv);
                    zero_conv(&mut pointwise.conv);
                }
            }
        }
        for c in &mut self.stem {
            zero_conv(&mut c.conv);
        }
        for p in self.stages.iter_mut().flatten() {
            for unit in &mut p.convs {
                match &mut unit.op {
                    crate::blocks::ConvOp::Conv(k) => zero_conv(k),
                    crate::blocks::ConvOp::Sac(s) => {
                        zero_conv(&mut s.shared_conv);
                        s.switch.weight.data_mut().fill(0.0);
                        s.switch.bias = 0.0;
                        s.pre_context.weight.data_mut().fill(0.0);
                        s.pre_context.bias.fill(0.0);
                        s.post_context.weight.data_mut().fill(0.0);
                        s.post_context.bias.fill(0.0);
                    }
                }
            }
            if let Some(se) = &mut p.se {
                se.weight.data_mut().fill(0.0);
            }
            if let Some(k) = &mut p.shortcut {
                zero_conv(k);
            }
        }
        for d in [&mut self.semantic, &mut self.instance] {
            d.aspp.branches.iter_mut().for_each(zero_head);
            zero_conv(&mut d.aspp.pool.conv);
            zero_conv(&mut d.aspp.project.conv);
            for s in &mut d.skips {
                zero_conv(&mut s.project.conv);
                zero_head(&mut s.fuse);
            }
            for h in &mut d.heads {
                zero_head(&mut h.conv);
                zero_conv(&mut h.classifier);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_plan, ArchSpec, StageLayout};
    use rand_chacha::ChaCha8Rng;

    fn small(w1: f64, w2: f64, l: f64) -> ArchPlan {
        build_plan(&ArchSpec::new(w1, w2, l).with_num_classes(5).with_channel_cap(Some(16))).unwrap()
    }

    fn input(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::randn(Shape::new(1, 3, h, w), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn output_contract() {
        let plan = build_plan(&ArchSpec::new(0.25, 0.25, 0.35).with_num_classes(5)).unwrap();
        let net = instantiate(&plan, 0).unwrap();
        let out = net.forward(&input(65, 65, 1)).unwrap();
        assert_eq!(out.semantic_logits.shape(), Shape::new(1, 5, 65, 65));
        assert_eq!(out.center_heatmap.shape(), Shape::new(1, 1, 65, 65));
        assert_eq!(out.offsets.shape(), Shape::new(1, 2, 65, 65));
        assert!(out.center_heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.semantic_logits.is_finite() && out.offsets.is_finite());
    }

    #[test]
    fn stage_sizes_match_forward() {
        for layout in [StageLayout::Wr41, StageLayout::ThreeConvStem] {
            let plan = build_plan(
                &ArchSpec::new(0.25, 0.25, 0.35).with_channel_cap(Some(8)).with_layout(layout),
            )
            .unwrap();
            let net = instantiate(&plan, 3).unwrap();
            let feats = net.backbone(&input(65, 65, 2)).unwrap();
            let got: Vec<(usize, usize)> = feats.iter().map(|t| (t.shape().h, t.shape().w)).collect();
            assert_eq!(got, plan.stage_sizes(65, 65));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let plan = small(0.25, 0.35, 1.0);
        let a = instantiate(&plan, 7).unwrap();
        let b = instantiate(&plan, 7).unwrap();
        let c = instantiate(&plan, 8).unwrap();
        assert_eq!(a.parameter_store(), b.parameter_store());
        let (sa, sc) = (a.parameter_store(), c.parameter_store());
        assert_ne!(sa, sc);
        assert!(sa.iter().zip(&sc).all(|((ka, va), (kc, vc))| ka == kc && va.len() == vc.len()));
    }

    #[test]
    fn zero_weights_tie_to_class_zero() {
        let plan = small(0.25, 0.25, 0.35);
        let mut net = instantiate(&plan, 0).unwrap();
        net.zero_weights();
        let out = net.forward(&input(33, 33, 4)).unwrap();
        let first = out.semantic_logits.data()[0];
        assert!(out.semantic_logits.data().iter().all(|&v| v == first));
        assert!(out.semantic_classes(0).iter().all(|&c| c == 0));
    }

    #[test]
    fn rejects_small_or_wrong_inputs() {
        let net = instantiate(&small(0.25, 0.25, 0.35), 0).unwrap();
        assert!(net.forward(&input(32, 65, 0)).is_err());
        assert!(net.forward(&Tensor::zeros(Shape::new(1, 1, 65, 65))).is_err());
    }

    #[test]
    fn separable_head_runs() {
        let plan = build_plan(
            &ArchSpec::new(0.25, 0.25, 0.35)
                .with_sep_conv_head(true)
                .with_num_classes(3)
                .with_channel_cap(Some(16)),
        )
        .unwrap();
        let net = instantiate(&plan, 1).unwrap();
        let out = net.forward(&input(49, 57, 5)).unwrap();
        assert_eq!(out.semantic_logits.shape(), Shape::new(1, 3, 49, 57));
        assert!(net.parameter_store().keys().any(|k| k.contains("depthwise")));
    }
}
