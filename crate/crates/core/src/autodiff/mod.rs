//! Reverse-mode differentiation over the op set used by SE, SAC and
//! residual blocks, in double precision. This is a verification facility:
//! [`grad_check`] compares its gradients against central differences.

mod gradcheck;

pub use gradcheck::{check_op, grad_check, CheckedOp, GradCheckReport, KINK_MARGIN};

use crate::error::{Error, Result};
use crate::tensor::{
    activation, add, avg_pool2d, conv2d, conv2d_backward_input, conv2d_backward_weight,
    fully_connected, global_avg_pool, mul_broadcast, Activation, ConvKernel, Shape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub stride: usize,
    pub rate: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn dense(stride: usize, rate: usize) -> Self {
        Self { stride, rate, groups: 1 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    FullyConnected {
        z: Var,
        w: Var,
        bias: Option<Var>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    OneMinus {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor<f64>,
    op: Op,
}

/// Records values as ops are applied so gradients can be pulled back.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn bias_vec(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

/// Sums `g` over the axes where `target` has extent 1.
fn reduce_to(g: &Tensor<f64>, target: Shape) -> Tensor<f64> {
    if g.shape() == target {
        return g.clone();
    }
    let s = g.shape();
    let mut out = Tensor::zeros(target);
    let pick = |i: usize, d: usize| if d == 1 { 0 } else { i };
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let i = out.offset(
                        pick(n, target.n),
                        pick(c, target.c),
                        pick(y, target.h),
                        pick(x, target.w),
                    );
                    out.data_mut()[i] += g.at(n, c, y, x);
                }
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor<f64>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("tape node {} ({op:?})", self.nodes.len())));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<f64>) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let k = self.kernel(w, bias, geom)?;
        let y = conv2d(self.value(x), &k)?;
        self.push(y, Op::Conv { x, w, bias, geom })
    }

    fn kernel(&self, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<ConvKernel<f64>> {
        let mut k = ConvKernel::new(self.value(w).clone(), geom.stride, geom.rate)?;
        k.groups = geom.groups;
        k.validate()?;
        if let Some(b) = bias {
            k = k.with_bias(bias_vec(self.value(b)))?;
        }
        Ok(k)
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let y = avg_pool2d(self.value(x), window, stride, padding)?;
        self.push(y, Op::AvgPool { x, window, stride, padding })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(x))?;
        self.push(y, Op::GlobalAvgPool { x })
    }

    pub fn fully_connected(&mut self, z: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let b = bias.map(|b| bias_vec(self.value(b)));
        let y = fully_connected(self.value(z), self.value(w), b.as_deref())?;
        self.push(y, Op::FullyConnected { z, w, bias })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = activation(kind, self.value(x));
        self.push(y, Op::Act { x, kind })
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<Var> {
        let params = crate::tensor::BatchNormParams {
            mean: mean.clone(),
            var: var.clone(),
            gamma: bias_vec(self.value(gamma)),
            beta: bias_vec(self.value(beta)),
            eps,
        };
        let y = crate::tensor::batch_norm_inference(self.value(x), &params)?;
        self.push(y, Op::BatchNorm { x, gamma, beta, mean, var, eps })
    }

    /// `a + b` with `b` broadcast onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = add(self.value(a), self.value(b))?;
        self.push(y, Op::Add { a, b })
    }

    /// `a * b` with `b` broadcast onto `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = mul_broadcast(self.value(a), self.value(b))?;
        self.push(y, Op::Mul { a, b })
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| 1.0 - v);
        self.push(y, Op::OneMinus { x })
    }

    /// Smallest distance from any activation input on the tape to a kink of
    /// that activation; `f64::INFINITY` when there are none.
    pub fn min_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act { x, kind } => Some((x, kind)),
                _ => None,
            })
            .flat_map(|(x, kind)| {
                let vals = self.value(x).data();
                kind.kinks()
                    .iter()
                    .flat_map(move |&k| vals.iter().map(move |&v| (v - k).abs()))
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Gradients of `sum(output)` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        fn accumulate(grads: &mut [Option<Tensor<f64>>], v: Var, g: Tensor<f64>) -> Result<()> {
            grads[v.0] = Some(match grads[v.0].take() {
                Some(acc) => acc.zip_map(&g, |a, b| a + b)?,
                None => g,
            });
            Ok(())
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, bias, geom } => {
                    let k = self.kernel(*w, *bias, *geom)?;
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, conv2d_backward_input(&g, &k, xv.shape())?)?;
                    let (gw, gb) = conv2d_backward_weight(xv, &g, &k)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        let shape = self.value(*b).shape();
                        accumulate(&mut grads, *b, Tensor::new(shape, gb)?)?;
                    }
                }
                Op::AvgPool { x, window, stride, padding } => {
                    let xs = self.value(*x).shape();
                    let mut gx = Tensor::zeros(xs);
                    let gs = g.shape();
                    for n in 0..gs.n {
                        for c in 0..gs.c {
                            for oy in 0..gs.h {
                                let y0 = (oy * stride).saturating_sub(*padding);
                                let y1 = (oy * stride + window).saturating_sub(*padding).min(xs.h);
                                for ox in 0..gs.w {
                                    let x0 = (ox * stride).saturating_sub(*padding);
                                    let x1 = (ox * stride + window).saturating_sub(*padding).min(xs.w);
                                    let count = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                                    let share = g.at(n, c, oy, ox) / count;
                                    for yy in y0..y1 {
                                        for xx in x0..x1 {
                                            let j = gx.offset(n, c, yy, xx);
                                            gx.data_mut()[j] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape();
                    let count = xs.plane() as f64;
                    let gx = Tensor::from_fn(xs, |n, c, _, _| g.at(n, c, 0, 0) / count);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::FullyConnected { z, w, bias } => {
                    let zv = self.value(*z);
                    let wv = self.value(*w);
                    let (batch, cin, cout) = (zv.shape().n, zv.shape().c, wv.shape().n);
                    let gz = Tensor::from_fn(zv.shape(), |n, i, _, _| {
                        (0..cout).map(|o| wv.at(o, i, 0, 0) * g.at(n, o, 0, 0)).sum()
                    });
                    let gw = Tensor::from_fn(wv.shape(), |o, i, _, _| {
                        (0..batch).map(|n| g.at(n, o, 0, 0) * zv.at(n, i, 0, 0)).sum()
                    });
                    debug_assert_eq!(wv.shape().c, cin);
                    accumulate(&mut grads, *z, gz)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let Some(b) = bias {
                        let bs = self.value(*b).shape();
                        let gb = Tensor::new(
                            bs,
                            (0..cout).map(|o| (0..batch).map(|n| g.at(n, o, 0, 0)).sum()).collect(),
                        )?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Act { x, kind } => {
                    let gx = self.value(*x).zip_map(&g, |v, gv| gv * kind.derivative(v))?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let s = xv.shape();
                    let denom: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
                    let gx = Tensor::from_fn(s, |n, c, y, xx| g.at(n, c, y, xx) * gam[c] / denom[c]);
                    let mut ggamma = vec![0.0; s.c];
                    let mut gbeta = vec![0.0; s.c];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for (xv, gv) in xv.plane(n, c).iter().zip(g.plane(n, c)) {
                                ggamma[c] += gv * (xv - mean[c]) / denom[c];
                                gbeta[c] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    let gs = self.value(*gamma).shape();
                    accumulate(&mut grads, *gamma, Tensor::new(gs, ggamma)?)?;
                    let bs = self.value(*beta).shape();
                    accumulate(&mut grads, *beta, Tensor::new(bs, gbeta)?)?;
                }
                Op::Add { a, b } => {
                    let bs = self.value(*b).shape();
                    accumulate(&mut grads, *b, reduce_to(&g, bs))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = mul_broadcast(&g, bv)?;
                    let gb = reduce_to(&g.zip_map(av, |x, y| x * y)?, bv.shape());
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::OneMinus { x } => {
                    accumulate(&mut grads, *x, g.map(|v| -v))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the output does not depend on it.
    pub fn of(&self, tape: &Tape, v: Var) -> Tensor<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_sum_of_leaf_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(Shape::new(1, 2, 2, 2), 3.0)).unwrap();
        let g = t.backward(x).unwrap();
        assert!(g.of(&t, x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reused_variable_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(Shape::new(1, 1, 1, 3), 2.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.of(&t, x).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let a = t.leaf(Tensor::randn(Shape::new(2, 3, 2, 2), 1.0, &mut r)).unwrap();
        let b = t.leaf(Tensor::randn(Shape::new(2, 1, 2, 2), 1.0, &mut r)).unwrap();
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        let gb = g.of(&t, b);
        assert_eq!(gb.shape(), Shape::new(2, 1, 2, 2));
        let av = t.value(a);
        for n in 0..2 {
            for i in 0..4 {
                let expect: f64 = (0..3).map(|c| av.plane(n, c)[i]).sum();
                assert!((gb.plane(n, 0)[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(Shape::new(1, 1, 1, 1), f64::NAN));
        assert!(matches!(x, Err(Error::NonFinite(_))));
    }

    #[test]
    fn kink_distance() {
        let mut t = Tape::new();
        let x = t
            .leaf(Tensor::from_vec([1, 1, 1, 3], vec![-2.5, 0.4, 2.95]).unwrap())
            .unwrap();
        t.activation(x, Activation::HardSigmoid).unwrap();
        assert!((t.min_kink_distance() - 0.05).abs() < 1e-12);
    }
}
