//! Minimal reverse-mode autodiff over dynamic-dimensional arrays.
//!
//! A [`Tape`] is an append-only arena of nodes created in SSA order; calling
//! [`Tape::backward`] walks the arena in reverse and accumulates gradients
//! into every node that requires them. The op set is exactly what the
//! segmentation network and the loss graph need, nothing more.
//!
//! Every reduction accumulates in a fixed sequential order, so gradients and
//! outputs are bit-reproducible across runs and thread counts.

pub mod kernels;

use crate::scalar::Real;
use kernels::*;
use ndarray::{Array1, ArrayD, Axis, Ix1, Ix2, Ix4, Ix5, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op<T: Real> {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: [usize; 3],
        dilation: [usize; 3],
        padding: [usize; 3],
    },
    ConvT3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        size: usize,
    },
    MaxPool3d {
        x: usize,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    ChannelScale {
        x: usize,
        g: usize,
    },
    ConcatC {
        a: usize,
        b: usize,
        split: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Square {
        x: usize,
    },
    /// Elementwise multiply by a constant array (not a tape node).
    MulData {
        x: usize,
        k: ArrayD<T>,
    },
    SumAll {
        x: usize,
    },
    AddC {
        x: usize,
    },
    MulC {
        x: usize,
        c: T,
    },
    /// `c - x`.
    SubFromC {
        x: usize,
    },
    /// Scalar (0-d) division `num / den`.
    DivVar {
        num: usize,
        den: usize,
    },
    /// Elementwise product of two same-shape nodes.
    MulVar {
        a: usize,
        b: usize,
    },
}

struct Node<T: Real> {
    data: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: ArrayD<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            data,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Adds a leaf holding `data`; gradients accumulate into it when
    /// `needs_grad` is set.
    pub fn leaf(&mut self, data: ArrayD<T>, needs_grad: bool) -> Var {
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        self.push(data, needs_grad, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> T {
        *self.nodes[v.0]
            .data
            .iter()
            .next()
            .expect("scalar node is empty")
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        dilation: [usize; 3],
        padding: [usize; 3],
    ) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let wd = self.nodes[w.0].data.view().into_dimensionality::<Ix5>().unwrap();
        let bd = b.map(|bv| {
            self.nodes[bv.0]
                .data
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
        });
        let y = conv3d_forward(xd, wd, bd, stride, dilation, padding);
        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let needs = self.needs(&parents);
        self.push(
            y.into_dyn(),
            needs,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                dilation,
                padding,
            },
        )
    }

    pub fn convt3d(&mut self, x: Var, w: Var, b: Option<Var>, size: usize) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let wd = self.nodes[w.0].data.view().into_dimensionality::<Ix5>().unwrap();
        let bd = b.map(|bv| {
            self.nodes[bv.0]
                .data
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
        });
        let y = convt3d_forward(xd, wd, bd, size);
        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let needs = self.needs(&parents);
        self.push(
            y.into_dyn(),
            needs,
            Op::ConvT3d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                size,
            },
        )
    }

    pub fn maxpool3d(&mut self, x: Var, size: usize) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let (y, argmax) = maxpool3d_forward(xd, size);
        let needs = self.needs(&[x.0]);
        self.push(y.into_dyn(), needs, Op::MaxPool3d { x: x.0, argmax })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let gd = self.nodes[gamma.0]
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let bd = self.nodes[beta.0]
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let (y, mean, inv_std) = instance_norm_forward(xd, gd, bd, eps);
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        self.push(
            y.into_dyn(),
            needs,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0]
            .data
            .mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].data.mapv(sigmoid);
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::Sigmoid { x: x.0 })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let y = global_avg_pool(xd);
        let needs = self.needs(&[x.0]);
        self.push(y.into_dyn(), needs, Op::GlobalAvgPool { x: x.0 })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix1>().unwrap();
        let wd = self.nodes[w.0].data.view().into_dimensionality::<Ix2>().unwrap();
        let bd = self.nodes[b.0].data.view().into_dimensionality::<Ix1>().unwrap();
        let y = linear_forward(xd, wd, bd);
        let needs = self.needs(&[x.0, w.0, b.0]);
        self.push(
            y.into_dyn(),
            needs,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    /// Scales each channel of `x` (`[C,D,H,W]`) by the matching gate in `g` (`[C]`).
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Var {
        let xd = self.nodes[x.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let gd = self.nodes[g.0].data.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xd.to_owned();
        for (c, mut yc) in y.axis_iter_mut(Axis(0)).enumerate() {
            let gv = gd[c];
            yc.mapv_inplace(|v| v * gv);
        }
        let needs = self.needs(&[x.0, g.0]);
        self.push(y.into_dyn(), needs, Op::ChannelScale { x: x.0, g: g.0 })
    }

    /// Concatenates along the channel axis (axis 0).
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let ad = self.nodes[a.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let bd = self.nodes[b.0].data.view().into_dimensionality::<Ix4>().unwrap();
        let split = ad.dim().0;
        let y = ndarray::concatenate(Axis(0), &[ad, bd]).expect("concat shape mismatch");
        let y = y.as_standard_layout().to_owned();
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            y.into_dyn(),
            needs,
            Op::ConcatC {
                a: a.0,
                b: b.0,
                split,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].data + &self.nodes[b.0].data;
        let needs = self.needs(&[a.0, b.0]);
        self.push(y, needs, Op::Add { a: a.0, b: b.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].data.mapv(|v| v * v);
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::Square { x: x.0 })
    }

    /// Elementwise multiply by a constant array.
    pub fn mul_data(&mut self, x: Var, k: ArrayD<T>) -> Var {
        let y = &self.nodes[x.0].data * &k;
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::MulData { x: x.0, k })
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |a, &v| a + v);
        let needs = self.needs(&[x.0]);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            needs,
            Op::SumAll { x: x.0 },
        )
    }

    pub fn add_c(&mut self, x: Var, c: T) -> Var {
        let y = self.nodes[x.0].data.mapv(|v| v + c);
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::AddC { x: x.0 })
    }

    pub fn mul_c(&mut self, x: Var, c: T) -> Var {
        let y = self.nodes[x.0].data.mapv(|v| v * c);
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::MulC { x: x.0, c })
    }

    /// `c - x`.
    pub fn sub_from_c(&mut self, x: Var, c: T) -> Var {
        let y = self.nodes[x.0].data.mapv(|v| c - v);
        let needs = self.needs(&[x.0]);
        self.push(y, needs, Op::SubFromC { x: x.0 })
    }

    /// Scalar division of 0-d nodes.
    pub fn div_var(&mut self, num: Var, den: Var) -> Var {
        let y = self.scalar(num) / self.scalar(den);
        let needs = self.needs(&[num.0, den.0]);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), y),
            needs,
            Op::DivVar {
                num: num.0,
                den: den.0,
            },
        )
    }

    /// Elementwise product of same-shape nodes.
    pub fn mul_var(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].data * &self.nodes[b.0].data;
        let needs = self.needs(&[a.0, b.0]);
        self.push(y, needs, Op::MulVar { a: a.0, b: b.0 })
    }

    fn accumulate(&mut self, id: usize, delta: ArrayD<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Backpropagates from a 0-d output node, seeding with 1.
    pub fn backward(&mut self, out: Var) {
        let seed = ArrayD::from_elem(self.nodes[out.0].data.raw_dim(), T::one());
        self.backward_with(out, seed);
    }

    /// Backpropagates from `out`, seeding its gradient with `seed`.
    pub fn backward_with(&mut self, out: Var, seed: ArrayD<T>) {
        assert_eq!(
            seed.shape(),
            self.nodes[out.0].data.shape(),
            "seed shape mismatch"
        );
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = self.nodes[i].grad.clone().unwrap();
            let mut deltas: Vec<(usize, ArrayD<T>)> = Vec::new();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv3d {
                    x,
                    w,
                    b,
                    stride,
                    dilation,
                    padding,
                } => {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix4>().unwrap();
                    let wd = self.nodes[*w].data.view().into_dimensionality::<Ix5>().unwrap();
                    if self.nodes[*x].needs_grad {
                        let dx = conv3d_backward_input(
                            dy4, wd, xd.dim(), *stride, *dilation, *padding,
                        );
                        deltas.push((*x, dx.into_dyn()));
                    }
                    if self.nodes[*w].needs_grad {
                        let dw = conv3d_backward_weight(
                            dy4, xd, wd.dim(), *stride, *dilation, *padding,
                        );
                        deltas.push((*w, dw.into_dyn()));
                    }
                    if let Some(bi) = b {
                        if self.nodes[*bi].needs_grad {
                            deltas.push((*bi, channel_sums(dy4).into_dyn()));
                        }
                    }
                }
                Op::ConvT3d { x, w, b, size } => {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix4>().unwrap();
                    let wd = self.nodes[*w].data.view().into_dimensionality::<Ix5>().unwrap();
                    if self.nodes[*x].needs_grad {
                        let dx = convt3d_backward_input(dy4, wd, xd.dim(), *size);
                        deltas.push((*x, dx.into_dyn()));
                    }
                    if self.nodes[*w].needs_grad {
                        let dw = convt3d_backward_weight(dy4, xd, *size);
                        deltas.push((*w, dw.into_dyn()));
                    }
                    if let Some(bi) = b {
                        if self.nodes[*bi].needs_grad {
                            deltas.push((*bi, channel_sums(dy4).into_dyn()));
                        }
                    }
                }
                Op::MaxPool3d { x, argmax } => {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = maxpool3d_backward(dy4, argmax, xd.dim());
                    deltas.push((*x, dx.into_dyn()));
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix4>().unwrap();
                    let gd = self.nodes[*gamma]
                        .data
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let (dx, dgamma, dbeta) = instance_norm_backward(dy4, xd, gd, mean, inv_std);
                    if self.nodes[*x].needs_grad {
                        deltas.push((*x, dx.into_dyn()));
                    }
                    if self.nodes[*gamma].needs_grad {
                        deltas.push((*gamma, dgamma.into_dyn()));
                    }
                    if self.nodes[*beta].needs_grad {
                        deltas.push((*beta, dbeta.into_dyn()));
                    }
                }
                Op::Relu { x } => {
                    let xd = &self.nodes[*x].data;
                    let mut dx = dy.clone();
                    ndarray::Zip::from(&mut dx).and(xd).for_each(|g, &xv| {
                        if xv <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    deltas.push((*x, dx));
                }
                Op::Sigmoid { x } => {
                    let yd = &self.nodes[i].data;
                    let mut dx = dy.clone();
                    ndarray::Zip::from(&mut dx).and(yd).for_each(|g, &yv| {
                        *g = *g * yv * (T::one() - yv);
                    });
                    deltas.push((*x, dx));
                }
                Op::GlobalAvgPool { x } => {
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix4>().unwrap();
                    let (c_n, d_, h_, w_) = xd.dim();
                    let n = T::of((d_ * h_ * w_) as f64);
                    let dy1 = dy.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dx = ndarray::Array4::<T>::zeros(xd.dim());
                    for c in 0..c_n {
                        let gv = dy1[c] / n;
                        dx.index_axis_mut(Axis(0), c).fill(gv);
                    }
                    deltas.push((*x, dx.into_dyn()));
                }
                Op::Linear { x, w, b } => {
                    let dy1 = dy.view().into_dimensionality::<Ix1>().unwrap();
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix1>().unwrap();
                    let wd = self.nodes[*w].data.view().into_dimensionality::<Ix2>().unwrap();
                    let (dx, dw, db) = linear_backward(dy1, xd, wd);
                    if self.nodes[*x].needs_grad {
                        deltas.push((*x, dx.into_dyn()));
                    }
                    if self.nodes[*w].needs_grad {
                        deltas.push((*w, dw.into_dyn()));
                    }
                    if self.nodes[*b].needs_grad {
                        deltas.push((*b, db.into_dyn()));
                    }
                }
                Op::ChannelScale { x, g } => {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xd = self.nodes[*x].data.view().into_dimensionality::<Ix4>().unwrap();
                    let gd = self.nodes[*g].data.view().into_dimensionality::<Ix1>().unwrap();
                    if self.nodes[*x].needs_grad {
                        let mut dx = dy4.to_owned();
                        for (c, mut dc) in dx.axis_iter_mut(Axis(0)).enumerate() {
                            let gv = gd[c];
                            dc.mapv_inplace(|v| v * gv);
                        }
                        deltas.push((*x, dx.into_dyn()));
                    }
                    if self.nodes[*g].needs_grad {
                        let c_n = xd.dim().0;
                        let mut dg = Array1::<T>::zeros(c_n);
                        for c in 0..c_n {
                            let s = ndarray::Zip::from(&dy4.index_axis(Axis(0), c))
                                .and(&xd.index_axis(Axis(0), c))
                                .fold(T::zero(), |a, &g1, &x1| a + g1 * x1);
                            dg[c] = s;
                        }
                        deltas.push((*g, dg.into_dyn()));
                    }
                }
                Op::ConcatC { a, b, split } => {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let da = dy4.slice(ndarray::s![..*split, .., .., ..]).to_owned();
                    let db = dy4.slice(ndarray::s![*split.., .., .., ..]).to_owned();
                    if self.nodes[*a].needs_grad {
                        deltas.push((*a, da.into_dyn()));
                    }
                    if self.nodes[*b].needs_grad {
                        deltas.push((*b, db.into_dyn()));
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].needs_grad {
                        deltas.push((*a, dy.clone()));
                    }
                    if self.nodes[*b].needs_grad {
                        deltas.push((*b, dy.clone()));
                    }
                }
                Op::Square { x } => {
                    let xd = &self.nodes[*x].data;
                    let two = T::of(2.0);
                    let mut dx = dy.clone();
                    ndarray::Zip::from(&mut dx).and(xd).for_each(|g, &xv| {
                        *g = *g * two * xv;
                    });
                    deltas.push((*x, dx));
                }
                Op::MulData { x, k } => {
                    let dx = &dy * k;
                    deltas.push((*x, dx));
                }
                Op::SumAll { x } => {
                    let gv = *dy.iter().next().unwrap();
                    let dx = ArrayD::from_elem(self.nodes[*x].data.raw_dim(), gv);
                    deltas.push((*x, dx));
                }
                Op::AddC { x } => {
                    deltas.push((*x, dy.clone()));
                }
                Op::MulC { x, c } => {
                    deltas.push((*x, dy.mapv(|g| g * *c)));
                }
                Op::SubFromC { x } => {
                    deltas.push((*x, dy.mapv(|g| -g)));
                }
                Op::DivVar { num, den } => {
                    let gv = *dy.iter().next().unwrap();
                    let nv = *self.nodes[*num].data.iter().next().unwrap();
                    let dv = *self.nodes[*den].data.iter().next().unwrap();
                    if self.nodes[*num].needs_grad {
                        deltas.push((*num, ArrayD::from_elem(IxDyn(&[]), gv / dv)));
                    }
                    if self.nodes[*den].needs_grad {
                        deltas.push((
                            *den,
                            ArrayD::from_elem(IxDyn(&[]), -gv * nv / (dv * dv)),
                        ));
                    }
                }
                Op::MulVar { a, b } => {
                    if self.nodes[*a].needs_grad {
                        deltas.push((*a, &dy * &self.nodes[*b].data));
                    }
                    if self.nodes[*b].needs_grad {
                        deltas.push((*b, &dy * &self.nodes[*a].data));
                    }
                }
            }
            for (id, delta) in deltas {
                self.accumulate(id, delta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randd(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of an arbitrary tape-built scalar function.
    fn check_grads(
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
        x0: ArrayD<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        assert_eq!(tape.data(y).ndim(), 0, "test function must produce scalar");
        tape.backward(y);
        let g = tape.grad(x).unwrap().clone();
        let f = |xv: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone(), false);
            let y = build(&mut t, x);
            t.scalar(y)
        };
        let h = 1e-5;
        let flat: Vec<usize> = (0..x0.len()).step_by((x0.len() / 7).max(1)).collect();
        for fi in flat {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[fi] += h;
            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[fi] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let got = g.as_slice().unwrap()[fi];
            assert!(
                (fd - got).abs() <= tol * fd.abs().max(got.abs()).max(1.0),
                "flat {fi}: fd {fd} vs ad {got}"
            );
        }
    }

    #[test]
    fn composite_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let w1 = randd(&mut rng, &[3, 2, 3, 3, 3]);
        let b1 = randd(&mut rng, &[3]);
        let gamma = ArrayD::from_elem(IxDyn(&[3]), 1.0);
        let beta = ArrayD::from_elem(IxDyn(&[3]), 0.1);
        let wt = randd(&mut rng, &[3, 2, 2, 2, 2]);
        let x0 = randd(&mut rng, &[2, 4, 4, 4]);
        check_grads(
            |t, x| {
                let w1 = t.leaf(w1.clone(), false);
                let b1 = t.leaf(b1.clone(), false);
                let g = t.leaf(gamma.clone(), false);
                let be = t.leaf(beta.clone(), false);
                let wt = t.leaf(wt.clone(), false);
                let c = t.conv3d(x, w1, Some(b1), [1, 1, 1], [1, 1, 1], [1, 1, 1]);
                let n = t.instance_norm(c, g, be, 1e-5);
                let r = t.relu(n);
                let p = t.maxpool3d(r, 2);
                let u = t.convt3d(p, wt, None, 2);
                let s = t.sigmoid(u);
                let q = t.square(s);
                t.sum_all(q)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn se_gating_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let w1 = randd(&mut rng, &[2, 4]);
        let b1 = randd(&mut rng, &[2]);
        let w2 = randd(&mut rng, &[4, 2]);
        let b2 = randd(&mut rng, &[4]);
        let x0 = randd(&mut rng, &[4, 3, 3, 3]);
        check_grads(
            |t, x| {
                let w1 = t.leaf(w1.clone(), false);
                let b1 = t.leaf(b1.clone(), false);
                let w2 = t.leaf(w2.clone(), false);
                let b2 = t.leaf(b2.clone(), false);
                let s = t.global_avg_pool(x);
                let z1 = t.linear(s, w1, b1);
                let z1 = t.relu(z1);
                let z2 = t.linear(z1, w2, b2);
                let gates = t.sigmoid(z2);
                let y = t.channel_scale(x, gates);
                t.sum_all(y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn concat_and_scalar_ops_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let x0 = randd(&mut rng, &[2, 2, 2, 2]);
        let k = randd(&mut rng, &[2, 2, 2, 2]);
        check_grads(
            |t, x| {
                let sq = t.square(x);
                let m = t.mul_data(sq, k.clone());
                let c = t.concat_c(x, m);
                let s1 = t.sum_all(c);
                let s2 = t.sum_all(x);
                let s2 = t.add_c(s2, 3.0);
                let r = t.div_var(s1, s2);
                let r = t.mul_c(r, 2.0);
                t.sub_from_c(r, 1.0)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn weight_gradients_accumulate_across_shared_use() {
        // Same weight used twice: gradient must be the sum of both paths.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x1 = randd(&mut rng, &[1, 3, 3, 3]);
        let x2 = randd(&mut rng, &[1, 3, 3, 3]);
        let w0 = randd(&mut rng, &[1, 1, 3, 3, 3]);
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone(), true);
        let a = tape.leaf(x1.clone(), false);
        let b = tape.leaf(x2.clone(), false);
        let y1 = tape.conv3d(a, w, None, [1, 1, 1], [1, 1, 1], [1, 1, 1]);
        let y2 = tape.conv3d(b, w, None, [1, 1, 1], [1, 1, 1], [1, 1, 1]);
        let s1 = tape.sum_all(y1);
        let s2 = tape.sum_all(y2);
        let tot = tape.add(s1, s2);
        tape.backward(tot);
        let got = tape.grad(w).unwrap().clone();

        let single = |x: &ArrayD<f64>| {
            let mut t = Tape::<f64>::new();
            let w = t.leaf(w0.clone(), true);
            let a = t.leaf(x.clone(), false);
            let y = t.conv3d(a, w, None, [1, 1, 1], [1, 1, 1], [1, 1, 1]);
            let s = t.sum_all(y);
            t.backward(s);
            t.grad(w).unwrap().clone()
        };
        let want = single(&x1) + single(&x2);
        assert!(got
            .iter()
            .zip(want.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
