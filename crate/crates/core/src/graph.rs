//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Nodes whose inputs
//! are all constants carry no backward closure and are skipped.

use crate::tensor::{
    conv2d_backward, conv2d_forward, gemm, max_pool2_forward, separable_apply, sigmoid, MatRef, Scalar,
    Tensor,
};
use crate::warp::sampling_matrix_from_profile;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

/// Inputs handed to a node's backward closure.
pub struct BackwardArgs<'a, T> {
    pub parents: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Which parents need a gradient.
    pub needs: Vec<bool>,
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends an op node. The closure is dropped when no parent needs a
    /// gradient.
    pub fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let args = BackwardArgs {
                parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let (Some(g), true) = (g, self.nodes[p.0].requires_grad) else { continue };
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p.0] = Some(g),
                }
            }
            // keep gradients of leaves only
            if !node.parents.is_empty() {
                grads[i] = None;
            } else {
                grads[i] = Some(grad);
            }
        }
        Gradients { grads }
    }

    // ---- ops -------------------------------------------------------------

    /// Stride-1 "same" convolution, `x: [C,H,W]`, `weight: [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, relu: bool) -> Var {
        let out = conv2d_forward(self.value(x), self.value(weight), self.value(bias), relu);
        self.push(
            out,
            vec![x, weight, bias],
            Box::new(move |a| {
                let masked;
                let grad = if relu {
                    masked = a.grad.zip_map(a.output, |g, y| if y > T::zero() { g } else { T::zero() });
                    &masked
                } else {
                    a.grad
                };
                let (dx, dw, db) = conv2d_backward(a.parents[0], a.parents[1], grad, a.needs[0], a.needs[1] || a.needs[2]);
                vec![dx, dw, db]
            }),
        )
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, idx) = max_pool2_forward(self.value(x));
        self.push(
            out,
            vec![x],
            Box::new(move |a| {
                let mut dx = Tensor::zeros(a.parents[0].shape().to_vec());
                let d = dx.data_mut();
                for (&j, &g) in idx.iter().zip(a.grad.data()) {
                    d[j as usize] = d[j as usize] + g;
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(
            out,
            vec![x],
            Box::new(|a| vec![Some(a.grad.zip_map(a.output, |g, y| g * y * (T::one() - y)))]),
        )
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, vec![x], Box::new(move |a| vec![Some(a.grad.scale(scale))]))
    }

    /// Subtracts a constant per channel of `x: [C,H,W]`.
    pub fn shift_channels(&mut self, x: Var, shifts: &[T]) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(shifts.len(), c);
        let mut out = self.value(x).clone();
        for (ci, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v = *v - shifts[ci];
            }
        }
        self.push(out, vec![x], Box::new(|a| vec![Some(a.grad.clone())]))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let out = self.value(x).zip_map(self.value(y), |p, q| p + q);
        self.push(out, vec![x, y], Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.clone())]))
    }

    /// `x: [C,H,W]` times a single-channel gate `gate: [1,H,W]`.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(gate).shape(), [1, h, w], "spatial gate shape");
        let g = self.value(gate).data();
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(h * w) {
            for (v, &s) in plane.iter_mut().zip(g) {
                *v = *v * s;
            }
        }
        self.push(
            out,
            vec![x, gate],
            Box::new(move |a| {
                let (x, gate) = (a.parents[0], a.parents[1]);
                let dx = a.needs[0].then(|| {
                    let mut dx = a.grad.clone();
                    for plane in dx.data_mut().chunks_mut(h * w) {
                        for (v, &s) in plane.iter_mut().zip(gate.data()) {
                            *v = *v * s;
                        }
                    }
                    dx
                });
                let dg = a.needs[1].then(|| {
                    let mut dg = vec![T::zero(); h * w];
                    for (gp, xp) in a.grad.data().chunks(h * w).zip(x.data().chunks(h * w)) {
                        for ((d, &g), &v) in dg.iter_mut().zip(gp).zip(xp) {
                            *d = *d + g * v;
                        }
                    }
                    Tensor::new(vec![1, h, w], dg)
                });
                let _ = c;
                vec![dx, dg]
            }),
        )
    }

    /// `x: [C,H,W]` times a per-channel gate `gate: [C]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(gate).shape(), [c], "channel gate shape");
        let mut out = self.value(x).clone();
        for (plane, &s) in out.data_mut().chunks_mut(h * w).zip(self.value(gate).data()) {
            for v in plane {
                *v = *v * s;
            }
        }
        self.push(
            out,
            vec![x, gate],
            Box::new(move |a| {
                let (x, gate) = (a.parents[0], a.parents[1]);
                let dx = a.needs[0].then(|| {
                    let mut dx = a.grad.clone();
                    for (plane, &s) in dx.data_mut().chunks_mut(h * w).zip(gate.data()) {
                        for v in plane {
                            *v = *v * s;
                        }
                    }
                    dx
                });
                let dg = a.needs[1].then(|| {
                    let d = a
                        .grad
                        .data()
                        .chunks(h * w)
                        .zip(x.data().chunks(h * w))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&g, &v)| g * v).sum())
                        .collect();
                    Tensor::new(vec![c], d)
                });
                vec![dx, dg]
            }),
        )
    }

    /// Mean over channels, `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let inv = T::one() / T::lit(c as f64);
        let mut out = vec![T::zero(); h * w];
        for plane in self.value(x).data().chunks(h * w) {
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        self.push(
            Tensor::new(vec![1, h, w], out),
            vec![x],
            Box::new(move |a| {
                let mut dx = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    dx.extend(a.grad.data().iter().map(|&g| g * inv));
                }
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }

    /// Global average pool, `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let inv = T::one() / T::lit((h * w) as f64);
        let out = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.push(
            Tensor::new(vec![c], out),
            vec![x],
            Box::new(move |a| {
                let mut dx = Vec::with_capacity(c * h * w);
                for &g in a.grad.data() {
                    dx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                vec![Some(Tensor::new(vec![c, h, w], dx))]
            }),
        )
    }

    /// `weight: [O, I]` times `x: [I]` plus `bias: [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let (o, i) = match self.value(weight).shape()[..] {
            [o, i] => (o, i),
            _ => panic!("linear weight must be 2-D"),
        };
        assert_eq!(self.value(x).shape(), [i]);
        let mut out = self.value(bias).clone();
        gemm(
            MatRef::new(self.value(weight).data(), o, i),
            MatRef::new(self.value(x).data(), i, 1),
            T::one(),
            out.data_mut(),
            1,
        );
        self.push(
            out,
            vec![x, weight, bias],
            Box::new(move |a| {
                let (x, wt) = (a.parents[0], a.parents[1]);
                let dx = a.needs[0].then(|| {
                    let mut d = vec![T::zero(); i];
                    gemm(MatRef::new(wt.data(), o, i).t(), MatRef::new(a.grad.data(), o, 1), T::zero(), &mut d, 1);
                    Tensor::new(vec![i], d)
                });
                let dw = a.needs[1].then(|| {
                    let mut d = vec![T::zero(); o * i];
                    gemm(MatRef::new(a.grad.data(), o, 1), MatRef::new(x.data(), 1, i), T::zero(), &mut d, i);
                    Tensor::new(vec![o, i], d)
                });
                let db = a.needs[2].then(|| a.grad.clone());
                vec![dx, dw, db]
            }),
        )
    }

    /// `out[c] = rows * x[c] * colsᵀ`, the separable resampling used by the
    /// grid warp and by plain bilinear resizing.
    pub fn separable_resample(&mut self, x: Var, rows: Var, cols: Var) -> Var {
        let out = separable_apply(self.value(x), self.value(rows), self.value(cols));
        self.push(
            out,
            vec![x, rows, cols],
            Box::new(|a| {
                let (x, r, cm) = (a.parents[0], a.parents[1], a.parents[2]);
                let (c, h, w) = x.chw();
                let (oh, ow) = (r.shape()[0], cm.shape()[0]);
                let mut dx = a.needs[0].then(|| vec![T::zero(); c * h * w]);
                let mut dr = a.needs[1].then(|| vec![T::zero(); oh * h]);
                let mut dc = a.needs[2].then(|| vec![T::zero(); ow * w]);
                let mut gc = vec![T::zero(); oh * w]; // dY_c * C
                let mut rx = vec![T::zero(); oh * w]; // R * X_c
                for ci in 0..c {
                    let g = MatRef::new(&a.grad.data()[ci * oh * ow..(ci + 1) * oh * ow], oh, ow);
                    let xc = MatRef::new(&x.data()[ci * h * w..(ci + 1) * h * w], h, w);
                    if dx.is_some() || dr.is_some() {
                        gemm(g, MatRef::new(cm.data(), ow, w), T::zero(), &mut gc, w);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(MatRef::new(r.data(), oh, h).t(), MatRef::new(&gc, oh, w), T::zero(), &mut dx[ci * h * w..], w);
                    }
                    if let Some(dr) = dr.as_mut() {
                        gemm(MatRef::new(&gc, oh, w), xc.t(), T::one(), dr, h);
                    }
                    if let Some(dc) = dc.as_mut() {
                        gemm(MatRef::new(r.data(), oh, h), xc, T::zero(), &mut rx, w);
                        gemm(g.t(), MatRef::new(&rx, oh, w), T::one(), dc, w);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(vec![c, h, w], d)),
                    dr.map(|d| Tensor::new(vec![oh, h], d)),
                    dc.map(|d| Tensor::new(vec![ow, w], d)),
                ]
            }),
        )
    }

    /// Mean of a `[1,M,N]` (or `[M,N]`) map along rows (`axis = 1`, giving
    /// `[M]`) or columns (`axis = 0`, giving `[N]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        assert_eq!(m * n, self.value(x).len());
        let d = self.value(x).data();
        let out: Vec<T> = if axis == 1 {
            (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum::<T>() / T::lit(n as f64)).collect()
        } else {
            (0..n).map(|j| (0..m).map(|i| d[i * n + j]).sum::<T>() / T::lit(m as f64)).collect()
        };
        let len = out.len();
        self.push(
            Tensor::new(vec![len], out),
            vec![x],
            Box::new(move |a| {
                let g = a.grad.data();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = if axis == 1 { g[i] / T::lit(n as f64) } else { g[j] / T::lit(m as f64) };
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx))]
            }),
        )
    }

    /// Sampling matrix `[dst_len, src_len]` of the piecewise-linear warp whose
    /// output cells are proportional to `profile` (see
    /// [`crate::warp::sampling_matrix_from_profile`]).
    pub fn warp_matrix(&mut self, profile: Var, src_len: usize, dst_len: usize) -> Var {
        let p: Vec<f64> = self.value(profile).data().iter().map(|v| v.as_f64()).collect();
        let (matrix, _) = sampling_matrix_from_profile(&p, src_len, dst_len, false)
            .expect("profile validated before building the warp");
        let out = Tensor::new(vec![dst_len, src_len], matrix.iter().map(|&v| T::lit(v)).collect());
        self.push(
            out,
            vec![profile],
            Box::new(move |a| {
                let g: Vec<f64> = a.grad.data().iter().map(|v| v.as_f64()).collect();
                let (_, jac) = sampling_matrix_from_profile(&p, src_len, dst_len, true)
                    .expect("profile validated before building the warp");
                let dp = jac.expect("jacobian requested").vjp(&g);
                vec![Some(Tensor::new(vec![dp.len()], dp.into_iter().map(T::lit).collect()))]
            }),
        )
    }

    /// `scale * mean((x - y)^2)` as a one-element tensor.
    pub fn scaled_mse(&mut self, x: Var, y: Var, scale: T) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.shape(), yv.shape(), "mse operands differ in shape");
        let n = T::lit(xv.len() as f64);
        let s: T = xv.data().iter().zip(yv.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        self.push(
            Tensor::scalar(scale * s / n),
            vec![x, y],
            Box::new(move |a| {
                let k = a.grad.item() * scale * T::lit(2.0) / n;
                let d = a.parents[0].zip_map(a.parents[1], |p, q| k * (p - q));
                let neg = a.needs[1].then(|| d.scale(-T::one()));
                vec![a.needs[0].then_some(d), neg]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.731 + seed).sin()).collect())
    }

    /// Central-difference check of d(sum(w * f(x)))/dx along a fixed direction.
    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let eval = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.param(x);
            let y = build(&mut g, xv);
            let w = tensor(g.value(y).shape().to_vec(), 5.0);
            let wv = g.constant(w);
            let l = g.scaled_mse(y, wv, 1.0);
            (g.value(l).item(), g.backward(l).get(xv).cloned())
        };
        let dir = tensor(x0.shape().to_vec(), 9.0);
        let (_, grad) = eval(x0.clone());
        let analytic: f64 = grad.unwrap().data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let h = 1e-6;
        let plus = x0.zip_map(&dir, |a, d| a + h * d);
        let minus = x0.zip_map(&dir, |a, d| a - h * d);
        let fd = (eval(plus).0 - eval(minus).0) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
        assert!(rel < 1e-6, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        check(|g, x| g.sigmoid(x), tensor(vec![2, 3, 4], 0.0));
        check(|g, x| g.affine(x, -1.0, 2.0), tensor(vec![5], 0.0));
        check(|g, x| g.channel_mean(x), tensor(vec![3, 2, 2], 0.0));
        check(|g, x| g.global_avg_pool(x), tensor(vec![3, 2, 5], 0.0));
        check(|g, x| g.mean_axis(x, 0), tensor(vec![1, 3, 4], 0.0));
        check(|g, x| g.mean_axis(x, 1), tensor(vec![1, 3, 4], 0.0));
        check(|g, x| g.max_pool2(x), tensor(vec![2, 5, 3], 0.4));
    }

    #[test]
    fn gated_products_grads() {
        check(
            |g, x| {
                let s = g.constant(tensor(vec![1, 3, 4], 1.0));
                g.mul_spatial(x, s)
            },
            tensor(vec![2, 3, 4], 0.0),
        );
        check(
            |g, s| {
                let x = g.constant(tensor(vec![2, 3, 4], 1.0));
                g.mul_spatial(x, s)
            },
            tensor(vec![1, 3, 4], 0.0),
        );
        check(
            |g, c| {
                let x = g.constant(tensor(vec![2, 3, 4], 1.0));
                g.mul_channel(x, c)
            },
            tensor(vec![2], 0.0),
        );
    }

    #[test]
    fn conv_and_linear_grads() {
        check(
            |g, x| {
                let w = g.constant(tensor(vec![3, 2, 3, 3], 1.0));
                let b = g.constant(tensor(vec![3], 2.0));
                g.conv2d(x, w, b, true)
            },
            tensor(vec![2, 4, 5], 0.2),
        );
        check(
            |g, w| {
                let x = g.constant(tensor(vec![2, 4, 5], 1.0));
                let b = g.constant(tensor(vec![3], 2.0));
                g.conv2d(x, w, b, false)
            },
            tensor(vec![3, 2, 3, 3], 0.2),
        );
        check(
            |g, w| {
                let x = g.constant(tensor(vec![4], 1.0));
                let b = g.constant(tensor(vec![3], 2.0));
                g.linear(x, w, b)
            },
            tensor(vec![3, 4], 0.2),
        );
        check(
            |g, x| {
                let w = g.constant(tensor(vec![3, 4], 1.0));
                let b = g.constant(tensor(vec![3], 2.0));
                g.linear(x, w, b)
            },
            tensor(vec![4], 0.2),
        );
    }

    #[test]
    fn separable_resample_grads() {
        let r = tensor(vec![3, 4], 1.0);
        let c = tensor(vec![6, 5], 2.0);
        let x = tensor(vec![2, 4, 5], 3.0);
        {
            let (r, c) = (r.clone(), c.clone());
            check(
                move |g, x| {
                    let rv = g.constant(r.clone());
                    let cv = g.constant(c.clone());
                    g.separable_resample(x, rv, cv)
                },
                x.clone(),
            );
        }
        {
            let (x, c) = (x.clone(), c.clone());
            check(
                move |g, r| {
                    let xv = g.constant(x.clone());
                    let cv = g.constant(c.clone());
                    g.separable_resample(xv, r, cv)
                },
                r.clone(),
            );
        }
        check(
            move |g, c| {
                let xv = g.constant(x.clone());
                let rv = g.constant(r.clone());
                g.separable_resample(xv, rv, c)
            },
            c,
        );
    }

    #[test]
    fn constants_have_no_backward() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(vec![2], 1.0));
        let b = g.sigmoid(a);
        assert!(!g.requires_grad(b));
        let p = g.param(Tensor::full(vec![2], 1.0));
        let c = g.add(b, p);
        assert!(g.requires_grad(c));
    }
}
