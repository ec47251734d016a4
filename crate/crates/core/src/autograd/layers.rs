use super::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

impl<T: Scalar> Graph<'_, T> {
    /// `x[..., in] · weight[in, out] + bias[out]` over the last axis.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight);
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("rank >= 1"), din, "linear input width {xs:?} vs {ws:?}");
        let rows = self.value(x).len() / din;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        for (m, orow) in out.chunks_mut(dout).enumerate() {
            for (i, &xi) in xv[m * din..(m + 1) * din].iter().enumerate() {
                if xi.is_zero() {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&wv[i * dout..(i + 1) * dout]) {
                    *o += xi * w;
                }
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = dout;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push_op(Tensor::from_parts(oshape, out), &parents, move || {
            Box::new(move |cx| {
                let xv = cx.inputs[0].data();
                let wv = cx.inputs[1].data();
                let g = cx.grad.data();
                let gx = cx.needs(0).then(|| {
                    let mut gx = vec![T::zero(); rows * din];
                    for m in 0..rows {
                        let grow = &g[m * dout..(m + 1) * dout];
                        for i in 0..din {
                            let mut acc = T::zero();
                            for (&gv, &w) in grow.iter().zip(&wv[i * dout..(i + 1) * dout]) {
                                acc += gv * w;
                            }
                            gx[m * din + i] = acc;
                        }
                    }
                    Tensor::from_parts(cx.inputs[0].shape().to_vec(), gx)
                });
                let gw = cx.needs(1).then(|| {
                    let mut gw = vec![T::zero(); din * dout];
                    for m in 0..rows {
                        let grow = &g[m * dout..(m + 1) * dout];
                        for i in 0..din {
                            let xi = xv[m * din + i];
                            if xi.is_zero() {
                                continue;
                            }
                            for (a, &gv) in gw[i * dout..(i + 1) * dout].iter_mut().zip(grow) {
                                *a += xi * gv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![din, dout], gw)
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(cx.needs(2).then(|| {
                        let mut gb = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::from_parts(vec![dout], gb)
                    }));
                }
                grads
            })
        })
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), d, "layer_norm gamma width");
        let eps: T = lit(eps);
        let inv_d: T = lit(1.0 / d as f64);
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        // normalized activations and inverse std are kept for backward
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push_op(Tensor::from_parts(shape, out), &[x, gamma, beta], move || {
            Box::new(move |cx| {
                let g = cx.grad.data();
                let gamma = cx.inputs[1].data();
                let gx = cx.needs(0).then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for j in 0..d {
                            let dy = g[r * d + j] * gamma[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dy = g[r * d + j] * gamma[j];
                            gx[r * d + j] = rstd[r]
                                * (dy - inv_d * sum_dy - xhat[r * d + j] * inv_d * sum_dy_xhat);
                        }
                    }
                    Tensor::from_parts(cx.inputs[0].shape().to_vec(), gx)
                });
                let (gg, gb) = if cx.needs(1) || cx.needs(2) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gb[j] += g[r * d + j];
                        }
                    }
                    (
                        Some(Tensor::from_parts(vec![d], gg)),
                        Some(Tensor::from_parts(vec![d], gb)),
                    )
                } else {
                    (None, None)
                };
                vec![gx, gg, gb]
            })
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push_op(Tensor::from_parts(shape, out), &[x], move || {
            Box::new(move |cx| {
                let y = cx.out.data();
                let g = cx.grad.data();
                let mut gx = vec![T::zero(); g.len()];
                for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(cx.grad.shape().to_vec(), gx))]
            })
        })
    }

    /// Global average pooling `[B, H, W, C] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool expects [B,H,W,C]");
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv: T = lit(1.0 / hw as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let orow = &mut out[bi * c..(bi + 1) * c];
            for p in 0..hw {
                let base = (bi * hw + p) * c;
                for (o, &v) in orow.iter_mut().zip(&xv[base..base + c]) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        self.push_op(Tensor::from_parts(vec![b, c], out), &[x], move || {
            Box::new(move |cx| {
                let g = cx.grad.data();
                let mut gx = vec![T::zero(); b * hw * c];
                for bi in 0..b {
                    for p in 0..hw {
                        let base = (bi * hw + p) * c;
                        for j in 0..c {
                            gx[base + j] = g[bi * c + j] * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
        })
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
