//! 2-D convolution over channel-last tensors.
//!
//! Weights are laid out `[kh, kw, cin / groups, cout]`. Only dense
//! (`groups == 1`) and depthwise (`groups == cin == cout`) forms exist.

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

fn conv_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.batch * oh * ow * g.cout];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = ((b * oh + oy) * ow + ox) * g.cout;
                let orow = &mut out[o0..o0 + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let xin = &x[i0..i0 + g.cin];
                        let tap = (ky * g.kw + kx) * if g.depthwise { g.cout } else { g.cin * g.cout };
                        if g.depthwise {
                            let wrow = &wt[tap..tap + g.cout];
                            for ((o, &xv), &wv) in orow.iter_mut().zip(xin).zip(wrow) {
                                *o += xv * wv;
                            }
                        } else {
                            for (ci, &xv) in xin.iter().enumerate() {
                                let wrow = &wt[tap + ci * g.cout..tap + (ci + 1) * g.cout];
                                for (o, &wv) in orow.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input and weight.
fn conv_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![T::zero(); wt.len()] } else { Vec::new() };
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = ((b * oh + oy) * ow + ox) * g.cout;
                let grow = &gout[o0..o0 + g.cout];
                if grow.iter().all(|v| v.is_zero()) {
                    continue;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let tap = (ky * g.kw + kx) * if g.depthwise { g.cout } else { g.cin * g.cout };
                        if g.depthwise {
                            for c in 0..g.cout {
                                if want_x {
                                    gx[i0 + c] += grow[c] * wt[tap + c];
                                }
                                if want_w {
                                    gw[tap + c] += grow[c] * x[i0 + c];
                                }
                            }
                        } else {
                            for ci in 0..g.cin {
                                let w0 = tap + ci * g.cout;
                                if want_x {
                                    let wrow = &wt[w0..w0 + g.cout];
                                    let mut acc = T::zero();
                                    for (&gv, &wv) in grow.iter().zip(wrow) {
                                        acc += gv * wv;
                                    }
                                    gx[i0 + ci] += acc;
                                }
                                if want_w {
                                    let xv = x[i0 + ci];
                                    for (gwv, &gv) in gw[w0..w0 + g.cout].iter_mut().zip(grow) {
                                        *gwv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl<T: Scalar> Graph<'_, T> {
    /// Zero-padded 2-D convolution. `x` is `[B, H, W, Cin]`, `weight`
    /// `[kh, kw, Cin, Cout]` (or `[kh, kw, 1, C]` when `depthwise`).
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        assert_eq!(xs.len(), 4, "conv2d input must be [B,H,W,C], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d, got {ws:?}");
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            cout: ws[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            pad,
            depthwise,
        };
        if depthwise {
            assert!(ws[2] == 1 && ws[3] == xs[3], "depthwise weight {ws:?} vs input {xs:?}");
        } else {
            assert_eq!(ws[2], xs[3], "conv2d channel mismatch: weight {ws:?} vs input {xs:?}");
        }
        let mut out = conv_forward(self.value(x).data(), self.value(weight).data(), &geom);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), geom.cout, "bias length");
            for row in out.chunks_mut(geom.cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::from_parts(vec![geom.batch, geom.out_h(), geom.out_w(), geom.cout], out);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push_op(value, &parents, move || {
            Box::new(move |cx| {
                let (gx, gw) = conv_backward(
                    cx.inputs[0].data(),
                    cx.inputs[1].data(),
                    cx.grad.data(),
                    &geom,
                    cx.needs(0),
                    cx.needs(1),
                );
                let mut grads = vec![
                    cx.needs(0)
                        .then(|| Tensor::from_parts(cx.inputs[0].shape().to_vec(), gx)),
                    cx.needs(1)
                        .then(|| Tensor::from_parts(cx.inputs[1].shape().to_vec(), gw)),
                ];
                if has_bias {
                    grads.push(cx.needs(2).then(|| {
                        let mut gb = vec![T::zero(); geom.cout];
                        for row in cx.grad.data().chunks(geom.cout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::from_parts(vec![geom.cout], gb)
                    }));
                }
                grads
            })
        })
    }
}

/// Multiply-accumulate count of one convolution (used for cost accounting).
pub fn conv_macs(g: &ConvGeom) -> u64 {
    let per_out = if g.depthwise { g.kh * g.kw } else { g.kh * g.kw * g.cin };
    (g.batch * g.out_h() * g.out_w() * g.cout * per_out) as u64
}
