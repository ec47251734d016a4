use super::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

impl<T: Scalar> Graph<'_, T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push_op(value, &[x], || {
            Box::new(|cx| {
                vec![Some(Tensor::from_parts(
                    cx.inputs[0].shape().to_vec(),
                    cx.grad.data().to_vec(),
                ))]
            })
        })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        let widths: Vec<usize> = xs.iter().map(|&x| *self.shape(x).last().unwrap()).collect();
        let lead = self.shape(xs[0])[..self.shape(xs[0]).len() - 1].to_vec();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last leading axes differ");
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push_op(Tensor::from_parts(shape, out), xs, move || {
            Box::new(move |cx| {
                let g = cx.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    grads.push(cx.needs(i).then(|| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        Tensor::from_parts(cx.inputs[i].shape().to_vec(), d)
                    }));
                    offset += w;
                }
                grads
            })
        })
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let total = *s.last().unwrap();
        assert!(start + len <= total, "narrow_last {start}+{len} > {total}");
        let rows = self.value(x).len() / total;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * total + start..r * total + start + len]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        self.push_op(Tensor::from_parts(shape, out), &[x], move || {
            Box::new(move |cx| {
                let g = cx.grad.data();
                let mut gx = vec![T::zero(); rows * total];
                for r in 0..rows {
                    gx[r * total + start..r * total + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
        })
    }

    /// Space-to-depth: `[B, H, W, C] -> [B, H/r, W/r, C·r²]`, channel index
    /// `c·r² + dy·r + dx`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let s = self.shape(x).to_vec();
        let value = pixel_unshuffle_tensor(self.value(x), r);
        self.push_op(value, &[x], move || {
            Box::new(move |cx| vec![Some(pixel_shuffle_tensor(cx.grad, r, &s))])
        })
    }

    /// Nearest-neighbour ×2 upsampling of `[B, H, W, C]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        self.push_op(Tensor::from_parts(vec![b, 2 * h, 2 * w, c], out), &[x], move || {
            Box::new(move |cx| {
                let g = cx.grad.data();
                let mut gx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                            let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                            for j in 0..c {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
        })
    }

    /// Forward difference along axis 1 (rows) or 2 (columns) of `[B, H, W, C]`.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Var {
        assert!(axis == 1 || axis == 2, "forward_diff axis must be 1 or 2");
        let s = self.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = if axis == 1 { (h - 1, w) } else { (h, w - 1) };
        let step = if axis == 1 { w * c } else { c };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ((bi * h + y) * w + xx) * c;
                    for j in 0..c {
                        out.push(xv[base + step + j] - xv[base + j]);
                    }
                }
            }
        }
        self.push_op(Tensor::from_parts(vec![b, oh, ow, c], out), &[x], move || {
            Box::new(move |cx| {
                let g = cx.grad.data();
                let mut gx = vec![T::zero(); b * h * w * c];
                let mut k = 0;
                for bi in 0..b {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let base = ((bi * h + y) * w + xx) * c;
                            for j in 0..c {
                                gx[base + step + j] += g[k];
                                gx[base + j] -= g[k];
                                k += 1;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
        })
    }

    /// Per-channel mean over the `(2r+1)²` window, clipped at the border
    /// (each output divides by the number of in-bounds taps).
    pub fn box_blur(&mut self, x: Var, radius: usize) -> Var {
        let s = self.shape(x).to_vec();
        let value = box_blur_tensor(self.value(x), radius);
        self.push_op(value, &[x], move || {
            Box::new(move |cx| {
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let g = cx.grad.data();
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for y in 0..h {
                        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
                        for xx in 0..w {
                            let (x0, x1) = (xx.saturating_sub(radius), (xx + radius).min(w - 1));
                            let inv: T = lit(1.0 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
                            let o = ((bi * h + y) * w + xx) * c;
                            for yy in y0..=y1 {
                                for xs in x0..=x1 {
                                    let i = ((bi * h + yy) * w + xs) * c;
                                    for j in 0..c {
                                        gx[i + j] += g[o + j] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
        })
    }
}

pub(crate) fn box_blur_tensor<T: Scalar>(x: &Tensor<T>, radius: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let xv = x.data();
    let mut out = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(radius), (xx + radius).min(w - 1));
                let inv: T = lit(1.0 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
                let o = ((bi * h + y) * w + xx) * c;
                for yy in y0..=y1 {
                    for xs in x0..=x1 {
                        let i = ((bi * h + yy) * w + xs) * c;
                        for j in 0..c {
                            out[o + j] += xv[i + j];
                        }
                    }
                }
                for j in 0..c {
                    out[o + j] *= inv;
                }
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

pub(crate) fn pixel_unshuffle_tensor<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let xv = x.data();
    let mut out = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let (oy, dy, ox, dx) = (y / r, y % r, xx / r, xx % r);
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * oh + oy) * ow + ox) * oc;
                for ch in 0..c {
                    out[dst + ch * r * r + dy * r + dx] = xv[src + ch];
                }
            }
        }
    }
    Tensor::from_parts(vec![b, oh, ow, oc], out)
}

/// Inverse of [`pixel_unshuffle_tensor`]; `target` is the unshuffled-from shape.
pub(crate) fn pixel_shuffle_tensor<T: Scalar>(x: &Tensor<T>, r: usize, target: &[usize]) -> Tensor<T> {
    let (b, h, w, c) = (target[0], target[1], target[2], target[3]);
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    debug_assert_eq!(x.shape(), &[b, oh, ow, oc]);
    let xv = x.data();
    let mut out = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let (oy, dy, ox, dx) = (y / r, y % r, xx / r, xx % r);
                let dst = ((bi * h + y) * w + xx) * c;
                let src = ((bi * oh + oy) * ow + ox) * oc;
                for ch in 0..c {
                    out[dst + ch] = xv[src + ch * r * r + dy * r + dx];
                }
            }
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}
