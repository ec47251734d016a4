//! 2-D DFT over the spatial axes of `[B, H, W, C]` tensors.
//!
//! Complex tensors carry a trailing axis of length 2 (`re`, `im`).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    /// Unnormalized inverse (no `1/(H·W)` factor).
    Inverse,
}

/// In-place 2-D transform of every `(b, c)` plane of a `[B, H, W, C]`
/// complex buffer.
pub(crate) fn fft2_in_place<T: Scalar>(
    buf: &mut [Complex<T>],
    dims: [usize; 4],
    dir: Direction,
) {
    let [b, h, w, c] = dims;
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = match dir {
        Direction::Forward => (planner.plan_fft_forward(w), planner.plan_fft_forward(h)),
        Direction::Inverse => (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)),
    };
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = buf[((bi * h + y) * w + x) * c + ch];
                }
            }
            for row in plane.chunks_mut(w) {
                row_fft.process(row);
            }
            for x in 0..w {
                for y in 0..h {
                    col[y] = plane[y * w + x];
                }
                col_fft.process(&mut col);
                for y in 0..h {
                    plane[y * w + x] = col[y];
                }
            }
            for y in 0..h {
                for x in 0..w {
                    buf[((bi * h + y) * w + x) * c + ch] = plane[y * w + x];
                }
            }
        }
    }
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

pub(crate) fn real_to_complex<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    x.iter().map(|&v| Complex::new(v, T::zero())).collect()
}

pub(crate) fn interleave<T: Scalar>(z: &[Complex<T>]) -> Vec<T> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

pub(crate) fn deinterleave<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    x.chunks(2).map(|p| Complex::new(p[0], p[1])).collect()
}

impl<T: Scalar> Graph<'_, T> {
    /// Forward 2-D DFT of a real `[B, H, W, C]` tensor, returned as
    /// `[B, H, W, C, 2]`.
    pub fn fft2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "fft2 expects [B,H,W,C]");
        let dims = dims4(&s);
        let mut z = real_to_complex(self.value(x).data());
        fft2_in_place(&mut z, dims, Direction::Forward);
        let mut oshape = s.clone();
        oshape.push(2);
        self.push_op(Tensor::from_parts(oshape, interleave(&z)), &[x], move || {
            Box::new(move |cx| {
                // adjoint of a real-input DFT: Re(F^H g)
                let mut gz = deinterleave(cx.grad.data());
                fft2_in_place(&mut gz, dims, Direction::Inverse);
                let gx = gz.iter().map(|c| c.re).collect();
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            })
        })
    }

    /// Real part of the normalized inverse 2-D DFT of `[B, H, W, C, 2]`.
    pub fn ifft2_real(&mut self, z: Var) -> Var {
        let zs = self.shape(z).to_vec();
        assert_eq!(zs.len(), 5, "ifft2_real expects [B,H,W,C,2]");
        let dims = dims4(&zs);
        let inv_n: T = lit(1.0 / (dims[1] * dims[2]) as f64);
        let mut buf = deinterleave(self.value(z).data());
        fft2_in_place(&mut buf, dims, Direction::Inverse);
        let out = buf.iter().map(|c| c.re * inv_n).collect();
        self.push_op(Tensor::from_parts(zs[..4].to_vec(), out), &[z], move || {
            Box::new(move |cx| {
                let mut g = real_to_complex(cx.grad.data());
                fft2_in_place(&mut g, dims, Direction::Forward);
                let gz = g.iter().flat_map(|c| [c.re * inv_n, c.im * inv_n]).collect();
                vec![Some(Tensor::from_parts(zs.clone(), gz))]
            })
        })
    }

    /// Modulus of a `[..., 2]` complex tensor (gradient 0 at the origin).
    pub fn complex_abs(&mut self, z: Var) -> Var {
        let zs = self.shape(z).to_vec();
        let out: Vec<T> = self
            .value(z)
            .data()
            .chunks(2)
            .map(|p| p[0].hypot(p[1]))
            .collect();
        self.push_op(Tensor::from_parts(zs[..zs.len() - 1].to_vec(), out), &[z], move || {
            Box::new(move |cx| {
                let zv = cx.inputs[0].data();
                let a = cx.out.data();
                let g = cx.grad.data();
                let mut gz = vec![T::zero(); zv.len()];
                for i in 0..a.len() {
                    if a[i] > T::zero() {
                        gz[2 * i] = g[i] * zv[2 * i] / a[i];
                        gz[2 * i + 1] = g[i] * zv[2 * i + 1] / a[i];
                    }
                }
                vec![Some(Tensor::from_parts(zs.clone(), gz))]
            })
        })
    }

    /// Argument in `(-π, π]` of a `[..., 2]` complex tensor; `arg(0) = 0`.
    pub fn complex_arg(&mut self, z: Var) -> Var {
        let zs = self.shape(z).to_vec();
        let out: Vec<T> = self
            .value(z)
            .data()
            .chunks(2)
            .map(|p| complex_arg(p[0], p[1]))
            .collect();
        self.push_op(Tensor::from_parts(zs[..zs.len() - 1].to_vec(), out), &[z], move || {
            Box::new(move |cx| {
                let zv = cx.inputs[0].data();
                let g = cx.grad.data();
                let mut gz = vec![T::zero(); zv.len()];
                for i in 0..g.len() {
                    let (re, im) = (zv[2 * i], zv[2 * i + 1]);
                    let r2 = re * re + im * im;
                    if r2 > T::zero() {
                        gz[2 * i] = -g[i] * im / r2;
                        gz[2 * i + 1] = g[i] * re / r2;
                    }
                }
                vec![Some(Tensor::from_parts(zs.clone(), gz))]
            })
        })
    }

    /// `amp · exp(i · phase)` as a `[..., 2]` complex tensor.
    pub fn polar(&mut self, amp: Var, phase: Var) -> Var {
        let s = self.shape(amp).to_vec();
        assert_eq!(s, self.shape(phase), "polar shape mismatch");
        let (a, p) = (self.value(amp).data(), self.value(phase).data());
        let out: Vec<T> = a
            .iter()
            .zip(p)
            .flat_map(|(&a, &p)| [a * p.cos(), a * p.sin()])
            .collect();
        let mut oshape = s.clone();
        oshape.push(2);
        self.push_op(Tensor::from_parts(oshape, out), &[amp, phase], move || {
            Box::new(move |cx| {
                let (a, p) = (cx.inputs[0].data(), cx.inputs[1].data());
                let g = cx.grad.data();
                let n = a.len();
                let ga = cx.needs(0).then(|| {
                    let d = (0..n)
                        .map(|i| g[2 * i] * p[i].cos() + g[2 * i + 1] * p[i].sin())
                        .collect();
                    Tensor::from_parts(s.clone(), d)
                });
                let gp = cx.needs(1).then(|| {
                    let d = (0..n)
                        .map(|i| a[i] * (g[2 * i + 1] * p[i].cos() - g[2 * i] * p[i].sin()))
                        .collect();
                    Tensor::from_parts(s.clone(), d)
                });
                vec![ga, gp]
            })
        })
    }
}

#[inline]
pub(crate) fn complex_arg<T: Scalar>(re: T, im: T) -> T {
    if re.is_zero() && im.is_zero() {
        return T::zero();
    }
    let a = im.atan2(re);
    // atan2(-0, x<0) yields -π; the half-open range keeps +π instead
    let pi: T = lit(std::f64::consts::PI);
    if a <= -pi {
        pi
    } else {
        a
    }
}
