use super::{reduce_to_shape, Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::{strides, Tensor};

/// Applies `f` over the broadcast of two same-rank tensors whose axes are
/// either equal or 1.
pub(crate) fn broadcast_map<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sb.iter().product::<usize>() == 1 {
        let bv = b.data()[0];
        return a.map(|x| f(x, bv));
    }
    if sa.iter().product::<usize>() == 1 {
        let av = a.data()[0];
        return b.map(|y| f(av, y));
    }
    assert_eq!(sa.len(), sb.len(), "broadcast rank mismatch {sa:?} vs {sb:?}");
    let out_shape: Vec<usize> = sa
        .iter()
        .zip(sb)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {sa:?} with {sb:?}");
            x.max(y)
        })
        .collect();
    let eff = |shape: &[usize]| -> Vec<usize> {
        strides(shape)
            .into_iter()
            .zip(shape)
            .map(|(s, &d)| if d == 1 { 0 } else { s })
            .collect()
    };
    let (ea, eb) = (eff(sa), eff(sb));
    let rank = out_shape.len();
    let last = out_shape[rank - 1];
    let (la, lb) = (ea[rank - 1], eb[rank - 1]);
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank - 1];
    let (da, db) = (a.data(), b.data());
    for _ in 0..total / last {
        let oa: usize = idx.iter().zip(&ea).map(|(&i, &s)| i * s).sum();
        let ob: usize = idx.iter().zip(&eb).map(|(&i, &s)| i * s).sum();
        for j in 0..last {
            out.push(f(da[oa + j * la], db[ob + j * lb]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl<T: Scalar> Graph<'_, T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, &[a, b], || {
            Box::new(|cx| {
                vec![
                    cx.needs(0).then(|| reduce_to_shape(cx.grad, cx.inputs[0].shape())),
                    cx.needs(1).then(|| reduce_to_shape(cx.grad, cx.inputs[1].shape())),
                ]
            })
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_map(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(value, &[a, b], || {
            Box::new(|cx| {
                vec![
                    cx.needs(0).then(|| reduce_to_shape(cx.grad, cx.inputs[0].shape())),
                    cx.needs(1)
                        .then(|| reduce_to_shape(&cx.grad.map(|g| -g), cx.inputs[1].shape())),
                ]
            })
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_map(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, &[a, b], || {
            Box::new(|cx| {
                let (a, b) = (cx.inputs[0], cx.inputs[1]);
                vec![
                    cx.needs(0).then(|| {
                        reduce_to_shape(&broadcast_map(cx.grad, b, |g, y| g * y), a.shape())
                    }),
                    cx.needs(1).then(|| {
                        reduce_to_shape(&broadcast_map(cx.grad, a, |g, x| g * x), b.shape())
                    }),
                ]
            })
        })
    }

    /// Sum of several same-shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut value = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            value.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push_op(value, xs, move || {
            Box::new(move |cx| (0..n).map(|i| cx.needs(i).then(|| cx.grad.clone())).collect())
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push_op(value, &[a], move || {
            Box::new(move |cx| vec![Some(cx.grad.scale(s))])
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push_op(value, &[a], || Box::new(|cx| vec![Some(cx.grad.clone())]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Elementwise map whose derivative is expressed through the input `x`
    /// and output `y`.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        self.push_op(value, &[a], move || {
            Box::new(move |cx| {
                let x = cx.inputs[0].data();
                let y = cx.out.data();
                let g = cx.grad.data();
                let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::from_parts(cx.grad.shape().to_vec(), data))]
            })
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, |_, y| y)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x: T| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    /// Clamp to `[lo, hi]`; the gradient passes on the closed interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, &[a], || {
            Box::new(|cx| {
                let g = cx.grad.item();
                vec![Some(Tensor::full(cx.inputs[0].shape(), g))]
            })
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, lit(1.0 / n as f64))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) computed without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
