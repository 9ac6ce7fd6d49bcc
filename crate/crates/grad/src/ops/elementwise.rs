use std::sync::Arc;

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, F: Real> Var<'t, F> {
    /// Elementwise map with derivative `d(x, y)` evaluated at input `x`
    /// and output `y`.
    fn unary(
        self,
        f: impl Fn(F) -> F,
        d: impl Fn(F, F) -> F + 'static,
    ) -> Var<'t, F> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let yc = y.clone();
        let a = self.id;
        self.tape.push(y, &[a], move |g, sink| {
            let data = x
                .data()
                .iter()
                .zip(yc.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * d(xi, yi))
                .collect();
            sink.add(a, Tensor::new(x.shape().to_vec(), data));
        })
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    pub fn scale(self, k: F) -> Var<'t, F> {
        self.unary(move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(self, k: F) -> Var<'t, F> {
        self.unary(move |x| x + k, |_, _| F::one())
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary(
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(self, slope: F) -> Var<'t, F> {
        self.unary(
            move |x| if x > F::zero() { x } else { x * slope },
            move |x, _| if x > F::zero() { F::one() } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t, F> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (F::one() + x * (F::one() - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'t, F> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, F> {
        self.unary(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.unary(|x| x.sqrt(), |_, y| F::of(0.5) / y)
    }

    pub fn square(self) -> Var<'t, F> {
        self.unary(|x| x * x, |x, _| F::of(2.0) * x)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(self, lo: F, hi: F) -> Var<'t, F> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    /// `max(x, bound)`. Gradients still flow below the bound when they would
    /// push `x` back up, so parameters stuck under the bound can recover.
    pub fn lower_bound(self, bound: F) -> Var<'t, F> {
        let x = self.value();
        let y = Arc::new(x.map(|v| v.max(bound)));
        let a = self.id;
        self.tape.push(y, &[a], move |g, sink| {
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xi, &gi)| {
                    if xi >= bound || gi < F::zero() {
                        gi
                    } else {
                        F::zero()
                    }
                })
                .collect();
            sink.add(a, Tensor::new(x.shape().to_vec(), data));
        })
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn round_ste(self) -> Var<'t, F> {
        self.unary(|x| x.round(), |_, _| F::one())
    }

    fn binary(
        self,
        other: Var<'t, F>,
        f: impl Fn(F, F) -> F,
        da: impl Fn(F, F) -> F + 'static,
        db: impl Fn(F, F) -> F + 'static,
    ) -> Var<'t, F> {
        let x = self.value();
        let y = other.value();
        assert_eq!(
            x.shape(),
            y.shape(),
            "elementwise op on mismatched shapes"
        );
        let out = Arc::new(x.zip_map(&y, f));
        let (a, b) = (self.id, other.id);
        self.tape.push(out, &[a, b], move |g, sink| {
            let grad_for = |d: &dyn Fn(F, F) -> F| {
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * d(xi, yi))
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            };
            if sink.wants(a) {
                sink.add(a, grad_for(&da));
            }
            if sink.wants(b) {
                sink.add(b, grad_for(&db));
            }
        })
    }

    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, |a, b| a + b, |_, _| F::one(), |_, _| F::one())
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, |a, b| a - b, |_, _| F::one(), |_, _| -F::one())
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(
            other,
            |a, b| a / b,
            |_, b| F::one() / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = Arc::new((*x).clone().reshape(shape));
        let a = self.id;
        self.tape.push(out, &[a], move |g, sink| {
            sink.add(a, g.clone().reshape(in_shape.clone()));
        })
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<F: Real>(x: F) -> F {
    if x > F::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
