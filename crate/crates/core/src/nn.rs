//! Layer building blocks bound to a [`ParamStore`].

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tsic_grad::{BatchStats, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; statistics are recorded.
    Train,
    /// Running statistics.
    Eval,
}

/// Forward-pass context: which tape, which normalization mode, and whether
/// parameters are bound as trainable leaves or as constants.
pub struct Ctx<'t, F: Real> {
    pub tape: &'t Tape<F>,
    pub mode: Mode,
    trainable: bool,
    stats: RefCell<Vec<BatchStats<F>>>,
}

impl<'t, F: Real> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, mode: Mode, trainable: bool) -> Self {
        Self {
            tape,
            mode,
            trainable,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn eval(tape: &'t Tape<F>) -> Self {
        Self::new(tape, Mode::Eval, false)
    }

    pub fn bind(&self, store: &ParamStore<F>, id: ParamId) -> Var<'t, F> {
        if self.trainable {
            self.tape.param(store, id)
        } else {
            self.tape.frozen(store, id)
        }
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(t)
    }

    pub(crate) fn record_stats(&self, s: BatchStats<F>) {
        self.stats.borrow_mut().push(s);
    }

    /// Normalization statistics recorded in [`Mode::Train`], in call order.
    pub fn take_stats(&self) -> Vec<BatchStats<F>> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

pub(crate) fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| F::of(rng.gen_range(-bound..bound)))
}

/// Square-kernel convolution with "same"-style padding `k / 2`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[cout, cin, k, k], (6.0 / fan_in).sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Multiplies the initial weights by `factor`.
    pub fn scaled<F: Real>(self, store: &mut ParamStore<F>, factor: f64) -> Self {
        for w in store.get_mut(self.weight).data_mut() {
            *w *= F::of(factor);
        }
        self
    }

    /// All-zero weights and bias.
    pub fn zeroed<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, store: &ParamStore<F>, x: Var<'t, F>) -> Var<'t, F> {
        x.conv2d(
            ctx.bind(store, self.weight),
            Some(ctx.bind(store, self.bias)),
            self.stride,
            self.pad,
        )
    }

    pub fn out_channels<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[dout, din], gain * (3.0 / din as f64).sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dout]));
        Self { weight, bias }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, store: &ParamStore<F>, x: Var<'t, F>) -> Var<'t, F> {
        x.linear(ctx.bind(store, self.weight), Some(ctx.bind(store, self.bias)))
    }
}

pub(crate) const LEAK: f64 = 0.2;

pub(crate) fn act<'t, F: Real>(x: Var<'t, F>) -> Var<'t, F> {
    x.leaky_relu(F::of(LEAK))
}
