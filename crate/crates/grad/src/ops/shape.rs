//! Reductions, broadcasting and dense layers.

use std::sync::Arc;

use crate::real::{gemm, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, F: Real> Var<'t, F> {
    pub fn sum(self) -> Var<'t, F> {
        let x = self.value();
        let out = Arc::new(Tensor::scalar(x.sum()));
        let shape = x.shape().to_vec();
        let a = self.id;
        self.tape.push(out, &[a], move |g, sink| {
            sink.add(a, Tensor::full(shape.clone(), g.data()[0]));
        })
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().len();
        self.sum().scale(F::one() / F::of(n as f64))
    }

    /// Mean over every axis except the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(self) -> Var<'t, F> {
        let x = self.value();
        let n = x.shape()[0];
        let per = x.len() / n;
        let inv = F::one() / F::of(per as f64);
        let data = x
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        let shape = x.shape().to_vec();
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n], data)), &[a], move |g, sink| {
                let mut out = Vec::with_capacity(n * per);
                for &gi in g.data() {
                    out.extend(std::iter::repeat(gi * inv).take(per));
                }
                sink.add(a, Tensor::new(shape.clone(), out));
            })
    }

    /// Dense layer: `x[N, I] · w[O, I]ᵀ + b[O]`.
    pub fn linear(self, w: Var<'t, F>, b: Option<Var<'t, F>>) -> Var<'t, F> {
        let x = self.value();
        let wv = w.value();
        let (n, i) = x.dims2();
        let (o, wi) = wv.dims2();
        assert_eq!(i, wi, "linear: input width {i} vs weight width {wi}");
        let mut out = vec![F::zero(); n * o];
        gemm(n, i, o, x.data(), false, wv.data(), true, &mut out, F::zero());
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            assert_eq!(bv.len(), o, "linear: bias length");
            for row in out.chunks_mut(o) {
                for (r, &bb) in row.iter_mut().zip(bv.data()) {
                    *r += bb;
                }
            }
        }
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            parents.push(b.id);
        }
        let (xa, wa, ba) = (self.id, w.id, b.map(|b| b.id));
        self.tape.push(
            Arc::new(Tensor::new([n, o], out)),
            &parents,
            move |g, sink| {
                if sink.wants(xa) {
                    let mut dx = vec![F::zero(); n * i];
                    gemm(n, o, i, g.data(), false, wv.data(), false, &mut dx, F::zero());
                    sink.add(xa, Tensor::new([n, i], dx));
                }
                if sink.wants(wa) {
                    let mut dw = vec![F::zero(); o * i];
                    gemm(o, n, i, g.data(), true, x.data(), false, &mut dw, F::zero());
                    sink.add(wa, Tensor::new([o, i], dw));
                }
                if let Some(ba) = ba {
                    if sink.wants(ba) {
                        let mut db = vec![F::zero(); o];
                        for row in g.data().chunks(o) {
                            for (d, &gg) in db.iter_mut().zip(row) {
                                *d += gg;
                            }
                        }
                        sink.add(ba, Tensor::new([o], db));
                    }
                }
            },
        )
    }

    /// `x[N, C, H, W] * s[N, C]` broadcast over space.
    pub fn mul_nc(self, s: Var<'t, F>) -> Var<'t, F> {
        self.nc_op(s, true)
    }

    /// `x[N, C, H, W] + s[N, C]` broadcast over space.
    pub fn add_nc(self, s: Var<'t, F>) -> Var<'t, F> {
        self.nc_op(s, false)
    }

    fn nc_op(self, s: Var<'t, F>, multiply: bool) -> Var<'t, F> {
        let x = self.value();
        let sv = s.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(sv.shape(), &[n, c], "per-channel operand must be [N, C]");
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (plane, &k) in out.chunks_mut(hw).zip(sv.data()) {
            for v in plane {
                if multiply {
                    *v *= k;
                } else {
                    *v += k;
                }
            }
        }
        let (xa, sa) = (self.id, s.id);
        self.tape
            .push(Arc::new(Tensor::new([n, c, h, w], out)), &[xa, sa], move |g, sink| {
                if sink.wants(xa) {
                    let mut dx = g.data().to_vec();
                    if multiply {
                        for (plane, &k) in dx.chunks_mut(hw).zip(sv.data()) {
                            for v in plane {
                                *v *= k;
                            }
                        }
                    }
                    sink.add(xa, Tensor::new([n, c, h, w], dx));
                }
                if sink.wants(sa) {
                    let ds = if multiply {
                        g.data()
                            .chunks(hw)
                            .zip(x.data().chunks(hw))
                            .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                            .collect()
                    } else {
                        g.data().chunks(hw).map(|gp| gp.iter().copied().sum()).collect()
                    };
                    sink.add(sa, Tensor::new([n, c], ds));
                }
            })
    }

    /// `x[N, C, H, W] * m[N, 1, H, W]` broadcast over channels.
    pub fn mul_spatial(self, m: Var<'t, F>) -> Var<'t, F> {
        let x = self.value();
        let mv = m.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(mv.shape(), &[n, 1, h, w], "spatial operand must be [N, 1, H, W]");
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let mp = &mv.data()[(i / c) * hw..(i / c + 1) * hw];
            for (v, &k) in plane.iter_mut().zip(mp) {
                *v *= k;
            }
        }
        let (xa, ma) = (self.id, m.id);
        self.tape
            .push(Arc::new(Tensor::new([n, c, h, w], out)), &[xa, ma], move |g, sink| {
                if sink.wants(xa) {
                    let mut dx = g.data().to_vec();
                    for (i, plane) in dx.chunks_mut(hw).enumerate() {
                        let mp = &mv.data()[(i / c) * hw..(i / c + 1) * hw];
                        for (v, &k) in plane.iter_mut().zip(mp) {
                            *v *= k;
                        }
                    }
                    sink.add(xa, Tensor::new([n, c, h, w], dx));
                }
                if sink.wants(ma) {
                    let mut dm = vec![F::zero(); n * hw];
                    for (i, (gp, xp)) in g.data().chunks(hw).zip(x.data().chunks(hw)).enumerate() {
                        let dp = &mut dm[(i / c) * hw..(i / c + 1) * hw];
                        for ((d, &a), &b) in dp.iter_mut().zip(gp).zip(xp) {
                            *d += a * b;
                        }
                    }
                    sink.add(ma, Tensor::new([n, 1, h, w], dm));
                }
            })
    }

    /// Replicates `v[N, K]` over an `H×W` grid: `[N, K, H, W]`.
    pub fn broadcast_spatial(self, h: usize, w: usize) -> Var<'t, F> {
        let v = self.value();
        let (n, k) = v.dims2();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * k * hw);
        for &x in v.data() {
            out.extend(std::iter::repeat(x).take(hw));
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, k, h, w], out)), &[a], move |g, sink| {
                let d = g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                sink.add(a, Tensor::new([n, k], d));
            })
    }

    /// Channel-wise concatenation of `[N, C_i, H, W]` tensors.
    pub fn concat_channels(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let hw = h * w;
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat: spatial/batch mismatch");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ids_c = ids.clone();
        tape.push(
            Arc::new(Tensor::new([n, total, h, w], out)),
            &ids,
            move |g, sink| {
                let mut offset = 0;
                for (&id, &c) in ids_c.iter().zip(&chans) {
                    if sink.wants(id) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let base = s * total * hw + offset * hw;
                            d.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        sink.add(id, Tensor::new([n, c, h, w], d));
                    }
                    offset += c;
                }
            },
        )
    }

    /// Channels `start..start + len` of `[N, C, H, W]`.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(start + len <= c, "slice_channels: {start}+{len} > {c}");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            out.extend_from_slice(&x.data()[base..base + len * hw]);
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, len, h, w], out)), &[a], move |g, sink| {
                let mut d = vec![F::zero(); n * c * hw];
                for s in 0..n {
                    let base = (s * c + start) * hw;
                    d[base..base + len * hw].copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }

    /// Top-left `oh×ow` window of `[N, C, H, W]`.
    pub fn crop_spatial(self, oh: usize, ow: usize) -> Var<'t, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(oh <= h && ow <= w, "crop_spatial: {oh}x{ow} exceeds {h}x{w}");
        if (oh, ow) == (h, w) {
            return self;
        }
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for r in 0..oh {
                out.extend_from_slice(&plane[r * w..r * w + ow]);
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, c, oh, ow], out)), &[a], move |g, sink| {
                let mut d = vec![F::zero(); n * c * h * w];
                for (dp, gp) in d.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for r in 0..oh {
                        dp[r * w..r * w + ow].copy_from_slice(&gp[r * ow..(r + 1) * ow]);
                    }
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }

    /// Replicates a per-channel vector `[C]` to `[N, C, H, W]`.
    pub fn channel_broadcast(self, n: usize, h: usize, w: usize) -> Var<'t, F> {
        let v = self.value();
        assert_eq!(v.shape().len(), 1, "channel_broadcast expects [C]");
        let c = v.len();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for _ in 0..n {
            for &x in v.data() {
                out.extend(std::iter::repeat(x).take(hw));
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, c, h, w], out)), &[a], move |g, sink| {
                let mut d = vec![F::zero(); c];
                for (i, p) in g.data().chunks(hw).enumerate() {
                    d[i % c] += p.iter().copied().sum::<F>();
                }
                sink.add(a, Tensor::new([c], d));
            })
    }

    /// Sum over channels: `[N, C, H, W] → [N, 1, H, W]`.
    pub fn sum_channels(self) -> Var<'t, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = vec![F::zero(); n * hw];
        for (i, p) in x.data().chunks(hw).enumerate() {
            for (o, &v) in out[(i / c) * hw..(i / c + 1) * hw].iter_mut().zip(p) {
                *o += v;
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, 1, h, w], out)), &[a], move |g, sink| {
                let mut d = Vec::with_capacity(n * c * hw);
                for s in 0..n {
                    for _ in 0..c {
                        d.extend_from_slice(&g.data()[s * hw..(s + 1) * hw]);
                    }
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }
}
