//! Spatial ops on `[N, C, H, W]` tensors.

use std::sync::Arc;

use crate::real::{gemm, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Real>(x: &[F], g: &Geometry, cols: &mut [F]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], g: &Geometry, dx: &mut [F]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, F: Real> Var<'t, F> {
    /// 2D cross-correlation with square kernel `w[O, C, k, k]`, zero padding.
    pub fn conv2d(
        self,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, F> {
        let x = self.value();
        let wv = weight.value();
        let (n, c, h, w) = x.dims4();
        let (o, wc, k, k2) = wv.dims4();
        assert_eq!(k, k2, "conv2d: kernel must be square");
        assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
        assert!(stride >= 1);
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "conv2d: input {h}x{w} smaller than kernel {k}"
        );
        let g = Geometry {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let ckk = c * k * k;
        let plane = g.ho * g.wo;
        let bv = bias.map(|b| b.value());
        let mut out = vec![F::zero(); n * o * plane];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![F::zero(); ckk * plane]
        };
        for s in 0..n {
            let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
            let src: &[F] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let os = &mut out[s * o * plane..(s + 1) * o * plane];
            gemm(o, ckk, plane, wv.data(), false, src, false, os, F::zero());
            if let Some(bv) = &bv {
                for (p, &b) in os.chunks_mut(plane).zip(bv.data()) {
                    for v in p {
                        *v += b;
                    }
                }
            }
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let (xa, wa, ba) = (self.id, weight.id, bias.map(|b| b.id));
        self.tape.push(
            Arc::new(Tensor::new([n, o, g.ho, g.wo], out)),
            &parents,
            move |gr, sink| {
                let want_x = sink.wants(xa);
                let want_w = sink.wants(wa);
                let mut dw = if want_w { vec![F::zero(); o * ckk] } else { Vec::new() };
                let mut dx = if want_x { vec![F::zero(); n * c * h * w] } else { Vec::new() };
                let mut cols = vec![F::zero(); ckk * plane];
                for s in 0..n {
                    let gs = &gr.data()[s * o * plane..(s + 1) * o * plane];
                    if want_w {
                        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
                        let src: &[F] = if g.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, &g, &mut cols);
                            &cols
                        };
                        // dW += dY · colsᵀ
                        gemm(o, plane, ckk, gs, false, src, true, &mut dw, F::one());
                    }
                    if want_x {
                        let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                        if g.is_pointwise() {
                            gemm(ckk, o, plane, wv.data(), true, gs, false, dxs, F::one());
                        } else {
                            gemm(ckk, o, plane, wv.data(), true, gs, false, &mut cols, F::zero());
                            col2im(&cols, &g, dxs);
                        }
                    }
                }
                if want_w {
                    sink.add(wa, Tensor::new([o, c, k, k], dw));
                }
                if want_x {
                    sink.add(xa, Tensor::new([n, c, h, w], dx));
                }
                if let Some(ba) = ba {
                    if sink.wants(ba) {
                        let mut db = vec![F::zero(); o];
                        for (i, p) in gr.data().chunks(plane).enumerate() {
                            db[i % o] += p.iter().copied().sum::<F>();
                        }
                        sink.add(ba, Tensor::new([o], db));
                    }
                }
            },
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t, F> {
        assert!(factor >= 1);
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for (p, op) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    op[oy * wo + ox] = p[(oy / factor) * w + ox / factor];
                }
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, c, ho, wo], out)), &[a], move |g, sink| {
                let mut d = vec![F::zero(); n * c * h * w];
                for (gp, dp) in g.data().chunks(ho * wo).zip(d.chunks_mut(h * w)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dp[(oy / factor) * w + ox / factor] += gp[oy * wo + ox];
                        }
                    }
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }

    /// 2×2 average pooling with stride 2 (odd trailing row/col dropped).
    pub fn avg_pool2(self) -> Var<'t, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2 on {h}x{w}");
        let q = F::of(0.25);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for (p, op) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, xx) = (2 * oy, 2 * ox);
                    op[oy * wo + ox] = q
                        * (p[y * w + xx] + p[y * w + xx + 1] + p[(y + 1) * w + xx] + p[(y + 1) * w + xx + 1]);
                }
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, c, ho, wo], out)), &[a], move |g, sink| {
                let mut d = vec![F::zero(); n * c * h * w];
                for (gp, dp) in g.data().chunks(ho * wo).zip(d.chunks_mut(h * w)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = q * gp[oy * wo + ox];
                            let (y, xx) = (2 * oy, 2 * ox);
                            dp[y * w + xx] += v;
                            dp[y * w + xx + 1] += v;
                            dp[(y + 1) * w + xx] += v;
                            dp[(y + 1) * w + xx + 1] += v;
                        }
                    }
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }

    /// Per-channel `k×k` mean filter without padding (output shrinks by `k-1`).
    pub fn box_filter(self, k: usize) -> Var<'t, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(k >= 1 && h >= k && w >= k, "box_filter {k} on {h}x{w}");
        let (ho, wo) = (h - k + 1, w - k + 1);
        let inv = F::one() / F::of((k * k) as f64);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for (p, op) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = F::zero();
                    for dy in 0..k {
                        let row = &p[(oy + dy) * w + ox..(oy + dy) * w + ox + k];
                        s += row.iter().copied().sum::<F>();
                    }
                    op[oy * wo + ox] = s * inv;
                }
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, c, ho, wo], out)), &[a], move |g, sink| {
                let mut d = vec![F::zero(); n * c * h * w];
                for (gp, dp) in g.data().chunks(ho * wo).zip(d.chunks_mut(h * w)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = gp[oy * wo + ox] * inv;
                            for dy in 0..k {
                                for dv in &mut dp[(oy + dy) * w + ox..(oy + dy) * w + ox + k] {
                                    *dv += v;
                                }
                            }
                        }
                    }
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }
}
