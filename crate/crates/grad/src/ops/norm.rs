use std::sync::Arc;

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Per-channel statistics measured by [`Var::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance over `N·H·W`.
    pub var: Vec<F>,
}

impl<'t, F: Real> Var<'t, F> {
    /// Batch normalization without affine parameters, using the statistics
    /// of this batch. Returns the normalized tensor and the statistics.
    pub fn batch_norm(self, eps: F) -> (Var<'t, F>, BatchStats<F>) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let m = F::of((n * hw) as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for (i, p) in x.data().chunks(hw).enumerate() {
            mean[i % c] += p.iter().copied().sum::<F>();
        }
        for v in &mut mean {
            *v /= m;
        }
        for (i, p) in x.data().chunks(hw).enumerate() {
            let mu = mean[i % c];
            var[i % c] += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>();
        }
        for v in &mut var {
            *v /= m;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for (i, p) in xhat.chunks_mut(hw).enumerate() {
            let (mu, s) = (mean[i % c], inv_std[i % c]);
            for v in p {
                *v = (*v - mu) * s;
            }
        }
        let xhat = Arc::new(Tensor::new([n, c, h, w], xhat));
        let xh = xhat.clone();
        let a = self.id;
        let out = self.tape.push(xhat, &[a], move |g, sink| {
            // dx = inv_std/M · (M·g − Σg − x̂·Σ(g·x̂)) per channel
            let mut sg = vec![F::zero(); c];
            let mut sgx = vec![F::zero(); c];
            for (i, (gp, xp)) in g.data().chunks(hw).zip(xh.data().chunks(hw)).enumerate() {
                sg[i % c] += gp.iter().copied().sum::<F>();
                sgx[i % c] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<F>();
            }
            let mut dx = vec![F::zero(); n * c * hw];
            for (i, ((dp, gp), xp)) in dx
                .chunks_mut(hw)
                .zip(g.data().chunks(hw))
                .zip(xh.data().chunks(hw))
                .enumerate()
            {
                let ch = i % c;
                let k = inv_std[ch] / m;
                for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                    *d = k * (m * gv - sg[ch] - xv * sgx[ch]);
                }
            }
            sink.add(a, Tensor::new([n, c, h, w], dx));
        });
        (out, BatchStats { mean, var })
    }

    /// `(x - mean_c) / sqrt(var_c + eps)` with fixed statistics.
    pub fn normalize_with(self, mean: &[F], var: &[F], eps: F) -> Var<'t, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let hw = h * w;
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut out = x.data().to_vec();
        for (i, p) in out.chunks_mut(hw).enumerate() {
            let (mu, s) = (mean[i % c], inv_std[i % c]);
            for v in p {
                *v = (*v - mu) * s;
            }
        }
        let a = self.id;
        self.tape
            .push(Arc::new(Tensor::new([n, c, h, w], out)), &[a], move |g, sink| {
                let mut d = g.data().to_vec();
                for (i, p) in d.chunks_mut(hw).enumerate() {
                    let s = inv_std[i % c];
                    for v in p {
                        *v *= s;
                    }
                }
                sink.add(a, Tensor::new([n, c, h, w], d));
            })
    }
}
