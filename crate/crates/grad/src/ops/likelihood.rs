use std::sync::Arc;

use crate::real::{normal_cdf, normal_pdf, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Probability mass of the unit-width bin centred on `v` under
/// `N(mu, sigma²)`, evaluated on the lower tail for accuracy.
#[inline]
pub fn gaussian_bin_mass<F: Real>(v: F, mu: F, sigma: F) -> F {
    let d = (v - mu).abs();
    let half = F::of(0.5);
    normal_cdf((half - d) / sigma) - normal_cdf((-half - d) / sigma)
}

impl<'t, F: Real> Var<'t, F> {
    /// Elementwise information content `−log2 P[v]` of `v` under a
    /// discretized Gaussian with per-element `mu` and `sigma`.
    /// Probabilities are floored at `floor`; floored elements pass no gradient.
    pub fn gaussian_bits(self, mu: Var<'t, F>, sigma: Var<'t, F>, floor: F) -> Var<'t, F> {
        let v = self.value();
        let m = mu.value();
        let s = sigma.value();
        assert_eq!(v.shape(), m.shape(), "gaussian_bits: mean shape");
        assert_eq!(v.shape(), s.shape(), "gaussian_bits: scale shape");
        let inv_ln2 = F::one() / F::of(std::f64::consts::LN_2);
        let bits = v
            .data()
            .iter()
            .zip(m.data())
            .zip(s.data())
            .map(|((&vi, &mi), &si)| -gaussian_bin_mass(vi, mi, si).max(floor).ln() * inv_ln2)
            .collect();
        let shape = v.shape().to_vec();
        let (va, ma, sa) = (self.id, mu.id, sigma.id);
        self.tape.push(
            Arc::new(Tensor::new(shape.clone(), bits)),
            &[va, ma, sa],
            move |g, sink| {
                let len = v.len();
                let mut dv = vec![F::zero(); len];
                let mut ds = vec![F::zero(); len];
                let half = F::of(0.5);
                for i in 0..len {
                    let (vi, mi, si) = (v.data()[i], m.data()[i], s.data()[i]);
                    let p = gaussian_bin_mass(vi, mi, si);
                    if p <= floor {
                        continue;
                    }
                    let diff = vi - mi;
                    let d = diff.abs();
                    let a = (half - d) / si;
                    let b = (-half - d) / si;
                    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
                    let dp_dd = (pb - pa) / si;
                    let dp_ds = (b * pb - a * pa) / si;
                    let dbits_dp = -inv_ln2 / p;
                    let sign = if diff > F::zero() {
                        F::one()
                    } else if diff < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    dv[i] = g.data()[i] * dbits_dp * dp_dd * sign;
                    ds[i] = g.data()[i] * dbits_dp * dp_ds;
                }
                if sink.wants(ma) {
                    sink.add(ma, Tensor::new(shape.clone(), dv.iter().map(|&x| -x).collect()));
                }
                if sink.wants(va) {
                    sink.add(va, Tensor::new(shape.clone(), dv));
                }
                sink.add(sa, Tensor::new(shape.clone(), ds));
            },
        )
    }
}
