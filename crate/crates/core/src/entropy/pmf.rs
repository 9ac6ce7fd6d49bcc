//! Integer probability tables for the range coder.

use tsic_grad::gaussian_bin_mass;

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
/// Largest half-width of a per-element symbol window.
pub const MAX_RADIUS: u32 = 2000;
/// Window half-width in units of the scale.
const RADIUS_SCALES: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pmf {
    /// Cumulative frequencies `cum[0] = 0 < … < cum[K] = TOTAL`.
    Table(Vec<u32>),
    /// Every 16-bit value equally likely.
    Uniform16,
}

impl Pmf {
    /// Quantizes probabilities to integer frequencies summing to [`TOTAL`]
    /// with every symbol keeping at least frequency one.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let k = probs.len();
        if k == 0 || k >= TOTAL as usize {
            return Err(Error::Pmf(format!("{k} symbols do not fit a 16-bit table")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Pmf("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        let spare = (TOTAL as usize - k) as f64;
        let mut freq: Vec<u32> = probs
            .iter()
            .map(|p| if sum > 0.0 { 1 + (p / sum * spare).floor() as u32 } else { 1 })
            .collect();
        let used: u32 = freq.iter().sum();
        let mode = (0..k).max_by_key(|&i| (freq[i], std::cmp::Reverse(i))).unwrap_or(0);
        freq[mode] += TOTAL - used;
        let mut cum = Vec::with_capacity(k + 1);
        let mut acc = 0;
        cum.push(0);
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        Ok(Pmf::Table(cum))
    }

    pub fn symbols(&self) -> usize {
        match self {
            Pmf::Table(cum) => cum.len() - 1,
            Pmf::Uniform16 => TOTAL as usize,
        }
    }

    /// `(start, frequency)` of `symbol`.
    pub fn interval(&self, symbol: usize) -> Option<(u32, u32)> {
        match self {
            Pmf::Table(cum) => (symbol + 1 < cum.len()).then(|| (cum[symbol], cum[symbol + 1] - cum[symbol])),
            Pmf::Uniform16 => (symbol < TOTAL as usize).then_some((symbol as u32, 1)),
        }
    }

    /// Symbol whose interval contains `target < TOTAL`.
    pub fn lookup(&self, target: u32) -> usize {
        match self {
            Pmf::Table(cum) => cum.partition_point(|&c| c <= target) - 1,
            Pmf::Uniform16 => target as usize,
        }
    }

    /// Ideal code length of `symbol` in bits.
    pub fn bits(&self, symbol: usize) -> f64 {
        let (_, f) = self.interval(symbol).expect("symbol in range");
        PRECISION as f64 - (f as f64).log2()
    }
}

/// Discretized Gaussian over a window centred on the rounded location, with
/// a trailing escape symbol for values outside the window.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementPmf {
    pub center: i64,
    pub radius: u32,
    pub pmf: Pmf,
}

impl ElementPmf {
    pub fn gaussian(loc: f32, scale: f32) -> Result<Self> {
        if !loc.is_finite() || !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Pmf(format!("invalid density location {loc} scale {scale}")));
        }
        let (mu, sigma) = (loc as f64, scale as f64);
        let center = mu.round() as i64;
        let radius = ((RADIUS_SCALES * sigma).ceil() as u32).saturating_add(1).min(MAX_RADIUS);
        let mut probs: Vec<f64> = (-(radius as i64)..=radius as i64)
            .map(|d| gaussian_bin_mass((center + d) as f64, mu, sigma))
            .collect();
        let inside: f64 = probs.iter().sum();
        probs.push((1.0 - inside).max(0.0));
        Ok(Self {
            center,
            radius,
            pmf: Pmf::from_probs(&probs)?,
        })
    }

    pub fn escape(&self) -> usize {
        2 * self.radius as usize + 1
    }

    /// In-window symbol of `value`, or `None` if it needs the escape.
    pub fn symbol(&self, value: i64) -> Option<usize> {
        let d = value - self.center;
        (d.unsigned_abs() <= self.radius as u64).then(|| (d + self.radius as i64) as usize)
    }

    pub fn value(&self, symbol: usize) -> i64 {
        self.center + symbol as i64 - self.radius as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_table_costs_exactly_eight_bits() {
        let pmf = Pmf::from_probs(&[1.0 / 256.0; 256]).unwrap();
        for s in 0..256 {
            assert_eq!(pmf.interval(s).unwrap().1, 256);
            assert_eq!(pmf.bits(s), 8.0);
        }
    }

    #[test]
    fn every_symbol_keeps_nonzero_frequency() {
        let mut p = vec![0.0; 10];
        p[3] = 1.0;
        let Pmf::Table(cum) = Pmf::from_probs(&p).unwrap() else { panic!() };
        assert_eq!(*cum.last().unwrap(), TOTAL);
        assert!(cum.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lookup_inverts_interval() {
        let pmf = Pmf::from_probs(&[0.1, 0.5, 0.0, 0.4]).unwrap();
        for s in 0..4 {
            let (start, f) = pmf.interval(s).unwrap();
            assert_eq!(pmf.lookup(start), s);
            assert_eq!(pmf.lookup(start + f - 1), s);
        }
    }

    #[test]
    fn gaussian_window_is_centred_and_bounded() {
        let e = ElementPmf::gaussian(2.6, 0.5).unwrap();
        assert_eq!(e.center, 3);
        assert_eq!(e.radius, 5);
        assert_eq!(e.symbol(3), Some(5));
        assert_eq!(e.symbol(9), None);
        assert_eq!(e.value(e.symbol(-2).unwrap()), -2);
        let wide = ElementPmf::gaussian(0.0, 1e6).unwrap();
        assert_eq!(wide.radius, MAX_RADIUS);
        assert!(ElementPmf::gaussian(0.0, 0.0).is_err());
    }
}
