//! Weight initialization schemes.
//!
//! All schemes draw i.i.d. zero-mean entries; they differ only in the
//! standard deviation, which is derived from the layer's fan-in `n` and
//! fan-out `m` and then multiplied by `scale`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Gaussian, std `1/√n`.
    LeCun,
    /// Gaussian, std `√(2/(n+m))`.
    Xavier,
    /// Gaussian, std `√(2/((1+a²)·n))`.
    Kaiming,
    /// Gaussian, std `1`.
    PlainGaussian,
    /// Uniform on `[-√3, √3]` (unit std).
    PlainUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub scale: f64,
    #[serde(default)]
    pub leaky_slope_a: f64,
}

impl InitScheme {
    pub fn new(kind: InitKind, scale: f64) -> Self {
        Self {
            kind,
            scale,
            leaky_slope_a: 0.0,
        }
    }

    pub fn lecun() -> Self {
        Self::new(InitKind::LeCun, 1.0)
    }

    pub fn kaiming(a: f64) -> Self {
        Self {
            kind: InitKind::Kaiming,
            scale: 1.0,
            leaky_slope_a: a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Precondition(format!(
                "init scale must be > 0, got {}",
                self.scale
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope_a) {
            return Err(Error::Precondition(format!(
                "leaky slope must lie in [0, 1), got {}",
                self.leaky_slope_a
            )));
        }
        Ok(())
    }

    /// Standard deviation for a layer with fan-in `n` and fan-out `m`.
    pub fn std(&self, fan_in: usize, fan_out: usize) -> f64 {
        let (n, m) = (fan_in as f64, fan_out as f64);
        let base = match self.kind {
            InitKind::LeCun => (1.0 / n).sqrt(),
            InitKind::Xavier => (2.0 / (n + m)).sqrt(),
            InitKind::Kaiming => (2.0 / ((1.0 + self.leaky_slope_a.powi(2)) * n)).sqrt(),
            InitKind::PlainGaussian | InitKind::PlainUniform => 1.0,
        };
        self.scale * base
    }

    pub fn variance(&self, fan_in: usize, fan_out: usize) -> f64 {
        self.std(fan_in, fan_out).powi(2)
    }
}

/// Draws a weight tensor of shape `dims`. For a dense `m×n` weight the fan-in
/// is `n` and the fan-out `m`; for a `c_out×c_in×k_h×k_w` kernel they are
/// `c_in·k_h·k_w` and `c_out·k_h·k_w`.
pub fn init_weights(dims: &[usize], scheme: &InitScheme, rng: &mut Rng) -> Result<Tensor> {
    scheme.validate()?;
    let (fan_in, fan_out) = fans(dims)?;
    let std = scheme.std(fan_in, fan_out);
    let t = match scheme.kind {
        InitKind::PlainUniform => {
            let half = std * 3f64.sqrt();
            Tensor::from_fn(dims, || rng.uniform_in(-half, half))
        }
        _ => Tensor::from_fn(dims, || std * rng.gaussian()),
    };
    Ok(t)
}

pub fn fans(dims: &[usize]) -> Result<(usize, usize)> {
    match *dims {
        [m, n] if m > 0 && n > 0 => Ok((n, m)),
        [c_out, c_in, k_h, k_w] if dims.iter().all(|&d| d > 0) => {
            Ok((c_in * k_h * k_w, c_out * k_h * k_w))
        }
        _ => Err(Error::Shape(format!(
            "weights must be m×n or c_out×c_in×k_h×k_w, got {dims:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn second_moment(t: &Tensor) -> f64 {
        t.data().iter().map(|x| x * x).sum::<f64>() / t.len() as f64
    }

    #[test]
    fn lecun_variance_monte_carlo() {
        let mut rng = Rng::new(0);
        // 10⁴ × 100 = 10⁶ samples with fan-in 100.
        let w = init_weights(&[10_000, 100], &InitScheme::lecun(), &mut rng).unwrap();
        let v = second_moment(&w);
        assert!((v - 0.01).abs() < 0.01 * 0.05, "variance {v}");
    }

    #[test]
    fn xavier_symmetric_equals_lecun() {
        let x = InitScheme::new(InitKind::Xavier, 1.0);
        for n in [1, 7, 64, 300] {
            let l = InitScheme::lecun().variance(n, n);
            assert!((x.variance(n, n) - l).abs() < 1e-15 * l.max(1.0));
        }
    }

    #[test]
    fn kaiming_relu_doubles_lecun() {
        let k = InitScheme::kaiming(0.0);
        assert!((k.variance(50, 20) - 2.0 * InitScheme::lecun().variance(50, 20)).abs() < 1e-15);
        let leaky = InitScheme::kaiming(0.2);
        let expect = 2.0 / 1.04 / 50.0;
        assert!((leaky.variance(50, 20) - expect).abs() < 1e-15);
    }

    #[test]
    fn uniform_has_requested_std() {
        let mut rng = Rng::new(4);
        let s = InitScheme::new(InitKind::PlainUniform, 0.5);
        let w = init_weights(&[500, 400], &s, &mut rng).unwrap();
        assert!((second_moment(&w) - 0.25).abs() < 0.25 * 0.02);
        let bound = 0.5 * 3f64.sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn conv_fans() {
        assert_eq!(fans(&[8, 4, 3, 3]).unwrap(), (36, 72));
        assert_eq!(fans(&[3, 5]).unwrap(), (5, 3));
        assert!(fans(&[3]).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let s = InitScheme::lecun();
        let a = init_weights(&[4, 4, 3, 3], &s, &mut Rng::new(9)).unwrap();
        let b = init_weights(&[4, 4, 3, 3], &s, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_nonpositive_scale() {
        let s = InitScheme::new(InitKind::LeCun, 0.0);
        assert!(init_weights(&[2, 2], &s, &mut Rng::new(0)).is_err());
    }
}
