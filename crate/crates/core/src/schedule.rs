//! Cosine ᾱ schedule and the closed-form forward corruption.

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ_t = f(t) / f(0)` with
    /// `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`, per-step β clipped at
    /// [`MAX_BETA`].
    pub fn cosine(total_steps: usize, offset: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(Error::InvalidArgument(format!("schedule offset {offset} not in (0, 1)")));
        }
        let big_t = total_steps as f64;
        let f = |t: usize| {
            let x = ((t as f64 / big_t + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        // Until the first clipped β the ratio form equals the running product.
        let mut clipped = false;
        for t in 1..=total_steps {
            let ratio = f(t) / f(t - 1);
            let beta = 1.0 - ratio;
            if beta > MAX_BETA {
                clipped = true;
            }
            let prev = alpha_bar[t - 1];
            let next = if clipped {
                prev * (1.0 - beta.min(MAX_BETA))
            } else {
                f(t) / f0
            };
            alpha_bar.push(next);
        }
        Ok(Self {
            total_steps,
            offset,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t` for `t ∈ [-1, T]`; `ᾱ_{-1}` is defined as 1.
    pub fn alpha_bar_at(&self, t: i64) -> Result<f64> {
        if t == -1 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bar[t as usize])
    }

    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: i64) -> Result<()> {
        if t < 0 || t as usize > self.total_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.total_steps as i64,
            });
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
    pub fn corrupt(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t as i64)?;
        check_len(z0, eps)?;
        let a = self.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(z0.iter().zip(eps).map(|(&x, &e)| sa * x + sn * e).collect())
    }

    /// Algebraic inverse of [`corrupt`](Self::corrupt) given the noise used.
    pub fn invert_corrupt(&self, zt: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t as i64)?;
        check_len(zt, eps)?;
        if t == 0 {
            return Ok(zt.to_vec());
        }
        let a = self.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(zt.iter().zip(eps).map(|(&z, &e)| (z - sn * e) / sa).collect())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} elements", a.len()),
            actual: format!("{} elements", b.len()),
        });
    }
    Ok(())
}
