//! The tangent family `f(z) = λ·tan z`.
//!
//! Inverse branches are `arctan(w/λ) + kπ` with the principal complex arctangent,
//! poles sit at `π/2 + kπ` (all simple), and the only finite singular values are
//! the asymptotic values `±λi`.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tangent {
    pub lambda: f64,
}

impl Tangent {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!(
                "tangent λ must be positive, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    /// `tan z`, stable for large imaginary parts.
    pub fn tan(z: Complex64) -> Complex64 {
        let (x2, y2) = (2.0 * z.re, 2.0 * z.im);
        let ch = y2.cosh();
        if ch.is_infinite() {
            return Complex64::new(0.0, y2.signum());
        }
        let denom = x2.cos() + ch;
        Complex64::new(x2.sin() / denom, y2.sinh() / denom)
    }

    pub fn value(&self, z: Complex64) -> Complex64 {
        Self::tan(z) * self.lambda
    }

    /// `f' = λ(1 + tan²z) = λ + f²/λ`.
    pub fn derivative_from_value(&self, fz: Complex64) -> Complex64 {
        Complex64::new(self.lambda, 0.0) + fz * fz / self.lambda
    }

    pub fn pole(k: i64) -> f64 {
        FRAC_PI_2 + k as f64 * PI
    }

    /// Distance from `z` to the nearest pole.
    pub fn pole_distance(z: Complex64) -> f64 {
        let k = ((z.re - FRAC_PI_2) / PI).round() as i64;
        (z - Complex64::new(Self::pole(k), 0.0)).norm()
    }

    pub fn asymptotic_values(&self) -> [Complex64; 2] {
        [
            Complex64::new(0.0, self.lambda),
            Complex64::new(0.0, -self.lambda),
        ]
    }

    /// The preimage of `w` on branch `k`.
    pub fn branch(&self, w: Complex64, k: i64, guard: f64) -> Result<Complex64> {
        for a in self.asymptotic_values() {
            if (w - a).norm() < guard * (1.0 + self.lambda) {
                return Err(Error::OmittedValue { w });
            }
        }
        let q = w / self.lambda;
        Ok(q.atan() + Complex64::new(k as f64 * PI, 0.0))
    }

    /// Branch index of `z`, i.e. the `k` with `z = arctan(f(z)/λ) + kπ`.
    pub fn branch_index(&self, z: Complex64, fz: Complex64) -> i64 {
        let base = (fz / self.lambda).atan();
        ((z - base).re / PI).round() as i64
    }

    /// Upper bound for `Σ_{|k| > n} |z_k|^{-s}` over the preimages of `w`.
    ///
    /// Uses `|z_k| ≥ |Re z_k| ≥ (|k| − 1/2)π` and an integral comparison.
    pub fn branch_modulus_tail(n: u32, s: f64) -> f64 {
        if s <= 1.0 {
            return f64::INFINITY;
        }
        let n = n.max(1) as f64;
        2.0 * PI.powf(-s) * (n - 0.5).powf(1.0 - s) / (s - 1.0)
    }

    /// Smallest positive real fixed point `tan x = x/λ` in `(0, π/2)`; it bounds the
    /// Julia set away from the origin when `0 < λ < 1`.
    pub fn julia_floor(&self) -> Option<f64> {
        if self.lambda >= 1.0 {
            return None;
        }
        let g = |x: f64| self.lambda * x.tan() - x;
        let (mut lo, mut hi) = (1e-6_f64, FRAC_PI_2 - 1e-12);
        if g(lo) >= 0.0 || g(hi) <= 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Forward orbits of the singular values, `steps` points each.
    pub fn singular_orbit(&self, steps: usize) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(2 * steps);
        for a in self.asymptotic_values() {
            let mut z = a;
            for _ in 0..steps {
                out.push(z);
                if Self::pole_distance(z) < 1e-12 {
                    break;
                }
                let next = self.value(z);
                if !next.is_finite() {
                    break;
                }
                z = next;
            }
        }
        out
    }
}
