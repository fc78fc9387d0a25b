//! Map descriptors, τ-metric derivatives, potentials and inverse branches.

mod tangent;

pub use tangent::Tangent;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::xfer::TruncationPolicy;

pub const DEFAULT_PREIMAGE_TOL: f64 = 1e-10;
pub const DEFAULT_POLE_GUARD: f64 = 1e-8;

/// Result of evaluating a meromorphic map: a finite value or the point at infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapValue {
    Finite(Complex64),
    Infinity,
}

impl MapValue {
    pub fn finite(self) -> Option<Complex64> {
        match self {
            MapValue::Finite(z) => Some(z),
            MapValue::Infinity => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, MapValue::Infinity)
    }
}

/// Concrete map families with known branch structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapFamily {
    Tangent(Tangent),
}

/// A BK-class map together with the metadata the thermodynamic machinery needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BkMapDescriptor {
    pub name: String,
    pub family: MapFamily,
    /// Upper bound `M` for pole multiplicities.
    pub max_multiplicity: u32,
    /// Nevanlinna order `ρ` (metadata, not computed).
    pub order: f64,
    /// Radius with `f⁻¹(B(R0))` a union of pole neighbourhoods.
    pub r0: f64,
    /// Lower bound for `|z|` on the Julia set.
    pub t_floor: f64,
    /// Quarter distance from the Julia set to the post-singular closure.
    pub delta: f64,
    pub sing_radius: f64,
    pub preimage_tol: f64,
    pub pole_guard: f64,
}

/// Admissible `(τ, t)` pair for the geometric potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    pub tau: f64,
    pub t: f64,
}

impl PotentialParams {
    pub fn new(tau: f64, t: f64) -> Self {
        Self { tau, t }
    }

    /// Checks `1 < τ < 1 + 1/M` and `t > ρ/(τ − 1)`.
    pub fn validate(&self, m: &BkMapDescriptor) -> Result<()> {
        let upper = 1.0 + 1.0 / m.max_multiplicity as f64;
        if !(self.tau > 1.0 && self.tau < upper) {
            return Err(Error::invalid(format!(
                "tau = {} outside (1, {upper})",
                self.tau
            )));
        }
        let t_min = m.order / (self.tau - 1.0);
        if !(self.t > t_min) {
            return Err(Error::invalid(format!(
                "t = {} not above rho/(tau-1) = {t_min}",
                self.t
            )));
        }
        Ok(())
    }

    pub fn is_admissible(&self, m: &BkMapDescriptor) -> bool {
        self.validate(m).is_ok()
    }

    /// Exponent `(1 + 1/M − τ)t` of the `|w|` decay of transfer weights.
    pub fn w_exponent(&self, m: &BkMapDescriptor) -> f64 {
        (1.0 + 1.0 / m.max_multiplicity as f64 - self.tau) * self.t
    }

    /// Exponent `(τ − 1)t` of the `|z|` decay of transfer weights.
    pub fn z_exponent(&self) -> f64 {
        (self.tau - 1.0) * self.t
    }
}

/// One solution `z` of `f(z) = w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreimageBranch {
    pub branch_index: i64,
    pub z: Complex64,
    pub fprime: Complex64,
    /// `|f'(z)|_τ^{-t}`, i.e. `exp Φ_t(z)`.
    pub metric_weight: f64,
}

/// Branches of one point in enumeration order (`0, 1, −1, 2, −2, …`) with a
/// certified bound for everything not enumerated.
#[derive(Debug, Clone, Default)]
pub struct BranchSet {
    pub branches: Vec<PreimageBranch>,
    pub tail: f64,
}

impl BranchSet {
    pub fn total_weight(&self) -> f64 {
        self.branches.iter().map(|b| b.metric_weight).sum()
    }
}

/// Branch indices in enumeration order up to `|k| ≤ n`.
pub(crate) fn enumeration_order(n: u32) -> impl Iterator<Item = i64> {
    std::iter::once(0).chain((1..=n as i64).flat_map(|k| [k, -k]))
}

impl BkMapDescriptor {
    /// Tangent family `λ·tan z` with `M = 1`, `ρ = 1`.
    ///
    /// `t_floor` and `delta` start from the closed-form basin boundary and are
    /// refined by [`BkMapDescriptor::calibrated`] once a cloud is sampled.
    pub fn tangent(lambda: f64) -> Result<Self> {
        let tan = Tangent::new(lambda)?;
        let t_floor = tan.julia_floor().map(|x| x * (1.0 - 1e-9)).unwrap_or(1e-3);
        let mut m = Self {
            name: format!("tangent(lambda={lambda})"),
            family: MapFamily::Tangent(tan),
            max_multiplicity: 1,
            order: 1.0,
            r0: (2.0_f64).max(2.0 * lambda),
            t_floor,
            delta: 0.0,
            sing_radius: lambda,
            preimage_tol: DEFAULT_PREIMAGE_TOL,
            pole_guard: DEFAULT_POLE_GUARD,
        };
        let orbit = m.singular_orbit(400);
        let dist = orbit
            .iter()
            .map(|s| {
                // distance from s to the real set {|x| >= t_floor}
                let dx = (s.re.abs() - t_floor).min(0.0);
                (dx * dx + s.im * s.im).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        m.delta = (dist / 4.0).max(1e-12);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_multiplicity < 1 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if !self.order.is_finite() || self.order < 0.0 {
            return Err(Error::invalid("rho must be finite and nonnegative"));
        }
        if !(self.r0 > 1.0) {
            return Err(Error::invalid("R0 must exceed 1"));
        }
        if !(self.t_floor > 0.0) || !(self.delta > 0.0) {
            return Err(Error::invalid("T_floor and delta must be positive"));
        }
        if !(self.preimage_tol > 0.0) || !(self.pole_guard > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }

    /// Replaces `t_floor` and `delta` by the values estimated from a sampled cloud.
    pub fn calibrated(&self, points: &[Complex64]) -> Self {
        let mut m = self.clone();
        if points.is_empty() {
            return m;
        }
        let min_mod = points
            .iter()
            .map(|z| z.norm())
            .fold(f64::INFINITY, f64::min);
        m.t_floor = m.t_floor.min(min_mod * (1.0 - 1e-9));
        let orbit = self.singular_orbit(400);
        let dist = points
            .iter()
            .flat_map(|p| orbit.iter().map(move |s| (p - s).norm()))
            .fold(f64::INFINITY, f64::min);
        if dist.is_finite() && dist > 0.0 {
            m.delta = dist / 4.0;
        }
        m
    }

    pub fn singular_orbit(&self, steps: usize) -> Vec<Complex64> {
        match &self.family {
            MapFamily::Tangent(t) => t.singular_orbit(steps),
        }
    }

    pub fn pole_distance(&self, z: Complex64) -> f64 {
        match &self.family {
            MapFamily::Tangent(_) => Tangent::pole_distance(z),
        }
    }

    /// `f(z)`, with the infinity sentinel within `pole_guard` of a pole.
    pub fn eval(&self, z: Complex64) -> MapValue {
        if !z.is_finite() || self.pole_distance(z) < self.pole_guard {
            return MapValue::Infinity;
        }
        let v = match &self.family {
            MapFamily::Tangent(t) => t.value(z),
        };
        if v.is_finite() {
            MapValue::Finite(v)
        } else {
            MapValue::Infinity
        }
    }

    fn eval_checked(&self, z: Complex64) -> Result<Complex64> {
        self.eval(z).finite().ok_or(Error::PoleProximity {
            z,
            distance: self.pole_distance(z),
        })
    }

    /// `f'(z)` given `f(z)`.
    pub fn deriv_with_value(&self, _z: Complex64, fz: Complex64) -> Complex64 {
        match &self.family {
            MapFamily::Tangent(t) => t.derivative_from_value(fz),
        }
    }

    pub fn deriv(&self, z: Complex64) -> Result<Complex64> {
        let fz = self.eval_checked(z)?;
        Ok(self.deriv_with_value(z, fz))
    }

    /// `|f'(z)|_τ = |f'(z)|·|z|^τ/|f(z)|^τ`.
    pub fn metric_deriv(&self, z: Complex64, p: &PotentialParams) -> Result<f64> {
        let fz = self.eval_checked(z)?;
        metric_deriv_parts(z, fz, self.deriv_with_value(z, fz), p.tau)
    }

    /// `Φ_t(z) = −t·log|f'(z)|_τ`.
    pub fn potential(&self, z: Complex64, p: &PotentialParams) -> Result<f64> {
        Ok(-p.t * self.metric_deriv(z, p)?.ln())
    }

    /// The preimage of `w` on one branch, with its derivative and weight.
    pub fn branch(&self, w: Complex64, k: i64, p: &PotentialParams) -> Result<PreimageBranch> {
        let z = match &self.family {
            MapFamily::Tangent(t) => t.branch(w, k, self.pole_guard)?,
        };
        let fprime = self.deriv_with_value(z, w);
        let md = metric_deriv_parts(z, w, fprime, p.tau)?;
        Ok(PreimageBranch {
            branch_index: k,
            z,
            fprime,
            metric_weight: md.powf(-p.t),
        })
    }

    /// Branch points `z_k` for `k` in the given index list (no weights).
    pub fn branch_points(&self, w: Complex64, indices: &[i64]) -> Result<Vec<(i64, Complex64)>> {
        indices
            .iter()
            .map(|&k| {
                let z = match &self.family {
                    MapFamily::Tangent(t) => t.branch(w, k, self.pole_guard)?,
                };
                Ok((k, z))
            })
            .collect()
    }

    /// Index of the branch that contains `z`.
    pub fn branch_index_of(&self, z: Complex64) -> Result<i64> {
        let fz = self.eval_checked(z)?;
        Ok(match &self.family {
            MapFamily::Tangent(t) => t.branch_index(z, fz),
        })
    }

    /// Bound for the weight of all branches of `w` with `|k| > n`.
    pub fn weight_tail(&self, w: Complex64, n: u32, p: &PotentialParams) -> f64 {
        match &self.family {
            MapFamily::Tangent(t) => {
                let fprime = t.derivative_from_value(w).norm();
                let scale = fprime.powf(-p.t) * w.norm().powf(p.tau * p.t);
                scale * Tangent::branch_modulus_tail(n, p.tau * p.t)
            }
        }
    }

    /// Branches in enumeration order: all `|k| ≤ K`, then extended while the
    /// certified tail exceeds `tail_tol` times the running sum.
    pub fn branch_set(
        &self,
        w: Complex64,
        trunc: &TruncationPolicy,
        p: &PotentialParams,
    ) -> Result<BranchSet> {
        if w.norm() == 0.0 {
            return Err(Error::Domain("transfer weights need w != 0".into()));
        }
        // every branch shares w, hence f'(z) and the arctangent base point
        let base = match &self.family {
            MapFamily::Tangent(t) => t.branch(w, 0, self.pole_guard)?,
        };
        let fprime = self.deriv_with_value(base, w);
        let s = p.tau * p.t;
        let log_scale = -p.t * fprime.norm().ln() + s * w.norm().ln();
        let make = |k: i64| -> Result<PreimageBranch> {
            let z = base + Complex64::new(k as f64 * std::f64::consts::PI, 0.0);
            let r = z.norm();
            if r == 0.0 {
                return Err(Error::Domain(format!("preimage z = 0 of w = {w}")));
            }
            Ok(PreimageBranch {
                branch_index: k,
                z,
                fprime,
                metric_weight: (log_scale - s * r.ln()).exp(),
            })
        };
        let mut branches = Vec::with_capacity(2 * trunc.k as usize + 1);
        let mut running = 0.0;
        for k in enumeration_order(trunc.k) {
            let b = make(k)?;
            running += b.metric_weight;
            branches.push(b);
        }
        let mut n = trunc.k;
        let mut tail = self.weight_tail(w, n, p);
        while tail > trunc.tail_tol * running {
            if n >= trunc.k_max {
                return Err(Error::TruncationFailure {
                    branches: n,
                    certified_tail: tail,
                    tol: trunc.tail_tol * running,
                });
            }
            n += 1;
            for k in [n as i64, -(n as i64)] {
                let b = make(k)?;
                running += b.metric_weight;
                branches.push(b);
            }
            tail = self.weight_tail(w, n, p);
        }
        Ok(BranchSet { branches, tail })
    }

    /// All retained preimages of `w`, sorted by `|z|`.
    pub fn preimages(
        &self,
        w: Complex64,
        trunc: &TruncationPolicy,
        p: &PotentialParams,
    ) -> Result<Vec<PreimageBranch>> {
        let mut set = self.branch_set(w, trunc, p)?.branches;
        set.sort_by(|a, b| a.z.norm().total_cmp(&b.z.norm()));
        Ok(set)
    }

    /// Backward orbit of `w` along `word`: `z_1 = f_{word[0]}^{-1}(w)`, ….
    pub fn pullback_orbit(&self, w: Complex64, word: &[i64]) -> Result<Vec<Complex64>> {
        let mut orbit = Vec::with_capacity(word.len());
        let mut cur = w;
        for (depth, &k) in word.iter().enumerate() {
            let z = match &self.family {
                MapFamily::Tangent(t) => t.branch(cur, k, self.pole_guard),
            }
            .map_err(|e| Error::BranchUndefined {
                depth: depth + 1,
                source: Box::new(e),
            })?;
            orbit.push(z);
            cur = z;
        }
        Ok(orbit)
    }

    /// `S_nΦ_t(z) = Σ_{i<n} Φ_t(f^i z)`.
    pub fn ergodic_sum(&self, z: Complex64, n: usize, p: &PotentialParams) -> Result<f64> {
        let mut cur = z;
        let mut sum = 0.0;
        for i in 0..n {
            let fz = self
                .eval(cur)
                .finite()
                .ok_or(Error::OrbitEscape { depth: i })?;
            let md = metric_deriv_parts(cur, fz, self.deriv_with_value(cur, fz), p.tau)?;
            sum -= p.t * md.ln();
            cur = fz;
        }
        Ok(sum)
    }

    /// Forward orbit `z, f(z), …, f^n(z)`.
    pub fn forward_orbit(&self, z: Complex64, n: usize) -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(n + 1);
        out.push(z);
        let mut cur = z;
        for i in 0..n {
            cur = self
                .eval(cur)
                .finite()
                .ok_or(Error::OrbitEscape { depth: i })?;
            out.push(cur);
        }
        Ok(out)
    }

    /// The pole with index `k` in the family's own numbering, with its multiplicity.
    pub fn pole(&self, k: i64) -> (Complex64, u32) {
        match &self.family {
            MapFamily::Tangent(_) => (Complex64::new(Tangent::pole(k), 0.0), 1),
        }
    }

    /// Poles with `|a| ≤ R` and their multiplicities, sorted by modulus.
    pub fn poles(&self, radius: f64) -> Result<Vec<(Complex64, u32)>> {
        if !(radius > 0.0) {
            return Err(Error::invalid("pole radius must be positive"));
        }
        let mut out = match &self.family {
            MapFamily::Tangent(_) => {
                let kmax = (radius / std::f64::consts::PI).ceil() as i64 + 1;
                (-kmax - 1..=kmax)
                    .map(Tangent::pole)
                    .filter(|a| a.abs() <= radius)
                    .map(|a| (Complex64::new(a, 0.0), 1))
                    .collect::<Vec<_>>()
            }
        };
        out.sort_by(|a, b| {
            a.0.norm()
                .total_cmp(&b.0.norm())
                .then(a.0.re.total_cmp(&b.0.re))
        });
        Ok(out)
    }

    /// `Σ |z|^{-u}` over the nonzero preimages of `w`, optionally only those with `|z| ≤ radius`.
    ///
    /// Without a radius the series is summed directly for `|k| ≤ 10⁴` and the rest
    /// is closed by a midpoint integral; it is infinite for `u ≤ ρ`.
    pub fn inverse_modulus_sum(&self, w: Complex64, u: f64, radius: Option<f64>) -> Result<f64> {
        let MapFamily::Tangent(t) = &self.family;
        let a = t.branch(w, 0, self.pole_guard)?;
        let term = |k: i64| {
            let z = a + Complex64::new(k as f64 * std::f64::consts::PI, 0.0);
            let r = z.norm();
            if r == 0.0 {
                0.0
            } else {
                r.powf(-u)
            }
        };
        if let Some(radius) = radius {
            let kmax = (radius / std::f64::consts::PI).ceil() as i64 + 1;
            let mut sum = 0.0;
            for k in enumeration_order(kmax as u32) {
                let z = a + Complex64::new(k as f64 * std::f64::consts::PI, 0.0);
                if z.norm() <= radius && z.norm() > 0.0 {
                    sum += z.norm().powf(-u);
                }
            }
            return Ok(sum);
        }
        if u <= self.order {
            return Ok(f64::INFINITY);
        }
        const DIRECT: i64 = 10_000;
        let mut sum = 0.0;
        for k in enumeration_order(DIRECT as u32) {
            sum += term(k);
        }
        let pi = std::f64::consts::PI;
        let x0 = DIRECT as f64 + 0.5;
        let upper = (a.re + x0 * pi).abs();
        let lower = (x0 * pi - a.re).abs();
        sum += (upper.powf(1.0 - u) + lower.powf(1.0 - u)) / (pi * (u - 1.0));
        Ok(sum)
    }

    /// Upper bound for `sup L_t𝟙` over the Julia set.
    ///
    /// Uses `|z| ≥ T_floor` for every preimage, `|Re z_k| ≥ (|k| − 1/2)π` and
    /// `|f'(z)| ≥ (|w|² − λ²)/λ`, maximised over `|w| ≥ T_floor` on a log grid.
    pub fn transfer_sup_bound(&self, p: &PotentialParams) -> f64 {
        let MapFamily::Tangent(tan) = &self.family;
        let lambda = tan.lambda;
        let s = p.tau * p.t;
        let pi = std::f64::consts::PI;
        let mut modulus_sum = self.t_floor.powf(-s);
        for k in 1..=200u32 {
            let r = ((k as f64 - 0.5) * pi).max(self.t_floor);
            modulus_sum += 2.0 * r.powf(-s);
        }
        modulus_sum += Tangent::branch_modulus_tail(200, s);
        let mut sup: f64 = 0.0;
        let (lo, hi) = (self.t_floor.ln(), 1e8_f64.ln());
        let steps = 4000;
        for i in 0..=steps {
            let r = (lo + (hi - lo) * i as f64 / steps as f64).exp();
            let d = (r * r - lambda * lambda) / lambda;
            if d <= 0.0 {
                return f64::INFINITY;
            }
            sup = sup.max(d.powf(-p.t) * r.powf(s));
        }
        // the grid is geometric with ratio < 1.005; pad for the gap between nodes
        sup * modulus_sum * 1.005_f64.powf(s + 2.0 * p.t)
    }

    /// Finite asymptotic values (points where inverse branches are undefined).
    pub fn omitted_values(&self) -> Vec<Complex64> {
        match &self.family {
            MapFamily::Tangent(t) => t.asymptotic_values().to_vec(),
        }
    }

    /// Residual check `|f(z) − w| ≤ tol·(1 + |w|)`.
    pub fn is_preimage(&self, z: Complex64, w: Complex64, tol: f64) -> bool {
        match self.eval(z) {
            MapValue::Finite(fz) => (fz - w).norm() <= tol * (1.0 + w.norm()),
            MapValue::Infinity => false,
        }
    }

    /// Polishes `hint` into a repelling fixed point.
    ///
    /// Newton steps on `f(z) − z`; on the real line falls back to bisection inside
    /// the pole-free interval containing the hint.
    pub fn repelling_fixed_point(&self, hint: Complex64) -> Result<Complex64> {
        let mut z = hint;
        let mut converged = false;
        for _ in 0..60 {
            let Some(fz) = self.eval(z).finite() else {
                break;
            };
            let g = fz - z;
            let dg = self.deriv_with_value(z, fz) - 1.0;
            if dg.norm() == 0.0 {
                break;
            }
            let step = g / dg;
            z -= step;
            if !z.is_finite() {
                break;
            }
            if step.norm() < 1e-15 * (1.0 + z.norm()) {
                converged = true;
                break;
            }
        }
        let near_hint = (z - hint).norm() < std::f64::consts::FRAC_PI_2;
        if !(converged && near_hint) {
            if hint.im.abs() > 1e-12 {
                return Err(Error::SeedPolish(format!("Newton failed from {hint}")));
            }
            z = Complex64::new(self.real_fixed_point_bisect(hint.re)?, 0.0);
        }
        let fp = self.deriv(z)?;
        if fp.norm() <= 1.0 {
            return Err(Error::SeedPolish(format!(
                "fixed point {z} is not repelling (|f'| = {})",
                fp.norm()
            )));
        }
        Ok(z)
    }

    fn real_fixed_point_bisect(&self, hint: f64) -> Result<f64> {
        let MapFamily::Tangent(t) = &self.family;
        let g = |x: f64| t.value(Complex64::new(x, 0.0)).re - x;
        let k = ((hint - std::f64::consts::FRAC_PI_2) / std::f64::consts::PI).floor() as i64;
        let lo = Tangent::pole(k) + 1e-9;
        let hi = Tangent::pole(k + 1) - 1e-9;
        // scan for sign changes and take the bracket nearest to the hint
        let steps = 4000;
        let h = (hi - lo) / steps as f64;
        let mut best: Option<(f64, f64)> = None;
        let mut prev = (lo, g(lo));
        for i in 1..=steps {
            let x = lo + i as f64 * h;
            let gx = g(x);
            if prev.1.signum() != gx.signum() {
                let dist = (0.5 * (prev.0 + x) - hint).abs();
                if best.is_none_or(|(a, b)| dist < (0.5 * (a + b) - hint).abs()) {
                    best = Some((prev.0, x));
                }
            }
            prev = (x, gx);
        }
        let (mut a, mut b) = best.ok_or_else(|| {
            Error::SeedPolish(format!("no real fixed point between poles near {hint}"))
        })?;
        let ga = g(a);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if g(mid).signum() == ga.signum() {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// `|f'(z)|·|z|^τ/|f(z)|^τ`, rejecting `z = 0` and `f(z) = 0`.
pub fn metric_deriv_parts(z: Complex64, fz: Complex64, fprime: Complex64, tau: f64) -> Result<f64> {
    let (az, afz) = (z.norm(), fz.norm());
    if az == 0.0 || afz == 0.0 {
        return Err(Error::Domain(format!(
            "metric derivative undefined at z = {z} (f(z) = {fz})"
        )));
    }
    let v = fprime.norm() * (az / afz).powf(tau);
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Domain(format!(
            "metric derivative not finite at {z}"
        )));
    }
    Ok(v)
}
