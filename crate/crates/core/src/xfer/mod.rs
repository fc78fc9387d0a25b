//! Transfer operator `L_tφ(w) = Σ_{f(z)=w} |f'(z)|_τ^{-t} φ(z)`.
//!
//! Constant functions are iterated exactly on preimage trees; general functions
//! are handled on a Julia cloud with nearest-neighbour lookup.

mod grid;
pub mod surrogate;
mod tree;

pub use grid::{
    apply, cesaro_density, power_density, DensityEstimate, DensitySummary, DiscreteOperator,
    GridFunction,
};
pub use tree::{PreimageTree, TreeLevel, TreeSummary};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BkMapDescriptor, BranchSet, PotentialParams};

/// How many inverse branches and tree nodes are retained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// Branches `|k| ≤ k` are always enumerated.
    pub k: u32,
    /// Hard cap for the adaptive extension.
    pub k_max: u32,
    /// Enumeration stops once the certified branch tail is below `tail_tol` times the running sum.
    pub tail_tol: f64,
    /// Tree nodes lighter than `node_tol` times their level's mass are dropped (and certified).
    pub node_tol: f64,
    pub node_budget: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            k: 60,
            k_max: 4000,
            tail_tol: 1e-8,
            node_tol: 1e-10,
            node_budget: 6_000_000,
        }
    }
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.k > self.k_max {
            return Err(Error::invalid("truncation K exceeds K_max"));
        }
        if !(self.tail_tol > 0.0) || !(self.node_tol >= 0.0) {
            return Err(Error::invalid(
                "tail_tol must be positive and node_tol nonnegative",
            ));
        }
        if self.node_budget == 0 {
            return Err(Error::invalid("node budget must be positive"));
        }
        Ok(())
    }

    /// The oracle configuration: twice the branch range.
    pub fn doubled(&self) -> Self {
        Self {
            k: 2 * self.k,
            k_max: self.k_max.max(2 * self.k),
            ..*self
        }
    }
}

/// A countable-branch backward system with positive weights.
///
/// The map model with the geometric potential is the main instance; finite
/// surrogates with known pressure implement it for testing.
pub trait PreimageSystem: Sync {
    /// Weighted preimages of `w` in a fixed order, with a bound for what was left out.
    fn branch_set(&self, w: Complex64) -> Result<BranchSet>;

    /// Forward map, `None` at poles.
    fn forward(&self, z: Complex64) -> Option<Complex64>;

    /// Upper bound for `sup L𝟙` on the invariant set.
    fn one_norm_bound(&self) -> f64;
}

/// The geometric-potential operator of a map at fixed `(τ, t)` and truncation.
///
/// `log_shift` subtracts a constant from the potential, i.e. uses `e^{Φ_t − c}`.
#[derive(Debug, Clone)]
pub struct TruncatedOperator<'a> {
    pub model: &'a BkMapDescriptor,
    pub params: PotentialParams,
    pub trunc: TruncationPolicy,
    pub log_shift: f64,
}

impl<'a> TruncatedOperator<'a> {
    pub fn new(
        model: &'a BkMapDescriptor,
        params: PotentialParams,
        trunc: TruncationPolicy,
    ) -> Result<Self> {
        params.validate(model)?;
        trunc.validate()?;
        Ok(Self {
            model,
            params,
            trunc,
            log_shift: 0.0,
        })
    }

    pub fn shifted(mut self, c: f64) -> Self {
        self.log_shift = c;
        self
    }
}

impl PreimageSystem for TruncatedOperator<'_> {
    fn branch_set(&self, w: Complex64) -> Result<BranchSet> {
        let mut set = self.model.branch_set(w, &self.trunc, &self.params)?;
        if self.log_shift != 0.0 {
            let s = (-self.log_shift).exp();
            for b in &mut set.branches {
                b.metric_weight *= s;
            }
            set.tail *= s;
        }
        Ok(set)
    }

    fn forward(&self, z: Complex64) -> Option<Complex64> {
        self.model.eval(z).finite()
    }

    fn one_norm_bound(&self) -> f64 {
        self.model.transfer_sup_bound(&self.params) * (-self.log_shift).exp()
    }
}

/// `L_t^n𝟙(w)` summed exactly over the truncated preimage tree.
pub fn power_one(
    m: &BkMapDescriptor,
    w: Complex64,
    n: usize,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<(f64, PreimageTree)> {
    if n < 1 {
        return Err(Error::invalid("power_one needs n >= 1"));
    }
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    let tree = PreimageTree::build(&op, w, n, trunc.node_tol, trunc.node_budget)?;
    Ok((tree.value(n), tree))
}

/// `e^{-nP}·L_t^n𝟙(w)`.
pub fn normalized_power_one(
    m: &BkMapDescriptor,
    w: Complex64,
    n: usize,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
    pressure: f64,
) -> Result<f64> {
    let (v, _) = power_one(m, w, n, p, trunc)?;
    Ok(v * (-(n as f64) * pressure).exp())
}

/// Constants of the outer-tail estimate `L_t𝟙_{|z|>R}(w) ≤ c_t/R^{r_t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConstants {
    /// Fitted constant of the τ-derivative estimate.
    pub c: f64,
    /// Exponent `α` with `ρ < α < (τ−1)t`.
    pub alpha: f64,
    /// `sup_w Σ |z|^{-α}` over the sample.
    pub m_alpha: f64,
    pub c_t: f64,
    pub r_t: f64,
}

/// Fits the tail constants on sample points of the Julia set.
///
/// `c` is the sup over all sampled preimage pairs of
/// `(|f'(z)|_τ^{-t}·|w|^{(1+1/M−τ)t}·|z|^{(τ−1)t})^{1/t}` and `α` is the midpoint
/// of `(ρ, (τ−1)t)`.
pub fn tail_constants(
    m: &BkMapDescriptor,
    samples: &[Complex64],
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<TailConstants> {
    p.validate(m)?;
    if samples.is_empty() {
        return Err(Error::invalid("tail constants need at least one sample"));
    }
    let (a, b) = (p.w_exponent(m), p.z_exponent());
    let alpha = 0.5 * (m.order + b);
    let mut c: f64 = 0.0;
    let mut m_alpha: f64 = 0.0;
    for &w in samples {
        for br in m.branch_set(w, trunc, p)?.branches {
            let log_ratio = br.metric_weight.ln() + a * w.norm().ln() + b * br.z.norm().ln();
            c = c.max((log_ratio / p.t).exp());
        }
        m_alpha = m_alpha.max(m.inverse_modulus_sum(w, alpha, None)?);
    }
    let r_t = b - m.order;
    let c_t = c.powf(p.t) * m.t_floor.powf(-a) * m_alpha;
    Ok(TailConstants {
        c,
        alpha,
        m_alpha,
        c_t,
        r_t,
    })
}

/// `c_t/R^{r_t}` with `r_t = (τ−1)t − ρ`.
pub fn tail_bound(
    m: &BkMapDescriptor,
    radius: f64,
    p: &PotentialParams,
    k: &TailConstants,
) -> Result<f64> {
    p.validate(m)?;
    if !(radius > 1.0) {
        return Err(Error::invalid("tail bound needs R > 1"));
    }
    Ok(k.c_t / radius.powf(p.z_exponent() - m.order))
}

/// `Σ_{f(z)=w, |z|>R} |f'(z)|_τ^{-t}` summed over the enumerated branches plus their certified tail.
pub fn outer_tail(
    m: &BkMapDescriptor,
    w: Complex64,
    radius: f64,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<f64> {
    let set = m.branch_set(w, trunc, p)?;
    let inner: f64 = set
        .branches
        .iter()
        .filter(|b| b.z.norm() > radius)
        .map(|b| b.metric_weight)
        .sum();
    Ok(inner + set.tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (BkMapDescriptor, PotentialParams) {
        (
            BkMapDescriptor::tangent(0.5).unwrap(),
            PotentialParams::new(1.5, 3.0),
        )
    }

    #[test]
    fn tail_exponent_and_monotonicity() {
        let (m, p) = setup();
        let zs = m.repelling_fixed_point(Complex64::new(4.6, 0.0)).unwrap();
        let k = tail_constants(&m, &[zs], &p, &TruncationPolicy::default()).unwrap();
        assert!((k.r_t - 0.5).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for r in [2.0, 5.0, 50.0, 5e3, 5e6] {
            let b = tail_bound(&m, r, &p, &k).unwrap();
            assert!(b < prev);
            prev = b;
        }
        assert!(prev < 1e-2 * tail_bound(&m, 2.0, &p, &k).unwrap());
        assert!(tail_bound(&m, 0.5, &p, &k).is_err());
        assert!(tail_bound(&m, 5.0, &PotentialParams::new(1.5, 1.5), &k).is_err());
    }

    #[test]
    fn power_one_level_one_matches_branch_sum() {
        let (m, p) = setup();
        let w = Complex64::new(2.3, 0.0);
        let trunc = TruncationPolicy::default();
        let (v, tree) = power_one(&m, w, 1, &p, &trunc).unwrap();
        let direct = m.branch_set(w, &trunc, &p).unwrap().total_weight();
        assert!((v - direct).abs() <= 1e-15 * direct + tree.level(1).dropped);
    }

    #[test]
    fn normalized_with_zero_pressure_is_power_one() {
        let (m, p) = setup();
        let w = Complex64::new(4.6, 0.0);
        let trunc = TruncationPolicy {
            k: 10,
            ..TruncationPolicy::default()
        };
        let (v, _) = power_one(&m, w, 3, &p, &trunc).unwrap();
        assert_eq!(normalized_power_one(&m, w, 3, &p, &trunc, 0.0).unwrap(), v);
    }

    #[test]
    fn sup_bound_dominates_sampled_values() {
        let (m, p) = setup();
        let bound = m.transfer_sup_bound(&p);
        let trunc = TruncationPolicy::default();
        for x in [1.17, 1.3, 1.5, 2.0, 4.6, 10.0, -1.2, 100.0] {
            let v = m
                .branch_set(Complex64::new(x, 0.0), &trunc, &p)
                .unwrap()
                .total_weight();
            assert!(v <= bound, "L1({x}) = {v} > {bound}");
        }
    }
}
