//! Topological pressure from the growth of `L_t^n𝟙`.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::aitken;
use crate::model::{BkMapDescriptor, PotentialParams};
use crate::xfer::{PreimageSystem, PreimageTree, TruncatedOperator, TruncationPolicy};

/// Default depth of the pressure trees.
pub const DEFAULT_N_MAX: usize = 10;

/// Relative slack allowed when checking that increments shrink.
const INCREMENT_SLACK: f64 = 1.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureEstimate {
    pub t: f64,
    pub tau: f64,
    pub value: f64,
    /// `(n, (1/n)·log L^n𝟙(w0))`.
    pub per_n: Vec<(usize, f64)>,
    /// `log(L^n𝟙/L^{n−1}𝟙)`, the sequence that is extrapolated.
    pub log_ratios: Vec<f64>,
    /// Retained tree mass `L^n𝟙(w0)` for `n = 1..=n_max`.
    pub values: Vec<f64>,
    pub basepoint: Complex64,
    /// Covers both the distance to the last raw term and the extrapolation error.
    pub error_bar: f64,
    /// Extrapolation error alone (change of the accelerated value plus certified truncation).
    pub accel_error: f64,
    pub extrapolation: String,
    pub second_basepoint: Complex64,
    pub second_value: f64,
    pub second_error_bar: f64,
    /// Certified truncation error of `L^{n_max}𝟙(w0)`, relative.
    pub relative_certificate: f64,
}

impl PressureEstimate {
    pub fn n_max(&self) -> usize {
        self.per_n.len()
    }

    /// Whether the two basepoints agree within their combined error bars.
    pub fn basepoints_agree(&self) -> bool {
        (self.value - self.second_value).abs() <= self.error_bar + self.second_error_bar
    }
}

/// Raw extrapolation of one tree.
pub(crate) struct TreeFit {
    pub value: f64,
    pub per_n: Vec<(usize, f64)>,
    pub log_ratios: Vec<f64>,
    pub values: Vec<f64>,
    pub error_bar: f64,
    pub accel_error: f64,
    pub relative_certificate: f64,
}

pub(crate) fn fit_tree(tree: &PreimageTree) -> Result<TreeFit> {
    let n_max = tree.depth();
    let values: Vec<f64> = (1..=n_max).map(|n| tree.value(n)).collect();
    if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Convergence {
            message: "tree mass vanished or overflowed".into(),
            per_n: values
                .iter()
                .enumerate()
                .map(|(i, v)| (i + 1, *v))
                .collect(),
        });
    }
    let per_n: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (i + 1, v.ln() / (i + 1) as f64))
        .collect();
    let mut log_ratios = Vec::with_capacity(n_max);
    let mut prev = 1.0_f64;
    for &v in &values {
        log_ratios.push((v / prev).ln());
        prev = v;
    }
    let rel_cert = |n: usize| (tree.tail_certificate(n) / tree.value(n)).ln_1p();
    let relative_certificate = tree.tail_certificate(n_max) / tree.value(n_max);
    let cert_err = if n_max >= 2 {
        rel_cert(n_max) + rel_cert(n_max - 1)
    } else {
        rel_cert(n_max)
    };

    let (value, accel) = if n_max >= 4 {
        let a = aitken(&log_ratios).unwrap_or(log_ratios[n_max - 1]);
        let b = aitken(&log_ratios[..n_max - 1]).unwrap_or(log_ratios[n_max - 2]);
        (a, (a - b).abs())
    } else if n_max >= 2 {
        let a = log_ratios[n_max - 1];
        (a, (a - log_ratios[n_max - 2]).abs())
    } else {
        (log_ratios[0], f64::INFINITY)
    };
    let accel_error = accel + cert_err;
    let last = per_n[n_max - 1].1;
    let error_bar = accel_error.max((last - value).abs());

    // increments of the log-ratios must shrink (up to slack) over the last terms
    if n_max >= 5 {
        let d: Vec<f64> = log_ratios.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let tail = &d[d.len().saturating_sub(4)..];
        let floor = 1e-9 + cert_err;
        if tail
            .windows(2)
            .any(|w| w[1] > INCREMENT_SLACK * w[0] + floor)
        {
            return Err(Error::Convergence {
                message: format!("log-ratio increments do not shrink: {tail:?}"),
                per_n,
            });
        }
    }
    Ok(TreeFit {
        value,
        per_n,
        log_ratios,
        values,
        error_bar,
        accel_error,
        relative_certificate,
    })
}

/// Pressure of a generic backward system from trees rooted at `w0` and at the
/// heaviest first-level preimage of `w0`.
pub fn estimate_pressure_on<S: PreimageSystem>(
    sys: &S,
    w0: Complex64,
    n_max: usize,
    node_tol: f64,
    node_budget: usize,
) -> Result<PressureEstimate> {
    if n_max < 1 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    let tree = PreimageTree::build(sys, w0, n_max, node_tol, node_budget)?;
    let first = fit_tree(&tree)?;
    let lvl = tree.level(1);
    let heaviest = (0..lvl.len())
        .max_by(|&a, &b| lvl.weight[a].total_cmp(&lvl.weight[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Domain("basepoint has no preimages".into()))?;
    let w1 = lvl.points[heaviest];
    let second = fit_tree(&PreimageTree::build(sys, w1, n_max, node_tol, node_budget)?)?;
    let est = PressureEstimate {
        t: f64::NAN,
        tau: f64::NAN,
        value: first.value,
        per_n: first.per_n,
        log_ratios: first.log_ratios,
        values: first.values,
        basepoint: w0,
        error_bar: first.error_bar,
        accel_error: first.accel_error,
        extrapolation: "aitken-log-ratio".into(),
        second_basepoint: w1,
        second_value: second.value,
        second_error_bar: second.error_bar,
        relative_certificate: first.relative_certificate,
    };
    if !est.basepoints_agree() {
        return Err(Error::Disagreement(format!(
            "pressure at {w0} is {} ± {} but at {w1} is {} ± {}",
            est.value, est.error_bar, est.second_value, est.second_error_bar
        )));
    }
    Ok(est)
}

/// `P_t` as the accelerated limit of `log(L^n𝟙(w0)/L^{n−1}𝟙(w0))`.
pub fn estimate_pressure(
    m: &BkMapDescriptor,
    p: &PotentialParams,
    w0: Complex64,
    n_max: usize,
    trunc: &TruncationPolicy,
) -> Result<PressureEstimate> {
    estimate_pressure_shifted(m, p, w0, n_max, trunc, 0.0)
}

/// As [`estimate_pressure`] with the potential replaced by `Φ_t − c`.
pub fn estimate_pressure_shifted(
    m: &BkMapDescriptor,
    p: &PotentialParams,
    w0: Complex64,
    n_max: usize,
    trunc: &TruncationPolicy,
    c: f64,
) -> Result<PressureEstimate> {
    let op = TruncatedOperator::new(m, *p, *trunc)?.shifted(c);
    let mut est = estimate_pressure_on(&op, w0, n_max, trunc.node_tol, trunc.node_budget)?;
    est.t = p.t;
    est.tau = p.tau;
    Ok(est)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureCurve {
    pub tau: f64,
    pub samples: Vec<PressureEstimate>,
    /// Grid values that were rejected, with the reason.
    pub rejected: Vec<(f64, String)>,
}

impl PressureCurve {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.samples.windows(2).all(|w| w[1].value < w[0].value)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "P", "error_bar"])?;
        for s in &self.samples {
            wr.write_record([
                crate::cloud::fmt_f64(s.t),
                crate::cloud::fmt_f64(s.value),
                crate::cloud::fmt_f64(s.error_bar),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Pressure at each `t` of a strictly increasing grid, at shared truncation.
pub fn pressure_curve(
    m: &BkMapDescriptor,
    tau: f64,
    t_grid: &[f64],
    w0: Complex64,
    n_max: usize,
    trunc: &TruncationPolicy,
) -> Result<PressureCurve> {
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("t grid must be strictly increasing"));
    }
    let results: Vec<(f64, Result<PressureEstimate>)> = t_grid
        .par_iter()
        .map(|&t| {
            let p = PotentialParams::new(tau, t);
            (t, estimate_pressure(m, &p, w0, n_max, trunc))
        })
        .collect();
    let mut curve = PressureCurve {
        tau,
        samples: Vec::new(),
        rejected: Vec::new(),
    };
    for (t, r) in results {
        match r {
            Ok(e) => curve.samples.push(e),
            Err(e @ Error::InvalidParams(_)) => curve.rejected.push((t, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}

/// Outcome of the pressure-zero search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PressureZero {
    Root {
        t: f64,
        pressure: f64,
        evaluations: usize,
    },
    NotBracketed {
        t_lo: f64,
        p_lo: f64,
        t_hi: f64,
        p_hi: f64,
    },
}

/// Bisection for a zero of `t ↦ P(t)` on a bracket.
pub fn find_zero_with(
    mut pressure: impl FnMut(f64) -> Result<f64>,
    bracket: (f64, f64),
    tol: f64,
) -> Result<PressureZero> {
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !(tol > 0.0) {
        return Err(Error::invalid("bracket must satisfy lo < hi and tol > 0"));
    }
    let (mut p_lo, p_hi) = (pressure(lo)?, pressure(hi)?);
    let mut evaluations = 2;
    if p_lo.abs() < tol {
        return Ok(PressureZero::Root {
            t: lo,
            pressure: p_lo,
            evaluations,
        });
    }
    if p_hi.abs() < tol {
        return Ok(PressureZero::Root {
            t: hi,
            pressure: p_hi,
            evaluations,
        });
    }
    if p_lo.signum() == p_hi.signum() {
        return Ok(PressureZero::NotBracketed {
            t_lo: lo,
            p_lo,
            t_hi: hi,
            p_hi,
        });
    }
    // evaluations also counts the two bracket ends
    #[allow(clippy::explicit_counter_loop)]
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let pm = pressure(mid)?;
        evaluations += 1;
        if pm.abs() < tol {
            return Ok(PressureZero::Root {
                t: mid,
                pressure: pm,
                evaluations,
            });
        }
        if pm.signum() == p_lo.signum() {
            lo = mid;
            p_lo = pm;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence {
        message: "bisection exhausted without reaching the pressure tolerance".into(),
        per_n: Vec::new(),
    })
}

/// Pressure-zero probe with admissibility and the `2Mρ/(2+Mρ)` reference band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroReport {
    pub result: PressureZero,
    pub tau: f64,
    pub bracket: (f64, f64),
    /// `ρ/(τ−1)`, the admissibility floor for `t`.
    pub t_floor: f64,
    pub root_admissible: Option<bool>,
    /// `2Mρ/(2+Mρ)`.
    pub reference_band: f64,
    pub root_within_band: Option<bool>,
    pub experimental: bool,
}

pub fn find_pressure_zero(
    m: &BkMapDescriptor,
    tau: f64,
    bracket: (f64, f64),
    tol: f64,
    w0: Complex64,
    n_max: usize,
    trunc: &TruncationPolicy,
) -> Result<ZeroReport> {
    for t in [bracket.0, bracket.1] {
        PotentialParams::new(tau, t).validate(m)?;
    }
    let result = find_zero_with(
        |t| Ok(estimate_pressure(m, &PotentialParams::new(tau, t), w0, n_max, trunc)?.value),
        bracket,
        tol,
    )?;
    let mr = m.max_multiplicity as f64 * m.order;
    let band = 2.0 * mr / (2.0 + mr);
    let t_floor = m.order / (tau - 1.0);
    let (adm, within) = match &result {
        PressureZero::Root { t, .. } => (Some(*t > t_floor), Some(*t <= band)),
        PressureZero::NotBracketed { .. } => (None, None),
    };
    Ok(ZeroReport {
        result,
        tau,
        bracket,
        t_floor,
        root_admissible: adm,
        reference_band: band,
        root_within_band: within,
        experimental: true,
    })
}
