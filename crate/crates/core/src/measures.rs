//! Atomic approximations of `ν_s`, the conformal measure `m_t` and the Gibbs state `μ_t`.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{fmt_f64, JuliaCloud};
use crate::error::{Error, Result};
use crate::fit;
use crate::model::{BkMapDescriptor, PotentialParams};
use crate::pressure::fit_tree;
use crate::xfer::{
    DiscreteOperator, GridFunction, PreimageSystem, PreimageTree, TruncatedOperator,
    TruncationPolicy,
};

/// Atoms closer than this (relative to `1 + |z|`) are merged.
const MERGE_TOL: f64 = 1e-12;

/// Share of `ν_s` carried by the folded series tail above which a warning is attached.
pub const SERIES_TAIL_TOL: f64 = 0.1;

/// Change of the test integrals (relative to `∫|φ|`) that ends the `ε` schedule.
pub const SCHEDULE_STABILITY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NuS,
    AdjointPower,
    Gibbs,
}

/// A finite weighted sum of Dirac masses, sorted by point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<(Complex64, f64)>,
    pub total_mass: f64,
    pub provenance: Provenance,
    /// `log c` of the relation `L_t^*m = c·m` the atoms approximate, when known.
    pub log_eigenvalue: Option<f64>,
}

impl AtomicMeasure {
    /// Sorts the atoms and merges coincident points.
    pub fn new(atoms: Vec<(Complex64, f64)>, provenance: Provenance) -> Result<Self> {
        let mut atoms = atoms;
        if atoms
            .iter()
            .any(|a| !(a.1 >= 0.0 && a.1.is_finite()) || !a.0.re.is_finite() || !a.0.im.is_finite())
        {
            return Err(Error::invalid(
                "atoms need finite points and finite nonnegative weights",
            ));
        }
        atoms.sort_by(|a, b| a.0.re.total_cmp(&b.0.re).then(a.0.im.total_cmp(&b.0.im)));
        let mut merged: Vec<(Complex64, f64)> = Vec::with_capacity(atoms.len());
        for (z, w) in atoms {
            match merged.last_mut() {
                Some(last) if (last.0 - z).norm() <= MERGE_TOL * (1.0 + z.norm()) => last.1 += w,
                _ => merged.push((z, w)),
            }
        }
        let total_mass = merged.iter().map(|a| a.1).sum();
        Ok(Self {
            atoms: merged,
            total_mass,
            provenance,
            log_eigenvalue: None,
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn with_log_eigenvalue(mut self, c: f64) -> Self {
        self.log_eigenvalue = Some(c);
        self
    }

    /// The probability measure `self/total_mass`.
    pub fn normalized(&self) -> Result<Self> {
        if !(self.total_mass > 0.0) {
            return Err(Error::Domain(
                "cannot normalize a measure without mass".into(),
            ));
        }
        let atoms: Vec<_> = self
            .atoms
            .iter()
            .map(|&(z, w)| (z, w / self.total_mass))
            .collect();
        let total_mass = atoms.iter().map(|a| a.1).sum();
        Ok(Self {
            atoms,
            total_mass,
            ..self.clone()
        })
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass - 1.0).abs() <= 1e-12
    }

    /// `∫φ dμ`, summed in atom order.
    pub fn integrate(&self, phi: impl Fn(Complex64) -> f64) -> f64 {
        self.atoms.iter().map(|&(z, w)| w * phi(z)).sum()
    }

    pub fn mass_where(&self, pred: impl Fn(Complex64) -> bool) -> f64 {
        self.atoms.iter().filter(|a| pred(a.0)).map(|a| a.1).sum()
    }

    /// Mass of the open disk `D(c, r)`.
    pub fn disk_mass(&self, c: Complex64, r: f64) -> f64 {
        self.mass_where(|z| (z - c).norm() < r)
    }

    /// `μ({|z| > R})/μ(ℂ)`.
    pub fn tail_mass(&self, radius: f64) -> f64 {
        if !(self.total_mass > 0.0) {
            return 0.0;
        }
        self.mass_where(|z| z.norm() > radius) / self.total_mass
    }

    /// Writes `re,im,weight` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["re", "im", "weight"])?;
        for (z, m) in &self.atoms {
            wr.write_record([fmt_f64(z.re), fmt_f64(z.im), fmt_f64(*m)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        r: R,
        provenance: Provenance,
        log_eigenvalue: Option<f64>,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            re: f64,
            im: f64,
            weight: f64,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut atoms = Vec::new();
        for row in rd.deserialize() {
            let row: Row = row?;
            atoms.push((Complex64::new(row.re, row.im), row.weight));
        }
        let mut mu = Self::new(atoms, provenance)?;
        mu.log_eigenvalue = log_eigenvalue;
        Ok(mu)
    }
}

/// JSON header stored next to an atom CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureHeader {
    pub provenance: Provenance,
    pub tau: f64,
    pub t: f64,
    pub pressure: Option<f64>,
    pub truncation: TruncationPolicy,
    pub atoms: usize,
    pub total_mass: f64,
    /// Certified truncation error of the tree mass, relative.
    pub tail_certificate: f64,
    pub notes: Vec<String>,
}

/// Bounded continuous test functions on the Julia set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFn {
    One,
    Modulus,
    Real,
    ExpDecay,
    Disk { radius: f64 },
}

impl TestFn {
    pub fn eval(&self, z: Complex64) -> f64 {
        match *self {
            TestFn::One => 1.0,
            TestFn::Modulus => z.norm(),
            TestFn::Real => z.re,
            TestFn::ExpDecay => (-z.norm()).exp(),
            TestFn::Disk { radius } => f64::from(u8::from(z.norm() < radius)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TestFn::One => "1".into(),
            TestFn::Modulus => "|w|".into(),
            TestFn::Real => "Re w".into(),
            TestFn::ExpDecay => "exp(-|w|)".into(),
            TestFn::Disk { radius } => format!("1_D(0,{radius})"),
        }
    }
}

/// `{1, |w|, Re w, exp(−|w|), 1_{D(0,5)}}`.
pub fn default_test_fns() -> Vec<TestFn> {
    vec![
        TestFn::One,
        TestFn::Modulus,
        TestFn::Real,
        TestFn::ExpDecay,
        TestFn::Disk { radius: 5.0 },
    ]
}

fn leaves(
    tree: &PreimageTree,
    n: usize,
    scale: f64,
) -> impl Iterator<Item = (Complex64, f64)> + '_ {
    let lvl = tree.level(n);
    lvl.points
        .iter()
        .zip(&lvl.weight)
        .map(move |(&z, &w)| (z, w * scale))
}

/// `(L_t^n)^*δ_{w0}` on any backward system, with its tree.
pub fn adjoint_delta_on<S: PreimageSystem>(
    sys: &S,
    w0: Complex64,
    n: usize,
    node_tol: f64,
    node_budget: usize,
) -> Result<(AtomicMeasure, PreimageTree)> {
    if n < 1 {
        return Err(Error::invalid("adjoint_delta needs n >= 1"));
    }
    let tree = PreimageTree::build(sys, w0, n, node_tol, node_budget)?;
    Ok((adjoint_from_tree(&tree, n)?, tree))
}

fn adjoint_from_tree(tree: &PreimageTree, n: usize) -> Result<AtomicMeasure> {
    let mut mu = AtomicMeasure::new(leaves(tree, n, 1.0).collect(), Provenance::AdjointPower)?;
    // keep the tree's own summation so the mass matches L^n𝟙(w0) exactly
    mu.total_mass = tree.value(n);
    Ok(mu)
}

/// `(L_t^n)^*δ_{w0}`: depth-`n` tree leaves weighted by `exp(S_nΦ_t)`.
pub fn adjoint_delta(
    m: &BkMapDescriptor,
    w0: Complex64,
    n: usize,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<AtomicMeasure> {
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    Ok(adjoint_delta_on(&op, w0, n, trunc.node_tol, trunc.node_budget)?.0)
}

/// `ν_s` with its series bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeasure {
    pub measure: AtomicMeasure,
    pub s: f64,
    /// Pressure estimate used to fold the series tail.
    pub pressure: f64,
    /// Share of the mass contributed by terms beyond `n_max`.
    pub series_tail: f64,
    pub warning: Option<String>,
}

/// `ν_s = (1/S)Σ_n e^{−ns}(L_t^n)^*δ_{w0}` with `b_n ≡ 1`.
///
/// Terms beyond `n_max` are folded into level `n_max`: with `q = e^{P̂−s}` they
/// contribute `q/(1−q)` times its mass, distributed like the deepest leaves.
pub fn nu_s(
    m: &BkMapDescriptor,
    w0: Complex64,
    s: f64,
    p: &PotentialParams,
    n_max: usize,
    trunc: &TruncationPolicy,
) -> Result<SeriesMeasure> {
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    let tree = PreimageTree::build(&op, w0, n_max, trunc.node_tol, trunc.node_budget)?;
    let pressure = fit_tree(&tree)?.value;
    nu_s_from_tree(&tree, s, pressure)
}

fn nu_s_from_tree(tree: &PreimageTree, s: f64, pressure: f64) -> Result<SeriesMeasure> {
    if !(s > pressure) {
        return Err(Error::invalid(format!(
            "nu_s needs s above the pressure estimate {pressure}, got {s}"
        )));
    }
    let n_max = tree.depth();
    if n_max < 1 {
        return Err(Error::invalid("nu_s needs n_max >= 1"));
    }
    let q = (pressure - s).exp();
    let fold = q / (1.0 - q);
    let mut atoms = Vec::new();
    let mut folded = 0.0;
    for n in 1..=n_max {
        let mut c = (-(n as f64) * s).exp();
        if n == n_max {
            folded = c * fold * tree.value(n);
            c *= 1.0 + fold;
        }
        atoms.extend(leaves(tree, n, c));
    }
    let raw = AtomicMeasure::new(atoms, Provenance::NuS)?;
    let series_tail = folded / raw.total_mass;
    let measure = raw.normalized()?.with_log_eigenvalue(pressure);
    let warning = (series_tail > SERIES_TAIL_TOL).then(|| {
        format!("series tail beyond n = {n_max} carries {series_tail:.3} of the mass and was folded into the last level")
    });
    Ok(SeriesMeasure {
        measure,
        s,
        pressure,
        series_tail,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformalStrategy {
    NuSLimit,
    AdjointPower,
}

/// One step of the `s ↓ P̂` schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub eps: f64,
    pub s: f64,
    pub integrals: Vec<f64>,
    pub series_tail: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalEstimate {
    pub strategy: ConformalStrategy,
    pub measure: AtomicMeasure,
    pub pressure: f64,
    pub pressure_error: f64,
    pub n_max: usize,
    /// Steps of the `ε` schedule (empty for the adjoint strategy).
    pub schedule: Vec<ScheduleStep>,
    /// Whether the schedule reached [`SCHEDULE_STABILITY`].
    pub stable: bool,
    /// Certified relative truncation error of the deepest tree level.
    pub tail_certificate: f64,
}

/// Probability estimate of the `e^{P}e^{−Φ_t}`-conformal measure.
pub fn conformal_estimate(
    m: &BkMapDescriptor,
    w0: Complex64,
    p: &PotentialParams,
    n_max: usize,
    trunc: &TruncationPolicy,
    strategy: ConformalStrategy,
) -> Result<ConformalEstimate> {
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    let tree = PreimageTree::build(&op, w0, n_max, trunc.node_tol, trunc.node_budget)?;
    conformal_from_tree(&tree, strategy)
}

/// Both strategies from one shared tree.
pub fn conformal_pair(
    m: &BkMapDescriptor,
    w0: Complex64,
    p: &PotentialParams,
    n_max: usize,
    trunc: &TruncationPolicy,
) -> Result<(ConformalEstimate, ConformalEstimate)> {
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    let tree = PreimageTree::build(&op, w0, n_max, trunc.node_tol, trunc.node_budget)?;
    Ok((
        conformal_from_tree(&tree, ConformalStrategy::NuSLimit)?,
        conformal_from_tree(&tree, ConformalStrategy::AdjointPower)?,
    ))
}

fn conformal_from_tree(
    tree: &PreimageTree,
    strategy: ConformalStrategy,
) -> Result<ConformalEstimate> {
    let n_max = tree.depth();
    if n_max < 2 {
        return Err(Error::invalid("conformal estimate needs n_max >= 2"));
    }
    let fit = fit_tree(tree)?;
    let pressure = fit.value;
    let tail_certificate = tree.tail_certificate(n_max) / tree.value(n_max);
    let base = ConformalEstimate {
        strategy,
        measure: AtomicMeasure::new(Vec::new(), Provenance::AdjointPower)?,
        pressure,
        pressure_error: fit.error_bar,
        n_max,
        schedule: Vec::new(),
        stable: true,
        tail_certificate,
    };
    match strategy {
        ConformalStrategy::AdjointPower => Ok(ConformalEstimate {
            measure: adjoint_from_tree(tree, n_max)?
                .normalized()?
                .with_log_eigenvalue(pressure),
            ..base
        }),
        ConformalStrategy::NuSLimit => {
            let fns = default_test_fns();
            let unit = 1.0 + pressure.abs();
            let mut eps_list = vec![0.2 * unit, 0.1 * unit, 0.05 * unit];
            let mut schedule: Vec<ScheduleStep> = Vec::new();
            let mut measure = None;
            let mut stable = false;
            let mut i = 0;
            while i < eps_list.len() {
                let eps = eps_list[i];
                let nu = nu_s_from_tree(tree, pressure + eps, pressure)?;
                let integrals = integrals(&nu.measure, &fns);
                let scale = abs_integrals(&nu.measure, &fns);
                if let Some(prev) = schedule.last() {
                    let change = relative_change(&prev.integrals, &integrals, &scale);
                    stable = change < SCHEDULE_STABILITY;
                }
                schedule.push(ScheduleStep {
                    eps,
                    s: nu.s,
                    integrals,
                    series_tail: nu.series_tail,
                });
                measure = Some(nu.measure);
                if i + 1 == eps_list.len() && !stable && eps > 1e-6 * unit {
                    eps_list.push(eps / 2.0);
                }
                i += 1;
            }
            Ok(ConformalEstimate {
                measure: measure.expect("schedule is nonempty"),
                schedule,
                stable,
                ..base
            })
        }
    }
}

fn integrals(mu: &AtomicMeasure, fns: &[TestFn]) -> Vec<f64> {
    fns.iter().map(|f| mu.integrate(|z| f.eval(z))).collect()
}

fn abs_integrals(mu: &AtomicMeasure, fns: &[TestFn]) -> Vec<f64> {
    fns.iter()
        .map(|f| mu.integrate(|z| f.eval(z).abs()))
        .collect()
}

fn relative_change(a: &[f64], b: &[f64], scale: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scale)
        .map(|((x, y), s)| if *s > 0.0 { (x - y).abs() / s } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Test integrals of two measures and their relative differences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agreement {
    pub test_fns: Vec<TestFn>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// `|∫φ dμ₁ − ∫φ dμ₂| / max(∫|φ| dμ₁, ∫|φ| dμ₂)`.
    pub relative: Vec<f64>,
    pub max_relative: f64,
}

/// Compares two probability measures on test integrals; fails beyond `tol`.
pub fn cross_check(
    a: &AtomicMeasure,
    b: &AtomicMeasure,
    fns: &[TestFn],
    tol: f64,
) -> Result<Agreement> {
    if fns.is_empty() {
        return Err(Error::invalid(
            "cross check needs at least one test function",
        ));
    }
    let (first, second) = (integrals(a, fns), integrals(b, fns));
    let (sa, sb) = (abs_integrals(a, fns), abs_integrals(b, fns));
    let relative: Vec<f64> = (0..fns.len())
        .map(|i| {
            let s = sa[i].max(sb[i]);
            if s > 0.0 {
                (first[i] - second[i]).abs() / s
            } else {
                0.0
            }
        })
        .collect();
    let max_relative = relative.iter().copied().fold(0.0, f64::max);
    let agreement = Agreement {
        test_fns: fns.to_vec(),
        first,
        second,
        relative,
        max_relative,
    };
    if max_relative > tol {
        return Err(Error::Disagreement(format!(
            "measures differ by {max_relative:.3e} > {tol:.1e} on test integrals: {:?} vs {:?}",
            agreement.first, agreement.second
        )));
    }
    Ok(agreement)
}

/// `max_φ |∫L φ dμ − c∫φ dμ| / (c·∫|φ| dμ)` on any backward system, `c = e^{log_c}`.
pub fn eigen_residual_on<S: PreimageSystem>(
    sys: &S,
    mu: &AtomicMeasure,
    log_c: f64,
    fns: &[TestFn],
) -> Result<f64> {
    if fns.is_empty() {
        return Err(Error::invalid(
            "eigen residual needs at least one test function",
        ));
    }
    if !mu.is_probability() {
        return Err(Error::invalid("eigen residual needs a probability measure"));
    }
    // per atom: Σ_b w_b φ_i(z_b) for every test function
    let pushed: Vec<Result<Vec<f64>>> = mu
        .atoms
        .par_iter()
        .map(|&(w, _)| {
            let set = sys.branch_set(w)?;
            Ok(fns
                .iter()
                .map(|f| {
                    set.branches
                        .iter()
                        .map(|b| b.metric_weight * f.eval(b.z))
                        .sum()
                })
                .collect())
        })
        .collect();
    let mut lhs = vec![0.0; fns.len()];
    for (row, &(_, weight)) in pushed.into_iter().zip(&mu.atoms) {
        for (acc, v) in lhs.iter_mut().zip(row?) {
            *acc += weight * v;
        }
    }
    let c = log_c.exp();
    let rhs = integrals(mu, fns);
    let scale = abs_integrals(mu, fns);
    Ok((0..fns.len())
        .map(|i| {
            if scale[i] > 0.0 {
                (lhs[i] - c * rhs[i]).abs() / (c * scale[i])
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

/// Eigen-measure residual of `mu` for `L_t`, against `e^{P̂}` stored in the measure.
pub fn eigen_residual(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    p: &PotentialParams,
    fns: &[TestFn],
    trunc: &TruncationPolicy,
) -> Result<f64> {
    let log_c = mu
        .log_eigenvalue
        .ok_or_else(|| Error::invalid("measure carries no pressure estimate"))?;
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    eigen_residual_on(&op, mu, log_c, fns)
}

/// `μ = h·m/∫h dm` with `h` read at the nearest cloud point.
pub fn gibbs_from_density(mt: &AtomicMeasure, h: &GridFunction) -> Result<AtomicMeasure> {
    let mut atoms = Vec::with_capacity(mt.len());
    for &(z, w) in &mt.atoms {
        let v = h.at(z);
        if !(v > 0.0) {
            return Err(Error::Domain(format!("density is {v} at atom {z}")));
        }
        atoms.push((z, w * v));
    }
    let mut mu = AtomicMeasure::new(atoms, Provenance::Gibbs)?.normalized()?;
    mu.log_eigenvalue = mt.log_eigenvalue;
    Ok(mu)
}

/// Minimum and maximum of the atom-wise ratio `μ/m` on `D(0, R)`.
///
/// Both measures must have the same atoms.
pub fn ratio_band(mu: &AtomicMeasure, mt: &AtomicMeasure, radius: f64) -> Result<(f64, f64)> {
    if mu.len() != mt.len() {
        return Err(Error::invalid(
            "ratio band needs measures on the same atoms",
        ));
    }
    let mut band = (f64::INFINITY, 0.0_f64);
    for (a, b) in mu.atoms.iter().zip(&mt.atoms) {
        if a.0 != b.0 {
            return Err(Error::invalid(
                "ratio band needs measures on the same atoms",
            ));
        }
        if a.0.norm() <= radius && b.1 > 0.0 {
            let r = a.1 / b.1;
            band = (band.0.min(r), band.1.max(r));
        }
    }
    Ok(band)
}

/// `max_φ |∫φ∘f dμ − ∫φ dμ| / ∫|φ| dμ`.
pub fn invariance_residual(m: &BkMapDescriptor, mu: &AtomicMeasure, fns: &[TestFn]) -> Result<f64> {
    if fns.is_empty() {
        return Err(Error::invalid(
            "invariance residual needs at least one test function",
        ));
    }
    if !mu.is_probability() {
        return Err(Error::invalid(
            "invariance residual needs a probability measure",
        ));
    }
    let images: Vec<Complex64> = mu
        .atoms
        .iter()
        .map(|&(z, _)| {
            m.eval(z).finite().ok_or_else(|| Error::PoleProximity {
                z,
                distance: m.pole_distance(z),
            })
        })
        .collect::<Result<_>>()?;
    let scale = abs_integrals(mu, fns);
    Ok(fns
        .iter()
        .zip(&scale)
        .map(|(f, &s)| {
            let pushed: f64 = mu
                .atoms
                .iter()
                .zip(&images)
                .map(|(a, &fz)| a.1 * f.eval(fz))
                .sum();
            let direct = mu.integrate(|z| f.eval(z));
            if s > 0.0 {
                (pushed - direct).abs() / s
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

/// One Gibbs ratio `μ(D(z, (δ/4)|(f^n)'(z)|^{-1})) / exp(S_nΦ_t(z) − nP)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GibbsRatio {
    pub z: Complex64,
    pub n: usize,
    pub radius: f64,
    /// `None` when no refined atom falls in the disk.
    pub ratio: Option<f64>,
    /// Atoms of `μ` inside the disk itself.
    pub direct_atoms: usize,
    /// Pulled-back atoms inside the disk.
    pub refined_atoms: usize,
}

/// Gibbs ratios at `z` for each `n`.
///
/// Disks shrink like `|(f^n)'|^{-1}` and soon contain no atoms, so the disk
/// mass is resolved by local refinement: atoms of `μ` in `D(f^n z, δ/4)` are
/// pulled back along the branch of `f^{-n}` through `z`, carrying the conformal
/// weight `exp(S_nΦ_t − nP_μ)` and the density ratio `h(y)/h(f^n y)`. `P_μ` is
/// the eigenvalue stored in `μ`, so the `P` argument only enters the denominator.
pub fn gibbs_ratio(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    h: &GridFunction,
    z_samples: &[Complex64],
    n_range: &[usize],
    p: &PotentialParams,
    pressure: f64,
) -> Result<Vec<GibbsRatio>> {
    let log_c = mu
        .log_eigenvalue
        .ok_or_else(|| Error::invalid("Gibbs ratios need the measure's pressure estimate"))?;
    let mut out = Vec::with_capacity(z_samples.len() * n_range.len());
    for &z in z_samples {
        for &n in n_range {
            out.push(gibbs_ratio_at(m, mu, h, z, n, p, pressure, log_c)?);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn gibbs_ratio_at(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    h: &GridFunction,
    z: Complex64,
    n: usize,
    p: &PotentialParams,
    pressure: f64,
    log_c: f64,
) -> Result<GibbsRatio> {
    let orbit = m.forward_orbit(z, n)?;
    let mut log_deriv = 0.0;
    let mut word = Vec::with_capacity(n);
    for j in 0..n {
        log_deriv += m.deriv_with_value(orbit[j], orbit[j + 1]).norm().ln();
        word.push(m.branch_index_of(orbit[j])?);
    }
    word.reverse();
    let radius = 0.25 * m.delta * (-log_deriv).exp();
    let s_n = m.ergodic_sum(z, n, p)?;
    let target = orbit[n];
    let direct_atoms = mu
        .atoms
        .iter()
        .filter(|a| (a.0 - z).norm() < radius)
        .count();

    let mut mass = 0.0;
    let mut refined_atoms = 0;
    for &(a, w) in &mu.atoms {
        if (a - target).norm() >= 0.25 * m.delta {
            continue;
        }
        let y = match m.pullback_orbit(a, &word) {
            Ok(path) if n > 0 => path[n - 1],
            Ok(_) => a,
            Err(_) => continue,
        };
        if (y - z).norm() >= radius {
            continue;
        }
        let (ha, hy) = (h.at(a), h.at(y));
        if !(ha > 0.0 && hy > 0.0) {
            return Err(Error::Domain(format!("density vanishes near {a}")));
        }
        let log_w = m.ergodic_sum(y, n, p)? - n as f64 * log_c;
        mass += w * log_w.exp() * hy / ha;
        refined_atoms += 1;
    }
    let ratio = (refined_atoms > 0).then(|| mass / (s_n - n as f64 * pressure).exp());
    Ok(GibbsRatio {
        z,
        n,
        radius,
        ratio,
        direct_atoms,
        refined_atoms,
    })
}

/// Ratio `m(f^{-1}(B))/m(B)` for one cell `B`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxRatio {
    pub r_lo: f64,
    pub r_hi: f64,
    /// Sign of `Re w` on the cell.
    pub side: i8,
    pub mass: f64,
    pub preimage_mass: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasiInvariance {
    pub radii: Vec<f64>,
    /// Empirical `c_R` per radius (max ratio over its cells).
    pub c_r: Vec<f64>,
    pub boxes: Vec<BoxRatio>,
    pub notes: Vec<String>,
}

impl QuasiInvariance {
    pub fn is_decreasing(&self) -> bool {
        self.c_r.windows(2).all(|w| w[1] < w[0])
    }
}

/// Annular cells `R < |w| ≤ 2R` split by the sign of `Re w`.
pub fn annular_cells(radius: f64) -> [(f64, f64, i8); 2] {
    [(radius, 2.0 * radius, 1), (radius, 2.0 * radius, -1)]
}

fn in_cell(z: Complex64, cell: (f64, f64, i8)) -> bool {
    let r = z.norm();
    let side = if z.re >= 0.0 { 1 } else { -1 };
    r > cell.0 && r <= cell.1 && side == cell.2
}

/// Empirical `c_R` with `m(f^{-1}(B)) ≤ c_R·m(B)` for the annular cells beyond each `R`.
///
/// The preimage mass is `e^{−P_μ}Σ_{a∈B} μ_a·L_t𝟙(a)`: each atom in the cell is
/// pulled back through all enumerated branches with the conformal weight.
pub fn quasi_invariance_check(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    radii: &[f64],
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<QuasiInvariance> {
    let log_c = mu
        .log_eigenvalue
        .ok_or_else(|| Error::invalid("quasi-invariance needs the measure's pressure estimate"))?;
    let mut boxes = Vec::new();
    let mut c_r = Vec::with_capacity(radii.len());
    let mut notes = Vec::new();
    for &radius in radii {
        if !(radius > 0.0) {
            return Err(Error::invalid("radii must be positive"));
        }
        let mut c = 0.0_f64;
        for cell in annular_cells(radius) {
            let inside: Vec<(Complex64, f64)> = mu
                .atoms
                .iter()
                .copied()
                .filter(|a| in_cell(a.0, cell))
                .collect();
            let mass: f64 = inside.iter().map(|a| a.1).sum();
            let pulled: Vec<f64> = inside
                .par_iter()
                .map(|&(a, w)| Ok(w * m.branch_set(a, trunc, p)?.total_weight()))
                .collect::<Result<_>>()?;
            let preimage_mass = (-log_c).exp() * pulled.iter().sum::<f64>();
            let ratio = (mass > 0.0).then(|| preimage_mass / mass);
            match ratio {
                Some(r) => c = c.max(r),
                None => notes.push(format!(
                    "cell {}<|w|<={} with sign {} has no mass and was skipped",
                    cell.0, cell.1, cell.2
                )),
            }
            boxes.push(BoxRatio {
                r_lo: cell.0,
                r_hi: cell.1,
                side: cell.2,
                mass,
                preimage_mass,
                ratio,
            });
        }
        c_r.push(c);
    }
    Ok(QuasiInvariance {
        radii: radii.to_vec(),
        c_r,
        boxes,
        notes,
    })
}

/// Mass of `E_n = ∩_{i≤n} f^{-i}(B(R))` for `n = 0..=n_max`, with `B(R) = {|z| > R}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IteratedMass {
    pub radius: f64,
    pub masses: Vec<f64>,
    /// `exp` of the log-linear slope of the masses for `n ≥ 1`.
    pub rate: Option<f64>,
}

impl IteratedMass {
    pub fn is_decreasing(&self) -> bool {
        self.masses.windows(2).all(|w| w[1] < w[0])
    }
}

/// The backward system restricted to preimages beyond a radius.
struct Beyond<'a, S> {
    sys: &'a S,
    radius: f64,
}

impl<S: PreimageSystem> PreimageSystem for Beyond<'_, S> {
    fn branch_set(&self, w: Complex64) -> Result<crate::model::BranchSet> {
        let mut set = self.sys.branch_set(w)?;
        // the certified tail lies beyond every enumerated branch
        set.branches.retain(|b| b.z.norm() > self.radius);
        Ok(set)
    }

    fn forward(&self, z: Complex64) -> Option<Complex64> {
        self.sys.forward(z)
    }

    fn one_norm_bound(&self) -> f64 {
        self.sys.one_norm_bound()
    }
}

/// Atom counts cannot resolve `E_n` because tree pruning removes the light
/// chains that stay outside the disk. Conformality gives instead
/// `m(E_n) = e^{−nP_μ}Σ_{a∈B(R)} μ_a·L_B^n𝟙(a)`, where `L_B` keeps only
/// preimages in `B(R)`. The powers `L_B^n𝟙` are iterated on the cloud and read
/// at the nearest cloud point.
pub fn iterated_mass(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    cloud: Arc<JuliaCloud>,
    radius: f64,
    n_max: usize,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<IteratedMass> {
    let log_c = mu
        .log_eigenvalue
        .ok_or_else(|| Error::invalid("iterated mass needs the measure's pressure estimate"))?;
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    let restricted = DiscreteOperator::build(&Beyond { sys: &op, radius }, cloud.clone())?;
    let inside: Vec<(usize, f64)> = mu
        .atoms
        .iter()
        .filter(|a| a.0.norm() > radius)
        .map(|&(z, w)| (cloud.nearest(z).0, w))
        .collect();
    let mut masses = vec![inside.iter().map(|a| a.1).sum::<f64>()];
    let scale = (-log_c).exp();
    let mut v = vec![1.0; restricted.len()];
    for _ in 1..=n_max {
        v = restricted.apply_scaled(&v, scale);
        masses.push(inside.iter().map(|&(i, w)| w * v[i]).sum());
    }
    let pts: Vec<(f64, f64)> = masses
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, v)| (i as f64, v.ln()))
        .collect();
    let rate = fit::slope(&pts).map(f64::exp);
    Ok(IteratedMass {
        radius,
        masses,
        rate,
    })
}

/// `c_R` at or below this level marks the decay knee used as `R_t`.
pub const KNEE_LEVEL: f64 = 0.1;

/// `R_t` for the liminf criterion: the first radius whose `c_R` is at most [`KNEE_LEVEL`].
pub fn knee_radius(q: &QuasiInvariance) -> Option<f64> {
    q.radii
        .iter()
        .zip(&q.c_r)
        .find(|(_, &c)| c <= KNEE_LEVEL)
        .map(|(&r, _)| r)
}

/// Share of `mu` on atoms whose orbit stays outside `D(0, R_t)` for `n = 1..=n_max`.
///
/// Entry `n − 1` counts atoms with `|f^j(a)| > R_t` for all `j ≤ n`; orbits
/// that hit a pole count as escaping from that step on.
pub fn escaping_fraction(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    r_t: f64,
    n_max: usize,
) -> Result<Vec<f64>> {
    if !(r_t > 0.0) || n_max == 0 {
        return Err(Error::invalid(
            "escaping fraction needs R_t > 0 and n_max >= 1",
        ));
    }
    if mu.total_mass <= 0.0 {
        return Err(Error::invalid("escaping fraction needs positive mass"));
    }
    // first step at which each atom enters D(0, R_t), if any
    let entry: Vec<usize> = mu
        .atoms
        .par_iter()
        .map(|&(a, _)| {
            let mut z = a;
            for j in 0..=n_max {
                if z.norm() <= r_t {
                    return j;
                }
                match m.eval(z).finite() {
                    Some(fz) => z = fz,
                    None => return usize::MAX,
                }
            }
            usize::MAX
        })
        .collect();
    Ok((1..=n_max)
        .map(|n| {
            let out: f64 = mu
                .atoms
                .iter()
                .zip(&entry)
                .filter(|(_, &e)| e > n)
                .fold(0.0, |s, (a, _)| s + a.1);
            out / mu.total_mass
        })
        .collect())
}

/// Samples whose forward orbit returns to `D(0, R_t)` in the second half of `n_max` steps.
///
/// This is the finite-orbit reading of `liminf |f^n(z)| < R_t`.
pub fn recurrent_samples(
    m: &BkMapDescriptor,
    z_samples: &[Complex64],
    r_t: f64,
    n_max: usize,
) -> Vec<Complex64> {
    z_samples
        .iter()
        .copied()
        .filter(|&z| match m.forward_orbit(z, n_max) {
            Ok(orbit) => orbit[n_max / 2..].iter().any(|w| w.norm() <= r_t),
            Err(_) => false,
        })
        .collect()
}

/// Both sides of `m(f_k^{-1}(B)) = e^{−P}∫_B e^{Φ_t(f_k^{-1}w)} dm(w)` for `B = D(center, r)`.
///
/// The left side sums atoms mapped into `B` whose branch index is `k`; the right
/// side reweights the atoms inside `B`.
pub fn branch_box_mass(
    m: &BkMapDescriptor,
    mu: &AtomicMeasure,
    center: Complex64,
    r: f64,
    k: i64,
    p: &PotentialParams,
) -> Result<(f64, f64)> {
    let log_c = mu.log_eigenvalue.ok_or_else(|| {
        Error::invalid("conformality check needs the measure's pressure estimate")
    })?;
    let mut direct = 0.0;
    let mut weighted = 0.0;
    for &(a, w) in &mu.atoms {
        if let Some(fa) = m.eval(a).finite() {
            if (fa - center).norm() < r && m.branch_index_of(a)? == k {
                direct += w;
            }
        }
        if (a - center).norm() < r {
            weighted += w * m.branch(a, k, p)?.metric_weight;
        }
    }
    Ok((direct, weighted * (-log_c).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{sample_julia, SamplingPolicy};
    use crate::xfer::power_one;
    use crate::xfer::surrogate::FiniteSystem;

    fn setup() -> (
        BkMapDescriptor,
        PotentialParams,
        Complex64,
        TruncationPolicy,
    ) {
        let m = BkMapDescriptor::tangent(0.5).unwrap();
        let zs = m.repelling_fixed_point(Complex64::new(4.6, 0.0)).unwrap();
        let trunc = TruncationPolicy {
            k: 20,
            ..TruncationPolicy::default()
        };
        (m, PotentialParams::new(1.5, 3.0), zs, trunc)
    }

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn atoms_merge_and_sort() {
        let mu = AtomicMeasure::new(
            vec![(c(2.0), 0.25), (c(-1.5), 0.5), (c(2.0), 0.25)],
            Provenance::NuS,
        )
        .unwrap();
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.atoms[0], (c(-1.5), 0.5));
        assert_eq!(mu.atoms[1], (c(2.0), 0.5));
        assert!(mu.is_probability());
    }

    #[test]
    fn tail_mass_edges() {
        let mu = AtomicMeasure::new(vec![(c(2.0), 0.5), (c(-10.0), 0.5)], Provenance::NuS).unwrap();
        assert_eq!(mu.tail_mass(0.0), 1.0);
        assert_eq!(mu.tail_mass(10.0), 0.0);
        assert_eq!(mu.tail_mass(5.0), 0.5);
        assert_eq!(mu.tail_mass(f64::INFINITY), 0.0);
        let empty = AtomicMeasure::new(Vec::new(), Provenance::NuS).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.tail_mass(1.0), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let mu = AtomicMeasure::new(
            vec![(c(1.25), 0.75), (Complex64::new(-3.0, 0.5), 0.25)],
            Provenance::Gibbs,
        )
        .unwrap()
        .with_log_eigenvalue(-3.5);
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let back = AtomicMeasure::read_csv(buf.as_slice(), Provenance::Gibbs, Some(-3.5)).unwrap();
        assert_eq!(back.atoms, mu.atoms);
        assert_eq!(back.log_eigenvalue, mu.log_eigenvalue);
    }

    #[test]
    fn finite_system_eigenmeasure_has_zero_residual() {
        let pts = vec![c(1.5), c(2.5), c(-3.0)];
        let rows = vec![
            vec![(0, 0.2), (1, 0.1), (2, 0.3)],
            vec![(0, 0.05), (2, 0.4)],
            vec![(1, 0.25), (2, 0.15)],
        ];
        let sys = FiniteSystem::new(pts.clone(), rows).unwrap();
        let (w, rho) = sys.eigenmeasure(1e-15, 10_000).unwrap();
        let mu =
            AtomicMeasure::new(pts.into_iter().zip(w).collect(), Provenance::AdjointPower).unwrap();
        let r = eigen_residual_on(&sys, &mu, rho.ln(), &default_test_fns()).unwrap();
        assert!(r < 1e-8, "residual {r}");
        // a wrong eigenvalue is detected
        let off = eigen_residual_on(&sys, &mu, rho.ln() + 0.1, &default_test_fns()).unwrap();
        assert!(off > 0.05, "residual {off}");
    }

    #[test]
    fn adjoint_mass_equals_power_one() {
        let (m, p, zs, trunc) = setup();
        let mu = adjoint_delta(&m, zs, 4, &p, &trunc).unwrap();
        let (v, _) = power_one(&m, zs, 4, &p, &trunc).unwrap();
        assert_eq!(mu.total_mass, v);
    }

    #[test]
    fn nu_s_rejects_s_below_pressure() {
        let (m, p, zs, trunc) = setup();
        assert!(nu_s(&m, zs, -10.0, &p, 4, &trunc).is_err());
        let nu = nu_s(&m, zs, 0.0, &p, 6, &trunc).unwrap();
        assert!(nu.measure.is_probability());
        assert!(nu.series_tail < SERIES_TAIL_TOL);
        assert!(nu.warning.is_none());
    }

    #[test]
    fn constructions_agree_on_a_shared_tree() {
        let (m, p, zs, trunc) = setup();
        let (a, b) = conformal_pair(&m, zs, &p, 6, &trunc).unwrap();
        assert_eq!(a.pressure, b.pressure);
        assert!(a.schedule.len() >= 3);
        let agr = cross_check(&a.measure, &b.measure, &default_test_fns(), 0.02).unwrap();
        assert!(agr.max_relative < 0.02);
        assert!(cross_check(&a.measure, &b.measure, &default_test_fns(), 0.0).is_err());
    }

    #[test]
    fn constant_density_gives_back_the_conformal_measure() {
        let (m, p, zs, trunc) = setup();
        let mt = conformal_estimate(&m, zs, &p, 5, &trunc, ConformalStrategy::AdjointPower)
            .unwrap()
            .measure;
        let cloud = Arc::new(sample_julia(&m, zs, &SamplingPolicy::default()).unwrap());
        let mu = gibbs_from_density(&mt, &GridFunction::constant(cloud.clone(), 2.0)).unwrap();
        assert_eq!(mu.atoms.len(), mt.atoms.len());
        for (a, b) in mu.atoms.iter().zip(&mt.atoms) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() <= 1e-12 * b.1);
        }
        let (lo, hi) = ratio_band(&mu, &mt, 50.0).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        assert!(gibbs_from_density(&mt, &GridFunction::constant(cloud, 0.0)).is_err());
    }

    #[test]
    fn constant_test_function_is_invariant() {
        let (m, p, zs, trunc) = setup();
        let mt = adjoint_delta(&m, zs, 4, &p, &trunc)
            .unwrap()
            .normalized()
            .unwrap();
        assert_eq!(invariance_residual(&m, &mt, &[TestFn::One]).unwrap(), 0.0);
        assert!(invariance_residual(&m, &mt, &[]).is_err());
    }

    #[test]
    fn gibbs_pressure_offset_gives_exact_trend() {
        let (m, p, zs, trunc) = setup();
        let est =
            conformal_estimate(&m, zs, &p, 6, &trunc, ConformalStrategy::AdjointPower).unwrap();
        let cloud = Arc::new(sample_julia(&m, zs, &SamplingPolicy::default()).unwrap());
        let h = GridFunction::constant(cloud, 1.0);
        let ns = [2, 3, 4];
        let base = gibbs_ratio(&m, &est.measure, &h, &[zs], &ns, &p, est.pressure).unwrap();
        let off = gibbs_ratio(&m, &est.measure, &h, &[zs], &ns, &p, est.pressure + 0.1).unwrap();
        for (a, b) in base.iter().zip(&off) {
            let (ra, rb) = (a.ratio.unwrap(), b.ratio.unwrap());
            let expected = (0.1 * a.n as f64).exp();
            assert!((rb / ra / expected - 1.0).abs() < 1e-12);
        }
        assert!(
            gibbs_ratio(&m, &est.measure, &h, &[zs], &[], &p, est.pressure)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn annular_cells_cover_both_sides() {
        let cells = annular_cells(5.0);
        assert!(in_cell(c(7.0), cells[0]) ^ in_cell(c(7.0), cells[1]));
        assert!(in_cell(c(-7.0), cells[0]) ^ in_cell(c(-7.0), cells[1]));
        assert!(!cells
            .iter()
            .any(|&cell| in_cell(c(4.0), cell) || in_cell(c(11.0), cell)));
    }

    #[test]
    fn knee_and_escaping_mass() {
        let q = QuasiInvariance {
            radii: vec![5.0, 10.0, 20.0],
            c_r: vec![0.3, 0.05, 0.01],
            boxes: Vec::new(),
            notes: Vec::new(),
        };
        assert_eq!(knee_radius(&q), Some(10.0));
        let (m, p, zs, trunc) = setup();
        let mt = adjoint_delta(&m, zs, 5, &p, &trunc)
            .unwrap()
            .normalized()
            .unwrap();
        let esc = escaping_fraction(&m, &mt, 5.0, 6).unwrap();
        assert!(esc.windows(2).all(|w| w[1] <= w[0]));
        // every atom maps onto z* with |z*| < 5 after five steps
        assert_eq!(esc[5], 0.0);
        assert!(escaping_fraction(&m, &mt, 0.0, 3).is_err());
    }

    #[test]
    fn fixed_point_is_recurrent() {
        let (m, _, zs, _) = setup();
        assert_eq!(recurrent_samples(&m, &[zs], 5.0, 6), vec![zs]);
        assert!(recurrent_samples(&m, &[zs], 1.0, 6).is_empty());
    }

    #[test]
    fn measures_without_pressure_are_rejected() {
        let (m, p, _, trunc) = setup();
        let mu = AtomicMeasure::new(vec![(c(2.0), 1.0)], Provenance::NuS).unwrap();
        assert!(eigen_residual(&m, &mu, &p, &default_test_fns(), &trunc).is_err());
        assert!(quasi_invariance_check(&m, &mu, &[5.0], &p, &trunc).is_err());
    }
}
