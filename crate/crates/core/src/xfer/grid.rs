use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PreimageSystem, TruncatedOperator, TruncationPolicy};
use crate::cloud::{fmt_f64, JuliaCloud};
use crate::error::{Error, Result};
use crate::model::{BkMapDescriptor, PotentialParams};

/// A real function sampled on a Julia cloud.
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub cloud: Arc<JuliaCloud>,
    pub values: Vec<f64>,
    pub sup_norm: f64,
    /// Set when every value is known to be nonnegative.
    pub nonnegative: bool,
    /// Estimated sup-norm error carried from the construction.
    pub error_bound: f64,
}

impl GridFunction {
    pub fn new(cloud: Arc<JuliaCloud>, values: Vec<f64>) -> Result<Self> {
        if values.len() != cloud.len() {
            return Err(Error::invalid(format!(
                "grid function has {} values for {} cloud points",
                values.len(),
                cloud.len()
            )));
        }
        let sup_norm = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let nonnegative = values.iter().all(|&v| v >= 0.0);
        Ok(Self {
            cloud,
            values,
            sup_norm,
            nonnegative,
            error_bound: 0.0,
        })
    }

    pub fn constant(cloud: Arc<JuliaCloud>, c: f64) -> Self {
        let n = cloud.len();
        Self::new(cloud, vec![c; n]).expect("length matches")
    }

    pub fn from_fn(cloud: Arc<JuliaCloud>, f: impl Fn(Complex64) -> f64) -> Self {
        let values = cloud.points.iter().map(|&z| f(z)).collect();
        Self::new(cloud, values).expect("length matches")
    }

    /// Value at the cloud point nearest to `z`.
    pub fn at(&self, z: Complex64) -> f64 {
        self.values[self.cloud.nearest(z).0]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Empirical Lipschitz constant over nearest-neighbour pairs.
    pub fn lipschitz_estimate(&self) -> f64 {
        (0..self.cloud.len())
            .filter_map(|i| {
                let (j, d) = self.cloud.neighbour(i)?;
                (d > 0.0).then(|| (self.values[i] - self.values[j]).abs() / d)
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["re", "im", "value"])?;
        for (p, v) in self.cloud.points.iter().zip(&self.values) {
            wr.write_record([fmt_f64(p.re), fmt_f64(p.im), fmt_f64(*v)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads values written by [`GridFunction::write_csv`] onto a cloud with the same points.
    pub fn read_csv<R: std::io::Read>(cloud: Arc<JuliaCloud>, r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            re: f64,
            im: f64,
            value: f64,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut values = Vec::with_capacity(cloud.len());
        for (i, row) in rd.deserialize().enumerate() {
            let row: Row = row?;
            let p = cloud
                .points
                .get(i)
                .ok_or_else(|| Error::invalid("grid file has more rows than the cloud"))?;
            if p.re != row.re || p.im != row.im {
                return Err(Error::invalid(format!(
                    "grid row {i} does not match cloud point {p}"
                )));
            }
            values.push(row.value);
        }
        Self::new(cloud, values)
    }
}

/// The transfer operator discretized on a cloud: every preimage is replaced by
/// its nearest cloud point.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub cloud: Arc<JuliaCloud>,
    row_start: Vec<usize>,
    col: Vec<u32>,
    weight: Vec<f64>,
    /// Certified weight of branches not enumerated, per row.
    pub row_tail: Vec<f64>,
    /// `Σ_k weight_k·|z_k − nearest(z_k)|` per row.
    pub row_spread: Vec<f64>,
}

/// Sparse row entries with the row's dropped tail and spread.
type RowParts = (Vec<(u32, f64)>, f64, f64);

impl DiscreteOperator {
    pub fn build<S: PreimageSystem>(sys: &S, cloud: Arc<JuliaCloud>) -> Result<Self> {
        let rows: Vec<Result<RowParts>> = cloud
            .points
            .par_iter()
            .map(|&w| {
                let set = sys.branch_set(w)?;
                let mut spread = 0.0;
                let entries = set
                    .branches
                    .iter()
                    .map(|b| {
                        let (j, d) = cloud.nearest(b.z);
                        spread += b.metric_weight * d;
                        (j as u32, b.metric_weight)
                    })
                    .collect();
                Ok((entries, set.tail, spread))
            })
            .collect();
        let mut row_start = vec![0];
        let (mut col, mut weight) = (Vec::new(), Vec::new());
        let (mut row_tail, mut row_spread) = (Vec::new(), Vec::new());
        for r in rows {
            let (entries, tail, spread) = r?;
            for (j, w) in entries {
                col.push(j);
                weight.push(w);
            }
            row_start.push(col.len());
            row_tail.push(tail);
            row_spread.push(spread);
        }
        Ok(Self {
            cloud,
            row_start,
            col,
            weight,
            row_tail,
            row_spread,
        })
    }

    pub fn len(&self) -> usize {
        self.row_tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_tail.is_empty()
    }

    /// Entries `(column, weight)` of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_start[i], self.row_start[i + 1]);
        (a..b).map(move |k| (self.col[k] as usize, self.weight[k]))
    }

    /// `scale·Lv` on the cloud.
    pub fn apply_scaled(&self, v: &[f64], scale: f64) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let (a, b) = (self.row_start[i], self.row_start[i + 1]);
                let mut s = 0.0;
                for k in a..b {
                    s += self.weight[k] * v[self.col[k] as usize];
                }
                s * scale
            })
            .collect()
    }

    /// Applies the operator to a grid function with an error estimate from the
    /// branch tails and the nearest-neighbour lookup.
    pub fn apply(&self, phi: &GridFunction) -> Result<GridFunction> {
        if !Arc::ptr_eq(&phi.cloud, &self.cloud) && phi.cloud.points != self.cloud.points {
            return Err(Error::invalid("grid function lives on a different cloud"));
        }
        let values = self.apply_scaled(&phi.values, 1.0);
        let lip = phi.lipschitz_estimate();
        let err = (0..self.len())
            .map(|i| self.row_tail[i] * phi.sup_norm + lip * self.row_spread[i])
            .fold(0.0, f64::max);
        let mut out = GridFunction::new(self.cloud.clone(), values)?;
        out.nonnegative = phi.nonnegative;
        out.error_bound = err;
        Ok(out)
    }
}

/// `L_tφ` on the cloud of `phi`.
pub fn apply(
    m: &BkMapDescriptor,
    phi: &GridFunction,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
) -> Result<GridFunction> {
    phi.cloud.require_resolution(m.delta)?;
    let op = TruncatedOperator::new(m, *p, *trunc)?;
    DiscreteOperator::build(&op, phi.cloud.clone())?.apply(phi)
}

/// Cesàro approximation of the fixed point of the normalized operator.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub h: GridFunction,
    pub n_terms: usize,
    /// `sup|L̂h − h| / sup h` at `n_terms`.
    pub residual: f64,
    /// Residual after each number of terms.
    pub residual_history: Vec<(usize, f64)>,
    /// `max h(w)·|w|^{(1+1/M−τ)t}` over the cloud.
    pub envelope_c: f64,
    /// Log-log slope of `h(w)·|w|^{(1+1/M−τ)t}` over the outer cloud points.
    pub envelope_slope: f64,
    pub warning: Option<String>,
}

impl DensityEstimate {
    /// Minimum and maximum of `h` on `D(0, R)`.
    pub fn band(&self, radius: f64) -> (f64, f64) {
        self.h
            .cloud
            .points
            .iter()
            .zip(&self.h.values)
            .filter(|(z, _)| z.norm() <= radius)
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), (_, &v)| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// `h_m = (1/m)Σ_{k=1}^{m} L̂^k𝟙` on the cloud, with `L̂ = e^{-P}L_t`.
pub fn cesaro_density(
    m: &BkMapDescriptor,
    cloud: Arc<JuliaCloud>,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
    pressure: f64,
    n_terms: usize,
) -> Result<DensityEstimate> {
    if n_terms < 1 {
        return Err(Error::invalid("n_terms must be at least 1"));
    }
    cloud.require_resolution(m.delta)?;
    let op = DiscreteOperator::build(&TruncatedOperator::new(m, *p, *trunc)?, cloud.clone())?;
    cesaro_on(m, &op, p, pressure, n_terms)
}

pub(crate) fn cesaro_on(
    m: &BkMapDescriptor,
    op: &DiscreteOperator,
    p: &PotentialParams,
    pressure: f64,
    n_terms: usize,
) -> Result<DensityEstimate> {
    let scale = (-pressure).exp();
    let n = op.len();
    let mut v = op.apply_scaled(&vec![1.0; n], scale);
    let first = v.clone();
    let mut sum = v.clone();
    let mut history = Vec::with_capacity(n_terms);
    for k in 1..=n_terms {
        // v = L̂^k𝟙, sum = Σ_{j≤k} L̂^j𝟙
        let next = op.apply_scaled(&v, scale);
        let diff = next
            .iter()
            .zip(&first)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        let sup = sum.iter().fold(0.0_f64, |a, &x| a.max(x));
        history.push((k, diff / sup));
        if k == n_terms {
            break;
        }
        for (s, x) in sum.iter_mut().zip(&next) {
            *s += x;
        }
        v = next;
    }
    let values: Vec<f64> = sum.iter().map(|s| s / n_terms as f64).collect();
    let mut h = GridFunction::new(op.cloud.clone(), values)?;
    h.error_bound = op.row_tail.iter().fold(0.0, |a: f64, &x| a.max(x)) * scale * h.sup_norm;
    let residual = history.last().map_or(f64::NAN, |x| x.1);
    let warning = (n_terms > 1 && residual >= history[0].1).then(|| {
        format!(
            "Cesaro residual did not decrease: {:.3e} at 1 term, {:.3e} at {n_terms}",
            history[0].1, residual
        )
    });
    let a = p.w_exponent(m);
    let (envelope_c, envelope_slope) = envelope_fit(&h, a);
    Ok(DensityEstimate {
        h,
        n_terms,
        residual,
        residual_history: history,
        envelope_c,
        envelope_slope,
        warning,
    })
}

/// Sup and outer log-log slope of `h(w)|w|^a`.
fn envelope_fit(h: &GridFunction, a: f64) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = h
        .cloud
        .points
        .iter()
        .zip(&h.values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(z, &v)| (z.norm().ln(), v.ln() + a * z.norm().ln()))
        .collect();
    let c = pairs
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .exp();
    let cut = 5.0_f64.ln();
    let outer: Vec<(f64, f64)> = pairs.into_iter().filter(|p| p.0 >= cut).collect();
    (c, crate::fit::slope(&outer).unwrap_or(0.0))
}

/// Plain power iteration `L̂^n𝟙`, a cross-check for the Cesàro average.
pub fn power_density(
    m: &BkMapDescriptor,
    cloud: Arc<JuliaCloud>,
    p: &PotentialParams,
    trunc: &TruncationPolicy,
    pressure: f64,
    n_iter: usize,
) -> Result<GridFunction> {
    cloud.require_resolution(m.delta)?;
    let op = DiscreteOperator::build(&TruncatedOperator::new(m, *p, *trunc)?, cloud.clone())?;
    let scale = (-pressure).exp();
    let mut v = vec![1.0; op.len()];
    for _ in 0..n_iter {
        v = op.apply_scaled(&v, scale);
    }
    GridFunction::new(cloud, v)
}

/// Summary of a density estimate for JSON export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensitySummary {
    pub n_terms: usize,
    pub residual: f64,
    pub residual_history: Vec<(usize, f64)>,
    pub envelope_c: f64,
    pub envelope_slope: f64,
    pub min: f64,
    pub max: f64,
    pub warning: Option<String>,
}

impl DensityEstimate {
    pub fn summary(&self) -> DensitySummary {
        DensitySummary {
            n_terms: self.n_terms,
            residual: self.residual,
            residual_history: self.residual_history.clone(),
            envelope_c: self.envelope_c,
            envelope_slope: self.envelope_slope,
            min: self.h.min(),
            max: self.h.sup_norm,
            warning: self.warning.clone(),
        }
    }
}
