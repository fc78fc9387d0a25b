//! Backward systems with known answers, used as oracles.

use num_complex::Complex64;

use super::{DiscreteOperator, PreimageSystem};
use crate::cloud::NearestIndex;
use crate::error::{Error, Result};
use crate::model::{BranchSet, PreimageBranch};

/// The doubling map `x ↦ 2x mod 1` with constant weight `2^{-t}` per branch.
///
/// Its pressure is `(1 − t)·log 2`.
#[derive(Debug, Clone, Copy)]
pub struct Doubling {
    pub t: f64,
}

impl Doubling {
    pub fn pressure(&self) -> f64 {
        (1.0 - self.t) * std::f64::consts::LN_2
    }
}

impl PreimageSystem for Doubling {
    fn branch_set(&self, w: Complex64) -> Result<BranchSet> {
        let weight = (-self.t * std::f64::consts::LN_2).exp();
        let branches = (0..2)
            .map(|k| PreimageBranch {
                branch_index: k,
                z: Complex64::new((w.re + k as f64) / 2.0, 0.0),
                fprime: Complex64::new(2.0, 0.0),
                metric_weight: weight,
            })
            .collect();
        Ok(BranchSet {
            branches,
            tail: 0.0,
        })
    }

    fn forward(&self, z: Complex64) -> Option<Complex64> {
        Some(Complex64::new((2.0 * z.re).rem_euclid(1.0), 0.0))
    }

    fn one_norm_bound(&self) -> f64 {
        2.0 * (-self.t * std::f64::consts::LN_2).exp()
    }
}

/// A closed finite backward system: every preimage is itself a state.
#[derive(Debug, Clone)]
pub struct FiniteSystem {
    pub points: Vec<Complex64>,
    /// Preimages of each state as `(state, weight)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Image of each state (the state whose row lists it), if any.
    pub image: Vec<Option<usize>>,
    index: NearestIndex,
}

impl FiniteSystem {
    pub fn new(points: Vec<Complex64>, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != points.len() {
            return Err(Error::invalid("one row per state required"));
        }
        let mut image = vec![None; points.len()];
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                if j >= points.len() || !(w >= 0.0) {
                    return Err(Error::invalid(
                        "row entries must name states with nonnegative weights",
                    ));
                }
                image[j] = Some(i);
            }
        }
        let index = NearestIndex::new(&points);
        Ok(Self {
            points,
            rows,
            image,
            index,
        })
    }

    /// The nearest-neighbour discretization on a cloud, as a closed system.
    pub fn from_operator(op: &DiscreteOperator) -> Result<Self> {
        let rows = (0..op.len()).map(|i| op.row(i).collect()).collect();
        Self::new(op.cloud.points.clone(), rows)
    }

    fn state(&self, w: Complex64) -> Result<usize> {
        match self.index.nearest(w) {
            Some((i, 0.0)) => Ok(i),
            _ => Err(Error::Domain(format!(
                "{w} is not a state of the finite system"
            ))),
        }
    }

    /// Left Perron vector `μL = ρμ` by power iteration, normalized to mass 1.
    pub fn eigenmeasure(&self, tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64)> {
        let n = self.points.len();
        let mut mu = vec![1.0 / n as f64; n];
        let mut rho = 0.0;
        for _ in 0..max_iter {
            // (μL)_j = Σ_i μ_i L_{ij}
            let mut next = vec![0.0; n];
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, w) in row {
                    next[j] += mu[i] * w;
                }
            }
            let mass: f64 = next.iter().sum();
            if !(mass > 0.0) {
                return Err(Error::Domain("finite system has no mass".into()));
            }
            next.iter_mut().for_each(|x| *x /= mass);
            let change = next
                .iter()
                .zip(&mu)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            mu = next;
            rho = mass;
            if change < tol {
                return Ok((mu, rho));
            }
        }
        Err(Error::Convergence {
            message: "finite eigenmeasure power iteration did not converge".into(),
            per_n: vec![(max_iter, rho)],
        })
    }
}

impl PreimageSystem for FiniteSystem {
    fn branch_set(&self, w: Complex64) -> Result<BranchSet> {
        let i = self.state(w)?;
        let branches = self.rows[i]
            .iter()
            .enumerate()
            .map(|(k, &(j, weight))| PreimageBranch {
                branch_index: k as i64,
                z: self.points[j],
                fprime: Complex64::new(f64::NAN, f64::NAN),
                metric_weight: weight,
            })
            .collect();
        Ok(BranchSet {
            branches,
            tail: 0.0,
        })
    }

    fn forward(&self, z: Complex64) -> Option<Complex64> {
        let i = self.state(z).ok()?;
        self.image[i].map(|j| self.points[j])
    }

    fn one_norm_bound(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|x| x.1).sum::<f64>())
            .fold(0.0, f64::max)
    }
}
