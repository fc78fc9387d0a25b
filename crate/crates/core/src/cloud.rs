//! Finite point-cloud samples of the Julia set built by backward iteration.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::seq::index::{sample, sample_weighted};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{enumeration_order, BkMapDescriptor};

/// Nearest-neighbour lookup over a fixed point set.
///
/// Points are sorted by real part and queries scan outward until the real-part
/// gap alone exceeds the best distance. Julia sets of the reference family lie on
/// the real line, where this is a binary search.
#[derive(Debug, Clone, Default)]
pub struct NearestIndex {
    order: Vec<u32>,
    keys: Vec<f64>,
    pts: Vec<Complex64>,
}

impl NearestIndex {
    pub fn new(points: &[Complex64]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        order.sort_by(|&a, &b| {
            points[a as usize]
                .re
                .total_cmp(&points[b as usize].re)
                .then(points[a as usize].im.total_cmp(&points[b as usize].im))
                .then(a.cmp(&b))
        });
        let pts: Vec<Complex64> = order.iter().map(|&i| points[i as usize]).collect();
        let keys = pts.iter().map(|p| p.re).collect();
        Self { order, keys, pts }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Index (into the original slice) and distance of the nearest point.
    pub fn nearest(&self, q: Complex64) -> Option<(usize, f64)> {
        self.nearest_excluding(q, usize::MAX)
    }

    pub(crate) fn nearest_excluding(&self, q: Complex64, skip: usize) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let start = self.keys.partition_point(|&k| k < q.re);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |j: usize, best: &mut (usize, f64)| {
            let orig = self.order[j] as usize;
            if orig == skip {
                return;
            }
            let d = (self.pts[j] - q).norm();
            if d < best.1 || (d == best.1 && orig < best.0) {
                *best = (orig, d);
            }
        };
        let mut j = start;
        while j < self.pts.len() && self.keys[j] - q.re <= best.1 {
            consider(j, &mut best);
            j += 1;
        }
        let mut j = start;
        while j > 0 && q.re - self.keys[j - 1] <= best.1 {
            consider(j - 1, &mut best);
            j -= 1;
        }
        (best.0 != usize::MAX).then_some(best)
    }

    /// Distance from point `i` to its nearest distinct neighbour.
    pub fn neighbour_gap(&self, points: &[Complex64], i: usize) -> f64 {
        self.nearest_excluding(points[i], i)
            .map_or(f64::INFINITY, |(_, d)| d)
    }
}

/// A backward-orbit sample of the Julia set.
#[derive(Debug, Clone)]
pub struct JuliaCloud {
    pub points: Vec<Complex64>,
    /// Backward-orbit generation of each point (0 for the seed).
    pub generation: Vec<u32>,
    /// Number of backward generations sampled.
    pub depth: u32,
    pub seed: Complex64,
    pub min_modulus: f64,
    /// Largest nearest-neighbour gap over the cloud.
    pub pairwise_resolution: f64,
    index: NearestIndex,
}

/// Sampling controls for [`sample_julia`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub depth: u32,
    pub budget: usize,
    /// Branches `|k| ≤ branch_range` are followed at every generation.
    pub branch_range: u32,
    pub rng_seed: u64,
    /// Fraction of each generation drawn with probability proportional to the
    /// backward contraction `|(f^g)'|^{-1}`; the rest is drawn uniformly.
    #[serde(default = "default_weighted_fraction")]
    pub weighted_fraction: f64,
}

fn default_weighted_fraction() -> f64 {
    0.5
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            depth: 8,
            budget: 20_000,
            branch_range: 12,
            rng_seed: 7,
            weighted_fraction: default_weighted_fraction(),
        }
    }
}

impl JuliaCloud {
    /// Builds a cloud from explicit points; generations default to zero.
    pub fn from_points(points: Vec<Complex64>, seed: Complex64) -> Result<Self> {
        let generation = vec![0; points.len()];
        Self::assemble(points, generation, 0, seed)
    }

    fn assemble(
        points: Vec<Complex64>,
        generation: Vec<u32>,
        depth: u32,
        seed: Complex64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cloud must contain at least one point"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("cloud points must be finite"));
        }
        let index = NearestIndex::new(&points);
        let min_modulus = points
            .iter()
            .map(|z| z.norm())
            .fold(f64::INFINITY, f64::min);
        let pairwise_resolution = if points.len() < 2 {
            0.0
        } else {
            (0..points.len())
                .map(|i| index.neighbour_gap(&points, i))
                .fold(0.0, f64::max)
        };
        Ok(Self {
            points,
            generation,
            depth,
            seed,
            min_modulus,
            pairwise_resolution,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, q: Complex64) -> (usize, f64) {
        self.index.nearest(q).expect("cloud is never empty")
    }

    /// Nearest other cloud point of point `i`.
    pub fn neighbour(&self, i: usize) -> Option<(usize, f64)> {
        self.index.nearest_excluding(self.points[i], i)
    }

    /// Fails when the cloud is too sparse for nearest-neighbour interpolation at scale `delta`.
    pub fn require_resolution(&self, delta: f64) -> Result<()> {
        if self.pairwise_resolution > delta {
            return Err(Error::CoarseCloud {
                resolution: self.pairwise_resolution,
                delta,
            });
        }
        Ok(())
    }

    /// Keeps only points with `|z| ≤ radius` (the seed is always kept if present).
    pub fn restricted(&self, radius: f64) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.points[i].norm() <= radius)
            .collect();
        Self::assemble(
            keep.iter().map(|&i| self.points[i]).collect(),
            keep.iter().map(|&i| self.generation[i]).collect(),
            self.depth,
            self.seed,
        )
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["re", "im", "depth"])?;
        for (p, g) in self.points.iter().zip(&self.generation) {
            wr.write_record([fmt_f64(p.re), fmt_f64(p.im), g.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a cloud written by [`JuliaCloud::write_csv`]; the first row is taken as the seed.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            re: f64,
            im: f64,
            depth: u32,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut points = Vec::new();
        let mut generation = Vec::new();
        for row in rd.deserialize() {
            let row: Row = row?;
            points.push(Complex64::new(row.re, row.im));
            generation.push(row.depth);
        }
        let seed = *points
            .first()
            .ok_or_else(|| Error::invalid("empty cloud file"))?;
        let depth = generation.iter().copied().max().unwrap_or(0);
        Self::assemble(points, generation, depth, seed)
    }
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Samples the Julia set by iterating inverse branches backward from a repelling
/// fixed point near `seed_hint`.
///
/// Each generation follows branches `|k| ≤ branch_range` of every kept point of
/// the previous generation; when a generation would overflow its share of the
/// budget it is subsampled with a seeded generator. Points that coincide within
/// the preimage tolerance are merged.
pub fn sample_julia(
    m: &BkMapDescriptor,
    seed_hint: Complex64,
    policy: &SamplingPolicy,
) -> Result<JuliaCloud> {
    if policy.budget < 1 {
        return Err(Error::invalid("sampling budget must be at least 1"));
    }
    if !(0.0..=1.0).contains(&policy.weighted_fraction) {
        return Err(Error::invalid("weighted_fraction must lie in [0, 1]"));
    }
    let seed = m.repelling_fixed_point(seed_hint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    let mut points = vec![seed];
    let mut generation = vec![0u32];
    // (point, log of the backward contraction along its chain)
    let mut frontier = vec![(seed, 0.0)];
    let indices: Vec<i64> = enumeration_order(policy.branch_range).collect();

    for g in 1..=policy.depth {
        let remaining = policy.budget.saturating_sub(points.len());
        if remaining == 0 || frontier.is_empty() {
            break;
        }
        let mut children = Vec::with_capacity(frontier.len() * indices.len());
        for &(w, log_c) in &frontier {
            for (_, z) in m.branch_points(w, &indices)? {
                let log_fp = m.deriv_with_value(z, w).norm().ln();
                children.push((z, log_c - log_fp));
            }
        }
        let share = remaining.div_ceil((policy.depth - g + 1) as usize).max(1);
        let share = if g == policy.depth { remaining } else { share };
        if children.len() > share {
            children = subsample(&mut rng, children, share, policy.weighted_fraction);
        }
        frontier.clear();
        for (z, log_c) in children {
            if z.norm() < m.t_floor {
                return Err(Error::BadRegime {
                    z,
                    t_floor: m.t_floor,
                });
            }
            points.push(z);
            generation.push(g);
            frontier.push((z, log_c));
        }
    }

    // merge coincident points, keeping the earliest generation
    let mut keep = vec![true; points.len()];
    let mut sorted: Vec<usize> = (0..points.len()).collect();
    sorted.sort_by(|&a, &b| points[a].re.total_cmp(&points[b].re).then(a.cmp(&b)));
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        let tol = m.preimage_tol * (1.0 + points[a].norm());
        if (points[a] - points[b]).norm() <= tol {
            keep[a.max(b)] = false;
        }
    }
    let (pts, gens): (Vec<_>, Vec<_>) = points
        .into_iter()
        .zip(generation)
        .zip(keep)
        .filter_map(|(pg, k)| k.then_some(pg))
        .unzip();
    JuliaCloud::assemble(pts, gens, policy.depth, seed)
}

/// Keeps `share` children: a weighted draw by contraction, then a uniform
/// draw from the rest. Kept in generation order.
fn subsample(
    rng: &mut ChaCha8Rng,
    children: Vec<(Complex64, f64)>,
    share: usize,
    weighted_fraction: f64,
) -> Vec<(Complex64, f64)> {
    let n_weighted = ((share as f64 * weighted_fraction).round() as usize).min(share);
    let top = children
        .iter()
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut taken = vec![false; children.len()];
    if n_weighted > 0 {
        let weighted = sample_weighted(
            rng,
            children.len(),
            |i| (children[i].1 - top).exp().max(1e-300),
            n_weighted,
        )
        .expect("weights are positive and finite");
        for i in weighted {
            taken[i] = true;
        }
    }
    let rest: Vec<usize> = (0..children.len()).filter(|&i| !taken[i]).collect();
    for i in sample(rng, rest.len(), share - n_weighted.min(share)) {
        taken[rest[i]] = true;
    }
    children
        .into_iter()
        .zip(taken)
        .filter_map(|(c, t)| t.then_some(c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BkMapDescriptor {
        BkMapDescriptor::tangent(0.5).unwrap()
    }

    #[test]
    fn depth_zero_is_the_fixed_point() {
        let policy = SamplingPolicy {
            depth: 0,
            ..SamplingPolicy::default()
        };
        let c = sample_julia(&model(), Complex64::new(4.6, 0.0), &policy).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.points[0].re - 4.604216777200845).abs() < 1e-9);
    }

    #[test]
    fn cloud_is_real_deterministic_and_within_budget() {
        let policy = SamplingPolicy {
            depth: 3,
            budget: 500,
            branch_range: 5,
            rng_seed: 11,
            ..SamplingPolicy::default()
        };
        let m = model();
        let a = sample_julia(&m, Complex64::new(4.6, 0.0), &policy).unwrap();
        let b = sample_julia(&m, Complex64::new(4.6, 0.0), &policy).unwrap();
        assert_eq!(a.points, b.points);
        assert!(a.len() <= 500);
        assert!(a.points.iter().all(|z| z.im.abs() < 1e-9));
        assert!(a.min_modulus >= m.t_floor);
    }

    #[test]
    fn every_point_maps_into_the_cloud() {
        let policy = SamplingPolicy {
            depth: 3,
            budget: 2000,
            branch_range: 4,
            rng_seed: 3,
            ..SamplingPolicy::default()
        };
        let m = model();
        let c = sample_julia(&m, Complex64::new(4.6, 0.0), &policy).unwrap();
        for &p in &c.points {
            let fp = m.eval(p).finite().unwrap();
            let (_, d) = c.nearest(fp);
            assert!(d <= m.preimage_tol * (1.0 + fp.norm()), "{p} -> {fp}: {d}");
        }
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts: Vec<Complex64> = (0..200)
            .map(|i| {
                let x = (i as f64 * 0.7371).sin() * 10.0;
                let y = (i as f64 * 1.3117).cos() * 3.0;
                Complex64::new(x, y)
            })
            .collect();
        let idx = NearestIndex::new(&pts);
        for j in 0..50 {
            let q = Complex64::new(
                (j as f64 * 0.31).cos() * 11.0,
                (j as f64 * 0.17).sin() * 4.0,
            );
            let brute = pts
                .iter()
                .map(|p| (p - q).norm())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(idx.nearest(q).unwrap().1, brute);
        }
    }

    #[test]
    fn csv_round_trip() {
        let policy = SamplingPolicy {
            depth: 2,
            budget: 100,
            branch_range: 3,
            rng_seed: 1,
            ..SamplingPolicy::default()
        };
        let c = sample_julia(&model(), Complex64::new(4.6, 0.0), &policy).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = JuliaCloud::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.points, c.points);
        assert_eq!(back.generation, c.generation);
    }
}
