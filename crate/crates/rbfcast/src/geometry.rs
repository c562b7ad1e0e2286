//! Computational domains, scattered measurement sites, and evaluation grids.
//!
//! Domains are square/disk/annulus in generic dimension (experiments use d=2).
//! Measurement sites are K-means centers of a uniform interior sample;
//! boundary sites are placed equispaced along the boundary by arc length.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate vector in R^d.
pub type Point = Vec<f64>;

/// Relative slack for membership tests on curved boundaries, so points
/// constructed to lie exactly on the boundary pass `contains`.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Tolerance (in domain units) for deciding whether a point counts as a
/// boundary node.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Square { half_width: f64, dim: usize },
    Disk { radius: f64, dim: usize },
    Annulus { inner: f64, outer: f64, dim: usize },
}

impl Domain {
    pub fn square(half_width: f64, dim: usize) -> Result<Self> {
        if half_width <= 0.0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "square requires half_width > 0 and dim >= 1, got ({half_width}, {dim})"
            )));
        }
        Ok(Domain::Square { half_width, dim })
    }

    pub fn disk(radius: f64, dim: usize) -> Result<Self> {
        if radius <= 0.0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "disk requires radius > 0 and dim >= 1, got ({radius}, {dim})"
            )));
        }
        Ok(Domain::Disk { radius, dim })
    }

    pub fn annulus(inner: f64, outer: f64, dim: usize) -> Result<Self> {
        if inner <= 0.0 || inner >= outer || dim == 0 {
            return Err(Error::Invalid(format!(
                "annulus requires 0 < inner < outer, got ({inner}, {outer})"
            )));
        }
        Ok(Domain::Annulus { inner, outer, dim })
    }

    pub fn dim(&self) -> usize {
        match *self {
            Domain::Square { dim, .. } | Domain::Disk { dim, .. } | Domain::Annulus { dim, .. } => {
                dim
            }
        }
    }

    /// Bounding box as (min, max) per axis.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let (r, d) = match *self {
            Domain::Square { half_width, dim } => (half_width, dim),
            Domain::Disk { radius, dim } => (radius, dim),
            Domain::Annulus { outer, dim, .. } => (outer, dim),
        };
        (vec![-r; d], vec![r; d])
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has dimension {}, domain has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Membership in the closed domain (boundary included).
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check_dim(x)?;
        Ok(match *self {
            Domain::Square { half_width, .. } => x.iter().all(|&c| c.abs() <= half_width),
            Domain::Disk { radius, .. } => norm(x) <= radius * (1.0 + MEMBERSHIP_SLACK),
            Domain::Annulus { inner, outer, .. } => {
                let r = norm(x);
                r >= inner * (1.0 - MEMBERSHIP_SLACK) && r <= outer * (1.0 + MEMBERSHIP_SLACK)
            }
        })
    }

    /// Euclidean distance from an interior point to the boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> Result<f64> {
        if !self.contains(x)? {
            return Err(Error::Invalid(format!(
                "point {x:?} lies outside the domain"
            )));
        }
        let d = match *self {
            Domain::Square { half_width, .. } => {
                half_width - x.iter().fold(0.0f64, |m, &c| m.max(c.abs()))
            }
            Domain::Disk { radius, .. } => radius - norm(x),
            Domain::Annulus { inner, outer, .. } => {
                let r = norm(x);
                (r - inner).min(outer - r)
            }
        };
        Ok(d.max(0.0))
    }

    /// Uniform sample of the domain via rejection from the bounding box.
    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Point {
        let (lo, hi) = self.bounding_box();
        loop {
            let x: Point = lo
                .iter()
                .zip(&hi)
                .map(|(&a, &b)| rng.random_range(a..b))
                .collect();
            if self.contains(&x).expect("dims match by construction") {
                return x;
            }
        }
    }

    /// Pull a point strictly inside the domain. Used for the rare K-means
    /// center that lands outside (e.g. in the hole of an annulus).
    fn project_inside(&self, x: &[f64], inset: f64) -> Point {
        match *self {
            Domain::Square { half_width, .. } => x
                .iter()
                .map(|&c| c.clamp(-half_width + inset, half_width - inset))
                .collect(),
            Domain::Disk { radius, .. } => {
                let r = norm(x);
                if r <= radius - inset {
                    return x.to_vec();
                }
                if r == 0.0 {
                    return x.to_vec();
                }
                scale(x, (radius - inset) / r)
            }
            Domain::Annulus { inner, outer, .. } => {
                let r = norm(x);
                if r == 0.0 {
                    // Degenerate center point: nudge onto the mid-radius along axis 0.
                    let mut p = vec![0.0; x.len()];
                    p[0] = 0.5 * (inner + outer);
                    return p;
                }
                let target = r.clamp(inner + inset, outer - inset);
                scale(x, target / r)
            }
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn scale(x: &[f64], s: f64) -> Point {
    x.iter().map(|c| c * s).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Scattered measurement sites over a domain.
///
/// Ordering contract: interior sites occupy indices `0..n_total-boundary_count`,
/// boundary sites occupy the trailing `boundary_count` indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    pub points: Vec<Point>,
    pub boundary_count: usize,
}

impl SiteSet {
    pub fn n_total(&self) -> usize {
        self.points.len()
    }

    pub fn n_interior(&self) -> usize {
        self.points.len() - self.boundary_count
    }

    pub fn interior(&self) -> &[Point] {
        &self.points[..self.n_interior()]
    }

    pub fn boundary(&self) -> &[Point] {
        &self.points[self.n_interior()..]
    }

    /// Check every SiteSet invariant against the domain.
    pub fn validate(&self, domain: &Domain) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !domain.contains(p)? {
                return Err(Error::Invalid(format!("site {i} not inside the domain")));
            }
            for q in &self.points[i + 1..] {
                if dist(p, q) == 0.0 {
                    return Err(Error::Invalid(format!("duplicate site at index {i}")));
                }
            }
        }
        let split = self.n_interior();
        for (i, p) in self.points.iter().enumerate() {
            let bd = domain.boundary_distance(p)?;
            let on_boundary = bd <= BOUNDARY_TOL;
            if i < split && on_boundary {
                return Err(Error::Invalid(format!(
                    "interior site {i} lies on the boundary"
                )));
            }
            if i >= split && !on_boundary {
                return Err(Error::Invalid(format!(
                    "boundary site {i} is off the boundary (distance {bd:.3e})"
                )));
            }
        }
        Ok(())
    }
}

/// Dense lattice over the domain for whole-domain assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub points: Vec<Point>,
    pub resolution: usize,
}

/// Regular lattice over the bounding box, masked by domain membership.
/// Axis 0 varies fastest in the emitted ordering.
pub fn eval_grid(domain: &Domain, resolution: usize) -> Result<EvalGrid> {
    if resolution < 2 {
        return Err(Error::Invalid(format!(
            "grid resolution must be >= 2, got {resolution}"
        )));
    }
    let d = domain.dim();
    let (lo, hi) = domain.bounding_box();
    let axis = |i: usize, k: usize| lo[i] + (hi[i] - lo[i]) * k as f64 / (resolution - 1) as f64;
    let total = resolution.pow(d as u32);
    let mut points = Vec::new();
    for flat in 0..total {
        let mut rem = flat;
        let mut x = vec![0.0; d];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = axis(i, rem % resolution);
            rem /= resolution;
        }
        if domain.contains(&x)? {
            points.push(x);
        }
    }
    Ok(EvalGrid { points, resolution })
}

/// Lloyd's K-means with farthest-point seeding.
///
/// Returns the centers and the per-iteration clustering objective (sum of
/// squared distances to the nearest center), which is non-increasing.
pub fn lloyd_kmeans(
    samples: &[Point],
    k: usize,
    rng: &mut impl Rng,
    max_iters: usize,
) -> (Vec<Point>, Vec<f64>) {
    assert!(k >= 1 && k <= samples.len(), "need 1 <= k <= #samples");
    let d = samples[0].len();

    // Farthest-point seeding: random first center, then repeatedly the sample
    // farthest from its nearest chosen center.
    let mut centers: Vec<Point> = Vec::with_capacity(k);
    centers.push(samples[rng.random_range(0..samples.len())].clone());
    let mut nearest_sq: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let (far_idx, _) = nearest_sq
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("samples nonempty");
        centers.push(samples[far_idx].clone());
        let c = centers.last().expect("just pushed");
        for (ns, s) in nearest_sq.iter_mut().zip(samples) {
            *ns = ns.min(sq_dist(s, c));
        }
    }

    let mut assign = vec![usize::MAX; samples.len()];
    let mut objective_trace = Vec::new();
    for _ in 0..max_iters {
        // Assignment step.
        let mut changed = false;
        let mut objective = 0.0;
        for (si, s) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(s, &centers[0]);
            for (ci, c) in centers.iter().enumerate().skip(1) {
                let d2 = sq_dist(s, c);
                if d2 < best_d {
                    best_d = d2;
                    best = ci;
                }
            }
            objective += best_d;
            if assign[si] != best {
                assign[si] = best;
                changed = true;
            }
        }
        objective_trace.push(objective);
        if !changed {
            break;
        }
        // Update step.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.iter().zip(&assign) {
            counts[a] += 1;
            for (acc, &c) in sums[a].iter_mut().zip(s) {
                *acc += c;
            }
        }
        for ci in 0..k {
            if counts[ci] == 0 {
                // Reseed an empty cluster at the sample farthest from its
                // assigned center.
                let (far_idx, _) = samples
                    .iter()
                    .enumerate()
                    .map(|(si, s)| (si, sq_dist(s, &centers[assign[si]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("samples nonempty");
                centers[ci] = samples[far_idx].clone();
            } else {
                for (c, acc) in centers[ci].iter_mut().zip(&sums[ci]) {
                    *c = acc / counts[ci] as f64;
                }
            }
        }
    }
    (centers, objective_trace)
}

/// Uniform sample size used as K-means input, per interior site requested.
const KMEANS_SAMPLE_FACTOR: usize = 200;
const KMEANS_MAX_ITERS: usize = 100;

/// Select scattered measurement sites: interior sites are K-means centers of
/// a uniform interior sample, boundary sites are equispaced along the
/// boundary. Deterministic for a fixed seed.
pub fn select_sites(
    domain: &Domain,
    n_interior: usize,
    n_boundary: usize,
    seed: u64,
) -> Result<SiteSet> {
    if n_interior == 0 {
        return Err(Error::Invalid("need at least one interior site".into()));
    }
    if n_boundary > 0 && domain.dim() != 2 {
        return Err(Error::Invalid(
            "boundary site placement is only defined for 2-d domains".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Point> = (0..KMEANS_SAMPLE_FACTOR * n_interior)
        .map(|_| domain.sample_uniform(&mut rng))
        .collect();
    let (centers, _) = lloyd_kmeans(&samples, n_interior, &mut rng, KMEANS_MAX_ITERS);

    let inset = BOUNDARY_TOL * 10.0;
    let mut points: Vec<Point> = centers
        .into_iter()
        .map(|c| {
            let ok = domain.contains(&c).expect("dims fixed")
                && domain.boundary_distance(&c).expect("contained") > BOUNDARY_TOL;
            if ok {
                c
            } else {
                domain.project_inside(&c, inset)
            }
        })
        .collect();

    points.extend(boundary_sites(domain, n_boundary));
    let sites = SiteSet {
        points,
        boundary_count: n_boundary,
    };
    sites.validate(domain)?;
    Ok(sites)
}

/// Equispaced boundary placement by arc length, per boundary component.
/// The annulus splits the budget proportionally to component perimeter.
fn boundary_sites(domain: &Domain, n: usize) -> Vec<Point> {
    if n == 0 {
        return Vec::new();
    }
    match *domain {
        Domain::Square { half_width, .. } => (0..n)
            .map(|i| square_perimeter_point(half_width, i as f64 / n as f64))
            .collect(),
        Domain::Disk { radius, .. } => circle_points(radius, n),
        Domain::Annulus { inner, outer, .. } => {
            let n_outer =
                ((n as f64 * outer / (inner + outer)).round() as usize).clamp(1, n.max(1));
            let n_inner = n - n_outer.min(n);
            let mut pts = circle_points(outer, n_outer.min(n));
            pts.extend(circle_points(inner, n_inner));
            pts
        }
    }
}

fn circle_points(radius: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            vec![radius * theta.cos(), radius * theta.sin()]
        })
        .collect()
}

/// Point at fraction `t` (in [0,1)) of the square perimeter, walking
/// counterclockwise from the corner (-w, -w).
fn square_perimeter_point(w: f64, t: f64) -> Point {
    let s = t * 8.0 * w;
    if s < 2.0 * w {
        vec![-w + s, -w]
    } else if s < 4.0 * w {
        vec![w, -w + (s - 2.0 * w)]
    } else if s < 6.0 * w {
        vec![w - (s - 4.0 * w), w]
    } else {
        vec![-w, w - (s - 6.0 * w)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Domain {
        Domain::square(1.0, 2).unwrap()
    }

    fn disk() -> Domain {
        Domain::disk(1.0, 2).unwrap()
    }

    fn annulus() -> Domain {
        Domain::annulus(0.3, 1.0, 2).unwrap()
    }

    #[test]
    fn contains_basics() {
        assert!(square().contains(&[0.0, 0.0]).unwrap());
        assert!(!disk().contains(&[2.0, 0.0]).unwrap());
        assert!(!annulus().contains(&[0.0, 0.0]).unwrap());
        assert!(square().contains(&[1.0, 1.0]).unwrap());
        assert!(disk().contains(&[1.0, 0.0]).unwrap());
    }

    #[test]
    fn contains_dimension_mismatch() {
        assert!(matches!(
            square().contains(&[0.0, 0.0, 0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn boundary_distance_values() {
        assert_eq!(square().boundary_distance(&[1.0, 0.5]).unwrap(), 0.0);
        assert_eq!(square().boundary_distance(&[0.0, 0.0]).unwrap(), 1.0);
        assert!((disk().boundary_distance(&[0.5, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(annulus().boundary_distance(&[0.65, 0.0]).unwrap() - 0.35 < 1e-15);
        assert!(square().boundary_distance(&[3.0, 0.0]).is_err());
    }

    #[test]
    fn eval_grid_masking() {
        let g = eval_grid(&square(), 3).unwrap();
        assert_eq!(g.points.len(), 9);
        assert!(g.points.iter().any(|p| p == &vec![1.0, 1.0]));
        assert!(g.points.iter().any(|p| p == &vec![-1.0, -1.0]));

        let g = eval_grid(&disk(), 3).unwrap();
        assert_eq!(g.points.len(), 5);

        let g = eval_grid(&annulus(), 3).unwrap();
        assert_eq!(g.points.len(), 4);
    }

    #[test]
    fn eval_grid_rejects_low_resolution() {
        assert!(eval_grid(&square(), 1).is_err());
    }

    #[test]
    fn kmeans_each_sample_its_own_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Point> = (0..12).map(|_| square().sample_uniform(&mut rng)).collect();
        let (centers, _) = lloyd_kmeans(&samples, samples.len(), &mut rng, 50);
        let mut found = vec![false; samples.len()];
        for c in &centers {
            let idx = samples.iter().position(|s| dist(s, c) < 1e-12).unwrap();
            found[idx] = true;
        }
        assert!(found.iter().all(|&f| f));
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<Point> =
                (0..400).map(|_| disk().sample_uniform(&mut rng)).collect();
            let (_, trace) = lloyd_kmeans(&samples, 7, &mut rng, 100);
            for w in trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "objective increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn single_site_near_centroid() {
        let sites = select_sites(&square(), 1, 0, 11).unwrap();
        assert_eq!(sites.n_total(), 1);
        assert!(dist(&sites.points[0], &[0.0, 0.0]) < 0.05);
    }

    #[test]
    fn select_sites_deterministic() {
        let a = select_sites(&annulus(), 9, 6, 42).unwrap();
        let b = select_sites(&annulus(), 9, 6, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_sites_invariants_all_domains() {
        for domain in [square(), disk(), annulus()] {
            for seed in 0..10 {
                let sites = select_sites(&domain, 12, 8, seed).unwrap();
                sites.validate(&domain).unwrap();
                assert_eq!(sites.n_interior(), 12);
                assert_eq!(sites.boundary_count, 8);
            }
        }
    }

    #[test]
    fn select_sites_rejects_zero_interior() {
        assert!(select_sites(&square(), 0, 4, 1).is_err());
    }

    #[test]
    fn boundary_placement_lands_on_boundary() {
        for domain in [square(), disk(), annulus()] {
            for p in boundary_sites(&domain, 10) {
                assert!(domain.boundary_distance(&p).unwrap() <= BOUNDARY_TOL);
            }
        }
    }
}
