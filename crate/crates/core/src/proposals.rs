//! Multi-homography proposals.
//!
//! Matches are grouped by a per-match scalar that orders them by depth (or
//! by position, randomly, or by a supplied depth map), one homography is
//! estimated per group plus one from all matches, and the source is warped
//! into the target frame under each of them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MatchSet;
use crate::homography::{ransac_homography, Homography, RansacParams};
use crate::raster::{Image, Point, ValidMask};

/// Smallest group that gets its own homography; smaller groups are merged
/// into their nearest neighbour.
pub const MIN_CLUSTER_SIZE: usize = 8;

const COHERENCE_NEIGHBORS: usize = 8;
const COHERENCE_RADIUS_PX: f64 = 6.0;
const SPATIAL_SUBSAMPLE: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClusteringMode {
    /// Principal-axis parallax residual against the global homography.
    #[default]
    Residual,
    /// Target-image position of the matches.
    Spatial,
    Random,
    /// Values sampled from a user-supplied depth map.
    DepthFile,
    /// Global homography only.
    None,
}

impl std::str::FromStr for ClusteringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Self::Residual),
            "spatial" => Ok(Self::Spatial),
            "random" => Ok(Self::Random),
            "depth-file" => Ok(Self::DepthFile),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!("unknown clustering mode '{other}'"))),
        }
    }
}

/// Labels in `1..=n_clusters` for every match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub proxy_values: Vec<f64>,
    pub n_clusters: usize,
    /// Set when fewer clusters than requested could be formed.
    pub reduced: bool,
}

impl ClusterAssignment {
    pub fn members(&self, label: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_clusters];
        for &l in &self.labels {
            out[l - 1] += 1;
        }
        out
    }
}

/// Signed projection of `p_t - H(p_s)` onto the principal axis of all
/// residuals, centered to zero mean. The axis sign is fixed so its first
/// nonzero component is positive.
pub fn depth_proxy_values(points_t: &[Point], points_s: &[Point], h_global: &Homography) -> Vec<f64> {
    let n = points_t.len().min(points_s.len());
    if n < 2 {
        return vec![0.0; n];
    }
    let residuals: Vec<(f64, f64)> = (0..n)
        .map(|i| match h_global.apply(points_s[i]) {
            Some(q) => (points_t[i].x - q.x, points_t[i].y - q.y),
            None => (0.0, 0.0),
        })
        .collect();
    let (mx, my) = residuals
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
    let (mx, my) = (mx / n as f64, my / n as f64);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &(x, y) in &residuals {
        let (dx, dy) = (x - mx, y - my);
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    let half = 0.5 * (a - c);
    let lambda = 0.5 * (a + c) + (half * half + b * b).sqrt();
    let (mut vx, mut vy) = if b.abs() > 1e-12 * (a + c).max(1e-300) {
        (lambda - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = vx.hypot(vy);
    if norm == 0.0 || !norm.is_finite() {
        return vec![0.0; n];
    }
    vx /= norm;
    vy /= norm;
    if vx < 0.0 || (vx == 0.0 && vy < 0.0) {
        vx = -vx;
        vy = -vy;
    }
    residuals
        .iter()
        .map(|&(x, y)| (x - mx) * vx + (y - my) * vy)
        .collect()
}

/// Bilinear samples of a single-channel depth map, clamped at the edges.
pub fn sample_depth(depth: &Image, points: &[Point], target_dims: (usize, usize)) -> Result<Vec<f64>> {
    if depth.dims() != target_dims {
        return Err(Error::DimensionMismatch {
            expected: target_dims,
            actual: depth.dims(),
        });
    }
    let depth = if depth.channels() == 1 { depth.clone() } else { depth.to_gray() };
    Ok(points
        .iter()
        .map(|p| f64::from(depth.sample_clamped(p.x, p.y, 0)))
        .collect())
}

/// Complete-linkage agglomerative clustering of scalars down to `n` groups.
///
/// In one dimension every complete-linkage merge joins two clusters that are
/// adjacent in sorted order, so the merge loop works on sorted intervals.
/// Equal values are always merged before anything else. When fewer than `n`
/// distinct values exist `n` is reduced and the result flagged. Labels are
/// ordered by ascending cluster mean.
pub fn agglomerative_cluster(values: &[f64], n: usize) -> Result<ClusterAssignment> {
    if n == 0 {
        return Err(Error::InvalidParameter("cluster count must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::InvalidParameter("nothing to cluster".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("cluster values must be finite".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] != w[0]).count();
    let target = n.min(distinct);

    // Intervals [start, end) into `sorted`.
    let mut intervals: Vec<(usize, usize)> = (0..sorted.len()).map(|i| (i, i + 1)).collect();
    while intervals.len() > target {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..intervals.len() - 1 {
            let d = sorted[intervals[k + 1].1 - 1] - sorted[intervals[k].0];
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        intervals[best].1 = intervals[best + 1].1;
        intervals.remove(best + 1);
    }

    let mut labels = vec![0; values.len()];
    for (k, &(s, e)) in intervals.iter().enumerate() {
        for &idx in &order[s..e] {
            labels[idx] = k + 1;
        }
    }
    Ok(ClusterAssignment {
        labels,
        proxy_values: values.to_vec(),
        n_clusters: intervals.len(),
        reduced: intervals.len() < n,
    })
}

/// Complete-linkage clustering of 2-D points. Large inputs are clustered on
/// an evenly strided subsample and the remaining points join the cluster
/// with the nearest centroid. Labels are ordered by ascending centroid x.
pub fn spatial_cluster(points: &[Point], n: usize) -> Result<ClusterAssignment> {
    if n == 0 {
        return Err(Error::InvalidParameter("cluster count must be at least 1".into()));
    }
    if points.is_empty() {
        return Err(Error::InvalidParameter("nothing to cluster".into()));
    }
    let stride = points.len().div_ceil(SPATIAL_SUBSAMPLE);
    let sample: Vec<usize> = (0..points.len()).step_by(stride).collect();
    let m = sample.len();

    let mut dist = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            dist[i * m + j] = points[sample[i]].distance(points[sample[j]]);
        }
    }
    let mut active: Vec<bool> = vec![true; m];
    let mut groups: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut alive = m;
    let mut distinct_points = sample.iter().map(|&i| points[i]).collect::<Vec<_>>();
    distinct_points.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    distinct_points.dedup();
    let target = n.min(distinct_points.len());
    while alive > target {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..m {
            if !active[i] {
                continue;
            }
            for j in i + 1..m {
                if active[j] && dist[i * m + j] < best.2 {
                    best = (i, j, dist[i * m + j]);
                }
            }
        }
        let (i, j, _) = best;
        // Lance-Williams update for complete linkage.
        for k in 0..m {
            let d = dist[i * m + k].max(dist[j * m + k]);
            dist[i * m + k] = d;
            dist[k * m + i] = d;
        }
        let moved = std::mem::take(&mut groups[j]);
        groups[i].extend(moved);
        active[j] = false;
        alive -= 1;
    }

    let mut clusters: Vec<Vec<usize>> = groups
        .into_iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(g, _)| g.into_iter().map(|s| sample[s]).collect())
        .collect();
    let centroid = |members: &[usize]| {
        let (sx, sy) = members
            .iter()
            .fold((0.0, 0.0), |(ax, ay), &i| (ax + points[i].x, ay + points[i].y));
        Point::new(sx / members.len() as f64, sy / members.len() as f64)
    };
    let centroids: Vec<Point> = clusters.iter().map(|c| centroid(c)).collect();
    let mut in_sample = vec![false; points.len()];
    sample.iter().for_each(|&i| in_sample[i] = true);
    for (i, p) in points.iter().enumerate() {
        if in_sample[i] {
            continue;
        }
        let k = (0..centroids.len())
            .min_by(|&a, &b| p.distance(centroids[a]).total_cmp(&p.distance(centroids[b])))
            .expect("at least one cluster");
        clusters[k].push(i);
    }
    let mut keyed: Vec<(Point, Vec<usize>)> = clusters.into_iter().map(|c| (centroid(&c), c)).collect();
    keyed.sort_by(|a, b| a.0.x.total_cmp(&b.0.x).then(a.0.y.total_cmp(&b.0.y)));
    let mut labels = vec![0; points.len()];
    for (k, (_, members)) in keyed.iter().enumerate() {
        for &i in members {
            labels[i] = k + 1;
        }
    }
    Ok(ClusterAssignment {
        labels,
        proxy_values: points.iter().map(|p| p.x).collect(),
        n_clusters: keyed.len(),
        reduced: keyed.len() < n,
    })
}

/// Matches whose residual agrees with enough of their spatial neighbours.
///
/// Isolated false matches have residuals unrelated to their surroundings
/// and would otherwise claim clusters of their own.
fn coherent_matches(points_t: &[Point], points_s: &[Point], h: &Homography) -> Vec<bool> {
    let n = points_t.len();
    let k = COHERENCE_NEIGHBORS.min(n.saturating_sub(1));
    let need = (k / 4).max(2);
    if k < need {
        return vec![true; n];
    }
    let residual: Vec<Point> = (0..n)
        .map(|i| match h.apply(points_s[i]) {
            Some(q) => Point::new(points_t[i].x - q.x, points_t[i].y - q.y),
            None => Point::new(f64::INFINITY, f64::INFINITY),
        })
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut near: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (points_t[i].distance(points_t[j]), j))
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near[..k]
                .iter()
                .filter(|(_, j)| residual[i].distance(residual[*j]) <= COHERENCE_RADIUS_PX)
                .count()
                >= need
        })
        .collect()
}

/// Merges groups smaller than `min_size` into the group whose mean feature
/// is nearest, then relabels by ascending mean of the first feature.
fn merge_small(labels: &mut [usize], features: &[Vec<f64>], n_clusters: usize, min_size: usize) -> usize {
    let dim = features.first().map_or(1, Vec::len);
    let mut live: Vec<usize> = (1..=n_clusters).collect();
    let stats = |labels: &[usize], l: usize| {
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for (i, &li) in labels.iter().enumerate() {
            if li == l {
                count += 1;
                for (s, f) in sum.iter_mut().zip(&features[i]) {
                    *s += f;
                }
            }
        }
        let mean = if count > 0 {
            sum.iter().map(|s| s / count as f64).collect()
        } else {
            vec![f64::INFINITY; dim]
        };
        (count, mean)
    };
    loop {
        live.retain(|&l| stats(labels, l).0 > 0);
        if live.len() <= 1 {
            break;
        }
        let smallest = live
            .iter()
            .map(|&l| (stats(labels, l).0, l))
            .min()
            .expect("nonempty");
        if smallest.0 >= min_size {
            break;
        }
        let (_, mean_small) = stats(labels, smallest.1);
        let into = live
            .iter()
            .filter(|&&l| l != smallest.1)
            .map(|&l| {
                let (_, m) = stats(labels, l);
                let d: f64 = m.iter().zip(&mean_small).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, l)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("another cluster")
            .1;
        labels.iter_mut().filter(|l| **l == smallest.1).for_each(|l| *l = into);
    }
    let mut order: Vec<(f64, usize)> = live.iter().map(|&l| (stats(labels, l).1[0], l)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut remap = vec![0; n_clusters + 1];
    for (k, &(_, l)) in order.iter().enumerate() {
        remap[l] = k + 1;
    }
    labels.iter_mut().for_each(|l| *l = remap[*l]);
    order.len()
}

/// Backward warp of the source into a `(width, height)` frame: each output
/// pixel samples the source bilinearly at `H^-1(p)`. The valid mask is the
/// same warp applied to an all-ones image. Partially covered pixels are
/// normalized by their coverage; uncovered pixels are zero.
pub fn warp_with_homography(src: &Image, h: &Homography, out_dims: (usize, usize)) -> (Image, ValidMask) {
    let (w, hgt) = out_dims;
    let ch = src.channels();
    let inv = h.inverse();
    let mut data = vec![0.0f32; w * hgt * ch];
    let mut valid = vec![0.0f32; w * hgt];
    data.par_chunks_mut(w * ch)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, vrow))| {
            let mut px = [0.0f32; 3];
            for x in 0..w {
                let Some(q) = inv.apply(Point::new(x as f64, y as f64)) else {
                    continue;
                };
                let wt = src.sample_zero(q.x, q.y, &mut px[..ch]);
                if wt <= 0.0 {
                    continue;
                }
                let norm = if wt < 1.0 - 1e-6 { 1.0 / wt } else { 1.0 };
                for c in 0..ch {
                    row[x * ch + c] = (px[c] * norm).clamp(0.0, 1.0);
                }
                vrow[x] = wt.min(1.0);
            }
        });
    let img = Image::from_vec(w, hgt, ch, data).expect("sized from dims");
    let valid = ValidMask::from_vec(w, hgt, valid).expect("sized from dims");
    (img, valid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalOrigin {
    Cluster(usize),
    Global,
}

#[derive(Debug, Clone)]
pub struct Proposal {
    /// Stable 1-based id: clusters use their label, the global proposal
    /// uses `n_clusters + 1`.
    pub index: usize,
    pub homography: Homography,
    pub warped: Image,
    pub valid: ValidMask,
    pub origin: ProposalOrigin,
    pub match_count: usize,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalParams {
    pub n_clusters: usize,
    pub mode: ClusteringMode,
    pub ransac_threshold_px: f64,
    pub rng_seed: u64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            mode: ClusteringMode::Residual,
            ransac_threshold_px: 3.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProposalSet {
    /// Cluster proposals by ascending label, then the global one.
    pub proposals: Vec<Proposal>,
    pub assignment: Option<ClusterAssignment>,
    pub global_inliers: Vec<bool>,
    /// Human-readable notes about degraded steps.
    pub notes: Vec<String>,
}

impl ProposalSet {
    pub fn global_index(n_clusters: usize) -> usize {
        n_clusters + 1
    }
}

fn ransac_params(p: &ProposalParams, index: usize) -> RansacParams {
    RansacParams {
        threshold_px: p.ransac_threshold_px,
        seed: p.rng_seed.wrapping_add(index as u64),
        ..RansacParams::default()
    }
}

/// Clusters the matches, fits one homography per cluster and a global one,
/// and warps the source under each. A cluster whose fit fails is dropped; a
/// failing global fit is an error.
pub fn build_proposal_set(
    matches: &MatchSet,
    params: &ProposalParams,
    src: &Image,
    target_dims: (usize, usize),
    depth: Option<&Image>,
) -> Result<ProposalSet> {
    if matches.is_empty() {
        return Err(Error::InsufficientMatches { found: 0 });
    }
    if params.n_clusters == 0 {
        return Err(Error::InvalidConfig("n_clusters must be at least 1".into()));
    }
    let pairs = matches.point_pairs();
    let global_idx = ProposalSet::global_index(params.n_clusters);
    let global = ransac_homography(&pairs, &ransac_params(params, global_idx))?;
    let mut notes = Vec::new();

    let n_match = pairs.len();
    let assignment = match params.mode {
        ClusteringMode::None => None,
        mode => {
            let residual = depth_proxy_values(&matches.points_t, &matches.points_s, &global.homography);
            let (mut assignment, features): (ClusterAssignment, Vec<Vec<f64>>) = match mode {
                ClusteringMode::Residual => {
                    let keep = coherent_matches(&matches.points_t, &matches.points_s, &global.homography);
                    let kept: Vec<f64> = (0..n_match).filter(|&i| keep[i]).map(|i| residual[i]).collect();
                    let values = if kept.is_empty() { residual.clone() } else { kept };
                    let core = agglomerative_cluster(&values, params.n_clusters)?;
                    let labels = if values.len() == n_match {
                        core.labels.clone()
                    } else {
                        let means: Vec<f64> = (1..=core.n_clusters)
                            .map(|l| {
                                let m: Vec<f64> = (0..values.len())
                                    .filter(|&k| core.labels[k] == l)
                                    .map(|k| values[k])
                                    .collect();
                                m.iter().sum::<f64>() / m.len() as f64
                            })
                            .collect();
                        let mut it = core.labels.iter();
                        (0..n_match)
                            .map(|i| {
                                if keep[i] {
                                    *it.next().expect("one label per kept match")
                                } else {
                                    1 + (0..means.len())
                                        .min_by(|&a, &b| {
                                            (residual[i] - means[a])
                                                .abs()
                                                .total_cmp(&(residual[i] - means[b]).abs())
                                        })
                                        .expect("at least one cluster")
                                }
                            })
                            .collect()
                    };
                    let a = ClusterAssignment {
                        labels,
                        proxy_values: residual.clone(),
                        n_clusters: core.n_clusters,
                        reduced: core.reduced,
                    };
                    (a, residual.iter().map(|&v| vec![v]).collect())
                }
                ClusteringMode::DepthFile => {
                    let depth = depth.ok_or_else(|| {
                        Error::InvalidConfig("depth-file clustering needs a depth map".into())
                    })?;
                    let values = sample_depth(depth, &matches.points_t, target_dims)?;
                    let a = agglomerative_cluster(&values, params.n_clusters)?;
                    let f = values.iter().map(|&v| vec![v]).collect();
                    (a, f)
                }
                ClusteringMode::Spatial => {
                    let a = spatial_cluster(&matches.points_t, params.n_clusters)?;
                    let f = matches.points_t.iter().map(|p| vec![p.x, p.y]).collect();
                    (a, f)
                }
                ClusteringMode::Random => {
                    let mut order: Vec<usize> = (0..n_match).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
                    order.shuffle(&mut rng);
                    let k = params.n_clusters.min(n_match);
                    let mut labels = vec![0; n_match];
                    for (pos, &i) in order.iter().enumerate() {
                        labels[i] = pos % k + 1;
                    }
                    let a = ClusterAssignment {
                        labels,
                        proxy_values: residual.clone(),
                        n_clusters: k,
                        reduced: k < params.n_clusters,
                    };
                    // Random groups have no geometry; merge them by label.
                    let f = a.labels.iter().map(|&l| vec![l as f64]).collect();
                    (a, f)
                }
                ClusteringMode::None => unreachable!(),
            };
            if assignment.reduced {
                notes.push(format!(
                    "clustering produced {} of {} requested clusters",
                    assignment.n_clusters, params.n_clusters
                ));
            }
            let before = assignment.n_clusters;
            assignment.n_clusters =
                merge_small(&mut assignment.labels, &features, assignment.n_clusters, MIN_CLUSTER_SIZE);
            if assignment.n_clusters < before {
                notes.push(format!(
                    "merged clusters below {MIN_CLUSTER_SIZE} matches: {before} -> {}",
                    assignment.n_clusters
                ));
            }
            Some(assignment)
        }
    };

    let mut jobs: Vec<(usize, ProposalOrigin, Vec<usize>)> = Vec::new();
    if let Some(a) = &assignment {
        for l in 1..=a.n_clusters {
            jobs.push((l, ProposalOrigin::Cluster(l), a.members(l)));
        }
    }
    let results: Vec<std::result::Result<Proposal, String>> = jobs
        .par_iter()
        .map(|(index, origin, members)| {
            let sub: Vec<_> = members.iter().map(|&i| pairs[i]).collect();
            let fit = ransac_homography(&sub, &ransac_params(params, *index))
                .map_err(|e| format!("cluster {index}: {e}"))?;
            let (warped, valid) = warp_with_homography(src, &fit.homography, target_dims);
            Ok(Proposal {
                index: *index,
                inlier_count: fit.inlier_count(),
                homography: fit.homography,
                warped,
                valid,
                origin: *origin,
                match_count: sub.len(),
            })
        })
        .collect();
    let mut proposals = Vec::new();
    for r in results {
        match r {
            Ok(p) => proposals.push(p),
            Err(note) => notes.push(note),
        }
    }
    let (warped, valid) = warp_with_homography(src, &global.homography, target_dims);
    proposals.push(Proposal {
        index: global_idx,
        inlier_count: global.inlier_count(),
        homography: global.homography,
        warped,
        valid,
        origin: ProposalOrigin::Global,
        match_count: n_match,
    });
    Ok(ProposalSet {
        proposals,
        assignment,
        global_inliers: global.inliers,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn proxy_zero_and_constant_residuals() {
        let pts: Vec<Point> = (0..6).map(|i| Point::new(i as f64 * 7.0, (i * i) as f64)).collect();
        let h = Homography::identity();
        assert!(depth_proxy_values(&pts, &pts, &h).iter().all(|&v| v == 0.0));
        let shifted: Vec<Point> = pts.iter().map(|p| Point::new(p.x + 2.0, p.y)).collect();
        assert!(depth_proxy_values(&shifted, &pts, &h).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn proxy_two_sided_residuals() {
        let src: Vec<Point> = (0..10).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        let tgt: Vec<Point> = src
            .iter()
            .enumerate()
            .map(|(i, p)| Point::new(p.x + if i < 5 { 4.0 } else { -4.0 }, p.y))
            .collect();
        let v = depth_proxy_values(&tgt, &src, &Homography::identity());
        for (i, val) in v.iter().enumerate() {
            let want = if i < 5 { 4.0 } else { -4.0 };
            assert!((val.abs() - 4.0).abs() < 1e-12);
            assert!((val - want).abs() < 1e-12 || (val + want).abs() < 1e-12);
        }
        assert!(v[0] * v[9] < 0.0);
    }

    #[test]
    fn proxy_fewer_than_two() {
        let p = [Point::new(1.0, 1.0)];
        assert_eq!(depth_proxy_values(&p, &p, &Homography::translation(5.0, 0.0)), vec![0.0]);
    }

    #[test]
    fn depth_sampling() {
        let flat = Image::filled(10, 8, 1, 0.5);
        let pts = [Point::new(3.3, 4.1), Point::new(0.0, 0.0)];
        assert!(sample_depth(&flat, &pts, (10, 8)).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-7));

        let ramp = Image::from_fn(20, 4, 1, |x, _, _| x as f32 / 20.0);
        let v = sample_depth(&ramp, &[Point::new(10.0, 1.0)], (20, 4)).unwrap();
        assert!((v[0] - 0.5).abs() <= 0.5 / 20.0 + 1e-7);

        let corner = Image::from_fn(5, 5, 1, |x, y, _| (x + 5 * y) as f32 / 30.0);
        let v = sample_depth(&corner, &[Point::new(-3.0, -3.0)], (5, 5)).unwrap();
        assert_eq!(v[0], f64::from(corner.get(0, 0, 0)));

        assert!(sample_depth(&flat, &pts, (9, 8)).is_err());
    }

    fn partitions_into(n: usize, k: usize) -> Vec<Vec<usize>> {
        // Every labeling of n items with labels 0..k using all k labels.
        let mut out = Vec::new();
        let mut lab = vec![0; n];
        loop {
            let mut used = vec![false; k];
            lab.iter().for_each(|&l| used[l] = true);
            if used.iter().all(|&u| u) {
                out.push(lab.clone());
            }
            let mut i = 0;
            loop {
                if i == n {
                    return out;
                }
                lab[i] += 1;
                if lab[i] < k {
                    break;
                }
                lab[i] = 0;
                i += 1;
            }
        }
    }

    fn max_diameter(values: &[f64], labels: &[usize], k: usize) -> f64 {
        (0..k)
            .map(|l| {
                let m: Vec<f64> = (0..values.len()).filter(|&i| labels[i] == l).map(|i| values[i]).collect();
                let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn clustering_matches_brute_force() {
        let values = [0.1, 0.12, 0.11, 5.0, 5.1, 9.7];
        let got = agglomerative_cluster(&values, 3).unwrap();
        assert_eq!(got.labels, vec![1, 1, 1, 2, 2, 3]);
        assert!(!got.reduced);

        let best = partitions_into(values.len(), 3)
            .into_iter()
            .min_by(|a, b| max_diameter(&values, a, 3).total_cmp(&max_diameter(&values, b, 3)))
            .unwrap();
        let zero_based: Vec<usize> = got.labels.iter().map(|l| l - 1).collect();
        assert!((max_diameter(&values, &best, 3) - max_diameter(&values, &zero_based, 3)).abs() < 1e-12);
        // Same grouping as the brute-force optimum, up to label names.
        for i in 0..values.len() {
            for j in 0..values.len() {
                assert_eq!(best[i] == best[j], zero_based[i] == zero_based[j]);
            }
        }
    }

    #[test]
    fn clustering_singletons_and_identical() {
        let values = [3.0, 1.0, 2.0];
        let a = agglomerative_cluster(&values, 3).unwrap();
        assert_eq!(a.labels, vec![3, 1, 2]);

        let same = [0.7; 5];
        let a = agglomerative_cluster(&same, 2).unwrap();
        assert_eq!(a.n_clusters, 1);
        assert!(a.reduced);
        assert!(a.labels.iter().all(|&l| l == 1));

        let few = agglomerative_cluster(&[1.0, 2.0], 5).unwrap();
        assert_eq!(few.n_clusters, 2);
        assert!(few.reduced);
    }

    #[test]
    fn spatial_clusters_separate_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            pts.push(Point::new((i % 5) as f64, (i / 5) as f64));
            pts.push(Point::new(100.0 + (i % 5) as f64, (i / 5) as f64));
        }
        let a = spatial_cluster(&pts, 2).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(a.labels[i], if p.x < 50.0 { 1 } else { 2 });
        }
    }

    #[test]
    fn warp_identity_and_out_of_frame() {
        let img = Image::from_fn(12, 9, 3, |x, y, c| ((x + y + c) % 7) as f32 / 7.0);
        let (w, v) = warp_with_homography(&img, &Homography::identity(), (12, 9));
        assert_eq!(w, img);
        assert!(v.data().iter().all(|&x| x == 1.0));

        let (w, v) = warp_with_homography(&img, &Homography::translation(12.0, 0.0), (12, 9));
        assert!(w.data().iter().all(|&x| x == 0.0));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn warp_translated_ramp() {
        let img = Image::from_fn(40, 10, 1, |x, y, _| (x as f32 + 0.5 * y as f32) / 50.0);
        let (w, v) = warp_with_homography(&img, &Homography::translation(10.0, 0.0), (40, 10));
        for y in 0..10 {
            for x in 0..40 {
                if v.get(x, y) >= 1.0 - 1e-6 {
                    let want = img.get(x - 10, y, 0);
                    assert!((w.get(x, y, 0) - want).abs() < 1e-6);
                } else {
                    assert!(x < 10);
                }
            }
        }
    }

    fn single_plane_matches() -> (MatchSet, Homography) {
        let h = Homography::from_rows([[1.02, 0.01, 5.0], [-0.015, 0.99, -3.0], [1e-5, -2e-5, 1.0]]).unwrap();
        let mut pt = Vec::new();
        let mut ps = Vec::new();
        for j in 0..8 {
            for i in 0..8 {
                let s = Point::new(10.0 + 13.0 * i as f64 + 0.3 * j as f64, 8.0 + 11.0 * j as f64 + 0.7 * i as f64);
                ps.push(s);
                pt.push(h.apply(s).unwrap());
            }
        }
        (MatchSet::from_points(pt, ps), h)
    }

    #[test]
    fn none_mode_gives_only_global() {
        let (m, _) = single_plane_matches();
        let src = Image::filled(120, 100, 3, 0.3);
        let params = ProposalParams {
            mode: ClusteringMode::None,
            ..ProposalParams::default()
        };
        let set = build_proposal_set(&m, &params, &src, (120, 100), None).unwrap();
        assert_eq!(set.proposals.len(), 1);
        assert_eq!(set.proposals[0].origin, ProposalOrigin::Global);
        assert_eq!(set.proposals[0].index, 6);
    }

    #[test]
    fn single_plane_gives_equal_homographies() {
        let (m, _) = single_plane_matches();
        let src = Image::filled(120, 100, 3, 0.3);
        for mode in [ClusteringMode::Residual, ClusteringMode::Spatial, ClusteringMode::Random] {
            let params = ProposalParams {
                mode,
                ..ProposalParams::default()
            };
            let set = build_proposal_set(&m, &params, &src, (120, 100), None).unwrap();
            let reference = set.proposals.last().unwrap().homography.normalized_frobenius();
            for p in &set.proposals {
                let d = (p.homography.normalized_frobenius() - reference).norm();
                assert!(d < 1e-4, "{mode:?} proposal {} differs by {d}", p.index);
            }
        }
    }

    #[test]
    fn depth_file_mode_requires_depth() {
        let (m, _) = single_plane_matches();
        let src = Image::filled(120, 100, 3, 0.3);
        let params = ProposalParams {
            mode: ClusteringMode::DepthFile,
            ..ProposalParams::default()
        };
        assert!(matches!(
            build_proposal_set(&m, &params, &src, (120, 100), None),
            Err(Error::InvalidConfig(_))
        ));
        let depth = Image::from_fn(120, 100, 1, |x, _, _| if x < 60 { 0.2 } else { 0.8 });
        let set = build_proposal_set(&m, &params, &src, (120, 100), Some(&depth)).unwrap();
        assert!(set.proposals.len() >= 2);
    }

    proptest! {
        #[test]
        fn labels_partition_the_values(values in prop::collection::vec(-50.0f64..50.0, 1..60), n in 1usize..7) {
            let a = agglomerative_cluster(&values, n).unwrap();
            prop_assert_eq!(a.labels.len(), values.len());
            prop_assert!(a.n_clusters <= n);
            prop_assert!(a.labels.iter().all(|&l| l >= 1 && l <= a.n_clusters));
            prop_assert!(a.sizes().iter().all(|&s| s > 0));
            // Means ascend with the label.
            let means: Vec<f64> = (1..=a.n_clusters).map(|l| {
                let m = a.members(l);
                m.iter().map(|&i| values[i]).sum::<f64>() / m.len() as f64
            }).collect();
            prop_assert!(means.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn warp_round_trip(tx in -6.0f64..6.0, ty in -6.0f64..6.0, sx in 0.9f64..1.1) {
            let img = Image::from_fn(48, 40, 1, |x, y, _| {
                0.5 + 0.25 * ((x as f32) * 0.3).sin() * ((y as f32) * 0.2).cos()
            });
            let h = Homography::from_rows([[sx, 0.0, tx], [0.0, sx, ty], [0.0, 0.0, 1.0]]).unwrap();
            let (fwd, v1) = warp_with_homography(&img, &h, (48, 40));
            let (back, v2) = warp_with_homography(&fwd, &h.inverse(), (48, 40));
            let mut sum = 0.0;
            let mut n = 0;
            for y in 0..40 {
                for x in 0..48 {
                    if v2.get(x, y) >= 1.0 - 1e-6 {
                        let q = h.apply(Point::new(x as f64, y as f64)).unwrap();
                        let (qx, qy) = (q.x.round() as usize, q.y.round() as usize);
                        if qx < 48 && qy < 40 && v1.get(qx, qy) >= 1.0 - 1e-6 {
                            sum += f64::from((back.get(x, y, 0) - img.get(x, y, 0)).abs());
                            n += 1;
                        }
                    }
                }
            }
            prop_assume!(n > 100);
            prop_assert!(sum / (n as f64) < 0.02);
        }
    }
}
