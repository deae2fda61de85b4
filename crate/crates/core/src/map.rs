//! The single global radiance map: a voxel-indexed point cloud with
//! 1 cm spatial dedup, exact k-nearest-neighbor search and per-voxel
//! activation bookkeeping.

use alloc::vec::Vec;

use hashbrown::HashMap;
#[cfg(not(feature = "std"))]
use nalgebra::ComplexField;
use nalgebra::{Matrix3, Vector3};

/// Stable handle into [`VoxelMap`]; points are never deleted.
pub type PointId = u32;

/// One map point: global position plus per-channel radiance, each with a
/// covariance. Radiance stays exactly zero until the first camera
/// observation initializes it.
#[derive(Clone, Debug)]
#[repr(C)] // hot fields first: radiance updates touch pos..rad_initialized
pub struct RadiancePoint {
    pub pos: Vector3<f64>,
    pub radiance: Vector3<f64>,
    pub cov_rad: Matrix3<f64>,
    pub t_rad_updated: f64,
    pub rad_initialized: bool,
    pub cov_pos: Matrix3<f64>,
    pub t_created: f64,
}

#[derive(Clone, Debug, Default)]
struct Voxel {
    /// Positions inline with ids. The prefix `points[..sorted_len]` is
    /// sorted by x so scans can prune to an x-window instead of walking a
    /// (possibly noise-thickened) voxel; fresh appends sit unsorted at the
    /// tail until the batch is finalized.
    points: Vec<(Vector3<f64>, PointId)>,
    sorted_len: usize,
    last_append: f64,
}

impl Voxel {
    /// Visit only points that can have |x - center_x| <= bound.
    #[inline]
    fn scan_window(&self, center_x: f64, bound: f64, mut f: impl FnMut(&Vector3<f64>, PointId)) {
        let sorted = &self.points[..self.sorted_len];
        let lo = sorted.partition_point(|(p, _)| p.x < center_x - bound);
        for (p, id) in &sorted[lo..] {
            if p.x > center_x + bound {
                break;
            }
            f(p, *id);
        }
        for (p, id) in &self.points[self.sorted_len..] {
            if (p.x - center_x).abs() <= bound {
                f(p, *id);
            }
        }
    }

    fn finalize(&mut self) {
        if self.sorted_len < self.points.len() {
            self.points.sort_unstable_by(|a, b| a.0.x.total_cmp(&b.0.x));
            self.sorted_len = self.points.len();
        }
    }
}

type VoxelKey = (i32, i32, i32);

/// Hash-gridded point map. Concurrency contract: many readers or one
/// writer; the pipeline alternates a LiDAR write phase with a camera
/// read/radiance-write phase.
pub struct VoxelMap {
    pub voxel_size: f64,
    pub resolution: f64,
    pub activation_window: f64,
    points: Vec<RadiancePoint>,
    voxels: HashMap<VoxelKey, Voxel>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: PointId,
    pub dist: f64,
}

impl VoxelMap {
    pub fn new(voxel_size: f64, resolution: f64, activation_window: f64) -> Self {
        Self {
            voxel_size,
            resolution,
            activation_window,
            points: Vec::new(),
            voxels: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: PointId) -> &RadiancePoint {
        &self.points[id as usize]
    }

    pub fn point_mut(&mut self, id: PointId) -> &mut RadiancePoint {
        &mut self.points[id as usize]
    }

    pub fn points(&self) -> &[RadiancePoint] {
        &self.points
    }

    fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        (
            (p.x / self.voxel_size).floor() as i32,
            (p.y / self.voxel_size).floor() as i32,
            (p.z / self.voxel_size).floor() as i32,
        )
    }

    /// True when any stored point lies within `radius` of `p`.
    pub fn has_point_within(&self, p: &Vector3<f64>, radius: f64) -> bool {
        let r2 = radius * radius;
        let lo = self.key_of(&(p - Vector3::repeat(radius)));
        let hi = self.key_of(&(p + Vector3::repeat(radius)));
        for kx in lo.0..=hi.0 {
            for ky in lo.1..=hi.1 {
                for kz in lo.2..=hi.2 {
                    if let Some(v) = self.voxels.get(&(kx, ky, kz)) {
                        let mut found = false;
                        v.scan_window(p.x, radius, |pos, _| {
                            if (pos - p).norm_squared() <= r2 {
                                found = true;
                            }
                        });
                        if found {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Insert points that are at least `resolution` away from everything
    /// already in the map; new points start with zero radiance. Voxels that
    /// actually receive a point get their activation timestamp refreshed.
    /// Returns the number of points inserted.
    pub fn insert_points(&mut self, pts: &[(Vector3<f64>, f64)], pos_sigma: f64) -> usize {
        let cov = Matrix3::identity() * (pos_sigma * pos_sigma);
        let mut inserted = 0usize;
        let mut dirty: Vec<VoxelKey> = Vec::new();
        for (pos, t) in pts {
            if !pos.x.is_finite() || !pos.y.is_finite() || !pos.z.is_finite() {
                continue;
            }
            if self.has_point_within(pos, self.resolution) {
                continue;
            }
            let id = self.points.len() as PointId;
            self.points.push(RadiancePoint {
                pos: *pos,
                radiance: Vector3::zeros(),
                cov_pos: cov,
                cov_rad: Matrix3::zeros(),
                t_created: *t,
                t_rad_updated: *t,
                rad_initialized: false,
            });
            let key = self.key_of(pos);
            let voxel = self.voxels.entry(key).or_default();
            voxel.points.push((*pos, id));
            voxel.last_append = voxel.last_append.max(*t);
            dirty.push(key);
            inserted += 1;
        }
        dirty.sort_unstable();
        dirty.dedup();
        for key in dirty {
            if let Some(v) = self.voxels.get_mut(&key) {
                v.finalize();
            }
        }
        inserted
    }

    /// First and second moments of all points within `radius` of `query`:
    /// (count, sum, sum of outer products). Unlike a nearest-k query this
    /// support is symmetric across a noise-thickened surface, so planes
    /// fit from it are unbiased in the normal direction.
    pub fn ball_moments(
        &self,
        query: &Vector3<f64>,
        radius: f64,
    ) -> (usize, Vector3<f64>, Matrix3<f64>) {
        let r2 = radius * radius;
        let mut count = 0usize;
        let mut sum = Vector3::zeros();
        let mut sq = Matrix3::zeros();
        let lo = self.key_of(&(query - Vector3::repeat(radius)));
        let hi = self.key_of(&(query + Vector3::repeat(radius)));
        for kx in lo.0..=hi.0 {
            for ky in lo.1..=hi.1 {
                for kz in lo.2..=hi.2 {
                    if let Some(v) = self.voxels.get(&(kx, ky, kz)) {
                        v.scan_window(query.x, radius, |pos, _| {
                            if (pos - query).norm_squared() <= r2 {
                                count += 1;
                                sum += pos;
                                sq += pos * pos.transpose();
                            }
                        });
                    }
                }
            }
        }
        (count, sum, sq)
    }

    /// Refresh the activation timestamp of the voxels containing `pts`
    /// (for surfaces that were re-observed without adding new geometry).
    /// Voxels with no stored points are ignored.
    pub fn touch_voxels(&mut self, pts: &[Vector3<f64>], t: f64) {
        for p in pts {
            let key = (
                (p.x / self.voxel_size).floor() as i32,
                (p.y / self.voxel_size).floor() as i32,
                (p.z / self.voxel_size).floor() as i32,
            );
            if let Some(v) = self.voxels.get_mut(&key) {
                v.last_append = v.last_append.max(t);
            }
        }
    }

    /// Up to `k` nearest points within `r_max`, ascending by distance with
    /// ties broken by id. Exactly equivalent to a brute-force scan.
    pub fn knn_search(&self, query: &Vector3<f64>, k: usize, r_max: f64) -> Vec<Neighbor> {
        let mut best: Vec<(f64, PointId)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let r_max2 = r_max * r_max;
        let center = self.key_of(query);
        let max_shell = (r_max / self.voxel_size).ceil() as i32 + 1;

        // In dense regions the k nearest sit within a few resolutions of
        // the query; try a narrow x-window on the center voxel first. The
        // result is provably complete for that voxel when the kth hit lies
        // inside the window (anything outside is strictly farther in x).
        let seed_bound = (4.0 * self.resolution).min(r_max);
        if let Some(voxel) = self.voxels.get(&center) {
            voxel.scan_window(query.x, seed_bound, |pos, id| {
                let d2 = (pos - query).norm_squared();
                if d2 > r_max2 {
                    return;
                }
                let cand = (d2, id);
                if best.len() == k && cand >= best[k - 1] {
                    return;
                }
                let at = best.partition_point(|b| *b < cand);
                best.insert(at, cand);
                best.truncate(k);
            });
            if !(best.len() == k && best[k - 1].0 <= seed_bound * seed_bound) {
                // Window was not conclusive: rescan the center voxel fully.
                best.clear();
                voxel.scan_window(query.x, r_max, |pos, id| {
                    let d2 = (pos - query).norm_squared();
                    if d2 > r_max2 {
                        return;
                    }
                    let cand = (d2, id);
                    if best.len() == k && cand >= best[k - 1] {
                        return;
                    }
                    let at = best.partition_point(|b| *b < cand);
                    best.insert(at, cand);
                    best.truncate(k);
                });
            }
        }

        for shell in 1..=max_shell {
            // Every voxel at Chebyshev distance >= shell is at least
            // (shell-1) * voxel_size away from the query.
            let bound = (shell - 1).max(0) as f64 * self.voxel_size;
            if bound > r_max {
                break;
            }
            if best.len() == k && best[k - 1].0 < bound * bound {
                break;
            }
            self.visit_shell(center, shell, |voxel| {
                // Points with |dx| beyond the current kth distance (or the
                // search radius) cannot enter the result set.
                let bound = if best.len() == k { best[k - 1].0.sqrt() } else { r_max };
                voxel.scan_window(query.x, bound, |pos, id| {
                    let d2 = (pos - query).norm_squared();
                    if d2 > r_max2 {
                        return;
                    }
                    let cand = (d2, id);
                    if best.len() == k && cand >= best[k - 1] {
                        return;
                    }
                    let at = best.partition_point(|b| *b < cand);
                    best.insert(at, cand);
                    best.truncate(k);
                });
            });
        }
        best.into_iter()
            .map(|(d2, id)| Neighbor { id, dist: d2.sqrt() })
            .collect()
    }

    fn visit_shell(&self, center: VoxelKey, shell: i32, mut f: impl FnMut(&Voxel)) {
        let mut visit = |key: VoxelKey| {
            if let Some(v) = self.voxels.get(&key) {
                f(v);
            }
        };
        if shell == 0 {
            visit(center);
            return;
        }
        let s = shell;
        for dx in -s..=s {
            for dy in -s..=s {
                let on_rim = dx.abs() == s || dy.abs() == s;
                if on_rim {
                    for dz in -s..=s {
                        visit((center.0 + dx, center.1 + dy, center.2 + dz));
                    }
                } else {
                    visit((center.0 + dx, center.1 + dy, center.2 - s));
                    visit((center.0 + dx, center.1 + dy, center.2 + s));
                }
            }
        }
    }

    /// Ids of all points living in voxels whose activation timestamp is
    /// within the activation window of `now`, ascending by id.
    pub fn activated_points(&self, now: f64) -> Vec<PointId> {
        self.activated_points_filtered(now, |_, _| true)
    }

    /// Activated points restricted to voxels passing a coarse geometric
    /// filter (center, bounding radius), e.g. a camera frustum test.
    pub fn activated_points_filtered(
        &self,
        now: f64,
        mut voxel_filter: impl FnMut(Vector3<f64>, f64) -> bool,
    ) -> Vec<PointId> {
        let cutoff = now - self.activation_window;
        let radius = self.voxel_size * 0.8660254037844386 + 1e-9; // half diagonal
        let mut out = Vec::new();
        for (key, v) in &self.voxels {
            if v.last_append < cutoff {
                continue;
            }
            let center = Vector3::new(
                (key.0 as f64 + 0.5) * self.voxel_size,
                (key.1 as f64 + 0.5) * self.voxel_size,
                (key.2 as f64 + 0.5) * self.voxel_size,
            );
            if !voxel_filter(center, radius) {
                continue;
            }
            out.extend(v.points.iter().map(|(_, id)| *id));
        }
        out.sort_unstable();
        out
    }

    /// Mutable access to the whole point arena (for bulk radiance updates).
    pub fn points_mut(&mut self) -> &mut [RadiancePoint] {
        &mut self.points
    }

    /// Apply `f` to the points with the given ids, in parallel when
    /// enabled. Ids must be sorted and unique (as returned by the
    /// activation queries); each invocation gets exclusive access to its
    /// point, and per-id results land in the returned vector in order.
    pub fn for_each_point_mut<R: Send + Default + Clone>(
        &mut self,
        ids: &[PointId],
        f: impl Fn(PointId, &mut RadiancePoint) -> R + Sync,
    ) -> alloc::vec::Vec<R> {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let mut out = alloc::vec![R::default(); ids.len()];
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            struct Arena(*mut RadiancePoint);
            // SAFETY: sorted unique ids make every access disjoint.
            unsafe impl Sync for Arena {}
            let arena = Arena(self.points.as_mut_ptr());
            let arena_ref = &arena;
            ids.par_iter().zip(out.par_iter_mut()).for_each(|(&id, slot)| {
                // SAFETY: ids are unique, so no two closures alias a point,
                // and ids index live arena entries.
                let pt = unsafe { &mut *arena_ref.0.add(id as usize) };
                *slot = f(id, pt);
            });
        }
        #[cfg(not(feature = "parallel"))]
        for (&id, slot) in ids.iter().zip(out.iter_mut()) {
            *slot = f(id, &mut self.points[id as usize]);
        }
        out
    }
}

/// Least-squares plane through a neighbor set.
#[derive(Clone, Copy, Debug)]
pub struct PlaneFit {
    /// Unit normal (sign is arbitrary).
    pub normal: Vector3<f64>,
    /// Mean of the neighbors.
    pub centroid: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlaneFitError {
    TooFewPoints,
    Degenerate,
}

/// Fit a plane as the smallest-eigenvector direction of the neighbor
/// scatter. Degenerate when the points are not convincingly planar: rank
/// deficiency (a line), a thick cloud (smallest/middle eigenvalue ratio
/// above `eig_ratio` and thicker than `thickness_floor` allows), any
/// residual above `max_residual`, or any neighbor farther than
/// `max_radius` from the centroid. The floor is the out-of-plane variance
/// explained by sensor noise, so noisy-but-flat neighborhoods stay usable.
pub fn fit_plane(
    pts: &[Vector3<f64>],
    eig_ratio: f64,
    thickness_floor: f64,
    max_residual: f64,
    max_radius: f64,
) -> Result<PlaneFit, PlaneFitError> {
    if pts.len() < 3 {
        return Err(PlaneFitError::TooFewPoints);
    }
    let mut sum = Vector3::zeros();
    let mut sq = Matrix3::zeros();
    for p in pts {
        sum += p;
        sq += p * p.transpose();
    }
    let fit = fit_plane_moments(pts.len(), &sum, &sq, eig_ratio, thickness_floor)?;
    for p in pts {
        let d = p - fit.centroid;
        if fit.normal.dot(&d).abs() > max_residual || d.norm() > max_radius {
            return Err(PlaneFitError::Degenerate);
        }
    }
    Ok(fit)
}

/// Plane fit from accumulated first/second moments (see
/// [`VoxelMap::ball_moments`]); avoids materializing the support set.
pub fn fit_plane_moments(
    count: usize,
    sum: &Vector3<f64>,
    sq: &Matrix3<f64>,
    eig_ratio: f64,
    thickness_floor: f64,
) -> Result<PlaneFit, PlaneFitError> {
    if count < 3 {
        return Err(PlaneFitError::TooFewPoints);
    }
    let n = count as f64;
    let centroid = sum / n;
    let scatter = sq / n - centroid * centroid.transpose();
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_unstable_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0));
    if l1 < 1e-12 || l0 > (eig_ratio * l1).max(thickness_floor) {
        return Err(PlaneFitError::Degenerate);
    }
    let normal = eig.eigenvectors.column(order[0]).normalize();
    Ok(PlaneFit { normal, centroid })
}
