//! Point-cloud geometry kernels.

mod contact;
mod kdtree;
mod normals;

pub use contact::{aligned_distance, contact_map, ground_truth_contact, AlignedDistances, ContactMap};
pub use kdtree::KdTree;
pub use normals::{estimate_normals, NormalSet};

use crate::error::{Error, Result};
use crate::se3kin::Vec3;

/// Ordered list of finite 3D points, in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet(Vec<Vec3>);

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let p = PointSet(points);
        p.check_finite()?;
        Ok(p)
    }

    /// Wraps points without re-checking finiteness; callers guarantee it.
    pub(crate) fn from_vec_unchecked(points: Vec<Vec3>) -> Self {
        PointSet(points)
    }

    /// Builds a set from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat<T: Copy + Into<f64>>(flat: &[T]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat point buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        PointSet::new(
            flat.chunks_exact(3)
                .map(|c| [c[0].into(), c[1].into(), c[2].into()])
                .collect(),
        )
    }

    pub fn to_flat_f32(&self) -> Vec<f32> {
        self.0.iter().flat_map(|p| p.map(|c| c as f32)).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.0.iter().flatten().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("point set".into()))
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.0
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PointSet {
        PointSet(idx.iter().map(|&i| self.0[i]).collect())
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.0.is_empty() {
            return None;
        }
        let n = self.0.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.0 {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        Some(c.map(|v| v / n))
    }
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For each query point, indices of the `k` nearest reference points sorted by
/// ascending distance, ties broken by lower index. Exact.
pub fn knn(query: &PointSet, reference: &PointSet, k: usize) -> Result<Vec<Vec<usize>>> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("knn reference set is empty".into()));
    }
    if k > reference.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds reference size {}",
            reference.len()
        )));
    }
    let tree = KdTree::build(reference);
    Ok(query
        .points()
        .iter()
        .map(|q| tree.nearest(q, k).into_iter().map(|(i, _)| i).collect())
        .collect())
}

/// Closed axis-aligned box, one `[lo, hi]` interval per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb(pub [[f64; 2]; 3]);

impl Aabb {
    pub fn new(bounds: [[f64; 2]; 3]) -> Result<Self> {
        if bounds.iter().any(|[lo, hi]| lo.is_nan() || hi.is_nan() || lo > hi) {
            return Err(Error::InvalidArgument(format!("invalid crop bounds {bounds:?}")));
        }
        Ok(Aabb(bounds))
    }

    pub fn unbounded() -> Self {
        Aabb([[f64::NEG_INFINITY, f64::INFINITY]; 3])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.0[a][0] && p[a] <= self.0[a][1])
    }

    pub fn is_unbounded(&self) -> bool {
        self.0
            .iter()
            .all(|[lo, hi]| *lo == f64::NEG_INFINITY && *hi == f64::INFINITY)
    }
}

/// Keeps the points inside the closed box, preserving order.
pub fn crop_aabb(cloud: &PointSet, bounds: &Aabb) -> PointSet {
    PointSet(
        cloud
            .points()
            .iter()
            .filter(|p| bounds.contains(p))
            .copied()
            .collect(),
    )
}

/// Greedy max-min subset selection starting at `start`. Ties go to the lowest
/// index; points already selected are never chosen again.
pub fn farthest_point_sample(cloud: &PointSet, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} of {n} points"
        )));
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!("start index {start} out of range")));
    }
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    for _ in 0..m {
        out.push(cur);
        taken[cur] = true;
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(v: &[Vec3]) -> PointSet {
        PointSet::new(v.to_vec()).unwrap()
    }

    #[test]
    fn knn_ordered_line() {
        let r = ps(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let q = ps(&[[0.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &r, 2).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn knn_self_match() {
        let r = ps(&[[1.0, 0.0, 0.0], [2.0, 5.0, 0.0], [3.0, 0.0, 1.0]]);
        let q = ps(&[[2.0, 5.0, 0.0]]);
        assert_eq!(knn(&q, &r, 1).unwrap(), vec![vec![1]]);
        let tree = KdTree::build(&r);
        assert_eq!(tree.nearest(&[2.0, 5.0, 0.0], 1), vec![(1, 0.0)]);
    }

    #[test]
    fn knn_rejects_large_k() {
        let r = ps(&[[1.0, 0.0, 0.0]]);
        assert!(knn(&r, &r, 2).is_err());
        assert!(knn(&r, &PointSet::default(), 0).is_err());
    }

    #[test]
    fn knn_tie_break_prefers_lower_index() {
        let r = ps(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]]);
        let q = ps(&[[0.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &r, 3).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn crop_paper_range() {
        let b = Aabb::new([[-0.4, 0.1], [-0.7, -0.4], [0.1, 0.51]]).unwrap();
        let c = ps(&[[0.0, -0.5, 0.3], [0.2, -0.5, 0.3]]);
        assert_eq!(crop_aabb(&c, &b), ps(&[[0.0, -0.5, 0.3]]));
    }

    #[test]
    fn crop_unbounded_and_empty() {
        let c = ps(&[[1e9, -3.0, 0.3], [0.2, -0.5, 7.0]]);
        assert_eq!(crop_aabb(&c, &Aabb::unbounded()), c);
        assert!(crop_aabb(&PointSet::default(), &Aabb::unbounded()).is_empty());
        assert!(Aabb::new([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn fps_examples() {
        let c = ps(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.4, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 1]);
        assert_eq!(farthest_point_sample(&c, 3, 0).unwrap(), vec![0, 1, 2]);
        let same = ps(&[[0.5; 3]; 4]);
        assert_eq!(farthest_point_sample(&same, 2, 0).unwrap(), vec![0, 1]);
        assert!(farthest_point_sample(&c, 4, 0).is_err());
    }

    #[test]
    fn from_flat_round_trip() {
        let c = PointSet::from_flat(&[1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(c.to_flat_f32(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(PointSet::from_flat(&[1.0f64, 2.0]).is_err());
    }
}
