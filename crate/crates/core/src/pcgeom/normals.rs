use nalgebra::{Matrix3, SymmetricEigen};

use super::{KdTree, PointSet};
use crate::error::{Error, Result};
use crate::se3kin::Vec3;

/// Unit normals paired with a point set. Points whose neighborhood covariance
/// has rank < 2 get `(0, 0, 1)` and a raised `degenerate` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSet {
    normals: Vec<Vec3>,
    degenerate: Vec<bool>,
}

impl NormalSet {
    pub fn new(normals: Vec<Vec3>) -> Result<Self> {
        for n in &normals {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if !len.is_finite() || (len - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("normal {n:?} is not unit length")));
            }
        }
        let degenerate = vec![false; normals.len()];
        Ok(NormalSet {
            normals,
            degenerate,
        })
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    /// Rotates every normal by `pose`'s rotation.
    pub fn rotated(&self, pose: &crate::se3kin::Pose) -> NormalSet {
        NormalSet {
            normals: self.normals.iter().map(|n| pose.rotate(n)).collect(),
            degenerate: self.degenerate.clone(),
        }
    }
}

/// PCA normals from the `k` nearest neighbors of each point (the point itself
/// included). The smallest-eigenvalue eigenvector is taken and its sign fixed so
/// the component of largest magnitude is positive.
pub fn estimate_normals(cloud: &PointSet, k: usize) -> Result<NormalSet> {
    if k < 3 || cloud.len() < k {
        return Err(Error::InvalidArgument(format!(
            "normal estimation needs 3 <= k <= {} (got k = {k})",
            cloud.len()
        )));
    }
    let tree = KdTree::build(cloud);
    let pts = cloud.points();
    let mut normals = Vec::with_capacity(pts.len());
    let mut degenerate = Vec::with_capacity(pts.len());
    for p in pts {
        let nb = tree.nearest(p, k);
        let mut mean = [0.0; 3];
        for &(i, _) in &nb {
            for a in 0..3 {
                mean[a] += pts[i][a];
            }
        }
        let kf = nb.len() as f64;
        mean = mean.map(|m| m / kf);
        let mut cov = Matrix3::<f64>::zeros();
        for &(i, _) in &nb {
            let d = [pts[i][0] - mean[0], pts[i][1] - mean[1], pts[i][2] - mean[2]];
            for r in 0..3 {
                for c in 0..3 {
                    cov[(r, c)] += d[r] * d[c];
                }
            }
        }
        cov /= kf;
        let (n, degen) = smallest_eigvec(cov);
        normals.push(n);
        degenerate.push(degen);
    }
    Ok(NormalSet {
        normals,
        degenerate,
    })
}

fn smallest_eigvec(cov: Matrix3<f64>) -> (Vec3, bool) {
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mid = eig.eigenvalues[order[1]];
    let max = eig.eigenvalues[order[2]];
    if !(max > 1e-300) || mid <= 1e-10 * max {
        return ([0.0, 0.0, 1.0], true);
    }
    let v = eig.eigenvectors.column(order[0]);
    let len = v.norm();
    let mut n = [v[0] / len, v[1] / len, v[2] / len];
    let lead = (0..3)
        .max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0);
    if n[lead] < 0.0 {
        n = n.map(|c| -c);
    }
    (n, false)
}
