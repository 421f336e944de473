use super::{dist2, estimate_normals, KdTree, NormalSet, PointSet};
use crate::error::{Error, Result};
use crate::se3kin::Vec3;

/// Per-object-point aligned distance to the hand, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDistances(Vec<f64>);

impl AlignedDistances {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("aligned distances".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("aligned distances must be >= 0".into()));
        }
        Ok(AlignedDistances(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-object-point contact value in `[0, 1]`; 1 means touching.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMap(Vec<f64>);

impl ContactMap {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// Distance from `v_o` to `v_h` scaled by `exp(γ(1 − |cos|))`, where `cos` is
/// between the approach direction and the object normal. Coincident points give 0.
#[inline]
fn weighted_distance(vo: &Vec3, n: &Vec3, vh: &Vec3, d: f64, gamma: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    let dot = (vh[0] - vo[0]) * n[0] + (vh[1] - vo[1]) * n[1] + (vh[2] - vo[2]) * n[2];
    let cos = (dot / d).abs().min(1.0);
    (gamma * (1.0 - cos)).exp() * d
}

/// For each object point, the minimum over hand points of the normal-aligned
/// distance. Requires `gamma >= 0`, which makes the weight at least 1, so the
/// plain Euclidean distance is a lower bound used to skip candidates.
pub fn aligned_distance(
    obj: &PointSet,
    normals: &NormalSet,
    hand: &PointSet,
    gamma: f64,
) -> Result<AlignedDistances> {
    if hand.is_empty() {
        return Err(Error::InvalidArgument("hand point set is empty".into()));
    }
    if normals.len() != obj.len() {
        return Err(Error::LengthMismatch {
            context: "object normals".into(),
            expected: obj.len(),
            actual: normals.len(),
        });
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let tree = KdTree::build(hand);
    let hp = hand.points();
    let out = obj
        .points()
        .iter()
        .zip(normals.normals())
        .map(|(vo, n)| {
            // Seed with the Euclidean nearest neighbor for a tight initial bound.
            let (i0, d0) = tree.nearest(vo, 1)[0];
            let mut best = weighted_distance(vo, n, &hp[i0], d0.sqrt(), gamma);
            for vh in hp {
                let d = dist2(vo, vh).sqrt();
                if d >= best {
                    continue;
                }
                let w = weighted_distance(vo, n, vh, d, gamma);
                if w < best {
                    best = w;
                }
            }
            best
        })
        .collect();
    Ok(AlignedDistances(out))
}

/// `c = 1 − 2(σ(θ·d) − 0.5)`, evaluated as `2 / (1 + e^{θd})`.
pub fn contact_map(d: &AlignedDistances, theta: f64) -> Result<ContactMap> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("theta must be > 0, got {theta}")));
    }
    if let Some(v) = d.values().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative distance {v}")));
    }
    Ok(ContactMap(
        d.values()
            .iter()
            .map(|&v| 2.0 / (1.0 + (theta * v).exp()))
            .collect(),
    ))
}

/// Normals from `normal_k` neighbors, then aligned distance and contact map.
pub fn ground_truth_contact(
    obj: &PointSet,
    hand: &PointSet,
    normal_k: usize,
    gamma: f64,
    theta: f64,
) -> Result<ContactMap> {
    let normals = estimate_normals(obj, normal_k)?;
    let d = aligned_distance(obj, &normals, hand, gamma)?;
    contact_map(&d, theta)
}
