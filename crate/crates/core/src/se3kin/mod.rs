//! Rigid transforms, kinematic chains and the point-cloud forward-kinematics
//! model that turns a joint configuration into a posed robot surface cloud.

mod chain;
mod pose;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use chain::{
    chain_fk, serial_test_chain, Geometry, Joint, JointType, JointVector, KinematicChain, Link,
    Shape,
};
pub use pose::{pose_apply, Pose, Vec3};

use crate::error::{Error, Result};
use crate::pcgeom::{farthest_point_sample, PointSet};

/// Default number of points in a downsampled robot or object cloud.
pub const DEFAULT_NUM_POINTS: usize = 1024;

/// Samples `n` points uniformly (by area) over the surface of `link`'s
/// primitive, expressed in the link frame. Deterministic in `seed`.
pub fn sample_link_surface(link: &Link, n: usize, seed: u64) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    link.geometry.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local: Vec<Vec3> = match link.geometry.shape {
        Shape::Sphere { radius } => (0..n).map(|_| sample_sphere(&mut rng, radius)).collect(),
        Shape::Box { size } => (0..n).map(|_| sample_box(&mut rng, size)).collect(),
        Shape::Cylinder { radius, height } => (0..n)
            .map(|_| sample_cylinder(&mut rng, radius, height))
            .collect(),
    };
    let origin = link.geometry.origin;
    Ok(PointSet::from_vec_unchecked(
        local.iter().map(|p| origin.transform_point(p)).collect(),
    ))
}

fn sample_sphere(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [r * v[0] / n, r * v[1] / n, r * v[2] / n];
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng, size: Vec3) -> Vec3 {
    let [sx, sy, sz] = size;
    // Face pairs normal to x, y, z.
    let areas = [sy * sz, sx * sz, sx * sy];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut u = rng.gen::<f64>() * total;
    let mut face = 5;
    for f in 0..6 {
        let a = areas[f / 2];
        if u < a {
            face = f;
            break;
        }
        u -= a;
    }
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = [
        (rng.gen::<f64>() - 0.5) * sx,
        (rng.gen::<f64>() - 0.5) * sy,
        (rng.gen::<f64>() - 0.5) * sz,
    ];
    p[axis] = sign * 0.5 * size[axis];
    p
}

fn sample_cylinder(rng: &mut ChaCha8Rng, r: f64, h: f64) -> Vec3 {
    let side = 2.0 * PI * r * h;
    let cap = PI * r * r;
    let u = rng.gen::<f64>() * (side + 2.0 * cap);
    let theta = rng.gen::<f64>() * 2.0 * PI;
    if u < side {
        let z = (rng.gen::<f64>() - 0.5) * h;
        [r * theta.cos(), r * theta.sin(), z]
    } else {
        let rho = r * rng.gen::<f64>().sqrt();
        let z = if u < side + cap { 0.5 * h } else { -0.5 * h };
        [rho * theta.cos(), rho * theta.sin(), z]
    }
}

/// Per-link surface samples for a whole chain, `n_per_link` points each; link
/// `i` is sampled with seed `seed + i`.
pub fn sample_chain_surfaces(
    chain: &KinematicChain,
    n_per_link: usize,
    seed: u64,
) -> Result<Vec<PointSet>> {
    chain
        .links()
        .iter()
        .enumerate()
        .map(|(i, l)| sample_link_surface(l, n_per_link, seed.wrapping_add(i as u64)))
        .collect()
}

/// Posed union of the selected links' samples, before downsampling.
pub fn posed_link_cloud(
    chain: &KinematicChain,
    q: &JointVector,
    link_samples: &[PointSet],
    subset: Option<&[usize]>,
) -> Result<PointSet> {
    if link_samples.len() != chain.num_links() {
        return Err(Error::LengthMismatch {
            context: "link samples".into(),
            expected: chain.num_links(),
            actual: link_samples.len(),
        });
    }
    let all: Vec<usize>;
    let selected = match subset {
        Some(s) => s,
        None => {
            all = (0..chain.num_links()).collect();
            &all
        }
    };
    if selected.is_empty() {
        return Err(Error::EmptySelection("no links selected".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= chain.num_links()) {
        return Err(Error::InvalidArgument(format!("link index {bad} out of range")));
    }
    let poses = chain_fk(chain, q)?;
    let total: usize = selected.iter().map(|&i| link_samples[i].len()).sum();
    if total == 0 {
        return Err(Error::EmptySelection("selected links have no samples".into()));
    }
    let mut out = Vec::with_capacity(total);
    for &i in selected {
        let pose = &poses[i];
        out.extend(link_samples[i].points().iter().map(|p| pose.transform_point(p)));
    }
    Ok(PointSet::from_vec_unchecked(out))
}

/// Point-cloud forward kinematics: poses each selected link's samples and
/// downsamples the union to `n_points` by farthest-point sampling (starting at
/// index 0). When the union has at most `n_points` points it is returned as is.
pub fn fk_pointcloud(
    chain: &KinematicChain,
    q: &JointVector,
    link_samples: &[PointSet],
    subset: Option<&[usize]>,
    n_points: usize,
) -> Result<PointSet> {
    let cloud = posed_link_cloud(chain, q, link_samples, subset)?;
    downsample(&cloud, n_points)
}

/// FPS down to `n_points` (from index 0), or the cloud unchanged if it is small enough.
pub fn downsample(cloud: &PointSet, n_points: usize) -> Result<PointSet> {
    if cloud.len() <= n_points {
        return Ok(cloud.clone());
    }
    let idx = farthest_point_sample(cloud, n_points, 0)?;
    Ok(cloud.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(shape: Shape) -> Link {
        Link {
            name: "l".into(),
            geometry: Geometry::new(shape),
        }
    }

    #[test]
    fn sphere_samples_lie_on_surface() {
        let pts = sample_link_surface(&link(Shape::Sphere { radius: 1.0 }), 1000, 3).unwrap();
        for p in pts.points() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_faces_are_area_weighted() {
        let pts = sample_link_surface(&link(Shape::Box { size: [2.0; 3] }), 6000, 11).unwrap();
        let mut counts = [0usize; 6];
        for p in pts.points() {
            let face = (0..3)
                .find_map(|a| {
                    if (p[a] - 1.0).abs() < 1e-12 {
                        Some(2 * a)
                    } else if (p[a] + 1.0).abs() < 1e-12 {
                        Some(2 * a + 1)
                    } else {
                        None
                    }
                })
                .expect("point on a face");
            counts[face] += 1;
        }
        for c in counts {
            assert!((c as f64 / 6000.0 - 1.0 / 6.0).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn flat_box_samples_follow_face_areas() {
        // Faces: 2 of 0.1*0.2, 2 of 1*0.2, 2 of 1*0.1 → weights 0.02 : 0.2 : 0.1.
        let pts = sample_link_surface(&link(Shape::Box { size: [1.0, 0.1, 0.2] }), 20000, 5).unwrap();
        let on_x = pts.points().iter().filter(|p| (p[0].abs() - 0.5).abs() < 1e-12).count();
        let expected = 0.02 / 0.32;
        assert!((on_x as f64 / 20000.0 - expected).abs() < 0.01);
    }

    #[test]
    fn cylinder_samples_on_surface() {
        let pts = sample_link_surface(
            &link(Shape::Cylinder { radius: 0.5, height: 2.0 }),
            2000,
            1,
        )
        .unwrap();
        for p in pts.points() {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_side = (rho - 0.5).abs() < 1e-9 && p[2].abs() <= 1.0 + 1e-12;
            let on_cap = (p[2].abs() - 1.0).abs() < 1e-12 && rho <= 0.5 + 1e-12;
            assert!(on_side || on_cap);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let l = link(Shape::Cylinder { radius: 0.2, height: 0.3 });
        assert_eq!(
            sample_link_surface(&l, 50, 9).unwrap(),
            sample_link_surface(&l, 50, 9).unwrap()
        );
        assert_ne!(
            sample_link_surface(&l, 50, 9).unwrap(),
            sample_link_surface(&l, 50, 10).unwrap()
        );
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample_link_surface(&link(Shape::Sphere { radius: 1.0 }), 0, 0).is_err());
    }

    #[test]
    fn fk_pointcloud_identity_configuration() {
        let chain = KinematicChain::new(vec![link(Shape::Sphere { radius: 0.3 })], vec![]).unwrap();
        let samples = sample_chain_surfaces(&chain, 500, 2).unwrap();
        let q = JointVector::new(&chain, &[]).unwrap();
        let cloud = fk_pointcloud(&chain, &q, &samples, None, 1024).unwrap();
        assert_eq!(cloud, samples[0]);
    }

    #[test]
    fn fk_pointcloud_downsamples_to_exact_size() {
        let chain = serial_test_chain(6);
        let samples = sample_chain_surfaces(&chain, 300, 0).unwrap();
        let q = JointVector::new(&chain, &[0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let cloud = fk_pointcloud(&chain, &q, &samples, None, 1024).unwrap();
        assert_eq!(cloud.len(), 1024);
        let sub = fk_pointcloud(&chain, &q, &samples, Some(&[4, 5]), 1024).unwrap();
        assert_eq!(sub.len(), 600);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let chain = serial_test_chain(3);
        let samples = sample_chain_surfaces(&chain, 10, 0).unwrap();
        let q = JointVector::new(&chain, &[0.0, 0.0]).unwrap();
        assert!(matches!(
            fk_pointcloud(&chain, &q, &samples, Some(&[]), 16),
            Err(Error::EmptySelection(_))
        ));
    }
}
