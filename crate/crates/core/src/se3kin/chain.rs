use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pose::{norm3, Pose, Vec3};
use crate::error::{Error, Result};

/// Primitive link geometry, dimensions in meters. Boxes are given by their full
/// extents; cylinders run along their local z axis. All shapes are centered on
/// the geometry frame, which sits at `origin` relative to the link frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box { size: Vec3 },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub shape: Shape,
    pub origin: Pose,
}

impl Geometry {
    pub fn new(shape: Shape) -> Self {
        Geometry {
            shape,
            origin: Pose::identity(),
        }
    }

    pub fn with_origin(mut self, origin: Pose) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims: Vec<f64> = match &self.shape {
            Shape::Box { size } => size.to_vec(),
            Shape::Cylinder { radius, height } => vec![*radius, *height],
            Shape::Sphere { radius } => vec![*radius],
        };
        if dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(Error::UnsupportedGeometry(format!(
                "dimensions must be finite and strictly positive, got {dims:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

/// Joint `i` connects link `parent` to link `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub kind: JointType,
    pub axis: Vec3,
    pub parent: usize,
    pub origin: Pose,
    pub limits: [f64; 2],
}

impl Joint {
    /// Motion of the child frame relative to the joint origin at position `q`.
    pub fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointType::Revolute => Pose::from_axis_angle(self.axis, q),
            JointType::Prismatic => Pose::from_translation([
                self.axis[0] * q,
                self.axis[1] * q,
                self.axis[2] * q,
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    links: Vec<Link>,
    joints: Vec<Joint>,
}

impl KinematicChain {
    pub fn new(links: Vec<Link>, joints: Vec<Joint>) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidChain("chain has no links".into()));
        }
        if joints.len() + 1 != links.len() {
            return Err(Error::InvalidChain(format!(
                "{} links need {} joints, got {}",
                links.len(),
                links.len() - 1,
                joints.len()
            )));
        }
        for link in &links {
            link.geometry
                .validate()
                .map_err(|e| Error::InvalidChain(format!("link `{}`: {e}", link.name)))?;
        }
        for (i, j) in joints.iter().enumerate() {
            // Parents must precede children, which makes the joint list a
            // topological order of a tree rooted at link 0.
            if j.parent > i {
                return Err(Error::InvalidChain(format!(
                    "joint {i}: parent {} must be a link index <= {i}",
                    j.parent
                )));
            }
            if ((norm3(&j.axis)) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidChain(format!("joint {i}: axis is not unit length")));
            }
            if !(j.limits[0] <= j.limits[1]) {
                return Err(Error::InvalidChain(format!("joint {i}: limits out of order")));
            }
            if !j.origin.is_finite() {
                return Err(Error::InvalidChain(format!("joint {i}: non-finite origin")));
            }
        }
        Ok(KinematicChain { links, joints })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ChainDoc = serde_json::from_str(s)?;
        doc.into_chain()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ChainDoc::from_chain(self)).expect("chain serializes")
    }
}

/// Joint positions, clamped into the chain's limits on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVector {
    values: Vec<f64>,
    clamped: Vec<bool>,
}

impl JointVector {
    pub fn new(chain: &KinematicChain, values: &[f64]) -> Result<Self> {
        if values.len() != chain.num_joints() {
            return Err(Error::LengthMismatch {
                context: "joint vector".into(),
                expected: chain.num_joints(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint vector".into()));
        }
        let mut clamped = vec![false; values.len()];
        let values = values
            .iter()
            .zip(chain.joints())
            .zip(clamped.iter_mut())
            .map(|((&v, j), flag)| {
                let c = v.clamp(j.limits[0], j.limits[1]);
                *flag = c != v;
                c
            })
            .collect();
        Ok(JointVector { values, clamped })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-joint flags recording which inputs were clamped.
    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn was_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

/// Pose of every link in the base frame; link 0 is the identity.
pub fn chain_fk(chain: &KinematicChain, q: &JointVector) -> Result<Vec<Pose>> {
    if q.values.len() != chain.num_joints() {
        return Err(Error::LengthMismatch {
            context: "chain_fk".into(),
            expected: chain.num_joints(),
            actual: q.values.len(),
        });
    }
    let mut poses = Vec::with_capacity(chain.num_links());
    poses.push(Pose::identity());
    for (joint, &qi) in chain.joints.iter().zip(&q.values) {
        let parent = poses[joint.parent];
        let pose = parent.compose(&joint.origin).compose(&joint.motion(qi));
        poses.push(pose);
    }
    Ok(poses)
}

// On-disk chain description.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainDoc {
    links: Vec<LinkDoc>,
    joints: Vec<JointDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    name: String,
    geometry: GeometryDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryDoc {
    kind: String,
    dims: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<OriginDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OriginDoc {
    quat_wxyz: [f64; 4],
    xyz: Vec3,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    #[serde(rename = "type")]
    kind: JointType,
    axis: Vec3,
    parent: usize,
    origin: OriginDoc,
    limits: [f64; 2],
}

impl OriginDoc {
    fn to_pose(&self) -> Result<Pose> {
        Pose::new(self.quat_wxyz, self.xyz)
    }

    fn from_pose(p: &Pose) -> Self {
        OriginDoc {
            quat_wxyz: p.rotation,
            xyz: p.translation,
        }
    }
}

impl GeometryDoc {
    fn to_geometry(&self) -> Result<Geometry> {
        let shape = match (self.kind.as_str(), self.dims.as_slice()) {
            ("box", &[x, y, z]) => Shape::Box { size: [x, y, z] },
            ("cylinder", &[radius, height]) => Shape::Cylinder { radius, height },
            ("sphere", &[radius]) => Shape::Sphere { radius },
            (kind, dims) => {
                return Err(Error::UnsupportedGeometry(format!(
                    "kind `{kind}` with {} dims",
                    dims.len()
                )))
            }
        };
        let origin = match &self.origin {
            Some(o) => o.to_pose()?,
            None => Pose::identity(),
        };
        Ok(Geometry { shape, origin })
    }

    fn from_geometry(g: &Geometry) -> Self {
        let (kind, dims) = match &g.shape {
            Shape::Box { size } => ("box", size.to_vec()),
            Shape::Cylinder { radius, height } => ("cylinder", vec![*radius, *height]),
            Shape::Sphere { radius } => ("sphere", vec![*radius]),
        };
        GeometryDoc {
            kind: kind.into(),
            dims,
            origin: (g.origin != Pose::identity()).then(|| OriginDoc::from_pose(&g.origin)),
        }
    }
}

impl ChainDoc {
    fn into_chain(self) -> Result<KinematicChain> {
        let links = self
            .links
            .into_iter()
            .map(|l| {
                Ok(Link {
                    geometry: l.geometry.to_geometry()?,
                    name: l.name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let joints = self
            .joints
            .into_iter()
            .map(|j| {
                let n = norm3(&j.axis);
                if !(n > 0.0) {
                    return Err(Error::InvalidChain("zero joint axis".into()));
                }
                Ok(Joint {
                    kind: j.kind,
                    axis: j.axis.map(|c| c / n),
                    parent: j.parent,
                    origin: j.origin.to_pose()?,
                    limits: j.limits,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        KinematicChain::new(links, joints)
    }

    fn from_chain(c: &KinematicChain) -> Self {
        ChainDoc {
            links: c
                .links
                .iter()
                .map(|l| LinkDoc {
                    name: l.name.clone(),
                    geometry: GeometryDoc::from_geometry(&l.geometry),
                })
                .collect(),
            joints: c
                .joints
                .iter()
                .map(|j| JointDoc {
                    kind: j.kind,
                    axis: j.axis,
                    parent: j.parent,
                    origin: OriginDoc::from_pose(&j.origin),
                    limits: j.limits,
                })
                .collect(),
        }
    }
}

/// A serial chain of `n_links` small boxes joined by revolute joints whose axes
/// cycle through z, y, x. Used for benchmarks and tests.
pub fn serial_test_chain(n_links: usize) -> KinematicChain {
    let n_links = n_links.max(1);
    let links = (0..n_links)
        .map(|i| Link {
            name: format!("link{i}"),
            geometry: Geometry::new(Shape::Box {
                size: [0.08, 0.03, 0.03],
            })
            .with_origin(Pose::from_translation([0.04, 0.0, 0.0])),
        })
        .collect();
    let axes = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let joints = (1..n_links)
        .map(|i| Joint {
            kind: JointType::Revolute,
            axis: axes[i % 3],
            parent: i - 1,
            origin: Pose::from_translation([0.08, 0.0, 0.0]),
            limits: [-std::f64::consts::PI, std::f64::consts::PI],
        })
        .collect();
    KinematicChain::new(links, joints).expect("serial chain is valid")
}
