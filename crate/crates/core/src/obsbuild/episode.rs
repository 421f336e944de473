//! Episode pack layout (little endian):
//!
//! ```text
//! "CVIP" | u16 version | u32 len | header JSON
//! 7 × { f32 payload (row-major) | u32 crc32 of the payload }
//! ```
//!
//! Streams follow [`STREAM_ORDER`]; their sizes are implied by the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Observation;
use crate::error::{Error, Result};
use crate::pcgeom::PointSet;
use crate::se3kin::Pose;

pub const EPISODE_MAGIC: &[u8; 4] = b"CVIP";
pub const EPISODE_VERSION: u16 = 1;
pub const STREAM_ORDER: [&str; 7] = [
    "object_pc",
    "hand_pc",
    "arm_state",
    "hand_state",
    "arm_action",
    "hand_action",
    "object_pose",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub version: u16,
    pub task: String,
    pub dt: f64,
    #[serde(rename = "N_P")]
    pub n_points: usize,
    #[serde(rename = "Da")]
    pub da: usize,
    #[serde(rename = "Dh")]
    pub dh: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub streams: Vec<String>,
}

impl EpisodeHeader {
    pub fn new(task: &str, dt: f64, n_points: usize, da: usize, dh: usize, steps: usize) -> Self {
        EpisodeHeader {
            version: EPISODE_VERSION,
            task: task.to_string(),
            dt,
            n_points,
            da,
            dh,
            steps,
            streams: STREAM_ORDER.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Values per time step of each stream, in file order.
    fn row_sizes(&self) -> [usize; 7] {
        let pc = self.n_points * 3;
        [pc, pc, self.da, self.dh, self.da, self.dh, 7]
    }
}

/// A recorded demonstration; every stream is `[T, ...]` row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePack {
    pub header: EpisodeHeader,
    pub object_pc: Vec<f32>,
    pub hand_pc: Vec<f32>,
    pub arm_state: Vec<f32>,
    pub hand_state: Vec<f32>,
    pub arm_action: Vec<f32>,
    pub hand_action: Vec<f32>,
    /// Quaternion `(w, x, y, z)` then translation.
    pub object_pose: Vec<f32>,
}

impl EpisodePack {
    pub fn empty(header: EpisodeHeader) -> Self {
        let mut h = header;
        h.steps = 0;
        EpisodePack {
            header: h,
            object_pc: Vec::new(),
            hand_pc: Vec::new(),
            arm_state: Vec::new(),
            hand_state: Vec::new(),
            arm_action: Vec::new(),
            hand_action: Vec::new(),
            object_pose: Vec::new(),
        }
    }

    fn streams(&self) -> [&Vec<f32>; 7] {
        [
            &self.object_pc,
            &self.hand_pc,
            &self.arm_state,
            &self.hand_state,
            &self.arm_action,
            &self.hand_action,
            &self.object_pose,
        ]
    }

    pub fn steps(&self) -> usize {
        self.header.steps
    }

    /// Appends one step.
    pub fn push(
        &mut self,
        obs: &Observation,
        arm_action: &[f64],
        hand_action: &[f64],
        object_pose: &Pose,
    ) -> Result<()> {
        let h = &self.header;
        let checks = [
            ("object cloud", obs.obj_pc.len(), h.n_points),
            ("hand cloud", obs.hand_pc.len(), h.n_points),
            ("arm state", obs.arm_state.len(), h.da),
            ("hand state", obs.hand_state.len(), h.dh),
            ("arm action", arm_action.len(), h.da),
            ("hand action", hand_action.len(), h.dh),
        ];
        for (ctx, actual, expected) in checks {
            if actual != expected {
                return Err(Error::LengthMismatch {
                    context: ctx.into(),
                    expected,
                    actual,
                });
            }
        }
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        self.object_pc.extend(obs.obj_pc.to_flat_f32());
        self.hand_pc.extend(obs.hand_pc.to_flat_f32());
        self.arm_state.extend(f(&obs.arm_state));
        self.hand_state.extend(f(&obs.hand_state));
        self.arm_action.extend(f(arm_action));
        self.hand_action.extend(f(hand_action));
        self.object_pose.extend(f(&object_pose.to_array()));
        self.header.steps += 1;
        Ok(())
    }

    /// Checks stream sizes and pose quaternions against the header.
    pub fn validate(&self) -> Result<()> {
        if self.header.streams != STREAM_ORDER {
            return Err(Error::Format(format!("unexpected stream order {:?}", self.header.streams)));
        }
        let t = self.header.steps;
        for ((name, s), row) in STREAM_ORDER.iter().zip(self.streams()).zip(self.header.row_sizes()) {
            if s.len() != t * row {
                return Err(Error::ShapeMismatch(format!(
                    "stream `{name}` has {} values, header implies {} x {row}",
                    s.len(),
                    t
                )));
            }
        }
        for (i, p) in self.object_pose.chunks_exact(7).enumerate() {
            let n = p[..4].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!("object pose {i} has quaternion norm {n}")));
            }
        }
        Ok(())
    }

    pub fn object_pc_at(&self, t: usize) -> Result<PointSet> {
        let n = self.header.n_points * 3;
        PointSet::from_flat(self.row(&self.object_pc, n, t)?)
    }

    pub fn hand_pc_at(&self, t: usize) -> Result<PointSet> {
        let n = self.header.n_points * 3;
        PointSet::from_flat(self.row(&self.hand_pc, n, t)?)
    }

    pub fn arm_state_at(&self, t: usize) -> Result<Vec<f64>> {
        Ok(widen(self.row(&self.arm_state, self.header.da, t)?))
    }

    pub fn hand_state_at(&self, t: usize) -> Result<Vec<f64>> {
        Ok(widen(self.row(&self.hand_state, self.header.dh, t)?))
    }

    pub fn arm_action_at(&self, t: usize) -> Result<Vec<f64>> {
        Ok(widen(self.row(&self.arm_action, self.header.da, t)?))
    }

    pub fn hand_action_at(&self, t: usize) -> Result<Vec<f64>> {
        Ok(widen(self.row(&self.hand_action, self.header.dh, t)?))
    }

    pub fn object_pose_at(&self, t: usize) -> Result<Pose> {
        let r = widen(self.row(&self.object_pose, 7, t)?);
        Pose::from_array(&r.try_into().expect("7 values"))
    }

    pub fn observation(&self, t: usize) -> Result<Observation> {
        Ok(Observation {
            obj_pc: self.object_pc_at(t)?,
            hand_pc: self.hand_pc_at(t)?,
            arm_state: self.arm_state_at(t)?,
            hand_state: self.hand_state_at(t)?,
        })
    }

    fn row<'a>(&self, s: &'a [f32], width: usize, t: usize) -> Result<&'a [f32]> {
        if t >= self.header.steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} out of range for an episode of {} steps",
                self.header.steps
            )));
        }
        Ok(&s[t * width..(t + 1) * width])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.streams().iter().map(|s| s.len() * 4 + 4).sum();
        let mut out = Vec::with_capacity(10 + header.len() + payload);
        out.extend_from_slice(EPISODE_MAGIC);
        out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
        let hlen = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
        out.extend_from_slice(&hlen.to_le_bytes());
        out.extend_from_slice(&header);
        for s in self.streams() {
            let start = out.len();
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != EPISODE_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let need = |n: usize, what: &str| -> Result<()> {
            if bytes.len() < n {
                Err(Error::Truncated(what.to_string()))
            } else {
                Ok(())
            }
        };
        need(10, "preamble")?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EPISODE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: EPISODE_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        need(10 + hlen, "header")?;
        let header: EpisodeHeader = serde_json::from_slice(&bytes[10..10 + hlen])?;
        if header.version != EPISODE_VERSION {
            return Err(Error::VersionMismatch {
                found: header.version,
                expected: EPISODE_VERSION,
            });
        }
        if header.streams != STREAM_ORDER {
            return Err(Error::Format(format!("unexpected stream order {:?}", header.streams)));
        }
        let rows = header.row_sizes();
        let per_step: usize = rows.iter().sum::<usize>() * 4;
        let fixed = 7 * 4;
        let body = bytes.len() - 10 - hlen;
        let expected = header
            .steps
            .checked_mul(per_step)
            .and_then(|v| v.checked_add(fixed))
            .ok_or_else(|| Error::Format("declared episode size overflows".into()))?;
        if body != expected {
            // A body that is a whole number of steps for some other T is a
            // header/stream disagreement rather than a cut-off file.
            let consistent = body >= fixed && per_step > 0 && (body - fixed) % per_step == 0;
            if consistent || body > expected {
                return Err(Error::ShapeMismatch(format!(
                    "header declares T = {} but the streams hold {} bytes ({} expected)",
                    header.steps, body, expected
                )));
            }
        }
        let mut pos = 10 + hlen;
        let mut streams: Vec<Vec<f32>> = Vec::with_capacity(7);
        for (name, row) in STREAM_ORDER.iter().zip(rows) {
            let n = header.steps * row * 4;
            if pos + n + 4 > bytes.len() {
                return Err(Error::Truncated(format!("stream `{name}`")));
            }
            let payload = &bytes[pos..pos + n];
            let crc = u32::from_le_bytes(bytes[pos + n..pos + n + 4].try_into().expect("4 bytes"));
            if crc != crc32fast::hash(payload) {
                return Err(Error::Checksum(name.to_string()));
            }
            streams.push(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            pos += n + 4;
        }
        let mut it = streams.into_iter();
        let mut next = || it.next().expect("seven streams");
        let pack = EpisodePack {
            header,
            object_pc: next(),
            hand_pc: next(),
            arm_state: next(),
            hand_state: next(),
            arm_action: next(),
            hand_action: next(),
            object_pose: next(),
        };
        pack.validate()?;
        Ok(pack)
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn write_episode(pack: &EpisodePack, path: &Path) -> Result<()> {
    let bytes = pack.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_episode(path: &Path) -> Result<EpisodePack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EpisodePack::from_bytes(&bytes, path)
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn random_pack(t: usize, n: usize, da: usize, dh: usize, seed: u64) -> EpisodePack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let object_pc = v(t * n * 3);
        let hand_pc = v(t * n * 3);
        let arm_state = v(t * da);
        let hand_state = v(t * dh);
        let arm_action = v(t * da);
        let hand_action = v(t * dh);
        let object_pose = (0..t)
            .flat_map(|i| {
                Pose::planar(0.01 * i as f64, -0.02, 0.3 * i as f64, 0.0)
                    .to_array()
                    .map(|x| x as f32)
            })
            .collect();
        EpisodePack {
            header: EpisodeHeader::new("planar-push", 0.2, n, da, dh, t),
            object_pc,
            hand_pc,
            arm_state,
            hand_state,
            arm_action,
            hand_action,
            object_pose,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = random_pack(10, 32, 3, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cvip");
        write_episode(&p, &path).unwrap();
        let q = read_episode(&path).unwrap();
        assert_eq!(p, q);
        let a = std::fs::read(&path).unwrap();
        write_episode(&q, &path).unwrap();
        assert_eq!(a, std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncation_checksum_and_shape_errors() {
        let p = random_pack(5, 8, 3, 2, 2);
        let b = p.to_bytes().unwrap();
        let path = Path::new("x.cvip");
        let cut = &b[..b.len() - 100];
        assert!(matches!(EpisodePack::from_bytes(cut, path), Err(Error::Truncated(_))));
        assert!(matches!(EpisodePack::from_bytes(&b[..8], path), Err(Error::Truncated(_))));
        let mut bad = b.clone();
        let k = b.len() - 20;
        bad[k] ^= 1;
        assert!(matches!(EpisodePack::from_bytes(&bad, path), Err(Error::Checksum(_))));
        let mut bad = b.clone();
        bad[0] = b'Z';
        assert!(matches!(EpisodePack::from_bytes(&bad, path), Err(Error::BadMagic(_))));
        let mut bad = b.clone();
        bad[4] = 7;
        assert!(matches!(EpisodePack::from_bytes(&bad, path), Err(Error::VersionMismatch { .. })));

        // Header says T=5, streams are sized for T=4.
        let four = random_pack(4, 8, 3, 2, 3);
        let mut lying = four.clone();
        lying.header.steps = 5;
        let body = four.to_bytes().unwrap();
        let header = serde_json::to_vec(&lying.header).unwrap();
        let old_hlen = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let mut forged = Vec::new();
        forged.extend_from_slice(&body[..6]);
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(&header);
        forged.extend_from_slice(&body[10 + old_hlen..]);
        assert!(matches!(EpisodePack::from_bytes(&forged, path), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn push_and_accessors() {
        let mut p = EpisodePack::empty(EpisodeHeader::new("t", 0.2, 2, 1, 1, 0));
        let obs = Observation {
            obj_pc: PointSet::new(vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]).unwrap(),
            hand_pc: PointSet::new(vec![[1.0; 3], [2.0; 3]]).unwrap(),
            arm_state: vec![0.5],
            hand_state: vec![-0.5],
        };
        p.push(&obs, &[0.25], &[0.125], &Pose::planar(0.1, 0.2, 0.3, 0.0)).unwrap();
        assert_eq!(p.steps(), 1);
        assert_eq!(p.observation(0).unwrap().obj_pc, obs.obj_pc);
        assert_eq!(p.arm_action_at(0).unwrap(), vec![0.25]);
        assert!(p.observation(1).is_err());
        assert!(p.push(&obs, &[0.0, 1.0], &[0.0], &Pose::identity()).is_err());
        p.validate().unwrap();
    }
}
