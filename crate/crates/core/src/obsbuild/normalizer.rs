use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::episode::EpisodePack;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    ObjPc,
    HandPc,
    ArmState,
    HandState,
    ArmAction,
    HandAction,
}

impl Stream {
    pub const ALL: [Stream; 6] = [
        Stream::ObjPc,
        Stream::HandPc,
        Stream::ArmState,
        Stream::HandState,
        Stream::ArmAction,
        Stream::HandAction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::ObjPc => "obj_pc",
            Stream::HandPc => "hand_pc",
            Stream::ArmState => "arm_state",
            Stream::HandState => "hand_state",
            Stream::ArmAction => "arm_action",
            Stream::HandAction => "hand_action",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStream(s.to_string()))
    }
}

/// Per-dimension extrema of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Range {
    fn empty(dims: usize) -> Range {
        Range {
            min: vec![f64::INFINITY; dims],
            max: vec![f64::NEG_INFINITY; dims],
        }
    }

    fn update(&mut self, rows: &[f32]) {
        let d = self.min.len();
        for row in rows.chunks_exact(d) {
            for (k, &v) in row.iter().enumerate() {
                let v = v as f64;
                self.min[k] = self.min[k].min(v);
                self.max[k] = self.max[k].max(v);
            }
        }
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Dimensions with `min == max`; they normalize to 0.
    pub fn degenerate(&self) -> Vec<bool> {
        self.min.iter().zip(&self.max).map(|(a, b)| a == b).collect()
    }
}

/// Maps every stream dimension linearly from `[min, max]` onto `[-1, 1]`.
/// Both point-cloud streams share one per-axis range fitted over object and
/// hand points together, so the two clouds stay in a common frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub ranges: BTreeMap<Stream, Range>,
}

/// Extrema over every step of `episodes`.
pub fn fit_normalizer(episodes: &[EpisodePack]) -> Result<Normalizer> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot fit a normalizer on zero episodes".into()))?;
    let (da, dh) = (first.header.da, first.header.dh);
    let mut pc = Range::empty(3);
    let mut ranges: BTreeMap<Stream, Range> = [
        (Stream::ArmState, Range::empty(da)),
        (Stream::HandState, Range::empty(dh)),
        (Stream::ArmAction, Range::empty(da)),
        (Stream::HandAction, Range::empty(dh)),
    ]
    .into_iter()
    .collect();
    for ep in episodes {
        if ep.header.da != da || ep.header.dh != dh {
            return Err(Error::ShapeMismatch(format!(
                "episode dims ({}, {}) differ from ({da}, {dh})",
                ep.header.da, ep.header.dh
            )));
        }
        pc.update(&ep.object_pc);
        pc.update(&ep.hand_pc);
        for (stream, data) in [
            (Stream::ArmState, &ep.arm_state),
            (Stream::HandState, &ep.hand_state),
            (Stream::ArmAction, &ep.arm_action),
            (Stream::HandAction, &ep.hand_action),
        ] {
            ranges.get_mut(&stream).expect("inserted above").update(data);
        }
    }
    if episodes.iter().all(|e| e.header.steps == 0) {
        return Err(Error::InvalidArgument("episodes contain no steps".into()));
    }
    ranges.insert(Stream::ObjPc, pc.clone());
    ranges.insert(Stream::HandPc, pc);
    Ok(Normalizer { ranges })
}

impl Normalizer {
    pub fn range(&self, stream: Stream) -> Result<&Range> {
        self.ranges
            .get(&stream)
            .ok_or_else(|| Error::UnknownStream(stream.name().to_string()))
    }

    fn check(&self, x: &[f64], stream: Stream) -> Result<&Range> {
        let r = self.range(stream)?;
        let d = r.dims();
        if d == 0 || x.len() % d != 0 {
            return Err(Error::LengthMismatch {
                context: format!("{stream} rows"),
                expected: d,
                actual: x.len(),
            });
        }
        Ok(r)
    }

    /// `x` holds whole rows of the stream's dimension, row-major.
    pub fn normalize(&self, x: &[f64], stream: Stream) -> Result<Vec<f64>> {
        let r = self.check(x, stream)?;
        let d = r.dims();
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (r.min[i % d], r.max[i % d]);
                if hi > lo {
                    2.0 * (v - lo) / (hi - lo) - 1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Inverse of [`Normalizer::normalize`]; degenerate dims return their
    /// constant value.
    pub fn denormalize(&self, x: &[f64], stream: Stream) -> Result<Vec<f64>> {
        let r = self.check(x, stream)?;
        let d = r.dims();
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (r.min[i % d], r.max[i % d]);
                if hi > lo {
                    (v + 1.0) * 0.5 * (hi - lo) + lo
                } else {
                    lo
                }
            })
            .collect())
    }

    pub fn normalize_by_name(&self, x: &[f64], stream: &str) -> Result<Vec<f64>> {
        self.normalize(x, stream.parse()?)
    }

    pub fn denormalize_by_name(&self, x: &[f64], stream: &str) -> Result<Vec<f64>> {
        self.denormalize(x, stream.parse()?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("normalizer serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Normalizer> {
        let n: Normalizer = serde_json::from_value(v.clone())?;
        for (s, r) in &n.ranges {
            if r.min.len() != r.max.len() || r.min.iter().zip(&r.max).any(|(a, b)| !(a <= b)) {
                return Err(Error::Format(format!("invalid range for stream {s}")));
            }
        }
        Ok(n)
    }
}
