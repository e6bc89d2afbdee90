//! MotionPatch construction: skeleton sequences to per-part spatiotemporal
//! blocks.
//!
//! Each of the five body-part chains is resampled to `N_p` points spaced
//! uniformly in arc length, the points are z-scored with dataset
//! statistics, and `N_p` consecutive frames are stacked into an
//! `N_p × N_p` block per coordinate channel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PART_NAMES: [&str; 5] = ["torso", "left_arm", "right_arm", "left_leg", "right_leg"];
pub const NUM_PARTS: usize = 5;
pub const CHANNELS: usize = 3;
const STD_FLOOR: f64 = 1e-6;

pub type Point3 = [f64; 3];

/// Joint chains per body part, each ordered outward from the torso.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyParts {
    pub torso: Vec<usize>,
    pub left_arm: Vec<usize>,
    pub right_arm: Vec<usize>,
    pub left_leg: Vec<usize>,
    pub right_leg: Vec<usize>,
}

impl BodyParts {
    pub fn chains(&self) -> [&[usize]; NUM_PARTS] {
        [
            &self.torso,
            &self.left_arm,
            &self.right_arm,
            &self.left_leg,
            &self.right_leg,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSequence {
    pub fps: f64,
    pub joint_names: Vec<String>,
    pub parts: BodyParts,
    /// `L × J` joint positions.
    pub frames: Vec<Vec<Point3>>,
}

impl MotionSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid!("fps must be positive, got {}", self.fps));
        }
        let j = self.num_joints();
        if j < 2 {
            return Err(invalid!("skeleton needs at least 2 joints, got {j}"));
        }
        if self.frames.is_empty() {
            return Err(invalid!("motion has no frames"));
        }
        if let Some((f, _)) = self.frames.iter().enumerate().find(|(_, fr)| fr.len() != j) {
            return Err(invalid!("frame {f} does not have {j} joints"));
        }
        if self
            .frames
            .iter()
            .flatten()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("motion frames".into()));
        }
        let mut owner = vec![None; j];
        for (p, chain) in self.parts.chains().iter().enumerate() {
            if chain.len() < 2 {
                return Err(invalid!("part {} needs at least 2 joints", PART_NAMES[p]));
            }
            for &idx in *chain {
                let slot = owner
                    .get_mut(idx)
                    .ok_or_else(|| invalid!("joint index {idx} out of {j}"))?;
                if slot.replace(p).is_some() {
                    return Err(invalid!("joint {idx} appears in more than one part"));
                }
            }
        }
        if let Some(idx) = owner.iter().position(Option::is_none) {
            return Err(invalid!("joint {idx} belongs to no part"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MotionSequence = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Chain sample points for one frame: `NUM_PARTS × n_p` points.
    fn sample_frame(&self, frame: usize, n_p: usize) -> Result<Vec<Vec<Point3>>> {
        self.parts
            .chains()
            .iter()
            .map(|chain| {
                let pos: Vec<Point3> = chain.iter().map(|&j| self.frames[frame][j]).collect();
                interpolate_chain(&pos, n_p)
            })
            .collect()
    }
}

fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Resamples a chain to `n_p` points uniformly spaced in cumulative arc
/// length. The first and last joints are reproduced exactly.
pub fn interpolate_chain(chain: &[Point3], n_p: usize) -> Result<Vec<Point3>> {
    if chain.len() < 2 {
        return Err(invalid!(
            "chain needs at least 2 joints, got {}",
            chain.len()
        ));
    }
    if n_p < 2 {
        return Err(invalid!("need at least 2 sample points, got {n_p}"));
    }
    let mut cum = Vec::with_capacity(chain.len());
    cum.push(0.0);
    for w in chain.windows(2) {
        cum.push(cum.last().copied().unwrap_or(0.0) + dist(&w[0], &w[1]));
    }
    let total = *cum.last().expect("non-empty");
    let last = chain.len() - 1;
    let mut out = Vec::with_capacity(n_p);
    let mut seg = 0;
    for s in 0..n_p {
        if s == 0 {
            out.push(chain[0]);
            continue;
        }
        if s == n_p - 1 || total == 0.0 {
            out.push(if total == 0.0 { chain[0] } else { chain[last] });
            continue;
        }
        let target = total * s as f64 / (n_p - 1) as f64;
        while seg + 1 < last && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 {
            (target - cum[seg]) / len
        } else {
            0.0
        };
        let (a, b) = (chain[seg], chain[seg + 1]);
        out.push([
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]);
    }
    Ok(out)
}

/// Per-coordinate z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Coordinates with (near) zero spread are only centred; dividing by a
    /// tiny floor would blow rounding noise up into signal.
    pub fn apply(&self, p: &Point3) -> Point3 {
        std::array::from_fn(|c| {
            let s = if self.std[c] < STD_FLOOR {
                1.0
            } else {
                self.std[c]
            };
            (p[c] - self.mean[c]) / s
        })
    }
}

/// Mean and population standard deviation of every interpolated sample
/// point over the dataset.
pub fn fit_zscore(dataset: &[MotionSequence], n_p: usize) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(invalid!("cannot fit normalisation on an empty dataset"));
    }
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    let mut samples = Vec::new();
    for m in dataset {
        for f in 0..m.num_frames() {
            for part in m.sample_frame(f, n_p)? {
                for p in part {
                    (0..3).for_each(|c| sum[c] += p[c]);
                    count += 1;
                    samples.push(p);
                }
            }
        }
    }
    let mean: [f64; 3] = std::array::from_fn(|c| sum[c] / count as f64);
    let mut var = [0.0; 3];
    for p in &samples {
        (0..3).for_each(|c| var[c] += (p[c] - mean[c]).powi(2));
    }
    Ok(NormStats {
        mean,
        std: std::array::from_fn(|c| (var[c] / count as f64).sqrt()),
    })
}

pub fn apply_zscore(points: &[Point3], stats: &NormStats) -> Vec<Point3> {
    points.iter().map(|p| stats.apply(p)).collect()
}

/// Patches laid out as `P × 5 × 3 × N_p × N_p`: window, body part,
/// coordinate channel, frame within window, chain sample point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_windows: usize,
    pub n_p: usize,
    pub patches: Vec<f64>,
    pub window_starts: Vec<usize>,
    pub norm_stats: NormStats,
}

impl PatchGrid {
    pub fn patch_len(&self) -> usize {
        CHANNELS * self.n_p * self.n_p
    }

    /// Flattened `3 × N_p × N_p` block for one window and part.
    pub fn patch(&self, window: usize, part: usize) -> &[f64] {
        let len = self.patch_len();
        let off = (window * NUM_PARTS + part) * len;
        &self.patches[off..off + len]
    }

    pub fn value(&self, window: usize, part: usize, channel: usize, row: usize, col: usize) -> f64 {
        self.patch(window, part)[(channel * self.n_p + row) * self.n_p + col]
    }
}

pub fn window_count(frames: usize, n_p: usize, stride: usize) -> Option<usize> {
    (frames >= n_p && stride > 0).then(|| (frames - n_p) / stride + 1)
}

pub fn build_patches(
    m: &MotionSequence,
    n_p: usize,
    stride: usize,
    stats: &NormStats,
) -> Result<PatchGrid> {
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    let l = m.num_frames();
    let p = window_count(l, n_p, stride)
        .ok_or_else(|| invalid!("sequence too short: {l} frames for windows of {n_p}"))?;
    let frames: Vec<Vec<Vec<Point3>>> = (0..l)
        .map(|f| {
            m.sample_frame(f, n_p)
                .map(|parts| parts.iter().map(|pts| apply_zscore(pts, stats)).collect())
        })
        .collect::<Result<_>>()?;
    let len = CHANNELS * n_p * n_p;
    let mut patches = vec![0.0; p * NUM_PARTS * len];
    let window_starts: Vec<usize> = (0..p).map(|w| w * stride).collect();
    for (w, &start) in window_starts.iter().enumerate() {
        for part in 0..NUM_PARTS {
            let block = &mut patches[(w * NUM_PARTS + part) * len..][..len];
            for row in 0..n_p {
                for (col, pt) in frames[start + row][part].iter().enumerate() {
                    for c in 0..CHANNELS {
                        block[(c * n_p + row) * n_p + col] = pt[c];
                    }
                }
            }
        }
    }
    if patches.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("motion patches".into()));
    }
    Ok(PatchGrid {
        n_windows: p,
        n_p,
        patches,
        window_starts,
        norm_stats: *stats,
    })
}
