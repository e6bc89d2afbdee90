//! Retrieval metrics, segment alignment accuracy and heatmap export.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::STREAM_CHUNKS;
use crate::corpus::{alignment_ground_truth, CorpusSample};
use crate::error::{invalid, Result};
use crate::model::{Model, Stage};
use crate::motion_patch::PART_NAMES;
use crate::tensor::{kernels, no_grad};

pub const RECALL_RANKS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    T2m,
    M2t,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    All,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub protocol: Protocol,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@2")]
    pub r2: f64,
    #[serde(rename = "R@3")]
    pub r3: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "MedR")]
    pub medr: f64,
    /// Galleries averaged over (1 for the All protocol).
    pub galleries: usize,
}

impl RetrievalReport {
    pub fn recalls(&self) -> [f64; 5] {
        [self.r1, self.r2, self.r3, self.r5, self.r10]
    }
}

/// 1-indexed rank of the true match for every query of an `n × n` row-major
/// similarity matrix (row = text). Ties go to the lower gallery index.
pub fn ranks(sim: &[f64], n: usize, direction: Direction) -> Vec<usize> {
    let at = |q: usize, g: usize| match direction {
        Direction::T2m => sim[q * n + g],
        Direction::M2t => sim[g * n + q],
    };
    (0..n)
        .map(|q| {
            let target = at(q, q);
            1 + (0..n)
                .filter(|&g| g != q && (at(q, g) > target || (at(q, g) == target && g < q)))
                .count()
        })
        .collect()
}

/// Recall percentages at [`RECALL_RANKS`] and the median rank (mean of the
/// two middle ranks for even counts).
pub fn rank_metrics(ranks: &[usize]) -> ([f64; 5], f64) {
    let n = ranks.len() as f64;
    let recalls =
        RECALL_RANKS.map(|k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let medr = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    (recalls, medr)
}

fn report(
    direction: Direction,
    protocol: Protocol,
    recalls: [f64; 5],
    medr: f64,
    galleries: usize,
) -> RetrievalReport {
    RetrievalReport {
        direction,
        protocol,
        r1: recalls[0],
        r2: recalls[1],
        r3: recalls[2],
        r5: recalls[3],
        r10: recalls[4],
        medr,
        galleries,
    }
}

/// Small-batch protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallBatch {
    pub batch_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SmallBatch {
    fn default() -> Self {
        Self {
            batch_size: 32,
            repeats: 10,
            seed: 0,
        }
    }
}

/// Both retrieval directions from a precomputed `n × n` similarity matrix.
pub fn retrieval_from_similarity(
    sim: &[f64],
    n: usize,
    protocol: Protocol,
    small: &SmallBatch,
) -> Result<[RetrievalReport; 2]> {
    if n == 0 || sim.len() != n * n {
        return Err(invalid!("similarity matrix must be a non-empty square"));
    }
    let dirs = [Direction::T2m, Direction::M2t];
    match protocol {
        Protocol::All => Ok(dirs.map(|d| {
            let (r, m) = rank_metrics(&ranks(sim, n, d));
            report(d, protocol, r, m, 1)
        })),
        Protocol::Small => {
            let b = small.batch_size;
            if b == 0 || n < b {
                return Err(invalid!("gallery smaller than batch ({n} < {b})"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(small.seed);
            rng.set_stream(STREAM_CHUNKS);
            let mut order: Vec<usize> = (0..n).collect();
            let mut sums = [([0.0; 5], 0.0); 2];
            let mut galleries = 0;
            for _ in 0..small.repeats.max(1) {
                order.shuffle(&mut rng);
                for chunk in order.chunks_exact(b) {
                    let sub: Vec<f64> = chunk
                        .iter()
                        .flat_map(|&i| chunk.iter().map(move |&j| sim[i * n + j]))
                        .collect();
                    for (k, d) in dirs.iter().enumerate() {
                        let (r, m) = rank_metrics(&ranks(&sub, b, *d));
                        (0..5).for_each(|i| sums[k].0[i] += r[i]);
                        sums[k].1 += m;
                    }
                    galleries += 1;
                }
            }
            let g = galleries as f64;
            Ok([0, 1].map(|k| {
                report(
                    dirs[k],
                    protocol,
                    sums[k].0.map(|v| v / g),
                    sums[k].1 / g,
                    galleries,
                )
            }))
        }
    }
}

/// Holistic-stage cosine similarity matrix over `samples` (row = text).
pub fn holistic_similarity(model: &Model, samples: &[CorpusSample]) -> Result<Vec<f64>> {
    no_grad(|| {
        let mut texts = Vec::with_capacity(samples.len());
        let mut motions = Vec::with_capacity(samples.len());
        for s in samples {
            let x = model.prepare(&s.text, &s.motion)?;
            let t = model.text_stages(&x.token_ids, None)?;
            let m = model.motion_stages(&x.patches, None)?;
            texts.push(model.pool(&t.hlt)?);
            motions.push(model.pool(&m.hlt)?);
        }
        let t = crate::tensor::Tensor::concat(&texts, 0)?
            .l2_normalize_rows(crate::model::COSINE_EPS)?;
        let m = crate::tensor::Tensor::concat(&motions, 0)?
            .l2_normalize_rows(crate::model::COSINE_EPS)?;
        Ok(t.matmul_nt(&m)?.to_vec())
    })
}

/// t2m and m2t reports over `samples` under `protocol`.
pub fn evaluate_retrieval(
    model: &Model,
    samples: &[CorpusSample],
    protocol: Protocol,
    small: &SmallBatch,
) -> Result<[RetrievalReport; 2]> {
    if samples.is_empty() {
        return Err(invalid!("evaluation split is empty"));
    }
    if protocol == Protocol::Small && samples.len() < small.batch_size {
        return Err(invalid!(
            "gallery smaller than batch ({} < {})",
            samples.len(),
            small.batch_size
        ));
    }
    let sim = holistic_similarity(model, samples)?;
    retrieval_from_similarity(&sim, samples.len(), protocol, small)
}

/// For every segment vector, the index of the most similar phrase vector
/// (cosine; ties to the earlier phrase).
pub fn align_tokens(phrases: &[Vec<f64>], segments: &[Vec<f64>]) -> Vec<usize> {
    segments
        .iter()
        .map(|s| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, p) in phrases.iter().enumerate() {
                let c = kernels::cosine(p, s);
                if c > best.1 {
                    best = (k, c);
                }
            }
            best.0
        })
        .collect()
}

pub fn alignment_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentGroup {
    pub phrases: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Broken down by the number of phrases per sample.
    pub by_phrase_count: Vec<AlignmentGroup>,
}

impl AlignmentReport {
    pub fn group(&self, phrases: usize) -> Option<&AlignmentGroup> {
        self.by_phrase_count.iter().find(|g| g.phrases == phrases)
    }
}

/// Predicted and ground-truth phrase for every motion segment token of
/// one sample. Each phrase is embedded on its own through the text
/// pyramid (holistic stage) and compared with every segment token.
pub fn sample_alignment(model: &Model, sample: &CorpusSample) -> Result<(Vec<usize>, Vec<usize>)> {
    no_grad(|| {
        let x = model.prepare(&sample.text, &sample.motion)?;
        let motion = model.motion_stages(&x.patches, None)?;
        let phrases = sample
            .segments
            .iter()
            .map(|seg| {
                let ids = &x.token_ids[seg.phrase[0]..seg.phrase[1]];
                Ok(model.pool(&model.text_stages(ids, None)?.hlt)?.to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let predicted = align_tokens(&phrases, &motion.sgm.to_rows());
        let truth = alignment_ground_truth(
            sample,
            &x.patches.window_starts,
            x.patches.n_p,
            &motion.groups,
        )?;
        Ok((predicted, truth))
    })
}

pub fn evaluate_alignment(model: &Model, samples: &[CorpusSample]) -> Result<AlignmentReport> {
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let (pred, truth) = sample_alignment(model, s)?;
        let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        let g = groups.entry(s.segments.len()).or_default();
        g.0 += hits;
        g.1 += truth.len();
    }
    let correct = groups.values().map(|g| g.0).sum();
    let total = groups.values().map(|g| g.1).sum();
    Ok(AlignmentReport {
        accuracy: correct as f64 / (total as usize).max(1) as f64,
        correct,
        total,
        by_phrase_count: groups
            .into_iter()
            .map(|(phrases, (correct, total))| AlignmentGroup {
                phrases,
                correct,
                total,
                accuracy: correct as f64 / total.max(1) as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heatmap {
    pub sample_id: usize,
    pub stage: Stage,
    pub text_labels: Vec<String>,
    pub motion_labels: Vec<String>,
    /// `N_t × N_m` token cosine similarities.
    pub cosine: Vec<Vec<f64>>,
    /// `N_t × N_m` STI-head logits.
    pub sti: Vec<Vec<f64>>,
    pub text_provenance: Vec<Vec<usize>>,
    pub motion_provenance: Vec<Vec<usize>>,
}

fn span_label(steps: &[usize]) -> String {
    match (steps.first(), steps.last()) {
        (Some(a), Some(b)) if a == b => format!("w{a}"),
        (Some(a), Some(b)) => format!("w{a}-w{b}"),
        _ => String::new(),
    }
}

/// Token-level similarity and STI-head grids at the joint or segment stage.
pub fn export_heatmaps(model: &Model, sample: &CorpusSample, stage: Stage) -> Result<Heatmap> {
    if stage == Stage::Hlt {
        return Err(invalid!("heatmaps are defined for the jnt and sgm stages"));
    }
    no_grad(|| {
        let x = model.prepare(&sample.text, &sample.motion)?;
        let p = model.forward(&x, None)?;
        let e = p.stage(stage);
        let steps = x.patches.n_windows;
        let text_labels = e
            .text_provenance
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&i| sample.text[i].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let motion_labels = match stage {
            Stage::Jnt => (0..e.motion.rows())
                .map(|i| format!("{}@w{}", PART_NAMES[i / steps], i % steps))
                .collect(),
            _ => e.motion_steps.iter().map(|s| span_label(s)).collect(),
        };
        let t = e.text.to_rows();
        let m = e.motion.to_rows();
        let cosine = t
            .iter()
            .map(|a| m.iter().map(|b| kernels::cosine(a, b)).collect())
            .collect();
        let sti = model.sti_head_forward(&e.text, &e.motion)?.to_rows();
        Ok(Heatmap {
            sample_id: sample.id,
            stage,
            text_labels,
            motion_labels,
            cosine,
            sti,
            text_provenance: e.text_provenance.clone(),
            motion_provenance: e.motion_provenance.clone(),
        })
    })
}
