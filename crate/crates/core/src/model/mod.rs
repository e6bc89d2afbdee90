//! The pyramidal alignment network.
//!
//! Text and motion are encoded into joint-level tokens, compressed into
//! segment tokens, and averaged into one holistic token per modality. A
//! shared projection head turns tokens into pooling logits; two token sets
//! are compared by the cosine of their pooled vectors. A separate head
//! predicts interaction grids between the two token sets.

mod compressor;
mod layers;
mod sti_head;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use compressor::Groups;
use compressor::{BodyCompressor, TokenCompressor};
use layers::{small, Block, FeedForward, LayerNorm, Linear, Named};
use sti_head::StiHead;

use crate::error::{invalid, shape_err, Error, Result};
use crate::motion_patch::{build_patches, MotionSequence, NormStats, PatchGrid, NUM_PARTS};
use crate::sti::ScoreFn;
use crate::tensor::{self, kernels, no_grad, Tensor};

/// Norm floor when normalising pooled vectors for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub rho_text: f64,
    pub rho_motion: f64,
    /// Token strings; a token's id is its position.
    pub vocabulary: Vec<String>,
    pub n_p: usize,
    pub stride: usize,
    pub max_text_len: usize,
    pub max_windows: usize,
    pub sti_channels: usize,
    pub sti_heads: usize,
    /// Neighbour count for the density estimate; `None` uses the default rule.
    pub knn_k: Option<usize>,
    pub norm_stats: NormStats,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            encoder_depth: 2,
            rho_text: 0.25,
            rho_motion: 0.25,
            vocabulary: Vec::new(),
            n_p: 16,
            stride: 8,
            max_text_len: 32,
            max_windows: 32,
            sti_channels: 32,
            sti_heads: 4,
            knn_k: None,
            norm_stats: NormStats::identity(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid!(
                "dim {} must be a positive multiple of heads {}",
                self.dim,
                self.heads
            ));
        }
        if self.sti_channels == 0 || self.sti_heads == 0 || self.sti_channels % self.sti_heads != 0
        {
            return Err(invalid!(
                "sti_channels {} must be a positive multiple of sti_heads {}",
                self.sti_channels,
                self.sti_heads
            ));
        }
        for (name, rho) in [("rho_text", self.rho_text), ("rho_motion", self.rho_motion)] {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(invalid!("{name} = {rho} must lie in (0, 1]"));
            }
        }
        if self.vocabulary.is_empty() {
            return Err(invalid!("vocabulary is empty"));
        }
        if self.n_p < 2 || self.stride == 0 || self.max_text_len == 0 || self.max_windows == 0 {
            return Err(invalid!(
                "n_p >= 2, stride, max_text_len and max_windows must be positive"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Jnt,
    Sgm,
    Hlt,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Jnt, Stage::Sgm, Stage::Hlt];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Jnt => "jnt",
            Stage::Sgm => "sgm",
            Stage::Hlt => "hlt",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jnt" => Ok(Stage::Jnt),
            "sgm" => Ok(Stage::Sgm),
            "hlt" => Ok(Stage::Hlt),
            _ => Err(invalid!("unknown stage {s:?} (expected jnt, sgm or hlt)")),
        }
    }
}

/// Token embeddings of one pyramid level.
///
/// Provenance maps every token to the joint-level tokens it summarises:
/// text indices for text, part-major `part · P + t` indices for motion.
/// `motion_steps` lists the time steps (windows) behind each motion token.
#[derive(Debug, Clone)]
pub struct StageEmbeddings {
    pub stage: Stage,
    pub text: Tensor,
    pub motion: Tensor,
    pub text_provenance: Vec<Vec<usize>>,
    pub motion_provenance: Vec<Vec<usize>>,
    pub motion_steps: Vec<Vec<usize>>,
}

/// Fixed clustering for both compressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub text: Groups,
    pub motion: Groups,
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub jnt: StageEmbeddings,
    pub sgm: StageEmbeddings,
    pub hlt: StageEmbeddings,
}

impl Pyramid {
    pub fn stage(&self, stage: Stage) -> &StageEmbeddings {
        match stage {
            Stage::Jnt => &self.jnt,
            Stage::Sgm => &self.sgm,
            Stage::Hlt => &self.hlt,
        }
    }

    pub fn plan(&self) -> ClusterPlan {
        ClusterPlan {
            text: self.sgm.text_provenance.clone(),
            motion: self.sgm.motion_steps.clone(),
        }
    }
}

/// One modality's pyramid; `groups` are the compressor's clusters.
#[derive(Debug, Clone)]
pub struct ModalityStages {
    pub jnt: Tensor,
    pub sgm: Tensor,
    pub hlt: Tensor,
    pub groups: Groups,
}

/// Model-ready sample: token ids and motion patches.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub token_ids: Vec<usize>,
    pub patches: PatchGrid,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    token_index: HashMap<String, usize>,
    text_embed: Tensor,
    text_blocks: Vec<Block>,
    text_ln: LayerNorm,
    motion_proj: Linear,
    part_embed: Tensor,
    time_embed: Tensor,
    motion_blocks: Vec<Block>,
    motion_ln: LayerNorm,
    body: BodyCompressor,
    text_compressor: TokenCompressor,
    motion_compressor: TokenCompressor,
    projection: FeedForward,
    sti_head: StiHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let v = config.vocabulary.len();
        let patch_len = 3 * config.n_p * config.n_p;
        let mut token_index = HashMap::new();
        for (i, w) in config.vocabulary.iter().enumerate() {
            if token_index.insert(w.clone(), i).is_some() {
                return Err(invalid!("duplicate vocabulary entry {w:?}"));
            }
        }
        let blocks = |rng: &mut ChaCha8Rng| -> Vec<Block> {
            (0..config.encoder_depth)
                .map(|_| Block::new(rng, d, config.heads))
                .collect()
        };
        Ok(Self {
            token_index,
            text_embed: layers::uniform_std(&mut rng, &[v, d], 1.0),
            text_blocks: blocks(&mut rng),
            text_ln: LayerNorm::new(d),
            motion_proj: Linear::new(&mut rng, patch_len, d),
            part_embed: small(&mut rng, &[NUM_PARTS, d]),
            time_embed: small(&mut rng, &[config.max_windows, d]),
            motion_blocks: blocks(&mut rng),
            motion_ln: LayerNorm::new(d),
            body: BodyCompressor::new(&mut rng, d),
            text_compressor: TokenCompressor::new(&mut rng, d, config.heads),
            motion_compressor: TokenCompressor::new(&mut rng, d, config.heads),
            projection: FeedForward::scorer(&mut rng, d, 2 * d),
            sti_head: StiHead::new(&mut rng, d, config.sti_channels, config.sti_heads),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Encoders, compressors and projection head.
    pub fn model_parameters(&self) -> Named {
        let mut out = Vec::new();
        out.push(("text.embed".to_string(), self.text_embed.clone()));
        for (i, b) in self.text_blocks.iter().enumerate() {
            b.params(&format!("text.block{i}"), &mut out);
        }
        self.text_ln.params("text.ln", &mut out);
        self.motion_proj.params("motion.proj", &mut out);
        out.push(("motion.part_embed".to_string(), self.part_embed.clone()));
        out.push(("motion.time_embed".to_string(), self.time_embed.clone()));
        for (i, b) in self.motion_blocks.iter().enumerate() {
            b.params(&format!("motion.block{i}"), &mut out);
        }
        self.motion_ln.params("motion.ln", &mut out);
        self.body.params("body", &mut out);
        self.text_compressor.params("text_compressor", &mut out);
        self.motion_compressor.params("motion_compressor", &mut out);
        self.projection.params("projection", &mut out);
        out
    }

    pub fn head_parameters(&self) -> Named {
        let mut out = Vec::new();
        self.sti_head.params("sti_head", &mut out);
        out
    }

    pub fn named_parameters(&self) -> Named {
        let mut out = self.model_parameters();
        out.extend(self.head_parameters());
        out
    }

    pub fn tokenize(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.token_index
                    .get(w)
                    .copied()
                    .ok_or_else(|| invalid!("token {w:?} is not in the vocabulary"))
            })
            .collect()
    }

    pub fn prepare(&self, words: &[String], motion: &MotionSequence) -> Result<SampleInput> {
        let c = &self.config;
        Ok(SampleInput {
            token_ids: self.tokenize(words)?,
            patches: build_patches(motion, c.n_p, c.stride, &c.norm_stats)?,
        })
    }

    /// `N_t × D` contextual token embeddings.
    pub fn encode_text_joint(&self, token_ids: &[usize]) -> Result<Tensor> {
        let (n, d) = (token_ids.len(), self.config.dim);
        if n == 0 {
            return Err(invalid!("text is empty"));
        }
        if n > self.config.max_text_len {
            return Err(invalid!(
                "text of {n} tokens exceeds {}",
                self.config.max_text_len
            ));
        }
        let v = self.config.vocabulary.len();
        if let Some(bad) = token_ids.iter().find(|&&i| i >= v) {
            return Err(invalid!("unknown token id {bad} (vocabulary of {v})"));
        }
        let pos = Tensor::new(layers::sinusoidal(n, d), &[n, d])?;
        let mut x = self.text_embed.gather_rows(token_ids)?.add(&pos)?;
        for b in &self.text_blocks {
            x = b.forward(&x)?;
        }
        self.text_ln.forward(&x)
    }

    /// `(5 · P) × D` tokens, part-major (`part · P + window`).
    pub fn encode_motion_joint(&self, patches: &PatchGrid) -> Result<Tensor> {
        let p = patches.n_windows;
        if patches.n_p != self.config.n_p {
            return Err(shape_err!(
                "patches of size {} for a model with N_p = {}",
                patches.n_p,
                self.config.n_p
            ));
        }
        if p == 0 || p > self.config.max_windows {
            return Err(invalid!(
                "{p} windows outside 1..={}",
                self.config.max_windows
            ));
        }
        let len = patches.patch_len();
        let mut rows = Vec::with_capacity(NUM_PARTS * p * len);
        for part in 0..NUM_PARTS {
            for w in 0..p {
                rows.extend_from_slice(patches.patch(w, part));
            }
        }
        let x = Tensor::new(rows, &[NUM_PARTS * p, len])?;
        let parts: Vec<usize> = (0..NUM_PARTS * p).map(|i| i / p).collect();
        let steps: Vec<usize> = (0..NUM_PARTS * p).map(|i| i % p).collect();
        let pos = self
            .part_embed
            .gather_rows(&parts)?
            .add(&self.time_embed.gather_rows(&steps)?)?;
        let mut x = self.motion_proj.forward(&x)?.add(&pos)?;
        for b in &self.motion_blocks {
            x = b.forward(&x)?;
        }
        self.motion_ln.forward(&x)
    }

    /// Pools the part tokens of each time step: `(5·P) × D → P × D`.
    pub fn body_compress(&self, motion_jnt: &Tensor) -> Result<Tensor> {
        self.body.forward(motion_jnt, NUM_PARTS)
    }

    /// Text-side token compressor; returns the segment tokens and, per
    /// token, the input indices it merges.
    pub fn compress_text(
        &self,
        tokens: &Tensor,
        groups: Option<&Groups>,
    ) -> Result<(Tensor, Groups)> {
        let c = self.text_compressor.forward(
            tokens,
            self.config.rho_text,
            self.config.knn_k,
            groups,
        )?;
        Ok((c.tokens, c.groups))
    }

    pub fn compress_motion(
        &self,
        tokens: &Tensor,
        groups: Option<&Groups>,
    ) -> Result<(Tensor, Groups)> {
        let c = self.motion_compressor.forward(
            tokens,
            self.config.rho_motion,
            self.config.knn_k,
            groups,
        )?;
        Ok((c.tokens, c.groups))
    }

    /// Text side of the pyramid: joint tokens, segment tokens with their
    /// groups, and the holistic token.
    pub fn text_stages(
        &self,
        token_ids: &[usize],
        groups: Option<&Groups>,
    ) -> Result<ModalityStages> {
        let jnt = self.encode_text_joint(token_ids)?;
        let (sgm, groups) = self.compress_text(&jnt, groups)?;
        let hlt = holistic_pool(&sgm)?;
        Ok(ModalityStages {
            jnt,
            sgm,
            hlt,
            groups,
        })
    }

    /// Motion side; `groups` index time steps.
    pub fn motion_stages(
        &self,
        patches: &PatchGrid,
        groups: Option<&Groups>,
    ) -> Result<ModalityStages> {
        let jnt = self.encode_motion_joint(patches)?;
        let time = self.body_compress(&jnt)?;
        let (sgm, groups) = self.compress_motion(&time, groups)?;
        let hlt = holistic_pool(&sgm)?;
        Ok(ModalityStages {
            jnt,
            sgm,
            hlt,
            groups,
        })
    }

    pub fn forward(&self, input: &SampleInput, plan: Option<&ClusterPlan>) -> Result<Pyramid> {
        let text = self.text_stages(&input.token_ids, plan.map(|p| &p.text))?;
        let motion = self.motion_stages(&input.patches, plan.map(|p| &p.motion))?;
        let (nt, p) = (text.jnt.rows(), input.patches.n_windows);
        let motion_provenance: Vec<Vec<usize>> = motion
            .groups
            .iter()
            .map(|steps| {
                let mut idx: Vec<usize> = (0..NUM_PARTS)
                    .flat_map(|part| steps.iter().map(move |t| part * p + t))
                    .collect();
                idx.sort_unstable();
                idx
            })
            .collect();
        let singletons = |n: usize| (0..n).map(|i| vec![i]).collect::<Vec<_>>();
        let all = |n: usize| vec![(0..n).collect::<Vec<_>>()];
        Ok(Pyramid {
            jnt: StageEmbeddings {
                stage: Stage::Jnt,
                text: text.jnt,
                motion: motion.jnt,
                text_provenance: singletons(nt),
                motion_provenance: singletons(NUM_PARTS * p),
                motion_steps: (0..NUM_PARTS * p).map(|i| vec![i % p]).collect(),
            },
            hlt: StageEmbeddings {
                stage: Stage::Hlt,
                text: text.hlt,
                motion: motion.hlt,
                text_provenance: all(nt),
                motion_provenance: all(NUM_PARTS * p),
                motion_steps: all(p),
            },
            sgm: StageEmbeddings {
                stage: Stage::Sgm,
                text: text.sgm,
                motion: motion.sgm,
                text_provenance: text.groups,
                motion_provenance,
                motion_steps: motion.groups,
            },
        })
    }

    /// Projection-head logit per token, `N × 1`.
    pub fn token_logits(&self, tokens: &Tensor) -> Result<Tensor> {
        self.projection.forward(tokens)
    }

    /// Softmax(logit)-weighted sum of the tokens, `1 × D`.
    pub fn pool(&self, tokens: &Tensor) -> Result<Tensor> {
        let n = tokens.rows();
        if n == 0 {
            return Err(invalid!("cannot pool an empty token set"));
        }
        if n == 1 {
            return Ok(tokens.clone());
        }
        let w = self.token_logits(tokens)?.softmax(0)?.reshape(&[n])?;
        tokens
            .mul_col(&w)?
            .sum_axis(0)?
            .reshape(&[1, tokens.cols()])
    }

    /// Cosine of the pooled text and motion vectors.
    pub fn pair_similarity(&self, text: &Tensor, motion: &Tensor) -> Result<Tensor> {
        let t = self.pool(text)?.l2_normalize_rows(COSINE_EPS)?;
        let m = self.pool(motion)?.l2_normalize_rows(COSINE_EPS)?;
        Ok(t.mul(&m)?.sum())
    }

    /// `B × B` matrix with entry `(i, j) = s(text_i, motion_j)` at `stage`.
    pub fn similarity_matrix(&self, pyramids: &[Pyramid], stage: Stage) -> Result<Tensor> {
        let (texts, motions) = self.pooled(pyramids, stage)?;
        texts.matmul_nt(&motions)
    }

    /// Unit-norm pooled vectors (`B × D` per modality).
    pub fn pooled(&self, pyramids: &[Pyramid], stage: Stage) -> Result<(Tensor, Tensor)> {
        if pyramids.is_empty() {
            return Err(invalid!("no samples to compare"));
        }
        let mut t = Vec::with_capacity(pyramids.len());
        let mut m = Vec::with_capacity(pyramids.len());
        for p in pyramids {
            let s = p.stage(stage);
            t.push(self.pool(&s.text)?);
            m.push(self.pool(&s.motion)?);
        }
        Ok((
            Tensor::concat(&t, 0)?.l2_normalize_rows(COSINE_EPS)?,
            Tensor::concat(&m, 0)?.l2_normalize_rows(COSINE_EPS)?,
        ))
    }

    /// Detached subset scorer over the unified index set (text first).
    pub fn subset_scorer(&self, text: &Tensor, motion: &Tensor) -> Result<PooledCosineScore> {
        no_grad(|| {
            let lt = self.token_logits(text)?.to_vec();
            let lm = self.token_logits(motion)?.to_vec();
            let top = lt
                .iter()
                .chain(&lm)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let scaled = |x: &Tensor, l: &[f64]| -> Vec<Vec<f64>> {
                x.to_rows()
                    .into_iter()
                    .zip(l)
                    .map(|(row, &l)| {
                        let w = (l - top).exp();
                        row.into_iter().map(|v| v * w).collect()
                    })
                    .collect()
            };
            let mut vectors = scaled(text, &lt);
            vectors.extend(scaled(motion, &lm));
            Ok(PooledCosineScore {
                n_text: text.rows(),
                dim: text.cols(),
                vectors,
            })
        })
    }

    /// Pair similarity restricted to the tokens of `subset`.
    pub fn subset_score(&self, text: &Tensor, motion: &Tensor, subset: &[usize]) -> Result<f64> {
        Ok(self.subset_scorer(text, motion)?.score(subset))
    }

    /// Interaction logits, `N_t × N_m`.
    pub fn sti_head_forward(&self, text: &Tensor, motion: &Tensor) -> Result<Tensor> {
        self.sti_head.forward(text, motion)
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "extra": extra });
        tensor::save_checkpoint(dir, &self.named_parameters(), &meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = tensor::load_checkpoint(dir)?;
        let config: ModelConfig = serde_json::from_value(
            ck.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint metadata has no model config".into()))?,
        )?;
        let model = Model::new(config, 0)?;
        let params = model.named_parameters();
        if params.len() != ck.parameters.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                ck.parameters.len(),
                params.len()
            )));
        }
        for (name, t) in &params {
            let (shape, data) = ck
                .parameters
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {shape:?}, model shape {:?}",
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(data);
        }
        let extra = ck
            .metadata
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}

/// Mean over segment tokens, `1 × D`.
pub fn holistic_pool(tokens: &Tensor) -> Result<Tensor> {
    let d = tokens.cols();
    tokens.mean_axis(0)?.reshape(&[1, d])
}

/// `F(S) = cos(Σ_{S∩text} e^{l}·f, Σ_{S∩motion} e^{l}·f)`, zero when either
/// side is empty. Softmax normalisation cancels inside the cosine, so
/// unnormalised weights give the restricted pooled similarity exactly.
#[derive(Debug, Clone)]
pub struct PooledCosineScore {
    n_text: usize,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl PooledCosineScore {
    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_motion(&self) -> usize {
        self.vectors.len() - self.n_text
    }

    fn sums(&self, subset: &[usize]) -> (Vec<f64>, Vec<f64>, bool, bool) {
        let mut t = vec![0.0; self.dim];
        let mut m = vec![0.0; self.dim];
        let (mut has_t, mut has_m) = (false, false);
        for &i in subset {
            let (acc, flag) = if i < self.n_text {
                (&mut t, &mut has_t)
            } else {
                (&mut m, &mut has_m)
            };
            acc.iter_mut()
                .zip(&self.vectors[i])
                .for_each(|(a, v)| *a += v);
            *flag = true;
        }
        (t, m, has_t, has_m)
    }
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl ScoreFn for PooledCosineScore {
    fn score(&self, subset: &[usize]) -> f64 {
        let (t, m, has_t, has_m) = self.sums(subset);
        if has_t && has_m {
            kernels::cosine(&t, &m)
        } else {
            0.0
        }
    }

    fn second_difference(&self, prefix: &[usize], a: usize, b: usize) -> f64 {
        let (t, m, has_t, has_m) = self.sums(prefix);
        let f = |extra: &[usize]| -> f64 {
            let (mut t, mut m, mut ht, mut hm) = (t.clone(), m.clone(), has_t, has_m);
            for &i in extra {
                if i < self.n_text {
                    t = plus(&t, &self.vectors[i]);
                    ht = true;
                } else {
                    m = plus(&m, &self.vectors[i]);
                    hm = true;
                }
            }
            if ht && hm {
                kernels::cosine(&t, &m)
            } else {
                0.0
            }
        };
        f(&[a, b]) - f(&[a]) - f(&[b]) + f(&[])
    }
}
