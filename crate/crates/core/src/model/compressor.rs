//! Body compressor (joint axis) and token compressor (sequence axis).

use rand_chacha::ChaCha8Rng;

use super::layers::{push, small, Attention, LayerNorm, Linear, Named};
use crate::error::{invalid, Result};
use crate::knn_dpc;
use crate::tensor::Tensor;

/// Attention pooling over the part tokens of each time step with one
/// learned query.
#[derive(Debug, Clone)]
pub(crate) struct BodyCompressor {
    query: Tensor,
}

impl BodyCompressor {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            query: small(rng, &[1, d]),
        }
    }

    /// `tokens` are `(parts · steps) × D`, part-major. Returns `steps × D`.
    pub fn forward(&self, tokens: &Tensor, parts: usize) -> Result<Tensor> {
        let (n, d) = (tokens.rows(), tokens.cols());
        if parts == 0 || n % parts != 0 {
            return Err(invalid!("{n} tokens do not split into {parts} parts"));
        }
        let steps = n / parts;
        let time_major: Vec<usize> = (0..steps)
            .flat_map(|t| (0..parts).map(move |p| p * steps + t))
            .collect();
        let x = tokens.gather_rows(&time_major)?;
        let logits = x.matmul_nt(&self.query)?.scale(1.0 / (d as f64).sqrt());
        let weights = logits.reshape(&[steps, parts])?.softmax(1)?;
        let weighted = x.mul_col(&weights.reshape(&[n])?)?;
        weighted.reshape(&[steps, parts, d])?.sum_axis(1)
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        push(out, prefix, "query", &self.query);
    }
}

/// Groups of input token indices, one per output token.
pub type Groups = Vec<Vec<usize>>;

/// Conv 3×1 → LayerNorm → self-attention (residual) → linear score →
/// KNN-DPC → score-weighted merge → LayerNorm + self-attention (residual).
#[derive(Debug, Clone)]
pub(crate) struct TokenCompressor {
    conv_kernel: Tensor,
    conv_bias: Tensor,
    ln_in: LayerNorm,
    attn_in: Attention,
    score: Linear,
    ln_out: LayerNorm,
    attn_out: Attention,
}

pub(crate) struct Compressed {
    pub tokens: Tensor,
    pub groups: Groups,
}

impl TokenCompressor {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        Self {
            conv_kernel: small(rng, &[d, d, 3, 1]),
            conv_bias: super::layers::constant(&[d], 0.0),
            ln_in: LayerNorm::new(d),
            attn_in: Attention::new(rng, d, heads),
            score: Linear::without_bias(rng, d, 1),
            ln_out: LayerNorm::new(d),
            attn_out: Attention::new(rng, d, heads),
        }
    }

    /// Features the clustering runs on (`N × D`).
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = (x.rows(), x.cols());
        let grid = x.transpose()?.reshape(&[d, n, 1])?;
        let conv = grid.conv2d(&self.conv_kernel, Some(&self.conv_bias))?;
        let h = self.ln_in.forward(&conv.reshape(&[d, n])?.transpose()?)?;
        h.add(&self.attn_in.forward(&h)?)
    }

    /// Compresses `N` tokens to `max(1, round(ratio·N))`. `groups` overrides
    /// the clustering (used to hold the partition fixed, e.g. for
    /// finite-difference checks).
    pub fn forward(
        &self,
        x: &Tensor,
        ratio: f64,
        knn_k: Option<usize>,
        groups: Option<&Groups>,
    ) -> Result<Compressed> {
        let n = x.rows();
        let f = self.features(x)?;
        f.check_finite("token compressor features")?;
        let scores = self.score.forward(&f)?;
        let groups = match groups {
            Some(g) => {
                check_partition(g, n)?;
                g.clone()
            }
            None => knn_dpc::cluster(&f.to_rows(), ratio, knn_k, None)?.provenance,
        };
        let merged = groups
            .iter()
            .map(|members| {
                let w = scores.gather_rows(members)?.softmax(0)?;
                let m = members.len();
                f.gather_rows(members)?
                    .mul_col(&w.reshape(&[m])?)?
                    .sum_axis(0)?
                    .reshape(&[1, f.cols()])
            })
            .collect::<Result<Vec<_>>>()?;
        let y = if merged.len() == 1 {
            merged.into_iter().next().expect("one group")
        } else {
            Tensor::concat(&merged, 0)?
        };
        let tokens = y.add(&self.attn_out.forward(&self.ln_out.forward(&y)?)?)?;
        Ok(Compressed { tokens, groups })
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        push(out, prefix, "conv.kernel", &self.conv_kernel);
        push(out, prefix, "conv.bias", &self.conv_bias);
        self.ln_in.params(&format!("{prefix}.ln_in"), out);
        self.attn_in.params(&format!("{prefix}.attn_in"), out);
        self.score.params(&format!("{prefix}.score"), out);
        self.ln_out.params(&format!("{prefix}.ln_out"), out);
        self.attn_out.params(&format!("{prefix}.attn_out"), out);
    }
}

fn check_partition(groups: &Groups, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in groups.iter().flatten() {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(invalid!(
                "cluster override is not a partition of {n} tokens"
            ));
        }
    }
    if groups.iter().any(Vec::is_empty) || seen.iter().any(|s| !s) {
        return Err(invalid!(
            "cluster override is not a partition of {n} tokens"
        ));
    }
    Ok(())
}
