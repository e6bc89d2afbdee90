//! Building blocks shared by the encoders, compressors and the STI head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) type Named = Vec<(String, Tensor)>;

/// Spread of freshly initialised weights.
pub(crate) const INIT_STD: f64 = 0.02;

/// Weight matrix or kernel at [`INIT_STD`].
pub(crate) fn small(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform_std(rng, shape, INIT_STD)
}

/// Uniform entries with standard deviation `std`.
pub(crate) fn uniform_std(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let a = 3f64.sqrt() * std;
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.gen_range(-a..a)).collect(), shape).expect("non-empty shape")
}

pub(crate) fn constant(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(vec![v; n], shape).expect("non-empty shape")
}

pub(crate) fn push(out: &mut Named, prefix: &str, name: &str, t: &Tensor) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: small(rng, &[d_in, d_out]),
            bias: Some(constant(&[d_out], 0.0)),
        }
    }

    /// For outputs that only ever feed a softmax, where a bias cancels.
    pub fn without_bias(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: small(rng, &[d_in, d_out]),
            bias: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        push(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: constant(&[d], 1.0),
            bias: constant(&[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        push(out, prefix, "gain", &self.gain);
        push(out, prefix, "bias", &self.bias);
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

impl Attention {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::new(rng, d, d),
            key: Linear::without_bias(rng, d, d),
            value: Linear::new(rng, d, d),
            output: Linear::new(rng, d, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.cols();
        let dh = d / self.heads;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads = (0..self.heads)
            .map(|h| {
                let qh = q.slice_cols(h * dh, dh)?;
                let kh = k.slice_cols(h * dh, dh)?;
                let vh = v.slice_cols(h * dh, dh)?;
                qh.matmul_nt(&kh)?.scale(scale).softmax(1)?.matmul(&vh)
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = if heads.len() == 1 {
            heads.into_iter().next().expect("one head")
        } else {
            Tensor::concat(&heads, 1)?
        };
        self.output.forward(&merged)
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        self.query.params(&format!("{prefix}.query"), out);
        self.key.params(&format!("{prefix}.key"), out);
        self.value.params(&format!("{prefix}.value"), out);
        self.output.params(&format!("{prefix}.output"), out);
    }
}

/// `D → hidden → D` with GELU.
#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            up: Linear::new(rng, d, hidden),
            down: Linear::new(rng, hidden, d_out),
        }
    }

    /// Scalar-per-token logits for softmax pooling (no output bias).
    pub fn scorer(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(rng, d, hidden),
            down: Linear::without_bias(rng, hidden, 1),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu())
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        self.up.params(&format!("{prefix}.up"), out);
        self.down.params(&format!("{prefix}.down"), out);
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl Block {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(d),
            attn: Attention::new(rng, d, heads),
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::new(rng, d, 2 * d, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&self.ln_attn.forward(x)?)?)?;
        x.add(&self.ffn.forward(&self.ln_ffn.forward(&x)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        self.ln_attn.params(&format!("{prefix}.ln_attn"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln_ffn.params(&format!("{prefix}.ln_ffn"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

/// Sinusoidal position table, `len × d`.
pub(crate) fn sinusoidal(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
