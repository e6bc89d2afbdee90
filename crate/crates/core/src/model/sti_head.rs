//! Predicts an `N_t × N_m` interaction logit grid from two token sets.

use rand_chacha::ChaCha8Rng;

use super::layers::{constant, push, small, Attention, LayerNorm, Linear, Named};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct StiHead {
    channels: usize,
    cell: Linear,
    conv1: (Tensor, Tensor),
    ln: LayerNorm,
    attn: Attention,
    conv2: (Tensor, Tensor),
    out: Linear,
}

fn conv_params(rng: &mut ChaCha8Rng, c: usize) -> (Tensor, Tensor) {
    (small(rng, &[c, c, 3, 3]), constant(&[c], 0.0))
}

impl StiHead {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, channels: usize, heads: usize) -> Self {
        Self {
            channels,
            cell: Linear::new(rng, 3 * d, channels),
            conv1: conv_params(rng, channels),
            ln: LayerNorm::new(channels),
            attn: Attention::new(rng, channels, heads),
            conv2: conv_params(rng, channels),
            out: Linear::without_bias(rng, channels, 1),
        }
    }

    /// Cells are `(N_t·N_m) × C` row-major over the grid; convolutions run on
    /// the `C × N_t × N_m` view.
    fn conv(
        &self,
        cells: &Tensor,
        (k, b): &(Tensor, Tensor),
        nt: usize,
        nm: usize,
    ) -> Result<Tensor> {
        let c = self.channels;
        let grid = cells.transpose()?.reshape(&[c, nt, nm])?;
        grid.conv2d(k, Some(b))?.reshape(&[c, nt * nm])?.transpose()
    }

    pub fn forward(&self, text: &Tensor, motion: &Tensor) -> Result<Tensor> {
        let (nt, nm) = (text.rows(), motion.rows());
        if nt == 0 || nm == 0 {
            return Err(invalid!("interaction head needs tokens on both sides"));
        }
        let rows: Vec<usize> = (0..nt * nm).map(|c| c / nm).collect();
        let cols: Vec<usize> = (0..nt * nm).map(|c| c % nm).collect();
        let t = text.gather_rows(&rows)?;
        let m = motion.gather_rows(&cols)?;
        let prod = t.mul(&m)?;
        let cells = self.cell.forward(&Tensor::concat(&[t, m, prod], 1)?)?;
        let z = self.conv(&cells, &self.conv1, nt, nm)?.relu();
        let z = z.add(&self.attn.forward(&self.ln.forward(&z)?)?)?;
        let z = self.conv(&z, &self.conv2, nt, nm)?;
        self.out.forward(&z)?.reshape(&[nt, nm])
    }

    pub fn params(&self, prefix: &str, out: &mut Named) {
        self.cell.params(&format!("{prefix}.cell"), out);
        push(out, prefix, "conv1.kernel", &self.conv1.0);
        push(out, prefix, "conv1.bias", &self.conv1.1);
        self.ln.params(&format!("{prefix}.ln"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        push(out, prefix, "conv2.kernel", &self.conv2.0);
        push(out, prefix, "conv2.bias", &self.conv2.1);
        self.out.params(&format!("{prefix}.out"), out);
    }
}
