//! Central finite-difference checks for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient of `f(inputs)` (a scalar) with central
/// differences of step `h`. At most `max_coords` coordinates per input are
/// probed, chosen with `seed`; `None` probes all of them.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(Tensor::grad_or_zeros).collect();
    drop(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, grad) in inputs.iter().zip(&analytic) {
        let n = t.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = t.data()[c];
            t.data_mut()[c] = orig + h;
            let plus = no_grad(|| f(inputs))?.item();
            t.data_mut()[c] = orig - h;
            let minus = no_grad(|| f(inputs))?.item();
            t.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad[c], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked,
    })
}
