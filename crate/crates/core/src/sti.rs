//! Pairwise (order-2) Shapley-Taylor interaction indices.
//!
//! Text and motion tokens are placed in one unified index space: text token
//! `i` is `i`, motion token `j` is `n_text + j`. For a pair `(a, b)` and a
//! permutation `π`, the prefix `S_π` holds every token placed before the
//! earlier of the two, and the interaction is the mean over permutations of
//!
//! ```text
//! F(S ∪ {a, b}) − F(S ∪ {a}) − F(S ∪ {b}) + F(S)
//! ```
//!
//! Three evaluators are provided: brute-force permutation enumeration,
//! enumeration stratified by prefix length (weighted by the closed-form
//! prefix-length law), and a seeded Monte-Carlo estimator.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::kernels;

/// Factorial enumeration guard for [`sti_exact_permutation`].
pub const PERMUTATION_LIMIT: usize = 8;
/// Subset enumeration guard for [`sti_exact_stratified`].
pub const STRATIFIED_LIMIT: usize = 20;

/// A set function over the unified token index space.
pub trait ScoreFn: Sync {
    /// Score of `subset` (indices in any order, no duplicates).
    fn score(&self, subset: &[usize]) -> f64;

    /// `F(S∪{a,b}) − F(S∪{a}) − F(S∪{b}) + F(S)` for `S = prefix`.
    fn second_difference(&self, prefix: &[usize], a: usize, b: usize) -> f64 {
        // Fixed operand order keeps φ(a, b) and φ(b, a) bit-identical.
        let (a, b) = (a.min(b), a.max(b));
        let mut s = prefix.to_vec();
        let base = self.score(&s);
        s.push(a);
        let with_a = self.score(&s);
        s.push(b);
        let with_ab = self.score(&s);
        s.swap_remove(s.len() - 2);
        let with_b = self.score(&s);
        with_ab - with_a - with_b + base
    }
}

impl<F> ScoreFn for F
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn score(&self, subset: &[usize]) -> f64 {
        self(subset)
    }
}

/// Indexed text and motion tokens together with a scoring function.
pub struct TokenUniverse<F> {
    n_text: usize,
    n_motion: usize,
    score: F,
}

impl<F: ScoreFn> TokenUniverse<F> {
    pub fn new(n_text: usize, n_motion: usize, score: F) -> Self {
        Self {
            n_text,
            n_motion,
            score,
        }
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_motion(&self) -> usize {
        self.n_motion
    }

    /// Total token count `K`.
    pub fn len(&self) -> usize {
        self.n_text + self.n_motion
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn motion_index(&self, j: usize) -> usize {
        self.n_text + j
    }

    pub fn score_fn(&self) -> &F {
        &self.score
    }

    pub fn score(&self, subset: &[usize]) -> f64 {
        self.score.score(subset)
    }

    fn check_pair(&self, a: usize, b: usize) -> Result<()> {
        let k = self.len();
        if k < 2 {
            return Err(invalid!("interaction needs at least 2 tokens, got {k}"));
        }
        if a >= k || b >= k || a == b {
            return Err(invalid!(
                "pair ({a}, {b}) is not two distinct tokens of {k}"
            ));
        }
        Ok(())
    }
}

/// Law of the prefix length `L` for a uniformly random permutation of `K`
/// tokens: `P(L = ℓ) = 2(K − ℓ − 1) / (K(K − 1))` for `ℓ = 0..=K−2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixDistribution {
    pub k: usize,
    pub pmf: Vec<f64>,
}

pub fn prefix_length_pmf(k: usize) -> Result<PrefixDistribution> {
    if k < 2 {
        return Err(invalid!("prefix-length law needs K >= 2, got {k}"));
    }
    let denom = (k * (k - 1)) as f64;
    let pmf = (0..=k - 2)
        .map(|l| 2.0 * (k - l - 1) as f64 / denom)
        .collect();
    Ok(PrefixDistribution { k, pmf })
}

/// Exact interaction by enumerating all `K!` permutations.
pub fn sti_exact_permutation<F: ScoreFn>(u: &TokenUniverse<F>, a: usize, b: usize) -> Result<f64> {
    sti_exact_permutation_with_limit(u, a, b, PERMUTATION_LIMIT)
}

pub fn sti_exact_permutation_with_limit<F: ScoreFn>(
    u: &TokenUniverse<F>,
    a: usize,
    b: usize,
    limit: usize,
) -> Result<f64> {
    u.check_pair(a, b)?;
    let k = u.len();
    if k > limit {
        return Err(Error::Size(format!(
            "permutation enumeration over {k} tokens exceeds the limit of {limit}"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut total = 0.0;
    let mut count = 0u64;
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; k];
    let mut visit = |perm: &[usize]| {
        let cut = perm
            .iter()
            .position(|&t| t == a || t == b)
            .expect("pair present");
        total += u.score.second_difference(&perm[..cut], a, b);
        count += 1;
    };
    visit(&perm);
    let mut i = 1;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(total / count as f64)
}

/// Exact interaction by grouping prefixes by size: for each `ℓ`, the mean
/// second difference over all `ℓ`-subsets of the other `K − 2` tokens,
/// weighted by [`prefix_length_pmf`].
pub fn sti_exact_stratified<F: ScoreFn>(u: &TokenUniverse<F>, a: usize, b: usize) -> Result<f64> {
    u.check_pair(a, b)?;
    let k = u.len();
    if k > STRATIFIED_LIMIT {
        return Err(Error::Size(format!(
            "subset enumeration over {k} tokens exceeds the limit of {STRATIFIED_LIMIT}"
        )));
    }
    let others: Vec<usize> = (0..k).filter(|&t| t != a && t != b).collect();
    let m = others.len();
    let mut sums = vec![0.0; m + 1];
    let mut counts = vec![0u64; m + 1];
    let mut subset = Vec::with_capacity(m);
    for mask in 0u32..(1u32 << m) {
        subset.clear();
        subset.extend(
            (0..m)
                .filter(|&bit| mask >> bit & 1 == 1)
                .map(|bit| others[bit]),
        );
        let l = subset.len();
        sums[l] += u.score.second_difference(&subset, a, b);
        counts[l] += 1;
    }
    let pmf = prefix_length_pmf(k)?.pmf;
    Ok(pmf
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(p, (s, &c))| p * s / c as f64)
        .sum())
}

/// How many samples back a grid value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    Exact,
    Samples(usize),
}

/// `N_t × N_m` interaction values, row `i` = text token, column `j` = motion token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiGrid {
    pub n_text: usize,
    pub n_motion: usize,
    pub values: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
    pub sample_count: SampleCount,
}

impl StiGrid {
    pub fn new(n_text: usize, n_motion: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_text * n_motion || values.is_empty() {
            return Err(invalid!(
                "grid of {n_text}x{n_motion} needs {} values, got {}",
                n_text * n_motion,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("interaction grid".into()));
        }
        Ok(Self {
            n_text,
            n_motion,
            values,
            stderr: None,
            sample_count: SampleCount::Exact,
        })
    }

    pub fn get(&self, text: usize, motion: usize) -> f64 {
        self.values[text * self.n_motion + motion]
    }
}

/// Exact grid over every (text, motion) pair using the stratified evaluator.
pub fn sti_exact_grid<F: ScoreFn>(u: &TokenUniverse<F>) -> Result<StiGrid> {
    let mut values = Vec::with_capacity(u.n_text * u.n_motion);
    for i in 0..u.n_text {
        for j in 0..u.n_motion {
            values.push(sti_exact_stratified(u, i, u.motion_index(j))?);
        }
    }
    StiGrid::new(u.n_text, u.n_motion, values)
}

/// Monte-Carlo estimate for one (text, motion) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub text: usize,
    pub motion: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Averages the second difference over `n_samples` uniformly random
/// permutations per pair. Each pair draws from its own ChaCha stream keyed by
/// `(seed, text · N_m + motion)`, so results do not depend on pair order or
/// thread count. `stderr` is the sample standard deviation over `√n`.
pub fn sti_monte_carlo<F: ScoreFn>(
    u: &TokenUniverse<F>,
    pairs: &[(usize, usize)],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PairEstimate>> {
    if pairs.is_empty() {
        return Err(invalid!("monte-carlo interaction needs at least one pair"));
    }
    if n_samples == 0 {
        return Err(invalid!("monte-carlo interaction needs n_samples >= 1"));
    }
    for &(i, j) in pairs {
        if i >= u.n_text || j >= u.n_motion {
            return Err(invalid!(
                "pair ({i}, {j}) outside a {}x{} token grid",
                u.n_text,
                u.n_motion
            ));
        }
    }
    u.check_pair(0, u.len() - 1)?;
    Ok(pairs
        .par_iter()
        .map(|&(i, j)| estimate_pair(u, i, j, n_samples, seed))
        .collect())
}

fn estimate_pair<F: ScoreFn>(
    u: &TokenUniverse<F>,
    text: usize,
    motion: usize,
    n_samples: usize,
    seed: u64,
) -> PairEstimate {
    let a = text;
    let b = u.motion_index(motion);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((text * u.n_motion + motion) as u64);
    let mut perm: Vec<usize> = (0..u.len()).collect();
    // Welford running moments.
    let (mut mean, mut m2) = (0.0, 0.0);
    for n in 1..=n_samples {
        perm.shuffle(&mut rng);
        let cut = perm
            .iter()
            .position(|&t| t == a || t == b)
            .expect("pair present");
        let x = u.score.second_difference(&perm[..cut], a, b);
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let stderr = if n_samples > 1 {
        (m2 / (n_samples - 1) as f64).sqrt() / (n_samples as f64).sqrt()
    } else {
        0.0
    };
    PairEstimate {
        text,
        motion,
        value: mean,
        stderr,
    }
}

/// Monte-Carlo grid over every (text, motion) pair.
pub fn sti_monte_carlo_grid<F: ScoreFn>(
    u: &TokenUniverse<F>,
    n_samples: usize,
    seed: u64,
) -> Result<StiGrid> {
    let pairs: Vec<(usize, usize)> = (0..u.n_text)
        .flat_map(|i| (0..u.n_motion).map(move |j| (i, j)))
        .collect();
    let est = sti_monte_carlo(u, &pairs, n_samples, seed)?;
    let mut grid = StiGrid::new(u.n_text, u.n_motion, est.iter().map(|e| e.value).collect())?;
    grid.stderr = Some(est.iter().map(|e| e.stderr).collect());
    grid.sample_count = SampleCount::Samples(n_samples);
    Ok(grid)
}

/// Token-wise distributions derived from a grid. `m2t[j]` is a distribution
/// over text tokens for motion token `j`; `t2m[i]` one over motion tokens
/// for text token `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiDistributions {
    pub m2t: Vec<Vec<f64>>,
    pub t2m: Vec<Vec<f64>>,
}

pub fn sti_distributions(grid: &StiGrid) -> Result<StiDistributions> {
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("interaction grid".into()));
    }
    let (nt, nm) = (grid.n_text, grid.n_motion);
    let m2t = (0..nm)
        .map(|j| kernels::softmax(&(0..nt).map(|i| grid.get(i, j)).collect::<Vec<_>>()))
        .collect();
    let t2m = (0..nt)
        .map(|i| kernels::softmax(&grid.values[i * nm..(i + 1) * nm]))
        .collect();
    Ok(StiDistributions { m2t, t2m })
}

/// Fully tabulated score function over `K ≤ 20` tokens, indexed by bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct TableScore {
    k: usize,
    table: Vec<f64>,
}

impl TableScore {
    /// `table[mask]` is the score of the subset whose bits are set in `mask`.
    pub fn new(k: usize, table: Vec<f64>) -> Result<Self> {
        if k > STRATIFIED_LIMIT {
            return Err(Error::Size(format!("score table over {k} tokens")));
        }
        if table.len() != 1 << k {
            return Err(invalid!(
                "score table over {k} tokens needs {} entries",
                1u64 << k
            ));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score table".into()));
        }
        Ok(Self { k, table })
    }

    pub fn from_fn(k: usize, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let table = (0u32..(1 << k))
            .map(|mask| {
                let s: Vec<usize> = (0..k).filter(|&b| mask >> b & 1 == 1).collect();
                f(&s)
            })
            .collect();
        Self::new(k, table)
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

impl ScoreFn for TableScore {
    fn score(&self, subset: &[usize]) -> f64 {
        let mask = subset.iter().fold(0usize, |m, &t| m | 1 << t);
        self.table[mask]
    }
}

/// On-disk score table: every subset of the unified index space (sorted
/// index lists) mapped to a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub n_text: usize,
    pub n_motion: usize,
    pub scores: Vec<ScoreEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub subset: Vec<usize>,
    pub value: f64,
}

impl ScoreFile {
    pub fn from_universe<F: ScoreFn>(u: &TokenUniverse<F>) -> Result<Self> {
        let table = TableScore::from_fn(u.len(), |s| u.score(s))?;
        let k = u.len();
        let scores = (0u32..(1 << k))
            .map(|mask| ScoreEntry {
                subset: (0..k).filter(|&b| mask >> b & 1 == 1).collect(),
                value: table.table[mask as usize],
            })
            .collect();
        Ok(Self {
            n_text: u.n_text,
            n_motion: u.n_motion,
            scores,
        })
    }

    /// Validates completeness and builds the universe.
    pub fn into_universe(self) -> Result<TokenUniverse<TableScore>> {
        let k = self.n_text + self.n_motion;
        if k < 2 {
            return Err(invalid!("score file needs at least 2 tokens"));
        }
        if k > STRATIFIED_LIMIT {
            return Err(Error::Size(format!("score file over {k} tokens")));
        }
        let mut table = vec![f64::NAN; 1 << k];
        let mut seen = HashSet::new();
        for e in &self.scores {
            if e.subset.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid!("subset {:?} is not a sorted index list", e.subset));
            }
            if let Some(&bad) = e.subset.iter().find(|&&t| t >= k) {
                return Err(invalid!("subset index {bad} outside {k} tokens"));
            }
            let mask = e.subset.iter().fold(0usize, |m, &t| m | 1 << t);
            if !seen.insert(mask) {
                return Err(invalid!("subset {:?} listed twice", e.subset));
            }
            table[mask] = e.value;
        }
        if seen.len() != 1 << k {
            return Err(invalid!(
                "score file defines {} of {} subsets",
                seen.len(),
                1u64 << k
            ));
        }
        Ok(TokenUniverse::new(
            self.n_text,
            self.n_motion,
            TableScore::new(k, table)?,
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(s: &[usize]) -> f64 {
        (s.len() * s.len()) as f64
    }

    #[test]
    fn pmf_small_cases() {
        assert_eq!(prefix_length_pmf(2).unwrap().pmf, vec![1.0]);
        let p = prefix_length_pmf(4).unwrap().pmf;
        let want = [0.5, 1.0 / 3.0, 1.0 / 6.0];
        p.iter()
            .zip(want)
            .for_each(|(a, b)| assert!((a - b).abs() < 1e-15));
        for k in 2..40 {
            let p = prefix_length_pmf(k).unwrap().pmf;
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.windows(2).all(|w| w[0] >= w[1]));
        }
        assert!(prefix_length_pmf(1).is_err());
    }

    #[test]
    fn additive_and_square_closed_forms() {
        let vals = [0.3, -1.1];
        let additive = move |s: &[usize]| s.iter().map(|&t| vals[t]).sum::<f64>();
        let u = TokenUniverse::new(1, 1, additive);
        assert_eq!(sti_exact_permutation(&u, 0, 1).unwrap(), 0.0);
        let u = TokenUniverse::new(1, 1, square);
        assert_eq!(sti_exact_permutation(&u, 0, 1).unwrap(), 2.0);
        assert_eq!(sti_exact_stratified(&u, 0, 1).unwrap(), 2.0);
        let u = TokenUniverse::new(1, 2, square);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!((sti_exact_permutation(&u, a, b).unwrap() - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_score_has_no_interaction() {
        let u = TokenUniverse::new(3, 4, |_: &[usize]| 0.7);
        assert_eq!(sti_exact_stratified(&u, 1, 5).unwrap(), 0.0);
    }

    #[test]
    fn guards() {
        let u = TokenUniverse::new(5, 4, square);
        assert!(matches!(
            sti_exact_permutation(&u, 0, 5),
            Err(Error::Size(_))
        ));
        let u = TokenUniverse::new(11, 10, square);
        assert!(matches!(
            sti_exact_stratified(&u, 0, 12),
            Err(Error::Size(_))
        ));
        let u = TokenUniverse::new(1, 1, square);
        assert!(sti_monte_carlo(&u, &[], 4, 0).is_err());
        assert!(sti_exact_stratified(&u, 0, 0).is_err());
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let u = TokenUniverse::new(2, 3, |s: &[usize]| {
            s.iter().map(|&t| (t as f64).sin()).product::<f64>()
        });
        let a = sti_monte_carlo(&u, &[(0, 1), (1, 2)], 1, 42).unwrap();
        let b = sti_monte_carlo(&u, &[(1, 2), (0, 1)], 1, 42).unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
        assert_eq!(a[0].stderr, 0.0);
    }

    #[test]
    fn distributions_closed_forms() {
        let g = StiGrid::new(2, 3, vec![0.4; 6]).unwrap();
        let d = sti_distributions(&g).unwrap();
        d.m2t
            .iter()
            .flatten()
            .for_each(|v| assert!((v - 0.5).abs() < 1e-15));
        d.t2m
            .iter()
            .flatten()
            .for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        let g = StiGrid::new(1, 2, vec![0.0, 2f64.ln()]).unwrap();
        let d = sti_distributions(&g).unwrap();
        assert!((d.t2m[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.t2m[0][1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.m2t, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn score_file_validation() {
        let u = TokenUniverse::new(1, 2, square);
        let mut file = ScoreFile::from_universe(&u).unwrap();
        let back = file.clone().into_universe().unwrap();
        assert_eq!(sti_exact_stratified(&back, 0, 1).unwrap(), 2.0);
        file.scores.pop();
        assert!(file.clone().into_universe().is_err());
        file.scores.push(ScoreEntry {
            subset: vec![2, 1],
            value: 0.0,
        });
        assert!(file.into_universe().is_err());
    }
}
