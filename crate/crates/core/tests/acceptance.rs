//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr,
//! bypassing libtest's capture, and panics when it fails.
//!
//! Criteria run one at a time so the end-to-end wall clock is not shared
//! with anything else.

#[path = "support/gradients.rs"]
mod gradients;

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pst_core::corpus::{
    generate_corpus, read_dataset, split_of, write_dataset, Split, SplitRatios,
};
use pst_core::knn_dpc::{center_count, cluster};
use pst_core::losses::{
    info_nce, kl_divergence, self_distillation, sti_distillation, student_distributions, LossConfig,
};
use pst_core::model::{Model, ModelConfig, Stage};
use pst_core::motion_patch::{
    build_patches, fit_zscore, interpolate_chain, window_count, MotionSequence,
};
use pst_core::sti::{
    prefix_length_pmf, sti_exact_permutation, sti_exact_stratified, sti_monte_carlo, ScoreFn,
    TableScore, TokenUniverse,
};
use pst_core::tensor::Tensor;
use pst_core::trainer::{
    evaluate_alignment, evaluate_retrieval, export_heatmaps, init_model, train, Direction, Heatmap,
    Protocol, SmallBatch, TrainConfig,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// Runs `check` alone, prints its verdict and re-raises any failure.
fn criterion(name: &str, check: impl FnOnce() -> String) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    match catch_unwind(AssertUnwindSafe(check)) {
        Ok(detail) => report(&format!(
            "PASS  {name}: {detail} ({:.1}s)",
            start.elapsed().as_secs_f64()
        )),
        Err(payload) => {
            let why = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report(&format!("FAIL  {name}: {why}"));
            resume_unwind(payload);
        }
    }
}

fn random_table(rng: &mut ChaCha8Rng, k: usize) -> TableScore {
    TableScore::new(
        k,
        (0..1usize << k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn sti_oracle_equivalence() {
    criterion("STI oracle equivalence", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut functions, mut worst) = (0, 0.0f64);
        for round in 0..30 {
            for (nt, nm) in [(1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (2, 4)] {
                let u = TokenUniverse::new(nt, nm, random_table(&mut rng, nt + nm));
                for a in 0..u.len() {
                    for b in a + 1..u.len() {
                        let p = sti_exact_permutation(&u, a, b).unwrap();
                        let s = sti_exact_stratified(&u, a, b).unwrap();
                        let rel = (p - s).abs() / p.abs().max(s.abs()).max(f64::MIN_POSITIVE);
                        if p != s {
                            worst = worst.max(rel);
                        }
                        assert!(
                            rel <= 1e-12,
                            "round {round}, K={}, pair ({a},{b}): {p} vs {s}",
                            nt + nm
                        );
                    }
                }
                functions += 1;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        assert!(functions >= 100);
        assert!(secs < 30.0, "took {secs:.1}s");
        format!("{functions} score functions, K <= 6, worst relative gap {worst:.1e}")
    });
}

/// Records the prefix length of every second difference the estimator asks for.
struct PrefixProbe {
    k: usize,
    counts: Mutex<Vec<usize>>,
}

impl ScoreFn for PrefixProbe {
    fn score(&self, _: &[usize]) -> f64 {
        0.0
    }

    fn second_difference(&self, prefix: &[usize], _: usize, _: usize) -> f64 {
        self.counts.lock().unwrap()[prefix.len()] += 1;
        0.0
    }
}

#[test]
fn prefix_length_law() {
    criterion("prefix-length law", || {
        let n = 100_000;
        let mut gaps = Vec::new();
        for k in [3usize, 5, 8] {
            let probe = PrefixProbe {
                k,
                counts: Mutex::new(vec![0; k - 1]),
            };
            let u = TokenUniverse::new(1, k - 1, probe);
            sti_monte_carlo(&u, &[(0, k / 2 - 1)], n, 5).unwrap();
            let probe = u.score_fn();
            let counts = probe.counts.lock().unwrap();
            assert_eq!(counts.iter().sum::<usize>(), n);
            let pmf = prefix_length_pmf(probe.k).unwrap().pmf;
            let tv = 0.5
                * counts
                    .iter()
                    .zip(&pmf)
                    .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
                    .sum::<f64>();
            assert!(tv < 0.01, "K={k}: total variation {tv}");
            gaps.push(format!("K={k} TV={tv:.4}"));
        }
        gaps.join(", ")
    });
}

#[test]
fn monte_carlo_consistency() {
    criterion("Monte-Carlo consistency", || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut pairs_checked, mut worst) = (0, 0.0f64);
        for (nt, nm) in [(2, 2), (3, 3), (3, 5), (4, 4)] {
            let u = TokenUniverse::new(nt, nm, random_table(&mut rng, nt + nm));
            let pairs: Vec<(usize, usize)> =
                (0..nt).flat_map(|i| (0..nm).map(move |j| (i, j))).collect();
            for e in sti_monte_carlo(&u, &pairs, 50_000, 3).unwrap() {
                let exact = sti_exact_stratified(&u, e.text, u.motion_index(e.motion)).unwrap();
                let gap = (e.value - exact).abs();
                let allowed = (3.0 * e.stderr).max(1e-2);
                assert!(gap <= allowed, "K={}, {e:?}: exact {exact}", nt + nm);
                worst = worst.max(gap / allowed);
                pairs_checked += 1;
            }
        }
        // Dyadic weights keep every partial sum exact, so the additive
        // interaction is exactly zero rather than rounding noise.
        let w: Vec<f64> = (0..6)
            .map(|_| rng.gen_range(-1024i32..1024) as f64 / 512.0)
            .collect();
        let additive = TableScore::from_fn(6, |s| s.iter().map(|&i| w[i]).sum()).unwrap();
        let u = TokenUniverse::new(3, 3, additive);
        let all: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        for e in sti_monte_carlo(&u, &all, 50_000, 4).unwrap() {
            assert!(e.value.abs() <= 3.0 * e.stderr, "additive {e:?}");
        }
        format!("{pairs_checked} pairs on K <= 8, worst gap {worst:.2} of tolerance; additive |phi| = 0")
    });
}

#[test]
fn gradient_suite() {
    criterion("gradient suite", || {
        gradients::binary_ops();
        gradients::elementwise_ops();
        gradients::reductions();
        gradients::normalisers();
        gradients::structural_ops();
        gradients::full_loss();
        "all ops and the full objective within 1e-4 relative on 20 seeds, h = 1e-5".into()
    });
}

#[test]
fn analytic_loss_values() {
    criterion("analytic loss values", || {
        for b in [2usize, 4, 8] {
            let s = Tensor::new(vec![0.37; b * b], &[b, b]).unwrap();
            let l = info_nce(&s, 0.1).unwrap().item();
            assert!((l - 2.0 * (b as f64).ln()).abs() < 1e-9, "B={b}: {l}");
        }
        let p = [0.1, 0.2, 0.7];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let half = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-9, "{half}");

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits =
            Tensor::new((0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(), &[3, 4]).unwrap();
        let teacher = student_distributions(&logits).unwrap();
        let sd = sti_distillation(&teacher, &logits).unwrap().item();
        assert!(sd.abs() < 1e-12, "L_SD {sd}");
        let sim =
            Tensor::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[4, 4]).unwrap();
        let d = self_distillation(&sim, &sim, 0.1).unwrap().item();
        assert!(d.abs() < 1e-12, "L_D {d}");
        "InfoNCE = 2 ln B, KL(p||p) = 0, KL([1,0]||[1/2,1/2]) = ln 2, L_SD = L_D = 0 at equality"
            .into()
    });
}

#[test]
fn clustering_laws() {
    criterion("clustering laws", || {
        for n in 1..=256usize {
            for ratio in [0.1, 0.25, 0.5, 0.75] {
                assert_eq!(
                    center_count(n, ratio),
                    ((ratio * n as f64).round() as usize).max(1)
                );
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [1usize, 2, 7, 33, 100, 256] {
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            for ratio in [0.1, 0.25, 0.5, 0.75] {
                let c = cluster(&pts, ratio, None, None).unwrap();
                assert_eq!(
                    c.len(),
                    ((ratio * n as f64).round() as usize).max(1),
                    "n={n} ratio={ratio}"
                );
                let mut all: Vec<usize> = c.provenance.iter().flatten().copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>(), "partition n={n}");
                let again = cluster(&pts, ratio, None, None).unwrap();
                assert_eq!(
                    (&c.centers, &c.assignment, &c.provenance),
                    (&again.centers, &again.assignment, &again.provenance)
                );
            }
        }
        // Two tight blobs, interleaved in index order.
        let blobs: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let base = if i % 2 == 0 { 0.0 } else { 10.0 };
                vec![
                    base + rng.gen_range(-0.5..0.5),
                    base + rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let c = cluster(&blobs, 0.1, None, None).unwrap();
        let evens: Vec<usize> = (0..20).step_by(2).collect();
        let odds: Vec<usize> = (1..20).step_by(2).collect();
        assert_eq!(c.provenance, vec![evens, odds]);
        "centre-count law on N <= 256, partition, determinism, two-blob fixture exact".into()
    });
}

#[test]
fn motion_patch_laws() {
    criterion("MotionPatch laws", || {
        let corpus = generate_corpus(24, 6, SplitRatios::default()).unwrap();
        let motions: Vec<MotionSequence> = corpus.iter().map(|s| s.motion.clone()).collect();
        let n_p = 16;
        let stats = fit_zscore(&motions, n_p).unwrap();
        for m in motions.iter().take(6) {
            for stride in [1, 5, 8, 16] {
                let l = m.num_frames();
                let g = build_patches(m, n_p, stride, &stats).unwrap();
                assert_eq!(g.n_windows, (l - n_p) / stride + 1);
                assert_eq!(window_count(l, n_p, stride), Some(g.n_windows));
                assert_eq!(g.patches.len(), g.n_windows * 5 * 3 * n_p * n_p);
            }
        }
        assert_eq!(window_count(15, 16, 8), None);

        let mut values: [Vec<f64>; 3] = Default::default();
        for m in &motions {
            for frame in &m.frames {
                for chain in m.parts.chains() {
                    let pos: Vec<[f64; 3]> = chain.iter().map(|&j| frame[j]).collect();
                    let pts = interpolate_chain(&pos, n_p).unwrap();
                    assert_eq!(pts[0], pos[0]);
                    assert_eq!(pts[n_p - 1], pos[pos.len() - 1]);
                    for p in &pts {
                        let z = stats.apply(p);
                        (0..3).for_each(|c| values[c].push(z[c]));
                    }
                }
            }
        }
        let mut summary = Vec::new();
        for (c, v) in values.iter().enumerate() {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "channel {c} std {std}");
            summary.push(format!("{mean:+.0e}/{std:.6}"));
        }
        format!(
            "window formula, exact endpoints, z-scored mean/std per channel {}",
            summary.join(" ")
        )
    });
}

#[derive(Debug, Clone, Copy)]
struct RunMetrics {
    t2m_r1: f64,
    m2t_r1: f64,
    t2m_medr: f64,
    m2t_medr: f64,
    align_two: f64,
    secs: f64,
}

impl RunMetrics {
    fn mean_r1(&self) -> f64 {
        0.5 * (self.t2m_r1 + self.m2t_r1)
    }
}

/// Default-configuration run (256 pairs, Small protocol on the test split),
/// cached so the ablation can reuse the end-to-end run.
fn run(seed: u64, lambda_s: f64, lambda_d: f64) -> RunMetrics {
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64, u64), RunMetrics>>> = OnceLock::new();
    let key = (seed, lambda_s.to_bits(), lambda_d.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return *m;
    }
    let start = Instant::now();
    let corpus = generate_corpus(256, seed, SplitRatios::default()).unwrap();
    let train_set = split_of(&corpus, Split::Train);
    let test = split_of(&corpus, Split::Test);
    let model = init_model(&ModelConfig::default(), &corpus, &train_set, seed).unwrap();
    let train_cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        lambda_s,
        lambda_d,
        ..LossConfig::default()
    };
    let (model, _) = train(model, &train_cfg, &loss, &train_set, None).unwrap();
    let reports =
        evaluate_retrieval(&model, &test, Protocol::Small, &SmallBatch::default()).unwrap();
    let alignment = evaluate_alignment(&model, &test).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let small = |d: Direction| {
        reports
            .iter()
            .find(|r| r.direction == d && r.protocol == Protocol::Small)
            .unwrap()
    };
    let (t2m, m2t) = (small(Direction::T2m), small(Direction::M2t));
    let m = RunMetrics {
        t2m_r1: t2m.r1,
        m2t_r1: m2t.r1,
        t2m_medr: t2m.medr,
        m2t_medr: m2t.medr,
        align_two: alignment.group(2).map(|g| g.accuracy).unwrap_or(f64::NAN),
        secs,
    };
    cache.lock().unwrap().insert(key, m);
    m
}

#[test]
fn end_to_end_synthetic_retrieval() {
    criterion("end-to-end synthetic retrieval", || {
        let d = LossConfig::default();
        let m = run(0, d.lambda_s, d.lambda_d);
        let summary = format!(
            "t2m R@1 {:.2} MedR {:.1}, m2t R@1 {:.2} MedR {:.1}, 2-phrase alignment {:.1}%, {:.0}s",
            m.t2m_r1,
            m.t2m_medr,
            m.m2t_r1,
            m.m2t_medr,
            100.0 * m.align_two,
            m.secs
        );
        let ok = m.t2m_r1 >= 90.0
            && m.m2t_r1 >= 90.0
            && m.t2m_medr == 1.0
            && m.m2t_medr == 1.0
            && m.align_two >= 0.8
            && m.secs < 600.0;
        assert!(
            ok,
            "{summary} (need R@1 >= 90, MedR = 1, alignment >= 80%, < 600s)"
        );
        summary
    });
}

#[test]
fn ablation_direction() {
    criterion("ablation direction", || {
        let d = LossConfig::default();
        let mut lines = Vec::new();
        let mut violating_seeds = 0;
        for seed in 0..3 {
            let full = run(seed, d.lambda_s, d.lambda_d).mean_r1();
            let no_s = run(seed, 0.0, d.lambda_d).mean_r1();
            let no_d = run(seed, d.lambda_s, 0.0).mean_r1();
            if no_s > full + 2.0 || no_d > full + 2.0 {
                violating_seeds += 1;
            }
            lines.push(format!(
                "seed {seed}: full {full:.1}, no-S {no_s:.1}, no-D {no_d:.1}"
            ));
        }
        let summary = format!(
            "{} ({violating_seeds} seed(s) with an ablation ahead by > 2)",
            lines.join("; ")
        );
        assert!(violating_seeds <= 1, "{summary}");
        summary
    });
}

fn same_bytes(a: &Path, b: &Path) {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut other: Vec<_> = std::fs::read_dir(b)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    other.sort();
    assert_eq!(names, other);
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn format_round_trips() {
    criterion("format round-trips", || {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(16, 4, SplitRatios::default()).unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        write_dataset(&a, &corpus).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, corpus);
        write_dataset(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let base = ModelConfig {
            dim: 16,
            heads: 2,
            encoder_depth: 1,
            ..ModelConfig::default()
        };
        let model = init_model(&base, &corpus, &corpus, 4).unwrap();
        let (ca, cb) = (dir.path().join("ck_a"), dir.path().join("ck_b"));
        model.save(&ca, serde_json::json!({ "step": 3 })).unwrap();
        let (loaded, extra) = Model::load(&ca).unwrap();
        loaded.save(&cb, extra).unwrap();
        same_bytes(&ca, &cb);

        let h = export_heatmaps(&loaded, &corpus[0], Stage::Sgm).unwrap();
        let text = serde_json::to_string(&h).unwrap();
        let (ha, hb) = (dir.path().join("h_a.json"), dir.path().join("h_b.json"));
        std::fs::write(&ha, &text).unwrap();
        let parsed: Heatmap = serde_json::from_str(&std::fs::read_to_string(&ha).unwrap()).unwrap();
        assert_eq!(parsed, h);
        std::fs::write(&hb, serde_json::to_string(&parsed).unwrap()).unwrap();
        assert_eq!(std::fs::read(&ha).unwrap(), std::fs::read(&hb).unwrap());
        "dataset JSON, checkpoint directory and heatmap JSON byte-identical after write-read-write"
            .into()
    });
}
