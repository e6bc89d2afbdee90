//! Central finite-difference checks for every differentiable op and for the
//! composed training loss. Shared by the acceptance suite.

use pst_core::corpus::{compose_sequence, Archetype, CorpusSample};
use pst_core::losses::{
    info_nce, self_distillation, sti_distillation, total_loss, LossConfig, LossTerms,
};
use pst_core::model::{Model, ModelConfig, Pyramid, Stage};
use pst_core::tensor::gradcheck::check_gradients;
use pst_core::tensor::Tensor;
use pst_core::trainer::{batch_losses, init_model, teacher_distributions, PairTeacher};
use pst_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
}

/// Random values bounded away from zero, so kinks stay out of reach of `h`.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::param(v, shape).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate carries a distinct gradient.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = Tensor::new(
        (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        y.shape(),
    )?;
    Ok(y.mul(&w)?.sum())
}

type Op = fn(&[Tensor]) -> Result<Tensor>;

fn check_op(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: Op) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let r = check_gradients(&inputs, |x| project(&op(x)?, seed), H, None, seed).unwrap();
        worst = worst.max(r.max_relative_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:.3e}");
}

pub fn binary_ops() {
    check_op(
        "matmul",
        |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4, 2], -1.0, 1.0)],
        |x| x[0].matmul(&x[1]),
    );
    check_op(
        "matmul_nt",
        |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[5, 4], -1.0, 1.0)],
        |x| x[0].matmul_nt(&x[1]),
    );
    check_op(
        "add",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| x[0].add(&x[1]),
    );
    check_op(
        "sub",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| x[0].sub(&x[1]),
    );
    check_op(
        "mul",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| x[0].mul(&x[1]),
    );
    check_op(
        "add_row",
        |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4], -1.0, 1.0)],
        |x| x[0].add_row(&x[1]),
    );
    check_op(
        "mul_col",
        |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3], -1.0, 1.0)],
        |x| x[0].mul_col(&x[1]),
    );
}

pub fn elementwise_ops() {
    check_op(
        "scale",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| Ok(x[0].scale(-1.7)),
    );
    check_op(
        "add_scalar",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| Ok(x[0].add_scalar(0.3)),
    );
    check_op(
        "exp",
        |r| vec![rand_t(r, &[2, 3], -2.0, 2.0)],
        |x| Ok(x[0].exp()),
    );
    check_op(
        "log",
        |r| vec![rand_t(r, &[2, 3], 0.2, 3.0)],
        |x| Ok(x[0].log()),
    );
    check_op("relu", |r| vec![off_zero(r, &[3, 4])], |x| Ok(x[0].relu()));
    check_op(
        "gelu",
        |r| vec![rand_t(r, &[3, 4], -3.0, 3.0)],
        |x| Ok(x[0].gelu()),
    );
}

pub fn reductions() {
    check_op(
        "sum",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| Ok(x[0].sum()),
    );
    check_op(
        "mean",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0)],
        |x| Ok(x[0].mean()),
    );
    for axis in 0..3 {
        let op: Op = match axis {
            0 => |x| x[0].sum_axis(0),
            1 => |x| x[0].sum_axis(1),
            _ => |x| x[0].sum_axis(2),
        };
        check_op("sum_axis", |r| vec![rand_t(r, &[2, 3, 4], -1.0, 1.0)], op);
    }
    check_op(
        "mean_axis",
        |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)],
        |x| x[0].mean_axis(1),
    );
}

pub fn normalisers() {
    check_op(
        "softmax rows",
        |r| vec![rand_t(r, &[3, 5], -2.0, 2.0)],
        |x| x[0].softmax(1),
    );
    check_op(
        "softmax cols",
        |r| vec![rand_t(r, &[3, 5], -2.0, 2.0)],
        |x| x[0].softmax(0),
    );
    check_op(
        "log_softmax rows",
        |r| vec![rand_t(r, &[3, 5], -2.0, 2.0)],
        |x| x[0].log_softmax(1),
    );
    check_op(
        "log_softmax cols",
        |r| vec![rand_t(r, &[3, 5], -2.0, 2.0)],
        |x| x[0].log_softmax(0),
    );
    check_op(
        "layer_norm",
        |r| {
            vec![
                rand_t(r, &[3, 6], -2.0, 2.0),
                rand_t(r, &[6], 0.5, 1.5),
                rand_t(r, &[6], -0.5, 0.5),
            ]
        },
        |x| x[0].layer_norm(&x[1], &x[2], 1e-5),
    );
    check_op(
        "l2_normalize_rows",
        |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)],
        |x| x[0].l2_normalize_rows(1e-12),
    );
}

pub fn structural_ops() {
    check_op(
        "conv2d 3x3",
        |r| {
            vec![
                rand_t(r, &[2, 4, 5], -1.0, 1.0),
                rand_t(r, &[3, 2, 3, 3], -1.0, 1.0),
                rand_t(r, &[3], -1.0, 1.0),
            ]
        },
        |x| x[0].conv2d(&x[1], Some(&x[2])),
    );
    check_op(
        "conv2d 3x1",
        |r| {
            vec![
                rand_t(r, &[4, 6, 1], -1.0, 1.0),
                rand_t(r, &[4, 4, 3, 1], -1.0, 1.0),
            ]
        },
        |x| x[0].conv2d(&x[1], None),
    );
    check_op(
        "concat rows",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[1, 3], -1.0, 1.0)],
        |x| Tensor::concat(x, 0),
    );
    check_op(
        "concat cols",
        |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[2, 2], -1.0, 1.0)],
        |x| Tensor::concat(x, 1),
    );
    check_op(
        "reshape",
        |r| vec![rand_t(r, &[2, 6], -1.0, 1.0)],
        |x| x[0].reshape(&[3, 4]),
    );
    check_op(
        "transpose",
        |r| vec![rand_t(r, &[2, 5], -1.0, 1.0)],
        |x| x[0].transpose(),
    );
    check_op(
        "gather_rows",
        |r| vec![rand_t(r, &[4, 3], -1.0, 1.0)],
        |x| x[0].gather_rows(&[3, 0, 3, 1]),
    );
    check_op(
        "slice_rows",
        |r| vec![rand_t(r, &[5, 3], -1.0, 1.0)],
        |x| x[0].slice_rows(1, 3),
    );
    check_op(
        "slice_cols",
        |r| vec![rand_t(r, &[3, 5], -1.0, 1.0)],
        |x| x[0].slice_cols(2, 2),
    );
}

/// Redraws every weight matrix and kernel at a fan-scaled spread, clear of
/// the near-constant LayerNorm rows a fresh model produces.
fn respread(model: &Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in model.named_parameters() {
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            continue;
        }
        let a = (6.0 / (shape[0] + t.numel() / shape[0]) as f64).sqrt();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-a..a));
    }
}

fn tiny_samples(seed: u64) -> Vec<CorpusSample> {
    let chains = [
        vec![Archetype::WalkForward, Archetype::StandStill],
        vec![Archetype::WaveLeftArm],
        vec![Archetype::Jump, Archetype::Turn, Archetype::Run],
    ];
    chains
        .iter()
        .enumerate()
        .map(|(i, c)| compose_sequence(c, seed * 10 + i as u64).unwrap())
        .collect()
}

/// The full objective under stop-gradient semantics: clusters held fixed,
/// teachers computed once, and the detached joint-stage target of the
/// self-distillation term frozen at its starting value.
fn composed_loss(
    model: &Model,
    pyramids: &[Pyramid],
    teachers: &[PairTeacher],
    frozen_jnt: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let tau = cfg.temperature;
    let s_jnt = model.similarity_matrix(pyramids, Stage::Jnt)?;
    let s_sgm = model.similarity_matrix(pyramids, Stage::Sgm)?;
    let s_hlt = model.similarity_matrix(pyramids, Stage::Hlt)?;
    let sd = |stage: Stage| -> Result<Tensor> {
        let mut acc = Tensor::scalar(0.0);
        for t in teachers {
            let e = pyramids[t.index].stage(stage);
            let target = if stage == Stage::Jnt { &t.jnt } else { &t.sgm };
            acc = acc.add(&sti_distillation(
                target,
                &model.sti_head_forward(&e.text, &e.motion)?,
            )?)?;
        }
        Ok(acc.scale(1.0 / teachers.len() as f64))
    };
    let terms = LossTerms {
        jnt: info_nce(&s_jnt, tau)?,
        sgm: info_nce(&s_sgm, tau)?,
        hlt: info_nce(&s_hlt, tau)?,
        sd_jnt: sd(Stage::Jnt)?,
        sd_sgm: sd(Stage::Sgm)?,
        d: self_distillation(frozen_jnt, &s_sgm, tau)?,
    };
    Ok(total_loss(&terms, cfg)?.0)
}

pub fn full_loss() {
    let base = ModelConfig {
        dim: 8,
        heads: 2,
        encoder_depth: 1,
        n_p: 8,
        stride: 8,
        sti_channels: 8,
        sti_heads: 2,
        ..ModelConfig::default()
    };
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..SEEDS {
        let samples = tiny_samples(seed);
        let model = init_model(&base, &samples, &samples, seed).unwrap();
        respread(&model, seed);
        let inputs: Vec<_> = samples
            .iter()
            .map(|s| model.prepare(&s.text, &s.motion).unwrap())
            .collect();
        let plans: Vec<_> = inputs
            .iter()
            .map(|x| model.forward(x, None).unwrap().plan())
            .collect();
        let forward = || -> Result<Vec<Pyramid>> {
            inputs
                .iter()
                .zip(&plans)
                .map(|(x, p)| model.forward(x, Some(p)))
                .collect()
        };
        let start = forward().unwrap();
        let teachers: Vec<PairTeacher> = [0usize, 2]
            .iter()
            .map(|&index| {
                let (j, s) = (
                    start[index].stage(Stage::Jnt),
                    start[index].stage(Stage::Sgm),
                );
                PairTeacher {
                    index,
                    jnt: teacher_distributions(&model, &j.text, &j.motion, 8, seed).unwrap(),
                    sgm: teacher_distributions(&model, &s.text, &s.motion, 8, seed + 1).unwrap(),
                }
            })
            .collect();
        let frozen = model
            .similarity_matrix(&start, Stage::Jnt)
            .unwrap()
            .detach();
        let params: Vec<Tensor> = model
            .named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect();

        // The composed loss is the trainer's loss, value and gradient alike.
        let (trainer_loss, _) = batch_losses(&model, &start, &teachers, &cfg).unwrap();
        let composed = composed_loss(&model, &start, &teachers, &frozen, &cfg).unwrap();
        assert!((trainer_loss.item() - composed.item()).abs() < 1e-12);
        params.iter().for_each(Tensor::zero_grad);
        trainer_loss.backward().unwrap();
        let g_trainer: Vec<Vec<f64>> = params.iter().map(Tensor::grad_or_zeros).collect();
        params.iter().for_each(Tensor::zero_grad);
        composed.backward().unwrap();
        for (p, g) in params.iter().zip(&g_trainer) {
            assert!(p
                .grad_or_zeros()
                .iter()
                .zip(g)
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
        drop((start, trainer_loss, composed));

        let loss = |_: &[Tensor]| composed_loss(&model, &forward()?, &teachers, &frozen, &cfg);
        let r = check_gradients(&params, loss, H, Some(2), seed).unwrap();
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
    }
    assert!(
        worst < TOL,
        "full loss: max relative error {worst:.3e} over {checked} coordinates"
    );
}
