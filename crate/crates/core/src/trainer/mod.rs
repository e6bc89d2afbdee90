//! Training loop with separate optimizers for the retrieval model and the
//! STI head, plus retrieval, alignment and heatmap evaluation.

mod eval;

pub use eval::{
    align_tokens, alignment_accuracy, evaluate_alignment, evaluate_retrieval, export_heatmaps,
    holistic_similarity, rank_metrics, ranks, retrieval_from_similarity, sample_alignment,
    AlignmentGroup, AlignmentReport, Direction, Heatmap, Protocol, RetrievalReport, SmallBatch,
    RECALL_RANKS,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary, CorpusSample};
use crate::error::{invalid, Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig, LossTerms};
use crate::model::{Model, ModelConfig, Pyramid, SampleInput, Stage};
use crate::motion_patch::fit_zscore;
use crate::sti::{sti_distributions, sti_monte_carlo_grid, StiDistributions, TokenUniverse};
use crate::tensor::{adam_step, no_grad, AdamState, Tensor};

/// RNG stream ids, one per purpose.
const STREAM_DATA: u64 = 1;
const STREAM_TEACHER: u64 = 2;
pub(crate) const STREAM_CHUNKS: u64 = 3;

pub const LOSS_LOG: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_model: f64,
    pub lr_sti_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mc_permutations: usize,
    pub mc_pair_subsample: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 50,
            lr_model: 1e-4,
            lr_sti_head: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            mc_permutations: 16,
            mc_pair_subsample: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be at least 2"));
        }
        if self.epochs == 0 || self.mc_permutations == 0 || self.mc_pair_subsample == 0 {
            return Err(invalid!(
                "epochs, mc_permutations and mc_pair_subsample must be positive"
            ));
        }
        let rates = [self.lr_model, self.lr_sti_head];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid!("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Builds a fresh model whose vocabulary covers `corpus` and whose
/// normalisation statistics are fitted on `train`.
pub fn init_model(
    base: &ModelConfig,
    corpus: &[CorpusSample],
    train: &[CorpusSample],
    seed: u64,
) -> Result<Model> {
    if train.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    let motions: Vec<_> = train.iter().map(|s| s.motion.clone()).collect();
    let config = ModelConfig {
        vocabulary: build_vocabulary(corpus),
        norm_stats: fit_zscore(&motions, base.n_p)?,
        ..base.clone()
    };
    Model::new(config, seed)
}

pub fn prepare_all(model: &Model, samples: &[CorpusSample]) -> Result<Vec<SampleInput>> {
    samples
        .iter()
        .map(|s| model.prepare(&s.text, &s.motion))
        .collect()
}

/// Teacher distributions for one pair at the joint and segment stages.
#[derive(Debug, Clone)]
pub struct PairTeacher {
    pub index: usize,
    pub jnt: StiDistributions,
    pub sgm: StiDistributions,
}

/// Monte-Carlo STI teacher on detached tokens.
pub fn teacher_distributions(
    model: &Model,
    text: &Tensor,
    motion: &Tensor,
    permutations: usize,
    seed: u64,
) -> Result<StiDistributions> {
    let scorer = model.subset_scorer(&text.detach(), &motion.detach())?;
    let u = TokenUniverse::new(text.rows(), motion.rows(), scorer);
    sti_distributions(&sti_monte_carlo_grid(&u, permutations, seed)?)
}

/// All loss terms for a batch whose forward passes are in `pyramids`.
/// `teachers` name the batch positions that receive STI distillation.
pub fn batch_losses(
    model: &Model,
    pyramids: &[Pyramid],
    teachers: &[PairTeacher],
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let tau = cfg.temperature;
    let s_jnt = model.similarity_matrix(pyramids, Stage::Jnt)?;
    let s_sgm = model.similarity_matrix(pyramids, Stage::Sgm)?;
    let s_hlt = model.similarity_matrix(pyramids, Stage::Hlt)?;
    let mut sd = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
    if !teachers.is_empty() {
        for (k, stage) in [Stage::Jnt, Stage::Sgm].into_iter().enumerate() {
            let mut acc = Vec::with_capacity(teachers.len());
            for t in teachers {
                let e = pyramids[t.index].stage(stage);
                let logits = model.sti_head_forward(&e.text, &e.motion)?;
                let target = if stage == Stage::Jnt { &t.jnt } else { &t.sgm };
                acc.push(losses::sti_distillation(target, &logits)?);
            }
            let mut sum = acc[0].clone();
            for a in &acc[1..] {
                sum = sum.add(a)?;
            }
            sd[k] = sum.scale(1.0 / acc.len() as f64);
        }
    }
    let [sd_jnt, sd_sgm] = sd;
    let terms = LossTerms {
        jnt: losses::info_nce(&s_jnt, tau)?,
        sgm: losses::info_nce(&s_sgm, tau)?,
        hlt: losses::info_nce(&s_hlt, tau)?,
        sd_jnt,
        sd_sgm,
        d: losses::self_distillation(&s_jnt, &s_sgm, tau)?,
    };
    losses::total_loss(&terms, cfg)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<LossBreakdown>,
    pub steps: usize,
}

/// Training state: the model plus both optimizers.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub loss: LossConfig,
    model_params: Vec<Tensor>,
    head_params: Vec<Tensor>,
    model_opt: AdamState,
    head_opt: AdamState,
    teacher_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let model_params: Vec<Tensor> = model
            .model_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let head_params: Vec<Tensor> = model
            .head_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let model_opt = AdamState::new(&model_params, config.lr_model, config.beta1, config.beta2);
        let head_opt = AdamState::new(&head_params, config.lr_sti_head, config.beta1, config.beta2);
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(config.seed);
        teacher_rng.set_stream(STREAM_TEACHER);
        Ok(Self {
            model,
            config,
            loss,
            model_params,
            head_params,
            model_opt,
            head_opt,
            teacher_rng,
            step: 0,
        })
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &[&SampleInput]) -> Result<LossBreakdown> {
        if batch.len() < 2 {
            return Err(invalid!("a batch needs at least 2 samples"));
        }
        for p in self.model_params.iter().chain(&self.head_params) {
            p.clear_grad();
        }
        let pyramids = batch
            .iter()
            .map(|x| self.model.forward(x, None))
            .collect::<Result<Vec<_>>>()?;
        let teachers = if self.loss.lambda_s > 0.0 {
            let n = self.config.mc_pair_subsample.min(batch.len());
            let mut picked = sample(&mut self.teacher_rng, batch.len(), n).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|index| {
                    let seed: u64 = self.teacher_rng.gen();
                    let p = &pyramids[index];
                    let perms = self.config.mc_permutations;
                    Ok(PairTeacher {
                        index,
                        jnt: teacher_distributions(
                            &self.model,
                            &p.jnt.text,
                            &p.jnt.motion,
                            perms,
                            seed,
                        )?,
                        sgm: teacher_distributions(
                            &self.model,
                            &p.sgm.text,
                            &p.sgm.motion,
                            perms,
                            seed ^ 1,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (loss, breakdown) = batch_losses(&self.model, &pyramids, &teachers, &self.loss)?;
        loss.backward().map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", self.step)),
            other => other,
        })?;
        adam_step(&self.model_params, &mut self.model_opt)?;
        adam_step(&self.head_params, &mut self.head_opt)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs all epochs. With `out`, writes the loss CSV and a checkpoint
    /// after every epoch.
    pub fn fit(&mut self, train: &[SampleInput], out: Option<&Path>) -> Result<TrainOutcome> {
        if train.len() < 2 {
            return Err(invalid!(
                "training split needs at least 2 samples, got {}",
                train.len()
            ));
        }
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOSS_LOG);
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut data_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        data_rng.set_stream(STREAM_DATA);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let bs = self.config.batch_size.min(train.len());
        let mut history = Vec::new();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut data_rng);
            for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
                let batch: Vec<&SampleInput> = chunk.iter().map(|&i| &train[i]).collect();
                let b = self.step(&batch)?;
                if let Some((f, path)) = log.as_mut() {
                    writeln!(f, "{}", b.csv_row(history.len()))
                        .map_err(|e| Error::io(&*path, e))?;
                }
                history.push(b);
            }
            if let Some(dir) = out {
                let meta = serde_json::json!({
                    "epoch": epoch + 1,
                    "train": self.config,
                    "loss": self.loss,
                });
                self.model.save(&dir.join(CHECKPOINT_DIR), meta)?;
            }
        }
        Ok(TrainOutcome {
            steps: history.len(),
            losses: history,
        })
    }
}

/// Convenience wrapper: fresh model, full training run.
pub fn train(
    model: Model,
    config: &TrainConfig,
    loss: &LossConfig,
    train_set: &[CorpusSample],
    out: Option<&Path>,
) -> Result<(Model, TrainOutcome)> {
    let inputs = prepare_all(&model, train_set)?;
    let mut trainer = Trainer::new(model, config.clone(), *loss)?;
    let outcome = trainer.fit(&inputs, out)?;
    Ok((trainer.model, outcome))
}

/// Forward passes without graph recording.
pub fn embed_all(model: &Model, inputs: &[SampleInput]) -> Result<Vec<Pyramid>> {
    no_grad(|| inputs.iter().map(|x| model.forward(x, None)).collect())
}
