//! `pst`: data generation, STI computation, training, evaluation and
//! heatmap export.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use pst_core::corpus::{
    generate_corpus, read_dataset, split_of, write_dataset, CorpusSample, Split, SplitRatios,
};
use pst_core::model::{Model, Stage};
use pst_core::sti::{sti_exact_stratified, sti_monte_carlo, ScoreFile, TableScore, TokenUniverse};
use pst_core::trainer::{
    evaluate_alignment, evaluate_retrieval, export_heatmaps, init_model, train, Protocol,
    RetrievalReport, SmallBatch, CHECKPOINT_DIR,
};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pst",
    version,
    about = "Pyramidal Shapley-Taylor motion-language alignment"
)]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        num_pairs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.75)]
        train: f64,
        #[arg(long, default_value_t = 0.125)]
        val: f64,
        #[arg(long, default_value_t = 0.125)]
        test: f64,
    },
    /// Shapley-Taylor interaction for (text, motion) pairs of a score table.
    Sti {
        #[arg(value_enum)]
        mode: StiMode,
        #[arg(long)]
        scores: PathBuf,
        /// `all`, or comma-separated `text:motion` pairs.
        #[arg(long, default_value = "all")]
        pairs: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Configuration override, `key=value` (repeatable).
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Retrieval and alignment metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::All)]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export similarity and STI heatmaps for one sample.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: usize,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StiMode {
    Exact,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    All,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Jnt,
    Sgm,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SEED") {
        Ok(s) => {
            Ok(Some(s.trim().parse().with_context(|| {
                format!("SEED={s:?} is not an integer")
            })?))
        }
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    Ok(seed.or(env_seed()?).unwrap_or(0))
}

fn parse_pairs(list: &str, n_text: usize, n_motion: usize) -> Result<Vec<(usize, usize)>> {
    if list.trim() == "all" {
        return Ok((0..n_text)
            .flat_map(|i| (0..n_motion).map(move |j| (i, j)))
            .collect());
    }
    list.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once(':')
                .with_context(|| format!("pair {p:?} is not text:motion"))?;
            let (i, j): (usize, usize) = (a.parse()?, b.parse()?);
            if i >= n_text || j >= n_motion {
                bail!("pair {i}:{j} outside a {n_text}x{n_motion} token grid");
            }
            Ok((i, j))
        })
        .collect()
}

fn run_sti(
    mode: StiMode,
    scores: &Path,
    pairs: &str,
    samples: usize,
    seed: Option<u64>,
) -> Result<()> {
    let u: TokenUniverse<TableScore> = ScoreFile::load(scores)?.into_universe()?;
    let pairs = parse_pairs(pairs, u.n_text(), u.n_motion())?;
    let rows: Vec<serde_json::Value> = match mode {
        StiMode::Exact => pairs
            .iter()
            .map(|&(i, j)| {
                let v = sti_exact_stratified(&u, i, u.motion_index(j))?;
                Ok(json!({ "text": i, "motion": j, "value": v }))
            })
            .collect::<Result<_>>()?,
        StiMode::Mc => sti_monte_carlo(&u, &pairs, samples, seed_or_env(seed)?)?
            .iter()
            .map(|e| json!({ "text": e.text, "motion": e.motion, "value": e.value, "stderr": e.stderr }))
            .collect(),
    };
    for r in &rows {
        eprintln!(
            "text {:>3}  motion {:>3}  phi {:.6}",
            r["text"],
            r["motion"],
            r["value"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let mode = match mode {
        StiMode::Exact => "exact",
        StiMode::Mc => "mc",
    };
    let out =
        json!({ "mode": mode, "n_text": u.n_text(), "n_motion": u.n_motion(), "pairs": rows });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn load_model(dir: &Path) -> Result<Model> {
    let dir = if dir.join("manifest.json").exists() {
        dir.to_path_buf()
    } else {
        dir.join(CHECKPOINT_DIR)
    };
    let (model, _) =
        Model::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(model)
}

fn sample_by_id<'a>(data: &'a [CorpusSample], id: usize) -> Result<&'a CorpusSample> {
    data.iter()
        .find(|s| s.id == id)
        .with_context(|| format!("no sample with id {id}"))
}

fn print_table(reports: &[RetrievalReport]) {
    eprintln!(
        "{:<5} {:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "dir", "proto", "R@1", "R@2", "R@3", "R@5", "R@10", "MedR"
    );
    for r in reports {
        let dir = serde_json::to_value(r.direction).unwrap_or_default();
        let proto = serde_json::to_value(r.protocol).unwrap_or_default();
        eprintln!(
            "{:<5} {:<6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            dir.as_str().unwrap_or(""),
            proto.as_str().unwrap_or(""),
            r.r1,
            r.r2,
            r.r3,
            r.r5,
            r.r10,
            r.medr
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::GenData {
            out,
            num_pairs,
            seed,
            train,
            val,
            test,
        } => {
            let data = generate_corpus(
                num_pairs,
                seed_or_env(seed)?,
                SplitRatios { train, val, test },
            )?;
            write_dataset(&out, &data)?;
            let count = |s| data.iter().filter(|x| x.split == s).count();
            eprintln!(
                "wrote {} samples ({} train / {} val / {} test) to {}",
                data.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                out.display()
            );
        }
        Command::Sti {
            mode,
            scores,
            pairs,
            samples,
            seed,
        } => run_sti(mode, &scores, &pairs, samples, seed)?,
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides, env_seed()?)?;
            let resolved = cfg.to_toml()?;
            eprintln!("resolved configuration:\n{resolved}");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.toml"), &resolved)?;
            let corpus = read_dataset(&data)?;
            let train_set = split_of(&corpus, Split::Train);
            let model = init_model(&cfg.model(), &corpus, &train_set, cfg.seed)?;
            let start = std::time::Instant::now();
            let (_, outcome) = train(model, &cfg.train(), &cfg.loss(), &train_set, Some(&out))?;
            let last = outcome.losses.last().map(|b| b.total).unwrap_or(f64::NAN);
            eprintln!(
                "trained {} steps in {:.1}s, final loss {last:.4}",
                outcome.steps,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            batch_size,
            repeats,
            split,
            seed,
        } => {
            let model = load_model(&checkpoint)?;
            let corpus = read_dataset(&data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let samples = split_of(&corpus, split);
            let protocol = match protocol {
                ProtocolArg::All => Protocol::All,
                ProtocolArg::Small => Protocol::Small,
            };
            let small = SmallBatch {
                batch_size,
                repeats,
                seed: seed_or_env(seed)?,
            };
            let reports = evaluate_retrieval(&model, &samples, protocol, &small)?;
            let alignment = evaluate_alignment(&model, &samples)?;
            print_table(&reports);
            eprintln!(
                "segment alignment accuracy {:.4} ({} tokens)",
                alignment.accuracy, alignment.total
            );
            let out = json!({ "split": split, "samples": samples.len(), "retrieval": reports, "alignment": alignment });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Align {
            checkpoint,
            data,
            sample_id,
            stage,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let corpus = read_dataset(&data)?;
            let sample = sample_by_id(&corpus, sample_id)?;
            let stage = match stage {
                StageArg::Jnt => Stage::Jnt,
                StageArg::Sgm => Stage::Sgm,
            };
            let h = export_heatmaps(&model, sample, stage)?;
            fs::write(&out, serde_json::to_string(&h)?)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "wrote {}x{} {} heatmap to {}",
                h.text_labels.len(),
                h.motion_labels.len(),
                stage,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_specs() {
        assert_eq!(parse_pairs("all", 1, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert_eq!(parse_pairs("0:1, 1:0", 2, 2).unwrap(), vec![(0, 1), (1, 0)]);
        assert!(parse_pairs("0:5", 1, 2).is_err());
        assert!(parse_pairs("x", 1, 2).is_err());
    }
}
