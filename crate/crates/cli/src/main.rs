//! `transeval` command-line driver.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transeval::autodiff::{grad_check_target, model_grad_check};
use transeval::checkpoint::{save_named, Checkpoint};
use transeval::config::RunConfig;
use transeval::corpus::{
    build_vocab, read_jsonl, read_parallel, synthesize_corpus, write_jsonl, write_jsonl_to, CorpusRow,
    RawTriplet, ScoredExample, TokenSeq, Vocab,
};
use transeval::evalcorr::{evaluate_metric, read_pairs, score_rows, EvalOptions, Measure, TiePolicy};
use transeval::labeling::{label_corpus, LabelingScheme, Scorer};
use transeval::model::{ModelConfig, ModelParams};
use transeval::mra::{build_mask_for_spans, MaskVariant};
use transeval::packing::{Spans, TaskFormat};
use transeval::toy::{toy_task, toy_vocab};
use transeval::training::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "transeval", version, about = "Train and apply unified translation-quality metrics")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and logs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build hypothesis/source/reference triplets from parallel data.
    Synthesize(SynthesizeArgs),
    /// Attach rank-based pseudo-labels using scorer checkpoints.
    Label(LabelArgs),
    /// Multi-format training on a labeled corpus from fresh weights.
    Pretrain(TrainArgs),
    /// Multi-format training starting from a checkpoint.
    Finetune(FinetuneArgs),
    /// Score a corpus with one checkpoint.
    Score(ScoreArgs),
    /// Correlate checkpoint scores with gold judgments.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
    /// Print an attention mask as a 0/1 grid (1 = blocked).
    MaskDump(MaskDumpArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// JSONL with `src` and `ref` string keys.
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    input: Option<PathBuf>,
    /// Generate this many seeded toy pairs instead of reading input; rows
    /// carry `gold` quality labels.
    #[arg(long)]
    toy: Option<usize>,
    #[arg(long)]
    output: PathBuf,
    /// With `--toy`, also write the fixed toy vocabulary here.
    #[arg(long, requires = "toy")]
    vocab_out: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Scorer checkpoint; repeat for an ensemble.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Use the first k checkpoints (default: the configured ensemble size,
    /// capped at the number given).
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long, default_value = "src+ref")]
    task: TaskFormat,
    #[arg(long)]
    mask: Option<MaskVariant>,
    #[arg(long)]
    labeling: Option<LabelingScheme>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSONL corpus; labels come from `score`, or `gold` when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value = "pretrain")]
    tag: String,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Vocabulary file (one token per line); built from the corpus if absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_scratch")]
    init: Option<PathBuf>,
    /// Ignore `--init` and start from fresh weights.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long, default_value = "finetune")]
    tag: String,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    task: TaskFormat,
    #[arg(long)]
    mask: Option<MaskVariant>,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL rows with `gold` (and `id` when pairs are given).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    task: TaskFormat,
    #[arg(long)]
    mask: Option<MaskVariant>,
    #[arg(long, default_value = "kendall")]
    measure: Measure,
    /// Preference pairs (`src_id`, `better_hyp`, `worse_hyp`); derived from
    /// gold gaps when absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    ties: Option<TiePolicy>,
    #[arg(long)]
    pair_threshold: Option<f64>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value = "src+ref")]
    task: TaskFormat,
    #[arg(long)]
    mask: Option<MaskVariant>,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 256)]
    samples: usize,
}

#[derive(Args)]
struct MaskDumpArgs {
    #[arg(long)]
    variant: MaskVariant,
    /// Segment widths in packing order.
    #[arg(long, value_delimiter = ',', default_value = "2,2,2")]
    spans: Vec<usize>,
    /// Defaults to `src+ref` for three spans and `ref` for two.
    #[arg(long)]
    task: Option<TaskFormat>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Synthesize(a) => synthesize(&config, a),
        Command::Label(a) => label(&config, a),
        Command::Pretrain(a) => pretrain(&config, &out_dir, a),
        Command::Finetune(a) => finetune(&config, cli.config.is_some(), &out_dir, a),
        Command::Score(a) => score(a),
        Command::Evaluate(a) => evaluate(&config, a),
        Command::GradCheck(a) => grad_check_cmd(&config, a),
        Command::MaskDump(a) => mask_dump(a),
    }
}

fn synthesize(config: &RunConfig, a: SynthesizeArgs) -> Result<ExitCode> {
    let rows: Vec<CorpusRow> = match (a.toy, &a.input) {
        (Some(n), _) => {
            let task = toy_task(n, config.seed)?;
            task.triplets
                .iter()
                .zip(&task.gold)
                .enumerate()
                .map(|(i, (t, &g))| CorpusRow {
                    id: Some(i.to_string()),
                    gold: Some(g),
                    ..CorpusRow::from_triplet(t)
                })
                .collect()
        }
        (None, Some(input)) => {
            let parallel = read_parallel(input)?;
            synthesize_corpus(&parallel, &config.degrade_policy())?
                .iter()
                .enumerate()
                .map(|(i, t)| CorpusRow {
                    id: Some(i.to_string()),
                    ..CorpusRow::from_triplet(t)
                })
                .collect()
        }
        (None, None) => bail!("synthesize needs --input or --toy"),
    };
    write_jsonl(&rows, &a.output)?;
    if let Some(path) = &a.vocab_out {
        toy_vocab().write_to(path)?;
    }
    eprintln!("wrote {} triplets to {}", rows.len(), a.output.display());
    Ok(ExitCode::SUCCESS)
}

fn triplets(rows: &[CorpusRow]) -> Result<Vec<RawTriplet>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| r.triplet().with_context(|| format!("row {}", i + 1)))
        .collect()
}

fn label(config: &RunConfig, a: LabelArgs) -> Result<ExitCode> {
    let rows = read_jsonl(&a.input)?;
    let k = a.ensemble.unwrap_or(config.ensemble.min(a.checkpoints.len()));
    if k == 0 || k > a.checkpoints.len() {
        bail!("--ensemble {k} needs at least {k} checkpoints, got {}", a.checkpoints.len());
    }
    let ckpts = a.checkpoints[..k]
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let vocab = ckpts[0].require_vocab()?;
    if ckpts.iter().any(|c| c.vocab.as_ref() != Some(vocab)) {
        bail!("ensemble checkpoints must share one vocabulary");
    }
    let scorers: Vec<Scorer<'_>> = ckpts.iter().map(Scorer::from).collect();
    let scheme = a.labeling.unwrap_or(config.labeling);
    let labeled = label_corpus(&triplets(&rows)?, vocab, &scorers, a.task, a.mask, scheme)?;
    let out: Vec<CorpusRow> = rows
        .into_iter()
        .zip(&labeled)
        .map(|(r, ex)| CorpusRow {
            score: Some(ex.score),
            ..r
        })
        .collect();
    write_jsonl(&out, &a.output)?;
    eprintln!("labeled {} rows with {k} scorer(s), {scheme} scheme", out.len());
    Ok(ExitCode::SUCCESS)
}

fn training_rows(config: &RunConfig, path: Option<&PathBuf>) -> Result<Vec<CorpusRow>> {
    let path = path
        .or(config.train_path.as_ref())
        .context("no training corpus: pass --train or set train_path")?;
    read_jsonl(path).with_context(|| path.display().to_string())
}

fn examples(rows: &[CorpusRow], vocab: &Vocab) -> Result<Vec<ScoredExample>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let label = r
                .score
                .or(r.gold)
                .with_context(|| format!("row {} has neither score nor gold", i + 1))?;
            Ok(ScoredExample::from_triplet(&r.triplet()?, label, vocab)?)
        })
        .collect()
}

fn load_vocab(config: &RunConfig, path: Option<&PathBuf>, rows: &[CorpusRow]) -> Result<Vocab> {
    match path {
        Some(p) => Ok(Vocab::read_from(p)?),
        None => Ok(build_vocab(&triplets(rows)?, config.vocab_size)?),
    }
}

fn run_training(
    out_dir: &Path,
    tag: &str,
    mut ckpt: Checkpoint,
    data: &[ScoredExample],
    opts: TrainOptions,
) -> Result<ExitCode> {
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(format!("{tag}.log.jsonl"));
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let config = ckpt.config.clone();
    train(&mut ckpt.params, &config, data, &opts, |step| {
        serde_json::to_writer(&mut log, step)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;
    ckpt.step += opts.steps;
    let path = save_named(&ckpt, out_dir, tag)?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn fresh_checkpoint(config: &RunConfig, vocab: Vocab) -> Result<Checkpoint> {
    let model = config.model_config(vocab.len());
    Ok(Checkpoint {
        params: ModelParams::init(&model, config.seed)?,
        config: model,
        seed: config.seed,
        step: 0,
        vocab: Some(vocab),
    })
}

fn pretrain(config: &RunConfig, out_dir: &Path, a: TrainArgs) -> Result<ExitCode> {
    let rows = training_rows(config, a.train.as_ref())?;
    let vocab = load_vocab(config, a.vocab.as_ref(), &rows)?;
    let data = examples(&rows, &vocab)?;
    let ckpt = fresh_checkpoint(config, vocab)?;
    let opts = TrainOptions {
        steps: a.steps.unwrap_or(config.pretrain_steps),
        batch_size: config.batch_size,
        adam: config.adam(a.lr.unwrap_or(config.lr_pretrain)),
        seed: config.seed,
    };
    run_training(out_dir, &a.tag, ckpt, &data, opts)
}

fn finetune(config: &RunConfig, explicit_config: bool, out_dir: &Path, a: FinetuneArgs) -> Result<ExitCode> {
    let rows = training_rows(config, a.train.as_ref())?;
    let ckpt = match (&a.init, a.from_scratch) {
        (_, true) => fresh_checkpoint(config, load_vocab(config, a.vocab.as_ref(), &rows)?)?,
        (Some(init), false) => {
            let ckpt = Checkpoint::load(init).with_context(|| init.display().to_string())?;
            let expected = config.model_config(ckpt.config.vocab_size);
            if explicit_config && expected != ckpt.config {
                bail!("checkpoint shape does not match the run configuration");
            }
            ckpt
        }
        (None, false) => bail!("finetune needs --init or --from-scratch"),
    };
    let data = examples(&rows, ckpt.require_vocab()?)?;
    let opts = TrainOptions {
        steps: a.steps.unwrap_or(config.finetune_steps),
        batch_size: config.batch_size,
        adam: config.adam(a.lr.unwrap_or(config.lr_finetune)),
        seed: config.seed,
    };
    run_training(out_dir, &a.tag, ckpt, &data, opts)
}

fn score(a: ScoreArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let rows = read_jsonl(&a.input)?;
    let scores = score_rows(Scorer::from(&ckpt), ckpt.require_vocab()?, &rows, a.task, a.mask)?;
    let out: Vec<CorpusRow> = rows
        .into_iter()
        .zip(scores)
        .map(|(r, s)| CorpusRow { score: Some(s), ..r })
        .collect();
    match &a.output {
        Some(path) => write_jsonl(&out, path)?,
        None => {
            let stdout = io::stdout();
            let mut lock = BufWriter::new(stdout.lock());
            write_jsonl_to(&out, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(config: &RunConfig, a: EvaluateArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let rows = read_jsonl(&a.input)?;
    let pairs = a.pairs.as_ref().map(read_pairs).transpose()?;
    let opts = EvalOptions {
        ties: a.ties.unwrap_or(config.ties),
        pair_threshold: a.pair_threshold.unwrap_or(config.pair_threshold),
    };
    let (report, _) = evaluate_metric(
        Scorer::from(&ckpt),
        ckpt.require_vocab()?,
        &rows,
        a.task,
        a.mask,
        a.measure,
        pairs.as_deref(),
        &opts,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.report {
        fs::write(path, format!("{json}\n"))?;
    }
    println!("{json}");
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

fn grad_check_cmd(config: &RunConfig, a: GradCheckArgs) -> Result<ExitCode> {
    let vocab_size = 24;
    let mut model = ModelConfig {
        vocab_size,
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ffn: 2 * a.d_model,
        head_dims: ModelConfig::scaled_head(a.d_model),
        max_len: 32,
        ..ModelConfig::default()
    };
    if let Some(mask) = a.mask {
        model.masks.set(a.task, mask);
    }
    model.validate()?;
    let params = ModelParams::init(&model, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seq = |len: usize| -> Result<TokenSeq> {
        Ok(TokenSeq::new((0..len).map(|_| rng.gen_range(4..vocab_size as u32)).collect())?)
    };
    let mut example = ScoredExample::new(seq(4)?, seq(3)?, seq(5)?, 0.0)?;
    example.score = grad_check_target(&params, &model, &example, a.task)?;
    let report = model_grad_check(
        &params,
        &model,
        &example,
        a.task,
        a.epsilon,
        a.samples,
        config.seed,
    )?;
    let passed = report.max_rel_error < a.tolerance;
    println!(
        "{}",
        serde_json::json!({
            "task": a.task.name(),
            "mask": model.masks.get(a.task).name(),
            "epsilon": a.epsilon,
            "checked": report.checked,
            "max_rel_error": report.max_rel_error,
            "tolerance": a.tolerance,
            "passed": passed,
        })
    );
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn mask_dump(a: MaskDumpArgs) -> Result<ExitCode> {
    let format = match (a.task, a.spans.len()) {
        (Some(t), _) => t,
        (None, 3) => TaskFormat::SrcRef,
        (None, 2) => TaskFormat::Ref,
        (None, n) => bail!("{n} spans given; pass --task"),
    };
    let spans = Spans::from_widths(format, &a.spans)?;
    print!("{}", build_mask_for_spans(a.variant, &spans)?.to_grid());
    Ok(ExitCode::SUCCESS)
}
