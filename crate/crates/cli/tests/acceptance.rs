//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Criteria run in order inside a single test so the report stays readable;
//! the test fails if any criterion fails. Run with `--nocapture` to see the
//! lines.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use transeval::autodiff::{AdamConfig, Tape};
use transeval::checkpoint::{file_digest, Checkpoint};
use transeval::corpus::{ScoredExample, TokenSeq};
use transeval::evalcorr::{gold_pairs, kendall_wmt, pearson, RankingPair, TiePolicy};
use transeval::labeling::{label_corpus, rank_label, LabelingScheme, Scorer};
use transeval::model::{forward, score, ModelConfig, ModelParams, ParamNodes};
use transeval::mra::{build_mask, build_mask_for_spans, MaskVariant};
use transeval::packing::{pack, Spans, TaskFormat};
use transeval::toy::{toy_task, toy_vocab};
use transeval::training::{dev_split, train, StepLog, TrainOptions};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transeval"))
}

fn run_cli(args: &[&str]) -> Result<Output, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("transeval {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ---------------------------------------------------------------------------
// 1. Mask fidelity
// ---------------------------------------------------------------------------

/// Blocked `(from, to)` segment names, read off the variant name alone.
fn oracle_flows(name: &str) -> Vec<(&str, &str)> {
    match name {
        "full" => vec![],
        "hard" => vec![("hyp", "src"), ("hyp", "ref"), ("src", "ref")],
        other => {
            let parts: Vec<&str> = other.split('-').collect();
            assert!(parts.len() == 4 && parts[0] == "no" && parts[2] == "to", "{other}");
            vec![(parts[1], parts[3])]
        }
    }
}

fn segment_names(format: TaskFormat) -> &'static [&'static str] {
    match format {
        TaskFormat::Ref => &["hyp", "ref"],
        TaskFormat::Src => &["hyp", "src"],
        TaskFormat::SrcRef => &["hyp", "src", "ref"],
    }
}

fn mask_fidelity() -> Outcome {
    let start = Instant::now();
    let grid = run_cli(&["mask-dump", "--variant", "hard", "--spans", "2,2,2"])?;
    let expected = "000000\n000000\n110000\n110000\n111100\n111100\n";
    if grid.stdout != expected.as_bytes() {
        return Err(format!("hard grid:\n{}", String::from_utf8_lossy(&grid.stdout)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = 0;
    for _ in 0..200 {
        let format = TaskFormat::ALL[rng.gen_range(0..3)];
        let names = segment_names(format);
        let widths: Vec<usize> = names.iter().map(|_| rng.gen_range(1..=6)).collect();
        let spans = Spans::from_widths(format, &widths).map_err(|e| e.to_string())?;
        let owner: Vec<&str> = widths.iter().zip(names).flat_map(|(&w, &n)| std::iter::repeat_n(n, w)).collect();
        for variant in MaskVariant::ALL {
            let flows = oracle_flows(variant.name());
            let applicable = flows.iter().all(|(a, b)| names.contains(a) && names.contains(b));
            match build_mask_for_spans(variant, &spans) {
                Ok(mask) => {
                    if !applicable {
                        return Err(format!("{variant} accepted on {format}"));
                    }
                    let mut oracle = BTreeSet::new();
                    for (q, &qs) in owner.iter().enumerate() {
                        for (k, &ks) in owner.iter().enumerate() {
                            if flows.contains(&(ks, qs)) {
                                oracle.insert((q, k));
                            }
                        }
                    }
                    let got: BTreeSet<_> = mask.blocked_pairs().into_iter().collect();
                    if got != oracle {
                        return Err(format!("{variant} on {format} {widths:?}"));
                    }
                    compared += 1;
                }
                Err(_) if !applicable => {}
                Err(e) => return Err(format!("{variant} on {format}: {e}")),
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 1.0, format!("golden grid ok, {compared} layout/variant sets equal, {elapsed:.3} s"))
}

// ---------------------------------------------------------------------------
// 2. Attention soundness
// ---------------------------------------------------------------------------

fn attention_soundness() -> Outcome {
    let config = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ffn: 32,
        head_dims: ModelConfig::scaled_head(16),
        max_len: 64,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_blocked) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let params = ModelParams::init(&config, trial).map_err(|e| e.to_string())?;
        let seq = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..10);
            TokenSeq::new((0..n).map(|_| rng.gen_range(4..64)).collect()).unwrap()
        };
        let (h, sr, r) = (seq(&mut rng), seq(&mut rng), seq(&mut rng));
        let format = TaskFormat::ALL[rng.gen_range(0..3)];
        let variants: Vec<MaskVariant> = MaskVariant::ALL.into_iter().filter(|v| v.supports(format)).collect();
        let variant = variants[rng.gen_range(0..variants.len())];
        let packed = pack(&h, Some(&sr), Some(&r), format).map_err(|e| e.to_string())?;
        let mask = build_mask(variant, &packed).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let trace = forward(&mut tape, &nodes, &params, &config, &packed, &mask).map_err(|e| e.to_string())?;
        for head in trace.attention.iter().flatten() {
            let w = tape.value(*head);
            for i in 0..w.rows() {
                let row_sum: f64 = (0..w.cols()).map(|j| w.get(i, j)).sum();
                worst_sum = worst_sum.max((row_sum - 1.0).abs());
                for j in 0..w.cols() {
                    if mask.is_blocked(i, j) {
                        worst_blocked = worst_blocked.max(w.get(i, j));
                    }
                }
            }
        }
    }
    check(
        worst_sum <= 1e-9 && worst_blocked < 1e-12,
        format!("max |row sum - 1| = {worst_sum:.1e}, max blocked weight = {worst_blocked:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness
// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut checked = Vec::new();
    let mut rejected = Vec::new();
    for format in TaskFormat::ALL {
        for variant in [MaskVariant::Full, MaskVariant::Hard, MaskVariant::NoHypToSrc] {
            let args = [
                "grad-check", "--d-model", "8", "--layers", "2", "--task", format.name(), "--mask", variant.name(),
                "--epsilon", "1e-5", "--tolerance", "1e-3",
            ];
            let out = bin().args(args).output().map_err(|e| e.to_string())?;
            if !variant.supports(format) {
                let err = String::from_utf8_lossy(&out.stderr);
                if out.status.success() || !err.contains("cannot apply") {
                    return Err(format!("{format}/{variant} should be rejected: {err}"));
                }
                rejected.push(format!("{format}/{variant}"));
                continue;
            }
            let line: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
            let err = line["max_rel_error"].as_f64().unwrap_or(f64::NAN);
            if !(out.status.success() && err < 1e-3) {
                return Err(format!("{format}/{variant}: max relative error {err:e}"));
            }
            checked.push(err);
        }
    }
    let worst = checked.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    check(
        elapsed < 30.0,
        format!(
            "{} combos, worst {worst:.1e}; rejected as inapplicable: {}; {elapsed:.1} s",
            checked.len(),
            rejected.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Labeling invariants
// ---------------------------------------------------------------------------

fn labeling_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let n = rng.gen_range(2..60);
        let skew = rng.gen_range(0.0..30.0);
        let mut xs: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                if case % 2 == 0 { (skew * u).exp() } else { u }
            })
            .collect();
        // A few exact duplicates exercise tie handling.
        if n > 3 {
            xs[1] = xs[0];
        }
        if xs.iter().all(|&x| x == xs[0]) {
            xs[0] += 1.0;
        }
        let labels = rank_label(&xs).map_err(|e| e.to_string())?;
        let mean = labels.iter().sum::<f64>() / n as f64;
        let std = (labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        for i in 0..n {
            for j in 0..n {
                if xs[i] > xs[j] && labels[i] <= labels[j] {
                    return Err(format!("monotonicity broken in case {case}"));
                }
            }
        }
        let mapped: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        if rank_label(&mapped).map_err(|e| e.to_string())? != labels {
            return Err(format!("increasing map changed labels in case {case}"));
        }
    }
    let derived = rank_label(&[0.9, 0.5, 0.7]).map_err(|e| e.to_string())?;
    let expected = [1.224745, -1.224745, 0.0];
    let derived_ok = derived.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-6);
    check(
        worst_mean <= 1e-9 && worst_std <= 1e-9 && derived_ok,
        format!("|mean| <= {worst_mean:.1e}, |std - 1| <= {worst_std:.1e}, [0.9,0.5,0.7] -> {derived:.6?}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Correlation oracles
// ---------------------------------------------------------------------------

fn brute_kendall(scores: &[(f64, f64)], flip: u32, ties: TiePolicy) -> Option<f64> {
    let (mut c, mut d) = (0i64, 0i64);
    for (k, &(a, b)) in scores.iter().enumerate() {
        let (better, worse) = if flip >> k & 1 == 1 { (b, a) } else { (a, b) };
        if better > worse {
            c += 1;
        } else if better < worse || ties == TiePolicy::Discordant {
            d += 1;
        }
    }
    (c + d > 0).then(|| (c - d) as f64 / (c + d) as f64)
}

fn correlation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut lists = 0;
    for n in 1..=10usize {
        for _ in 0..4 {
            // Coarse values so metric ties occur.
            let scores: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64)).collect();
            for flip in 0..(1u32 << n) {
                let pairs: Vec<RankingPair> = scores
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, b))| {
                        if flip >> k & 1 == 1 { RankingPair { better: b, worse: a } } else { RankingPair { better: a, worse: b } }
                    })
                    .collect();
                for ties in [TiePolicy::Discordant, TiePolicy::Excluded] {
                    let got = kendall_wmt(&pairs, ties).ok();
                    if got != brute_kendall(&scores, flip, ties) {
                        return Err(format!("kendall mismatch on {scores:?} flip {flip:b} {ties}"));
                    }
                }
                lists += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..200);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.gen_range(-1.0..1.0) + rng.gen_range(-3.0..3.0)).collect();
        // Independent path: one-pass raw moments.
        let nf = n as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let vx = sxx / nf - (sx / nf).powi(2);
        let vy = syy / nf - (sy / nf).powi(2);
        let oracle = cov / (vx * vy).sqrt();
        worst = worst.max((pearson(&x, &y).map_err(|e| e.to_string())? - oracle).abs());
    }
    check(worst <= 1e-12, format!("kendall exact on {lists} oriented lists, pearson max diff {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Shared toy runs for criteria 7 and 8
// ---------------------------------------------------------------------------

const TOY_SIZE: usize = 2000;
const TOTAL_STEPS: u64 = 1000;
const PRETRAIN_STEPS: u64 = 500;
const SYNTHETIC_SIZE: usize = 4000;

fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 512,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ffn: 64,
        head_dims: ModelConfig::scaled_head(32),
        max_len: 64,
        ..ModelConfig::default()
    }
}

/// Held-out tau per format, pairs from gold gaps above 0.1.
fn dev_taus(params: &ModelParams, config: &ModelConfig, dev: &[ScoredExample]) -> [f64; 3] {
    let gold: Vec<f64> = dev.iter().map(|e| e.score).collect();
    let pairs = gold_pairs(&gold, 0.1);
    TaskFormat::ALL.map(|format| {
        let s: Vec<f64> = dev
            .iter()
            .map(|e| score(&e.hyp, Some(&e.src), Some(&e.reference), format, params, config, None).unwrap())
            .collect();
        let ranked: Vec<RankingPair> = pairs.iter().map(|&(b, w)| RankingPair { better: s[b], worse: s[w] }).collect();
        kendall_wmt(&ranked, TiePolicy::Discordant).unwrap()
    })
}

struct SeedRun {
    scratch: [f64; 3],
    pretrained: [f64; 3],
    log: Vec<StepLog>,
}

fn toy_run(seed: u64) -> SeedRun {
    let config = toy_config();
    let vocab = toy_vocab();
    let task = toy_task(TOY_SIZE, seed).unwrap();
    let examples: Vec<ScoredExample> = task
        .triplets
        .iter()
        .zip(&task.gold)
        .map(|(t, &g)| ScoredExample::from_triplet(t, g, &vocab).unwrap())
        .collect();
    let (train_set, dev) = dev_split(&examples, seed, 0.1, 32);
    let opts = |steps, lr| TrainOptions { steps, batch_size: 8, adam: AdamConfig::with_lr(lr), seed };

    let mut scratch = ModelParams::init(&config, seed).unwrap();
    let mut log = Vec::new();
    train(&mut scratch, &config, &train_set, &opts(TOTAL_STEPS, 1e-3), |step| {
        log.push(step.clone());
        Ok(())
    })
    .unwrap();

    // Pseudo-labels for a disjoint synthetic corpus come from the scratch
    // model acting as teacher.
    let synthetic = toy_task(SYNTHETIC_SIZE, seed + 1000).unwrap();
    let teacher = Scorer { params: &scratch, config: &config };
    let labeled =
        label_corpus(&synthetic.triplets, &vocab, &[teacher], TaskFormat::SrcRef, None, LabelingScheme::Rank).unwrap();
    let mut student = ModelParams::init(&config, seed).unwrap();
    train(&mut student, &config, &labeled, &opts(PRETRAIN_STEPS, 1e-3), |_| Ok(())).unwrap();
    train(&mut student, &config, &train_set, &opts(TOTAL_STEPS - PRETRAIN_STEPS, 3e-4), |_| Ok(())).unwrap();

    SeedRun { scratch: dev_taus(&scratch, &config, &dev), pretrained: dev_taus(&student, &config, &dev), log }
}

fn moving_average(log: &[StepLog], at: usize, window: usize) -> f64 {
    let slice = &log[at..(at + window).min(log.len())];
    slice.iter().map(|s| s.loss).sum::<f64>() / slice.len() as f64
}

fn learnability(runs: &[SeedRun], elapsed: f64) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, run) in runs.iter().enumerate() {
        let early = moving_average(&run.log, 0, 50);
        let late = moving_average(&run.log, 500, 50);
        ok &= run.scratch.iter().all(|&t| t >= 0.5) && late < early && run.log[500].loss < run.log[0].loss;
        parts.push(format!(
            "seed {seed}: tau {:.3}/{:.3}/{:.3}, loss avg {early:.3}->{late:.3}",
            run.scratch[0], run.scratch[1], run.scratch[2]
        ));
    }
    check(ok, format!("{} ({TOTAL_STEPS} steps, {elapsed:.0} s for all arms)", parts.join("; ")))
}

fn ablation_direction(runs: &[SeedRun]) -> Outcome {
    let mean = |pick: fn(&SeedRun) -> [f64; 3]| runs.iter().flat_map(pick).sum::<f64>() / (3 * runs.len()) as f64;
    let scratch = mean(|r| r.scratch);
    let pretrained = mean(|r| r.pretrained);
    check(
        pretrained >= scratch,
        format!("pretrain+finetune mean tau {pretrained:.4} vs scratch {scratch:.4} at {TOTAL_STEPS} steps each"),
    )
}

// ---------------------------------------------------------------------------
// 6 and 9. Checkpoint-level contracts through the CLI
// ---------------------------------------------------------------------------

const SMALL_CONFIG: &str = "\
seed = 9
d_model = 8
n_layers = 1
n_heads = 2
d_ffn = 16
max_len = 64
batch_size = 4
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Result<Self, String> {
        let ws = Self { dir: TempDir::new().map_err(|e| e.to_string())? };
        fs::write(ws.path("run.toml"), SMALL_CONFIG).map_err(|e| e.to_string())?;
        run_cli(&[
            "--config", s(&ws.path("run.toml")), "synthesize", "--toy", "40", "--output", s(&ws.path("toy.jsonl")),
            "--vocab-out", s(&ws.path("vocab.txt")),
        ])?;
        Ok(ws)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, cmd: &str, extra: &[&str]) -> Result<PathBuf, String> {
        let (config, corpus, vocab, out) =
            (self.path("run.toml"), self.path("toy.jsonl"), self.path("vocab.txt"), self.path(out));
        let mut args = vec!["--config", s(&config), "--out", s(&out), cmd, "--train", s(&corpus), "--vocab", s(&vocab)];
        args.extend(extra);
        let stdout = run_cli(&args)?.stdout;
        Ok(PathBuf::from(String::from_utf8_lossy(&stdout).trim()))
    }

    fn score(&self, ckpt: &Path, task: &str) -> Result<Vec<u8>, String> {
        Ok(run_cli(&["score", "--checkpoint", s(ckpt), "--input", s(&self.path("toy.jsonl")), "--task", task])?.stdout)
    }
}

fn unified_contract() -> Outcome {
    let ws = Workspace::new()?;
    let pre = ws.train("pre", "pretrain", &["--steps", "10"])?;
    let ckpt = ws.train("ft", "finetune", &["--init", s(&pre), "--steps", "10"])?;
    let digest = file_digest(&ckpt).map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for task in ["ref", "src", "src+ref"] {
        let text = String::from_utf8(ws.score(&ckpt, task)?).map_err(|e| e.to_string())?;
        let mut n = 0;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if !v["score"].as_f64().is_some_and(f64::is_finite) {
                return Err(format!("{task}: non-finite score in {line}"));
            }
            n += 1;
        }
        counts.push(n);
    }
    // In-process: the same parameters serve every format without mutation.
    let loaded = Checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let before = loaded.params.clone();
    let h = TokenSeq::new(vec![10, 11]).unwrap();
    let (src, reference) = (TokenSeq::new(vec![300, 301]).unwrap(), TokenSeq::new(vec![10, 12]).unwrap());
    for format in TaskFormat::ALL {
        score(&h, Some(&src), Some(&reference), format, &loaded.params, &loaded.config, None)
            .map_err(|e| e.to_string())?;
    }
    let unchanged = loaded.params == before && file_digest(&ckpt).map_err(|e| e.to_string())? == digest;
    check(unchanged, format!("finite scores for ref/src/src+ref on {counts:?} rows, checkpoint unchanged"))
}

fn determinism() -> Outcome {
    let ws = Workspace::new()?;
    let a = ws.train("a", "pretrain", &["--steps", "15"])?;
    let b = ws.train("b", "pretrain", &["--steps", "15"])?;
    let (bytes_a, bytes_b) = (fs::read(&a).map_err(|e| e.to_string())?, fs::read(&b).map_err(|e| e.to_string())?);
    let score_a = ws.score(&a, "src+ref")?;
    let score_b = ws.score(&a, "src+ref")?;
    check(
        bytes_a == bytes_b && score_a == score_b,
        format!("{} checkpoint bytes identical, {} score bytes identical", bytes_a.len(), score_a.len()),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "mask fidelity", mask_fidelity()),
        (2, "attention soundness", attention_soundness()),
        (3, "gradient correctness", gradient_correctness()),
        (4, "labeling invariants", labeling_invariants()),
        (5, "correlation oracles", correlation_oracles()),
        (6, "unified single-model contract", unified_contract()),
    ];
    let start = Instant::now();
    let runs: Vec<SeedRun> = (0..3).map(toy_run).collect();
    let elapsed = start.elapsed().as_secs_f64();
    results.push((7, "end-to-end learnability", learnability(&runs, elapsed)));
    results.push((8, "ablation direction", ablation_direction(&runs)));
    results.push((9, "determinism", determinism()));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
