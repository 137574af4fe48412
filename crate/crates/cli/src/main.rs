//! `speckit`: operator surface for the speculative-decoding kit.
//!
//! Subcommands cover the full desk-scale loop: generate a corpus,
//! pretrain a base model, self-distill it, train a draft model, decode
//! with and without speculation, benchmark acceptance, run the
//! roofline analysis, and audit gradients. Every subcommand is
//! deterministic given the same config and seed; the config format and
//! precedence rules live in [`config`].

mod config;
mod report;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use config::RunConfig;
use report::{digest, emit_report, Cell, Format, Meta, Report};
use speckit_core::analytics::{self, ChipSpec, RooflineReport};
use speckit_core::baselm::BaseLM;
use speckit_core::checkpoint::{load_base, load_specformer, save_base, save_specformer};
use speckit_core::corpus::{gen_corpus, Corpus};
use speckit_core::engine::sd_decode;
use speckit_core::gradcheck::{check_all_ops, check_draft_loss};
use speckit_core::prng::Prng;
use speckit_core::specformer::SpecFormer;
use speckit_core::training::{self, train_base, train_draft};
use std::path::{Path, PathBuf};

/// Stream constants splitting the root seed per component.
const STREAM_DRAFT_INIT: u64 = 0x6b8b_4567_327b_23c6;
const STREAM_PROMPT: u64 = 0x6433_73e2_04c5_a1f3;

/// Writes a formatted chunk to stdout, exiting quietly if the reader
/// hung up mid-stream (e.g. `speckit roofline | head`).
fn emit_stdout(args: std::fmt::Arguments) {
    use std::io::Write;
    if std::io::stdout().write_fmt(args).is_err() {
        std::process::exit(0);
    }
}

/// `println!` that tolerates a closed stdout pipe.
macro_rules! say {
    ($($t:tt)*) => { emit_stdout(format_args!("{}\n", format_args!($($t)*))) };
}

#[derive(Parser)]
#[command(
    name = "speckit",
    about = "Lossless speculative decoding at desk scale",
    version
)]
struct Cli {
    /// TOML config file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Config override, repeatable: `--set draft.l_d=8` (or a bare key
    /// when unique: `--set l_d=8`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Root seed; beats the config file and --set.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output artifact path (meaning depends on the subcommand).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Report format.
    #[arg(long, global = true, default_value = "csv")]
    format: Format,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus ([corpus] section) to --out.
    GenCorpus,
    /// Pretrain a base model on a corpus; checkpoint to --out DIR.
    TrainBase {
        /// Corpus file from gen-corpus or distill.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Optional per-step loss table.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Regenerate completions with the base model itself; corpus to --out.
    Distill {
        #[arg(long, value_name = "DIR")]
        base_ckpt: PathBuf,
    },
    /// Train a draft model against a frozen base; checkpoints to --out DIR.
    TrainDraft {
        #[arg(long, value_name = "DIR")]
        base_ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Optional per-step loss table.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Plain greedy decoding; token file to --out.
    Decode {
        #[arg(long, value_name = "DIR")]
        base_ckpt: PathBuf,
    },
    /// Speculative decoding (identical output, fewer base forwards);
    /// token file to --out.
    SdDecode {
        #[arg(long, value_name = "DIR")]
        base_ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        draft_ckpt: PathBuf,
    },
    /// Acceptance sweep over independent prompts; a/kappa table to
    /// --out (stdout when omitted).
    Bench {
        #[arg(long, value_name = "DIR")]
        base_ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        draft_ckpt: PathBuf,
        /// Number of prompts (overrides bench.seeds).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Arithmetic-intensity report and throughput curve data.
    Roofline {
        /// Chip spec file (`key = value`); built-in A100-80G default.
        #[arg(long, value_name = "FILE")]
        chip: Option<PathBuf>,
        /// Base-model parameter count (overrides roofline.model_params).
        #[arg(long)]
        model_params: Option<f64>,
    },
    /// Finite-difference audit of every op and the full draft loss.
    Gradcheck {
        /// Random points per op (overrides gradcheck.seeds).
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = config::parse_config(cli.config.as_deref(), &cli.set, cli.seed)?;
    let out = cli.out.as_deref();
    match cli.cmd {
        Cmd::GenCorpus => cmd_gen_corpus(&cfg, require_out(out, "the corpus file")?),
        Cmd::TrainBase { corpus, report } => cmd_train_base(
            &cfg,
            &corpus,
            require_out(out, "the checkpoint directory")?,
            report.as_deref(),
            cli.format,
        ),
        Cmd::Distill { base_ckpt } => {
            cmd_distill(&cfg, &base_ckpt, require_out(out, "the corpus file")?)
        }
        Cmd::TrainDraft { base_ckpt, corpus, report } => cmd_train_draft(
            &cfg,
            &base_ckpt,
            &corpus,
            require_out(out, "the checkpoint directory")?,
            report.as_deref(),
            cli.format,
        ),
        Cmd::Decode { base_ckpt } => {
            cmd_decode(&cfg, &base_ckpt, require_out(out, "the token file")?)
        }
        Cmd::SdDecode { base_ckpt, draft_ckpt } => cmd_sd_decode(
            &cfg,
            &base_ckpt,
            &draft_ckpt,
            require_out(out, "the token file")?,
        ),
        Cmd::Bench { base_ckpt, draft_ckpt, seeds } => {
            cmd_bench(&cfg, &base_ckpt, &draft_ckpt, seeds, out, cli.format)
        }
        Cmd::Roofline { chip, model_params } => {
            cmd_roofline(&cfg, chip.as_deref(), model_params, out, cli.format)
        }
        Cmd::Gradcheck { seeds } => cmd_gradcheck(&cfg, seeds),
    }
}

fn require_out<'a>(out: Option<&'a Path>, what: &str) -> anyhow::Result<&'a Path> {
    out.ok_or_else(|| anyhow!("this subcommand writes {what}; pass --out PATH"))
}

fn meta_for(cfg: &RunConfig) -> Meta {
    Meta::new(cfg.seed, digest(&cfg.canonical()))
}

fn cmd_gen_corpus(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let kind = cfg.corpus.to_kind()?;
    let corpus = gen_corpus(
        kind,
        cfg.corpus.size,
        cfg.corpus.seq_len,
        cfg.corpus.vocab,
        cfg.seed,
    )?;
    corpus.save(out)?;
    say!(
        "wrote {} entries x {} tokens (vocab {}) to {}",
        corpus.len(),
        cfg.corpus.seq_len,
        corpus.vocab,
        out.display()
    );
    Ok(())
}

fn loss_report(cfg: &RunConfig, trace: &[f64]) -> Report {
    let mut r = Report::new(meta_for(cfg), vec!["step", "loss"]);
    for (i, &loss) in trace.iter().enumerate() {
        r.push_row(vec![Cell::Int(i as i64), Cell::Float(loss)]);
    }
    r
}

fn cmd_train_base(
    cfg: &RunConfig,
    corpus_path: &Path,
    out: &Path,
    report_path: Option<&Path>,
    format: Format,
) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus_path).context("loading corpus")?;
    let (base, trace) = train_base::<f32>(
        &corpus,
        &cfg.base.to_config(),
        &cfg.train.to_config(cfg.seed),
    )?;
    save_base(&base, out)?;
    say!(
        "trained base for {} steps, loss {:.6} -> {:.6}; checkpoint in {}",
        trace.len(),
        trace.first().unwrap_or(&f64::NAN),
        trace.last().unwrap_or(&f64::NAN),
        out.display()
    );
    if let Some(p) = report_path {
        emit_report(&loss_report(cfg, &trace), format, p)?;
    }
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, base_ckpt: &Path, out: &Path) -> anyhow::Result<()> {
    let base: BaseLM<f32> = load_base(base_ckpt).context("loading base checkpoint")?;
    let vocab = base.config().vocab;
    let mut prng = Prng::new(cfg.seed ^ STREAM_PROMPT);
    let prompts: Vec<Vec<usize>> = (0..cfg.distill.prompt_count)
        .map(|_| (0..cfg.distill.prompt_len).map(|_| prng.below(vocab)).collect())
        .collect();
    let corpus = training::self_distill(&base, &prompts, cfg.distill.max_len)?;
    corpus.save(out)?;
    say!(
        "distilled {} completions of the base model to {}",
        corpus.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_draft(
    cfg: &RunConfig,
    base_ckpt: &Path,
    corpus_path: &Path,
    out: &Path,
    report_path: Option<&Path>,
    format: Format,
) -> anyhow::Result<()> {
    let base: BaseLM<f32> = load_base(base_ckpt).context("loading base checkpoint")?;
    let corpus = Corpus::load(corpus_path).context("loading corpus")?;
    let mut sf = SpecFormer::<f32>::init(cfg.draft.to_config(), cfg.seed ^ STREAM_DRAFT_INIT)?;
    let trace = train_draft(
        &base,
        &mut sf,
        &corpus,
        &cfg.train.to_config(cfg.seed),
        Some(out),
    )?;
    save_specformer(&sf, &out.join("final"))?;
    say!(
        "trained draft for {} steps, loss {:.6} -> {:.6}; checkpoints in {} (serve {})",
        trace.len(),
        trace.first().unwrap_or(&f64::NAN),
        trace.last().unwrap_or(&f64::NAN),
        out.display(),
        out.join("final").display()
    );
    if let Some(p) = report_path {
        emit_report(&loss_report(cfg, &trace), format, p)?;
    }
    Ok(())
}

/// The decode prompt: explicit tokens when configured, otherwise drawn
/// from the run seed.
fn decode_prompt(cfg: &RunConfig, vocab: usize) -> anyhow::Result<Vec<usize>> {
    if !cfg.decode.prompt.is_empty() {
        for &t in &cfg.decode.prompt {
            if t >= vocab {
                bail!("decode.prompt: token {t} outside vocabulary of {vocab}");
            }
        }
        return Ok(cfg.decode.prompt.clone());
    }
    let mut prng = Prng::new(cfg.seed ^ STREAM_PROMPT);
    Ok((0..cfg.decode.prompt_len).map(|_| prng.below(vocab)).collect())
}

fn write_tokens(path: &Path, tokens: &[usize]) -> anyhow::Result<()> {
    let mut text = String::new();
    for t in tokens {
        text.push_str(&t.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| anyhow!("writing {}: {e}", path.display()))
}

fn cmd_decode(cfg: &RunConfig, base_ckpt: &Path, out: &Path) -> anyhow::Result<()> {
    let base: BaseLM<f32> = load_base(base_ckpt).context("loading base checkpoint")?;
    let prompt = decode_prompt(cfg, base.config().vocab)?;
    let tokens = base.decode_greedy(&prompt, cfg.decode.max_tokens)?;
    write_tokens(out, &tokens)?;
    say!("decoded {} tokens to {}", tokens.len(), out.display());
    Ok(())
}

fn cmd_sd_decode(
    cfg: &RunConfig,
    base_ckpt: &Path,
    draft_ckpt: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let base: BaseLM<f32> = load_base(base_ckpt).context("loading base checkpoint")?;
    let sf: SpecFormer<f32> = load_specformer(draft_ckpt).context("loading draft checkpoint")?;
    let prompt = decode_prompt(cfg, base.config().vocab)?;
    let (tokens, stats) = sd_decode(&base, &sf, &prompt, cfg.decode.max_tokens)?;
    write_tokens(out, &tokens)?;
    say!(
        "decoded {} tokens in {} verify steps (a = {:.4}, kappa = {:.4}) to {}",
        tokens.len(),
        stats.steps,
        stats.a,
        stats.kappa,
        out.display()
    );
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    base_ckpt: &Path,
    draft_ckpt: &Path,
    seeds: Option<usize>,
    out: Option<&Path>,
    format: Format,
) -> anyhow::Result<()> {
    let base: BaseLM<f32> = load_base(base_ckpt).context("loading base checkpoint")?;
    let sf: SpecFormer<f32> = load_specformer(draft_ckpt).context("loading draft checkpoint")?;
    let vocab = base.config().vocab;
    let l_d = sf.config().l_d;
    let n_prompts = seeds.unwrap_or(cfg.bench.seeds);
    if n_prompts == 0 {
        bail!("bench.seeds: must be >= 1");
    }

    let mut columns = vec![
        "prompt_seed".to_owned(),
        "prompt_len".to_owned(),
        "max_tokens".to_owned(),
        "steps".to_owned(),
        "emitted".to_owned(),
        "a".to_owned(),
        "kappa".to_owned(),
    ];
    for m in 0..=l_d {
        columns.push(format!("matched_{m}"));
    }
    let mut rep = Report {
        meta: meta_for(cfg),
        columns,
        rows: Vec::new(),
    };

    let root = Prng::new(cfg.seed ^ STREAM_PROMPT);
    for i in 0..n_prompts {
        let mut prng = root.derive(i as u64);
        let prompt: Vec<usize> =
            (0..cfg.bench.prompt_len).map(|_| prng.below(vocab)).collect();
        let (_, stats) = sd_decode(&base, &sf, &prompt, cfg.bench.max_tokens)?;
        // kappa from the *rounded* a so the table recomputes exactly.
        let a6 = report::round6(stats.a);
        let kappa6 = analytics::kappa(a6, stats.l_d, stats.k)?;
        let mut row = vec![
            Cell::Int(i as i64),
            Cell::Int(cfg.bench.prompt_len as i64),
            Cell::Int(cfg.bench.max_tokens as i64),
            Cell::Int(stats.steps as i64),
            Cell::Int(stats.tokens_emitted as i64),
            Cell::Float(a6),
            Cell::Float(kappa6),
        ];
        row.extend(stats.matched_hist.iter().map(|&c| Cell::Int(c as i64)));
        rep.push_row(row);
    }

    match out {
        Some(p) => {
            emit_report(&rep, format, p)?;
            say!("benchmarked {} prompts -> {}", n_prompts, p.display());
        }
        None => emit_stdout(format_args!("{}", rep.render(format))),
    }
    Ok(())
}

fn cmd_roofline(
    cfg: &RunConfig,
    chip_path: Option<&Path>,
    model_params: Option<f64>,
    out: Option<&Path>,
    format: Format,
) -> anyhow::Result<()> {
    let chip = match chip_path {
        Some(p) => ChipSpec::from_file(p)?,
        None => ChipSpec::a100_80g(),
    };
    let rl = &cfg.roofline;
    let m = model_params.unwrap_or(rl.model_params);
    if !(m > 0.0 && m.is_finite()) {
        bail!("model_params: must be a positive finite number, got {m}");
    }
    let (m_s, m_p) = SpecFormer::<f32>::param_formula(rl.draft_d_h, rl.draft_d_ff);
    let report = RooflineReport::build(
        &chip,
        m,
        rl.bytes_per_param,
        m_s as f64,
        m_p as f64,
        rl.draft_l_d,
        rl.a,
        rl.k,
        rl.batch_size,
    )?;
    let plateau = chip.peak_flops / (2.0 * m);
    say!("chip = {}", chip.name);
    say!("model_params = {m:.0}");
    say!("bytes_per_param = {}", rl.bytes_per_param);
    say!("ai_m = {:.6}", report.ai_m);
    say!("ai_c = {:.6}", report.ai_c);
    say!("rho = {:.6}", report.rho);
    say!("p = {:.6}", report.p);
    say!("r1 = {:.6}", report.r1);
    say!("r2 = {}", report.r2);
    say!("feasible = {}", report.feasible);
    say!("crossover_tokens = {:.6}", report.rho);
    say!("plateau_tps = {plateau:.6}");

    if let Some(p) = out {
        let mut curve = Report::new(meta_for(cfg), vec!["tokens_in_flight", "tps"]);
        for tokens in 1..=rl.max_tokens {
            let tps = analytics::roofline_throughput(&chip, m, rl.bytes_per_param, tokens)?;
            curve.push_row(vec![Cell::Int(tokens as i64), Cell::Float(tps)]);
        }
        emit_report(&curve, format, p)?;
        say!("curve data ({} points) -> {}", rl.max_tokens, p.display());
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, seeds: Option<usize>) -> anyhow::Result<()> {
    let n_seeds = seeds.unwrap_or(cfg.gradcheck.seeds);
    if n_seeds == 0 {
        bail!("gradcheck.seeds: must be >= 1");
    }
    let tol = cfg.gradcheck.tolerance;
    let h = cfg.gradcheck.step;
    let mut worst_by_op: Vec<(String, f64)> = Vec::new();
    for s in 0..n_seeds {
        let seed = cfg.seed.wrapping_add(s as u64);
        for check in check_all_ops(seed, h)? {
            match worst_by_op.iter_mut().find(|(op, _)| *op == check.op) {
                Some((_, e)) => *e = e.max(check.max_err),
                None => worst_by_op.push((check.op.to_owned(), check.max_err)),
            }
        }
    }
    let mut full_worst = 0.0f64;
    for s in 0..n_seeds {
        full_worst = full_worst.max(check_draft_loss(cfg.seed.wrapping_add(s as u64), h)?);
    }

    let mut failed = false;
    for (op, err) in &worst_by_op {
        let ok = *err <= tol;
        failed |= !ok;
        say!("op {op}: max_rel_err {err:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    let ok = full_worst <= tol;
    failed |= !ok;
    say!(
        "full draft loss: max_rel_err {full_worst:.3e} {}",
        if ok { "ok" } else { "FAIL" }
    );
    if failed {
        bail!("gradient check exceeded tolerance {tol:.1e}");
    }
    say!(
        "gradcheck passed: {} ops x {n_seeds} seeds + full draft loss, tolerance {tol:.1e}",
        worst_by_op.len()
    );
    Ok(())
}
