//! Command-line surface: corpus generation, training, decoding, evaluation,
//! and attention dumps, all driven by one key=value config file.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 config/usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsnat::data::{self, corpus_cer, Corpus, Vocab};
use tsnat::inference::{
    beam_decode, encode_utterance, greedy_result, measure_rtf, nar_graph, two_step_decode,
    DecodeConfig, DecodeResult,
};
use tsnat::model::{AttentionRecord, DecodeMode, FwdCtx, Model};
use tsnat::runconfig::RunConfig;
use tsnat::training::{self, load_checkpoint, make_ar_pair, Checkpoint};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

macro_rules! runtime {
    ($e:expr) => {
        $e.map_err(|err| CliError::runtime(err.to_string()))?
    };
}

#[derive(Parser)]
#[command(
    name = "tsnat",
    about = "Dual-mode AR/NAR transformer with two-step decoding on a synthetic pseudo-speech task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write per-epoch plus averaged checkpoints.
    Train(TrainArgs),
    /// Decode a corpus with a trained checkpoint.
    Decode(DecodeArgs),
    /// Score a decode file against reference transcripts.
    Eval(EvalArgs),
    /// Export decoder attention matrices for one utterance.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output corpus path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_utts: usize,
    /// Utterance stream to draw (0 = train); splits share the task's token
    /// templates but never an utterance.
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Also write a plain-text transcript listing here.
    #[arg(long)]
    transcripts: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train one model per α and print a summary table over the dev corpus.
    #[arg(long, value_delimiter = ',')]
    alpha_list: Option<Vec<f64>>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// greedy | twostep | arbeam
    #[arg(long)]
    mode: String,
    /// Candidate count for two-step decoding (overrides decode.n_best).
    #[arg(long)]
    n: Option<usize>,
    /// Decode once per N and print a CER/RTF sweep table (twostep only).
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Force strictly sequential decoding for RTF measurement (always on in
    /// this implementation; accepted for interface stability).
    #[arg(long)]
    rtf: bool,
    #[arg(long)]
    out: PathBuf,
    /// Corpus to decode; defaults to paths.dev_corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Decode file produced by `tsnat decode`.
    #[arg(long)]
    decoded: PathBuf,
    /// Reference corpus.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct DumpAttentionArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Utterance id to visualize.
    #[arg(long)]
    utt: String,
    #[arg(long)]
    out: PathBuf,
    /// Corpus holding the utterance; defaults to paths.dev_corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DumpAttention(args) => cmd_dump_attention(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path).map_err(|e| CliError::config(e.to_string()))?;
    cfg.apply_env_seed().map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    if !path.exists() {
        return Err(CliError::config(format!("corpus not found: {}", path.display())));
    }
    data::read_corpus(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn corpus_path<'a>(
    explicit: Option<&'a PathBuf>,
    fallback: Option<&'a PathBuf>,
    what: &str,
) -> Result<&'a PathBuf, CliError> {
    explicit
        .or(fallback)
        .ok_or_else(|| CliError::config(format!("no corpus given: pass --corpus or set {what}")))
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    if args.n_utts == 0 {
        return Err(CliError::config("--n-utts must be >= 1"));
    }
    let mut task = cfg.task.clone();
    task.split = args.split;
    let corpus = data::generate_corpus(&task, args.n_utts);
    runtime!(data::write_corpus(&args.out, &corpus));
    if let Some(tpath) = &args.transcripts {
        runtime!(data::write_transcripts(tpath, &corpus));
    }
    println!(
        "wrote {} utterances ({} task tokens, feature dim {}) to {}",
        corpus.utterances.len(),
        corpus.vocab.n_task_tokens(),
        corpus.feature_dim,
        args.out.display()
    );
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    cfg.paths
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| CliError::config("paths.checkpoint_dir is not set"))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let train_path = cfg
        .paths
        .train_corpus
        .as_ref()
        .ok_or_else(|| CliError::config("paths.train_corpus is not set"))?;
    let corpus = load_corpus(train_path)?;
    if corpus.vocab.size() != cfg.model.vocab_size || corpus.feature_dim != cfg.model.feature_dim {
        return Err(CliError::config(format!(
            "corpus ({} tokens, F={}) does not match task config ({} tokens, F={})",
            corpus.vocab.size(),
            corpus.feature_dim,
            cfg.model.vocab_size,
            cfg.model.feature_dim
        )));
    }
    let ckpt_dir = checkpoint_dir(&cfg)?;
    runtime!(fs::create_dir_all(ckpt_dir));

    match &args.alpha_list {
        None => {
            train_one(&cfg, &corpus, cfg.train.alpha, ckpt_dir)?;
            Ok(())
        }
        Some(alphas) => {
            let dev = match &cfg.paths.dev_corpus {
                Some(p) => Some(load_corpus(p)?),
                None => None,
            };
            let mut rows = String::new();
            for &alpha in alphas {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(CliError::config(format!(
                        "train.alpha must lie in [0, 1], got {alpha}"
                    )));
                }
                let sub = ckpt_dir.join(format!("alpha_{alpha:.2}"));
                runtime!(fs::create_dir_all(&sub));
                let model = train_one(&cfg, &corpus, alpha, &sub)?;
                if let Some(dev) = &dev {
                    let greedy = decode_corpus(&model, dev, "greedy", &cfg.decode)?;
                    let summary = if alpha < 1.0 && alpha > 0.0 {
                        let two = decode_corpus(&model, dev, "twostep", &cfg.decode)?;
                        format!(
                            "alpha {alpha:.2}: one-step CER {:.4}, two-step CER {:.4}",
                            greedy.cer, two.cer
                        )
                    } else {
                        format!("alpha {alpha:.2}: one-step CER {:.4}", greedy.cer)
                    };
                    println!("{summary}");
                    writeln!(rows, "{summary}").unwrap();
                }
            }
            if !rows.is_empty() {
                runtime!(fs::write(ckpt_dir.join("alpha_sweep.txt"), rows));
            }
            Ok(())
        }
    }
}

fn train_one(
    cfg: &RunConfig,
    corpus: &Corpus,
    alpha: f64,
    dir: &Path,
) -> Result<Model, CliError> {
    let mut model = runtime!(Model::new(cfg.model.clone(), cfg.seed));
    let mut tcfg = cfg.train.clone();
    tcfg.alpha = alpha;
    let metrics_path = dir.join("metrics.csv");
    if metrics_path.exists() {
        runtime!(fs::remove_file(&metrics_path));
    }
    let outcome = runtime!(training::train(
        &mut model,
        corpus,
        &tcfg,
        Some(dir),
        Some(&metrics_path),
    ));
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs (alpha {alpha}); final loss {:.4} (AR {:.4}, NAR {:.4}); averaged checkpoint: {}",
        outcome.metrics.len(),
        last.loss,
        last.l_ar,
        last.l_nar,
        dir.join("averaged.ckpt").display()
    );
    let averaged = runtime!(outcome.averaged.into_model());
    Ok(averaged)
}

struct CorpusDecode {
    lines: Vec<String>,
    cer: f64,
    rtf: f64,
}

fn render_score(s: Option<f64>) -> String {
    match s {
        Some(v) => format!("{v:.9}"),
        None => "-".to_string(),
    }
}

fn decode_corpus(
    model: &Model,
    corpus: &Corpus,
    mode: &str,
    dcfg: &DecodeConfig,
) -> Result<CorpusDecode, CliError> {
    let mut results: Vec<DecodeResult> = Vec::with_capacity(corpus.utterances.len());
    let mut first_err: Option<String> = None;
    let rtf = measure_rtf(&corpus.utterances, |u| {
        let run = || -> Result<DecodeResult, CliError> {
            let enc = runtime!(encode_utterance(model, u));
            match mode {
                "greedy" => Ok(greedy_result(&runtime!(nar_graph(model, &enc)))),
                "twostep" => Ok(runtime!(two_step_decode(model, &enc, dcfg))),
                "arbeam" => Ok(runtime!(beam_decode(model, &enc, dcfg))),
                _ => unreachable!("mode validated by caller"),
            }
        };
        // decode failures surface after the timing loop
        results.push(match run() {
            Ok(r) => r,
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(format!("{}: {}", u.id, e.message));
                }
                DecodeResult {
                    tokens: Vec::new(),
                    nar_score: None,
                    ar_score: None,
                }
            }
        });
    });
    if let Some(err) = first_err {
        return Err(CliError::runtime(err));
    }
    let lines: Vec<String> = corpus
        .utterances
        .iter()
        .zip(&results)
        .map(|(u, r)| {
            format!(
                "{}\t{}\t{}\t{}",
                u.id,
                corpus.vocab.render(&r.tokens),
                render_score(r.nar_score),
                render_score(r.ar_score)
            )
        })
        .collect();
    let pairs = corpus
        .utterances
        .iter()
        .zip(&results)
        .map(|(u, r)| (r.tokens.as_slice(), u.transcript.as_slice()));
    let cer = runtime!(corpus_cer(pairs));
    Ok(CorpusDecode { lines, cer, rtf })
}

fn cmd_decode(args: DecodeArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    match args.mode.as_str() {
        "greedy" | "twostep" | "arbeam" => {}
        other => {
            return Err(CliError::config(format!(
                "unknown mode {other:?} (greedy|twostep|arbeam)"
            )))
        }
    }
    if args.n.is_some() && args.mode != "twostep" {
        return Err(CliError::config(format!(
            "--n applies to twostep decoding only, not {:?}",
            args.mode
        )));
    }
    if args.n_list.is_some() && args.mode != "twostep" {
        return Err(CliError::config("--n-list applies to twostep decoding only"));
    }
    let ckpt = runtime!(load_checkpoint(&args.checkpoint));
    let model = runtime!(ckpt.into_model());
    let corpus = load_corpus(corpus_path(
        args.corpus.as_ref(),
        cfg.paths.dev_corpus.as_ref(),
        "paths.dev_corpus",
    )?)?;
    if corpus.vocab.size() != model.cfg.vocab_size {
        return Err(CliError::config(
            "corpus vocabulary does not match the checkpoint",
        ));
    }

    let mut dcfg = cfg.decode.clone();
    if let Some(n) = args.n {
        if n == 0 {
            return Err(CliError::config("--n must be >= 1"));
        }
        dcfg.n_best = n;
    }

    if let Some(n_list) = &args.n_list {
        let mut table = String::from("n\tcer\trtf\n");
        for &n in n_list {
            if n == 0 {
                return Err(CliError::config("--n-list entries must be >= 1"));
            }
            let mut cur = dcfg.clone();
            cur.n_best = n;
            let out = decode_corpus(&model, &corpus, "twostep", &cur)?;
            let path = args.out.with_extension(format!("n{n}"));
            runtime!(fs::write(&path, out.lines.join("\n") + "\n"));
            writeln!(table, "{n}\t{:.4}\t{:.4}", out.cer, out.rtf).unwrap();
        }
        print!("{table}");
        return Ok(());
    }

    let out = decode_corpus(&model, &corpus, &args.mode, &dcfg)?;
    runtime!(fs::write(&args.out, out.lines.join("\n") + "\n"));
    println!(
        "decoded {} utterances mode={} cer={:.4} rtf={:.4}",
        corpus.utterances.len(),
        args.mode,
        out.cer,
        out.rtf
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let text = runtime!(fs::read_to_string(&args.decoded));
    let mut pairs: Vec<(Vec<u32>, Vec<u32>, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .ok_or_else(|| CliError::runtime(format!("line {}: missing id", i + 1)))?;
        let hyp_text = fields.next().unwrap_or("");
        let utt = corpus
            .get(id)
            .ok_or_else(|| CliError::runtime(format!("unknown utterance id {id:?}")))?;
        let hyp = runtime!(corpus.vocab.parse(hyp_text));
        pairs.push((hyp, utt.transcript.clone(), id.to_string()));
    }
    if pairs.is_empty() {
        return Err(CliError::runtime("decode file holds no hypotheses"));
    }
    for (hyp, reference, id) in &pairs {
        let c = runtime!(data::cer(hyp, reference));
        println!("{id}\tcer={c:.4}");
    }
    let total = runtime!(corpus_cer(
        pairs.iter().map(|(h, r, _)| (h.as_slice(), r.as_slice()))
    ));
    println!("TOTAL\tcer={total:.4}\tutterances={}", pairs.len());
    Ok(())
}

fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(0.0, f64::max);
        for &v in row {
            let px = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
            bytes.push(px);
        }
    }
    std::fs::write(path, bytes)
}

fn write_csv(path: &Path, rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v:.12e}"))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn cmd_dump_attention(args: DumpAttentionArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let ckpt: Checkpoint = runtime!(load_checkpoint(&args.checkpoint));
    let model = runtime!(ckpt.into_model());
    let corpus = load_corpus(corpus_path(
        args.corpus.as_ref(),
        cfg.paths.dev_corpus.as_ref(),
        "paths.dev_corpus",
    )?)?;
    let utt = corpus
        .get(&args.utt)
        .ok_or_else(|| CliError::runtime(format!("utterance {:?} not in corpus", args.utt)))?;
    runtime!(fs::create_dir_all(&args.out));

    for mode in [DecodeMode::Ar, DecodeMode::Nar] {
        let mut ctx = FwdCtx::eval(&model.params);
        ctx.record_attn = true;
        let (enc, _) = runtime!(model.encode_utterance(&mut ctx, &utt.frames_f64(), utt.n_frames));
        let tokens = match mode {
            DecodeMode::Ar => runtime!(make_ar_pair(&utt.transcript)).0,
            DecodeMode::Nar => vec![Vocab::MASK; utt.transcript.len() + 1],
        };
        let (_, record) = runtime!(model.decoder_forward(&mut ctx, &tokens, enc, mode));
        let tag = match mode {
            DecodeMode::Ar => "ar",
            DecodeMode::Nar => "nar",
        };
        for (kind, tensor) in [
            ("self", record.self_attn.last().expect("decoder has layers")),
            ("cross", record.cross_attn.last().expect("decoder has layers")),
        ] {
            let (rows, cols, mean) = AttentionRecord::head_mean(tensor);
            let base = args.out.join(format!("{}_{tag}_{kind}", args.utt));
            runtime!(write_csv(&base.with_extension("csv"), rows, cols, &mean));
            runtime!(write_pgm(&base.with_extension("pgm"), rows, cols, &mean));
        }
    }
    println!(
        "wrote attention matrices for {:?} (last decoder block, both modes) to {}",
        args.utt,
        args.out.display()
    );
    Ok(())
}
