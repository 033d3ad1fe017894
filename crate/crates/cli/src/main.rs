//! `g2r`: command-line driver for the G2R pipeline.
//!
//! Any configuration key can be passed as a flag of the same name, e.g.
//! `--learning_rate 0.005` or `--index_kind=exact`, anywhere on the command
//! line. Flags override `--config`, which overrides the defaults.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use g2r::augment::augment_with_retriever;
use g2r::biencoder::EncoderParams;
use g2r::corpus::{build_response_set, corpus_stats, load_dataset, tokenize, Context, ResponseSet, Split, Vocab};
use g2r::metrics::metrics_report;
use g2r::mips::{bench_latency, random_gaussian_vectors, recall, BenchOutput, IndexKind, MipsIndex};
use g2r::pipeline::{self, files, Config, RunDir, Served, KEYS};
use g2r::rng::derive_seed;
use g2r::serve::{chat_repl, embed_responses};
use g2r::teacher::{sample_response, SamplingConfig, TeacherLM};
use g2r::train::hits_at;
use g2r::G2rError;

#[derive(Parser, Debug)]
#[command(
    name = "g2r",
    version,
    about = "Generative-to-retrieval distillation pipeline",
    after_help = "Any configuration key is also a flag: --<key> <value> or --<key>=<value>."
)]
struct Cli {
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "G2R_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,
    /// Skip artifact hash checks.
    #[arg(long, global = true)]
    force: bool,
    /// Print JSON only, no tables.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus generation and statistics.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Train, sample from, or score with the teacher LM.
    Teacher {
        #[command(subcommand)]
        cmd: TeacherCmd,
    },
    /// Build the augmented dataset and response set.
    Augment {
        #[command(subcommand)]
        cmd: AugmentCmd,
    },
    /// Train or evaluate the retriever.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Build, query, or measure the response index.
    Index {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Latency benchmarks.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Response-diversity metrics.
    Metrics {
        #[command(subcommand)]
        cmd: MetricsCmd,
    },
    /// Interactive chat over the built index; reads turns from stdin.
    Chat {
        /// Read turns from this file instead of stdin.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Print `-` instead of measured latencies.
        #[arg(long)]
        no_latency: bool,
    },
    /// Run every stage from corpus to index.
    Pipeline,
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Write train/valid/test splits (synthetic unless `corpus_path` is set).
    Synth,
    /// Response-set statistics.
    Stats {
        /// Dataset JSONL whose responses to describe; defaults to the train split.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum TeacherCmd {
    Train,
    /// Sample responses for a context.
    Sample {
        /// One context turn; repeat for several.
        #[arg(long = "context", required = true)]
        turns: Vec<String>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        min_len: usize,
    },
    /// LL and MI scores of a response.
    Score {
        #[arg(long = "context", required = true)]
        turns: Vec<String>,
        #[arg(long)]
        response: String,
    },
}

#[derive(Subcommand, Debug)]
enum AugmentCmd {
    Run,
    /// Append the trained retriever's top-m responses per context.
    Retriever {
        #[arg(long, default_value_t = 1)]
        m: usize,
    },
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    Run,
    /// Hits@1/K and Hits@5/K of the trained encoder.
    Eval {
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
enum IndexCmd {
    Build,
    Query {
        #[arg(long = "context", required = true)]
        turns: Vec<String>,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
    },
    /// Recall of the built index against exact search, using test contexts as queries.
    Recall {
        #[arg(long, default_value_t = 1)]
        top_n: usize,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Per-query latency. Uses the run directory unless `--synthetic-n` is given.
    Latency {
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Benchmark random Gaussian vectors of this count instead.
        #[arg(long)]
        synthetic_n: Option<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
}

#[derive(Subcommand, Debug)]
enum MetricsCmd {
    /// Dist-2, Dist-3 and length, one retrieved response per context.
    Dist {
        /// Score the responses of this dataset JSONL instead of retrieving.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
}

struct App {
    cfg: Config,
    run: RunDir,
    quiet: bool,
}

impl App {
    fn emit<T: Serialize>(&self, name: Option<&str>, value: &T, table: &[(&str, String)]) -> Result<()> {
        let json = serde_json::to_string_pretty(value)? + "\n";
        if let Some(name) = name {
            let p = self.run.path(name);
            std::fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
        }
        let mut out = io::stdout().lock();
        if self.quiet {
            out.write_all(json.as_bytes())?;
        } else {
            let w = table.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in table {
                writeln!(out, "{k:<w$}  {v}")?;
            }
        }
        Ok(())
    }
}

type Overrides = Vec<(String, String)>;

/// Splits `--<config key> value` pairs out of the raw arguments.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").map(|k| k.split_once('=').map_or(k, |(k, _)| k));
        match key {
            Some(k) if k != "seed" && KEYS.iter().any(|(name, _, _)| *name == k) => {
                let value = match a.split_once('=') {
                    Some((_, v)) => v.to_string(),
                    None => it.next().with_context(|| format!("--{k} needs a value"))?,
                };
                overrides.push((k.to_string(), value));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn context_of(turns: &[String], cfg: &Config) -> Result<Context> {
    Ok(Context::with_max_turns(
        turns.iter().map(|t| tokenize(t)).collect(),
        cfg.get("max_turns")?,
    )?)
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<G2rError>().map_or("cli", G2rError::kind);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": kind, "message": msg }));
            ExitCode::FAILURE
        }
    }
}

fn run(args: Vec<String>) -> Result<()> {
    let (args, overrides) = extract_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => bail!("{}", e.to_string().lines().next().unwrap_or("bad arguments")),
    };
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    let mut run = RunDir::open(&cli.run_dir)?;
    run.force = cli.force;
    let mut app = App {
        cfg,
        run,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Corpus { cmd } => corpus(&mut app, cmd),
        Command::Teacher { cmd } => teacher(&mut app, cmd),
        Command::Augment { cmd } => augment(&mut app, cmd),
        Command::Train { cmd } => train(&mut app, cmd),
        Command::Index { cmd } => index(&mut app, cmd),
        Command::Bench { cmd } => bench(&mut app, cmd),
        Command::Metrics { cmd } => metrics(&mut app, cmd),
        Command::Chat { script, no_latency } => chat(&app, script, no_latency),
        Command::Pipeline => {
            let r = pipeline::run_all(&mut app.run, &app.cfg)?;
            app.emit(None, &r, &train_table(&r))
        }
    }
}

fn corpus(app: &mut App, cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Synth => {
            let [tr, va, te] = pipeline::stage_corpus(&mut app.run, &app.cfg)?;
            let sizes = serde_json::json!({ "train": tr.len(), "valid": va.len(), "test": te.len() });
            app.emit(
                None,
                &sizes,
                &[
                    ("train pairs", tr.len().to_string()),
                    ("valid pairs", va.len().to_string()),
                    ("test pairs", te.len().to_string()),
                ],
            )
        }
        CorpusCmd::Stats { file } => {
            let path = match file {
                Some(p) => p,
                None => app.run.check(files::TRAIN, &app.cfg)?,
            };
            let stats = corpus_stats(&build_response_set(&load_dataset(&path, Split::Train)?))?;
            app.emit(
                Some("corpus_stats.json"),
                &stats,
                &[
                    ("responses", stats.n_responses.to_string()),
                    ("avg length", fmt(stats.avg_length)),
                    ("unique tokens", stats.unique_tokens.to_string()),
                    ("unique bigrams", stats.unique_bigrams.to_string()),
                    ("unique trigrams", stats.unique_trigrams.to_string()),
                ],
            )
        }
    }
}

fn teacher(app: &mut App, cmd: TeacherCmd) -> Result<()> {
    if let TeacherCmd::Train = cmd {
        let lm = pipeline::stage_teacher(&mut app.run, &app.cfg)?;
        let info = serde_json::json!({ "vocab": lm.vocab().len(), "fingerprint": lm.fingerprint() });
        return app.emit(
            None,
            &info,
            &[
                ("vocabulary", lm.vocab().len().to_string()),
                ("fingerprint", lm.fingerprint()),
            ],
        );
    }
    let lm = TeacherLM::load(app.run.check(files::TEACHER, &app.cfg)?)?;
    match cmd {
        TeacherCmd::Train => unreachable!(),
        TeacherCmd::Sample { turns, n, min_len } => {
            let ctx = context_of(&turns, &app.cfg)?;
            let base = derive_seed(app.cfg.seed()?, 6);
            let samples = (0..n as u64)
                .map(|j| {
                    let s = SamplingConfig {
                        top_k: app.cfg.get("top_k")?,
                        min_len,
                        max_len: app.cfg.get("max_len")?,
                        block_context_trigrams: app.cfg.get("block_context_trigrams")?,
                        block_response_trigrams: app.cfg.get("block_response_trigrams")?,
                        seed: derive_seed(base, j),
                    };
                    Ok(g2r::corpus::detokenize(&sample_response(&lm, &ctx, &s)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let table: Vec<(&str, String)> = samples.iter().map(|s| ("sample", s.clone())).collect();
            app.emit(None, &samples, &table)
        }
        TeacherCmd::Score { turns, response } => {
            let ctx = context_of(&turns, &app.cfg)?;
            let r = tokenize(&response);
            let mean = serde_json::from_value(serde_json::Value::String(app.cfg.get_str("mi_mean").into()))
                .context("mi_mean must be log or prob")?;
            let s = lm.score(&ctx, &r, Some(mean))?;
            let mi = s.mi.map(fmt).unwrap_or_default();
            app.emit(None, &s, &[("ll", fmt(s.ll)), ("mi", mi)])
        }
    }
}

fn augment(app: &mut App, cmd: AugmentCmd) -> Result<()> {
    match cmd {
        AugmentCmd::Run => {
            let r = pipeline::stage_augment(&mut app.run, &app.cfg)?;
            app.emit(
                None,
                &r,
                &[
                    ("generated", r.n_generated.to_string()),
                    ("kept after dedup", r.n_kept_after_dedup.to_string()),
                    ("response set ratio", fmt(r.set_ratio)),
                    ("avg length ratio", fmt(r.ratios.avg_length)),
                    ("unique token ratio", fmt(r.ratios.unique_tokens)),
                    ("unique bigram ratio", fmt(r.ratios.unique_bigrams)),
                    ("unique trigram ratio", fmt(r.ratios.unique_trigrams)),
                ],
            )
        }
        AugmentCmd::Retriever { m } => {
            let cfg = &app.cfg;
            let mut ds = load_dataset(app.run.check(files::TRAIN, cfg)?, Split::Train)?;
            ds.set_max_turns(cfg.get("max_turns")?)?;
            let base = ResponseSet::load(app.run.check(files::RESPONSES, cfg)?)?;
            let vocab = Vocab::load(app.run.check(files::VOCAB, cfg)?)?;
            let params = EncoderParams::load(app.run.check(files::PARAMS, cfg)?)?;
            let dr = augment_with_retriever(&params, &vocab, &ds, &base, m)?;
            dr.save(app.run.path("dr.jsonl"))?;
            let info = serde_json::json!({ "pairs": dr.len(), "original": ds.len(), "m": m });
            app.emit(
                None,
                &info,
                &[("pairs", dr.len().to_string()), ("original pairs", ds.len().to_string())],
            )
        }
    }
}

fn train_table(r: &pipeline::TrainReport) -> Vec<(&'static str, String)> {
    vec![
        ("steps", r.steps.to_string()),
        ("best valid hits@1", fmt(r.best_valid_hits1)),
        ("best epoch", r.best_epoch.to_string()),
        ("test hits@1", fmt(r.test_hits1)),
        ("test hits@5", fmt(r.test_hits5)),
    ]
}

fn train(app: &mut App, cmd: TrainCmd) -> Result<()> {
    match cmd {
        TrainCmd::Run => {
            let r = pipeline::stage_train(&mut app.run, &app.cfg)?;
            app.emit(None, &r, &train_table(&r))
        }
        TrainCmd::Eval { split } => {
            let cfg = &app.cfg;
            let (name, sp) = match split {
                EvalSplit::Valid => (files::VALID, Split::Valid),
                EvalSplit::Test => (files::TEST, Split::Test),
            };
            let mut ds = load_dataset(app.run.check(name, cfg)?, sp)?;
            ds.set_max_turns(cfg.get("max_turns")?)?;
            let vocab = Vocab::load(app.run.check(files::VOCAB, cfg)?)?;
            let params = EncoderParams::load(app.run.check(files::PARAMS, cfg)?)?;
            let k: usize = cfg.get("eval_k")?;
            let seed: u64 = cfg.get("eval_seed")?;
            let h1 = hits_at(&params, &vocab, &ds, k, 1, seed)?;
            let h5 = hits_at(&params, &vocab, &ds, k, 5.min(k), seed)?;
            let out = serde_json::json!({ "k": k, "hits1": h1, "hits5": h5 });
            app.emit(None, &out, &[("hits@1", fmt(h1)), ("hits@5", fmt(h5)), ("K", k.to_string())])
        }
    }
}

fn test_queries(app: &App, served: &Served) -> Result<Vec<Vec<f32>>> {
    let mut test = load_dataset(app.run.check(files::TEST, &app.cfg)?, Split::Test)?;
    test.set_max_turns(app.cfg.get("max_turns")?)?;
    test.pairs
        .iter()
        .map(|p| {
            Ok(served
                .params
                .encode_context_ids(&served.vocab.context_ids(&p.context))?
                .into_iter()
                .map(|x| x as f32)
                .collect())
        })
        .collect()
}

fn index(app: &mut App, cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build => {
            let idx = pipeline::stage_index(&mut app.run, &app.cfg)?;
            let info = serde_json::json!({ "kind": idx.kind(), "n": idx.len(), "dim": idx.dim() });
            app.emit(
                None,
                &info,
                &[
                    ("kind", format!("{:?}", idx.kind()).to_lowercase()),
                    ("vectors", idx.len().to_string()),
                    ("dimension", idx.dim().to_string()),
                ],
            )
        }
        IndexCmd::Query { turns, top_n } => {
            let served = Served::load(&app.run, &app.cfg)?;
            served.responder(&app.cfg, app.run.force)?;
            let ctx = context_of(&turns, &app.cfg)?;
            let q: Vec<f32> = served
                .params
                .encode_context_ids(&served.vocab.context_ids(&ctx))?
                .into_iter()
                .map(|x| x as f32)
                .collect();
            let hits = served.index.query(&q, top_n, app.cfg.get("ef_search")?)?;
            let rows: Vec<serde_json::Value> = hits
                .iter()
                .map(|h| {
                    serde_json::json!({
                        "response_id": h.response_id,
                        "score": h.score,
                        "response": g2r::corpus::detokenize(served.set.get(h.response_id as usize).unwrap_or(&[])),
                    })
                })
                .collect();
            let ids: Vec<String> = hits.iter().map(|h| h.response_id.to_string()).collect();
            let table: Vec<(&str, String)> = rows
                .iter()
                .zip(&ids)
                .map(|(r, id)| (id.as_str(), format!("{:.4}  {}", r["score"], r["response"].as_str().unwrap())))
                .collect();
            app.emit(None, &rows, &table)
        }
        IndexCmd::Recall { top_n } => {
            let served = Served::load(&app.run, &app.cfg)?;
            let queries = test_queries(app, &served)?;
            let data = embed_responses(&served.params, &served.vocab, &served.set)?;
            let exact = MipsIndex::exact_flat(data, served.params.dim())?;
            let r = recall(&served.index, &exact, &queries, top_n, app.cfg.get("ef_search")?)?;
            app.emit(
                Some("recall.json"),
                &r,
                &[
                    ("recall", fmt(r.recall)),
                    ("top_n", r.top_n.to_string()),
                    ("ef_search", r.ef_search.to_string()),
                    ("queries", r.queries.to_string()),
                ],
            )
        }
    }
}

fn bench(app: &mut App, cmd: BenchCmd) -> Result<()> {
    let BenchCmd::Latency {
        warmup,
        iters,
        synthetic_n,
        dim,
    } = cmd;
    let ef: usize = app.cfg.get("ef_search")?;
    let out = match synthetic_n {
        Some(n) => {
            let seed = app.cfg.seed()?;
            let data: Vec<f32> = random_gaussian_vectors(derive_seed(seed, 7), n, dim).concat();
            let queries = random_gaussian_vectors(derive_seed(seed, 8), iters.max(1), dim);
            let kind = app.cfg.index_kind()?;
            let exact = MipsIndex::exact_flat(data.clone(), dim)?;
            let index = match kind {
                IndexKind::Exact => exact.clone(),
                IndexKind::Hnsw => MipsIndex::hnsw_flat(data, dim, app.cfg.hnsw_params()?)?,
            };
            let lat = bench_latency(&queries, warmup, iters, |q| {
                std::hint::black_box(index.query(q, 1, ef).expect("query"));
            })?;
            let rec = recall(&index, &exact, &queries, 1, ef)?;
            BenchOutput {
                n,
                dim,
                kind,
                ef_search: ef,
                mean_us: lat.mean_us,
                p50_us: lat.p50_us,
                p99_us: lat.p99_us,
                recall_at_1: Some(rec.recall),
            }
        }
        None => {
            let served = Served::load(&app.run, &app.cfg)?;
            let responder = served.responder(&app.cfg, app.run.force)?;
            let mut test = load_dataset(app.run.check(files::TEST, &app.cfg)?, Split::Test)?;
            test.set_max_turns(app.cfg.get("max_turns")?)?;
            let contexts: Vec<Context> = test.pairs.into_iter().map(|p| p.context).collect();
            let lat = bench_latency(&contexts, warmup, iters, |c| {
                std::hint::black_box(responder.respond(c).expect("respond"));
            })?;
            BenchOutput {
                n: served.index.len(),
                dim: served.index.dim(),
                kind: served.index.kind(),
                ef_search: ef,
                mean_us: lat.mean_us,
                p50_us: lat.p50_us,
                p99_us: lat.p99_us,
                recall_at_1: None,
            }
        }
    };
    let recall_cell = out.recall_at_1.map(fmt).unwrap_or_else(|| "-".into());
    app.emit(
        Some("bench.json"),
        &out,
        &[
            ("kind", format!("{:?}", out.kind).to_lowercase()),
            ("vectors", out.n.to_string()),
            ("mean us", format!("{:.1}", out.mean_us)),
            ("p50 us", format!("{:.1}", out.p50_us)),
            ("p99 us", format!("{:.1}", out.p99_us)),
            ("recall@1", recall_cell),
        ],
    )
}

fn metrics(app: &mut App, cmd: MetricsCmd) -> Result<()> {
    let MetricsCmd::Dist { file, split } = cmd;
    let responses: Vec<Vec<String>> = match file {
        Some(p) => load_dataset(&p, Split::Test)?.pairs.into_iter().map(|p| p.response).collect(),
        None => {
            let served = Served::load(&app.run, &app.cfg)?;
            let responder = served.responder(&app.cfg, app.run.force)?;
            let (name, sp) = match split {
                EvalSplit::Valid => (files::VALID, Split::Valid),
                EvalSplit::Test => (files::TEST, Split::Test),
            };
            let mut ds = load_dataset(app.run.check(name, &app.cfg)?, sp)?;
            ds.set_max_turns(app.cfg.get("max_turns")?)?;
            ds.pairs
                .iter()
                .map(|p| Ok(tokenize(&responder.respond(&p.context)?.text)))
                .collect::<Result<_>>()?
        }
    };
    let r = metrics_report(&responses)?;
    app.emit(
        Some("metrics.json"),
        &r,
        &[
            ("dist-2", fmt(r.dist2)),
            ("dist-3", fmt(r.dist3)),
            ("avg length", fmt(r.avg_length)),
            ("responses", r.n_responses.to_string()),
        ],
    )
}

fn chat(app: &App, script: Option<PathBuf>, no_latency: bool) -> Result<()> {
    let served = Served::load(&app.run, &app.cfg)?;
    let responder = served.responder(&app.cfg, app.run.force)?;
    let window: usize = app.cfg.get("window")?;
    let stdout = io::stdout().lock();
    match script {
        Some(p) => {
            let f = std::fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            chat_repl(&responder, window, io::BufReader::new(f), stdout, !no_latency)?;
        }
        None => {
            let stdin: Box<dyn BufRead> = Box::new(io::stdin().lock());
            chat_repl(&responder, window, stdin, stdout, !no_latency)?;
        }
    }
    Ok(())
}
