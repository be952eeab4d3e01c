//! `omni-moe`: train, evaluate, analyze and inspect MoE CTC encoders.
//!
//! Exit codes: 0 success, 1 other failure (including divergence), 2 config
//! error, 3 data error, 4 checkpoint error, 5 routing analysis on a dense
//! model.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use omni_moe::analytics::{self, RouteDump};
use omni_moe::data::synth;
use omni_moe::data::{load_corpus, save_corpus};
use omni_moe::data::{Tokenizer, Utterance};
use omni_moe::encoder::{load_checkpoint, save_checkpoint};
use omni_moe::encoder::{Model, Variant};
use omni_moe::train::{self, evaluate, TrainLog};
use omni_moe::Error;

use config::{ConfigError, RunConfig, OUTPUT_ENV, SCHEMA};

const SMOOTHING_WINDOW: usize = 50;

#[derive(Parser)]
#[command(
    name = "omni-moe",
    version,
    about = "Mixture-of-experts CTC encoders with shared routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more variants: `train [--config FILE] [--KEY VALUE]...`.
    Train {
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            num_args = 0..,
            value_name = "--KEY VALUE"
        )]
        overrides: Vec<String>,
    },
    /// Greedy-decoding WER of a checkpoint on a corpus, as JSON on stdout.
    Evaluate {
        #[command(flatten)]
        input: ModelInput,
    },
    /// Routing diagnostics.
    Analyze {
        #[command(subcommand)]
        analysis: Analysis,
    },
    /// Parameter counts, router sharing and configuration of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// List every configuration key.
    Schema,
}

#[derive(Args, Clone)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory containing manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1600)]
    batch_max_frames: usize,
}

#[derive(Args, Clone)]
struct OutputDir {
    /// Defaults to $OMNI_MOE_OUTPUT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutputDir {
    fn resolve(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
        })
    }
}

/// Either a checkpoint plus corpus, or a previous `analyze routes` output.
#[derive(Args, Clone)]
struct RouteSource {
    #[arg(long, required_unless_present = "from_dump")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_dump")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1600)]
    batch_max_frames: usize,
    /// Directory written by `analyze routes`.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    from_dump: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analysis {
    /// Dump per-frame routing decisions, frame symbols and aligned usage maps.
    Routes {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        out: OutputDir,
    },
    /// Cramér's V between every pair of adjacent MoE layers.
    Cramers {
        #[command(flatten)]
        source: RouteSource,
        #[command(flatten)]
        out: OutputDir,
    },
    /// Expert entropy of the most frequent frame symbols.
    Entropy {
        #[command(flatten)]
        source: RouteSource,
        #[command(flatten)]
        out: OutputDir,
        /// Number of symbol groups (default: min(100, vocabulary size)).
        #[arg(long)]
        top_k: Option<usize>,
        /// Average router probabilities instead of counting assignments.
        #[arg(long)]
        use_probs: bool,
    },
    /// WER change under random expert reassignment.
    Permute {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        out: OutputDir,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.3, 0.5])]
        p: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw replacements from the other experts only.
        #[arg(long)]
        exclude_original: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(Error),
    #[error("{0}")]
    NotMoe(String),
    #[error("{0}")]
    Other(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Checkpoint(_) => 4,
            Failure::NotMoe(_) => 5,
            Failure::Other(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Other(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn data_err(e: Error) -> Failure {
    Failure::Data(e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { overrides } => cmd_train(&overrides),
        Command::Evaluate { input } => cmd_evaluate(&input),
        Command::Analyze { analysis } => cmd_analyze(analysis),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
        Command::Schema => {
            for (k, d) in SCHEMA {
                println!("{k:<22} {d}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    load_checkpoint(path).map_err(Failure::Checkpoint)
}

fn load_data(
    dir: &Path,
    tokenizer: &Tokenizer,
    feat_dim: Option<usize>,
) -> CliResult<Vec<Utterance>> {
    let utts = load_corpus(dir).map_err(data_err)?;
    if utts.is_empty() {
        return Err(Failure::Data(Error::Contract(format!(
            "corpus {} is empty",
            dir.display()
        ))));
    }
    for u in &utts {
        tokenizer.encode(&u.transcript).map_err(data_err)?;
        if let Some(fd) = feat_dim.filter(|&fd| fd != u.feat_dim) {
            return Err(Failure::Data(Error::Integrity {
                id: u.id.clone(),
                reason: format!("feat_dim {} but the model expects {fd}", u.feat_dim),
            }));
        }
    }
    Ok(utts)
}

fn require_moe(model: &Model<f32>) -> CliResult<()> {
    if model.config.variant.is_moe() {
        Ok(())
    } else {
        Err(Failure::NotMoe(format!(
            "routing analyses need an MoE checkpoint, this one is {}",
            model.config.variant
        )))
    }
}

fn cmd_train(args: &[String]) -> CliResult<()> {
    let cfg = RunConfig::from_args(args)?;
    let tokenizer = Tokenizer::synthetic(cfg.synth_spec.alphabet_size).map_err(|e| {
        ConfigError::Inconsistent {
            key: "synth_alphabet".into(),
            reason: e.to_string(),
        }
    })?;
    let (train_set, heldout) = if cfg.synth {
        let mut all = synth::generate(&cfg.synth_spec, cfg.synth_utterances).map_err(data_err)?;
        let heldout = all.split_off(cfg.synth_utterances - cfg.synth_heldout);
        (all, Some(heldout))
    } else {
        let train_dir = cfg.train_data.as_deref().expect("validated");
        let train_set = load_data(train_dir, &tokenizer, None)?;
        let heldout = match &cfg.heldout_data {
            Some(d) => Some(load_data(d, &tokenizer, Some(train_set[0].feat_dim))?),
            None => None,
        };
        (train_set, heldout)
    };
    if let Some(u) = train_set
        .iter()
        .find(|u| u.feat_dim != train_set[0].feat_dim)
    {
        return Err(Failure::Data(Error::Integrity {
            id: u.id.clone(),
            reason: "feat_dim differs within the training corpus".into(),
        }));
    }
    let feat_dim = train_set[0].feat_dim;

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.conf"), cfg.render())?;
    if cfg.synth {
        if let Some(h) = &heldout {
            save_corpus(out.join("heldout"), h)?;
        }
    }

    let mut summaries = Vec::new();
    for &variant in &cfg.variants {
        let mc = cfg.model_for(variant, tokenizer.vocab_size(), feat_dim);
        let dir = out.join(variant.as_str());
        std::fs::create_dir_all(&dir)?;
        log::info!(
            "training {variant}: {} parameters, {} steps",
            mc.symbolic_param_count().total,
            cfg.train.max_steps
        );
        let model = Model::build(mc, cfg.train.seed).map_err(|e| {
            Failure::Config(ConfigError::Inconsistent {
                key: "model".into(),
                reason: e.to_string(),
            })
        })?;
        let (every, log_every) = (cfg.checkpoint_every, cfg.log_every);
        let (model, log) = train::train(model, &cfg.train, &train_set, &tokenizer, |m, r| {
            if log_every > 0 && r.step % log_every == 0 {
                log::info!(
                    "{variant} step {} lr {:.3e} ctc {:.4} load {:.4} grad_norm {:.3}",
                    r.step,
                    r.lr,
                    r.ctc_loss,
                    r.load_balance_loss,
                    r.grad_norm
                );
            }
            if every > 0 && r.step % every == 0 && r.step < cfg.train.max_steps {
                save_checkpoint(m, dir.join(format!("checkpoint_step{}.bin", r.step)))?;
            }
            Ok(())
        })
        .map_err(|e| match e {
            Error::Vocabulary(_) | Error::Integrity { .. } => Failure::Data(e),
            other => Failure::Other(other),
        })?;
        log.save_csv(dir.join("train_log.csv"))?;
        save_checkpoint(&model, dir.join("checkpoint.bin"))?;
        let eval = match &heldout {
            Some(h) => Some(evaluate(
                &model,
                h,
                &tokenizer,
                cfg.train.batch_max_frames,
                None,
            )?),
            None => None,
        };
        if let Some(e) = &eval {
            write_json(&dir.join("heldout_eval.json"), e)?;
            log::info!("{variant} held-out WER {:.4}", e.wer);
        }
        let summary = summary_json(&model, &log, eval.as_ref(), cfg.train.batch_max_frames);
        write_json(&dir.join("summary.json"), &summary)?;
        summaries.push(summary);
    }
    write_json(&out.join("report.json"), &json!({ "runs": summaries }))?;
    Ok(())
}

fn summary_json(
    model: &Model<f32>,
    log: &TrainLog,
    eval: Option<&train::EvalResult>,
    batch_max_frames: usize,
) -> serde_json::Value {
    let last = log.records.last();
    json!({
        "variant": model.config.variant,
        "steps": log.len(),
        "final_ctc_loss": last.map(|r| r.ctc_loss),
        "final_smoothed_ctc_loss": log.final_smoothed_ctc(SMOOTHING_WINDOW),
        "smoothing_window": SMOOTHING_WINDOW,
        "final_max_usage": log.final_max_usage(),
        "heldout_wer": eval.map(|e| e.wer),
        "heldout_edits": eval.map(|e| e.edits),
        "heldout_words": eval.map(|e| e.words),
        "eval_batch_max_frames": batch_max_frames,
        "param_counts": model.param_counts(),
        "model_config": model.config,
    })
}

fn cmd_evaluate(input: &ModelInput) -> CliResult<()> {
    let model = load_model(&input.checkpoint)?;
    let tokenizer =
        Tokenizer::for_vocab_size(model.config.vocab_size).map_err(Failure::Checkpoint)?;
    let utts = load_data(&input.data, &tokenizer, Some(model.config.feat_dim))?;
    let result = evaluate(&model, &utts, &tokenizer, input.batch_max_frames, None)?;
    print_json(&result)
}

fn routes_from_model(input: &ModelInput) -> CliResult<(RouteDump, usize)> {
    let model = load_model(&input.checkpoint)?;
    require_moe(&model)?;
    let tokenizer =
        Tokenizer::for_vocab_size(model.config.vocab_size).map_err(Failure::Checkpoint)?;
    let utts = load_data(&input.data, &tokenizer, Some(model.config.feat_dim))?;
    let dump = analytics::dump_routes(&model, &utts, &tokenizer, input.batch_max_frames)?;
    Ok((dump, model.config.vocab_size))
}

const ROUTES_CSV: &str = "routes.csv";
const PROBS_CSV: &str = "routes_probs.csv";
const TOKENS_CSV: &str = "frame_tokens.csv";
const META_JSON: &str = "routes_meta.json";

#[derive(Serialize, serde::Deserialize)]
struct DumpMeta {
    layers: usize,
    experts: usize,
    vocab_size: usize,
}

fn read_dump(dir: &Path) -> CliResult<(RouteDump, usize)> {
    let meta: DumpMeta =
        serde_json::from_reader(File::open(dir.join(META_JSON)).map_err(|e| data_err(e.into()))?)
            .map_err(|e| data_err(e.into()))?;
    let probs = File::open(dir.join(PROBS_CSV)).ok();
    let routes = File::open(dir.join(ROUTES_CSV)).map_err(|e| data_err(e.into()))?;
    let records = analytics::read_routes(routes, probs).map_err(data_err)?;
    let tokens = File::open(dir.join(TOKENS_CSV)).map_err(|e| data_err(e.into()))?;
    let frame_tokens = analytics::read_frame_tokens(tokens).map_err(data_err)?;
    Ok((
        RouteDump {
            layers: meta.layers,
            experts: meta.experts,
            records,
            frame_tokens,
        },
        meta.vocab_size,
    ))
}

fn load_routes(source: &RouteSource) -> CliResult<(RouteDump, usize)> {
    match &source.from_dump {
        Some(dir) => read_dump(dir),
        None => routes_from_model(&ModelInput {
            checkpoint: source.checkpoint.clone().expect("required by clap"),
            data: source.data.clone().expect("required by clap"),
            batch_max_frames: source.batch_max_frames,
        }),
    }
}

fn contingency_tables(dump: &RouteDump) -> CliResult<Vec<analytics::ContingencyTable>> {
    Ok((0..dump.layers.saturating_sub(1))
        .map(|l| analytics::contingency(&dump.records, l, dump.experts))
        .collect::<omni_moe::Result<_>>()?)
}

fn cmd_analyze(analysis: Analysis) -> CliResult<()> {
    match analysis {
        Analysis::Routes { input, out } => {
            let (dump, vocab_size) = routes_from_model(&input)?;
            let dir = out.resolve();
            std::fs::create_dir_all(&dir)?;
            analytics::write_routes(
                BufWriter::new(File::create(dir.join(ROUTES_CSV))?),
                &dump.records,
            )?;
            analytics::write_probs(
                BufWriter::new(File::create(dir.join(PROBS_CSV))?),
                &dump.records,
            )?;
            analytics::write_frame_tokens(
                BufWriter::new(File::create(dir.join(TOKENS_CSV))?),
                &dump.frame_tokens,
            )?;
            let meta = DumpMeta {
                layers: dump.layers,
                experts: dump.experts,
                vocab_size,
            };
            write_json(&dir.join(META_JSON), &meta)?;
            let perms = analytics::align_labels(&contingency_tables(&dump)?)?;
            let maps = analytics::usage_maps(&dump.records, dump.layers, &perms)?;
            write_json(
                &dir.join("usage_maps.json"),
                &json!({ "alignment": perms, "maps": maps }),
            )?;
            print_json(
                &json!({ "records": dump.records.len(), "layers": dump.layers, "experts": dump.experts }),
            )
        }
        Analysis::Cramers { source, out } => {
            let (dump, _) = load_routes(&source)?;
            let tables = contingency_tables(&dump)?;
            let rows = tables
                .iter()
                .map(|t| {
                    Ok(json!({
                        "layer": t.layer_pair.0,
                        "next_layer": t.layer_pair.1,
                        "cramers_v": analytics::cramers_v(t)?,
                        "total": t.total,
                        "counts": t.counts,
                    }))
                })
                .collect::<omni_moe::Result<Vec<_>>>()?;
            let dir = out.resolve();
            std::fs::create_dir_all(&dir)?;
            let mut w = std::io::BufWriter::new(File::create(dir.join("cramers.csv"))?);
            std::io::Write::write_all(&mut w, b"layer,next_layer,cramers_v,total\n")?;
            for r in &rows {
                let line = format!(
                    "{},{},{},{}\n",
                    r["layer"], r["next_layer"], r["cramers_v"], r["total"]
                );
                std::io::Write::write_all(&mut w, line.as_bytes())?;
            }
            drop(w);
            let value = json!({ "pairs": rows });
            write_json(&dir.join("cramers.json"), &value)?;
            print_json(&value)
        }
        Analysis::Entropy {
            source,
            out,
            top_k,
            use_probs,
        } => {
            let (dump, vocab_size) = load_routes(&source)?;
            let k = top_k.unwrap_or(100.min(vocab_size));
            let table = analytics::routing_entropy(
                &dump.records,
                &dump.frame_tokens,
                k,
                dump.layers,
                dump.experts,
                use_probs,
            )
            .map_err(|e| match e {
                Error::Contract(_) if use_probs => Failure::Data(e),
                other => Failure::Other(other),
            })?;
            let dir = out.resolve();
            std::fs::create_dir_all(&dir)?;
            let mut csv = String::from("symbol,frames");
            for l in 0..dump.layers {
                csv.push_str(&format!(",layer{l}"));
            }
            csv.push('\n');
            for r in &table.rows {
                csv.push_str(&format!("{},{}", r.symbol, r.frames));
                for h in &r.entropy {
                    csv.push(',');
                    if let Some(h) = h {
                        csv.push_str(&h.to_string());
                    }
                }
                csv.push('\n');
            }
            std::fs::write(dir.join("entropy.csv"), csv)?;
            write_json(&dir.join("entropy.json"), &table)?;
            print_json(&table)
        }
        Analysis::Permute {
            input,
            out,
            p,
            trials,
            seed,
            exclude_original,
        } => {
            let model = load_model(&input.checkpoint)?;
            require_moe(&model)?;
            let tokenizer =
                Tokenizer::for_vocab_size(model.config.vocab_size).map_err(Failure::Checkpoint)?;
            let utts = load_data(&input.data, &tokenizer, Some(model.config.feat_dim))?;
            let report = analytics::permutation_experiment(
                &model,
                &utts,
                &tokenizer,
                input.batch_max_frames,
                &p,
                trials,
                seed,
                exclude_original,
            )
            .map_err(|e| match e {
                Error::Config { .. } => Failure::Config(ConfigError::BadValue {
                    key: "p".into(),
                    value: format!("{p:?}"),
                    reason: e.to_string(),
                }),
                other => Failure::Other(other),
            })?;
            let dir = out.resolve();
            std::fs::create_dir_all(&dir)?;
            let mut csv = String::from("p,mean_wer,mean_change\n");
            for r in &report.rows {
                csv.push_str(&format!("{},{},{}\n", r.p, r.mean_wer, r.mean_change));
            }
            std::fs::write(dir.join("permute.csv"), csv)?;
            write_json(&dir.join("permute.json"), &report)?;
            print_json(&report)
        }
    }
}

fn cmd_inspect(checkpoint: &Path) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let counts = model.param_counts();
    let sharing = match model.config.variant {
        Variant::Dense => "none",
        Variant::Switch => "per-layer",
        Variant::Omni => "shared",
    };
    print_json(&json!({
        "config": model.config,
        "experts": model.config.experts,
        "router_tensors": model.router_ids().len(),
        "router_sharing": sharing,
        "routers": counts.routers,
        "param_counts": counts,
        "symbolic_param_counts": model.config.symbolic_param_count(),
        "symbolic_match": counts == model.config.symbolic_param_count(),
    }))
}
