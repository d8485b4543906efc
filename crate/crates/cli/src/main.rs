use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use qknorm_core::attention::AttentionKind;
use qknorm_core::bleu::paired_bootstrap;
use qknorm_core::checkpoint;
use qknorm_core::config::{RunConfig, KEYS};
use qknorm_core::data::{load_bitext, make_toy_task, Corpus, CorpusPaths, ToyKind, ToyTask};
use qknorm_core::diagnostics::{encoder_attention_entropy, export_heatmaps};
use qknorm_core::sweep::{run_sweep, to_tsv, SweepKind};
use qknorm_core::train::{evaluate, run, RunResult};
use qknorm_core::vocab::TokenizerMode;

#[derive(Parser, Debug)]
#[command(name = "qknorm", version, about = "Query-key normalized attention: train, evaluate, sweep and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model and report test scores.
    Train(TrainArgs),
    /// Score a checkpoint on a bitext, optionally against a second checkpoint.
    Evaluate(EvalArgs),
    /// Run a head-count, percentile or ablation sweep.
    Sweep(SweepArgs),
    /// Write encoder self-attention heatmaps for one sentence.
    ExportAttn(ExportArgs),
    /// Generate a synthetic corpus directory.
    ToyData(ToyDataArgs),
}

/// Model and training settings: `--config` file, then per-field flags.
#[derive(Debug, Default, Clone)]
struct Overrides {
    config: Option<PathBuf>,
    pairs: Vec<(String, String)>,
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut o = Self::default();
        o.update_from_arg_matches(m)?;
        Ok(o)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        if let Some(c) = m.get_one::<PathBuf>("config") {
            self.config = Some(c.clone());
        }
        for key in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.pairs.push((key.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value settings file; flags override it"),
        );
        KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name("VALUE")
                    .help_heading("Model and training"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.pairs)?)
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Directory holding {train,dev,test}.{src,tgt}.
    #[arg(long, conflicts_with = "toy")]
    data: Option<PathBuf>,
    /// Generate a synthetic task instead of reading files.
    #[arg(long, value_name = "KIND")]
    toy: Option<ToyKind>,
    #[command(flatten)]
    toy_opts: ToyOpts,
    #[arg(long, default_value_t = TokenizerMode::Whitespace)]
    tokenizer: TokenizerMode,
}

#[derive(Args, Debug, Clone)]
struct ToyOpts {
    /// Content symbols in the synthetic alphabet.
    #[arg(long, default_value_t = 20)]
    toy_vocab: usize,
    #[arg(long, default_value_t = 2000)]
    toy_train: usize,
    #[arg(long, default_value_t = 200)]
    toy_dev: usize,
    #[arg(long, default_value_t = 200)]
    toy_test: usize,
    #[arg(long, default_value_t = 10)]
    toy_max_len: usize,
    #[arg(long, default_value_t = 1)]
    toy_seed: u64,
}

impl ToyOpts {
    fn task(&self, kind: ToyKind) -> ToyTask {
        ToyTask {
            kind,
            vocab_size: self.toy_vocab,
            n_train: self.toy_train,
            n_dev: self.toy_dev,
            n_test: self.toy_test,
            max_len: self.toy_max_len,
            seed: self.toy_seed,
        }
    }
}

impl DataArgs {
    fn corpus(&self) -> Result<Corpus> {
        match (&self.data, self.toy) {
            (Some(dir), None) => CorpusPaths::in_dir(dir)
                .load(self.tokenizer)
                .with_context(|| format!("loading corpus from {}", dir.display())),
            (None, Some(kind)) => Ok(make_toy_task(&self.toy_opts.task(kind))?),
            _ => bail!("pass exactly one of --data or --toy"),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Directory for logs, reports and (by default) the best checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also train a scaled dot-product model with the same settings.
    #[arg(long)]
    with_baseline: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source file to translate.
    #[arg(long)]
    src: PathBuf,
    /// Reference translations.
    #[arg(long)]
    tgt: PathBuf,
    /// Second checkpoint for paired bootstrap comparison.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 1)]
    bootstrap_seed: u64,
    /// Write hypotheses here, one per line.
    #[arg(long)]
    hyp_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// heads, percentile or ablation.
    kind: SweepKind,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentence, tokenized with the checkpoint's tokenizer.
    #[arg(long)]
    src: String,
    /// Target sentence recorded in the manifest.
    #[arg(long, default_value = "")]
    tgt: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ToyDataArgs {
    #[arg(long)]
    kind: ToyKind,
    #[command(flatten)]
    toy_opts: ToyOpts,
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn summary(label: &str, r: &RunResult) -> String {
    format!(
        "{label}\t{}\t{:.4}\t{:.6}\t{:.4}\t{:.6}\t{}\t{}\n",
        r.model.config().attention_mode,
        r.test.bleu.bleu,
        r.test.token_accuracy,
        r.log.best_dev_bleu,
        r.entropy.mean,
        r.log.epochs.len(),
        r.model.config().g_init.map_or("-".into(), |g| format!("{g:.6}")),
    )
}

fn train(args: TrainArgs) -> Result<()> {
    let corpus = args.data.corpus()?;
    let mut cfg = args.overrides.resolve()?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        if cfg.train.checkpoint.is_none() {
            cfg.train.checkpoint = Some(out.join("best.ckpt"));
        }
    }
    let mut runs = vec![("model", run(&cfg.model, &cfg.train, &corpus)?)];
    if args.with_baseline {
        let model = qknorm_core::ModelConfig {
            attention_mode: AttentionKind::ScaledDotProduct,
            ..cfg.model.clone()
        };
        let train = qknorm_core::TrainConfig {
            checkpoint: args.out.as_ref().map(|o| o.join("baseline.ckpt")),
            ..cfg.train.clone()
        };
        runs.push(("baseline", run(&model, &train, &corpus)?));
    }
    let mut table = String::from("run\tattention\ttest_bleu\ttoken_accuracy\tbest_dev_bleu\tmean_entropy\tepochs\tg_init\n");
    for (label, r) in &runs {
        table.push_str(&summary(label, r));
    }
    print!("{table}");
    if let Some(out) = &args.out {
        write(&out.join("summary.tsv"), &table)?;
        for (label, r) in &runs {
            write(&out.join(format!("{label}.steps.tsv")), &r.log.steps_tsv())?;
            write(&out.join(format!("{label}.epochs.tsv")), &r.log.epochs_tsv())?;
            write(&out.join(format!("{label}.test.tsv")), &r.test.to_tsv())?;
        }
    }
    Ok(())
}

fn evaluate_cmd(args: EvalArgs) -> Result<()> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let pairs = load_bitext(&args.src, &args.tgt, meta.tokenizer)?;
    let report = evaluate(&model, &meta.src_vocab, &meta.tgt_vocab, &pairs, args.batch_size)?;
    print!("{}", report.to_tsv());
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| meta.src_vocab.encode(&p.src)).collect();
    let entropy = encoder_attention_entropy(&model, &sources, args.batch_size)?;
    println!("mean_entropy\t{:.6}", entropy.mean);
    println!("mean_entropy_normalized\t{:.6}", entropy.mean_normalized);
    if let Some(path) = &args.hyp_out {
        let text: String = report
            .hypotheses
            .iter()
            .map(|h| meta.tokenizer.detokenize(h) + "\n")
            .collect();
        write(path, &text)?;
    }
    if let Some(other) = &args.against {
        let (model_b, meta_b) = checkpoint::load(other)?;
        let b = evaluate(&model_b, &meta_b.src_vocab, &meta_b.tgt_vocab, &pairs, args.batch_size)?;
        let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.tgt.clone()).collect();
        let boot = paired_bootstrap(&report.hypotheses, &b.hypotheses, &refs, args.resamples, args.bootstrap_seed)?;
        print!("{}", boot.to_tsv());
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let corpus = args.data.corpus()?;
    let mut cfg = args.overrides.resolve()?;
    cfg.train.checkpoint = None;
    let rows = run_sweep(args.kind, &cfg.model, &cfg.train, &corpus);
    let table = to_tsv(args.kind, &rows);
    print!("{table}");
    if let Some(out) = &args.out {
        write(out, &table)?;
    }
    Ok(())
}

fn export_attn(args: ExportArgs) -> Result<()> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let src = meta.tokenizer.tokenize(&args.src);
    let tgt = meta.tokenizer.tokenize(&args.tgt);
    let files = export_heatmaps(&model, &meta.src_vocab, &src, &tgt, &args.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn toy_data(args: ToyDataArgs) -> Result<()> {
    let corpus = make_toy_task(&args.toy_opts.task(args.kind))?;
    corpus.write_dir(&args.out)?;
    println!(
        "wrote {} / {} / {} pairs to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Evaluate(a) => evaluate_cmd(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::ExportAttn(a) => export_attn(a),
        Cmd::ToyData(a) => toy_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
