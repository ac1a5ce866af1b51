//! The `cmlm` command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data,
//! integrity or training errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::io::{read_bitext, read_corpus, read_nli, read_scored, read_tagged, write_text};
use crate::corpus::{generate, Document, TaggedSentence, Vocab, SYNTH_FILES};
use crate::encoder::{embed_sentences, EncoderConfig, Representation};
use crate::error::{Error, Result};
use crate::evalkit::{
    cosine_similarity, export_2d, gold_by_id, language_bias_histogram, linear_probe, pcr_debias, retrieval_accuracy,
    spearman_correlation, EmbeddingRow, EmbeddingSet, ProbeConfig,
};
use crate::numerics::ParamSet;
use crate::objectives::CmlmVariant;
use crate::trainer::{
    build_vocab, evaluate, load_checkpoint, run_plan, Init, RunOptions, Strategy, Task, TrainData, CHECKPOINT_FILE,
};

/// Name of the resolved configuration written next to a run's checkpoint.
pub const CONFIG_FILE: &str = "config.cfg";
pub const ABLATION_FILE: &str = "ablation.tsv";
pub const DEFAULT_N_VALUES: &str = "1,5,10,15,20";

#[derive(Parser, Debug)]
#[command(
    name = "cmlm",
    version,
    about = "Conditional masked language model sentence encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multilingual corpus, bitext, NLI and evaluation sets.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder according to the configured plan.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Continue from `<out>/checkpoint.ckpt` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Embed tagged sentences (`id<TAB>lang<TAB>text[<TAB>label]`) with a checkpoint.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tagged sentence file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        representation: Option<Representation>,
    },
    /// Cross-language retrieval accuracy between language subsets of an embedding file.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// Query language; all ordered pairs when omitted.
        #[arg(long)]
        source: Option<String>,
        /// Candidate language; all others when omitted.
        #[arg(long)]
        target: Option<String>,
    },
    /// Logistic-regression probe on labelled embedding files.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Spearman correlation of cosine scores with gold similarity scores.
    Sts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scored pair file (`s1<TAB>s2<TAB>score`).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        representation: Option<Representation>,
    },
    /// Remove each language's principal direction from its embeddings.
    Pcr {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Language make-up of each language's k nearest neighbours.
    BiasHist {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        /// Neighbours per query (default from `eval.k`).
        #[arg(long)]
        k: Option<usize>,
    },
    /// PCA view of an embedding file; writes `<out>.csv` and `<out>.svg`.
    Plot2d {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train on the copy corpus for each projection count and compare heads.
    AblateN {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Comma-separated projection counts.
        #[arg(long, default_value = DEFAULT_N_VALUES)]
        values: String,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the command's randomness (synth, training or probe).
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` configuration override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long, value_parser = ["cmlm", "s1", "s2", "s3"])]
    strategy: Option<String>,
    /// Weight of the bitext loss in joint stages.
    #[arg(long)]
    alpha: Option<f64>,
    /// Additive margin of the bitext loss.
    #[arg(long)]
    margin: Option<f64>,
    /// Number of projected vectors N.
    #[arg(long = "n-proj")]
    n_proj: Option<usize>,
    #[arg(long, value_parser = ["mean", "max", "cls"])]
    pooling: Option<String>,
    /// Masked positions per sentence.
    #[arg(long = "mask-count")]
    mask_count: Option<usize>,
    #[arg(long, value_parser = ["standard", "skip", "unconditioned"])]
    variant: Option<String>,
    /// Length of the first stage.
    #[arg(long)]
    steps: Option<u64>,
}

fn usage(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        Ok(config)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

impl ModelFlags {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        let pairs = [
            ("train.strategy", self.strategy.clone()),
            ("train.alpha", self.alpha.map(|v| v.to_string())),
            ("train.margin", self.margin.map(|v| v.to_string())),
            ("encoder.n_proj", self.n_proj.map(|v| v.to_string())),
            ("encoder.pooling", self.pooling.clone()),
            ("train.num_mask", self.mask_count.map(|v| v.to_string())),
            ("train.variant", self.variant.clone()),
            ("train.stage1_steps", self.steps.map(|v| v.to_string())),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        Ok(())
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::GenSynth { common } => gen_synth(&common),
        Command::Train { common, model, resume } => train(&common, &model, resume),
        Command::Embed {
            common,
            checkpoint,
            input,
            representation,
        } => embed(&common, &checkpoint, &input, representation),
        Command::EvalRetrieval {
            common,
            input,
            source,
            target,
        } => eval_retrieval(&common, &input, source.as_deref(), target.as_deref()),
        Command::Probe { common, train, test } => probe(&common, &train, &test),
        Command::Sts {
            common,
            checkpoint,
            input,
            representation,
        } => sts(&common, &checkpoint, &input, representation),
        Command::Pcr { common, input } => pcr(&common, &input),
        Command::BiasHist { common, input, k } => bias_hist(&common, &input, k),
        Command::Plot2d { common, input } => plot2d(&common, &input),
        Command::AblateN { common, model, values } => ablate_n(&common, &model, &values),
    }
}

/// Writes `report` to `--out` when given and returns it for stdout.
fn finish(common: &Common, report: String) -> Result<String> {
    if let Some(out) = &common.out {
        write_text(out, &report)?;
    }
    Ok(report)
}

fn gen_synth(common: &Common) -> Result<String> {
    let mut config = common.config()?;
    if let Some(seed) = common.seed {
        config.synth.seed = seed;
    }
    let out = common.out_or("synth");
    let corpus = generate(&config.synth)?;
    corpus.write(&out)?;
    let mut report = String::new();
    for name in SYNTH_FILES {
        let _ = writeln!(report, "wrote {}", out.join(name).display());
    }
    Ok(report)
}

fn train_data(config: &RunConfig, mono: &Path) -> Result<TrainData> {
    let docs = read_corpus(mono)?;
    let stages = config.plan.stages();
    let bitext = if stages.iter().any(|s| matches!(s.task, Task::Bitext | Task::Joint)) {
        read_bitext(&config.data.bitext)?
    } else {
        Vec::new()
    };
    let nli = if config.plan.nli_steps > 0 {
        read_nli(&config.data.nli)?
    } else {
        Vec::new()
    };
    let vocab = build_vocab(&docs, &bitext, &nli, config.encoder.vocab_size)?;
    TrainData::new(vocab, &config.encoder, &docs, &bitext, &nli)
}

fn train(common: &Common, model: &ModelFlags, resume: bool) -> Result<String> {
    let mut config = common.config()?;
    model.apply(&mut config)?;
    if let Some(seed) = common.seed {
        config.plan.seed = seed;
    }
    config.validate()?;
    let out = common.out_or("run");
    let data = train_data(&config, &config.data.mono)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let init = if resume && ckpt.exists() {
        Init::Resume(Box::new(load_checkpoint(&ckpt)?))
    } else {
        Init::Fresh
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join(CONFIG_FILE), &config.to_config_string())?;
    let options = RunOptions {
        out_dir: Some(out.clone()),
        stop_after: None,
    };
    let run = run_plan(&config.plan, &config.encoder, &data, init, &options)?;
    let mut report = format!(
        "trained {} steps; checkpoint {}\n",
        run.checkpoint.manifest.global_step,
        ckpt.display()
    );
    if let Some(last) = run.history.last() {
        let _ = writeln!(report, "final loss {:.6}", last.loss);
    }
    Ok(report)
}

fn load_model(path: &Path) -> Result<(EncoderConfig, Vocab, ParamSet<f32>)> {
    let ckpt = load_checkpoint(path)?;
    let vocab = Vocab::from_tokens(ckpt.manifest.vocab)?;
    Ok((ckpt.manifest.encoder, vocab, ckpt.params))
}

fn embed_tagged(
    config: &EncoderConfig,
    params: &ParamSet<f32>,
    vocab: &Vocab,
    rows: &[TaggedSentence],
    representation: Representation,
) -> Result<EmbeddingSet> {
    let texts: Vec<&str> = rows.iter().map(|r| r.text.as_str()).collect();
    let vectors = embed_sentences(config, params, vocab, &texts, representation)?;
    EmbeddingSet::from_rows(
        rows.iter()
            .zip(vectors)
            .map(|(r, vector)| EmbeddingRow {
                vector,
                language: r.language.clone(),
                id: r.id,
                label: r.label,
            })
            .collect(),
    )
}

fn embed(common: &Common, checkpoint: &Path, input: &Path, representation: Option<Representation>) -> Result<String> {
    let config = common.config()?;
    let representation = representation.unwrap_or(config.eval.representation);
    let out = common.out.clone().ok_or_else(|| usage("embed needs --out"))?;
    let (encoder, vocab, params) = load_model(checkpoint)?;
    let set = embed_tagged(&encoder, &params, &vocab, &read_tagged(input)?, representation)?;
    set.save(&out)?;
    Ok(format!(
        "embedded {} sentences ({} dims) into {}\n",
        set.len(),
        set.dim(),
        out.display()
    ))
}

fn eval_retrieval(common: &Common, input: &Path, source: Option<&str>, target: Option<&str>) -> Result<String> {
    let set = EmbeddingSet::load(input)?;
    let languages = set.languages().to_vec();
    let mut pairs = Vec::new();
    for s in &languages {
        for t in &languages {
            if s != t && source.is_none_or(|x| x == s) && target.is_none_or(|x| x == t) {
                pairs.push((s.clone(), t.clone()));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("no source/target language pair to evaluate".into()));
    }
    let mut report = String::from("source\ttarget\taccuracy\n");
    let mut total = 0.0;
    for (s, t) in &pairs {
        let queries = set.filter_language(s)?;
        let candidates = set.filter_language(t)?;
        let acc = retrieval_accuracy(&queries, &candidates, &gold_by_id(&queries, &candidates)?)?;
        total += acc;
        let _ = writeln!(report, "{s}\t{t}\t{acc:.6}");
    }
    let _ = writeln!(report, "mean\t\t{:.6}", total / pairs.len() as f64);
    finish(common, report)
}

fn probe(common: &Common, train: &Path, test: &Path) -> Result<String> {
    let config = common.config()?;
    let probe = ProbeConfig {
        epochs: config.eval.probe_epochs,
        lr: config.eval.probe_lr,
        l2: config.eval.probe_l2,
        seed: common.seed.unwrap_or(config.eval.seed),
    };
    let r = linear_probe(&EmbeddingSet::load(train)?, &EmbeddingSet::load(test)?, &probe)?;
    let report = format!(
        "classes\t{}\ntrain_accuracy\t{:.6}\ntest_accuracy\t{:.6}\n",
        r.classes.len(),
        r.train_accuracy,
        r.test_accuracy
    );
    finish(common, report)
}

fn sts(common: &Common, checkpoint: &Path, input: &Path, representation: Option<Representation>) -> Result<String> {
    let config = common.config()?;
    let representation = representation.unwrap_or(config.eval.representation);
    let (encoder, vocab, params) = load_model(checkpoint)?;
    let pairs = read_scored(input)?;
    let firsts: Vec<&str> = pairs.iter().map(|p| p.first.as_str()).collect();
    let seconds: Vec<&str> = pairs.iter().map(|p| p.second.as_str()).collect();
    let a = embed_sentences(&encoder, &params, &vocab, &firsts, representation)?;
    let b = embed_sentences(&encoder, &params, &vocab, &seconds, representation)?;
    let predicted: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| cosine_similarity(x, y))
        .collect::<Result<_>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let rho = spearman_correlation(&predicted, &gold)?;
    finish(common, format!("pairs\t{}\nspearman\t{rho:.6}\n", pairs.len()))
}

fn pcr(common: &Common, input: &Path) -> Result<String> {
    let out = common.out.clone().ok_or_else(|| usage("pcr needs --out"))?;
    let set = pcr_debias(&EmbeddingSet::load(input)?)?;
    set.save(&out)?;
    Ok(format!("wrote {} debiased rows to {}\n", set.len(), out.display()))
}

fn bias_hist(common: &Common, input: &Path, k: Option<usize>) -> Result<String> {
    let config = common.config()?;
    let k = k.unwrap_or(config.eval.k);
    let set = EmbeddingSet::load(input)?;
    let mut report = format!("query\t{}\tsame_language\n", set.languages().join("\t"));
    for language in set.languages() {
        let h = language_bias_histogram(&set.filter_language(language)?, &set, k)?;
        let cells: Vec<String> = h.fractions.iter().map(|f| format!("{f:.6}")).collect();
        let _ = writeln!(report, "{language}\t{}\t{:.6}", cells.join("\t"), h.same_language);
    }
    finish(common, report)
}

fn plot2d(common: &Common, input: &Path) -> Result<String> {
    let stem = common.out.clone().ok_or_else(|| usage("plot2d needs --out"))?;
    let set = EmbeddingSet::load(input)?;
    let (csv, svg) = (stem.with_extension("csv"), stem.with_extension("svg"));
    let points = export_2d(&set, &csv, &svg)?;
    Ok(format!(
        "plotted {} points to {} and {}\n",
        points.len(),
        csv.display(),
        svg.display()
    ))
}

fn parse_values(values: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = values
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| usage(format!("bad --values entry {v:?}"))))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(usage("--values needs positive projection counts"));
    }
    Ok(out)
}

fn ablate_n(common: &Common, model: &ModelFlags, values: &str) -> Result<String> {
    let mut config = common.config()?;
    model.apply(&mut config)?;
    if let Some(seed) = common.seed {
        config.plan.seed = seed;
    }
    config.plan.strategy = Strategy::Cmlm;
    config.plan.nli_steps = 0;
    let values = parse_values(values)?;
    config.validate()?;

    let copy = read_corpus(&config.data.copy)?;
    let probe_train = read_tagged(&config.data.probe_train)?;
    let probe_test = read_tagged(&config.data.probe_test)?;
    let probe_docs: Vec<Document> = probe_train
        .iter()
        .chain(&probe_test)
        .map(|r| Document {
            language: r.language.clone(),
            sentences: vec![r.text.clone()],
        })
        .collect();
    let mut vocab_docs = copy.clone();
    vocab_docs.extend(probe_docs);
    let vocab = build_vocab(&vocab_docs, &[], &[], config.encoder.vocab_size)?;
    let probe_config = ProbeConfig {
        epochs: config.eval.probe_epochs,
        lr: config.eval.probe_lr,
        l2: config.eval.probe_l2,
        seed: config.eval.seed,
    };

    let mut report = String::from("n_proj\tvariant\tmasked_accuracy\tprobe_accuracy\n");
    for &n in &values {
        let mut encoder = config.encoder.clone();
        encoder.n_proj = n;
        let data = TrainData::new(vocab.clone(), &encoder, &copy, &[], &[])?;
        for variant in [CmlmVariant::Standard, CmlmVariant::Skip] {
            let mut plan = config.plan.clone();
            plan.variant = variant;
            log::info!("ablation: N = {n}, {variant}");
            let run = run_plan(&plan, &encoder, &data, Init::Fresh, &RunOptions::default())?;
            let eval = evaluate(
                &plan,
                &encoder,
                run.params(),
                &data,
                Task::Cmlm,
                config.eval.batches,
                config.eval.seed,
            )?;
            let masked = eval.masked_accuracy.unwrap_or(0.0);
            let mut representations = vec![(variant.to_string(), Representation::Pooled)];
            if variant == CmlmVariant::Standard {
                representations.push(("proj-mean".to_string(), Representation::ProjMean));
            }
            for (name, representation) in representations {
                let train = embed_tagged(&encoder, run.params(), &vocab, &probe_train, representation)?;
                let test = embed_tagged(&encoder, run.params(), &vocab, &probe_test, representation)?;
                let probe = linear_probe(&train, &test, &probe_config)?;
                let _ = writeln!(report, "{n}\t{name}\t{masked:.6}\t{:.6}", probe.test_accuracy);
            }
        }
    }
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(ABLATION_FILE), &report)?;
    }
    Ok(report)
}
