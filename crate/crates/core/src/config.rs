//! Flat `key = value` run configuration.
//!
//! Every key has a default, unknown keys are rejected, and
//! [`RunConfig::to_config_string`] writes a file that parses back to the
//! same value.

use std::path::{Path, PathBuf};

use crate::corpus::io::read_text;
use crate::corpus::SynthConfig;
use crate::encoder::{EncoderConfig, Pooling, Representation};
use crate::error::{Error, Result};
use crate::numerics::OptimizerKind;
use crate::objectives::CmlmVariant;
use crate::trainer::{Strategy, TrainPlan};

/// Input files read by `train`, `ablate-n` and friends.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub mono: PathBuf,
    pub copy: PathBuf,
    pub bitext: PathBuf,
    pub nli: PathBuf,
    pub probe_train: PathBuf,
    pub probe_test: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        let p = |f: &str| Path::new("synth").join(f);
        Self {
            mono: p("mono.txt"),
            copy: p("copy.txt"),
            bitext: p("bitext.tsv"),
            nli: p("nli.tsv"),
            probe_train: p("probe_train.tsv"),
            probe_test: p("probe_test.tsv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub representation: Representation,
    /// Neighbours per query in the language-bias histogram.
    pub k: usize,
    /// Held-out batches scored per run by `ablate-n`.
    pub batches: usize,
    pub seed: u64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            representation: Representation::Pooled,
            k: 10,
            batches: 8,
            seed: 1,
            probe_epochs: 500,
            probe_lr: 0.5,
            probe_l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub plan: TrainPlan,
    pub synth: SynthConfig,
    pub data: DataPaths,
    pub eval: EvalSettings,
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_from_str!(
    usize,
    u64,
    f64,
    Pooling,
    Representation,
    Strategy,
    CmlmVariant,
    OptimizerKind
);

impl ConfigValue for PathBuf {
    fn parse(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// `auto` selects the default derived from the sequence length.
impl ConfigValue for Option<usize> {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(None),
            _ => s.parse().ok().map(Some),
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |n| n.to_string())
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse(value).ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// Every recognised key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value($key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "encoder.layers" => encoder.layers;
    "encoder.heads" => encoder.heads;
    "encoder.hidden" => encoder.hidden;
    "encoder.ff" => encoder.ff;
    "encoder.max_len" => encoder.max_len;
    "encoder.vocab_size" => encoder.vocab_size;
    "encoder.n_proj" => encoder.n_proj;
    "encoder.pooling" => encoder.pooling;
    "encoder.dropout" => encoder.dropout;
    "train.strategy" => plan.strategy;
    "train.stage1_steps" => plan.stage1_steps;
    "train.stage2_steps" => plan.stage2_steps;
    "train.nli_steps" => plan.nli_steps;
    "train.alpha" => plan.alpha;
    "train.margin" => plan.margin;
    "train.batch_size" => plan.batch_size;
    "train.num_mask" => plan.num_mask;
    "train.variant" => plan.variant;
    "train.seed" => plan.seed;
    "train.optimizer" => plan.optimizer.kind;
    "train.lr" => plan.optimizer.lr;
    "train.beta1" => plan.optimizer.beta1;
    "train.beta2" => plan.optimizer.beta2;
    "train.eps" => plan.optimizer.eps;
    "train.weight_decay" => plan.optimizer.weight_decay;
    "train.warmup_steps" => plan.optimizer.warmup_steps;
    "train.log_every" => plan.log_every;
    "train.checkpoint_every" => plan.checkpoint_every;
    "synth.seed" => synth.seed;
    "synth.languages" => synth.languages;
    "synth.lexicon_size" => synth.lexicon_size;
    "synth.topics" => synth.topics;
    "synth.min_words" => synth.min_words;
    "synth.max_words" => synth.max_words;
    "synth.topic_focus" => synth.topic_focus;
    "synth.documents" => synth.documents;
    "synth.sentences_per_document" => synth.sentences_per_document;
    "synth.copy_documents" => synth.copy_documents;
    "synth.bitext_pairs" => synth.bitext_pairs;
    "synth.heldout_pairs" => synth.heldout_pairs;
    "synth.nli_examples" => synth.nli_examples;
    "synth.probe_train" => synth.probe_train;
    "synth.probe_test" => synth.probe_test;
    "synth.eval_sentences" => synth.eval_sentences;
    "synth.sts_pairs" => synth.sts_pairs;
    "data.mono" => data.mono;
    "data.copy" => data.copy;
    "data.bitext" => data.bitext;
    "data.nli" => data.nli;
    "data.probe_train" => data.probe_train;
    "data.probe_test" => data.probe_test;
    "eval.representation" => eval.representation;
    "eval.k" => eval.k;
    "eval.batches" => eval.batches;
    "eval.seed" => eval.seed;
    "eval.probe_epochs" => eval.probe_epochs;
    "eval.probe_lr" => eval.probe_lr;
    "eval.probe_l2" => eval.probe_l2;
}

impl RunConfig {
    /// Applies the `key = value` lines of `text` on top of the defaults.
    /// `#` starts a comment; a key may appear only once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            config
                .set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Self::KEYS {
            let group = key.split('.').next().unwrap_or("");
            if group != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = group;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.plan.validate()?;
        if self.eval.k == 0 || self.eval.batches == 0 {
            return Err(Error::Config("eval.k and eval.batches must be positive".into()));
        }
        Ok(())
    }
}
