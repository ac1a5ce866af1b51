//! Synthetic multilingual data.
//!
//! Sentences are drawn over a shared lexicon of invented words, each word
//! belonging to one topic. Every extra language is a fixed bijective word
//! substitution followed by a letter rotation, so any base sentence has an
//! exact translation in every language and translation pairs, gold retrieval
//! maps and topic labels come for free.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{
    format_bitext, format_corpus, format_nli, format_scored, format_tagged, write_text, BitextPair, Document,
    NliExample, NliLabel, ScoredPair, TaggedSentence,
};
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Lexicon index reserved for the negation marker used by contradictions.
const NEGATION: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub languages: usize,
    pub lexicon_size: usize,
    pub topics: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word is drawn from the sentence's topic rather than
    /// from the whole lexicon.
    pub topic_focus: f64,
    pub documents: usize,
    pub sentences_per_document: usize,
    pub copy_documents: usize,
    pub bitext_pairs: usize,
    pub heldout_pairs: usize,
    pub nli_examples: usize,
    pub probe_train: usize,
    pub probe_test: usize,
    pub eval_sentences: usize,
    pub sts_pairs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            languages: 3,
            lexicon_size: 60,
            topics: 4,
            min_words: 3,
            max_words: 6,
            topic_focus: 0.7,
            documents: 400,
            sentences_per_document: 4,
            copy_documents: 2000,
            bitext_pairs: 4000,
            heldout_pairs: 640,
            nli_examples: 2000,
            probe_train: 800,
            probe_test: 400,
            eval_sentences: 200,
            sts_pairs: 300,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.languages == 0 || self.languages > 26 {
            return Err(Error::Config("languages must be in 1..=26".into()));
        }
        if self.topics == 0 || self.lexicon_size < self.topics + 1 {
            return Err(Error::Config("lexicon must hold at least one word per topic".into()));
        }
        if self.lexicon_size > CONSONANTS.len() * VOWELS.len() * CONSONANTS.len() * VOWELS.len() {
            return Err(Error::Config("lexicon too large for two-syllable words".into()));
        }
        if self.min_words < 2 || self.max_words < self.min_words {
            return Err(Error::Config(
                "sentence length range must satisfy 2 <= min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.topic_focus) {
            return Err(Error::Config("topic_focus must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Tag of language `l`: `la`, `lb`, …
pub fn language_tag(l: usize) -> String {
    format!("l{}", (b'a' + l as u8) as char)
}

/// Word tables for every language.
#[derive(Debug, Clone)]
pub struct Lexicon {
    /// `words[l][i]`: surface form of base word `i` in language `l`.
    words: Vec<Vec<String>>,
    topics: usize,
}

impl Lexicon {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut syllables = Vec::new();
        for &c in CONSONANTS {
            for &v in VOWELS {
                syllables.push([c, v]);
            }
        }
        let mut seen = BTreeSet::new();
        let mut base = Vec::with_capacity(config.lexicon_size);
        while base.len() < config.lexicon_size {
            let a = syllables[rng.random_range(0..syllables.len())];
            let b = syllables[rng.random_range(0..syllables.len())];
            let w = String::from_utf8(vec![a[0], a[1], b[0], b[1]]).expect("ascii");
            if seen.insert(w.clone()) {
                base.push(w);
            }
        }
        let mut words = vec![base.clone()];
        for l in 1..config.languages {
            let mut perm: Vec<usize> = (0..base.len()).collect();
            perm.shuffle(&mut rng);
            words.push(perm.iter().map(|&j| rotate(&base[j], 7 * l)).collect());
        }
        Ok(Self {
            words,
            topics: config.topics,
        })
    }

    pub fn languages(&self) -> usize {
        self.words.len()
    }

    pub fn len(&self) -> usize {
        self.words[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.words[0].is_empty()
    }

    pub fn topic_of(&self, word: usize) -> usize {
        word % self.topics
    }

    pub fn render(&self, language: usize, sentence: &[usize]) -> String {
        let words: Vec<&str> = sentence.iter().map(|&i| self.words[language][i].as_str()).collect();
        words.join(" ")
    }
}

fn rotate(word: &str, shift: usize) -> String {
    word.bytes()
        .map(|b| (b'a' + ((b - b'a') as usize + shift) as u8 % 26) as char)
        .collect()
}

/// Everything `gen-synth` writes.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub documents: Vec<Document>,
    /// Two-sentence documents whose second sentence repeats the first.
    pub copy_documents: Vec<Document>,
    pub bitext: Vec<BitextPair>,
    pub heldout_bitext: Vec<BitextPair>,
    pub nli: Vec<NliExample>,
    pub probe_train: Vec<TaggedSentence>,
    pub probe_test: Vec<TaggedSentence>,
    /// Each base sentence rendered in every language under one id.
    pub eval: Vec<TaggedSentence>,
    pub sts: Vec<ScoredPair>,
}

struct Sampler<'a> {
    config: &'a SynthConfig,
    lexicon: &'a Lexicon,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn topic(&mut self) -> usize {
        self.rng.random_range(0..self.config.topics)
    }

    fn word(&mut self, topic: usize) -> usize {
        let n = self.lexicon.len();
        loop {
            let w = if self.rng.random_bool(self.config.topic_focus) {
                let per_topic = (n - topic).div_ceil(self.config.topics);
                topic + self.config.topics * self.rng.random_range(0..per_topic)
            } else {
                self.rng.random_range(0..n)
            };
            if w != NEGATION && w < n {
                return w;
            }
        }
    }

    fn sentence(&mut self, topic: usize) -> Vec<usize> {
        let len = self.rng.random_range(self.config.min_words..=self.config.max_words);
        (0..len).map(|_| self.word(topic)).collect()
    }

    /// Topic-free sentence: every word uniform over the lexicon, so nothing
    /// but the sentence itself predicts its words.
    fn uniform_sentence(&mut self) -> Vec<usize> {
        let len = self.rng.random_range(self.config.min_words..=self.config.max_words);
        (0..len)
            .map(|_| self.rng.random_range(1..self.lexicon.len().max(2)))
            .collect()
    }

    fn language(&mut self) -> usize {
        self.rng.random_range(0..self.lexicon.languages())
    }

    fn other_language(&mut self) -> usize {
        match self.lexicon.languages() {
            1 => 0,
            n => self.rng.random_range(1..n),
        }
    }

    fn bitext(&mut self, count: usize) -> Vec<BitextPair> {
        (0..count)
            .map(|_| {
                let topic = self.topic();
                let s = self.sentence(topic);
                let tgt = self.other_language();
                BitextPair {
                    source: self.lexicon.render(0, &s),
                    target: self.lexicon.render(tgt, &s),
                    source_language: language_tag(0),
                    target_language: language_tag(tgt),
                }
            })
            .collect()
    }

    fn labelled(&mut self, count: usize, first_id: u32) -> Vec<TaggedSentence> {
        (0..count)
            .map(|i| {
                let topic = self.topic();
                let s = self.sentence(topic);
                let l = self.language();
                TaggedSentence {
                    id: first_id + i as u32,
                    language: language_tag(l),
                    text: self.lexicon.render(l, &s),
                    label: Some(topic as u32),
                }
            })
            .collect()
    }

    fn nli(&mut self) -> NliExample {
        let topic = self.topic();
        let premise = self.sentence(topic);
        let label = NliLabel::ALL[self.rng.random_range(0..3)];
        let mut subset: Vec<usize> = premise.iter().copied().filter(|_| self.rng.random_bool(0.75)).collect();
        if subset.is_empty() {
            subset.push(premise[0]);
        }
        let hypothesis = match label {
            NliLabel::Entailment => subset,
            NliLabel::Contradiction => std::iter::once(NEGATION).chain(subset).collect(),
            NliLabel::Neutral => {
                let other = (topic + 1 + self.rng.random_range(0..self.config.topics.max(2) - 1)) % self.config.topics;
                self.sentence(other)
            }
        };
        let (lp, lh) = (self.language(), self.language());
        NliExample {
            premise: self.lexicon.render(lp, &premise),
            hypothesis: self.lexicon.render(lh, &hypothesis),
            label,
        }
    }

    fn sts(&mut self) -> ScoredPair {
        let topic = self.topic();
        let first = self.sentence(topic);
        let k = self.rng.random_range(0..=first.len());
        let mut slots: Vec<usize> = (0..first.len()).collect();
        slots.shuffle(&mut self.rng);
        let mut second = first.clone();
        for &p in &slots[..k] {
            second[p] = self.word(topic);
        }
        let same = first.iter().zip(&second).filter(|(a, b)| a == b).count();
        ScoredPair {
            first: self.lexicon.render(0, &first),
            second: self.lexicon.render(0, &second),
            score: 5.0 * same as f64 / first.len() as f64,
        }
    }
}

/// Generates the full synthetic suite. Each output uses its own random
/// stream, so changing one count leaves the other files unchanged.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    let lexicon = Lexicon::new(config)?;
    let sampler = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream + 1);
        Sampler {
            config,
            lexicon: &lexicon,
            rng,
        }
    };

    let mut s = sampler(1);
    let documents = (0..config.documents)
        .map(|_| {
            let topic = s.topic();
            let l = s.language();
            Document {
                language: language_tag(l),
                sentences: (0..config.sentences_per_document)
                    .map(|_| {
                        let sentence = s.sentence(topic);
                        lexicon.render(l, &sentence)
                    })
                    .collect(),
            }
        })
        .collect();

    let mut s = sampler(2);
    let copy_documents = (0..config.copy_documents)
        .map(|_| {
            let text = lexicon.render(0, &s.uniform_sentence());
            Document {
                language: language_tag(0),
                sentences: vec![text.clone(), text],
            }
        })
        .collect();

    let bitext = sampler(3).bitext(config.bitext_pairs);
    let heldout_bitext = sampler(4).bitext(config.heldout_pairs);
    let mut s = sampler(5);
    let nli = (0..config.nli_examples).map(|_| s.nli()).collect();
    let probe_train = sampler(6).labelled(config.probe_train, 0);
    let probe_test = sampler(7).labelled(config.probe_test, config.probe_train as u32);

    let mut s = sampler(8);
    let mut eval = Vec::with_capacity(config.eval_sentences * lexicon.languages());
    for id in 0..config.eval_sentences {
        let topic = s.topic();
        let sentence = s.sentence(topic);
        for l in 0..lexicon.languages() {
            eval.push(TaggedSentence {
                id: id as u32,
                language: language_tag(l),
                text: lexicon.render(l, &sentence),
                label: Some(topic as u32),
            });
        }
    }

    let mut s = sampler(9);
    let sts = (0..config.sts_pairs).map(|_| s.sts()).collect();

    Ok(SynthCorpus {
        documents,
        copy_documents,
        bitext,
        heldout_bitext,
        nli,
        probe_train,
        probe_test,
        eval,
        sts,
    })
}

/// File names written by [`SynthCorpus::write`].
pub const SYNTH_FILES: [&str; 9] = [
    "mono.txt",
    "copy.txt",
    "bitext.tsv",
    "bitext_heldout.tsv",
    "nli.tsv",
    "probe_train.tsv",
    "probe_test.tsv",
    "eval.tsv",
    "sts.tsv",
];

impl SynthCorpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let contents = [
            format_corpus(&self.documents),
            format_corpus(&self.copy_documents),
            format_bitext(&self.bitext),
            format_bitext(&self.heldout_bitext),
            format_nli(&self.nli),
            format_tagged(&self.probe_train),
            format_tagged(&self.probe_test),
            format_tagged(&self.eval),
            format_scored(&self.sts),
        ];
        for (name, text) in SYNTH_FILES.iter().zip(contents) {
            write_text(&dir.join(name), &text)?;
        }
        Ok(())
    }
}
