//! Plain-text file formats: monolingual corpora, bitext, NLI triples,
//! labelled evaluation sentences and similarity pairs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Language tag used when a corpus line carries none.
pub const DEFAULT_LANGUAGE: &str = "und";

/// An ordered run of sentences between blank lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub language: String,
    pub sentences: Vec<String>,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses one sentence per line, blank lines separating documents. A line
/// of the form `lang<TAB>sentence` carries a language tag; a document takes
/// the tag of its first line.
pub fn parse_corpus(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Option<Document> = None;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            docs.extend(current.take());
            continue;
        }
        let (lang, sentence) = match line.split_once('\t') {
            Some((lang, s)) => (lang.trim(), s.trim()),
            None => (DEFAULT_LANGUAGE, line.trim()),
        };
        current
            .get_or_insert_with(|| Document {
                language: lang.to_string(),
                sentences: Vec::new(),
            })
            .sentences
            .push(sentence.to_string());
    }
    docs.extend(current);
    docs
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs = parse_corpus(&read_text(path)?);
    if docs.is_empty() {
        return Err(Error::Data(format!("{} contains no sentences", path.display())));
    }
    Ok(docs)
}

pub fn format_corpus(docs: &[Document]) -> String {
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in &doc.sentences {
            let _ = writeln!(out, "{}\t{}", doc.language, s);
        }
    }
    out
}

fn fields<'a>(line: &'a str, lineno: usize, min: usize, max: usize, what: &str) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() < min || f.len() > max {
        return Err(Error::Data(format!(
            "{what} line {lineno}: expected {min}..={max} tab-separated fields, found {}",
            f.len()
        )));
    }
    Ok(f)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// A translation pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitextPair {
    pub source: String,
    pub target: String,
    pub source_language: String,
    pub target_language: String,
}

/// `source<TAB>target<TAB>src_lang<TAB>tgt_lang` per line.
pub fn parse_bitext(text: &str) -> Result<Vec<BitextPair>> {
    data_lines(text)
        .map(|(n, line)| {
            let f = fields(line, n, 4, 4, "bitext")?;
            Ok(BitextPair {
                source: f[0].to_string(),
                target: f[1].to_string(),
                source_language: f[2].to_string(),
                target_language: f[3].to_string(),
            })
        })
        .collect()
}

pub fn read_bitext(path: &Path) -> Result<Vec<BitextPair>> {
    parse_bitext(&read_text(path)?)
}

pub fn format_bitext(pairs: &[BitextPair]) -> String {
    pairs
        .iter()
        .map(|p| {
            format!(
                "{}\t{}\t{}\t{}\n",
                p.source, p.target, p.source_language, p.target_language
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NliLabel {
    Entailment = 0,
    Contradiction = 1,
    Neutral = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [Self::Entailment, Self::Contradiction, Self::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Entailment => "entailment",
            Self::Contradiction => "contradiction",
            Self::Neutral => "neutral",
        }
    }
}

impl std::str::FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "entailment" | "0" => Ok(Self::Entailment),
            "contradiction" | "1" => Ok(Self::Contradiction),
            "neutral" | "2" => Ok(Self::Neutral),
            other => Err(Error::Data(format!("unknown NLI label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// `premise<TAB>hypothesis<TAB>label`, label by name or as 0/1/2.
pub fn parse_nli(text: &str) -> Result<Vec<NliExample>> {
    data_lines(text)
        .map(|(n, line)| {
            let f = fields(line, n, 3, 3, "nli")?;
            let label = f[2]
                .parse()
                .map_err(|e: Error| Error::Data(format!("nli line {n}: {e}")))?;
            Ok(NliExample {
                premise: f[0].to_string(),
                hypothesis: f[1].to_string(),
                label,
            })
        })
        .collect()
}

pub fn read_nli(path: &Path) -> Result<Vec<NliExample>> {
    parse_nli(&read_text(path)?)
}

pub fn format_nli(examples: &[NliExample]) -> String {
    examples
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.premise, e.hypothesis, e.label.name()))
        .collect()
}

/// A sentence to embed: text id shared by translations, language tag and
/// optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub id: u32,
    pub language: String,
    pub text: String,
    pub label: Option<u32>,
}

/// `id<TAB>lang<TAB>sentence[<TAB>label]`.
pub fn parse_tagged(text: &str) -> Result<Vec<TaggedSentence>> {
    data_lines(text)
        .map(|(n, line)| {
            let f = fields(line, n, 3, 4, "sentence")?;
            let id = f[0]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("sentence line {n}: bad id {:?}", f[0])))?;
            let label = f
                .get(3)
                .map(|l| {
                    l.trim()
                        .parse()
                        .map_err(|_| Error::Data(format!("sentence line {n}: bad label {l:?}")))
                })
                .transpose()?;
            Ok(TaggedSentence {
                id,
                language: f[1].trim().to_string(),
                text: f[2].to_string(),
                label,
            })
        })
        .collect()
}

pub fn read_tagged(path: &Path) -> Result<Vec<TaggedSentence>> {
    parse_tagged(&read_text(path)?)
}

pub fn format_tagged(rows: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.id, r.language, r.text);
        if let Some(l) = r.label {
            let _ = write!(out, "\t{l}");
        }
        out.push('\n');
    }
    out
}

/// Two sentences and a gold similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub first: String,
    pub second: String,
    pub score: f64,
}

/// `s1<TAB>s2<TAB>score`.
pub fn parse_scored(text: &str) -> Result<Vec<ScoredPair>> {
    data_lines(text)
        .map(|(n, line)| {
            let f = fields(line, n, 3, 3, "similarity")?;
            let score: f64 = f[2]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("similarity line {n}: bad score {:?}", f[2])))?;
            if !score.is_finite() {
                return Err(Error::Data(format!("similarity line {n}: non-finite score")));
            }
            Ok(ScoredPair {
                first: f[0].to_string(),
                second: f[1].to_string(),
                score,
            })
        })
        .collect()
}

pub fn read_scored(path: &Path) -> Result<Vec<ScoredPair>> {
    parse_scored(&read_text(path)?)
}

pub fn format_scored(pairs: &[ScoredPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.first, p.second, p.score))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_documents_split_on_blank_lines() {
        let docs = parse_corpus("la\tone two\nla\tthree\n\n\nplain line\n");
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].language, "la");
        assert_eq!(docs[0].sentences, ["one two", "three"]);
        assert_eq!(docs[1].language, DEFAULT_LANGUAGE);
        assert_eq!(parse_corpus(&format_corpus(&docs[..1])), docs[..1]);
    }

    #[test]
    fn bitext_needs_four_fields() {
        let p = parse_bitext("a b\tc d\tla\tlb\n").unwrap();
        assert_eq!(p[0].target, "c d");
        assert_eq!(parse_bitext(&format_bitext(&p)).unwrap(), p);
        assert!(matches!(parse_bitext("a\tb\tla\n"), Err(Error::Data(_))));
    }

    #[test]
    fn nli_labels_by_name_or_index() {
        let e = parse_nli("p\th\tneutral\np\th\t0\n").unwrap();
        assert_eq!(e[0].label, NliLabel::Neutral);
        assert_eq!(e[1].label, NliLabel::Entailment);
        assert!(parse_nli("p\th\tmaybe\n").is_err());
    }

    #[test]
    fn tagged_rows_round_trip() {
        let rows = parse_tagged("3\tla\tsome words\t1\n4\tlb\tother words\n").unwrap();
        assert_eq!(rows[0].label, Some(1));
        assert_eq!(rows[1].label, None);
        assert_eq!(parse_tagged(&format_tagged(&rows)).unwrap(), rows);
    }
}
