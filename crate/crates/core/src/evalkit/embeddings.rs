//! Labelled sentence-vector sets and the `CMLMEMB1` file.
//!
//! Layout (little-endian): magic `CMLMEMB1`, `u32` version, `u32` count,
//! `u32` dim, `u32` tag count and per tag a `u32` byte length plus UTF-8
//! bytes, then per row: `u32` tag index, `u32` text id, `i32` label (−1
//! when absent) and `dim` 32-bit floats.

use std::path::Path;

use crate::binio::{put_i32, put_u32, read_bytes, write_atomic, ByteReader};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"CMLMEMB1";
pub const EMBEDDING_VERSION: u32 = 1;

/// `n × d` sentence vectors with a language tag, a text id and an optional
/// gold label per row. Vectors are kept in 64-bit; files store 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    languages: Vec<String>,
    tags: Vec<usize>,
    ids: Vec<u32>,
    labels: Vec<Option<u32>>,
}

/// One row to add to an [`EmbeddingSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub vector: Vec<f64>,
    pub language: String,
    pub id: u32,
    pub label: Option<u32>,
}

impl EmbeddingSet {
    /// Builds a set from rows; the tag table lists languages in order of
    /// first appearance.
    pub fn from_rows(rows: Vec<EmbeddingRow>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Data("embedding set needs at least one row".into()));
        };
        let dim = first.vector.len();
        let mut languages: Vec<String> = Vec::new();
        let mut set = Self {
            dim,
            data: Vec::with_capacity(rows.len() * dim),
            languages: Vec::new(),
            tags: Vec::with_capacity(rows.len()),
            ids: Vec::with_capacity(rows.len()),
            labels: Vec::with_capacity(rows.len()),
        };
        for row in rows {
            if row.vector.len() != dim {
                return Err(Error::dim("embedding row", &[row.vector.len()], &[dim]));
            }
            let tag = match languages.iter().position(|l| *l == row.language) {
                Some(t) => t,
                None => {
                    languages.push(row.language);
                    languages.len() - 1
                }
            };
            set.data.extend_from_slice(&row.vector);
            set.tags.push(tag);
            set.ids.push(row.id);
            set.labels.push(row.label);
        }
        set.languages = languages;
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.tags.is_empty() || self.dim == 0 {
            return Err(Error::Data(
                "embedding set needs at least one row of positive width".into(),
            ));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("embedding row {}", i / self.dim),
                index: i % self.dim,
            });
        }
        if let Some(&t) = self.tags.iter().find(|&&t| t >= self.languages.len()) {
            return Err(Error::Data(format!("tag index {t} outside the declared tag table")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `n × d` data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Declared tag set.
    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn language(&self, i: usize) -> &str {
        &self.languages[self.tags[i]]
    }

    /// Index of row `i`'s language in [`languages`](Self::languages).
    pub fn tag(&self, i: usize) -> usize {
        self.tags[i]
    }

    pub fn id(&self, i: usize) -> u32 {
        self.ids[i]
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels[i]
    }

    pub fn entry(&self, i: usize) -> EmbeddingRow {
        EmbeddingRow {
            vector: self.row(i).to_vec(),
            language: self.language(i).to_string(),
            id: self.id(i),
            label: self.label(i),
        }
    }

    /// Same metadata, new vectors.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::dim("embedding data", &[data.len()], &[self.data.len()]));
        }
        let out = Self { data, ..self.clone() };
        out.validate()?;
        Ok(out)
    }

    /// Rows at `indices`, in that order, keeping the full tag table.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("selection is empty".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("row {i} outside a set of {}", self.len())));
        }
        Ok(Self {
            dim: self.dim,
            data: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            languages: self.languages.clone(),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Rows tagged `language`.
    pub fn indices_of(&self, language: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.language(i) == language).collect()
    }

    pub fn filter_language(&self, language: &str) -> Result<Self> {
        let idx = self.indices_of(language);
        if idx.is_empty() {
            return Err(Error::Data(format!("no rows tagged {language:?}")));
        }
        self.select(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4 + self.len() * 12);
        out.extend_from_slice(EMBEDDING_MAGIC);
        put_u32(&mut out, EMBEDDING_VERSION);
        put_u32(&mut out, self.len() as u32);
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.languages.len() as u32);
        for l in &self.languages {
            put_u32(&mut out, l.len() as u32);
            out.extend_from_slice(l.as_bytes());
        }
        for i in 0..self.len() {
            put_u32(&mut out, self.tags[i] as u32);
            put_u32(&mut out, self.ids[i]);
            put_i32(&mut out, self.labels[i].map_or(-1, |l| l as i32));
            for &x in self.row(i) {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(EMBEDDING_MAGIC)?;
        let version = r.u32("version")?;
        if version != EMBEDDING_VERSION {
            return r.fail(format!("unsupported embedding file version {version}"));
        }
        let n = r.u32("row count")? as usize;
        let dim = r.u32("dimension")? as usize;
        if n == 0 || dim == 0 {
            return r.fail(format!("empty embedding set ({n} rows of width {dim})"));
        }
        let tag_count = r.u32("tag count")? as usize;
        let mut languages = Vec::with_capacity(tag_count.min(1 << 16));
        for _ in 0..tag_count {
            let len = r.u32("tag length")? as usize;
            languages.push(r.string(len, "tag")?);
        }
        let row_bytes = 12 + dim * 4;
        if (bytes.len() as u64 - r.offset()) < (n as u64) * (row_bytes as u64) {
            return r.fail(format!("truncated rows: {n} rows of {row_bytes} bytes expected"));
        }
        let mut set = Self {
            dim,
            data: Vec::with_capacity(n * dim),
            languages,
            tags: Vec::with_capacity(n),
            ids: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let tag = r.u32("tag index")? as usize;
            if tag >= set.languages.len() {
                return r.fail(format!("tag index {tag} outside a table of {}", set.languages.len()));
            }
            set.tags.push(tag);
            set.ids.push(r.u32("text id")?);
            let label = r.i32("label")?;
            set.labels.push(if label < 0 { None } else { Some(label as u32) });
            for x in r.take(dim * 4, "vector")?.chunks_exact(4) {
                let v = f32::from_le_bytes(x.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return r.fail("non-finite vector entry");
                }
                set.data.push(v as f64);
            }
        }
        r.finish()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingSet {
        EmbeddingSet::from_rows(vec![
            EmbeddingRow {
                vector: vec![0.5, -1.0],
                language: "la".into(),
                id: 3,
                label: Some(1),
            },
            EmbeddingRow {
                vector: vec![2.0, 0.25],
                language: "lb".into(),
                id: 3,
                label: None,
            },
        ])
        .unwrap()
    }

    #[test]
    fn file_round_trip() {
        let set = sample();
        let bytes = set.to_bytes();
        let back = EmbeddingSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        match EmbeddingSet::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Integrity { offset, .. }) => assert!(offset > 8),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            EmbeddingSet::from_bytes(b"CMLMEMB0\x01\0\0\0"),
            Err(Error::Integrity { offset: 0, .. })
        ));
    }

    #[test]
    fn rejects_ragged_and_non_finite_rows() {
        let row = |v: Vec<f64>| EmbeddingRow {
            vector: v,
            language: "la".into(),
            id: 0,
            label: None,
        };
        assert!(EmbeddingSet::from_rows(vec![row(vec![1.0]), row(vec![1.0, 2.0])]).is_err());
        assert!(EmbeddingSet::from_rows(vec![row(vec![f64::NAN])]).is_err());
        assert!(EmbeddingSet::from_rows(vec![]).is_err());
    }
}
