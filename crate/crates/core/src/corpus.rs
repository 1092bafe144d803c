//! Example banks: JSONL ingestion, binary embedding matrices and the
//! basic vector arithmetic shared by every other module.
//!
//! A bank carries up to two aligned embedding matrices. Bank-side rows embed
//! `"input output"` and are used whenever the example plays the role of a
//! demonstration. Query-side rows embed the input alone and are used when the
//! example plays the role of a query; when they are absent the bank-side rows
//! stand in.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening an embedding file.
pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// One (input, output) demonstration pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "output", default)]
    pub output_text: String,
    #[serde(rename = "lang")]
    pub language: String,
    /// Context passage for the QA templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage: Option<String>,
    /// Question for the QA templates; the input text is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
        language: impl Into<String>,
    ) -> Self {
        Example {
            id: id.into(),
            input_text: input.into(),
            output_text: output.into(),
            language: language.into(),
            passage: None,
            question: None,
        }
    }

    /// Text indexed for lexical retrieval: input and output joined by a space.
    pub fn joined_text(&self) -> String {
        if self.output_text.is_empty() {
            self.input_text.clone()
        } else {
            format!("{} {}", self.input_text, self.output_text)
        }
    }
}

/// A language-tagged list of examples with aligned embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBank {
    pub language: String,
    pub examples: Vec<Example>,
    base_embeddings: Option<Array2<f64>>,
    query_embeddings: Option<Array2<f64>>,
}

impl ExampleBank {
    /// Builds a bank, checking id uniqueness and per-example invariants.
    pub fn new(language: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        let language = language.into();
        if language.is_empty() {
            return Err(Error::Parameter("bank language tag is empty".into()));
        }
        let mut seen = HashSet::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            validate_example(ex, i + 1)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(ExampleBank {
            language,
            examples,
            base_embeddings: None,
            query_embeddings: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Attaches bank-side embeddings after checking shape and finiteness.
    pub fn with_embeddings(mut self, embeddings: Array2<f64>) -> Result<Self> {
        check_matrix("bank embeddings", &embeddings, self.len())?;
        if let Some(q) = &self.query_embeddings {
            check_dim("bank embeddings", q.ncols(), embeddings.ncols())?;
        }
        self.base_embeddings = Some(embeddings);
        Ok(self)
    }

    /// Attaches query-side embeddings after checking shape and finiteness.
    pub fn with_query_embeddings(mut self, embeddings: Array2<f64>) -> Result<Self> {
        check_matrix("query embeddings", &embeddings, self.len())?;
        if let Some(b) = &self.base_embeddings {
            check_dim("query embeddings", b.ncols(), embeddings.ncols())?;
        }
        self.query_embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn has_embeddings(&self) -> bool {
        self.base_embeddings.is_some()
    }

    /// Bank-side embedding matrix.
    pub fn embeddings(&self) -> Result<&Array2<f64>> {
        self.base_embeddings
            .as_ref()
            .ok_or_else(|| Error::MissingEmbeddings(self.language.clone()))
    }

    /// Query-side embedding matrix, falling back to the bank-side rows.
    pub fn query_embeddings(&self) -> Result<&Array2<f64>> {
        match &self.query_embeddings {
            Some(q) => Ok(q),
            None => self.embeddings(),
        }
    }

    pub fn has_query_embeddings(&self) -> bool {
        self.query_embeddings.is_some()
    }

    pub fn dim(&self) -> Option<usize> {
        self.base_embeddings
            .as_ref()
            .or(self.query_embeddings.as_ref())
            .map(|m| m.ncols())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.examples.iter().position(|e| e.id == id)
    }

    /// Concatenates banks in order into one bank tagged `language`.
    ///
    /// Query-side rows are kept only when every input bank carries them.
    pub fn merged(language: impl Into<String>, banks: &[&ExampleBank]) -> Result<Self> {
        let examples: Vec<Example> = banks.iter().flat_map(|b| b.examples.iter().cloned()).collect();
        let mut merged = ExampleBank::new(language, examples)?;
        if banks.iter().all(|b| b.has_embeddings()) && !banks.is_empty() {
            let views: Vec<_> = banks
                .iter()
                .map(|b| b.embeddings().map(|m| m.view()))
                .collect::<Result<_>>()?;
            let stacked = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::shape("merged embeddings", "equal dimensions", e))?;
            merged = merged.with_embeddings(stacked)?;
            if banks.iter().all(|b| b.has_query_embeddings()) {
                let views: Vec<_> = banks
                    .iter()
                    .map(|b| b.query_embeddings().map(|m| m.view()))
                    .collect::<Result<_>>()?;
                let stacked = ndarray::concatenate(Axis(0), &views)
                    .map_err(|e| Error::shape("merged query embeddings", "equal dimensions", e))?;
                merged = merged.with_query_embeddings(stacked)?;
            }
        }
        Ok(merged)
    }
}

/// Target bank, its held-out validation split and the auxiliary banks.
#[derive(Debug, Clone)]
pub struct BankCollection {
    pub target: ExampleBank,
    pub validation: ExampleBank,
    pub auxiliaries: Vec<ExampleBank>,
}

impl BankCollection {
    pub fn new(target: ExampleBank, validation: ExampleBank, auxiliaries: Vec<ExampleBank>) -> Result<Self> {
        if target.language != validation.language {
            return Err(Error::Parameter(format!(
                "validation language {:?} differs from target language {:?}",
                validation.language, target.language
            )));
        }
        if let Some(aux) = auxiliaries.iter().find(|a| a.language == target.language) {
            return Err(Error::Parameter(format!(
                "auxiliary bank shares the target language {:?}",
                aux.language
            )));
        }
        let mut dims = std::iter::once(&target)
            .chain(std::iter::once(&validation))
            .chain(auxiliaries.iter())
            .filter_map(|b| b.dim());
        if let Some(first) = dims.next() {
            if let Some(other) = dims.find(|&d| d != first) {
                return Err(Error::shape("embedding dimension across banks", first, other));
            }
        }
        Ok(BankCollection {
            target,
            validation,
            auxiliaries,
        })
    }

    /// Target first, then auxiliaries in order.
    pub fn training_banks(&self) -> Vec<&ExampleBank> {
        std::iter::once(&self.target).chain(self.auxiliaries.iter()).collect()
    }
}

fn validate_example(ex: &Example, line: usize) -> Result<()> {
    if ex.id.is_empty() {
        return Err(Error::InvalidExample {
            line,
            message: "id is empty".into(),
        });
    }
    if ex.input_text.is_empty() {
        return Err(Error::InvalidExample {
            line,
            message: format!("example {:?} has empty input", ex.id),
        });
    }
    if ex.language.is_empty() {
        return Err(Error::InvalidExample {
            line,
            message: format!("example {:?} has empty language tag", ex.id),
        });
    }
    Ok(())
}

fn check_matrix(what: &str, m: &Array2<f64>, rows: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::shape(
            what,
            format!("{rows} rows"),
            format!("{} rows", m.nrows()),
        ));
    }
    if let Some(row) = m.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { what: what.into(), row });
    }
    Ok(())
}

fn check_dim(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::shape(what, format!("dim {expected}"), format!("dim {found}")));
    }
    Ok(())
}

/// Reads a JSONL example file without checking language tags.
pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_example(&ex, line_no)?;
        out.push(ex);
    }
    Ok(out)
}

/// Ingests a JSONL bank file; every line must carry the given language tag.
pub fn ingest_bank(path: impl AsRef<Path>, language: &str) -> Result<ExampleBank> {
    let examples = read_examples(path)?;
    if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.language != language) {
        return Err(Error::InvalidExample {
            line: i + 1,
            message: format!(
                "example {:?} has language {:?}, expected {:?}",
                ex.id, ex.language, language
            ),
        });
    }
    ExampleBank::new(language, examples)
}

/// Writes examples as JSONL.
pub fn write_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::Protocol(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an `EMB1` embedding matrix.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Decodes the little-endian `EMB1` layout: magic, u64 rows, u64 dim, f32 data.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 20 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Protocol("embedding file does not start with EMB1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Protocol("embedding header overflows".into()))?;
    let body = &bytes[20..];
    if body.len() != expected {
        return Err(Error::shape(
            "embedding payload",
            format!("{expected} bytes"),
            format!("{} bytes", body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, dim), data).expect("length checked above"))
}

/// Encodes a matrix in the `EMB1` layout (values narrowed to f32).
pub fn encode_embeddings(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + m.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_embedding_file(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(m)).map_err(|e| Error::io(path, e))
}

/// Attaches bank-side embeddings read from `path`.
pub fn attach_embeddings(bank: ExampleBank, path: impl AsRef<Path>) -> Result<ExampleBank> {
    let m = read_embedding_file(path)?;
    bank.with_embeddings(m)
}

/// Attaches query-side embeddings read from `path`.
pub fn attach_query_embeddings(bank: ExampleBank, path: impl AsRef<Path>) -> Result<ExampleBank> {
    let m = read_embedding_file(path)?;
    bank.with_query_embeddings(m)
}

/// Arithmetic mean of the bank-side rows.
pub fn bank_mean_embedding(bank: &ExampleBank) -> Result<Array1<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank(bank.language.clone()));
    }
    let m = bank.embeddings()?;
    Ok(m.mean_axis(Axis(0)).expect("non-empty"))
}

pub fn dot(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    u.dot(&v)
}

pub fn norm(u: ArrayView1<f64>) -> f64 {
    u.dot(&u).sqrt()
}

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine operands", u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `v / |v|`, or a degenerate-vector error for the zero vector.
pub fn unit(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(v.mapv(|x| x / n))
}
