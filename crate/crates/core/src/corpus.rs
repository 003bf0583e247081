//! Tokenization, vocabulary, contiguous batching, and BPTT windowing.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Char,
    Word,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" | "byte" => Ok(Granularity::Char),
            "word" => Ok(Granularity::Word),
            other => Err(Error::Domain(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Token ↔ id map with ids in non-increasing frequency order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub granularity: Granularity,
    tokens: Vec<Vec<u8>>,
    frequencies: Vec<u64>,
    #[serde(skip)]
    index: HashMap<Vec<u8>, usize>,
}

#[derive(Clone, Debug, Default)]
pub struct TokenizeOptions {
    /// Word mode: words seen fewer times become `<unk>`.
    pub min_count: u64,
    /// Word mode: closed vocabulary; anything outside it becomes `<unk>`.
    pub closed_vocab: Option<Vec<String>>,
}

impl TokenizeOptions {
    pub fn with_min_count(min_count: u64) -> Self {
        Self {
            min_count,
            closed_vocab: None,
        }
    }
}

/// Splits one line into whitespace-separated words.
fn words(line: &[u8]) -> impl Iterator<Item = &[u8]> {
    line.split(|b| b.is_ascii_whitespace()).filter(|w| !w.is_empty())
}

fn raw_tokens(raw: &[u8], granularity: Granularity) -> Vec<Vec<u8>> {
    match granularity {
        Granularity::Char => raw.iter().map(|&b| vec![b]).collect(),
        Granularity::Word => {
            let mut out = Vec::new();
            for line in raw.split_inclusive(|&b| b == b'\n') {
                let body = line.strip_suffix(b"\n").unwrap_or(line);
                out.extend(words(body).map(<[u8]>::to_vec));
                out.push(EOS.as_bytes().to_vec());
            }
            out
        }
    }
}

impl Vocabulary {
    /// `entries` are `(token, count, first occurrence)`.
    fn from_counts(granularity: Granularity, mut entries: Vec<(Vec<u8>, u64, usize)>) -> Self {
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let (tokens, frequencies) = entries.into_iter().map(|(t, c, _)| (t, c)).unzip();
        let mut v = Self {
            granularity,
            tokens,
            frequencies,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuilt(mut self) -> Self {
        self.reindex();
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn token(&self, id: usize) -> &[u8] {
        &self.tokens[id]
    }

    pub fn token_string(&self, id: usize) -> String {
        String::from_utf8_lossy(&self.tokens[id]).into_owned()
    }

    pub fn id(&self, token: &[u8]) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn unk(&self) -> Option<usize> {
        self.id(UNK.as_bytes())
    }

    /// Maps raw text onto ids; unknown words fall back to `<unk>`.
    pub fn encode(&self, raw: &[u8]) -> Result<Vec<usize>> {
        let unk = self.unk();
        raw_tokens(raw, self.granularity)
            .into_iter()
            .map(|t| {
                self.id(&t).or(match self.granularity {
                    Granularity::Word => unk,
                    Granularity::Char => None,
                })
                .ok_or_else(|| {
                    Error::Compatibility(format!(
                        "token {:?} is not in the vocabulary",
                        String::from_utf8_lossy(&t)
                    ))
                })
            })
            .collect()
    }

    /// `token<TAB>frequency` per line; id is the line number.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (t, f) in self.tokens.iter().zip(&self.frequencies) {
            let _ = writeln!(out, "{}\t{f}", escape_token(t, self.granularity));
        }
        out
    }

    /// Nearest entries to `query` by edit distance, best first.
    pub fn nearest(&self, query: &str, n: usize) -> Vec<String> {
        let mut scored: Vec<(usize, usize)> = (0..self.len())
            .map(|i| (edit_distance(query.as_bytes(), &self.tokens[i]), i))
            .collect();
        scored.sort();
        scored.into_iter().take(n).map(|(_, i)| self.token_string(i)).collect()
    }
}

fn escape_token(t: &[u8], granularity: Granularity) -> String {
    if granularity == Granularity::Word {
        return String::from_utf8_lossy(t).into_owned();
    }
    let mut s = String::new();
    for &b in t {
        match b {
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\r' => s.push_str("\\r"),
            0x20..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(!ca.eq_ignore_ascii_case(&cb));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// A tokenized corpus and the vocabulary built from it.
#[derive(Clone, Debug)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub vocab: Vocabulary,
}

/// Builds a frequency-ordered vocabulary and encodes `raw` with it.
pub fn tokenize(raw: &[u8], granularity: Granularity, opts: &TokenizeOptions) -> Result<Tokenized> {
    if raw.is_empty() {
        return Err(Error::Ingestion("empty corpus".into()));
    }
    let toks = raw_tokens(raw, granularity);
    let mut counts: HashMap<&[u8], (u64, usize)> = HashMap::new();
    for (i, t) in toks.iter().enumerate() {
        counts.entry(t.as_slice()).or_insert((0, i)).0 += 1;
    }
    let keep = |t: &[u8], count: u64| -> bool {
        if granularity == Granularity::Char || t == EOS.as_bytes() {
            return true;
        }
        if t == UNK.as_bytes() {
            return false;
        }
        if let Some(closed) = &opts.closed_vocab {
            return closed.iter().any(|w| w.as_bytes() == t);
        }
        count >= opts.min_count.max(1)
    };
    let mut kept = Vec::new();
    let mut unk: Option<(u64, usize)> = None;
    for (&t, &(c, first)) in &counts {
        if keep(t, c) {
            kept.push((t.to_vec(), c, first));
        } else {
            let u = unk.get_or_insert((0, first));
            u.0 += c;
            u.1 = u.1.min(first);
        }
    }
    if let Some((c, first)) = unk {
        kept.push((UNK.as_bytes().to_vec(), c, first));
    }
    let vocab = Vocabulary::from_counts(granularity, kept);
    let unk = vocab.unk();
    let ids = toks
        .iter()
        .map(|t| vocab.id(t).or(unk).expect("every token kept or mapped to <unk>"))
        .collect();
    Ok(Tokenized { ids, vocab })
}

/// Reads a closed vocabulary: one token per line.
pub fn read_closed_vocab(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSpec {
    /// Sizes from fractions of `total`; rounding remainders go to train.
    pub fn fractions(total: usize, valid: f64, test: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&(valid + test)) || valid < 0.0 || test < 0.0 {
            return Err(Error::Bounds(format!("split fractions {valid}/{test} are invalid")));
        }
        let v = (total as f64 * valid).round() as usize;
        let t = (total as f64 * test).round() as usize;
        Ok(Self {
            train: total - v - t,
            valid: v,
            test: t,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contiguous prefix split in train/valid/test order.
pub fn split(tokens: &[usize], spec: SplitSpec) -> Result<Splits> {
    let need = spec.train + spec.valid + spec.test;
    if need > tokens.len() {
        return Err(Error::Bounds(format!(
            "split needs {need} tokens, corpus has {}",
            tokens.len()
        )));
    }
    let (a, rest) = tokens.split_at(spec.train);
    let (b, rest) = rest.split_at(spec.valid);
    Ok(Splits {
        train: a.to_vec(),
        valid: b.to_vec(),
        test: rest[..spec.test].to_vec(),
    })
}

/// Corpus folded into `batch` contiguous columns, stored row-major `[rows × batch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStream {
    data: Vec<usize>,
    rows: usize,
    batch: usize,
    pub dropped: usize,
}

impl BatchStream {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn at(&self, row: usize, col: usize) -> usize {
        self.data[row * self.batch + col]
    }

    /// Rows `start..end`, time-major.
    pub fn rows_slice(&self, start: usize, end: usize) -> &[usize] {
        &self.data[start * self.batch..end * self.batch]
    }

    pub fn column(&self, col: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.at(r, col)).collect()
    }

    /// Number of target tokens one full pass scores.
    pub fn targets(&self) -> usize {
        self.rows.saturating_sub(1) * self.batch
    }
}

pub fn batchify(tokens: &[usize], batch: usize) -> Result<BatchStream> {
    if batch == 0 || batch > tokens.len() {
        return Err(Error::Bounds(format!(
            "batch size {batch} invalid for {} tokens",
            tokens.len()
        )));
    }
    let rows = tokens.len() / batch;
    let mut data = vec![0; rows * batch];
    for col in 0..batch {
        for r in 0..rows {
            data[r * batch + col] = tokens[col * rows + r];
        }
    }
    Ok(BatchStream {
        data,
        rows,
        batch,
        dropped: tokens.len() - rows * batch,
    })
}

/// How window lengths are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub base_bptt: usize,
    pub randomize: bool,
    /// Probability of using the full base length rather than half of it.
    pub p_full: f64,
    pub sigma: f64,
}

impl WindowSchedule {
    pub const MIN_LEN: usize = 5;
    pub const MAX_EXTRA: usize = 20;

    pub fn fixed(base_bptt: usize) -> Self {
        Self {
            base_bptt,
            randomize: false,
            p_full: 0.95,
            sigma: 5.0,
        }
    }

    pub fn randomized(base_bptt: usize) -> Self {
        Self {
            randomize: true,
            ..Self::fixed(base_bptt)
        }
    }

    /// Draws one window length.
    pub fn sample_len(&self, rng: &mut Rng) -> usize {
        if !self.randomize {
            return self.base_bptt;
        }
        let base = if rng.uniform() < self.p_full {
            self.base_bptt as f64
        } else {
            self.base_bptt as f64 / 2.0
        };
        let t = rng.normal(base, self.sigma).round();
        let hi = (self.base_bptt + Self::MAX_EXTRA) as f64;
        t.clamp(Self::MIN_LEN as f64, hi) as usize
    }
}

/// One BPTT window: `inputs` and `targets` are `[len × batch]` time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Independent read position over a [`BatchStream`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub row: usize,
}

/// Next window, or `None` at end of epoch.
pub fn next_window(stream: &BatchStream, schedule: &WindowSchedule, cursor: &mut Cursor, rng: &mut Rng) -> Option<Window> {
    let remaining = stream.rows.saturating_sub(cursor.row + 1);
    if remaining == 0 {
        return None;
    }
    let len = schedule.sample_len(rng).max(1).min(remaining);
    let start = cursor.row;
    let inputs = stream.rows_slice(start, start + len).to_vec();
    let targets = stream.rows_slice(start + 1, start + len + 1).to_vec();
    cursor.row += len;
    Some(Window {
        start,
        len,
        inputs,
        targets,
    })
}
