//! Teacher-forced confusion curves and recurrent-cell throughput timing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::model::LanguageModel;
use crate::rng::Rng;
use crate::rnn::{CellKind, Dropouts, Mode, ModelConfig, RecurrentState, StackedRnn};
use crate::tape::Tape;
use crate::{Error, ParamStore, Result};

/// Probability of every token after the first, given the true history.
///
/// Element `j` scores `tokens[j + 1]`. State is carried across windows of
/// `bptt` steps with batch 1.
pub fn teacher_forced_probs(model: &LanguageModel, tokens: &[usize], bptt: usize) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::Contract("need at least two tokens to score".into()));
    }
    let bptt = bptt.max(1);
    let mut state = model.zero_state(1);
    let mut out = Vec::with_capacity(tokens.len() - 1);
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + bptt).min(tokens.len() - 1);
        let mut tape = Tape::new();
        let fwd = model.rnn.forward(&mut tape, &model.params, &tokens[start..end], 1, &state, Mode::Eval)?;
        let all = model.output.log_prob_all(&model.params, tape.value(fwd.output))?;
        for (r, &target) in tokens[start + 1..=end].iter().enumerate() {
            out.push(all.at(r, target).exp());
        }
        state = fwd.state;
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionPoint {
    pub position: usize,
    pub mean_prob: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionCurve {
    pub points: Vec<PositionPoint>,
    /// Set when the input had no delimiters and was pooled into one group.
    pub warning: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordLengthPoint {
    pub word_len: usize,
    pub position: usize,
    pub mean_prob: f64,
    pub count: usize,
}

#[derive(Default)]
struct Acc(BTreeMap<usize, (f64, usize)>);

impl Acc {
    fn add(&mut self, key: usize, p: f64) {
        let e = self.0.entry(key).or_insert((0.0, 0));
        e.0 += p;
        e.1 += 1;
    }

    fn points(self) -> Vec<PositionPoint> {
        self.0
            .into_iter()
            .map(|(position, (s, n))| PositionPoint {
                position,
                mean_prob: s / n as f64,
                count: n,
            })
            .collect()
    }
}

fn check_aligned(tokens: &[usize], probs: &[f64]) -> Result<()> {
    if tokens.len() != probs.len() + 1 {
        return Err(Error::Contract(format!(
            "{} tokens need {} probabilities, got {}",
            tokens.len(),
            tokens.len().saturating_sub(1),
            probs.len()
        )));
    }
    Ok(())
}

fn char_bytes(tokens: &[usize], vocab: &Vocabulary) -> Vec<u8> {
    tokens
        .iter()
        .map(|&t| match vocab.token(t) {
            [b] => *b,
            _ => 0,
        })
        .collect()
}

/// Mean probability by offset from the preceding space (or stream start).
///
/// `probs[j]` is the probability given to `tokens[j + 1]`, as returned by
/// [`teacher_forced_probs`]. Offsets beyond `max_position` are dropped.
pub fn char_position_curve(tokens: &[usize], probs: &[f64], vocab: &Vocabulary, max_position: usize) -> Result<PositionCurve> {
    check_aligned(tokens, probs)?;
    let bytes = char_bytes(tokens, vocab);
    if !bytes.contains(&b' ') {
        let mut acc = Acc::default();
        probs.iter().for_each(|&p| acc.add(1, p));
        return Ok(PositionCurve {
            points: acc.points(),
            warning: Some("no spaces in the scored text; all positions pooled".into()),
        });
    }
    let mut acc = Acc::default();
    let mut since = if bytes[0] == b' ' { 1 } else { 2 };
    for (&b, &p) in bytes[1..].iter().zip(probs) {
        if since <= max_position {
            acc.add(since, p);
        }
        since = if b == b' ' { 1 } else { since + 1 };
    }
    Ok(PositionCurve {
        points: acc.points(),
        warning: None,
    })
}

/// Looks up an anchor token, listing close vocabulary entries if absent.
pub fn anchor_id(vocab: &Vocabulary, anchor: &str) -> Result<usize> {
    vocab.id(anchor.as_bytes()).ok_or_else(|| Error::Anchor {
        anchor: anchor.to_string(),
        nearest: vocab.nearest(anchor, 5),
    })
}

/// Mean probability of the k-th token after each occurrence of `anchor`.
/// Alignment of `probs` is as in [`char_position_curve`].
pub fn word_position_curve(tokens: &[usize], probs: &[f64], anchor: usize, max_position: usize) -> Result<PositionCurve> {
    check_aligned(tokens, probs)?;
    let mut acc = Acc::default();
    for (i, _) in tokens.iter().enumerate().filter(|(_, &t)| t == anchor) {
        for k in 1..=max_position {
            match probs.get(i + k - 1) {
                Some(&p) => acc.add(k, p),
                None => break,
            }
        }
    }
    Ok(PositionCurve {
        points: acc.points(),
        warning: None,
    })
}

/// Per (word length, position) mean probability for space-delimited words of
/// two or more ASCII letters. Position `len + 1` is the terminating space.
/// Alignment of `probs` is as in [`char_position_curve`].
pub fn word_length_curve(tokens: &[usize], probs: &[f64], vocab: &Vocabulary) -> Result<Vec<WordLengthPoint>> {
    check_aligned(tokens, probs)?;
    let bytes = char_bytes(tokens, vocab);
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    let mut add = |key, p| {
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += p;
        e.1 += 1;
    };
    let mut start = 0;
    while start < bytes.len() {
        let end = bytes[start..].iter().position(|&b| b == b' ').map_or(bytes.len(), |i| start + i);
        let field = &bytes[start..end];
        let len = field.len();
        if len >= 2 && field.iter().all(u8::is_ascii_alphabetic) {
            // The stream's first token has no prediction.
            for k in (0..len).filter(|&k| start + k > 0) {
                add((len, k + 1), probs[start + k - 1]);
            }
            if end < bytes.len() {
                add((len, len + 1), probs[end - 1]);
            }
        }
        start = end + 1;
    }
    Ok(acc
        .into_iter()
        .map(|((word_len, position), (s, n))| WordLengthPoint {
            word_len,
            position,
            mean_prob: s / n as f64,
            count: n,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub batch: usize,
    pub seq: usize,
    pub fwd_ms: f64,
    pub fwdbwd_ms: f64,
}

pub const BENCH_WARMUP: usize = 3;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median forward and forward+backward wall time of an `L`-layer stack of
/// width `h` on a `T×B` batch. Three warmup runs are discarded.
pub fn throughput_bench(cell: CellKind, batch: usize, seq: usize, hidden: usize, layers: usize, reps: usize) -> Result<BenchRow> {
    if reps == 0 || batch == 0 || seq == 0 {
        return Err(Error::Domain("reps, batch and seq must be positive".into()));
    }
    let vocab = 64;
    let config = ModelConfig {
        cell,
        vocab_size: vocab,
        layers,
        hidden_size: hidden,
        emb_size: hidden,
        dropout: Dropouts::NONE,
        weight_drop: 0.0,
        qrnn_window: 2,
        cutoffs: Vec::new(),
    };
    let mut rng = Rng::seed_from(7);
    let mut store = ParamStore::new();
    let rnn = StackedRnn::new(config, &mut store, &mut rng)?;
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.below(vocab)).collect();
    let state = RecurrentState::zeros(&rnn.config, batch);

    let mut run = |backward: bool| -> Result<f64> {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let out = rnn.forward(&mut tape, &store, &tokens, batch, &state, Mode::Eval)?;
        if !tape.value(out.output).all_finite() {
            return Err(Error::Domain(format!("{cell} produced non-finite outputs")));
        }
        if backward {
            let loss = tape.sum(out.output);
            tape.backward(loss, &mut store)?;
        }
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };
    let mut time = |backward: bool| -> Result<f64> {
        for _ in 0..BENCH_WARMUP {
            run(backward)?;
        }
        Ok(median((0..reps).map(|_| run(backward)).collect::<Result<_>>()?))
    };
    let fwd_ms = time(false)?;
    let fwdbwd_ms = time(true)?;
    Ok(BenchRow {
        cell,
        layers,
        hidden,
        batch,
        seq,
        fwd_ms,
        fwdbwd_ms,
    })
}

/// Writes any serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
