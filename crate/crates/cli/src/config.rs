//! Run configuration, presets, and corpus loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mslm::corpus::{tokenize, Granularity, TokenizeOptions, Vocabulary, WindowSchedule};
use mslm::rnn::{CellKind, Dropouts, ModelConfig};
use mslm::train::{AdamConfig, LrSchedule, RegConfig, TrainConfig};
use mslm::{fixtures, Error, Result};

pub const FIXTURE_PREFIX: &str = "fixture:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// File path, or `fixture:<name>` for a bundled corpus.
    pub train: String,
    #[serde(default)]
    pub valid: Option<String>,
    #[serde(default)]
    pub test: Option<String>,
    pub granularity: Granularity,
    #[serde(default = "one")]
    pub min_count: u64,
    /// Fraction of training tokens held out for validation when `valid` is unset.
    #[serde(default = "tenth")]
    pub holdout: f64,
}

fn one() -> u64 {
    1
}

fn tenth() -> f64 {
    0.1
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub data: DataConfig,
    /// `vocab_size` is filled in from the data; a vocabulary-sized final
    /// cutoff is appended when missing.
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

pub const PRESETS: [&str; 6] = ["ptb-char", "enwik8", "wt103", "fixture", "fixture-bytes", "fixture-words"];

fn data(train: &str, valid: Option<&str>, test: Option<&str>, granularity: Granularity) -> DataConfig {
    DataConfig {
        train: train.into(),
        valid: valid.map(Into::into),
        test: test.map(Into::into),
        granularity,
        min_count: 1,
        holdout: 0.1,
    }
}

fn model(cell: CellKind, layers: usize, hidden: usize, emb: usize, dropout: [f64; 4], weight_drop: f64) -> ModelConfig {
    ModelConfig {
        cell,
        vocab_size: 0,
        layers,
        hidden_size: hidden,
        emb_size: emb,
        dropout: Dropouts {
            embedding: dropout[0],
            hidden: dropout[1],
            input: dropout[2],
            output: dropout[3],
        },
        weight_drop,
        qrnn_window: 2,
        cutoffs: Vec::new(),
    }
}

#[allow(clippy::too_many_arguments)]
fn trainer(bptt: usize, batch: usize, lr: f64, epochs: usize, drops: &[usize], weight_decay: f64, clip: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        window: WindowSchedule::randomized(bptt),
        eval_batch_size: 10,
        eval_bptt: bptt,
        epochs,
        schedule: LrSchedule {
            lr,
            reductions: drops.to_vec(),
            factor: 10.0,
        },
        reg: RegConfig {
            ar_alpha: 0.0,
            tar_beta: 0.0,
            weight_decay,
            clip_norm: Some(clip),
        },
        adam: AdamConfig::default(),
        seed,
    }
}

/// Named configurations: the three full-scale setups plus desk-scale fixtures.
pub fn preset(name: &str) -> Result<RunConfig> {
    use CellKind::*;
    use Granularity::*;
    let run = |data, model, train| RunConfig {
        name: name.to_string(),
        data,
        model,
        train,
        output_dir: None,
    };
    Ok(match name {
        "ptb-char" => run(
            data("data/ptb-char/train.txt", Some("data/ptb-char/valid.txt"), Some("data/ptb-char/test.txt"), Char),
            model(Lstm, 3, 1000, 128, [0.0, 0.25, 0.1, 0.1], 0.5),
            trainer(150, 128, 0.002, 500, &[300, 400], 1.2e-6, 0.25, 141),
        ),
        "enwik8" => run(
            data("data/enwik8/train.txt", Some("data/enwik8/valid.txt"), Some("data/enwik8/test.txt"), Char),
            model(Lstm, 3, 1840, 400, [0.0, 0.01, 0.01, 0.4], 0.2),
            trainer(200, 128, 0.001, 50, &[25, 35], 1.2e-6, 0.25, 141),
        ),
        "wt103" => {
            let mut d = data(
                "data/wikitext-103/wiki.train.tokens",
                Some("data/wikitext-103/wiki.valid.tokens"),
                Some("data/wikitext-103/wiki.test.tokens"),
                Word,
            );
            d.min_count = 3;
            let mut m = model(Qrnn, 4, 2500, 400, [0.0, 0.1, 0.1, 0.1], 0.0);
            m.cutoffs = vec![20_000, 60_000];
            let mut t = trainer(140, 60, 0.001, 14, &[12], 0.0, 0.25, 141);
            t.eval_batch_size = 10;
            run(d, m, t)
        }
        "fixture" => run(
            data("fixture:char_ptb_10k", Some("fixture:char_ptb_valid"), None, Char),
            model(Lstm, 1, 128, 64, [0.0; 4], 0.0),
            trainer(50, 16, 0.003, 50, &[40], 0.0, 0.25, 1),
        ),
        "fixture-bytes" => run(
            data("fixture:bytes_205", None, None, Char),
            model(Lstm, 1, 128, 64, [0.0; 4], 0.0),
            trainer(50, 16, 0.003, 10, &[], 0.0, 0.25, 1),
        ),
        "fixture-words" => run(
            data("fixture:words", None, None, Word),
            model(Lstm, 1, 64, 32, [0.0; 4], 0.0),
            trainer(35, 8, 0.003, 5, &[], 0.0, 0.25, 1),
        ),
        other => {
            return Err(Error::Domain(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn read_source(source: &str) -> Result<Vec<u8>> {
    if let Some(name) = source.strip_prefix(FIXTURE_PREFIX) {
        return fixtures::by_name(name).map(<[u8]>::to_vec).ok_or_else(|| {
            Error::Ingestion(format!(
                "unknown fixture {name:?}; bundled fixtures: {}",
                fixtures::NAMES.join(", ")
            ))
        });
    }
    std::fs::read(source).map_err(|e| Error::io(source, e))
}

pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Option<Vec<usize>>,
}

/// Builds one vocabulary over every split, then encodes each split with it.
pub fn load_corpus(cfg: &DataConfig) -> Result<Corpus> {
    let train = read_source(&cfg.train)?;
    let valid = cfg.valid.as_deref().map(read_source).transpose()?;
    let test = cfg.test.as_deref().map(read_source).transpose()?;
    let mut all = Vec::new();
    for part in [Some(&train), valid.as_ref(), test.as_ref()].into_iter().flatten() {
        all.extend_from_slice(part);
        if cfg.granularity == Granularity::Word && !part.ends_with(b"\n") {
            all.push(b'\n');
        }
    }
    let vocab = tokenize(&all, cfg.granularity, &TokenizeOptions::with_min_count(cfg.min_count))?.vocab;
    let mut train_ids = vocab.encode(&train)?;
    let valid_ids = match &valid {
        Some(v) => vocab.encode(v)?,
        None => {
            if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
                return Err(Error::Domain(format!("holdout {} must lie in (0, 1)", cfg.holdout)));
            }
            let keep = train_ids.len() - ((train_ids.len() as f64 * cfg.holdout).round() as usize).max(2);
            train_ids.split_off(keep)
        }
    };
    let test_ids = test.as_deref().map(|t| vocab.encode(t)).transpose()?;
    if train_ids.len() < 2 || valid_ids.len() < 2 {
        return Err(Error::Ingestion("training and validation splits need at least two tokens".into()));
    }
    Ok(Corpus {
        vocab,
        train: train_ids,
        valid: valid_ids,
        test: test_ids,
    })
}

/// Fills in the vocabulary size and completes the cutoff list.
pub fn resolve_model(mut m: ModelConfig, vocab: usize) -> ModelConfig {
    m.vocab_size = vocab;
    // Boundaries past a small vocabulary are dropped; none left means a full softmax.
    m.cutoffs.retain(|&c| c < vocab);
    if !m.cutoffs.is_empty() {
        m.cutoffs.push(vocab);
    }
    m
}
