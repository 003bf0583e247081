//! Subcommand implementations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use mslm::analysis::{
    anchor_id, char_position_curve, teacher_forced_probs, throughput_bench, word_length_curve, word_position_curve,
    write_csv, BenchRow,
};
use mslm::corpus::{batchify, tokenize, Granularity, TokenizeOptions, Vocabulary};
use mslm::hpo::{
    feature_index, fit_forest, joint_influence, run_study, write_importance, write_surface, ForestConfig, Status,
    StudyConfig, StudyData, DEFAULT_PAIRS, FEATURES,
};
use mslm::model::LanguageModel;
use mslm::rnn::CellKind;
use mslm::softmax::Metrics;
use mslm::train::{evaluate_tokens, load_model, save_model, write_log, EpochRecord, Trainer};
use clap::ValueEnum;
use mslm::{Error, Parallelism, Rng};

use crate::config::{load_corpus, preset, read_source, resolve_model, RunConfig};
use crate::{output_root, Analysis, AnalyzeArgs, BenchArgs, CliError, CliResult, EvalArgs, HpoArgs, TrainArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::io(path, e))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

/// Preset or config file, then flag overrides.
pub fn resolve_run_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = match (&a.config, &a.preset, a.fixture) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, Some(name), _) => preset(name)?,
        (None, None, true) => preset("fixture")?,
        (None, None, false) => return Err(CliError::Usage("pass --preset, --config or --fixture".into())),
    };
    if let Some(v) = &a.name {
        cfg.name = v.clone();
    }
    if let Some(v) = &a.train {
        cfg.data.train = v.clone();
    }
    if let Some(v) = &a.valid {
        cfg.data.valid = Some(v.clone());
    }
    if let Some(v) = &a.test {
        cfg.data.test = Some(v.clone());
    }
    if let Some(v) = &a.granularity {
        cfg.data.granularity = parse(v)?;
    }
    let m = &mut cfg.model;
    if let Some(v) = &a.cell {
        m.cell = parse(v)?;
    }
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.hidden_size {
        m.hidden_size = v;
    }
    if let Some(v) = a.emb_size {
        m.emb_size = v;
    }
    if let Some(d) = &a.dropout {
        if d.len() != 4 {
            return Err(CliError::Usage(format!("--dropout takes 4 values, got {}", d.len())));
        }
        (m.dropout.embedding, m.dropout.hidden, m.dropout.input, m.dropout.output) = (d[0], d[1], d[2], d[3]);
    }
    if let Some(v) = a.weight_drop {
        m.weight_drop = v;
    }
    if let Some(v) = &a.cutoffs {
        m.cutoffs = v.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.weight_decay {
        t.reg.weight_decay = v;
    }
    if let Some(v) = a.clip {
        t.reg.clip_norm = (v > 0.0).then_some(v);
    }
    if let Some(v) = a.bptt {
        t.window.base_bptt = v;
        t.eval_bptt = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.schedule.lr = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = &a.lr_drops {
        t.schedule.reductions = v.clone();
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = &a.out {
        cfg.output_dir = Some(v.clone());
    }
    cfg.train.reg.validate()?;
    cfg.model.dropout.validate()?;
    Ok(cfg)
}

fn granularity_name(g: Granularity) -> &'static str {
    match g {
        Granularity::Char => "char",
        Granularity::Word => "word",
    }
}

fn metric_label(g: Granularity) -> &'static str {
    match g {
        Granularity::Char => "bpc",
        Granularity::Word => "ppl",
    }
}

fn headline(g: Granularity, m: &Metrics) -> f64 {
    match g {
        Granularity::Char => m.bpc,
        Granularity::Word => m.perplexity,
    }
}

fn read_log(path: &Path) -> CliResult<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row.map_err(Error::from)?);
    }
    Ok(out)
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    Ok(csv::Reader::from_path(path).map_err(Error::from)?)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = resolve_run_config(&a)?;
    if a.print_config {
        println!("{}", cfg.to_json()?);
        return Ok(());
    }
    let root = cfg.output_dir.clone().unwrap_or_else(|| output_root(None));
    let dir = root.join(&cfg.name);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let corpus = load_corpus(&cfg.data)?;
    let gran = cfg.data.granularity;
    let model_cfg = resolve_model(cfg.model.clone(), corpus.vocab.len());
    model_cfg.validate()?;

    let config_path = dir.join("config.json");
    fs::write(&config_path, cfg.to_json()?).map_err(io(&config_path))?;
    let seed_path = dir.join("seed");
    fs::write(&seed_path, format!("{}\n", cfg.train.seed)).map_err(io(&seed_path))?;
    let vocab_path = dir.join("vocab.tsv");
    fs::write(&vocab_path, corpus.vocab.dump()).map_err(io(&vocab_path))?;

    let last = dir.join("last.ckpt");
    let best = dir.join("best.ckpt");
    let log = dir.join("log.csv");
    let (mut trainer, mut records) = if a.resume {
        if !last.exists() {
            return Err(CliError::Usage(format!("nothing to resume: {} does not exist", last.display())));
        }
        let (mut t, _) = Trainer::restore(&last)?;
        // Only the epoch budget may change between sessions.
        t.config.epochs = cfg.train.epochs;
        if t.config != cfg.train || *t.model.config() != model_cfg {
            return Err(Error::Compatibility("checkpoint was written with a different config".into()).into());
        }
        (t, read_log(&log)?)
    } else {
        let mut init = Rng::seed_from(cfg.train.seed).split();
        let model = LanguageModel::new(model_cfg, &mut init)?;
        (Trainer::new(model, cfg.train.clone())?, Vec::new())
    };
    if !a.resume {
        trainer.save(&last, Some(&corpus.vocab))?;
    }
    let mut best_nats = records.iter().map(|r| r.valid_nats).fold(f64::INFINITY, f64::min);
    let stream = batchify(&corpus.train, cfg.train.batch_size.min(corpus.train.len() / 2).max(1))?;
    let label = metric_label(gran);
    eprintln!(
        "{}: {} parameters, vocabulary {}, {} training tokens",
        cfg.name,
        trainer.model.params.num_scalars(),
        corpus.vocab.len(),
        corpus.train.len()
    );
    while trainer.progress.epoch <= cfg.train.epochs {
        let stats = trainer.train_epoch(&stream)?;
        let t0 = Instant::now();
        let valid = evaluate_tokens(&trainer.model, &corpus.valid, cfg.train.eval_batch_size, cfg.train.eval_bptt)?;
        let train_metric = Metrics::from_total(stats.mean_nats, 1)?;
        let rec = EpochRecord {
            epoch: stats.epoch,
            lr: stats.lr,
            train_nats: stats.mean_nats,
            valid_nats: valid.nats,
            valid_bpc_or_ppl: headline(gran, &valid),
            seconds: stats.seconds + t0.elapsed().as_secs_f64(),
        };
        println!(
            "epoch {:>4} lr {:.2e} train {label} {:.4} valid {label} {:.4} ({:.1}s)",
            rec.epoch,
            rec.lr,
            headline(gran, &train_metric),
            rec.valid_bpc_or_ppl,
            rec.seconds
        );
        records.push(rec);
        write_log(&log, &records)?;
        trainer.save(&last, Some(&corpus.vocab))?;
        if valid.nats < best_nats {
            best_nats = valid.nats;
            save_model(&trainer.model, Some(&corpus.vocab), &best)?;
        }
    }
    if let Some(test) = &corpus.test {
        let (model, _) = if best.exists() { load_model(&best)? } else { (trainer.model.clone(), None) };
        let m = evaluate_tokens(&model, test, 1, cfg.train.eval_bptt)?;
        println!("test {label} {:.4} nats {:.4}", headline(gran, &m), m.nats);
    }
    Ok(())
}

fn load_with_vocab(path: &Path) -> CliResult<(LanguageModel, Vocabulary)> {
    let (model, vocab) = load_model(path)?;
    let vocab = vocab.ok_or_else(|| Error::Format(format!("{} carries no vocabulary", path.display())))?;
    Ok((model, vocab))
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let (model, vocab) = load_with_vocab(&a.checkpoint)?;
    if let Some(g) = &a.granularity {
        let g: Granularity = parse(g)?;
        if g != vocab.granularity {
            return Err(Error::Compatibility(format!(
                "checkpoint is {}-level but the data was declared {}-level",
                granularity_name(vocab.granularity),
                granularity_name(g)
            ))
            .into());
        }
    }
    let ids = vocab.encode(&read_source(&a.data)?)?;
    let m = evaluate_tokens(&model, &ids, a.batch_size, a.bptt)?;
    println!("nats {:.6} bpc {:.6} perplexity {:.4} tokens {}", m.nats, m.bpc, m.perplexity, m.tokens);
    if let Some(path) = &a.csv {
        #[derive(serde::Serialize)]
        struct Row<'a> {
            checkpoint: String,
            data: &'a str,
            nats: f64,
            bpc: f64,
            perplexity: f64,
            tokens: usize,
        }
        let row = Row {
            checkpoint: a.checkpoint.display().to_string(),
            data: &a.data,
            nats: m.nats,
            bpc: m.bpc,
            perplexity: m.perplexity,
            tokens: m.tokens,
        };
        let fresh = !path.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(row).map_err(Error::from)?;
        w.flush().map_err(io(path))?;
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let (model, vocab) = load_with_vocab(&a.checkpoint)?;
    let needed = match a.analysis {
        Analysis::CharPos | Analysis::WordLen => Granularity::Char,
        Analysis::WordPos => Granularity::Word,
    };
    if vocab.granularity != needed {
        let name = a.analysis.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
        return Err(CliError::Usage(format!(
            "{name} needs a {}-level checkpoint, got a {}-level one",
            granularity_name(needed),
            granularity_name(vocab.granularity)
        )));
    }
    let anchor = match a.analysis {
        Analysis::WordPos => Some(anchor_id(&vocab, &a.anchor)?),
        _ => None,
    };
    let ids = vocab.encode(&read_source(&a.data)?)?;
    let probs = teacher_forced_probs(&model, &ids, a.bptt)?;
    let dir = a.out.clone().unwrap_or_else(|| output_root(None).join("analysis"));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let path = match a.analysis {
        Analysis::CharPos => {
            let curve = char_position_curve(&ids, &probs, &vocab, a.max_position)?;
            if let Some(w) = &curve.warning {
                eprintln!("warning: {w}");
            }
            let p = dir.join("char_pos.csv");
            write_csv(&p, &curve.points)?;
            p
        }
        Analysis::WordPos => {
            let curve = word_position_curve(&ids, &probs, anchor.unwrap_or_default(), a.max_position)?;
            let p = dir.join("word_pos.csv");
            write_csv(&p, &curve.points)?;
            p
        }
        Analysis::WordLen => {
            let rows = word_length_curve(&ids, &probs, &vocab)?;
            let p = dir.join("word_len.csv");
            write_csv(&p, &rows)?;
            p
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

/// `(batch, seq, hidden, layers)` shapes timed when no `--shape` is given:
/// a desk-sized stack, the same at one step, and a four-layer stack at a
/// tenth of the 2500-unit width.
pub const DEFAULT_GRID: [(usize, usize, usize, usize); 3] = [(32, 140, 512, 2), (32, 1, 512, 2), (60, 140, 250, 4)];

fn parse_shape(s: &str) -> CliResult<(usize, usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("shape {s:?} is not batch,seq,hidden,layers")))?;
    match v[..] {
        [b, t, h, l] if b > 0 && t > 0 && h > 0 && l > 0 => Ok((b, t, h, l)),
        _ => Err(CliError::Usage(format!("shape {s:?} is not four positive integers"))),
    }
}

pub fn bench(a: BenchArgs) -> CliResult<()> {
    let shapes = if a.shapes.is_empty() {
        DEFAULT_GRID.to_vec()
    } else {
        a.shapes.iter().map(|s| parse_shape(s)).collect::<CliResult<_>>()?
    };
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let mut rows: Vec<BenchRow> = Vec::new();
    for &(b, t, h, l) in &shapes {
        let pair: Vec<BenchRow> = [CellKind::Lstm, CellKind::Qrnn]
            .into_iter()
            .map(|cell| throughput_bench(cell, b, t, h, l, a.reps))
            .collect::<mslm::Result<_>>()?;
        println!(
            "B={b} T={t} h={h} L={l}: lstm {:.1} ms, qrnn {:.1} ms fwd+bwd (ratio {:.2})",
            pair[0].fwdbwd_ms,
            pair[1].fwdbwd_ms,
            pair[1].fwdbwd_ms / pair[0].fwdbwd_ms
        );
        rows.extend(pair);
    }
    let path = a.out.clone().unwrap_or_else(|| output_root(None).join("bench.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    write_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn hpo(a: HpoArgs) -> CliResult<()> {
    let dir = a.out.clone().unwrap_or_else(|| output_root(None).join("hpo"));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let records_path = dir.join("records.csv");
    if records_path.exists() && !a.resume {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --resume to continue it",
            records_path.display()
        )));
    }
    let mut cfg = if a.full_scale {
        StudyConfig::full_scale(a.trials, a.seed)
    } else {
        StudyConfig::desk_scale(a.trials, a.seed)
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.sequential {
        cfg.parallelism = Parallelism::Sequential;
    }
    let study_path = dir.join("study.json");
    fs::write(&study_path, serde_json::to_string_pretty(&cfg).map_err(Error::from)?).map_err(io(&study_path))?;

    let (train_raw, valid_raw) = (read_source(&a.train)?, read_source(&a.valid)?);
    let mut all = train_raw.clone();
    all.extend_from_slice(&valid_raw);
    let vocab = tokenize(&all, Granularity::Char, &TokenizeOptions::default())?.vocab;
    let (train, valid) = (vocab.encode(&train_raw)?, vocab.encode(&valid_raw)?);
    let data = StudyData {
        train: &train,
        valid: &valid,
        vocab_size: vocab.len(),
    };
    let records = run_study(&cfg, &data, &records_path, a.max_new_trials)?;
    let ok = records.iter().filter(|r| r.status == Status::Ok).count();
    println!("{} of {} trials recorded, {ok} ok", records.len(), cfg.trials);
    if records.len() < cfg.trials {
        println!("study paused; rerun with --resume to finish it");
        return Ok(());
    }
    let forest = fit_forest(&records, ForestConfig::default(), &mut Rng::seed_from(a.seed))?;
    let importance = forest.feature_importance()?;
    write_importance(&dir.join("importance.csv"), &importance)?;
    let mut ranked: Vec<_> = FEATURES.iter().zip(&importance).collect();
    ranked.sort_by(|x, y| y.1.total_cmp(x.1));
    for (f, v) in ranked {
        println!("{f:>12} {v:.4}");
    }
    for (x, y) in DEFAULT_PAIRS {
        feature_index(x)?;
        let s = joint_influence(&records, x, y, a.grid)?;
        if s.degenerate {
            eprintln!("warning: surface {x} x {y} is degenerate");
        }
        write_surface(&dir, &format!("surface_{x}__{y}"), &s)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
