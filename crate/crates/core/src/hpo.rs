//! Random hyperparameter search, random-forest regression of the validation
//! metric, impurity importance, and pairwise influence surfaces.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{batchify, WindowSchedule};
use crate::model::LanguageModel;
use crate::par::{map_range, Parallelism};
use crate::rng::Rng;
use crate::rnn::{CellKind, Dropouts, ModelConfig};
use crate::train::{evaluate, AdamConfig, LrSchedule, RegConfig, TrainConfig, Trainer};
use crate::{Error, Result};

/// Feature order shared by every record, CSV header and importance vector.
pub const FEATURES: [&str; 9] = [
    "dropout_e",
    "dropout_h",
    "dropout_i",
    "dropout_o",
    "weight_drop",
    "bptt",
    "layers",
    "emb_size",
    "hidden_size",
];

/// Pairs plotted by default: weight drop against hidden dropout, embedding
/// dropout, and embedding size.
pub const DEFAULT_PAIRS: [(&str, &str); 3] = [
    ("weight_drop", "dropout_h"),
    ("weight_drop", "dropout_e"),
    ("weight_drop", "emb_size"),
];

pub fn feature_index(name: &str) -> Result<usize> {
    FEATURES
        .iter()
        .position(|&f| f == name)
        .ok_or_else(|| Error::Naming(name.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub dropout_e: f64,
    pub dropout_h: f64,
    pub dropout_i: f64,
    pub dropout_o: f64,
    pub weight_drop: f64,
    pub bptt: usize,
    pub layers: usize,
    pub emb_size: usize,
    pub hidden_size: usize,
}

impl HyperParams {
    pub fn features(&self) -> [f64; 9] {
        [
            self.dropout_e,
            self.dropout_h,
            self.dropout_i,
            self.dropout_o,
            self.weight_drop,
            self.bptt as f64,
            self.layers as f64,
            self.emb_size as f64,
            self.hidden_size as f64,
        ]
    }

    fn from_features(f: &[f64]) -> Self {
        Self {
            dropout_e: f[0],
            dropout_h: f[1],
            dropout_i: f[2],
            dropout_o: f[3],
            weight_drop: f[4],
            bptt: f[5] as usize,
            layers: f[6] as usize,
            emb_size: f[7] as usize,
            hidden_size: f[8] as usize,
        }
    }

    pub fn within(&self, b: &Bounds) -> bool {
        let inside = |x: usize, (lo, hi): (usize, usize)| (lo..=hi).contains(&x);
        let drops = [self.dropout_e, self.dropout_h, self.dropout_i, self.dropout_o, self.weight_drop];
        drops.iter().all(|&d| d >= b.dropout.0 && d <= b.dropout.1)
            && inside(self.bptt, b.bptt)
            && inside(self.layers, b.layers)
            && inside(self.emb_size, b.emb_size)
            && inside(self.hidden_size, b.hidden_size)
    }
}

/// Inclusive ranges for each sampled field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub dropout: (f64, f64),
    pub bptt: (usize, usize),
    pub layers: (usize, usize),
    pub emb_size: (usize, usize),
    pub hidden_size: (usize, usize),
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            dropout: (0.0, 1.0),
            bptt: (30, 300),
            layers: (1, 10),
            emb_size: (100, 500),
            hidden_size: (100, 500),
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dropout;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Domain(format!("dropout bounds {:?} invalid", self.dropout)));
        }
        for (name, (lo, hi)) in [
            ("bptt", self.bptt),
            ("layers", self.layers),
            ("emb_size", self.emb_size),
            ("hidden_size", self.hidden_size),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Domain(format!("{name} bounds ({lo}, {hi}) invalid")));
            }
        }
        Ok(())
    }
}

/// Independent uniform draws: continuous for dropouts, integer otherwise.
pub fn sample_hyperparams(rng: &mut Rng, b: &Bounds) -> Result<HyperParams> {
    b.validate()?;
    let (lo, hi) = b.dropout;
    let mut int = |(lo, hi): (usize, usize)| rng.int_inclusive(lo as i64, hi as i64) as usize;
    let (bptt, layers, emb_size, hidden_size) = (int(b.bptt), int(b.layers), int(b.emb_size), int(b.hidden_size));
    let mut drop = || rng.uniform_range(lo, hi);
    Ok(HyperParams {
        dropout_e: drop(),
        dropout_h: drop(),
        dropout_i: drop(),
        dropout_o: drop(),
        weight_drop: drop(),
        bptt,
        layers,
        emb_size,
        hidden_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub params: HyperParams,
    /// Validation perplexity; NaN for diverged trials.
    pub metric: f64,
    pub status: Status,
    pub seed: u64,
    pub seconds: f64,
}

/// Settings shared by every trial of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub trials: usize,
    pub seed: u64,
    pub bounds: Bounds,
    pub cell: CellKind,
    pub epochs: usize,
    pub lr: f64,
    pub reductions: Vec<usize>,
    pub batch_size: usize,
    pub eval_bptt: usize,
    pub clip_norm: Option<f64>,
    /// Sampled widths are multiplied by this before building the model, so a
    /// desk-scale study keeps the full search space in its records.
    pub width_scale: f64,
    pub parallelism: Parallelism,
}

impl StudyConfig {
    /// 300 epochs at lr 1e-3, divided by 10 at epochs 150 and 225.
    pub fn full_scale(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            bounds: Bounds::default(),
            cell: CellKind::Lstm,
            epochs: 300,
            lr: 1e-3,
            reductions: vec![150, 225],
            batch_size: 128,
            eval_bptt: 150,
            clip_norm: Some(0.25),
            width_scale: 1.0,
            parallelism: Parallelism::Parallel,
        }
    }

    /// One short epoch per trial on narrowed models.
    pub fn desk_scale(trials: usize, seed: u64) -> Self {
        Self {
            epochs: 1,
            lr: 3e-3,
            reductions: Vec::new(),
            batch_size: 8,
            eval_bptt: 100,
            width_scale: 0.05,
            ..Self::full_scale(trials, seed)
        }
    }
}

/// Token ids for training and validation, plus vocabulary size.
pub struct StudyData<'a> {
    pub train: &'a [usize],
    pub valid: &'a [usize],
    pub vocab_size: usize,
}

/// Hyperparameters and seed of every trial, drawn up front from the study seed.
pub fn trial_plan(cfg: &StudyConfig) -> Result<Vec<(HyperParams, u64)>> {
    let mut rng = Rng::seed_from(cfg.seed);
    (0..cfg.trials)
        .map(|_| Ok((sample_hyperparams(&mut rng, &cfg.bounds)?, rng.next_u64())))
        .collect()
}

fn scaled(x: usize, s: f64) -> usize {
    ((x as f64 * s).round() as usize).max(1)
}

/// Trains one model and scores it on the validation split.
pub fn run_trial(cfg: &StudyConfig, data: &StudyData<'_>, params: HyperParams, seed: u64) -> Result<RunRecord> {
    let started = Instant::now();
    let model_cfg = ModelConfig {
        cell: cfg.cell,
        vocab_size: data.vocab_size,
        layers: params.layers,
        hidden_size: scaled(params.hidden_size, cfg.width_scale),
        emb_size: scaled(params.emb_size, cfg.width_scale),
        dropout: Dropouts {
            embedding: params.dropout_e,
            hidden: params.dropout_h,
            input: params.dropout_i,
            output: params.dropout_o,
        },
        weight_drop: params.weight_drop,
        qrnn_window: 2,
        cutoffs: Vec::new(),
    };
    let mut rng = Rng::seed_from(seed);
    let model = LanguageModel::new(model_cfg, &mut rng)?;
    let train_cfg = TrainConfig {
        batch_size: cfg.batch_size,
        window: WindowSchedule::randomized(params.bptt),
        eval_batch_size: 1,
        eval_bptt: cfg.eval_bptt,
        epochs: cfg.epochs,
        schedule: LrSchedule {
            lr: cfg.lr,
            reductions: cfg.reductions.clone(),
            factor: 10.0,
        },
        reg: RegConfig {
            clip_norm: cfg.clip_norm,
            ..RegConfig::default()
        },
        adam: AdamConfig::default(),
        seed: rng.next_u64(),
    };
    let stream = batchify(data.train, cfg.batch_size)?;
    let mut trainer = Trainer::new(model, train_cfg)?;
    let mut outcome = Ok(());
    for _ in 0..cfg.epochs {
        if let Err(e) = trainer.train_epoch(&stream) {
            outcome = Err(e);
            break;
        }
    }
    let metric = match outcome {
        Ok(()) => evaluate(&trainer.model, &batchify(data.valid, 1)?, cfg.eval_bptt)?.perplexity,
        Err(Error::Divergence { .. }) => f64::NAN,
        Err(e) => return Err(e),
    };
    let status = if metric.is_finite() { Status::Ok } else { Status::Diverged };
    Ok(RunRecord {
        params,
        metric: if status == Status::Ok { metric } else { f64::NAN },
        status,
        seed,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn header() -> Vec<&'static str> {
    let mut h = FEATURES.to_vec();
    h.extend(["metric", "status", "seed", "seconds"]);
    h
}

/// Reads a record file written by [`run_study`].
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != header() {
        return Err(Error::Study(format!("{} has an unexpected header", path.display())));
    }
    let bad = |what: &str| Error::Study(format!("malformed {what} in {}", path.display()));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut f = [0.0; 9];
        for (i, v) in f.iter_mut().enumerate() {
            *v = row[i].parse().map_err(|_| bad(FEATURES[i]))?;
        }
        out.push(RunRecord {
            params: HyperParams::from_features(&f),
            metric: row[9].parse().map_err(|_| bad("metric"))?,
            status: match &row[10] {
                "ok" => Status::Ok,
                "diverged" => Status::Diverged,
                _ => return Err(bad("status")),
            },
            seed: row[11].parse().map_err(|_| bad("seed"))?,
            seconds: row[12].parse().map_err(|_| bad("seconds"))?,
        });
    }
    Ok(out)
}

fn append_records(path: &Path, records: &[RunRecord], write_header: bool) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if write_header {
        w.write_record(header())?;
    }
    for r in records {
        let mut row: Vec<String> = r.params.features().iter().map(f64::to_string).collect();
        row.push(r.metric.to_string());
        row.push(match r.status {
            Status::Ok => "ok".into(),
            Status::Diverged => "diverged".into(),
        });
        row.push(r.seed.to_string());
        row.push(format!("{:.3}", r.seconds));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the trials not yet present in `path`, appending in trial order.
///
/// `limit` caps how many new trials run in this call, which is how an
/// interrupted study is simulated. Returns every record in the file.
pub fn run_study(cfg: &StudyConfig, data: &StudyData<'_>, path: &Path, limit: Option<usize>) -> Result<Vec<RunRecord>> {
    let plan = trial_plan(cfg)?;
    let mut records = if path.exists() { read_records(path)? } else { Vec::new() };
    let done: HashSet<u64> = records.iter().map(|r| r.seed).collect();
    if records.iter().any(|r| !plan.iter().any(|&(_, s)| s == r.seed)) {
        return Err(Error::Study(format!("{} belongs to a different study", path.display())));
    }
    let mut todo: Vec<_> = plan.into_iter().filter(|(_, s)| !done.contains(s)).collect();
    todo.truncate(limit.unwrap_or(usize::MAX));
    let chunk = rayon_width(cfg.parallelism);
    let mut write_header = !path.exists();
    for batch in todo.chunks(chunk) {
        let results = map_range(batch.len(), cfg.parallelism, |i| run_trial(cfg, data, batch[i].0, batch[i].1));
        let new = results.into_iter().collect::<Result<Vec<_>>>()?;
        append_records(path, &new, write_header)?;
        write_header = false;
        records.extend(new);
    }
    if !records.iter().any(|r| r.status == Status::Ok) {
        return Err(Error::Study("no trial finished successfully".into()));
    }
    Ok(records)
}

fn rayon_width(mode: Parallelism) -> usize {
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return rayon::current_num_threads().max(1);
    }
    let _ = mode;
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_fraction: f64,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 8,
            min_leaf: 3,
            feature_fraction: 1.0 / 3.0,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// `(feature, threshold)` of the root, if it splits.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes[0] {
            Node::Split { feature, threshold, .. } => Some((feature, threshold)),
            Node::Leaf(_) => None,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    cfg: &'a ForestConfig,
    n_try: usize,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

impl Builder<'_> {
    fn sse(&self, idx: &[usize]) -> (f64, f64) {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        (mean, idx.iter().map(|&i| (self.y[i] - mean).powi(2)).sum())
    }

    fn best_split(&self, idx: &[usize], total: f64, rng: &mut Rng) -> Option<Candidate> {
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut features);
        features.truncate(self.n_try);
        features.sort_unstable();
        let min_leaf = self.cfg.min_leaf;
        let mut best: Option<Candidate> = None;
        let mut order = idx.to_vec();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let n = order.len();
            let (mut ls, mut lq) = (0.0, 0.0);
            let ts: f64 = order.iter().map(|&i| self.y[i]).sum();
            let tq: f64 = order.iter().map(|&i| self.y[i] * self.y[i]).sum();
            for k in 1..n {
                let yi = self.y[order[k - 1]];
                ls += yi;
                lq += yi * yi;
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if k < min_leaf || n - k < min_leaf || lo == hi {
                    continue;
                }
                let (nl, nr) = (k as f64, (n - k) as f64);
                let left = lq - ls * ls / nl;
                let right = (tq - lq) - (ts - ls).powi(2) / nr;
                let gain = total - left - right;
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        threshold: lo + (hi - lo) / 2.0,
                    });
                }
            }
        }
        best.filter(|b| b.gain > 1e-12 * total.max(1e-300) && b.gain > 0.0)
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut Rng) -> usize {
        let (mean, total) = self.sse(&idx);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf || total <= 0.0 {
            return at;
        }
        let Some(c) = self.best_split(&idx, total, rng) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][c.feature] <= c.threshold);
        self.importance[c.feature] += c.gain;
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature: c.feature,
            threshold: c.threshold,
            left,
            right,
        };
        at
    }
}

/// Bagged CART regression trees with squared-error splits.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionForest {
    pub config: ForestConfig,
    pub parallelism: Parallelism,
    trees: Vec<Tree>,
    n_features: usize,
}

impl RegressionForest {
    pub fn new(config: ForestConfig) -> Result<Self> {
        if config.n_trees == 0 || config.min_leaf == 0 || !(config.feature_fraction > 0.0 && config.feature_fraction <= 1.0) {
            return Err(Error::Domain(format!("invalid forest settings {config:?}")));
        }
        Ok(Self {
            config,
            parallelism: Parallelism::Parallel,
            trees: Vec::new(),
            n_features: 0,
        })
    }

    pub fn with_parallelism(mut self, mode: Parallelism) -> Self {
        self.parallelism = mode;
        self
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Fits on rows `x` and targets `y`. Every tree gets its own stream split
    /// from `rng`, so the result does not depend on the parallelism mode.
    pub fn fit(&mut self, x: &[Vec<f64>], y: &[f64], rng: &mut Rng) -> Result<()> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Data(format!("{} rows but {} targets", x.len(), y.len())));
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|r| r.len() != d) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("rows must share a non-zero width and targets be finite".into()));
        }
        let cfg = self.config;
        let n_try = ((cfg.feature_fraction * d as f64).round() as usize).clamp(1, d);
        let rngs: Vec<Rng> = (0..cfg.n_trees).map(|_| rng.split()).collect();
        self.trees = map_range(cfg.n_trees, self.parallelism, |t| {
            let mut rng = rngs[t].clone();
            let n = x.len();
            let idx: Vec<usize> = if cfg.bootstrap { (0..n).map(|_| rng.below(n)).collect() } else { (0..n).collect() };
            let mut b = Builder {
                x,
                y,
                cfg: &cfg,
                n_try,
                nodes: Vec::new(),
                importance: vec![0.0; d],
            };
            b.grow(idx, 0, &mut rng);
            Tree {
                nodes: b.nodes,
                importance: b.importance,
            }
        });
        self.n_features = d;
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if self.trees.is_empty() {
            return Err(Error::State("forest has not been fitted".into()));
        }
        if x.len() != self.n_features {
            return Err(Error::Dimension(format!("expected {} features, got {}", self.n_features, x.len())));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Impurity decrease per feature summed over trees, normalized to 1.
    /// All zeros when no tree ever split.
    pub fn feature_importance(&self) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(Error::State("forest has not been fitted".into()));
        }
        let mut imp = vec![0.0; self.n_features];
        for t in &self.trees {
            imp.iter_mut().zip(&t.importance).for_each(|(a, b)| *a += b);
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        Ok(imp)
    }
}

pub const MIN_RECORDS: usize = 20;

fn ok_records(records: &[RunRecord]) -> Result<Vec<&RunRecord>> {
    let ok: Vec<_> = records.iter().filter(|r| r.status == Status::Ok).collect();
    if ok.len() < MIN_RECORDS {
        return Err(Error::Data(format!(
            "{} successful records, need at least {MIN_RECORDS}",
            ok.len()
        )));
    }
    Ok(ok)
}

/// Regresses log(metric) on the hyperparameters of the successful trials.
pub fn fit_forest(records: &[RunRecord], cfg: ForestConfig, rng: &mut Rng) -> Result<RegressionForest> {
    let ok = ok_records(records)?;
    let x: Vec<Vec<f64>> = ok.iter().map(|r| r.params.features().to_vec()).collect();
    let y: Vec<f64> = ok.iter().map(|r| r.metric.ln()).collect();
    let mut forest = RegressionForest::new(cfg)?;
    forest.fit(&x, &y, rng)?;
    Ok(forest)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub x: f64,
    pub y: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub x_name: String,
    pub y_name: String,
    /// The raw records projected onto the pair.
    pub points: Vec<SurfacePoint>,
    /// `n × n` lattice over the observed ranges, row-major in y then x.
    pub grid: Vec<SurfacePoint>,
    /// True when an axis has zero extent.
    pub degenerate: bool,
}

fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Metric against a feature pair, with a nearest-neighbour grid computed on
/// axes normalized to their observed ranges.
pub fn joint_influence(records: &[RunRecord], x_name: &str, y_name: &str, n: usize) -> Result<Surface> {
    let (fx, fy) = (feature_index(x_name)?, feature_index(y_name)?);
    let ok = ok_records(records)?;
    let points: Vec<SurfacePoint> = ok
        .iter()
        .map(|r| {
            let f = r.params.features();
            SurfacePoint {
                x: f[fx],
                y: f[fy],
                metric: r.metric,
            }
        })
        .collect();
    surface_from_points(x_name, y_name, points, n)
}

pub fn surface_from_points(x_name: &str, y_name: &str, points: Vec<SurfacePoint>, n: usize) -> Result<Surface> {
    if points.is_empty() || n == 0 {
        return Err(Error::Data("surface needs points and a non-empty grid".into()));
    }
    let range = |f: fn(&SurfacePoint) -> f64| {
        points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (xr, yr) = (range(|p| p.x), range(|p| p.y));
    let degenerate = xr.0 == xr.1 || yr.0 == yr.1;
    let norm = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let mut grid = Vec::with_capacity(n * n);
    for gy in lattice(yr.0, yr.1, n) {
        for gx in lattice(xr.0, xr.1, n) {
            let (qx, qy) = (norm(gx, xr), norm(gy, yr));
            let nearest = points
                .iter()
                .map(|p| (norm(p.x, xr) - qx).powi(2) + (norm(p.y, yr) - qy).powi(2))
                .enumerate()
                .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
                .0;
            grid.push(SurfacePoint {
                x: gx,
                y: gy,
                metric: points[nearest].metric,
            });
        }
    }
    Ok(Surface {
        x_name: x_name.to_string(),
        y_name: y_name.to_string(),
        points,
        grid,
        degenerate,
    })
}

/// Writes `<stem>.csv` (raw points) and `<stem>_grid.csv`.
pub fn write_surface(dir: &Path, stem: &str, s: &Surface) -> Result<()> {
    crate::analysis::write_csv(&dir.join(format!("{stem}.csv")), &s.points)?;
    crate::analysis::write_csv(&dir.join(format!("{stem}_grid.csv")), &s.grid)
}

#[derive(Debug, Serialize)]
struct ImportanceRow<'a> {
    feature: &'a str,
    importance: f64,
}

pub fn write_importance(path: &Path, importance: &[f64]) -> Result<()> {
    let rows: Vec<_> = FEATURES
        .iter()
        .zip(importance)
        .map(|(&feature, &importance)| ImportanceRow { feature, importance })
        .collect();
    crate::analysis::write_csv(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, d: usize, seed: u64, f: impl Fn(&[f64], &mut Rng) -> f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = Rng::seed_from(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect();
        let y = x.iter().map(|r| f(r, &mut rng)).collect();
        (x, y)
    }

    fn r_squared(forest: &RegressionForest, x: &[Vec<f64>], y: &[f64]) -> f64 {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = x.iter().zip(y).map(|(r, v)| (v - forest.predict(r).unwrap()).powi(2)).sum();
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn samples_stay_in_bounds() {
        let mut rng = Rng::seed_from(4);
        let b = Bounds::default();
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let h = sample_hyperparams(&mut rng, &b).unwrap();
            assert!(h.within(&b), "{h:?}");
            sum += h.bptt as f64;
        }
        let mean = sum / 1e4;
        assert!((160.0..=170.0).contains(&mean), "{mean}");
    }

    #[test]
    fn sampling_is_seeded_and_checked() {
        let b = Bounds::default();
        let draw = |s| {
            let mut rng = Rng::seed_from(s);
            (0..5).map(|_| sample_hyperparams(&mut rng, &b).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
        let inverted = Bounds { bptt: (300, 30), ..b };
        assert!(matches!(sample_hyperparams(&mut Rng::seed_from(0), &inverted), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_target_forest() {
        let (x, _) = synthetic(60, 4, 1, |_, _| 0.0);
        let y = vec![2.5; 60];
        let mut f = RegressionForest::new(ForestConfig::default()).unwrap();
        f.fit(&x, &y, &mut Rng::seed_from(2)).unwrap();
        for r in &x {
            assert_eq!(f.predict(r).unwrap(), 2.5);
        }
        assert!(f.feature_importance().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfitted_forest_is_a_state_error() {
        let f = RegressionForest::new(ForestConfig::default()).unwrap();
        assert!(matches!(f.feature_importance(), Err(Error::State(_))));
        assert!(matches!(f.predict(&[0.0]), Err(Error::State(_))));
    }

    #[test]
    fn single_informative_feature() {
        let (x, y) = synthetic(700, 3, 3, |r, _| r[0]);
        let mut f = RegressionForest::new(ForestConfig::default()).unwrap();
        f.fit(&x[..500], &y[..500], &mut Rng::seed_from(4)).unwrap();
        assert!(r_squared(&f, &x[500..], &y[500..]) > 0.8);
    }

    /// Exhaustive best split over every feature and midpoint.
    fn brute_force_split(x: &[Vec<f64>], y: &[f64], min_leaf: usize) -> (usize, f64) {
        let sse = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0, 0.0);
        for f in 0..x[0].len() {
            let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let (l, r): (Vec<f64>, Vec<f64>) = {
                    let l = x.iter().zip(y).filter(|(r, _)| r[f] <= t).map(|(_, &v)| v).collect::<Vec<_>>();
                    let r = x.iter().zip(y).filter(|(r, _)| r[f] > t).map(|(_, &v)| v).collect::<Vec<_>>();
                    (l, r)
                };
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let cost = sse(&l) + sse(&r);
                if cost < best.0 {
                    best = (cost, f, t);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn depth_one_split_matches_brute_force() {
        let (x, y) = synthetic(200, 3, 5, |r, rng| f64::from(u8::from(r[0] > 0.5)) + 0.05 * rng.normal(0.0, 1.0));
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            feature_fraction: 1.0,
            bootstrap: false,
        };
        let mut f = RegressionForest::new(cfg).unwrap();
        f.fit(&x, &y, &mut Rng::seed_from(0)).unwrap();
        let (feat, thr) = f.trees()[0].root_split().unwrap();
        assert_eq!(feat, 0);
        assert!((thr - 0.5).abs() < 0.05);
        let (bf, bt) = brute_force_split(&x, &y, 1);
        assert_eq!((feat, thr), (bf, bt));
    }

    #[test]
    fn exact_fit_on_training_rows() {
        let (x, y) = synthetic(80, 3, 6, |r, rng| r[0] * r[1] + rng.uniform());
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 64,
            min_leaf: 1,
            feature_fraction: 1.0,
            bootstrap: false,
        };
        let mut f = RegressionForest::new(cfg).unwrap();
        f.fit(&x, &y, &mut Rng::seed_from(0)).unwrap();
        for (r, &v) in x.iter().zip(&y) {
            assert_eq!(f.predict(r).unwrap(), v);
        }
    }

    #[test]
    fn planted_importance() {
        let (x, y) = synthetic(500, 9, 7, |r, rng| 10.0 * r[0] + 0.1 * r[1] + 0.1 * rng.normal(0.0, 1.0));
        let mut f = RegressionForest::new(ForestConfig::default()).unwrap();
        f.fit(&x, &y, &mut Rng::seed_from(8)).unwrap();
        let imp = f.feature_importance().unwrap();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(imp[0] > 5.0 * imp[1]);
    }

    #[test]
    fn noise_importance_is_flat() {
        let (x, y) = synthetic(300, 9, 9, |_, rng| rng.normal(0.0, 1.0));
        let mut f = RegressionForest::new(ForestConfig::default()).unwrap();
        f.fit(&x, &y, &mut Rng::seed_from(10)).unwrap();
        let imp = f.feature_importance().unwrap();
        let (lo, hi) = imp.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi < 3.0 * lo, "{imp:?}");
    }

    #[test]
    fn monotone_rescaling_keeps_split_features() {
        let (x, y) = synthetic(150, 4, 11, |r, rng| r[0] + 2.0 * r[2] + 0.1 * rng.uniform());
        let cfg = ForestConfig {
            n_trees: 5,
            feature_fraction: 0.25,
            ..ForestConfig::default()
        };
        let warped: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0].powi(3), r[1], r[2], r[3]]).collect();
        let mut a = RegressionForest::new(cfg).unwrap();
        let mut b = RegressionForest::new(cfg).unwrap();
        a.fit(&x, &y, &mut Rng::seed_from(1)).unwrap();
        b.fit(&warped, &y, &mut Rng::seed_from(1)).unwrap();
        let ia = a.feature_importance().unwrap();
        let ib = b.feature_importance().unwrap();
        for (p, q) in ia.iter().zip(&ib) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_and_sequential_fits_agree() {
        let (x, y) = synthetic(100, 5, 12, |r, _| r[1] - r[3]);
        let cfg = ForestConfig {
            n_trees: 16,
            ..ForestConfig::default()
        };
        let fit = |mode| {
            let mut f = RegressionForest::new(cfg).unwrap().with_parallelism(mode);
            f.fit(&x, &y, &mut Rng::seed_from(3)).unwrap();
            f.feature_importance().unwrap()
        };
        assert_eq!(fit(Parallelism::Parallel), fit(Parallelism::Sequential));
    }

    fn record(p: HyperParams, metric: f64) -> RunRecord {
        RunRecord {
            params: p,
            metric,
            status: Status::Ok,
            seed: 0,
            seconds: 0.0,
        }
    }

    fn base() -> HyperParams {
        HyperParams {
            dropout_e: 0.1,
            dropout_h: 0.1,
            dropout_i: 0.1,
            dropout_o: 0.1,
            weight_drop: 0.1,
            bptt: 100,
            layers: 2,
            emb_size: 200,
            hidden_size: 200,
        }
    }

    #[test]
    fn forest_needs_twenty_records() {
        let one = vec![record(base(), 10.0)];
        assert!(matches!(fit_forest(&one, ForestConfig::default(), &mut Rng::seed_from(0)), Err(Error::Data(_))));
    }

    #[test]
    fn lattice_surface_is_exact() {
        let mut recs = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for _ in 0..3 {
                    let p = HyperParams {
                        weight_drop: i as f64 * 0.5,
                        dropout_h: j as f64 * 0.5,
                        ..base()
                    };
                    recs.push(record(p, p.weight_drop + p.dropout_h));
                }
            }
        }
        let s = joint_influence(&recs, "weight_drop", "dropout_h", 3).unwrap();
        assert!(!s.degenerate);
        assert_eq!(s.grid.len(), 9);
        for g in &s.grid {
            assert_eq!(g.metric, g.x + g.y);
        }
        assert!(matches!(joint_influence(&recs, "weight_drop", "nope", 3), Err(Error::Naming(_))));
    }

    #[test]
    fn identical_points_are_degenerate() {
        let recs: Vec<_> = (0..20).map(|_| record(base(), 5.0)).collect();
        assert!(joint_influence(&recs, "weight_drop", "emb_size", 4).unwrap().degenerate);
    }

    #[test]
    fn bowl_minimum_is_located() {
        let mut rng = Rng::seed_from(13);
        let pts: Vec<SurfacePoint> = (0..400)
            .map(|_| {
                let (x, y) = (rng.uniform(), rng.uniform());
                SurfacePoint {
                    x,
                    y,
                    metric: (x - 0.3).powi(2) + (y - 0.3).powi(2),
                }
            })
            .collect();
        let n = 20;
        let s = surface_from_points("a", "b", pts, n).unwrap();
        let best = s.grid.iter().min_by(|a, b| a.metric.total_cmp(&b.metric)).unwrap();
        let cell = 1.0 / (n - 1) as f64;
        assert!((best.x - 0.3).abs() <= cell * 1.5 && (best.y - 0.3).abs() <= cell * 1.5, "{best:?}");
    }

    fn study_data() -> (Vec<usize>, Vec<usize>) {
        let text: Vec<usize> = (0..900).map(|i| [0, 1, 2, 1, 3][i % 5] + usize::from(i % 37 == 0)).collect();
        (text[..700].to_vec(), text[700..].to_vec())
    }

    fn tiny_study(trials: usize) -> StudyConfig {
        StudyConfig {
            bounds: Bounds {
                bptt: (30, 60),
                layers: (1, 2),
                ..Bounds::default()
            },
            ..StudyConfig::desk_scale(trials, 21)
        }
    }

    #[test]
    fn study_resumes_without_duplicates() {
        let (train, valid) = study_data();
        let data = StudyData {
            train: &train,
            valid: &valid,
            vocab_size: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_study(5);
        let path = dir.path().join("records.csv");
        let partial = run_study(&cfg, &data, &path, Some(2)).unwrap();
        assert_eq!(partial.len(), 2);
        let all = run_study(&cfg, &data, &path, None).unwrap();
        assert_eq!(all.len(), 5);
        let seeds: HashSet<u64> = all.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 5);
        assert_eq!(read_records(&path).unwrap().len(), 5);

        let other = dir.path().join("straight.csv");
        let straight = run_study(&cfg, &data, &other, None).unwrap();
        for (a, b) in all.iter().zip(&straight) {
            assert_eq!((a.params, a.status, a.seed), (b.params, b.status, b.seed));
            assert!(a.metric == b.metric || (a.metric.is_nan() && b.metric.is_nan()));
        }
    }

    #[test]
    fn single_trial_study_cannot_fit() {
        let (train, valid) = study_data();
        let data = StudyData {
            train: &train,
            valid: &valid,
            vocab_size: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let recs = run_study(&tiny_study(1), &data, &dir.path().join("r.csv"), None).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(fit_forest(&recs, ForestConfig::default(), &mut Rng::seed_from(0)).is_err());
    }
}
