//! LSTM and QRNN layers, the dropout family, and the stacked recurrent body.

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{bernoulli_mask, check_prob, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Qrnn,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Qrnn => "qrnn",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "qrnn" => Ok(CellKind::Qrnn),
            other => Err(Error::Domain(format!("unknown cell type {other:?}"))),
        }
    }
}

/// Drop probabilities for embedding rows, between-layer hidden activations,
/// the embedded input, and the final output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dropouts {
    pub embedding: f64,
    pub hidden: f64,
    pub input: f64,
    pub output: f64,
}

impl Dropouts {
    pub const NONE: Dropouts = Dropouts {
        embedding: 0.0,
        hidden: 0.0,
        input: 0.0,
        output: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        check_prob(self.embedding, "embedding dropout")?;
        check_prob(self.hidden, "hidden dropout")?;
        check_prob(self.input, "input dropout")?;
        check_prob(self.output, "output dropout")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub vocab_size: usize,
    pub layers: usize,
    pub hidden_size: usize,
    pub emb_size: usize,
    pub dropout: Dropouts,
    pub weight_drop: f64,
    /// Convolution window of the first QRNN layer; later layers use 1.
    #[serde(default = "default_qrnn_window")]
    pub qrnn_window: usize,
    /// Adaptive-softmax cutoffs; empty means a single full softmax.
    #[serde(default)]
    pub cutoffs: Vec<usize>,
}

fn default_qrnn_window() -> usize {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.layers == 0 || self.hidden_size == 0 || self.emb_size == 0 {
            return Err(Error::Domain(format!(
                "vocab, layers, hidden and embedding sizes must be positive: {self:?}"
            )));
        }
        if !(1..=2).contains(&self.qrnn_window) {
            return Err(Error::Domain(format!("qrnn window {} not in 1..=2", self.qrnn_window)));
        }
        self.dropout.validate()?;
        check_prob(self.weight_drop, "weight drop")
    }

    /// `(input, output)` width of every layer: e → h → … → h → e.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let input = if l == 0 { self.emb_size } else { self.hidden_size };
                let output = if l + 1 == self.layers { self.emb_size } else { self.hidden_size };
                (input, output)
            })
            .collect()
    }

    pub fn window_of(&self, layer: usize) -> usize {
        if layer == 0 {
            self.qrnn_window
        } else {
            1
        }
    }

    /// Scalar count of the recurrent layers alone.
    pub fn recurrent_parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .enumerate()
            .map(|(l, &(i, h))| match self.cell {
                CellKind::Lstm => 4 * h * i + 4 * h * h + 4 * h,
                CellKind::Qrnn => 3 * h * self.window_of(l) * i + 3 * h,
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// QRNN layer: gates (z, f, o) stacked into one `[3h × window·in]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QrnnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub window: usize,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Lstm(LstmLayer),
    Qrnn(QrnnLayer),
}

impl Layer {
    pub fn hidden(&self) -> usize {
        match self {
            Layer::Lstm(l) => l.hidden,
            Layer::Qrnn(l) => l.hidden,
        }
    }
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{prefix}.w_ih"), Tensor::uniform([4 * hidden, input], bound, rng));
        let w_hh = store.add(format!("{prefix}.w_hh"), Tensor::uniform([4 * hidden, hidden], bound, rng));
        let mut b = Tensor::uniform([4 * hidden], bound, rng);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{prefix}.bias"), b);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    /// One timestep: `x` is `[B × in]`, `w_hh` the (possibly weight-dropped)
    /// recurrent matrix already on the tape. Returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, w_hh: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_ih = tape.param(store, self.w_ih);
        let bias = tape.param(store, self.bias);
        let xi = tape.matmul_t(x, false, w_ih, true)?;
        let hh = tape.matmul_t(h, false, w_hh, true)?;
        let pre = tape.add(xi, hh)?;
        let gates = tape.add_bias(pre, bias)?;
        let out = tape.lstm_cell(gates, c)?;
        let h2 = tape.slice_cols(out, 0, self.hidden)?;
        let c2 = tape.slice_cols(out, self.hidden, 2 * self.hidden)?;
        Ok((h2, c2))
    }

    /// Whole window: input projection batched over time, recurrence per step.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, state: &LayerState, weight_drop: Option<(f64, &mut Rng)>) -> Result<(Var, LayerState)> {
        let rows = tape.value(x).rows();
        let steps = rows / batch;
        let w_ih = tape.param(store, self.w_ih);
        let bias = tape.param(store, self.bias);
        let mut w_hh = tape.param(store, self.w_hh);
        if let Some((p, rng)) = weight_drop {
            w_hh = weight_drop_var(tape, w_hh, p, rng)?;
        }
        let xw = tape.matmul_t(x, false, w_ih, true)?;
        let xw = tape.add_bias(xw, bias)?;
        let mut h = tape.leaf(state.h.clone());
        let mut c = tape.leaf(state.c.clone());
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx = tape.slice_rows(xw, t * batch, (t + 1) * batch)?;
            let gh = tape.matmul_t(h, false, w_hh, true)?;
            let gates = tape.add(gx, gh)?;
            let out = tape.lstm_cell(gates, c)?;
            h = tape.slice_cols(out, 0, self.hidden)?;
            c = tape.slice_cols(out, self.hidden, 2 * self.hidden)?;
            outputs.push(h);
        }
        let next = LayerState {
            h: tape.value(h).clone(),
            c: tape.value(c).clone(),
        };
        Ok((tape.concat_rows(&outputs)?, next))
    }
}

impl QrnnLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, window: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::uniform([3 * hidden, window * input], bound, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([3 * hidden]));
        Self {
            weight,
            bias,
            window,
            input,
            hidden,
        }
    }

    /// Convolution for every timestep in one matmul, then fo-pooling.
    ///
    /// `x` is `[T·B × in]` time-major. Returns `H` as `[T·B × h]` and the
    /// final `(h_T, c_T)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, c0: &Tensor, weight_drop: Option<(f64, &mut Rng)>) -> Result<(Var, LayerState)> {
        let rows = tape.value(x).rows();
        if rows == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::Dimension(format!("{rows} rows do not fold into batch {batch}")));
        }
        let mut weight = tape.param(store, self.weight);
        if let Some((p, rng)) = weight_drop {
            weight = weight_drop_var(tape, weight, p, rng)?;
        }
        let bias = tape.param(store, self.bias);
        let input = if self.window == 2 {
            let prev = tape.shift_rows(x, batch);
            tape.concat_cols(prev, x)?
        } else {
            x
        };
        let gates = tape.matmul_t(input, false, weight, true)?;
        let gates = tape.add_bias(gates, bias)?;
        let c0v = tape.leaf(c0.clone());
        let pooled = tape.qrnn_pool(gates, c0v)?;
        let hs = tape.slice_cols(pooled, 0, self.hidden)?;
        let last = tape.value(pooled);
        let h = self.hidden;
        let mut h_t = Tensor::zeros([batch, h]);
        let mut c_t = Tensor::zeros([batch, h]);
        for b in 0..batch {
            let row = last.row(rows - batch + b);
            h_t.row_mut(b).copy_from_slice(&row[..h]);
            c_t.row_mut(b).copy_from_slice(&row[h..]);
        }
        Ok((hs, LayerState { h: h_t, c: c_t }))
    }
}

/// QRNN forward over `[T × B × in]` input given as `[T·B × in]`; errors on `T = 0`.
pub fn qrnn_forward(tape: &mut Tape, store: &ParamStore, layer: &QrnnLayer, x: Var, batch: usize, c0: &Tensor) -> Result<(Var, LayerState)> {
    if tape.value(x).rows() < batch || batch == 0 {
        return Err(Error::Dimension("qrnn_forward on an empty sequence".into()));
    }
    layer.forward(tape, store, x, batch, c0, None)
}

/// DropConnect on a weight matrix: one mask, inverted scaling.
pub fn weight_drop(weight: &Tensor, drop_prob: f64, rng: &mut Rng) -> Result<Tensor> {
    check_prob(drop_prob, "weight drop")?;
    if drop_prob == 0.0 {
        return Ok(weight.clone());
    }
    let mask = bernoulli_mask(weight.shape().to_vec(), 1.0 - drop_prob, rng)?;
    weight.zip(&mask, |w, m| w * m)
}

fn weight_drop_var(tape: &mut Tape, w: Var, drop_prob: f64, rng: &mut Rng) -> Result<Var> {
    check_prob(drop_prob, "weight drop")?;
    if drop_prob == 0.0 {
        return Ok(w);
    }
    let mask = bernoulli_mask(tape.value(w).shape().to_vec(), 1.0 - drop_prob, rng)?;
    let mask = tape.leaf(mask);
    tape.mul(w, mask)
}

/// Locked dropout: one `[B × d]` mask applied at every timestep of `x` (`[T·B × d]`).
pub fn variational_dropout(tape: &mut Tape, x: Var, batch: usize, keep_prob: f64, rng: &mut Rng) -> Result<Var> {
    check_prob(keep_prob, "keep probability")?;
    if keep_prob == 1.0 {
        return Ok(x);
    }
    let (rows, d) = (tape.value(x).rows(), tape.value(x).cols());
    let mask = bernoulli_mask([batch, d], keep_prob, rng)?;
    let tiled: Vec<f64> = mask.data().iter().copied().cycle().take(rows * d).collect();
    let tiled = tape.leaf(Tensor::new([rows, d], tiled)?);
    tape.mul(x, tiled)
}

/// Per-row scales for embedding dropout: `0` for a dropped word, `1/keep` otherwise.
pub fn embedding_dropout_scales(vocab: usize, keep_prob: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    Ok(bernoulli_mask([vocab], keep_prob, rng)?.into_data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Per-layer `(h, c)`; plain tensors, so nothing carried across windows is on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<LayerState>,
}

impl RecurrentState {
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let layers = config
            .layer_dims()
            .iter()
            .map(|&(_, h)| LayerState {
                h: Tensor::zeros([batch, h]),
                c: Tensor::zeros([batch, h]),
            })
            .collect();
        Self { layers }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.h.rows())
    }
}

/// Whether masks are sampled (training) or every dropout is the identity.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

pub struct ForwardOutput {
    /// Final-layer activations after output dropout, `[T·B × e]`.
    pub output: Var,
    /// Final-layer activations before output dropout.
    pub raw: Var,
    pub state: RecurrentState,
}

/// Embedding plus the recurrent stack. Weights live in an external store.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedRnn {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub layers: Vec<Layer>,
}

impl StackedRnn {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embedding = store.add(
            "embedding",
            Tensor::uniform([config.vocab_size, config.emb_size], 0.1, rng),
        );
        let layers = config
            .layer_dims()
            .iter()
            .enumerate()
            .map(|(l, &(i, h))| {
                let prefix = format!("rnn.{l}");
                match config.cell {
                    CellKind::Lstm => Layer::Lstm(LstmLayer::new(store, &prefix, i, h, rng)),
                    CellKind::Qrnn => Layer::Qrnn(QrnnLayer::new(store, &prefix, i, h, config.window_of(l), rng)),
                }
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            layers,
        })
    }

    /// Runs a window of `tokens` (`T·B` ids, time-major) through the stack.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize], batch: usize, state: &RecurrentState, mut mode: Mode<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Dimension(format!(
                "{} tokens do not fold into batch {batch}",
                tokens.len()
            )));
        }
        if state.layers.len() != self.layers.len() || state.batch() != batch {
            return Err(Error::Dimension(format!(
                "state has {} layers of batch {}, model has {} layers, batch {batch}",
                state.layers.len(),
                state.batch(),
                self.layers.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let mut table = tape.param(store, self.embedding);
        if let Mode::Train(rng) = &mut mode {
            if cfg.dropout.embedding > 0.0 {
                let scales = embedding_dropout_scales(cfg.vocab_size, 1.0 - cfg.dropout.embedding, rng)?;
                table = tape.scale_rows(table, scales)?;
            }
        }
        let mut x = tape.gather(table, tokens)?;
        if let Mode::Train(rng) = &mut mode {
            x = variational_dropout(tape, x, batch, 1.0 - cfg.dropout.input, rng)?;
        }
        let mut next = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, (layer, st)) in self.layers.iter().zip(&state.layers).enumerate() {
            let wd = match &mut mode {
                Mode::Train(rng) if cfg.weight_drop > 0.0 => Some((cfg.weight_drop, &mut **rng)),
                _ => None,
            };
            let (out, s) = match layer {
                Layer::Lstm(cell) => cell.forward(tape, store, x, batch, st, wd)?,
                Layer::Qrnn(cell) => cell.forward(tape, store, x, batch, &st.c, wd)?,
            };
            next.push(s);
            x = out;
            if l != last {
                if let Mode::Train(rng) = &mut mode {
                    x = variational_dropout(tape, x, batch, 1.0 - cfg.dropout.hidden, rng)?;
                }
            }
        }
        let raw = x;
        let output = match &mut mode {
            Mode::Train(rng) => variational_dropout(tape, raw, batch, 1.0 - cfg.dropout.output, rng)?,
            Mode::Eval => raw,
        };
        Ok(ForwardOutput {
            output,
            raw,
            state: RecurrentState { layers: next },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, worst};
    use crate::model::LanguageModel;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn config(cell: CellKind, layers: usize) -> ModelConfig {
        ModelConfig {
            cell,
            vocab_size: 7,
            layers,
            hidden_size: 5,
            emb_size: 4,
            dropout: Dropouts::NONE,
            weight_drop: 0.0,
            qrnn_window: 2,
            cutoffs: vec![],
        }
    }

    fn zero_lstm(store: &mut ParamStore, input: usize, hidden: usize) -> LstmLayer {
        let layer = LstmLayer::new(store, "l", input, hidden, &mut Rng::seed_from(0));
        for id in [layer.w_ih, layer.w_hh, layer.bias] {
            store.value_mut(id).fill(0.0);
        }
        layer
    }

    fn run_step(store: &ParamStore, layer: &LstmLayer, x: Tensor, h: Tensor, c: Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let (x, h, c) = (tape.leaf(x), tape.leaf(h), tape.leaf(c));
        let w_hh = tape.param(store, layer.w_hh);
        let (h2, c2) = layer.step(&mut tape, store, x, w_hh, h, c).unwrap();
        (tape.value(h2).clone(), tape.value(c2).clone())
    }

    #[test]
    fn lstm_step_all_zero() {
        let mut store = ParamStore::new();
        let layer = zero_lstm(&mut store, 3, 2);
        let (h, c) = run_step(&store, &layer, Tensor::ones([1, 3]), Tensor::zeros([1, 2]), Tensor::zeros([1, 2]));
        assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_half_gates() {
        let mut store = ParamStore::new();
        let layer = zero_lstm(&mut store, 3, 2);
        let c0 = Tensor::from_rows(&[&[0.8, -2.0]]).unwrap();
        let (h, c) = run_step(&store, &layer, Tensor::ones([1, 3]), Tensor::zeros([1, 2]), c0.clone());
        for j in 0..2 {
            let expect_c = 0.5 * c0.data()[j];
            assert!((c.data()[j] - expect_c).abs() < 1e-15);
            assert!((h.data()[j] - 0.5 * expect_c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "l", 3, 4, &mut Rng::seed_from(1));
        assert!(store.value(layer.bias).data()[4..8].iter().all(|&b| b == 1.0));
    }

    #[test]
    fn lstm_step_gradients() {
        let mut rng = Rng::seed_from(2);
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "l", 3, 4, &mut rng);
        let x = Tensor::uniform([2, 3], 1.0, &mut rng);
        let h = Tensor::uniform([2, 4], 1.0, &mut rng);
        let c = Tensor::uniform([2, 4], 1.0, &mut rng);
        let report = check_params(&store, |tape, store| {
            let (x, h, c) = (tape.leaf(x.clone()), tape.leaf(h.clone()), tape.leaf(c.clone()));
            let w_hh = tape.param(store, layer.w_hh);
            let (h2, _) = layer.step(tape, store, x, w_hh, h, c)?;
            Ok(tape.sum(h2))
        }, 3e-3).unwrap();
        assert!(worst(&report) < 1e-4, "{report:?}");
    }

    fn forced_qrnn(store: &mut ParamStore, hidden: usize, f_bias: f64) -> QrnnLayer {
        let mut rng = Rng::seed_from(3);
        let layer = QrnnLayer::new(store, "q", 3, hidden, 2, &mut rng);
        // Keep z and o weights random, zero out the forget-gate rows.
        let w = store.value_mut(layer.weight);
        let cols = w.cols();
        w.data_mut()[hidden * cols..2 * hidden * cols].fill(0.0);
        store.value_mut(layer.bias).data_mut()[hidden..2 * hidden].fill(f_bias);
        layer
    }

    fn qrnn_cells(store: &ParamStore, layer: &QrnnLayer, x: &Tensor, batch: usize, c0: &Tensor) -> (Tensor, LayerState) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (h, state) = qrnn_forward(&mut tape, store, layer, xv, batch, c0).unwrap();
        (tape.value(h).clone(), state)
    }

    #[test]
    fn qrnn_perfect_memory() {
        let mut store = ParamStore::new();
        let layer = forced_qrnn(&mut store, 4, 60.0);
        let mut rng = Rng::seed_from(5);
        let x = Tensor::uniform([6 * 2, 3], 1.0, &mut rng);
        let c0 = Tensor::uniform([2, 4], 1.0, &mut rng);
        let (_, state) = qrnn_cells(&store, &layer, &x, 2, &c0);
        assert_eq!(state.c, c0);
    }

    #[test]
    fn qrnn_no_memory() {
        let mut store = ParamStore::new();
        let layer = forced_qrnn(&mut store, 4, -60.0);
        let mut rng = Rng::seed_from(6);
        let x = Tensor::uniform([5 * 2, 3], 1.0, &mut rng);
        let c0 = Tensor::uniform([2, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (h, _) = qrnn_forward(&mut tape, &store, &layer, xv, 2, &c0).unwrap();
        // z_t computed independently from the convolution definition.
        let w = store.value(layer.weight);
        let b = store.value(layer.bias);
        for t in 0..5 {
            for bi in 0..2 {
                for j in 0..4 {
                    let mut z = b.data()[j];
                    let mut o = b.data()[8 + j];
                    for k in 0..3 {
                        let prev = if t == 0 { 0.0 } else { x.at((t - 1) * 2 + bi, k) };
                        let cur = x.at(t * 2 + bi, k);
                        z += w.at(j, k) * prev + w.at(j, 3 + k) * cur;
                        o += w.at(8 + j, k) * prev + w.at(8 + j, 3 + k) * cur;
                    }
                    let expect = crate::tensor::sigmoid(o) * z.tanh();
                    assert!((tape.value(h).at(t * 2 + bi, j) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn qrnn_rejects_empty_sequence() {
        let mut store = ParamStore::new();
        let layer = QrnnLayer::new(&mut store, "q", 3, 4, 2, &mut Rng::seed_from(0));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 3]));
        assert!(qrnn_forward(&mut tape, &store, &layer, x, 2, &Tensor::zeros([2, 4])).is_err());
    }

    #[test]
    fn qrnn_gradients() {
        let mut rng = Rng::seed_from(7);
        let mut store = ParamStore::new();
        let layer = QrnnLayer::new(&mut store, "q", 3, 4, 2, &mut rng);
        store.set_value(layer.bias, Tensor::uniform([12], 1.0, &mut rng)).unwrap();
        let x = Tensor::uniform([5 * 2, 3], 1.0, &mut rng);
        let c0 = Tensor::uniform([2, 4], 1.0, &mut rng);
        let report = check_params(&store, |tape, store| {
            let xv = tape.leaf(x.clone());
            let (h, _) = qrnn_forward(tape, store, &layer, xv, 2, &c0)?;
            Ok(tape.sum(h))
        }, 3e-3).unwrap();
        assert!(worst(&report) < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fo_pooling_memory_bound(eps_exp in 2u32..8, steps in 1usize..12, seed in 0u64..500) {
            let eps = 10f64.powi(-(eps_exp as i32));
            // sigmoid(bias) = 1 - eps exactly enough for the bound.
            let bias = ((1.0 - eps) / eps).ln();
            let mut store = ParamStore::new();
            let layer = forced_qrnn(&mut store, 3, bias);
            let mut rng = Rng::seed_from(seed);
            let x = Tensor::uniform([steps * 2, 3], 2.0, &mut rng);
            let c0 = Tensor::uniform([2, 3], 3.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (_, state) = qrnn_forward(&mut tape, &store, &layer, xv, 2, &c0).unwrap();
            let drift = state.c.zip(&c0, |a, b| (a - b).abs()).unwrap().max_abs();
            let bound = eps * steps as f64 * (c0.max_abs() + 1.0) * (1.0 + 1e-9);
            prop_assert!(drift <= bound, "drift {} bound {}", drift, bound);
        }
    }

    #[test]
    fn weight_drop_statistics() {
        let w = Tensor::full([1000, 1000], 0.3);
        let dropped = weight_drop(&w, 0.5, &mut Rng::seed_from(8)).unwrap();
        let zeros = dropped.data().iter().filter(|&&x| x == 0.0).count() as f64 / 1e6;
        assert!((0.495..=0.505).contains(&zeros), "{zeros}");
        assert!(dropped.data().iter().all(|&x| x == 0.0 || x == 0.6));
        assert_eq!(weight_drop(&w, 0.0, &mut Rng::seed_from(8)).unwrap(), w);
        assert_eq!(
            weight_drop(&w, 0.5, &mut Rng::seed_from(9)).unwrap(),
            weight_drop(&w, 0.5, &mut Rng::seed_from(9)).unwrap()
        );
        assert!(matches!(weight_drop(&w, 1.2, &mut Rng::seed_from(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn variational_mask_is_locked_in_time() {
        let (steps, batch, d) = (6, 3, 5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([steps * batch, d]));
        let y = variational_dropout(&mut tape, x, batch, 0.5, &mut Rng::seed_from(1)).unwrap();
        let y = tape.value(y);
        for t in 1..steps {
            for b in 0..batch {
                assert_eq!(y.row(b), y.row(t * batch + b));
            }
        }
        let y_id = variational_dropout(&mut tape, x, batch, 1.0, &mut Rng::seed_from(1)).unwrap();
        assert_eq!(y_id, x);
        assert!(variational_dropout(&mut tape, x, batch, -0.5, &mut Rng::seed_from(1)).is_err());
    }

    #[test]
    fn variational_zero_fraction() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([1000, 1000]));
        let y = variational_dropout(&mut tape, x, 1000, 0.6, &mut Rng::seed_from(2)).unwrap();
        let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((0.395..=0.405).contains(&zeros), "{zeros}");
    }

    #[test]
    fn embedding_dropout_rows() {
        let scales = embedding_dropout_scales(10_000, 0.9, &mut Rng::seed_from(3)).unwrap();
        let dropped = scales.iter().filter(|&&s| s == 0.0).count();
        assert!((900..=1100).contains(&dropped), "{dropped}");
        assert!(embedding_dropout_scales(3, 1.0, &mut Rng::seed_from(0)).unwrap().iter().all(|&s| s == 1.0));

        let mut rng = Rng::seed_from(4);
        let table = Tensor::uniform([6, 3], 1.0, &mut rng);
        let scales = vec![1.25, 0.0, 1.25, 0.0, 1.25, 1.25];
        let mut tape = Tape::new();
        let t = tape.leaf(table);
        let t = tape.scale_rows(t, scales).unwrap();
        let rows = tape.gather(t, &[1, 0, 3, 1]).unwrap();
        let rows = tape.value(rows);
        for r in [0, 2, 3] {
            assert!(rows.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(rows.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_step_composition() {
        for cell in [CellKind::Lstm, CellKind::Qrnn] {
            let cfg = config(cell, 1);
            let model = LanguageModel::new(cfg.clone(), &mut Rng::seed_from(10)).unwrap();
            let state = model.zero_state(1);
            let mut tape = Tape::new();
            let out = model.rnn.forward(&mut tape, &model.params, &[3], 1, &state, Mode::Eval).unwrap();
            let got = tape.value(out.output).clone();

            let mut t2 = Tape::new();
            let emb = t2.param(&model.params, model.rnn.embedding);
            let x = t2.gather(emb, &[3]).unwrap();
            let expect = match &model.rnn.layers[0] {
                Layer::Lstm(l) => {
                    let h = t2.leaf(Tensor::zeros([1, 4]));
                    let c = t2.leaf(Tensor::zeros([1, 4]));
                    let w_hh = t2.param(&model.params, l.w_hh);
                    l.step(&mut t2, &model.params, x, w_hh, h, c).unwrap().0
                }
                Layer::Qrnn(l) => qrnn_forward(&mut t2, &model.params, l, x, 1, &Tensor::zeros([1, 4])).unwrap().0,
            };
            assert_eq!(&got, t2.value(expect), "{cell}");
        }
    }

    #[test]
    fn layer_widths_chain_to_embedding() {
        let mut cfg = config(CellKind::Lstm, 3);
        cfg.hidden_size = 9;
        assert_eq!(cfg.layer_dims(), vec![(4, 9), (9, 9), (9, 4)]);
        cfg.layers = 1;
        assert_eq!(cfg.layer_dims(), vec![(4, 4)]);
    }

    fn model_gradcheck(cell: CellKind, layers: usize, cutoffs: Vec<usize>) -> f64 {
        let mut cfg = config(cell, layers);
        cfg.cutoffs = cutoffs;
        let model = LanguageModel::new(cfg, &mut Rng::seed_from(11)).unwrap();
        let inputs = [1, 4, 0, 6, 2, 2];
        let targets = [4, 0, 6, 2, 2, 5];
        let mut state = model.zero_state(2);
        let mut rng = Rng::seed_from(21);
        for l in &mut state.layers {
            l.h = Tensor::uniform(l.h.shape().to_vec(), 0.5, &mut rng);
            l.c = Tensor::uniform(l.c.shape().to_vec(), 0.5, &mut rng);
        }
        let report = check_params(&model.params, |tape, store| {
            let m = LanguageModel { params: store.clone(), ..model.clone() };
            Ok(m.window_loss(tape, &inputs, &targets, 2, &state, Mode::Eval)?.loss)
        }, 3e-3).unwrap();
        worst(&report)
    }

    #[test]
    fn full_model_gradients() {
        for cell in [CellKind::Lstm, CellKind::Qrnn] {
            for layers in [1, 2] {
                let err = model_gradcheck(cell, layers, vec![]);
                assert!(err < 1e-4, "{cell} L={layers}: {err}");
            }
            let err = model_gradcheck(cell, 2, vec![3, 5, 7]);
            assert!(err < 1e-4, "{cell} adaptive: {err}");
        }
    }

    #[test]
    fn weight_drop_leaves_input_weights_alone() {
        let mut cfg = config(CellKind::Lstm, 1);
        cfg.weight_drop = 0.5;
        let model = LanguageModel::new(cfg, &mut Rng::seed_from(12)).unwrap();
        let Layer::Lstm(layer) = &model.rnn.layers[0] else { unreachable!() };
        let inputs = [1, 4, 0];
        let targets = [4, 0, 6];
        let state = model.zero_state(1);
        let loss = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
            let m = LanguageModel { params: store.clone(), ..model.clone() };
            let mut rng = Rng::seed_from(99);
            Ok(m.window_loss(tape, &inputs, &targets, 1, &state, Mode::Train(&mut rng))?.loss)
        };
        let report = check_params(&model.params, loss, 3e-3).unwrap();
        assert!(worst(&report) < 1e-4, "{report:?}");

        let mut work = model.params.clone();
        let mut tape = Tape::new();
        let l = loss(&mut tape, &work).unwrap();
        tape.backward(l, &mut work).unwrap();
        // Same mask the forward pass drew.
        let mask = bernoulli_mask([4 * 4, 4], 0.5, &mut Rng::seed_from(99)).unwrap();
        let g = work.grad(layer.w_hh);
        for (gv, m) in g.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
        assert!(work.grad(layer.w_ih).data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_mask_free() {
        let mut cfg = config(CellKind::Qrnn, 2);
        cfg.dropout = Dropouts { embedding: 0.3, hidden: 0.3, input: 0.3, output: 0.3 };
        cfg.weight_drop = 0.4;
        let model = LanguageModel::new(cfg.clone(), &mut Rng::seed_from(13)).unwrap();
        let mut plain_cfg = cfg;
        plain_cfg.dropout = Dropouts::NONE;
        plain_cfg.weight_drop = 0.0;
        let plain = LanguageModel { rnn: StackedRnn { config: plain_cfg, ..model.rnn.clone() }, ..model.clone() };
        let state = model.zero_state(2);
        let toks = [1, 2, 3, 4];
        let run = |m: &LanguageModel, mode: Mode<'_>| {
            let mut tape = Tape::new();
            let out = m.rnn.forward(&mut tape, &m.params, &toks, 2, &state, mode).unwrap();
            tape.value(out.output).clone()
        };
        let a = run(&model, Mode::Eval);
        assert_eq!(a, run(&model, Mode::Eval));
        assert_eq!(a, run(&plain, Mode::Train(&mut Rng::seed_from(1))));
        assert_ne!(a, run(&model, Mode::Train(&mut Rng::seed_from(1))));
    }

    #[test]
    fn state_is_detached_between_windows() {
        let model = LanguageModel::new(config(CellKind::Lstm, 2), &mut Rng::seed_from(14)).unwrap();
        let state = model.zero_state(1);
        // Both windows on one tape: only the carried state could link them.
        let mut tape = Tape::new();
        let w1 = model.window_loss(&mut tape, &[1, 2], &[2, 3], 1, &state, Mode::Eval).unwrap();
        let w2 = model.window_loss(&mut tape, &[3, 4], &[4, 5], 1, &w1.forward.state, Mode::Eval).unwrap();
        let g = tape.gradients(w2.loss).unwrap();
        assert!(g.wrt(w1.forward.output).data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(w1.forward.raw).data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(w2.forward.output).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn out_of_vocab_token() {
        let model = LanguageModel::new(config(CellKind::Lstm, 1), &mut Rng::seed_from(0)).unwrap();
        let mut tape = Tape::new();
        let err = model.rnn.forward(&mut tape, &model.params, &[7], 1, &model.zero_state(1), Mode::Eval);
        assert!(matches!(err, Err(Error::Vocabulary { id: 7, vocab: 7 })));
    }

    #[test]
    fn cell_kinds_share_the_forward_signature() {
        for cell in [CellKind::Lstm, CellKind::Qrnn] {
            let model = LanguageModel::new(config(cell, 3), &mut Rng::seed_from(15)).unwrap();
            let mut tape = Tape::new();
            let out = model.rnn.forward(&mut tape, &model.params, &[0, 1, 2, 3, 4, 5], 3, &model.zero_state(3), Mode::Eval).unwrap();
            assert_eq!(tape.value(out.output).shape(), &[6, 4]);
            assert!(tape.value(out.output).all_finite());
        }
    }
}
