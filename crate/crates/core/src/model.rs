use crate::param::ParamStore;
use crate::rng::Rng;
use crate::rnn::{ForwardOutput, Mode, ModelConfig, RecurrentState, StackedRnn};
use crate::softmax::{ClusterPlan, TiedOutput};
use crate::tape::{Tape, Var};
use crate::Result;

/// Embedding, recurrent stack, and tied output layer over one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub rnn: StackedRnn,
    pub output: TiedOutput,
    pub params: ParamStore,
}

/// Everything a training or evaluation step needs from one window.
pub struct WindowLoss {
    /// Mean negative log-likelihood in nats.
    pub loss: Var,
    /// Per-token log-probabilities, `[T·B]` time-major.
    pub log_probs: Var,
    pub forward: ForwardOutput,
    pub logits_computed: usize,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let plan = if config.cutoffs.is_empty() {
            ClusterPlan::full(config.vocab_size)
        } else {
            ClusterPlan::new(config.cutoffs.clone())?
        };
        let rnn = StackedRnn::new(config, &mut params, rng)?;
        let output = TiedOutput::new(&mut params, rnn.embedding, plan, rng)?;
        Ok(Self { rnn, output, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.rnn.config
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState::zeros(self.config(), batch)
    }

    /// Forward pass plus tied-softmax loss over one window.
    pub fn window_loss(&self, tape: &mut Tape, inputs: &[usize], targets: &[usize], batch: usize, state: &RecurrentState, mode: Mode<'_>) -> Result<WindowLoss> {
        let forward = self.rnn.forward(tape, &self.params, inputs, batch, state, mode)?;
        let lp = self.output.log_prob(tape, &self.params, forward.output, targets)?;
        let mean = tape.mean(lp.values);
        let loss = tape.scale(mean, -1.0);
        Ok(WindowLoss {
            loss,
            log_probs: lp.values,
            forward,
            logits_computed: lp.logits_computed,
        })
    }

    /// Confirms the output layer reads the input embedding and counts parameters.
    pub fn tying_audit(&self) -> TyingReport {
        let shared = self.output.embedding == self.rnn.embedding;
        let tied = self.params.num_scalars();
        let emb = self.params.value(self.rnn.embedding).len();
        TyingReport {
            shared_storage: shared,
            tied_parameters: tied,
            untied_parameters: tied + emb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TyingReport {
    pub shared_storage: bool,
    pub tied_parameters: usize,
    pub untied_parameters: usize,
}

/// Parameter count of a configuration without allocating it.
pub fn analytic_parameter_count(config: &ModelConfig) -> TyingReport {
    let k = config.cutoffs.len().saturating_sub(1);
    let tied = config.vocab_size * config.emb_size
        + config.recurrent_parameter_count()
        + TiedOutput::extra_parameter_count(config.vocab_size, config.emb_size, k);
    TyingReport {
        shared_storage: true,
        tied_parameters: tied,
        untied_parameters: tied + config.vocab_size * config.emb_size,
    }
}
