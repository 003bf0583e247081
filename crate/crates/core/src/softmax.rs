//! Weight-tied adaptive softmax.
//!
//! Token ids are frequency ranked. Ids below the first cutoff form the
//! shortlist; every later `[cutoff_k, cutoff_{k+1})` range is a tail cluster
//! represented in the head by one cluster token. Output word vectors are the
//! rows of the input embedding at full width, so no separate output matrix
//! or tail projection exists.

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{log_softmax_in_place, matmul, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    cutoffs: Vec<usize>,
}

/// A plan plus the fraction of training targets that fall in the shortlist.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanReport {
    pub plan: ClusterPlan,
    pub head_fraction: f64,
}

impl ClusterPlan {
    pub fn new(cutoffs: Vec<usize>) -> Result<Self> {
        if cutoffs.is_empty() || cutoffs[0] == 0 {
            return Err(Error::Bounds(format!("cutoffs {cutoffs:?} must start with a positive shortlist size")));
        }
        if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Ordering(format!("cutoffs {cutoffs:?} are not strictly ascending")));
        }
        Ok(Self { cutoffs })
    }

    /// A single full softmax over `vocab` words.
    pub fn full(vocab: usize) -> Self {
        Self { cutoffs: vec![vocab] }
    }

    /// Validates frequencies and cutoffs against each other.
    pub fn build(frequencies: &[u64], cutoffs: &[usize]) -> Result<PlanReport> {
        let vocab = frequencies.len();
        if frequencies.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Ordering("frequencies must be sorted non-increasing".into()));
        }
        if let Some(&c) = cutoffs.iter().find(|&&c| c > vocab) {
            return Err(Error::Bounds(format!("cutoff {c} exceeds vocabulary size {vocab}")));
        }
        if cutoffs.last() != Some(&vocab) {
            return Err(Error::Bounds(format!("last cutoff must equal vocabulary size {vocab}, got {cutoffs:?}")));
        }
        let plan = Self::new(cutoffs.to_vec())?;
        let total: u64 = frequencies.iter().sum();
        let head: u64 = frequencies[..plan.shortlist()].iter().sum();
        let head_fraction = if total == 0 { 1.0 } else { head as f64 / total as f64 };
        Ok(PlanReport { plan, head_fraction })
    }

    pub fn cutoffs(&self) -> &[usize] {
        &self.cutoffs
    }

    pub fn vocab(&self) -> usize {
        *self.cutoffs.last().expect("non-empty by construction")
    }

    pub fn shortlist(&self) -> usize {
        self.cutoffs[0]
    }

    pub fn n_clusters(&self) -> usize {
        self.cutoffs.len() - 1
    }

    /// Shortlist words plus one token per tail cluster.
    pub fn head_size(&self) -> usize {
        self.shortlist() + self.n_clusters()
    }

    /// Tail cluster index of `id`, or `None` for shortlist words.
    pub fn cluster_of(&self, id: usize) -> Option<usize> {
        if id < self.shortlist() {
            None
        } else {
            Some(self.cutoffs[1..].iter().position(|&c| id < c).expect("id checked < vocab"))
        }
    }

    pub fn cluster_range(&self, k: usize) -> (usize, usize) {
        (self.cutoffs[k], self.cutoffs[k + 1])
    }
}

/// Output layer whose word vectors are the input embedding's rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TiedOutput {
    pub embedding: ParamId,
    pub bias: ParamId,
    pub cluster_vectors: Option<ParamId>,
    pub cluster_bias: Option<ParamId>,
    pub plan: ClusterPlan,
}

/// Per-token log-probabilities plus how many logits were materialized.
pub struct LogProbs {
    pub values: Var,
    pub logits_computed: usize,
}

impl TiedOutput {
    pub fn new(store: &mut ParamStore, embedding: ParamId, plan: ClusterPlan, rng: &mut Rng) -> Result<Self> {
        let (vocab, e) = {
            let t = store.value(embedding);
            (t.rows(), t.cols())
        };
        if plan.vocab() != vocab {
            return Err(Error::Bounds(format!(
                "plan covers {} words, embedding has {vocab}",
                plan.vocab()
            )));
        }
        let bias = store.add("softmax.bias", Tensor::zeros([vocab]));
        let (cluster_vectors, cluster_bias) = if plan.n_clusters() > 0 {
            let k = plan.n_clusters();
            (
                Some(store.add("softmax.cluster_vectors", Tensor::uniform([k, e], 0.1, rng))),
                Some(store.add("softmax.cluster_bias", Tensor::zeros([k]))),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            embedding,
            bias,
            cluster_vectors,
            cluster_bias,
            plan,
        })
    }

    /// Log-probability of each target given hidden rows `h` (`[N × e]`).
    ///
    /// Only clusters that contain at least one target are evaluated.
    pub fn log_prob(&self, tape: &mut Tape, store: &ParamStore, h: Var, targets: &[usize]) -> Result<LogProbs> {
        let plan = &self.plan;
        let n = tape.value(h).rows();
        if targets.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} hidden rows", targets.len())));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= plan.vocab()) {
            return Err(Error::Vocabulary { id, vocab: plan.vocab() });
        }
        let emb = tape.param(store, self.embedding);
        let bias = tape.param(store, self.bias);
        let bias = tape.reshape(bias, [plan.vocab(), 1])?;
        let s0 = plan.shortlist();

        let (head_w, head_b) = match (self.cluster_vectors, self.cluster_bias) {
            (Some(cv), Some(cb)) => {
                let short = tape.slice_rows(emb, 0, s0)?;
                let cv = tape.param(store, cv);
                let w = tape.concat_rows(&[short, cv])?;
                let sb = tape.slice_rows(bias, 0, s0)?;
                let cb = tape.param(store, cb);
                let cb = tape.reshape(cb, [plan.n_clusters(), 1])?;
                (w, tape.concat_rows(&[sb, cb])?)
            }
            _ => (emb, bias),
        };
        let logits = tape.matmul_t(h, false, head_w, true)?;
        let logits = tape.add_bias(logits, head_b)?;
        let head_lp = tape.log_softmax_rows(logits);
        let head_idx: Vec<usize> = targets
            .iter()
            .map(|&t| plan.cluster_of(t).map_or(t, |k| s0 + k))
            .collect();
        let mut values = tape.pick_cols(head_lp, &head_idx)?;
        let mut logits_computed = n * plan.head_size();

        for k in 0..plan.n_clusters() {
            let (lo, hi) = plan.cluster_range(k);
            let rows: Vec<usize> = (0..n).filter(|&i| (lo..hi).contains(&targets[i])).collect();
            if rows.is_empty() {
                continue;
            }
            let local: Vec<usize> = rows.iter().map(|&i| targets[i] - lo).collect();
            let hk = tape.gather(h, &rows)?;
            let wk = tape.slice_rows(emb, lo, hi)?;
            let bk = tape.slice_rows(bias, lo, hi)?;
            let lk = tape.matmul_t(hk, false, wk, true)?;
            let lk = tape.add_bias(lk, bk)?;
            let lpk = tape.log_softmax_rows(lk);
            let pick = tape.pick_cols(lpk, &local)?;
            values = tape.scatter_add(values, pick, &rows)?;
            logits_computed += rows.len() * (hi - lo);
        }
        Ok(LogProbs {
            values,
            logits_computed,
        })
    }

    /// Log-probability of every vocabulary word for each row of `h`, off-tape.
    pub fn log_prob_all(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        let plan = &self.plan;
        let emb = store.value(self.embedding);
        let bias = store.value(self.bias).data();
        let s0 = plan.shortlist();
        let n = h.rows();
        let head_w = match self.cluster_vectors {
            Some(cv) => {
                let mut data = emb.data()[..s0 * emb.cols()].to_vec();
                data.extend_from_slice(store.value(cv).data());
                Tensor::new([plan.head_size(), emb.cols()], data)?
            }
            None => emb.clone(),
        };
        let mut head = matmul(h, false, &head_w, true)?;
        let mut head_bias = bias[..s0].to_vec();
        if let Some(cb) = self.cluster_bias {
            head_bias.extend_from_slice(store.value(cb).data());
        }
        for r in 0..n {
            let row = head.row_mut(r);
            for (x, b) in row.iter_mut().zip(&head_bias) {
                *x += b;
            }
            log_softmax_in_place(row);
        }
        let mut out = Tensor::zeros([n, plan.vocab()]);
        for r in 0..n {
            out.row_mut(r)[..s0].copy_from_slice(&head.row(r)[..s0]);
        }
        for k in 0..plan.n_clusters() {
            let (lo, hi) = plan.cluster_range(k);
            let wk = Tensor::new([hi - lo, emb.cols()], emb.data()[lo * emb.cols()..hi * emb.cols()].to_vec())?;
            let mut lk = matmul(h, false, &wk, true)?;
            for r in 0..n {
                let gate = head.at(r, s0 + k);
                let row = lk.row_mut(r);
                for (x, b) in row.iter_mut().zip(&bias[lo..hi]) {
                    *x += b;
                }
                log_softmax_in_place(row);
                for (o, &x) in out.row_mut(r)[lo..hi].iter_mut().zip(row.iter()) {
                    *o = gate + x;
                }
            }
        }
        Ok(out)
    }

    /// Scalars owned by the output layer beyond the shared embedding.
    pub fn extra_parameter_count(vocab: usize, emb: usize, n_clusters: usize) -> usize {
        vocab + n_clusters * emb + n_clusters
    }
}

/// Mean cross-entropy summaries of a set of per-token log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nats: f64,
    pub bpc: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

impl Metrics {
    pub fn from_total(total_nats: f64, tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Contract("metrics over an empty batch".into()));
        }
        let nats = total_nats / tokens as f64;
        Ok(Self {
            nats,
            bpc: nats / std::f64::consts::LN_2,
            perplexity: nats.exp(),
            tokens,
        })
    }
}

/// Mean nats, bits per token, and perplexity from natural-log probabilities.
pub fn loss_and_metrics(log_probs: &[f64]) -> Result<Metrics> {
    Metrics::from_total(-log_probs.iter().sum::<f64>(), log_probs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(vocab: usize, e: usize, cutoffs: Vec<usize>, seed: u64) -> (ParamStore, TiedOutput) {
        let mut rng = Rng::seed_from(seed);
        let mut store = ParamStore::new();
        let emb = store.add("embedding", Tensor::uniform([vocab, e], 1.0, &mut rng));
        let out = TiedOutput::new(&mut store, emb, ClusterPlan::new(cutoffs).unwrap(), &mut rng).unwrap();
        // Non-zero biases so they participate in every check.
        let b = Tensor::uniform([vocab], 0.5, &mut rng);
        store.set_value(out.bias, b).unwrap();
        if let Some(cb) = out.cluster_bias {
            let n = store.value(cb).len();
            store.set_value(cb, Tensor::uniform([n], 0.5, &mut rng)).unwrap();
        }
        (store, out)
    }

    #[test]
    fn plan_examples() {
        let freqs: Vec<u64> = (0..51).rev().map(|x| x as u64 + 1).collect();
        let r = ClusterPlan::build(&freqs, &[51]).unwrap();
        assert_eq!(r.plan.n_clusters(), 0);
        assert_eq!(r.head_fraction, 1.0);

        let v = 267_735;
        let freqs: Vec<u64> = (1..=v as u64).map(|r| 10_000_000 / r).collect();
        let r = ClusterPlan::build(&freqs, &[20_000, 60_000, v]).unwrap();
        assert_eq!(r.plan.head_size(), 20_002);
        assert!(r.head_fraction > 0.5 && r.head_fraction < 1.0);
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(ClusterPlan::build(&[1, 5, 2], &[3]), Err(Error::Ordering(_))));
        assert!(matches!(ClusterPlan::build(&[5, 2, 1], &[2, 4]), Err(Error::Bounds(_))));
        assert!(matches!(ClusterPlan::new(vec![4, 4, 9]), Err(Error::Ordering(_))));
    }

    #[test]
    fn cluster_lookup() {
        let plan = ClusterPlan::new(vec![10, 30, 50]).unwrap();
        assert_eq!(plan.cluster_of(9), None);
        assert_eq!(plan.cluster_of(10), Some(0));
        assert_eq!(plan.cluster_of(29), Some(0));
        assert_eq!(plan.cluster_of(30), Some(1));
        assert_eq!(plan.cluster_of(49), Some(1));
    }

    #[test]
    fn on_tape_matches_off_tape_enumeration() {
        let (store, out) = setup(50, 6, vec![10, 30, 50], 3);
        let h = Tensor::uniform([4, 6], 1.0, &mut Rng::seed_from(9));
        let all = out.log_prob_all(&store, &h).unwrap();
        for w in 0..50 {
            let mut tape = Tape::new();
            let hv = tape.leaf(h.clone());
            let lp = out.log_prob(&mut tape, &store, hv, &[w; 4]).unwrap();
            for r in 0..4 {
                let got = tape.value(lp.values).data()[r];
                assert!((got - all.at(r, w)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_normalize() {
        let (store, out) = setup(50, 6, vec![10, 30, 50], 4);
        let h = Tensor::uniform([7, 6], 2.0, &mut Rng::seed_from(1));
        let all = out.log_prob_all(&store, &h).unwrap();
        for r in 0..7 {
            let s: f64 = all.row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn untouched_clusters_are_not_materialized() {
        let (store, out) = setup(50, 4, vec![10, 30, 50], 5);
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::ones([3, 4]));
        let lp = out.log_prob(&mut tape, &store, h, &[0, 1, 35]).unwrap();
        assert_eq!(lp.logits_computed, 3 * 12 + 20);
    }

    #[test]
    fn out_of_range_target() {
        let (store, out) = setup(20, 3, vec![20], 1);
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::ones([1, 3]));
        assert!(matches!(
            out.log_prob(&mut tape, &store, h, &[20]),
            Err(Error::Vocabulary { id: 20, vocab: 20 })
        ));
    }

    #[test]
    fn metric_identities() {
        let v = 205f64;
        let m = loss_and_metrics(&[-(v.ln()); 10]).unwrap();
        assert!((m.bpc - v.log2()).abs() < 1e-12);
        assert!((m.bpc - 7.680).abs() < 1e-3);
        let m = loss_and_metrics(&[0.0; 5]).unwrap();
        assert_eq!((m.bpc, m.perplexity), (0.0, 1.0));
        let v = 267_735f64;
        let m = loss_and_metrics(&[-(v.ln())]).unwrap();
        assert!((m.perplexity - v).abs() / v < 1e-12);
        assert!(matches!(loss_and_metrics(&[]), Err(Error::Contract(_))));
    }
}
