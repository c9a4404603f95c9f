//! Causal transformer user encoder, dot-product scoring and the in-batch
//! debiased cross-entropy objective.
//!
//! Sequences are packed: every user's (truncated) prefix occupies a
//! contiguous run of rows, and attention never crosses runs. Positional
//! embeddings are right-aligned, so the most recent item always receives the
//! last positional row regardless of sequence length.
//!
//! [`train`] drives Adam over mini-batches with early stopping on
//! validation HR@10.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::UserSplit;
use crate::diffcore::{CeRow, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::error::{Error, Result};

mod train;

pub use train::{train, EpochLog, StepRecord, TrainConfig, TrainReport, Trainer};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqEncoderConfig {
    pub d_hidden: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for SeqEncoderConfig {
    fn default() -> Self {
        Self {
            d_hidden: 64,
            num_blocks: 2,
            num_heads: 2,
            max_seq_len: 10,
            dropout: 0.1,
        }
    }
}

impl SeqEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_hidden and max_seq_len must be positive".into()));
        }
        if self.num_heads == 0 || self.d_hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_hidden {} not divisible by num_heads {}",
                self.d_hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-LN causal transformer over item embeddings.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub config: SeqEncoderConfig,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl SeqEncoder {
    pub fn new<R: Rng>(config: SeqEncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_hidden;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / ((4 * d) as f64).sqrt();
        let pos = store.normal("seqrec.pos", config.max_seq_len, d, 0.02, rng)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let p = format!("seqrec.block{b}");
            blocks.push(BlockIds {
                ln1_g: store.add(format!("{p}.ln1.g"), Tensor::filled(1, d, 1.0), false)?,
                ln1_b: store.zeros(format!("{p}.ln1.b"), 1, d)?,
                wq: store.normal(format!("{p}.attn.wq"), d, d, sd, rng)?,
                bq: store.zeros(format!("{p}.attn.bq"), 1, d)?,
                wk: store.normal(format!("{p}.attn.wk"), d, d, sd, rng)?,
                bk: store.zeros(format!("{p}.attn.bk"), 1, d)?,
                wv: store.normal(format!("{p}.attn.wv"), d, d, sd, rng)?,
                bv: store.zeros(format!("{p}.attn.bv"), 1, d)?,
                wo: store.normal(format!("{p}.attn.wo"), d, d, sd, rng)?,
                bo: store.zeros(format!("{p}.attn.bo"), 1, d)?,
                ln2_g: store.add(format!("{p}.ln2.g"), Tensor::filled(1, d, 1.0), false)?,
                ln2_b: store.zeros(format!("{p}.ln2.b"), 1, d)?,
                w1: store.normal(format!("{p}.ffn.w1"), d, 4 * d, sd, rng)?,
                b1: store.zeros(format!("{p}.ffn.b1"), 1, 4 * d)?,
                w2: store.normal(format!("{p}.ffn.w2"), 4 * d, d, sf, rng)?,
                b2: store.zeros(format!("{p}.ffn.b2"), 1, d)?,
            });
        }
        let ln_g = store.add("seqrec.ln.g", Tensor::filled(1, d, 1.0), false)?;
        let ln_b = store.zeros("seqrec.ln.b", 1, d)?;
        Ok(Self {
            config,
            pos,
            blocks,
            ln_g,
            ln_b,
        })
    }

    /// Encode packed sequences. `items` holds one embedding row per position;
    /// `segments` delimit users. Returns one state row per position, where
    /// the state at position `t` depends only on positions `≤ t` of the same
    /// segment.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, items: Var, segments: &[Segment]) -> Result<Var> {
        let c = &self.config;
        let rows = g.value(items).rows();
        let mut pos_idx = Vec::with_capacity(rows);
        for s in segments {
            if s.len > c.max_seq_len {
                return Err(Error::Contract(format!(
                    "segment of length {} exceeds max_seq_len {}",
                    s.len, c.max_seq_len
                )));
            }
            pos_idx.extend((0..s.len).map(|p| c.max_seq_len - s.len + p));
        }
        if pos_idx.len() != rows {
            return Err(Error::Contract(format!(
                "segments cover {} rows but {rows} embeddings were given",
                pos_idx.len()
            )));
        }
        let pos_table = g.param(store, self.pos);
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut x = g.add(items, pos)?;
        x = g.dropout(x, c.dropout)?;
        for b in &self.blocks {
            let p = |g: &mut Graph, id| g.param(store, id);
            let (g1, b1) = (p(g, b.ln1_g), p(g, b.ln1_b));
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let (wq, bq, wk, bk, wv, bv) = (p(g, b.wq), p(g, b.bq), p(g, b.wk), p(g, b.bk), p(g, b.wv), p(g, b.bv));
            let q = g.linear(h, wq, bq)?;
            let k = g.linear(h, wk, bk)?;
            let v = g.linear(h, wv, bv)?;
            let a = g.causal_attention(q, k, v, segments, c.num_heads)?;
            let (wo, bo) = (p(g, b.wo), p(g, b.bo));
            let a = g.linear(a, wo, bo)?;
            let a = g.dropout(a, c.dropout)?;
            x = g.add(x, a)?;
            let (g2, b2) = (p(g, b.ln2_g), p(g, b.ln2_b));
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let (w1, bb1, w2, bb2) = (p(g, b.w1), p(g, b.b1), p(g, b.w2), p(g, b.b2));
            let f = g.linear(h, w1, bb1)?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w2, bb2)?;
            let f = g.dropout(f, c.dropout)?;
            x = g.add(x, f)?;
        }
        let (lg, lb) = (g.param(store, self.ln_g), g.param(store, self.ln_b));
        g.layer_norm(x, lg, lb, LN_EPS)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.pos];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.extend([self.ln_g, self.ln_b]);
        out
    }
}

pub fn score(user_state: &[f64], item_embedding: &[f64]) -> Result<f64> {
    if user_state.len() != item_embedding.len() {
        return Err(Error::Shape {
            op: "score",
            left: vec![user_state.len()],
            right: vec![item_embedding.len()],
        });
    }
    Ok(user_state.iter().zip(item_embedding).map(|(a, b)| a * b).sum())
}

/// `ŷ − ln p`.
pub fn debiased_logit(y_hat: f64, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::Contract(format!("popularity must be positive, got {p}")));
    }
    Ok(y_hat - p.ln())
}

/// A batch of users with their truncated training inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub users: Vec<usize>,
    /// Input items per user; `targets[u][t]` follows `inputs[u][..=t]`.
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Interacted-item set `I_u` per user.
    pub interacted: Vec<BTreeSet<usize>>,
}

impl TrainBatch {
    /// Next-item pairs from each user's training view, keeping only the most
    /// recent `max_len` inputs. Users without a training pair are skipped.
    pub fn from_splits(splits: &[&UserSplit], max_len: usize) -> Self {
        let mut b = TrainBatch {
            users: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
            interacted: Vec::new(),
        };
        for u in splits {
            let n = u.train.len();
            if n < 2 {
                continue;
            }
            let start = (n - 1).saturating_sub(max_len);
            b.users.push(u.user);
            b.inputs.push(u.train[start..n - 1].to_vec());
            b.targets.push(u.train[start + 1..n].to_vec());
            b.interacted.push(u.interacted());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn validate(&self, num_items: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        for (u, (inp, tgt)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if inp.len() != tgt.len() || inp.is_empty() {
                return Err(Error::Contract(format!("user row {u}: inputs and targets must be non-empty and aligned")));
            }
            if let Some(&bad) = inp.iter().chain(tgt).find(|&&i| i >= num_items) {
                return Err(Error::OutOfRange {
                    what: "batch item",
                    index: bad,
                    len: num_items,
                });
            }
        }
        Ok(())
    }

    /// Flatten into the index structure the loss needs.
    pub fn plan(&self) -> BatchPlan {
        let mut all: BTreeSet<usize> = BTreeSet::new();
        let mut cand: BTreeSet<usize> = BTreeSet::new();
        for (inp, tgt) in self.inputs.iter().zip(&self.targets) {
            all.extend(inp);
            all.extend(tgt);
            cand.extend(tgt);
        }
        let items: Vec<usize> = all.into_iter().collect();
        let slot: BTreeMap<usize, usize> = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
        let candidates: Vec<usize> = cand.into_iter().collect();
        let col: BTreeMap<usize, usize> = candidates.iter().enumerate().map(|(i, &it)| (it, i)).collect();

        let mut input_rows = Vec::new();
        let mut segments = Vec::new();
        let mut rows = Vec::new();
        for ((inp, tgt), iu) in self.inputs.iter().zip(&self.targets).zip(&self.interacted) {
            segments.push(Segment {
                start: input_rows.len(),
                len: inp.len(),
            });
            input_rows.extend(inp.iter().map(|i| slot[i]));
            let excluded: Vec<usize> = candidates
                .iter()
                .enumerate()
                .filter(|(_, it)| iu.contains(it))
                .map(|(c, _)| c)
                .collect();
            for t in tgt {
                rows.push(CeRow {
                    target: col[t],
                    excluded: excluded.clone(),
                });
            }
        }
        BatchPlan {
            candidate_rows: candidates.iter().map(|i| slot[i]).collect(),
            items,
            candidates,
            input_rows,
            segments,
            rows,
        }
    }
}

/// Index structure of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    /// Unique items whose embeddings the batch needs.
    pub items: Vec<usize>,
    /// Unique target items: the in-batch candidate pool.
    pub candidates: Vec<usize>,
    /// Row of each candidate within `items`.
    pub candidate_rows: Vec<usize>,
    /// Row within `items` of every packed input position.
    pub input_rows: Vec<usize>,
    pub segments: Vec<Segment>,
    /// One cross-entropy row per (user, position).
    pub rows: Vec<CeRow>,
}

impl BatchPlan {
    /// Debiased in-batch cross-entropy given `item_emb`, the embeddings of
    /// `self.items` (`items × d`), and log-popularity over the catalog.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoder: &SeqEncoder,
        item_emb: Var,
        log_pop: &[f64],
    ) -> Result<Var> {
        let x = g.gather_rows(item_emb, &self.input_rows)?;
        let states = encoder.encode(g, store, x, &self.segments)?;
        let cand = g.gather_rows(item_emb, &self.candidate_rows)?;
        let logits = g.matmul_nt(states, cand)?;
        let lp = self.candidates.iter().map(|&i| log_pop[i]).collect();
        g.debiased_ce(logits, self.rows.clone(), lp)
    }
}

/// Convenience wrapper: plan the batch and compute its loss.
pub fn batch_loss(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &SeqEncoder,
    batch: &TrainBatch,
    item_emb_of: impl FnOnce(&mut Graph, &[usize]) -> Result<Var>,
    log_pop: &[f64],
) -> Result<Var> {
    batch.validate(log_pop.len())?;
    let plan = batch.plan();
    let emb = item_emb_of(g, &plan.items)?;
    plan.loss(g, store, encoder, emb, log_pop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(d: usize, max_len: usize, dropout: f64) -> (SeqEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = SeqEncoderConfig {
            d_hidden: d,
            num_blocks: 2,
            num_heads: 2,
            max_seq_len: max_len,
            dropout,
        };
        let e = SeqEncoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (e, store)
    }

    fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn score_and_logit_examples() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(score(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 11.0);
        assert_eq!(debiased_logit(1.0, 1.0).unwrap(), 1.0);
        assert!((debiased_logit(0.5, 0.25).unwrap() - 1.88629).abs() < 1e-5);
        assert!((debiased_logit(0.0, (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!(debiased_logit(0.0, 0.0).is_err());
    }

    #[test]
    fn causal_and_deterministic() {
        let (e, store) = encoder(4, 5, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(5, 4, &mut rng);
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let s = e.encode(&mut g, &store, v, &[Segment { start: 0, len: 5 }]).unwrap();
            g.value(s).clone()
        };
        let a = run(&x);
        assert_eq!(a, run(&x));
        let mut y = x.clone();
        y.row_mut(3).iter_mut().for_each(|v| *v += 1.0);
        let b = run(&y);
        // right-aligned positions: prefixes share rows only within one length
        assert_eq!(&a.data()[..3 * 4], &b.data()[..3 * 4]);
        assert_ne!(a.row(3), b.row(3));

        let mut g = Graph::new();
        let v = g.constant(rand_tensor(1, 4, &mut rng));
        let s = e.encode(&mut g, &store, v, &[Segment { start: 0, len: 1 }]).unwrap();
        assert!(g.value(s).is_finite());
    }

    #[test]
    fn overlong_segments_are_rejected() {
        let (e, store) = encoder(4, 2, 0.0);
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(3, 4));
        assert!(e.encode(&mut g, &store, v, &[Segment { start: 0, len: 3 }]).is_err());
    }

    #[test]
    fn batch_truncates_to_recent_items() {
        let u = UserSplit {
            user: 4,
            train: vec![1, 2, 3, 4, 5, 6],
            valid_context: vec![1, 2, 3, 4, 5, 6],
            valid_target: 7,
            test_context: vec![1, 2, 3, 4, 5, 6, 7],
            test_target: 8,
        };
        let b = TrainBatch::from_splits(&[&u], 3);
        assert_eq!(b.inputs[0], vec![3, 4, 5]);
        assert_eq!(b.targets[0], vec![4, 5, 6]);
        assert!(b.interacted[0].contains(&1));
    }

    /// Direct loop transcription of the loss: for each (u, t) the numerator is
    /// `exp(ŷ − ln p)` of the target, the denominator adds every unique batch
    /// target not in `I_u`.
    fn oracle(batch: &TrainBatch, states: &BTreeMap<(usize, usize), Vec<f64>>, emb: &BTreeMap<usize, Vec<f64>>, pop: &[f64]) -> f64 {
        let mut pool: Vec<usize> = batch.targets.iter().flatten().copied().collect();
        pool.sort();
        pool.dedup();
        let mut total = 0.0;
        let mut count = 0.0;
        for u in 0..batch.len() {
            for (t, &target) in batch.targets[u].iter().enumerate() {
                let s = &states[&(u, t)];
                let yt: f64 = s.iter().zip(&emb[&target]).map(|(a, b)| a * b).sum();
                let num = (yt - pop[target].ln()).exp();
                let mut den = num;
                for &j in &pool {
                    if j == target || batch.interacted[u].contains(&j) {
                        continue;
                    }
                    let yj: f64 = s.iter().zip(&emb[&j]).map(|(a, b)| a * b).sum();
                    den += (yj - pop[j].ln()).exp();
                }
                total += -(num / den).ln();
                count += 1.0;
            }
        }
        total / count
    }

    fn random_batch(rng: &mut ChaCha8Rng, n_items: usize) -> TrainBatch {
        let b = rng.gen_range(1..=8);
        let mut batch = TrainBatch {
            users: (0..b).collect(),
            inputs: vec![],
            targets: vec![],
            interacted: vec![],
        };
        for _ in 0..b {
            let len = rng.gen_range(2..=5);
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..n_items)).collect();
            batch.inputs.push(seq[..len - 1].to_vec());
            batch.targets.push(seq[1..].to_vec());
            let mut iu: BTreeSet<usize> = seq.iter().copied().collect();
            if rng.gen_bool(0.3) {
                iu.insert(rng.gen_range(0..n_items));
            }
            batch.interacted.push(iu);
        }
        batch
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let (e, store) = encoder(4, 5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_items = 12;
        for _ in 0..50 {
            let batch = random_batch(&mut rng, n_items);
            let table = rand_tensor(n_items, 4, &mut rng);
            let pop: Vec<f64> = {
                let raw: Vec<f64> = (0..n_items).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            };
            let lp: Vec<f64> = pop.iter().map(|p| p.ln()).collect();
            let mut g = Graph::new();
            let plan = batch.plan();
            let emb = g.constant(table.gather_rows(&plan.items));
            let loss = plan.loss(&mut g, &store, &e, emb, &lp).unwrap();
            let got = g.value(loss).data()[0];

            let x = g.gather_rows(emb, &plan.input_rows).unwrap();
            let st = e.encode(&mut g, &store, x, &plan.segments).unwrap();
            let st = g.value(st).clone();
            let mut states = BTreeMap::new();
            let mut r = 0;
            for u in 0..batch.len() {
                for t in 0..batch.inputs[u].len() {
                    states.insert((u, t), st.row(r).to_vec());
                    r += 1;
                }
            }
            let emb_map = (0..n_items).map(|i| (i, table.row(i).to_vec())).collect();
            let want = oracle(&batch, &states, &emb_map, &pop);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_popularity_shift_invariance_and_permutation() {
        let (e, store) = encoder(4, 5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = random_batch(&mut rng, 10);
        let table = rand_tensor(10, 4, &mut rng);
        let eval = |b: &TrainBatch, lp: &[f64]| {
            let mut g = Graph::new();
            let plan = b.plan();
            let emb = g.constant(table.gather_rows(&plan.items));
            let l = plan.loss(&mut g, &store, &e, emb, lp).unwrap();
            g.value(l).data()[0]
        };
        let none = eval(&batch, &[0.0; 10]);
        let uniform = eval(&batch, &[(0.1f64).ln(); 10]);
        assert!((none - uniform).abs() <= 1e-10);

        let mut rev = batch.clone();
        rev.users.reverse();
        rev.inputs.reverse();
        rev.targets.reverse();
        rev.interacted.reverse();
        assert!((eval(&rev, &[0.0; 10]) - none).abs() <= 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let batch = TrainBatch {
            users: vec![],
            inputs: vec![],
            targets: vec![],
            interacted: vec![],
        };
        assert!(batch.validate(3).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (e, mut store) = encoder(4, 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids = e.param_ids();
        for &id in &ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
        }
        let x = rand_tensor(5, 4, &mut rng);
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
        let err = finite_diff_check_params(
            &mut store,
            &ids,
            |g, s| {
                let v = g.constant(x.clone());
                let out = e.encode(g, s, v, &segs)?;
                let w = g.constant(rand_like(out, g));
                let p = g.mul(out, w)?;
                g.sum(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn rand_like(v: Var, g: &Graph) -> Tensor {
        let (r, c) = g.value(v).dims();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rand_tensor(r, c, &mut rng)
    }
}
