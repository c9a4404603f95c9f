//! Ranking metrics, KSG mutual information, paired t-tests and parameter
//! accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::digamma;

use crate::datakit::LeaveOneOut;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::fusion::FusionMethod;
use crate::hscache::HiddenSource;
use crate::model::{CrossanModel, ModelConfig};
use crate::modality::Modality;
use crate::rng::fnv64;
use crate::sidenet::SideVariant;

/// Duplicate points are separated by noise of this magnitude.
pub const KSG_JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub user: usize,
    pub target: usize,
    pub rank: usize,
}

/// Pessimistic rank of `target`: one plus every other item scoring higher
/// or equal.
pub fn rank_full(scores: &[f64], target: usize) -> Result<usize> {
    let t = *scores.get(target).ok_or(Error::OutOfRange {
        what: "target item",
        index: target,
        len: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && s >= t)
        .count();
    Ok(1 + ahead)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    Test,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected valid or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ranks: Vec<RankResult>,
    pub hr10: f64,
    pub hr20: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<RankResult>) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|r| f(r.rank)).sum::<f64>() / n;
        Self {
            hr10: mean(&|r| hr_at_k(r, 10)),
            hr20: mean(&|r| hr_at_k(r, 20)),
            ndcg10: mean(&|r| ndcg_at_k(r, 10)),
            ndcg20: mean(&|r| ndcg_at_k(r, 20)),
            ranks,
        }
    }

    /// Per-user HR@10 in user order, for paired tests.
    pub fn per_user_hr10(&self) -> Vec<f64> {
        self.ranks.iter().map(|r| hr_at_k(r.rank, 10)).collect()
    }

    pub fn per_user_csv(&self) -> String {
        let mut s = String::from("user,target,rank,hr10,ndcg10,hr20,ndcg20\n");
        for r in &self.ranks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.user,
                r.target,
                r.rank,
                hr_at_k(r.rank, 10),
                ndcg_at_k(r.rank, 10),
                hr_at_k(r.rank, 20),
                ndcg_at_k(r.rank, 20)
            );
        }
        s
    }
}

/// Metrics report as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub model: String,
    pub dataset_hash: String,
    pub split: EvalSplit,
    #[serde(rename = "HR@10")]
    pub hr10: f64,
    #[serde(rename = "HR@20")]
    pub hr20: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    #[serde(rename = "NDCG@20")]
    pub ndcg20: f64,
    pub users: usize,
    pub per_user_csv: String,
}

/// Rank every evaluated user's held-out item against the full catalog.
pub fn evaluate(
    model: &CrossanModel,
    source: &dyn HiddenSource,
    split: &LeaveOneOut,
    which: EvalSplit,
    max_users: Option<usize>,
) -> Result<EvalReport> {
    let items: Vec<usize> = (0..split.num_items).collect();
    let table = model.item_embeddings(source, &items)?;
    let users = &split.users[..max_users.unwrap_or(usize::MAX).min(split.users.len())];
    let contexts: Vec<&[usize]> = users
        .iter()
        .map(|u| match which {
            EvalSplit::Valid => u.valid_context.as_slice(),
            EvalSplit::Test => u.test_context.as_slice(),
        })
        .collect();
    let states = model.user_states(&contexts, &table)?;
    let scores = states.matmul(&table.transpose())?;
    let mut ranks = Vec::with_capacity(users.len());
    for (r, u) in users.iter().enumerate() {
        let target = match which {
            EvalSplit::Valid => u.valid_target,
            EvalSplit::Test => u.test_target,
        };
        ranks.push(RankResult {
            user: u.user,
            target,
            rank: rank_full(scores.row(r), target)?,
        });
    }
    Ok(EvalReport::from_ranks(ranks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIReport {
    pub estimator: String,
    pub k: usize,
    pub samples: usize,
    pub mi: f64,
    /// Whether duplicate points forced jittering.
    pub jittered: bool,
}

fn has_duplicates(x: &Tensor) -> bool {
    let mut rows: Vec<Vec<u64>> = (0..x.rows()).map(|r| x.row(r).iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.windows(2).any(|w| w[0] == w[1])
}

/// If `x` has repeated rows, add uniform noise of size [`KSG_JITTER`] seeded
/// from the contents of `x`, so the same data always gets the same jitter.
fn dejitter(x: &Tensor) -> (Tensor, bool) {
    if !has_duplicates(x) {
        return (x.clone(), false);
    }
    let bytes: Vec<u8> = x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(fnv64(&bytes));
    let data = x.data().iter().map(|v| v + KSG_JITTER * rng.gen_range(-1.0..1.0)).collect();
    let j = Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape");
    log::warn!("ksg_mi: duplicate samples jittered by {KSG_JITTER}");
    (j, true)
}

fn cheb(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Kraskov–Stögbauer–Grassberger estimator (variant 1, max-norm), in nats,
/// clipped at zero. Rows of `x` and `y` are paired samples.
pub fn ksg_mi(x: &Tensor, y: &Tensor, k: usize) -> Result<MIReport> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::shape("ksg_mi", x.dims(), y.dims()));
    }
    if k == 0 || n <= k {
        return Err(Error::Contract(format!("ksg_mi needs more than k = {k} samples, got {n}")));
    }
    let (x, jx) = dejitter(x);
    let (y, jy) = dejitter(y);
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut joint = vec![0.0; n - 1];
    let mut acc = 0.0;
    for i in 0..n {
        let (xi, yi) = (x.row(i), y.row(i));
        let mut c = 0;
        for j in 0..n {
            dx[j] = cheb(xi, x.row(j));
            dy[j] = cheb(yi, y.row(j));
            if j != i {
                joint[c] = dx[j].max(dy[j]);
                c += 1;
            }
        }
        let (_, eps, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = *eps;
        let nx = (0..n).filter(|&j| j != i && dx[j] < eps).count();
        let ny = (0..n).filter(|&j| j != i && dy[j] < eps).count();
        acc += digamma((nx + 1) as f64) + digamma((ny + 1) as f64);
    }
    let mi = digamma(k as f64) + digamma(n as f64) - acc / n as f64;
    Ok(MIReport {
        estimator: "KSG-1".into(),
        k,
        samples: n,
        mi: mi.max(0.0),
        jittered: jx || jy,
    })
}

/// MI between the text and image towers' final side outputs over `items`,
/// for a cross-modal and an independent model.
pub fn mi_compare(
    cross: &CrossanModel,
    indep: &CrossanModel,
    source: &dyn HiddenSource,
    items: &[usize],
    k: usize,
) -> Result<(MIReport, MIReport)> {
    if cross.d_models != indep.d_models || cross.modalities() != indep.modalities() {
        return Err(Error::Config("mi_compare: the two models were built for different inputs".into()));
    }
    let one = |m: &CrossanModel| -> Result<MIReport> {
        let t = m
            .side
            .tower_index(Modality::Text)
            .ok_or_else(|| Error::MissingModality("mi_compare needs a text tower".into()))?;
        let i = m
            .side
            .tower_index(Modality::Image)
            .ok_or_else(|| Error::MissingModality("mi_compare needs an image tower".into()))?;
        let outs = m.side_outputs(source, items)?;
        ksg_mi(&outs[t], &outs[i], k)
    };
    Ok((one(cross)?, one(indep)?))
}

/// How often a modality is among an item's selected experts, split by
/// whether that modality's features were corrupted for the item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingRates {
    pub corrupted_selected: usize,
    pub corrupted_total: usize,
    pub clean_selected: usize,
    pub clean_total: usize,
}

impl RoutingRates {
    pub fn corrupted_rate(&self) -> f64 {
        self.corrupted_selected as f64 / self.corrupted_total.max(1) as f64
    }

    pub fn clean_rate(&self) -> f64 {
        self.clean_selected as f64 / self.clean_total.max(1) as f64
    }

    /// Corrupted over clean selection frequency.
    pub fn ratio(&self) -> f64 {
        self.corrupted_rate() / self.clean_rate()
    }
}

/// Selection frequencies over the modalities that have any corrupted item.
/// `selected[r]` holds expert indices into `modalities` for `items[r]`.
pub fn routing_rates(
    items: &[usize],
    modalities: &[Modality],
    selected: &[Vec<usize>],
    corrupted: &BTreeMap<Modality, Vec<bool>>,
) -> Result<RoutingRates> {
    let mut r = RoutingRates::default();
    for (e, m) in modalities.iter().enumerate() {
        let Some(flags) = corrupted.get(m) else { continue };
        if !flags.iter().any(|&c| c) {
            continue;
        }
        for (&item, sel) in items.iter().zip(selected) {
            let bad = *flags.get(item).ok_or(Error::OutOfRange {
                what: "routed item",
                index: item,
                len: flags.len(),
            })?;
            let hit = usize::from(sel.contains(&e));
            if bad {
                r.corrupted_selected += hit;
                r.corrupted_total += 1;
            } else {
                r.clean_selected += hit;
                r.clean_total += 1;
            }
        }
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    pub mean_diff: f64,
    /// Zero-variance differences with a nonzero mean.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "paired_t_test",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, n, mean_diff: 0.0, degenerate: false }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
                n,
                mean_diff: mean,
                degenerate: true,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Contract(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        t,
        p: p.clamp(0.0, 1.0),
        n,
        mean_diff: mean,
        degenerate: false,
    })
}

/// Trainable element counts, total and per top-level module.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}

pub fn count_trainable_params(model: &CrossanModel) -> ParamCount {
    let mut c = ParamCount::default();
    for (_, p) in model.store.iter() {
        if p.frozen {
            continue;
        }
        let module = p.name.split('.').next().unwrap_or("").to_string();
        *c.by_module.entry(module).or_default() += p.value.len();
        c.total += p.value.len();
    }
    c
}

/// Parameters of one adapter block: `2·d·b + b + d`.
pub fn adapter_params(d_side: usize, bottleneck: usize) -> usize {
    2 * d_side * bottleneck + bottleneck + d_side
}

/// Closed-form trainable parameter count of a model built from `config`.
pub fn closed_form_params(config: &ModelConfig, d_models: &BTreeMap<Modality, usize>) -> Result<ParamCount> {
    let s = &config.sidenet;
    let (ds, b, l) = (s.d_side, s.bottleneck(), s.num_side_layers);
    let nm = s.modalities.len();
    let gate = match s.variant {
        SideVariant::Cross => nm + 1,
        SideVariant::Independent => 2,
    };
    let mut side = 0;
    for m in &s.modalities {
        let dm = *d_models
            .get(m)
            .ok_or_else(|| Error::MissingModality(m.to_string()))?;
        // initial + per-layer entry projections, adapters, gates
        side += (l + 1) * (dm * ds + ds) + l * adapter_params(ds, b) + l * gate;
    }

    let d = config.seqrec.d_hidden;
    let proj = nm * (ds * d + d);
    let fusion = match config.fusion.method {
        FusionMethod::Momef | FusionMethod::DynamicGated => proj + nm * ds * nm + nm,
        FusionMethod::StaticGated => proj + nm,
        FusionMethod::Concat => nm * ds * d + d,
        FusionMethod::CrossAttention => proj + d,
    };

    let q = &config.seqrec;
    let block = 2 * (2 * d) + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let seq = q.max_seq_len * d + q.num_blocks * block + 2 * d;

    let by_module: BTreeMap<String, usize> =
        [("sidenet".to_string(), side), ("fusion".to_string(), fusion), ("seqrec".to_string(), seq)].into();
    Ok(ParamCount {
        total: side + fusion + seq,
        by_module,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::seqrec::SeqEncoderConfig;
    use crate::sidenet::SideConfig;
    use rand_distr::StandardNormal;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_full(&[1.0, 5.0, 2.0], 1).unwrap(), 1);
        assert_eq!(rank_full(&[3.0, 2.0, 2.0], 1).unwrap(), 3);
        assert_eq!(rank_full(&[0.5; 5], 2).unwrap(), 5);
        assert!(rank_full(&[1.0], 1).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!((hr_at_k(1, 10), ndcg_at_k(1, 10)), (1.0, 1.0));
        assert!((ndcg_at_k(2, 10) - 0.63093).abs() < 1e-5);
        assert_eq!((hr_at_k(11, 10), ndcg_at_k(11, 10)), (0.0, 0.0));
    }

    /// Sort-everything oracle: position of the target after sorting by
    /// descending score with ties placing the target last.
    fn sorted_rank(scores: &[f64], target: usize) -> usize {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| (a == target).cmp(&(b == target)))
        });
        idx.iter().position(|&i| i == target).unwrap() + 1
    }

    proptest::proptest! {
        #[test]
        fn metrics_match_sorting_oracle(
            scores in proptest::collection::vec(0u8..5, 1..=20),
            t in 0usize..20,
            k in 1usize..25,
        ) {
            let s: Vec<f64> = scores.iter().map(|&x| f64::from(x)).collect();
            let t = t % s.len();
            let r = rank_full(&s, t).unwrap();
            let o = sorted_rank(&s, t);
            proptest::prop_assert_eq!(r, o);
            proptest::prop_assert_eq!(hr_at_k(r, k), if o <= k { 1.0 } else { 0.0 });
            proptest::prop_assert_eq!(ndcg_at_k(r, k), if o <= k { 1.0 / ((o + 1) as f64).log2() } else { 0.0 });
        }
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn ksg_calibration() {
        let x = gaussian(2000, 2, 1);
        let y = gaussian(2000, 2, 2);
        let same = ksg_mi(&x, &x, 3).unwrap();
        assert!(same.mi >= 2.0, "{}", same.mi);
        let ind = ksg_mi(&x, &y, 3).unwrap();
        assert!(ind.mi.abs() <= 0.05, "{}", ind.mi);

        let rho: f64 = 0.9;
        let a = gaussian(5000, 1, 3);
        let e = gaussian(5000, 1, 4);
        let b = Tensor::from_vec(
            5000,
            1,
            a.data().iter().zip(e.data()).map(|(u, v)| rho * u + (1.0 - rho * rho).sqrt() * v).collect(),
        )
        .unwrap();
        let est = ksg_mi(&a, &b, 3).unwrap().mi;
        let truth = -0.5 * (1.0 - rho * rho).ln();
        assert!((est - truth).abs() <= 0.05, "{est} vs {truth}");
    }

    #[test]
    fn ksg_symmetry_and_duplicates() {
        let x = gaussian(800, 2, 5);
        let noise = gaussian(800, 2, 6);
        let y = Tensor::from_vec(800, 2, x.data().iter().zip(noise.data()).map(|(a, b)| a + 0.5 * b).collect()).unwrap();
        let a = ksg_mi(&x, &y, 3).unwrap().mi;
        let b = ksg_mi(&y, &x, 3).unwrap().mi;
        assert!((a - b).abs() <= 1e-9);

        let mut dup = x.clone();
        let first = dup.row(0).to_vec();
        dup.row_mut(1).copy_from_slice(&first);
        let r = ksg_mi(&dup, &y, 3).unwrap();
        assert!(r.jittered);
        assert!(ksg_mi(&x.gather_rows(&[0, 1, 2]), &y.gather_rows(&[0, 1, 2]), 3).is_err());
    }

    #[test]
    fn ksg_monotone_transforms() {
        let x = gaussian(2000, 2, 7);
        let e = gaussian(2000, 2, 8);
        let y = Tensor::from_vec(2000, 2, x.data().iter().zip(e.data()).map(|(a, b)| 0.6 * a + 0.8 * b).collect()).unwrap();
        let base = ksg_mi(&x, &y, 3).unwrap().mi;
        let maps: [fn(f64) -> f64; 4] = [f64::exp, f64::atan, f64::sinh, |v| (v / 2.0).tanh()];
        for f in maps {
            let t = ksg_mi(&x.map(f), &y, 3).unwrap().mi;
            assert!((t - base).abs() <= 0.05, "{t} vs {base}");
        }
    }

    #[test]
    fn t_test_examples() {
        let a = [0.3, 0.1, 0.7];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));

        let r = paired_t_test(&[2.0; 4], &[1.0; 4]).unwrap();
        assert!(r.degenerate && r.p == 0.0);

        let r = paired_t_test(&[1.0, -1.0, 2.0, 0.0], &[0.0; 4]).unwrap();
        assert!((r.t - 0.7746).abs() < 1e-4, "{}", r.t);
        assert!((r.p - 0.495).abs() < 1e-3, "{}", r.p);
        let s = paired_t_test(&[0.0; 4], &[1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn routing_rates_count_by_corruption() {
        let ms = [Modality::Text, Modality::Video];
        let corrupted = [(Modality::Text, vec![false; 4]), (Modality::Video, vec![true, true, false, false])].into();
        let selected = vec![vec![0], vec![0, 1], vec![1], vec![0, 1]];
        let r = routing_rates(&[0, 1, 2, 3], &ms, &selected, &corrupted).unwrap();
        assert_eq!((r.corrupted_selected, r.corrupted_total, r.clean_selected, r.clean_total), (1, 2, 2, 2));
        assert_eq!(r.ratio(), 0.5);
    }

    #[test]
    fn adapter_block_count() {
        assert_eq!(adapter_params(512, 128), 131_712);
    }

    fn widths(ms: &[Modality], d: usize) -> BTreeMap<Modality, usize> {
        ms.iter().map(|&m| (m, d)).collect()
    }

    #[test]
    fn param_counts_match_closed_form() {
        let configs = [
            ModelConfig {
                sidenet: SideConfig { d_side: 16, num_side_layers: 3, ..Default::default() },
                fusion: FusionConfig::default(),
                seqrec: SeqEncoderConfig { d_hidden: 8, ..Default::default() },
            },
            ModelConfig {
                sidenet: SideConfig {
                    modalities: vec![Modality::Text, Modality::Image],
                    d_side: 12,
                    bottleneck: Some(5),
                    num_side_layers: 2,
                    variant: SideVariant::Independent,
                    ..Default::default()
                },
                fusion: FusionConfig { method: FusionMethod::Concat, top_k: 1 },
                seqrec: SeqEncoderConfig { d_hidden: 6, num_blocks: 1, num_heads: 3, max_seq_len: 7, dropout: 0.0 },
            },
            ModelConfig {
                sidenet: SideConfig {
                    modalities: vec![Modality::Audio, Modality::Text, Modality::Video],
                    d_side: 8,
                    num_side_layers: 4,
                    ..Default::default()
                },
                fusion: FusionConfig { method: FusionMethod::CrossAttention, top_k: 1 },
                seqrec: SeqEncoderConfig { d_hidden: 4, num_blocks: 3, ..Default::default() },
            },
        ];
        for (i, cfg) in configs.iter().enumerate() {
            let w = widths(&cfg.sidenet.modalities, 10 + i);
            let m = CrossanModel::new(cfg.clone(), &w, 1).unwrap();
            assert_eq!(count_trainable_params(&m), closed_form_params(cfg, &w).unwrap());
        }
        for method in [FusionMethod::StaticGated, FusionMethod::DynamicGated] {
            let cfg = ModelConfig {
                sidenet: SideConfig { d_side: 8, num_side_layers: 1, ..Default::default() },
                fusion: FusionConfig { method, top_k: 2 },
                seqrec: SeqEncoderConfig { d_hidden: 4, ..Default::default() },
            };
            let w = widths(&cfg.sidenet.modalities, 5);
            let m = CrossanModel::new(cfg.clone(), &w, 1).unwrap();
            assert_eq!(count_trainable_params(&m), closed_form_params(&cfg, &w).unwrap());
        }

        let cfg = &configs[0];
        let mut m = CrossanModel::new(cfg.clone(), &widths(&cfg.sidenet.modalities, 10), 1).unwrap();
        m.store.freeze_all();
        assert_eq!(count_trainable_params(&m).total, 0);
    }
}
