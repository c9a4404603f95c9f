//! Fusion of per-modality side outputs into one item embedding.
//!
//! Every method except concat first maps each modality's `d_side` output
//! through its own trainable projection to `d_out`, then mixes:
//!
//! * MOMEF: a zero-initialized affine gate over the concatenated features
//!   gives softmax scores; the `top_k` largest are renormalized and the rest
//!   dropped.
//! * static gated: one softmaxed logit per modality shared by all items.
//! * dynamic gated: the MOMEF gate without top-k selection.
//! * cross attention: a learned query attends over the projected features.
//! * concat: one affine map from all features concatenated.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    Momef,
    Concat,
    StaticGated,
    DynamicGated,
    CrossAttention,
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "momef" => Self::Momef,
            "concat" => Self::Concat,
            "static_gated" | "static" => Self::StaticGated,
            "dynamic_gated" | "dynamic" => Self::DynamicGated,
            "cross_attention" => Self::CrossAttention,
            other => return Err(Error::Config(format!("unknown fusion method '{other}'"))),
        })
    }
}

impl std::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Momef => "momef",
            Self::Concat => "concat",
            Self::StaticGated => "static_gated",
            Self::DynamicGated => "dynamic_gated",
            Self::CrossAttention => "cross_attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub top_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::Momef,
            top_k: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if self.method == FusionMethod::Momef && !(1..=num_modalities).contains(&self.top_k) {
            return Err(Error::Config(format!(
                "top_k {} outside [1, {num_modalities}]",
                self.top_k
            )));
        }
        if self.method == FusionMethod::CrossAttention && num_modalities < 2 {
            return Err(Error::Config("cross-attention fusion needs at least 2 modalities".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub modalities: Vec<Modality>,
    pub d_side: usize,
    pub d_out: usize,
    /// Per-modality `d_side → d_out` projections (all methods but concat).
    pub proj: Vec<(ParamId, ParamId)>,
    /// Gating network `|M|·d_side → |M|` (MOMEF and dynamic gated).
    pub gate: Option<(ParamId, ParamId)>,
    pub static_logits: Option<ParamId>,
    pub concat: Option<(ParamId, ParamId)>,
    pub query: Option<ParamId>,
}

/// Fusion result for a batch of items.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `items × d_out`.
    pub embedding: Var,
    /// Per-item modality weights (`items × |M|`, zero for dropped experts);
    /// `None` for concat.
    pub weights: Option<Var>,
    /// Active expert indices per item.
    pub selected: Vec<Vec<usize>>,
}

impl Fusion {
    pub fn new<R: Rng>(
        config: FusionConfig,
        modalities: &[Modality],
        d_side: usize,
        d_out: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let nm = modalities.len();
        config.validate(nm)?;
        let std_p = 1.0 / (d_side as f64).sqrt();
        let mut proj = Vec::new();
        if config.method != FusionMethod::Concat {
            for m in modalities {
                proj.push((
                    store.normal(format!("fusion.proj.{m}.w"), d_side, d_out, std_p, rng)?,
                    store.zeros(format!("fusion.proj.{m}.b"), 1, d_out)?,
                ));
            }
        }
        let gate = match config.method {
            FusionMethod::Momef | FusionMethod::DynamicGated => Some((
                store.zeros("fusion.gate.w", nm * d_side, nm)?,
                store.zeros("fusion.gate.b", 1, nm)?,
            )),
            _ => None,
        };
        let static_logits = match config.method {
            FusionMethod::StaticGated => Some(store.zeros("fusion.static.logits", 1, nm)?),
            _ => None,
        };
        let concat = match config.method {
            FusionMethod::Concat => Some((
                store.normal("fusion.concat.w", nm * d_side, d_out, 1.0 / ((nm * d_side) as f64).sqrt(), rng)?,
                store.zeros("fusion.concat.b", 1, d_out)?,
            )),
            _ => None,
        };
        let query = match config.method {
            FusionMethod::CrossAttention => Some(store.normal("fusion.query", 1, d_out, 1.0 / (d_out as f64).sqrt(), rng)?),
            _ => None,
        };
        Ok(Self {
            config,
            modalities: modalities.to_vec(),
            d_side,
            d_out,
            proj,
            gate,
            static_logits,
            concat,
            query,
        })
    }

    fn check_features(&self, g: &Graph, f: &[Var]) -> Result<usize> {
        if f.len() != self.modalities.len() {
            return Err(Error::Contract(format!(
                "fusion expects {} modality features, got {}",
                self.modalities.len(),
                f.len()
            )));
        }
        let items = g.value(f[0]).rows();
        for &x in f {
            let d = g.value(x).dims();
            if d != (items, self.d_side) {
                return Err(Error::shape("fusion input", d, (items, self.d_side)));
            }
        }
        Ok(items)
    }

    /// Projected features `proj_m(f_m)`, one `items × d_out` per modality.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, f: &[Var]) -> Result<Vec<Var>> {
        self.proj
            .iter()
            .zip(f)
            .map(|(&(w, b), &x)| {
                let w = g.param(store, w);
                let b = g.param(store, b);
                g.linear(x, w, b)
            })
            .collect()
    }

    /// Softmaxed gating scores (`items × |M|`) from the concatenated features.
    pub fn momef_scores(&self, g: &mut Graph, store: &ParamStore, f: &[Var]) -> Result<Var> {
        let (w, b) = self
            .gate
            .ok_or_else(|| Error::Contract(format!("{} fusion has no gating network", self.config.method)))?;
        let x = g.concat_cols(f)?;
        let w = g.param(store, w);
        let b = g.param(store, b);
        let logits = g.linear(x, w, b)?;
        g.softmax(logits, 1.0)
    }

    /// `Σ_m w[r, m] · proj_m(f_m)[r]`; zero weights contribute nothing, not
    /// even through their projection bias.
    pub fn momef_fuse(&self, g: &mut Graph, store: &ParamStore, f: &[Var], weights: Var) -> Result<Var> {
        let p = self.project(g, store, f)?;
        g.row_weighted_sum(weights, &p)
    }

    /// Route and fuse a batch of items.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: &[Var]) -> Result<FusionOutput> {
        let items = self.check_features(g, f)?;
        let nm = self.modalities.len();
        let all: Vec<Vec<usize>> = vec![(0..nm).collect(); items];
        match self.config.method {
            FusionMethod::Momef => {
                let scores = self.momef_scores(g, store, f)?;
                let sv = g.value(scores).clone();
                let mut mask = vec![false; items * nm];
                let mut selected = Vec::with_capacity(items);
                for r in 0..items {
                    let (idx, _) = topk_select(sv.row(r), self.config.top_k)?;
                    for &i in &idx {
                        mask[r * nm + i] = true;
                    }
                    selected.push(idx);
                }
                let weights = g.topk_renorm(scores, mask)?;
                let embedding = self.momef_fuse(g, store, f, weights)?;
                Ok(FusionOutput {
                    embedding,
                    weights: Some(weights),
                    selected,
                })
            }
            FusionMethod::DynamicGated => {
                let weights = self.momef_scores(g, store, f)?;
                let embedding = self.momef_fuse(g, store, f, weights)?;
                Ok(FusionOutput {
                    embedding,
                    weights: Some(weights),
                    selected: all,
                })
            }
            FusionMethod::StaticGated => {
                let logits = g.param(store, self.static_logits.expect("static gate registered"));
                let w = g.softmax(logits, 1.0)?;
                let p = self.project(g, store, f)?;
                let embedding = g.weighted_sum(w, &p)?;
                let ones = g.constant(Tensor::filled(items, 1, 1.0));
                let weights = g.matmul(ones, w)?;
                Ok(FusionOutput {
                    embedding,
                    weights: Some(weights),
                    selected: all,
                })
            }
            FusionMethod::Concat => {
                let (w, b) = self.concat.expect("concat map registered");
                let x = g.concat_cols(f)?;
                let w = g.param(store, w);
                let b = g.param(store, b);
                let embedding = g.linear(x, w, b)?;
                Ok(FusionOutput {
                    embedding,
                    weights: None,
                    selected: all,
                })
            }
            FusionMethod::CrossAttention => {
                let p = self.project(g, store, f)?;
                let q = g.param(store, self.query.expect("query registered"));
                let mut cols = Vec::with_capacity(nm);
                for &pm in &p {
                    let s = g.matmul_nt(pm, q)?;
                    cols.push(s);
                }
                let s = g.concat_cols(&cols)?;
                let s = g.scale(s, 1.0 / (self.d_out as f64).sqrt())?;
                let weights = g.softmax(s, 1.0)?;
                let embedding = g.row_weighted_sum(weights, &p)?;
                Ok(FusionOutput {
                    embedding,
                    weights: Some(weights),
                    selected: all,
                })
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for &(w, b) in &self.proj {
            out.extend([w, b]);
        }
        for (w, b) in self.gate.iter().chain(&self.concat) {
            out.extend([*w, *b]);
        }
        out.extend(self.static_logits);
        out.extend(self.query);
        out
    }
}

/// The `k` largest scores (ties to the lowest index) and their weights
/// renormalized to sum to one. Indices are returned in ascending order.
pub fn topk_select(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("top_k {k} outside [1, {}]", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut idx = order[..k].to_vec();
    idx.sort_unstable();
    let total: f64 = idx.iter().map(|&i| scores[i]).sum();
    let weights = idx.iter().map(|&i| scores[i] / total).collect();
    Ok((idx, weights))
}

/// Per-item routing log: `item_id,selected_modalities,weights`, with
/// modalities and weights joined by `|`.
pub fn routing_csv(items: &[usize], modalities: &[Modality], selected: &[Vec<usize>], weights: &Tensor) -> String {
    let mut s = String::from("item_id,selected_modalities,weights\n");
    for (r, (item, sel)) in items.iter().zip(selected).enumerate() {
        let names: Vec<&str> = sel.iter().map(|&i| modalities[i].name()).collect();
        let ws: Vec<String> = sel.iter().map(|&i| format!("{}", weights.get(r, i))).collect();
        let _ = writeln!(s, "{item},{},{}", names.join("|"), ws.join("|"));
    }
    s
}

pub fn write_routing_log(
    path: &Path,
    items: &[usize],
    modalities: &[Modality],
    selected: &[Vec<usize>],
    weights: &Tensor,
) -> Result<()> {
    std::fs::write(path, routing_csv(items, modalities, selected, weights)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check_params;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TI: [Modality; 2] = [Modality::Text, Modality::Image];

    fn fusion(method: FusionMethod, ms: &[Modality], top_k: usize, ds: usize, dout: usize) -> (Fusion, ParamStore) {
        let mut store = ParamStore::new();
        let f = Fusion::new(
            FusionConfig { method, top_k },
            ms,
            ds,
            dout,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        (f, store)
    }

    fn feats(g: &mut Graph, nm: usize, items: usize, d: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..nm)
            .map(|_| {
                let data = (0..items * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                g.constant(Tensor::from_vec(items, d, data).unwrap())
            })
            .collect()
    }

    #[test]
    fn topk_examples() {
        let (i, w) = topk_select(&[0.5, 0.3, 0.15, 0.05], 2).unwrap();
        assert_eq!(i, vec![0, 1]);
        assert!((w[0] - 0.625).abs() < 1e-15 && (w[1] - 0.375).abs() < 1e-15);
        let s = [0.1, 0.4, 0.2, 0.3];
        assert_eq!(topk_select(&s, 4).unwrap().1, s.to_vec());
        assert_eq!(topk_select(&[0.25; 4], 1).unwrap(), (vec![0], vec![1.0]));
        assert!(topk_select(&s, 0).is_err() && topk_select(&s, 5).is_err());
    }

    #[test]
    fn zero_gate_gives_uniform_scores_and_hand_softmax() {
        let (f, store) = fusion(FusionMethod::Momef, &Modality::ALL, 2, 3, 2);
        let mut g = Graph::new();
        let x = feats(&mut g, 4, 5, 3, 1);
        let s = f.momef_scores(&mut g, &store, &x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let (f, mut store) = fusion(FusionMethod::Momef, &TI, 1, 1, 1);
        let (w, b) = f.gate.unwrap();
        *store.value_mut(w) = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        *store.value_mut(b) = Tensor::row_vector(vec![0.5, 0.0]);
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![1.0]));
        let c = g.constant(Tensor::row_vector(vec![1.0]));
        let s = f.momef_scores(&mut g, &store, &[a, c]).unwrap();
        // logits [1.5, 2.0]
        let e = (0.5f64).exp();
        let want = [1.0 / (1.0 + e), e / (1.0 + e)];
        for (x, y) in g.value(s).data().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn momef_fuse_hand_case_and_k1() {
        let (f, mut store) = fusion(FusionMethod::Momef, &TI, 2, 2, 2);
        for &(w, _) in &f.proj {
            *store.value_mut(w) = Tensor::identity(2);
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::row_vector(vec![0.0, 1.0]));
        let w = g.constant(Tensor::row_vector(vec![0.625, 0.375]));
        let e = f.momef_fuse(&mut g, &store, &[a, b], w).unwrap();
        assert_eq!(g.value(e).data(), &[0.625, 0.375]);

        let w1 = g.constant(Tensor::row_vector(vec![0.0, 1.0]));
        let e = f.momef_fuse(&mut g, &store, &[a, b], w1).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 1.0]);
    }

    #[test]
    fn baseline_cases() {
        let (f, store) = fusion(FusionMethod::StaticGated, &Modality::ALL, 1, 3, 2);
        let mut g = Graph::new();
        let x = feats(&mut g, 4, 3, 3, 2);
        let out = f.forward(&mut g, &store, &x).unwrap();
        assert!(g.value(out.weights.unwrap()).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let (f, store) = fusion(FusionMethod::DynamicGated, &[Modality::Text], 1, 3, 2);
        let mut g = Graph::new();
        let x = feats(&mut g, 1, 2, 3, 2);
        let out = f.forward(&mut g, &store, &x).unwrap();
        assert!(g.value(out.weights.unwrap()).data().iter().all(|&v| v == 1.0));
        let p = f.project(&mut g, &store, &x).unwrap();
        assert_eq!(g.value(out.embedding).data(), g.value(p[0]).data());

        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::row_vector(vec![4.0, 5.0, 6.0]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_attention_cases() {
        let (f, mut store) = fusion(FusionMethod::CrossAttention, &Modality::ALL, 1, 3, 4);
        let shared = store.value(f.proj[0].0).clone();
        for &(w, _) in &f.proj[1..] {
            *store.value_mut(w) = shared.clone();
        }
        let mut g = Graph::new();
        let x = feats(&mut g, 1, 2, 3, 5);
        let same = vec![x[0]; 4];
        let out = f.forward(&mut g, &store, &same).unwrap();
        let p = f.project(&mut g, &store, &same).unwrap();
        for (a, b) in g.value(out.embedding).data().iter().zip(g.value(p[0]).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = g.value(out.weights.unwrap()).clone();
        for r in 0..w.rows() {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        // hand case: identity projections, query [1, 0]
        let (f, mut store) = fusion(FusionMethod::CrossAttention, &TI, 1, 2, 2);
        for &(w, _) in &f.proj {
            *store.value_mut(w) = Tensor::identity(2);
        }
        *store.value_mut(f.query.unwrap()) = Tensor::row_vector(vec![1.0, 0.0]);
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![2.0, 0.0]));
        let b = g.constant(Tensor::row_vector(vec![0.0, 2.0]));
        let out = f.forward(&mut g, &store, &[a, b]).unwrap();
        let s = 2.0 / 2f64.sqrt();
        let wa = s.exp() / (s.exp() + 1.0);
        let e = g.value(out.embedding).data();
        assert!((e[0] - 2.0 * wa).abs() < 1e-12 && (e[1] - 2.0 * (1.0 - wa)).abs() < 1e-12);
    }

    #[test]
    fn momef_full_k_equals_dynamic_uniform() {
        let (m, ms) = fusion(FusionMethod::Momef, &Modality::ALL, 4, 3, 2);
        let (d, ds) = fusion(FusionMethod::DynamicGated, &Modality::ALL, 4, 3, 2);
        let mut g = Graph::new();
        let x = feats(&mut g, 4, 6, 3, 8);
        let a = m.forward(&mut g, &ms, &x).unwrap();
        let b = d.forward(&mut g, &ds, &x).unwrap();
        for (p, q) in g.value(a.embedding).data().iter().zip(g.value(b.embedding).data()) {
            assert!((p - q).abs() <= 1e-10);
        }
    }

    #[test]
    fn every_method_passes_gradient_check() {
        for method in [
            FusionMethod::Momef,
            FusionMethod::Concat,
            FusionMethod::StaticGated,
            FusionMethod::DynamicGated,
            FusionMethod::CrossAttention,
        ] {
            let (f, mut store) = fusion(method, &Modality::ALL, 2, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let ids = f.param_ids();
            for &id in &ids {
                store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
            }
            let mut g0 = Graph::new();
            let x = feats(&mut g0, 4, 3, 3, 9);
            let xt: Vec<Tensor> = x.iter().map(|v| g0.value(*v).clone()).collect();
            // freeze the routing decision at the unperturbed point
            let mask = if method == FusionMethod::Momef {
                let out = f.forward(&mut g0, &store, &x).unwrap();
                Some(out.selected)
            } else {
                None
            };
            let err = finite_diff_check_params(
                &mut store,
                &ids,
                |g, s| {
                    let xs: Vec<Var> = xt.iter().map(|t| g.constant(t.clone())).collect();
                    let e = match &mask {
                        Some(sel) => {
                            let scores = f.momef_scores(g, s, &xs)?;
                            let mut m = vec![false; 3 * 4];
                            for (r, idx) in sel.iter().enumerate() {
                                for &i in idx {
                                    m[r * 4 + i] = true;
                                }
                            }
                            let w = g.topk_renorm(scores, m)?;
                            f.momef_fuse(g, s, &xs, w)?
                        }
                        None => f.forward(g, s, &xs)?.embedding,
                    };
                    let sq = g.mul(e, e)?;
                    g.sum(sq)
                },
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{method}: {err}");
        }
    }

    #[test]
    fn routing_log_format() {
        let w = Tensor::from_rows(&[vec![0.75, 0.0, 0.25]]).unwrap();
        let csv = routing_csv(&[7], &[Modality::Text, Modality::Image, Modality::Audio], &[vec![0, 2]], &w);
        assert_eq!(csv, "item_id,selected_modalities,weights\n7,text|audio,0.75|0.25\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn momef_ignores_unselected_experts(seed in 0u64..10_000, k in 1usize..=4) {
            let (f, mut store) = fusion(FusionMethod::Momef, &Modality::ALL, k, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, _) = f.gate.unwrap();
            store.value_mut(w).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            let mut g = Graph::new();
            let x = feats(&mut g, 4, 1, 3, seed);
            let out = f.forward(&mut g, &store, &x).unwrap();
            prop_assert_eq!(out.selected[0].len(), k);
            let wsum: f64 = g.value(out.weights.unwrap()).data().iter().sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
            let base = g.value(out.embedding).clone();
            let mut zeroed = x.clone();
            for m in 0..4 {
                if !out.selected[0].contains(&m) {
                    zeroed[m] = g.constant(Tensor::zeros(1, 3));
                }
            }
            let e = f.momef_fuse(&mut g, &store, &zeroed, out.weights.unwrap()).unwrap();
            prop_assert_eq!(g.value(e).data(), base.data());
        }
    }
}
