//! Frozen per-modality transformer encoders.
//!
//! Each backbone is a post-LN transformer whose weights are a pure function
//! of its config and seed. It never takes part in gradient computation: its
//! parameters live in a store with every entry frozen, and [`Backbone::encode`]
//! runs outside the autodiff tape. For each retained layer (see
//! [`layerdrop_select`]) the encoder emits one pooled `d_model` vector.

mod features;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use features::{FeatureMatrix, FEATURE_MAGIC, FEATURE_VERSION};

use crate::diffcore::{gelu, softmax_in_place, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::modality::Modality;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// First-token vector of each layer.
    #[default]
    FirstToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub modality: Modality,
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub token_count: usize,
    pub input_feat_dim: usize,
    pub seed: u64,
    pub keep_ratio: f64,
    pub pooling: Pooling,
}

impl BackboneConfig {
    pub fn new(modality: Modality, seed: u64) -> Self {
        Self {
            modality,
            num_layers: 12,
            d_model: 256,
            num_heads: 4,
            token_count: 16,
            input_feat_dim: 32,
            seed,
            keep_ratio: 0.5,
            pooling: Pooling::FirstToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.token_count == 0 || self.input_feat_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "backbone d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!("keep_ratio {} not in (0, 1]", self.keep_ratio)));
        }
        Ok(())
    }

    pub fn retained_layers(&self) -> Result<Vec<usize>> {
        layerdrop_select(self.num_layers, self.keep_ratio)
    }
}

/// Retained backbone layers (1-indexed): `ceil(num_layers · keep_ratio)`
/// layers, evenly spaced downward from the final layer, which is always kept.
pub fn layerdrop_select(num_layers: usize, keep_ratio: f64) -> Result<Vec<usize>> {
    if num_layers < 1 {
        return Err(Error::Config("layerdrop needs at least one layer".into()));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep_ratio {keep_ratio} not in (0, 1]")));
    }
    let count = ((num_layers as f64 * keep_ratio) - 1e-9).ceil().max(1.0) as usize;
    let count = count.min(num_layers);
    // position j from the top sits at n - ceil(j·n/count)
    let mut out: Vec<usize> = (0..count)
        .map(|j| num_layers - (j * num_layers).div_ceil(count))
        .collect();
    out.reverse();
    Ok(out)
}

/// Pooled per-layer hidden states of one item in one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityHiddenStates {
    pub item_id: usize,
    pub modality: Modality,
    pub layers: Vec<Vec<f64>>,
    pub retained_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    retained: Vec<usize>,
    store: ParamStore,
    w_in: ParamId,
    b_in: ParamId,
    pos: ParamId,
    ln_emb_g: ParamId,
    ln_emb_b: ParamId,
    layers: Vec<LayerIds>,
}

/// Build a backbone with seed-determined weights, every parameter frozen.
pub fn build_frozen_backbone(config: &BackboneConfig) -> Result<Backbone> {
    Backbone::new(config.clone())
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let retained = config.retained_layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let d = config.d_model;
        let f = config.input_feat_dim;
        let prefix = format!("backbone.{}", config.modality);
        let std_in = 1.0 / (f as f64).sqrt();
        let std_d = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / ((4 * d) as f64).sqrt();

        let w_in = s.normal(format!("{prefix}.embed.w"), f, d, std_in, &mut rng)?;
        let b_in = s.zeros(format!("{prefix}.embed.b"), 1, d)?;
        let pos = s.normal(format!("{prefix}.embed.pos"), config.token_count, d, 1.0, &mut rng)?;
        let ln_emb_g = s.add(format!("{prefix}.embed.ln.g"), Tensor::filled(1, d, 1.0), false)?;
        let ln_emb_b = s.zeros(format!("{prefix}.embed.ln.b"), 1, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(LayerIds {
                wq: s.normal(format!("{p}.attn.wq"), d, d, std_d, &mut rng)?,
                bq: s.zeros(format!("{p}.attn.bq"), 1, d)?,
                wk: s.normal(format!("{p}.attn.wk"), d, d, std_d, &mut rng)?,
                bk: s.zeros(format!("{p}.attn.bk"), 1, d)?,
                wv: s.normal(format!("{p}.attn.wv"), d, d, std_d, &mut rng)?,
                bv: s.zeros(format!("{p}.attn.bv"), 1, d)?,
                wo: s.normal(format!("{p}.attn.wo"), d, d, std_d, &mut rng)?,
                bo: s.zeros(format!("{p}.attn.bo"), 1, d)?,
                ln1_g: s.add(format!("{p}.ln1.g"), Tensor::filled(1, d, 1.0), false)?,
                ln1_b: s.zeros(format!("{p}.ln1.b"), 1, d)?,
                w1: s.normal(format!("{p}.ffn.w1"), d, 4 * d, std_d, &mut rng)?,
                b1: s.zeros(format!("{p}.ffn.b1"), 1, 4 * d)?,
                w2: s.normal(format!("{p}.ffn.w2"), 4 * d, d, std_ff, &mut rng)?,
                b2: s.zeros(format!("{p}.ffn.b2"), 1, d)?,
                ln2_g: s.add(format!("{p}.ln2.g"), Tensor::filled(1, d, 1.0), false)?,
                ln2_b: s.zeros(format!("{p}.ln2.b"), 1, d)?,
            });
        }
        s.freeze_all();
        Ok(Self {
            config,
            retained,
            store: s,
            w_in,
            b_in,
            pos,
            ln_emb_g,
            ln_emb_b,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn retained_indices(&self) -> &[usize] {
        &self.retained
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn weight_checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Encode one item's `token_count × input_feat_dim` feature matrix.
    pub fn encode(&self, item_id: usize, features: &Tensor) -> Result<ModalityHiddenStates> {
        let c = &self.config;
        if features.dims() != (c.token_count, c.input_feat_dim) {
            return Err(Error::Shape {
                op: "backbone encode (expected token_count x input_feat_dim)",
                left: vec![c.token_count, c.input_feat_dim],
                right: features.shape(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite(format!("{} features of item {item_id}", c.modality)));
        }
        let pooled = self.forward_tokens(features, 1)?;
        Ok(ModalityHiddenStates {
            item_id,
            modality: c.modality,
            layers: pooled.iter().map(|t| t.row(0).to_vec()).collect(),
            retained_indices: self.retained.clone(),
        })
    }

    /// Encode many items at once; returns one `items.len() × d_model` matrix
    /// per retained layer.
    pub fn encode_batch(&self, features: &FeatureMatrix, items: &[usize]) -> Result<Vec<Tensor>> {
        let c = &self.config;
        if features.token_count != c.token_count || features.feat_dim != c.input_feat_dim {
            return Err(Error::Shape {
                op: "backbone encode_batch (expected token_count x input_feat_dim)",
                left: vec![c.token_count, c.input_feat_dim],
                right: vec![features.token_count, features.feat_dim],
            });
        }
        let rows_per = c.token_count * c.input_feat_dim;
        let mut data = Vec::with_capacity(items.len() * rows_per);
        for &i in items {
            if i >= features.item_count {
                return Err(Error::OutOfRange {
                    what: "item",
                    index: i,
                    len: features.item_count,
                });
            }
            data.extend(features.item_slice(i).iter().map(|&x| f64::from(x)));
        }
        if items.is_empty() {
            return Ok(vec![]);
        }
        let x = Tensor::from_vec(items.len() * c.token_count, c.input_feat_dim, data)?;
        self.forward_tokens(&x, items.len())
    }

    /// Run the stacked token matrix of `n_items` items through every layer.
    fn forward_tokens(&self, x: &Tensor, n_items: usize) -> Result<Vec<Tensor>> {
        let c = &self.config;
        let t = c.token_count;
        let d = c.d_model;
        let v = |id| self.store.value(id);

        let mut h = x.matmul(v(self.w_in))?;
        let pos = v(self.pos);
        let b_in = v(self.b_in);
        for r in 0..h.rows() {
            let p = pos.row(r % t);
            for ((o, pv), bv) in h.row_mut(r).iter_mut().zip(p).zip(b_in.data()) {
                *o += pv + bv;
            }
        }
        layer_norm_rows(&mut h, v(self.ln_emb_g), v(self.ln_emb_b));

        let mut out = Vec::with_capacity(self.retained.len());
        let heads = c.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, layer) in self.layers.iter().enumerate() {
            let q = affine(&h, v(layer.wq), v(layer.bq))?;
            let k = affine(&h, v(layer.wk), v(layer.bk))?;
            let vv = affine(&h, v(layer.wv), v(layer.bv))?;
            let mut att = Tensor::zeros(h.rows(), d);
            let mut scores = vec![0.0; t];
            for item in 0..n_items {
                let base = item * t;
                for hd in 0..heads {
                    let c0 = hd * dh;
                    for i in 0..t {
                        let qi = &q.row(base + i)[c0..c0 + dh];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let kj = &k.row(base + j)[c0..c0 + dh];
                            *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        }
                        softmax_in_place(&mut scores, 1.0);
                        let orow = &mut att.row_mut(base + i)[c0..c0 + dh];
                        for (j, s) in scores.iter().enumerate() {
                            let vj = &vv.row(base + j)[c0..c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += s * x;
                            }
                        }
                    }
                }
            }
            let o = affine(&att, v(layer.wo), v(layer.bo))?;
            h.add_assign(&o);
            layer_norm_rows(&mut h, v(layer.ln1_g), v(layer.ln1_b));
            let mut ff = affine(&h, v(layer.w1), v(layer.b1))?;
            ff.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
            let ff = affine(&ff, v(layer.w2), v(layer.b2))?;
            h.add_assign(&ff);
            layer_norm_rows(&mut h, v(layer.ln2_g), v(layer.ln2_b));

            if self.retained.binary_search(&(li + 1)).is_ok() {
                out.push(self.pool(&h, n_items));
            }
        }
        Ok(out)
    }

    fn pool(&self, h: &Tensor, n_items: usize) -> Tensor {
        let t = self.config.token_count;
        let d = self.config.d_model;
        let mut out = Tensor::zeros(n_items, d);
        for item in 0..n_items {
            match self.config.pooling {
                Pooling::FirstToken => out.row_mut(item).copy_from_slice(h.row(item * t)),
                Pooling::Mean => {
                    for j in 0..t {
                        for (o, x) in out.row_mut(item).iter_mut().zip(h.row(item * t + j)) {
                            *o += x / t as f64;
                        }
                    }
                }
            }
        }
        out
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

fn layer_norm_rows(h: &mut Tensor, g: &Tensor, b: &Tensor) {
    let n = h.cols() as f64;
    for r in 0..h.rows() {
        let row = h.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (c, x) in row.iter_mut().enumerate() {
            *x = (*x - mean) * is * g.data()[c] + b.data()[c];
        }
    }
}
