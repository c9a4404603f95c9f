//! The assembled recommender: side network, fusion and sequential encoder
//! sharing one parameter store, plus its checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `CRCK`, version `u32`, header
//! length `u32` and header JSON ([`CheckpointHeader`]), parameter count
//! `u32`, then per parameter: name length `u32`, UTF-8 name, rows `u32`,
//! cols `u32`, `rows × cols` `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Segment, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionOutput};
use crate::hscache::HiddenSource;
use crate::modality::Modality;
use crate::rng::SeedStreams;
use crate::seqrec::{SeqEncoder, SeqEncoderConfig};
use crate::sidenet::{SideConfig, SideNet, SideOutput};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sidenet: SideConfig,
    pub fusion: FusionConfig,
    pub seqrec: SeqEncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub d_models: BTreeMap<Modality, usize>,
    pub seed: u64,
    /// Hex content hash of the training dataset.
    pub dataset_hash: String,
}

#[derive(Clone, Debug)]
pub struct CrossanModel {
    pub config: ModelConfig,
    pub d_models: BTreeMap<Modality, usize>,
    pub store: ParamStore,
    pub side: SideNet,
    pub fusion: Fusion,
    pub seq: SeqEncoder,
}

/// Graph handles produced while embedding a batch of items.
#[derive(Clone, Debug)]
pub struct ItemForward {
    pub side: SideOutput,
    pub fusion: FusionOutput,
}

impl CrossanModel {
    /// Build with parameters drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, d_models: &BTreeMap<Modality, usize>, seed: u64) -> Result<Self> {
        let mut rng = SeedStreams::new(seed).stream("init");
        let mut store = ParamStore::new();
        let side = SideNet::new(config.sidenet.clone(), d_models, &mut store, &mut rng)?;
        let fusion = Fusion::new(
            config.fusion.clone(),
            &config.sidenet.modalities,
            config.sidenet.d_side,
            config.seqrec.d_hidden,
            &mut store,
            &mut rng,
        )?;
        let seq = SeqEncoder::new(config.seqrec.clone(), &mut store, &mut rng)?;
        Ok(Self {
            config,
            d_models: d_models.clone(),
            store,
            side,
            fusion,
            seq,
        })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.config.sidenet.modalities
    }

    /// Side network and fusion over `items`, reading backbone states from
    /// `source`, on graph `g`.
    pub fn item_forward(&self, g: &mut Graph, source: &dyn HiddenSource, items: &[usize]) -> Result<ItemForward> {
        let mut states = BTreeMap::new();
        for &m in self.modalities() {
            let layers = source.layer_states(m, items)?;
            states.insert(m, layers.into_iter().map(|t| g.constant(t)).collect());
        }
        let side = self.side.side_forward(g, &self.store, &states)?;
        let fusion = self.fusion.forward(g, &self.store, &side.finals)?;
        Ok(ItemForward { side, fusion })
    }

    /// Evaluation-mode fused embeddings of `items` (`items × d_hidden`).
    pub fn item_embeddings(&self, source: &dyn HiddenSource, items: &[usize]) -> Result<Tensor> {
        let d = self.config.seqrec.d_hidden;
        let mut data = Vec::with_capacity(items.len() * d);
        for chunk in items.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let f = self.item_forward(&mut g, source, chunk)?;
            data.extend_from_slice(g.value(f.fusion.embedding).data());
        }
        Tensor::from_vec(items.len(), d, data)
    }

    /// Final side output of each tower for `items`, in tower order.
    pub fn side_outputs(&self, source: &dyn HiddenSource, items: &[usize]) -> Result<Vec<Tensor>> {
        let ds = self.config.sidenet.d_side;
        let mut out = vec![Vec::with_capacity(items.len() * ds); self.side.towers.len()];
        for chunk in items.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let mut states = BTreeMap::new();
            for &m in self.modalities() {
                let layers = source.layer_states(m, chunk)?;
                states.insert(m, layers.into_iter().map(|t| g.constant(t)).collect());
            }
            let side = self.side.side_forward(&mut g, &self.store, &states)?;
            for (o, v) in out.iter_mut().zip(&side.finals) {
                o.extend_from_slice(g.value(*v).data());
            }
        }
        out.into_iter().map(|d| Tensor::from_vec(items.len(), ds, d)).collect()
    }

    /// Fusion routing for `items`: (selected experts, weights `items × |M|`).
    pub fn routing(&self, source: &dyn HiddenSource, items: &[usize]) -> Result<(Vec<Vec<usize>>, Option<Tensor>)> {
        let mut selected = Vec::with_capacity(items.len());
        let mut weights: Option<Vec<f64>> = None;
        for chunk in items.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let f = self.item_forward(&mut g, source, chunk)?;
            selected.extend(f.fusion.selected);
            if let Some(w) = f.fusion.weights {
                weights.get_or_insert_with(Vec::new).extend_from_slice(g.value(w).data());
            }
        }
        let nm = self.modalities().len();
        let weights = weights.map(|w| Tensor::from_vec(items.len(), nm, w)).transpose()?;
        Ok((selected, weights))
    }

    /// State at the last position of each context, using the most recent
    /// `max_seq_len` items, given the catalog embedding table.
    pub fn user_states(&self, contexts: &[&[usize]], table: &Tensor) -> Result<Tensor> {
        let d = self.config.seqrec.d_hidden;
        let max_len = self.config.seqrec.max_seq_len;
        let mut data = Vec::with_capacity(contexts.len() * d);
        for chunk in contexts.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let mut rows = Vec::new();
            let mut segments = Vec::with_capacity(chunk.len());
            let mut last = Vec::with_capacity(chunk.len());
            for ctx in chunk {
                if ctx.is_empty() {
                    return Err(Error::Contract("empty user context".into()));
                }
                let recent = &ctx[ctx.len().saturating_sub(max_len)..];
                segments.push(Segment {
                    start: rows.len(),
                    len: recent.len(),
                });
                rows.extend_from_slice(recent);
                last.push(rows.len() - 1);
            }
            let tv = g.constant(table.clone());
            let x = g.gather_rows(tv, &rows)?;
            let s = self.seq.encode(&mut g, &self.store, x, &segments)?;
            let s = g.gather_rows(s, &last)?;
            data.extend_from_slice(g.value(s).data());
        }
        Tensor::from_vec(contexts.len(), d, data)
    }

    pub fn embedding_var(&self, g: &mut Graph, source: &dyn HiddenSource, items: &[usize]) -> Result<(Var, ItemForward)> {
        let f = self.item_forward(g, source, items)?;
        Ok((f.fusion.embedding, f))
    }

    pub fn save(&self, path: &Path, seed: u64, dataset_hash: u64) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            d_models: self.d_models.clone(),
            seed,
            dataset_hash: format!("{dataset_hash:016x}"),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(&json);
        b.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            b.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            b.extend_from_slice(p.name.as_bytes());
            b.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for x in p.value.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "missing CRCK magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        let mut model = CrossanModel::new(header.config.clone(), &header.d_models, header.seed)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::format(
                path,
                format!("checkpoint has {count} parameters, config builds {}", model.store.len()),
            ));
        }
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "non-UTF-8 parameter name"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            if model.store.value(id).dims() != (rows, cols) {
                return Err(Error::format(path, format!("parameter {name} has shape {rows}x{cols}")));
            }
            *model.store.value_mut(id) = Tensor::from_vec(rows, cols, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after parameters"));
        }
        Ok((model, header))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            sidenet: SideConfig {
                modalities: vec![Modality::Text, Modality::Image],
                d_side: 8,
                bottleneck: Some(2),
                num_side_layers: 2,
                ..Default::default()
            },
            fusion: FusionConfig::default(),
            seqrec: SeqEncoderConfig {
                d_hidden: 4,
                max_seq_len: 4,
                ..Default::default()
            },
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let widths = [(Modality::Text, 6), (Modality::Image, 6)].into();
        let mut m = CrossanModel::new(tiny_config(), &widths, 3).unwrap();
        let id = m.store.id("fusion.gate.b").unwrap();
        m.store.value_mut(id).data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        m.save(&p, 3, 0xabc).unwrap();
        let (back, header) = CrossanModel::load(&p).unwrap();
        assert_eq!(back.store.checksum(), m.store.checksum());
        assert_eq!(header.dataset_hash, "0000000000000abc");

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(CrossanModel::load(&p).is_err());
    }
}
