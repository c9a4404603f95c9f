//! Persistent per-item hidden-state cache.
//!
//! Frozen backbones never change, so their pooled per-layer outputs are
//! computed once per item and stored. Training then reads hidden states from
//! the cache (see [`CachedStates`]) instead of running the backbones
//! ([`OnTheFlyStates`]); both sources round to `f32` so they feed identical
//! numbers to the side network.
//!
//! File layout (little-endian), one file per modality:
//!
//! | field | type |
//! |---|---|
//! | magic `CRHC` | 4 bytes |
//! | version | u32 |
//! | modality id, d_model, retained_layer_count, item_count | u32 × 4 |
//! | dataset content hash, backbone seed, backbone weight checksum | u64 × 3 |
//! | payload checksum (FNV-1a 64 over payload bytes) | u64 |
//! | retained layer indices | u32 × retained_layer_count |
//! | payload, item-major then layer-major | f32 × item_count × layers × d_model |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, ModalityHiddenStates};
use crate::datakit::{InteractionDataset, LeaveOneOut};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::{CrossanModel, ModelConfig};
use crate::rng::fnv64;
use crate::seqrec::{TrainConfig, Trainer};

pub const CACHE_MAGIC: &[u8; 4] = b"CRHC";
pub const CACHE_VERSION: u32 = 1;
const FIXED_HEADER: usize = 4 + 4 * 5 + 8 * 4;
const SHARD: usize = 32;

/// Identity of the inputs a cache was built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheKey {
    pub dataset_hash: u64,
    pub backbone_seed: u64,
    pub weight_checksum: u64,
    pub retained_indices: Vec<usize>,
}

impl CacheKey {
    pub fn new(dataset: &InteractionDataset, backbone: &Backbone) -> Self {
        Self {
            dataset_hash: dataset.content_hash(),
            backbone_seed: backbone.config().seed,
            weight_checksum: backbone.weight_checksum(),
            retained_indices: backbone.retained_indices().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheFile {
    pub modality: Modality,
    pub d_model: usize,
    pub item_count: usize,
    pub key: CacheKey,
    pub checksum: u64,
    data: Vec<f32>,
}

pub fn cache_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.crhc", m.name()))
}

impl CacheFile {
    pub fn layer_count(&self) -> usize {
        self.key.retained_indices.len()
    }

    pub fn payload(&self) -> &[f32] {
        &self.data
    }

    fn encode_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(FIXED_HEADER + 4 * self.layer_count() + 4 * self.data.len());
        b.extend_from_slice(CACHE_MAGIC);
        for v in [
            CACHE_VERSION,
            self.modality.id(),
            self.d_model as u32,
            self.layer_count() as u32,
            self.item_count as u32,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.key.dataset_hash, self.key.backbone_seed, self.key.weight_checksum, self.checksum] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &r in &self.key.retained_indices {
            b.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for x in &self.data {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b
    }

    /// Write atomically: a temporary sibling is renamed into place, and is
    /// removed if anything fails.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("crhc.partial");
        let result = (|| {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.encode_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    /// Open and verify size and checksum. When `expected` is given, the
    /// embedded cache key must match it exactly.
    pub fn open(path: &Path, expected: Option<&CacheKey>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < FIXED_HEADER || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::format(path, "missing CRHC magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != CACHE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let modality = Modality::from_id(u32_at(8))
            .ok_or_else(|| Error::format(path, format!("unknown modality id {}", u32_at(8))))?;
        let d_model = u32_at(12) as usize;
        let layers = u32_at(16) as usize;
        let item_count = u32_at(20) as usize;
        let (dataset_hash, backbone_seed, weight_checksum, checksum) = (u64_at(24), u64_at(32), u64_at(40), u64_at(48));
        let idx_end = FIXED_HEADER + 4 * layers;
        let expected_len = idx_end + 4 * item_count * layers * d_model;
        if bytes.len() != expected_len {
            return Err(Error::format(
                path,
                format!(
                    "header declares {item_count} items x {layers} layers x {d_model} dims ({expected_len} bytes) but file has {} bytes",
                    bytes.len()
                ),
            ));
        }
        let retained_indices = (0..layers).map(|l| u32_at(FIXED_HEADER + 4 * l) as usize).collect();
        let payload = &bytes[idx_end..];
        let actual = fnv64(payload);
        if actual != checksum {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: checksum,
                actual,
            });
        }
        let key = CacheKey {
            dataset_hash,
            backbone_seed,
            weight_checksum,
            retained_indices,
        };
        if let Some(want) = expected {
            if *want != key {
                return Err(Error::StaleCache {
                    path: path.to_path_buf(),
                    reason: format!("cache key {key:?} does not match expected {want:?}"),
                });
            }
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            modality,
            d_model,
            item_count,
            key,
            checksum,
            data,
        })
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.item_count {
            return Err(Error::OutOfRange {
                what: "cached item",
                index: item,
                len: self.item_count,
            });
        }
        Ok(())
    }

    pub fn lookup(&self, item: usize) -> Result<ModalityHiddenStates> {
        self.check_item(item)?;
        let per_item = self.layer_count() * self.d_model;
        let block = &self.data[item * per_item..(item + 1) * per_item];
        Ok(ModalityHiddenStates {
            item_id: item,
            modality: self.modality,
            layers: block
                .chunks_exact(self.d_model)
                .map(|c| c.iter().map(|&x| f64::from(x)).collect())
                .collect(),
            retained_indices: self.key.retained_indices.clone(),
        })
    }

    /// One `items.len() × d_model` matrix per retained layer.
    pub fn layer_states(&self, items: &[usize]) -> Result<Vec<Tensor>> {
        let d = self.d_model;
        let per_item = self.layer_count() * d;
        let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(items.len() * d); self.layer_count()];
        for &i in items {
            self.check_item(i)?;
            let block = &self.data[i * per_item..(i + 1) * per_item];
            for (l, chunk) in block.chunks_exact(d).enumerate() {
                out[l].extend(chunk.iter().map(|&x| f64::from(x)));
            }
        }
        out.into_iter().map(|v| Tensor::from_vec(items.len(), d, v)).collect()
    }
}

/// Lookup of one item's states in one modality.
pub fn cache_lookup(caches: &BTreeMap<Modality, CacheFile>, item: usize, m: Modality) -> Result<ModalityHiddenStates> {
    caches
        .get(&m)
        .ok_or_else(|| Error::MissingModality(format!("no cache for {m}")))?
        .lookup(item)
}

fn build_cache(dataset: &InteractionDataset, backbone: &Backbone, workers: usize) -> Result<CacheFile> {
    let m = backbone.config().modality;
    let features = dataset.feature(m)?;
    let n = dataset.num_items;
    let d = backbone.config().d_model;
    let layers = backbone.retained_indices().len();
    let shards: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(SHARD).map(<[usize]>::to_vec).collect();
    let workers = workers.max(1).min(shards.len().max(1));

    let encode_shard = |items: &[usize]| -> Result<Vec<f32>> {
        let states = backbone.encode_batch(features, items)?;
        let mut out = Vec::with_capacity(items.len() * layers * d);
        for r in 0..items.len() {
            for s in &states {
                out.extend(s.row(r).iter().map(|&x| x as f32));
            }
        }
        Ok(out)
    };
    let mut results: Vec<Option<Result<Vec<f32>>>> = (0..shards.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let shards = &shards;
            let encode_shard = &encode_shard;
            handles.push(scope.spawn(move || {
                (w..shards.len())
                    .step_by(workers)
                    .map(|s| (s, encode_shard(&shards[s])))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (s, r) in h.join().expect("cache worker panicked") {
                results[s] = Some(r);
            }
        }
    });
    let mut data = Vec::with_capacity(n * layers * d);
    for r in results {
        data.extend(r.expect("every shard encoded")?);
    }
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    Ok(CacheFile {
        modality: m,
        d_model: d,
        item_count: n,
        key: CacheKey::new(dataset, backbone),
        checksum: fnv64(&bytes),
        data,
    })
}

/// Encode every item with every backbone and write one cache per modality.
/// Returns the written paths in backbone order.
pub fn precompute_cache(dataset: &InteractionDataset, backbones: &[Backbone], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let missing: Vec<&str> = backbones
        .iter()
        .map(|b| b.config().modality)
        .filter(|m| !dataset.features.contains_key(m))
        .map(Modality::name)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingModality(format!(
            "no feature file for modality: {}",
            missing.join(", ")
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut written = Vec::new();
    for b in backbones {
        let path = cache_path(out_dir, b.config().modality);
        let result = build_cache(dataset, b, workers).and_then(|c| c.write(&path));
        if let Err(e) = result {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

/// Where the side network gets its backbone hidden states from.
pub trait HiddenSource {
    /// One `items.len() × d_model` matrix per retained layer, values rounded
    /// to `f32` precision.
    fn layer_states(&self, m: Modality, items: &[usize]) -> Result<Vec<Tensor>>;
}

impl<T: HiddenSource + ?Sized> HiddenSource for &T {
    fn layer_states(&self, m: Modality, items: &[usize]) -> Result<Vec<Tensor>> {
        (**self).layer_states(m, items)
    }
}

#[derive(Clone, Debug)]
pub struct CachedStates {
    pub files: BTreeMap<Modality, CacheFile>,
}

impl CachedStates {
    /// Open the caches for `backbones` under `dir`, checking each key.
    pub fn open(dir: &Path, dataset: &InteractionDataset, backbones: &[Backbone]) -> Result<Self> {
        let mut files = BTreeMap::new();
        for b in backbones {
            let m = b.config().modality;
            let key = CacheKey::new(dataset, b);
            files.insert(m, CacheFile::open(&cache_path(dir, m), Some(&key))?);
        }
        Ok(Self { files })
    }

    /// Build in memory without touching disk.
    pub fn build(dataset: &InteractionDataset, backbones: &[Backbone]) -> Result<Self> {
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let mut files = BTreeMap::new();
        for b in backbones {
            files.insert(b.config().modality, build_cache(dataset, b, workers)?);
        }
        Ok(Self { files })
    }
}

impl HiddenSource for CachedStates {
    fn layer_states(&self, m: Modality, items: &[usize]) -> Result<Vec<Tensor>> {
        self.files
            .get(&m)
            .ok_or_else(|| Error::MissingModality(format!("no cache for {m}")))?
            .layer_states(items)
    }
}

/// Runs the frozen backbones on every request.
pub struct OnTheFlyStates<'a> {
    pub dataset: &'a InteractionDataset,
    pub backbones: BTreeMap<Modality, &'a Backbone>,
}

impl<'a> OnTheFlyStates<'a> {
    pub fn new(dataset: &'a InteractionDataset, backbones: &'a [Backbone]) -> Self {
        Self {
            dataset,
            backbones: backbones.iter().map(|b| (b.config().modality, b)).collect(),
        }
    }
}

impl HiddenSource for OnTheFlyStates<'_> {
    fn layer_states(&self, m: Modality, items: &[usize]) -> Result<Vec<Tensor>> {
        let b = self
            .backbones
            .get(&m)
            .ok_or_else(|| Error::MissingModality(format!("no backbone for {m}")))?;
        let mut states = b.encode_batch(self.dataset.feature(m)?, items)?;
        for s in &mut states {
            s.data_mut().iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
        Ok(states)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Cached,
    OnTheFly,
}

/// Wall-clock of a short training run and its per-step losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub mode: SourceMode,
    pub epoch_seconds: Vec<f64>,
    /// Median of `epoch_seconds`; zero when no step ran.
    pub seconds_per_epoch: f64,
    pub step_losses: Vec<f64>,
}

/// Train a fresh model for `epochs` epochs reading hidden states from
/// `source` and time each epoch.
#[allow(clippy::too_many_arguments)]
pub fn epoch_time_report(
    config: &ModelConfig,
    d_models: &BTreeMap<Modality, usize>,
    split: &LeaveOneOut,
    source: &dyn HiddenSource,
    mode: SourceMode,
    train: &TrainConfig,
    seed: u64,
    epochs: usize,
) -> Result<EpochTiming> {
    let mut model = CrossanModel::new(config.clone(), d_models, seed)?;
    let mut trainer = Trainer::new(split, train.clone(), seed)?;
    let mut epoch_seconds = Vec::with_capacity(epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let steps = trainer.run_epoch(&mut model, source, epoch)?;
        epoch_seconds.push(t0.elapsed().as_secs_f64());
        step_losses.extend(steps.iter().map(|s| s.loss));
    }
    let seconds_per_epoch = if step_losses.is_empty() {
        0.0
    } else {
        let mut s = epoch_seconds.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    };
    Ok(EpochTiming {
        mode,
        epoch_seconds,
        seconds_per_epoch,
        step_losses,
    })
}

/// Per-step losses of two runs must agree within `rel_tol` relative.
pub fn check_equivalence(cached: &[f64], on_the_fly: &[f64], rel_tol: f64) -> Result<()> {
    if cached.len() != on_the_fly.len() {
        return Err(Error::Equivalence {
            step: cached.len().min(on_the_fly.len()),
            cached: f64::NAN,
            on_the_fly: f64::NAN,
        });
    }
    for (step, (&a, &b)) in cached.iter().zip(on_the_fly).enumerate() {
        if (a - b).abs() > rel_tol * a.abs().max(b.abs()) {
            return Err(Error::Equivalence {
                step,
                cached: a,
                on_the_fly: b,
            });
        }
    }
    Ok(())
}
