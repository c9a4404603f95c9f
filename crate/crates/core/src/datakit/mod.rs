//! Interaction datasets: synthetic generation, on-disk formats, leave-one-out
//! splitting and popularity tables.

mod io;
mod split;
mod synthetic;

use std::collections::BTreeMap;

pub use io::{load_dataset, write_dataset, Manifest};
pub use split::{popularity_table, split_leave_one_out, LeaveOneOut, Popularity, UserSplit};
pub use synthetic::{generate_synthetic, ModalityView, SyntheticConfig, SyntheticTruth};

use crate::backbones::FeatureMatrix;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng::Fnv64;

/// User sequences plus per-modality raw item features.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub name: String,
    pub num_items: usize,
    /// Chronological item ids per user; the user id is the index.
    pub sequences: Vec<Vec<usize>>,
    pub features: BTreeMap<Modality, FeatureMatrix>,
    /// Generator-side ground truth, present for synthetic data.
    pub truth: Option<SyntheticTruth>,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.features.keys().copied().collect()
    }

    pub fn feature(&self, m: Modality) -> Result<&FeatureMatrix> {
        self.features
            .get(&m)
            .ok_or_else(|| Error::MissingModality(m.to_string()))
    }

    /// Hash over the catalog size, every sequence and every feature byte.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::default();
        h.update_u64(self.num_items as u64);
        h.update_u64(self.sequences.len() as u64);
        for s in &self.sequences {
            h.update_u64(s.len() as u64);
            for &i in s {
                h.update_u64(i as u64);
            }
        }
        for (m, f) in &self.features {
            h.update_u64(u64::from(m.id()));
            h.update_u64(f.token_count as u64);
            h.update_u64(f.feat_dim as u64);
            for x in &f.data {
                h.update(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Referential integrity: every item id is in the catalog and has
    /// features in every modality.
    pub fn validate(&self) -> Result<()> {
        let mut offenders: Vec<String> = Vec::new();
        for (u, s) in self.sequences.iter().enumerate() {
            for &i in s {
                if i >= self.num_items {
                    offenders.push(format!("user {u} item {i}"));
                }
            }
        }
        if !offenders.is_empty() {
            let n = offenders.len();
            offenders.truncate(10);
            return Err(Error::Integrity(format!(
                "{n} interactions reference items outside the {}-item catalog: {}",
                self.num_items,
                offenders.join(", ")
            )));
        }
        for (m, f) in &self.features {
            if f.item_count != self.num_items {
                let missing: Vec<String> = (f.item_count..self.num_items).take(10).map(|i| i.to_string()).collect();
                return Err(Error::Integrity(format!(
                    "{m} features cover {} items but the catalog has {}; first missing items: {}",
                    f.item_count,
                    self.num_items,
                    if missing.is_empty() { "none (extra rows)".to_string() } else { missing.join(", ") }
                )));
            }
        }
        Ok(())
    }
}
