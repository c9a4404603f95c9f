//! Dataset directory layout:
//!
//! ```text
//! manifest.json        {name, num_users, num_items, modalities, content_hash}
//! interactions.jsonl   one {"user": u, "items": [...]} per line
//! <modality>.crsf      raw features, one file per modality
//! truth.json           generator ground truth (synthetic data only)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InteractionDataset, ModalityView, SyntheticTruth};
use crate::backbones::FeatureMatrix;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::modality::Modality;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub num_users: usize,
    pub num_items: usize,
    pub modalities: Vec<Modality>,
    /// Hex-encoded [`InteractionDataset::content_hash`].
    pub content_hash: String,
}

impl Manifest {
    pub fn of(d: &InteractionDataset) -> Self {
        Self {
            name: d.name.clone(),
            num_users: d.num_users(),
            num_items: d.num_items,
            modalities: d.modalities(),
            content_hash: format!("{:016x}", d.content_hash()),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }
}

pub fn feature_file(dir: &Path, m: Modality) -> std::path::PathBuf {
    dir.join(format!("{}.crsf", m.name()))
}

#[derive(Serialize, Deserialize)]
struct InteractionLine {
    user: usize,
    items: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TruthFile {
    latents: Vec<Vec<f64>>,
    corrupted: BTreeMap<Modality, Vec<usize>>,
    views: BTreeMap<Modality, ViewFile>,
}

#[derive(Serialize, Deserialize)]
struct ViewFile {
    latent_indices: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dataset: &InteractionDataset, dir: &Path) -> Result<Manifest> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(INTERACTIONS_FILE);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for (user, items) in dataset.sequences.iter().enumerate() {
        let line = serde_json::to_string(&InteractionLine {
            user,
            items: items.clone(),
        })
        .map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for (m, f) in &dataset.features {
        f.write(&feature_file(dir, *m))?;
    }

    if let Some(t) = &dataset.truth {
        let tf = TruthFile {
            latents: (0..t.latents.rows()).map(|r| t.latents.row(r).to_vec()).collect(),
            corrupted: t
                .corrupted
                .iter()
                .map(|(m, bad)| (*m, bad.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()))
                .collect(),
            views: t
                .views
                .iter()
                .map(|(m, v)| {
                    let weights = v
                        .weights
                        .iter()
                        .map(|w| (0..w.rows()).map(|r| w.row(r).to_vec()).collect())
                        .collect();
                    let biases = v.biases.iter().map(|b| b.data().to_vec()).collect();
                    (
                        *m,
                        ViewFile {
                            latent_indices: v.latent_indices.clone(),
                            weights,
                            biases,
                        },
                    )
                })
                .collect(),
        };
        write_json(&dir.join(TRUTH_FILE), &tf)?;
    }

    let manifest = Manifest::of(dataset);
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn read_interactions(path: &Path, num_users: usize) -> Result<Vec<Vec<usize>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sequences: Vec<Option<Vec<usize>>> = vec![None; num_users];
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        let slot = sequences.get_mut(rec.user).ok_or_else(|| {
            Error::format(
                path,
                format!("line {}: user {} outside the manifest's {num_users} users", n + 1, rec.user),
            )
        })?;
        if slot.is_some() {
            return Err(Error::format(path, format!("line {}: duplicate user {}", n + 1, rec.user)));
        }
        *slot = Some(rec.items);
    }
    sequences
        .into_iter()
        .enumerate()
        .map(|(u, s)| s.ok_or_else(|| Error::format(path, format!("user {u} has no interaction line"))))
        .collect()
}

fn read_truth(path: &Path, num_items: usize) -> Result<SyntheticTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tf: TruthFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    let latents = Tensor::from_rows(&tf.latents)?;
    let corrupted = tf
        .corrupted
        .into_iter()
        .map(|(m, ids)| {
            let mut bad = vec![false; num_items];
            for i in ids {
                if i >= num_items {
                    return Err(Error::format(path, format!("corrupted item {i} outside catalog")));
                }
                bad[i] = true;
            }
            Ok((m, bad))
        })
        .collect::<Result<_>>()?;
    let views = tf
        .views
        .into_iter()
        .map(|(m, v)| {
            let weights = v.weights.iter().map(|w| Tensor::from_rows(w)).collect::<Result<_>>()?;
            let biases = v.biases.into_iter().map(Tensor::row_vector).collect();
            Ok((
                m,
                ModalityView {
                    latent_indices: v.latent_indices,
                    weights,
                    biases,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticTruth {
        latents,
        corrupted,
        views,
    })
}

pub fn load_dataset(dir: &Path) -> Result<InteractionDataset> {
    let manifest = Manifest::read(dir)?;
    let sequences = read_interactions(&dir.join(INTERACTIONS_FILE), manifest.num_users)?;

    let mut features = BTreeMap::new();
    let mut missing = Vec::new();
    for &m in &manifest.modalities {
        let path = feature_file(dir, m);
        if !path.exists() {
            missing.push(m.name());
            continue;
        }
        features.insert(m, FeatureMatrix::read(&path)?);
    }
    if !missing.is_empty() {
        return Err(Error::MissingModality(format!(
            "feature files absent for: {}",
            missing.join(", ")
        )));
    }

    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(read_truth(&truth_path, manifest.num_items)?)
    } else {
        None
    };

    let dataset = InteractionDataset {
        name: manifest.name.clone(),
        num_items: manifest.num_items,
        sequences,
        features,
        truth,
    };
    dataset.validate()?;
    let hash = format!("{:016x}", dataset.content_hash());
    if hash != manifest.content_hash {
        return Err(Error::Integrity(format!(
            "content hash {hash} does not match manifest {}",
            manifest.content_hash
        )));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_synthetic, SyntheticConfig};

    fn small() -> InteractionDataset {
        let cfg = SyntheticConfig {
            num_users: 20,
            num_items: 30,
            token_count: 2,
            feat_dim: 3,
            ..Default::default()
        };
        generate_synthetic(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_preserves_content() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.content_hash(), d.content_hash());
        assert_eq!(back, d);
    }

    #[test]
    fn unknown_item_is_an_integrity_error() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join(INTERACTIONS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"items\":[", "\"items\":[999,", 1);
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
        assert!(err.to_string().contains("item 999"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join(INTERACTIONS_FILE);
        let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
        lines[2] = "{\"user\": 2, \"items\": [1,".into();
        fs::write(&path, lines.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn wrong_feature_header_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let path = feature_file(dir.path(), Modality::Image);
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 31;
        fs::write(&path, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("header declares"), "{err}");
    }

    #[test]
    fn missing_feature_file_names_modality() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        fs::remove_file(feature_file(dir.path(), Modality::Audio)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingModality(_)));
        assert!(err.to_string().contains("audio"));
    }
}
