//! Encode items with a frozen backbone, precompute the hidden-state cache
//! on disk, and read it back.

use crossan::backbones::{build_frozen_backbone, layerdrop_select, BackboneConfig};
use crossan::datakit::{generate_synthetic, SyntheticConfig};
use crossan::hscache::{precompute_cache, CachedStates, HiddenSource};
use crossan::Modality;

fn main() -> crossan::Result<()> {
    println!("retained layers of 12 at keep 0.5: {:?}", layerdrop_select(12, 0.5)?);
    let data = generate_synthetic(
        &SyntheticConfig {
            num_users: 100,
            num_items: 40,
            ..SyntheticConfig::default()
        },
        0,
    )?;
    let backbones = data
        .modalities()
        .into_iter()
        .map(|m| {
            build_frozen_backbone(&BackboneConfig {
                num_layers: 4,
                d_model: 32,
                num_heads: 2,
                ..BackboneConfig::new(m, m.id() as u64)
            })
        })
        .collect::<crossan::Result<Vec<_>>>()?;

    let text = &backbones[0];
    let states = text.encode(3, &data.feature(Modality::Text)?.item(3)?)?;
    println!(
        "item 3, text: {} pooled layers from backbone layers {:?}, checksum {:016x}",
        states.layers.len(),
        states.retained_indices,
        text.weight_checksum()
    );

    let dir = tempfile::tempdir().expect("temp dir");
    for p in precompute_cache(&data, &backbones, dir.path())? {
        println!("wrote {}", p.display());
    }
    let cache = CachedStates::open(dir.path(), &data, &backbones)?;
    let layers = cache.layer_states(Modality::Text, &[3])?;
    let diff = layers[0]
        .data()
        .iter()
        .zip(&states.layers[0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("cache vs direct encode, first layer: max |diff| {diff:.2e} (f32 storage)");
    Ok(())
}
