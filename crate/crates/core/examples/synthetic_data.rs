//! Generate a synthetic multimodal dataset, write it to disk, load it back
//! and inspect the leave-one-out split and item popularity.

use crossan::datakit::{generate_synthetic, load_dataset, split_leave_one_out, write_dataset, SyntheticConfig};

fn main() -> crossan::Result<()> {
    let cfg = SyntheticConfig {
        num_users: 200,
        num_items: 80,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&cfg, 0)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = write_dataset(&data, dir.path())?;
    println!("wrote {} users, {} items, hash {}", manifest.num_users, manifest.num_items, manifest.content_hash);

    let back = load_dataset(dir.path())?;
    assert_eq!(back.content_hash(), data.content_hash());
    for m in back.modalities() {
        let f = back.feature(m)?;
        let bad = data.truth.as_ref().map_or(0, |t| t.corrupted[&m].iter().filter(|&&c| c).count());
        println!("{m}: {} tokens x {} features per item, {bad} corrupted items", f.token_count, f.feat_dim);
    }

    let split = split_leave_one_out(&back);
    let u = &split.users[0];
    println!("user {}: train {:?}", u.user, u.train);
    println!("  valid target {}, test target {}", u.valid_target, u.test_target);
    println!("training pairs: {}", split.train_pair_count());
    let pop = split.popularity()?;
    let mut top: Vec<(usize, f64)> = (0..back.num_items).map(|i| (i, pop.get(i).unwrap())).collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("most popular items: {:?}", &top[..5]);
    Ok(())
}
