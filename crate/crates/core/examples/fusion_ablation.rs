//! Sweep fusion methods and modality subsets over two seeds with the ablation harness
//! and print the summary and paired t-tests.

use crossan::cli::{ablate, AblationGrid, GridAxis, RunConfig, Workspace};
use crossan::datakit::generate_synthetic;
use crossan::fusion::FusionMethod;

fn main() -> crossan::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.dataset.num_users = 300;
    cfg.dataset.num_items = 120;
    cfg.backbones.num_layers = 4;
    cfg.backbones.d_model = 32;
    cfg.backbones.num_heads = 2;
    cfg.sidenet.d_side = 32;
    cfg.sidenet.num_side_layers = 2;
    cfg.seqrec.d_hidden = 32;
    cfg.train.epochs = 4;
    cfg.train.optimizer.lr = 1e-3;
    let ws = Workspace::new(generate_synthetic(&cfg.dataset, 0)?, &cfg)?.build_cache()?;
    let src = ws.source();

    let grid = AblationGrid {
        fusion: vec![FusionMethod::Momef, FusionMethod::Concat, FusionMethod::DynamicGated],
        modalities: vec!["TI".into(), "TIVA".into()],
        seeds: vec![1, 2],
        compare: Some(GridAxis::Fusion),
        ..AblationGrid::default()
    };
    let r = ablate(&cfg, &grid, &ws.split, &*src, ws.dataset_hash(), 1, None)?;
    print!("{}", r.summary_csv());
    print!("{}", r.ttests_csv());
    Ok(())
}
