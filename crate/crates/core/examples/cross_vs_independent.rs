//! Train the cross-modal side network and the independent variant on the
//! same data, then compare test HR@10 and the mutual information between
//! the text and image towers.

use crossan::cli::{train_and_eval, RunConfig, Workspace};
use crossan::datakit::generate_synthetic;
use crossan::evalkit::mi_compare;
use crossan::sidenet::SideVariant;

fn main() -> crossan::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.dataset.num_users = 600;
    cfg.dataset.num_items = 200;
    cfg.backbones.d_model = 32;
    cfg.backbones.num_heads = 2;
    cfg.sidenet.d_side = 32;
    cfg.seqrec.d_hidden = 32;
    cfg.train.epochs = 10;
    cfg.train.optimizer.lr = 1e-3;
    let ws = Workspace::new(generate_synthetic(&cfg.dataset, 0)?, &cfg)?.build_cache()?;
    let src = ws.source();

    let cross = train_and_eval(&cfg, &ws.split, &*src, ws.dataset_hash(), 1)?;
    let mut ic = cfg.clone();
    ic.sidenet.variant = SideVariant::Independent;
    let indep = train_and_eval(&ic, &ws.split, &*src, ws.dataset_hash(), 1)?;
    println!("HR@10 cross {:.4}, independent {:.4}", cross.eval.hr10, indep.eval.hr10);

    let items: Vec<usize> = (0..ws.dataset.num_items).collect();
    let (mc, mi) = mi_compare(&cross.model, &indep.model, &*src, &items, 3)?;
    println!("MI(text, image) cross {:.4}, independent {:.4} nats", mc.mi, mi.mi);
    print!("{}", cross.model.side.gate_heatmap_csv(&cross.model.store));
    Ok(())
}
