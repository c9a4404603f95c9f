//! Train CROSSAN end to end on a small synthetic dataset, evaluate with
//! full-catalog ranking, save the run directory and reload the checkpoint.

use crossan::cli::{train_and_eval, write_run, RunConfig, Workspace, CHECKPOINT_FILE};
use crossan::datakit::generate_synthetic;
use crossan::evalkit::{evaluate, EvalSplit};
use crossan::model::CrossanModel;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.num_users = 400;
    c.dataset.num_items = 150;
    c.backbones.num_layers = 4;
    c.backbones.d_model = 32;
    c.backbones.num_heads = 2;
    c.sidenet.d_side = 32;
    c.sidenet.num_side_layers = 2;
    c.seqrec.d_hidden = 32;
    c.train.epochs = 8;
    c.train.optimizer.lr = 1e-3;
    c
}

fn main() -> crossan::Result<()> {
    let cfg = small();
    let ws = Workspace::new(generate_synthetic(&cfg.dataset, 0)?, &cfg)?.build_cache()?;
    let src = ws.source();
    let out = train_and_eval(&cfg, &ws.split, &*src, ws.dataset_hash(), 1)?;
    for e in &out.train.epochs {
        println!("epoch {}: loss {:.4}, valid HR@10 {:.4}", e.epoch, e.loss, e.val_hr10);
    }
    println!(
        "{} test: HR@10 {:.4} HR@20 {:.4} NDCG@10 {:.4} NDCG@20 {:.4} over {} users",
        out.metrics.model, out.eval.hr10, out.eval.hr20, out.eval.ndcg10, out.eval.ndcg20, out.metrics.users
    );

    let dir = tempfile::tempdir().expect("temp dir");
    write_run(dir.path(), &cfg, &out, ws.dataset_hash())?;
    let (model, header) = CrossanModel::load(&dir.path().join(CHECKPOINT_FILE))?;
    ws.check_checkpoint(&header)?;
    let again = evaluate(&model, &*src, &ws.split, EvalSplit::Test, None)?;
    println!("reloaded checkpoint (seed {}): HR@10 {:.4}", header.seed, again.hr10);
    Ok(())
}
