//! Time training epochs reading cached hidden states against running the
//! frozen backbones on every step, and check the per-step losses agree.

use crossan::cli::{RunConfig, Workspace};
use crossan::datakit::generate_synthetic;
use crossan::hscache::{check_equivalence, epoch_time_report, SourceMode};

fn main() -> crossan::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.dataset.num_users = 300;
    cfg.dataset.num_items = 120;
    cfg.backbones.d_model = 64;
    cfg.sidenet.d_side = 64;
    cfg.train.batch_size = 64;
    cfg.train.max_steps_per_epoch = Some(2);
    let ws = Workspace::new(generate_synthetic(&cfg.dataset, 0)?, &cfg)?.build_cache()?;
    let widths = cfg.backbone_widths();
    let cached = ws.source();
    let a = epoch_time_report(&cfg.model(), &widths, &ws.split, &*cached, SourceMode::Cached, &cfg.train, 0, 3)?;
    let fly = ws.on_the_fly();
    let b = epoch_time_report(&cfg.model(), &widths, &ws.split, &fly, SourceMode::OnTheFly, &cfg.train, 0, 3)?;
    println!("cached     {:.3} s/epoch", a.seconds_per_epoch);
    println!("on the fly {:.3} s/epoch", b.seconds_per_epoch);
    println!("ratio {:.3}", a.seconds_per_epoch / b.seconds_per_epoch);
    check_equivalence(&a.step_losses, &b.step_losses, 1e-6)?;
    println!("{} step losses agree within 1e-6", a.step_losses.len());
    Ok(())
}
