//! Count trainable parameters per module and compare with the closed form.

use std::collections::BTreeMap;

use crossan::evalkit::{adapter_params, closed_form_params, count_trainable_params};
use crossan::model::{CrossanModel, ModelConfig};
use crossan::sidenet::SideVariant;
use crossan::Modality;

fn main() -> crossan::Result<()> {
    println!("one adapter block, d_side 512, bottleneck 128: {}", adapter_params(512, 128));
    let widths: BTreeMap<Modality, usize> = Modality::ALL.iter().map(|&m| (m, 256)).collect();
    for variant in [SideVariant::Cross, SideVariant::Independent] {
        let mut cfg = ModelConfig::default();
        cfg.sidenet.variant = variant;
        let model = CrossanModel::new(cfg.clone(), &widths, 0)?;
        let got = count_trainable_params(&model);
        let want = closed_form_params(&cfg, &widths)?;
        println!("{variant}: {} trainable ({:?}), closed form {}", got.total, got.by_module, want.total);
    }
    Ok(())
}
