//! Route items through MOMEF: softmax gate, top-k experts, renormalized
//! weights. Prints the routing log and compares with the other fusions.

use crossan::diffcore::{Graph, ParamStore, Tensor};
use crossan::fusion::{routing_csv, topk_select, Fusion, FusionConfig, FusionMethod};
use crossan::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> crossan::Result<()> {
    let (i, w) = topk_select(&[0.5, 0.3, 0.15, 0.05], 2)?;
    println!("top-2 of [0.5, 0.3, 0.15, 0.05]: experts {i:?}, weights {w:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let items = 5;
    let feats: Vec<Tensor> = (0..4)
        .map(|_| Tensor::from_vec(items, 6, (0..items * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    for method in [
        FusionMethod::Momef,
        FusionMethod::Concat,
        FusionMethod::StaticGated,
        FusionMethod::DynamicGated,
        FusionMethod::CrossAttention,
    ] {
        let mut store = ParamStore::new();
        let f = Fusion::new(FusionConfig { method, top_k: 2 }, &Modality::ALL, 6, 4, &mut store, &mut rng)?;
        if let Some((gw, _)) = f.gate {
            store.value_mut(gw).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let mut g = Graph::new();
        let xs: Vec<_> = feats.iter().map(|t| g.constant(t.clone())).collect();
        let out = f.forward(&mut g, &store, &xs)?;
        println!("{method}: first item embedding {:?}", g.value(out.embedding).row(0));
        if method == FusionMethod::Momef {
            let w = g.value(out.weights.unwrap()).clone();
            let ids: Vec<usize> = (0..items).collect();
            print!("{}", routing_csv(&ids, &Modality::ALL, &out.selected, &w));
        }
    }
    Ok(())
}
