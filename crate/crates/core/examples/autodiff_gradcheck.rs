//! Build a small MLP on the tape, run backward, and compare the analytic
//! gradient with central finite differences.

use crossan::diffcore::{finite_diff_check_params, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crossan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let w1 = store.normal("w1", 3, 5, 0.5, &mut rng)?;
    let b1 = store.zeros("b1", 1, 5)?;
    let w2 = store.normal("w2", 5, 1, 0.5, &mut rng)?;
    let x = Tensor::from_rows(&[vec![0.2, -1.0, 0.5], vec![1.5, 0.3, -0.7]])?;

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (a, b, c) = (g.param(&store, w1), g.param(&store, b1), g.param(&store, w2));
    let h = g.linear(xv, a, b)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, c)?;
    let loss = g.mean(y)?;
    g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).data()[0]);
    for (id, grad) in g.param_grads() {
        println!("d loss / d {} = {:?}", store.get(id).name, grad.data());
    }

    let err = finite_diff_check_params(
        &mut store,
        &[w1, b1, w2],
        |g, s| {
            let xv = g.constant(x.clone());
            let (a, b, c) = (g.param(s, w1), g.param(s, b1), g.param(s, w2));
            let h = g.linear(xv, a, b)?;
            let h = g.gelu(h)?;
            let y = g.matmul(h, c)?;
            g.mean(y)
        },
        1e-5,
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
