//! Reverse-mode gradients on the tape: a one-layer softmax classifier.

use cil_core::numerics::{Graph, Rng, Tensor};

fn main() -> cil_core::Result<()> {
    let mut rng = Rng::new(0);
    let x = Tensor::matrix(4, 3, rng.normal_vec(12, 1.0))?;
    let labels = [0, 1, 1, 0];
    let mut w = Tensor::matrix(3, 2, rng.normal_vec(6, 0.1))?;

    for step in 0..50 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let logits = g.matmul(xv, wv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let grads = g.backward(loss)?;
        if step % 10 == 0 {
            println!("step {step:>2}  loss {:.4}", g.value(loss).data()[0]);
        }
        let dw = grads.wrt(wv);
        for (p, d) in w.data_mut().iter_mut().zip(dw.data()) {
            *p -= 0.5 * d;
        }
    }
    Ok(())
}
