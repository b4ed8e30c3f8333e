//! Builds a small two-layer network on the tape, backpropagates a
//! cross-entropy loss and compares the result with finite differences.
//!
//! cargo run --release --example autodiff_gradcheck

use tokenprune::nncore::gradcheck::{check_gradients, check_gradients_with, Stencil};
use tokenprune::nncore::{SeededRng, Tape, Tensor, Var};

fn main() {
    let mut rng = SeededRng::new(0);
    let x = rng.normal_tensor(&[5, 4], 0.0, 1.0);
    let targets = [0usize, 2, 1, 2, 0];
    let w1 = rng.normal_tensor(&[4, 6], 0.0, 0.5);
    let w2 = rng.normal_tensor(&[6, 3], 0.0, 0.5);

    let loss = |tape: &mut Tape, p: &[Var]| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, p[0]);
        let h = tape.gelu(h);
        let logits = tape.matmul(h, p[1]);
        tape.cross_entropy(logits, &targets)
    };

    let mut tape = Tape::new();
    let a = tape.leaf(w1.clone(), true);
    let b = tape.leaf(w2.clone(), true);
    let l = loss(&mut tape, &[a, b]);
    let grads = tape.backward(l);
    println!("loss {:.6}", tape.value(l).item());
    println!("|dL/dW1| = {:.6}", Tensor::l2_norm(grads.wrt(a).unwrap().data()));
    println!("|dL/dW2| = {:.6}", Tensor::l2_norm(grads.wrt(b).unwrap().data()));

    let inputs = [w1, w2];
    let central = check_gradients(&inputs, &loss, 1e-3);
    let five = check_gradients_with(&inputs, &loss, 1e-2, Stencil::FivePoint);
    println!("relative error, central h=1e-3:    {:.2e}", central.rel_error);
    println!("relative error, five-point h=1e-2: {:.2e}", five.rel_error);
}
