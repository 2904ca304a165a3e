//! Reverse-mode gradients through a small convolutional graph.

use catpress::arch::PadMode;
use catpress::tensor::{Tape, Tensor};

fn main() -> catpress::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::from_fn([1, 2, 5, 5], |i| (i as f64 * 0.37).sin()));
    let w = tape.input(Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.11).cos() * 0.2));
    let target = tape.constant(Tensor::zeros([1, 3, 5, 5]));
    let y = tape.conv2d(x, w, None, 1, 1, PadMode::Reflect)?;
    let y = tape.tanh(y);
    let loss = tape.mse(y, target)?;
    println!("loss = {:.6}, {} multiplies in the forward pass", tape.value(loss).item(), tape.muls());

    let grads = tape.backward(loss)?;
    let gw = grads.get(w).expect("weight gradient");
    let norm = gw.data().iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("|dloss/dw| = {norm:.6}");
    Ok(())
}
