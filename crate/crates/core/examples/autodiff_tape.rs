//! Reverse-mode differentiation on the tape, checked against central
//! differences.

use avatar_tensor::{check_leaf, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let w = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, -0.5, 2.0, 0.25, 1.0])?);

    // loss = sum(tanh(x W)^2)
    let h = tape.matmul(x, w)?;
    let h = tape.tanh(h)?;
    let h = tape.square(h)?;
    let loss = tape.sum(h)?;

    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("dloss/dx = {:?}", grads.wrt(&tape, x).data());

    let report = check_leaf(&mut tape, loss, x, None, 1e-6)?;
    println!("max relative error vs finite differences = {:.2e}", report.max_rel_error);
    Ok(())
}
