// Reverse-mode gradients on the tape, the detach trick behind `gradscale`
// and `roundpass`, and a finite-difference check.

use lsq::quant::{gradscale, roundpass};
use lsq::{Tape, Tensor};

fn loss_value(x: &Tensor, w: &Tensor) -> lsq::Result<f64> {
    let tape = Tape::new();
    tape.constant(x.clone()).matmul(tape.constant(w.clone()))?.relu().mean().item()
}

fn main() -> lsq::Result<()> {
    let tape = Tape::new();
    let x = tape.param(Tensor::new([3], vec![0.4, 1.6, -2.5])?);
    let scaled = gradscale(x, 0.1)?;
    let rounded = roundpass(x)?;
    tape.backward(scaled.add(rounded)?.sum())?;
    println!("forward gradscale(x) = {:?}", scaled.value().data());
    println!("forward roundpass(x) = {:?}", rounded.value().data());
    println!("d/dx [gradscale + roundpass] = {:?} (0.1 + 1 each)", tape.grad(x).unwrap().data());

    let xs = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7])?;
    let ws = Tensor::new([3, 2], vec![0.2, -0.4, 0.7, 0.1, -0.3, 0.9])?;
    let tape = Tape::new();
    let w = tape.param(ws.clone());
    let loss = tape.constant(xs.clone()).matmul(w)?.relu().mean();
    tape.backward(loss)?;
    let grad = tape.grad(w).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..ws.numel() {
        let mut plus = ws.clone();
        plus.data_mut()[i] += h;
        let mut minus = ws.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss_value(&xs, &plus)? - loss_value(&xs, &minus)?) / (2.0 * h);
        worst = worst.max((fd - grad.data()[i]).abs());
    }
    println!("matmul + relu + mean: max |tape - finite difference| = {worst:.2e}");
    Ok(())
}
