// Quantize a few values at 2 bits and print codes, rescaled values and the
// gradients with respect to the step size and the data.

use lsq::quant::{data_grad_mask, quantize, quantize_forward, step_size_grad};
use lsq::{QuantSpec, Tape, Tensor};

fn main() -> lsq::Result<()> {
    let spec = QuantSpec::weights(2)?;
    let s = 0.5;
    let v = Tensor::new([7], vec![-1.2, -0.6, -0.2, 0.1, 0.26, 0.6, 0.9])?;

    let (codes, hat) = quantize_forward(&v, s, &spec)?;
    let mask = data_grad_mask(&v, s, &spec)?;
    println!("2-bit signed: Q_N = {}, Q_P = {}, s = {s}", spec.q_n(), spec.q_p());
    println!("{:>6} {:>5} {:>6} {:>8} {:>6}", "v", "code", "v_hat", "dv_hat/ds", "dv_hat/dv");
    for (i, &x) in v.data().iter().enumerate() {
        println!(
            "{x:>6.2} {:>5} {:>6.2} {:>8.3} {:>6}",
            codes.data()[i],
            hat.data()[i],
            step_size_grad(x, s, &spec)?,
            mask.data()[i]
        );
    }

    // The same gradients from the tape, summed over elements and scaled by g.
    let tape = Tape::new();
    let vv = tape.param(v.clone());
    let sv = tape.param(Tensor::scalar(s));
    let g = 0.25;
    tape.backward(quantize(vv, sv, g, &spec)?.sum())?;
    let expected: f64 = v.data().iter().map(|&x| step_size_grad(x, s, &spec).unwrap()).sum::<f64>() * g;
    println!("tape ds = {:.6}, g * sum = {expected:.6}", tape.grad(sv).unwrap().data()[0]);
    Ok(())
}
