//! Compare tape gradients with central finite differences on a small
//! conv → tanh → instance-norm chain.

use aef::dfe::instance_norm;
use aef::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
use aef::{Tape, Tensor};

fn main() -> aef::Result<()> {
    let x = Tensor::from_fn([1, 2, 5, 5], |i| ((i * 37 % 23) as f64 / 11.0) - 1.0);
    let w = Tensor::from_fn([3, 2, 3, 3], |i| ((i * 13 % 17) as f64 / 17.0) - 0.5);
    // Fixed readout weights; a plain norm of an instance-normalized map is constant.
    let r = Tensor::from_fn([1, 3, 5, 5], |i| ((i * 7 % 11) as f64 / 11.0) - 0.4);

    let tape = Tape::new();
    let v = tape.leaf(x.clone())?;
    let k = tape.constant(w.clone())?;
    let l = instance_norm(v.conv2d(k, None)?.tanh()?)?.mul(tape.constant(r.clone())?)?.sum()?;
    let analytic = tape.backward(l)?.wrt(v);

    let numeric = finite_diff_grad(
        |x| {
            let tape = Tape::new();
            let v = tape.constant(x.clone()).unwrap();
            let k = tape.constant(w.clone()).unwrap();
            let y = instance_norm(v.conv2d(k, None).unwrap().tanh().unwrap()).unwrap();
            y.mul(tape.constant(r.clone()).unwrap()).unwrap().sum().unwrap().item()
        },
        &x,
        DEFAULT_STEP,
    );
    println!("‖∇‖₂ = {:.6}", analytic.l2_norm());
    println!("relative error vs finite differences: {:.2e}", relative_error(&analytic, &numeric, 1e-12));
    Ok(())
}
