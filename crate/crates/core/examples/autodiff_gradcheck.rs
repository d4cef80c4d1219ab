//! Records a small two-layer network on the tape, runs the backward pass and
//! compares every gradient entry with central finite differences.
//!
//! cargo run --example autodiff_gradcheck

use stable_cde::diffcore::gradcheck::check;
use stable_cde::diffcore::{Array, DiffError, Tape, Var};

fn net(t: &mut Tape, v: &[Var]) -> Result<Var, DiffError> {
    let (x, w1, b1, w2) = (v[0], v[1], v[2], v[3]);
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.tanh(h);
    let y = t.matmul(h, w2)?;
    let y = t.square(y)?;
    Ok(t.mean(y))
}

fn main() -> Result<(), DiffError> {
    let x = Array::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.5]])?;
    let w1 = Array::matrix(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect())?;
    let b1 = Array::vector(vec![0.1, -0.2, 0.05, 0.0]);
    let w2 = Array::matrix(4, 1, vec![0.7, -0.3, 0.2, 0.9])?;
    let inputs = [x, w1, b1, w2];

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = net(&mut tape, &leaves)?;
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dL/dW2 = {:?}", tape.grad(leaves[3]).map(|g| g.data().to_vec()));

    let rep = check(&net, &inputs, 1e-6, 1e-5, 1e-4)?;
    println!(
        "{} entries checked, worst abs error {:.2e}, worst tolerance ratio {:.3}: {}",
        rep.checked,
        rep.worst_abs_error,
        rep.worst_ratio,
        if rep.passed() { "ok" } else { "MISMATCH" }
    );
    Ok(())
}
