//! Checks reverse-mode gradients of a small attention block against central
//! finite differences in f64.

use crossmae::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// LayerNorm, attention over itself, GELU and a weighted sum.
fn block(tape: &mut Tape<f64>, v: &[Var], weights: &Tensor<f64>) -> Var {
    let h = tape.layer_norm(v[0], v[1], v[2], 1e-6).expect("ln");
    let q = tape.matmul(h, v[3]).expect("q");
    let p = tape.attention_probs(q, h, 2, 0.5).expect("probs");
    let o = tape.attention_apply(p, h).expect("apply");
    let g = tape.gelu(o);
    let w = tape.constant(weights.clone());
    let y = tape.mul(g, w).expect("mul");
    tape.sum(y)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[2, 5, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng), random(&[4, 4], &mut rng)];
    let weights = random(&[2, 5, 4], &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = block(&mut tape, &vars, &weights);
    tape.backward(loss).expect("scalar loss");

    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = block(&mut tape, &vars, &weights);
        tape.value(l).item()
    };
    let h = 1e-5;
    for (i, name) in ["x", "gain", "bias", "w_q"].iter().enumerate() {
        let analytic = tape.grad(vars[i]).expect("gradient");
        let mut worst = 0.0f64;
        for j in 0..inputs[i].numel() {
            let mut up = inputs.clone();
            up[i].data_mut()[j] += h;
            let mut down = inputs.clone();
            down[i].data_mut()[j] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{name:>5}: worst relative error {worst:.2e}");
    }
}
