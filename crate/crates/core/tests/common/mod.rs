//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stabletrain::{Result, Scalar, Tape, Tensor, Var};

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn projected<T: Scalar, F>(inputs: &[Tensor<T>], proj: &Tensor<T>, build: &F) -> T
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Worst relative error (L2 over each input) between reverse-mode gradients
/// and central differences of `sum(build(inputs) * R)` for a fixed random R.
fn gradcheck_generic<T: Scalar, F>(seed: u64, inputs: &[Tensor<T>], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj = random_tensor(&mut rng, tape.shape(out)).cast::<T>();
    let pv = tape.constant(proj.clone());
    let weighted = tape.mul(out, pv).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad(vars[i]).unwrap().to_f64_vec();
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] = plus[i].data()[j] + T::of(h);
            minus[i].data_mut()[j] = minus[i].data()[j] - T::of(h);
            let fp = projected(&plus, &proj, &build).f64();
            let fm = projected(&minus, &proj, &build).f64();
            numeric.push((fp - fm) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn gradcheck<F>(seed: u64, inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_generic(seed, inputs, 1e-6, build)
}

pub fn gradcheck_f32<F>(inputs: &[Tensor<f32>], build: F) -> f64
where
    F: Fn(&mut Tape<f32>, &[Var]) -> Result<Var>,
{
    gradcheck_generic(0, inputs, 1e-2, build)
}
