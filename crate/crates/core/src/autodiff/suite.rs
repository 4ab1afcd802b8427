//! Finite-difference checks for every primitive, shared by tests and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, CheckReport};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Random tensor whose entries stay at least `margin` away from zero.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Sum of `y ⊙ w` for fixed random weights `w`, so every output entry matters.
fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let prod = t.mul(y, wv)?;
    let n = w.len() as f64;
    let m = t.mean_all(prod)?;
    t.scale(m, n)
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn unary(
    out_shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Objective {
    let w = Tensor::randn(&out_shape, 1.0, rng);
    Box::new(move |t, p| {
        let y = op(t, p[0])?;
        weighted_sum(t, y, &w)
    })
}

fn binary(
    out_shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
) -> Objective {
    let w = Tensor::randn(&out_shape, 1.0, rng);
    Box::new(move |t, p| {
        let y = op(t, p[0], p[1])?;
        weighted_sum(t, y, &w)
    })
}

/// Runs a finite-difference check for each primitive (and each matmul shape
/// rule) with inputs drawn from `seed`.
pub fn primitive_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<(&'static str, CheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(&'static str, Objective, Vec<Tensor>)> = Vec::new();

    let p = vec![
        Tensor::randn(&[3, 4], 1.0, r),
        Tensor::randn(&[4, 2], 1.0, r),
    ];
    cases.push(("matmul", binary(vec![3, 2], r, |t, a, b| t.matmul(a, b)), p));
    let p = vec![
        Tensor::randn(&[2, 3, 4], 1.0, r),
        Tensor::randn(&[2, 4, 2], 1.0, r),
    ];
    cases.push((
        "matmul_batched",
        binary(vec![2, 3, 2], r, |t, a, b| t.matmul(a, b)),
        p,
    ));
    let p = vec![
        Tensor::randn(&[2, 3, 4], 1.0, r),
        Tensor::randn(&[4, 2], 1.0, r),
    ];
    cases.push((
        "matmul_shared",
        binary(vec![2, 3, 2], r, |t, a, b| t.matmul(a, b)),
        p,
    ));
    let p = vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4], 1.0, r)];
    cases.push(("add", binary(vec![3, 4], r, |t, a, b| t.add(a, b)), p));
    let p = vec![
        Tensor::randn(&[3, 4], 1.0, r),
        Tensor::randn(&[3, 4], 1.0, r),
    ];
    cases.push(("mul", binary(vec![3, 4], r, |t, a, b| t.mul(a, b)), p));
    let c = r.random_range(-2.0..2.0);
    let p = vec![Tensor::randn(&[5], 1.0, r)];
    cases.push((
        "scalar_mul",
        unary(vec![5], r, move |t, a| t.scale(a, c)),
        p,
    ));
    let p = vec![
        Tensor::randn(&[3, 2], 1.0, r),
        Tensor::randn(&[3, 3], 1.0, r),
    ];
    cases.push((
        "concat_last",
        binary(vec![3, 5], r, |t, a, b| t.concat(&[a, b])),
        p,
    ));
    let p = vec![Tensor::randn(&[2, 3, 4], 1.0, r)];
    cases.push((
        "mean_axis",
        unary(vec![2, 4], r, |t, a| t.mean_axis(a, 1)),
        p,
    ));
    let p = vec![Tensor::randn(&[2, 3, 4], 1.0, r)];
    cases.push((
        "transpose",
        unary(vec![4, 3, 2], r, |t, a| t.transpose(a, 0, 2)),
        p,
    ));
    let p = vec![Tensor::randn(&[2, 6], 1.0, r)];
    cases.push((
        "reshape",
        unary(vec![3, 4], r, |t, a| t.reshape(a, vec![3, 4])),
        p,
    ));
    let p = vec![Tensor::randn(&[2, 4, 3], 1.0, r)];
    cases.push((
        "slice",
        unary(vec![2, 2, 3], r, |t, a| t.slice(a, 1, 1, 3)),
        p,
    ));
    let p = vec![Tensor::randn(&[3, 4], 1.0, r)];
    cases.push((
        "embedding_lookup",
        unary(vec![4, 4], r, |t, a| t.lookup(a, vec![2, 0, 2, 1])),
        p,
    ));
    let p = vec![away_from_zero(&[3, 4], 0.05, r)];
    cases.push(("relu", unary(vec![3, 4], r, |t, a| t.relu(a)), p));
    let p = vec![Tensor::randn(&[3, 4], 1.5, r)];
    cases.push(("gelu", unary(vec![3, 4], r, |t, a| t.gelu(a)), p));
    let p = vec![Tensor::randn(&[3, 4], 2.0, r)];
    cases.push(("sigmoid", unary(vec![3, 4], r, |t, a| t.sigmoid(a)), p));
    let p = vec![Tensor::randn(&[3, 5], 2.0, r)];
    cases.push(("softmax_last", unary(vec![3, 5], r, |t, a| t.softmax(a)), p));
    let p = vec![Tensor::randn(&[3, 6], 1.0, r)];
    cases.push((
        "layer_norm_last",
        unary(vec![3, 6], r, |t, a| t.layer_norm(a)),
        p,
    ));
    let p = vec![
        Tensor::randn(&[3, 4], 1.0, r),
        Tensor::randn(&[3, 4], 1.0, r),
    ];
    cases.push((
        "squared_error",
        Box::new(|t, p| t.squared_error(p[0], p[1])),
        p,
    ));
    let probs: Vec<f64> = (0..8).map(|_| r.random_range(0.05..0.95)).collect();
    let targets: Vec<f64> = (0..8)
        .map(|_| f64::from(u8::from(r.random_bool(0.3))))
        .collect();
    let pw = r.random_range(0.5..3.0);
    cases.push((
        "binary_cross_entropy",
        Box::new(move |t, p| t.bce(p[0], targets.clone(), pw)),
        vec![Tensor::vector(probs)],
    ));

    cases
        .into_iter()
        .map(|(name, f, params)| Ok((name, grad_check(f, &params, h, tol)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5 {
            for (name, report) in primitive_suite(seed, 1e-6, 1e-6).unwrap() {
                assert!(report.passed(), "seed {seed} {name}: {report:?}");
            }
        }
    }
}
