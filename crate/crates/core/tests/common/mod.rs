#![allow(dead_code)]

use dcnfis::gradcheck::finite_difference_check;
use dcnfis::tape::Tape;
use dcnfis::tensor::Tensor;
use dcnfis::{Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude stays at least `gap`, so kinks at zero are
/// never within a finite-difference step.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.05 apart, in random order.
pub fn spaced(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.random_range(0.0..0.05) - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(op(inputs) * r)` for fixed random weights `r` and compares the
/// tape gradient of every input against central differences. Returns the
/// largest relative error.
pub fn op_fd_error<F>(inputs: &[Tensor<f64>], weight_seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let r = uniform(&mut rng(weight_seed), &probe, -1.0, 1.0);
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| tape.grad_data(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
        .collect();

    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let f = |point: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let data = point[offset..offset + t.len()].to_vec();
                offset += t.len();
                tape.constant(Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };
    Ok(finite_difference_check(f, &theta, &analytic, FD_STEP)?.max_rel_error)
}

/// Exhaustive medoid: every member's distance to every other member, summed
/// from scratch. Ties keep the earliest member.
pub fn brute_force_medoid(rows: &[usize], features: &[f32], dim: usize) -> (usize, f64) {
    let dist = |a: usize, b: usize| -> f64 {
        let (x, y) = (&features[a * dim..(a + 1) * dim], &features[b * dim..(b + 1) * dim]);
        x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut best = (rows[0], f64::INFINITY);
    for &i in rows {
        let total: f64 = rows.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    best
}

/// Random features in `n_rules` loose clusters, some rows duplicated so ties
/// occur. Returns `(winners, features)`.
pub fn clustered_features(r: &mut impl Rng, n: usize, n_rules: usize, dim: usize) -> (Vec<usize>, Vec<f32>) {
    let centers: Vec<f32> = (0..n_rules * dim).map(|_| r.random_range(-5.0..5.0)).collect();
    let mut winners = Vec::with_capacity(n);
    let mut features: Vec<f32> = Vec::with_capacity(n * dim);
    for s in 0..n {
        let k = r.random_range(0..n_rules);
        winners.push(k);
        if s > 0 && r.random_bool(0.05) {
            let src = r.random_range(0..s);
            winners[s] = winners[src];
            let row = features[src * dim..(src + 1) * dim].to_vec();
            features.extend(row);
        } else {
            features.extend((0..dim).map(|j| centers[k * dim + j] + r.random_range(-1.0f32..1.0)));
        }
    }
    (winners, features)
}
