//! Log-domain ANFIS classifier head.
//!
//! One rule per class. For a feature vector `x` of width `N_V` and rule `i`:
//!
//! ```text
//! M_ji  = -0.5 * beta_ji * (x_j - mu_ji)^2       log-membership
//! w_i   = sum_j M_ji                             log firing strength
//! f_i   = sum_j W_ji * x_j + b_i                 linear consequent
//! zeta_i = w_i + f_i                             logit
//! y     = softmax(zeta)
//! ```
//!
//! All parameter matrices are stored row-major as `N_C x N_V`, i.e. the
//! element for rule `i` and feature `j` sits at `i * N_V + j`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyHeadParams<T = f32> {
    n_rules: usize,
    n_features: usize,
    /// Membership centers.
    pub mu: Vec<T>,
    /// Membership width coefficients. Unconstrained; a negative entry
    /// turns the membership into an inverted bowl.
    pub beta: Vec<T>,
    /// Consequent weights.
    pub w: Vec<T>,
    /// Consequent biases, one per rule.
    pub b: Vec<T>,
}

impl<T: Real> FuzzyHeadParams<T> {
    pub fn new(
        n_rules: usize,
        n_features: usize,
        mu: Vec<T>,
        beta: Vec<T>,
        w: Vec<T>,
        b: Vec<T>,
    ) -> Result<Self> {
        if n_rules == 0 || n_features == 0 {
            return Err(Error::Invalid(format!(
                "fuzzy head needs positive dimensions, got {n_rules} rules x {n_features} features"
            )));
        }
        let cv = n_rules * n_features;
        for (name, len, want) in [
            ("mu", mu.len(), cv),
            ("beta", beta.len(), cv),
            ("w", w.len(), cv),
            ("b", b.len(), n_rules),
        ] {
            if len != want {
                return Err(Error::shape(
                    "fuzzy head parameter",
                    format!("{name} with {want} values"),
                    &[len],
                ));
            }
        }
        let params = Self {
            n_rules,
            n_features,
            mu,
            beta,
            w,
            b,
        };
        if !params.all_finite() {
            return Err(Error::NonFinite("fuzzy head parameters".into()));
        }
        Ok(params)
    }

    /// Centers from `0.1 * N(0, 1)`, widths at 1, consequents drawn like a
    /// dense layer: `U(-1/sqrt(N_V), 1/sqrt(N_V))`.
    pub fn init<R: Rng + ?Sized>(n_rules: usize, n_features: usize, rng: &mut R) -> Result<Self> {
        let cv = n_rules * n_features;
        let mu = (0..cv)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(0.1 * z)
            })
            .collect();
        let bound = 1.0 / (n_features.max(1) as f64).sqrt();
        let dense = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let w = (0..cv).map(|_| T::from_f64(dense.sample(rng))).collect();
        let b = (0..n_rules).map(|_| T::from_f64(dense.sample(rng))).collect();
        Self::new(n_rules, n_features, mu, vec![T::one(); cv], w, b)
    }

    pub fn n_rules(&self) -> usize {
        self.n_rules
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn all_finite(&self) -> bool {
        [&self.mu, &self.beta, &self.w, &self.b]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Number of width coefficients below zero.
    pub fn negative_beta_count(&self) -> usize {
        self.beta.iter().filter(|b| **b < T::zero()).count()
    }

    pub fn cast<U: Real>(&self) -> FuzzyHeadParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        FuzzyHeadParams {
            n_rules: self.n_rules,
            n_features: self.n_features,
            mu: c(&self.mu),
            beta: c(&self.beta),
            w: c(&self.w),
            b: c(&self.b),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::shape(
                "feature vector",
                format!("length {}", self.n_features),
                &[x.len()],
            ));
        }
        Ok(())
    }
}

/// Everything the head computes for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleEvaluation<T = f32> {
    /// Log-memberships, `N_C x N_V`.
    pub memberships: Vec<T>,
    /// Log firing strengths, one per rule.
    pub firing: Vec<T>,
    pub consequents: Vec<T>,
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

/// Arithmetic operation tally for one head evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount(pub u64);

trait Counter {
    fn tick(&mut self, n: u64);
}

struct NoCount;

impl Counter for NoCount {
    #[inline(always)]
    fn tick(&mut self, _: u64) {}
}

impl Counter for FlopCount {
    #[inline(always)]
    fn tick(&mut self, n: u64) {
        self.0 += n;
    }
}

#[inline(always)]
fn log_member<T: Real>(x: T, mu: T, beta: T) -> T {
    let d = x - mu;
    T::from_f64(-0.5) * beta * (d * d)
}

pub fn log_membership<T: Real>(x: &[T], params: &FuzzyHeadParams<T>) -> Result<Vec<T>> {
    params.check_input(x)?;
    Ok(memberships_impl(x, params, &mut NoCount))
}

fn memberships_impl<T: Real, C: Counter>(x: &[T], p: &FuzzyHeadParams<T>, c: &mut C) -> Vec<T> {
    let v = p.n_features;
    let mut m = Vec::with_capacity(p.n_rules * v);
    for i in 0..p.n_rules {
        let row = i * v;
        for j in 0..v {
            m.push(log_member(x[j], p.mu[row + j], p.beta[row + j]));
            // subtract, square, two multiplies
            c.tick(4);
        }
    }
    m
}

/// Sums each rule's log-memberships left to right.
pub fn rule_firing<T: Real>(memberships: &[T], n_rules: usize, n_features: usize) -> Result<Vec<T>> {
    if n_rules == 0 || n_features == 0 || memberships.len() != n_rules * n_features {
        return Err(Error::shape(
            "memberships",
            format!("{n_rules} x {n_features}"),
            &[memberships.len()],
        ));
    }
    Ok(firing_impl(memberships, n_rules, n_features, &mut NoCount))
}

fn firing_impl<T: Real, C: Counter>(m: &[T], n_rules: usize, v: usize, c: &mut C) -> Vec<T> {
    (0..n_rules)
        .map(|i| {
            let mut acc = T::zero();
            for &mji in &m[i * v..(i + 1) * v] {
                acc = acc + mji;
                c.tick(1);
            }
            acc
        })
        .collect()
}

/// Linear consequents `f_i = sum_j W_ji x_j + b_i`.
pub fn consequents<T: Real>(x: &[T], params: &FuzzyHeadParams<T>) -> Result<Vec<T>> {
    params.check_input(x)?;
    Ok(consequents_impl(x, params, &mut NoCount))
}

fn consequents_impl<T: Real, C: Counter>(x: &[T], p: &FuzzyHeadParams<T>, c: &mut C) -> Vec<T> {
    let v = p.n_features;
    (0..p.n_rules)
        .map(|i| {
            let mut acc = T::zero();
            for (wji, xj) in p.w[i * v..(i + 1) * v].iter().zip(x) {
                acc = acc + *wji * *xj;
                c.tick(2);
            }
            c.tick(1);
            acc + p.b[i]
        })
        .collect()
}

/// `zeta_i = omega_i + f_i`. The consequent enters additively; no logarithm
/// is taken of it.
pub fn logits<T: Real>(x: &[T], firing: &[T], params: &FuzzyHeadParams<T>) -> Result<Vec<T>> {
    params.check_input(x)?;
    if firing.len() != params.n_rules {
        return Err(Error::shape(
            "firing strengths",
            format!("length {}", params.n_rules),
            &[firing.len()],
        ));
    }
    let f = consequents_impl(x, params, &mut NoCount);
    Ok(firing.iter().zip(&f).map(|(w, f)| *w + *f).collect())
}

pub fn log_sum_exp<T: Real>(zeta: &[T]) -> T {
    let max = zeta.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = zeta.iter().map(|z| (*z - max).exp()).sum();
    max + sum.ln()
}

/// Max-shifted softmax.
pub fn class_probabilities<T: Real>(zeta: &[T]) -> Vec<T> {
    softmax_impl(zeta, &mut NoCount)
}

fn softmax_impl<T: Real, C: Counter>(zeta: &[T], c: &mut C) -> Vec<T> {
    let max = zeta.iter().copied().fold(T::neg_infinity(), T::max);
    c.tick(zeta.len() as u64);
    let mut y: Vec<T> = zeta.iter().map(|z| (*z - max).exp()).collect();
    let sum: T = y.iter().copied().sum();
    let inv = T::one() / sum;
    for v in &mut y {
        *v = *v * inv;
    }
    // subtract, exp, accumulate, scale
    c.tick(4 * zeta.len() as u64 + 1);
    y
}

pub fn evaluate<T: Real>(x: &[T], params: &FuzzyHeadParams<T>) -> Result<RuleEvaluation<T>> {
    params.check_input(x)?;
    Ok(evaluate_impl(x, params, &mut NoCount))
}

/// Same as [`evaluate`], also reporting the arithmetic operations performed.
pub fn evaluate_counted<T: Real>(
    x: &[T],
    params: &FuzzyHeadParams<T>,
) -> Result<(RuleEvaluation<T>, FlopCount)> {
    params.check_input(x)?;
    let mut count = FlopCount::default();
    let eval = evaluate_impl(x, params, &mut count);
    Ok((eval, count))
}

fn evaluate_impl<T: Real, C: Counter>(x: &[T], p: &FuzzyHeadParams<T>, c: &mut C) -> RuleEvaluation<T> {
    let memberships = memberships_impl(x, p, c);
    let firing = firing_impl(&memberships, p.n_rules, p.n_features, c);
    let consequents = consequents_impl(x, p, c);
    let logits: Vec<T> = firing.iter().zip(&consequents).map(|(w, f)| *w + *f).collect();
    c.tick(p.n_rules as u64);
    let probabilities = softmax_impl(&logits, c);
    RuleEvaluation {
        memberships,
        firing,
        consequents,
        logits,
        probabilities,
    }
}

/// Logits for a row-major batch `B x N_V`, written into `out` (`B x N_C`).
/// Per-sample arithmetic is identical to [`evaluate`].
pub(crate) fn logits_batch<T: Real>(x: &[T], p: &FuzzyHeadParams<T>, out: &mut [T]) {
    let v = p.n_features;
    let c = p.n_rules;
    for (xs, zs) in x.chunks_exact(v).zip(out.chunks_exact_mut(c)) {
        for i in 0..c {
            let row = i * v;
            let mut omega = T::zero();
            for j in 0..v {
                omega = omega + log_member(xs[j], p.mu[row + j], p.beta[row + j]);
            }
            let mut f = T::zero();
            for j in 0..v {
                f = f + p.w[row + j] * xs[j];
            }
            zs[i] = omega + (f + p.b[i]);
        }
    }
}

/// Firing strengths for a row-major batch.
pub(crate) fn firing_batch<T: Real>(x: &[T], p: &FuzzyHeadParams<T>) -> Vec<T> {
    let v = p.n_features;
    let mut out = Vec::with_capacity(x.len() / v * p.n_rules);
    for xs in x.chunks_exact(v) {
        for i in 0..p.n_rules {
            let row = i * v;
            let mut omega = T::zero();
            for j in 0..v {
                omega = omega + log_member(xs[j], p.mu[row + j], p.beta[row + j]);
            }
            out.push(omega);
        }
    }
    out
}

/// Gradients of a scalar loss with respect to the head's inputs and
/// parameters, given `dL/dzeta`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients<T = f32> {
    pub x: Vec<T>,
    pub mu: Vec<T>,
    pub beta: Vec<T>,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> HeadGradients<T> {
    pub(crate) fn zeros(batch: usize, n_rules: usize, n_features: usize) -> Self {
        let cv = n_rules * n_features;
        Self {
            x: vec![T::zero(); batch * n_features],
            mu: vec![T::zero(); cv],
            beta: vec![T::zero(); cv],
            w: vec![T::zero(); cv],
            b: vec![T::zero(); n_rules],
        }
    }
}

/// Closed-form head gradients, contracted with `upstream = dL/dzeta`:
///
/// ```text
/// dzeta_i/dx_j     = -beta_ji (x_j - mu_ji) + W_ji
/// dzeta_i/dmu_ji   =  beta_ji (x_j - mu_ji)
/// dzeta_i/dbeta_ji = -0.5 (x_j - mu_ji)^2
/// dzeta_i/dW_ji    =  x_j
/// dzeta_i/db_i     =  1
/// ```
pub fn analytic_gradients<T: Real>(
    x: &[T],
    params: &FuzzyHeadParams<T>,
    upstream: &[T],
) -> Result<HeadGradients<T>> {
    params.check_input(x)?;
    if upstream.len() != params.n_rules {
        return Err(Error::shape(
            "upstream gradient",
            format!("length {}", params.n_rules),
            &[upstream.len()],
        ));
    }
    let mut grads = HeadGradients::zeros(1, params.n_rules, params.n_features);
    accumulate_gradients(x, params, upstream, &mut grads);
    Ok(grads)
}

/// Batch form: `x` is `B x N_V`, `upstream` is `B x N_C`. Input gradients are
/// written per sample; parameter gradients are summed over the batch in
/// sample order.
pub(crate) fn accumulate_gradients<T: Real>(
    x: &[T],
    p: &FuzzyHeadParams<T>,
    upstream: &[T],
    grads: &mut HeadGradients<T>,
) {
    let v = p.n_features;
    let c = p.n_rules;
    let half = T::from_f64(0.5);
    for (s, (xs, gs)) in x.chunks_exact(v).zip(upstream.chunks_exact(c)).enumerate() {
        let dx = &mut grads.x[s * v..(s + 1) * v];
        for i in 0..c {
            let g = gs[i];
            grads.b[i] = grads.b[i] + g;
            let row = i * v;
            for j in 0..v {
                let k = row + j;
                let d = xs[j] - p.mu[k];
                let bd = p.beta[k] * d;
                dx[j] = dx[j] + g * (p.w[k] - bd);
                grads.mu[k] = grads.mu[k] + g * bd;
                grads.beta[k] = grads.beta[k] - g * (half * (d * d));
                grads.w[k] = grads.w[k] + g * xs[j];
            }
        }
    }
}

/// The same logits assembled from generic tape primitives, for
/// cross-checking [`analytic_gradients`] against reverse-mode
/// differentiation. `x` is `B x N_V`; `mu`, `beta`, `w` are `N_C x N_V`;
/// `b` has length `N_C`.
pub fn logits_from_primitives<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    mu: Var,
    beta: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let batch = tape.value(x).shape()[0];
    let n_rules = tape.value(mu).shape()[0];
    let xs = tape.tile(x, n_rules)?;
    let mus = tape.expand(mu, batch)?;
    let betas = tape.expand(beta, batch)?;
    let d = tape.sub(xs, mus)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.mul(betas, sq)?;
    let m = tape.scale(weighted, T::from_f64(-0.5));
    let omega = tape.sum_last(m)?;
    let wt = tape.transpose(w)?;
    let lin = tape.matmul(x, wt)?;
    let f = tape.add_bias(lin, b)?;
    tape.add(omega, f)
}

/// Parameter tally of the fuzzy head against a dense softmax layer of the
/// same width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub fuzzy: usize,
    pub dense: usize,
    /// Extra parameters from the membership centers and widths.
    pub delta: usize,
}

pub fn parameter_count(n_rules: usize, n_features: usize) -> Result<ParameterCount> {
    if n_rules == 0 || n_features == 0 {
        return Err(Error::Invalid("parameter count needs positive dimensions".into()));
    }
    let cv = n_rules * n_features;
    let fuzzy = 3 * cv + n_rules;
    let dense = cv + n_rules;
    Ok(ParameterCount {
        fuzzy,
        dense,
        delta: fuzzy - dense,
    })
}

/// Renders the rule base as text, one block per rule:
///
/// ```text
/// RULE 0
///   IF f_1(x) is M_0,1 [mu=..., beta=..., w=...]
///   AND f_2(x) is M_0,2 [mu=..., beta=..., w=...]
///   THEN log P(c_0|x) = zeta_0 - logsumexp(zeta)
///   WITH zeta_0 = sum_j -0.5*beta_j*(f_j(x)-mu_j)^2 + sum_j w_j*f_j(x) + b, b=...
/// END
/// ```
///
/// Numbers carry nine significant digits, enough to recover every `f32`
/// parameter exactly.
pub fn render_rules<T: Real>(params: &FuzzyHeadParams<T>, feature_names: Option<&[String]>) -> String {
    let v = params.n_features;
    let mut out = String::new();
    for k in 0..params.n_rules {
        let _ = writeln!(out, "RULE {k}");
        for j in 0..v {
            let idx = k * v + j;
            let name = match feature_names.and_then(|n| n.get(j)) {
                Some(n) => n.clone(),
                None => format!("f_{}(x)", j + 1),
            };
            let _ = writeln!(
                out,
                "  {} {name} is M_{k},{} [mu={:.8e}, beta={:.8e}, w={:.8e}]",
                if j == 0 { "IF" } else { "AND" },
                j + 1,
                params.mu[idx].as_f64(),
                params.beta[idx].as_f64(),
                params.w[idx].as_f64(),
            );
        }
        let _ = writeln!(out, "  THEN log P(c_{k}|x) = zeta_{k} - logsumexp(zeta)");
        let _ = writeln!(
            out,
            "  WITH zeta_{k} = sum_j -0.5*beta_j*(f_j(x)-mu_j)^2 + sum_j w_j*f_j(x) + b, b={:.8e}",
            params.b[k].as_f64()
        );
        let _ = writeln!(out, "END");
    }
    out
}

/// One rule recovered from [`render_rules`] output.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRule {
    pub rule: usize,
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

pub fn parse_rules(text: &str) -> Result<Vec<ParsedRule>> {
    let bad = |line: usize, msg: &str| Error::Config {
        line,
        message: format!("rule text: {msg}"),
    };
    let mut rules = Vec::new();
    let mut current: Option<ParsedRule> = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(id) = line.strip_prefix("RULE ") {
            if current.is_some() {
                return Err(bad(line_no, "RULE before END"));
            }
            let rule = id.trim().parse().map_err(|_| bad(line_no, "bad rule index"))?;
            current = Some(ParsedRule {
                rule,
                mu: Vec::new(),
                beta: Vec::new(),
                w: Vec::new(),
                b: f64::NAN,
            });
        } else if line == "END" {
            let rule = current.take().ok_or_else(|| bad(line_no, "END without RULE"))?;
            if rule.b.is_nan() {
                return Err(bad(line_no, "rule without bias"));
            }
            rules.push(rule);
        } else if line.starts_with("IF ") || line.starts_with("AND ") {
            let rule = current.as_mut().ok_or_else(|| bad(line_no, "clause outside rule"))?;
            let open = line.rfind('[').ok_or_else(|| bad(line_no, "missing '['"))?;
            let body = line[open + 1..]
                .strip_suffix(']')
                .ok_or_else(|| bad(line_no, "missing ']'"))?;
            let mut fields = [f64::NAN; 3];
            for part in body.split(',') {
                let (key, value) = part
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| bad(line_no, "expected key=value"))?;
                let slot = match key {
                    "mu" => 0,
                    "beta" => 1,
                    "w" => 2,
                    _ => return Err(bad(line_no, "unknown clause field")),
                };
                fields[slot] = value.parse().map_err(|_| bad(line_no, "bad number"))?;
            }
            if fields.iter().any(|f| f.is_nan()) {
                return Err(bad(line_no, "clause missing a field"));
            }
            rule.mu.push(fields[0]);
            rule.beta.push(fields[1]);
            rule.w.push(fields[2]);
        } else if line.starts_with("WITH ") {
            let rule = current.as_mut().ok_or_else(|| bad(line_no, "WITH outside rule"))?;
            let value = line
                .rsplit_once("b=")
                .ok_or_else(|| bad(line_no, "missing bias"))?
                .1;
            rule.b = value.parse().map_err(|_| bad(line_no, "bad bias"))?;
        } else if !line.starts_with("THEN ") {
            return Err(bad(line_no, "unrecognised line"));
        }
    }
    if current.is_some() {
        return Err(bad(text.lines().count(), "unterminated rule"));
    }
    Ok(rules)
}

/// Reassembles head parameters from parsed rules.
pub fn params_from_rules(rules: &[ParsedRule]) -> Result<FuzzyHeadParams<f64>> {
    let n_features = rules.first().map_or(0, |r| r.mu.len());
    let mut mu = Vec::new();
    let mut beta = Vec::new();
    let mut w = Vec::new();
    let mut b = Vec::new();
    for (k, r) in rules.iter().enumerate() {
        if r.rule != k || r.mu.len() != n_features {
            return Err(Error::Invalid(format!("rule {k} is out of order or ragged")));
        }
        mu.extend_from_slice(&r.mu);
        beta.extend_from_slice(&r.beta);
        w.extend_from_slice(&r.w);
        b.push(r.b);
    }
    FuzzyHeadParams::new(rules.len(), n_features, mu, beta, w, b)
}

/// Copies head parameters into `[N_C, N_V]` / `[N_C]` tensors.
pub fn param_tensors<T: Real>(p: &FuzzyHeadParams<T>) -> [Tensor<T>; 4] {
    let (c, v) = (p.n_rules, p.n_features);
    let mat = |d: &Vec<T>| Tensor::new(vec![c, v], d.clone()).expect("validated dims");
    [
        mat(&p.mu),
        mat(&p.beta),
        mat(&p.w),
        Tensor::new(vec![c], p.b.clone()).expect("validated dims"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mu: f64, beta: f64, w: f64, b: f64) -> FuzzyHeadParams<f64> {
        FuzzyHeadParams::new(1, 1, vec![mu], vec![beta], vec![w], vec![b]).unwrap()
    }

    #[test]
    fn membership_is_zero_at_center() {
        let p = single(0.7, 3.0, 0.0, 0.0);
        assert_eq!(log_membership(&[0.7], &p).unwrap(), vec![0.0]);
    }

    #[test]
    fn membership_direct_substitution() {
        let p = single(1.0, 2.0, 0.0, 0.0);
        assert_eq!(log_membership(&[2.0], &p).unwrap(), vec![-1.0]);
    }

    #[test]
    fn membership_rejects_wrong_width() {
        let p = single(0.0, 1.0, 0.0, 0.0);
        assert!(log_membership(&[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn firing_sums_rows() {
        assert_eq!(rule_firing(&[0.0; 6], 2, 3).unwrap(), vec![0.0, 0.0]);
        assert_eq!(rule_firing(&[-1.0, -0.5, -0.25], 1, 3).unwrap(), vec![-1.75]);
        assert!(rule_firing(&[0.0; 5], 2, 3).is_err());
    }

    #[test]
    fn logits_with_zero_consequent_equal_firing() {
        let p = FuzzyHeadParams::new(2, 2, vec![0.0; 4], vec![1.0; 4], vec![0.0; 4], vec![0.0; 2]).unwrap();
        let omega = [-0.3, -2.0];
        assert_eq!(logits(&[0.5, 0.25], &omega, &p).unwrap(), omega.to_vec());
    }

    #[test]
    fn logits_arithmetic() {
        let p = FuzzyHeadParams::new(1, 2, vec![0.0; 2], vec![1.0; 2], vec![0.25, 0.75], vec![0.5]).unwrap();
        assert_eq!(logits(&[1.0, 1.0], &[0.0], &p).unwrap(), vec![1.5]);
    }

    #[test]
    fn softmax_closed_forms() {
        let y = class_probabilities(&[2.0f64; 4]);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let y = class_probabilities(&[0.0f64, 3f64.ln()]);
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_at_center() {
        let p = single(0.4, 2.5, 0.3, 0.0);
        let g = analytic_gradients(&[0.4], &p, &[1.0]).unwrap();
        assert_eq!(g.mu, vec![0.0]);
        assert_eq!(g.x, vec![0.3]);
    }

    #[test]
    fn gradient_substitution() {
        let p = single(0.0, 1.0, 0.5, 0.0);
        let g = analytic_gradients(&[2.0], &p, &[1.0]).unwrap();
        assert_eq!(g.x, vec![-1.5]);
        assert_eq!(g.beta, vec![-2.0]);
        assert_eq!(g.w, vec![2.0]);
        assert_eq!(g.b, vec![1.0]);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(10, 84).unwrap().delta, 1680);
        assert_eq!(parameter_count(10, 256).unwrap().delta, 5120);
        assert_eq!(parameter_count(1, 1).unwrap().fuzzy, 4);
        assert!(parameter_count(0, 3).is_err());
    }

    #[test]
    fn rule_counts() {
        let p = FuzzyHeadParams::new(2, 1, vec![0.1, 0.2], vec![1.0, 2.0], vec![0.0; 2], vec![0.0; 2]).unwrap();
        let text = render_rules(&p, None);
        let rules = parse_rules(&text).unwrap();
        assert_eq!(rules.len(), 2);
        assert!(rules.iter().all(|r| r.mu.len() == 1));
        assert_eq!(text.matches("RULE ").count(), 2);
    }

    #[test]
    fn rule_text_uses_feature_names() {
        let p = FuzzyHeadParams::new(1, 2, vec![0.0; 2], vec![1.0; 2], vec![0.0; 2], vec![0.0]).unwrap();
        let names = vec!["edge".to_string(), "blob".to_string()];
        let text = render_rules(&p, Some(&names));
        assert!(text.contains("IF edge is M_0,1"));
        assert!(text.contains("AND blob is M_0,2"));
    }

    #[test]
    fn negative_beta_is_counted() {
        let p = FuzzyHeadParams::new(1, 3, vec![0.0; 3], vec![1.0, -0.5, -2.0], vec![0.0; 3], vec![0.0]).unwrap();
        assert_eq!(p.negative_beta_count(), 2);
        // inverted bowl: membership above zero away from the center
        assert!(log_membership(&[0.0, 1.0, 0.0], &p).unwrap()[1] > 0.0);
    }

    #[test]
    fn non_finite_params_rejected() {
        assert!(FuzzyHeadParams::new(1, 1, vec![f64::NAN], vec![1.0], vec![0.0], vec![0.0]).is_err());
    }
}
