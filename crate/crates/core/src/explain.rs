//! Rule clusters, medoids and saliency maps.
//!
//! Each rule of the fuzzy head defines a cluster: a sample belongs to the
//! rule with the largest log firing strength. A cluster is represented by
//! its medoid in backbone feature space, and medoids are explained with
//! guided-backpropagation saliency maps.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::fuzzy;
use crate::image;
use crate::model::Dcnfis;
use crate::tape::{BackwardMode, Tape};
use crate::tensor::{Real, Tensor};
use crate::util::argmax;

/// Largest cluster scored exhaustively; bigger ones are subsampled.
pub const MEDOID_CAP: usize = 6000;
const BATCH: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub n_rules: usize,
    /// Winning rule per sample.
    pub winners: Vec<usize>,
    /// Row-major `N x N_C` log firing strengths.
    pub firing: Vec<f32>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_rules];
        for &w in &self.winners {
            s[w] += 1;
        }
        s
    }

    pub fn members(&self, rule: usize) -> Vec<usize> {
        self.winners.iter().enumerate().filter(|(_, &w)| w == rule).map(|(i, _)| i).collect()
    }
}

/// Argmax of each firing row; ties go to the lowest rule index.
pub fn harden_firing<T: Real>(firing: &[T], n_rules: usize) -> Result<Vec<usize>> {
    if n_rules == 0 || firing.len() % n_rules != 0 {
        return Err(Error::shape("firing strengths", format!("rows of {n_rules}"), &[firing.len()]));
    }
    Ok(firing.chunks_exact(n_rules).map(argmax).collect())
}

/// Features, firing strengths and class predictions for every sample.
#[derive(Clone, Debug)]
pub struct SplitInference {
    pub n_features: usize,
    /// Row-major `N x N_V`.
    pub features: Vec<f32>,
    pub assignment: ClusterAssignment,
    pub predictions: Vec<usize>,
}

pub fn infer_split(model: &Dcnfis, split: &Split) -> Result<SplitInference> {
    if split.is_empty() {
        return Err(Error::Invalid("split is empty".into()));
    }
    let c = model.n_classes();
    let v = model.backbone.feature_width();
    let mut features = Vec::with_capacity(split.len() * v);
    let mut firing = Vec::with_capacity(split.len() * c);
    let mut predictions = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(BATCH) {
        let (f, z) = model.infer(&split.batch(chunk)?)?;
        firing.extend(fuzzy::firing_batch(f.data(), &model.head));
        predictions.extend(z.data().chunks_exact(c).map(argmax));
        features.extend_from_slice(f.data());
    }
    let winners = harden_firing(&firing, c)?;
    Ok(SplitInference {
        n_features: v,
        features,
        assignment: ClusterAssignment { n_rules: c, winners, firing },
        predictions,
    })
}

/// Cluster assignment of every sample in `split`.
pub fn harden(model: &Dcnfis, split: &Split) -> Result<ClusterAssignment> {
    Ok(infer_split(model, split)?.assignment)
}

/// Euclidean distance, accumulated in `f64` in index order.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Member with the smallest summed distance to all other members, and that
/// sum. `rows` indexes into `features` (`N x dim`). Each pair distance is
/// computed once; per-member sums are accumulated in increasing member
/// order. Ties go to the earliest member.
pub fn medoid_of(rows: &[usize], features: &[f32], dim: usize) -> Option<(usize, f64)> {
    let n = rows.len();
    if n == 0 {
        return None;
    }
    let row = |i: usize| &features[rows[i] * dim..(rows[i] + 1) * dim];
    let mut sums = vec![0.0f64; n];
    for i in 0..n {
        let a = row(i);
        for j in i + 1..n {
            let d = euclidean(a, row(j));
            sums[i] += d;
            sums[j] += d;
        }
    }
    let best = (0..n).fold(0, |b, i| if sums[i] < sums[b] { i } else { b });
    Some((rows[best], sums[best]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleMedoid {
    pub rule: usize,
    pub members: usize,
    /// Number of members scored, below `members` when subsampled.
    pub scored: usize,
    /// `None` for a rule that wins no samples.
    pub medoid: Option<usize>,
    pub distance_sum: Option<f64>,
    pub feature: Option<Vec<f32>>,
    pub image: Option<Vec<f32>>,
}

/// Medoid per rule. Serialized as JSON:
///
/// ```text
/// { "metric": "euclidean", "cap": 6000, "seed": 0,
///   "rules": [ { "rule": 0, "members": 5980, "scored": 5980, "medoid": 123,
///                "distance_sum": 1.2e4, "feature": [..], "image": [..] }, .. ] }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedoidReport {
    pub metric: String,
    pub cap: usize,
    pub seed: u64,
    pub rules: Vec<RuleMedoid>,
}

impl MedoidReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Medoids of every rule cluster. Clusters with more than `cap` members are
/// scored on a uniform subsample drawn from `seed` (stream = rule index).
pub fn medoids(assignment: &ClusterAssignment, features: &[f32], dim: usize, cap: usize, seed: u64) -> Result<MedoidReport> {
    if dim == 0 || features.len() != assignment.winners.len() * dim {
        return Err(Error::shape(
            "medoid features",
            format!("{} rows of {dim}", assignment.winners.len()),
            &[features.len()],
        ));
    }
    if cap == 0 {
        return Err(Error::Invalid("medoid cap must be positive".into()));
    }
    let mut rules = Vec::with_capacity(assignment.n_rules);
    for rule in 0..assignment.n_rules {
        let members = assignment.members(rule);
        let scored: Vec<usize> = if members.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rule as u64);
            let mut picks = rand::seq::index::sample(&mut rng, members.len(), cap).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| members[i]).collect()
        } else {
            members.clone()
        };
        let found = medoid_of(&scored, features, dim);
        rules.push(RuleMedoid {
            rule,
            members: members.len(),
            scored: scored.len(),
            medoid: found.map(|(m, _)| m),
            distance_sum: found.map(|(_, s)| s),
            feature: found.map(|(m, _)| features[m * dim..(m + 1) * dim].to_vec()),
            image: None,
        });
    }
    Ok(MedoidReport { metric: "euclidean".into(), cap, seed, rules })
}

/// Hardens `split`, finds medoids and attaches their images.
pub fn medoid_report(model: &Dcnfis, split: &Split, cap: usize, seed: u64) -> Result<MedoidReport> {
    let inf = infer_split(model, split)?;
    let mut report = medoids(&inf.assignment, &inf.features, inf.n_features, cap, seed)?;
    for r in &mut report.rules {
        r.image = r.medoid.map(|m| split.image(m).to_vec());
    }
    Ok(report)
}

/// Scalar the saliency map is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// A fixed rule (equivalently, class) index.
    Rule(usize),
    /// The rule with the largest firing strength for this input.
    WinningRule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Quantity {
    /// The logit `zeta_k`.
    #[default]
    Logit,
    /// The softmax probability `y_k`.
    Probability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T = f32> {
    /// Same shape as the input image.
    pub values: Tensor<T>,
    pub max_abs: f64,
    pub rule: usize,
}

impl SaliencyMap<f32> {
    pub fn render(&self) -> Vec<u8> {
        image::render_signed(self.values.data())
    }
}

/// Input gradient of the target scalar for one `1 x C x H x W` image.
/// [`BackwardMode::Guided`] gives guided backpropagation;
/// [`BackwardMode::Standard`] the plain gradient.
pub fn saliency<T: Real>(
    model: &Dcnfis<T>,
    input: &Tensor<T>,
    target: Target,
    quantity: Quantity,
    mode: BackwardMode,
) -> Result<SaliencyMap<T>> {
    model.backbone.check_batch_shape(input.shape())?;
    if input.shape()[0] != 1 {
        return Err(Error::shape("saliency input", "a single image [1, C, H, W]", input.shape()));
    }
    let c = model.n_classes();
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().requires_grad(true));
    let fwd = model.forward(&mut tape, x, Mode::Eval, false)?;
    let rule = match target {
        Target::Rule(k) if k < c => k,
        Target::Rule(k) => return Err(Error::Invalid(format!("target rule {k} out of range for {c} rules"))),
        Target::WinningRule => {
            let f = tape.value(fwd.features).data();
            argmax(&fuzzy::firing_batch(f, &model.head))
        }
    };
    let out = match quantity {
        Quantity::Logit => fwd.logits,
        Quantity::Probability => tape.softmax(fwd.logits)?,
    };
    let mut seed = vec![T::zero(); c];
    seed[rule] = T::one();
    tape.backward_from(out, &seed, mode)?;
    let values = tape.grad(x).unwrap_or_else(|| Tensor::zeros(input.shape()));
    let max_abs = values.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    Ok(SaliencyMap { values, max_abs, rule })
}

pub fn guided_backprop<T: Real>(model: &Dcnfis<T>, input: &Tensor<T>, target: Target, quantity: Quantity) -> Result<SaliencyMap<T>> {
    saliency(model, input, target, quantity, BackwardMode::Guided)
}

/// Two saliency maps, each scaled by its own max |value|.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    /// `a_n + b_n`, rescaled to max |value| = 1.
    pub combined: Vec<f32>,
    /// `a_n - b_n`.
    pub difference: Vec<f32>,
}

fn unit_scale(v: &[f32]) -> Vec<f32> {
    let m = image::max_abs(v);
    v.iter().map(|x| if m > 0.0 { x / m } else { 0.0 }).collect()
}

pub fn overlay(a: &[f32], b: &[f32]) -> Result<Overlay> {
    if a.len() != b.len() {
        return Err(Error::shape("overlay maps", format!("{} values", a.len()), &[b.len()]));
    }
    let (an, bn) = (unit_scale(a), unit_scale(b));
    let sum: Vec<f32> = an.iter().zip(&bn).map(|(x, y)| x + y).collect();
    Ok(Overlay {
        combined: unit_scale(&sum),
        difference: an.iter().zip(&bn).map(|(x, y)| x - y).collect(),
    })
}

/// One misclassification row: sample, its saliency, the saliency of the
/// medoid of the true label's rule, their overlay, the saliency of the
/// predicted rule's medoid, and that overlay.
#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub sample: usize,
    pub label: usize,
    pub predicted: usize,
    /// Six `H x W` panels in display order.
    pub panels: [Vec<f32>; 6],
}

pub const ROW_GAP: usize = 2;

impl ComparisonRow {
    /// Panels side by side; the first is min-max scaled, the rest use the
    /// signed encoding. Returns `(width, pixels)`.
    pub fn render(&self, rows: usize, cols: usize) -> (usize, Vec<u8>) {
        let width = 6 * cols + 5 * ROW_GAP;
        let mut out = vec![255u8; width * rows];
        for (p, panel) in self.panels.iter().enumerate() {
            let tile = if p == 0 { image::render_minmax(panel) } else { image::render_signed(panel) };
            let x0 = p * (cols + ROW_GAP);
            for r in 0..rows {
                out[r * width + x0..r * width + x0 + cols].copy_from_slice(&tile[r * cols..(r + 1) * cols]);
            }
        }
        (width, out)
    }
}

/// Saliency of each rule's medoid image, `None` for empty rules.
pub fn medoid_saliencies(model: &Dcnfis, report: &MedoidReport, split: &Split, quantity: Quantity) -> Result<Vec<Option<SaliencyMap>>> {
    report
        .rules
        .iter()
        .map(|r| {
            r.medoid
                .map(|m| guided_backprop(model, &split.batch(&[m])?, Target::Rule(r.rule), quantity))
                .transpose()
        })
        .collect()
}

pub fn comparison_row(
    model: &Dcnfis,
    split: &Split,
    sample: usize,
    medoid_maps: &[Option<SaliencyMap>],
    quantity: Quantity,
) -> Result<ComparisonRow> {
    if sample >= split.len() {
        return Err(Error::Invalid(format!("sample {sample} out of range for {} samples", split.len())));
    }
    let input = split.batch(&[sample])?;
    let (_, logits) = model.infer(&input)?;
    let predicted = argmax(logits.data());
    let label = split.labels[sample] as usize;
    let own = guided_backprop(model, &input, Target::WinningRule, quantity)?;
    let blank = vec![0.0f32; split.pixels()];
    let map_of = |k: usize| -> Vec<f32> {
        medoid_maps
            .get(k)
            .and_then(|m| m.as_ref())
            .map_or_else(|| blank.clone(), |m| m.values.data().to_vec())
    };
    let (lm, pm) = (map_of(label), map_of(predicted));
    let s = own.values.into_data();
    let ol = overlay(&s, &lm)?.combined;
    let op = overlay(&s, &pm)?.combined;
    Ok(ComparisonRow {
        sample,
        label,
        predicted,
        panels: [split.image(sample).to_vec(), s, lm, ol, pm, op],
    })
}

/// Indices of the first `k` misclassified samples.
pub fn misclassified(model: &Dcnfis, split: &Split, k: usize) -> Result<Vec<usize>> {
    let inf = infer_split(model, split)?;
    Ok(inf
        .predictions
        .iter()
        .zip(&split.labels)
        .enumerate()
        .filter(|(_, (p, l))| **p != **l as usize)
        .map(|(i, _)| i)
        .take(k)
        .collect())
}

/// Per-pixel train mean with its min-max rendering.
pub fn mean_image(split: &Split) -> Result<(Vec<f32>, Vec<u8>)> {
    let mean = data::mean_image(split)?;
    let rendered = image::render_minmax(&mean);
    Ok((mean, rendered))
}

/// CSV of `sample_id,label,predicted_rule,f_1..f_N`, one row per sample.
pub fn export_features(model: &Dcnfis, split: &Split) -> Result<String> {
    let inf = infer_split(model, split)?;
    let v = inf.n_features;
    let mut out = String::from("sample_id,label,predicted_rule");
    for j in 1..=v {
        write!(out, ",f_{j}").unwrap();
    }
    out.push('\n');
    for (i, f) in inf.features.chunks_exact(v).enumerate() {
        write!(out, "{i},{},{}", split.labels[i], inf.assignment.winners[i]).unwrap();
        for x in f {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
