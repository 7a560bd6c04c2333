//! Convolutional base plus fuzzy head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, Mode};
use crate::error::{Error, Result};
use crate::fuzzy::{self, FuzzyHeadParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const HEAD_PARAM_NAMES: [&str; 4] = ["head.mu", "head.beta", "head.w", "head.b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Dcnfis<T = f32> {
    pub backbone: Backbone<T>,
    pub head: FuzzyHeadParams<T>,
}

/// Tape variables of one forward pass.
pub struct ModelForward<T> {
    pub input: Var,
    pub features: Var,
    pub logits: Var,
    /// Every parameter bound on the tape, backbone first, then the head in
    /// the order of [`HEAD_PARAM_NAMES`].
    pub params: Vec<(String, Var)>,
    pub trace: Vec<(Var, Var)>,
    pub norm_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

impl Dcnfis<f32> {
    /// Backbone and head drawn from one seeded stream, backbone first.
    pub fn new(config: BackboneConfig, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::build_with(config, &mut rng)?;
        let head = FuzzyHeadParams::init(n_classes, backbone.feature_width(), &mut rng)?;
        Ok(Self { backbone, head })
    }
}

impl<T: Real> Dcnfis<T> {
    pub fn from_parts(backbone: Backbone<T>, head: FuzzyHeadParams<T>) -> Result<Self> {
        if head.n_features() != backbone.feature_width() {
            return Err(Error::Invalid(format!(
                "head expects {} features but the backbone emits {}",
                head.n_features(),
                backbone.feature_width()
            )));
        }
        Ok(Self { backbone, head })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_rules()
    }

    /// Records the full network on `tape`. With `trainable`, every
    /// parameter becomes a gradient-requiring leaf.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode, trainable: bool) -> Result<ModelForward<T>> {
        let bb = self.backbone.forward(tape, input, mode, trainable)?;
        let mut params = bb.params;
        let [mu, beta, w, b] = fuzzy::param_tensors(&self.head);
        let mut vars = Vec::with_capacity(4);
        for (name, t) in HEAD_PARAM_NAMES.iter().zip([mu, beta, w, b]) {
            let v = if trainable { tape.param(t) } else { tape.constant(t) };
            if trainable {
                params.push((name.to_string(), v));
            }
            vars.push(v);
        }
        let logits = tape.fuzzy_logits(bb.features, vars[0], vars[1], vars[2], vars[3])?;
        Ok(ModelForward {
            input,
            features: bb.features,
            logits,
            params,
            trace: bb.trace,
            norm_stats: bb.norm_stats,
        })
    }

    /// Features and logits for a batch in inference mode.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let fwd = self.forward(&mut tape, x, Mode::Eval, false)?;
        let logits = tape.value(fwd.logits).clone();
        if !logits.all_finite() {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok((tape.value(fwd.features).clone(), logits))
    }

    /// Mutable views of every trainable parameter, in the same order as
    /// [`ModelForward::params`] for a trainable pass.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = self
            .backbone
            .params_mut()
            .into_iter()
            .map(|(n, t)| (n, t.data_mut()))
            .collect();
        let h = &mut self.head;
        for (name, v) in HEAD_PARAM_NAMES.iter().zip([&mut h.mu, &mut h.beta, &mut h.w, &mut h.b]) {
            out.push((name.to_string(), v.as_mut_slice()));
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.backbone.params().iter().map(|(_, t)| t.len()).collect();
        sizes.extend([self.head.mu.len(), self.head.beta.len(), self.head.w.len(), self.head.b.len()]);
        sizes
    }

    pub fn all_finite(&self) -> bool {
        self.head.all_finite() && self.backbone.all_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> Dcnfis<U> {
        Dcnfis {
            backbone: self.backbone.cast(),
            head: self.head.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_construction_is_reproducible() {
        let a = Dcnfis::new(BackboneConfig::lenet(), 10, 5).unwrap();
        let b = Dcnfis::new(BackboneConfig::lenet(), 10, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.head.n_features(), 256);
        assert_eq!(a.n_classes(), 10);
    }

    #[test]
    fn trainable_params_align_with_views() {
        let mut m = Dcnfis::new(BackboneConfig::lenet(), 3, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 28, 28]));
        let fwd = m.forward(&mut tape, x, Mode::Train, true).unwrap();
        let names: Vec<String> = fwd.params.iter().map(|(n, _)| n.clone()).collect();
        let views: Vec<(String, usize)> = m.params_mut().into_iter().map(|(n, v)| (n, v.len())).collect();
        assert_eq!(names, views.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
        for ((_, var), (_, len)) in fwd.params.iter().zip(&views) {
            assert_eq!(tape.value(*var).len(), *len);
        }
        assert_eq!(tape.value(fwd.logits).shape(), &[2, 3]);
    }

    #[test]
    fn infer_matches_head_evaluate() {
        let m = Dcnfis::new(BackboneConfig::lenet(), 4, 2).unwrap();
        let data: Vec<f32> = (0..784).map(|i| ((i * 31) % 255) as f32 / 255.0).collect();
        let (f, z) = m.infer(&Tensor::new(vec![1, 1, 28, 28], data).unwrap()).unwrap();
        let ev = fuzzy::evaluate(f.data(), &m.head).unwrap();
        assert_eq!(ev.logits.as_slice(), z.data());
    }
}
