//! The trainable stack used by the harness: token embedding, one multi-head
//! GAM layer (optionally with the relative-position branch and a residual
//! connection) and a linear vocabulary head.
//!
//! Parameters live in a flat [`ParamSet`] so the same values can drive the
//! plain forward pass (used for evaluation and as the finite-difference
//! oracle) and the taped forward pass that produces analytic gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_with_probs, Coeffs, Tape, Var};
use crate::baseline::{BaselineHeadParams, InputSequence};
use crate::error::{GamError, Result};
use crate::gam::{gam_forward, gam_forward_detailed, FeatureMap, GamHead, GamHeadParams, GamModelConfig, MixtureSpec};
use crate::position::{
    build_r, position_features, CombinationSpec, PosBranchParams, PositionTransform, TokenWithLocation,
};
use crate::rng::{gaussian, rng_from_seed, Rng};
use crate::tensor::{GradResult, Mask, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    FixedUniform,
    LearnedSimplex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationKind {
    Linear,
    Geometric,
}

fn yes() -> bool {
    true
}

fn half() -> f64 {
    0.5
}

/// Relative-position branch settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionSpec {
    pub enabled: bool,
    /// Longest sequence the position embedding accepts.
    pub n_max: usize,
    #[serde(default)]
    pub transform: PositionTransform,
    pub combination: CombinationKind,
    /// Initial `c1` for the linear combination.
    #[serde(default = "half")]
    pub c1: f64,
    #[serde(default = "yes")]
    pub learn_c1: bool,
    /// Reuse the content head's value matrix.
    #[serde(default = "yes")]
    pub shared_wv: bool,
    /// Ignore corpus locations and treat every sequence as contiguous.
    #[serde(default)]
    pub force_contiguous: bool,
}

impl Default for PositionSpec {
    fn default() -> Self {
        PositionSpec {
            enabled: false,
            n_max: 16,
            transform: PositionTransform::Log1p,
            combination: CombinationKind::Linear,
            c1: 0.5,
            learn_c1: true,
            shared_wv: true,
            force_contiguous: false,
        }
    }
}

/// Architecture of the GAM layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Head count `h`.
    pub heads: usize,
    /// Model width `M`.
    pub width: usize,
    /// Value width `M_v`.
    pub value_width: usize,
    /// Key width used when initializing brains from a query/key pair.
    pub d_k: usize,
    /// Brains per head, `N_B`.
    pub brains: usize,
    /// Feature map; polynomial coefficients are the initial values.
    pub fmap: FeatureMap,
    pub mixture: MixtureMode,
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub position: PositionSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("heads", self.heads),
            ("width", self.width),
            ("value_width", self.value_width),
            ("d_k", self.d_k),
            ("brains", self.brains),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GamError::Config(format!("model.{name} must be at least 1")));
        }
        self.fmap.validate()?;
        if self.position.enabled {
            if self.position.n_max == 0 {
                return Err(GamError::Config("model.position.n_max must be at least 1".into()));
            }
            if self.position.combination == CombinationKind::Linear {
                CombinationSpec::Linear { c1: self.position.c1 }.validate()?;
            }
        }
        Ok(())
    }
}

/// Parameter group of a parameter name: head and brain indices removed.
pub fn param_group(name: &str) -> String {
    let rest = match name.strip_prefix("head") {
        Some(r) => r.trim_start_matches(|c: char| c.is_ascii_digit()).trim_start_matches('.'),
        None => name,
    };
    match rest.rfind("brain") {
        Some(i) if rest[i + 5..].chars().all(|c| c.is_ascii_digit()) => rest[..i + 5].to_owned(),
        _ => rest.to_owned(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One training or evaluation sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenWithLocation>,
    pub targets: Vec<usize>,
}

/// Anything that maps a token sequence to `n × V` logits.
pub trait LogitModel {
    fn logits(&self, tokens: &[TokenWithLocation]) -> Result<Tensor>;
}

/// Embedding → GAM layer → vocabulary head.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub spec: ModelSpec,
    pub vocab: usize,
}

impl LanguageModel {
    pub fn new(spec: ModelSpec, vocab: usize) -> Result<Self> {
        spec.validate()?;
        if vocab == 0 {
            return Err(GamError::Config("vocabulary must be non-empty".into()));
        }
        Ok(LanguageModel { spec, vocab })
    }

    fn head_prefix(a: usize) -> String {
        format!("head{a}")
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let s = &self.spec;
        let (m, mv, nb) = (s.width, s.value_width, s.brains);
        let mut rng = rng_from_seed(seed);
        let mut p = ParamSet::new();
        p.insert("embedding", gaussian(&mut rng, &[self.vocab, m], 1.0))?;
        for a in 0..s.heads {
            let h = Self::head_prefix(a);
            for i in 0..nb {
                p.insert(format!("{h}.brain{i}"), init_brain(&mut rng, m, s.d_k))?;
            }
            p.insert(format!("{h}.w_v"), gaussian(&mut rng, &[m, mv], 1.0 / (m as f64).sqrt()))?;
            if s.mixture == MixtureMode::LearnedSimplex {
                p.insert(format!("{h}.mixture_logits"), Tensor::zeros(&[nb]))?;
            }
            if let FeatureMap::Polynomial { coeffs } = &s.fmap {
                p.insert(format!("{h}.coeffs"), Tensor::vector(coeffs.clone())?)?;
            }
            if s.position.enabled {
                let pos = &s.position;
                let scale = 1.0 / (pos.n_max as f64).sqrt();
                p.insert(format!("{h}.pos.embed"), gaussian(&mut rng, &[pos.n_max, m], scale))?;
                for i in 0..nb {
                    p.insert(format!("{h}.pos.brain{i}"), init_brain(&mut rng, m, s.d_k))?;
                }
                if s.mixture == MixtureMode::LearnedSimplex {
                    p.insert(format!("{h}.pos.mixture_logits"), Tensor::zeros(&[nb]))?;
                }
                if let FeatureMap::Polynomial { coeffs } = &s.fmap {
                    p.insert(format!("{h}.pos.coeffs"), Tensor::vector(coeffs.clone())?)?;
                }
                if pos.combination == CombinationKind::Linear && pos.learn_c1 {
                    p.insert(format!("{h}.pos.c1_logit"), Tensor::scalar(logit(pos.c1)))?;
                }
                if !pos.shared_wv {
                    p.insert(format!("{h}.pos.w_v"), gaussian(&mut rng, &[m, mv], 1.0 / (m as f64).sqrt()))?;
                }
            }
        }
        let hv = s.heads * mv;
        p.insert("output_proj", gaussian(&mut rng, &[hv, m], 1.0 / (hv as f64).sqrt()))?;
        // small readout so the first predictions are close to uniform
        p.insert("unembed", gaussian(&mut rng, &[m, self.vocab], 0.1 / (m as f64).sqrt()))?;
        Ok(p)
    }

    /// Checks that `params` has exactly the layout this architecture expects.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.init_params(0)?;
        if !expected.same_layout(params) {
            let names: Vec<&str> = params.names().collect();
            return Err(GamError::Config(format!(
                "parameter layout does not match the model (got {names:?})"
            )));
        }
        Ok(())
    }

    fn fmap_from(&self, params: &ParamSet, name: &str) -> Result<FeatureMap> {
        Ok(match &self.spec.fmap {
            FeatureMap::PowerLaw { n1 } => FeatureMap::PowerLaw { n1: *n1 },
            FeatureMap::Polynomial { .. } => FeatureMap::Polynomial { coeffs: params.expect(name)?.data().to_vec() },
        })
    }

    fn mixture_from(&self, params: &ParamSet, name: &str) -> Result<MixtureSpec> {
        Ok(match self.spec.mixture {
            MixtureMode::FixedUniform => MixtureSpec::FixedUniform { n_b: self.spec.brains },
            MixtureMode::LearnedSimplex => MixtureSpec::LearnedSimplex { logits: params.expect(name)?.data().to_vec() },
        })
    }

    /// The GAM layer as plain parameter structs.
    pub fn gam_config(&self, params: &ParamSet) -> Result<GamModelConfig> {
        let s = &self.spec;
        let mut heads = Vec::with_capacity(s.heads);
        for a in 0..s.heads {
            let h = Self::head_prefix(a);
            let brains = (0..s.brains)
                .map(|i| params.expect(&format!("{h}.brain{i}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            let content = GamHeadParams {
                brains,
                w_v: params.expect(&format!("{h}.w_v"))?.clone(),
                mixture: self.mixture_from(params, &format!("{h}.mixture_logits"))?,
                fmap: self.fmap_from(params, &format!("{h}.coeffs"))?,
            };
            let position = if s.position.enabled {
                let pos = &s.position;
                let combination = match pos.combination {
                    CombinationKind::Geometric => CombinationSpec::Geometric,
                    CombinationKind::Linear if pos.learn_c1 => CombinationSpec::Linear {
                        c1: sigmoid(params.expect(&format!("{h}.pos.c1_logit"))?.value()),
                    },
                    CombinationKind::Linear => CombinationSpec::Linear { c1: pos.c1 },
                };
                Some(PosBranchParams {
                    embed: params.expect(&format!("{h}.pos.embed"))?.clone(),
                    brains_p: (0..s.brains)
                        .map(|i| params.expect(&format!("{h}.pos.brain{i}")).cloned())
                        .collect::<Result<Vec<_>>>()?,
                    mixture_s: self.mixture_from(params, &format!("{h}.pos.mixture_logits"))?,
                    fmap: self.fmap_from(params, &format!("{h}.pos.coeffs"))?,
                    transform: pos.transform,
                    combination,
                    w_v: if pos.shared_wv { None } else { Some(params.expect(&format!("{h}.pos.w_v"))?.clone()) },
                })
            } else {
                None
            };
            heads.push(GamHead { content, position });
        }
        Ok(GamModelConfig { heads, output_proj: params.expect("output_proj")?.clone() })
    }

    fn check_tokens(&self, tokens: &[TokenWithLocation]) -> Result<()> {
        if tokens.is_empty() {
            return Err(GamError::Shape("empty token sequence".into()));
        }
        if let Some(t) = tokens.iter().find(|t| t.token_id >= self.vocab) {
            return Err(GamError::Shape(format!("token {} outside vocabulary of {}", t.token_id, self.vocab)));
        }
        if self.spec.position.enabled && tokens.len() > self.spec.position.n_max {
            return Err(GamError::Shape(format!(
                "sequence length {} exceeds position capacity {}",
                tokens.len(),
                self.spec.position.n_max
            )));
        }
        Ok(())
    }

    fn locations(&self, tokens: &[TokenWithLocation]) -> Vec<u64> {
        if self.spec.position.force_contiguous {
            (0..tokens.len() as u64).collect()
        } else {
            tokens.iter().map(|t| t.corpus_location).collect()
        }
    }

    /// Logits by the plain (untaped) forward pass.
    pub fn logits(&self, params: &ParamSet, tokens: &[TokenWithLocation]) -> Result<Tensor> {
        let seq = self.input_sequence(params, tokens)?;
        let attn = gam_forward(&seq, &self.gam_config(params)?)?;
        let hidden = if self.spec.residual { seq.y.add(&attn)? } else { attn };
        hidden.matmul(params.expect("unembed")?)
    }

    fn input_sequence(&self, params: &ParamSet, tokens: &[TokenWithLocation]) -> Result<InputSequence> {
        self.check_tokens(tokens)?;
        let table = params.expect("embedding")?;
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| table.row(t.token_id).to_vec()).collect();
        let mut seq = InputSequence::new(Tensor::from_rows(&rows)?)?.with_locations(self.locations(tokens))?;
        seq.causal = self.spec.causal;
        Ok(seq)
    }

    /// Geometric-combination sign conflicts summed over a batch.
    pub fn sign_conflicts(&self, params: &ParamSet, batch: &[Example]) -> Result<usize> {
        let config = self.gam_config(params)?;
        let mut total = 0;
        for ex in batch {
            total += gam_forward_detailed(&self.input_sequence(params, &ex.tokens)?, &config)?.sign_conflicts;
        }
        Ok(total)
    }

    /// Mean cross-entropy over a batch by the plain forward pass.
    pub fn loss(&self, params: &ParamSet, batch: &[Example]) -> Result<f64> {
        let losses = batch
            .iter()
            .map(|ex| cross_entropy(&self.logits(params, &ex.tokens)?, &ex.targets))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    /// Mean cross-entropy and its analytic gradient, one tape per example.
    pub fn loss_and_grad(&self, params: &ParamSet, batch: &[Example]) -> Result<GradResult> {
        if batch.is_empty() {
            return Err(GamError::Config("empty batch".into()));
        }
        let per_example = batch
            .par_iter()
            .map(|ex| self.example_grad(params, ex))
            .collect::<Result<Vec<_>>>()?;
        // Reduce in batch order so the result does not depend on scheduling.
        let scale = 1.0 / batch.len() as f64;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &per_example {
            loss += l;
            for ((_, acc), (_, gi)) in grads.iter_mut().zip(g.iter()) {
                acc.add_scaled_assign(gi, scale);
            }
        }
        Ok(GradResult { loss: loss * scale, grads })
    }

    fn example_grad(&self, params: &ParamSet, ex: &Example) -> Result<(f64, ParamSet)> {
        self.check_tokens(&ex.tokens)?;
        let mut tape = Tape::new();
        let vars: Vec<(String, Var)> = params
            .iter()
            .map(|(name, t)| (name.to_owned(), tape.param(t.clone())))
            .collect();
        let lookup = |name: &str| -> Result<Var> {
            vars.iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| GamError::Config(format!("missing parameter {name:?}")))
        };
        let loss = self.taped_loss(&mut tape, &lookup, ex)?;
        let loss_value = tape.value(loss).value();
        let mut adj = tape.backward(loss);
        let mut grads = ParamSet::new();
        for (name, var) in &vars {
            let g = adj.take(*var).unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape()));
            grads.insert(name.clone(), g)?;
        }
        Ok((loss_value, grads))
    }

    fn taped_loss(&self, tape: &mut Tape, var: &dyn Fn(&str) -> Result<Var>, ex: &Example) -> Result<Var> {
        let s = &self.spec;
        let ids: Vec<usize> = ex.tokens.iter().map(|t| t.token_id).collect();
        let n = ids.len();
        let x = tape.gather_rows(var("embedding")?, &ids)?;
        let mask = Mask::from_valid(&vec![true; n], s.causal);
        let powers = s.fmap.powers();
        let coeffs = |tape_var: Option<Var>| match tape_var {
            Some(v) => Coeffs::Learned(v),
            None => Coeffs::Fixed(s.fmap.coefficients()),
        };
        let is_poly = matches!(s.fmap, FeatureMap::Polynomial { .. });

        let pos_features = if s.position.enabled {
            let rp = build_r(&self.locations(&ex.tokens))?;
            Some(tape.constant(position_features(&rp, s.position.n_max, s.position.transform)?))
        } else {
            None
        };

        let mut head_outputs = Vec::with_capacity(s.heads);
        for a in 0..s.heads {
            let h = Self::head_prefix(a);
            let w_v = var(&format!("{h}.w_v"))?;
            let values = tape.matmul(x, w_v)?;
            let poly = if is_poly { Some(var(&format!("{h}.coeffs"))?) } else { None };
            let brains = (0..s.brains)
                .map(|i| var(&format!("{h}.brain{i}")))
                .collect::<Result<Vec<_>>>()?;
            let weights = self.taped_mixture(tape, var, &format!("{h}.mixture_logits"))?;
            let phi = taped_attention(tape, x, &mask, &brains, weights, &powers, coeffs(poly))?;
            let z = tape.matmul(phi, values)?;

            let out = match pos_features {
                None => z,
                Some(feats) => {
                    let p = tape.matmul(feats, var(&format!("{h}.pos.embed"))?)?;
                    let poly = if is_poly { Some(var(&format!("{h}.pos.coeffs"))?) } else { None };
                    let brains_p = (0..s.brains)
                        .map(|i| var(&format!("{h}.pos.brain{i}")))
                        .collect::<Result<Vec<_>>>()?;
                    let weights = self.taped_mixture(tape, var, &format!("{h}.pos.mixture_logits"))?;
                    let theta = taped_attention(tape, p, &mask, &brains_p, weights, &powers, coeffs(poly))?;
                    let pos_values = if s.position.shared_wv {
                        values
                    } else {
                        tape.matmul(x, var(&format!("{h}.pos.w_v"))?)?
                    };
                    let pi = tape.matmul(theta, pos_values)?;
                    match s.position.combination {
                        CombinationKind::Geometric => tape.geometric(z, pi)?,
                        CombinationKind::Linear => {
                            let c1 = if s.position.learn_c1 {
                                let l = var(&format!("{h}.pos.c1_logit"))?;
                                tape.sigmoid(l)
                            } else {
                                tape.constant(Tensor::scalar(s.position.c1))
                            };
                            tape.lerp(z, pi, c1)?
                        }
                    }
                }
            };
            head_outputs.push(out);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        let attn = tape.matmul(concat, var("output_proj")?)?;
        let hidden = if s.residual { tape.add(x, attn)? } else { attn };
        let logits = tape.matmul(hidden, var("unembed")?)?;
        tape.cross_entropy(logits, &ex.targets)
    }

    fn taped_mixture(&self, tape: &mut Tape, var: &dyn Fn(&str) -> Result<Var>, name: &str) -> Result<Var> {
        Ok(match self.spec.mixture {
            MixtureMode::FixedUniform => {
                let nb = self.spec.brains;
                tape.constant(Tensor::filled(&[nb], 1.0 / nb as f64))
            }
            MixtureMode::LearnedSimplex => {
                let logits = var(name)?;
                tape.simplex(logits)
            }
        })
    }

    pub fn with<'a>(&'a self, params: &'a ParamSet) -> BoundModel<'a> {
        BoundModel { model: self, params }
    }
}

fn taped_attention(
    tape: &mut Tape,
    x: Var,
    mask: &Mask,
    brains: &[Var],
    weights: Var,
    powers: &[crate::gam::Power],
    coeffs: Coeffs,
) -> Result<Var> {
    let mut psis = Vec::with_capacity(brains.len());
    for &b in brains {
        let scores = tape.feature_scores(x, b, powers.to_vec(), coeffs.clone())?;
        psis.push(tape.masked_softmax(scores, mask)?);
    }
    tape.mix(&psis, weights)
}

/// `(1/√d_k) · W^Q (W^K)ᵀ` for Gaussian `W^Q`, `W^K` with entry scale `1/√M`.
fn init_brain(rng: &mut Rng, m: usize, d_k: usize) -> Tensor {
    let scale = 1.0 / (m as f64).sqrt();
    let params = BaselineHeadParams {
        w_q: gaussian(rng, &[m, d_k], scale),
        w_k: gaussian(rng, &[m, d_k], scale),
        w_v: Tensor::zeros(&[m, 1]),
    };
    crate::baseline::compose_b(&params)
}

/// Mean over positions of `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_probs(logits, targets)?.0)
}

/// A model architecture paired with concrete parameters.
#[derive(Clone, Copy)]
pub struct BoundModel<'a> {
    pub model: &'a LanguageModel,
    pub params: &'a ParamSet,
}

impl LogitModel for BoundModel<'_> {
    fn logits(&self, tokens: &[TokenWithLocation]) -> Result<Tensor> {
        self.model.logits(self.params, tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_groups() {
        assert_eq!(param_group("head3.brain12"), "brain");
        assert_eq!(param_group("head0.pos.brain1"), "pos.brain");
        assert_eq!(param_group("head1.pos.c1_logit"), "pos.c1_logit");
        assert_eq!(param_group("embedding"), "embedding");
        assert_eq!(param_group("head0.w_v"), "w_v");
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec {
            heads: 1,
            width: 4,
            value_width: 4,
            d_k: 2,
            brains: 1,
            fmap: FeatureMap::identity(),
            mixture: MixtureMode::FixedUniform,
            residual: true,
            causal: false,
            position: PositionSpec::default(),
        };
        assert!(spec.validate().is_ok());
        spec.position.enabled = true;
        spec.position.c1 = 1.0;
        assert!(spec.validate().is_err());
        spec.position.c1 = 0.3;
        spec.brains = 0;
        assert!(spec.validate().is_err());
    }
}
