//! Generalized attention heads.
//!
//! A head owns `N_B` square "brain" matrices. Each brain turns the pairwise
//! products `y^α_r · y^β_t` (passed through a feature map `f`) into a score
//! matrix, `ε_i[α][β] = Σ_{r,t} f(y^α_r y^β_t) B_i[r][t]`. Each score matrix
//! gets its own masked row softmax `Ψ_i`, the heads mix them with simplex
//! weights `W^P` into `Φ = Σ_i W^P_i Ψ_i`, and the output is `Φ (Y W^V)`.
//!
//! With one brain, the identity feature map and `B = W^Q (W^K)ᵀ / √d_k`
//! this is exactly scaled dot-product attention.
//!
//! Both supported feature maps factor over the two operands:
//! `(ab)^k = a^k b^k`, and `sign(ab)|ab|^n = sign(a)|a|^n · sign(b)|b|^n`.
//! Scores are therefore evaluated as `Σ_l A_l · G_l B G_lᵀ` with
//! `G_l = g_l(Y)` applied entrywise, which is the same sum over `(r, t)`
//! as applying `f` to every scalar product first, at `O(n M²)` instead of
//! `O(n² M²)` cost.

use serde::{Deserialize, Serialize};

use crate::baseline::InputSequence;
use crate::error::{GamError, Result};
use crate::position::{self, PosBranchParams};
use crate::tensor::{
    int_pow, masked_softmax_rows, matmul_nt, signed_pow_unchecked, softmax, Mask, Tensor,
};

/// The scalar function applied to every product `y^α_r · y^β_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", deny_unknown_fields)]
pub enum FeatureMap {
    /// `f(x) = x^n1` (sign-preserving for non-integer `n1`).
    PowerLaw { n1: f64 },
    /// `f(x) = Σ_{l=1..L} A_l x^l`, with `coeffs = [A_1, …, A_L]`.
    Polynomial { coeffs: Vec<f64> },
}

/// One separable term of a feature map: `coeff · g(a) · g(b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Power {
    Signed(f64),
    Integer(u32),
}

impl Power {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Power::Signed(n1) => signed_pow_unchecked(x, n1),
            Power::Integer(k) => int_pow(x, k),
        }
    }

    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Power::Signed(n1) => crate::tensor::signed_pow_derivative(x, n1),
            Power::Integer(k) => k as f64 * int_pow(x, k - 1),
        }
    }
}

impl FeatureMap {
    pub fn identity() -> Self {
        FeatureMap::PowerLaw { n1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureMap::PowerLaw { n1 } if !(n1.is_finite() && *n1 > 0.0) => Err(GamError::Config(
                format!("power-law exponent must be positive, got {n1}"),
            )),
            FeatureMap::Polynomial { coeffs } if coeffs.is_empty() => {
                Err(GamError::Config("polynomial feature map needs at least one coefficient".into()))
            }
            FeatureMap::Polynomial { coeffs } if coeffs.iter().any(|c| !c.is_finite()) => {
                Err(GamError::Config("polynomial coefficients must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn powers(&self) -> Vec<Power> {
        match self {
            FeatureMap::PowerLaw { n1 } => vec![Power::Signed(*n1)],
            FeatureMap::Polynomial { coeffs } => (1..=coeffs.len() as u32).map(Power::Integer).collect(),
        }
    }

    pub(crate) fn coefficients(&self) -> Vec<f64> {
        match self {
            FeatureMap::PowerLaw { .. } => vec![1.0],
            FeatureMap::Polynomial { coeffs } => coeffs.clone(),
        }
    }
}

/// `f(prod)` for a single scalar product.
pub fn apply_feature_map(prod: f64, fmap: &FeatureMap) -> f64 {
    match fmap {
        FeatureMap::PowerLaw { n1 } => signed_pow_unchecked(prod, *n1),
        FeatureMap::Polynomial { coeffs } => coeffs
            .iter()
            .zip(1u32..)
            .map(|(a, l)| a * int_pow(prod, l))
            .sum(),
    }
}

/// How a head weighs its brains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", deny_unknown_fields)]
pub enum MixtureSpec {
    /// Every brain weighs `1 / n_b`.
    FixedUniform { n_b: usize },
    /// Weights are the softmax of free logits, so they stay on the open simplex.
    LearnedSimplex { logits: Vec<f64> },
}

impl MixtureSpec {
    pub fn len(&self) -> usize {
        match self {
            MixtureSpec::FixedUniform { n_b } => *n_b,
            MixtureSpec::LearnedSimplex { logits } => logits.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Realized mixture weights; nonnegative and summing to one.
pub fn realize_mixture(mix: &MixtureSpec) -> Tensor {
    let weights = match mix {
        MixtureSpec::FixedUniform { n_b } => vec![1.0 / *n_b as f64; *n_b],
        MixtureSpec::LearnedSimplex { logits } => softmax(logits),
    };
    Tensor::from_parts(vec![weights.len()], weights)
}

/// Content-branch parameters of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct GamHeadParams {
    /// `N_B` matrices, each `M × M`.
    pub brains: Vec<Tensor>,
    /// `M × M_v`.
    pub w_v: Tensor,
    pub mixture: MixtureSpec,
    pub fmap: FeatureMap,
}

impl GamHeadParams {
    pub fn validate(&self) -> Result<()> {
        let m = self.w_v.rows();
        if self.brains.is_empty() {
            return Err(GamError::Config("a head needs at least one brain".into()));
        }
        validate_brains(&self.brains, m)?;
        if self.mixture.len() != self.brains.len() {
            return Err(GamError::Config(format!(
                "mixture has {} weights for {} brains",
                self.mixture.len(),
                self.brains.len()
            )));
        }
        self.fmap.validate()
    }

    pub fn width(&self) -> usize {
        self.w_v.rows()
    }

    pub fn value_width(&self) -> usize {
        self.w_v.cols()
    }
}

pub(crate) fn validate_brains(brains: &[Tensor], m: usize) -> Result<()> {
    for (i, b) in brains.iter().enumerate() {
        if !b.is_matrix() || b.rows() != m || b.cols() != m {
            return Err(GamError::Shape(format!("brain {i} is {:?}, expected {m}×{m}", b.shape())));
        }
    }
    Ok(())
}

/// `g_l(Y)` entrywise, one tensor per feature-map term.
pub(crate) fn feature_powers(y: &Tensor, fmap: &FeatureMap) -> Vec<Tensor> {
    fmap.powers().into_iter().map(|p| y.map(|v| p.apply(v))).collect()
}

/// `G B Gᵀ` for one separable term.
pub(crate) fn term_scores(g: &Tensor, brain: &Tensor) -> Tensor {
    matmul_nt(&crate::tensor::matmul_unchecked(g, brain), g)
}

pub(crate) fn combine_terms(terms: &[Tensor], coeffs: &[f64]) -> Tensor {
    let mut total = Tensor::zeros(terms[0].shape());
    for (t, &c) in terms.iter().zip(coeffs) {
        total.add_scaled_assign(t, c);
    }
    total
}

fn first_non_finite(scores: &Tensor) -> Option<(usize, usize)> {
    let n = scores.cols();
    scores.data().iter().position(|v| !v.is_finite()).map(|i| (i / n, i % n))
}

/// Scores of one brain over the rows of `x` (`n × M`).
pub(crate) fn feature_scores(x: &Tensor, brain: &Tensor, fmap: &FeatureMap) -> Result<Tensor> {
    if x.cols() != brain.rows() || !brain.is_matrix() || brain.rows() != brain.cols() {
        return Err(GamError::Shape(format!(
            "inputs {:?} against brain {:?}",
            x.shape(),
            brain.shape()
        )));
    }
    let terms: Vec<Tensor> = feature_powers(x, fmap).iter().map(|g| term_scores(g, brain)).collect();
    let scores = combine_terms(&terms, &fmap.coefficients());
    if let Some((a, b)) = first_non_finite(&scores) {
        return Err(GamError::NonFinite(format!("brain score ({a}, {b})")));
    }
    Ok(scores)
}

/// `ε[α][β] = Σ_{r,t} f(y^α_r y^β_t) B[r][t]`.
pub fn brain_scores(seq: &InputSequence, brain: &Tensor, fmap: &FeatureMap) -> Result<Tensor> {
    feature_scores(&seq.y, brain, fmap)
}

/// `Σ_i w_i softmax_mask(scores_i)`, shared by the content and position branches.
pub(crate) fn mixed_attention(
    x: &Tensor,
    mask: &Mask,
    brains: &[Tensor],
    mixture: &MixtureSpec,
    fmap: &FeatureMap,
) -> Result<Tensor> {
    let weights = realize_mixture(mixture);
    let n = x.rows();
    let mut phi = Tensor::zeros(&[n, n]);
    for (brain, &w) in brains.iter().zip(weights.data()) {
        let psi = masked_softmax_rows(&feature_scores(x, brain, fmap)?, mask)?;
        phi.add_scaled_assign(&psi, w);
    }
    Ok(phi)
}

/// Mixed attention matrix `Φ` of a content head.
pub fn gam_attention(seq: &InputSequence, params: &GamHeadParams) -> Result<Tensor> {
    params.validate()?;
    if seq.width() != params.width() {
        return Err(GamError::Shape(format!(
            "sequence width {} vs head width {}",
            seq.width(),
            params.width()
        )));
    }
    mixed_attention(&seq.y, &seq.mask(), &params.brains, &params.mixture, &params.fmap)
}

/// Content-branch output `z = Φ (Y W^V)`, `n × M_v`.
pub fn gam_head(seq: &InputSequence, params: &GamHeadParams) -> Result<Tensor> {
    let phi = gam_attention(seq, params)?;
    phi.matmul(&seq.y.matmul(&params.w_v)?)
}

/// One head with its optional relative-position branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GamHead {
    pub content: GamHeadParams,
    pub position: Option<PosBranchParams>,
}

/// Parameters of a full multi-head GAM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GamModelConfig {
    pub heads: Vec<GamHead>,
    /// `(h · M_v) × M`.
    pub output_proj: Tensor,
}

impl GamModelConfig {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| GamError::Config("model needs at least one head".into()))?;
        let (m, m_v) = (first.content.width(), first.content.value_width());
        for (a, head) in self.heads.iter().enumerate() {
            head.content.validate()?;
            if head.content.width() != m || head.content.value_width() != m_v {
                return Err(GamError::Config(format!("head {a} has a different width")));
            }
            if let Some(pos) = &head.position {
                pos.validate(m, m_v, head.content.brains.len())?;
            }
        }
        let proj = &self.output_proj;
        if !proj.is_matrix() || proj.rows() != self.heads.len() * m_v || proj.cols() != m {
            return Err(GamError::Shape(format!(
                "output projection {:?}, expected {}×{m}",
                proj.shape(),
                self.heads.len() * m_v
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.output_proj.cols()
    }
}

/// Output of [`gam_forward_detailed`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    /// Per-head outputs before concatenation and projection.
    pub head_outputs: Vec<Tensor>,
    /// Entries where the geometric combination met factors of opposite sign.
    pub sign_conflicts: usize,
}

/// Multi-head layer output, `n × M`.
pub fn gam_forward(seq: &InputSequence, config: &GamModelConfig) -> Result<Tensor> {
    Ok(gam_forward_detailed(seq, config)?.output)
}

pub fn gam_forward_detailed(seq: &InputSequence, config: &GamModelConfig) -> Result<ForwardOutput> {
    config.validate()?;
    let mut head_outputs = Vec::with_capacity(config.heads.len());
    let mut sign_conflicts = 0;
    let mut r_features = None;
    for head in &config.heads {
        let z = gam_head(seq, &head.content)?;
        let out = match &head.position {
            None => z,
            Some(pos) => {
                let feats = match &r_features {
                    Some(f) => f,
                    None => {
                        let rp = position::build_r(&seq.locations_or_contiguous())?;
                        r_features.insert((rp, pos.n_max(), pos.transform))
                    }
                };
                let p = position::embed_positions(&feats.0, &pos.embed, pos.transform)?;
                let pi = position::position_branch(&p, seq, pos, &head.content.w_v)?;
                let combined = position::combine(&z, &pi, &pos.combination)?;
                sign_conflicts += combined.sign_conflicts;
                combined.output
            }
        };
        head_outputs.push(out);
    }
    let output = Tensor::concat_cols(&head_outputs)?.matmul(&config.output_proj)?;
    Ok(ForwardOutput { output, head_outputs, sign_conflicts })
}
