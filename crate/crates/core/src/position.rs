//! Corpus-gap-aware relative positions.
//!
//! Each sequence element carries its absolute location in the underlying
//! corpus. Row `α` of the relative-position matrix is `r^α` with
//! `r^α_α = 1` and `r^α_i = 2 + n_e`, where `n_e` counts the corpus elements
//! strictly between elements `α` and `i`. Rows are embedded to `p^α` by a
//! learned linear map, and a second attention branch scores pairs `(p^α, p^β)`
//! with its own brains while still reading values from `y`.

use serde::{Deserialize, Serialize};

use crate::baseline::InputSequence;
use crate::error::{GamError, Result};
use crate::gam::{mixed_attention, validate_brains, FeatureMap, MixtureSpec};
use crate::tensor::{Mask, Tensor};

/// A token id together with its absolute corpus location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenWithLocation {
    pub token_id: usize,
    pub corpus_location: u64,
}

/// The `n × n` matrix whose row `α` is `r^α`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelPosVectors {
    n: usize,
    r: Vec<u64>,
}

impl RelPosVectors {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, alpha: usize, i: usize) -> u64 {
        self.r[alpha * self.n + i]
    }

    pub fn row(&self, alpha: usize) -> &[u64] {
        &self.r[alpha * self.n..(alpha + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        (0..self.n).map(|a| self.row(a).to_vec()).collect()
    }
}

/// Builds `r` from strictly increasing corpus locations.
pub fn build_r(locations: &[u64]) -> Result<RelPosVectors> {
    if locations.is_empty() {
        return Err(GamError::Locations("empty location list".into()));
    }
    if let Some(w) = locations.windows(2).position(|w| w[1] <= w[0]) {
        return Err(GamError::Locations(format!(
            "locations must be strictly increasing, but position {} has {} after {}",
            w + 1,
            locations[w + 1],
            locations[w]
        )));
    }
    let n = locations.len();
    let mut r = vec![0; n * n];
    for a in 0..n {
        for i in 0..n {
            r[a * n + i] = if a == i {
                1
            } else {
                // n_e = |Δ| − 1 elements lie strictly between the two.
                let n_e = locations[a].abs_diff(locations[i]) - 1;
                2 + n_e
            };
        }
    }
    Ok(RelPosVectors { n, r })
}

/// Scalar map applied to `r` entries before embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionTransform {
    None,
    #[default]
    Log1p,
}

impl PositionTransform {
    fn apply(self, r: u64) -> f64 {
        match self {
            PositionTransform::None => r as f64,
            PositionTransform::Log1p => (r as f64).ln_1p(),
        }
    }
}

/// `g(r)` zero-padded to `n_max` columns, `n × n_max`.
pub fn position_features(rp: &RelPosVectors, n_max: usize, transform: PositionTransform) -> Result<Tensor> {
    let n = rp.len();
    if n > n_max {
        return Err(GamError::Shape(format!(
            "sequence length {n} exceeds the position embedding capacity {n_max}"
        )));
    }
    let mut data = vec![0.0; n * n_max];
    for a in 0..n {
        for (i, &r) in rp.row(a).iter().enumerate() {
            data[a * n_max + i] = transform.apply(r);
        }
    }
    Ok(Tensor::from_parts(vec![n, n_max], data))
}

/// `p^α = g(r^α) · embed`, `n × M`.
pub fn embed_positions(rp: &RelPosVectors, embed: &Tensor, transform: PositionTransform) -> Result<Tensor> {
    if !embed.is_matrix() {
        return Err(GamError::Shape(format!("position embedding must be a matrix, got {:?}", embed.shape())));
    }
    position_features(rp, embed.rows(), transform)?.matmul(embed)
}

/// How the content output `z` and the position output `π` are merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", deny_unknown_fields)]
pub enum CombinationSpec {
    /// `c1·z + (1 − c1)·π`, `0 < c1 < 1`.
    Linear { c1: f64 },
    /// Sign-carrying geometric mean `sign(z)·√(z·π)`.
    Geometric,
}

impl CombinationSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            CombinationSpec::Linear { c1 } if !(*c1 > 0.0 && *c1 < 1.0) => {
                Err(GamError::Config(format!("c1 must lie strictly between 0 and 1, got {c1}")))
            }
            _ => Ok(()),
        }
    }
}

/// Position-branch parameters of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct PosBranchParams {
    /// `n_max × M` map from (padded) `r^α` to `p^α`.
    pub embed: Tensor,
    /// `N_B` matrices, each `M × M`.
    pub brains_p: Vec<Tensor>,
    pub mixture_s: MixtureSpec,
    pub fmap: FeatureMap,
    pub transform: PositionTransform,
    pub combination: CombinationSpec,
    /// Separate value matrix; `None` reuses the content head's `W^V`.
    pub w_v: Option<Tensor>,
}

impl PosBranchParams {
    pub fn n_max(&self) -> usize {
        self.embed.rows()
    }

    pub fn validate(&self, m: usize, m_v: usize, n_b: usize) -> Result<()> {
        if !self.embed.is_matrix() || self.embed.cols() != m {
            return Err(GamError::Shape(format!(
                "position embedding {:?} must have {m} columns",
                self.embed.shape()
            )));
        }
        if self.brains_p.len() != n_b || self.mixture_s.len() != n_b {
            return Err(GamError::Config(format!(
                "position branch needs {n_b} brains and weights, got {} and {}",
                self.brains_p.len(),
                self.mixture_s.len()
            )));
        }
        validate_brains(&self.brains_p, m)?;
        if let Some(w) = &self.w_v {
            if w.shape() != [m, m_v] {
                return Err(GamError::Shape(format!("position W^V {:?}, expected {m}×{m_v}", w.shape())));
            }
        }
        self.fmap.validate()?;
        self.combination.validate()
    }
}

/// Mixed position attention `Θ = Σ_i W^S_i softmax(δ_i)`.
pub fn position_attention(p: &Tensor, mask: &Mask, params: &PosBranchParams) -> Result<Tensor> {
    mixed_attention(p, mask, &params.brains_p, &params.mixture_s, &params.fmap)
}

/// `π = Θ (Y W^V)`: weights from positions, values from content.
pub fn position_branch(
    p: &Tensor,
    seq: &InputSequence,
    params: &PosBranchParams,
    content_w_v: &Tensor,
) -> Result<Tensor> {
    if p.rows() != seq.len() {
        return Err(GamError::Shape(format!(
            "{} position vectors for a sequence of length {}",
            p.rows(),
            seq.len()
        )));
    }
    let theta = position_attention(p, &seq.mask(), params)?;
    let w_v = params.w_v.as_ref().unwrap_or(content_w_v);
    theta.matmul(&seq.y.matmul(w_v)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub output: Tensor,
    /// Entries where `z` and `π` had opposite signs (geometric mode only).
    pub sign_conflicts: usize,
}

/// Geometric mean carrying the sign of `z`; 0 with a conflict when the signs differ.
pub(crate) fn geometric_entry(z: f64, pi: f64) -> (f64, bool) {
    let prod = z * pi;
    if prod < 0.0 {
        (0.0, true)
    } else {
        (z.signum() * prod.sqrt(), false)
    }
}

pub fn combine(z: &Tensor, pi: &Tensor, spec: &CombinationSpec) -> Result<Combined> {
    if z.shape() != pi.shape() {
        return Err(GamError::Shape(format!("combine {:?} with {:?}", z.shape(), pi.shape())));
    }
    spec.validate()?;
    Ok(match spec {
        CombinationSpec::Linear { c1 } => Combined {
            output: z.zip_map(pi, |a, b| c1 * a + (1.0 - c1) * b)?,
            sign_conflicts: 0,
        },
        CombinationSpec::Geometric => {
            let mut conflicts = 0;
            let data = z
                .data()
                .iter()
                .zip(pi.data())
                .map(|(&a, &b)| {
                    let (v, conflict) = geometric_entry(a, b);
                    conflicts += conflict as usize;
                    v
                })
                .collect();
            Combined { output: Tensor::from_parts(z.shape().to_vec(), data), sign_conflicts: conflicts }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_example() {
        let r = build_r(&[0, 1, 2]).unwrap();
        assert_eq!(r.to_rows(), vec![vec![1, 2, 3], vec![2, 1, 2], vec![3, 2, 1]]);
    }

    #[test]
    fn gapped_example() {
        let r = build_r(&[0, 1, 3]).unwrap();
        assert_eq!(r.to_rows(), vec![vec![1, 2, 4], vec![2, 1, 3], vec![4, 3, 1]]);
    }

    #[test]
    fn single_token() {
        assert_eq!(build_r(&[5]).unwrap().to_rows(), vec![vec![1]]);
    }

    #[test]
    fn rejects_bad_locations() {
        assert!(build_r(&[]).is_err());
        assert!(build_r(&[0, 0]).is_err());
        let err = build_r(&[3, 4, 2]).unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
    }

    #[test]
    fn zero_embedding_gives_zero_positions() {
        let r = build_r(&[0, 2, 3]).unwrap();
        let p = embed_positions(&r, &Tensor::zeros(&[5, 4]), PositionTransform::Log1p).unwrap();
        assert_eq!(p.shape(), &[3, 4]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_embedding_recovers_r() {
        let r = build_r(&[0, 1, 4]).unwrap();
        let p = embed_positions(&r, &Tensor::identity(3), PositionTransform::None).unwrap();
        for a in 0..3 {
            for i in 0..3 {
                assert_eq!(p.at(a, i), r.get(a, i) as f64);
            }
        }
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let r = build_r(&[0, 1, 2, 3]).unwrap();
        assert!(embed_positions(&r, &Tensor::zeros(&[3, 2]), PositionTransform::None).is_err());
    }

    #[test]
    fn combine_examples() {
        let z = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.0, 3.0]]).unwrap();
        for c1 in [0.01, 0.5, 0.99] {
            let out = combine(&z, &z, &CombinationSpec::Linear { c1 }).unwrap();
            assert!(out.output.max_abs_diff(&z) < 1e-15);
        }
        let out = combine(&z, &z, &CombinationSpec::Geometric).unwrap();
        assert_eq!(out.output, z);
        assert_eq!(out.sign_conflicts, 0);

        let two = Tensor::vector(vec![2.0]).unwrap();
        let four = Tensor::vector(vec![4.0]).unwrap();
        let mid = combine(&two, &four, &CombinationSpec::Linear { c1: 0.5 }).unwrap();
        assert_eq!(mid.output.data(), &[3.0]);
    }

    #[test]
    fn geometric_sign_conflicts_are_counted() {
        let z = Tensor::vector(vec![1.0, -4.0, -1.0, 2.0]).unwrap();
        let pi = Tensor::vector(vec![-1.0, -1.0, 3.0, 8.0]).unwrap();
        let out = combine(&z, &pi, &CombinationSpec::Geometric).unwrap();
        assert_eq!(out.output.data(), &[0.0, -2.0, 0.0, 4.0]);
        assert_eq!(out.sign_conflicts, 2);
    }

    #[test]
    fn linear_c1_must_be_interior() {
        let z = Tensor::vector(vec![1.0]).unwrap();
        for c1 in [0.0, 1.0, -0.5, 1.5] {
            assert!(combine(&z, &z, &CombinationSpec::Linear { c1 }).is_err());
        }
    }
}
