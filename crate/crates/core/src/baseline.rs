//! Reference single-head scaled dot-product attention, and the collapse of
//! its query/key pair into one bilinear matrix `B = W^Q (W^K)ᵀ / √d_k`.

use crate::error::{GamError, Result};
use crate::tensor::{masked_softmax_rows, matmul_nt, Mask, Tensor};

/// Query, key and value projections of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl BaselineHeadParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let ok = w_q.is_matrix()
            && w_k.is_matrix()
            && w_v.is_matrix()
            && w_q.shape() == w_k.shape()
            && w_q.rows() == w_v.rows();
        if !ok {
            return Err(GamError::Shape(format!(
                "W^Q {:?}, W^K {:?}, W^V {:?} must be M×d_k, M×d_k, M×M_v",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        Ok(BaselineHeadParams { w_q, w_k, w_v })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }
}

/// Rows `y^α` of an input sequence plus the metadata attention needs.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    /// `n × M`, one row per element.
    pub y: Tensor,
    /// Invalid elements are excluded from every softmax normalization.
    pub valid: Vec<bool>,
    /// Restrict element `α` to attend to `β ≤ α`.
    pub causal: bool,
    /// Absolute corpus positions; `None` means contiguous `0..n`.
    pub locations: Option<Vec<u64>>,
}

impl InputSequence {
    /// All elements valid, bidirectional, contiguous locations.
    pub fn new(y: Tensor) -> Result<Self> {
        if !y.is_matrix() {
            return Err(GamError::Shape(format!("sequence must be n×M, got {:?}", y.shape())));
        }
        let n = y.rows();
        Ok(InputSequence { y, valid: vec![true; n], causal: false, locations: None })
    }

    pub fn with_locations(mut self, locations: Vec<u64>) -> Result<Self> {
        if locations.len() != self.len() {
            return Err(GamError::Shape(format!(
                "{} locations for a sequence of length {}",
                locations.len(),
                self.len()
            )));
        }
        self.locations = Some(locations);
        Ok(self)
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.len() {
            return Err(GamError::Shape("valid mask length differs from sequence length".into()));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.y.cols()
    }

    pub fn mask(&self) -> Mask {
        Mask::from_valid(&self.valid, self.causal)
    }

    /// Explicit locations, or `0..n` when none were supplied.
    pub fn locations_or_contiguous(&self) -> Vec<u64> {
        self.locations
            .clone()
            .unwrap_or_else(|| (0..self.len() as u64).collect())
    }
}

fn check_width(seq: &InputSequence, m: usize) -> Result<()> {
    if seq.width() != m {
        return Err(GamError::Shape(format!(
            "sequence width {} does not match parameter rows {m}",
            seq.width()
        )));
    }
    Ok(())
}

/// `e[α][β] = (y^α W^Q)·(y^β W^K) / √d_k`.
pub fn baseline_scores(seq: &InputSequence, params: &BaselineHeadParams) -> Result<Tensor> {
    check_width(seq, params.width())?;
    let q = seq.y.matmul(&params.w_q)?;
    let k = seq.y.matmul(&params.w_k)?;
    Ok(matmul_nt(&q, &k).scale(1.0 / (params.d_k() as f64).sqrt()))
}

/// `z^α = Σ_β Φ^{αβ} (y^β W^V)` with `Φ` the masked row softmax of the scores.
pub fn baseline_head(seq: &InputSequence, params: &BaselineHeadParams) -> Result<Tensor> {
    let phi = masked_softmax_rows(&baseline_scores(seq, params)?, &seq.mask())?;
    let values = seq.y.matmul(&params.w_v)?;
    phi.matmul(&values)
}

/// `B = W^Q (W^K)ᵀ / √d_k`, so that `y^α B (y^β)ᵀ` reproduces the scores.
pub fn compose_b(params: &BaselineHeadParams) -> Tensor {
    matmul_nt(&params.w_q, &params.w_k).scale(1.0 / (params.d_k() as f64).sqrt())
}
