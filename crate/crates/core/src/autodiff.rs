//! A small reverse-mode tape over whole tensors.
//!
//! Every node stores its forward value; `backward` walks the tape once in
//! reverse and accumulates adjoints. Only the operations the GAM language
//! model needs are provided, each with a hand-derived vector-Jacobian product.

use crate::error::{GamError, Result};
use crate::gam::{combine_terms, term_scores, Power};
use crate::position::geometric_entry;
use crate::tensor::{
    masked_softmax_rows, matmul_nt, matmul_tn, matmul_unchecked, softmax, Mask, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Feature-map coefficients of a score node.
#[derive(Clone, Debug)]
pub enum Coeffs {
    Fixed(Vec<f64>),
    Learned(Var),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    FeatureScores { x: Var, brain: Var, coeffs: Coeffs, powers: Vec<Power>, g: Vec<Tensor>, terms: Vec<Tensor> },
    Softmax(Var),
    Simplex(Var),
    Sigmoid(Var),
    Mix { parts: Vec<Var>, weights: Var },
    Lerp { z: Var, pi: Var, c1: Var },
    Geometric { z: Var, pi: Var },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(GamError::Shape(format!("row {bad} of a table with {} rows", t.rows())));
        }
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::from_parts(vec![ids.len(), t.cols()], data);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// `Σ_l A_l · g_l(X) B g_l(X)ᵀ`.
    pub(crate) fn feature_scores(&mut self, x: Var, brain: Var, powers: Vec<Power>, coeffs: Coeffs) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(brain));
        if xv.cols() != bv.rows() || bv.rows() != bv.cols() {
            return Err(GamError::Shape(format!("inputs {:?} against brain {:?}", xv.shape(), bv.shape())));
        }
        let g: Vec<Tensor> = powers.iter().map(|&p| xv.map(|v| p.apply(v))).collect();
        let terms: Vec<Tensor> = g.iter().map(|gl| term_scores(gl, bv)).collect();
        let a = match &coeffs {
            Coeffs::Fixed(a) => a.clone(),
            Coeffs::Learned(v) => self.value(*v).data().to_vec(),
        };
        if a.len() != terms.len() {
            return Err(GamError::Shape(format!("{} coefficients for {} terms", a.len(), terms.len())));
        }
        let value = combine_terms(&terms, &a);
        if !value.is_finite() {
            return Err(GamError::NonFinite("brain scores".into()));
        }
        let mut inputs = vec![x, brain];
        if let Coeffs::Learned(v) = coeffs {
            inputs.push(v);
        }
        Ok(self.push(value, Op::FeatureScores { x, brain, coeffs, powers, g, terms }, &inputs))
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: &Mask) -> Result<Var> {
        let value = masked_softmax_rows(self.value(scores), mask)?;
        Ok(self.push(value, Op::Softmax(scores), &[scores]))
    }

    /// Softmax of a logit vector.
    pub fn simplex(&mut self, logits: Var) -> Var {
        let w = softmax(self.value(logits).data());
        let value = Tensor::from_parts(vec![w.len()], w);
        self.push(value, Op::Simplex(logits), &[logits])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `Σ_i weights[i] · parts[i]`.
    pub fn mix(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights).data().to_vec();
        if w.len() != parts.len() {
            return Err(GamError::Shape(format!("{} weights for {} parts", w.len(), parts.len())));
        }
        let mut value = Tensor::zeros(self.value(parts[0]).shape());
        for (p, &wi) in parts.iter().zip(&w) {
            value.add_scaled_assign(self.value(*p), wi);
        }
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push(value, Op::Mix { parts: parts.to_vec(), weights }, &inputs))
    }

    /// `c1·z + (1 − c1)·π` with scalar `c1`.
    pub fn lerp(&mut self, z: Var, pi: Var, c1: Var) -> Result<Var> {
        let c = self.value(c1).value();
        let value = self.value(z).zip_map(self.value(pi), |a, b| c * a + (1.0 - c) * b)?;
        Ok(self.push(value, Op::Lerp { z, pi, c1 }, &[z, pi, c1]))
    }

    pub fn geometric(&mut self, z: Var, pi: Var) -> Result<Var> {
        let value = self.value(z).zip_map(self.value(pi), |a, b| geometric_entry(a, b).0)?;
        Ok(self.push(value, Op::Geometric { z, pi }, &[z, pi]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let value = Tensor::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over rows of `−log softmax(logits[row])[targets[row]]`, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (loss, probs) = cross_entropy_with_probs(l, targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(dout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &dout, &mut grads);
            }
            grads[idx] = Some(dout);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, matmul_nt(dout, self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, matmul_tn(self.value(*a), dout));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.clone());
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut g = Tensor::zeros(t.shape());
                let c = t.cols();
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut g.data_mut()[id * c..(id + 1) * c];
                    for (d, s) in dst.iter_mut().zip(dout.row(row)) {
                        *d += s;
                    }
                }
                acc(*table, g);
            }
            Op::FeatureScores { x, brain, coeffs, powers, g, terms } => {
                let b = self.value(*brain);
                let xv = self.value(*x);
                let a = match coeffs {
                    Coeffs::Fixed(a) => a.clone(),
                    Coeffs::Learned(v) => self.value(*v).data().to_vec(),
                };
                if let Coeffs::Learned(v) = coeffs {
                    let da: Vec<f64> = terms.iter().map(|t| dout.dot(t)).collect();
                    acc(*v, Tensor::from_parts(vec![da.len()], da));
                }
                let mut db = Tensor::zeros(b.shape());
                let mut dx = Tensor::zeros(xv.shape());
                let dout_t = dout.transpose();
                for ((gl, &al), &power) in g.iter().zip(&a).zip(powers) {
                    // S = G B Gᵀ: dB = Gᵀ dS G, dG = dS G Bᵀ + dSᵀ G B
                    db.add_scaled_assign(&matmul_tn(gl, &matmul_unchecked(dout, gl)), al);
                    let mut dg = matmul_nt(&matmul_unchecked(dout, gl), b);
                    dg.add_assign(&matmul_unchecked(&matmul_unchecked(&dout_t, gl), b));
                    for ((d, &dgv), &xval) in dx.data_mut().iter_mut().zip(dg.data()).zip(xv.data()) {
                        *d += al * dgv * power.derivative(xval);
                    }
                }
                acc(*brain, db);
                acc(*x, dx);
            }
            Op::Softmax(input) => {
                let p = &node.value;
                let n = p.cols();
                let mut dx = Tensor::zeros(p.shape());
                for r in 0..p.rows() {
                    let (pr, dr) = (p.row(r), dout.row(r));
                    let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx.data_mut()[r * n + j] = pr[j] * (dr[j] - inner);
                    }
                }
                acc(*input, dx);
            }
            Op::Simplex(logits) => {
                let w = node.value.data();
                let inner: f64 = w.iter().zip(dout.data()).map(|(a, b)| a * b).sum();
                let d = w.iter().zip(dout.data()).map(|(wi, di)| wi * (di - inner)).collect();
                acc(*logits, Tensor::from_parts(vec![w.len()], d));
            }
            Op::Sigmoid(x) => {
                acc(*x, node.value.zip_map(dout, |s, d| d * s * (1.0 - s)).unwrap());
            }
            Op::Mix { parts, weights } => {
                let w = self.value(*weights).data().to_vec();
                for (p, &wi) in parts.iter().zip(&w) {
                    acc(*p, dout.scale(wi));
                }
                let dw = parts.iter().map(|p| dout.dot(self.value(*p))).collect();
                acc(*weights, Tensor::from_parts(vec![w.len()], dw));
            }
            Op::Lerp { z, pi, c1 } => {
                let c = self.value(*c1).value();
                acc(*z, dout.scale(c));
                acc(*pi, dout.scale(1.0 - c));
                let diff = self.value(*z).sub(self.value(*pi)).unwrap();
                acc(*c1, Tensor::from_parts(self.value(*c1).shape().to_vec(), vec![dout.dot(&diff)]));
            }
            Op::Geometric { z, pi } => {
                // out = sign(z)·√(zπ): ∂/∂z = out / 2z, ∂/∂π = out / 2π, 0 where zπ ≤ 0.
                let (zv, pv, out) = (self.value(*z), self.value(*pi), &node.value);
                let part = |other: &Tensor| -> Tensor {
                    let data = out
                        .data()
                        .iter()
                        .zip(other.data())
                        .zip(dout.data())
                        .map(|((&o, &x), &d)| if o == 0.0 || x == 0.0 { 0.0 } else { d * o / (2.0 * x) })
                        .collect();
                    Tensor::from_parts(out.shape().to_vec(), data)
                };
                acc(*z, part(zv));
                acc(*pi, part(pv));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let (rows, cols) = (pv.rows(), pv.cols());
                    let mut g = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        g.extend_from_slice(&dout.row(r)[offset..offset + cols]);
                    }
                    acc(*p, Tensor::from_parts(vec![rows, cols], g));
                    offset += cols;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = dout.value() / targets.len() as f64;
                let mut g = probs.clone();
                let v = g.cols();
                for (r, &t) in targets.iter().enumerate() {
                    g.data_mut()[r * v + t] -= 1.0;
                }
                acc(*logits, g.scale(scale));
            }
        }
    }
}

/// Row softmax probabilities and the mean negative log-likelihood of `targets`.
pub(crate) fn cross_entropy_with_probs(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if !logits.is_matrix() || logits.rows() != targets.len() {
        return Err(GamError::Shape(format!(
            "logits {:?} for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let v = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(GamError::Shape(format!("target {bad} outside vocabulary of {v}")));
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        probs.extend(row.iter().map(|x| (x - lse).exp()));
    }
    Ok((total / targets.len() as f64, Tensor::from_parts(vec![targets.len(), v], probs)))
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_of_a_sum() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.cross_entropy(c, &[0, 0]).unwrap();
        // single-column logits: loss is zero and so is every gradient
        assert_eq!(tape.value(loss).value(), 0.0);
        let g = tape.backward(loss);
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(b).is_none());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, _) = cross_entropy_with_probs(&Tensor::zeros(&[3, 16]), &[0, 5, 15]).unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_with_probs(&Tensor::zeros(&[1, 4]), &[4]).is_err());
    }
}
