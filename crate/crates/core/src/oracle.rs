//! Brute-force references for the closed forms, built without the
//! closed-form histogram: the uniform-attention least-squares problem is
//! assembled from an outcome-by-outcome enumeration of the masking process
//! and solved through its normal equations.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::corpus::Layout;
use crate::error::{config_err, Result};
use crate::masking::MaskingConfig;

/// Second moments of the long-document least-squares problem
/// `min_W E || W h - e_y ||^2` averaged over topic sets.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    /// `E[h h^T]`.
    pub gram: DMatrix<f64>,
    /// `E[e_y h^T]`.
    pub cross: DMatrix<f64>,
    /// `E[||e_y||^2]`, always 1.
    pub target_sq: f64,
}

/// Expected observed token for one original word, one outcome at a time.
fn observed_distribution(word: usize, cfg: &MaskingConfig, vocab: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab];
    let n_words = (vocab - 1) as f64;
    // untouched
    out[word] += 1.0 - cfg.p_mask;
    // selected and kept
    out[word] += cfg.p_mask * cfg.p_keep;
    // selected and replaced by a uniform word
    for slot in out.iter_mut().skip(1) {
        *slot += cfg.p_mask * cfg.p_random / n_words;
    }
    // selected and masked
    out[0] += cfg.p_mask * (1.0 - cfg.p_keep - cfg.p_random);
    out
}

impl NormalEquations {
    pub fn build(cfg: &MaskingConfig, layout: Layout, subsets: &[Vec<usize>]) -> Result<Self> {
        cfg.validate()?;
        if subsets.is_empty() {
            return Err(config_err("no topic subsets"));
        }
        let vocab = layout.vocab_size();
        let v = layout.words_per_topic;
        let mut gram = DMatrix::zeros(vocab, vocab);
        let mut cross = DMatrix::zeros(vocab, vocab);
        for s in subsets {
            let words: Vec<usize> = s.iter().flat_map(|&t| (t - 1) * v + 1..=t * v).collect();
            let share = 1.0 / words.len() as f64;
            let mut h = vec![0.0; vocab];
            for &w in &words {
                for (slot, x) in h.iter_mut().zip(observed_distribution(w, cfg, vocab)) {
                    *slot += share * x;
                }
            }
            let h = DMatrix::from_column_slice(vocab, 1, &h);
            gram += &h * h.transpose();
            for &w in &words {
                for c in 0..vocab {
                    cross[(w, c)] += share * h[c];
                }
            }
        }
        let n = subsets.len() as f64;
        Ok(Self {
            gram: gram / n,
            cross: cross / n,
            target_sq: 1.0,
        })
    }

    pub fn loss(&self, w: &Array2<f64>) -> f64 {
        let w = to_dmatrix(w);
        let quad = (&w * &self.gram).component_mul(&w).sum();
        let lin = w.component_mul(&self.cross).sum();
        quad - 2.0 * lin + self.target_sq
    }

    /// Minimizer of `loss(W) + lambda ||W||_F^2`.
    pub fn ridge(&self, lambda: f64) -> Array2<f64> {
        let eig = SymmetricEigen::new(self.gram.clone());
        let inv = eig.eigenvalues.map(|e| 1.0 / (e + lambda));
        from_dmatrix(&self.apply(&eig, &inv))
    }

    /// `lambda -> 0` limit of [`Self::ridge`]: the minimum-norm minimizer,
    /// via a pseudo-inverse that drops eigenvalues below
    /// `rel_tol * max_eigenvalue`.
    pub fn ridge_limit(&self, rel_tol: f64) -> Array2<f64> {
        let eig = SymmetricEigen::new(self.gram.clone());
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let inv = eig.eigenvalues.map(|e| if e > rel_tol * top { 1.0 / e } else { 0.0 });
        from_dmatrix(&self.apply(&eig, &inv))
    }

    fn apply(&self, eig: &SymmetricEigen<f64, nalgebra::Dyn>, inv: &nalgebra::DVector<f64>) -> DMatrix<f64> {
        let q = &eig.eigenvectors;
        let scaled = q * DMatrix::from_diagonal(inv);
        &self.cross * scaled * q.transpose()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}
