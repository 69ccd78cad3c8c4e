use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row tolerance for probability rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// A `T×V` matrix whose rows are probability distributions: the generator's
/// output, the autoencoder's reconstruction, and (degenerately) one-hot text.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSequence<S> {
    matrix: Tensor<S>,
}

impl<S: Scalar> ProbSequence<S> {
    pub fn new(matrix: Tensor<S>) -> Result<Self> {
        check_rows(&matrix)?;
        Ok(ProbSequence { matrix })
    }

    pub(crate) fn new_unchecked(matrix: Tensor<S>) -> Self {
        ProbSequence { matrix }
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor<S> {
        self.matrix
    }

    pub fn seq_len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.cols()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.matrix.argmax_rows()
    }
}

/// Checks that every row has entries in `[0, 1]` summing to 1 within
/// [`ROW_SUM_TOLERANCE`].
pub fn check_rows<S: Scalar>(m: &Tensor<S>) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r);
        if row
            .iter()
            .any(|&x| !x.is_finite() || x < S::zero() || x > S::one())
        {
            return Err(Error::Range(format!("row {r} has an entry outside [0, 1]")));
        }
        let s: f64 = row.iter().map(|x| x.as_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Range(format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Splits an example-major `(m·T)×V` batch into its `m` sequences.
pub fn split_batch<S: Scalar>(batch: &Tensor<S>, seq_len: usize) -> Vec<ProbSequence<S>> {
    let v = batch.cols();
    batch
        .data()
        .chunks(seq_len * v)
        .map(|c| ProbSequence::new_unchecked(Tensor::from_vec(seq_len, v, c.to_vec())))
        .collect()
}

/// Stacks sequences into an example-major `(m·T)×V` batch.
pub fn stack<S: Scalar>(seqs: &[ProbSequence<S>]) -> Result<Tensor<S>> {
    let first = seqs.first().ok_or(Error::EmptyInput("no sequences to stack"))?;
    let shape = first.matrix.shape();
    let mut data = Vec::with_capacity(seqs.len() * first.matrix.len());
    for s in seqs {
        if s.matrix.shape() != shape {
            return Err(Error::Shape(format!(
                "cannot stack {:?} with {:?}",
                shape,
                s.matrix.shape()
            )));
        }
        data.extend_from_slice(s.matrix.data());
    }
    Ok(Tensor::from_vec(seqs.len() * shape.0, shape.1, data))
}
