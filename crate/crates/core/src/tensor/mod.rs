//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! Storage is row-major with an explicit shape. Every operation the
//! recurrent models need is recorded on a [`Tape`]; gradients are obtained by
//! replaying the recorded backward rules in reverse order.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{check_gradients, GradCheckReport, ParamCheck};
pub use tape::{Elementwise, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a column vector, got shape {shape:?}")]
    NotAVector { op: &'static str, shape: Vec<usize> },
    #[error("target index {target} out of range for {size} classes")]
    TargetOutOfRange { target: usize, size: usize },
    #[error("row {row} out of range for table with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A dense tensor with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::InvalidShape { shape, len: values.len() });
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; len]).expect("zeros: shape must be non-empty and positive")
    }

    /// Matrix from nested rows; panics on ragged input (test and fixture helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], values).expect("from_rows: empty matrix")
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::new(vec![n, 1], values).expect("column: empty vector")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1, 1], vec![value]).unwrap()
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Rows of a 2-D tensor (first dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor; 1 for a 1-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_column(&self) -> bool {
        self.shape.len() == 2 && self.shape[1] == 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Appends rows to a 2-D tensor (used to grow embedding tables).
    pub fn append_rows(&mut self, rows: &[f64]) -> Result<()> {
        let c = self.cols();
        if self.shape.len() != 2 || rows.len() % c != 0 || rows.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "append_rows",
                left: self.shape.clone(),
                right: vec![rows.len()],
            });
        }
        self.values.extend_from_slice(rows);
        self.shape[0] += rows.len() / c;
        self.grad = None;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A named, ordered collection of parameter tensors.
///
/// Order is significant: the index of a tensor in [`Parameters::tensors`] is the
/// key it is registered under on a tape, and the key under which gradients are
/// reported.
pub trait Parameters {
    fn tensors(&self) -> Vec<ParamRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn clear_grads(&mut self) {
        for t in self.tensors_mut() {
            t.clear_grad();
        }
    }

    /// Adds tape gradients (keyed by parameter index) into the tensors.
    fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        let mut tensors = self.tensors_mut();
        for (key, g) in grads.params() {
            if scale == 1.0 {
                tensors[key].accumulate_grad(g);
            } else {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                tensors[key].accumulate_grad(&scaled);
            }
        }
    }
}

/// Borrowed view of one parameter with its metadata.
#[derive(Clone, Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    /// Lookup tables whose rows are updated independently (embeddings).
    pub row_sparse: bool,
}

impl Parameters for Vec<Tensor> {
    fn tensors(&self) -> Vec<ParamRef<'_>> {
        self.iter()
            .enumerate()
            .map(|(i, t)| ParamRef { name: format!("param{i}"), tensor: t, row_sparse: false })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}
