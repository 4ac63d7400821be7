//! The vector-field abstraction shared by analytic systems, trained networks
//! and sparse regression models.

/// An autonomous right-hand side `x ↦ F(x)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Writes `F(x)` into `out`. Both slices have length [`dim`](Self::dim).
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval_into(x, out)
    }
}

impl<T: VectorField + ?Sized> VectorField for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval_into(x, out)
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// `F(x) = A x` for a dense row-major matrix `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim, "matrix must be dim x dim");
        Self { dim, matrix }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (row, o) in self.matrix.chunks_exact(self.dim).zip(out.iter_mut()) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}
