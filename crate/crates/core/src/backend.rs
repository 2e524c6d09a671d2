//! Matrix operations used by bound propagation, abstracted over evaluation
//! strategy.
//!
//! [`Eager`] computes values directly. [`crate::tape::Tape`] records the
//! same operations for reverse-mode differentiation, so one propagation
//! routine serves certification, β optimization and training.

use std::rc::Rc;

use crate::matrix::Matrix;
use crate::relax::{hull_case, relu_hull, HullCase};

pub trait Backend {
    type M: Clone;

    fn constant(&mut self, m: Matrix) -> Self::M;
    fn value<'a>(&'a self, m: &'a Self::M) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn add(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn sub(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn neg(&mut self, a: &Self::M) -> Self::M;
    /// `max(a, 0)` elementwise.
    fn pos_part(&mut self, a: &Self::M) -> Self::M;
    /// `min(a, 0)` elementwise.
    fn neg_part(&mut self, a: &Self::M) -> Self::M;
    /// `m · diag(v)` for a column vector `v`.
    fn scale_cols(&mut self, m: &Self::M, v: &Self::M) -> Self::M;
    /// `m · v` for a column vector `v`.
    fn matvec(&mut self, m: &Self::M, v: &Self::M) -> Self::M;
    /// Row-wise L1 norm as a column vector; `sign(0) = 0` when differentiated.
    fn abs_row_sum(&mut self, m: &Self::M) -> Self::M;
    fn scale(&mut self, m: &Self::M, s: f64) -> Self::M;
    /// Hull lines of ReLU distances over `[l, u]` as four column vectors:
    /// lower slope, lower offset, upper slope, upper offset.
    fn relu_hull(&mut self, l: &Self::M, u: &Self::M) -> [Self::M; 4];
    /// `m` with `coef · β` added to every entry of column `col`.
    fn add_to_column(&mut self, m: &Self::M, beta: &Self::M, col: usize, coef: f64) -> Self::M;
    fn sum(&mut self, m: &Self::M) -> Self::M;
}

/// Direct evaluation. Optionally records the sign pattern of every
/// non-differentiable operation so callers can tell whether two nearby
/// evaluations lie on the same smooth piece.
#[derive(Debug, Default)]
pub struct Eager {
    pattern: Option<Vec<i8>>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recording() -> Self {
        Self {
            pattern: Some(Vec::new()),
        }
    }

    pub fn take_pattern(&mut self) -> Option<Vec<i8>> {
        self.pattern.take()
    }

    fn record_signs(&mut self, m: &Matrix) {
        if let Some(p) = &mut self.pattern {
            p.extend(m.data().iter().map(|&x| sign(x) as i8));
        }
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn hull_columns(l: &Matrix, u: &Matrix) -> [Matrix; 4] {
    let n = l.rows();
    let mut out = [
        Matrix::zeros(n, 1),
        Matrix::zeros(n, 1),
        Matrix::zeros(n, 1),
        Matrix::zeros(n, 1),
    ];
    for i in 0..n {
        let h = relu_hull(l.data()[i], u.data()[i]);
        out[0].data_mut()[i] = h.lower.slope;
        out[1].data_mut()[i] = h.lower.offset;
        out[2].data_mut()[i] = h.upper.slope;
        out[3].data_mut()[i] = h.upper.offset;
    }
    out
}

pub(crate) fn scale_cols(m: &Matrix, v: &Matrix) -> Matrix {
    assert_eq!(m.cols(), v.rows(), "scale_cols dimension");
    let mut out = m.clone();
    let cols = m.cols();
    for r in 0..m.rows() {
        for (o, s) in out.row_mut(r).iter_mut().zip(v.data().iter().take(cols)) {
            *o *= s;
        }
    }
    out
}

impl Backend for Eager {
    type M = Rc<Matrix>;

    fn constant(&mut self, m: Matrix) -> Self::M {
        Rc::new(m)
    }

    fn value<'a>(&'a self, m: &'a Self::M) -> &'a Matrix {
        m
    }

    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M {
        Rc::new(a.matmul(b))
    }

    fn add(&mut self, a: &Self::M, b: &Self::M) -> Self::M {
        let mut out = (**a).clone();
        out.add_assign(b);
        Rc::new(out)
    }

    fn sub(&mut self, a: &Self::M, b: &Self::M) -> Self::M {
        Rc::new(a.zip_map(b, |x, y| x - y))
    }

    fn neg(&mut self, a: &Self::M) -> Self::M {
        Rc::new(a.map(|x| -x))
    }

    fn pos_part(&mut self, a: &Self::M) -> Self::M {
        self.record_signs(a);
        Rc::new(a.map(|x| x.max(0.0)))
    }

    fn neg_part(&mut self, a: &Self::M) -> Self::M {
        self.record_signs(a);
        Rc::new(a.map(|x| x.min(0.0)))
    }

    fn scale_cols(&mut self, m: &Self::M, v: &Self::M) -> Self::M {
        Rc::new(scale_cols(m, v))
    }

    fn matvec(&mut self, m: &Self::M, v: &Self::M) -> Self::M {
        Rc::new(m.matmul(v))
    }

    fn abs_row_sum(&mut self, m: &Self::M) -> Self::M {
        self.record_signs(m);
        Rc::new(m.abs_row_sums())
    }

    fn scale(&mut self, m: &Self::M, s: f64) -> Self::M {
        Rc::new(m.scaled(s))
    }

    fn relu_hull(&mut self, l: &Self::M, u: &Self::M) -> [Self::M; 4] {
        if let Some(p) = &mut self.pattern {
            p.extend(
                l.data()
                    .iter()
                    .zip(u.data())
                    .map(|(&l, &u)| match hull_case(l, u) {
                        HullCase::Zero => 0,
                        HullCase::NonPositive => 1,
                        HullCase::NonNegative => 2,
                        HullCase::Straddle => 3,
                    }),
            );
        }
        hull_columns(l, u).map(Rc::new)
    }

    fn add_to_column(&mut self, m: &Self::M, beta: &Self::M, col: usize, coef: f64) -> Self::M {
        let b = beta.item();
        let mut out = (**m).clone();
        for r in 0..out.rows() {
            let v = out.get(r, col);
            out.set(r, col, v + coef * b);
        }
        Rc::new(out)
    }

    fn sum(&mut self, m: &Self::M) -> Self::M {
        Rc::new(Matrix::scalar(m.data().iter().sum()))
    }
}
