//! Per-layer linear bounds on state distances.
//!
//! For a layer `x_i = f(x_j, x_k)` a relaxation gives
//! `Ψ_j Δx_j + Ψ_k Δx_k + λ ≤ Δx_i ≤ Ω_j Δx_j + Ω_k Δx_k + μ`.
//! Linear, Add and Sub layers are exact. The ReLU distance
//! `Δx_i = relu(x_j + Δx_j) − relu(x_j)` ranges, over all `x_j ∈ ℝ`, over the
//! butterfly `min(0, Δx_j) ≤ Δx_i ≤ max(0, Δx_j)`; for `Δx_j ∈ [l, u]` the
//! relaxation below is the convex hull of that region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Below this magnitude an interval endpoint is treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBound {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl IntervalBound {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape(format!(
                "interval bounds of lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite interval at neuron {i}"
                )));
            }
            if l > h {
                return Err(Error::InvertedInterval {
                    index: i,
                    lo: l,
                    hi: h,
                });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

/// A coefficient acting on one layer input.
#[derive(Clone, Debug, PartialEq)]
pub enum Coeff {
    Dense(Matrix),
    Diagonal(Vec<f64>),
    /// A scalar multiple of the identity.
    Scalar(f64),
}

impl Coeff {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Coeff::Dense(m) => (0..m.rows())
                .map(|r| crate::matrix::dot(m.row(r), x))
                .collect(),
            Coeff::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            Coeff::Scalar(s) => x.iter().map(|v| s * v).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineBound {
    pub coeff_j: Coeff,
    pub coeff_k: Option<Coeff>,
    pub offset: Vec<f64>,
}

impl AffineBound {
    pub fn eval(&self, dx_j: &[f64], dx_k: Option<&[f64]>) -> Vec<f64> {
        let mut out = self.coeff_j.apply(dx_j);
        if let (Some(c), Some(x)) = (&self.coeff_k, dx_k) {
            for (o, v) in out.iter_mut().zip(c.apply(x)) {
                *o += v;
            }
        }
        for (o, b) in out.iter_mut().zip(&self.offset) {
            *o += b;
        }
        out
    }
}

/// Lower bound `(Ψ, λ)` and upper bound `(Ω, μ)` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRelaxation {
    pub lower: AffineBound,
    pub upper: AffineBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchSign {
    /// `Δx_j ≤ 0`
    NonPositive,
    /// `Δx_j ≥ 0`
    NonNegative,
}

impl BranchSign {
    /// Multiplier sign `S` of the Lagrangian term `β·S·Δx_j`, which is
    /// non-positive on the constrained half.
    pub fn lagrange_sign(self) -> f64 {
        match self {
            BranchSign::NonPositive => 1.0,
            BranchSign::NonNegative => -1.0,
        }
    }

    pub fn admits(self, dx: f64) -> bool {
        match self {
            BranchSign::NonPositive => dx <= 0.0,
            BranchSign::NonNegative => dx >= 0.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            BranchSign::NonPositive => BranchSign::NonNegative,
            BranchSign::NonNegative => BranchSign::NonPositive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub slope: f64,
    pub offset: f64,
}

impl Line {
    pub fn at(self, x: f64) -> f64 {
        self.slope * x + self.offset
    }
}

/// Lower and upper bounding lines of one ReLU distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluHull {
    pub lower: Line,
    pub upper: Line,
}

/// Which piece of the hull formula applies; the relaxation is smooth in
/// `(l, u)` within a case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HullCase {
    Zero,
    NonPositive,
    NonNegative,
    Straddle,
}

pub fn hull_case(l: f64, u: f64) -> HullCase {
    let l_zero = l.abs() < DEGENERATE_EPS;
    let u_zero = u.abs() < DEGENERATE_EPS;
    if l_zero && u_zero {
        HullCase::Zero
    } else if u <= 0.0 || u_zero {
        HullCase::NonPositive
    } else if l >= 0.0 || l_zero {
        HullCase::NonNegative
    } else {
        HullCase::Straddle
    }
}

pub fn relu_hull(l: f64, u: f64) -> ReluHull {
    let flat = Line {
        slope: 0.0,
        offset: 0.0,
    };
    let ident = Line {
        slope: 1.0,
        offset: 0.0,
    };
    match hull_case(l, u) {
        HullCase::Zero => ReluHull {
            lower: flat,
            upper: flat,
        },
        HullCase::NonPositive => ReluHull {
            lower: ident,
            upper: flat,
        },
        HullCase::NonNegative => ReluHull {
            lower: flat,
            upper: ident,
        },
        HullCase::Straddle => {
            let w = u - l;
            ReluHull {
                // through (l, l) and (u, 0)
                lower: Line {
                    slope: -l / w,
                    offset: u * l / w,
                },
                // through (l, 0) and (u, u)
                upper: Line {
                    slope: u / w,
                    offset: -u * l / w,
                },
            }
        }
    }
}

/// Partial derivatives `[∂/∂l, ∂/∂u]` of
/// `[lower slope, lower offset, upper slope, upper offset]`.
pub fn relu_hull_partials(l: f64, u: f64) -> [[f64; 2]; 4] {
    if hull_case(l, u) != HullCase::Straddle {
        return [[0.0; 2]; 4];
    }
    let w2 = (u - l) * (u - l);
    [
        [-u / w2, l / w2],
        [u * u / w2, -l * l / w2],
        [u / w2, -l / w2],
        [-u * u / w2, l * l / w2],
    ]
}

pub fn relax_linear(weight: &Matrix) -> LayerRelaxation {
    let exact = AffineBound {
        coeff_j: Coeff::Dense(weight.clone()),
        coeff_k: None,
        offset: vec![0.0; weight.rows()],
    };
    LayerRelaxation {
        lower: exact.clone(),
        upper: exact,
    }
}

fn relax_binary(n: usize, k_coeff: f64) -> LayerRelaxation {
    let exact = AffineBound {
        coeff_j: Coeff::Scalar(1.0),
        coeff_k: Some(Coeff::Scalar(k_coeff)),
        offset: vec![0.0; n],
    };
    LayerRelaxation {
        lower: exact.clone(),
        upper: exact,
    }
}

pub fn relax_add(n: usize) -> LayerRelaxation {
    relax_binary(n, 1.0)
}

pub fn relax_sub(n: usize) -> LayerRelaxation {
    relax_binary(n, -1.0)
}

pub fn relax_relu(bound: &IntervalBound) -> Result<LayerRelaxation> {
    let bound = IntervalBound::new(bound.lo.clone(), bound.hi.clone())?;
    let hulls: Vec<ReluHull> = bound
        .lo
        .iter()
        .zip(&bound.hi)
        .map(|(&l, &u)| relu_hull(l, u))
        .collect();
    Ok(from_hulls(&hulls))
}

/// Exact triangle hull of a single sign-constrained ReLU distance.
pub fn relax_relu_branched(sign: BranchSign) -> LayerRelaxation {
    from_hulls(&[branched_hull(sign)])
}

pub fn branched_hull(sign: BranchSign) -> ReluHull {
    match sign {
        BranchSign::NonPositive => relu_hull(-1.0, 0.0),
        BranchSign::NonNegative => relu_hull(0.0, 1.0),
    }
}

pub(crate) fn from_hulls(hulls: &[ReluHull]) -> LayerRelaxation {
    let side = |pick: fn(&ReluHull) -> Line| AffineBound {
        coeff_j: Coeff::Diagonal(hulls.iter().map(|h| pick(h).slope).collect()),
        coeff_k: None,
        offset: hulls.iter().map(|h| pick(h).offset).collect(),
    };
    LayerRelaxation {
        lower: side(|h| h.lower),
        upper: side(|h| h.upper),
    }
}
