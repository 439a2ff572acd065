//! Shifted Legendre basis on the normalized time axis `s ∈ [0, 1]`.
//!
//! `Φ_j(s) = P_j(2s − 1)` where `P_j` follows the three-term recurrence
//!
//! ```text
//! P_0 = 1,  P_1 = x,  (n+1) P_{n+1} = (2n+1) x P_n − n P_{n−1}
//! ```
//!
//! Derivatives use `P'_{n+1} = P'_{n−1} + (2n+1) P_n`, which has no endpoint
//! singularity, and the chain rule `dΦ_j/ds = 2 P'_j(x)`.

use nalgebra::DMatrix;

use crate::error::{FlashError, Result};

/// Largest supported degree.
pub const MAX_DEGREE: usize = 16;

/// A shifted Legendre family of fixed degree `K` (`K + 1` functions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegendreBasis {
    degree: usize,
}

impl LegendreBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(FlashError::InvalidDegree(degree));
        }
        Ok(Self { degree })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions, `K + 1`.
    pub fn len(&self) -> usize {
        self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, s: f64) -> Result<Vec<f64>> {
        eval_basis(s, self.degree)
    }

    pub fn eval_derivative(&self, s: f64) -> Result<Vec<f64>> {
        eval_basis_derivative(s, self.degree)
    }
}

fn check_domain(s: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&s) {
        Ok(2.0 * s - 1.0)
    } else {
        Err(FlashError::Domain(s))
    }
}

fn fill_legendre(x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0);
    }
}

/// `[Φ_0(s), …, Φ_K(s)]`.
pub fn eval_basis(s: f64, degree: usize) -> Result<Vec<f64>> {
    let x = check_domain(s)?;
    let mut out = vec![0.0; degree + 1];
    fill_legendre(x, &mut out);
    Ok(out)
}

/// `[dΦ_0/ds, …, dΦ_K/ds]`.
pub fn eval_basis_derivative(s: f64, degree: usize) -> Result<Vec<f64>> {
    let x = check_domain(s)?;
    let mut p = vec![0.0; degree + 1];
    fill_legendre(x, &mut p);
    let mut dp = vec![0.0; degree + 1];
    if degree >= 1 {
        dp[1] = 1.0;
    }
    for n in 1..degree {
        dp[n + 1] = dp[n - 1] + (2.0 * n as f64 + 1.0) * p[n];
    }
    for d in &mut dp {
        *d *= 2.0;
    }
    Ok(dp)
}

/// `[d^m Φ_0/ds^m, …, d^m Φ_K/ds^m]` for any order `m`.
///
/// Uses `P^{(m)}_{n+1} = P^{(m)}_{n−1} + (2n+1) P^{(m−1)}_n` order by order.
pub fn eval_basis_nth_derivative(s: f64, degree: usize, order: usize) -> Result<Vec<f64>> {
    let x = check_domain(s)?;
    let mut lower = vec![0.0; degree + 1];
    fill_legendre(x, &mut lower);
    for _ in 0..order {
        let mut next = vec![0.0; degree + 1];
        if degree >= 1 {
            next[1] = lower[0];
        }
        for n in 1..degree {
            next[n + 1] = next[n - 1] + (2.0 * n as f64 + 1.0) * lower[n];
        }
        lower = next;
    }
    let scale = 2f64.powi(order as i32);
    for v in &mut lower {
        *v *= scale;
    }
    Ok(lower)
}

/// Basis values stacked over a node grid, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    nodes: Vec<f64>,
    values: DMatrix<f64>,
}

impl BasisMatrix {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn degree(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

/// Purpose of a basis matrix; fitting requires at least `K + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixUse {
    Fitting,
    Evaluation,
}

pub fn basis_matrix(nodes: &[f64], degree: usize, usage: MatrixUse) -> Result<BasisMatrix> {
    LegendreBasis::new(degree)?;
    if usage == MatrixUse::Fitting && nodes.len() < degree + 1 {
        return Err(FlashError::Underdetermined {
            nodes: nodes.len(),
            coeffs: degree + 1,
        });
    }
    if let Some(i) = nodes.windows(2).position(|w| w[1] <= w[0]) {
        return Err(FlashError::NodeOrder(i + 1));
    }
    let mut values = DMatrix::zeros(nodes.len(), degree + 1);
    for (i, &s) in nodes.iter().enumerate() {
        let row = eval_basis(s, degree)?;
        for (j, v) in row.into_iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    Ok(BasisMatrix {
        nodes: nodes.to_vec(),
        values,
    })
}

/// `n` uniformly spaced nodes on `[0, 1]`, endpoints included.
pub fn uniform_nodes(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}
