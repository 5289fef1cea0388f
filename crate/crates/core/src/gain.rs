//! Observer gain synthesis for the distributed compensator.
//!
//! `P0` solves `A P0 + P0 Aᵀ + I − P0 Cᵀ C P0 = 0`; the compensator gain is
//! `K = μ P0 Cᵀ` with `μ ≥ 1 / min Re λ(Ĥ)`. The stacked error matrix
//! `Â = I_D ⊗ A − Ĥ ⊗ (K C)` is then Hurwitz, which is checked both
//! directly and eigenvalue-by-eigenvalue of `Ĥ`.

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use crate::linalg::{self, complex_rank, to_complex, LinalgError, C64};

/// Tolerance on the real part of the leader's eigenvalues.
pub const NEUTRAL_TOL: f64 = 1e-9;
/// Relative rank tolerance for the PBH detectability test.
pub const PBH_RANK_TOL: f64 = 1e-9;
/// Accepted Frobenius norm of the Riccati residual.
pub const RICCATI_TOL: f64 = 1e-8;
/// Margin applied to the spectral bound when μ is chosen automatically.
pub const AUTO_MU_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GainError {
    #[error("leader dimensions inconsistent: {0}")]
    Dimensions(String),
    #[error("leader is not neutrally stable: eigenvalue {re:+.3e}{im:+.3e}i has nonzero real part")]
    NotNeutral { re: f64, im: f64 },
    #[error("leader eigenvalue {re:+.3e}{im:+.3e}i is not semi-simple (algebraic multiplicity {algebraic}, geometric {geometric})")]
    NotSemiSimple {
        re: f64,
        im: f64,
        algebraic: usize,
        geometric: usize,
    },
    #[error("(A, C) is not detectable: mode {re:+.3e}{im:+.3e}i is unobservable")]
    NotDetectable { re: f64, im: f64 },
    #[error("Riccati solve failed: {0}")]
    Riccati(String),
    #[error("mu = {mu} is below the required minimum {required} = 1/min Re λ(Ĥ)")]
    MuBelowBound { mu: f64, required: f64 },
    #[error("augmented matrix has an eigenvalue with non-positive real part ({0:.3e}); the graph has no spanning tree rooted at the leader")]
    NoSpectralBound(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Linear autonomous leader `ẋ0 = A x0`, `y0 = C x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderModel {
    pub a: DMatrix<f64>,
    pub c: RowDVector<f64>,
    pub x0: DVector<f64>,
}

impl LeaderModel {
    pub fn new(a: DMatrix<f64>, c: RowDVector<f64>, x0: DVector<f64>) -> Result<Self, GainError> {
        let nu = a.nrows();
        if nu == 0 || a.ncols() != nu {
            return Err(GainError::Dimensions(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if c.len() != nu || x0.len() != nu {
            return Err(GainError::Dimensions(format!(
                "A is {nu}x{nu} but C has {} entries and x0 has {}",
                c.len(),
                x0.len()
            )));
        }
        Ok(LeaderModel { a, c, x0 })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// All eigenvalues of `A` have zero real part and are semi-simple.
    pub fn check_neutrally_stable(&self) -> Result<(), GainError> {
        let nu = self.dim();
        let scale = self.a.norm().max(1.0);
        let eig = linalg::eigenvalues(&self.a)?;
        for l in &eig {
            if l.re.abs() > NEUTRAL_TOL * scale {
                return Err(GainError::NotNeutral { re: l.re, im: l.im });
            }
        }
        // Cluster eigenvalues and compare multiplicities.
        let cluster_tol = 1e-6 * scale;
        let mut used = vec![false; eig.len()];
        for i in 0..eig.len() {
            if used[i] {
                continue;
            }
            let members: Vec<usize> = (i..eig.len())
                .filter(|&j| !used[j] && (eig[j] - eig[i]).norm() < cluster_tol)
                .collect();
            for &j in &members {
                used[j] = true;
            }
            let center = members.iter().map(|&j| eig[j]).sum::<C64>() / members.len() as f64;
            let shifted = to_complex(&self.a) - DMatrix::<C64>::identity(nu, nu) * center;
            let geometric = nu - complex_rank(&shifted, PBH_RANK_TOL * scale.max(1.0) * 1e3);
            if geometric != members.len() {
                return Err(GainError::NotSemiSimple {
                    re: center.re,
                    im: center.im,
                    algebraic: members.len(),
                    geometric,
                });
            }
        }
        Ok(())
    }

    /// PBH test: `[A − λI; C]` has full column rank at every eigenvalue
    /// with non-negative real part.
    pub fn check_detectable(&self) -> Result<(), GainError> {
        let nu = self.dim();
        let scale = self.a.norm().max(self.c.norm()).max(1.0);
        for l in linalg::eigenvalues(&self.a)? {
            if l.re < -NEUTRAL_TOL * scale {
                continue;
            }
            let mut pbh = DMatrix::<C64>::zeros(nu + 1, nu);
            for i in 0..nu {
                for j in 0..nu {
                    pbh[(i, j)] = C64::new(self.a[(i, j)], 0.0);
                }
                pbh[(i, i)] -= l;
                pbh[(nu, i)] = C64::new(self.c[i], 0.0);
            }
            if complex_rank(&pbh, PBH_RANK_TOL * scale) < nu {
                return Err(GainError::NotDetectable { re: l.re, im: l.im });
            }
        }
        Ok(())
    }
}

/// Frobenius norm of `A P + P Aᵀ + I − P Cᵀ C P`.
pub fn riccati_residual(a: &DMatrix<f64>, c: &RowDVector<f64>, p: &DMatrix<f64>) -> f64 {
    let nu = a.nrows();
    let pct = p * c.transpose();
    (a * p + p * a.transpose() + DMatrix::identity(nu, nu) - &pct * pct.transpose()).norm()
}

/// Stabilizing solution of `A P + P Aᵀ + I − P Cᵀ C P = 0`.
///
/// The stable invariant subspace of the Hamiltonian
/// `[[Aᵀ, −CᵀC], [−I, −A]]` is read off an ordered complex Schur form;
/// a few Newton-Kleinman steps then polish the residual.
pub fn solve_care(leader: &LeaderModel) -> Result<DMatrix<f64>, GainError> {
    leader.check_detectable()?;
    let a = &leader.a;
    let c = &leader.c;
    let nu = a.nrows();
    let ctc = c.transpose() * c;

    let mut ham = DMatrix::<f64>::zeros(2 * nu, 2 * nu);
    ham.view_mut((0, 0), (nu, nu)).copy_from(&a.transpose());
    ham.view_mut((0, nu), (nu, nu)).copy_from(&(-&ctc));
    ham.view_mut((nu, 0), (nu, nu))
        .copy_from(&(-DMatrix::<f64>::identity(nu, nu)));
    ham.view_mut((nu, nu), (nu, nu)).copy_from(&(-a));

    let (q, t) = nalgebra::Schur::try_new(to_complex(&ham), f64::EPSILON, 1000 * 2 * nu)
        .ok_or(LinalgError::NoConvergence(2 * nu))?
        .unpack();
    let (q, t) = reorder_stable_first(q, t);

    let scale = ham.norm().max(1.0);
    let stable = (0..2 * nu).filter(|&i| t[(i, i)].re < 0.0).count();
    if let Some(i) = (0..2 * nu).find(|&i| t[(i, i)].re.abs() <= 1e-10 * scale) {
        return Err(GainError::Riccati(format!(
            "Hamiltonian has eigenvalue {} on the imaginary axis",
            t[(i, i)]
        )));
    }
    if stable != nu {
        return Err(GainError::Riccati(format!(
            "expected {nu} stable Hamiltonian eigenvalues, found {stable}"
        )));
    }
    let u1 = q.view((0, 0), (nu, nu)).clone_owned();
    let u2 = q.view((nu, 0), (nu, nu)).clone_owned();
    let u1_inv = u1
        .try_inverse()
        .ok_or_else(|| GainError::Riccati("stable subspace is not a graph".into()))?;
    let x = (u2 * u1_inv).map(|v| v.re);
    let mut p = (&x + x.transpose()) * 0.5;

    let mut residual = riccati_residual(a, c, &p);
    for _ in 0..8 {
        if residual <= RICCATI_TOL * 1e-3 {
            break;
        }
        let Some(next) = newton_kleinman_step(a, &ctc, &p) else {
            break;
        };
        let next_residual = riccati_residual(a, c, &next);
        if next_residual >= residual {
            break;
        }
        p = next;
        residual = next_residual;
    }

    if residual > RICCATI_TOL {
        return Err(GainError::Riccati(format!(
            "residual {residual:.3e} above tolerance {RICCATI_TOL:.0e}"
        )));
    }
    let min_eig = p.clone().symmetric_eigen().eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(GainError::Riccati(format!(
            "solution is not positive definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(p)
}

/// Moves eigenvalues with negative real part to the leading diagonal
/// positions of an upper-triangular complex Schur form by adjacent swaps.
fn reorder_stable_first(mut q: DMatrix<C64>, mut t: DMatrix<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let n = t.nrows();
    loop {
        let mut swapped = false;
        for k in 0..n.saturating_sub(1) {
            if t[(k, k)].re >= 0.0 && t[(k + 1, k + 1)].re < 0.0 {
                swap_adjacent(&mut q, &mut t, k);
                swapped = true;
            }
        }
        if !swapped {
            return (q, t);
        }
    }
}

fn swap_adjacent(q: &mut DMatrix<C64>, t: &mut DMatrix<C64>, k: usize) {
    let n = t.nrows();
    let a = t[(k, k)];
    let d = t[(k + 1, k + 1)];
    // Eigenvector of the 2x2 block for eigenvalue d.
    let v1 = t[(k, k + 1)];
    let v2 = d - a;
    let norm = (v1.norm_sqr() + v2.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    let (c1, c2) = (v1 / norm, v2 / norm);
    // G = [[c1, -conj(c2)], [c2, conj(c1)]], unitary with first column v.
    let g = [[c1, -c2.conj()], [c2, c1.conj()]];
    for j in 0..n {
        let (r0, r1) = (t[(k, j)], t[(k + 1, j)]);
        t[(k, j)] = g[0][0].conj() * r0 + g[1][0].conj() * r1;
        t[(k + 1, j)] = g[0][1].conj() * r0 + g[1][1].conj() * r1;
    }
    for i in 0..n {
        let (c0, c1_) = (t[(i, k)], t[(i, k + 1)]);
        t[(i, k)] = c0 * g[0][0] + c1_ * g[1][0];
        t[(i, k + 1)] = c0 * g[0][1] + c1_ * g[1][1];
        let (q0, q1) = (q[(i, k)], q[(i, k + 1)]);
        q[(i, k)] = q0 * g[0][0] + q1 * g[1][0];
        q[(i, k + 1)] = q0 * g[0][1] + q1 * g[1][1];
    }
    t[(k + 1, k)] = C64::new(0.0, 0.0);
    t[(k, k)] = d;
    t[(k + 1, k + 1)] = a;
}

/// One Newton-Kleinman step: solve
/// `(A − P CᵀC) X + X (A − P CᵀC)ᵀ = −(I + P CᵀC P)` for `X`.
fn newton_kleinman_step(a: &DMatrix<f64>, ctc: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let nu = a.nrows();
    let m = a - p * ctc;
    let rhs = -(DMatrix::identity(nu, nu) + p * ctc * p);
    let eye = DMatrix::<f64>::identity(nu, nu);
    let op = linalg::kron(&eye, &m) + linalg::kron(&m, &eye);
    let b = DVector::from_column_slice(rhs.as_slice());
    let x = op.lu().solve(&b)?;
    let x = DMatrix::from_column_slice(nu, nu, x.as_slice());
    Some((&x + x.transpose()) * 0.5)
}

/// `K = μ P0 Cᵀ`, rejecting μ below `required`.
pub fn synthesize_k(
    p0: &DMatrix<f64>,
    c: &RowDVector<f64>,
    mu: f64,
    required: f64,
) -> Result<DVector<f64>, GainError> {
    if !(mu >= required) {
        return Err(GainError::MuBelowBound { mu, required });
    }
    Ok(p0 * c.transpose() * mu)
}

/// Lower bound on μ: `1 / min Re λ(Ĥ)`.
pub fn mu_lower_bound(h_aug: &DMatrix<f64>) -> Result<f64, GainError> {
    let lambda_min = linalg::min_real_part(h_aug)?;
    if lambda_min <= 0.0 {
        return Err(GainError::NoSpectralBound(lambda_min));
    }
    Ok(1.0 / lambda_min)
}

/// `Â = I_D ⊗ A − Ĥ ⊗ (K C)`.
pub fn stacked_matrix(a: &DMatrix<f64>, kc: &DMatrix<f64>, h_aug: &DMatrix<f64>) -> DMatrix<f64> {
    let d = h_aug.nrows();
    linalg::kron(&DMatrix::identity(d, d), a) - linalg::kron(h_aug, kc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedCheck {
    /// `max Re λ(Â)` from the full Kronecker matrix.
    pub spectral_abscissa: f64,
    /// `max over λ_i(Ĥ) of max Re λ(Aᵀ − λ_i Cᵀ Kᵀ)`; with `K = μ P0 Cᵀ`
    /// this is `Aᵀ − λ_i μ CᵀC P0`.
    pub factored_abscissa: f64,
}

impl StackedCheck {
    pub fn is_hurwitz(&self) -> bool {
        self.spectral_abscissa < 0.0
    }

    /// Both routes agree on whether `Â` is Hurwitz.
    pub fn routes_agree(&self) -> bool {
        (self.spectral_abscissa < 0.0) == (self.factored_abscissa < 0.0)
    }
}

pub fn verify_stacked_hurwitz(
    leader: &LeaderModel,
    k: &DVector<f64>,
    h_aug: &DMatrix<f64>,
) -> Result<StackedCheck, GainError> {
    if k.len() != leader.dim() {
        return Err(GainError::Dimensions(format!(
            "K has {} entries, leader dimension is {}",
            k.len(),
            leader.dim()
        )));
    }
    let kc = k * &leader.c;
    let spectral_abscissa = linalg::spectral_abscissa(&stacked_matrix(&leader.a, &kc, h_aug))?;

    let at = to_complex(&leader.a.transpose());
    let ckt = to_complex(&kc.transpose());
    let mut factored_abscissa = f64::NEG_INFINITY;
    for lambda in linalg::eigenvalues(h_aug)? {
        let m = &at - &ckt * lambda;
        for mu in linalg::complex_eigenvalues(&m)? {
            factored_abscissa = factored_abscissa.max(mu.re);
        }
    }
    Ok(StackedCheck {
        spectral_abscissa,
        factored_abscissa,
    })
}

/// How μ is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuChoice {
    Fixed(f64),
    /// [`AUTO_MU_MARGIN`] times the spectral bound.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainDesign {
    pub p0: DMatrix<f64>,
    pub mu: f64,
    pub mu_min: f64,
    pub k: DVector<f64>,
    pub min_real_part_h_aug: f64,
    pub riccati_residual: f64,
    pub check: StackedCheck,
}

impl GainDesign {
    pub fn spectral_abscissa(&self) -> f64 {
        self.check.spectral_abscissa
    }
}

/// Full synthesis: Riccati solve, μ selection, `K`, and the Hurwitz check.
pub fn design(leader: &LeaderModel, h_aug: &DMatrix<f64>, mu: MuChoice) -> Result<GainDesign, GainError> {
    let mu_min = mu_lower_bound(h_aug)?;
    let mu = match mu {
        MuChoice::Fixed(m) => m,
        MuChoice::Auto => AUTO_MU_MARGIN * mu_min,
    };
    let p0 = solve_care(leader)?;
    let k = synthesize_k(&p0, &leader.c, mu, mu_min)?;
    let check = verify_stacked_hurwitz(leader, &k, h_aug)?;
    Ok(GainDesign {
        riccati_residual: riccati_residual(&leader.a, &leader.c, &p0),
        p0,
        mu,
        mu_min,
        k,
        min_real_part_h_aug: 1.0 / mu_min,
        check,
    })
}
