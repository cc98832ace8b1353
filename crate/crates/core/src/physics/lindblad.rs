//! Four-level ladder (|g>, |e>, |r>, |s>) under the Lindblad master equation.
//!
//! Everything is in units with hbar = 1: Hamiltonian entries and decay rates
//! are angular frequencies in rad/s.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Level indices in the 4x4 density matrix.
pub const G: usize = 0;
pub const E: usize = 1;
pub const R: usize = 2;
pub const S: usize = 3;

const DIM: usize = 4;
const VEC: usize = DIM * DIM;

pub type Matrix4 = [[C64; DIM]; DIM];

/// Rabi frequencies, detunings and decay rates of the ladder, all in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomParams {
    pub omega_p: f64,
    pub omega_c: f64,
    pub delta_p: f64,
    pub delta_c: f64,
    pub delta_s: f64,
    /// |e> -> |g>
    pub gamma_e: f64,
    /// |r> -> |e>
    pub gamma_r: f64,
    /// |s> -> |r>
    pub gamma_s: f64,
}

impl Default for AtomParams {
    fn default() -> Self {
        Self {
            omega_p: TAU * 2e6,
            omega_c: TAU * 4e6,
            delta_p: 0.0,
            delta_c: 0.0,
            delta_s: 0.0,
            gamma_e: TAU * 6e6,
            gamma_r: TAU * 50e3,
            gamma_s: TAU * 50e3,
        }
    }
}

impl AtomParams {
    /// Checks the configuration-level invariants: positive drive strengths and
    /// non-negative decay rates.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega_p,
            self.omega_c,
            self.delta_p,
            self.delta_c,
            self.delta_s,
            self.gamma_e,
            self.gamma_r,
            self.gamma_s,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite value".into()));
        }
        if self.omega_p <= 0.0 || self.omega_c <= 0.0 {
            return Err(Error::InvalidParams(
                "omega_p and omega_c must be positive".into(),
            ));
        }
        if self.gamma_e < 0.0 || self.gamma_r < 0.0 || self.gamma_s < 0.0 {
            return Err(Error::InvalidParams("decay rates must be >= 0".into()));
        }
        Ok(())
    }

    /// Largest magnitude among the Rabi frequencies, detunings and decay rates.
    pub fn max_rate(&self) -> f64 {
        [
            self.omega_p,
            self.omega_c,
            self.delta_p,
            self.delta_c,
            self.delta_s,
            self.gamma_e,
            self.gamma_r,
            self.gamma_s,
        ]
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Ladder Hamiltonian with the microwave Rabi frequency frozen at `omega_s`.
pub fn build_hamiltonian(params: &AtomParams, omega_s: f64) -> Matrix4 {
    let z = C64::new(0.0, 0.0);
    let re = |x: f64| C64::new(x, 0.0);
    let mut h = [[z; DIM]; DIM];
    h[G][E] = re(-params.omega_p / 2.0);
    h[E][G] = h[G][E];
    h[E][E] = re(params.delta_p);
    h[E][R] = re(-params.omega_c / 2.0);
    h[R][E] = h[E][R];
    h[R][R] = re(params.delta_c + params.delta_p);
    h[R][S] = re(-omega_s / 2.0);
    h[S][R] = h[R][S];
    h[S][S] = re(params.delta_c + params.delta_p + params.delta_s);
    h
}

/// Collapse channels as (lower level, upper level, rate).
fn channels(params: &AtomParams) -> [(usize, usize, f64); 3] {
    [
        (G, E, params.gamma_e),
        (E, R, params.gamma_r),
        (R, S, params.gamma_s),
    ]
}

fn matmul(a: &Matrix4, b: &Matrix4) -> Matrix4 {
    let mut out = [[C64::new(0.0, 0.0); DIM]; DIM];
    for i in 0..DIM {
        for k in 0..DIM {
            let aik = a[i][k];
            if aik == C64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..DIM {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Right-hand side of the master equation, evaluated directly in operator form:
/// `-i[H, rho] + sum_m (C rho C^dag - {C^dag C, rho}/2)`.
pub fn master_equation_rhs(params: &AtomParams, omega_s: f64, rho: &Matrix4) -> Matrix4 {
    let h = build_hamiltonian(params, omega_s);
    let hr = matmul(&h, rho);
    let rh = matmul(rho, &h);
    let mi = C64::new(0.0, -1.0);
    let mut out = [[C64::new(0.0, 0.0); DIM]; DIM];
    for i in 0..DIM {
        for j in 0..DIM {
            out[i][j] = mi * (hr[i][j] - rh[i][j]);
        }
    }
    for (lo, hi, rate) in channels(params) {
        // C = sqrt(rate) |lo><hi|, so C rho C^dag = rate rho_hh |lo><lo| and
        // C^dag C = rate |hi><hi|.
        out[lo][lo] += rho[hi][hi] * rate;
        for k in 0..DIM {
            out[hi][k] -= rho[hi][k] * (rate / 2.0);
            out[k][hi] -= rho[k][hi] * (rate / 2.0);
        }
    }
    out
}

#[inline]
fn vidx(a: usize, b: usize) -> usize {
    a * DIM + b
}

/// 16x16 generator acting on row-major vectorized `rho`.
pub fn liouvillian(params: &AtomParams, omega_s: f64) -> [[C64; VEC]; VEC] {
    let h = build_hamiltonian(params, omega_s);
    let mut l = [[C64::new(0.0, 0.0); VEC]; VEC];
    add_commutator(&mut l, &h);
    for (lo, hi, rate) in channels(params) {
        l[vidx(lo, lo)][vidx(hi, hi)] += rate;
        for k in 0..DIM {
            l[vidx(hi, k)][vidx(hi, k)] -= rate / 2.0;
            l[vidx(k, hi)][vidx(k, hi)] -= rate / 2.0;
        }
    }
    l
}

fn add_commutator(l: &mut [[C64; VEC]; VEC], h: &Matrix4) {
    let i = C64::new(0.0, 1.0);
    for a in 0..DIM {
        for c in 0..DIM {
            let hac = h[a][c];
            if hac == C64::new(0.0, 0.0) {
                continue;
            }
            for b in 0..DIM {
                // -i (H rho)_{ab} = -i H_ac rho_cb
                l[vidx(a, b)][vidx(c, b)] -= i * hac;
                // +i (rho H)_{ba} = +i rho_bc H_ca, reusing the same entry
                l[vidx(b, c)][vidx(b, a)] += i * h[a][c];
            }
        }
    }
}

/// A 4x4 density matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix(pub Matrix4);

impl DensityMatrix {
    pub fn entries(&self) -> &Matrix4 {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.0[row][col]
    }

    /// Probe coherence `rho_eg`.
    pub fn rho_eg(&self) -> C64 {
        self.0[E][G]
    }

    pub fn trace(&self) -> C64 {
        (0..DIM).map(|k| self.0[k][k]).sum()
    }

    /// Largest `|rho_ij - conj(rho_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..DIM {
            for j in 0..DIM {
                worst = worst.max((self.0[i][j] - self.0[j][i].conj()).norm());
            }
        }
        worst
    }

    /// Eigenvalues of the Hermitian part, ascending.
    ///
    /// Uses the real 8x8 embedding `[[A, -B], [B, A]]` of `A + iB`, whose
    /// spectrum is the Hermitian spectrum with each value doubled.
    pub fn eigenvalues(&self) -> [f64; DIM] {
        let mut m = DMatrix::<f64>::zeros(2 * DIM, 2 * DIM);
        for i in 0..DIM {
            for j in 0..DIM {
                let z = (self.0[i][j] + self.0[j][i].conj()) / 2.0;
                m[(i, j)] = z.re;
                m[(i + DIM, j + DIM)] = z.re;
                m[(i, j + DIM)] = -z.im;
                m[(i + DIM, j)] = z.im;
            }
        }
        let mut vals: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        [vals[0], vals[2], vals[4], vals[6]]
    }

    /// Frobenius norm of `d(rho)/dt` at this state, rad/s.
    pub fn residual(&self, params: &AtomParams, omega_s: f64) -> f64 {
        let d = master_equation_rhs(params, omega_s, &self.0);
        d.iter()
            .flat_map(|row| row.iter())
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// [`Self::residual`] with time measured in units of the fastest rate in
    /// the problem, i.e. divided by `max(|rate|, |omega_s|)`. This is the
    /// quantity that can be held to a fixed tolerance independent of units.
    pub fn scaled_residual(&self, params: &AtomParams, omega_s: f64) -> f64 {
        self.residual(params, omega_s) / params.max_rate().max(omega_s.abs()).max(1.0)
    }
}

/// Steady-state solver with the `omega_s`-independent part of the generator
/// precomputed, so repeated solves along a time series only patch in the
/// microwave coupling.
#[derive(Debug, Clone)]
pub struct SteadyStateSolver {
    params: AtomParams,
    base: [[C64; VEC]; VEC],
    scale: f64,
}

/// Relative pivot threshold below which the constrained generator is treated
/// as rank-deficient.
const SINGULAR_RTOL: f64 = 1e-12;

impl SteadyStateSolver {
    pub fn new(params: &AtomParams) -> Result<Self> {
        let rates = [params.gamma_e, params.gamma_r, params.gamma_s];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidParams(
                "decay rates must be finite and >= 0".into(),
            ));
        }
        if rates.iter().all(|r| *r == 0.0) {
            return Err(Error::InvalidParams(
                "at least one decay rate must be positive for a unique steady state".into(),
            ));
        }
        let mut base = liouvillian(params, 0.0);
        // Trace constraint replaces the rho_gg equation.
        base[0] = [C64::new(0.0, 0.0); VEC];
        for k in 0..DIM {
            base[0][vidx(k, k)] = C64::new(1.0, 0.0);
        }
        Ok(Self {
            params: *params,
            base,
            scale: params.max_rate().max(1.0),
        })
    }

    pub fn params(&self) -> &AtomParams {
        &self.params
    }

    pub fn solve(&self, omega_s: f64) -> Result<DensityMatrix> {
        let mut a = self.base;
        let i = C64::new(0.0, 1.0);
        let h = C64::new(-omega_s / 2.0, 0.0);
        // Microwave coupling H_rs = H_sr = -omega_s / 2. Row 0 (the trace row)
        // never receives these terms.
        for (p, q) in [(R, S), (S, R)] {
            for b in 0..DIM {
                a[vidx(p, b)][vidx(q, b)] -= i * h;
                a[vidx(b, q)][vidx(b, p)] += i * h;
            }
        }
        let mut rhs = [C64::new(0.0, 0.0); VEC];
        rhs[0] = C64::new(1.0, 0.0);
        let x = lu_solve(&mut a, &mut rhs, self.scale * SINGULAR_RTOL)?;
        let mut rho = [[C64::new(0.0, 0.0); DIM]; DIM];
        for r in 0..DIM {
            for c in 0..DIM {
                rho[r][c] = x[vidx(r, c)];
            }
        }
        Ok(DensityMatrix(rho))
    }
}

/// Steady state of the master equation at a frozen microwave Rabi frequency.
pub fn steady_state(params: &AtomParams, omega_s: f64) -> Result<DensityMatrix> {
    SteadyStateSolver::new(params)?.solve(omega_s)
}

/// Gaussian elimination with partial pivoting, in place.
fn lu_solve(a: &mut [[C64; VEC]; VEC], b: &mut [C64; VEC], tol: f64) -> Result<[C64; VEC]> {
    let mut min_pivot = f64::INFINITY;
    for col in 0..VEC {
        let mut piv = col;
        let mut best = a[col][col].norm_sqr();
        for row in col + 1..VEC {
            let m = a[row][col].norm_sqr();
            if m > best {
                best = m;
                piv = row;
            }
        }
        let mag = best.sqrt();
        min_pivot = min_pivot.min(mag);
        if !(mag > tol) {
            return Err(Error::SingularSystem { pivot: mag });
        }
        if piv != col {
            a.swap(piv, col);
            b.swap(piv, col);
        }
        let inv = a[col][col].inv();
        let (upper, lower) = a.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for (off, row) in lower.iter_mut().enumerate() {
            let f = row[col] * inv;
            if f == C64::new(0.0, 0.0) {
                continue;
            }
            row[col] = C64::new(0.0, 0.0);
            for k in col + 1..VEC {
                row[k] -= f * pivot_row[k];
            }
            b[col + 1 + off] -= f * b[col];
        }
    }
    let mut x = [C64::new(0.0, 0.0); VEC];
    for row in (0..VEC).rev() {
        let mut acc = b[row];
        for k in row + 1..VEC {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    debug_assert!(min_pivot.is_finite());
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_hermitian(m: &Matrix4) -> bool {
        (0..DIM).all(|i| (0..DIM).all(|j| m[i][j] == m[j][i].conj()))
    }

    #[test]
    fn hamiltonian_structure() {
        let p = AtomParams {
            delta_p: 0.0,
            delta_c: 0.0,
            delta_s: 0.0,
            ..AtomParams::default()
        };
        let h = build_hamiltonian(&p, 0.0);
        for k in 0..DIM {
            assert_eq!(h[k][k], C64::new(0.0, 0.0));
        }
        assert_eq!(h[G][E].re, -p.omega_p / 2.0);
        assert_eq!(h[E][R].re, -p.omega_c / 2.0);
        assert_eq!(h[R][S].re, 0.0);
        assert_eq!(h[G][R], C64::new(0.0, 0.0));
        assert_eq!(h[G][S], C64::new(0.0, 0.0));
        assert_eq!(h[E][S], C64::new(0.0, 0.0));
        assert!(is_hermitian(&h));
    }

    #[test]
    fn hamiltonian_diagonal_sums() {
        let p = AtomParams {
            omega_p: 0.0,
            omega_c: 0.0,
            delta_p: 1.0,
            delta_c: 0.0,
            delta_s: 0.0,
            ..AtomParams::default()
        };
        let h = build_hamiltonian(&p, 0.0);
        let diag: Vec<f64> = (0..DIM).map(|k| h[k][k].re).collect();
        assert_eq!(diag, vec![0.0, 1.0, 1.0, 1.0]);
        for i in 0..DIM {
            for j in 0..DIM {
                if i != j {
                    assert_eq!(h[i][j], C64::new(0.0, 0.0));
                }
            }
        }
        let p = AtomParams {
            delta_p: 0.3,
            delta_c: -1.1,
            delta_s: 2.5,
            ..AtomParams::default()
        };
        assert!(is_hermitian(&build_hamiltonian(&p, 7.0)));
    }

    #[test]
    fn liouvillian_matches_operator_form() {
        let p = AtomParams {
            delta_p: 1.3e6,
            delta_c: -0.4e6,
            delta_s: 0.9e6,
            ..AtomParams::default()
        };
        let omega_s = 3.1e6;
        let l = liouvillian(&p, omega_s);
        let mut rho = [[C64::new(0.0, 0.0); DIM]; DIM];
        for i in 0..DIM {
            for j in 0..DIM {
                rho[i][j] = C64::new((i * 3 + j) as f64 * 0.1, (j as f64 - i as f64) * 0.07);
            }
        }
        let direct = master_equation_rhs(&p, omega_s, &rho);
        for a in 0..DIM {
            for b in 0..DIM {
                let mut acc = C64::new(0.0, 0.0);
                for c in 0..DIM {
                    for d in 0..DIM {
                        acc += l[vidx(a, b)][vidx(c, d)] * rho[c][d];
                    }
                }
                assert!((acc - direct[a][b]).norm() < 1e-6 * direct[a][b].norm().max(1.0));
            }
        }
    }

    #[test]
    fn no_probe_means_ground_state() {
        let p = AtomParams {
            omega_p: 0.0,
            ..AtomParams::default()
        };
        let rho = steady_state(&p, 1e6).unwrap();
        for i in 0..DIM {
            for j in 0..DIM {
                let want = if i == G && j == G { 1.0 } else { 0.0 };
                assert!((rho.get(i, j) - C64::new(want, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn default_steady_state_invariants() {
        let p = AtomParams::default();
        let rho = steady_state(&p, 0.5 * p.gamma_e).unwrap();
        assert!(rho.scaled_residual(&p, 0.5 * p.gamma_e) < 1e-10);
        assert!((rho.trace() - C64::new(1.0, 0.0)).norm() < 1e-10);
        assert!(rho.hermiticity_error() < 1e-10);
        assert!(rho.eigenvalues()[0] > -1e-8);
    }

    #[test]
    fn rejects_zero_decay() {
        let p = AtomParams {
            gamma_e: 0.0,
            gamma_r: 0.0,
            gamma_s: 0.0,
            ..AtomParams::default()
        };
        assert!(matches!(
            steady_state(&p, 1.0),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn singular_when_levels_are_uncoupled() {
        // |s> is neither driven nor decaying: any population parked there is
        // stationary, so the steady state is not unique.
        let p = AtomParams {
            gamma_s: 0.0,
            ..AtomParams::default()
        };
        assert!(matches!(
            steady_state(&p, 0.0),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let mut m = [[C64::new(0.0, 0.0); DIM]; DIM];
        m[0][0] = C64::new(0.4, 0.0);
        m[1][1] = C64::new(0.3, 0.0);
        m[2][2] = C64::new(0.2, 0.0);
        m[3][3] = C64::new(0.1, 0.0);
        let ev = DensityMatrix(m).eigenvalues();
        for (got, want) in ev.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
