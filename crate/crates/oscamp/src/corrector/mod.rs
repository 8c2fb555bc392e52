//! Fast-variable corrector and assembly of the approximate solutions.
//!
//! After the substitution theta -> (theta_0, xi_d) with theta_m = theta_0 +
//! omega_m xi_d, profile content becomes a two-scale trigonometric
//! polynomial sum_{(k0, kd)} U_{k0,kd}(x) e^{i k0 theta_0 + i kd xi_d}, and
//! the fast system
//!
//!   cL_0(d_theta0, d_xid) U = i [ kd I + k0 C ] U_{k0,kd} = F_{k0,kd}
//!
//! is solved coefficient-wise: directly where the symbol is invertible, by
//! least squares on the range where (k0, kd) sits on a characteristic
//! (solvable exactly when the data has no E-component).  The module also
//! assembles the leading approximation u_app = V^0|_{theta = phi/eps} and
//! the corrected approximation u_c = (V^0 + eps V^1 + eps^2 U^2)|_{theta =
//! phi/eps} from a profile solution, with every simplification made during
//! the V^1/U^2 assembly recorded in a manifest.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::amplitude::{memory_nodes_at_height, ProfileSolution};
use crate::model::{BoundarySource, HyperbolicModel};
use crate::profiles::{project_e, TrigSeries};
use crate::spectral::{svd_checked, ModeSet};
use crate::Error;

/// Hard gate on the forward residual of the fast system.
pub const FAST_RESIDUAL_TOL: f64 = 1e-10;

/// Finite two-scale trigonometric polynomial in (theta_0, xi_d).  The
/// normal-frequency key kd is quantized by a fixed resolution so that
/// coefficients landing on the same pair merge.
#[derive(Debug, Clone)]
pub struct TwoScalePoly {
    pub dim: usize,
    /// ((k0, kd), coefficient).
    pub entries: Vec<((i64, f64), DVector<Complex64>)>,
}

const KD_MERGE_TOL: f64 = 1e-9;

impl TwoScalePoly {
    pub fn zero(dim: usize) -> Self {
        TwoScalePoly {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, k0: i64, kd: f64, coeff: DVector<Complex64>) {
        for ((ek0, ekd), c) in &mut self.entries {
            if *ek0 == k0 && (*ekd - kd).abs() < KD_MERGE_TOL {
                *c += coeff;
                return;
            }
        }
        self.entries.push(((k0, kd), coeff));
    }

    pub fn eval(&self, theta0: f64, xi_d: f64) -> DVector<Complex64> {
        let mut out = DVector::from_element(self.dim, Complex64::default());
        for ((k0, kd), c) in &self.entries {
            let ph = Complex64::from_polar(1.0, *k0 as f64 * theta0 + kd * xi_d);
            out += c * ph;
        }
        out
    }

    pub fn max_coeff(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, c)| c.iter().map(|z| z.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }
}

/// Map a theta-multi-indexed series through the substitution theta_m ->
/// theta_0 + omega_m xi_d: index alpha lands on (n_alpha, alpha.omega).
pub fn substitute(ms: &ModeSet, series: &TrigSeries) -> TwoScalePoly {
    let mut out = TwoScalePoly::zero(series.dim);
    for (alpha, v) in &series.coeffs {
        let k0: i64 = alpha.iter().map(|&a| a as i64).sum();
        let kd: f64 = alpha
            .iter()
            .zip(&ms.modes)
            .map(|(&a, m)| a as f64 * m.omega)
            .sum();
        out.insert(k0, kd, v.clone());
    }
    out
}

fn complex_apply(m: &DMatrix<f64>, v: &DVector<Complex64>) -> DVector<Complex64> {
    DVector::from_iterator(
        m.nrows(),
        (0..m.nrows()).map(|i| {
            let mut s = Complex64::default();
            for j in 0..m.ncols() {
                s += v[j] * m[(i, j)];
            }
            s
        }),
    )
}

/// Least-squares solve of A u = v (A real, v complex) through an SVD
/// pseudo-inverse with relative rank cutoff.
fn pinv_apply(a: &DMatrix<f64>, v: &DVector<Complex64>, cutoff: f64) -> DVector<Complex64> {
    let svd = svd_checked(a.clone(), true).expect("SVD of a small dense matrix");
    let u = svd.u.as_ref().expect("left vectors");
    let vt = svd.v_t.as_ref().expect("right vectors");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut out = DVector::from_element(a.ncols(), Complex64::default());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff * smax.max(1e-300) {
            continue;
        }
        let mut proj = Complex64::default();
        for r in 0..a.nrows() {
            proj += v[r] * u[(r, i)];
        }
        let scale = proj / s;
        for c in 0..a.ncols() {
            out[c] += scale * vt[(i, c)];
        }
    }
    out
}

/// Solve the fast system cL_0(d_theta0, d_xid) U = F|_{theta -> (theta0,
/// xi_d)} for a finite series F with E F = 0.  Characteristic indices are
/// grouped by their (k0, kd) image and solved by least squares on the range
/// of the singular symbol; the forward residual of every coefficient is
/// verified against the hard gate before returning.
pub fn solve_fast_system(ms: &ModeSet, f: &TrigSeries, det_floor: f64) -> crate::Result<TwoScalePoly> {
    let ef = project_e(ms, f)?;
    let scale = f
        .coeffs
        .values()
        .map(|v| v.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    if !ef.is_zero(FAST_RESIDUAL_TOL * scale) {
        return Err(Error::Corrector(format!(
            "E F != 0 (defect up to {:.3e}); the fast system is unsolvable",
            ef.coeffs.values().map(|v| v.norm()).fold(0.0, f64::max)
        )));
    }

    // Substituted data, merged by (k0, kd).
    let fsub = substitute(ms, f);
    let mut out = TwoScalePoly::zero(f.dim);
    for ((k0, kd), fv) in &fsub.entries {
        if *k0 == 0 && kd.abs() < KD_MERGE_TOL {
            // Pure mean would be E-content; already gated above.
            if fv.norm() > FAST_RESIDUAL_TOL * scale {
                return Err(Error::Corrector("mean data survived the E gate".into()));
            }
            continue;
        }
        let sym = ms.l_alpha(*k0, *kd);
        // Characteristic pairs have kd = k0 omega_m for some mode.
        let characteristic = ms
            .modes
            .iter()
            .any(|m| (kd - *k0 as f64 * m.omega).abs() < 1e-8 * (1.0 + kd.abs()));
        let u = if characteristic {
            // i k0 L(d phi_m) U = F with singular symbol: least squares on
            // the range (exact since (I - P_m) F = F under the E gate).
            let v = fv * Complex64::new(0.0, -1.0); // strip the i
            pinv_apply(&sym, &v, 1e-10)
        } else {
            let det = sym.determinant().abs();
            if det < det_floor {
                return Err(Error::SmallDivisor {
                    alpha: vec![*k0 as i32],
                    det,
                    floor: det_floor,
                });
            }
            let inv = sym
                .try_inverse()
                .ok_or_else(|| Error::Corrector(format!("symbol inversion failed at ({k0}, {kd})")))?;
            complex_apply(&inv, fv) * Complex64::new(0.0, -1.0)
        };
        out.insert(*k0, *kd, u);
    }

    // Forward-residual gate.
    let res = fast_residual(ms, &out, &fsub);
    if res > FAST_RESIDUAL_TOL * scale {
        return Err(Error::Corrector(format!(
            "fast-system forward residual {res:.3e} exceeds the gate"
        )));
    }
    Ok(out)
}

/// Max-norm of cL_0 U - F over all coefficient pairs.
pub fn fast_residual(ms: &ModeSet, u: &TwoScalePoly, f: &TwoScalePoly) -> f64 {
    let mut worst: f64 = 0.0;
    let lookup = |k0: i64, kd: f64, p: &TwoScalePoly| -> DVector<Complex64> {
        for ((ek0, ekd), c) in &p.entries {
            if *ek0 == k0 && (*ekd - kd).abs() < KD_MERGE_TOL {
                return c.clone();
            }
        }
        DVector::from_element(p.dim, Complex64::default())
    };
    for ((k0, kd), uc) in &u.entries {
        let sym = ms.l_alpha(*k0, *kd);
        let lu = complex_apply(&sym, uc) * Complex64::new(0.0, 1.0);
        let fv = lookup(*k0, *kd, f);
        worst = worst.max((lu - fv).norm());
    }
    // Data pairs with no matching U entry (dropped coefficients).
    for ((k0, kd), fv) in &f.entries {
        if *k0 == 0 && kd.abs() < KD_MERGE_TOL {
            continue;
        }
        let present = u
            .entries
            .iter()
            .any(|((ek0, ekd), _)| ek0 == k0 && (*ekd - kd).abs() < KD_MERGE_TOL);
        if !present {
            worst = worst.max(fv.norm());
        }
    }
    worst
}

/// Second-order kernel data of the first corrector, tabulated on the
/// boundary coordinates (t, x_1) and transported flatly along the incoming
/// rays (constant-coefficient transport makes both quantities functions of
/// the ray foot alone):
///
///   - a^1_k(t, x_1): the kernel amplitude of V^1, i.e. the component of the
///     first-order trace along e that the minimum-norm boundary solve leaves
///     free.  It satisfies the same Lopatinskii transport equation as the
///     leading amplitude,
///
///       x_0 (d_t + w d_x1) a^1_k = -sum_m [ rho_{m,0} d_t + rho_{m,1} d_x1 ]
///            s_m^perp - b . B sum_m R_m (A_0 d_t + A_1 d_x1 + d_x2) w_{m,k},
///
///     with rho_{m,j} = b . B R_m A_j r_m, driven by the tangential
///     derivatives of the non-kernel first-order trace (the order-eps^3
///     boundary solvability condition; a^1(0) = 0).
///
///   - Q_{m,k}(t, x_1) = l_m . (A_0 d_t + A_1 d_x1 + d_x2) w_{m,k}: the
///     inhomogeneous source of the interior transport of the first-order
///     kernel coefficients.  Q is constant along each ray, so the interior
///     correction is the secular term -x_2 Q_{m,k}(ray foot).
struct KernelCorrection {
    /// Time spacing of the lattice rows (a multiple of the history step).
    dt: f64,
    /// a1[k]: (n_t + 1) x n_x1 lattice of a^1_k.
    a1: std::collections::HashMap<i64, ndarray::Array2<Complex64>>,
    /// q[k][m]: lattices of Q_{m,k} per incoming mode (ordering of
    /// `ms.incoming()`).
    q: std::collections::HashMap<i64, Vec<ndarray::Array2<Complex64>>>,
}

impl KernelCorrection {
    /// Linear interpolation in t (zero for t <= 0, clamped at the last row)
    /// and periodic-linear interpolation in x_1.
    fn interp(
        arr: &ndarray::Array2<Complex64>,
        dt: f64,
        grid: &crate::amplitude::Grid1,
        t: f64,
        x1: f64,
    ) -> Complex64 {
        if t <= 0.0 {
            return Complex64::default();
        }
        let n_t = arr.nrows() - 1;
        let s = (t / dt).min(n_t as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_t);
        let wt = s - i0 as f64;
        let n1 = grid.n_x1;
        let u = x1.rem_euclid(grid.l1) / grid.dx1();
        let j0 = (u.floor() as usize).min(n1 - 1);
        let j1 = (j0 + 1) % n1;
        let wx = u - j0 as f64;
        let row = |i: usize| arr[(i, j0)] * (1.0 - wx) + arr[(i, j1)] * wx;
        row(i0) * (1.0 - wt) + row(i1) * wt
    }
}

/// Assembled approximate solutions from a profile solution.
pub struct CorrectedApprox<'a> {
    pub model: &'a HyperbolicModel,
    pub ms: &'a ModeSet,
    pub sol: &'a ProfileSolution,
    pub source: &'a BoundarySource,
    pub eps: f64,
    /// Finite-difference step for slow x-derivatives of the profiles.
    pub fd_step: f64,
    /// Simplifications applied during V^1 assembly, for the output manifest.
    pub manifest: Vec<String>,
    kernel: Option<KernelCorrection>,
}

impl<'a> CorrectedApprox<'a> {
    pub fn new(
        model: &'a HyperbolicModel,
        ms: &'a ModeSet,
        sol: &'a ProfileSolution,
        source: &'a BoundarySource,
        eps: f64,
    ) -> Self {
        let mut manifest = vec![
            "incoming first-order profiles transported homogeneously (interaction sources \
             of the first corrector dropped)"
                .to_string(),
            "mean first-order field taken as zero (mean boundary data vanishes for the \
             configured sources)"
                .to_string(),
            "second corrector restricted to zero-order and quadratic interaction data \
             (slow derivatives of V^1 dropped)"
                .to_string(),
        ];
        if model.quad_interior.is_zero() && model.linear_zero_order.is_none() {
            manifest.push("linear model: second corrector vanishes identically".to_string());
        }
        manifest.push(
            "first-corrector kernel amplitude a^1 and secular ray sources solve the \
             linearized second-order solvability conditions (quadratic second-order \
             sources dropped)"
                .to_string(),
        );
        let mut ca = CorrectedApprox {
            model,
            ms,
            sol,
            source,
            eps,
            fd_step: 1e-4,
            manifest,
            kernel: None,
        };
        ca.kernel = ca.build_kernel_correction();
        ca
    }

    /// Planar boundary phase phi_0(t, x_1) = beta . (t, x_1).
    pub fn phi0(&self, t: f64, x1: f64) -> f64 {
        self.ms.beta[0] * t + self.ms.beta[1] * x1
    }

    /// Complex theta-coefficients sigma_{m,k}(t, x) of the leading incoming
    /// profiles (k = 1..K).
    fn sigma_coeff(&self, m: usize, t: f64, x1: f64, x2: f64, k: i64) -> Complex64 {
        crate::amplitude::reconstruct_sigma(
            self.ms,
            &self.sol.constants,
            &self.sol.history,
            &self.sol.grid,
            m,
            t,
            x1,
            x2,
            k,
        )
        .unwrap_or_default()
    }

    /// Leading approximation u_app(t, x) = V^0(x, phi/eps): incoming wave
    /// trains evaluated on their exact phases.
    pub fn u_leading(&self, t: f64, x1: f64, x2: f64) -> DVector<f64> {
        let n = self.model.n();
        let mut out = DVector::zeros(n);
        let phi0 = self.phi0(t, x1);
        for m in self.ms.incoming().collect::<Vec<_>>() {
            let theta_m = (phi0 + self.ms.modes[m].omega * x2) / self.eps;
            let mut val = 0.0;
            for k in 1..=self.sol.grid.k_modes as i64 {
                let c = self.sigma_coeff(m, t, x1, x2, k);
                val += 2.0 * (c * Complex64::from_polar(1.0, k as f64 * theta_m)).re;
            }
            out += &self.ms.modes[m].right_basis[0] * val;
        }
        out
    }

    /// Normalized outgoing profile tau~ at interior height x2 for harmonic j
    /// of triple `ti`, by integration along the outgoing characteristic.
    pub fn tau_tilde(&self, ti: usize, t: f64, x1: f64, x2: f64, j: i64) -> Complex64 {
        let tc = &self.sol.constants.triples[ti];
        let hist = &self.sol.history;
        let dt = hist.dt;
        let n = (t / dt).floor() as usize;
        let f = |s: f64| -> Complex64 {
            let ((tp, xp), (tr, xr)) = memory_nodes_at_height(tc, t, x1, x2, s);
            let ap = hist
                .sample(&self.sol.grid, j * tc.triple.n_p, tp, xp)
                .unwrap_or_default();
            if ap.norm() == 0.0 {
                return Complex64::default();
            }
            ap * hist
                .sample(&self.sol.grid, j * tc.triple.n_r, tr, xr)
                .unwrap_or_default()
        };
        if t <= 0.0 {
            return Complex64::default();
        }
        // Trapezoid over the stored levels plus the trailing partial cell.
        let mut acc = Complex64::default();
        let mut prev = f(0.0);
        for i in 1..=n {
            let cur = f(i as f64 * dt);
            acc += (prev + cur) * (0.5 * dt);
            prev = cur;
        }
        let rem = t - n as f64 * dt;
        if rem > 1e-12 {
            let cur = f(t);
            acc += (prev + cur) * (0.5 * rem);
        }
        acc
    }

    /// theta_0-mode k of the boundary trace of a (from history).
    fn a_mode(&self, t: f64, x1: f64, k: i64) -> Complex64 {
        self.sol
            .history
            .sample(&self.sol.grid, k, t, x1)
            .unwrap_or_default()
    }

    /// theta_0-mode k of Psi(V^0, V^0) at the boundary: Psi(e, e) (a^2)_k.
    fn psi_v0_mode(&self, t: f64, x1: f64, k: i64) -> DVector<Complex64> {
        let kk = self.sol.grid.k_modes as i64;
        let mut conv = Complex64::default();
        for j in (k - kk).max(-kk)..=kk {
            if j == 0 || j == k {
                continue;
            }
            conv += self.a_mode(t, x1, j) * self.a_mode(t, x1, k - j);
        }
        let psi_ee = self.model.quad_boundary.apply(&self.ms.e, &self.ms.e);
        DVector::from_iterator(psi_ee.len(), psi_ee.iter().map(|&r| conv * r))
    }

    /// First-order slow-derivative corrector (I - E)V^1 = -R(L(d)V^0 +
    /// D_0 V^0): per incoming phase-(m,k) coefficient, with the slow
    /// derivatives of sigma taken by centered finite differences.
    fn w_coeff(&self, m: usize, t: f64, x1: f64, x2: f64, k: i64) -> DVector<Complex64> {
        let h = self.fd_step;
        let s = |tt: f64, xx1: f64, xx2: f64| self.sigma_coeff(m, tt, xx1, xx2, k);
        // Centered in time where the history allows; one-sided at its end
        // (samples beyond the stored range must never enter a difference).
        let t_max = self.sol.history.t_max();
        let dt = if t + h <= t_max {
            (s(t + h, x1, x2) - s(t - h, x1, x2)) / (2.0 * h)
        } else {
            (s(t, x1, x2) - s(t - h, x1, x2)) / h
        };
        let d1 = (s(t, x1 + h, x2) - s(t, x1 - h, x2)) / (2.0 * h);
        let d2 = if x2 >= h {
            (s(t, x1, x2 + h) - s(t, x1, x2 - h)) / (2.0 * h)
        } else {
            (s(t, x1, x2 + h) - s(t, x1, x2)) / h
        };
        let r_m = &self.ms.modes[m].right_basis[0];
        let a0r = &self.ms.a_mats[0] * r_m;
        let a1r = &self.ms.a_mats[1] * r_m;
        let mut f = DVector::from_element(self.model.n(), Complex64::default());
        for c in 0..self.model.n() {
            f[c] = dt * a0r[c] + d1 * a1r[c] + d2 * r_m[c];
        }
        if let Some(d0) = &self.model.linear_zero_order {
            if let Ok(bd_inv) = self.model.bd_inv() {
                let zr = &bd_inv * (d0 * r_m);
                let sv = s(t, x1, x2);
                for c in 0..self.model.n() {
                    f[c] += sv * zr[c];
                }
            }
        }
        // -(i k)^{-1} R_m F.
        let rf = complex_apply(&self.ms.modes[m].partial_inverse, &f);
        rf * (-Complex64::new(0.0, k as f64).inv())
    }

    /// Minimum-norm incoming first-order trace at the boundary: solves
    /// B (sum_inc s_m r_m) = G_k - Psi(V^0,V^0)_k - (B V^1_known)_k per
    /// theta_0-mode through the SVD pseudo-inverse of [B r_m]_inc.
    fn ev1_trace(&self, t: f64, x1: f64, k: i64) -> Vec<Complex64> {
        let inc: Vec<usize> = self.ms.incoming().collect();
        let p = self.model.p();
        let mut bmat = DMatrix::zeros(p, inc.len());
        for (c, &m) in inc.iter().enumerate() {
            let br = &self.ms.boundary_matrix * &self.ms.modes[m].right_basis[0];
            for r in 0..p {
                bmat[(r, c)] = br[r];
            }
        }
        // Right-hand side: G_k - Psi(V^0,V^0)_k - B (W + tau r_q)_k |_{x2=0}.
        let mut rhs = self.source.mode(p, k as i32, t, x1);
        let psi = self.psi_v0_mode(t, x1, k);
        let full_psi = self.model.quad_boundary.comps.len();
        for r in 0..p.min(full_psi) {
            rhs[r] -= psi[r];
        }
        let mut known = DVector::from_element(self.model.n(), Complex64::default());
        for &m in &inc {
            let w = self.w_coeff(m, t, x1, 0.0, k);
            known += w;
        }
        for (ti, tc) in self.sol.constants.triples.iter().enumerate() {
            if tc.d_coef == 0.0 || k % tc.triple.n_m != 0 {
                continue;
            }
            let j = k / tc.triple.n_m;
            let tau = self.tau_tilde(ti, t, x1, 0.0, j) * tc.d_coef;
            let rq = &self.ms.modes[tc.triple.m_out].right_basis[0];
            for c in 0..self.model.n() {
                known[c] += tau * rq[c];
            }
        }
        let bknown = {
            let mut out = DVector::from_element(p, Complex64::default());
            for r in 0..p {
                for c in 0..self.model.n() {
                    out[r] += known[c] * self.ms.boundary_matrix[(r, c)];
                }
            }
            out
        };
        let rhs = rhs - bknown;
        let sol = pinv_apply(&bmat, &rhs, 1e-10);
        sol.iter().copied().collect()
    }

    /// Slow-derivative combination (A_0 d_t + A_1 d_x1 + d_x2) w_{m,k} at a
    /// boundary point, by outer finite differences whose steps resolve the
    /// piecewise-linear stored history (the inner differences of w use
    /// `fd_step` and see only local slopes).
    fn d_slow_w(&self, m: usize, t: f64, x1: f64, k: i64) -> DVector<Complex64> {
        let hd = self.sol.history.dt;
        let t_max = self.sol.history.t_max();
        let ht = (4.0 * hd).min(0.45 * t_max).max(hd);
        let w = |tt: f64, xx1: f64, xx2: f64| self.w_coeff(m, tt, xx1, xx2, k);
        let (tp, tm) = ((t + ht).min(t_max), (t - ht).max(0.0));
        let wt = (w(tp, x1, 0.0) - w(tm, x1, 0.0)) * Complex64::from(1.0 / (tp - tm));
        let hx = self.sol.grid.dx1();
        let wx1 = (w(t, x1 + hx, 0.0) - w(t, x1 - hx, 0.0)) * Complex64::from(0.5 / hx);
        let mode = &self.ms.modes[m];
        let vd = mode.velocity[mode.velocity.len() - 1];
        // A step in x2 shifts the ray foot by ht in time.
        let h2 = ht * vd;
        let wx2 = (w(t, x1, h2) - w(t, x1, 0.0)) * Complex64::from(1.0 / h2);
        complex_apply(&self.ms.a_mats[0], &wt) + complex_apply(&self.ms.a_mats[1], &wx1) + wx2
    }

    /// Tabulates the second-order kernel data (see `KernelCorrection`).
    /// Returns None when the model has no amplified kernel direction or the
    /// stored history is too short to difference.
    fn build_kernel_correction(&self) -> Option<KernelCorrection> {
        use ndarray::Array2;
        let hist = &self.sol.history;
        if hist.levels.len() < 4 {
            return None;
        }
        if self.ms.e.norm() < 1e-12 || self.ms.x_lop_raw[0].abs() < 1e-9 {
            return None;
        }
        let grid = &self.sol.grid;
        let inc: Vec<usize> = self.ms.incoming().collect();
        let x0 = self.ms.x_lop_raw[0];
        let w_speed = self.ms.x_lop_raw[1] / x0;
        let n_hist = hist.levels.len() - 1;
        let stride = (n_hist / 160).max(1);
        let dt = hist.dt * stride as f64;
        let n_t = n_hist.div_ceil(stride);
        let n1 = grid.n_x1;
        let dx1 = grid.dx1();
        let real_dot = |rv: &DVector<f64>, cv: &DVector<Complex64>| -> Complex64 {
            rv.iter().zip(cv.iter()).map(|(&r, &c)| c * r).sum()
        };
        let b_pair = |cv: &DVector<Complex64>| -> Complex64 {
            let bc = complex_apply(&self.ms.boundary_matrix, cv);
            real_dot(&self.ms.b, &bc)
        };
        // rho_{m,j} = b . B R_m A_j r_m and kernel components c_m = l_m . e.
        let mut rho = vec![[0.0f64; 2]; inc.len()];
        let mut c_m = vec![0.0f64; inc.len()];
        for (im, &m) in inc.iter().enumerate() {
            let mode = &self.ms.modes[m];
            c_m[im] = mode.left_basis[0].dot(&self.ms.e);
            for j in 0..2 {
                let v = &mode.partial_inverse * (&self.ms.a_mats[j] * &mode.right_basis[0]);
                rho[im][j] = self.ms.b.dot(&(&self.ms.boundary_matrix * v));
            }
        }
        let mut a1_map = std::collections::HashMap::new();
        let mut q_map = std::collections::HashMap::new();
        for k in 1..=grid.k_modes as i64 {
            let amax = hist
                .levels
                .iter()
                .map(|lv| {
                    lv.row(k as usize - 1)
                        .iter()
                        .map(|c| c.norm())
                        .fold(0.0f64, f64::max)
                })
                .fold(0.0f64, f64::max);
            let driven = self.source.modes.iter().any(|sm| sm.k as i64 == k);
            if amax < 1e-14 && !driven {
                continue;
            }
            let mut sperp: Vec<Array2<Complex64>> =
                vec![Array2::default((n_t + 1, n1)); inc.len()];
            let mut qlat: Vec<Array2<Complex64>> = vec![Array2::default((n_t + 1, n1)); inc.len()];
            let mut wterm: Array2<Complex64> = Array2::default((n_t + 1, n1));
            for it in 0..=n_t {
                let t = (it as f64 * dt).min(hist.t_max());
                for j in 0..n1 {
                    let x1 = grid.x1(j);
                    let tr = self.ev1_trace(t, x1, k);
                    for (im, &m) in inc.iter().enumerate() {
                        sperp[im][(it, j)] = tr[im];
                        let u = self.d_slow_w(m, t, x1, k);
                        qlat[im][(it, j)] = real_dot(&self.ms.modes[m].left_basis[0], &u);
                        wterm[(it, j)] += b_pair(&complex_apply(&self.ms.modes[m].partial_inverse, &u));
                    }
                }
            }
            // Solvability right-hand side on the lattice (lattice-step
            // differences of the non-kernel trace; one-sided at the ends).
            let mut rhs: Array2<Complex64> = Array2::default((n_t + 1, n1));
            for it in 0..=n_t {
                for j in 0..n1 {
                    let mut v = -wterm[(it, j)];
                    for im in 0..inc.len() {
                        let (ia, ib, span) = if it == 0 {
                            (0, 1, dt)
                        } else if it == n_t {
                            (n_t - 1, n_t, dt)
                        } else {
                            (it - 1, it + 1, 2.0 * dt)
                        };
                        let dts = (sperp[im][(ib, j)] - sperp[im][(ia, j)]) / span;
                        let (jl, jr) = ((j + n1 - 1) % n1, (j + 1) % n1);
                        let dxs = (sperp[im][(it, jr)] - sperp[im][(it, jl)]) / (2.0 * dx1);
                        v -= dts * rho[im][0] + dxs * rho[im][1];
                    }
                    rhs[(it, j)] = v;
                }
            }
            // March a^1 along the boundary characteristics dx1/dt = w.
            let interp_row = |arr: &Array2<Complex64>, it: usize, x1: f64| -> Complex64 {
                let u = x1.rem_euclid(grid.l1) / dx1;
                let j0 = (u.floor() as usize).min(n1 - 1);
                let j1 = (j0 + 1) % n1;
                let wx = u - j0 as f64;
                arr[(it, j0)] * (1.0 - wx) + arr[(it, j1)] * wx
            };
            let mut a1: Array2<Complex64> = Array2::default((n_t + 1, n1));
            for it in 0..n_t {
                for j in 0..n1 {
                    let x1 = grid.x1(j);
                    let xf = x1 - w_speed * dt;
                    let prev = interp_row(&a1, it, xf);
                    let inc_rhs = (interp_row(&rhs, it, xf) + rhs[(it + 1, j)])
                        * Complex64::from(0.5 * dt / x0);
                    a1[(it + 1, j)] = prev + inc_rhs;
                }
            }
            a1_map.insert(k, a1);
            q_map.insert(k, qlat);
        }
        Some(KernelCorrection {
            dt,
            a1: a1_map,
            q: q_map,
        })
    }

    /// First-order profile V^1(t, x, theta = phi/eps), real-valued.
    pub fn v1(&self, t: f64, x1: f64, x2: f64) -> DVector<f64> {
        let n = self.model.n();
        let phi0 = self.phi0(t, x1);
        let mut out = DVector::zeros(n);
        let inc: Vec<usize> = self.ms.incoming().collect();
        for &m in &inc {
            let mode = &self.ms.modes[m];
            let theta_m = (phi0 + mode.omega * x2) / self.eps;
            let vd = mode.velocity[mode.velocity.len() - 1];
            let v1c = mode.velocity[0];
            let (tb, xb) = (t - x2 / vd, x1 - v1c * x2 / vd);
            for k in 1..=self.sol.grid.k_modes as i64 {
                let ph = Complex64::from_polar(1.0, k as f64 * theta_m);
                // Slow-derivative corrector, evaluated in place.
                let w = self.w_coeff(m, t, x1, x2, k);
                for c in 0..n {
                    out[c] += 2.0 * (w[c] * ph).re;
                }
                // Transported incoming first-order trace, the kernel
                // amplitude a^1 (along e-components c_m = l_m . e), and the
                // secular interior source -x2 Q_m, all read at the ray foot.
                if tb > 0.0 {
                    let trace = self.ev1_trace(tb, xb, k);
                    let row = inc.iter().position(|&mm| mm == m).unwrap();
                    let mut coeff = trace[row];
                    if let Some(kc) = &self.kernel {
                        if let Some(a1) = kc.a1.get(&k) {
                            let cm = mode.left_basis[0].dot(&self.ms.e);
                            coeff += KernelCorrection::interp(a1, kc.dt, &self.sol.grid, tb, xb)
                                * cm;
                        }
                        if let Some(q) = kc.q.get(&k) {
                            coeff -= KernelCorrection::interp(&q[row], kc.dt, &self.sol.grid, tb, xb)
                                * x2;
                        }
                    }
                    for c in 0..n {
                        out[c] += 2.0 * (coeff * ph).re * mode.right_basis[0][c];
                    }
                }
            }
        }
        // Outgoing profiles d * tau~ r_q on their own phases.
        for (ti, tc) in self.sol.constants.triples.iter().enumerate() {
            if tc.d_coef == 0.0 {
                continue;
            }
            let q = tc.triple.m_out;
            let theta_q = (phi0 + self.ms.modes[q].omega * x2) / self.eps;
            let jmax = self.sol.grid.k_modes as i64 / tc.triple.n_m.abs().max(1);
            for j in 1..=jmax {
                let tau = self.tau_tilde(ti, t, x1, x2, j) * tc.d_coef;
                let ph = Complex64::from_polar(1.0, j as f64 * theta_q);
                let rq = &self.ms.modes[q].right_basis[0];
                for c in 0..self.model.n() {
                    out[c] += 2.0 * (tau * ph).re * rq[c];
                }
            }
        }
        out
    }

    /// Corrected approximation u_c = u_app + eps V^1 (+ eps^2 U^2, which
    /// vanishes for linear models; see manifest).
    pub fn u_corrected(&self, t: f64, x1: f64, x2: f64) -> DVector<f64> {
        let mut out = self.u_leading(t, x1, x2);
        out += self.v1(t, x1, x2) * self.eps;
        out
    }
}
