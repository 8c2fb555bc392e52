//! The key profile subsystem at the boundary: the nonlocal amplitude
//! equation with Burgers-type self-interaction and resonance memory, the
//! outgoing corrector profile tau driven by incoming-incoming interaction,
//! and reconstruction of the incoming profiles as exact translates of the
//! boundary amplitude.
//!
//! In normalized form (divide the Lopatinskii boundary equation by its time
//! coefficient x_0) the amplitude a(t, x_1, theta_0) satisfies
//!
//!   d_t a + w d_1 a + c4 a + alpha_1 d_theta(a^2)
//!     + sum_triples A2 d_theta tau~|_{x2=0} = g,
//!
//! with w = x_1-coefficient / x_0, g_k = -(i k / x_0) b.G_k, and, per
//! resonance triple, tau~ the d-normalized outgoing profile transported at
//! the outgoing group velocity with source a_{j n_p}(translate_p) *
//! a_{j n_r}(translate_r).  Everything here works on the theta_0-Fourier
//! side with Hermitian storage (k = 1..K, a_0 = 0 identically).

use nalgebra::DVector;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::sync::Arc;

use crate::model::{BoundarySource, HyperbolicModel, RunConfig};
use crate::spectral::{Direction, ModeSet, ResonanceTriple};
use crate::Error;

const BLOWUP_SUP: f64 = 1e6;

/// Per-resonance-triple constants of the normalized system.
#[derive(Debug, Clone)]
pub struct TripleConstants {
    pub triple: ResonanceTriple,
    /// The interaction strength d = -2 v_{q,d} (l_q . B_d^{-1} D(r_p, r_r)) c_p c_r.
    pub d_coef: f64,
    /// Boundary coupling of the normalized profile: -(b . B r_q) d / x_0.
    pub boundary_coef: f64,
    /// Outgoing group velocity (transport field of tau~).
    pub v_out: [f64; 2],
    /// Incoming group velocities of the two interaction partners.
    pub v_p: [f64; 2],
    pub v_r: [f64; 2],
}

/// All scalar constants of the normalized key subsystem.
#[derive(Debug, Clone)]
pub struct ConstantsBundle {
    /// Time coefficient of the raw Lopatinskii field (negative for Euler).
    pub x0: f64,
    /// Tangential transport speed w = x_1-coefficient / x_0 (Euler: -c).
    pub transport: f64,
    /// Burgers coefficient alpha_1 = -(b . Psi(e,e)) / x_0.
    pub alpha1: f64,
    /// Zero-order boundary coefficient f_1 / x_0 (zero when D_0 = 0).
    pub zero_order: f64,
    /// Trace scalings c_m = l_m . e per mode (zero for outgoing modes).
    pub c_m: Vec<f64>,
    /// Zero-order decay rates l_m . D_0 r_m of the incoming transports.
    pub damp: Vec<f64>,
    pub triples: Vec<TripleConstants>,
}

fn vec2(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

/// Assemble the constants of the normalized amplitude system from the
/// spectral package and the model nonlinearities.
pub fn compute_constants(
    model: &HyperbolicModel,
    ms: &ModeSet,
    triples: &[ResonanceTriple],
) -> crate::Result<ConstantsBundle> {
    if model.dim_space != 2 {
        return Err(Error::Amplitude(
            "the amplitude solver is implemented for two space dimensions".into(),
        ));
    }
    // The raw field is the one consistent with the normalization of b used
    // throughout this ModeSet (b, e, and the transport field all come from
    // the same kernel construction, so their relative scale is fixed); the
    // display-rescaled `x_lop` would mis-scale the forcing by the rescale
    // factor.
    let x0 = ms.x_lop_raw[0];
    let transport = ms.x_lop_raw[1] / x0;

    let b_psi_ee = {
        let psi_ee = model.quad_boundary.apply(&ms.e, &ms.e);
        ms.b.dot(&psi_ee)
    };
    let alpha1 = -b_psi_ee / x0;

    let c_m: Vec<f64> = ms
        .modes
        .iter()
        .map(|m| m.left_basis[0].dot(&ms.e))
        .collect();

    let d0 = model
        .linear_zero_order
        .clone()
        .unwrap_or_else(|| nalgebra::DMatrix::zeros(model.state_dim, model.state_dim));
    let damp: Vec<f64> = ms
        .modes
        .iter()
        .map(|m| m.left_basis[0].dot(&(&d0 * &m.right_basis[0])))
        .collect();

    // f_1 = sum_{m incoming} b . B R_m D_0 e_m.
    let mut f1 = 0.0;
    for (m, mode) in ms.modes.iter().enumerate() {
        if mode.direction == Direction::Incoming {
            let v = &mode.partial_inverse * (&d0 * &ms.e_comps[m]);
            f1 += ms.b.dot(&(&ms.boundary_matrix * v));
        }
    }
    let zero_order = f1 / x0;

    let bd_inv = model.bd_inv()?;
    let mut tcs = Vec::new();
    for t in triples {
        let q = t.m_out;
        if ms.modes[q].direction != Direction::Outgoing {
            return Err(Error::Amplitude(format!(
                "triple {t:?} names a non-outgoing output mode"
            )));
        }
        let (rp, rr) = (&ms.modes[t.p_in].right_basis[0], &ms.modes[t.r_in].right_basis[0]);
        let d_rp_rr = model.quad_interior.apply(rp, rr);
        let lq = &ms.modes[q].left_basis[0];
        let x = lq.dot(&(&bd_inv * d_rp_rr));
        let vq = &ms.modes[q].velocity;
        let d_coef = -2.0 * vq[1] * x * c_m[t.p_in] * c_m[t.r_in];
        let rq = &ms.modes[q].right_basis[0];
        let b_b_rq = ms.b.dot(&(&ms.boundary_matrix * rq));
        let boundary_coef = -b_b_rq * d_coef / x0;
        tcs.push(TripleConstants {
            triple: t.clone(),
            d_coef,
            boundary_coef,
            v_out: vec2(vq),
            v_p: vec2(&ms.modes[t.p_in].velocity),
            v_r: vec2(&ms.modes[t.r_in].velocity),
        });
    }

    Ok(ConstantsBundle {
        x0,
        transport,
        alpha1,
        zero_order,
        c_m,
        damp,
        triples: tcs,
    })
}

/// Tangential grid and theta_0 truncation of the boundary amplitude.
#[derive(Debug, Clone)]
pub struct Grid1 {
    pub n_x1: usize,
    pub l1: f64,
    pub k_modes: usize,
}

impl Grid1 {
    pub fn dx1(&self) -> f64 {
        self.l1 / self.n_x1 as f64
    }

    pub fn x1(&self, i: usize) -> f64 {
        i as f64 * self.dx1()
    }
}

/// theta_0-Fourier coefficients a_k(x_1) for k = 1..K (row k-1); negative k
/// by Hermitian symmetry, a_0 identically zero.
#[derive(Debug, Clone)]
pub struct AmplitudeState {
    pub t: f64,
    pub coeffs: Array2<Complex64>,
}

impl AmplitudeState {
    pub fn zero(grid: &Grid1) -> Self {
        AmplitudeState {
            t: 0.0,
            coeffs: Array2::zeros((grid.k_modes, grid.n_x1)),
        }
    }

    /// Physical sup over the collocation nodes (x_1, theta_0).
    pub fn sup(&self, grid: &Grid1) -> f64 {
        let n_th = 2 * grid.k_modes + 1;
        let mut sup: f64 = 0.0;
        for i in 0..grid.n_x1 {
            for j in 0..n_th {
                let th = 2.0 * std::f64::consts::PI * j as f64 / n_th as f64;
                let mut v = 0.0;
                for k in 1..=grid.k_modes {
                    let c = self.coeffs[(k - 1, i)];
                    v += 2.0 * (c * Complex64::from_polar(1.0, k as f64 * th)).re;
                }
                sup = sup.max(v.abs());
            }
        }
        sup
    }

    pub fn l2(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Stored amplitude trajectory on uniform time levels t_i = i dt, the memory
/// of the nonlocal boundary equation.
#[derive(Debug, Clone)]
pub struct History {
    pub dt: f64,
    pub levels: Vec<Array2<Complex64>>,
}

impl History {
    pub fn new(dt: f64, initial: Array2<Complex64>) -> Self {
        History {
            dt,
            levels: vec![initial],
        }
    }

    pub fn t_max(&self) -> f64 {
        (self.levels.len() - 1) as f64 * self.dt
    }

    /// a_k(t, x_1): zero for t <= 0 and for k = 0 or |k| > K; linear
    /// interpolation in t between stored levels and periodically in x_1.
    /// Reads beyond the stored range are an error, never an extrapolation.
    pub fn sample(&self, grid: &Grid1, k: i64, t: f64, x1: f64) -> crate::Result<Complex64> {
        if k == 0 || k.unsigned_abs() as usize > grid.k_modes {
            return Ok(Complex64::default());
        }
        if k < 0 {
            return Ok(self.sample(grid, -k, t, x1)?.conj());
        }
        if t <= 0.0 {
            return Ok(Complex64::default());
        }
        let tm = self.t_max();
        if t > tm + 1e-9 * self.dt.max(1e-12) {
            return Err(Error::Amplitude(format!(
                "history gap: requested t = {t}, stored up to {tm}"
            )));
        }
        let s = (t / self.dt).min((self.levels.len() - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(self.levels.len() - 1);
        let wt = s - i0 as f64;

        let u = x1.rem_euclid(grid.l1);
        let p = u / grid.dx1();
        let j0 = (p.floor() as usize) % grid.n_x1;
        let j1 = (j0 + 1) % grid.n_x1;
        let wx = p - p.floor();

        let row = (k - 1) as usize;
        let at = |lvl: usize| {
            let a = &self.levels[lvl];
            a[(row, j0)] * (1.0 - wx) + a[(row, j1)] * wx
        };
        Ok(at(i0) * (1.0 - wt) + at(i1) * wt)
    }
}

/// Characteristic sampling times/positions of the memory integrand: starting
/// on the boundary at (t, x_1) and following the outgoing characteristic
/// backwards to interior height X_2(s), then back down each incoming
/// characteristic to the boundary.
fn memory_nodes(tc: &TripleConstants, t: f64, x1: f64, s: f64) -> ((f64, f64), (f64, f64)) {
    memory_nodes_at_height(tc, t, x1, 0.0, s)
}

/// Same characteristic tracing starting at interior height `x2_0` instead of
/// the boundary — used to evaluate the volumetric outgoing profile.
pub fn memory_nodes_at_height(
    tc: &TripleConstants,
    t: f64,
    x1: f64,
    x2_0: f64,
    s: f64,
) -> ((f64, f64), (f64, f64)) {
    let x2 = x2_0 + (t - s) * (-tc.v_out[1]); // v_out[1] < 0, so x2 grows backwards in time
    let x1s = x1 + (s - t) * tc.v_out[0];
    let node = |v: [f64; 2]| {
        let tt = s - x2 / v[1];
        let xx = x1s - v[0] * x2 / v[1];
        (tt, xx)
    };
    (node(tc.v_p), node(tc.v_r))
}

/// Exact-memory evaluation of the normalized outgoing trace
/// tau~_{k}(t, x_1, x_2 = 0) for theta_0-mode k (zero unless n_m | k):
///
///   integral over s in [0,t] of a_{j n_p}(T_p(s), X_p(s))
///                               a_{j n_r}(T_r(s), X_r(s)) ds,  j = k / n_m,
///
/// by the trapezoid rule on the stored history levels.
pub fn memory_term_exact(
    tc: &TripleConstants,
    hist: &History,
    grid: &Grid1,
    t: f64,
    x1: f64,
    k: i64,
) -> crate::Result<Complex64> {
    if t <= 0.0 {
        return Ok(Complex64::default());
    }
    if k % tc.triple.n_m != 0 {
        return Ok(Complex64::default());
    }
    let j = k / tc.triple.n_m;
    let n = (t / hist.dt).round() as usize;
    if n == 0 || ((t - n as f64 * hist.dt).abs() > 1e-6 * hist.dt) {
        return Err(Error::Amplitude(format!(
            "memory integral endpoint t = {t} not on the stored time grid (dt = {})",
            hist.dt
        )));
    }
    let f = |s: f64| -> crate::Result<Complex64> {
        let ((tp, xp), (tr, xr)) = memory_nodes(tc, t, x1, s);
        let ap = hist.sample(grid, j * tc.triple.n_p, tp, xp)?;
        if ap.norm() == 0.0 {
            return Ok(Complex64::default());
        }
        let ar = hist.sample(grid, j * tc.triple.n_r, tr, xr)?;
        Ok(ap * ar)
    };
    let mut acc = f(0.0)? * 0.5 + f(t)? * 0.5;
    for i in 1..n {
        acc += f(i as f64 * hist.dt)?;
    }
    Ok(acc * hist.dt)
}

/// Evaluate an incoming profile mode by exact characteristic translation of
/// the boundary amplitude: sigma_{m,k}(t, x) = c_m a_k(t - x_2/v_d,
/// x_1 - v_1 x_2 / v_d) exp(-damp_m x_2 / v_d).
pub fn reconstruct_sigma(
    ms: &ModeSet,
    cb: &ConstantsBundle,
    hist: &History,
    grid: &Grid1,
    m: usize,
    t: f64,
    x1: f64,
    x2: f64,
    k: i64,
) -> crate::Result<Complex64> {
    let mode = &ms.modes[m];
    if mode.direction != Direction::Incoming {
        return Err(Error::Amplitude(format!(
            "mode {m} is outgoing; incoming profiles only"
        )));
    }
    let vd = mode.velocity[mode.velocity.len() - 1];
    let v1 = mode.velocity[0];
    let ts = t - x2 / vd;
    let xs = x1 - v1 * x2 / vd;
    let a = hist.sample(grid, k, ts, xs)?;
    Ok(a * cb.c_m[m] * (-cb.damp[m] * x2 / vd).exp())
}

/// Volumetric grid of one normalized outgoing profile tau~, stored per
/// positive theta_m-harmonic j (theta_0-trace mode j n_m).
#[derive(Debug, Clone)]
pub struct TauGrid {
    pub jmax: usize,
    pub n_x2: usize,
    pub l2: f64,
    /// (j-1, x1, x2).
    pub data: Array3<Complex64>,
}

impl TauGrid {
    pub fn zero(grid: &Grid1, n_m: i64, n_x2: usize, l2: f64) -> Self {
        let jmax = (grid.k_modes as i64 / n_m.abs()).max(0) as usize;
        TauGrid {
            jmax,
            n_x2,
            l2,
            data: Array3::zeros((jmax, grid.n_x1, n_x2)),
        }
    }

    pub fn dx2(&self) -> f64 {
        self.l2 / (self.n_x2 - 1) as f64
    }

    /// Boundary trace tau~_{k}(x_1 node i) for theta_0-mode k.
    pub fn trace(&self, n_m: i64, k: i64, i: usize) -> Complex64 {
        if k == 0 || k % n_m != 0 {
            return Complex64::default();
        }
        let j = k / n_m;
        if j > 0 {
            if (j as usize) <= self.jmax {
                self.data[(j as usize - 1, i, 0)]
            } else {
                Complex64::default()
            }
        } else if ((-j) as usize) <= self.jmax {
            self.data[((-j) as usize - 1, i, 0)].conj()
        } else {
            Complex64::default()
        }
    }
}

/// Which representation of the outgoing profile feeds the boundary equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    /// Evaluate the memory integral along exact characteristics.
    ExactMemory,
    /// Co-evolve tau~ on an (x_1, x_2) grid and take its boundary trace.
    GridTau,
}

/// Complete output of the key-subsystem march.
#[derive(Debug)]
pub struct ProfileSolution {
    pub grid: Grid1,
    pub dt: f64,
    pub history: History,
    pub constants: ConstantsBundle,
    pub tau: Vec<TauGrid>,
    /// (t, sup |a|) per step.
    pub sup_trace: Vec<(f64, f64)>,
}

impl ProfileSolution {
    pub fn final_state(&self) -> AmplitudeState {
        AmplitudeState {
            t: self.history.t_max(),
            coeffs: self.history.levels.last().unwrap().clone(),
        }
    }

    pub fn sup_a(&self) -> f64 {
        self.sup_trace.iter().map(|&(_, s)| s).fold(0.0, f64::max)
    }
}

/// Time-marcher for the normalized key subsystem.
pub struct KeySubsystemSolver<'a> {
    pub model: &'a HyperbolicModel,
    pub ms: &'a ModeSet,
    pub cb: ConstantsBundle,
    pub grid: Grid1,
    pub dt: f64,
    pub n_steps: usize,
    pub mode: TauMode,
    pub n_x2: usize,
    pub l2: f64,
    fft_fwd: Arc<dyn rustfft::Fft<f64>>,
    fft_inv: Arc<dyn rustfft::Fft<f64>>,
}

impl<'a> KeySubsystemSolver<'a> {
    pub fn new(
        model: &'a HyperbolicModel,
        ms: &'a ModeSet,
        cb: ConstantsBundle,
        rc: &RunConfig,
        mode: TauMode,
    ) -> crate::Result<Self> {
        let grid = Grid1 {
            n_x1: rc.n_x1,
            l1: rc.l1,
            k_modes: rc.k_modes,
        };
        // Linear CFL limits: tangential transport of a and, in grid mode,
        // the outgoing transport of tau~.
        let mut dt_max = rc.cfl * grid.dx1() / cb.transport.abs().max(1e-12);
        let dx2 = rc.l2 / (rc.n_x2.max(2) - 1) as f64;
        if mode == TauMode::GridTau {
            for tc in &cb.triples {
                dt_max = dt_max.min(rc.cfl * grid.dx1() / tc.v_out[0].abs().max(1e-12));
                dt_max = dt_max.min(rc.cfl * dx2 / tc.v_out[1].abs().max(1e-12));
            }
        }
        let n_steps = (rc.t_final / dt_max).ceil().max(1.0) as usize;
        let dt = rc.t_final / n_steps as f64;
        let mut planner = FftPlanner::new();
        Ok(KeySubsystemSolver {
            model,
            ms,
            cb,
            fft_fwd: planner.plan_fft_forward(rc.n_x1),
            fft_inv: planner.plan_fft_inverse(rc.n_x1),
            grid,
            dt,
            n_steps,
            mode,
            n_x2: rc.n_x2,
            l2: rc.l2,
        })
    }

    /// Exact solution operator of d_t + w d_1 over `dt`, i.e. translation by
    /// -w dt, applied spectrally in x_1.
    fn shift(&self, a: &Array2<Complex64>, dt: f64) -> Array2<Complex64> {
        let n = self.grid.n_x1;
        let w = self.cb.transport;
        let mut out = a.clone();
        let mut buf: Vec<Complex64> = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            buf.clear();
            buf.extend(row.iter().copied());
            self.fft_fwd.process(&mut buf);
            for (l, c) in buf.iter_mut().enumerate() {
                let l_signed = if l <= n / 2 { l as i64 } else { l as i64 - n as i64 };
                let xi = 2.0 * std::f64::consts::PI * l_signed as f64 / self.grid.l1;
                *c *= Complex64::from_polar(1.0, -xi * w * dt);
            }
            self.fft_inv.process(&mut buf);
            for (dst, &src) in row.iter_mut().zip(&buf) {
                *dst = src / n as f64;
            }
        }
        out
    }

    /// Forcing g_k(t, x_1 node i) = -(i k / x_0) b . G_k.
    fn forcing(&self, source: &BoundarySource, t: f64) -> Array2<Complex64> {
        let p = self.model.p();
        let mut g = Array2::zeros((self.grid.k_modes, self.grid.n_x1));
        let b: DVector<f64> = self.ms.b.clone();
        for i in 0..self.grid.n_x1 {
            let x1 = self.grid.x1(i);
            for k in 1..=self.grid.k_modes {
                let gk = source.mode(p, k as i32, t, x1);
                let mut bg = Complex64::default();
                for c in 0..p {
                    bg += gk[c] * b[c];
                }
                if bg.norm() > 0.0 {
                    g[(k - 1, i)] = -Complex64::new(0.0, k as f64) * bg / self.cb.x0;
                }
            }
        }
        g
    }

    /// Dealiased theta_0-convolution (a^2)_k for k = 1..K (2/3 rule).
    fn theta_square(&self, a: &Array2<Complex64>) -> Array2<Complex64> {
        let kk = self.grid.k_modes as i64;
        let kd = 2 * kk / 3;
        let get = |k: i64, i: usize| -> Complex64 {
            if k == 0 || k.abs() > kk {
                Complex64::default()
            } else if k > 0 {
                a[((k - 1) as usize, i)]
            } else {
                a[((-k - 1) as usize, i)].conj()
            }
        };
        let mut out = Array2::zeros((self.grid.k_modes, self.grid.n_x1));
        for i in 0..self.grid.n_x1 {
            for k in 1..=kk {
                if k > kd {
                    continue; // dealiased away
                }
                let mut s = Complex64::default();
                for j in (k - kk).max(-kk)..=kk {
                    if j == 0 || j == k {
                        continue;
                    }
                    s += get(j, i) * get(k - j, i);
                }
                out[((k - 1) as usize, i)] = s;
            }
        }
        out
    }

    /// Nonlinear/nonlocal right-hand side N(t, a) (everything except the
    /// exactly-integrated linear transport): forcing minus zero-order,
    /// Burgers and resonance-memory terms.
    fn rhs(
        &self,
        source: &BoundarySource,
        t: f64,
        a: &Array2<Complex64>,
        hist: &History,
        tau: &[TauGrid],
    ) -> crate::Result<Array2<Complex64>> {
        let mut n = self.forcing(source, t);
        if self.cb.zero_order != 0.0 {
            n.scaled_add(Complex64::new(-self.cb.zero_order, 0.0), a);
        }
        if self.cb.alpha1 != 0.0 {
            let sq = self.theta_square(a);
            for k in 1..=self.grid.k_modes {
                let fac = Complex64::new(0.0, -(self.cb.alpha1) * k as f64);
                for i in 0..self.grid.n_x1 {
                    n[(k - 1, i)] += fac * sq[(k - 1, i)];
                }
            }
        }
        for (ti, tc) in self.cb.triples.iter().enumerate() {
            if tc.boundary_coef == 0.0 {
                continue;
            }
            for k in 1..=self.grid.k_modes as i64 {
                if k % tc.triple.n_m != 0 {
                    continue;
                }
                let fac = Complex64::new(0.0, -tc.boundary_coef * k as f64);
                for i in 0..self.grid.n_x1 {
                    let trace = match self.mode {
                        TauMode::ExactMemory => {
                            memory_term_exact(tc, hist, &self.grid, t, self.grid.x1(i), k)?
                        }
                        TauMode::GridTau => tau[ti].trace(tc.triple.n_m, k, i),
                    };
                    n[((k - 1) as usize, i)] += fac * trace;
                }
            }
        }
        Ok(n)
    }

    /// Upwind-biased second-order transport operator for tau~ plus the
    /// interaction source sampled from the amplitude history: returns
    /// d_t tau~.  Values beyond x_2 = L_2 are exactly zero ahead of the wave
    /// front (the run configuration guarantees no wave reaches the top), so
    /// the one-sided stencil keeps its order at the inflow boundary.
    fn tau_rhs(
        &self,
        tc: &TripleConstants,
        tau: &TauGrid,
        hist: &History,
        t: f64,
    ) -> crate::Result<Array3<Complex64>> {
        let (nx1, nx2) = (self.grid.n_x1, tau.n_x2);
        let (dx1, dx2) = (self.grid.dx1(), tau.dx2());
        let (v1, v2) = (tc.v_out[0], tc.v_out[1]);
        let mut out = Array3::zeros((tau.jmax, nx1, nx2));
        for j in 1..=tau.jmax as i64 {
            // Interaction source modes.
            let (np, nr) = (tc.triple.n_p, tc.triple.n_r);
            for i in 0..nx1 {
                for l in 0..nx2 {
                    let x1 = self.grid.x1(i);
                    let x2 = l as f64 * dx2;
                    let at1 = |ii: usize| tau.data[((j - 1) as usize, ii, l)];
                    let at2 = |ll: i64| {
                        if ll < 0 || ll >= nx2 as i64 {
                            Complex64::default()
                        } else {
                            tau.data[((j - 1) as usize, i, ll as usize)]
                        }
                    };
                    let here = at1(i);
                    // Upwind-biased tangential derivative (periodic).
                    let ddx1 = if v1 > 0.0 {
                        (here * 3.0 - at1((i + nx1 - 1) % nx1) * 4.0 + at1((i + nx1 - 2) % nx1))
                            / (2.0 * dx1)
                    } else if v1 < 0.0 {
                        (at1((i + 2) % nx1) * -1.0 + at1((i + 1) % nx1) * 4.0 - here * 3.0)
                            / (2.0 * dx1)
                    } else {
                        Complex64::default()
                    };
                    // Upwind-biased normal derivative; v2 < 0 for outgoing
                    // modes, so the inflow side is the top where tau~ = 0
                    // ahead of the waves (and at x2 = 0 the characteristics
                    // leave the domain: no condition is imposed there).
                    let li = l as i64;
                    let ddx2 = if v2 < 0.0 {
                        (at2(li + 2) * -1.0 + at2(li + 1) * 4.0 - here * 3.0) / (2.0 * dx2)
                    } else if v2 > 0.0 {
                        (here * 3.0 - at2(li - 1) * 4.0 + at2(li - 2)) / (2.0 * dx2)
                    } else {
                        Complex64::default()
                    };
                    // Source: a_{j n_p}(translate_p) a_{j n_r}(translate_r).
                    let sample = |v: [f64; 2], kk: i64| -> crate::Result<Complex64> {
                        let ts = t - x2 / v[1];
                        let xs = x1 - v[0] * x2 / v[1];
                        hist.sample(&self.grid, kk, ts, xs)
                    };
                    let ap = sample(tc.v_p, j * np)?;
                    let src = if ap.norm() == 0.0 {
                        Complex64::default()
                    } else {
                        ap * sample(tc.v_r, j * nr)?
                    };
                    out[((j - 1) as usize, i, l)] = src - ddx1 * v1 - ddx2 * v2;
                }
            }
        }
        Ok(out)
    }

    /// One RK2 (Heun) step of all tau~ grids using history through t + dt.
    fn step_tau(
        &self,
        tau: &mut [TauGrid],
        hist: &History,
        t: f64,
    ) -> crate::Result<()> {
        for (ti, tc) in self.cb.triples.iter().enumerate() {
            let k1 = self.tau_rhs(tc, &tau[ti], hist, t)?;
            let mut mid = tau[ti].clone();
            mid.data.scaled_add(Complex64::new(self.dt, 0.0), &k1);
            let k2 = self.tau_rhs(tc, &mid, hist, t + self.dt)?;
            let half = Complex64::new(0.5 * self.dt, 0.0);
            tau[ti].data.scaled_add(half, &k1);
            tau[ti].data.scaled_add(half, &k2);
        }
        Ok(())
    }

    fn check_finite(&self, t: f64, a: &Array2<Complex64>) -> crate::Result<()> {
        let mut sup: f64 = 0.0;
        for c in a.iter() {
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(Error::BlowUp { t, norm: f64::NAN });
            }
            sup = sup.max(c.norm());
        }
        if sup > BLOWUP_SUP {
            return Err(Error::BlowUp { t, norm: sup });
        }
        Ok(())
    }

    /// March the full subsystem to T = n_steps * dt.
    pub fn solve(&self, source: &BoundarySource) -> crate::Result<ProfileSolution> {
        let mut state = AmplitudeState::zero(&self.grid);
        let mut hist = History::new(self.dt, state.coeffs.clone());
        let mut tau: Vec<TauGrid> = self
            .cb
            .triples
            .iter()
            .map(|tc| TauGrid::zero(&self.grid, tc.triple.n_m, self.n_x2, self.l2))
            .collect();
        let mut sup_trace = vec![(0.0, 0.0)];

        for step in 0..self.n_steps {
            let t = step as f64 * self.dt;
            // Nonlinear CFL check for the Burgers characteristic speed.
            let sup_now = sup_trace.last().unwrap().1;
            let b_speed = 2.0 * self.cb.alpha1.abs() * sup_now;
            let dth = 2.0 * std::f64::consts::PI / (2 * self.grid.k_modes + 1) as f64;
            if b_speed * self.dt > dth {
                return Err(Error::Amplitude(format!(
                    "CFL violation in theta_0 at t = {t}: speed {b_speed:.3e} * dt exceeds {dth:.3e}"
                )));
            }

            // Lawson-RK2: exact integrating factor for the transport.
            let k1 = self.rhs(source, t, &state.coeffs, &hist, &tau)?;
            let mut stage = state.coeffs.clone();
            stage.scaled_add(Complex64::new(self.dt, 0.0), &k1);
            let stage = self.shift(&stage, self.dt);
            // Provisional history at t + dt for the memory/tau source.
            hist.levels.push(stage.clone());
            if self.mode == TauMode::GridTau {
                self.step_tau(&mut tau, &hist, t)?;
            }
            let k2 = self.rhs(source, t + self.dt, &stage, &hist, &tau)?;
            let mut next = self.shift(&state.coeffs, self.dt);
            let sk1 = self.shift(&k1, self.dt);
            let half = Complex64::new(0.5 * self.dt, 0.0);
            next.scaled_add(half, &sk1);
            next.scaled_add(half, &k2);
            *hist.levels.last_mut().unwrap() = next.clone();

            state.coeffs = next;
            state.t = (step + 1) as f64 * self.dt;
            self.check_finite(state.t, &state.coeffs)?;
            sup_trace.push((state.t, state.sup(&self.grid)));
        }

        Ok(ProfileSolution {
            grid: self.grid.clone(),
            dt: self.dt,
            history: hist,
            constants: self.cb.clone(),
            tau,
            sup_trace,
        })
    }

    /// Finite-difference residual of the normalized boundary equation at an
    /// interior stored level: centered d_t, spectral d_1, all other terms as
    /// in the scheme.  Returns the max-coefficient residual norm.
    pub fn residual(
        &self,
        source: &BoundarySource,
        sol: &ProfileSolution,
        step: usize,
    ) -> crate::Result<f64> {
        if step == 0 || step + 1 >= sol.history.levels.len() {
            return Err(Error::Amplitude("residual needs an interior level".into()));
        }
        let t = step as f64 * sol.dt;
        let a = &sol.history.levels[step];
        let dtv = {
            let mut d = sol.history.levels[step + 1].clone();
            d.scaled_add(Complex64::new(-1.0, 0.0), &sol.history.levels[step - 1]);
            d.mapv_into(|c| c / (2.0 * sol.dt))
        };
        // Spectral x1 derivative.
        let n = self.grid.n_x1;
        let mut dx = a.clone();
        let mut buf: Vec<Complex64> = Vec::with_capacity(n);
        for mut row in dx.rows_mut() {
            buf.clear();
            buf.extend(row.iter().copied());
            self.fft_fwd.process(&mut buf);
            for (l, c) in buf.iter_mut().enumerate() {
                let l_signed = if l <= n / 2 { l as i64 } else { l as i64 - n as i64 };
                let xi = 2.0 * std::f64::consts::PI * l_signed as f64 / self.grid.l1;
                *c *= Complex64::new(0.0, xi);
            }
            self.fft_inv.process(&mut buf);
            for (dst, &src) in row.iter_mut().zip(&buf) {
                *dst = src / n as f64;
            }
        }
        let nn = self.rhs(source, t, a, &sol.history, &sol.tau)?;
        let mut res: f64 = 0.0;
        for k in 0..self.grid.k_modes {
            for i in 0..n {
                let r = dtv[(k, i)] + dx[(k, i)] * self.cb.transport - nn[(k, i)];
                res = res.max(r.norm());
            }
        }
        Ok(res)
    }
}

/// Convenience wrapper: spectral package + constants + march.
pub fn solve_key_subsystem(
    model: &HyperbolicModel,
    ms: &ModeSet,
    source: &BoundarySource,
    rc: &RunConfig,
    mode: TauMode,
) -> crate::Result<ProfileSolution> {
    let triples = crate::spectral::find_resonances(ms, rc.k_modes as i64, 1e-10);
    let cb = compute_constants(model, ms, &triples)?;
    let solver = KeySubsystemSolver::new(model, ms, cb, rc, mode)?;
    solver.solve(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{euler_model, QuadTensor, SourceMode};
    use crate::model::expr::{chi, Expr};
    use crate::spectral::{find_resonances, mode_package};
    use nalgebra::DMatrix;

    const S3: f64 = 1.732_050_807_568_877_2;

    fn euler() -> HyperbolicModel {
        euler_model(1.0, 1.0, S3, 1.0).unwrap()
    }

    fn modes(m: &HyperbolicModel) -> ModeSet {
        mode_package(m).unwrap()
    }

    #[test]
    fn constants_match_printed_euler_formulas() {
        let mut m = euler();
        // Psi(e, e) = (0, 1) with e = (1, 0, -1): Psi_0 = 0, Psi_1 = diag(1,0,0).
        let mut psi1 = DMatrix::zeros(3, 3);
        psi1[(0, 0)] = 1.0;
        m.quad_boundary = QuadTensor::new(vec![DMatrix::zeros(3, 3), psi1]).unwrap();
        // Random-ish symmetric interior tensor.
        let mut d0 = DMatrix::zeros(3, 3);
        d0[(0, 1)] = 0.7;
        d0[(1, 0)] = 0.7;
        d0[(2, 2)] = -0.3;
        let mut d1 = DMatrix::zeros(3, 3);
        d1[(0, 0)] = 0.2;
        d1[(1, 2)] = -0.4;
        d1[(2, 1)] = -0.4;
        let d2 = DMatrix::identity(3, 3) * 0.9;
        m.quad_interior = QuadTensor::new(vec![d0, d1, d2]).unwrap();

        let ms = modes(&m);
        let triples = find_resonances(&ms, 8, 1e-10);
        let cb = compute_constants(&m, &ms, &triples).unwrap();

        // Transport: raw normalizer 2 (the kernel-normalized b is half the
        // tabulated one, so every /x0 coefficient is twice the tabulated
        // value; the rescaled display field keeps the tabulated magnitude
        // 4), speed -c.  The raw pairing is the dynamically correct one:
        // the direct solver's measured growth rate of the kernel amplitude
        // under harmonic forcing matches -(i/x0) b.G with x0 = -2.
        assert!((cb.x0 + 2.0).abs() < 1e-9);
        assert!((ms.x_lop[0] + 4.0).abs() < 1e-9);
        assert!((cb.transport + S3).abs() < 1e-9);
        // alpha_1 = -b.Psi(e,e)/x0 = (1/2)(-sqrt3) in this normalization.
        assert!((cb.alpha1 + S3 / 2.0).abs() < 1e-10, "alpha1 = {}", cb.alpha1);
        // alpha_2 = u c eta * l_1 . A_2^{-1} D(r_2, r_3), evaluated with the
        // reference eigenvectors r_1 = (2, sqrt3, 3), r_2 = (1, sqrt3, 0),
        // r_3 = (0, sqrt3, 1) and the dual l_1 = (1/4, -1/(4 sqrt3), 1/4);
        // the assembled coupling is normalization-invariant, the closed-form
        // expression is not, so the comparison must fix the basis.
        let bd_inv = m.bd_inv().unwrap();
        let r2 = nalgebra::DVector::from_vec(vec![1.0, S3, 0.0]);
        let r3 = nalgebra::DVector::from_vec(vec![0.0, S3, 1.0]);
        let l1 = nalgebra::DVector::from_vec(vec![0.25, -1.0 / (4.0 * S3), 0.25]);
        let d_r2_r3 = m.quad_interior.apply(&r2, &r3);
        let x = l1.dot(&(&bd_inv * d_r2_r3));
        // Doubled relative to the tabulated closed form, like alpha_1.
        let alpha2_printed = 2.0 * 1.0 * S3 * 1.0 * x;
        assert!(
            (cb.triples[0].boundary_coef - alpha2_printed).abs() < 1e-9 * (1.0 + x.abs()),
            "alpha2 = {} vs printed {}",
            cb.triples[0].boundary_coef,
            alpha2_printed
        );
        // Trace scalings: c_m r_m = e_m component-wise (c4a); outgoing 0.
        for mi in [1usize, 2] {
            let lhs = &ms.modes[mi].right_basis[0] * cb.c_m[mi];
            assert!((lhs - &ms.e_comps[mi]).norm() < 1e-9, "trace scaling mode {mi}");
        }
        assert!(cb.c_m[0].abs() < 1e-10);
        // No zero-order term without D_0.
        assert_eq!(cb.zero_order, 0.0);

        // Zero nonlinearities: alpha_1 = alpha_2 = 0.
        let m0 = euler();
        let cb0 = compute_constants(&m0, &modes(&m0), &triples).unwrap();
        assert_eq!(cb0.alpha1, 0.0);
        assert_eq!(cb0.triples[0].boundary_coef, 0.0);
    }

    fn test_grid() -> Grid1 {
        Grid1 {
            n_x1: 32,
            l1: 2.0 * std::f64::consts::PI,
            k_modes: 4,
        }
    }

    fn history_from(
        grid: &Grid1,
        dt: f64,
        n: usize,
        f: impl Fn(i64, f64, f64) -> Complex64,
    ) -> History {
        let mut levels = Vec::new();
        for s in 0..=n {
            let t = s as f64 * dt;
            let mut a = Array2::zeros((grid.k_modes, grid.n_x1));
            for k in 1..=grid.k_modes {
                for i in 0..grid.n_x1 {
                    a[(k - 1, i)] = f(k as i64, t, grid.x1(i));
                }
            }
            levels.push(a);
        }
        History { dt, levels }
    }

    fn euler_triple_constants() -> TripleConstants {
        let m = euler();
        let ms = modes(&m);
        let triples = find_resonances(&ms, 8, 1e-10);
        let cb = compute_constants(&m, &ms, &triples).unwrap();
        cb.triples[0].clone()
    }

    #[test]
    fn memory_term_trivial_cases() {
        let grid = test_grid();
        let tc = euler_triple_constants();
        let hist = history_from(&grid, 0.05, 8, |k, t, _| {
            if k == 1 {
                Complex64::new(chi(t), 0.0)
            } else {
                Complex64::default()
            }
        });
        // t = 0: empty integral.
        assert_eq!(
            memory_term_exact(&tc, &hist, &grid, 0.0, 0.3, 1).unwrap(),
            Complex64::default()
        );
        // Mode k = 1 needs partners a_2 and a_{-1}; a_2 = 0 kills it.
        assert_eq!(
            memory_term_exact(&tc, &hist, &grid, 0.4, 0.3, 1).unwrap(),
            Complex64::default()
        );
        // History gap is an error.
        assert!(memory_term_exact(&tc, &hist, &grid, 10.0, 0.3, 1).is_err());
    }

    #[test]
    fn memory_term_matches_refined_quadrature_and_printed_kernel() {
        // Smooth, analytically known history: a_k(t, x1) known in closed form,
        // so both the trapezoid result and a 10x-refined quadrature of the
        // printed M=1/sqrt3 kernel can be computed.
        let grid = Grid1 {
            n_x1: 64,
            l1: 2.0 * std::f64::consts::PI,
            k_modes: 4,
        };
        let f = |k: i64, t: f64, x1: f64| -> Complex64 {
            let amp = (0.3 + 0.1 * k as f64) * t * t;
            Complex64::from_polar(amp, (k as f64) * 0.9 * x1 + 0.2 * t)
        };
        let dt = 0.01;
        let n = 40;
        let hist = history_from(&grid, dt, n, |k, t, x| f(k, t, x));
        let tc = euler_triple_constants();
        let t = n as f64 * dt;
        let x1 = 1.234;
        let k = 1i64;
        let got = memory_term_exact(&tc, &hist, &grid, t, x1, k).unwrap();

        // Printed kernel at M = 1/sqrt3 (with c = sqrt3):
        // integrand a_{2k}((3s-t)/2, x1 + c(t-s)) a_{-k}((3s-t)/2, x1 + (c/2)(t-s)),
        // with a_{-k} = conj(a_k) by the reality of the amplitude.
        let integrand = |s: f64| -> Complex64 {
            let ts = (3.0 * s - t) / 2.0;
            if ts <= 0.0 {
                return Complex64::default();
            }
            f(2 * k, ts, x1 + S3 * (t - s)) * f(k, ts, x1 + S3 / 2.0 * (t - s)).conj()
        };
        let refine = 10 * n;
        let h = t / refine as f64;
        let mut acc = integrand(0.0) * 0.5 + integrand(t) * 0.5;
        for i in 1..refine {
            acc += integrand(i as f64 * h);
        }
        let want = acc * h;
        assert!(
            (got - want).norm() < 1e-3 * (1.0 + want.norm()),
            "memory {got} vs refined quadrature of printed kernel {want}"
        );
    }

    #[test]
    fn sigma_trace_and_transport_residual() {
        let m = euler();
        let ms = modes(&m);
        let cb = compute_constants(&m, &ms, &find_resonances(&ms, 8, 1e-10)).unwrap();
        let grid = Grid1 {
            n_x1: 128,
            l1: 2.0 * std::f64::consts::PI,
            k_modes: 2,
        };
        let f = |k: i64, t: f64, x1: f64| -> Complex64 {
            Complex64::from_polar(0.5 * t * t / (1.0 + k as f64), x1.sin() * 0.3)
        };
        let hist = history_from(&grid, 0.005, 200, |k, t, x| f(k, t, x));
        // Trace condition at x2 = 0: sum over incoming modes of
        // sigma_m r_m equals a * e component-wise.
        let t = 0.8;
        let x1 = 2.0;
        let a = hist.sample(&grid, 1, t, x1).unwrap();
        let s2 = reconstruct_sigma(&ms, &cb, &hist, &grid, 1, t, x1, 0.0, 1).unwrap();
        let s3 = reconstruct_sigma(&ms, &cb, &hist, &grid, 2, t, x1, 0.0, 1).unwrap();
        for c in 0..3 {
            let lhs = s2 * ms.modes[1].right_basis[0][c] + s3 * ms.modes[2].right_basis[0][c];
            let rhs = a * ms.e[c];
            assert!((lhs - rhs).norm() < 1e-12, "trace condition component {c}");
        }
        // Outgoing mode rejected.
        assert!(reconstruct_sigma(&ms, &cb, &hist, &grid, 0, t, x1, 0.0, 1).is_err());

        // Transport residual d_t sigma + v . grad sigma ~ 0 by translation.
        let h = 1e-4;
        for m_idx in [1usize, 2] {
            let v = &ms.modes[m_idx].velocity;
            let x2 = 0.15;
            let s0 = |tt: f64, xx1: f64, xx2: f64| {
                reconstruct_sigma(&ms, &cb, &hist, &grid, m_idx, tt, xx1, xx2, 1).unwrap()
            };
            let dt_ = (s0(t + h, x1, x2) - s0(t - h, x1, x2)) / (2.0 * h);
            let d1 = (s0(t, x1 + h, x2) - s0(t, x1 - h, x2)) / (2.0 * h);
            let d2 = (s0(t, x1, x2 + h) - s0(t, x1, x2 - h)) / (2.0 * h);
            let res = dt_ + d1 * v[0] + d2 * v[1];
            assert!(res.norm() < 2e-2, "transport residual {res} for mode {m_idx}");
        }
    }

    fn single_mode_source() -> BoundarySource {
        // G_1 = (0.3 cos(x1), 0.1) (+ the automatic temporal ramp).
        let mut src = BoundarySource::zero(2.0 * std::f64::consts::PI);
        src.modes.push(SourceMode {
            k: 1,
            re: vec![Expr::parse("0.3*cos(x1)").unwrap(), Expr::parse("0.1").unwrap()],
            im: vec![Expr::parse("0").unwrap(), Expr::parse("0").unwrap()],
        });
        src
    }

    #[test]
    fn linear_run_matches_duhamel_oracle() {
        let m = euler();
        let ms = modes(&m);
        let mut rc = RunConfig::default();
        rc.n_x1 = 96;
        rc.k_modes = 4;
        rc.t_final = 0.6;
        rc.n_x2 = 8;
        rc.l2 = 3.5;
        rc.cfl = 0.4;
        let src = single_mode_source();
        let sol = solve_key_subsystem(&m, &ms, &src, &rc, TauMode::ExactMemory).unwrap();

        // Linear model (D = Psi = 0): a_k solves d_t a - c d_1 a = g_k, so
        // a(t, x1) = int_0^t g(s, x1 + c(t-s)) ds with
        // g_k = -(i k / x0) b . G_k and x0 = -2.
        let b = ms.b.clone();
        let g = |t: f64, x1: f64| -> Complex64 {
            let gk = src.mode(2, 1, t, x1);
            let mut bg = Complex64::default();
            for c in 0..2 {
                bg += gk[c] * b[c];
            }
            -Complex64::new(0.0, 1.0) * bg / (-2.0)
        };
        let t = rc.t_final;
        let quad = 4000;
        let h = t / quad as f64;
        let mut worst: f64 = 0.0;
        for i in (0..rc.n_x1).step_by(7) {
            let x1 = sol.grid.x1(i);
            let mut acc = g(0.0, x1 + S3 * t) * 0.5 + g(t, x1) * 0.5;
            for s in 1..quad {
                let ss = s as f64 * h;
                acc += g(ss, x1 + S3 * (t - ss));
            }
            let want = acc * h;
            let got = sol.history.levels.last().unwrap()[(0, i)];
            worst = worst.max((got - want).norm());
        }
        assert!(worst < 2e-5, "max deviation from Duhamel oracle: {worst:.3e}");
        // Higher modes stay empty (single-mode forcing, no nonlinearity).
        for k in 2..=rc.k_modes {
            let sup: f64 = sol
                .history
                .levels
                .last()
                .unwrap()
                .row(k - 1)
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            assert!(sup < 1e-13);
        }
    }

    #[test]
    fn zero_source_stays_zero_and_causal() {
        let m = euler();
        let ms = modes(&m);
        let mut rc = RunConfig::default();
        rc.n_x1 = 16;
        rc.k_modes = 3;
        rc.t_final = 0.3;
        rc.n_x2 = 6;
        rc.l2 = 3.0;
        let src = BoundarySource::zero(rc.l1);
        for mode in [TauMode::ExactMemory, TauMode::GridTau] {
            let sol = solve_key_subsystem(&m, &ms, &src, &rc, mode).unwrap();
            assert_eq!(sol.sup_a(), 0.0);
            for tg in &sol.tau {
                assert!(tg.data.iter().all(|c| c.norm() == 0.0));
            }
        }
    }

    #[test]
    fn quadratic_response_scaling() {
        // Small linear regime: doubling G doubles a within 5% early on.
        let mut m = euler();
        let mut psi1 = DMatrix::zeros(3, 3);
        psi1[(0, 0)] = 1.0;
        m.quad_boundary = QuadTensor::new(vec![DMatrix::zeros(3, 3), psi1]).unwrap();
        let ms = modes(&m);
        let mut rc = RunConfig::default();
        rc.n_x1 = 32;
        rc.k_modes = 6;
        rc.t_final = 0.15;
        rc.n_x2 = 6;
        rc.l2 = 3.0;
        let mut src1 = single_mode_source();
        for sm in &mut src1.modes {
            for e in &mut sm.re {
                *e = Expr::parse(&format!("({e}) * 0.01")).unwrap();
            }
            for e in &mut sm.im {
                *e = Expr::parse(&format!("({e}) * 0.01")).unwrap();
            }
        }
        let mut src2 = single_mode_source();
        for sm in &mut src2.modes {
            for e in &mut sm.re {
                *e = Expr::parse(&format!("({e}) * 0.02")).unwrap();
            }
            for e in &mut sm.im {
                *e = Expr::parse(&format!("({e}) * 0.02")).unwrap();
            }
        }
        let s1 = solve_key_subsystem(&m, &ms, &src1, &rc, TauMode::ExactMemory).unwrap();
        let s2 = solve_key_subsystem(&m, &ms, &src2, &rc, TauMode::ExactMemory).unwrap();
        let (a1, a2) = (s1.sup_a(), s2.sup_a());
        assert!(a1 > 0.0);
        let ratio = a2 / a1;
        assert!((ratio - 2.0).abs() < 0.1, "doubling ratio {ratio}");
    }

    #[test]
    fn residual_of_scheme_is_small() {
        let mut m = euler();
        let mut psi1 = DMatrix::zeros(3, 3);
        psi1[(0, 0)] = 1.0;
        m.quad_boundary = QuadTensor::new(vec![DMatrix::zeros(3, 3), psi1]).unwrap();
        let mut d_comp = DMatrix::zeros(3, 3);
        d_comp[(0, 2)] = 0.5;
        d_comp[(2, 0)] = 0.5;
        m.quad_interior =
            QuadTensor::new(vec![d_comp.clone(), DMatrix::zeros(3, 3), d_comp]).unwrap();
        let ms = modes(&m);
        let triples = find_resonances(&ms, 8, 1e-10);
        let cb = compute_constants(&m, &ms, &triples).unwrap();
        let mut rc = RunConfig::default();
        rc.n_x1 = 64;
        rc.k_modes = 6;
        rc.t_final = 0.4;
        rc.n_x2 = 8;
        rc.l2 = 3.0;
        rc.cfl = 0.25;
        let solver = KeySubsystemSolver::new(&m, &ms, cb, &rc, TauMode::ExactMemory).unwrap();
        let src = single_mode_source();
        let sol = solver.solve(&src).unwrap();
        let mid = sol.history.levels.len() / 2;
        let res = solver.residual(&src, &sol, mid).unwrap();
        let scale = sol.sup_a().max(1e-12);
        assert!(res / scale < 2e-2, "relative residual {res} / {scale}");
    }

    #[test]
    fn grid_tau_trace_converges_to_exact_memory() {
        // The tau~ dynamics depend only on the a-history, so the two
        // representations can be compared on the same nonlinear run.
        let mut m = euler();
        let mut psi1 = DMatrix::zeros(3, 3);
        psi1[(0, 0)] = 1.0;
        m.quad_boundary = QuadTensor::new(vec![DMatrix::zeros(3, 3), psi1]).unwrap();
        let mut d_comp = DMatrix::zeros(3, 3);
        d_comp[(1, 1)] = 1.0;
        m.quad_interior = QuadTensor::new(vec![
            d_comp.clone(),
            DMatrix::zeros(3, 3),
            DMatrix::zeros(3, 3),
        ])
        .unwrap();
        let ms = modes(&m);

        let mut diffs = Vec::new();
        for (nx, nx2) in [(32usize, 61usize), (64, 121)] {
            let mut rc = RunConfig::default();
            rc.n_x1 = nx;
            rc.k_modes = 4;
            rc.t_final = 0.4;
            rc.n_x2 = nx2;
            rc.l2 = 3.0;
            rc.cfl = 0.4;
            let sol = solve_key_subsystem(&m, &ms, &single_mode_source(), &rc, TauMode::GridTau)
                .unwrap();
            let tc = &sol.constants.triples[0];
            let t = rc.t_final;
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..nx {
                for k in 1..=2i64 {
                    let exact =
                        memory_term_exact(tc, &sol.history, &sol.grid, t, sol.grid.x1(i), k)
                            .unwrap();
                    let grid_val = sol.tau[0].trace(tc.triple.n_m, k, i);
                    num += (exact - grid_val).norm_sqr();
                    den += exact.norm_sqr();
                }
            }
            assert!(den > 0.0, "memory trace identically zero; test is vacuous");
            diffs.push((num / den).sqrt());
        }
        assert!(
            diffs[1] < 1e-2,
            "relative trace difference at fine grid: {diffs:?}"
        );
        assert!(
            2.0 * diffs[1] <= diffs[0],
            "refinement improvement below x2: {diffs:?}"
        );
    }
}
