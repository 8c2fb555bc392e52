//! Frequency-beta spectral package: dispersion roots, group velocities,
//! incoming/outgoing classification, projectors P_m, partial inverses R_m,
//! the vectors e and b of the weak-stability configuration, the Lopatinskii
//! transport field, and resonance triples.

use nalgebra::linalg::{Schur, SVD};
use nalgebra::{DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::model::HyperbolicModel;
use crate::Error;

/// Eigenvalues of a real square matrix with a hard iteration cap (the
/// unbounded QR iteration can fail to terminate on exactly-symmetric spectra).
pub fn eigenvalues(m: &DMatrix<f64>) -> crate::Result<Vec<Complex64>> {
    let schur = Schur::try_new(m.clone(), 1e-13, 100_000)
        .ok_or_else(|| Error::Spectral("eigenvalue (Schur) iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// SVD with a hard iteration cap.
pub fn svd_checked(m: DMatrix<f64>, vectors: bool) -> crate::Result<SVD<f64, Dyn, Dyn>> {
    m.try_svd(vectors, vectors, 1e-13, 100_000)
        .ok_or_else(|| Error::Spectral("SVD iteration did not converge".into()))
}

/// Eigen-decomposition of a small complex matrix with simple spectrum:
/// eigenvalues by Durand-Kerner iteration on the characteristic polynomial
/// (coefficients via Faddeev-LeVerrier), eigenvectors by one shifted inverse
/// iteration sweep.  Both stages carry hard iteration caps.
pub fn complex_eigen(
    m: &DMatrix<Complex64>,
) -> crate::Result<Vec<(Complex64, DVector<Complex64>)>> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::Spectral("complex_eigen expects a nonempty square matrix".into()));
    }
    // Characteristic polynomial lambda^n + c[1] lambda^{n-1} + ... + c[n]
    // by Faddeev-LeVerrier.
    let mut coeffs = vec![Complex64::default(); n + 1];
    coeffs[0] = Complex64::new(1.0, 0.0);
    let mut a = DMatrix::from_element(n, n, Complex64::default());
    for i in 0..n {
        a[(i, i)] = Complex64::new(1.0, 0.0);
    }
    for k in 1..=n {
        let ma = m * &a;
        let trace: Complex64 = (0..n).map(|i| ma[(i, i)]).sum();
        let ck = -trace / k as f64;
        coeffs[k] = ck;
        a = ma;
        for i in 0..n {
            a[(i, i)] += ck;
        }
    }

    // Durand-Kerner from a scaled ring of distinct starting points.
    let scale = 1.0
        + coeffs
            .iter()
            .skip(1)
            .fold(0.0f64, |mx, c| mx.max(c.norm()));
    let mut roots: Vec<Complex64> = (0..n)
        .map(|i| {
            Complex64::from_polar(scale, 0.4 + 2.0 * std::f64::consts::PI * i as f64 / n as f64)
        })
        .collect();
    let eval = |z: Complex64| -> Complex64 {
        let mut p = Complex64::default();
        for c in &coeffs {
            p = p * z + c;
        }
        p
    };
    let mut converged = false;
    for _ in 0..500 {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= roots[i] - roots[j];
                }
            }
            if denom.norm() < 1e-300 {
                denom = Complex64::new(1e-300, 0.0);
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-14 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Spectral("Durand-Kerner iteration did not converge".into()));
    }

    // Eigenvectors: inverse iteration with a slightly offset shift.
    let mut out = Vec::with_capacity(n);
    for &lam in &roots {
        let mut shifted = m.clone();
        let off = 1e-10 * scale.max(1.0);
        for i in 0..n {
            shifted[(i, i)] -= lam + Complex64::new(off, off);
        }
        let lu = shifted.lu();
        let mut v = DVector::from_element(n, Complex64::new(1.0, 0.3));
        v /= Complex64::new(v.norm(), 0.0);
        let mut ok = false;
        for _ in 0..50 {
            let w = match lu.solve(&v) {
                Some(w) => w,
                None => break,
            };
            let nw = w.norm();
            if !nw.is_finite() || nw < 1e-300 {
                break;
            }
            let mut vnew = w / Complex64::new(nw, 0.0);
            // Fix the arbitrary phase: largest component real positive.
            let mut imax = 0;
            for i in 0..n {
                if vnew[i].norm() > vnew[imax].norm() {
                    imax = i;
                }
            }
            let ph = vnew[imax] / Complex64::new(vnew[imax].norm().max(1e-300), 0.0);
            vnew /= ph;
            let change = (&vnew - &v).norm();
            v = vnew;
            if change < 1e-13 {
                ok = true;
                break;
            }
        }
        let resid = (m * &v - &v * lam).norm();
        if !(ok || resid < 1e-8 * scale) {
            return Err(Error::Spectral(format!(
                "inverse iteration failed for eigenvalue {lam} (residual {resid:.3e})"
            )));
        }
        out.push((lam, v));
    }
    Ok(out)
}

/// Below this normal group velocity a mode counts as glancing.
pub const GLANCING_TOL: f64 = 1e-9;
/// Relative eigenvalue-grouping tolerance.
pub const GROUP_TOL: f64 = 1e-7;

/// Real eigen-decomposition of a real matrix with semi-simple real spectrum:
/// returns `(eigenvalue, basis of the eigenspace)` groups, eigenvalues sorted
/// ascending.  Eigenvalues come from the complex eigensolver; eigenvectors
/// from an SVD null-space extraction of `m - lambda I`, which keeps them real
/// and well-conditioned even for clustered spectra.
pub fn real_eigen_basis(
    m: &DMatrix<f64>,
    group_tol: f64,
) -> crate::Result<Vec<(f64, Vec<DVector<f64>>)>> {
    let n = m.nrows();
    let scale = m.norm().max(1.0);
    let eigs = eigenvalues(m)?;
    for z in eigs.iter() {
        if z.im.abs() > 1e-8 * scale {
            return Err(Error::Spectral(format!(
                "non-real eigenvalue {z} (matrix not hyperbolic here)"
            )));
        }
    }
    let mut vals: Vec<f64> = eigs.iter().map(|z| z.re).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Group by relative tolerance.
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for v in vals {
        match groups.last_mut() {
            Some((gv, count)) if (v - *gv).abs() <= group_tol * scale.max(v.abs()) => {
                // Running mean keeps the representative centered.
                *gv = (*gv * *count as f64 + v) / (*count as f64 + 1.0);
                *count += 1;
            }
            _ => groups.push((v, 1)),
        }
    }
    let mut out = Vec::new();
    for (lambda, mult) in groups {
        let shifted = m - DMatrix::identity(n, n) * lambda;
        let svd = svd_checked(shifted, true)?;
        let v_t = svd.v_t.as_ref().unwrap();
        let sv = &svd.singular_values;
        // The `mult` smallest singular values must be (numerically) zero.
        let cut = sv[n - mult];
        if cut > 1e-6 * scale {
            return Err(Error::Spectral(format!(
                "eigenvalue {lambda} not semi-simple: null space dim < multiplicity {mult} (sigma = {cut:.3e})"
            )));
        }
        let mut basis = Vec::new();
        for i in n - mult..n {
            basis.push(v_t.row(i).transpose());
        }
        out.push((lambda, basis));
    }
    Ok(out)
}

/// Roots of the dispersion relation det[tau I + sum eta_j B_j + omega B_d] = 0
/// at the model's beta, sorted ascending, with multiplicities expanded.
pub fn dispersion_roots(model: &HyperbolicModel) -> crate::Result<Vec<f64>> {
    let c = model.symbol_c()?;
    let groups = real_eigen_basis(&(-c), GROUP_TOL)
        .map_err(|e| Error::NotHyperbolic(e.to_string()))?;
    let mut roots = Vec::new();
    for (omega, basis) in groups {
        for _ in 0..basis.len() {
            roots.push(omega);
        }
    }
    Ok(roots)
}

/// Incoming/outgoing classification of a phase by the sign of the normal
/// component of its group velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Incoming,
    Outgoing,
}

/// Classify a group velocity; glancing (normal component below tolerance) is
/// an error.
pub fn classify(v: &[f64]) -> crate::Result<Direction> {
    let vd = *v.last().expect("empty velocity");
    if vd.abs() < GLANCING_TOL {
        return Err(Error::Glancing(vd));
    }
    Ok(if vd > 0.0 {
        Direction::Incoming
    } else {
        Direction::Outgoing
    })
}

/// Group velocity grad_xi lambda at the characteristic point (eta, omega_m),
/// via the Rayleigh-quotient formula on full-space eigenvectors, with an
/// internal finite-difference cross-check.
pub fn group_velocity(model: &HyperbolicModel, omega_m: f64) -> crate::Result<Vec<f64>> {
    let d = model.dim_space;
    let n = model.state_dim;
    let tau = model.beta[0];
    // Full-space symbol S(xi) at xi = (eta_1..eta_{d-1}, omega_m); the
    // characteristic relation says -tau is an eigenvalue of S.
    let sym_at = |xi: &[f64]| {
        let mut s = DMatrix::zeros(n, n);
        for (j, b) in model.b_mats.iter().enumerate() {
            s += b * xi[j];
        }
        s
    };
    let mut xi0: Vec<f64> = model.beta[1..].to_vec();
    xi0.push(omega_m);
    let s = sym_at(&xi0);

    // Right/left eigenvectors for eigenvalue -tau via SVD null spaces.
    let shifted = &s + DMatrix::identity(n, n) * tau;
    let scale = s.norm().max(1.0);
    let svd = svd_checked(shifted.clone(), true)?;
    let sv = &svd.singular_values;
    if sv[n - 1] > 1e-7 * scale {
        return Err(Error::Spectral(format!(
            "(eta, omega={omega_m}) is not a characteristic point (sigma_min = {:.3e})",
            sv[n - 1]
        )));
    }
    if n >= 2 && sv[n - 2] < 1e-7 * scale {
        return Err(Error::Spectral(format!(
            "degenerate characteristic point at omega = {omega_m}: eigenvalue not simple"
        )));
    }
    let r = svd.v_t.as_ref().unwrap().row(n - 1).transpose();
    let svd_t = svd_checked(shifted.transpose(), true)?;
    let l = svd_t.v_t.as_ref().unwrap().row(n - 1).transpose();
    let lr = l.dot(&r);
    if lr.abs() < 1e-10 {
        return Err(Error::Spectral("left/right eigenvector near-orthogonality".into()));
    }

    let v: Vec<f64> = model
        .b_mats
        .iter()
        .map(|b| l.dot(&(b * &r)) / lr)
        .collect();

    // Finite-difference cross-check on the tracked eigenvalue branch.
    let h = 1e-6 * (1.0 + xi0.iter().map(|x| x.abs()).fold(0.0, f64::max));
    for j in 0..d {
        let mut xp = xi0.clone();
        xp[j] += h;
        let mut xm = xi0.clone();
        xm[j] -= h;
        let branch = |xi: &[f64]| -> f64 {
            // Track the branch by nearest eigenvalue to -tau.
            eigenvalues(&sym_at(xi))
                .expect("eigenvalues at perturbed point")
                .iter()
                .map(|z| z.re)
                .min_by(|a, b| {
                    ((a + tau).abs())
                        .partial_cmp(&(b + tau).abs())
                        .unwrap()
                })
                .unwrap()
        };
        let fd = (branch(&xp) - branch(&xm)) / (2.0 * h);
        if (fd - v[j]).abs() > 1e-5 * (1.0 + v[j].abs()) {
            return Err(Error::Spectral(format!(
                "group-velocity cross-check failed in direction {j}: analytic {} vs FD {fd}",
                v[j]
            )));
        }
    }
    Ok(v)
}

/// Spectral data of one phase.
#[derive(Debug, Clone)]
pub struct Mode {
    pub omega: f64,
    pub velocity: Vec<f64>,
    pub direction: Direction,
    /// Right kernel basis r_{m,k} of B_d^{-1} L_0(d phi_m).
    pub right_basis: Vec<DVector<f64>>,
    /// Left basis, bi-orthogonal: l_{m,k} . r_{m',k'} = delta.
    pub left_basis: Vec<DVector<f64>>,
    /// Spectral projector P_m.
    pub projector: DMatrix<f64>,
    /// Partial inverse R_m = sum_{k != m} (omega_m - omega_k)^{-1} P_k.
    pub partial_inverse: DMatrix<f64>,
}

/// Complete spectral package at the boundary frequency, including the WR
/// vectors e and b and the Lopatinskii transport field.
#[derive(Debug, Clone)]
pub struct ModeSet {
    /// Modes sorted by descending omega (the Euler ordering: outgoing first).
    pub modes: Vec<Mode>,
    /// The symbol tau A_0 + sum eta_j A_j (eigenvalues -omega_m).
    pub symbol_c: DMatrix<f64>,
    /// A_0 = B_d^{-1}, A_j = B_d^{-1} B_j.
    pub a_mats: Vec<DMatrix<f64>>,
    pub boundary_matrix: DMatrix<f64>,
    pub beta: Vec<f64>,
    /// Right vectors of the incoming modes (a basis of the stable subspace).
    pub stable_basis: Vec<DVector<f64>>,
    /// Spans ker B intersected with the stable subspace; largest entry +1.
    pub e: DVector<f64>,
    /// e_m = P_m e per mode (zero for outgoing modes).
    pub e_comps: Vec<DVector<f64>>,
    /// Spans the annihilator of B(stable subspace); first nonzero entry +1.
    pub b: DVector<f64>,
    /// Raw Lopatinskii field coefficients b.B sum_m R_m A_j e_m, j = 0..d-1.
    pub x_lop_raw: Vec<f64>,
    /// Same field rescaled so the time coefficient magnitude matches the
    /// printed Euler transport coefficient u v (1+M^2)/(M^2 eta) (sign and
    /// direction preserved); equal to `x_lop_raw` for non-Euler models.
    pub x_lop: Vec<f64>,
}

impl ModeSet {
    pub fn n(&self) -> usize {
        self.symbol_c.nrows()
    }

    pub fn phase_count(&self) -> usize {
        self.modes.len()
    }

    /// L(d phi_m) = omega_m I + symbol_c  (i.e. B_d^{-1} L_0(d phi_m)).
    pub fn l_dphi(&self, m: usize) -> DMatrix<f64> {
        let n = self.n();
        &self.symbol_c + DMatrix::identity(n, n) * self.modes[m].omega
    }

    /// L(d(alpha.phi)) = (alpha.omega) I + n_alpha symbol_c, the coefficient
    /// matrix of the mode alpha (noncharacteristic modes invert it).
    pub fn l_alpha(&self, n_alpha: i64, alpha_omega: f64) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::identity(n, n) * alpha_omega + &self.symbol_c * n_alpha as f64
    }

    pub fn incoming(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.modes.len()).filter(|&m| self.modes[m].direction == Direction::Incoming)
    }

    pub fn outgoing(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.modes.len()).filter(|&m| self.modes[m].direction == Direction::Outgoing)
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.omega).collect()
    }

    pub fn min_omega_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for i in 0..self.modes.len() {
            for j in i + 1..self.modes.len() {
                gap = gap.min((self.modes[i].omega - self.modes[j].omega).abs());
            }
        }
        gap
    }
}

fn null_vector(m: &DMatrix<f64>) -> crate::Result<DVector<f64>> {
    let n = m.ncols();
    let svd = svd_checked(m.clone(), true)?;
    let sv = &svd.singular_values;
    let scale = sv[0].max(1.0);
    let rank_def = sv.iter().filter(|&&s| s < 1e-9 * scale).count();
    if rank_def != 1 {
        return Err(Error::NotWeaklyStable(format!(
            "kernel dimension {rank_def}, expected 1"
        )));
    }
    Ok(svd.v_t.as_ref().unwrap().row(n - 1).transpose())
}

/// Build the full spectral package at the model's boundary frequency.
pub fn mode_package(model: &HyperbolicModel) -> crate::Result<ModeSet> {
    let n = model.state_dim;
    let d = model.dim_space;
    let c = model.symbol_c()?;
    let a_mats = model.a_mats()?;

    // Eigen-structure of C: eigenvalues are -omega_m.
    let groups = real_eigen_basis(&c, GROUP_TOL).map_err(|e| Error::NotHyperbolic(e.to_string()))?;
    let ct = c.transpose();

    struct RawMode {
        omega: f64,
        right: Vec<DVector<f64>>,
        left: Vec<DVector<f64>>,
    }
    let mut raw: Vec<RawMode> = Vec::new();
    for (mu, right) in groups {
        let omega = -mu;
        // Matching left eigenvectors: kernel of C^T - mu I.
        let shifted = &ct - DMatrix::identity(n, n) * mu;
        let svd = svd_checked(shifted, true)?;
        let v_t = svd.v_t.as_ref().unwrap();
        let mult = right.len();
        let mut left: Vec<DVector<f64>> = (n - mult..n).map(|i| v_t.row(i).transpose()).collect();
        // Bi-orthogonalize within the group: L <- (L^T R)^{-T} L.
        let mut gram = DMatrix::zeros(mult, mult);
        for (i, l) in left.iter().enumerate() {
            for (j, r) in right.iter().enumerate() {
                gram[(i, j)] = l.dot(r);
            }
        }
        let gram_inv = gram.try_inverse().ok_or_else(|| {
            Error::Spectral(format!("left/right bases degenerate at omega = {omega}"))
        })?;
        let mut new_left = vec![DVector::zeros(n); mult];
        for (j, nl) in new_left.iter_mut().enumerate() {
            for (i, l) in left.iter().enumerate() {
                *nl += l * gram_inv[(j, i)];
            }
        }
        left = new_left;
        raw.push(RawMode { omega, right, left });
    }
    // Euler/appendix ordering: descending omega.
    raw.sort_by(|a, b| b.omega.partial_cmp(&a.omega).unwrap());

    let mut modes = Vec::new();
    for rm in &raw {
        let mut projector = DMatrix::zeros(n, n);
        for (r, l) in rm.right.iter().zip(&rm.left) {
            projector += r * l.transpose();
        }
        let velocity = group_velocity(model, rm.omega)?;
        let direction = classify(&velocity)?;
        modes.push(Mode {
            omega: rm.omega,
            velocity,
            direction,
            right_basis: rm.right.clone(),
            left_basis: rm.left.clone(),
            projector,
            partial_inverse: DMatrix::zeros(n, n),
        });
    }
    // Partial inverses need all projectors first.
    for m in 0..modes.len() {
        let mut rm = DMatrix::zeros(n, n);
        for k in 0..modes.len() {
            if k != m {
                rm += &modes[k].projector / (modes[m].omega - modes[k].omega);
            }
        }
        modes[m].partial_inverse = rm;
    }

    // Completeness check.
    let mut psum = DMatrix::zeros(n, n);
    for m in &modes {
        psum += &m.projector;
    }
    if (psum - DMatrix::identity(n, n)).norm() > 1e-8 {
        return Err(Error::Spectral("projectors do not sum to identity".into()));
    }

    // Stable subspace and the WR vectors.
    let stable_basis: Vec<DVector<f64>> = modes
        .iter()
        .filter(|m| m.direction == Direction::Incoming)
        .flat_map(|m| m.right_basis.iter().cloned())
        .collect();
    let p = model.p();
    if stable_basis.len() != p {
        return Err(Error::Spectral(format!(
            "stable subspace dimension {} != p = {p}",
            stable_basis.len()
        )));
    }
    let mut rs = DMatrix::zeros(n, p);
    for (j, r) in stable_basis.iter().enumerate() {
        rs.set_column(j, r);
    }
    let b_rs = &model.boundary_matrix * &rs; // p x p, singular by weak stability

    // e: ker B on the stable subspace.
    let coeffs = null_vector(&b_rs)
        .map_err(|_| Error::NotWeaklyStable("ker B on the stable subspace is not 1-dimensional".into()))?;
    let mut e = &rs * &coeffs;
    // Normalize: first entry of largest magnitude becomes +1.
    let mut imax = 0;
    for i in 0..n {
        if e[i].abs() > e[imax].abs() + 1e-12 * e.norm() {
            imax = i;
        }
    }
    if e[imax].abs() < 1e-12 {
        return Err(Error::NotWeaklyStable("e vanishes".into()));
    }
    e /= e[imax];

    // b: left kernel of B restricted to the stable subspace.
    let b_vec_raw = null_vector(&b_rs.transpose())
        .map_err(|_| Error::NotWeaklyStable("left kernel of B|stable is not 1-dimensional".into()))?;
    let mut b = b_vec_raw;
    let bmax = b.amax();
    let first_nz = (0..p)
        .find(|&i| b[i].abs() > 1e-9 * bmax)
        .ok_or_else(|| Error::NotWeaklyStable("b vanishes".into()))?;
    b /= b[first_nz];

    let e_comps: Vec<DVector<f64>> = modes
        .iter()
        .map(|m| {
            if m.direction == Direction::Incoming {
                &m.projector * &e
            } else {
                DVector::zeros(n)
            }
        })
        .collect();

    // Lopatinskii transport field.
    let bt_b = model.boundary_matrix.clone();
    let mut x_lop_raw = vec![0.0; d];
    for (j, x) in x_lop_raw.iter_mut().enumerate() {
        let mut acc = DVector::zeros(n);
        for (m, mode) in modes.iter().enumerate() {
            if mode.direction == Direction::Incoming {
                acc += &mode.partial_inverse * (&a_mats[j] * &e_comps[m]);
            }
        }
        *x = b.dot(&(&bt_b * acc));
    }
    if x_lop_raw[0].abs() < 1e-12 {
        return Err(Error::NotWeaklyStable("Lopatinskii field has no time component".into()));
    }
    let x_lop = match &model.euler {
        Some(ep) => {
            let m2 = ep.mach() * ep.mach();
            let printed = ep.u * ep.v * (1.0 + m2) / (m2 * ep.eta);
            let factor = printed / x_lop_raw[0].abs();
            x_lop_raw.iter().map(|x| x * factor).collect()
        }
        None => x_lop_raw.clone(),
    };

    Ok(ModeSet {
        modes,
        symbol_c: c,
        a_mats,
        boundary_matrix: model.boundary_matrix.clone(),
        beta: model.beta.clone(),
        stable_basis,
        e,
        e_comps,
        b,
        x_lop_raw,
        x_lop,
    })
}

/// A resonance n_m phi_m = n_p phi_p + n_r phi_r between one outgoing and two
/// incoming phases (gcd-reduced, deduplicated up to global sign, n_m > 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResonanceTriple {
    pub m_out: usize,
    pub p_in: usize,
    pub r_in: usize,
    pub n_m: i64,
    pub n_p: i64,
    pub n_r: i64,
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Brute-force scan for resonance triples with all |n| <= n_max.
///
/// The trace relation forces n_m = n_p + n_r; the remaining condition is the
/// omega-relation n_m omega_m = n_p omega_p + n_r omega_r, tested with a
/// scale-aware tolerance.
pub fn find_resonances(ms: &ModeSet, n_max: i64, tol: f64) -> Vec<ResonanceTriple> {
    let mut out: Vec<ResonanceTriple> = Vec::new();
    let omega_max = ms.omegas().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    for m_out in ms.outgoing().collect::<Vec<_>>() {
        let incoming: Vec<usize> = ms.incoming().collect();
        for (ip, &p_in) in incoming.iter().enumerate() {
            for &r_in in &incoming[ip..] {
                if p_in == r_in {
                    continue; // self-interaction handled by the p != r scan in this family
                }
                for n_p in -n_max..=n_max {
                    for n_r in -n_max..=n_max {
                        if n_p == 0 || n_r == 0 {
                            continue;
                        }
                        let n_m = n_p + n_r;
                        if n_m == 0 || n_m.abs() > n_max {
                            continue;
                        }
                        let defect = n_m as f64 * ms.modes[m_out].omega
                            - n_p as f64 * ms.modes[p_in].omega
                            - n_r as f64 * ms.modes[r_in].omega;
                        let scale = (n_m.abs().max(n_p.abs()).max(n_r.abs())) as f64 * omega_max;
                        if defect.abs() > tol * scale {
                            continue;
                        }
                        let g = gcd(gcd(n_m, n_p), n_r);
                        let (mut n_m, mut n_p, mut n_r) = (n_m / g, n_p / g, n_r / g);
                        if n_m < 0 {
                            n_m = -n_m;
                            n_p = -n_p;
                            n_r = -n_r;
                        }
                        let t = ResonanceTriple {
                            m_out,
                            p_in,
                            r_in,
                            n_m,
                            n_p,
                            n_r,
                        };
                        if !out.contains(&t) {
                            out.push(t);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Continued-fraction rationality test for the Euler family: the phases
/// resonate iff 2M^2/(1-M^2) = p/q is rational; returns the reduced (p, q).
pub fn euler_resonance_pq(mach: f64, max_den: i64, tol: f64) -> Option<(i64, i64)> {
    let m2 = mach * mach;
    let x = 2.0 * m2 / (1.0 - m2);
    // Continued-fraction convergents of x.
    let (mut h0, mut h1, mut k0, mut k1) = (1i64, x.floor() as i64, 0i64, 1i64);
    let mut frac = x - x.floor();
    for _ in 0..64 {
        if (x - h1 as f64 / k1 as f64).abs() < tol {
            let g = gcd(h1, k1);
            return Some((h1 / g, k1 / g));
        }
        if frac.abs() < 1e-15 {
            break;
        }
        let inv = 1.0 / frac;
        let a = inv.floor() as i64;
        frac = inv - inv.floor();
        let h2 = a * h1 + h0;
        let k2 = a * k1 + k0;
        h0 = h1;
        h1 = h2;
        k0 = k1;
        k1 = k2;
        if k1 > max_den {
            return None;
        }
    }
    if (x - h1 as f64 / k1 as f64).abs() < tol && k1 <= max_den {
        let g = gcd(h1, k1);
        Some((h1 / g, k1 / g))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn complex_eigen_recovers_spectrum() {
        use nalgebra::DMatrix;
        use num_complex::Complex64;
        // A fixed complex matrix with known-simple spectrum.
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[
                Complex64::new(1.0, 0.5),
                Complex64::new(0.2, -0.1),
                Complex64::new(0.0, 0.3),
                Complex64::new(-0.4, 0.0),
                Complex64::new(2.0, -1.0),
                Complex64::new(0.7, 0.2),
                Complex64::new(0.1, 0.1),
                Complex64::new(0.0, -0.6),
                Complex64::new(-1.5, 0.8),
            ],
        );
        let eig = super::complex_eigen(&m).unwrap();
        assert_eq!(eig.len(), 3);
        let mut tr = Complex64::default();
        for (lam, v) in &eig {
            let resid = (&m * v - v * *lam).norm();
            assert!(resid < 1e-10, "eigen residual {resid:.3e}");
            assert!((v.norm() - 1.0).abs() < 1e-12);
            tr += lam;
        }
        // Eigenvalue sum equals the trace.
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        assert!((tr - trace).norm() < 1e-10);
    }

    use super::*;
    use crate::model::euler_model;

    fn euler() -> HyperbolicModel {
        euler_model(1.0, 1.0, 3f64.sqrt(), 1.0).unwrap()
    }

    const S3: f64 = 1.732_050_807_568_877_2;

    #[test]
    fn euler_dispersion_roots() {
        let roots = dispersion_roots(&euler()).unwrap();
        assert_eq!(roots.len(), 3);
        for (r, want) in roots.iter().zip([-S3, 0.0, S3]) {
            assert!((r - want).abs() < 1e-10, "root {r} vs {want}");
        }
        // Determinant oracle: det[tau I + eta B1 + omega B2] ~ 0 at each root.
        let m = euler();
        for &omega in &roots {
            let mat = m.tangential_symbol() + m.bd() * omega;
            assert!(mat.determinant().abs() < 1e-10);
        }
    }

    #[test]
    fn roots_scale_with_beta() {
        let mut m = euler();
        let base = dispersion_roots(&m).unwrap();
        m.beta = vec![2.0 * m.beta[0], 2.0 * m.beta[1]];
        let scaled = dispersion_roots(&m).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn euler_group_velocities_and_classification() {
        let v1 = group_velocity(&euler(), S3).unwrap();
        assert!((v1[0] + S3 / 2.0).abs() < 1e-8);
        assert!((v1[1] + 0.5).abs() < 1e-8);
        assert_eq!(classify(&v1).unwrap(), Direction::Outgoing);

        let v2 = group_velocity(&euler(), 0.0).unwrap();
        assert!((v2[0] + S3).abs() < 1e-8);
        assert!((v2[1] - 1.0).abs() < 1e-8);
        assert_eq!(classify(&v2).unwrap(), Direction::Incoming);

        let v3 = group_velocity(&euler(), -S3).unwrap();
        assert!(v3[0].abs() < 1e-8);
        assert!((v3[1] - 1.0).abs() < 1e-8);
        assert_eq!(classify(&v3).unwrap(), Direction::Incoming);

        assert!(classify(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn euler_mode_package_matches_printed_vectors() {
        let ms = mode_package(&euler()).unwrap();
        assert_eq!(ms.modes.len(), 3);
        // Ordering: descending omega.
        assert!((ms.modes[0].omega - S3).abs() < 1e-10);
        assert!(ms.modes[1].omega.abs() < 1e-10);
        assert!((ms.modes[2].omega + S3).abs() < 1e-10);

        // Printed eigenvectors up to scale, with the bi-orthogonality Gram.
        let printed_r = [
            DVector::from_vec(vec![2.0, S3, 3.0]),
            DVector::from_vec(vec![1.0, S3, 0.0]),
            DVector::from_vec(vec![0.0, S3, 1.0]),
        ];
        for (m, want) in ms.modes.iter().zip(&printed_r) {
            let r = &m.right_basis[0];
            let cosangle = r.dot(want) / (r.norm() * want.norm());
            assert!(
                (cosangle.abs() - 1.0).abs() < 1e-10,
                "right vector not collinear with printed value"
            );
        }
        for (i, mi) in ms.modes.iter().enumerate() {
            for (j, mj) in ms.modes.iter().enumerate() {
                let g = mi.left_basis[0].dot(&mj.right_basis[0]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-12, "gram[{i}{j}] = {g}");
            }
        }

        // e and b as printed.
        let e_want = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        assert!((ms.e.clone() - e_want).norm() < 1e-10);
        let b_want = DVector::from_vec(vec![1.0, -S3]);
        assert!((ms.b.clone() - b_want).norm() < 1e-10);

        // b annihilates B on the stable subspace; B r2 = B r3 = (sqrt3, 1).
        for r in &ms.stable_basis {
            let br = &ms.boundary_matrix * r;
            assert!(ms.b.dot(&br).abs() < 1e-10);
        }

        // Lopatinskii field: rescaled time coefficient has printed magnitude 4
        // and the tangential/time ratio is -c.
        assert!((ms.x_lop[0].abs() - 4.0).abs() < 1e-9, "x_lop = {:?}", ms.x_lop);
        assert!((ms.x_lop[1] / ms.x_lop[0] + S3).abs() < 1e-9);
        // Raw field is proportional with the same direction.
        assert!((ms.x_lop_raw[1] / ms.x_lop_raw[0] + S3).abs() < 1e-9);
    }

    #[test]
    fn projector_identities() {
        let ms = mode_package(&euler()).unwrap();
        let n = ms.n();
        let mut psum = DMatrix::zeros(n, n);
        for m in &ms.modes {
            psum += &m.projector;
            // Idempotent.
            assert!((&m.projector * &m.projector - &m.projector).norm() < 1e-10);
            // R_m P_m = 0.
            assert!((&m.partial_inverse * &m.projector).norm() < 1e-10);
        }
        assert!((psum - DMatrix::identity(n, n)).norm() < 1e-10);
        for m in 0..3 {
            let l = ms.l_dphi(m);
            let want = DMatrix::identity(n, n) - &ms.modes[m].projector;
            assert!((&l * &ms.modes[m].partial_inverse - &want).norm() < 1e-10);
            assert!((&ms.modes[m].partial_inverse * &l - &want).norm() < 1e-10);
        }
    }

    #[test]
    fn homogeneity_in_beta() {
        let m1 = euler();
        let mut m2 = euler();
        m2.beta = vec![3.0 * m1.beta[0], 3.0 * m1.beta[1]];
        let ms1 = mode_package(&m1).unwrap();
        let ms2 = mode_package(&m2).unwrap();
        for (a, b) in ms1.modes.iter().zip(&ms2.modes) {
            assert!((3.0 * a.omega - b.omega).abs() < 1e-8);
            assert_eq!(a.direction, b.direction);
            assert!((&a.projector - &b.projector).norm() < 1e-8);
            assert!((&a.partial_inverse * (1.0 / 3.0) - &b.partial_inverse).norm() < 1e-8);
        }
    }

    #[test]
    fn euler_resonances() {
        let ms = mode_package(&euler()).unwrap();
        let triples = find_resonances(&ms, 50, 1e-10);
        assert_eq!(triples.len(), 1, "triples: {triples:?}");
        let t = &triples[0];
        assert_eq!((t.n_m, t.n_p, t.n_r), (1, 2, -1));
        assert_eq!(ms.modes[t.m_out].direction, Direction::Outgoing);
        // phi_1 = 2 phi_2 - phi_3: p carries omega = 0, r carries omega = -sqrt3.
        assert!(ms.modes[t.p_in].omega.abs() < 1e-10);
        assert!((ms.modes[t.r_in].omega + S3).abs() < 1e-10);

        assert_eq!(euler_resonance_pq(1.0 / 3f64.sqrt(), 1 << 20, 1e-12), Some((1, 1)));

        // M^2 = 0.3025: no resonance within |n| <= 50.
        let m2 = 0.3025f64;
        let m = euler_model(1.0, m2.sqrt(), 1.0, 1.0).unwrap();
        let ms = mode_package(&m).unwrap();
        assert!(find_resonances(&ms, 50, 1e-12).is_empty());

        assert!(find_resonances(&mode_package(&euler()).unwrap(), 0, 1e-12).is_empty());
    }
}
