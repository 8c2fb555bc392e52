//! Multi-phase Fourier calculus on finite trigonometric series: mode
//! classification, the projector E onto characteristic single-phase content,
//! the partial inverse R of the fast operator cL(d_theta) = sum_j L(d phi_j)
//! d_{theta_j}, resonance preparation, interaction integrals, and the
//! mean-zero primitive.
//!
//! Series are truncated to index sets alpha in Z^M with at most two nonzero
//! components and |alpha_i| <= k_max; the truncation keeps the small-divisor
//! set finite, and a determinant floor turns near-resonances into explicit
//! errors instead of noise amplification.

use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::spectral::{ModeSet, ResonanceTriple};
use crate::Error;

/// Default truncation bound on each component of alpha.
pub const DEFAULT_K_MAX: i32 = 32;
/// Default small-divisor floor for noncharacteristic inversions.
pub const DET_FLOOR: f64 = 1e-10;

/// Finite trigonometric series `sum_alpha V_alpha e^{i alpha . theta}` with
/// vector coefficients in C^N, supported on indices with at most two nonzero
/// components.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigSeries {
    pub phase_count: usize,
    pub dim: usize,
    pub k_max: i32,
    pub coeffs: BTreeMap<Vec<i32>, DVector<Complex64>>,
}

impl TrigSeries {
    pub fn zero(phase_count: usize, dim: usize) -> Self {
        TrigSeries {
            phase_count,
            dim,
            k_max: DEFAULT_K_MAX,
            coeffs: BTreeMap::new(),
        }
    }

    /// Insert (accumulate) a coefficient; rejects indices outside the
    /// truncated two-phase index set.
    pub fn insert(&mut self, alpha: &[i32], coeff: DVector<Complex64>) -> crate::Result<()> {
        if alpha.len() != self.phase_count {
            return Err(Error::Profiles(format!(
                "index length {} != phase count {}",
                alpha.len(),
                self.phase_count
            )));
        }
        if coeff.len() != self.dim {
            return Err(Error::Profiles(format!(
                "coefficient dimension {} != {}",
                coeff.len(),
                self.dim
            )));
        }
        let nnz = alpha.iter().filter(|&&a| a != 0).count();
        if nnz > 2 {
            return Err(Error::Profiles(format!(
                "index {alpha:?} has {nnz} nonzero components (at most 2 allowed)"
            )));
        }
        if alpha.iter().any(|a| a.abs() > self.k_max) {
            return Err(Error::Profiles(format!(
                "index {alpha:?} exceeds truncation bound {}",
                self.k_max
            )));
        }
        if coeff.iter().all(|c| c.norm() == 0.0) {
            return Ok(());
        }
        self.coeffs
            .entry(alpha.to_vec())
            .and_modify(|v| *v += &coeff)
            .or_insert(coeff);
        Ok(())
    }

    pub fn get(&self, alpha: &[i32]) -> Option<&DVector<Complex64>> {
        self.coeffs.get(alpha)
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.coeffs.values().all(|v| v.norm() <= tol)
    }

    /// Maximum coefficient-wise difference against another series.
    pub fn max_diff(&self, other: &TrigSeries) -> f64 {
        let zero = DVector::zeros(self.dim);
        let mut d: f64 = 0.0;
        for (a, v) in &self.coeffs {
            let w = other.coeffs.get(a).unwrap_or(&zero);
            d = d.max((v - w).norm());
        }
        for (a, w) in &other.coeffs {
            if !self.coeffs.contains_key(a) {
                d = d.max(w.norm());
            }
        }
        d
    }

    /// Hermitian reality symmetry defect: max |V_{-alpha} - conj(V_alpha)|.
    pub fn reality_defect(&self) -> f64 {
        let zero = DVector::zeros(self.dim);
        let mut d: f64 = 0.0;
        for (a, v) in &self.coeffs {
            let neg: Vec<i32> = a.iter().map(|x| -x).collect();
            let w = self.coeffs.get(&neg).unwrap_or(&zero);
            for i in 0..self.dim {
                d = d.max((w[i] - v[i].conj()).norm());
            }
        }
        d
    }

    /// Pointwise evaluation at theta in R^M.
    pub fn eval(&self, theta: &[f64]) -> DVector<Complex64> {
        let mut out = DVector::zeros(self.dim);
        for (a, v) in &self.coeffs {
            let phase: f64 = a.iter().zip(theta).map(|(&ai, &ti)| ai as f64 * ti).sum();
            out += v * Complex64::from_polar(1.0, phase);
        }
        out
    }

    /// Indices with at most one nonzero component (single-phase support)?
    pub fn is_single_phase(&self) -> bool {
        self.coeffs
            .keys()
            .all(|a| a.iter().filter(|&&x| x != 0).count() <= 1)
    }
}

/// Classification of a Fourier index against the characteristic variety.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeLabel {
    Zero,
    /// alpha . phi = n phi_m.
    Characteristic { m: usize, n: i64 },
    NonCharacteristic,
}

/// Classify alpha by the smallest singular value of the coefficient matrix
/// L(d(alpha.phi)) = (alpha.omega) I + n_alpha C, cross-checked by matching
/// alpha.omega against n_alpha omega_m.
pub fn classify_mode(ms: &ModeSet, alpha: &[i32]) -> crate::Result<ModeLabel> {
    if alpha.len() != ms.phase_count() {
        return Err(Error::Profiles(format!(
            "index length {} != phase count {}",
            alpha.len(),
            ms.phase_count()
        )));
    }
    if alpha.iter().all(|&a| a == 0) {
        return Ok(ModeLabel::Zero);
    }
    let n_alpha: i64 = alpha.iter().map(|&a| a as i64).sum();
    let alpha_omega: f64 = alpha
        .iter()
        .zip(&ms.modes)
        .map(|(&a, m)| a as f64 * m.omega)
        .sum();
    let tol = 1e-8 * ms.min_omega_gap();
    if n_alpha == 0 {
        if alpha_omega.abs() < tol {
            return Err(Error::Profiles(format!(
                "index {alpha:?} has identically zero phase (n_alpha = 0 and alpha.omega = 0)"
            )));
        }
        return Ok(ModeLabel::NonCharacteristic);
    }
    let mut hits: Vec<usize> = Vec::new();
    for (m, mode) in ms.modes.iter().enumerate() {
        if (alpha_omega - n_alpha as f64 * mode.omega).abs() < tol * n_alpha.abs() as f64 {
            hits.push(m);
        }
    }
    // Singular-value cross-check of the label.
    let mat = ms.l_alpha(n_alpha, alpha_omega);
    let sv = crate::spectral::svd_checked(mat, false)?.singular_values;
    let sigma_min = sv[sv.len() - 1];
    let scale = sv[0].max(1.0);
    match hits.len() {
        0 => {
            if sigma_min < 1e-10 * scale {
                return Err(Error::Profiles(format!(
                    "index {alpha:?}: singular coefficient matrix but no matching phase"
                )));
            }
            Ok(ModeLabel::NonCharacteristic)
        }
        1 => {
            if sigma_min > 1e-8 * scale {
                return Err(Error::Profiles(format!(
                    "index {alpha:?}: phase match but nonsingular coefficient matrix (sigma = {sigma_min:.3e})"
                )));
            }
            Ok(ModeLabel::Characteristic {
                m: hits[0],
                n: n_alpha,
            })
        }
        _ => Err(Error::Profiles(format!(
            "index {alpha:?} matches phases {hits:?} within tolerance; refusing to choose"
        ))),
    }
}

fn single_phase_index(phase_count: usize, m: usize, n: i64) -> Vec<i32> {
    let mut a = vec![0; phase_count];
    a[m] = n as i32;
    a
}

/// The projector E: keeps the mean, re-indexes each characteristic
/// coefficient as P_m V_alpha on the pure phase n_alpha theta_m, and drops
/// all noncharacteristic content.  Output is single-phase supported.
pub fn project_e(ms: &ModeSet, series: &TrigSeries) -> crate::Result<TrigSeries> {
    let mut out = TrigSeries::zero(series.phase_count, series.dim);
    out.k_max = series.k_max;
    for (alpha, v) in &series.coeffs {
        match classify_mode(ms, alpha)? {
            ModeLabel::Zero => out.insert(alpha, v.clone())?,
            ModeLabel::Characteristic { m, n } => {
                let pv = complex_mat_apply(&ms.modes[m].projector, v);
                out.insert(&single_phase_index(series.phase_count, m, n), pv)?;
            }
            ModeLabel::NonCharacteristic => {}
        }
    }
    Ok(out)
}

fn complex_mat_apply(m: &nalgebra::DMatrix<f64>, v: &DVector<Complex64>) -> DVector<Complex64> {
    let n = m.nrows();
    DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..m.ncols() {
                s += v[j] * m[(i, j)];
            }
            s
        }),
    )
}

/// Result of a partial inversion, with the small-divisor monitor.
#[derive(Debug, Clone)]
pub struct PartialInverse {
    pub series: TrigSeries,
    /// Minimum |det L(d(alpha.phi))| over the noncharacteristic indices hit.
    pub min_det: f64,
}

/// The partial inverse R: zero on the mean, (i n_alpha)^{-1} R_m V_alpha on
/// characteristic indices, and L(i alpha.d phi)^{-1} V_alpha on
/// noncharacteristic indices.  Determinants below `floor` abort with a
/// small-divisor error naming the offending index.
pub fn partial_inverse_r(
    ms: &ModeSet,
    series: &TrigSeries,
    floor: f64,
) -> crate::Result<PartialInverse> {
    let mut out = TrigSeries::zero(series.phase_count, series.dim);
    out.k_max = series.k_max;
    let mut min_det = f64::INFINITY;
    for (alpha, v) in &series.coeffs {
        match classify_mode(ms, alpha)? {
            ModeLabel::Zero => {}
            ModeLabel::Characteristic { m, n } => {
                let rv = complex_mat_apply(&ms.modes[m].partial_inverse, v);
                let c = Complex64::new(0.0, n as f64).inv();
                out.insert(alpha, rv * c)?;
            }
            ModeLabel::NonCharacteristic => {
                let n_alpha: i64 = alpha.iter().map(|&a| a as i64).sum();
                let alpha_omega: f64 = alpha
                    .iter()
                    .zip(&ms.modes)
                    .map(|(&a, m)| a as f64 * m.omega)
                    .sum();
                let mat = ms.l_alpha(n_alpha, alpha_omega);
                let det = mat.determinant().abs();
                min_det = min_det.min(det);
                if det < floor {
                    return Err(Error::SmallDivisor {
                        alpha: alpha.clone(),
                        det,
                        floor,
                    });
                }
                let inv = mat.try_inverse().ok_or_else(|| {
                    Error::Profiles(format!("inversion failed at index {alpha:?}"))
                })?;
                // (i A)^{-1} = -i A^{-1}.
                let w = complex_mat_apply(&inv, v) * Complex64::new(0.0, -1.0);
                out.insert(alpha, w)?;
            }
        }
    }
    Ok(PartialInverse {
        series: out,
        min_det: if min_det.is_finite() { min_det } else { f64::NAN },
    })
}

/// The fast operator cL(d_theta): coefficient-wise multiplication by
/// i [ (alpha.omega) I + n_alpha C ] = i sum_j alpha_j L(d phi_j).
pub fn apply_cl(ms: &ModeSet, series: &TrigSeries) -> crate::Result<TrigSeries> {
    let mut out = TrigSeries::zero(series.phase_count, series.dim);
    out.k_max = series.k_max;
    for (alpha, v) in &series.coeffs {
        let n_alpha: i64 = alpha.iter().map(|&a| a as i64).sum();
        let alpha_omega: f64 = alpha
            .iter()
            .zip(&ms.modes)
            .map(|(&a, m)| a as f64 * m.omega)
            .sum();
        let mat = ms.l_alpha(n_alpha, alpha_omega);
        let w = complex_mat_apply(&mat, v) * Complex64::new(0.0, 1.0);
        out.insert(alpha, w)?;
    }
    Ok(out)
}

/// Scalar 2-pi-periodic trigonometric polynomial in one angle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalarTrig {
    pub coeffs: BTreeMap<i64, Complex64>,
}

impl ScalarTrig {
    pub fn zero() -> Self {
        ScalarTrig::default()
    }

    pub fn from_coeffs(pairs: &[(i64, Complex64)]) -> Self {
        let mut s = ScalarTrig::zero();
        for &(k, c) in pairs {
            s.set(k, c);
        }
        s
    }

    pub fn set(&mut self, k: i64, c: Complex64) {
        if c.norm() == 0.0 {
            self.coeffs.remove(&k);
        } else {
            self.coeffs.insert(k, c);
        }
    }

    pub fn get(&self, k: i64) -> Complex64 {
        self.coeffs.get(&k).copied().unwrap_or_default()
    }

    pub fn eval(&self, theta: f64) -> Complex64 {
        self.coeffs
            .iter()
            .map(|(&k, &c)| c * Complex64::from_polar(1.0, k as f64 * theta))
            .sum()
    }

    /// L^2(theta/2pi) norm via Parseval.
    pub fn l2_norm(&self) -> f64 {
        self.coeffs
            .values()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn derivative(&self) -> ScalarTrig {
        let mut out = ScalarTrig::zero();
        for (&k, &c) in &self.coeffs {
            out.set(k, c * Complex64::new(0.0, k as f64));
        }
        out
    }

    pub fn max_diff(&self, other: &ScalarTrig) -> f64 {
        let keys: std::collections::BTreeSet<i64> = self
            .coeffs
            .keys()
            .chain(other.coeffs.keys())
            .copied()
            .collect();
        keys.iter()
            .map(|&k| (self.get(k) - other.get(k)).norm())
            .fold(0.0, f64::max)
    }
}

/// Resonance preparation: keep exactly the Fourier indices divisible by n.
pub fn prepare(a: &ScalarTrig, n: i64) -> crate::Result<ScalarTrig> {
    if n == 0 {
        return Err(Error::Profiles("prepare requires n != 0".into()));
    }
    let mut out = ScalarTrig::zero();
    for (&k, &c) in &a.coeffs {
        if k % n == 0 {
            out.set(k, c);
        }
    }
    Ok(out)
}

/// Normalized interaction integral of two single-phase scalar profiles along
/// a resonance n_m phi_m = n_p phi_p + n_r phi_r:
///
///   I(theta_m) = (2 pi)^{-1} Int sigma_p( (n_m theta_m - n_r theta_r)/n_p )
///                                sigma_r( theta_r ) d theta_r,
///
/// computed exactly in Fourier space: the theta_m-coefficient at k n_m is
/// (sigma_p)_{k n_p} (sigma_r)_{k n_r}.  (Reduced triples have
/// gcd(n_p, n_r) = 1, so this matches the quadrature of the literal integral.)
pub fn interaction_integral(
    sp: &ScalarTrig,
    sr: &ScalarTrig,
    triple: &ResonanceTriple,
) -> ScalarTrig {
    let mut out = ScalarTrig::zero();
    for (&j, &cp) in &sp.coeffs {
        if j % triple.n_p != 0 {
            continue;
        }
        let k = j / triple.n_p;
        let cr = sr.get(k * triple.n_r);
        if cr.norm() > 0.0 {
            out.set(k * triple.n_m, cp * cr);
        }
    }
    out
}

/// The unique mean-zero primitive in theta: coefficient k -> a_k / (i k).
pub fn primitive_mean_zero(a: &ScalarTrig) -> crate::Result<ScalarTrig> {
    if a.get(0).norm() > 1e-14 * (1.0 + a.l2_norm()) {
        return Err(Error::Profiles(format!(
            "primitive requires zero mean, got a_0 = {}",
            a.get(0)
        )));
    }
    let mut out = ScalarTrig::zero();
    for (&k, &c) in &a.coeffs {
        if k != 0 {
            out.set(k, c / Complex64::new(0.0, k as f64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::euler_model;
    use crate::spectral::{find_resonances, mode_package};
    use proptest::prelude::*;

    fn euler_modes() -> ModeSet {
        mode_package(&euler_model(1.0, 1.0, 3f64.sqrt(), 1.0).unwrap()).unwrap()
    }

    fn cv(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn classify_euler_indices() {
        let ms = euler_modes();
        assert_eq!(classify_mode(&ms, &[0, 0, 0]).unwrap(), ModeLabel::Zero);
        assert_eq!(
            classify_mode(&ms, &[0, 1, 0]).unwrap(),
            ModeLabel::Characteristic { m: 1, n: 1 }
        );
        // 2 phi_2 - phi_3 = phi_1.
        assert_eq!(
            classify_mode(&ms, &[0, 2, -1]).unwrap(),
            ModeLabel::Characteristic { m: 0, n: 1 }
        );
        assert_eq!(
            classify_mode(&ms, &[0, 1, 1]).unwrap(),
            ModeLabel::NonCharacteristic
        );
    }

    #[test]
    fn project_e_reindexes_resonant_content() {
        let ms = euler_modes();
        let r1 = &ms.modes[0].right_basis[0];
        let mut s = TrigSeries::zero(3, 3);
        let v = DVector::from_iterator(3, r1.iter().map(|&x| cv(x, 0.0)));
        s.insert(&[0, 2, -1], v.clone()).unwrap();
        let es = project_e(&ms, &s).unwrap();
        // P_1 r_1 = r_1, placed on the pure theta_1 index (1,0,0).
        let got = es.get(&[1, 0, 0]).expect("re-indexed coefficient");
        assert!((got - v).norm() < 1e-12);
        assert!(es.get(&[0, 2, -1]).is_none());
        assert!(es.is_single_phase());
    }

    #[test]
    fn noncharacteristic_only_series_projects_to_zero() {
        let ms = euler_modes();
        let mut s = TrigSeries::zero(3, 3);
        s.insert(&[0, 1, 1], DVector::from_element(3, cv(1.0, -2.0)))
            .unwrap();
        s.insert(&[1, 0, 2], DVector::from_element(3, cv(0.5, 0.0)))
            .unwrap();
        assert_eq!(classify_mode(&ms, &[1, 0, 2]).unwrap(), ModeLabel::NonCharacteristic);
        let es = project_e(&ms, &s).unwrap();
        assert!(es.is_zero(0.0));
    }

    #[test]
    fn partial_inverse_identities_single_phase() {
        let ms = euler_modes();
        // Characteristic index: L(d phi_2) (R_2 r_3) = (I - P_2) r_3 = r_3.
        let r3 = &ms.modes[2].right_basis[0];
        let mut s = TrigSeries::zero(3, 3);
        s.insert(
            &[0, 1, 0],
            DVector::from_iterator(3, r3.iter().map(|&x| cv(x, 0.0))),
        )
        .unwrap();
        let rs = partial_inverse_r(&ms, &s, DET_FLOOR).unwrap();
        let back = apply_cl(&ms, &rs.series).unwrap();
        // cL(R F) = (I - E) F; here E F = P_2 r_3 e^{i theta_2} = 0.
        let p2r3 = &ms.modes[1].projector * r3;
        assert!(p2r3.norm() < 1e-12);
        assert!(back.max_diff(&s) < 1e-11);

        // Mean-only series: R = 0.
        let mut mean = TrigSeries::zero(3, 3);
        mean.insert(&[0, 0, 0], DVector::from_element(3, cv(2.0, 0.0)))
            .unwrap();
        assert!(partial_inverse_r(&ms, &mean, DET_FLOOR).unwrap().series.is_zero(0.0));
    }

    #[test]
    fn small_divisor_floor_triggers() {
        let ms = euler_modes();
        let mut s = TrigSeries::zero(3, 3);
        s.insert(&[0, 1, 1], DVector::from_element(3, cv(1.0, 0.0)))
            .unwrap();
        // A generous floor forces the error path.
        let err = partial_inverse_r(&ms, &s, 1e12).unwrap_err();
        match err {
            Error::SmallDivisor { alpha, .. } => assert_eq!(alpha, vec![0, 1, 1]),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn interaction_integral_euler_example() {
        let ms = euler_modes();
        let triples = find_resonances(&ms, 8, 1e-10);
        let t = &triples[0];
        assert_eq!((t.n_m, t.n_p, t.n_r), (1, 2, -1));
        // sigma_p = e^{2 i theta} + c.c., sigma_r = e^{-i theta} + c.c.
        let sp = ScalarTrig::from_coeffs(&[(2, cv(1.0, 0.0)), (-2, cv(1.0, 0.0))]);
        let sr = ScalarTrig::from_coeffs(&[(-1, cv(1.0, 0.0)), (1, cv(1.0, 0.0))]);
        let out = interaction_integral(&sp, &sr, t);
        assert!((out.get(1) - cv(1.0, 0.0)).norm() < 1e-15);
        assert!((out.get(-1) - cv(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(out.coeffs.len(), 2);

        assert!(interaction_integral(&ScalarTrig::zero(), &sr, t).coeffs.is_empty());
    }

    /// Trapezoid quadrature of the literal double integral — the defining
    /// oracle for the Fourier-space interaction formula.
    fn quadrature_oracle(sp: &ScalarTrig, sr: &ScalarTrig, t: &ResonanceTriple, theta_m: f64) -> Complex64 {
        let nq = 256;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..nq {
            let th_r = 2.0 * std::f64::consts::PI * i as f64 / nq as f64;
            let arg = (t.n_m as f64 * theta_m - t.n_r as f64 * th_r) / t.n_p as f64;
            acc += sp.eval(arg) * sr.eval(th_r);
        }
        acc / nq as f64
    }

    #[test]
    fn interaction_integral_matches_quadrature() {
        let ms = euler_modes();
        let t = &find_resonances(&ms, 8, 1e-10)[0];
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..5 {
            let mut sp = ScalarTrig::zero();
            let mut sr = ScalarTrig::zero();
            for k in 1..=6i64 {
                let c = cv(next(), next());
                sp.set(k, c);
                sp.set(-k, c.conj());
                let d = cv(next(), next());
                sr.set(k, d);
                sr.set(-k, d.conj());
            }
            // Preparation restricts sigma_p to multiples of n_p, as in the
            // resonant pipeline; the quadrature only agrees on prepared input.
            let sp = prepare(&sp, t.n_p).unwrap();
            let out = interaction_integral(&sp, &sr, t);
            for j in 0..7 {
                let th = 2.0 * std::f64::consts::PI * j as f64 / 7.0 + 0.1;
                let want = quadrature_oracle(&sp, &sr, t, th);
                assert!(
                    (out.eval(th) - want).norm() < 1e-12,
                    "mismatch at theta = {th}"
                );
            }
        }
    }

    #[test]
    fn prepare_keeps_divisible_modes() {
        let a = ScalarTrig::from_coeffs(&[
            (1, cv(1.0, 0.0)),
            (2, cv(2.0, 0.0)),
            (3, cv(3.0, 0.0)),
            (4, cv(4.0, 0.0)),
        ]);
        let p = prepare(&a, 2).unwrap();
        assert_eq!(p.coeffs.keys().copied().collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(prepare(&a, 1).unwrap(), a);
        assert!(prepare(&a, 0).is_err());
        assert!(p.l2_norm() <= a.l2_norm());
        // Idempotent.
        assert_eq!(prepare(&p, 2).unwrap(), p);
    }

    #[test]
    fn primitive_inverts_derivative() {
        let a = ScalarTrig::from_coeffs(&[(1, cv(0.0, -0.5)), (-1, cv(0.0, 0.5))]); // sin
        let prim = primitive_mean_zero(&a).unwrap();
        // sin theta -> -cos theta.
        assert!((prim.get(1) - cv(-0.5, 0.0)).norm() < 1e-15);
        assert!((prim.get(-1) - cv(-0.5, 0.0)).norm() < 1e-15);
        assert!(prim.derivative().max_diff(&a) < 1e-15);

        let bad = ScalarTrig::from_coeffs(&[(0, cv(1.0, 0.0))]);
        assert!(primitive_mean_zero(&bad).is_err());
    }

    // --- property tests -------------------------------------------------

    fn arb_coeff() -> impl Strategy<Value = Complex64> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| Complex64::new(a, b))
    }

    fn arb_series() -> impl Strategy<Value = TrigSeries> {
        let idx = prop::collection::vec((-3i32..=3, -3i32..=3, 0usize..3usize), 1..8);
        let vals = prop::collection::vec(prop::collection::vec(arb_coeff(), 3), 8);
        (idx, vals).prop_map(|(idx, vals)| {
            let mut s = TrigSeries::zero(3, 3);
            for (slot, (a, b, pos)) in idx.into_iter().enumerate() {
                let mut alpha = [0i32; 3];
                alpha[pos] = a;
                alpha[(pos + 1) % 3] = b;
                let v = DVector::from_vec(vals[slot % vals.len()].clone());
                // Skip degenerate zero-phase indices (n=0, omega-sum 0).
                let _ = s.insert(&alpha, v);
            }
            // Drop indices that classify as errors (identically zero phase).
            let ms = euler_modes();
            s.coeffs
                .retain(|alpha, _| classify_mode(&ms, alpha).is_ok());
            s
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn e_is_a_projector(s in arb_series()) {
            let ms = euler_modes();
            let e1 = project_e(&ms, &s).unwrap();
            let e2 = project_e(&ms, &e1).unwrap();
            prop_assert!(e1.max_diff(&e2) < 1e-12);
        }

        #[test]
        fn e_annihilates_cl_on_single_phase(s in arb_series()) {
            let ms = euler_modes();
            // Restrict to single-phase support.
            let mut sp = s.clone();
            sp.coeffs.retain(|a, _| a.iter().filter(|&&x| x != 0).count() <= 1);
            let ecl = project_e(&ms, &apply_cl(&ms, &sp).unwrap()).unwrap();
            prop_assert!(ecl.is_zero(1e-11), "E(cL V) defect");
            let cle = apply_cl(&ms, &project_e(&ms, &sp).unwrap()).unwrap();
            prop_assert!(cle.is_zero(1e-10), "cL(E V) defect");
        }

        #[test]
        fn cl_r_is_one_minus_e_on_single_phase(s in arb_series()) {
            let ms = euler_modes();
            let mut f = s.clone();
            f.coeffs.retain(|a, _| a.iter().filter(|&&x| x != 0).count() <= 1);
            let rf = partial_inverse_r(&ms, &f, DET_FLOOR).unwrap().series;
            let clrf = apply_cl(&ms, &rf).unwrap();
            let ef = project_e(&ms, &f).unwrap();
            // clrf + ef should reproduce f.
            let mut sum = clrf.clone();
            for (a, v) in &ef.coeffs {
                sum.insert(a, v.clone()).unwrap();
            }
            prop_assert!(sum.max_diff(&f) < 1e-11, "cL(RF) + EF != F");
            // And the reversed composition R(cL F) = (I-E) F.
            let rclf = partial_inverse_r(&ms, &apply_cl(&ms, &f).unwrap(), DET_FLOOR)
                .unwrap()
                .series;
            let mut sum2 = rclf;
            for (a, v) in &ef.coeffs {
                sum2.insert(a, v.clone()).unwrap();
            }
            prop_assert!(sum2.max_diff(&f) < 1e-11, "R(cL F) + EF != F");
        }

        #[test]
        fn prepare_is_orthogonal_projection(ks in prop::collection::btree_map(-8i64..8, arb_coeff(), 1..10), n in 1i64..4) {
            let mut a = ScalarTrig::zero();
            for (k, c) in ks { a.set(k, c); }
            let p = prepare(&a, n).unwrap();
            prop_assert!(p.l2_norm() <= a.l2_norm() + 1e-14);
            prop_assert_eq!(prepare(&p, n).unwrap(), p);
        }
    }
}
