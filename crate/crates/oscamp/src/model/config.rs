//! Plain-text configuration files.
//!
//! Sectioned key/value format:
//!
//! ```text
//! [system]
//! family = euler
//! v = 1.0
//! u = 1.0
//! c = 1.7320508075688772
//! eta = 1.0
//! # optional nonlinearities (row-major, symmetric per component):
//! D.1 = 0,0,0, 0,0,0, 0,0,0
//! Psi.1 = ...
//! D0 = ...
//!
//! [boundary]
//! # optional boundary-matrix override (row-major p x N):
//! B = 0,1,0, 1,0,1
//!
//! [source]
//! # mode k of G (C^p): semicolon-separated component expressions over t, x1
//! G.1.re = 0; 1
//! G.1.im = 0; 0
//! ramp = on
//!
//! [run]
//! eps = 0.25
//! n_x1 = 64
//! ...
//! ```
//!
//! Matrices are row-major comma-separated lists; source modes are expression
//! strings in the grammar of [`super::expr`].  Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use super::expr::Expr;
use super::{BoundarySource, EulerParams, HyperbolicModel, QuadTensor, RunConfig, SourceMode};
use crate::Error;

/// A parsed section: key -> (line number, raw value).
type Section = BTreeMap<String, (usize, String)>;

fn parse_sections(path: &str, text: &str) -> crate::Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(name) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            sections.entry(name.trim().to_string()).or_default();
            continue;
        }
        let Some((key, value)) = s.split_once('=') else {
            return Err(Error::Config {
                path: path.into(),
                line,
                msg: format!("expected `key = value`, got {s:?}"),
            });
        };
        let Some(sec) = current.clone() else {
            return Err(Error::Config {
                path: path.into(),
                line,
                msg: "key outside of any [section]".into(),
            });
        };
        let key = key.trim().to_string();
        let map = sections.get_mut(&sec).unwrap();
        if map.contains_key(&key) {
            return Err(Error::Config {
                path: path.into(),
                line,
                msg: format!("duplicate key {key:?} in [{sec}]"),
            });
        }
        map.insert(key, (line, value.trim().to_string()));
    }
    Ok(sections)
}

struct Ctx<'a> {
    path: &'a str,
}

impl<'a> Ctx<'a> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Config {
            path: self.path.into(),
            line,
            msg: msg.into(),
        }
    }

    fn take_f64(&self, sec: &mut Section, key: &str) -> crate::Result<Option<f64>> {
        match sec.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| self.err(line, format!("{key}: expected a number, got {v:?}"))),
        }
    }

    fn need_f64(&self, sec: &mut Section, key: &str, sec_name: &str) -> crate::Result<f64> {
        self.take_f64(sec, key)?
            .ok_or_else(|| self.err(0, format!("missing key `{key}` in [{sec_name}]")))
    }

    fn take_usize(&self, sec: &mut Section, key: &str) -> crate::Result<Option<usize>> {
        match sec.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| self.err(line, format!("{key}: expected an integer, got {v:?}"))),
        }
    }

    fn take_numbers(&self, sec: &mut Section, key: &str) -> crate::Result<Option<Vec<f64>>> {
        match sec.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map(Some)
                .map_err(|_| self.err(line, format!("{key}: expected comma-separated numbers"))),
        }
    }

    fn take_matrix(
        &self,
        sec: &mut Section,
        key: &str,
        rows: usize,
        cols: usize,
    ) -> crate::Result<Option<DMatrix<f64>>> {
        match self.take_numbers(sec, key)? {
            None => Ok(None),
            Some(vals) => {
                if vals.len() != rows * cols {
                    return Err(self.err(
                        0,
                        format!("{key}: expected {rows}x{cols} = {} entries, got {}", rows * cols, vals.len()),
                    ));
                }
                Ok(Some(DMatrix::from_row_slice(rows, cols, &vals)))
            }
        }
    }

    fn reject_unknown(&self, sec: &Section, sec_name: &str) -> crate::Result<()> {
        if let Some((key, (line, _))) = sec.iter().next() {
            return Err(self.err(*line, format!("unknown key {key:?} in [{sec_name}]")));
        }
        Ok(())
    }
}

/// Load a `(model, source, run)` triple from a config file.
pub fn load_config(path: impl AsRef<Path>) -> crate::Result<(HyperbolicModel, BoundarySource, RunConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    load_config_str(&path.display().to_string(), &text)
}

/// Same as [`load_config`] but from an in-memory string (used by tests).
pub fn load_config_str(
    path: &str,
    text: &str,
) -> crate::Result<(HyperbolicModel, BoundarySource, RunConfig)> {
    let ctx = Ctx { path };
    let mut sections = parse_sections(path, text)?;

    // [system]
    let mut sys = sections.remove("system").unwrap_or_default();
    let family = sys
        .remove("family")
        .map(|(_, v)| v)
        .unwrap_or_else(|| "euler".to_string());
    let mut model = match family.as_str() {
        "euler" => {
            let v = ctx.need_f64(&mut sys, "v", "system")?;
            let u = ctx.need_f64(&mut sys, "u", "system")?;
            let c = ctx.need_f64(&mut sys, "c", "system")?;
            let eta = ctx.need_f64(&mut sys, "eta", "system")?;
            super::euler_model(v, u, c, eta)?
        }
        "custom" => {
            let n = ctx
                .take_usize(&mut sys, "n")?
                .ok_or_else(|| ctx.err(0, "missing key `n` in [system] (custom family)"))?;
            let d = ctx.take_usize(&mut sys, "d")?.unwrap_or(2);
            let mut b_mats = Vec::new();
            for j in 1..=d {
                let key = format!("B{j}");
                let m = ctx
                    .take_matrix(&mut sys, &key, n, n)?
                    .ok_or_else(|| ctx.err(0, format!("missing key `{key}` in [system]")))?;
                b_mats.push(m);
            }
            let beta = ctx
                .take_numbers(&mut sys, "beta")?
                .ok_or_else(|| ctx.err(0, "missing key `beta` in [system]"))?;
            if beta.len() != d {
                return Err(ctx.err(0, format!("beta must have {d} components")));
            }
            HyperbolicModel {
                dim_space: d,
                state_dim: n,
                b_mats,
                boundary_matrix: DMatrix::zeros(0, n), // must be overridden below
                linear_zero_order: None,
                quad_interior: QuadTensor::zero(n, n),
                quad_boundary: QuadTensor::zero(0, n),
                beta,
                euler: None,
            }
        }
        other => return Err(ctx.err(0, format!("unknown family {other:?}"))),
    };
    let n = model.state_dim;
    if let Some(d0) = ctx.take_matrix(&mut sys, "D0", n, n)? {
        model.linear_zero_order = Some(d0);
    }
    let mut d_comps = Vec::new();
    for i in 1..=n {
        match ctx.take_matrix(&mut sys, &format!("D.{i}"), n, n)? {
            Some(m) => d_comps.push(m),
            None => d_comps.push(DMatrix::zeros(n, n)),
        }
    }
    model.quad_interior = QuadTensor::new(d_comps).map_err(|e| ctx.err(0, e.to_string()))?;
    ctx.reject_unknown(&sys, "system")?;

    // [boundary]
    let mut bnd = sections.remove("boundary").unwrap_or_default();
    if let Some((line, v)) = bnd.remove("B") {
        let vals: Vec<f64> = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ctx.err(line, "B: expected comma-separated numbers"))?;
        if vals.len() % n != 0 {
            return Err(ctx.err(line, format!("B: entry count {} not a multiple of N = {n}", vals.len())));
        }
        let p = vals.len() / n;
        model.boundary_matrix = DMatrix::from_row_slice(p, n, &vals);
    } else if model.boundary_matrix.nrows() == 0 {
        return Err(ctx.err(0, "custom family requires `B` in [boundary]"));
    }
    let p = model.p();
    let mut psi_comps = Vec::new();
    for i in 1..=p {
        match ctx.take_matrix(&mut bnd, &format!("Psi.{i}"), n, n)? {
            Some(m) => psi_comps.push(m),
            None => psi_comps.push(DMatrix::zeros(n, n)),
        }
    }
    model.quad_boundary = QuadTensor::new(psi_comps).map_err(|e| ctx.err(0, e.to_string()))?;
    ctx.reject_unknown(&bnd, "boundary")?;

    // [run]
    let mut run = sections.remove("run").unwrap_or_default();
    let mut rc = RunConfig::default();
    if let Some(v) = ctx.take_f64(&mut run, "eps")? {
        rc.eps = v;
    }
    if let Some(v) = ctx.take_usize(&mut run, "n_x1")? {
        rc.n_x1 = v;
    }
    if let Some(v) = ctx.take_usize(&mut run, "n_x2")? {
        rc.n_x2 = v;
    }
    if let Some(v) = ctx.take_usize(&mut run, "k_modes")? {
        rc.k_modes = v;
    }
    if let Some(v) = ctx.take_f64(&mut run, "cfl")? {
        rc.cfl = v;
    }
    if let Some(v) = ctx.take_f64(&mut run, "t_final")? {
        rc.t_final = v;
    }
    if let Some(v) = ctx.take_f64(&mut run, "l1")? {
        rc.l1 = v;
    }
    if let Some(v) = ctx.take_f64(&mut run, "l2")? {
        rc.l2 = v;
    }
    if let Some(v) = ctx.take_f64(&mut run, "ppw")? {
        rc.ppw = v;
    }
    if let Some(v) = ctx.take_f64(&mut run, "delta")? {
        rc.delta = v;
    }
    if let Some((line, v)) = run.remove("seed") {
        rc.seed = v
            .parse::<u64>()
            .map_err(|_| ctx.err(line, "seed: expected a nonnegative integer"))?;
    }
    ctx.reject_unknown(&run, "run")?;

    // [source]
    let mut srcsec = sections.remove("source").unwrap_or_default();
    let mut source = BoundarySource::zero(rc.l1);
    if let Some((line, v)) = srcsec.remove("ramp") {
        source.auto_ramp = match v.as_str() {
            "on" => true,
            "off" => false,
            _ => return Err(ctx.err(line, "ramp: expected `on` or `off`")),
        };
    }
    // Collect keys G.<k>.re / G.<k>.im.
    let keys: Vec<String> = srcsec.keys().cloned().collect();
    let mut mode_keys: Vec<i32> = Vec::new();
    for key in &keys {
        let Some(rest) = key.strip_prefix("G.") else {
            continue;
        };
        let Some((knum, _part)) = rest.split_once('.') else {
            continue;
        };
        if let Ok(k) = knum.parse::<i32>() {
            if !mode_keys.contains(&k) {
                mode_keys.push(k);
            }
        }
    }
    mode_keys.sort_unstable();
    for k in mode_keys {
        if k <= 0 {
            let (line, _) = srcsec[&format!("G.{k}.re")];
            return Err(ctx.err(line, "source modes must have k > 0 (negative k via Hermitian symmetry; k=0 forbidden by mean-zero)"));
        }
        let parse_vec = |sec: &mut Section, key: String| -> crate::Result<Option<Vec<Expr>>> {
            match sec.remove(&key) {
                None => Ok(None),
                Some((line, v)) => v
                    .split(';')
                    .map(Expr::parse)
                    .collect::<crate::Result<Vec<_>>>()
                    .map(Some)
                    .map_err(|e| ctx.err(line, format!("{key}: {e}"))),
            }
        };
        let re = parse_vec(&mut srcsec, format!("G.{k}.re"))?
            .unwrap_or_else(|| vec![Expr::Num(0.0); p]);
        let im = parse_vec(&mut srcsec, format!("G.{k}.im"))?
            .unwrap_or_else(|| vec![Expr::Num(0.0); p]);
        if re.len() != p || im.len() != p {
            return Err(ctx.err(
                0,
                format!("G.{k}: expected {p} semicolon-separated components"),
            ));
        }
        source.modes.push(SourceMode { k, re, im });
    }
    ctx.reject_unknown(&srcsec, "source")?;

    if let Some((name, sec)) = sections.iter().next() {
        let line = sec.values().map(|(l, _)| *l).min().unwrap_or(0);
        return Err(ctx.err(line, format!("unknown section [{name}]")));
    }

    rc.check(&model)?;
    let report = super::validate(&model, 32, rc.seed);
    if !report.passes() {
        return Err(Error::Model(format!(
            "config model fails validation: {:?}",
            report.failures
        )));
    }
    Ok((model, source, rc))
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| {
            r.iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Serialize a `(model, source, run)` triple back to config text; designed so
/// that `load(save(x)) == x` field-wise.
pub fn save_config(
    model: &HyperbolicModel,
    source: &BoundarySource,
    run: &RunConfig,
) -> String {
    let mut out = String::new();
    out.push_str("[system]\n");
    match &model.euler {
        Some(EulerParams { v, u, c, eta }) => {
            out.push_str("family = euler\n");
            out.push_str(&format!("v = {v:?}\nu = {u:?}\nc = {c:?}\neta = {eta:?}\n"));
        }
        None => {
            out.push_str("family = custom\n");
            out.push_str(&format!("n = {}\nd = {}\n", model.state_dim, model.dim_space));
            for (j, b) in model.b_mats.iter().enumerate() {
                out.push_str(&format!("B{} = {}\n", j + 1, fmt_matrix(b)));
            }
            out.push_str(&format!(
                "beta = {}\n",
                model
                    .beta
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
                    .join(",")
            ));
        }
    }
    if let Some(d0) = &model.linear_zero_order {
        out.push_str(&format!("D0 = {}\n", fmt_matrix(d0)));
    }
    for (i, m) in model.quad_interior.comps.iter().enumerate() {
        if m.iter().any(|&x| x != 0.0) {
            out.push_str(&format!("D.{} = {}\n", i + 1, fmt_matrix(m)));
        }
    }
    out.push_str("\n[boundary]\n");
    out.push_str(&format!("B = {}\n", fmt_matrix(&model.boundary_matrix)));
    for (i, m) in model.quad_boundary.comps.iter().enumerate() {
        if m.iter().any(|&x| x != 0.0) {
            out.push_str(&format!("Psi.{} = {}\n", i + 1, fmt_matrix(m)));
        }
    }
    out.push_str("\n[source]\n");
    if !source.auto_ramp {
        out.push_str("ramp = off\n");
    }
    for m in &source.modes {
        let join = |v: &Vec<Expr>| {
            v.iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        };
        out.push_str(&format!("G.{}.re = {}\n", m.k, join(&m.re)));
        out.push_str(&format!("G.{}.im = {}\n", m.k, join(&m.im)));
    }
    out.push_str("\n[run]\n");
    out.push_str(&format!(
        "eps = {:?}\nn_x1 = {}\nn_x2 = {}\nk_modes = {}\ncfl = {:?}\nt_final = {:?}\nl1 = {:?}\nl2 = {:?}\nppw = {:?}\ndelta = {:?}\nseed = {}\n",
        run.eps, run.n_x1, run.n_x2, run.k_modes, run.cfl, run.t_final, run.l1, run.l2, run.ppw,
        run.delta, run.seed
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
family = euler
v = 1.0
u = 1.0
c = 1.7320508075688772
eta = 1.0

[source]
G.1.re = 0; chi(t)*sin(x1)
G.1.im = 0; 0

[run]
eps = 0.25
l2 = 3.0
"#;

    #[test]
    fn minimal_euler_config_loads() {
        let (model, source, run) = load_config_str("test", MINIMAL).unwrap();
        let reference = super::super::euler_model(1.0, 1.0, 3f64.sqrt(), 1.0).unwrap();
        assert_eq!(model.b_mats, reference.b_mats);
        assert_eq!(model.boundary_matrix, reference.boundary_matrix);
        assert_eq!(source.modes.len(), 1);
        assert_eq!(source.modes[0].k, 1);
        assert_eq!(run.eps, 0.25);
    }

    #[test]
    fn missing_key_names_the_key() {
        let text = MINIMAL.replace("c = 1.7320508075688772\n", "");
        let err = load_config_str("test", &text).unwrap_err().to_string();
        assert!(err.contains("`c`"), "got: {err}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = MINIMAL.replace("[run]", "frobnicate = 3\n[run]");
        let err = load_config_str("test", &text).unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "got: {err}");
    }

    #[test]
    fn round_trip_is_field_wise_identical() {
        let (model, source, run) = load_config_str("test", MINIMAL).unwrap();
        let text = save_config(&model, &source, &run);
        let (m2, s2, r2) = load_config_str("round", &text).unwrap();
        assert_eq!(model, m2);
        assert_eq!(source, s2);
        assert_eq!(run, r2);
    }
}
