//! Command-line front end: batch drivers over the library modules.
//!
//! Every subcommand reads a plain-text config file describing the model,
//! the oscillatory boundary source, and the run parameters, and emits
//! data-only CSV artifacts (plus a plotting-script template) into the
//! requested output location.  All randomized suites are seeded and
//! bit-reproducible.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use oscamp::amplitude::{solve_key_subsystem, TauMode};
use oscamp::corrector::CorrectedApprox;
use oscamp::harness::{run_identity_suite, write_artifact, PLOT_TEMPLATE};
use oscamp::model::config::{load_config, save_config};
use oscamp::model::{BoundarySource, HyperbolicModel, RunConfig};
use oscamp::nashmoser::{nash_moser_solve, CylinderSystem, NashMoserConfig, SmoothingFamily};
use oscamp::solver::{compare_to_approx, solve_direct};
use oscamp::spectral::{find_resonances, mode_package};

#[derive(Parser)]
#[command(
    name = "oscamp",
    version,
    about = "Weakly nonlinear geometric optics for weakly stable hyperbolic boundary value problems"
)]
struct Cli {
    /// Model/source/run configuration file (sectioned key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (subcommand-dependent default).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the randomized suites (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.  The compute kernels are single-threaded and all
    /// reductions are ordered, so results are independent of this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit the boundary-frequency mode table (speeds, bases, identity
    /// checksums) for the configured model.
    Spectral,
    /// Emit the resonant phase triples of the configured model.
    Resonances {
        /// Largest harmonic index searched.
        #[arg(long, default_value_t = 50)]
        nmax: i64,
        /// Resonance detection tolerance.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Solve the profile equations (amplitude + memory trace) and write
    /// snapshots, the constants bundle, and diagnostics.
    Profiles {
        /// Final time override.
        #[arg(long, value_name = "T")]
        t: Option<f64>,
        /// Run the cross-module identity suite instead and print the table.
        #[arg(long)]
        selftest: bool,
    },
    /// Build the corrected two-scale approximation from a profile run and
    /// sample the leading and corrected fields.
    Corrector {
        /// Profile output directory (reads its stored config); defaults to
        /// --config.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Wavelength parameter override.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// March the full oscillatory problem and write field slices plus the
    /// per-step norm log.
    Simulate {
        /// Wavelength parameter override.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Assemble the scaling/convergence report from completed simulate runs.
    Verify {
        /// Simulate output directories (each holds config.cfg + summary.csv).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Corrector output directory; enables the approximation-error
        /// columns (direct solves are replayed from each run's config).
        #[arg(long)]
        approx: Option<PathBuf>,
    },
    /// Run the graded iteration on the amplitude cylinder and emit its trace.
    Nashmoser {
        /// Initial smoothing scale.
        #[arg(long, default_value_t = 2.0)]
        theta0: f64,
        /// Size parameter of the increment-decay monitor.
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Time levels of the cylinder discretization.
        #[arg(long, default_value_t = 64)]
        nt: usize,
        /// Iteration cap.
        #[arg(long, default_value_t = 30)]
        nmax: usize,
    },
    /// Run every module's identity suite and print the defect table.
    Selftest,
}

fn need_config(cli: &Cli) -> anyhow::Result<(HyperbolicModel, BoundarySource, RunConfig)> {
    let path = cli
        .config
        .as_ref()
        .context("this subcommand needs --config")?;
    let mut triple = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        triple.2.seed = seed;
    }
    Ok(triple)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn read_summary(dir: &Path) -> anyhow::Result<(f64, f64)> {
    let text = std::fs::read_to_string(dir.join("summary.csv"))
        .with_context(|| format!("reading {}/summary.csv", dir.display()))?;
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("eps") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 2 {
            return Ok((cols[0].trim().parse()?, cols[1].trim().parse()?));
        }
    }
    bail!("{}: summary.csv has no data row", dir.display());
}

fn emit_plot_template(dir: &Path) -> anyhow::Result<()> {
    write_artifact(&dir.join("plot.py"), PLOT_TEMPLATE)?;
    Ok(())
}

fn cmd_spectral(cli: &Cli) -> anyhow::Result<()> {
    let (model, _, _) = need_config(cli)?;
    let ms = mode_package(&model)?;
    let mut out = String::from(
        "# boundary-frequency mode table: speed [x/t units], kernel bases [state units]\n\
         mode,omega,v1,v2,direction,right_basis,left_basis\n",
    );
    let fmt_vec = |v: &nalgebra::DVector<f64>| {
        v.iter()
            .map(|x| format!("{x:.12e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (m, mode) in ms.modes.iter().enumerate() {
        for (r, l) in mode.right_basis.iter().zip(&mode.left_basis) {
            out.push_str(&format!(
                "{m},{:.12e},{:.12e},{:.12e},{:?},{},{}\n",
                mode.omega,
                mode.velocity[0],
                mode.velocity[1],
                mode.direction,
                fmt_vec(r),
                fmt_vec(l),
            ));
        }
    }
    // Identity checksums: bi-orthogonality, projector algebra, kernel vectors.
    let mut d_bio: f64 = 0.0;
    let n = ms.n();
    let mut sum_p = nalgebra::DMatrix::zeros(n, n);
    let mut d_idem: f64 = 0.0;
    for (i, mi) in ms.modes.iter().enumerate() {
        for (j, mj) in ms.modes.iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            d_bio = d_bio.max((mi.left_basis[0].dot(&mj.right_basis[0]) - want).abs());
        }
        d_idem = d_idem.max((&mi.projector * &mi.projector - &mi.projector).norm());
        sum_p += &mi.projector;
    }
    let d_comp = (sum_p - nalgebra::DMatrix::identity(n, n)).norm();
    let d_be = (&ms.boundary_matrix * &ms.e).norm();
    let d_b: f64 = ms
        .stable_basis
        .iter()
        .map(|v| ms.b.dot(&(&ms.boundary_matrix * v)).abs())
        .fold(0.0, f64::max)
        ;
    out.push_str(&format!(
        "# checksum biorthogonality = {d_bio:.3e}\n\
         # checksum projector idempotence = {d_idem:.3e}\n\
         # checksum projector completeness = {d_comp:.3e}\n\
         # checksum B e = {d_be:.3e}\n\
         # checksum b.(B E^s) = {d_b:.3e}\n"
    ));
    let path = out_path(cli, "spectral.csv");
    write_artifact(&path, &out)?;
    println!("wrote {} ({} modes)", path.display(), ms.modes.len());
    Ok(())
}

fn cmd_resonances(cli: &Cli, nmax: i64, tol: f64) -> anyhow::Result<()> {
    let (model, _, _) = need_config(cli)?;
    let ms = mode_package(&model)?;
    let triples = find_resonances(&ms, nmax, tol);
    let mut out = String::from(
        "# resonant phase triples: harmonic n_m of outgoing mode m equals\n\
         # n_p phase_p + n_r phase_r of the incoming pair [dimensionless indices]\n\
         m_out,p_in,r_in,n_m,n_p,n_r\n",
    );
    for t in &triples {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.m_out, t.p_in, t.r_in, t.n_m, t.n_p, t.n_r
        ));
    }
    let path = out_path(cli, "resonances.csv");
    write_artifact(&path, &out)?;
    println!("wrote {} ({} triples, |n| <= {nmax})", path.display(), triples.len());
    Ok(())
}

fn print_identity_suite(seed: u64) -> anyhow::Result<()> {
    let report = run_identity_suite(seed, false)?;
    print!("{}", report.csv());
    if report.all_pass() {
        println!("# verdict: PASS (seed {seed})");
        Ok(())
    } else {
        bail!("identity suite FAILED (seed {seed})");
    }
}

fn cmd_profiles(cli: &Cli, t: Option<f64>, selftest: bool) -> anyhow::Result<()> {
    if selftest {
        return print_identity_suite(cli.seed.unwrap_or(0));
    }
    let (model, source, mut rc) = need_config(cli)?;
    if let Some(t) = t {
        rc.t_final = t;
    }
    let ms = mode_package(&model)?;
    let sol = solve_key_subsystem(&model, &ms, &source, &rc, TauMode::ExactMemory)?;
    let dir = out_path(cli, "prof");
    write_artifact(&dir.join("config.cfg"), &save_config(&model, &source, &rc))?;

    let mut norms = String::from("# per-step boundary-amplitude norm\n# t [time], sup_a [state units]\nt,sup_a\n");
    for (t, s) in &sol.sup_trace {
        norms.push_str(&format!("{t:.8e},{s:.8e}\n"));
    }
    write_artifact(&dir.join("sup_trace.csv"), &norms)?;

    let mut snaps = String::from(
        "# amplitude snapshots a_k(t, x1) [state units]; k = tangential harmonic\n\
         t,k,x1,re,im\n",
    );
    let n_levels = sol.history.levels.len();
    let stride = (n_levels / 5).max(1);
    for (li, level) in sol.history.levels.iter().enumerate() {
        if li % stride != 0 && li != n_levels - 1 {
            continue;
        }
        let t = li as f64 * sol.history.dt;
        for k in 1..=sol.grid.k_modes {
            for i in 0..sol.grid.n_x1 {
                let z = level[(k - 1, i)];
                snaps.push_str(&format!(
                    "{t:.8e},{k},{:.8e},{:.8e},{:.8e}\n",
                    sol.grid.x1(i),
                    z.re,
                    z.im
                ));
            }
        }
    }
    write_artifact(&dir.join("amplitude.csv"), &snaps)?;
    write_artifact(
        &dir.join("constants.txt"),
        &format!("{:#?}\n", sol.constants),
    )?;
    write_artifact(
        &dir.join("diagnostics.txt"),
        &format!(
            "dt = {:.6e}\nsteps = {}\nsup_a_final = {:.6e}\ntau_grids = {}\n",
            sol.dt,
            n_levels,
            sol.sup_trace.last().map(|&(_, s)| s).unwrap_or(0.0),
            sol.tau.len()
        ),
    )?;
    emit_plot_template(&dir)?;
    println!("wrote {} (dt = {:.3e}, {} steps)", dir.display(), sol.dt, n_levels);
    Ok(())
}

fn cmd_corrector(cli: &Cli, from: Option<PathBuf>, eps: Option<f64>) -> anyhow::Result<()> {
    let (model, source, mut rc) = match &from {
        Some(dir) => {
            let mut triple = load_config(dir.join("config.cfg"))?;
            if let Some(seed) = cli.seed {
                triple.2.seed = seed;
            }
            triple
        }
        None => need_config(cli)?,
    };
    if let Some(e) = eps {
        rc.eps = e;
    }
    let ms = mode_package(&model)?;
    let sol = solve_key_subsystem(&model, &ms, &source, &rc, TauMode::ExactMemory)?;
    let ca = CorrectedApprox::new(&model, &ms, &sol, &source, rc.eps);
    let dir = out_path(cli, "approx");
    write_artifact(&dir.join("config.cfg"), &save_config(&model, &source, &rc))?;
    write_artifact(&dir.join("manifest.txt"), &format!("{:#?}\n", ca.manifest))?;

    let n1 = sol.grid.n_x1;
    let n2 = 17usize;
    let x2_max = 1.0_f64.min(rc.l2);
    let t = rc.t_final;
    let mut fields = String::from(
        "# sampled approximations at the final time [state units per component]\n\
         # u_app = leading two-scale field, u_c = corrected field\n\
         x1,x2,u_app,u_c\n",
    );
    for i in 0..n1 {
        let x1 = sol.grid.x1(i);
        for j in 0..n2 {
            let x2 = x2_max * j as f64 / (n2 - 1) as f64;
            let ua = ca.u_leading(t, x1, x2);
            let uc = ca.u_corrected(t, x1, x2);
            let join = |v: &nalgebra::DVector<f64>| {
                v.iter()
                    .map(|x| format!("{x:.8e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            fields.push_str(&format!("{x1:.8e},{x2:.8e},{},{}\n", join(&ua), join(&uc)));
        }
    }
    write_artifact(&dir.join("fields.csv"), &fields)?;
    emit_plot_template(&dir)?;
    println!("wrote {} (eps = {})", dir.display(), rc.eps);
    Ok(())
}

fn cmd_simulate(cli: &Cli, eps: Option<f64>) -> anyhow::Result<()> {
    let (model, source, mut rc) = need_config(cli)?;
    if let Some(e) = eps {
        rc.eps = e;
    }
    let run = solve_direct(&model, rc.eps, &source, &rc)?;
    let dir = out_path(cli, &format!("run_{}", rc.eps));
    write_artifact(&dir.join("config.cfg"), &save_config(&model, &source, &rc))?;
    write_artifact(
        &dir.join("summary.csv"),
        &format!(
            "# eps [-], sup_v = max_t sup_x |v_eps| [state units], dt [time]\n\
             eps,sup_v,dt\n{},{:.8e},{:.8e}\n",
            rc.eps,
            run.sup(),
            run.dt
        ),
    )?;
    let mut norms = String::from("# per-step field norm\n# t [time], sup_v [state units]\nt,sup_v\n");
    for (t, s) in &run.sup_trace {
        norms.push_str(&format!("{t:.8e},{s:.8e}\n"));
    }
    write_artifact(&dir.join("norms.csv"), &norms)?;

    let g = &run.field.grid;
    let mut slice = String::from(
        "# final-time field slice v_eps(T, x1, x2) [state units per component]\nx1,x2,v\n",
    );
    let s2 = (g.n2 / 64).max(1);
    for i1 in 0..g.n1 {
        for i2 in (0..g.n2).step_by(s2) {
            let v = run.field.node(i1, i2);
            let comp = v
                .iter()
                .map(|x| format!("{x:.8e}"))
                .collect::<Vec<_>>()
                .join(" ");
            slice.push_str(&format!("{:.8e},{:.8e},{comp}\n", g.x1(i1), g.x2(i2)));
        }
    }
    write_artifact(&dir.join("field_final.csv"), &slice)?;
    emit_plot_template(&dir)?;
    println!(
        "wrote {} (eps = {}, sup|v| = {:.4e})",
        dir.display(),
        rc.eps,
        run.sup()
    );
    Ok(())
}

fn cmd_verify(cli: &Cli, runs: &[PathBuf], approx: Option<PathBuf>) -> anyhow::Result<()> {
    // Load each completed run: its exact config plus the measured sup norm.
    let mut rows: Vec<(f64, f64, PathBuf)> = Vec::new();
    for dir in runs {
        let (eps, sup_v) = read_summary(dir)?;
        rows.push((eps, sup_v, dir.clone()));
    }
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // Optional approximation columns: rebuild the corrected field from the
    // corrector config and replay each direct solve against it.
    let ca_parts = match &approx {
        None => None,
        Some(dir) => {
            let (model, source, rc) = load_config(dir.join("config.cfg"))?;
            let ms = mode_package(&model)?;
            let sol = solve_key_subsystem(&model, &ms, &source, &rc, TauMode::ExactMemory)?;
            Some((model, source, ms, sol))
        }
    };

    let mut out = String::from(
        "# scaling/convergence report over completed runs\n\
         # eps [-]; sup_v [state units]; ratio_eps = sup_v/eps; ratio_eps2 = sup_v/eps^2;\n\
         # err_leading, err_corrected = sup-norm approximation errors in the u = v/eps scaling\n\
         eps,sup_v,ratio_eps,ratio_eps2,err_leading,err_corrected\n",
    );
    let mut prev_ratio2: Option<f64> = None;
    let mut growths = Vec::new();
    for (eps, sup_v, dir) in &rows {
        let (mut err_l, mut err_c) = (f64::NAN, f64::NAN);
        if let Some((model, source, ms, sol)) = &ca_parts {
            let (_, _, rc_run) = load_config(dir.join("config.cfg"))?;
            let run = solve_direct(model, *eps, source, &rc_run)?;
            let ca = CorrectedApprox::new(model, ms, sol, source, *eps);
            err_l = compare_to_approx(&run.field, *eps, &|t, x1, x2| Some(ca.u_leading(t, x1, x2)), rc_run.l2).sup_err;
            err_c = compare_to_approx(&run.field, *eps, &|t, x1, x2| Some(ca.u_corrected(t, x1, x2)), rc_run.l2).sup_err;
        }
        let r2 = sup_v / (eps * eps);
        if let Some(p) = prev_ratio2 {
            growths.push(r2 / p);
        }
        prev_ratio2 = Some(r2);
        out.push_str(&format!(
            "{eps},{sup_v:.8e},{:.8e},{r2:.8e},{err_l:.8e},{err_c:.8e}\n",
            sup_v / eps
        ));
    }
    if !growths.is_empty() {
        out.push_str(&format!(
            "# ratio_eps2 growth per step: {}\n",
            growths
                .iter()
                .map(|g| format!("{g:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    let path = out_path(cli, "report.csv");
    write_artifact(&path, &out)?;
    if let Some(parent) = path.parent() {
        if parent.as_os_str().is_empty() {
            emit_plot_template(Path::new("."))?;
        } else {
            emit_plot_template(parent)?;
        }
    }
    println!("wrote {} ({} runs)", path.display(), rows.len());
    Ok(())
}

fn cmd_nashmoser(cli: &Cli, theta0: f64, delta: f64, nt: usize, nmax: usize) -> anyhow::Result<()> {
    let (model, source, rc) = need_config(cli)?;
    let ms = mode_package(&model)?;
    let sys = CylinderSystem::from_run(&model, &ms, &rc, nt)?;
    let g = sys.forcing(&ms, &source);
    let sf = SmoothingFamily::new(sys.grid.clone());
    let cfg = NashMoserConfig {
        theta0,
        delta,
        n_max: nmax,
        ..NashMoserConfig::default()
    };
    let (_, trace) = nash_moser_solve(&sys, &sf, &g, &cfg)?;

    let dir = out_path(cli, "nm");
    let mut out = String::from(
        "# graded-iteration trace: residual = |L(V_n) - g| in the level-0 scale norm\n\
         n,theta,delta_n,residual,e_quad,e_subst,e_acc,bookkeeping,identity,iterate_sup,decay_monitor\n",
    );
    for s in &trace.steps {
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.3e},{:.3e},{:.6e},{}\n",
            s.n,
            s.theta,
            s.delta_n,
            s.residual,
            s.e_quad_norm,
            s.e_subst_norm,
            s.e_acc_norm,
            s.bookkeeping_residual,
            s.identity_residual,
            s.iterate_sup,
            s.decay_monitor
        ));
    }
    let verdict = format!(
        "# verdict: {} in {} steps, final residual {:.3e}",
        if trace.converged { "CONVERGED" } else { "NOT CONVERGED" },
        trace.steps.len(),
        trace.final_residual()
    );
    out.push_str(&verdict);
    out.push('\n');
    write_artifact(&dir.join("trace.csv"), &out)?;
    emit_plot_template(&dir)?;
    println!("wrote {}/trace.csv", dir.display());
    println!("{}", verdict.trim_start_matches("# "));
    if !trace.converged {
        bail!("iteration did not converge");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.threads == 0 {
        bail!("--threads must be >= 1");
    }
    match &cli.cmd {
        Cmd::Spectral => cmd_spectral(&cli),
        Cmd::Resonances { nmax, tol } => cmd_resonances(&cli, *nmax, *tol),
        Cmd::Profiles { t, selftest } => cmd_profiles(&cli, *t, *selftest),
        Cmd::Corrector { from, eps } => cmd_corrector(&cli, from.clone(), *eps),
        Cmd::Simulate { eps } => cmd_simulate(&cli, *eps),
        Cmd::Verify { runs, approx } => cmd_verify(&cli, runs, approx.clone()),
        Cmd::Nashmoser {
            theta0,
            delta,
            nt,
            nmax,
        } => cmd_nashmoser(&cli, *theta0, *delta, *nt, *nmax),
        Cmd::Selftest => print_identity_suite(cli.seed.unwrap_or(0)),
    }
}
