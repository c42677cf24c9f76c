//! Subcommand implementations. Each writes its artifacts under `cfg.out` and
//! returns a short human-readable summary for stdout.

use std::path::Path;

use anyhow::Context;
use clap::Subcommand;
use rwre_core::clt_harness::{
    endpoint_statistics_from, large_deviation_fit, lindeberg_comparison, sample_increment_pool,
    scale_params, simulate_coarse, tightness_statistic, write_endpoint_csv, CltRun,
};
use rwre_core::coarse_grain::{
    build_coarse, build_coarse_with, decomposition_residuals, density, exact_exit_times,
    CoarseScheme,
};
use rwre_core::environment::{
    export_window, symmetry_audit, verify_conditions, Environment, SiteDistribution,
    TransitionSource,
};
use rwre_core::exact_solver::{
    exit_measure_from_source, green_from_source, mean_exit_time_from_source,
};
use rwre_core::green_analysis::{
    domination_check_coarse, free_green_fit, gamma_eval, perturbation_series, resolvent_check,
    DeltaKernel,
};
use rwre_core::lattice::{for_each_in_cube, Ball, Site};
use rwre_core::multiscale::{
    classify_points, run_ladder, write_diagnostics_json, write_ladder_csv, KernelSchedule,
    LadderConfig,
};
use rwre_core::walk_engine::{
    empirical_exit_distribution, estimate_sojourn, sample_exits, ReplicaOptions,
};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum EnvAction {
    /// Export the environment on the cube [-window, window]^d.
    Sample,
    /// Per-site condition checks on the window and the reflection audit.
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum WalkAction {
    /// Monte Carlo mean exit time from V_L(start).
    Sojourn,
    /// Empirical exit distribution from V_L(start).
    Exits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum ExactAction {
    /// Exact mean exit time from V_L at the start site.
    Sojourn,
    /// Exact exit distribution from V_L(start).
    ExitMeasure,
    /// Exact Green function on V_L.
    Green,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum CoarseAction {
    /// Build the coarse kernel on V_L and check the sojourn decomposition.
    Build,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum GreenAction {
    /// Resolvent identities and both perturbation expansions against SRW.
    Resolvent,
    /// Domination of the coarse Green function by the Γ kernel.
    Domination,
    /// Far-field fit of the free coarse Green function.
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum ScalesAction {
    /// Run the kernel recursion over the ladder.
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum CltAction {
    /// Coarse walk, endpoint covariance and optional tightness/comparison tables.
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum DiagnoseAction {
    /// Good/bad classification of V_L under the SRW kernel schedule.
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample or check the environment on a window.
    #[command(subcommand)]
    Env(EnvAction),
    /// Monte Carlo walks in one quenched environment.
    #[command(subcommand)]
    Walk(WalkAction),
    /// Exact linear-algebra quantities on a ball.
    #[command(subcommand)]
    Exact(ExactAction),
    /// Coarse-grained kernel on a ball.
    #[command(subcommand)]
    Coarse(CoarseAction),
    /// Green-function comparisons.
    #[command(subcommand)]
    Green(GreenAction),
    /// Multiscale kernel recursion and diffusion constant.
    #[command(subcommand)]
    Scales(ScalesAction),
    /// Invariance-principle checks at horizon n.
    #[command(subcommand)]
    Clt(CltAction),
    /// Good/bad point diagnostics.
    #[command(subcommand)]
    Diagnose(DiagnoseAction),
}

impl Command {
    pub fn name(&self) -> String {
        let s = format!("{self:?}");
        // "Exact(Sojourn)" -> "exact sojourn"
        s.replace('(', " ").replace(')', "").to_lowercase()
    }
}

/// Formats with up to 12 significant decimals and no trailing zeros.
pub fn fmt_num(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), value)?;
    Ok(())
}

fn environment(cfg: &RunConfig) -> anyhow::Result<Environment> {
    Ok(Environment::new(cfg.env_spec()?)?)
}

pub fn execute(cmd: Command, cfg: &RunConfig) -> anyhow::Result<String> {
    let out = &cfg.out;
    match cmd {
        Command::Env(a) => env_cmd(a, cfg, out),
        Command::Walk(a) => walk_cmd(a, cfg, out),
        Command::Exact(a) => exact_cmd(a, cfg, out),
        Command::Coarse(CoarseAction::Build) => coarse_build(cfg, out),
        Command::Green(a) => green_cmd(a, cfg, out),
        Command::Scales(ScalesAction::Run) => scales_run(cfg, out),
        Command::Clt(CltAction::Run) => clt_run(cfg, out),
        Command::Diagnose(DiagnoseAction::Classify) => diagnose(cfg, out),
    }
}

fn env_cmd(a: EnvAction, cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let env = environment(cfg)?;
    let w = cfg.window;
    let lo = Site::new(&vec![-w; cfg.d]);
    let hi = Site::new(&vec![w; cfg.d]);
    match a {
        EnvAction::Sample => {
            let path = out.join("env_window.csv");
            export_window(&env, &lo, &hi, &path)?;
            Ok(format!("wrote {}", path.display()))
        }
        EnvAction::Check => {
            let mut sites = 0usize;
            let mut failures = 0usize;
            let mut min_slack = f64::INFINITY;
            for_each_in_cube(&Site::origin(cfg.d), w, |x| {
                let r = verify_conditions(&env.get(&x), cfg.epsilon);
                sites += 1;
                if !r.all_pass() {
                    failures += 1;
                }
                min_slack = min_slack.min(r.a0_slack);
            });
            let audits = (1..=cfg.d)
                .map(|axis| symmetry_audit(env.spec(), axis, cfg.reps, 0.01))
                .collect::<rwre_core::Result<Vec<_>>>()?;
            let pass = failures == 0 && audits.iter().all(|a| a.pass);
            write_json(
                &json!({"sites": sites, "failures": failures, "min_slack": min_slack, "symmetry": audits, "pass": pass}),
                &out.join("env_check.json"),
            )?;
            Ok(format!(
                "{sites} sites, {failures} condition failures, symmetry audit {}",
                if pass { "pass" } else { "FAIL" }
            ))
        }
    }
}

fn walk_cmd(a: WalkAction, cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let env = environment(cfg)?;
    let x = cfg.start_site();
    let opts = ReplicaOptions::new(cfg.seed);
    match a {
        WalkAction::Sojourn => {
            let e = estimate_sojourn(&env, &x, cfg.radius, cfg.reps, cfg.epsilon, &opts)?;
            write_json(&e, &out.join("walk_sojourn.json"))?;
            Ok(format!("{} ± {}", fmt_num(e.mean), fmt_num(e.stderr)))
        }
        WalkAction::Exits => {
            let exits = sample_exits(&env, &x, cfg.radius, cfg.reps, cfg.epsilon, &opts)?;
            let dist = empirical_exit_distribution(&exits);
            let path = out.join("walk_exits.csv");
            let mut w = csv::Writer::from_path(&path)?;
            let mut header: Vec<String> = (1..=cfg.d).map(|i| format!("z{i}")).collect();
            header.push("frequency".into());
            w.write_record(&header)?;
            for (z, f) in &dist {
                let mut row: Vec<String> = z.coords().iter().map(|c| c.to_string()).collect();
                row.push(format!("{f:.16e}"));
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(format!(
                "{} exit sites from {} walks; wrote {}",
                dist.len(),
                cfg.reps,
                path.display()
            ))
        }
    }
}

fn exact_cmd(a: ExactAction, cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let env = environment(cfg)?;
    let x = cfg.start_site();
    match a {
        ExactAction::Sojourn => {
            let ball = Ball::new(Site::origin(cfg.d), cfg.radius)?;
            let v = mean_exit_time_from_source(&env, &ball, &x)?;
            write_json(
                &json!({"radius": cfg.radius, "start": x, "mean_exit_time": v}),
                &out.join("exact_sojourn.json"),
            )?;
            Ok(fmt_num(v))
        }
        ExactAction::ExitMeasure => {
            let ball = Ball::new(x, cfg.radius)?;
            let m = exit_measure_from_source(&env, &ball, &x)?;
            let path = out.join("exit_measure.csv");
            m.write_csv(&path)?;
            Ok(format!(
                "{} exit sites, total mass {}",
                m.sites.len(),
                fmt_num(m.total())
            ))
        }
        ExactAction::Green => {
            let ball = Ball::new(Site::origin(cfg.d), cfg.radius)?;
            let g = green_from_source(&env, &ball)?;
            let path = out.join("green.csv");
            g.write_csv(&path)?;
            Ok(format!(
                "{} interior sites; wrote {}",
                g.n(),
                path.display()
            ))
        }
    }
}

fn coarse_build(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let env = environment(cfg)?;
    let scheme = CoarseScheme::centered(Site::origin(cfg.d), cfg.radius, cfg.scale_params)?;
    let kernel = build_coarse_with(&env, &scheme, cfg.tol)?;
    let exact = exact_exit_times(&env, &scheme)?;
    let reports = decomposition_residuals(&kernel, &exact)?;
    let worst = reports
        .iter()
        .map(|r| r.relative_residual)
        .fold(0.0, f64::max);
    kernel
        .sojourn_field()
        .write_csv(&out.join("sojourn_field.csv"))?;
    write_json(
        &json!({
            "radius": cfg.radius,
            "sites": kernel.interior().len(),
            "nnz": kernel.nnz(),
            "max_row_sum_error": kernel.max_row_sum_error(),
            "max_relative_residual": worst,
        }),
        &out.join("coarse.json"),
    )?;
    Ok(format!(
        "{} sites, max relative residual of the sojourn decomposition {:.3e}",
        kernel.interior().len(),
        worst
    ))
}

fn green_cmd(a: GreenAction, cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    match a {
        GreenAction::Resolvent => {
            let env = environment(cfg)?;
            let srw = SiteDistribution::uniform(cfg.d);
            let ball = Ball::new(Site::origin(cfg.d), cfg.radius)?;
            let g = green_from_source(&srw, &ball)?;
            let big = green_from_source(&env, &ball)?;
            let delta = DeltaKernel::from_sources(&env, &srw, &ball)?;
            let res = resolvent_check(&g, &big, &delta)?;
            let series = perturbation_series(&g, &big, &delta, cfg.k_max)?;
            write_json(
                &json!({"resolvent": res, "series": series}),
                &out.join("resolvent.json"),
            )?;
            Ok(format!(
                "resolvent residuals {:.3e} {:.3e} {:.3e}; expansion errors {:.3e} {:.3e}",
                res.left,
                res.right,
                res.cross,
                series.neumann.final_error,
                series.resummed.final_error
            ))
        }
        GreenAction::Domination => {
            let env = environment(cfg)?;
            let scheme = CoarseScheme::centered(Site::origin(cfg.d), cfg.radius, cfg.scale_params)?;
            let kernel = build_coarse(&env, &scheme)?;
            let gamma = gamma_eval(cfg.d, cfg.radius, cfg.scale_params)?;
            let r = domination_check_coarse(&kernel, &gamma, &gamma.probe_points())?;
            write_json(&r, &out.join("domination.json"))?;
            Ok(format!(
                "domination constant {} over {} pairs",
                fmt_num(r.constant),
                r.pairs_checked
            ))
        }
        GreenAction::Fit => {
            let p = environment(cfg)?
                .homogeneous()
                .unwrap_or_else(|| SiteDistribution::uniform(cfg.d));
            let fit = free_green_fit(&p, cfg.m, cfg.box_radius)?;
            write_json(&fit, &out.join("free_green.json"))?;
            Ok(format!(
                "exponent {} ± {}, amplitude {}",
                fmt_num(fit.exponent),
                fmt_num(fit.exponent_stderr),
                fmt_num(fit.amplitude)
            ))
        }
    }
}

fn ladder_config(cfg: &RunConfig) -> LadderConfig {
    LadderConfig {
        ladder: cfg.ladder.clone(),
        n_envs: cfg.envs,
        inner: cfg.inner,
        params: cfg.scale_params,
        l0: cfg.l0,
        eta: cfg.eta,
        delta: cfg.delta,
        budget: cfg.budget,
        ..LadderConfig::default()
    }
}

fn scales_run(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let spec = cfg.env_spec()?;
    let lc = ladder_config(cfg);
    let (records, est) = run_ladder(&spec, &lc)?;
    write_ladder_csv(&records, &out.join("ladder.csv"))?;
    write_diagnostics_json(&records, &est, &lc, &out.join("diagnostics.json"))?;
    let lambda: Vec<String> = est.lambda.iter().map(|v| fmt_num(*v)).collect();
    Ok(format!(
        "D = {} ± {}; Lambda = diag({})",
        fmt_num(est.d),
        fmt_num(est.d_stderr),
        lambda.join(", ")
    ))
}

fn clt_run(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let env = environment(cfg)?;
    let scale = scale_params(cfg.n, cfg.d_const, density().c_phi())?;
    let ens = simulate_coarse(&env, &scale, &cfg.t_grid, cfg.reps, cfg.seed)?;
    let axes = cfg.kernel_axes();
    let predicted: Vec<f64> = axes.iter().map(|p| 2.0 * p / cfg.d_const).collect();
    let samples = ens.scaled_endpoints();
    let report = endpoint_statistics_from(cfg.n, &samples, &predicted);
    let mut run = CltRun::new(&ens, &report);
    if cfg.tightness_reps > 0 {
        let ks = [0, cfg.n / 2, cfg.n];
        let mut t =
            tightness_statistic(&env, cfg.n, &cfg.lambdas, &ks, cfg.tightness_reps, cfg.seed)?;
        if cfg.pool > 0 {
            let p = SiteDistribution::symmetric(&axes)?;
            let pool = sample_increment_pool(&p, scale.l_n, cfg.pool, cfg.seed);
            t.ld_fit = Some(large_deviation_fit(
                &pool,
                scale.l_n,
                &[1, 4, 16],
                cfg.pool,
                cfg.seed,
            )?);
        }
        run.tightness = Some(t);
    }
    if cfg.pool > 0 {
        let p = SiteDistribution::symmetric(&axes)?;
        run.lindeberg = Some(lindeberg_comparison(
            &p, &scale, cfg.reps, cfg.pool, cfg.seed,
        )?);
    }
    run.write_json(&out.join("clt_run.json"))?;
    write_endpoint_csv(&samples, &out.join("endpoints.csv"))?;
    let diag: Vec<String> = (0..cfg.d)
        .map(|i| fmt_num(report.covariance.covariance[i][i]))
        .collect();
    Ok(format!(
        "L_n = {}, beta_n = {}; covariance diag({}) vs predicted {}; KS {}",
        fmt_num(scale.l_n),
        scale.beta_n,
        diag.join(", "),
        fmt_num(predicted[0]),
        if report.ks_passes(rwre_core::clt_harness::KS_SIGNIFICANCE) {
            "pass"
        } else {
            "fail"
        }
    ))
}

fn diagnose(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let env = environment(cfg)?;
    let schedule = KernelSchedule::srw(cfg.d, cfg.l0);
    let c = classify_points(
        &env,
        cfg.radius,
        cfg.delta,
        cfg.eta,
        cfg.scale_params,
        &schedule,
    )?;
    write_json(&c.summary, &out.join("goodbad.json"))?;
    Ok(format!(
        "{} sites, {} bad ({} in space, {} in time)",
        c.summary.sites, c.summary.bad, c.summary.space_bad, c.summary.time_bad
    ))
}
