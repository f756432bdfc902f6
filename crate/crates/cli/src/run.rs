use std::io::Write;

use crystalstat_core::covariance::{
    convergence_rows, covariance_at, covariance_from_density, evolve_density, gibbs_density, limit_density,
    mixing_integral, write_convergence_csv, LimitDensity, TestFunction,
};
use crystalstat_core::dynamics::{green_function_on, hamiltonian, truncated_green_on, FieldState, Propagator};
use crystalstat_core::fields::{nonlinear_transform_sample, GaussianSampler, SpectralDensity};
use crystalstat_core::fit::power_law_fit;
use crystalstat_core::spectral::{check_e4_e5_with, check_es, critical_set_scan, CriticalSetEstimate};
use crystalstat_core::stats::{characteristic_functional, empirical_covariance, gaussianity_report, linear_functional_samples};
use crystalstat_core::{check_e123, ConditionReport, DispersionGrid, InteractionKernel, Verdict};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, MeasureSpec};
use crate::output::Bundle;
use crate::UsageError;

/// Ensemble covariance gate for `ensemble`, in jackknife standard errors.
const ENSEMBLE_SIGMA: f64 = 4.0;
const GIBBS_SIGMA: f64 = 3.0;
const CLT_SIGMA: f64 = 3.0;
const CLT_SLACK: f64 = 0.02;
const MOMENT_LIMIT: f64 = 4.0;
const MIXING_EXPONENT: f64 = -0.4;
const MIXING_RATIO: f64 = 0.05;
const ENERGY_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Dispersion,
    Critical,
    Green,
    Evolve,
    Ensemble,
    Limit,
    Gibbs,
    Clt,
    Mixing,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Dispersion => "dispersion",
            Command::Critical => "critical",
            Command::Green => "green",
            Command::Evolve => "evolve",
            Command::Ensemble => "ensemble",
            Command::Limit => "limit",
            Command::Gibbs => "gibbs",
            Command::Clt => "clt",
            Command::Mixing => "mixing",
            Command::Report => "report",
        }
    }

    fn needs_limit_conditions(self) -> bool {
        matches!(self, Command::Limit | Command::Gibbs | Command::Clt | Command::Mixing)
    }
}

pub enum Failure {
    Usage(UsageError),
    Condition(String),
    Gate(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<crystalstat_core::Error> for Failure {
    fn from(e: crystalstat_core::Error) -> Self {
        Failure::Usage(UsageError(e.to_string()))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(UsageError(e.to_string()))
    }
}

type Step<T> = Result<T, Failure>;

/// Shared state of a run after the kernel gate.
struct Context<'a> {
    config: &'a ExperimentConfig,
    kernel: InteractionKernel,
    grid: DispersionGrid,
    scan: CriticalSetEstimate,
    conditions: Vec<ConditionReport>,
}

impl Context<'_> {
    fn dim(&self) -> usize {
        self.kernel.dim()
    }

    fn components(&self) -> usize {
        self.kernel.components()
    }

    /// `z ∈ {0, e₁, 2e₁}`.
    fn offsets(&self) -> Vec<Vec<i64>> {
        (0..3)
            .map(|k| {
                let mut z = vec![0; self.dim()];
                z[0] = k;
                z
            })
            .collect()
    }

    fn limit(&self, q0: &SpectralDensity) -> Step<LimitDensity> {
        let lim = limit_density(q0, &self.grid)?;
        if !lim.is_valid() {
            return Err(Failure::Gate(format!(
                "limit density excludes {:.2}% of nodes",
                100.0 * lim.excluded_fraction()
            )));
        }
        Ok(lim)
    }

    fn initial_ensemble(&self, count: usize) -> Step<Vec<FieldState>> {
        let (q, transform) = self.config.sampled_density(self.dim(), self.components())?;
        let sampler = GaussianSampler::new(&q)?;
        let seed = self.config.seed;
        let states = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let y = sampler.sample(seed, i)?;
                match transform {
                    Some((a0, a1)) => nonlinear_transform_sample(&y, a0, a1),
                    None => Ok(y),
                }
            })
            .collect::<crystalstat_core::Result<Vec<_>>>()?;
        Ok(states)
    }
}

fn evolve_all(prop: &Propagator, states: &[FieldState], t: f64) -> Step<Vec<FieldState>> {
    let blocks = prop.blocks(t);
    Ok(states
        .par_iter()
        .map(|y| prop.evolve_with(y, &blocks))
        .collect::<crystalstat_core::Result<Vec<_>>>()?)
}

fn joined(z: &[i64]) -> String {
    z.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

fn gate(ok: bool, what: impl FnOnce() -> String) -> Step<()> {
    if ok {
        Ok(())
    } else {
        Err(Failure::Gate(what()))
    }
}

/// Run one subcommand and write its outputs; returns a verdict line.
pub fn run(command: Command, config: &ExperimentConfig, bundle: &mut Bundle) -> Step<String> {
    let kernel = config.build_kernel()?;
    let e123 = check_e123(&kernel, config.grid_resolution())?;
    if e123.verdict != Verdict::Pass {
        bundle.json("conditions.json", &[&e123])?;
        return Err(Failure::Condition(format!("E1-E3 {}", e123.verdict)));
    }
    let grid = DispersionGrid::new(&kernel, config.size, config.thresholds)?;
    let scan = critical_set_scan(&grid, &config.thresholds);
    let e45 = check_e4_e5_with(&grid, &scan);
    let mut ctx = Context { config, kernel, grid, scan, conditions: vec![e123, e45.clone()] };
    if command.needs_limit_conditions() && e45.verdict != Verdict::Pass && !config.override_conditions {
        bundle.json("conditions.json", &ctx.conditions)?;
        return Err(Failure::Condition(format!("E4-E5 {} (pass --override to proceed)", e45.verdict)));
    }
    let result = match command {
        Command::Dispersion => dispersion(&ctx, bundle),
        Command::Critical => critical(&ctx, bundle),
        Command::Green => green(&ctx, bundle),
        Command::Evolve => evolve(&ctx, bundle),
        Command::Ensemble => ensemble(&ctx, bundle),
        Command::Limit => limit(&mut ctx, bundle),
        Command::Gibbs => gibbs(&ctx, bundle),
        Command::Clt => clt(&ctx, bundle),
        Command::Mixing => mixing(&ctx, bundle),
        Command::Report => report(&mut ctx, bundle),
    };
    bundle.json("conditions.json", &ctx.conditions)?;
    result
}

fn dispersion(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let mut w = bundle.writer("dispersion.csv")?;
    ctx.grid.write_csv(&ctx.scan, &mut w)?;
    w.flush()?;
    Ok(format!("dispersion on {} nodes, v_max = {}", ctx.grid.points().len(), ctx.grid.max_group_velocity()))
}

fn critical(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let mut w = bundle.writer("critical.json")?;
    writeln!(w, "{}", ctx.scan.to_json()?)?;
    w.flush()?;
    let mut w = bundle.writer("critical.csv")?;
    writeln!(w, "node,{},c0,crossing,hess", (1..=ctx.dim()).map(|i| format!("theta_{i}")).collect::<Vec<_>>().join(","))?;
    for node in ctx.scan.flagged_nodes() {
        let c = &ctx.scan.cells[node];
        let th: Vec<String> = ctx.grid.point(node).theta.iter().map(|t| format!("{t:.12}")).collect();
        writeln!(w, "{node},{},{},{},{}", th.join(","), c.c0, c.crossing, c.hess())?;
    }
    w.flush()?;
    Ok(format!("flagged fraction {}", ctx.scan.fraction_combined))
}

#[derive(Serialize)]
struct GreenRow {
    t: f64,
    sup: f64,
    outside_cone_sup: f64,
    cone_radius: f64,
    imaginary_residue: f64,
}

fn green(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let eps = ctx.config.eps;
    let vmax = ctx.grid.max_group_velocity();
    let mut rows = Vec::new();
    for &t in &ctx.config.times {
        let g = if eps > 0.0 { truncated_green_on(&ctx.grid, &ctx.scan, t, eps)? } else { green_function_on(&ctx.grid, t)? };
        let mut w = bundle.writer(&format!("green_t{t}.csv"))?;
        g.write_csv(&mut w, None)?;
        w.flush()?;
        let radius = 1.5 * vmax * t;
        rows.push(GreenRow {
            t,
            sup: g.sup_norm(),
            outside_cone_sup: g.sup_beyond(radius),
            cone_radius: radius,
            imaginary_residue: g.imaginary_residue,
        });
    }
    let positive: Vec<&GreenRow> = rows.iter().filter(|r| r.t > 0.0).collect();
    let slope = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|r| r.t).collect();
        let ys: Vec<f64> = positive.iter().map(|r| r.sup).collect();
        power_law_fit(&xs, &ys).ok().map(|f| f.slope)
    } else {
        None
    };
    bundle.json("green.json", &json!({ "eps": eps, "v_max": vmax, "fitted_exponent": slope, "times": rows }))?;
    Ok(match slope {
        Some(s) => format!("fitted exponent {s}"),
        None => format!("{} Green's functions written", rows.len()),
    })
}

fn evolve(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let y0 = ctx.initial_ensemble(1)?.remove(0);
    let prop = Propagator::from_grid(&ctx.grid);
    let h0 = hamiltonian(&y0, &ctx.kernel);
    let lat = ctx.grid.lattice();
    let n = ctx.components();
    let mut w = bundle.writer("evolve.csv")?;
    let coords: Vec<String> = (1..=ctx.dim()).map(|i| format!("x_{i}")).collect();
    writeln!(w, "t,{},component,u,v", coords.join(","))?;
    let mut energies = Vec::new();
    let mut worst: f64 = 0.0;
    for &t in &ctx.config.times {
        let y = prop.evolve(&y0, t)?;
        let h = hamiltonian(&y, &ctx.kernel);
        worst = worst.max((h - h0).abs() / (1.0 + h0));
        energies.push(json!({ "t": t, "energy": h }));
        for x in 0..lat.len() {
            let c: Vec<String> = lat.minimal_image(x).iter().map(|v| v.to_string()).collect();
            for k in 0..n {
                writeln!(w, "{t},{},{k},{:.15e},{:.15e}", c.join(","), y.u[x * n + k], y.v[x * n + k])?;
            }
        }
    }
    w.flush()?;
    bundle.json("energy.json", &json!({ "initial": h0, "relative_drift": worst, "times": energies }))?;
    gate(worst <= ENERGY_TOLERANCE, || format!("energy drift {worst:e} exceeds {ENERGY_TOLERANCE:e}"))?;
    Ok(format!("energy drift {worst:e}"))
}

fn ensemble(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let offsets = ctx.offsets();
    let q0 = ctx.config.initial_density(ctx.dim(), ctx.components())?;
    let initial = ctx.initial_ensemble(ctx.config.ensemble)?;
    let prop = Propagator::from_grid(&ctx.grid);
    let mut w = bundle.writer("ensemble.csv")?;
    writeln!(w, "t,z,row,col,empirical,stderr,exact,z_score")?;
    let mut worst: f64 = 0.0;
    for &t in &ctx.config.times {
        let states = evolve_all(&prop, &initial, t)?;
        let emp = empirical_covariance(&states, &offsets)?;
        let exact = evolve_density(&q0, &ctx.grid, t)?;
        for (o, z) in offsets.iter().enumerate() {
            let theory = covariance_at(&exact, z);
            let est = &emp.covariances[o];
            for r in 0..theory.nrows() {
                for c in 0..theory.ncols() {
                    let score = (est.mean[(r, c)] - theory[(r, c)]) / est.stderr[(r, c)];
                    if score.is_finite() {
                        worst = worst.max(score.abs());
                    }
                    writeln!(
                        w,
                        "{t},{},{r},{c},{:.15e},{:.6e},{:.15e},{:.4}",
                        joined(z),
                        est.mean[(r, c)],
                        est.stderr[(r, c)],
                        theory[(r, c)],
                        score
                    )?;
                }
            }
        }
    }
    w.flush()?;
    gate(worst < ENSEMBLE_SIGMA, || format!("ensemble covariance off by {worst:.2} sigma"))?;
    Ok(format!("worst covariance deviation {worst:.2} sigma"))
}

fn limit(ctx: &mut Context, bundle: &mut Bundle) -> Step<String> {
    let offsets = ctx.offsets();
    let q0 = ctx.config.initial_density(ctx.dim(), ctx.components())?;
    ctx.conditions.push(check_es(&ctx.grid, &q0)?);
    let lim = ctx.limit(&q0)?;
    let q_inf = covariance_from_density(&lim.density, &offsets);
    let mut rows = Vec::new();
    for &t in &ctx.config.times {
        let qt = evolve_density(&q0, &ctx.grid, t)?;
        rows.extend(convergence_rows(t, &offsets, &covariance_from_density(&qt, &offsets), &q_inf));
    }
    let mut w = bundle.writer("convergence.csv")?;
    write_convergence_csv(&rows, &mut w)?;
    w.flush()?;
    bundle.json(
        "limit.json",
        &json!({
            "excluded_fraction": lim.excluded_fraction(),
            "c0_fraction": lim.c0_fraction,
            "q_inf": q_inf,
        }),
    )?;
    let mut w = bundle.writer("limit_density.json")?;
    serde_json::to_writer(&mut w, &lim.density.to_document()).map_err(|e| UsageError(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(format!("limit computed, excluded fraction {}", lim.excluded_fraction()))
}

fn gibbs(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let t1 = match ctx.config.measure {
        MeasureSpec::White { t0, t1 } if t0 == 0.0 => t1,
        _ => return Err(UsageError("gibbs needs a white-noise measure with T0 = 0".into()).into()),
    };
    let offsets = ctx.offsets();
    let gib = gibbs_density(t1, &ctx.grid)?;
    let initial = ctx.initial_ensemble(ctx.config.ensemble)?;
    let prop = Propagator::from_grid(&ctx.grid);
    let n = ctx.components();
    let mut w = bundle.writer("gibbs.csv")?;
    writeln!(w, "t,z,row,col,empirical,stderr,gibbs,sigma_gap")?;
    let mut worst: f64 = 0.0;
    for &t in &ctx.config.times {
        let states = evolve_all(&prop, &initial, t)?;
        let emp = empirical_covariance(&states, &offsets)?;
        for (o, z) in offsets.iter().enumerate() {
            let theory = covariance_at(&gib.density, z);
            let est = &emp.covariances[o];
            for r in 0..2 * n {
                for c in 0..2 * n {
                    // u-u and v-v blocks carry the Gibbs prediction
                    if (r < n) != (c < n) {
                        continue;
                    }
                    let gap = (est.mean[(r, c)] - theory[(r, c)]) / est.stderr[(r, c)];
                    if gap.is_finite() {
                        worst = worst.max(gap.abs());
                    } else if est.mean[(r, c)] != theory[(r, c)] {
                        worst = f64::INFINITY;
                    }
                    writeln!(
                        w,
                        "{t},{},{r},{c},{:.15e},{:.6e},{:.15e},{:.4}",
                        joined(z),
                        est.mean[(r, c)],
                        est.stderr[(r, c)],
                        theory[(r, c)],
                        gap
                    )?;
                }
            }
        }
    }
    w.flush()?;
    gate(worst < GIBBS_SIGMA, || format!("empirical covariance off the Gibbs density by {worst:.2} sigma"))?;
    Ok(format!("empirical covariance within {worst:.2} sigma of the Gibbs density"))
}

fn clt(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let q0 = ctx.config.initial_density(ctx.dim(), ctx.components())?;
    let lim = ctx.limit(&q0)?;
    let psi = TestFunction::full_delta(ctx.dim(), ctx.components());
    let initial = ctx.initial_ensemble(ctx.config.ensemble)?;
    let prop = Propagator::from_grid(&ctx.grid);
    let mut cf_out = bundle.writer("clt.csv")?;
    writeln!(cf_out, "t,lambda,empirical_re,empirical_im,theoretical,gap,sigma")?;
    let mut moments = Vec::new();
    let mut failures = Vec::new();
    for &t in &ctx.config.times {
        let states = evolve_all(&prop, &initial, t)?;
        let samples = linear_functional_samples(&states, &psi)?;
        let cf = characteristic_functional(&samples, &lim.density, &psi)?;
        for p in &cf.points {
            writeln!(
                cf_out,
                "{t},{},{:.12e},{:.12e},{:.12e},{:.6e},{:.6e}",
                p.lambda, p.empirical_re, p.empirical_im, p.theoretical, p.gap, p.sigma
            )?;
        }
        let m = gaussianity_report(&samples)?;
        if t > 0.0 && !(cf.within(CLT_SIGMA, CLT_SLACK) && m.within(MOMENT_LIMIT)) {
            failures.push(t);
        }
        moments.push(json!({ "t": t, "quadratic_form": cf.quadratic_form, "moments": m }));
    }
    cf_out.flush()?;
    bundle.json("moments.json", &moments)?;
    gate(failures.is_empty(), || format!("non-Gaussian at t = {failures:?}"))?;
    Ok("characteristic functional and moments Gaussian".into())
}

fn mixing(ctx: &Context, bundle: &mut Bundle) -> Step<String> {
    let q0 = ctx.config.initial_density(ctx.dim(), ctx.components())?;
    let lim = ctx.limit(&q0)?;
    let psi = TestFunction::full_delta(ctx.dim(), ctx.components());
    let mut w = bundle.writer("mixing.csv")?;
    writeln!(w, "t,value")?;
    let mut values = Vec::new();
    for &t in &ctx.config.times {
        let v = mixing_integral(&lim, &ctx.grid, &psi, &psi, t)?;
        writeln!(w, "{t},{v:.15e}")?;
        values.push((t, v));
    }
    w.flush()?;
    let positive: Vec<(f64, f64)> = values.iter().copied().filter(|(t, _)| *t > 0.0).collect();
    let fit = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = positive.iter().map(|p| p.1.abs()).collect();
        power_law_fit(&xs, &ys).ok()
    } else {
        None
    };
    let at_zero = values.iter().find(|(t, _)| *t == 0.0).map(|p| p.1.abs());
    let last = values.iter().copied().max_by(|a, b| a.0.total_cmp(&b.0)).map(|p| p.1.abs());
    let ratio = match (at_zero, last) {
        (Some(z), Some(l)) if z > 0.0 => Some(l / z),
        _ => None,
    };
    bundle.json("mixing.json", &json!({ "fitted_exponent": fit.map(|f| f.slope), "ratio_last_to_zero": ratio }))?;
    if let (Some(f), Some(r)) = (fit, ratio) {
        gate(f.slope <= MIXING_EXPONENT && r < MIXING_RATIO, || {
            format!("mixing exponent {} and ratio {r} miss the gate", f.slope)
        })?;
        return Ok(format!("mixing exponent {}, ratio {r}", f.slope));
    }
    Ok("mixing integrals written".into())
}

fn report(ctx: &mut Context, bundle: &mut Bundle) -> Step<String> {
    let q0 = ctx.config.initial_density(ctx.dim(), ctx.components())?;
    let es = check_es(&ctx.grid, &q0)?;
    ctx.conditions.push(es);
    let summary = json!({
        "v_max": ctx.grid.max_group_velocity(),
        "critical": {
            "c0": ctx.scan.fraction_c0,
            "crossing": ctx.scan.fraction_crossing,
            "hess": ctx.scan.fraction_hess,
            "combined": ctx.scan.fraction_combined,
        },
        "verdicts": ctx.conditions.iter().map(|c| json!({ "condition": c.condition, "verdict": c.verdict })).collect::<Vec<_>>(),
    });
    bundle.json("report.json", &summary)?;
    let failing: Vec<String> = ctx
        .conditions
        .iter()
        .filter(|c| c.verdict != Verdict::Pass)
        .map(|c| format!("{:?} {}", c.condition, c.verdict))
        .collect();
    if !failing.is_empty() && !ctx.config.override_conditions {
        return Err(Failure::Condition(failing.join(", ")));
    }
    Ok("all conditions pass".into())
}
