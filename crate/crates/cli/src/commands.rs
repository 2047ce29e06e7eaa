use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context};

use wkam::aubry::{
    aubry_set, backward_chain, barrier_slice, calibration_check, chain_path, discount_limit_candidate, energy_check,
    viscosity_residual, Barrier, CalibrationOptions,
};
use wkam::geometry::{Lagrangian, Point, Potential, MAX_DIM};
use wkam::grid::{Grid, GridFunction};
use wkam::homogenize::{homogenize, rows_to_csv};
use wkam::mather::{
    beta_table, build_lp, effective_hamiltonian, legendre_from_table, solve_lp, spatial_marginal, BetaRow, PhaseGrid,
    SemigroupSide, TestBasis,
};
use wkam::semigroup::{
    domination_defect, growth_condition, lo_long_time, solve_critical, solve_discounted, vanishing_discount, CriticalResult,
    DiscountedResult, HistoryRow,
};
use wkam::tonelli::{build_kernel_cached, cc_distance, kernel_cache_path, minimize_endpoint, KernelTable};

use crate::run::{sha256_hex, Run};

struct Setup {
    lag: Lagrangian,
    grid: Grid,
}

fn setup(run: &Run) -> anyhow::Result<Setup> {
    let lag = run.config.lagrangian()?;
    let grid = run.config.grid_for(&lag)?;
    Ok(Setup { lag, grid })
}

fn kernel(run: &mut Run, s: &Setup, lambda: f64) -> anyhow::Result<KernelTable> {
    std::fs::create_dir_all(&run.cache_dir).with_context(|| format!("creating cache {}", run.cache_dir.display()))?;
    let (table, hit) = build_kernel_cached(&s.lag, &s.grid, run.config.delta, lambda, &run.config.kernel, &run.cache_dir)?;
    let key = if lambda == 0.0 { "kernel_cache_hit".to_string() } else { format!("kernel_cache_hit_lambda_{lambda}") };
    run.headline(&key, hit);
    Ok(table)
}

fn critical(run: &mut Run, k: &KernelTable) -> anyhow::Result<CriticalResult> {
    let cfg = &run.config;
    let res = solve_critical(k, cfg.tolerance, cfg.max_iters, cfg.params.anchor)?;
    run.headline("c_estimate", res.c_estimate);
    run.headline("c_bracket", [res.c_lower, res.c_upper]);
    run.headline("fixed_point_residual", res.fixed_point_residual);
    run.headline("iterations", res.iterations);
    Ok(res)
}

fn point(v: &[f64], dim: usize, what: &str) -> anyhow::Result<Point> {
    if v.len() != dim {
        bail!("params.{what} needs {dim} coordinates, got {}", v.len());
    }
    let mut p = [0.0; MAX_DIM];
    p[..dim].copy_from_slice(v);
    Ok(p)
}

fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,drift,sup_change\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.drift, r.sup_change);
    }
    s
}

fn phase(run: &Run, grid: Grid) -> anyhow::Result<(PhaseGrid, TestBasis)> {
    let p = &run.config.params;
    Ok((PhaseGrid::new(grid, p.v_max, p.per_axis)?, TestBasis::for_space(&grid, p.k_max)?))
}

fn beta_csv(table: &[BetaRow]) -> String {
    let rank = table.first().map_or(0, |r| r.h.len());
    let mut s = String::new();
    for i in 1..=rank {
        let _ = write!(s, "h{i},");
    }
    s.push_str("value,certificate\n");
    for r in table {
        for h in &r.h {
            let _ = write!(s, "{h},");
        }
        let _ = writeln!(s, "{},{}", r.value, r.certificate);
    }
    s
}

pub fn cc_dist(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let space = s.lag.space();
    let p = &run.config.params;
    let (x, y) = (point(&p.from, space.dim(), "from")?, point(&p.to, space.dim(), "to")?);
    let d = cc_distance(space, &x, &y, &p.minimize)?;
    let path = minimize_endpoint(&Lagrangian::free(space), &x, &y, 1.0, 0.0, &p.minimize)?;
    run.write("cc-dist-path.csv", &path.path.to_csv(space))?;
    run.headline("distance", d);
    run.headline("converged", path.converged);
    Ok(())
}

pub fn minimal_action(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let space = s.lag.space();
    let p = run.config.params.clone();
    let (x, y) = (point(&p.from, space.dim(), "from")?, point(&p.to, space.dim(), "to")?);
    let res = minimize_endpoint(&s.lag, &x, &y, p.duration, p.lambda, &p.minimize)?;
    run.write("minimal-action-path.csv", &res.path.to_csv(space))?;
    run.headline("action", res.action_value);
    run.headline("endpoint_error", res.endpoint_error);
    run.headline("stationarity", res.stationarity_norm);
    run.headline("converged", res.converged);
    Ok(())
}

pub fn kernel_build(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let lambda = run.config.params.lambda;
    let k = kernel(run, &s, lambda)?;
    let path = kernel_cache_path(&run.cache_dir, &k.header.config_hash);
    let digest = sha256_hex(&std::fs::read(&path)?);
    run.external_output(&path);
    run.headline("pairs", k.pair_count());
    run.headline("failures", k.failures);
    run.headline("kernel_hash", &k.header.config_hash);
    run.headline("kernel_sha256", digest);
    run.headline("v_max", k.header.v_max);
    run.headline("radius", k.header.radius);
    Ok(())
}

pub fn critical_cmd(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let k = kernel(run, &s, 0.0)?;
    let res = critical(run, &k)?;
    run.write("critical-u.csv", &res.u.to_csv())?;
    run.write("critical-history.csv", &history_csv(&res.history))?;
    let summary = serde_json::json!({
        "c_estimate": res.c_estimate,
        "residual": res.fixed_point_residual,
        "iterations": res.iterations,
        "config_hash": run.config_hash,
    });
    run.write_json("critical-summary.json", &summary)?;
    run.headline("domination_defect", domination_defect(&k, &res.u, res.c_estimate)?);
    Ok(())
}

fn discounted_all(run: &mut Run, s: &Setup) -> anyhow::Result<Vec<DiscountedResult>> {
    if run.config.lambdas.is_empty() {
        bail!(wkam::Error::InvalidInput("`lambdas` is empty".into()));
    }
    let mut out = Vec::new();
    for lambda in run.config.lambdas.clone() {
        let k = kernel(run, s, lambda)?;
        let res = solve_discounted(&k, run.config.tolerance, run.config.max_iters)?;
        run.write(&format!("discounted-lambda-{lambda}.csv"), &res.u.to_csv())?;
        out.push(res);
    }
    Ok(out)
}

pub fn discounted(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let sols = discounted_all(run, &s)?;
    let mut table = String::from("lambda,min_lambda_u,max_lambda_u,residual,iterations\n");
    for r in &sols {
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            r.lambda,
            r.lambda * r.u.min(),
            r.lambda * r.u.max(),
            r.contraction_residual,
            r.iterations
        );
    }
    run.write("discounted.csv", &table)?;
    // bounds min L ≤ λu ≤ A(0)
    let lower = s.lag.min_value();
    let upper = -s.lag.potential().min_value();
    run.headline("bound_lower", lower);
    run.headline("bound_upper", upper);
    let excess = sols
        .iter()
        .map(|r| (lower - r.lambda * r.u.min()).max(r.lambda * r.u.max() - upper))
        .fold(f64::NEG_INFINITY, f64::max);
    run.headline("worst_bound_excess", excess);
    Ok(())
}

pub fn vanishing(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let sols = discounted_all(run, &s)?;
    let k0 = kernel(run, &s, 0.0)?;
    let crit = critical(run, &k0)?;
    let candidate = if run.config.params.candidate {
        let (phase, basis) = phase(run, s.grid)?;
        let sol = solve_lp(&build_lp(&s.lag, &phase, &basis, None)?, &phase)?;
        let marginal = spatial_marginal(&phase, &sol.weights);
        let mu: Vec<(usize, f64)> = marginal
            .values
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 1e-12)
            .map(|(i, w)| (i, *w))
            .collect();
        let barrier = Barrier::new(&k0, &crit, None)?;
        let cand = discount_limit_candidate(&barrier, &[mu])?;
        run.write("vanishing-candidate.csv", &cand.to_csv())?;
        run.headline("lp_value", sol.objective);
        Some(cand)
    } else {
        None
    };
    let rec = vanishing_discount(&sols, crit.c_estimate, candidate.as_ref())?;
    let mut table = String::from("lambda,sup_difference,candidate_distance\n");
    for (i, l) in rec.lambdas.iter().enumerate() {
        let diff = if i == 0 { f64::NAN } else { rec.cauchy[i - 1] };
        let cd = rec.candidate_distance.as_ref().map_or(f64::NAN, |v| v[i]);
        let _ = writeln!(table, "{l},{diff},{cd}");
    }
    run.write("vanishing.csv", &table)?;
    run.headline("sup_differences", &rec.cauchy);
    run.headline("decreasing", rec.cauchy.windows(2).all(|w| w[1] < w[0]));
    if let Some(d) = &rec.candidate_distance {
        run.headline("candidate_distance", d.last());
    }
    Ok(())
}

pub fn lo_evolve(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let p = run.config.params.clone();
    let k = kernel(run, &s, 0.0)?;
    let u0 = if p.initial.is_empty() {
        GridFunction::random_trig(s.grid, 2, 0.2, run.config.seed)
    } else {
        let f = Potential::new(s.lag.space(), p.initial.clone())?;
        GridFunction::from_fn(s.grid, |x| f.value(x))
    };
    let crit = match p.c {
        Some(c) if !p.predict => {
            run.headline("c_estimate", c);
            None
        }
        _ => Some(critical(run, &k)?),
    };
    let c = p.c.or(crit.as_ref().map(|r| r.c_estimate)).expect("c is known");
    let predicted = match (&crit, p.predict) {
        (Some(cr), true) => {
            let barrier = Barrier::new(&k, cr, None)?;
            let rows: Vec<GridFunction> = (0..s.grid.len()).map(|z| barrier.row(z)).collect();
            let values = (0..s.grid.len())
                .map(|x| (0..s.grid.len()).map(|z| u0.values[z] + rows[z].values[x]).fold(f64::INFINITY, f64::min))
                .collect();
            Some(GridFunction::new(s.grid, values)?)
        }
        _ => None,
    };
    let rec = lo_long_time(&k, &u0, c, p.t, run.config.tolerance, predicted.as_ref())?;
    run.write("lo-evolve-initial.csv", &u0.to_csv())?;
    run.write("lo-evolve-limit.csv", &rec.limit.to_csv())?;
    let mut hist = String::from("time,sup_change\n");
    for (t, d) in rec.times.iter().zip(&rec.sup_changes) {
        let _ = writeln!(hist, "{t},{d}");
    }
    run.write("lo-evolve-history.csv", &hist)?;
    let growth = growth_condition(&s.lag, k.header.v_max, 21);
    run.headline("converged", rec.converged);
    run.headline("final_time", rec.times.last());
    run.headline("final_sup_change", rec.sup_changes.last());
    run.headline("max_decrease", rec.max_decrease);
    run.headline("distance_to_prediction", rec.distance_to_prediction);
    run.headline("growth_condition", growth);
    Ok(())
}

pub fn barrier(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let p = run.config.params.clone();
    if p.source >= s.grid.len() {
        bail!(wkam::Error::InvalidInput(format!("source {} outside grid of {} nodes", p.source, s.grid.len())));
    }
    let k = kernel(run, &s, 0.0)?;
    let crit = critical(run, &k)?;
    let b = Barrier::new(&k, &crit, None)?;
    run.write(&format!("barrier-row-{}.csv", p.source), &b.row(p.source).to_csv())?;
    let (mane, times) = b.mane_row(p.source);
    let mut csv = String::new();
    for (i, line) in mane.to_csv().lines().enumerate() {
        if i == 0 {
            let _ = writeln!(csv, "{line},time");
        } else {
            let _ = writeln!(csv, "{line},{}", times[i - 1]);
        }
    }
    run.write(&format!("mane-row-{}.csv", p.source), &csv)?;
    if let Some([t0, t1]) = p.window {
        let slice = barrier_slice(&k, crit.c_estimate, p.source, t0, t1, run.config.tolerance.max(1e-8))?;
        run.write(&format!("barrier-slice-{}.csv", p.source), &slice.values.to_csv())?;
        run.headline("slice_oscillation", slice.oscillation);
        run.headline("slice_stabilized", slice.stabilized);
        run.headline("slice_vs_barrier", slice.values.sup_distance(&b.row(p.source))?);
    }
    run.headline("tol_aubry", b.tol());
    run.headline("critical_classes", b.classes().len());
    Ok(())
}

pub fn aubry(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let k = kernel(run, &s, 0.0)?;
    let crit = critical(run, &k)?;
    let b = Barrier::new(&k, &crit, None)?;
    let mask = aubry_set(&b);
    run.write("aubry-mask.csv", &mask.to_csv())?;
    run.write("critical-u.csv", &crit.u.to_csv())?;
    run.headline("aubry_nodes", mask.nodes());
    run.headline("tol_aubry", mask.tol);
    Ok(())
}

pub fn check(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let p = run.config.params.clone();
    let path = p
        .function
        .clone()
        .ok_or_else(|| anyhow!(wkam::Error::InvalidInput("`params.function` is required".into())))?;
    let text = run.read_input(&path)?;
    let u = GridFunction::from_csv(s.grid, &text)?;
    let k = kernel(run, &s, 0.0)?;
    let c = match p.c {
        Some(c) => c,
        None => critical(run, &k)?.c_estimate,
    };
    let opts = CalibrationOptions {
        tol: run.config.tolerance.max(1e-8),
        chain_steps: p.chain_steps,
        sample_paths: p.sample_paths,
        seed: run.config.seed,
        ..CalibrationOptions::default()
    };
    let cal = calibration_check(&k, &s.lag, &u, c, &opts)?;
    let visc = viscosity_residual(&k, &u, c)?;
    let mut energy: f64 = 0.0;
    let stride = (s.grid.len() / 8).max(1);
    for start in (0..s.grid.len()).step_by(stride) {
        let (nodes, used) = backward_chain(&k, &u, start, p.chain_steps);
        if used.is_empty() {
            continue;
        }
        let path = chain_path(&k, &s.lag, &nodes, &used, &p.minimize)?;
        energy = energy.max(energy_check(&s.lag, &path, c));
    }
    let report = serde_json::json!({
        "c": c,
        "calibration": cal,
        "viscosity": visc,
        "chain_energy_defect": energy,
    });
    run.write_json("check.json", &report)?;
    run.headline("dominated", cal.dominated);
    run.headline("calibrated", cal.calibrated);
    run.headline("max_pair_defect", cal.max_pair_defect);
    run.headline("chain_energy_defect", energy);
    Ok(())
}

pub fn mather_lp(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let (phase, basis) = phase(run, s.grid)?;
    let rot = run.config.params.rotation.clone();
    let sol = solve_lp(&build_lp(&s.lag, &phase, &basis, rot.as_deref())?, &phase)?;
    let (dim, rank) = (s.lag.space().dim(), s.lag.space().rank());
    let mut csv = String::from("node");
    for i in 1..=dim {
        let _ = write!(csv, ",x{i}");
    }
    for i in 1..=rank {
        let _ = write!(csv, ",u{i}");
    }
    csv.push_str(",weight\n");
    for (kk, w) in sol.weights.iter().enumerate() {
        if *w <= 1e-12 {
            continue;
        }
        let (i, j) = phase.split(kk);
        let x = s.grid.point(i);
        let _ = write!(csv, "{i}");
        for v in &x[..dim] {
            let _ = write!(csv, ",{v}");
        }
        for v in &phase.controls[j][..rank] {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv, ",{w}");
    }
    run.write("mather-measure.csv", &csv)?;
    run.write("mather-marginal.csv", &spatial_marginal(&phase, &sol.weights).to_csv())?;
    run.headline("lp_value", sol.objective);
    run.headline("critical_value_from_lp", -sol.objective);
    run.headline("rotation", &sol.rotation);
    run.headline("min_reduced_cost", sol.min_reduced_cost);
    run.headline("simplex_iterations", sol.iterations);
    Ok(())
}

pub fn beta(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let (phase, basis) = phase(run, s.grid)?;
    let p = &run.config.params;
    let table = beta_table(&s.lag, &phase, &basis, p.h_max, p.h_per_axis)?;
    run.write("beta.csv", &beta_csv(&table))?;
    run.headline("rows", table.len());
    run.headline("min_value", table.iter().map(|r| r.value).fold(f64::INFINITY, f64::min));
    Ok(())
}

pub fn effective_h(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let (phase, basis) = phase(run, s.grid)?;
    let cfg = run.config.clone();
    if cfg.params.classes.is_empty() {
        bail!(wkam::Error::InvalidInput("`params.classes` is empty".into()));
    }
    let side = SemigroupSide {
        grid: s.grid,
        delta: cfg.delta,
        kernel: cfg.kernel.clone(),
        tol: cfg.tolerance,
        max_iters: cfg.max_iters,
    };
    let table = beta_table(&s.lag, &phase, &basis, cfg.params.h_max, cfg.params.h_per_axis)?;
    let rank = s.lag.space().rank();
    let mut csv = String::new();
    for i in 1..=rank {
        let _ = write!(csv, "p{i},");
    }
    csv.push_str("lp_value,semigroup_value,discrepancy,legendre_of_beta");
    for i in 1..=rank {
        let _ = write!(csv, ",rho{i}");
    }
    csv.push('\n');
    let mut worst: f64 = 0.0;
    let mut worst_dual: f64 = 0.0;
    for class in &cfg.params.classes {
        let eh = effective_hamiltonian(&s.lag, class, &phase, &basis, &side)?;
        let dual = legendre_from_table(&table, class);
        for v in class {
            let _ = write!(csv, "{v},");
        }
        let _ = write!(csv, "{},{},{},{dual}", eh.lp_value, eh.semigroup_value, eh.discrepancy);
        for r in &eh.lp_rotation {
            let _ = write!(csv, ",{r}");
        }
        csv.push('\n');
        worst = worst.max(eh.discrepancy);
        worst_dual = worst_dual.max((dual - eh.lp_value).abs());
    }
    run.write("effective-h.csv", &csv)?;
    run.write("beta.csv", &beta_csv(&table))?;
    run.headline("max_lp_semigroup_discrepancy", worst);
    run.headline("max_duality_gap", worst_dual);
    Ok(())
}

pub fn homogenize_cmd(run: &mut Run) -> anyhow::Result<()> {
    let s = setup(run)?;
    let k = kernel(run, &s, 0.0)?;
    let (phase, basis) = phase(run, s.grid)?;
    let p = run.config.params.clone();
    if p.probes.is_empty() {
        bail!(wkam::Error::InvalidInput("`params.probes` is empty".into()));
    }
    let table = beta_table(&s.lag, &phase, &basis, p.h_max, p.h_per_axis)?;
    let rows = homogenize(&k, &p.datum, &p.eps, &p.probes, &table, &p.homogenization)?;
    run.write("homogenize.csv", &rows_to_csv(&rows))?;
    let per_eps: Vec<(f64, f64)> = p
        .eps
        .iter()
        .map(|&e| (e, rows.iter().filter(|r| r.eps == e).map(|r| r.gap).fold(0.0, f64::max)))
        .collect();
    run.headline("max_gap_per_eps", per_eps);
    run.headline("truncated_rows", rows.iter().filter(|r| r.truncated).count());
    Ok(())
}
