use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{info, warn};
use nalgebra::Vector3;
use serde::Deserialize;
use serde_json::{json, Value};

use willmore_core::checks::{run_checks, Bound, CheckConfig};
use willmore_core::domain::{Domain, DomainSpec};
use willmore_core::reduced::{
    expansion, scan_landscape, solve_in_chart, trace_concentration_path, PathOptions, ScanOptions, SurfaceMesh,
};
use willmore_core::solver::{InitialGuess, SolverOptions};
use willmore_core::{Result, WillmoreError};

/// Small free-boundary Willmore disks in smooth domains.
#[derive(Parser, Debug)]
#[command(name = "willmore", version, about)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Domain: ball[:r], ellipsoid:a,b,c, half_space[:h], inline JSON or a JSON file.
    #[arg(long, global = true)]
    domain: Option<String>,
    /// Scale λ; a comma-separated list for `expand`, the largest λ for `trace`.
    #[arg(long, global = true)]
    lambda: Option<String>,
    /// Boundary point "x,y,z" (projected onto the boundary).
    #[arg(long, global = true, allow_hyphen_values = true)]
    a: Option<String>,
    /// Landscape mesh "NxM": N latitude intervals, M longitudes.
    #[arg(long, global = true)]
    mesh: Option<String>,
    /// Worker threads for scans (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Closed-form integrals, spectral identity, variation formulas, flat exactness.
    Check,
    /// Solve the constrained problem at one (a, λ).
    Solve,
    /// Scan W̄(·, λ) over a boundary mesh.
    Scan,
    /// Expansion of W̄(a, λ) in λ.
    Expand,
    /// Follow the critical point of W̄(·, λ) from a critical point of H^S.
    Trace,
}

#[derive(Deserialize, Debug, Default)]
#[serde(untagged)]
enum DomainField {
    #[default]
    Missing,
    Short(String),
    Spec(DomainSpec),
}

#[derive(Deserialize, Debug, Default)]
#[serde(untagged)]
enum LambdaField {
    #[default]
    Missing,
    One(f64),
    Many(Vec<f64>),
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, default)]
struct CheckSection {
    tolerance_scale: Option<f64>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, default)]
struct TraceSection {
    steps: Option<usize>,
    tol: Option<f64>,
}

/// JSON run configuration. Precedence: defaults < config file < command-line flags.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    domain: DomainField,
    lambda: LambdaField,
    a: Option<[f64; 3]>,
    mesh: Option<[usize; 2]>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    solver: SolverOptions,
    check: CheckSection,
    trace: TraceSection,
}

fn usage(msg: impl Into<String>) -> WillmoreError {
    WillmoreError::Config(msg.into())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad number '{t}' in {what}"))))
        .collect()
}

fn parse_mesh(s: &str) -> Result<[usize; 2]> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("mesh '{s}' is not of the form NxM")))?;
    let n = a.trim().parse().map_err(|_| usage(format!("bad mesh size '{s}'")))?;
    let m = b.trim().parse().map_err(|_| usage(format!("bad mesh size '{s}'")))?;
    Ok([n, m])
}

impl RunConfig {
    fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &cli.domain {
            cfg.domain = DomainField::Short(d.clone());
        }
        if let Some(l) = &cli.lambda {
            let v = parse_list(l, "--lambda")?;
            cfg.lambda = if v.len() == 1 { LambdaField::One(v[0]) } else { LambdaField::Many(v) };
        }
        if let Some(a) = &cli.a {
            let v = parse_list(a, "--a")?;
            if v.len() != 3 {
                return Err(usage("--a needs three comma-separated coordinates"));
            }
            cfg.a = Some([v[0], v[1], v[2]]);
        }
        if let Some(m) = &cli.mesh {
            cfg.mesh = Some(parse_mesh(m)?);
        }
        if cli.jobs.is_some() {
            cfg.jobs = cli.jobs;
        }
        if cli.out.is_some() {
            cfg.out = cli.out.clone();
        }
        if cfg.jobs == Some(0) {
            return Err(usage("--jobs must be at least 1"));
        }
        cfg.solver.validate()?;
        Ok(cfg)
    }

    fn domain(&self) -> Result<Arc<Domain>> {
        let spec = match &self.domain {
            DomainField::Missing => DomainSpec::unit_ball(),
            DomainField::Short(s) => DomainSpec::parse(s)?,
            DomainField::Spec(s) => s.clone(),
        };
        Domain::new(spec)
    }

    fn lambdas(&self) -> Vec<f64> {
        match &self.lambda {
            LambdaField::Missing => Vec::new(),
            LambdaField::One(l) => vec![*l],
            LambdaField::Many(v) => v.clone(),
        }
    }

    fn lambda(&self, default: f64) -> Result<f64> {
        let l = match self.lambdas().as_slice() {
            [] => default,
            [l] => *l,
            _ => return Err(usage("this command takes a single --lambda")),
        };
        if !(l > 0.0 && l.is_finite()) {
            return Err(usage(format!("lambda must be positive, got {l}")));
        }
        Ok(l)
    }

    fn point(&self, domain: &Domain) -> Result<Vector3<f64>> {
        let raw = match self.a {
            Some(a) => Vector3::from(a),
            None if domain.is_bounded() => domain.surface_point(0.0, 0.0)?,
            None => Vector3::zeros(),
        };
        let p = domain.project(&raw)?;
        if (p - raw).norm() > 1e-9 {
            warn!("a = {raw:?} projected to the boundary point {p:?}");
        }
        Ok(p)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

/// 17 significant digits.
fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "NaN".into()
    }
}

/// JSON with every float written to 17 significant digits; non-finite values become null.
fn write_json(v: &Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match v {
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => write!(out, "{i}").unwrap(),
            (_, Some(u)) => write!(out, "{u}").unwrap(),
            _ => out.push_str(&num(n.as_f64().unwrap())),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad);
                out.push_str("  ");
                write_json(item, indent + 1, out);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                write!(out, "{pad}  {}: ", Value::String(key.clone())).unwrap();
                write_json(item, indent + 1, out);
                out.push_str(if k + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad);
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

fn save_json(dir: &Path, name: &str, v: &Value) -> Result<PathBuf> {
    let mut s = String::new();
    write_json(v, 0, &mut s);
    s.push('\n');
    let path = dir.join(name);
    fs::write(&path, s)?;
    Ok(path)
}

fn save_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn vec3(v: &Vector3<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn cmd_check(cfg: &RunConfig) -> Result<bool> {
    let domain = cfg.domain()?;
    let a = cfg.point(&domain)?;
    let check = CheckConfig {
        lambda: cfg.lambda(0.1_f64.min(domain.lambda_max()))?,
        tolerance_scale: cfg.check.tolerance_scale.unwrap_or(1.0),
        solver: cfg.solver.clone(),
    };
    let checks = run_checks(&domain, &a, &check)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let rel = if c.bound == Bound::AtMost { "<=" } else { ">=" };
        println!(
            "{:<width$}  {:>24}  {rel} {:<10.3e} {}",
            c.name,
            num(c.value),
            c.limit,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let all = checks.iter().all(|c| c.pass);
    let dir = cfg.out_dir()?;
    let report = json!({
        "domain": domain.spec(),
        "a": vec3(&a),
        "lambda": check.lambda,
        "checks": checks,
        "all_pass": all,
    });
    save_json(&dir, "check.json", &report)?;
    Ok(all)
}

fn cmd_solve(cfg: &RunConfig) -> Result<bool> {
    let domain = cfg.domain()?;
    let a = cfg.point(&domain)?;
    let lambda = cfg.lambda(0.1)?;
    let chart = domain.chart(&a)?;
    let sol = solve_in_chart(&chart, lambda, &cfg.solver, &InitialGuess::default())?;
    let g = &sol.w.grid;
    let modes = sol.w.modes();
    let r = &sol.residual;
    let max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let report = json!({
        "domain": domain.spec(),
        "a": vec3(&a),
        "lambda": lambda,
        "converged": true,
        "iterations": sol.iterations,
        "energy": sol.energy,
        "alpha": sol.alpha,
        "beta": sol.beta,
        "residuals": {
            "interior_tau": sol.interior_tau,
            "natural_max": max(&r.bc_natural),
            "orthogonality_max": max(&r.bc_ortho),
            "area_defect": r.area_defect,
            "center_defect": [r.center_defect[0], r.center_defect[1]],
        },
        "grid": {
            "n_theta": g.n_theta(),
            "n_phi": g.n_phi(),
            "theta_nodes": g.theta_nodes(),
        },
        "w": {
            "max_abs": sol.w_max(),
            "modes_cos": modes.cos,
            "modes_sin": modes.sin,
            "values": sol.w.values,
        },
        "history": sol.history,
    });
    let path = save_json(&cfg.out_dir()?, "solution.json", &report)?;
    println!("W_bar = {}  alpha = {}  beta = ({}, {})", num(sol.energy), num(sol.alpha), num(sol.beta[0]), num(sol.beta[1]));
    println!("iterations {}, area defect {:.3e}; wrote {}", sol.iterations, r.area_defect, path.display());
    Ok(true)
}

fn cmd_scan(cfg: &RunConfig) -> Result<bool> {
    let domain = cfg.domain()?;
    let lambda = cfg.lambda(0.05)?;
    let [n_lat, n_lon] = cfg.mesh.unwrap_or([16, 32]);
    let mesh = SurfaceMesh::new(&domain, n_lat, n_lon)?;
    let opts = ScanOptions { solver: cfg.solver.clone(), jobs: cfg.jobs(), classify: true };
    info!("scanning {} points with {} jobs", mesh.len(), opts.jobs);
    let land = scan_landscape(&domain, lambda, &mesh, &opts)?;
    let mut csv = String::from("a_x,a_y,a_z,H_S,W_bar,grad_norm,converged\n");
    for s in &land.samples {
        let gn = (s.grad[0].powi(2) + s.grad[1].powi(2) + s.grad[2].powi(2)).sqrt();
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            num(s.a[0]),
            num(s.a[1]),
            num(s.a[2]),
            num(s.mean_curvature),
            s.energy.map(num).unwrap_or_else(|| "NaN".into()),
            num(gn),
            s.converged
        )
        .unwrap();
    }
    let dir = cfg.out_dir()?;
    save_text(&dir, "landscape.csv", &csv)?;
    let failed: Vec<Value> = land
        .samples
        .iter()
        .filter(|s| !s.converged)
        .map(|s| json!({"index": s.index, "a": s.a, "error": s.error}))
        .collect();
    let summary = json!({
        "domain": domain.spec(),
        "lambda": lambda,
        "mesh": [n_lat, n_lon],
        "points": mesh.len(),
        "failures": land.failures,
        "failed_points": failed,
        "spread": land.spread,
        "degenerate_landscape": land.degenerate,
        "rank_correlation_with_minus_H": land.rank_correlation,
        "min": land.min_index.map(|k| json!({"index": k, "a": land.samples[k].a, "W_bar": land.samples[k].energy})),
        "max": land.max_index.map(|k| json!({"index": k, "a": land.samples[k].a, "W_bar": land.samples[k].energy})),
        "critical_points": land.critical_points,
    });
    save_json(&dir, "landscape.json", &summary)?;
    println!(
        "{} points, {} failures, spread {}, rank correlation {}",
        mesh.len(),
        land.failures,
        num(land.spread),
        num(land.rank_correlation)
    );
    if land.degenerate {
        println!("degenerate landscape: W_bar is constant to {:.0e} relative", willmore_core::reduced::DEGENERATE_SPREAD);
    }
    println!("{} critical point candidates", land.critical_points.len());
    Ok(land.failures < mesh.len())
}

fn cmd_expand(cfg: &RunConfig) -> Result<bool> {
    let domain = cfg.domain()?;
    let a = cfg.point(&domain)?;
    let mut lambdas = cfg.lambdas();
    if lambdas.is_empty() {
        lambdas = vec![0.2, 0.1, 0.05];
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(usage("lambda values must be positive"));
    }
    let chart = domain.chart(&a)?;
    let rep = expansion(&chart, &lambdas, &cfg.solver)?;
    let mut csv = String::from("lambda,W_bar,slope,E,E_over_lambda\n");
    for r in &rep.rows {
        writeln!(csv, "{},{},{},{},{}", num(r.lambda), num(r.energy), num(r.slope), num(r.defect), num(r.ratio)).unwrap();
    }
    let dir = cfg.out_dir()?;
    save_text(&dir, "expansion.csv", &csv)?;
    let summary = json!({
        "domain": domain.spec(),
        "a": vec3(&a),
        "mean_curvature": rep.mean_curvature,
        "first_order_coefficient": -std::f64::consts::PI * rep.mean_curvature,
        "rows": rep.rows,
        "fitted_c": rep.fitted_c,
        "c_variation": rep.c_variation,
        "extrapolated_slope": rep.extrapolated_slope,
    });
    save_json(&dir, "expansion.json", &summary)?;
    println!("{:>24} {:>24} {:>24} {:>24}", "lambda", "W_bar", "(W_bar-2pi)/lambda", "E(lambda)");
    for r in &rep.rows {
        println!("{:>24} {:>24} {:>24} {:>24}", num(r.lambda), num(r.energy), num(r.slope), num(r.defect));
    }
    println!("-pi H^S = {}, fitted C = {}, C variation = {:.3}", num(-std::f64::consts::PI * rep.mean_curvature), num(rep.fitted_c), rep.c_variation);
    if let Some(s) = rep.extrapolated_slope {
        println!("extrapolated slope = {}", num(s));
    }
    Ok(true)
}

fn cmd_trace(cfg: &RunConfig) -> Result<bool> {
    let domain = cfg.domain()?;
    let a0 = cfg.point(&domain)?;
    let lambda_max = cfg.lambda(0.1_f64.min(domain.lambda_max()))?;
    let mut opts = PathOptions { solver: cfg.solver.clone(), ..Default::default() };
    if let Some(s) = cfg.trace.steps {
        opts.steps = s;
    }
    if let Some(t) = cfg.trace.tol {
        opts.tol = t;
    }
    let path = trace_concentration_path(&domain, &a0, lambda_max, &opts)?;
    let mut csv = String::from("lambda,a_x,a_y,a_z,grad_check\n");
    for p in &path.points {
        writeln!(csv, "{},{},{},{},{}", num(p.lambda), num(p.a[0]), num(p.a[1]), num(p.a[2]), num(p.grad_check)).unwrap();
    }
    let dir = cfg.out_dir()?;
    save_text(&dir, "path.csv", &csv)?;
    save_json(&dir, "path.json", &json!({ "domain": domain.spec(), "path": path }))?;
    println!(
        "{} points, limit ({}, {}, {}), max deviation {}",
        path.points.len(),
        num(path.limit[0]),
        num(path.limit[1]),
        num(path.limit[2]),
        num(path.max_deviation)
    );
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = RunConfig::load(cli)?;
    match cli.command {
        Command::Check => cmd_check(&cfg),
        Command::Solve => cmd_solve(&cfg),
        Command::Scan => cmd_scan(&cfg),
        Command::Expand => cmd_expand(&cfg),
        Command::Trace => cmd_trace(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WILLMORE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
