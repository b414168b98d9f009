//! Command-line front end: scenario loading, command dispatch, CSV
//! artifact emission, and exit-code mapping.
//!
//! Exit codes: 0 when every check passes, 2 when a verification identity
//! exceeds its tolerance, 1 for configuration and resource problems.
//! Thread count is controlled by the environment (RAYON_NUM_THREADS), never
//! by a flag, and all outputs are byte-identical across thread counts.

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::backward::{
    solve_backward_adjoint, solve_backward_fixedpoint, solve_backward_regression,
    solve_backward_tree, BackwardData, BackwardSolution, FixedPointOptions, RegressionOptions,
    RegressionOutcome,
};
use crate::duality::{duality_rows_to_csv, run_duality_instance, DualityRow};
use crate::error::{Error, Result};
use crate::estimates::{
    backward_ratio_study, forward_ratio_study, growth_factor, low_mode_backward_data,
    low_mode_forward_data, refinement_rows_to_csv, space_refinement_study, study_rows_to_csv,
    study_summary_to_csv, time_refinement_study, RatioStudy, RefinementRow, RegularityOffset,
};
use crate::forward::{ForwardData, ForwardSolution, Stepper};
use crate::grid::{check_coercivity, spatial_norm, CoefficientSet, SpatialGrid, SpatialNorm};
use crate::norms::expected_norm_sq;
use crate::scenario::{DataFamily, NoiseModel, Scenario};
use crate::semigroup::{semigroup_rows_to_csv, verify_semigroup, SemigroupRow};
use crate::tree::{derive_seed, ScenarioTree};

const DUALITY_INSTANCES: usize = 50;
const ESTIMATE_SAMPLES: usize = 50;
const GROWTH_BAND: f64 = 1.10;
const SPACE_ORDER_BAND: (f64, f64) = (1.7, 2.3);
const TIME_ORDER_BAND: (f64, f64) = (0.8, 1.2);

#[derive(Parser)]
#[command(
    name = "bspde",
    version,
    about = "Scenario-tree solvers and verifiers for forward and backward \
             stochastic heat-type equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file: line-oriented `key = value` with sections.
    #[arg(long)]
    scenario: PathBuf,
    /// Directory for CSV artifacts; without it only summaries are printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed from the scenario file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Route {
    Tree,
    Adjoint,
    FixedPoint,
    Regression,
}

impl Route {
    fn label(self) -> &'static str {
        match self {
            Route::Tree => "tree",
            Route::Adjoint => "adjoint",
            Route::FixedPoint => "fixed-point",
            Route::Regression => "regression",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the pointwise parabolicity margin of the coefficients.
    CheckCoercivity {
        #[command(flatten)]
        common: Common,
    },
    /// March the forward equation over the scenario tree.
    SolveForward {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the backward pair by the chosen route.
    SolveBackward {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Route::Tree)]
        route: Route,
    },
    /// Check the pairing identity between forward and backward solutions.
    VerifyDuality {
        #[command(flatten)]
        common: Common,
    },
    /// Check restart and truncation consistency over time subintervals.
    VerifySemigroup {
        #[command(flatten)]
        common: Common,
        /// Restriction start time; must lie on the time grid.
        #[arg(long)]
        theta: Option<f64>,
        /// Restriction end time; must lie on the time grid.
        #[arg(long)]
        s: Option<f64>,
    },
    /// Ratio studies of solution norms against data norms across levels.
    ProbeEstimates {
        #[command(flatten)]
        common: Common,
        /// Grid levels, doubling M each time.
        #[arg(long, default_value_t = 2)]
        levels: usize,
    },
    /// Deterministic heat-flow refinement tables.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
}

/// Parse the process arguments, run the selected command, and return the
/// exit code for the process.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::CheckCoercivity { common } => cmd_check_coercivity(&common),
        Command::SolveForward { common } => cmd_solve_forward(&common),
        Command::SolveBackward { common, route } => cmd_solve_backward(&common, route),
        Command::VerifyDuality { common } => cmd_verify_duality(&common),
        Command::VerifySemigroup { common, theta, s } => cmd_verify_semigroup(&common, theta, s),
        Command::ProbeEstimates { common, levels } => cmd_probe_estimates(&common, levels),
        Command::Convergence { common, levels } => cmd_convergence(&common, levels),
    }
}

struct TreeRun {
    scenario: Scenario,
    grid: SpatialGrid,
    tree: ScenarioTree,
    coeffs: CoefficientSet,
}

fn tree_run(scenario: Scenario, command: &str) -> Result<TreeRun> {
    if scenario.model != NoiseModel::Tree {
        return Err(Error::Config(format!(
            "{command} walks the scenario tree; scenario `{}` uses model = montecarlo",
            scenario.name
        )));
    }
    let grid = scenario.grid()?;
    let tree = scenario.tree()?;
    let coeffs = scenario.coefficients(&grid)?;
    Ok(TreeRun {
        scenario,
        grid,
        tree,
        coeffs,
    })
}

fn load_tree_run(common: &Common, command: &str) -> Result<TreeRun> {
    tree_run(Scenario::load(&common.scenario)?, command)
}

fn resolve_seed(scenario: &Scenario, flag: Option<u64>) -> Result<u64> {
    flag.or(scenario.seed).ok_or_else(|| {
        Error::Config(
            "this command draws random data; set `seed =` in the scenario or pass --seed"
                .to_string(),
        )
    })
}

fn coercivity_gate(name: &str, coeffs: &CoefficientSet) -> Result<()> {
    let report = check_coercivity(coeffs);
    if report.pass {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "coefficients of `{name}` fail the parabolicity floor: margin = {} at node {}, \
             time slice {} (delta = {})",
            report.margin, report.argmin.0, report.argmin.1, report.delta
        )))
    }
}

fn write_artifact(out: &Option<PathBuf>, file: &str, content: &str) -> Result<()> {
    let Some(dir) = out else {
        return Ok(());
    };
    fs::create_dir_all(dir)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(file);
    fs::write(&path, content)
        .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

fn forward_data_for(run: &TreeRun, seed: u64) -> ForwardData {
    match run.scenario.data_family {
        DataFamily::Random => ForwardData::random(&run.tree, run.grid.m, 0, seed),
        DataFamily::LowMode => low_mode_forward_data(&run.tree, &run.grid, seed),
    }
}

fn backward_data_for(run: &TreeRun, seed: u64) -> BackwardData {
    match run.scenario.data_family {
        DataFamily::Random => BackwardData::random(&run.tree, run.grid.m, 0, seed),
        DataFamily::LowMode => low_mode_backward_data(&run.tree, &run.grid, seed),
    }
}

/// Path view of a forward solution: one row per leaf history, step, and
/// interior node.
fn forward_solution_csv(tree: &ScenarioTree, solution: &ForwardSolution) -> String {
    let mut out = String::from("path_id,step,node_index,u\n");
    let field = &solution.field;
    for leaf in 0..tree.leaves() {
        for k in field.first_step..=tree.time.steps {
            let v = tree.leaf_prefix(leaf, k);
            for (j, u) in field.node(k, v).iter().enumerate() {
                out.push_str(&format!("{leaf},{k},{j},{u}\n"));
            }
        }
    }
    out
}

/// Path view of a backward solution. The corrector columns are empty on
/// the terminal step, where no increment remains to correct against.
fn backward_solution_csv(tree: &ScenarioTree, solution: &BackwardSolution) -> String {
    let n = solution.chi.len();
    let mut out = String::from("path_id,step,node_index,p");
    for i in 1..=n {
        out.push_str(&format!(",chi_{i}"));
    }
    out.push('\n');
    let first = solution.p.first_step;
    for leaf in 0..tree.leaves() {
        for k in first..=tree.time.steps {
            let v = tree.leaf_prefix(leaf, k);
            let p = solution.p.node(k, v);
            for (j, value) in p.iter().enumerate() {
                out.push_str(&format!("{leaf},{k},{j},{value}"));
                for chi in &solution.chi {
                    if k < tree.time.steps {
                        out.push_str(&format!(",{}", chi.node(k, v)[j]));
                    } else {
                        out.push(',');
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

fn regression_csv(outcome: &RegressionOutcome) -> String {
    let mut out = String::from("quantity,node_index,value,stderr\n");
    for (j, (v, se)) in outcome.p0.iter().zip(&outcome.se_p0).enumerate() {
        out.push_str(&format!("p0,{j},{v},{se}\n"));
    }
    for (i, (chi, se_chi)) in outcome.chi0.iter().zip(&outcome.se_chi0).enumerate() {
        for (j, (v, se)) in chi.iter().zip(se_chi).enumerate() {
            out.push_str(&format!("chi_{}_0,{j},{v},{se}\n", i + 1));
        }
    }
    out
}

fn cmd_check_coercivity(common: &Common) -> Result<()> {
    let scenario = Scenario::load(&common.scenario)?;
    let grid = scenario.grid()?;
    let coeffs = scenario.coefficients(&grid)?;
    let report = check_coercivity(&coeffs);
    println!(
        "check-coercivity: {}: margin = {} at node {}, time slice {}, delta = {}: {}",
        scenario.name,
        report.margin,
        report.argmin.0,
        report.argmin.1,
        report.delta,
        if report.pass { "ok" } else { "violated" }
    );
    write_artifact(
        &common.out,
        "coercivity.csv",
        &format!(
            "scenario,margin,delta,argmin_node,argmin_slice,pass\n{},{},{},{},{},{}\n",
            scenario.name,
            report.margin,
            report.delta,
            report.argmin.0,
            report.argmin.1,
            report.pass
        ),
    )?;
    if report.pass {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "coefficients of `{}` fail the parabolicity floor: margin = {}",
            scenario.name, report.margin
        )))
    }
}

fn cmd_solve_forward(common: &Common) -> Result<()> {
    let run = load_tree_run(common, "solve-forward")?;
    coercivity_gate(&run.scenario.name, &run.coeffs)?;
    let seed = resolve_seed(&run.scenario, common.seed)?;
    let stepper = Stepper::new(&run.grid, &run.tree, &run.coeffs)?;
    let data = forward_data_for(&run, seed);
    let solution = stepper.run(&data)?;
    let terminal = expected_norm_sq(
        &run.tree,
        &run.grid,
        &solution.field,
        run.tree.time.steps,
        SpatialNorm::H0,
    )
    .sqrt();
    println!(
        "solve-forward: {}: {} steps over {} leaf histories, terminal mass norm = {}",
        run.scenario.name,
        run.tree.time.steps,
        run.tree.leaves(),
        terminal
    );
    write_artifact(
        &common.out,
        "forward.csv",
        &forward_solution_csv(&run.tree, &solution),
    )
}

fn cmd_solve_backward(common: &Common, route: Route) -> Result<()> {
    let scenario = Scenario::load(&common.scenario)?;
    if route == Route::Regression {
        return cmd_solve_backward_regression(common, scenario);
    }
    let run = tree_run(scenario, "solve-backward")?;
    coercivity_gate(&run.scenario.name, &run.coeffs)?;
    let seed = resolve_seed(&run.scenario, common.seed)?;
    let stepper = Stepper::new(&run.grid, &run.tree, &run.coeffs)?;
    let data = backward_data_for(&run, seed);
    let (solution, note) = match route {
        Route::Tree => (solve_backward_tree(&stepper, &data)?, String::new()),
        Route::Adjoint => (solve_backward_adjoint(&stepper, &data)?, String::new()),
        Route::FixedPoint => {
            let (solution, report) =
                solve_backward_fixedpoint(&stepper, &data, FixedPointOptions::default())?;
            let fallback = if report.used_dense_fallback {
                ", via the dense fallback"
            } else {
                ""
            };
            (
                solution,
                format!(
                    ", {} sweeps, final update = {}{fallback}",
                    report.iterations, report.final_update
                ),
            )
        }
        Route::Regression => unreachable!("handled above"),
    };
    let initial =
        expected_norm_sq(&run.tree, &run.grid, &solution.p, 0, SpatialNorm::H0).sqrt();
    println!(
        "solve-backward ({}): {}: {} steps over {} leaf histories, initial mass norm = {}{}",
        route.label(),
        run.scenario.name,
        run.tree.time.steps,
        run.tree.leaves(),
        initial,
        note
    );
    write_artifact(
        &common.out,
        "backward.csv",
        &backward_solution_csv(&run.tree, &solution),
    )
}

fn cmd_solve_backward_regression(common: &Common, scenario: Scenario) -> Result<()> {
    if scenario.model != NoiseModel::MonteCarlo {
        return Err(Error::Config(format!(
            "route regression samples Gaussian paths; scenario `{}` must set model = montecarlo \
             and paths",
            scenario.name
        )));
    }
    let seed = resolve_seed(&scenario, common.seed)?;
    let grid = scenario.grid()?;
    let coeffs = scenario.coefficients(&grid)?;
    coercivity_gate(&scenario.name, &coeffs)?;

    let profile: Vec<f64> = (0..grid.m).map(|j| (PI * grid.x_hat(j)).sin()).collect();
    let wave: Vec<f64> = (0..grid.m)
        .map(|j| (2.0 * PI * grid.x_hat(j)).sin())
        .collect();
    let terminal = {
        let profile = profile.clone();
        move |w: &[f64]| -> Vec<f64> {
            let mut gain = 1.0 + 0.5 * w[0].tanh();
            if w.len() > 1 {
                gain += 0.25 * w[1].tanh();
            }
            profile.iter().map(|s| s * gain).collect()
        }
    };
    let steps_f = scenario.steps as f64;
    let xi = move |k: usize, w: &[f64]| -> Vec<f64> {
        let gain = (PI * k as f64 / steps_f).cos() * (1.0 + 0.5 * w[0].tanh());
        wave.iter().map(|s| s * gain).collect()
    };
    let outcome = solve_backward_regression(
        &grid,
        &coeffs,
        scenario.horizon,
        scenario.steps,
        scenario.noise_dim,
        &terminal,
        &xi,
        RegressionOptions {
            paths: scenario.paths,
            seed,
            ..RegressionOptions::default()
        },
    )?;
    for warning in &outcome.warnings {
        println!("note: {warning}");
    }
    let p0 = spatial_norm(&grid, &outcome.p0, SpatialNorm::H0);
    let worst_se = outcome
        .se_p0
        .iter()
        .chain(outcome.se_chi0.iter().flatten())
        .fold(0.0f64, |acc, se| acc.max(*se));
    println!(
        "solve-backward (regression): {}: {} paths, initial mass norm = {}, \
         largest bootstrap stderr = {}",
        scenario.name, outcome.paths, p0, worst_se
    );
    write_artifact(&common.out, "regression.csv", &regression_csv(&outcome))
}

fn cmd_verify_duality(common: &Common) -> Result<()> {
    let run = load_tree_run(common, "verify-duality")?;
    let seed = resolve_seed(&run.scenario, common.seed)?;
    let stepper = Stepper::new(&run.grid, &run.tree, &run.coeffs)?;
    let reports: Vec<Result<DualityRow>> = (0..DUALITY_INSTANCES)
        .into_par_iter()
        .map(|i| {
            let instance = derive_seed(seed, i as u64);
            let report = run_duality_instance(&stepper, 0, instance)?;
            Ok(DualityRow::new(&run.scenario.name, instance, &report))
        })
        .collect();
    let mut rows = Vec::with_capacity(DUALITY_INSTANCES);
    for report in reports {
        rows.push(report?);
    }
    let worst = rows.iter().fold(0.0f64, |acc, r| acc.max(r.rel_residual));
    let tol = run.scenario.tolerances.duality;
    let ok = worst <= tol;
    println!(
        "verify-duality: {}: {} instances, max relative residual = {:e} (tolerance {:e}): {}",
        run.scenario.name,
        rows.len(),
        worst,
        tol,
        if ok { "ok" } else { "FAIL" }
    );
    write_artifact(&common.out, "duality.csv", &duality_rows_to_csv(&rows))?;
    if ok {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "duality residual {worst:e} exceeds the tolerance {tol:e}"
        )))
    }
}

fn cmd_verify_semigroup(common: &Common, theta: Option<f64>, s: Option<f64>) -> Result<()> {
    let run = load_tree_run(common, "verify-semigroup")?;
    let seed = resolve_seed(&run.scenario, common.seed)?;
    let stepper = Stepper::new(&run.grid, &run.tree, &run.coeffs)?;
    let report = verify_semigroup(&stepper, &run.scenario.name, seed)?;
    let mut rows = report.rows;
    if theta.is_some() || s.is_some() {
        let theta_index = theta.map(|t| run.tree.time.index_of(t)).transpose()?;
        let s_index = s.map(|t| run.tree.time.index_of(t)).transpose()?;
        if let (Some(a), Some(b)) = (theta_index, s_index) {
            if a >= b {
                return Err(Error::Config(format!(
                    "theta (step {a}) must come strictly before s (step {b})"
                )));
            }
        }
        rows.retain(|row| {
            theta_index.map_or(true, |a| row.theta == a) && s_index.map_or(true, |b| row.s == b)
        });
        if rows.is_empty() {
            return Err(Error::Config(
                "no restart pair matches the requested theta and s".to_string(),
            ));
        }
    }
    let fold = |pick: &dyn Fn(&SemigroupRow) -> f64| rows.iter().map(pick).fold(0.0, f64::max);
    let worst_p = fold(&|r| r.res_p);
    let worst_p0 = fold(&|r| r.res_p0);
    let worst_chi = fold(&|r| r.res_chi.iter().copied().fold(0.0, f64::max));
    let worst_forward = fold(&|r| r.res_forward);
    let tol = run.scenario.tolerances.semigroup;
    let causality = run.scenario.tolerances.causality;
    let ok = worst_p <= tol && worst_p0 <= tol && worst_chi <= tol && worst_forward <= causality;
    println!(
        "verify-semigroup: {}: {} restart pair{}, worst residuals p = {:e}, p0 = {:e}, \
         chi = {:e}, forward = {:e} (tolerance {:e}, forward {:e}): {}",
        run.scenario.name,
        rows.len(),
        if rows.len() == 1 { "" } else { "s" },
        worst_p,
        worst_p0,
        worst_chi,
        worst_forward,
        tol,
        causality,
        if ok { "ok" } else { "FAIL" }
    );
    write_artifact(
        &common.out,
        "semigroup.csv",
        &semigroup_rows_to_csv(&rows, run.tree.noise_dim),
    )?;
    if ok {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "semigroup residuals (p = {worst_p:e}, p0 = {worst_p0:e}, chi = {worst_chi:e}, \
             forward = {worst_forward:e}) exceed the tolerances"
        )))
    }
}

fn probe_summary(name: &str, label: &str, studies: &[RatioStudy]) -> (bool, f64, String) {
    let mut worst_growth = 1.0f64;
    for pair in studies.windows(2) {
        worst_growth = worst_growth.max(growth_factor(&pair[0], &pair[1]));
    }
    let finest = studies.last().expect("at least two levels");
    let excluded: usize = studies.iter().map(|s| s.excluded).sum();
    let ok = worst_growth <= GROWTH_BAND;
    let mut line = format!(
        "probe-estimates: {name} {label}: finest max ratio = {}, worst growth = {} \
         (band {GROWTH_BAND})",
        finest.max_ratio(),
        worst_growth
    );
    if excluded > 0 {
        line.push_str(&format!(", {excluded} zero-data instances excluded"));
    }
    line.push_str(if ok { ": ok" } else { ": FAIL" });
    (ok, worst_growth, line)
}

fn cmd_probe_estimates(common: &Common, levels: usize) -> Result<()> {
    if levels < 2 {
        return Err(Error::Config(format!(
            "growth needs at least 2 levels, got {levels}"
        )));
    }
    let run = load_tree_run(common, "probe-estimates")?;
    coercivity_gate(&run.scenario.name, &run.coeffs)?;
    let seed = resolve_seed(&run.scenario, common.seed)?;

    let mut forward_low = Vec::with_capacity(levels);
    let mut forward_high = Vec::with_capacity(levels);
    let mut backward = Vec::with_capacity(levels);
    let mut high_applies = true;
    for level in 0..levels {
        let m = run.scenario.m << level;
        let grid = SpatialGrid::new(run.scenario.left, run.scenario.right, m)?;
        let coeffs = CoefficientSet::sample(
            &grid,
            run.scenario.steps,
            run.scenario.horizon,
            &run.scenario.family,
        )?;
        let stepper = Stepper::new(&grid, &run.tree, &coeffs)?;
        forward_low.push(forward_ratio_study(
            &stepper,
            RegularityOffset::MinusOne,
            ESTIMATE_SAMPLES,
            seed,
        )?);
        high_applies = high_applies && coeffs.beta_vanishes_near_boundary(2);
        if high_applies {
            forward_high.push(forward_ratio_study(
                &stepper,
                RegularityOffset::Zero,
                ESTIMATE_SAMPLES,
                seed,
            )?);
        }
        backward.push(backward_ratio_study(&stepper, ESTIMATE_SAMPLES, seed)?);
    }

    let mut all_ok = true;
    let mut failures = Vec::new();
    let mut emit = |label: &str, file: &str, studies: &[RatioStudy]| -> Result<()> {
        let (ok, growth, line) = probe_summary(&run.scenario.name, label, studies);
        println!("{line}");
        if !ok {
            all_ok = false;
            failures.push(format!("{label} grew by {growth}"));
        }
        write_artifact(&common.out, &format!("{file}.csv"), &study_rows_to_csv(studies))?;
        write_artifact(
            &common.out,
            &format!("{file}_summary.csv"),
            &study_summary_to_csv(studies),
        )
    };
    emit("forward(-1)", "estimates_forward_minus1", &forward_low)?;
    if high_applies {
        emit("forward(0)", "estimates_forward_zero", &forward_high)?;
    } else {
        println!(
            "probe-estimates: {} forward(0): skipped, beta does not vanish on the two cells \
             nearest each wall",
            run.scenario.name
        );
    }
    emit("backward", "estimates_backward", &backward)?;
    drop(emit);

    if all_ok {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "ratio growth past {GROWTH_BAND}: {}",
            failures.join(", ")
        )))
    }
}

fn order_band_check(
    rows: &[RefinementRow],
    band: (f64, f64),
) -> (bool, Vec<f64>) {
    let orders: Vec<f64> = rows.iter().filter_map(|r| r.observed_order).collect();
    let ok = !orders.is_empty() && orders.iter().all(|o| (band.0..=band.1).contains(o));
    (ok, orders)
}

fn cmd_convergence(common: &Common, levels: usize) -> Result<()> {
    if levels < 2 {
        return Err(Error::Config(format!(
            "a refinement table needs at least 2 levels, got {levels}"
        )));
    }
    let scenario = Scenario::load(&common.scenario)?;
    let space = space_refinement_study(levels)?;
    let time = time_refinement_study(levels)?;
    let (space_ok, space_orders) = order_band_check(&space, SPACE_ORDER_BAND);
    let (time_ok, time_orders) = order_band_check(&time, TIME_ORDER_BAND);
    println!(
        "convergence: {}: space orders {:?} within [{}, {}]: {}",
        scenario.name,
        space_orders,
        SPACE_ORDER_BAND.0,
        SPACE_ORDER_BAND.1,
        if space_ok { "ok" } else { "FAIL" }
    );
    println!(
        "convergence: {}: time orders {:?} within [{}, {}]: {}",
        scenario.name,
        time_orders,
        TIME_ORDER_BAND.0,
        TIME_ORDER_BAND.1,
        if time_ok { "ok" } else { "FAIL" }
    );
    write_artifact(&common.out, "convergence_space.csv", &refinement_rows_to_csv(&space))?;
    write_artifact(&common.out, "convergence_time.csv", &refinement_rows_to_csv(&time))?;
    if space_ok && time_ok {
        Ok(())
    } else {
        Err(Error::Verification(
            "observed refinement orders left their bands".to_string(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CoefficientFamily;
    use crate::tree::TimeGrid;

    fn tiny_run() -> (SpatialGrid, ScenarioTree, CoefficientSet) {
        let grid = SpatialGrid::new(0.0, 1.0, 3).unwrap();
        let tree = ScenarioTree::new(TimeGrid::new(1.0, 2).unwrap(), 1).unwrap();
        let family = CoefficientFamily::constant(1.0, 0.0, 0.0, vec![0.2], vec![0.0], 0.5);
        let coeffs = CoefficientSet::sample(&grid, 2, 1.0, &family).unwrap();
        (grid, tree, coeffs)
    }

    #[test]
    fn forward_csv_walks_every_leaf_history() {
        let (grid, tree, coeffs) = tiny_run();
        let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
        let data = ForwardData::random(&tree, grid.m, 0, 5);
        let solution = stepper.run(&data).unwrap();
        let csv = forward_solution_csv(&tree, &solution);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "path_id,step,node_index,u");
        assert_eq!(lines.len(), 1 + tree.leaves() * 3 * grid.m);
        assert!(lines[1].starts_with("0,0,0,"));
        let last = lines.last().unwrap();
        assert!(last.starts_with("3,2,2,"), "{last}");
    }

    #[test]
    fn backward_csv_leaves_the_terminal_corrector_blank() {
        let (grid, tree, coeffs) = tiny_run();
        let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
        let data = BackwardData::random(&tree, grid.m, 0, 6);
        let solution = solve_backward_tree(&stepper, &data).unwrap();
        let csv = backward_solution_csv(&tree, &solution);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "path_id,step,node_index,p,chi_1");
        assert_eq!(lines.len(), 1 + tree.leaves() * 3 * grid.m);
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 5);
            let step: usize = fields[1].parse().unwrap();
            if step == tree.time.steps {
                assert!(fields[4].is_empty());
            } else {
                assert!(!fields[4].is_empty());
                fields[4].parse::<f64>().unwrap();
            }
        }
    }

    #[test]
    fn regression_csv_lists_the_initial_pair_with_errors() {
        let outcome = RegressionOutcome {
            p0: vec![1.0, 2.0],
            chi0: vec![vec![0.5, 0.25]],
            se_p0: vec![0.1, 0.2],
            se_chi0: vec![vec![0.01, 0.02]],
            paths: 8,
            warnings: Vec::new(),
        };
        assert_eq!(
            regression_csv(&outcome),
            "quantity,node_index,value,stderr\np0,0,1,0.1\np0,1,2,0.2\n\
             chi_1_0,0,0.5,0.01\nchi_1_0,1,0.25,0.02\n"
        );
    }

    #[test]
    fn route_labels_match_the_flag_values() {
        assert_eq!(Route::Tree.label(), "tree");
        assert_eq!(Route::FixedPoint.label(), "fixed-point");
        assert_eq!(Route::Regression.label(), "regression");
    }

    #[test]
    fn order_band_check_requires_every_order_inside() {
        let rows = vec![
            RefinementRow {
                level: 0,
                m: 7,
                steps: 7,
                error: 1.0,
                observed_order: None,
            },
            RefinementRow {
                level: 1,
                m: 15,
                steps: 26,
                error: 0.25,
                observed_order: Some(2.0),
            },
        ];
        assert!(order_band_check(&rows, (1.7, 2.3)).0);
        assert!(!order_band_check(&rows, (0.8, 1.2)).0);
        assert!(!order_band_check(&rows[..1], (1.7, 2.3)).0);
    }
}
