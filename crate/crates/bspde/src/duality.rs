//! The discrete duality identity tying one forward solve to one backward
//! solve through nothing but pairings of their data and solutions:
//!
//!   (psi, u_K) + sum_k dt (xi_k, u_k)
//!     = sum_k dt (E[p_{k+1} | step k], phi_k)
//!       + sum_i sum_k dt (chi_{i,k}, h_{i,k})
//!       + (p_a, Phi)
//!
//! with probability- and h-weighted pairings throughout and k running over
//! `a..K`. The discretization was arranged so this holds to rounding for
//! arbitrary adapted data, which makes random instances the sharpest test:
//! any asymmetry between the forward scheme and the backward recursion
//! shows up as a residual far above rounding size.

use crate::backward::{solve_backward_tree, BackwardData, BackwardSolution};
use crate::error::{Error, Result};
use crate::forward::{ForwardData, ForwardSolution, Stepper};
use crate::norms::{projected_pairing, step_pairing, time_pairing};
use crate::tree::derive_seed;

/// Floor for relative residuals so zero-data instances stay finite.
pub const RESIDUAL_FLOOR: f64 = 1e-300;

/// Both sides of the identity, term by term.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    /// (psi, u_K).
    pub terminal_term: f64,
    /// sum_k dt (xi_k, u_k).
    pub source_term: f64,
    /// sum_k dt (E[p_{k+1} | step k], phi_k).
    pub drift_term: f64,
    /// One entry per noise: sum_k dt (chi_{i,k}, h_{i,k}).
    pub noise_terms: Vec<f64>,
    /// (p_a, Phi).
    pub initial_term: f64,
}

impl DualityReport {
    pub fn lhs(&self) -> f64 {
        self.terminal_term + self.source_term
    }

    pub fn rhs(&self) -> f64 {
        self.drift_term + self.noise_terms.iter().sum::<f64>() + self.initial_term
    }

    pub fn abs_residual(&self) -> f64 {
        (self.lhs() - self.rhs()).abs()
    }

    pub fn rel_residual(&self) -> f64 {
        self.abs_residual() / self.lhs().abs().max(self.rhs().abs()).max(RESIDUAL_FLOOR)
    }
}

/// Evaluate the identity on a solved pair. The forward and backward
/// problems must start at the same step.
pub fn verify_duality(
    stepper: &Stepper,
    forward_data: &ForwardData,
    forward: &ForwardSolution,
    backward_data: &BackwardData,
    backward: &BackwardSolution,
) -> Result<DualityReport> {
    if forward_data.initial_step != backward_data.first_step {
        return Err(Error::Config(format!(
            "forward problem starts at step {} but the backward one at {}",
            forward_data.initial_step, backward_data.first_step
        )));
    }
    let tree = stepper.tree;
    let grid = stepper.grid;
    let a = forward_data.initial_step;
    let last = tree.time.steps;
    let terminal_term = step_pairing(tree, grid, &backward.p, &forward.field, last);
    let source_term = time_pairing(tree, grid, &backward_data.xi, &forward.field, a, last);
    let drift_term = projected_pairing(tree, grid, &backward.p, &forward_data.phi, a, last);
    let noise_terms: Vec<f64> = backward
        .chi
        .iter()
        .zip(&forward_data.noise_sources)
        .map(|(chi, h)| time_pairing(tree, grid, chi, h, a, last))
        .collect();
    let initial_term = step_pairing(tree, grid, &backward.p, &forward.field, a);
    Ok(DualityReport {
        terminal_term,
        source_term,
        drift_term,
        noise_terms,
        initial_term,
    })
}

/// One verification instance: seeded random adapted data on both sides,
/// solved and paired.
pub fn run_duality_instance(
    stepper: &Stepper,
    initial_step: usize,
    seed: u64,
) -> Result<DualityReport> {
    let tree = stepper.tree;
    let m = stepper.grid.m;
    let forward_data = ForwardData::random(tree, m, initial_step, derive_seed(seed, 1));
    let backward_data = BackwardData::random(tree, m, initial_step, derive_seed(seed, 2));
    let forward = stepper.run(&forward_data)?;
    let backward = solve_backward_tree(stepper, &backward_data)?;
    verify_duality(stepper, &forward_data, &forward, &backward_data, &backward)
}

/// One CSV row of the duality verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityRow {
    pub scenario: String,
    pub instance_seed: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
}

impl DualityRow {
    pub fn new(scenario: &str, instance_seed: u64, report: &DualityReport) -> Self {
        DualityRow {
            scenario: scenario.to_string(),
            instance_seed,
            lhs: report.lhs(),
            rhs: report.rhs(),
            abs_residual: report.abs_residual(),
            rel_residual: report.rel_residual(),
        }
    }
}

pub fn duality_rows_to_csv(rows: &[DualityRow]) -> String {
    let mut out = String::from("scenario,instance_seed,lhs,rhs,abs_residual,rel_residual\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.scenario, row.instance_seed, row.lhs, row.rhs, row.abs_residual, row.rel_residual
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CoefficientExpr, CoefficientFamily, CoefficientSet, SpatialGrid};
    use crate::tree::{ScenarioTree, TimeGrid};

    fn family(noise_dim: usize, amp: f64) -> CoefficientFamily {
        let mut family = CoefficientFamily::constant(
            1.0,
            0.3,
            -0.2,
            vec![0.4; noise_dim],
            vec![0.15; noise_dim],
            0.5,
        );
        family.b = CoefficientExpr::AffineX(1.0, 0.3);
        family.f = CoefficientExpr::SinusoidalXT(0.3, 0.2, 2.0);
        family.lambda_tree_amp = amp;
        family
    }

    #[test]
    fn identity_holds_on_random_instances_to_ten_digits() {
        let cases = [
            (1usize, 4usize, 6usize, 0.0, 0usize),
            (1, 5, 5, 0.3, 0),
            (2, 3, 4, 0.0, 0),
            (2, 4, 3, 0.2, 1),
        ];
        for (noise_dim, steps, m, amp, start) in cases {
            let grid = SpatialGrid::new(0.0, 1.0, m).unwrap();
            let tree = ScenarioTree::new(TimeGrid::new(0.5, steps).unwrap(), noise_dim).unwrap();
            let coeffs =
                CoefficientSet::sample(&grid, steps, 0.5, &family(noise_dim, amp)).unwrap();
            let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
            for seed in [1u64, 2, 3] {
                let report = run_duality_instance(&stepper, start, seed).unwrap();
                assert!(
                    report.rel_residual() <= 1e-10,
                    "residual {:.3e} for n = {noise_dim}, amp {amp}, start {start}, seed {seed} \
                     (lhs {}, rhs {})",
                    report.rel_residual(),
                    report.lhs(),
                    report.rhs()
                );
                // The instance must be informative, not a 0 = 0 identity.
                assert!(report.lhs().abs() > 1e-6);
            }
        }
    }

    #[test]
    fn both_sides_scale_bitwise_under_dyadic_scaling() {
        let grid = SpatialGrid::new(0.0, 1.0, 5).unwrap();
        let tree = ScenarioTree::new(TimeGrid::new(0.5, 4).unwrap(), 1).unwrap();
        let coeffs = CoefficientSet::sample(&grid, 4, 0.5, &family(1, 0.25)).unwrap();
        let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
        let mut forward_data = ForwardData::random(&tree, 5, 0, 31);
        let backward_data = BackwardData::random(&tree, 5, 0, 32);
        let solve = |fwd: &ForwardData| {
            let forward = stepper.run(fwd).unwrap();
            let backward = solve_backward_tree(&stepper, &backward_data).unwrap();
            verify_duality(&stepper, fwd, &forward, &backward_data, &backward).unwrap()
        };
        let base = solve(&forward_data);
        // Scale the forward data by 8: every floating-point operation
        // commutes with powers of two, so both sides scale bit-exactly.
        forward_data.initial.iter_mut().for_each(|v| *v *= 8.0);
        for k in 0..4 {
            forward_data.phi.step_mut(k).iter_mut().for_each(|v| *v *= 8.0);
            for source in forward_data.noise_sources.iter_mut() {
                source.step_mut(k).iter_mut().for_each(|v| *v *= 8.0);
            }
        }
        let scaled = solve(&forward_data);
        assert_eq!(scaled.lhs(), 8.0 * base.lhs());
        assert_eq!(scaled.rhs(), 8.0 * base.rhs());
    }

    #[test]
    fn leafwise_enumeration_reproduces_both_sides() {
        let grid = SpatialGrid::new(0.0, 1.0, 4).unwrap();
        let tree = ScenarioTree::new(TimeGrid::new(0.5, 3).unwrap(), 2).unwrap();
        let coeffs = CoefficientSet::sample(&grid, 3, 0.5, &family(2, 0.2)).unwrap();
        let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
        let forward_data = ForwardData::random(&tree, 4, 0, 8);
        let backward_data = BackwardData::random(&tree, 4, 0, 9);
        let forward = stepper.run(&forward_data).unwrap();
        let backward = solve_backward_tree(&stepper, &backward_data).unwrap();
        let report = verify_duality(
            &stepper,
            &forward_data,
            &forward,
            &backward_data,
            &backward,
        )
        .unwrap();
        // Walk every leaf path and accumulate the pairings directly; the
        // uniform average over leaves realizes both the step weights and
        // the one-step projection in the drift term.
        let leaves = tree.leaves();
        let last = tree.time.steps;
        let dt = tree.time.dt;
        let h = grid.h;
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for leaf in 0..leaves {
            let mut lhs_path = crate::linalg::dot(
                backward.p.node(last, leaf),
                forward.field.node(last, leaf),
            );
            let mut rhs_path = 0.0;
            for k in 0..last {
                let v = tree.leaf_prefix(leaf, k);
                let v_next = tree.leaf_prefix(leaf, k + 1);
                lhs_path += dt
                    * crate::linalg::dot(backward_data.xi.node(k, v), forward.field.node(k, v));
                rhs_path += dt
                    * crate::linalg::dot(
                        backward.p.node(k + 1, v_next),
                        forward_data.phi.node(k, v),
                    );
                for (chi, source) in backward.chi.iter().zip(&forward_data.noise_sources) {
                    rhs_path += dt * crate::linalg::dot(chi.node(k, v), source.node(k, v));
                }
            }
            rhs_path += crate::linalg::dot(backward.p.node(0, 0), forward.field.node(0, 0));
            lhs += lhs_path;
            rhs += rhs_path;
        }
        lhs *= h / leaves as f64;
        rhs *= h / leaves as f64;
        let scale = report.lhs().abs().max(1.0);
        assert!((lhs - report.lhs()).abs() <= 1e-12 * scale);
        assert!((rhs - report.rhs()).abs() <= 1e-12 * scale);
    }

    #[test]
    fn mismatched_operators_break_the_identity_loudly() {
        // Solving the backward problem with a flipped drift sign must leave
        // a residual orders of magnitude above rounding; this keeps the
        // verifier itself honest.
        let grid = SpatialGrid::new(0.0, 1.0, 5).unwrap();
        let tree = ScenarioTree::new(TimeGrid::new(0.5, 4).unwrap(), 1).unwrap();
        let coeffs = CoefficientSet::sample(&grid, 4, 0.5, &family(1, 0.0)).unwrap();
        let mut flipped = coeffs.clone();
        flipped.f.iter_mut().for_each(|v| *v = -*v);
        let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
        let wrong = Stepper::new(&grid, &tree, &flipped).unwrap();
        let forward_data = ForwardData::random(&tree, 5, 0, 17);
        let backward_data = BackwardData::random(&tree, 5, 0, 18);
        let forward = stepper.run(&forward_data).unwrap();
        let backward = solve_backward_tree(&wrong, &backward_data).unwrap();
        let report = verify_duality(
            &stepper,
            &forward_data,
            &forward,
            &backward_data,
            &backward,
        )
        .unwrap();
        assert!(
            report.rel_residual() > 1e-4,
            "flipped operator went unnoticed: residual {:.3e}",
            report.rel_residual()
        );
    }

    #[test]
    fn misaligned_start_steps_are_rejected() {
        let grid = SpatialGrid::new(0.0, 1.0, 4).unwrap();
        let tree = ScenarioTree::new(TimeGrid::new(0.5, 3).unwrap(), 1).unwrap();
        let coeffs = CoefficientSet::sample(&grid, 3, 0.5, &family(1, 0.0)).unwrap();
        let stepper = Stepper::new(&grid, &tree, &coeffs).unwrap();
        let forward_data = ForwardData::random(&tree, 4, 1, 3);
        let backward_data = BackwardData::random(&tree, 4, 0, 4);
        let forward = stepper.run(&forward_data).unwrap();
        let backward = solve_backward_tree(&stepper, &backward_data).unwrap();
        let err = verify_duality(
            &stepper,
            &forward_data,
            &forward,
            &backward_data,
            &backward,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn csv_rows_carry_the_report_numbers() {
        let report = DualityReport {
            terminal_term: 1.5,
            source_term: 0.5,
            drift_term: 0.75,
            noise_terms: vec![0.25],
            initial_term: 1.0,
        };
        let row = DualityRow::new("default", 42, &report);
        assert_eq!(row.lhs, 2.0);
        assert_eq!(row.rhs, 2.0);
        assert_eq!(row.abs_residual, 0.0);
        let csv = duality_rows_to_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario,instance_seed,lhs,rhs,abs_residual,rel_residual"
        );
        assert_eq!(lines.next().unwrap(), "default,42,2,2,0,0");
    }
}
