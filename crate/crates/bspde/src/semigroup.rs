//! Flow-property checks over every interior step pair: restarting either
//! solve from its own intermediate slice must reproduce the original.
//!
//! For the forward march this is causality in the strictest sense: the
//! slice at theta, marched again from theta and then restarted once more at
//! s, must agree with the single full march bit for bit, since both perform
//! the same arithmetic in the same order.
//!
//! For the backward pair the restart runs on a shortened tree through the
//! impulse-transposition route, so agreement is earned through different
//! arithmetic rather than inherited; residuals sit at rounding level, not
//! at zero.
//!
//! The weak identification residual ties the two solves together on the
//! sub-interval: pairing p at theta against an arbitrary datum equals
//! pairing p at s against the homogeneous forward solution of that datum,
//! plus the source pairing in between.

use crate::backward::{solve_backward_adjoint, solve_backward_tree, BackwardData, BackwardSolution};
use crate::error::{Error, Result};
use crate::forward::{ForwardData, ForwardSolution, Stepper};
use crate::norms::{step_pairing, time_pairing};
use crate::tree::{derive_seed, AdaptedField, ScenarioTree, TimeGrid};

/// Residuals of one step pair `theta < s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupRow {
    pub scenario: String,
    pub theta: usize,
    pub s: usize,
    /// Largest relative gap in p between the full solve and the shortened
    /// adjoint-route solve on `[theta, s]`.
    pub res_p: f64,
    /// Relative residual of the weak identification of p at theta through
    /// homogeneous forward solves on `[theta, s]`.
    pub res_p0: f64,
    /// Largest relative gap per noise in chi on `[theta, s)`.
    pub res_chi: Vec<f64>,
    /// Largest absolute gap on `[s, steps]` between the full forward march
    /// and the twice-restarted one; zero because the arithmetic coincides.
    pub res_forward: f64,
}

/// All pairs, plus the worst residual of each kind.
#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupReport {
    pub rows: Vec<SemigroupRow>,
}

impl SemigroupReport {
    pub fn worst_p(&self) -> f64 {
        self.rows.iter().map(|r| r.res_p).fold(0.0, f64::max)
    }

    pub fn worst_p0(&self) -> f64 {
        self.rows.iter().map(|r| r.res_p0).fold(0.0, f64::max)
    }

    pub fn worst_chi(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.res_chi.iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn worst_forward(&self) -> f64 {
        self.rows.iter().map(|r| r.res_forward).fold(0.0, f64::max)
    }
}

fn random_slice(len: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// Run the pair checks on already-solved full-interval solutions.
pub fn verify_semigroup_with(
    stepper: &Stepper,
    scenario: &str,
    forward_data: &ForwardData,
    forward: &ForwardSolution,
    backward_data: &BackwardData,
    backward: &BackwardSolution,
    seed: u64,
) -> Result<SemigroupReport> {
    if forward_data.initial_step != 0 || backward_data.first_step != 0 {
        return Err(Error::Config(
            "pair checks need full-interval solutions starting at step 0".into(),
        ));
    }
    let tree = stepper.tree;
    let grid = stepper.grid;
    let m = grid.m;
    let n = tree.noise_dim;
    let last = tree.time.steps;
    let dt = tree.time.dt;
    let p_scale = backward.magnitude() + 1.0;
    let mut rows = Vec::new();
    for theta in 0..last {
        // Restarting the forward march at theta is shared by every s.
        let restart_theta = ForwardData {
            initial_step: theta,
            initial: forward.field.step(theta).to_vec(),
            phi: forward_data.phi.clone(),
            noise_sources: forward_data.noise_sources.clone(),
        };
        let from_theta = stepper.run(&restart_theta)?;
        for s in theta + 1..=last {
            // Forward: restart once more at s and compare to the full march.
            let restart_s = ForwardData {
                initial_step: s,
                initial: from_theta.field.step(s).to_vec(),
                phi: forward_data.phi.clone(),
                noise_sources: forward_data.noise_sources.clone(),
            };
            let from_s = stepper.run(&restart_s)?;
            let mut res_forward = 0.0f64;
            for k in s..=last {
                for (a, b) in from_s.field.step(k).iter().zip(forward.field.step(k)) {
                    res_forward = res_forward.max((a - b).abs());
                }
            }

            // Backward: independent adjoint-route solve on the shortened
            // horizon [0, s], read off on [theta, s].
            let sub_time = TimeGrid {
                horizon: s as f64 * dt,
                steps: s,
                dt,
            };
            let sub_tree = ScenarioTree::new(sub_time, n)?;
            let sub_coeffs = stepper.coeffs.restricted(s)?;
            let sub_stepper = Stepper::new(grid, &sub_tree, &sub_coeffs)?;
            let mut sub_xi = AdaptedField::zeros(&sub_tree, theta, (s - 1).max(theta), m);
            for k in theta..s {
                sub_xi.set_step(k, backward_data.xi.step(k).to_vec());
            }
            let sub_data = BackwardData {
                first_step: theta,
                terminal: backward.p.step(s).to_vec(),
                xi: sub_xi,
            };
            let sub_solution = solve_backward_adjoint(&sub_stepper, &sub_data)?;
            let mut res_p = 0.0f64;
            for k in theta..=s {
                for (a, b) in sub_solution.p.step(k).iter().zip(backward.p.step(k)) {
                    res_p = res_p.max((a - b).abs());
                }
            }
            res_p /= p_scale;
            let mut res_chi = vec![0.0f64; n];
            for (i, gap) in res_chi.iter_mut().enumerate() {
                for k in theta..s {
                    for (a, b) in sub_solution.chi[i]
                        .step(k)
                        .iter()
                        .zip(backward.chi[i].step(k))
                    {
                        *gap = gap.max((a - b).abs());
                    }
                }
                *gap /= p_scale;
            }

            // Weak identification of p at theta on [theta, s]: pair against
            // a homogeneous forward solve of a fresh random datum.
            let probe_seed = derive_seed(seed, (theta * (last + 1) + s) as u64);
            let probe = ForwardData::homogeneous(
                tree,
                m,
                theta,
                random_slice(m * tree.nodes_at(theta), probe_seed),
            );
            let probe_solution = stepper.run(&probe)?;
            let lhs = step_pairing(tree, grid, &backward.p, &probe_solution.field, theta);
            let rhs = step_pairing(tree, grid, &backward.p, &probe_solution.field, s)
                + time_pairing(
                    tree,
                    grid,
                    &backward_data.xi,
                    &probe_solution.field,
                    theta,
                    s,
                );
            let res_p0 = (lhs - rhs).abs()
                / lhs.abs().max(rhs.abs()).max(crate::duality::RESIDUAL_FLOOR);

            rows.push(SemigroupRow {
                scenario: scenario.to_string(),
                theta,
                s,
                res_p,
                res_p0,
                res_chi,
                res_forward,
            });
        }
    }
    Ok(SemigroupReport { rows })
}

/// Generate seeded random data, solve both problems over the full horizon,
/// and run the pair checks.
pub fn verify_semigroup(stepper: &Stepper, scenario: &str, seed: u64) -> Result<SemigroupReport> {
    let tree = stepper.tree;
    let m = stepper.grid.m;
    let forward_data = ForwardData::random(tree, m, 0, derive_seed(seed, 1));
    let backward_data = BackwardData::random(tree, m, 0, derive_seed(seed, 2));
    let forward = stepper.run(&forward_data)?;
    let backward = solve_backward_tree(stepper, &backward_data)?;
    verify_semigroup_with(
        stepper,
        scenario,
        &forward_data,
        &forward,
        &backward_data,
        &backward,
        seed,
    )
}

pub fn semigroup_rows_to_csv(rows: &[SemigroupRow], noise_dim: usize) -> String {
    let mut out = String::from("scenario,theta,s,res_p,res_p0");
    for i in 1..=noise_dim {
        out.push_str(&format!(",res_chi_{i}"));
    }
    out.push_str(",res_forward\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            row.scenario, row.theta, row.s, row.res_p, row.res_p0
        ));
        for gap in &row.res_chi {
            out.push_str(&format!(",{gap}"));
        }
        out.push_str(&format!(",{}\n", row.res_forward));
    }
    out
}
