//! Backward solves: the dual pair (p, chi_1..chi_N) computed along four
//! routes with unrelated arithmetic, so their agreement is evidence rather
//! than tautology.
//!
//! Route "tree" runs the recursion that is the exact transpose of the
//! forward step: per child lambda_c = S_c^{-T} p_c, then chi_i is the
//! increment-weighted child mean of lambda scaled by 1/sqrt(dt) and
//! p_v = mean(lambda) + dt (sum_i B_i^T chi_i + xi_v).
//!
//! Route "adjoint" never steps backward at all: every value of p and chi is
//! the weighted response functional of a forward impulse (unit initial
//! datum for p, unit noise source for chi), which is transposition realized
//! through forward solves only.
//!
//! Route "fixed-point" reduces the coupled problem to noise-free adjoint
//! solves: the correction zeta = sum_i B_i^T chi_i enters as an extra
//! source, and because a source at step k only influences chi at earlier
//! steps, the iteration reaches the exact fixed point in at most K - a
//! sweeps. A dense solve of the coupling system is kept behind a size guard
//! as the fallback when an iteration cap cuts the sweeps short.
//!
//! Route "regression" leaves the tree entirely: Gaussian increments, least
//! squares projections of the one-step transposed solves onto polynomial
//! states, bootstrap standard errors at the initial step.

use crate::error::{Error, Result};
use crate::forward::Stepper;
use crate::grid::{assemble_a_shifted, assemble_b, CoefficientSet, SpatialGrid};
use crate::linalg::DenseMatrix;
use crate::tree::{AdaptedField, ScenarioTree};
use rayon::prelude::*;

/// Data of one backward problem: terminal slice at the horizon and a source
/// read at steps `first_step..steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardData {
    pub first_step: usize,
    /// Values over all leaves, node-major.
    pub terminal: Vec<f64>,
    pub xi: AdaptedField,
}

impl BackwardData {
    pub fn homogeneous(tree: &ScenarioTree, m: usize, first_step: usize, terminal: Vec<f64>) -> Self {
        let last = tree.time.steps.saturating_sub(1).max(first_step);
        BackwardData {
            first_step,
            terminal,
            xi: AdaptedField::zeros(tree, first_step, last, m),
        }
    }

    /// Seeded random instance: standard normal draws on the terminal slice,
    /// then the source, step-major.
    pub fn random(tree: &ScenarioTree, m: usize, first_step: usize, seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        };
        let terminal = draw(m * tree.leaves());
        let mut data = BackwardData::homogeneous(tree, m, first_step, terminal);
        for k in first_step..tree.time.steps {
            let len = data.xi.step(k).len();
            data.xi.set_step(k, draw(len));
        }
        data
    }
}

/// The dual pair: p over steps `first_step..=steps`, each chi_i over
/// `first_step..=steps-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub p: AdaptedField,
    pub chi: Vec<AdaptedField>,
}

impl BackwardSolution {
    /// Largest entrywise gap between two solutions across p and every chi,
    /// relative to the larger solution magnitude.
    pub fn distance(&self, other: &BackwardSolution) -> f64 {
        let scale = self.magnitude().max(other.magnitude()) + 1.0;
        let mut worst = 0.0f64;
        for k in self.p.first_step..=self.p.last_step() {
            for (a, b) in self.p.step(k).iter().zip(other.p.step(k)) {
                worst = worst.max((a - b).abs());
            }
        }
        for (ca, cb) in self.chi.iter().zip(&other.chi) {
            for k in ca.first_step..=ca.last_step() {
                for (a, b) in ca.step(k).iter().zip(cb.step(k)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst / scale
    }

    pub fn magnitude(&self) -> f64 {
        let mut mag = 0.0f64;
        for k in self.p.first_step..=self.p.last_step() {
            for v in self.p.step(k) {
                mag = mag.max(v.abs());
            }
        }
        for c in &self.chi {
            for k in c.first_step..=c.last_step() {
                for v in c.step(k) {
                    mag = mag.max(v.abs());
                }
            }
        }
        mag
    }
}

/// Transpose-recursion route: exact adjoint of the forward march.
pub fn solve_backward_tree(stepper: &Stepper, data: &BackwardData) -> Result<BackwardSolution> {
    let tree = stepper.tree;
    let m = stepper.grid.m;
    let n = tree.noise_dim;
    let branch = tree.branching();
    let dt = tree.time.dt;
    let root_dt = dt.sqrt();
    let first = data.first_step;
    let last = tree.time.steps;
    if data.terminal.len() != m * tree.leaves() {
        return Err(Error::Config(format!(
            "terminal slice has {} values, expected {}",
            data.terminal.len(),
            m * tree.leaves()
        )));
    }
    let mut p = AdaptedField::zeros(tree, first, last, m);
    let mut chi: Vec<AdaptedField> = (0..n)
        .map(|_| AdaptedField::zeros(tree, first, last.saturating_sub(1).max(first), m))
        .collect();
    p.set_step(last, data.terminal.clone());
    for k in (first..last).rev() {
        let b_ops = stepper.noise_operators(k);
        let parents = tree.nodes_at(k);
        let child_buf = p.step(k + 1).to_vec();
        let width = (1 + n) * m;
        let mut combined = vec![0.0; parents * width];
        combined
            .par_chunks_mut(width)
            .enumerate()
            .try_for_each(|(v, slot)| -> Result<()> {
                let mut mean_lam = vec![0.0; m];
                let mut signed: Vec<Vec<f64>> = vec![vec![0.0; m]; n];
                for a in 0..branch {
                    let child = tree.first_child(v) + a;
                    let factor = stepper.implicit_factor(k + 1, child);
                    let lam = factor.solve_transpose(&child_buf[child * m..(child + 1) * m])?;
                    for (acc, l) in mean_lam.iter_mut().zip(&lam) {
                        *acc += l;
                    }
                    for (i, s) in signed.iter_mut().enumerate() {
                        let sign = tree.sign(i, a);
                        for (acc, l) in s.iter_mut().zip(&lam) {
                            *acc += sign * l;
                        }
                    }
                }
                let inv_branch = 1.0 / branch as f64;
                for acc in mean_lam.iter_mut() {
                    *acc *= inv_branch;
                }
                for s in signed.iter_mut() {
                    for acc in s.iter_mut() {
                        *acc *= inv_branch / root_dt;
                    }
                }
                let (p_slot, chi_slots) = slot.split_at_mut(m);
                p_slot.copy_from_slice(&mean_lam);
                for (i, s) in signed.iter().enumerate() {
                    chi_slots[i * m..(i + 1) * m].copy_from_slice(s);
                    let drift = b_ops[i].apply_transpose(s);
                    for (ps, d) in p_slot.iter_mut().zip(&drift) {
                        *ps += dt * d;
                    }
                }
                for (ps, xi) in p_slot.iter_mut().zip(data.xi.node(k, v)) {
                    *ps += dt * xi;
                }
                Ok(())
            })?;
        let mut p_buf = vec![0.0; parents * m];
        let mut chi_bufs: Vec<Vec<f64>> = vec![vec![0.0; parents * m]; n];
        for v in 0..parents {
            let slot = &combined[v * width..(v + 1) * width];
            p_buf[v * m..(v + 1) * m].copy_from_slice(&slot[..m]);
            for (i, buf) in chi_bufs.iter_mut().enumerate() {
                buf[v * m..(v + 1) * m].copy_from_slice(&slot[(1 + i) * m..(2 + i) * m]);
            }
        }
        p.set_step(k, p_buf);
        for (i, buf) in chi_bufs.into_iter().enumerate() {
            chi[i].set_step(k, buf);
        }
    }
    Ok(BackwardSolution { p, chi })
}

/// Impulse-transposition route: every entry of p and chi is a weighted
/// response functional of a forward impulse solve.
pub fn solve_backward_adjoint(stepper: &Stepper, data: &BackwardData) -> Result<BackwardSolution> {
    let tree = stepper.tree;
    let grid = stepper.grid;
    let m = grid.m;
    let n = tree.noise_dim;
    let dt = tree.time.dt;
    let first = data.first_step;
    let last = tree.time.steps;
    if data.terminal.len() != m * tree.leaves() {
        return Err(Error::Config(format!(
            "terminal slice has {} values, expected {}",
            data.terminal.len(),
            m * tree.leaves()
        )));
    }
    let mut p = AdaptedField::zeros(tree, first, last, m);
    let mut chi: Vec<AdaptedField> = (0..n)
        .map(|_| AdaptedField::zeros(tree, first, last.saturating_sub(1).max(first), m))
        .collect();
    for k in first..=last {
        let nodes = tree.nodes_at(k);
        let weight = tree.probability(k) * grid.h;
        let p_buf: Vec<f64> = (0..nodes * m)
            .into_par_iter()
            .map(|slot| -> Result<f64> {
                let (r, x) = (slot / m, slot % m);
                let sub = stepper.impulse_initial(k, r, x)?;
                Ok(stepper.subtree_functional(&sub, Some(&data.xi), Some(data.terminal.as_slice()))
                    / weight)
            })
            .collect::<Result<Vec<f64>>>()?;
        p.set_step(k, p_buf);
        if k < last {
            for (i, chi_field) in chi.iter_mut().enumerate() {
                let chi_buf: Vec<f64> = (0..nodes * m)
                    .into_par_iter()
                    .map(|slot| -> Result<f64> {
                        let (v, x) = (slot / m, slot % m);
                        let sub = stepper.impulse_noise(k, v, x, i)?;
                        Ok(stepper.subtree_functional(
                            &sub,
                            Some(&data.xi),
                            Some(data.terminal.as_slice()),
                        ) / (dt * weight))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                chi_field.set_step(k, chi_buf);
            }
        }
    }
    Ok(BackwardSolution { p, chi })
}

/// Controls for the fixed-point route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Relative update size that counts as converged.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-12,
            max_iters: 200,
        }
    }
}

/// What the fixed-point route did.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    pub iterations: usize,
    pub final_update: f64,
    pub used_dense_fallback: bool,
}

fn zero_noise_coeffs(coeffs: &CoefficientSet) -> CoefficientSet {
    let mut quiet = coeffs.clone();
    for table in quiet.beta.iter_mut().chain(quiet.beta_bar.iter_mut()) {
        table.iter_mut().for_each(|v| *v = 0.0);
    }
    quiet
}

/// Apply sum_i B_i^T chi_i nodewise, producing the coupling source.
fn coupling_source(stepper: &Stepper, chi: &[AdaptedField]) -> AdaptedField {
    let tree = stepper.tree;
    let m = stepper.grid.m;
    let first = chi[0].first_step;
    let last = chi[0].last_step();
    let mut zeta = AdaptedField::zeros(tree, first, last, m);
    for k in first..=last {
        let b_ops = stepper.noise_operators(k);
        for v in 0..tree.nodes_at(k) {
            let mut acc = vec![0.0; m];
            for (i, b) in b_ops.iter().enumerate() {
                let bt = b.apply_transpose(chi[i].node(k, v));
                for (a, t) in acc.iter_mut().zip(&bt) {
                    *a += t;
                }
            }
            zeta.node_mut(k, v).copy_from_slice(&acc);
        }
    }
    zeta
}

fn add_fields(a: &AdaptedField, b: &AdaptedField) -> AdaptedField {
    let mut out = a.clone();
    for k in a.first_step..=a.last_step() {
        let bv = b.step(k);
        for (o, x) in out.step_mut(k).iter_mut().zip(bv) {
            *o += x;
        }
    }
    out
}

fn field_gap(a: &AdaptedField, b: &AdaptedField) -> f64 {
    let mut gap = 0.0f64;
    for k in a.first_step..=a.last_step() {
        for (x, y) in a.step(k).iter().zip(b.step(k)) {
            gap = gap.max((x - y).abs());
        }
    }
    gap
}

fn field_magnitude(a: &AdaptedField) -> f64 {
    let mut mag = 0.0f64;
    for k in a.first_step..=a.last_step() {
        for x in a.step(k) {
            mag = mag.max(x.abs());
        }
    }
    mag
}

/// Fixed-point route: iterate zeta -> sum_i B_i^T chi_i[xi + zeta] through
/// noise-free adjoint solves. A source at step k only influences chi at
/// strictly earlier steps, so the map is nilpotent and the iteration lands
/// on the exact fixed point within K - a sweeps. If an imposed iteration
/// cap cuts it short, a guarded dense solve of the coupling system takes
/// over or the solve fails.
pub fn solve_backward_fixedpoint(
    stepper: &Stepper,
    data: &BackwardData,
    opts: FixedPointOptions,
) -> Result<(BackwardSolution, FixedPointReport)> {
    let tree = stepper.tree;
    let grid = stepper.grid;
    let quiet_coeffs = zero_noise_coeffs(stepper.coeffs);
    let quiet = Stepper::new(grid, tree, &quiet_coeffs)?;
    let m = grid.m;
    let first = data.first_step;
    let source_last = tree.time.steps.saturating_sub(1).max(first);

    let mut zeta = AdaptedField::zeros(tree, first, source_last, m);
    let mut iterations = 0usize;
    let mut final_update = f64::INFINITY;
    let mut converged = false;
    let mut last_solution: Option<BackwardSolution> = None;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut shifted = data.clone();
        shifted.xi = add_fields(&data.xi, &zeta);
        let solution = solve_backward_adjoint(&quiet, &shifted)?;
        let zeta_next = coupling_source(stepper, &solution.chi);
        let scale = field_magnitude(&zeta_next) + 1.0;
        final_update = field_gap(&zeta_next, &zeta) / scale;
        zeta = zeta_next;
        last_solution = Some(solution);
        if final_update <= opts.tol {
            converged = true;
            break;
        }
    }
    if converged {
        return Ok((
            last_solution.unwrap(),
            FixedPointReport {
                iterations,
                final_update,
                used_dense_fallback: false,
            },
        ));
    }

    // Dense fallback: stack zeta over all source slots and solve
    // (I - P) zeta = c directly, where P maps a source to the coupling it
    // induces and c is the coupling from the problem data alone.
    let slots: usize = (first..=source_last).map(|k| m * tree.nodes_at(k)).sum();
    if slots > crate::forward::MAX_MAP_COLUMNS
        || slots.saturating_mul(slots) > crate::forward::MAX_MAP_ENTRIES
    {
        return Err(Error::Numerical(format!(
            "fixed-point iteration did not converge in {} sweeps (last update {:.3e}) and the \
             dense fallback would need a {slots} x {slots} system, over the size cap",
            opts.max_iters, final_update
        )));
    }
    let flatten = |f: &AdaptedField| -> Vec<f64> {
        (first..=source_last).flat_map(|k| f.step(k).iter().copied()).collect()
    };
    let unflatten = |v: &[f64]| -> AdaptedField {
        let mut f = AdaptedField::zeros(tree, first, source_last, m);
        let mut at = 0usize;
        for k in first..=source_last {
            let len = f.step(k).len();
            f.set_step(k, v[at..at + len].to_vec());
            at += len;
        }
        f
    };
    let coupling_of = |source: &AdaptedField, terminal: &[f64]| -> Result<Vec<f64>> {
        let shifted = BackwardData {
            first_step: first,
            terminal: terminal.to_vec(),
            xi: source.clone(),
        };
        let solution = solve_backward_adjoint(&quiet, &shifted)?;
        Ok(flatten(&coupling_source(stepper, &solution.chi)))
    };
    let c = coupling_of(&data.xi, &data.terminal)?;
    let zero_terminal = vec![0.0; m * tree.leaves()];
    let mut system = DenseMatrix::zeros(slots, slots);
    for col in 0..slots {
        let mut e = vec![0.0; slots];
        e[col] = 1.0;
        let p_col = coupling_of(&unflatten(&e), &zero_terminal)?;
        for (row, val) in p_col.iter().enumerate() {
            let identity = if row == col { 1.0 } else { 0.0 };
            system.set(row, col, identity - val);
        }
    }
    let zeta_flat = system.lu_solve(&c)?;
    let zeta = unflatten(&zeta_flat);
    let mut shifted = data.clone();
    shifted.xi = add_fields(&data.xi, &zeta);
    let solution = solve_backward_adjoint(&quiet, &shifted)?;
    let residual_coupling = coupling_source(stepper, &solution.chi);
    let final_update = field_gap(&residual_coupling, &zeta) / (field_magnitude(&zeta) + 1.0);
    Ok((
        solution,
        FixedPointReport {
            iterations,
            final_update,
            used_dense_fallback: true,
        },
    ))
}

/// How well the pair satisfies the backward equation edge by edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport {
    /// Largest edge residual after projecting onto the representable sign
    /// components; zero to rounding by construction.
    pub max_projected: f64,
    /// Largest raw edge residual; coincides with the projected one when a
    /// single noise drives the tree.
    pub max_pathwise: f64,
    /// Largest product-sign component; nonzero only with two noises, of
    /// order dt.
    pub max_cross_defect: f64,
    pub scale: f64,
}

/// Evaluate the pathwise backward equation on every edge:
/// S_c^{-T} p_{k+1}(c) - [p_v - dt (sum_i B_i^T chi_i + xi_v)] should equal
/// sum_i chi_i(v) dw_i(c). With one noise the child pair determines chi
/// completely and the residual vanishes to rounding; with two noises the
/// component along the product sign s_1 s_2 cannot be represented by any
/// adapted pair and is reported as the cross defect.
pub fn reconstruction_residual(
    stepper: &Stepper,
    data: &BackwardData,
    solution: &BackwardSolution,
) -> Result<ReconstructionReport> {
    let tree = stepper.tree;
    let m = stepper.grid.m;
    let n = tree.noise_dim;
    let branch = tree.branching();
    let dt = tree.time.dt;
    let root_dt = dt.sqrt();
    let first = data.first_step;
    let last = tree.time.steps;
    let mut report = ReconstructionReport {
        max_projected: 0.0,
        max_pathwise: 0.0,
        max_cross_defect: 0.0,
        scale: solution.magnitude(),
    };
    for k in first..last {
        let b_ops = stepper.noise_operators(k);
        for v in 0..tree.nodes_at(k) {
            let mut base: Vec<f64> = solution.p.node(k, v).to_vec();
            for (i, b) in b_ops.iter().enumerate() {
                let bt = b.apply_transpose(solution.chi[i].node(k, v));
                for (s, t) in base.iter_mut().zip(&bt) {
                    *s -= dt * t;
                }
            }
            for (s, xi) in base.iter_mut().zip(data.xi.node(k, v)) {
                *s -= dt * xi;
            }
            let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(branch);
            for a in 0..branch {
                let child = tree.first_child(v) + a;
                let factor = stepper.implicit_factor(k + 1, child);
                let lam = factor.solve_transpose(solution.p.node(k + 1, child))?;
                let mut res = lam;
                for (r, b) in res.iter_mut().zip(&base) {
                    *r -= b;
                }
                for (i, chi_field) in solution.chi.iter().enumerate() {
                    let dw = tree.sign(i, a) * root_dt;
                    for (r, c) in res.iter_mut().zip(chi_field.node(k, v)) {
                        *r -= dw * c;
                    }
                }
                for r in &res {
                    report.max_pathwise = report.max_pathwise.max(r.abs());
                }
                residuals.push(res);
            }
            // The mean and each single-sign mean must vanish; with two
            // noises the product-sign mean is the unavoidable defect.
            let inv = 1.0 / branch as f64;
            for j in 0..m {
                let mean: f64 = residuals.iter().map(|r| r[j]).sum::<f64>() * inv;
                report.max_projected = report.max_projected.max(mean.abs());
                for i in 0..n {
                    let signed: f64 = residuals
                        .iter()
                        .enumerate()
                        .map(|(a, r)| tree.sign(i, a) * r[j])
                        .sum::<f64>()
                        * inv;
                    report.max_projected = report.max_projected.max(signed.abs());
                }
                if n == 2 {
                    let cross: f64 = residuals
                        .iter()
                        .enumerate()
                        .map(|(a, r)| tree.sign(0, a) * tree.sign(1, a) * r[j])
                        .sum::<f64>()
                        * inv;
                    report.max_cross_defect = report.max_cross_defect.max(cross.abs());
                }
            }
        }
    }
    Ok(report)
}

/// Controls for the regression route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionOptions {
    pub paths: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        RegressionOptions {
            paths: 2000,
            seed: 7,
            bootstrap_resamples: 100,
        }
    }
}

/// Step-0 estimates from the regression route with bootstrap standard
/// errors.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionOutcome {
    pub p0: Vec<f64>,
    pub chi0: Vec<Vec<f64>>,
    pub se_p0: Vec<f64>,
    pub se_chi0: Vec<Vec<f64>>,
    pub paths: usize,
    pub warnings: Vec<String>,
}

fn basis_row(w: &[f64]) -> Vec<f64> {
    match w.len() {
        1 => vec![1.0, w[0], w[0] * w[0], w[0] * w[0] * w[0]],
        2 => vec![1.0, w[0], w[1], w[0] * w[0], w[0] * w[1], w[1] * w[1]],
        _ => unreachable!("noise dimension is guarded to 1 or 2"),
    }
}

/// Least squares fit of every column of `targets` on the polynomial basis
/// of the states, by Gram-Schmidt over path vectors with a drop tolerance,
/// so dependent basis directions are discarded instead of poisoning the
/// normal equations. Returns fitted values per path (paths x m, row-major)
/// and whether any basis direction was dropped.
fn regress_fitted(states: &[Vec<f64>], targets: &[Vec<f64>], m: usize) -> (Vec<f64>, bool) {
    let paths = states.len();
    let total_cols = basis_row(&states[0]).len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(paths); total_cols];
    for w in states {
        for (col, val) in columns.iter_mut().zip(basis_row(w)) {
            col.push(val);
        }
    }
    let norm = |v: &[f64]| -> f64 { v.iter().map(|x| x * x).sum::<f64>().sqrt() };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(total_cols);
    let mut dropped = false;
    for col in columns {
        let original = norm(&col);
        let mut v = col;
        // Two projection passes tighten orthogonality before the drop
        // decision.
        for _ in 0..2 {
            for basis in &q {
                let proj: f64 = basis.iter().zip(&v).map(|(b, x)| b * x).sum();
                for (x, b) in v.iter_mut().zip(basis) {
                    *x -= proj * b;
                }
            }
        }
        let remaining = norm(&v);
        if remaining <= 1e-7 * original || remaining == 0.0 {
            dropped = true;
            continue;
        }
        v.iter_mut().for_each(|x| *x /= remaining);
        q.push(v);
    }
    let mut fitted = vec![0.0; paths * m];
    for basis in &q {
        for j in 0..m {
            let weight: f64 = basis.iter().zip(targets).map(|(b, t)| b * t[j]).sum();
            for (row, b) in basis.iter().enumerate() {
                fitted[row * m + j] += weight * b;
            }
        }
    }
    (fitted, dropped)
}

/// Regression route on simulated Gaussian paths. The terminal datum and the
/// source are supplied as functions of the Brownian state so the same
/// problem can be posed on the tree and on paths. Only the step-0 pair is
/// returned: it is the one deterministic quantity of the recursion, and it
/// comes with bootstrap standard errors.
#[allow(clippy::too_many_arguments)]
pub fn solve_backward_regression(
    grid: &SpatialGrid,
    coeffs: &CoefficientSet,
    horizon: f64,
    steps: usize,
    noise_dim: usize,
    terminal: &dyn Fn(&[f64]) -> Vec<f64>,
    xi: &dyn Fn(usize, &[f64]) -> Vec<f64>,
    opts: RegressionOptions,
) -> Result<RegressionOutcome> {
    use rand::Rng;
    use rand::SeedableRng;
    if opts.paths < 2 {
        return Err(Error::Config(format!(
            "regression needs at least 2 paths, got {}",
            opts.paths
        )));
    }
    if !(1..=2).contains(&noise_dim) {
        return Err(Error::Config(format!(
            "noise dimension must be 1 or 2, got {noise_dim}"
        )));
    }
    if steps == 0 || !(horizon > 0.0) {
        return Err(Error::Config(format!(
            "need a positive horizon split into at least one step, got {horizon} over {steps}"
        )));
    }
    let m = grid.m;
    let dt = horizon / steps as f64;
    let root_dt = dt.sqrt();
    let paths = opts.paths;
    let mut warnings: Vec<String> = Vec::new();

    // increments[k][path][i] and states[k][path][i] with W(0) = 0.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut increments: Vec<Vec<Vec<f64>>> = Vec::with_capacity(steps);
    let mut states: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; noise_dim]; paths]];
    for _ in 0..steps {
        let mut step_inc = Vec::with_capacity(paths);
        let mut next = states.last().unwrap().clone();
        for state in next.iter_mut() {
            let mut inc = vec![0.0; noise_dim];
            for (i, s) in state.iter_mut().enumerate() {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                inc[i] = g * root_dt;
                *s += inc[i];
            }
            step_inc.push(inc);
        }
        increments.push(step_inc);
        states.push(next);
    }

    let mut p_paths: Vec<Vec<f64>> = states[steps].iter().map(|w| terminal(w)).collect();
    for (path, p) in p_paths.iter().enumerate() {
        if p.len() != m {
            return Err(Error::Config(format!(
                "terminal function returned {} values on path {path}, expected {m}",
                p.len()
            )));
        }
    }

    let amp = coeffs.lambda_tree_amp;
    let mut step0_zp: Vec<Vec<f64>> = Vec::new();
    let mut step0_zchi: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut p0 = vec![0.0; m];
    let mut chi0 = vec![vec![0.0; m]; noise_dim];

    for k in (0..steps).rev() {
        let b_ops: Vec<_> = (0..noise_dim)
            .map(|i| assemble_b(grid, coeffs, i, k).matrix)
            .collect();
        // Zp folds the noise coupling into the conditional mean:
        // E[lam + sum_i dw_i B_i^T lam | W_k] = p-hat + dt sum_i B_i^T chi_i.
        let mut zp: Vec<Vec<f64>> = Vec::with_capacity(paths);
        let mut zchi: Vec<Vec<Vec<f64>>> = Vec::with_capacity(paths);
        for path in 0..paths {
            let shift = if amp == 0.0 {
                0.0
            } else {
                amp * states[k + 1][path][0].sin()
            };
            let a = assemble_a_shifted(grid, coeffs, k + 1, shift);
            let factor = a.matrix.identity_minus_scaled(dt);
            let lam = factor.solve_transpose(&p_paths[path])?;
            let mut z = lam.clone();
            for (i, b) in b_ops.iter().enumerate() {
                let bt = b.apply_transpose(&lam);
                let dw = increments[k][path][i];
                for (zv, t) in z.iter_mut().zip(&bt) {
                    *zv += dw * t;
                }
            }
            let per_noise: Vec<Vec<f64>> = (0..noise_dim)
                .map(|i| {
                    let dw = increments[k][path][i];
                    lam.iter().map(|l| l * dw / dt).collect()
                })
                .collect();
            zp.push(z);
            zchi.push(per_noise);
        }
        if k == 0 {
            // Degenerate state at the start: plain means, no basis involved.
            let xi_0 = xi(0, &states[0][0]);
            for j in 0..m {
                p0[j] = zp.iter().map(|z| z[j]).sum::<f64>() / paths as f64 + dt * xi_0[j];
                for i in 0..noise_dim {
                    chi0[i][j] = zchi.iter().map(|z| z[i][j]).sum::<f64>() / paths as f64;
                }
            }
            step0_zp = zp;
            step0_zchi = zchi;
        } else {
            let (fitted_p, reduced) = regress_fitted(&states[k], &zp, m);
            if reduced {
                warnings.push(format!(
                    "regression basis reduced at step {k}; increase the path count for full rank"
                ));
            }
            for (path, p) in p_paths.iter_mut().enumerate() {
                let xi_k = xi(k, &states[k][path]);
                for j in 0..m {
                    p[j] = fitted_p[path * m + j] + dt * xi_k[j];
                }
            }
        }
    }

    // Bootstrap standard errors of the step-0 means.
    let mut se_p0 = vec![0.0; m];
    let mut se_chi0 = vec![vec![0.0; m]; noise_dim];
    if opts.bootstrap_resamples > 1 {
        let mut boot_rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(crate::tree::derive_seed(opts.seed, 0xb001));
        let resamples = opts.bootstrap_resamples;
        let mut boot_p: Vec<Vec<f64>> = Vec::with_capacity(resamples);
        let mut boot_chi: Vec<Vec<Vec<f64>>> = Vec::with_capacity(resamples);
        for _ in 0..resamples {
            let mut mean_p = vec![0.0; m];
            let mut mean_chi = vec![vec![0.0; m]; noise_dim];
            for _ in 0..paths {
                let pick = boot_rng.gen_range(0..paths);
                for j in 0..m {
                    mean_p[j] += step0_zp[pick][j];
                    for i in 0..noise_dim {
                        mean_chi[i][j] += step0_zchi[pick][i][j];
                    }
                }
            }
            mean_p.iter_mut().for_each(|v| *v /= paths as f64);
            mean_chi
                .iter_mut()
                .for_each(|c| c.iter_mut().for_each(|v| *v /= paths as f64));
            boot_p.push(mean_p);
            boot_chi.push(mean_chi);
        }
        let sd = |samples: &[f64]| -> f64 {
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
                / (samples.len() as f64 - 1.0))
                .sqrt()
        };
        for j in 0..m {
            let column: Vec<f64> = boot_p.iter().map(|b| b[j]).collect();
            se_p0[j] = sd(&column);
            for i in 0..noise_dim {
                let column: Vec<f64> = boot_chi.iter().map(|b| b[i][j]).collect();
                se_chi0[i][j] = sd(&column);
            }
        }
    }
    Ok(RegressionOutcome {
        p0,
        chi0,
        se_p0,
        se_chi0,
        paths,
        warnings,
    })
}
