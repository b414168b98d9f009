//! Forward time stepping on the scenario tree.
//!
//! One step from node v at time k to its child c solves
//!
//! ```text
//! u_c = (I - dt A_c)^{-1} [ u_v + sum_i (B_i u_v + h_i(v)) dw_i(c) ] + dt phi(v)
//! ```
//!
//! with A_c assembled at the child's time slice (and the child's node when
//! lambda carries a tree modulation) and B_i, phi, h_i at the parent's. The
//! drift source enters after the implicit solve, so the solution map from
//! each datum is a composition of solves, band multiplies and increments
//! whose transpose can be applied step by step without materializing
//! anything. The backward solver is that transpose, which is what makes the
//! duality identity hold to rounding.
//!
//! Besides the full-slice stepper the module exposes single-impulse solves
//! restricted to the subtree a datum can influence, dense assemblies of the
//! data-to-terminal solution maps under a size guard, and a matrix-free
//! power iteration for their top singular value.

use crate::error::{Error, Result};
use crate::grid::{assemble_a_shifted, assemble_b, CoefficientSet, SpatialGrid};
use crate::linalg::{DenseMatrix, Tridiagonal};
use crate::tree::{AdaptedField, ScenarioTree};
use rayon::prelude::*;

/// Data of one forward problem: an initial slice at `initial_step`, a drift
/// source and one noise source per noise dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardData {
    pub initial_step: usize,
    /// Values over all nodes at `initial_step`, node-major.
    pub initial: Vec<f64>,
    /// Drift source, read at steps `initial_step..steps`.
    pub phi: AdaptedField,
    /// Noise sources h_i, read at steps `initial_step..steps`.
    pub noise_sources: Vec<AdaptedField>,
}

impl ForwardData {
    /// Zero sources, so the solution is linear in `initial` alone.
    pub fn homogeneous(tree: &ScenarioTree, m: usize, initial_step: usize, initial: Vec<f64>) -> Self {
        let last = tree.time.steps.saturating_sub(1).max(initial_step);
        let zero = AdaptedField::zeros(tree, initial_step, last, m);
        let noise_sources = (0..tree.noise_dim).map(|_| zero.clone()).collect();
        ForwardData {
            initial_step,
            initial,
            phi: zero,
            noise_sources,
        }
    }

    /// Seeded random instance: standard normal draws on every data slot, in
    /// a fixed generation order (initial slice, then drift source, then each
    /// noise source, step-major within each field).
    pub fn random(tree: &ScenarioTree, m: usize, initial_step: usize, seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        };
        let mut data =
            ForwardData::homogeneous(tree, m, initial_step, Vec::new());
        data.initial = draw(m * tree.nodes_at(initial_step));
        for k in initial_step..tree.time.steps {
            let len = data.phi.step(k).len();
            data.phi.set_step(k, draw(len));
        }
        for i in 0..tree.noise_dim {
            for k in initial_step..tree.time.steps {
                let len = data.noise_sources[i].step(k).len();
                data.noise_sources[i].set_step(k, draw(len));
            }
        }
        data
    }
}

/// Solution of a forward problem over steps `initial_step..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSolution {
    pub field: AdaptedField,
}

impl ForwardSolution {
    /// Terminal slice, node-major over all leaves.
    pub fn terminal<'a>(&'a self, tree: &ScenarioTree) -> &'a [f64] {
        self.field.step(tree.time.steps)
    }
}

/// Solution of a single-impulse problem, stored only on the subtree of the
/// node that received the impulse; the field is zero everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtreeSolution {
    pub root_step: usize,
    pub root_node: usize,
    pub m: usize,
    /// levels[d] covers step root_step + d with branch^d nodes, node-major.
    pub levels: Vec<Vec<f64>>,
}

impl SubtreeSolution {
    pub fn last_step(&self) -> usize {
        self.root_step + self.levels.len() - 1
    }

    /// Values at (absolute step k, local node index within the subtree).
    pub fn node(&self, k: usize, local: usize) -> &[f64] {
        let level = &self.levels[k - self.root_step];
        &level[local * self.m..(local + 1) * self.m]
    }

    /// Absolute node index of a local subtree node at step k.
    pub fn absolute_node(&self, tree: &ScenarioTree, k: usize, local: usize) -> usize {
        (self.root_node << (tree.noise_dim * (k - self.root_step))) + local
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k - self.root_step]
    }
}

/// The stepping core: grid, tree and coefficients bound together after
/// shape validation.
#[derive(Debug, Clone, Copy)]
pub struct Stepper<'a> {
    pub grid: &'a SpatialGrid,
    pub tree: &'a ScenarioTree,
    pub coeffs: &'a CoefficientSet,
}

impl<'a> Stepper<'a> {
    pub fn new(grid: &'a SpatialGrid, tree: &'a ScenarioTree, coeffs: &'a CoefficientSet) -> Result<Self> {
        if coeffs.m != grid.m {
            return Err(Error::Config(format!(
                "coefficient tables have {} nodes but the grid has {}",
                coeffs.m, grid.m
            )));
        }
        if coeffs.steps != tree.time.steps {
            return Err(Error::Config(format!(
                "coefficient tables cover {} steps but the time grid has {}",
                coeffs.steps, tree.time.steps
            )));
        }
        if coeffs.noise_dim() != tree.noise_dim {
            return Err(Error::Config(format!(
                "coefficients define {} noise operators but the tree drives {}",
                coeffs.noise_dim(),
                tree.noise_dim
            )));
        }
        Ok(Stepper { grid, tree, coeffs })
    }

    /// Zero-order shift of lambda at a tree node: amp * sin(w_1).
    pub fn lambda_shift(&self, k: usize, v: usize) -> f64 {
        let amp = self.coeffs.lambda_tree_amp;
        if amp == 0.0 {
            0.0
        } else {
            amp * self.tree.brownian(0, k, v).sin()
        }
    }

    /// Implicit factor I - dt A at (step, node), the matrix each child slice
    /// is solved against.
    pub fn implicit_factor(&self, k: usize, v: usize) -> Tridiagonal {
        let a = assemble_a_shifted(self.grid, self.coeffs, k, self.lambda_shift(k, v));
        a.matrix.identity_minus_scaled(self.tree.time.dt)
    }

    /// Noise operators B_i at one time slice.
    pub fn noise_operators(&self, k: usize) -> Vec<Tridiagonal> {
        (0..self.tree.noise_dim)
            .map(|i| assemble_b(self.grid, self.coeffs, i, k).matrix)
            .collect()
    }

    /// March the full tree from the data's initial slice to the horizon.
    pub fn run(&self, data: &ForwardData) -> Result<ForwardSolution> {
        let m = self.grid.m;
        let k0 = data.initial_step;
        let last = self.tree.time.steps;
        if k0 > last {
            return Err(Error::Config(format!(
                "initial step {k0} is past the final step {last}"
            )));
        }
        if data.initial.len() != m * self.tree.nodes_at(k0) {
            return Err(Error::Config(format!(
                "initial slice has {} values, expected {} ({} nodes of {})",
                data.initial.len(),
                m * self.tree.nodes_at(k0),
                self.tree.nodes_at(k0),
                m
            )));
        }
        if data.noise_sources.len() != self.tree.noise_dim {
            return Err(Error::Config(format!(
                "{} noise sources supplied for {} noise dimensions",
                data.noise_sources.len(),
                self.tree.noise_dim
            )));
        }
        let mut field = AdaptedField::zeros(self.tree, k0, last, m);
        field.set_step(k0, data.initial.clone());
        for k in k0..last {
            let child_buf = self.advance_slice(k, field.step(k), Some(data))?;
            field.set_step(k + 1, child_buf);
        }
        Ok(ForwardSolution { field })
    }

    /// One step of the scheme: map the full slice at step k to step k + 1.
    /// `data` contributes the sources; `None` runs the homogeneous step.
    fn advance_slice(&self, k: usize, parent_buf: &[f64], data: Option<&ForwardData>) -> Result<Vec<f64>> {
        let m = self.grid.m;
        let n = self.tree.noise_dim;
        let branch = self.tree.branching();
        let dt = self.tree.time.dt;
        let b_ops = self.noise_operators(k);
        let mut child_buf = vec![0.0; m * self.tree.nodes_at(k + 1)];
        child_buf
            .par_chunks_mut(m * branch)
            .enumerate()
            .try_for_each(|(v, chunk)| -> Result<()> {
                let base = &parent_buf[v * m..(v + 1) * m];
                let mut noise_part: Vec<Vec<f64>> = b_ops.iter().map(|b| b.apply(base)).collect();
                if let Some(data) = data {
                    for (i, part) in noise_part.iter_mut().enumerate() {
                        for (p, h) in part.iter_mut().zip(data.noise_sources[i].node(k, v)) {
                            *p += h;
                        }
                    }
                }
                let mut rhs = vec![0.0; m];
                for a in 0..branch {
                    rhs.copy_from_slice(base);
                    for (i, part) in noise_part.iter().enumerate() {
                        let dw = self.tree.increment(i, a);
                        for (r, p) in rhs.iter_mut().zip(part) {
                            *r += dw * p;
                        }
                    }
                    let child = self.tree.first_child(v) + a;
                    let factor = self.implicit_factor(k + 1, child);
                    let mut sol = factor.solve(&rhs)?;
                    if let Some(data) = data {
                        for (s, phi) in sol.iter_mut().zip(data.phi.node(k, v)) {
                            *s += dt * phi;
                        }
                    }
                    chunk[a * m..(a + 1) * m].copy_from_slice(&sol);
                }
                Ok(())
            })?;
        let _ = n;
        Ok(child_buf)
    }

    /// Noise-free marching for convergence studies: the same per-step solve
    /// with all increments zero, over plain slices instead of a tree.
    /// `phi` supplies one source slice per step in `0..slices.len()`.
    pub fn run_deterministic(
        grid: &SpatialGrid,
        coeffs: &CoefficientSet,
        dt: f64,
        initial: &[f64],
        phi: Option<&[Vec<f64>]>,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let m = grid.m;
        debug_assert_eq!(initial.len(), m);
        let mut out = Vec::with_capacity(steps + 1);
        out.push(initial.to_vec());
        for k in 0..steps {
            let a = assemble_a_shifted(grid, coeffs, k + 1, 0.0);
            let factor = a.matrix.identity_minus_scaled(dt);
            let mut next = factor.solve(&out[k])?;
            if let Some(phi) = phi {
                for (s, p) in next.iter_mut().zip(&phi[k]) {
                    *s += dt * p;
                }
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Continue a partially filled subtree solution to the horizon with the
    /// homogeneous step (noise terms active, sources zero).
    fn propagate_subtree(&self, sub: &mut SubtreeSolution) -> Result<()> {
        let m = self.m();
        let n = self.tree.noise_dim;
        let branch = self.tree.branching();
        while sub.last_step() < self.tree.time.steps {
            let k = sub.last_step();
            let parent_buf = sub.levels.last().unwrap().clone();
            let b_ops = self.noise_operators(k);
            let parents = parent_buf.len() / m;
            let mut child_buf = vec![0.0; m * parents * branch];
            child_buf
                .par_chunks_mut(m * branch)
                .enumerate()
                .try_for_each(|(local, chunk)| -> Result<()> {
                    let base = &parent_buf[local * m..(local + 1) * m];
                    let noise_part: Vec<Vec<f64>> = b_ops.iter().map(|b| b.apply(base)).collect();
                    let abs_parent = (sub.root_node << (n * (k - sub.root_step))) + local;
                    let mut rhs = vec![0.0; m];
                    for a in 0..branch {
                        rhs.copy_from_slice(base);
                        for (i, part) in noise_part.iter().enumerate() {
                            let dw = self.tree.increment(i, a);
                            for (r, p) in rhs.iter_mut().zip(part) {
                                *r += dw * p;
                            }
                        }
                        let child = self.tree.first_child(abs_parent) + a;
                        let factor = self.implicit_factor(k + 1, child);
                        let sol = factor.solve(&rhs)?;
                        chunk[a * m..(a + 1) * m].copy_from_slice(&sol);
                    }
                    Ok(())
                })?;
            sub.levels.push(child_buf);
        }
        Ok(())
    }

    fn m(&self) -> usize {
        self.grid.m
    }

    /// Response to a unit initial datum e_x at node (k, r).
    pub fn impulse_initial(&self, k: usize, r: usize, x: usize) -> Result<SubtreeSolution> {
        let m = self.m();
        let mut level = vec![0.0; m];
        level[x] = 1.0;
        let mut sub = SubtreeSolution {
            root_step: k,
            root_node: r,
            m,
            levels: vec![level],
        };
        self.propagate_subtree(&mut sub)?;
        Ok(sub)
    }

    /// Response to a unit drift source e_x placed at node (k, v): children
    /// receive dt e_x verbatim, then the solution propagates homogeneously.
    pub fn impulse_drift(&self, k: usize, v: usize, x: usize) -> Result<SubtreeSolution> {
        debug_assert!(k < self.tree.time.steps);
        let m = self.m();
        let branch = self.tree.branching();
        let dt = self.tree.time.dt;
        let mut children = vec![0.0; m * branch];
        for a in 0..branch {
            children[a * m + x] = dt;
        }
        let mut sub = SubtreeSolution {
            root_step: k,
            root_node: v,
            m,
            levels: vec![vec![0.0; m], children],
        };
        self.propagate_subtree(&mut sub)?;
        Ok(sub)
    }

    /// Response to a unit noise source e_x in dimension i at node (k, v):
    /// each child solves against its increment-weighted impulse.
    pub fn impulse_noise(&self, k: usize, v: usize, x: usize, i: usize) -> Result<SubtreeSolution> {
        debug_assert!(k < self.tree.time.steps);
        let m = self.m();
        let branch = self.tree.branching();
        let mut children = vec![0.0; m * branch];
        let mut rhs = vec![0.0; m];
        for a in 0..branch {
            rhs.iter_mut().for_each(|r| *r = 0.0);
            rhs[x] = self.tree.increment(i, a);
            let child = self.tree.first_child(v) + a;
            let factor = self.implicit_factor(k + 1, child);
            let sol = factor.solve(&rhs)?;
            children[a * m..(a + 1) * m].copy_from_slice(&sol);
        }
        let mut sub = SubtreeSolution {
            root_step: k,
            root_node: v,
            m,
            levels: vec![vec![0.0; m], children],
        };
        self.propagate_subtree(&mut sub)?;
        Ok(sub)
    }

    /// The weighted linear functional sum_k dt (xi_k, u_k) + (psi, u_K)
    /// evaluated on a subtree solution, with probability- and h-weighted
    /// pairings; terms outside the subtree vanish and are skipped.
    pub fn subtree_functional(
        &self,
        sub: &SubtreeSolution,
        xi: Option<&AdaptedField>,
        psi: Option<&[f64]>,
    ) -> f64 {
        let m = sub.m;
        let last = self.tree.time.steps;
        let dt = self.tree.time.dt;
        let mut acc = 0.0;
        for k in sub.root_step..=last {
            let weight = self.tree.probability(k) * self.grid.h;
            let locals = sub.level(k).len() / m;
            if k < last {
                if let Some(xi) = xi {
                    if xi.covers(k) {
                        let mut step = 0.0;
                        for local in 0..locals {
                            let abs = sub.absolute_node(self.tree, k, local);
                            step += crate::linalg::dot(xi.node(k, abs), sub.node(k, local));
                        }
                        acc += dt * weight * step;
                    }
                }
            } else if let Some(psi) = psi {
                let mut step = 0.0;
                for local in 0..locals {
                    let abs = sub.absolute_node(self.tree, k, local);
                    step += crate::linalg::dot(&psi[abs * m..(abs + 1) * m], sub.node(k, local));
                }
                acc += weight * step;
            }
        }
        acc
    }

    /// Homogeneous solution map applied matrix-free: slice at `from_step`
    /// marched to the terminal slice.
    pub fn apply_initial_map(&self, from_step: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut current = x.to_vec();
        for k in from_step..self.tree.time.steps {
            current = self.advance_slice(k, &current, None)?;
        }
        Ok(current)
    }

    /// Transpose of the homogeneous solution map, applied matrix-free by
    /// chaining one-step transposes backward: each child contributes
    /// (I + sum_i dw_i B_i^T) S_c^{-T} y_c to its parent.
    pub fn apply_initial_map_transpose(&self, from_step: usize, y: &[f64]) -> Result<Vec<f64>> {
        let m = self.m();
        let branch = self.tree.branching();
        let mut current = y.to_vec();
        for k in (from_step..self.tree.time.steps).rev() {
            let b_ops = self.noise_operators(k);
            let parents = self.tree.nodes_at(k);
            debug_assert_eq!(current.len(), m * parents * branch);
            let child_buf = current;
            let mut parent_buf = vec![0.0; m * parents];
            parent_buf
                .par_chunks_mut(m)
                .enumerate()
                .try_for_each(|(v, slot)| -> Result<()> {
                    for a in 0..branch {
                        let child = self.tree.first_child(v) + a;
                        let factor = self.implicit_factor(k + 1, child);
                        let lam = factor.solve_transpose(&child_buf[child * m..(child + 1) * m])?;
                        for (s, l) in slot.iter_mut().zip(&lam) {
                            *s += l;
                        }
                        for (i, b) in b_ops.iter().enumerate() {
                            let dw = self.tree.increment(i, a);
                            let bt = b.apply_transpose(&lam);
                            for (s, t) in slot.iter_mut().zip(&bt) {
                                *s += dw * t;
                            }
                        }
                    }
                    Ok(())
                })?;
            current = parent_buf;
        }
        Ok(current)
    }
}

/// Which solution map a dense assembly materializes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// Initial slice at `from_step` to the terminal slice.
    InitialToTerminal,
    /// All drift-source slots at steps `from_step..steps` to the terminal
    /// slice.
    DriftToTerminal,
    /// All noise-source slots of dimension i to the terminal slice.
    NoiseToTerminal(usize),
}

/// Dense column-by-column assembly of a solution map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSolveMap {
    pub kind: MapKind,
    pub from_step: usize,
    pub matrix: DenseMatrix,
}

/// Hard ceiling on dense map columns.
pub const MAX_MAP_COLUMNS: usize = 50_000;
/// Hard ceiling on dense map entries (256 MiB of f64 would be 2^25 * 8).
pub const MAX_MAP_ENTRIES: usize = 1 << 25;

impl LinearSolveMap {
    pub fn assemble(stepper: &Stepper, kind: MapKind, from_step: usize) -> Result<Self> {
        let tree = stepper.tree;
        let m = stepper.grid.m;
        let last = tree.time.steps;
        let rows = m * tree.nodes_at(last);
        let cols = match kind {
            MapKind::InitialToTerminal => m * tree.nodes_at(from_step),
            MapKind::DriftToTerminal | MapKind::NoiseToTerminal(_) => {
                (from_step..last).map(|k| m * tree.nodes_at(k)).sum()
            }
        };
        if cols > MAX_MAP_COLUMNS {
            return Err(Error::Resource(format!(
                "dense solution map would need {cols} columns; the cap is {MAX_MAP_COLUMNS}"
            )));
        }
        if rows.saturating_mul(cols) > MAX_MAP_ENTRIES {
            return Err(Error::Resource(format!(
                "dense solution map would hold {} entries ({rows} x {cols}); the cap is {MAX_MAP_ENTRIES}",
                rows.saturating_mul(cols)
            )));
        }
        let mut matrix = DenseMatrix::zeros(rows, cols);
        let mut col = 0usize;
        match kind {
            MapKind::InitialToTerminal => {
                for r in 0..tree.nodes_at(from_step) {
                    for x in 0..m {
                        let sub = stepper.impulse_initial(from_step, r, x)?;
                        write_terminal_column(&mut matrix, col, &sub, tree, m, last);
                        col += 1;
                    }
                }
            }
            MapKind::DriftToTerminal => {
                for k in from_step..last {
                    for v in 0..tree.nodes_at(k) {
                        for x in 0..m {
                            let sub = stepper.impulse_drift(k, v, x)?;
                            write_terminal_column(&mut matrix, col, &sub, tree, m, last);
                            col += 1;
                        }
                    }
                }
            }
            MapKind::NoiseToTerminal(i) => {
                for k in from_step..last {
                    for v in 0..tree.nodes_at(k) {
                        for x in 0..m {
                            let sub = stepper.impulse_noise(k, v, x, i)?;
                            write_terminal_column(&mut matrix, col, &sub, tree, m, last);
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(LinearSolveMap {
            kind,
            from_step,
            matrix,
        })
    }
}

fn write_terminal_column(
    matrix: &mut DenseMatrix,
    col: usize,
    sub: &SubtreeSolution,
    tree: &ScenarioTree,
    m: usize,
    last: usize,
) {
    let level = sub.level(last);
    let locals = level.len() / m;
    for local in 0..locals {
        let abs = sub.absolute_node(tree, last, local);
        for x in 0..m {
            matrix.set(abs * m + x, col, level[local * m + x]);
        }
    }
}

/// Top singular value by power iteration on A^T A with a fixed deterministic
/// start vector and iteration count.
pub fn top_singular_value<F, G>(dim: usize, iters: usize, apply: F, apply_transpose: G) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x: Vec<f64> = (0..dim).map(|j| 1.0 + ((j + 1) as f64 * 0.7).sin()).collect();
    let norm = crate::linalg::dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    let mut sigma_sq = 0.0;
    for _ in 0..iters {
        let ax = apply(&x)?;
        let atax = apply_transpose(&ax)?;
        sigma_sq = crate::linalg::dot(&x, &atax);
        let norm = crate::linalg::dot(&atax, &atax).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        x = atax;
        x.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(sigma_sq.max(0.0).sqrt())
}
