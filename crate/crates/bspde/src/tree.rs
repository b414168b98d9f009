//! Time grid and the finitely-generated noise model: a 2^N-ary scenario tree
//! whose edges carry independent Rademacher increments of size sqrt(dt) per
//! noise dimension.
//!
//! Every node at step k has probability 2^(-N k), an exact dyadic, so
//! conditional expectations are exact dyadic means and expectation sums lose
//! almost nothing to rounding. Filtration structure is positional: the node
//! index at step k is the leading N*k bits of any leaf below it, which makes
//! prefix extraction, parent lookup and adaptedness checks pure bit
//! arithmetic.

use crate::error::{Error, Result};
use std::fmt::Write as _;

/// Largest admissible N * K; the tree has 2^(N K) leaves.
pub const MAX_DEPTH_BITS: usize = 18;

/// Uniform time grid on [0, horizon] with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        Ok(TimeGrid {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Map a continuous time to its grid index, rejecting times that do not
    /// sit on a node within 1e-9 of the horizon scale.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let ratio = t / self.dt;
        let k = ratio.round();
        let tol = 1e-9 * self.horizon;
        if !(k >= 0.0) || k > self.steps as f64 || (t - k * self.dt).abs() > tol {
            return Err(Error::Config(format!(
                "time {t} does not lie on the grid (dt = {}, steps = {})",
                self.dt, self.steps
            )));
        }
        Ok(k as usize)
    }
}

/// The scenario tree: time grid plus noise dimension.
///
/// Nodes at step k are indexed 0..2^(N k); the children of node v are
/// v * 2^N + a for local index a in 0..2^N, and bit i of a is the sign of
/// the i-th noise increment on that edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioTree {
    pub time: TimeGrid,
    pub noise_dim: usize,
}

impl ScenarioTree {
    pub fn new(time: TimeGrid, noise_dim: usize) -> Result<Self> {
        if noise_dim == 0 || noise_dim > 2 {
            return Err(Error::Config(format!(
                "noise dimension must be 1 or 2, got {noise_dim}"
            )));
        }
        let depth_bits = noise_dim * time.steps;
        if depth_bits > MAX_DEPTH_BITS {
            return Err(Error::Resource(format!(
                "scenario tree would hold 2^{depth_bits} leaves; the exact solver is capped at \
                 2^{MAX_DEPTH_BITS} (noise_dim * steps <= {MAX_DEPTH_BITS}). Use the regression \
                 solver for longer horizons."
            )));
        }
        Ok(ScenarioTree { time, noise_dim })
    }

    /// Children per node.
    pub fn branching(&self) -> usize {
        1 << self.noise_dim
    }

    pub fn nodes_at(&self, k: usize) -> usize {
        debug_assert!(k <= self.time.steps);
        1 << (self.noise_dim * k)
    }

    pub fn leaves(&self) -> usize {
        self.nodes_at(self.time.steps)
    }

    /// Index of the first child of `v` one step later.
    pub fn first_child(&self, v: usize) -> usize {
        v << self.noise_dim
    }

    pub fn parent(&self, child: usize) -> usize {
        child >> self.noise_dim
    }

    /// Local child index (the increment-sign digit) of a child node.
    pub fn child_local(&self, child: usize) -> usize {
        child & (self.branching() - 1)
    }

    /// Sign of the i-th noise increment on the edge labeled `local`.
    pub fn sign(&self, i: usize, local: usize) -> f64 {
        debug_assert!(i < self.noise_dim);
        if (local >> i) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Rademacher increment of noise i on the edge labeled `local`.
    pub fn increment(&self, i: usize, local: usize) -> f64 {
        self.sign(i, local) * self.time.dt.sqrt()
    }

    /// Probability of each node at step k, the exact dyadic 2^(-N k).
    pub fn probability(&self, k: usize) -> f64 {
        0.5f64.powi((self.noise_dim * k) as i32)
    }

    /// Ancestor of `leaf` at step `k`.
    pub fn leaf_prefix(&self, leaf: usize, k: usize) -> usize {
        leaf >> (self.noise_dim * (self.time.steps - k))
    }

    /// Partial sum of the i-th noise along the path from the root to node
    /// (k, v).
    pub fn brownian(&self, i: usize, k: usize, v: usize) -> f64 {
        let mut w = 0.0;
        for s in 0..k {
            let local = (v >> (self.noise_dim * (k - 1 - s))) & (self.branching() - 1);
            w += self.increment(i, local);
        }
        w
    }
}

/// A process adapted to the tree filtration: per-step contiguous buffers of
/// `m` values per node, covering steps `first_step..=last_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    pub first_step: usize,
    pub m: usize,
    steps: Vec<Vec<f64>>,
}

impl AdaptedField {
    pub fn zeros(tree: &ScenarioTree, first_step: usize, last_step: usize, m: usize) -> Self {
        debug_assert!(first_step <= last_step && last_step <= tree.time.steps);
        let steps = (first_step..=last_step)
            .map(|k| vec![0.0; m * tree.nodes_at(k)])
            .collect();
        AdaptedField { first_step, m, steps }
    }

    pub fn last_step(&self) -> usize {
        self.first_step + self.steps.len() - 1
    }

    pub fn covers(&self, k: usize) -> bool {
        k >= self.first_step && k <= self.last_step()
    }

    /// Values at node (k, v).
    pub fn node(&self, k: usize, v: usize) -> &[f64] {
        let buf = &self.steps[k - self.first_step];
        &buf[v * self.m..(v + 1) * self.m]
    }

    pub fn node_mut(&mut self, k: usize, v: usize) -> &mut [f64] {
        let buf = &mut self.steps[k - self.first_step];
        &mut buf[v * self.m..(v + 1) * self.m]
    }

    /// The whole step-k buffer, nodes in index order.
    pub fn step(&self, k: usize) -> &[f64] {
        &self.steps[k - self.first_step]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.steps[k - self.first_step]
    }

    pub fn set_step(&mut self, k: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.steps[k - self.first_step].len());
        self.steps[k - self.first_step] = values;
    }
}

/// Mean of the step-(k+1) values of `field` over each step-k node's
/// children: an exact dyadic mean, bit-exact on constant children.
pub fn conditional_expectation(tree: &ScenarioTree, field: &AdaptedField, k_parent: usize) -> Vec<f64> {
    let m = field.m;
    let branch = tree.branching();
    let scale = 1.0 / branch as f64;
    let parents = tree.nodes_at(k_parent);
    let child_buf = field.step(k_parent + 1);
    let mut out = vec![0.0; m * parents];
    for v in 0..parents {
        let first = tree.first_child(v);
        let acc = &mut out[v * m..(v + 1) * m];
        for a in 0..branch {
            let child = &child_buf[(first + a) * m..(first + a + 1) * m];
            for (o, c) in acc.iter_mut().zip(child) {
                *o += c;
            }
        }
        for o in acc.iter_mut() {
            *o *= scale;
        }
    }
    out
}

/// Expectation of the step-k values of `field`: probability-weighted sum
/// over nodes in index order.
pub fn expectation(tree: &ScenarioTree, field: &AdaptedField, k: usize) -> Vec<f64> {
    let m = field.m;
    let mut out = vec![0.0; m];
    for v in 0..tree.nodes_at(k) {
        for (o, x) in out.iter_mut().zip(field.node(k, v)) {
            *o += x;
        }
    }
    let p = tree.probability(k);
    for o in out.iter_mut() {
        *o *= p;
    }
    out
}

/// Discrete stochastic integral of an adapted integrand against noise `i`:
/// I_{k+1} = I_k + g_k dw_i on each edge, started at zero.
pub fn stochastic_integral(tree: &ScenarioTree, integrand: &AdaptedField, i: usize) -> AdaptedField {
    let m = integrand.m;
    let first = integrand.first_step;
    let last = integrand.last_step() + 1;
    debug_assert!(last <= tree.time.steps);
    let mut out = AdaptedField::zeros(tree, first, last, m);
    let branch = tree.branching();
    for k in first..last {
        for v in 0..tree.nodes_at(k) {
            let base: Vec<f64> = out.node(k, v).to_vec();
            let g: Vec<f64> = integrand.node(k, v).to_vec();
            let fc = tree.first_child(v);
            for a in 0..branch {
                let dw = tree.increment(i, a);
                let slot = out.node_mut(k + 1, fc + a);
                for ((s, b), gv) in slot.iter_mut().zip(&base).zip(&g) {
                    *s = b + gv * dw;
                }
            }
        }
    }
    out
}

/// One row of a path-table dump: values of a process along one leaf path at
/// one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRow {
    pub path: usize,
    pub step: usize,
    pub values: Vec<f64>,
}

/// Increments of every noise dimension along every leaf path, as CSV.
pub fn paths_to_csv(tree: &ScenarioTree) -> String {
    let mut out = String::from("path_id,step");
    for i in 1..=tree.noise_dim {
        let _ = write!(out, ",dw_{i}");
    }
    out.push('\n');
    for leaf in 0..tree.leaves() {
        for k in 1..=tree.time.steps {
            let node = tree.leaf_prefix(leaf, k);
            let local = tree.child_local(node);
            let _ = write!(out, "{leaf},{k}");
            for i in 0..tree.noise_dim {
                let _ = write!(out, ",{}", tree.increment(i, local));
            }
            out.push('\n');
        }
    }
    out
}

/// Rebuild an adapted field from leaf-path rows, verifying adaptedness: rows
/// for paths that share the step-k ancestor must carry identical values.
///
/// Every leaf path must be present at every step in `first_step..=last_step`,
/// where the range is inferred from the rows.
pub fn field_from_path_rows(tree: &ScenarioTree, rows: &[PathRow]) -> Result<AdaptedField> {
    let first_row = rows
        .first()
        .ok_or_else(|| Error::Data("path table is empty".into()))?;
    let m = first_row.values.len();
    let mut first_step = usize::MAX;
    let mut last_step = 0usize;
    for row in rows {
        if row.path >= tree.leaves() {
            return Err(Error::Data(format!(
                "path id {} out of range (tree has {} leaf paths)",
                row.path,
                tree.leaves()
            )));
        }
        if row.step > tree.time.steps {
            return Err(Error::Data(format!(
                "step {} out of range (tree has {} steps)",
                row.step, tree.time.steps
            )));
        }
        if row.values.len() != m {
            return Err(Error::Data(format!(
                "path {} step {}: expected {} values per row, got {}",
                row.path,
                row.step,
                m,
                row.values.len()
            )));
        }
        first_step = first_step.min(row.step);
        last_step = last_step.max(row.step);
    }
    let mut field = AdaptedField::zeros(tree, first_step, last_step, m);
    let mut writer: Vec<Vec<Option<usize>>> = (first_step..=last_step)
        .map(|k| vec![None; tree.nodes_at(k)])
        .collect();
    for row in rows {
        let node = tree.leaf_prefix(row.path, row.step);
        let claimed = &mut writer[row.step - first_step][node];
        match *claimed {
            None => {
                *claimed = Some(row.path);
                field.node_mut(row.step, node).copy_from_slice(&row.values);
            }
            Some(prev) => {
                if field.node(row.step, node) != row.values.as_slice() {
                    return Err(Error::Data(format!(
                        "paths {prev} and {} share history through step {} but disagree there; \
                         the table is not adapted",
                        row.path, row.step
                    )));
                }
            }
        }
    }
    for (ki, step_writers) in writer.iter().enumerate() {
        if let Some(node) = step_writers.iter().position(|w| w.is_none()) {
            return Err(Error::Data(format!(
                "path table incomplete: no row reaches node {} at step {}",
                node,
                first_step + ki
            )));
        }
    }
    Ok(field)
}

/// Derive a child seed from a root seed and a stream index; the SplitMix64
/// finalizer keeps distinct streams decorrelated and is portable across
/// platforms.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(steps: usize, noise_dim: usize) -> ScenarioTree {
        ScenarioTree::new(TimeGrid::new(1.0, steps).unwrap(), noise_dim).unwrap()
    }

    #[test]
    fn depth_and_dimension_guards() {
        let time = TimeGrid::new(1.0, 8).unwrap();
        assert!(ScenarioTree::new(time, 3).is_err());
        assert!(ScenarioTree::new(time, 0).is_err());
        let deep = TimeGrid::new(1.0, 10).unwrap();
        let err = ScenarioTree::new(deep, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2^20"), "got: {msg}");
        assert!(msg.contains("regression"), "got: {msg}");
        assert_eq!(err.exit_code(), 1);
        assert!(ScenarioTree::new(TimeGrid::new(1.0, 9).unwrap(), 2).is_ok());
    }

    #[test]
    fn increment_moments_are_exact() {
        for (steps, n) in [(6, 1), (4, 2)] {
            let t = tree(steps, n);
            let branch = t.branching();
            let w = 1.0 / branch as f64;
            for i in 0..n {
                let mean: f64 = (0..branch).map(|a| w * t.increment(i, a)).sum();
                assert_eq!(mean, 0.0);
                let second: f64 = (0..branch).map(|a| w * t.increment(i, a).powi(2)).sum();
                assert!((second - t.time.dt).abs() <= 1e-13 * t.time.dt);
                for a in 0..branch {
                    assert_eq!(t.increment(i, a).abs(), t.time.dt.sqrt());
                }
            }
            if n == 2 {
                let cross: f64 = (0..branch)
                    .map(|a| w * t.increment(0, a) * t.increment(1, a))
                    .sum();
                assert_eq!(cross, 0.0);
            }
        }
    }

    #[test]
    fn node_probabilities_sum_to_one_exactly() {
        let t = tree(6, 2);
        for k in 0..=6 {
            let total: f64 = (0..t.nodes_at(k)).map(|_| t.probability(k)).sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn brownian_partial_sums_walk_the_tree() {
        let t = tree(7, 1);
        assert_eq!(t.brownian(0, 0, 0), 0.0);
        for k in 0..7 {
            for v in 0..t.nodes_at(k) {
                let w = t.brownian(0, k, v);
                for a in 0..t.branching() {
                    let child = t.first_child(v) + a;
                    let expect = w + t.increment(0, a);
                    assert_eq!(t.brownian(0, k + 1, child), expect);
                }
            }
        }
        // Second moment of the partial sum grows linearly in time.
        let mut field = AdaptedField::zeros(&t, 0, 7, 1);
        for k in 0..=7 {
            for v in 0..t.nodes_at(k) {
                field.node_mut(k, v)[0] = t.brownian(0, k, v).powi(2);
            }
        }
        for k in 0..=7 {
            let second = expectation(&t, &field, k)[0];
            let expect = k as f64 * t.time.dt;
            assert!((second - expect).abs() <= 1e-13 * (1.0 + expect));
        }
    }

    #[test]
    fn prefix_chain_is_consistent() {
        let t = tree(5, 2);
        for leaf in 0..t.leaves() {
            assert_eq!(t.leaf_prefix(leaf, 5), leaf);
            assert_eq!(t.leaf_prefix(leaf, 0), 0);
            for k in 0..5 {
                assert_eq!(t.leaf_prefix(leaf, k), t.parent(t.leaf_prefix(leaf, k + 1)));
            }
        }
    }

    #[test]
    fn conditional_expectation_tower_property() {
        let t = tree(6, 1);
        let k = 4;
        let mut field = AdaptedField::zeros(&t, 0, k + 1, 2);
        for v in 0..t.nodes_at(k + 1) {
            let x = (v as f64 * 0.731).sin();
            field.node_mut(k + 1, v).copy_from_slice(&[x, x * x + 0.5]);
        }
        let flat = expectation(&t, &field, k + 1);
        let projected = conditional_expectation(&t, &field, k);
        let mut coarse = AdaptedField::zeros(&t, k, k, 2);
        coarse.set_step(k, projected);
        let nested = expectation(&t, &coarse, k);
        for (a, b) in flat.iter().zip(&nested) {
            assert!((a - b).abs() <= 1e-13 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn conditional_expectation_fixes_measurable_fields() {
        // A field lifted from step k to step k+1 (constant on siblings) is
        // returned bit-exactly: dyadic means of equal values are exact.
        let t = tree(5, 2);
        let k = 3;
        let mut lifted = AdaptedField::zeros(&t, k + 1, k + 1, 3);
        let mut parents = Vec::new();
        for v in 0..t.nodes_at(k) {
            let vals = [(v as f64).cos(), 0.1 * v as f64, -2.5];
            parents.push(vals);
            for a in 0..t.branching() {
                lifted
                    .node_mut(k + 1, t.first_child(v) + a)
                    .copy_from_slice(&vals);
            }
        }
        let back = conditional_expectation(&t, &lifted, k);
        for v in 0..t.nodes_at(k) {
            assert_eq!(&back[v * 3..(v + 1) * 3], &parents[v]);
        }
    }

    #[test]
    fn ito_isometry_on_the_tree() {
        let t = tree(8, 1);
        let mut g = AdaptedField::zeros(&t, 0, 7, 1);
        for k in 0..=7 {
            for v in 0..t.nodes_at(k) {
                g.node_mut(k, v)[0] = 0.3 + (k as f64 + 1.7 * v as f64).sin();
            }
        }
        let integral = stochastic_integral(&t, &g, 0);
        let mut sq = AdaptedField::zeros(&t, 0, 8, 1);
        for k in 0..=8 {
            for v in 0..t.nodes_at(k) {
                sq.node_mut(k, v)[0] = integral.node(k, v)[0].powi(2);
            }
        }
        let lhs = expectation(&t, &sq, 8)[0];
        let mut rhs = 0.0;
        for k in 0..=7 {
            let mut gsq = AdaptedField::zeros(&t, k, k, 1);
            let vals: Vec<f64> = g.step(k).iter().map(|x| x * x).collect();
            gsq.set_step(k, vals);
            rhs += t.time.dt * expectation(&t, &gsq, k)[0];
        }
        assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + rhs.abs()));
        // Martingale property: the integral has mean zero at every step.
        for k in 0..=8 {
            let mean = expectation(&t, &integral, k)[0];
            assert!(mean.abs() <= 1e-13);
        }
    }

    #[test]
    fn path_table_round_trip_and_adaptedness_check() {
        let t = tree(4, 1);
        let mut field = AdaptedField::zeros(&t, 0, 4, 2);
        for k in 0..=4 {
            for v in 0..t.nodes_at(k) {
                field.node_mut(k, v).copy_from_slice(&[
                    (k as f64 + 0.3 * v as f64).sin(),
                    k as f64 - v as f64,
                ]);
            }
        }
        let mut rows = Vec::new();
        for leaf in 0..t.leaves() {
            for k in 0..=4 {
                rows.push(PathRow {
                    path: leaf,
                    step: k,
                    values: field.node(k, t.leaf_prefix(leaf, k)).to_vec(),
                });
            }
        }
        let back = field_from_path_rows(&t, &rows).unwrap();
        assert_eq!(back, field);

        // Corrupt one leaf's value at an interior step: two paths now share
        // history but disagree, which the import must reject.
        rows.iter_mut()
            .find(|r| r.path == 3 && r.step == 2)
            .unwrap()
            .values[0] += 1.0;
        let err = field_from_path_rows(&t, &rows).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not adapted"), "got: {msg}");
        assert!(msg.contains("step 2"), "got: {msg}");
    }

    #[test]
    fn paths_csv_has_one_row_per_leaf_and_step() {
        let t = tree(3, 2);
        let csv = paths_to_csv(&t);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "path_id,step,dw_1,dw_2");
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), t.leaves() * 3);
        let root_dt = t.time.dt.sqrt();
        for line in &body {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4);
            for f in &fields[2..] {
                let v: f64 = f.parse().unwrap();
                assert_eq!(v.abs(), root_dt);
            }
        }
    }

    #[test]
    fn grid_times_round_trip_and_off_grid_times_fail() {
        let time = TimeGrid::new(2.0, 8).unwrap();
        for k in 0..=8 {
            assert_eq!(time.index_of(time.time(k)).unwrap(), k);
        }
        assert!(time.index_of(0.3).is_err());
        assert!(time.index_of(-0.25).is_err());
        assert!(time.index_of(2.25).is_err());
    }

    #[test]
    fn derived_seeds_differ_across_streams() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 0));
    }

    proptest! {
        #[test]
        fn brownian_matches_independent_digit_sum(
            steps in 1usize..8,
            seed in 0u64..1000,
        ) {
            let t = tree(steps, 2);
            let leaf = (seed as usize) % t.leaves();
            for k in 0..=steps {
                let v = t.leaf_prefix(leaf, k);
                for i in 0..2 {
                    let mut acc = 0.0;
                    let mut node = v;
                    let mut signs = Vec::new();
                    for _ in 0..k {
                        signs.push(t.sign(i, t.child_local(node)));
                        node = t.parent(node);
                    }
                    for s in signs.iter().rev() {
                        acc += s * t.time.dt.sqrt();
                    }
                    prop_assert_eq!(t.brownian(i, k, v), acc);
                }
            }
        }
    }
}
