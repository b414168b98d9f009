//! Probability- and mass-weighted pairings of adapted fields, and the
//! process norms built from them.
//!
//! The step-k pairing weighs each node by its probability and each spatial
//! value by the cell width h. Time-integrated quantities use left-endpoint
//! sums over steps, matching the stepper's convention exactly, so the
//! duality identity can hold to rounding. The pairing against a source term
//! of the forward equation projects the backward field one step ahead onto
//! the current filtration first; that is the discrete form of pairing a
//! process against a predictable integrand.

use crate::grid::{spatial_norm, SpatialGrid, SpatialNorm};
use crate::tree::{conditional_expectation, AdaptedField, ScenarioTree};

/// Probability- and h-weighted inner product of two fields at step k.
pub fn step_pairing(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    x: &AdaptedField,
    y: &AdaptedField,
    k: usize,
) -> f64 {
    debug_assert_eq!(x.m, y.m);
    let mut acc = 0.0;
    for v in 0..tree.nodes_at(k) {
        acc += crate::linalg::dot(x.node(k, v), y.node(k, v));
    }
    acc * tree.probability(k) * grid.h
}

/// Left-endpoint time sum of step pairings: dt * sum over k in
/// `first..last_exclusive`.
pub fn time_pairing(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    x: &AdaptedField,
    y: &AdaptedField,
    first: usize,
    last_exclusive: usize,
) -> f64 {
    let mut acc = 0.0;
    for k in first..last_exclusive {
        acc += step_pairing(tree, grid, x, y, k);
    }
    acc * tree.time.dt
}

/// Pairing of a backward field against a forward source: at each step the
/// backward field one step ahead is projected onto the current filtration,
/// then paired and summed with left-endpoint weights.
pub fn projected_pairing(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    p: &AdaptedField,
    source: &AdaptedField,
    first: usize,
    last_exclusive: usize,
) -> f64 {
    debug_assert_eq!(p.m, source.m);
    let m = p.m;
    let mut acc = 0.0;
    for k in first..last_exclusive {
        let projected = conditional_expectation(tree, p, k);
        let mut step = 0.0;
        for v in 0..tree.nodes_at(k) {
            step += crate::linalg::dot(&projected[v * m..(v + 1) * m], source.node(k, v));
        }
        acc += step * tree.probability(k) * grid.h;
    }
    acc * tree.time.dt
}

/// Expected squared spatial norm of a field at step k.
pub fn expected_norm_sq(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    field: &AdaptedField,
    k: usize,
    kind: SpatialNorm,
) -> f64 {
    let mut acc = 0.0;
    for v in 0..tree.nodes_at(k) {
        let n = spatial_norm(grid, field.node(k, v), kind);
        acc += n * n;
    }
    acc * tree.probability(k)
}

/// Squared time-integrated norm: dt * sum of expected squared spatial norms
/// over `first..last_exclusive`.
pub fn x_norm_sq(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    field: &AdaptedField,
    kind: SpatialNorm,
    first: usize,
    last_exclusive: usize,
) -> f64 {
    let mut acc = 0.0;
    for k in first..last_exclusive {
        acc += expected_norm_sq(tree, grid, field, k, kind);
    }
    acc * tree.time.dt
}

/// Squared uniform-in-time norm: max over `first..=last` of the expected
/// squared spatial norm.
pub fn c_norm_sq(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    field: &AdaptedField,
    kind: SpatialNorm,
    first: usize,
    last: usize,
) -> f64 {
    let mut acc = 0.0f64;
    for k in first..=last {
        acc = acc.max(expected_norm_sq(tree, grid, field, k, kind));
    }
    acc
}
