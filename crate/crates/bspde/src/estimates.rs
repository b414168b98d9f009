//! Empirical energy probes and deterministic refinement tables.
//!
//! The probes draw low-frequency random data, solve forward or backward,
//! and record the ratio of solution norms to data norms. Tracking the
//! largest ratio across two grid levels gives an observable stand-in for
//! the stability constant of the scheme: if refinement inflates the ratio,
//! something is leaking h-dependence. The refinement tables run the
//! deterministic heat flow against closed-form decay and report observed
//! convergence orders.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::backward::{solve_backward_tree, BackwardData};
use crate::error::{Error, Result};
use crate::forward::{ForwardData, Stepper};
use crate::grid::{
    spatial_norm, CoefficientFamily, CoefficientSet, SpatialGrid, SpatialNorm,
};
use crate::norms::{c_norm_sq, x_norm_sq};
use crate::tree::{derive_seed, AdaptedField, ScenarioTree};

/// How many spatial derivatives the data norms assume, relative to the
/// mass-weighted l2 scale. `MinusOne` weighs the drift source in the dual
/// norm and the solution up to one derivative; `Zero` moves every norm up
/// one rung, which costs an extra boundary condition on the noise drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularityOffset {
    MinusOne,
    Zero,
}

impl RegularityOffset {
    fn drift_norm(self) -> SpatialNorm {
        match self {
            RegularityOffset::MinusOne => SpatialNorm::Hminus1,
            RegularityOffset::Zero => SpatialNorm::H0,
        }
    }

    fn initial_norm(self) -> SpatialNorm {
        match self {
            RegularityOffset::MinusOne => SpatialNorm::H0,
            RegularityOffset::Zero => SpatialNorm::H1,
        }
    }

    fn noise_source_norm(self) -> SpatialNorm {
        self.initial_norm()
    }

    fn uniform_solution_norm(self) -> SpatialNorm {
        self.initial_norm()
    }

    fn integrated_solution_norm(self) -> SpatialNorm {
        match self {
            RegularityOffset::MinusOne => SpatialNorm::H1,
            RegularityOffset::Zero => SpatialNorm::H2Surrogate,
        }
    }
}

/// Expected squared spatial norm of a node-major slab of values at one step.
fn slab_norm_sq(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    slab: &[f64],
    k: usize,
    kind: SpatialNorm,
) -> f64 {
    let m = grid.m;
    let mut acc = 0.0;
    for v in 0..tree.nodes_at(k) {
        let n = spatial_norm(grid, &slab[v * m..(v + 1) * m], kind);
        acc += n * n;
    }
    acc * tree.probability(k)
}

/// Solution-to-data norm ratio for one forward instance. Returns `None`
/// when the data norms vanish, since the ratio is then vacuous; callers
/// count those instances instead of dividing by zero.
pub fn forward_ratio(
    stepper: &Stepper,
    offset: RegularityOffset,
    data: &ForwardData,
) -> Result<Option<f64>> {
    if offset == RegularityOffset::Zero && !stepper.coeffs.beta_vanishes_near_boundary(2) {
        return Err(Error::Config(
            "the one-extra-derivative ratio needs the noise drift beta to vanish on the \
             two cells nearest each wall; taper beta there before probing at this scale"
                .into(),
        ));
    }
    let tree = stepper.tree;
    let grid = stepper.grid;
    let a = data.initial_step;
    let last = tree.time.steps;

    let mut den = x_norm_sq(tree, grid, &data.phi, offset.drift_norm(), a, last).sqrt();
    den += slab_norm_sq(tree, grid, &data.initial, a, offset.initial_norm()).sqrt();
    for source in &data.noise_sources {
        den += x_norm_sq(tree, grid, source, offset.noise_source_norm(), a, last).sqrt();
    }
    if den == 0.0 {
        return Ok(None);
    }

    let solution = stepper.run(data)?;
    let num = (c_norm_sq(tree, grid, &solution.field, offset.uniform_solution_norm(), a, last)
        + x_norm_sq(
            tree,
            grid,
            &solution.field,
            offset.integrated_solution_norm(),
            a,
            last + 1,
        ))
    .sqrt();
    Ok(Some(num / den))
}

/// Solution-to-data norm ratio for one backward instance, with the noise
/// corrector folded into the solution side. `None` when the data vanish.
pub fn backward_ratio(stepper: &Stepper, data: &BackwardData) -> Result<Option<f64>> {
    let tree = stepper.tree;
    let grid = stepper.grid;
    let a = data.first_step;
    let last = tree.time.steps;

    let mut den = x_norm_sq(tree, grid, &data.xi, SpatialNorm::Hminus1, a, last).sqrt();
    den += slab_norm_sq(tree, grid, &data.terminal, last, SpatialNorm::H0).sqrt();
    if den == 0.0 {
        return Ok(None);
    }

    let solution = solve_backward_tree(stepper, data)?;
    let mut num = (c_norm_sq(tree, grid, &solution.p, SpatialNorm::H0, a, last)
        + x_norm_sq(tree, grid, &solution.p, SpatialNorm::H1, a, last + 1))
    .sqrt();
    for chi in &solution.chi {
        num += x_norm_sq(tree, grid, chi, SpatialNorm::H0, a, last).sqrt();
    }
    Ok(Some(num / den))
}

const LOW_MODES: usize = 3;

/// One spatial slice built from the first few sine modes with Gaussian
/// coefficients, rescaled to unit mass norm. Low frequencies keep the norms
/// comparable across grid levels, so the same seed probes the same shape
/// on a coarse and a fine grid.
fn low_mode_slice(grid: &SpatialGrid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut c = [0.0f64; LOW_MODES];
    for slot in c.iter_mut() {
        *slot = StandardNormal.sample(rng);
    }
    let mut out = vec![0.0; grid.m];
    for (j, slot) in out.iter_mut().enumerate() {
        let xh = grid.x_hat(j);
        *slot = (0..LOW_MODES)
            .map(|q| c[q] * ((q + 1) as f64 * PI * xh).sin())
            .sum();
    }
    let n = spatial_norm(grid, &out, SpatialNorm::H0);
    if n > 0.0 {
        for v in &mut out {
            *v /= n;
        }
    }
    out
}

fn low_mode_field(
    tree: &ScenarioTree,
    grid: &SpatialGrid,
    first: usize,
    last: usize,
    rng: &mut ChaCha8Rng,
) -> AdaptedField {
    let mut field = AdaptedField::zeros(tree, first, last, grid.m);
    for k in first..=last {
        for v in 0..tree.nodes_at(k) {
            let slice = low_mode_slice(grid, rng);
            field.node_mut(k, v).copy_from_slice(&slice);
        }
    }
    field
}

/// Random forward data with low-frequency spatial content: initial slab,
/// drift source, then each noise source, in one fixed draw order.
pub fn low_mode_forward_data(tree: &ScenarioTree, grid: &SpatialGrid, seed: u64) -> ForwardData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = tree.time.steps.saturating_sub(1);
    let mut initial = Vec::with_capacity(tree.nodes_at(0) * grid.m);
    for _ in 0..tree.nodes_at(0) {
        initial.extend(low_mode_slice(grid, &mut rng));
    }
    let phi = low_mode_field(tree, grid, 0, last, &mut rng);
    let noise_sources = (0..tree.noise_dim)
        .map(|_| low_mode_field(tree, grid, 0, last, &mut rng))
        .collect();
    ForwardData {
        initial_step: 0,
        initial,
        phi,
        noise_sources,
    }
}

/// Random backward data with low-frequency spatial content: terminal slab
/// over the leaves, then the drift source.
pub fn low_mode_backward_data(tree: &ScenarioTree, grid: &SpatialGrid, seed: u64) -> BackwardData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = tree.time.steps;
    let mut terminal = Vec::with_capacity(tree.nodes_at(last) * grid.m);
    for _ in 0..tree.nodes_at(last) {
        terminal.extend(low_mode_slice(grid, &mut rng));
    }
    let xi = low_mode_field(tree, grid, 0, last.saturating_sub(1), &mut rng);
    BackwardData {
        first_step: 0,
        terminal,
        xi,
    }
}

/// One recorded instance of a ratio study.
#[derive(Debug, Clone, Copy)]
pub struct RatioRow {
    pub seed: u64,
    pub ratio: f64,
}

/// Ratios collected at one grid level, plus the count of vacuous
/// zero-data instances that were drawn but not recorded.
#[derive(Debug, Clone)]
pub struct RatioStudy {
    pub level_m: usize,
    pub rows: Vec<RatioRow>,
    pub excluded: usize,
}

impl RatioStudy {
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().fold(0.0, |acc, r| acc.max(r.ratio))
    }

    /// Upper 95th percentile by rank: the smallest recorded ratio that at
    /// least 95 percent of the rows do not exceed.
    pub fn p95_ratio(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.ratio).collect();
        v.sort_by(|x, y| x.partial_cmp(y).expect("ratios are finite"));
        let rank = ((v.len() as f64) * 0.95).ceil() as usize;
        v[rank.saturating_sub(1).min(v.len() - 1)]
    }
}

fn ratio_study_core<F>(level_m: usize, samples: usize, seed: u64, eval: F) -> Result<RatioStudy>
where
    F: Fn(u64) -> Result<Option<f64>> + Sync,
{
    let outcomes: Vec<Result<(u64, Option<f64>)>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let instance = derive_seed(seed, i as u64);
            Ok((instance, eval(instance)?))
        })
        .collect();
    let mut rows = Vec::new();
    let mut excluded = 0;
    for outcome in outcomes {
        match outcome? {
            (instance, Some(ratio)) => rows.push(RatioRow {
                seed: instance,
                ratio,
            }),
            (_, None) => excluded += 1,
        }
    }
    Ok(RatioStudy {
        level_m,
        rows,
        excluded,
    })
}

/// Forward ratio study: `samples` low-frequency instances on the stepper's
/// grid, evaluated in parallel with a deterministic per-instance seed.
pub fn forward_ratio_study(
    stepper: &Stepper,
    offset: RegularityOffset,
    samples: usize,
    seed: u64,
) -> Result<RatioStudy> {
    ratio_study_core(stepper.grid.m, samples, seed, |instance| {
        let data = low_mode_forward_data(stepper.tree, stepper.grid, instance);
        forward_ratio(stepper, offset, &data)
    })
}

/// Backward ratio study with the same sampling plan as the forward one.
pub fn backward_ratio_study(stepper: &Stepper, samples: usize, seed: u64) -> Result<RatioStudy> {
    ratio_study_core(stepper.grid.m, samples, seed, |instance| {
        let data = low_mode_backward_data(stepper.tree, stepper.grid, instance);
        backward_ratio(stepper, &data)
    })
}

/// Ratio of worst-case ratios between two levels of the same study. A
/// value near one means refinement did not inflate the stability constant.
pub fn growth_factor(coarse: &RatioStudy, fine: &RatioStudy) -> f64 {
    let c = coarse.max_ratio();
    let f = fine.max_ratio();
    if c == 0.0 {
        if f == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        f / c
    }
}

/// Per-instance CSV: one row per recorded ratio, levels concatenated.
pub fn study_rows_to_csv(studies: &[RatioStudy]) -> String {
    let mut out = String::from("level,seed,ratio\n");
    for study in studies {
        for row in &study.rows {
            out.push_str(&format!("{},{},{}\n", study.level_m, row.seed, row.ratio));
        }
    }
    out
}

/// Per-level CSV: aggregates plus the growth factor against the previous
/// level (the first level reports 1).
pub fn study_summary_to_csv(studies: &[RatioStudy]) -> String {
    let mut out = String::from("level,max_ratio,p95_ratio,growth_factor\n");
    let mut prev: Option<&RatioStudy> = None;
    for study in studies {
        let growth = match prev {
            None => 1.0,
            Some(p) => growth_factor(p, study),
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            study.level_m,
            study.max_ratio(),
            study.p95_ratio(),
            growth
        ));
        prev = Some(study);
    }
    out
}

/// One level of a deterministic refinement table.
#[derive(Debug, Clone, Copy)]
pub struct RefinementRow {
    pub level: usize,
    pub m: usize,
    pub steps: usize,
    pub error: f64,
    /// Observed order against the previous level; absent on the first row.
    pub observed_order: Option<f64>,
}

fn heat_family() -> CoefficientFamily {
    CoefficientFamily::constant(1.0, 0.0, 0.0, vec![0.0], vec![0.0], 0.5)
}

fn first_mode(grid: &SpatialGrid) -> Vec<f64> {
    (0..grid.m).map(|j| (PI * grid.x_hat(j)).sin()).collect()
}

fn heat_terminal_error(grid: &SpatialGrid, steps: usize, horizon: f64, decay: f64) -> Result<f64> {
    let coeffs = CoefficientSet::sample(grid, steps, horizon, &heat_family())?;
    let dt = horizon / steps as f64;
    let initial = first_mode(grid);
    let states = Stepper::run_deterministic(grid, &coeffs, dt, &initial, None, steps)?;
    let diff: Vec<f64> = states[steps]
        .iter()
        .zip(&initial)
        .map(|(u, s)| u - decay * s)
        .collect();
    Ok(spatial_norm(grid, &diff, SpatialNorm::H0))
}

/// Heat-flow refinement in space: the first sine mode decays to
/// exp(-pi^2 T) times itself, and the step count is tied to h^2 so the
/// terminal error tracks the spatial order. Expected orders sit near two.
pub fn space_refinement_study(levels: usize) -> Result<Vec<RefinementRow>> {
    let horizon = 0.1;
    let mut rows: Vec<RefinementRow> = Vec::with_capacity(levels);
    for level in 0..levels {
        let m = (1usize << (level + 3)) - 1;
        let grid = SpatialGrid::new(0.0, 1.0, m)?;
        let steps = (horizon / (grid.h * grid.h)).ceil() as usize;
        let error = heat_terminal_error(&grid, steps, horizon, (-PI * PI * horizon).exp())?;
        let observed_order = rows.last().map(|p| {
            (p.error / error).log2() / (((m + 1) as f64) / ((p.m + 1) as f64)).log2()
        });
        rows.push(RefinementRow {
            level,
            m,
            steps,
            error,
            observed_order,
        });
    }
    Ok(rows)
}

/// Heat-flow refinement in time on a fixed grid. The first sine mode is an
/// exact eigenvector of the discrete diffusion, so comparing against the
/// exact decay of that eigenvalue isolates the time-stepping order, which
/// sits near one for the implicit step.
pub fn time_refinement_study(levels: usize) -> Result<Vec<RefinementRow>> {
    let horizon = 0.5;
    let m = 15;
    let grid = SpatialGrid::new(0.0, 1.0, m)?;
    let mu = (2.0 / (grid.h * grid.h)) * (1.0 - (PI * grid.h).cos());
    let decay = (-mu * horizon).exp();
    let mut rows: Vec<RefinementRow> = Vec::with_capacity(levels);
    for level in 0..levels {
        let steps = 16usize << level;
        let error = heat_terminal_error(&grid, steps, horizon, decay)?;
        let observed_order = rows
            .last()
            .map(|p| (p.error / error).log2() / ((steps as f64) / (p.steps as f64)).log2());
        rows.push(RefinementRow {
            level,
            m,
            steps,
            error,
            observed_order,
        });
    }
    Ok(rows)
}

/// Refinement table CSV; the first row leaves the order column empty.
pub fn refinement_rows_to_csv(rows: &[RefinementRow]) -> String {
    let mut out = String::from("level,m,steps,error,observed_order\n");
    for row in rows {
        let order = row
            .observed_order
            .map(|o| format!("{}", o))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.level, row.m, row.steps, row.error, order
        ));
    }
    out
}
