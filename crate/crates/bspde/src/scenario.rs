//! Scenario files: a line-oriented `key = value` format with sections,
//! parsed into a fully validated run configuration.
//!
//! The core keys sit above any section header:
//!
//! ```text
//! M = 16          # interior grid nodes, at least 2
//! K = 8           # time steps
//! N = 1           # driving noise dimension, 1 or 2
//! T = 1.0         # horizon
//! model = tree    # tree | montecarlo (default tree)
//! paths = 2000    # montecarlo only, at least 2
//! seed = 7        # required for montecarlo and for randomized commands
//! left = 0.0      # domain endpoints (defaults 0 and 1)
//! right = 1.0
//! ```
//!
//! Coefficients take one, two, or three numbers: a constant, an affine
//! profile `c0 + c1 * x`, or a separable wave `c0 + c1 sin(c2 pi x) cos(pi t)`,
//! with `x` and `t` normalized to the unit interval.
//!
//! ```text
//! [coefficients]
//! b = 1.0
//! f = 0.2 -0.1
//! lambda = -0.3
//! beta_1 = 0.4
//! beta_bar_1 = 0.1
//! delta = 0.5
//! lambda_tree_amp = 0.0
//! beta_taper = 0
//!
//! [data]
//! family = random      # random | low-mode
//!
//! [tolerances]
//! duality = 1e-10
//! semigroup = 1e-10
//! route_agreement = 1e-9
//! causality = 1e-12
//! ```
//!
//! Parsing collects every problem it can find, each tagged with its line
//! number, before reporting them in one configuration error.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CoefficientExpr, CoefficientFamily, CoefficientSet, SpatialGrid};
use crate::tree::{ScenarioTree, TimeGrid, MAX_DEPTH_BITS};

/// How the driving noise is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    /// Exhaustive sign-tree over all increment histories.
    Tree,
    /// Sampled Gaussian paths for the regression route.
    MonteCarlo,
}

/// Data generator selection for the solve and verify commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFamily {
    /// Independent standard normal draws on every data slot.
    Random,
    /// Low-frequency sine profiles with Gaussian modal coefficients.
    LowMode,
}

/// Residual thresholds used by the verification commands.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub duality: f64,
    pub semigroup: f64,
    pub route_agreement: f64,
    pub causality: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            duality: 1e-10,
            semigroup: 1e-10,
            route_agreement: 1e-9,
            causality: 1e-12,
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub m: usize,
    pub left: f64,
    pub right: f64,
    pub horizon: f64,
    pub steps: usize,
    pub noise_dim: usize,
    pub model: NoiseModel,
    pub paths: usize,
    pub seed: Option<u64>,
    pub family: CoefficientFamily,
    pub data_family: DataFamily,
    pub tolerances: Tolerances,
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

struct Parser {
    entries: BTreeMap<(String, String), Entry>,
    violations: Vec<(usize, String)>,
}

impl Parser {
    fn flag(&mut self, line: usize, msg: String) {
        self.violations.push((line, msg));
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        self.entries
            .get_mut(&(section.to_string(), key.to_string()))
            .map(|e| {
                e.used = true;
                (e.line, e.value.clone())
            })
    }

    fn usize_key(&mut self, section: &str, key: &str) -> Option<(usize, usize)> {
        let (line, value) = self.take(section, key)?;
        match value.parse::<usize>() {
            Ok(v) => Some((line, v)),
            Err(_) => {
                self.flag(line, format!("{key} expects an integer, got `{value}`"));
                None
            }
        }
    }

    fn u64_key(&mut self, section: &str, key: &str) -> Option<(usize, u64)> {
        let (line, value) = self.take(section, key)?;
        match value.parse::<u64>() {
            Ok(v) => Some((line, v)),
            Err(_) => {
                self.flag(
                    line,
                    format!("{key} expects an unsigned integer, got `{value}`"),
                );
                None
            }
        }
    }

    fn f64_key(&mut self, section: &str, key: &str) -> Option<(usize, f64)> {
        let (line, value) = self.take(section, key)?;
        match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Some((line, v)),
            _ => {
                self.flag(line, format!("{key} expects a finite number, got `{value}`"));
                None
            }
        }
    }

    fn expr_key(&mut self, section: &str, key: &str) -> Option<(usize, CoefficientExpr)> {
        let (line, value) = self.take(section, key)?;
        let mut numbers = Vec::new();
        for token in value.split_whitespace() {
            match token.parse::<f64>() {
                Ok(v) if v.is_finite() => numbers.push(v),
                _ => {
                    self.flag(
                        line,
                        format!("{key} expects numbers separated by spaces, got `{token}`"),
                    );
                    return None;
                }
            }
        }
        let expr = match numbers.as_slice() {
            [c] => CoefficientExpr::Constant(*c),
            [c0, c1] => CoefficientExpr::AffineX(*c0, *c1),
            [c0, c1, c2] => CoefficientExpr::SinusoidalXT(*c0, *c1, *c2),
            _ => {
                self.flag(
                    line,
                    format!(
                        "{key} expects 1 (constant), 2 (affine), or 3 (sinusoidal) numbers, \
                         got {}",
                        numbers.len()
                    ),
                );
                return None;
            }
        };
        Some((line, expr))
    }
}

const SECTIONS: [&str; 4] = ["", "coefficients", "data", "tolerances"];

fn scan(text: &str) -> Parser {
    let mut parser = Parser {
        entries: BTreeMap::new(),
        violations: Vec::new(),
    };
    let mut section = String::new();
    let mut section_known = true;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            section_known = SECTIONS.contains(&section.as_str());
            if !section_known {
                parser.flag(line, format!("unknown section `[{section}]`"));
            }
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            parser.flag(line, format!("expected `key = value`, got `{trimmed}`"));
            continue;
        };
        if !section_known {
            continue;
        }
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if let Some(prev) = parser.entries.get(&(section.clone(), key.clone())) {
            let msg = format!("duplicate key `{key}` (first set on line {})", prev.line);
            parser.flag(line, msg);
            continue;
        }
        parser.entries.insert(
            (section.clone(), key.clone()),
            Entry {
                line,
                value,
                used: false,
            },
        );
    }
    parser
}

impl Scenario {
    /// Parse and validate scenario text. Every problem found is reported,
    /// tagged with its line number; guard problems that span several keys
    /// are tagged with the line of the key that completes them.
    pub fn parse(text: &str, name: &str) -> Result<Scenario> {
        let mut p = scan(text);

        let m = p.usize_key("", "M");
        let steps = p.usize_key("", "K");
        let noise_dim = p.usize_key("", "N");
        let horizon = p.f64_key("", "T");
        let left = p.f64_key("", "left");
        let right = p.f64_key("", "right");
        let seed = p.u64_key("", "seed");
        let paths = p.usize_key("", "paths");
        let model = match p.take("", "model") {
            None => Some((0, NoiseModel::Tree)),
            Some((line, value)) => match value.as_str() {
                "tree" => Some((line, NoiseModel::Tree)),
                "montecarlo" => Some((line, NoiseModel::MonteCarlo)),
                other => {
                    p.flag(line, format!("model must be tree or montecarlo, got `{other}`"));
                    None
                }
            },
        };

        for (key, label) in [("M", "grid size M"), ("K", "step count K"), ("N", "noise dimension N"), ("T", "horizon T")] {
            if !p.entries.contains_key(&(String::new(), key.to_string())) {
                p.flag(0, format!("missing key `{key}` ({label})"));
            }
        }

        if let Some((line, m)) = m {
            if m < 2 {
                p.flag(line, format!("M must be at least 2, got {m}"));
            }
        }
        if let Some((line, k)) = steps {
            if k == 0 {
                p.flag(line, "K must be at least 1".to_string());
            }
        }
        if let Some((line, n)) = noise_dim {
            if !(1..=2).contains(&n) {
                p.flag(line, format!("N must be 1 or 2, got {n}"));
            }
        }
        if let Some((line, t)) = horizon {
            if t <= 0.0 {
                p.flag(line, format!("T must be positive, got {t}"));
            }
        }
        if let (Some((_, l)), Some((line, r))) = (left, right) {
            if l >= r {
                p.flag(line, format!("domain is empty: left = {l}, right = {r}"));
            }
        }

        if let (Some((_, n)), Some((kline, k)), Some((_, NoiseModel::Tree))) =
            (noise_dim, steps, model)
        {
            if (1..=2).contains(&n) && k >= 1 && n * k > MAX_DEPTH_BITS {
                p.flag(
                    kline,
                    format!(
                        "N = {n} and K = {k} give a tree with 2^(N*K) = 2^{} leaf histories, \
                         past the 2^{MAX_DEPTH_BITS} cap; shrink K or use model = montecarlo",
                        n * k
                    ),
                );
            }
        }
        if let Some((_, NoiseModel::MonteCarlo)) = model {
            if seed.is_none() {
                p.flag(0, "montecarlo model needs `seed =` in the scenario".to_string());
            }
            match paths {
                None => p.flag(0, "montecarlo model needs `paths =` in the scenario".to_string()),
                Some((line, n)) if n < 2 => {
                    p.flag(line, format!("paths must be at least 2, got {n}"));
                }
                _ => {}
            }
        } else if let Some((line, _)) = paths {
            p.flag(line, "paths applies only to model = montecarlo".to_string());
        }

        let b = p.expr_key("coefficients", "b");
        let f = p.expr_key("coefficients", "f");
        let lambda = p.expr_key("coefficients", "lambda");
        let beta = [
            p.expr_key("coefficients", "beta_1"),
            p.expr_key("coefficients", "beta_2"),
        ];
        let beta_bar = [
            p.expr_key("coefficients", "beta_bar_1"),
            p.expr_key("coefficients", "beta_bar_2"),
        ];
        let delta = p.f64_key("coefficients", "delta");
        let lambda_tree_amp = p.f64_key("coefficients", "lambda_tree_amp");
        let beta_taper = p.usize_key("coefficients", "beta_taper");

        if let Some((line, d)) = delta {
            if d <= 0.0 {
                p.flag(line, format!("delta must be positive, got {d}"));
            }
        }
        if let Some((line, amp)) = lambda_tree_amp {
            if amp < 0.0 {
                p.flag(line, format!("lambda_tree_amp must not be negative, got {amp}"));
            }
        }
        if let Some((_, n)) = noise_dim {
            if n == 1 {
                for slot in [&beta[1], &beta_bar[1]] {
                    if let Some((line, _)) = slot {
                        p.flag(*line, "beta_2 and beta_bar_2 need N = 2".to_string());
                    }
                }
            }
        }
        if let (Some((line, taper)), Some((_, m))) = (beta_taper, m) {
            if 2 * taper > m {
                p.flag(
                    line,
                    format!("beta_taper = {taper} zeroes more cells than the grid has ({m})"),
                );
            }
        }

        let data_family = match p.take("data", "family") {
            None => Some((0, DataFamily::Random)),
            Some((line, value)) => match value.as_str() {
                "random" => Some((line, DataFamily::Random)),
                "low-mode" => Some((line, DataFamily::LowMode)),
                other => {
                    p.flag(line, format!("family must be random or low-mode, got `{other}`"));
                    None
                }
            },
        };

        let mut tolerances = Tolerances::default();
        let tolerance_key = |p: &mut Parser, key: &str, slot: &mut f64| {
            if let Some((line, v)) = p.f64_key("tolerances", key) {
                if v <= 0.0 {
                    p.flag(line, format!("{key} tolerance must be positive, got {v}"));
                } else {
                    *slot = v;
                }
            }
        };
        tolerance_key(&mut p, "duality", &mut tolerances.duality);
        tolerance_key(&mut p, "semigroup", &mut tolerances.semigroup);
        tolerance_key(&mut p, "route_agreement", &mut tolerances.route_agreement);
        tolerance_key(&mut p, "causality", &mut tolerances.causality);

        let mut leftovers: Vec<(usize, String)> = p
            .entries
            .iter()
            .filter(|(_, e)| !e.used)
            .map(|((section, key), e)| {
                let place = if section.is_empty() {
                    "at the top level".to_string()
                } else {
                    format!("in section [{section}]")
                };
                (e.line, format!("unknown key `{key}` {place}"))
            })
            .collect();
        p.violations.append(&mut leftovers);

        if !p.violations.is_empty() {
            p.violations.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut msg = format!(
                "scenario `{name}`: {} problem{}",
                p.violations.len(),
                if p.violations.len() == 1 { "" } else { "s" }
            );
            for (line, text) in &p.violations {
                if *line == 0 {
                    msg.push_str(&format!("\n  {text}"));
                } else {
                    msg.push_str(&format!("\n  line {line}: {text}"));
                }
            }
            return Err(Error::Config(msg));
        }

        let noise_dim = noise_dim.map(|(_, v)| v).unwrap_or(1);
        let constant_zero = CoefficientExpr::Constant(0.0);
        let family = CoefficientFamily {
            b: b.map(|(_, e)| e).unwrap_or(CoefficientExpr::Constant(1.0)),
            f: f.map(|(_, e)| e).unwrap_or(constant_zero),
            lambda: lambda.map(|(_, e)| e).unwrap_or(constant_zero),
            beta: (0..noise_dim)
                .map(|i| beta[i].map(|(_, e)| e).unwrap_or(constant_zero))
                .collect(),
            beta_bar: (0..noise_dim)
                .map(|i| beta_bar[i].map(|(_, e)| e).unwrap_or(constant_zero))
                .collect(),
            delta: delta.map(|(_, v)| v).unwrap_or(0.1),
            lambda_tree_amp: lambda_tree_amp.map(|(_, v)| v).unwrap_or(0.0),
            beta_taper_cells: beta_taper.map(|(_, v)| v).unwrap_or(0),
        };

        Ok(Scenario {
            name: name.to_string(),
            m: m.map(|(_, v)| v).unwrap_or(2),
            left: left.map(|(_, v)| v).unwrap_or(0.0),
            right: right.map(|(_, v)| v).unwrap_or(1.0),
            horizon: horizon.map(|(_, v)| v).unwrap_or(1.0),
            steps: steps.map(|(_, v)| v).unwrap_or(1),
            noise_dim,
            model: model.map(|(_, v)| v).unwrap_or(NoiseModel::Tree),
            paths: paths.map(|(_, v)| v).unwrap_or(0),
            seed: seed.map(|(_, v)| v),
            family,
            data_family: data_family.map(|(_, v)| v).unwrap_or(DataFamily::Random),
            tolerances,
        })
    }

    /// Read a scenario file; its stem becomes the scenario name.
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read scenario file {}: {e}", path.display()))
        })?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario")
            .to_string();
        Scenario::parse(&text, &name)
    }

    pub fn grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.left, self.right, self.m)
    }

    pub fn tree(&self) -> Result<ScenarioTree> {
        ScenarioTree::new(TimeGrid::new(self.horizon, self.steps)?, self.noise_dim)
    }

    pub fn coefficients(&self, grid: &SpatialGrid) -> Result<CoefficientSet> {
        CoefficientSet::sample(grid, self.steps, self.horizon, &self.family)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "M = 16\nK = 8\nN = 1\nT = 1\nseed = 1\n";

    #[test]
    fn minimal_file_parses_with_documented_defaults() {
        let s = Scenario::parse(MINIMAL, "minimal").unwrap();
        assert_eq!(s.name, "minimal");
        assert_eq!((s.m, s.steps, s.noise_dim), (16, 8, 1));
        assert_eq!(s.horizon, 1.0);
        assert_eq!(s.seed, Some(1));
        assert_eq!(s.model, NoiseModel::Tree);
        assert_eq!(s.data_family, DataFamily::Random);
        assert_eq!(s.family.b.eval(0.3, 0.7), 1.0);
        assert_eq!(s.family.beta.len(), 1);
        assert_eq!(s.family.delta, 0.1);
        assert_eq!(s.tolerances.duality, 1e-10);
        assert_eq!(s.tolerances.route_agreement, 1e-9);
        assert_eq!(s.tolerances.causality, 1e-12);
        let grid = s.grid().unwrap();
        let coeffs = s.coefficients(&grid).unwrap();
        assert_eq!(coeffs.noise_dim(), 1);
        assert!(s.tree().is_ok());
    }

    #[test]
    fn montecarlo_without_seed_is_rejected() {
        let text = "M = 8\nK = 4\nN = 1\nT = 1\nmodel = montecarlo\npaths = 100\n";
        let err = Scenario::parse(text, "mc").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("needs `seed ="), "{err}");
    }

    #[test]
    fn deep_tree_error_names_the_exponential_bound() {
        let text = "M = 8\nN = 2\nK = 10\nT = 1\nseed = 3\n";
        let err = Scenario::parse(text, "deep").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2^(N*K) = 2^20"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        let shallow = "M = 8\nN = 2\nK = 9\nT = 1\nseed = 3\n";
        assert!(Scenario::parse(shallow, "ok").is_ok());
    }

    #[test]
    fn every_problem_is_listed_with_its_line() {
        let text = "M = 1\nwat = 5\nK = abc\nN = 1\nT = 1\n";
        let err = Scenario::parse(text, "broken").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 problems"), "{msg}");
        assert!(msg.contains("line 1: M must be at least 2"), "{msg}");
        assert!(msg.contains("line 2: unknown key `wat`"), "{msg}");
        assert!(msg.contains("line 3: K expects an integer"), "{msg}");
    }

    #[test]
    fn coefficient_arity_selects_the_profile() {
        let text = concat!(
            "M = 8\nK = 4\nN = 1\nT = 1\nseed = 2\n",
            "[coefficients]\n",
            "b = 2.0\n",
            "f = 0.5 -0.2\n",
            "lambda = 0 0.3 2\n",
            "beta_1 = 0.4\n",
            "delta = 0.5\n",
        );
        let s = Scenario::parse(text, "coeffs").unwrap();
        assert_eq!(s.family.b.eval(0.9, 0.1), 2.0);
        assert_eq!(s.family.f.eval(0.5, 0.0), 0.5 - 0.2 * 0.5);
        let expected = 0.3 * (2.0 * std::f64::consts::PI * 0.25).sin();
        assert!((s.family.lambda.eval(0.25, 0.0) - expected).abs() < 1e-15);
        assert_eq!(s.family.delta, 0.5);
    }

    #[test]
    fn arity_outside_one_to_three_is_a_type_problem() {
        let text = "M = 8\nK = 4\nN = 1\nT = 1\n[coefficients]\nb = 1 2 3 4\n";
        let err = Scenario::parse(text, "arity").unwrap_err();
        assert!(err.to_string().contains("line 6"), "{err}");
        assert!(err.to_string().contains("got 4"), "{err}");
    }

    #[test]
    fn duplicate_keys_point_at_both_lines() {
        let text = "M = 8\nK = 4\nN = 1\nT = 1\nM = 9\n";
        let err = Scenario::parse(text, "dup").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 5: duplicate key `M`"), "{msg}");
        assert!(msg.contains("first set on line 1"), "{msg}");
    }

    #[test]
    fn second_noise_coefficients_need_two_noises() {
        let text = "M = 8\nK = 4\nN = 1\nT = 1\n[coefficients]\nbeta_2 = 0.1\n";
        let err = Scenario::parse(text, "beta2").unwrap_err();
        assert!(err.to_string().contains("need N = 2"), "{err}");
    }

    #[test]
    fn paths_outside_montecarlo_are_rejected() {
        let text = "M = 8\nK = 4\nN = 1\nT = 1\npaths = 50\n";
        let err = Scenario::parse(text, "paths").unwrap_err();
        assert!(err.to_string().contains("only to model = montecarlo"), "{err}");
    }

    #[test]
    fn tolerance_overrides_replace_the_defaults() {
        let text = concat!(
            "M = 8\nK = 4\nN = 1\nT = 1\nseed = 5\n",
            "[tolerances]\nduality = 1e-8\nroute_agreement = 1e-7\n",
        );
        let s = Scenario::parse(text, "tols").unwrap();
        assert_eq!(s.tolerances.duality, 1e-8);
        assert_eq!(s.tolerances.route_agreement, 1e-7);
        assert_eq!(s.tolerances.semigroup, 1e-10);
    }

    #[test]
    fn load_names_the_scenario_after_the_file_stem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desk_run.cfg");
        std::fs::write(&path, MINIMAL).unwrap();
        let s = Scenario::load(&path).unwrap();
        assert_eq!(s.name, "desk_run");
        let missing = Scenario::load(&dir.path().join("absent.cfg")).unwrap_err();
        assert_eq!(missing.exit_code(), 1);
    }

    #[test]
    fn unknown_sections_are_flagged_once_and_their_keys_skipped() {
        let text = "M = 8\nK = 4\nN = 1\nT = 1\n[mystery]\nx = 1\n";
        let err = Scenario::parse(text, "sect").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 5: unknown section `[mystery]`"), "{msg}");
        assert!(!msg.contains("line 6"), "{msg}");
    }
}
