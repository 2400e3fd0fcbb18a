//! Grid sweeps over λ, k, proxy ε, policy thresholds and methods.
//!
//! Grid points run concurrently, each on its own counters and streams, and
//! rows are assembled in grid order.

use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::lemma_check;

use super::config::{parse_pairs, ExperimentConfig, FamilyKind, Method};
use super::corpus::load_source;
use super::experiment::run_with_family;
use super::family::ModelFamily;
use super::HarnessError;

pub const SWEEP_HEADER: &str = "# trispec-sweep v1";

/// Axis values; an empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub method: Vec<Method>,
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub threshold: Vec<f64>,
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| HarnessError::Grid(format!("{key}: bad value '{s}': {e}")))
        })
        .collect()
}

impl SweepGrid {
    pub const KEYS: &'static [&'static str] = &[
        "sweep_method",
        "sweep_k",
        "sweep_lambda",
        "sweep_epsilon",
        "sweep_threshold",
    ];

    /// Set one axis from a comma-separated list; keys are `sweep_lambda`,
    /// `sweep_k`, `sweep_epsilon`, `sweep_threshold` and `sweep_method`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let key = key.replace('-', "_");
        match key.as_str() {
            "sweep_method" => self.method = list(&key, value)?,
            "sweep_k" => self.k = list(&key, value)?,
            "sweep_lambda" => self.lambda = list(&key, value)?,
            "sweep_epsilon" => self.epsilon = list(&key, value)?,
            "sweep_threshold" => self.threshold = list(&key, value)?,
            _ => return Err(HarnessError::Grid(format!("unknown sweep key '{key}'"))),
        }
        Ok(())
    }

    /// Pull `sweep_*` keys out of config text; the rest is returned as-is.
    pub fn split_config(text: &str) -> Result<(SweepGrid, String), HarnessError> {
        let mut grid = SweepGrid::default();
        let mut rest = String::new();
        for (k, v) in parse_pairs(text)? {
            if k.starts_with("sweep_") {
                grid.set(&k, &v)?;
            } else {
                rest.push_str(&format!("{k} = {v}\n"));
            }
        }
        Ok((grid, rest))
    }

    pub fn is_empty(&self) -> bool {
        self.method.is_empty()
            && self.k.is_empty()
            && self.lambda.is_empty()
            && self.epsilon.is_empty()
            && self.threshold.is_empty()
    }

    /// Configs for every grid point, in grid order.
    pub fn points(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, HarnessError> {
        if self.is_empty() {
            return Err(HarnessError::EmptyGrid);
        }
        if !self.epsilon.is_empty() && base.family != FamilyKind::Perturbed {
            return Err(HarnessError::Grid("sweep_epsilon needs family = perturbed".into()));
        }
        fn axis<T: Copy>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let base_threshold = base.relax_param.unwrap_or(base.relax_policy.default_threshold());
        let mut out = Vec::new();
        for &method in &axis(&self.method, base.method) {
            for &k in &axis(&self.k, base.k) {
                for &lambda in &axis(&self.lambda, base.lambda) {
                    for &epsilon in &axis(&self.epsilon, base.proxy_epsilon) {
                        for &threshold in &axis(&self.threshold, base_threshold) {
                            let mut cfg = base.clone();
                            cfg.method = method;
                            cfg.k = k;
                            cfg.lambda = lambda;
                            cfg.proxy_epsilon = epsilon;
                            if !self.threshold.is_empty() {
                                cfg.relax_param = Some(threshold);
                            }
                            cfg.run_id = format!("{}-{}", base.run_id, out.len());
                            cfg.validate()?;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One sweep row; column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub method: String,
    pub k: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub threshold: Option<f64>,
    pub temperature: f64,
    pub n_tokens: u64,
    pub rounds: u64,
    pub tau_mean: f64,
    pub t_d_mean: f64,
    pub t_v_mean: f64,
    pub t_o_mean: f64,
    pub latency: f64,
    pub target_passes: u64,
    pub r_t: f64,
    pub speedup: f64,
    pub proxy_only_rounds: u64,
    pub escalated_rounds: u64,
    pub lemma_residual: f64,
}

impl SweepRow {
    pub fn validate(&self) -> Result<(), String> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if self.rounds == 0 || self.n_tokens == 0 {
            return Err("empty run".into());
        }
        if !(0.0..=1.0).contains(&self.r_t) {
            return Err(format!("r_t {} outside [0, 1]", self.r_t));
        }
        if !close(self.r_t, self.target_passes as f64 / self.n_tokens as f64) {
            return Err("r_t != target_passes / n_tokens".into());
        }
        if !close(self.tau_mean, self.n_tokens as f64 / self.rounds as f64) {
            return Err("tau_mean != n_tokens / rounds".into());
        }
        let per_round = self.t_d_mean + self.t_v_mean + self.t_o_mean;
        if !close(self.latency, self.rounds as f64 * per_round) {
            return Err("latency != rounds * (t_d + t_v + t_o)".into());
        }
        if self.lemma_residual > 1e-9 * self.latency {
            return Err(format!("lemma residual {}", self.lemma_residual));
        }
        match self.method.as_str() {
            "trispec" | "trispec_tree" => {
                if self.proxy_only_rounds + self.escalated_rounds != self.rounds {
                    return Err("ternary rounds do not partition".into());
                }
                if self.escalated_rounds != self.target_passes {
                    return Err("escalations != target passes".into());
                }
            }
            "sd" | "sd_tree" | "target_only" => {
                if self.target_passes != self.rounds {
                    return Err("two-model rounds must call the target once".into());
                }
            }
            "relax" => {}
            other => return Err(format!("unknown method '{other}'")),
        }
        Ok(())
    }
}

/// Run every grid point; rows come back in grid order.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, HarnessError> {
    let points = grid.points(base)?;
    let corpus = load_source(&base.corpus, base.tokenizer)?;
    let family = ModelFamily::build(base, &corpus)?;
    let prompts = corpus.prompts(base.prompt_fraction, base.max_prompts);
    points
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let fam = if grid.epsilon.is_empty() {
                family.handles()
            } else {
                family.with_proxy_epsilon(cfg.proxy_epsilon, cfg.noise)
            };
            let r = run_with_family(cfg, &fam, &prompts)?.report;
            Ok(SweepRow {
                index,
                method: cfg.method.as_str().into(),
                k: cfg.k,
                lambda: cfg.lambda,
                epsilon: cfg.proxy_epsilon,
                threshold: cfg.relax_param,
                temperature: cfg.temperature,
                n_tokens: r.n_tokens,
                rounds: r.rounds,
                tau_mean: r.tau_mean,
                t_d_mean: r.t_d_mean,
                t_v_mean: r.t_v_mean,
                t_o_mean: r.t_o_mean,
                latency: r.latency,
                target_passes: r.target_passes,
                r_t: r.r_t,
                speedup: r.speedup,
                proxy_only_rounds: r.proxy_only_rounds,
                escalated_rounds: r.escalated_rounds,
                lemma_residual: lemma_check(&r),
            })
        })
        .collect()
}

pub fn write_sweep<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<(), HarnessError> {
    writeln!(w, "{SWEEP_HEADER}")?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// Read a sweep CSV, re-validating every row.
pub fn read_sweep<R: Read>(r: R) -> Result<Vec<SweepRow>, HarnessError> {
    let mut reader = BufReader::new(r);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != SWEEP_HEADER {
        return Err(HarnessError::InvalidRow {
            row: 0,
            reason: format!("expected '{SWEEP_HEADER}'"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(reader).deserialize().enumerate() {
        let row: SweepRow = row?;
        row.validate()
            .map_err(|reason| HarnessError::InvalidRow { row: i + 1, reason })?;
        out.push(row);
    }
    Ok(out)
}
