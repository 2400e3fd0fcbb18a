//! Cost ledger, run reports and the margin-stratified outcome histogram.
//!
//! Every round is charged `drafter_calls · c_d` for drafting, one `c_p` per
//! proxy pass and one `c_t` per target pass for verification, plus `t_o`.
//! The latency `L` is the plain sum of these charges, so
//! `L = (N / τ) · (t_d + t_v + t_o)` holds with `τ = N / rounds` and per-round
//! means.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ModelOracle;
use crate::prob::{top2_margin, TokenId};
use crate::router::{RoundCase, RoundOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cost '{name}' must be a finite non-negative number, got {value}")]
    NegativeCost { name: &'static str, value: f64 },
    #[error("histogram needs at least one bin and one position")]
    EmptyHistogram,
}

/// Abstract per-pass costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_d: f64,
    pub c_p: f64,
    pub c_t: f64,
    pub t_o: f64,
    /// Optional surcharge per scored position in a proxy / target pass.
    #[serde(default)]
    pub c_p_token: f64,
    #[serde(default)]
    pub c_t_token: f64,
    /// Per-token overhead of the target-only baseline.
    #[serde(default)]
    pub baseline_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_d: 1.0,
            c_p: 5.0,
            c_t: 90.0,
            t_o: 0.0,
            c_p_token: 0.0,
            c_t_token: 0.0,
            baseline_overhead: 0.0,
        }
    }
}

impl CostModel {
    pub fn new(c_d: f64, c_p: f64, c_t: f64, t_o: f64) -> Self {
        Self {
            c_d,
            c_p,
            c_t,
            t_o,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let fields = [
            ("c_d", self.c_d),
            ("c_p", self.c_p),
            ("c_t", self.c_t),
            ("t_o", self.t_o),
            ("c_p_token", self.c_p_token),
            ("c_t_token", self.c_t_token),
            ("baseline_overhead", self.baseline_overhead),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(MetricsError::NegativeCost { name, value });
            }
        }
        Ok(())
    }

    /// Message when the expected `c_d <= c_p <= c_t` ordering is broken.
    pub fn ordering_warning(&self) -> Option<String> {
        if self.c_d <= self.c_p && self.c_p <= self.c_t {
            None
        } else {
            Some(format!(
                "unusual cost ordering c_d={} c_p={} c_t={}",
                self.c_d, self.c_p, self.c_t
            ))
        }
    }

    pub fn charge(&self, outcome: &RoundOutcome) -> RoundCost {
        let mut verification = 0.0;
        if outcome.proxy_called {
            verification += self.c_p + self.c_p_token * outcome.proxy_positions as f64;
        }
        if outcome.target_called {
            verification += self.c_t + self.c_t_token * outcome.target_positions as f64;
        }
        RoundCost {
            drafting: outcome.drafter_calls as f64 * self.c_d,
            verification,
            overhead: self.t_o,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundCost {
    pub drafting: f64,
    pub verification: f64,
    pub overhead: f64,
}

impl RoundCost {
    pub fn total(&self) -> f64 {
        self.drafting + self.verification + self.overhead
    }
}

/// Per-round entry kept in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub case: RoundCase,
    pub tau_a: Option<usize>,
    pub tau_m: Option<usize>,
    pub tau_t: Option<usize>,
    pub emitted: usize,
    pub proxy_called: bool,
    pub target_called: bool,
    pub cost: RoundCost,
}

impl RoundRecord {
    pub fn new(outcome: &RoundOutcome, cost: RoundCost) -> Self {
        Self {
            case: outcome.case,
            tau_a: outcome.tau_a,
            tau_m: outcome.tau_m,
            tau_t: outcome.tau_t,
            emitted: outcome.emitted.len(),
            proxy_called: outcome.proxy_called,
            target_called: outcome.target_called,
            cost,
        }
    }
}

/// Aggregated metrics of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub n_tokens: u64,
    pub rounds: u64,
    pub tau_mean: f64,
    pub t_d_mean: f64,
    pub t_v_mean: f64,
    pub t_o_mean: f64,
    pub latency: f64,
    pub proxy_passes: u64,
    pub target_passes: u64,
    pub r_t: f64,
    pub speedup: f64,
    pub proxy_only_rounds: u64,
    pub escalated_rounds: u64,
    pub total_drafting: f64,
    pub total_verification: f64,
    pub total_overhead: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_perplexity: Option<f64>,
    pub records: Vec<RoundRecord>,
    /// Baseline cost per generated token used for `speedup`.
    #[serde(default)]
    pub baseline_per_token: f64,
}

impl RunReport {
    pub fn new(cost: &CostModel) -> Self {
        Self {
            baseline_per_token: cost.c_t + cost.baseline_overhead,
            ..Self::default()
        }
    }

    /// Charge one round and refresh the derived fields.
    pub fn record(&mut self, outcome: &RoundOutcome, cost: &CostModel) -> RoundCost {
        let charge = cost.charge(outcome);
        self.n_tokens += outcome.emitted.len() as u64;
        self.rounds += 1;
        self.proxy_passes += outcome.proxy_called as u64;
        self.target_passes += outcome.target_called as u64;
        match outcome.case {
            RoundCase::ProxyOnly => self.proxy_only_rounds += 1,
            RoundCase::TargetEscalated => self.escalated_rounds += 1,
            _ => {}
        }
        self.total_drafting += charge.drafting;
        self.total_verification += charge.verification;
        self.total_overhead += charge.overhead;
        self.latency += charge.total();
        self.records.push(RoundRecord::new(outcome, charge));
        self.refresh();
        charge
    }

    fn refresh(&mut self) {
        if self.rounds == 0 {
            return;
        }
        let rounds = self.rounds as f64;
        self.t_d_mean = self.total_drafting / rounds;
        self.t_v_mean = self.total_verification / rounds;
        self.t_o_mean = self.total_overhead / rounds;
        if self.n_tokens > 0 {
            let n = self.n_tokens as f64;
            self.tau_mean = n / rounds;
            self.r_t = self.target_passes as f64 / n;
            self.speedup = if self.latency > 0.0 {
                n * self.baseline_per_token / self.latency
            } else {
                f64::INFINITY
            };
        }
    }

    /// Associative merge of two reports over the same cost model.
    pub fn merge(mut self, other: RunReport) -> RunReport {
        self.n_tokens += other.n_tokens;
        self.rounds += other.rounds;
        self.proxy_passes += other.proxy_passes;
        self.target_passes += other.target_passes;
        self.proxy_only_rounds += other.proxy_only_rounds;
        self.escalated_rounds += other.escalated_rounds;
        self.total_drafting += other.total_drafting;
        self.total_verification += other.total_verification;
        self.total_overhead += other.total_overhead;
        self.latency += other.latency;
        if self.baseline_per_token == 0.0 {
            self.baseline_per_token = other.baseline_per_token;
        }
        self.target_perplexity = match (self.target_perplexity, other.target_perplexity) {
            (Some(a), None) => Some(a),
            (None, b) => b,
            (Some(a), Some(_)) => Some(a),
        };
        self.records.extend(other.records);
        self.refresh();
        self
    }
}

pub fn accumulate(mut report: RunReport, outcome: &RoundOutcome, cost: &CostModel) -> RunReport {
    report.record(outcome, cost);
    report
}

/// `|L - (N / τ)(t_d + t_v + t_o)|`.
pub fn lemma_check(report: &RunReport) -> f64 {
    let n = report.n_tokens as f64;
    let tau = n / report.rounds as f64;
    (report.latency - (n / tau) * (report.t_d_mean + report.t_v_mean + report.t_o_mean)).abs()
}

pub fn target_invocation_ratio(report: &RunReport) -> f64 {
    report.target_passes as f64 / report.n_tokens as f64
}

/// `(N · c_t + N · baseline_overhead) / L`.
pub fn speedup_vs_target_only(report: &RunReport, cost: &CostModel) -> f64 {
    let n = report.n_tokens as f64;
    (n * cost.c_t + n * cost.baseline_overhead) / report.latency
}

/// Mass of the two outcome classes in one margin bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub exact: f64,
    pub mismatch: f64,
    pub count: u64,
}

impl HistBin {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn mismatch_fraction(&self) -> Option<f64> {
        let total = self.exact + self.mismatch;
        (total > 0.0).then(|| self.mismatch / total)
    }
}

/// Outcome masses bucketed by proxy margin, normalized over all bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginHistogram {
    pub bins: Vec<HistBin>,
    pub positions: u64,
}

impl MarginHistogram {
    /// Spearman correlation between bin midpoint and mismatch fraction over
    /// occupied bins.
    pub fn mismatch_rank_correlation(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .bins
            .iter()
            .filter_map(|b| b.mismatch_fraction().map(|f| (b.mid(), f)))
            .unzip();
        spearman(&x, &y)
    }

    /// Plot data: `midpoint exact mismatch` per line.
    pub fn to_dat(&self) -> String {
        let mut out = String::from("# margin_mid exact_mass mismatch_mass\n");
        for b in &self.bins {
            out.push_str(&format!("{:.6} {:.9} {:.9}\n", b.mid(), b.exact, b.mismatch));
        }
        out
    }
}

pub fn margin_histogram(
    proxy: &ModelOracle,
    target: &ModelOracle,
    contexts: &[Vec<TokenId>],
    bins: usize,
) -> Result<MarginHistogram, MetricsError> {
    if bins == 0 || contexts.is_empty() {
        return Err(MetricsError::EmptyHistogram);
    }
    let p = proxy.score_contexts(contexts);
    let t = target.score_contexts(contexts);
    let width = 1.0 / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            exact: 0.0,
            mismatch: 0.0,
            count: 0,
        })
        .collect();
    let mass = 1.0 / contexts.len() as f64;
    for (pp, pt) in p.iter().zip(&t) {
        let m = top2_margin(pp).clamp(0.0, 1.0);
        let bin = &mut out[((m * bins as f64) as usize).min(bins - 1)];
        bin.count += 1;
        if pp.argmax() == pt.argmax() {
            bin.exact += mass;
        } else {
            bin.mismatch += mass;
        }
    }
    Ok(MarginHistogram {
        bins: out,
        positions: contexts.len() as u64,
    })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` with fewer than two points or a
/// constant series.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{NoiseKind, ProxyDerivation, TableModel};
    use crate::prob::Distribution;
    use proptest::prelude::*;

    fn outcome(case: RoundCase, drafter_calls: u64, emitted: usize) -> RoundOutcome {
        let mut o = RoundOutcome::bare(case);
        o.drafter_calls = drafter_calls;
        o.emitted = vec![TokenId(0); emitted];
        match case {
            RoundCase::ProxyOnly => o.proxy_called = true,
            RoundCase::TargetEscalated => {
                o.proxy_called = true;
                o.target_called = true;
            }
            _ => o.target_called = true,
        }
        o
    }

    #[test]
    fn round_costs_by_case() {
        let mut cost = CostModel::new(1.0, 5.0, 20.0, 0.5);
        assert_eq!(cost.charge(&outcome(RoundCase::ProxyOnly, 4, 2)).total(), 9.5);
        assert_eq!(cost.charge(&outcome(RoundCase::TargetEscalated, 4, 2)).total(), 29.5);
        cost.c_t_token = 2.0;
        let mut o = outcome(RoundCase::TargetEscalated, 4, 2);
        o.target_positions = 3;
        assert_eq!(cost.charge(&o).total(), 35.5);
    }

    #[test]
    fn first_round_initializes_report() {
        let cost = CostModel::default();
        let r = accumulate(RunReport::new(&cost), &outcome(RoundCase::Standard, 4, 3), &cost);
        assert_eq!((r.n_tokens, r.rounds), (3, 1));
        assert_eq!(lemma_check(&r), 0.0);
    }

    #[test]
    fn lemma_example() {
        let cost = CostModel::new(0.25, 10.0, 10.0, 0.5);
        let mut r = RunReport::new(&cost);
        for _ in 0..25 {
            r.record(&outcome(RoundCase::Standard, 4, 4), &cost);
        }
        assert_eq!(r.n_tokens, 100);
        assert_eq!(r.tau_mean, 4.0);
        assert_eq!(r.latency, 287.5);
        assert_eq!((100.0 / 4.0) * (r.t_d_mean + r.t_v_mean + r.t_o_mean), 287.5);
        assert!(lemma_check(&r) <= 1e-9 * r.latency);
    }

    #[test]
    fn ratio_and_speedup_examples() {
        let cost = CostModel::new(0.0, 20.0, 20.0, 0.0);
        let mut r = RunReport::new(&cost);
        for _ in 0..25 {
            r.record(&outcome(RoundCase::Standard, 0, 4), &cost);
        }
        assert_eq!(target_invocation_ratio(&r), 0.25);
        assert_eq!(r.r_t, 1.0 / r.tau_mean);
        assert_eq!(r.latency, 500.0);
        assert_eq!(speedup_vs_target_only(&r, &cost), 4.0);
        assert_eq!(r.speedup, 4.0);
        let mut manual = r.clone();
        manual.latency = 1000.0;
        assert_eq!(speedup_vs_target_only(&manual, &cost), 2.0);
    }

    #[test]
    fn cost_validation() {
        assert!(CostModel::new(-1.0, 1.0, 1.0, 0.0).validate().is_err());
        assert!(CostModel::default().validate().is_ok());
        assert!(CostModel::default().ordering_warning().is_none());
        assert!(CostModel::new(10.0, 5.0, 1.0, 0.0).ordering_warning().is_some());
    }

    fn arb_outcome() -> impl Strategy<Value = RoundOutcome> {
        (0usize..4, 0u64..9, 1usize..10).prop_map(|(c, d, e)| {
            let case = [
                RoundCase::ProxyOnly,
                RoundCase::TargetEscalated,
                RoundCase::Standard,
                RoundCase::Autoregressive,
            ][c];
            outcome(case, d, e)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn lemma_holds_on_random_ledgers(
            rounds in prop::collection::vec(arb_outcome(), 1000),
            c in (0.0f64..3.0, 0.0f64..10.0, 0.0f64..100.0, 0.0f64..2.0),
        ) {
            let cost = CostModel::new(c.0, c.1, c.2, c.3);
            let mut r = RunReport::new(&cost);
            for o in &rounds {
                r.record(o, &cost);
            }
            prop_assert!(lemma_check(&r) <= 1e-9 * r.latency.max(f64::MIN_POSITIVE));
            let sum: f64 = r.records.iter().map(|x| x.cost.total()).sum();
            prop_assert_eq!(sum, r.latency);
        }

        #[test]
        fn merge_is_associative(rounds in prop::collection::vec(arb_outcome(), 3..30)) {
            let cost = CostModel::default();
            let parts: Vec<RunReport> = rounds.chunks(rounds.len() / 3).map(|chunk| {
                let mut r = RunReport::new(&cost);
                for o in chunk { r.record(o, &cost); }
                r
            }).collect();
            let left = parts.iter().cloned().reduce(|a, b| a.merge(b)).unwrap();
            let mut right = parts.last().unwrap().clone();
            for p in parts.iter().rev().skip(1) {
                right = p.clone().merge(right);
            }
            prop_assert_eq!(left.n_tokens, right.n_tokens);
            prop_assert_eq!(&left.records, &right.records);
            prop_assert!((left.latency - right.latency).abs() <= 1e-9 * left.latency.max(1.0));
        }
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    fn target() -> ModelOracle {
        let d = |p: &[f64]| Distribution::new(p.to_vec()).unwrap();
        ModelOracle::table(
            "target",
            TableModel::new(d(&[0.5, 0.3, 0.2]))
                .with_row(&[TokenId(0)], d(&[0.05, 0.9, 0.05]))
                .unwrap()
                .with_row(&[TokenId(1)], d(&[0.34, 0.33, 0.33]))
                .unwrap(),
        )
    }

    #[test]
    fn identical_proxy_has_no_mismatch() {
        let t = target();
        let ctxs: Vec<Vec<TokenId>> = (0..30).map(|i| vec![TokenId(i % 3)]).collect();
        let h = margin_histogram(&t.handle(), &t, &ctxs, 10).unwrap();
        let total: f64 = h.bins.iter().map(|b| b.exact + b.mismatch).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(h.bins.iter().all(|b| b.mismatch == 0.0));
        assert!(h.to_dat().lines().count() == 11);
    }

    #[test]
    fn uniform_proxy_lands_in_zero_bin() {
        let t = target();
        let p = t.derive_proxy("flat", ProxyDerivation::new(1.0, NoiseKind::Uniform));
        let ctxs: Vec<Vec<TokenId>> = (0..30).map(|i| vec![TokenId(i % 3)]).collect();
        let h = margin_histogram(&p, &t, &ctxs, 10).unwrap();
        assert_eq!(h.bins[0].count, 30);
        assert!(margin_histogram(&p, &t, &[], 10).is_err());
    }
}
