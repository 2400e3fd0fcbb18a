//! User-facing property suites.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::metrics::lemma_check;
use crate::prob::{normalize, Context, Distribution};
use crate::rng::{RandomStream, SessionStreams};
use crate::router::{trispec_round, MarginRule, TriSpecConfig};
use crate::verification::{sd_round, single_round_first_token_law, VerifierRole};

use super::config::{ExperimentConfig, Method};
use super::corpus::load_source;
use super::experiment::run_with_family;
use super::family::ModelFamily;
use super::trace::{read_trace, write_trace};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Lossless,
    Equivalence,
    Lemma,
    Invariants,
}

impl SuiteName {
    pub const ALL: [SuiteName; 4] = [
        SuiteName::Lossless,
        SuiteName::Equivalence,
        SuiteName::Lemma,
        SuiteName::Invariants,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteName::Lossless => "lossless",
            SuiteName::Equivalence => "equivalence",
            SuiteName::Lemma => "lemma",
            SuiteName::Invariants => "invariants",
        }
    }
}

impl fmt::Display for SuiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown suite '{s}' (lossless|equivalence|lemma|invariants|all)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: SuiteName,
    pub passed: bool,
    pub checks: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub results: Vec<SuiteResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.passed
    }
}

/// Run the named suites on the family described by `cfg`.
pub fn verify_suite(suites: &[SuiteName], cfg: &ExperimentConfig) -> Result<SuiteReport, HarnessError> {
    cfg.validate()?;
    let corpus = load_source(&cfg.corpus, cfg.tokenizer)?;
    let family = ModelFamily::build(cfg, &corpus)?;
    let prompts = corpus.prompts(cfg.prompt_fraction, cfg.max_prompts);
    if prompts.is_empty() {
        return Err(HarnessError::NoPrompts);
    }
    let mut results = Vec::new();
    for &suite in suites {
        let r = match suite {
            SuiteName::Lossless => lossless(cfg.seed),
            SuiteName::Equivalence => equivalence(cfg, &family, &prompts[0])?,
            SuiteName::Lemma => lemma(cfg, &family, &prompts)?,
            SuiteName::Invariants => invariants(cfg, &family, &prompts)?,
        };
        log::info!("suite {}: {}", r.suite, if r.passed { "pass" } else { "FAIL" });
        results.push(r);
    }
    Ok(SuiteReport {
        passed: results.iter().all(|r| r.passed),
        results,
    })
}

fn random_dist(rng: &mut RandomStream, v: usize) -> Distribution {
    let w: Vec<f64> = (0..v).map(|_| 0.02 + rng.uniform()).collect();
    normalize(&w).expect("positive weights")
}

fn lossless(seed: u64) -> SuiteResult {
    let mut rng = RandomStream::new(seed, "suite/lossless");
    let mut worst: f64 = 0.0;
    let pairs = 50;
    for i in 0..pairs {
        let v = 2 + i % 4;
        let p_d = random_dist(&mut rng, v);
        let p_v = random_dist(&mut rng, v);
        let law = single_round_first_token_law(&p_d, &p_v);
        for (a, b) in law.iter().zip(p_v.probs()) {
            worst = worst.max((a - b).abs());
        }
    }
    SuiteResult {
        suite: SuiteName::Lossless,
        passed: worst <= 1e-9,
        checks: pairs,
        detail: format!("max |law - p_v| = {worst:.3e} over {pairs} pairs"),
    }
}

fn equivalence(
    cfg: &ExperimentConfig,
    family: &ModelFamily,
    prompt: &[crate::prob::TokenId],
) -> Result<SuiteResult, HarnessError> {
    let rounds = 200;
    let mut failures = Vec::new();
    let mut checks = 0;
    for t in [0.0, 1.0] {
        for (rule, verifier, role) in [
            (MarginRule::NEVER_TRUST, &family.target, VerifierRole::Target),
            (MarginRule::ALWAYS_TRUST, &family.proxy, VerifierRole::Proxy),
        ] {
            let mut a_ctx = Context::new(prompt.to_vec());
            let mut b_ctx = a_ctx.clone();
            let mut a_streams = SessionStreams::new(cfg.seed);
            let mut b_streams = SessionStreams::new(cfg.seed);
            let tc = TriSpecConfig::new(cfg.k, rule, t);
            for round in 0..rounds {
                let a = trispec_round(
                    &family.drafter,
                    &family.proxy,
                    &family.target,
                    &mut a_ctx,
                    &tc,
                    &mut a_streams,
                )?;
                let b = sd_round(&family.drafter, verifier, &mut b_ctx, cfg.k, t, &mut b_streams, role)?;
                checks += 1;
                if a.emitted != b.emitted {
                    failures.push(format!("lambda={} T={t}: round {round} differs", rule.lambda));
                    break;
                }
            }
        }
    }
    Ok(SuiteResult {
        suite: SuiteName::Equivalence,
        passed: failures.is_empty(),
        checks,
        detail: if failures.is_empty() {
            format!("{checks} paired rounds identical")
        } else {
            failures.join("; ")
        },
    })
}

fn lemma(
    cfg: &ExperimentConfig,
    family: &ModelFamily,
    prompts: &[Vec<crate::prob::TokenId>],
) -> Result<SuiteResult, HarnessError> {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for method in Method::ALL {
        for t in [0.0, 1.0] {
            if method.is_tree() && t != 0.0 {
                continue;
            }
            let mut c = cfg.clone();
            c.method = method;
            c.temperature = t;
            c.perplexity = false;
            let r = run_with_family(&c, family, prompts)?.report;
            worst = worst.max(lemma_check(&r) / r.latency);
            checks += 1;
        }
    }
    Ok(SuiteResult {
        suite: SuiteName::Lemma,
        passed: worst <= 1e-9,
        checks,
        detail: format!("max relative residual {worst:.3e} over {checks} runs"),
    })
}

fn invariants(
    cfg: &ExperimentConfig,
    family: &ModelFamily,
    prompts: &[Vec<crate::prob::TokenId>],
) -> Result<SuiteResult, HarnessError> {
    let mut problems = Vec::new();
    let mut checks = 0;
    for t in [0.0, 1.0] {
        let mut c = cfg.clone();
        c.method = Method::TriSpec;
        c.temperature = t;
        c.perplexity = false;
        let result = run_with_family(&c, family, prompts)?;
        let mut buf = Vec::new();
        write_trace(&mut buf, &result.trace)?;
        match read_trace(&buf[..]) {
            Ok(rows) if rows == result.trace => {}
            Ok(_) => problems.push(format!("T={t}: trace changed on reload")),
            Err(e) => problems.push(format!("T={t}: {e}")),
        }
        checks += result.trace.len();
    }
    // greedy pre-verification is exact match against the proxy argmax
    let mut ctx = Context::new(prompts[0].clone());
    let mut streams = SessionStreams::new(cfg.seed);
    let tc = TriSpecConfig::new(cfg.k, MarginRule::new(cfg.lambda), 0.0);
    for round in 0..200 {
        let out = trispec_round(
            &family.drafter,
            &family.proxy,
            &family.target,
            &mut ctx,
            &tc,
            &mut streams,
        )?;
        checks += 1;
        let ok = out
            .proxy_coins
            .iter()
            .enumerate()
            .all(|(i, &s)| s == (out.proxy_argmax[i] == out.draft[i]));
        if !ok {
            problems.push(format!("greedy round {round}: coins disagree with exact match"));
            break;
        }
    }
    Ok(SuiteResult {
        suite: SuiteName::Invariants,
        passed: problems.is_empty(),
        checks,
        detail: if problems.is_empty() {
            format!("{checks} rounds checked")
        } else {
            problems.join("; ")
        },
    })
}
