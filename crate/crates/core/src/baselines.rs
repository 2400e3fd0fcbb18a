//! Relaxed-acceptance rules and alternative routing signals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drafting::draft_chain;
use crate::models::ModelOracle;
use crate::prob::{apply_temperature, sample, top2_margin, Context, Distribution, TokenId};
use crate::rng::SessionStreams;
use crate::router::{RoundCase, RoundOutcome, TrustGate};
use crate::verification::{acceptance_probability, draw_correction, shape_all, VerifyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("top-k needs k >= 1")]
    ZeroK,
    #[error("unknown {what} '{name}'")]
    Unknown { what: &'static str, name: String },
}

/// Accept iff `p_d(token) >= 1 - alpha`.
pub fn chow_accept(p_d: &Distribution, token: TokenId, alpha: f64) -> bool {
    p_d.prob(token) >= 1.0 - alpha
}

/// Accept iff `p_t(token) >= (1 - alpha) * max(p_t)`.
pub fn token_specific_accept(p_t: &Distribution, token: TokenId, alpha: f64) -> bool {
    p_t.prob(token) >= (1.0 - alpha) * p_t.max_prob()
}

/// Accept iff `max(p_d) > threshold`.
pub fn confidence_filter_accept(p_d: &Distribution, threshold: f64) -> bool {
    p_d.max_prob() > threshold
}

/// Accept iff `token` is among the `k` most probable entries of `p_t`,
/// ties going to the lower id.
pub fn topk_verify_accept(p_t: &Distribution, token: TokenId, k: usize) -> bool {
    let p = p_t.prob(token);
    let ahead = p_t
        .probs()
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < token.index()))
        .count();
    ahead < k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxKind {
    Chow,
    TokenSpecific,
    ConfidenceFilter,
    TopkVerify,
}

impl RelaxKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RelaxKind::Chow => "chow",
            RelaxKind::TokenSpecific => "token_specific",
            RelaxKind::ConfidenceFilter => "confidence_filter",
            RelaxKind::TopkVerify => "topk_verify",
        }
    }

    /// Rules that look only at the drafter can skip the target entirely.
    pub fn drafter_side(&self) -> bool {
        matches!(self, RelaxKind::Chow | RelaxKind::ConfidenceFilter)
    }

    pub fn default_threshold(&self) -> f64 {
        match self {
            RelaxKind::Chow => 0.05,
            RelaxKind::TokenSpecific => 0.2,
            RelaxKind::ConfidenceFilter => 0.95,
            RelaxKind::TopkVerify => 2.0,
        }
    }
}

impl std::str::FromStr for RelaxKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "chow" => RelaxKind::Chow,
            "token_specific" => RelaxKind::TokenSpecific,
            "confidence_filter" => RelaxKind::ConfidenceFilter,
            "topk_verify" => RelaxKind::TopkVerify,
            other => {
                return Err(PolicyError::Unknown {
                    what: "relax policy",
                    name: other.to_string(),
                })
            }
        })
    }
}

/// A relaxed-acceptance rule with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelaxPolicy {
    Chow { alpha: f64 },
    TokenSpecific { alpha: f64 },
    ConfidenceFilter { threshold: f64 },
    TopkVerify { k: usize },
}

impl RelaxPolicy {
    /// Build from a kind and its numeric parameter.
    pub fn new(kind: RelaxKind, param: f64) -> Result<Self, PolicyError> {
        if kind == RelaxKind::TopkVerify {
            if param < 1.0 || param.fract() != 0.0 {
                return Err(PolicyError::ZeroK);
            }
            return Ok(RelaxPolicy::TopkVerify { k: param as usize });
        }
        if !(0.0..=1.0).contains(&param) {
            return Err(PolicyError::Threshold(param));
        }
        Ok(match kind {
            RelaxKind::Chow => RelaxPolicy::Chow { alpha: param },
            RelaxKind::TokenSpecific => RelaxPolicy::TokenSpecific { alpha: param },
            RelaxKind::ConfidenceFilter => RelaxPolicy::ConfidenceFilter { threshold: param },
            RelaxKind::TopkVerify => unreachable!(),
        })
    }

    pub fn kind(&self) -> RelaxKind {
        match self {
            RelaxPolicy::Chow { .. } => RelaxKind::Chow,
            RelaxPolicy::TokenSpecific { .. } => RelaxKind::TokenSpecific,
            RelaxPolicy::ConfidenceFilter { .. } => RelaxKind::ConfidenceFilter,
            RelaxPolicy::TopkVerify { .. } => RelaxKind::TopkVerify,
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            RelaxPolicy::Chow { alpha } | RelaxPolicy::TokenSpecific { alpha } => alpha,
            RelaxPolicy::ConfidenceFilter { threshold } => threshold,
            RelaxPolicy::TopkVerify { k } => k as f64,
        }
    }

    /// Drafter-side rules read `p_d`; target-side rules read `p_t`.
    pub fn accepts(&self, p_d: &Distribution, p_t: Option<&Distribution>, token: TokenId) -> bool {
        match *self {
            RelaxPolicy::Chow { alpha } => chow_accept(p_d, token, alpha),
            RelaxPolicy::ConfidenceFilter { threshold } => confidence_filter_accept(p_d, threshold),
            RelaxPolicy::TokenSpecific { alpha } => p_t.is_some_and(|p| token_specific_accept(p, token, alpha)),
            RelaxPolicy::TopkVerify { k } => p_t.is_some_and(|p| topk_verify_accept(p, token, k)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Margin,
    Top1Prob,
    /// Normalized Shannon entropy `H(p) / ln V`; a plain stand-in for
    /// composite entropy criteria.
    CompositeEntropy,
}

impl SignalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SignalKind::Margin => "margin",
            SignalKind::Top1Prob => "top1_prob",
            SignalKind::CompositeEntropy => "composite_entropy",
        }
    }
}

impl std::str::FromStr for SignalKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "margin" => SignalKind::Margin,
            "top1_prob" | "top1" => SignalKind::Top1Prob,
            "composite_entropy" | "entropy" => SignalKind::CompositeEntropy,
            other => {
                return Err(PolicyError::Unknown {
                    what: "routing signal",
                    name: other.to_string(),
                })
            }
        })
    }
}

/// Proxy-only trust signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingSignal {
    pub kind: SignalKind,
    pub threshold: f64,
}

impl RoutingSignal {
    pub fn new(kind: SignalKind, threshold: f64) -> Self {
        Self { kind, threshold }
    }
}

pub fn normalized_entropy(p: &Distribution) -> f64 {
    p.entropy() / (p.len() as f64).ln()
}

pub fn routing_signal_eval(p_p: &Distribution, signal: &RoutingSignal) -> bool {
    match signal.kind {
        SignalKind::Margin => top2_margin(p_p) >= signal.threshold,
        SignalKind::Top1Prob => p_p.max_prob() >= signal.threshold,
        SignalKind::CompositeEntropy => normalized_entropy(p_p) <= signal.threshold,
    }
}

impl TrustGate for RoutingSignal {
    fn trusts(&self, dist: &Distribution) -> bool {
        routing_signal_eval(dist, self)
    }
}

/// One relaxed draft/verify round.
///
/// A draft position is accepted when the policy accepts it or the strict
/// speculative test does. For drafter-side rules the leading run accepted by
/// the policy is committed without the target, and the target is skipped
/// entirely when the whole draft passes. The first rejection is corrected
/// from the target residual; full acceptance after a target pass draws the
/// bonus.
pub fn relaxed_round(
    drafter: &ModelOracle,
    target: &ModelOracle,
    ctx: &mut Context,
    k: usize,
    temperature: f64,
    policy: &RelaxPolicy,
    streams: &mut SessionStreams,
) -> Result<RoundOutcome, VerifyError> {
    streams.target_coins.start_round();
    let draft = draft_chain(drafter, ctx.tokens(), k, temperature, &mut streams.draft)?;
    let tokens = draft.tokens();
    let mut out = RoundOutcome::bare(RoundCase::Standard);
    out.drafted = k;
    out.drafter_calls = k as u64;
    out.draft = tokens.to_vec();

    let start = if policy.kind().drafter_side() {
        (0..k)
            .position(|i| !policy.accepts(&draft.dists()[i], None, tokens[i]))
            .unwrap_or(k)
    } else {
        0
    };
    if start == k {
        out.tau_m = Some(k);
        out.tau_t = Some(k);
        out.emitted = tokens.to_vec();
        ctx.commit(&out.emitted);
        return Ok(out);
    }

    let mut prefix_ctx = ctx.tokens().to_vec();
    prefix_ctx.extend_from_slice(&tokens[..start]);
    let raw = target.batch_score(&prefix_ctx, &tokens[start..]);
    let shaped = shape_all(&raw, temperature)?;
    let suffix_dists = &draft.dists()[start..];
    let mut tau = 0;
    for (j, &x) in tokens[start..].iter().enumerate() {
        let by_policy = policy.accepts(&suffix_dists[j], Some(&shaped[j]), x);
        let strict = if temperature == 0.0 {
            shaped[j].argmax() == x
        } else {
            streams.target_coins.coin(start + j + 1) < acceptance_probability(&shaped[j], &suffix_dists[j], x)
        };
        if !(by_policy || strict) {
            break;
        }
        tau += 1;
    }
    let (correction, _, _) = draw_correction(&shaped, suffix_dists, tau, start, &mut streams.correction)?;
    out.tau_m = Some(start);
    out.tau_t = Some(start + tau);
    out.target_called = true;
    out.target_positions = raw.len();
    out.emitted = tokens[..start + tau].to_vec();
    out.emitted.push(correction);
    ctx.commit(&out.emitted);
    Ok(out)
}

/// Plain autoregressive decoding: one target pass, one token.
pub fn target_only_round(
    target: &ModelOracle,
    ctx: &mut Context,
    temperature: f64,
    streams: &mut SessionStreams,
) -> Result<RoundOutcome, VerifyError> {
    let dist = apply_temperature(&target.next_dist(ctx.tokens()), temperature)?;
    let token = sample(&dist, &mut streams.draft);
    let mut out = RoundOutcome::bare(RoundCase::Autoregressive);
    out.target_called = true;
    out.target_positions = 1;
    out.emitted = vec![token];
    ctx.commit(&out.emitted);
    Ok(out)
}
