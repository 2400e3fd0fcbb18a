//! Ternary rounds: drafter proposes, proxy pre-verifies, target is consulted
//! only when the proxy's verdict is not trusted.
//!
//! Per round, with `k` drafts:
//!
//! 1. The proxy scores the draft in one pass and runs the usual acceptance
//!    scan, giving `τ_a`.
//! 2. `τ_m` is the number of leading positions (out of `k + 1`) whose proxy
//!    distribution passes the trust gate.
//! 3. If `τ_a < τ_m` the proxy's first rejection (or bonus) lies inside the
//!    trusted prefix: the round ends with the proxy's correction and the
//!    target is never called.
//! 4. Otherwise the first `τ_m` drafts are committed outright and the target
//!    verifies only the remaining suffix, conditioned on the committed prefix.

use serde::{Deserialize, Serialize};

use crate::drafting::{draft_chain, draft_tree, prune_tree_prefix, DraftChain, TreeLimits};
use crate::models::ModelOracle;
use crate::prob::{sample, top2_margin, Context, Distribution, TokenId};
use crate::rng::{CoinStream, RandomStream, SessionStreams};
use crate::verification::{
    accept_prefix, draw_correction, greedy_walk, score_tree, shape_all, verify_tree_greedy, CorrectionKind, SdRound,
    VerifierRole, VerifyError,
};

/// Anything that can say whether a proxy distribution is trustworthy.
pub trait TrustGate {
    fn trusts(&self, dist: &Distribution) -> bool;
}

/// `g(p) = 1{top1(p) - top2(p) >= λ}`.
///
/// `λ <= 0` trusts everything and `λ > 1` trusts nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginRule {
    pub lambda: f64,
}

impl MarginRule {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
    pub const ALWAYS_TRUST: MarginRule = MarginRule { lambda: 0.0 };
    pub const NEVER_TRUST: MarginRule = MarginRule { lambda: 1.01 };

    pub fn new(lambda: f64) -> Self {
        Self { lambda }
    }
}

impl Default for MarginRule {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LAMBDA)
    }
}

impl TrustGate for MarginRule {
    fn trusts(&self, dist: &Distribution) -> bool {
        margin_predicate(dist, self)
    }
}

pub fn margin_predicate(dist: &Distribution, rule: &MarginRule) -> bool {
    if rule.lambda <= 0.0 {
        return true;
    }
    if rule.lambda > 1.0 {
        return false;
    }
    top2_margin(dist) >= rule.lambda
}

/// `τ_m`: leading positions that pass the gate, `dists.len()` if all do.
pub fn trusted_prefix_len<G: TrustGate + ?Sized>(dists: &[Distribution], gate: &G) -> usize {
    dists.iter().position(|d| !gate.trusts(d)).unwrap_or(dists.len())
}

/// Which proxy distribution the gate looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSource {
    /// The temperature-shaped distribution the proxy verifies with. At
    /// `T = 0` shaping is one-hot, so the raw distribution is used there.
    #[default]
    Shaped,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundCase {
    /// Proxy completed the round (case I).
    ProxyOnly,
    /// Target verified the untrusted suffix (case II).
    TargetEscalated,
    /// Two-model draft/verify round.
    Standard,
    /// One target pass, one token.
    Autoregressive,
}

impl RoundCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoundCase::ProxyOnly => "proxy_only",
            RoundCase::TargetEscalated => "target_escalated",
            RoundCase::Standard => "standard",
            RoundCase::Autoregressive => "autoregressive",
        }
    }
}

impl std::str::FromStr for RoundCase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "proxy_only" => RoundCase::ProxyOnly,
            "target_escalated" => RoundCase::TargetEscalated,
            "standard" => RoundCase::Standard,
            "autoregressive" => RoundCase::Autoregressive,
            other => return Err(format!("unknown round case '{other}'")),
        })
    }
}

/// What happened in one decoding round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub case: RoundCase,
    /// Draft length (chain) or tree size (tree rounds).
    pub drafted: usize,
    pub tau_a: Option<usize>,
    pub tau_m: Option<usize>,
    pub tau_t: Option<usize>,
    pub emitted: Vec<TokenId>,
    pub drafter_calls: u64,
    pub proxy_called: bool,
    pub target_called: bool,
    /// Positions scored by the proxy / target pass (for per-token surcharges).
    pub proxy_positions: usize,
    pub target_positions: usize,
    /// Proxy acceptance indicators `s_i`, up to and including the first 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proxy_coins: Vec<bool>,
    /// Drafted chain (chain rounds) or the proxy reference path (tree rounds).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub draft: Vec<TokenId>,
    /// Proxy argmax at each of the `k + 1` positions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proxy_argmax: Vec<TokenId>,
}

impl RoundOutcome {
    pub(crate) fn bare(case: RoundCase) -> Self {
        Self {
            case,
            drafted: 0,
            tau_a: None,
            tau_m: None,
            tau_t: None,
            emitted: Vec::new(),
            drafter_calls: 0,
            proxy_called: false,
            target_called: false,
            proxy_positions: 0,
            target_positions: 0,
            proxy_coins: Vec::new(),
            draft: Vec::new(),
            proxy_argmax: Vec::new(),
        }
    }

    /// Record of a two-model round.
    pub fn from_sd(round: &SdRound, role: VerifierRole) -> Self {
        let mut out = Self::bare(RoundCase::Standard);
        out.drafted = round.draft.len();
        out.tau_t = Some(round.trace.tau);
        out.drafter_calls = round.draft.len() as u64;
        match role {
            VerifierRole::Proxy => {
                out.proxy_called = true;
                out.proxy_positions = round.draft.len() + 1;
            }
            VerifierRole::Target => {
                out.target_called = true;
                out.target_positions = round.draft.len() + 1;
            }
        }
        out.draft = round.draft.tokens().to_vec();
        out.emitted = round.emitted.clone();
        out
    }

    /// Check the routing invariants; returns a description of the first
    /// violation.
    pub fn check(&self) -> Result<(), String> {
        check_routing(&RoutingFields {
            case: self.case,
            tau_a: self.tau_a,
            tau_m: self.tau_m,
            tau_t: self.tau_t,
            emitted: self.emitted.len(),
            proxy_called: self.proxy_called,
            target_called: self.target_called,
        })
    }
}

/// The routing-relevant fields of a round, as stored in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingFields {
    pub case: RoundCase,
    pub tau_a: Option<usize>,
    pub tau_m: Option<usize>,
    pub tau_t: Option<usize>,
    pub emitted: usize,
    pub proxy_called: bool,
    pub target_called: bool,
}

pub fn check_routing(r: &RoutingFields) -> Result<(), String> {
    if r.emitted == 0 {
        return Err("round emitted nothing".into());
    }
    match r.case {
        RoundCase::ProxyOnly | RoundCase::TargetEscalated => {
            let (Some(a), Some(m)) = (r.tau_a, r.tau_m) else {
                return Err("ternary round without tau_a/tau_m".into());
            };
            if !r.proxy_called {
                return Err("ternary round without a proxy pass".into());
            }
            if r.case == RoundCase::ProxyOnly {
                if a >= m || r.target_called {
                    return Err(format!("proxy_only with tau_a={a}, tau_m={m}"));
                }
                if r.emitted != a + 1 {
                    return Err(format!("proxy_only emitted {} != tau_a+1", r.emitted));
                }
            } else {
                let Some(t) = r.tau_t else {
                    return Err("escalated round without tau_t".into());
                };
                if a < m || !r.target_called {
                    return Err(format!("target_escalated with tau_a={a}, tau_m={m}"));
                }
                if r.emitted != m + t + 1 {
                    return Err(format!(
                        "escalated emitted {} != tau_m+tau_t+1 = {}",
                        r.emitted,
                        m + t + 1
                    ));
                }
            }
        }
        RoundCase::Standard => {}
        RoundCase::Autoregressive => {
            if r.emitted != 1 || !r.target_called {
                return Err("autoregressive round must emit one target token".into());
            }
        }
    }
    Ok(())
}

/// Knobs of a ternary round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriSpecConfig<G> {
    pub k: usize,
    pub gate: G,
    pub temperature: f64,
    pub margin_source: MarginSource,
    /// Draw the case-I replacement from the proxy distribution itself instead
    /// of the residual.
    pub raw_bonus: bool,
}

impl<G> TriSpecConfig<G> {
    pub fn new(k: usize, gate: G, temperature: f64) -> Self {
        Self {
            k,
            gate,
            temperature,
            margin_source: MarginSource::Shaped,
            raw_bonus: false,
        }
    }
}

/// Result of target verification over the untrusted suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedVerdict {
    pub tau_t: usize,
    pub correction: TokenId,
    pub correction_kind: CorrectionKind,
    pub coins: Vec<bool>,
    /// Positions scored in the target pass (`k - τ_m + 1`).
    pub scored_positions: usize,
}

/// Commit `draft[..tau_m]` and let the target verify the rest in one pass.
///
/// With `tau_m == k` the target still runs, on an empty suffix, to produce
/// the bonus distribution.
pub fn pruned_target_verify(
    draft: &DraftChain,
    tau_m: usize,
    target: &ModelOracle,
    ctx: &[TokenId],
    temperature: f64,
    coins: &mut CoinStream,
    correction_rng: &mut RandomStream,
) -> Result<PrunedVerdict, VerifyError> {
    let k = draft.len();
    assert!(tau_m <= k, "tau_m = {tau_m} exceeds draft length {k}");
    let mut prefix_ctx = ctx.to_vec();
    prefix_ctx.extend_from_slice(&draft.tokens()[..tau_m]);
    let suffix = &draft.tokens()[tau_m..];
    let suffix_dists = &draft.dists()[tau_m..];
    let target_raw = target.batch_score(&prefix_ctx, suffix);
    let shaped = shape_all(&target_raw, temperature)?;
    let (coin_outcomes, tau_t) = accept_prefix(suffix, suffix_dists, &shaped, temperature, coins, tau_m + 1);
    let (correction, _, correction_kind) = draw_correction(&shaped, suffix_dists, tau_t, tau_m, correction_rng)?;
    Ok(PrunedVerdict {
        tau_t,
        correction,
        correction_kind,
        coins: coin_outcomes,
        scored_positions: target_raw.len(),
    })
}

/// One ternary chain round. Commits the emitted tokens to `ctx`.
pub fn trispec_round<G: TrustGate>(
    drafter: &ModelOracle,
    proxy: &ModelOracle,
    target: &ModelOracle,
    ctx: &mut Context,
    cfg: &TriSpecConfig<G>,
    streams: &mut SessionStreams,
) -> Result<RoundOutcome, VerifyError> {
    let t = cfg.temperature;
    streams.proxy_coins.start_round();
    streams.target_coins.start_round();

    let draft = draft_chain(drafter, ctx.tokens(), cfg.k, t, &mut streams.draft)?;
    let proxy_raw = proxy.batch_score(ctx.tokens(), draft.tokens());
    let proxy_shaped = shape_all(&proxy_raw, t)?;
    let (proxy_coins, tau_a) = accept_prefix(
        draft.tokens(),
        draft.dists(),
        &proxy_shaped,
        t,
        &mut streams.proxy_coins,
        1,
    );
    let gate_dists = match cfg.margin_source {
        MarginSource::Shaped if t > 0.0 => &proxy_shaped,
        _ => &proxy_raw,
    };
    let tau_m = trusted_prefix_len(gate_dists, &cfg.gate);

    let mut out = RoundOutcome::bare(RoundCase::ProxyOnly);
    out.drafted = draft.len();
    out.tau_a = Some(tau_a);
    out.tau_m = Some(tau_m);
    out.drafter_calls = draft.len() as u64;
    out.proxy_called = true;
    out.proxy_positions = proxy_raw.len();
    out.proxy_coins = proxy_coins;
    out.draft = draft.tokens().to_vec();
    out.proxy_argmax = proxy_raw.iter().map(Distribution::argmax).collect();

    if tau_a < tau_m {
        let correction = if cfg.raw_bonus && tau_a < draft.len() {
            sample(&proxy_shaped[tau_a], &mut streams.correction)
        } else {
            draw_correction(&proxy_shaped, draft.dists(), tau_a, 0, &mut streams.correction)?.0
        };
        out.emitted = draft.tokens()[..tau_a].to_vec();
        out.emitted.push(correction);
    } else {
        let verdict = pruned_target_verify(
            &draft,
            tau_m,
            target,
            ctx.tokens(),
            t,
            &mut streams.target_coins,
            &mut streams.correction,
        )?;
        out.case = RoundCase::TargetEscalated;
        out.tau_t = Some(verdict.tau_t);
        out.target_called = true;
        out.target_positions = verdict.scored_positions;
        out.emitted = draft.tokens()[..tau_m + verdict.tau_t].to_vec();
        out.emitted.push(verdict.correction);
    }
    ctx.commit(&out.emitted);
    Ok(out)
}

/// One ternary tree round (greedy only).
///
/// The proxy walks the tree greedily for `τ_a`. The gate is evaluated along
/// the accepted path, continued down the drafter's most probable branch, so a
/// single-branch tree reproduces the chain round exactly. Escalation prunes
/// the trusted prefix and hands the remaining subtree to the target.
pub fn trispec_tree_round<G: TrustGate>(
    drafter: &ModelOracle,
    proxy: &ModelOracle,
    target: &ModelOracle,
    ctx: &mut Context,
    limits: TreeLimits,
    gate: &G,
) -> Result<RoundOutcome, VerifyError> {
    let calls_before = drafter.invocations();
    let tree = draft_tree(drafter, ctx.tokens(), limits, 0.0)?;
    let drafter_calls = drafter.invocations() - calls_before;

    let scores = score_tree(&tree, proxy, ctx.tokens());
    let (path, proxy_correction) = greedy_walk(&tree, &scores);
    let tau_a = path.len();

    let mut reference = path.clone();
    reference.extend(tree.greedy_continuation(path.last().copied()));
    let mut gate_dists = Vec::with_capacity(reference.len() + 1);
    gate_dists.push(scores.root.clone());
    gate_dists.extend(reference.iter().map(|&n| scores.nodes[n].clone()));
    let tau_m = trusted_prefix_len(&gate_dists, gate);

    let mut out = RoundOutcome::bare(RoundCase::ProxyOnly);
    out.drafted = tree.len();
    out.tau_a = Some(tau_a);
    out.tau_m = Some(tau_m);
    out.drafter_calls = drafter_calls;
    out.proxy_called = true;
    out.proxy_positions = tree.len() + 1;
    out.proxy_coins = vec![true; tau_a];
    if tau_a < reference.len() {
        out.proxy_coins.push(false);
    }
    out.draft = reference.iter().map(|&n| tree.nodes()[n].token).collect();
    out.proxy_argmax = gate_dists.iter().map(Distribution::argmax).collect();

    let path_tokens: Vec<TokenId> = path.iter().map(|&n| tree.nodes()[n].token).collect();
    if tau_a < tau_m {
        out.emitted = path_tokens;
        out.emitted.push(proxy_correction);
    } else {
        let prefix = &path_tokens[..tau_m];
        let pruned = prune_tree_prefix(&tree, prefix)?;
        let target_ctx = ctx.extended(prefix);
        let verdict = verify_tree_greedy(&pruned, target, &target_ctx);
        out.case = RoundCase::TargetEscalated;
        out.tau_t = Some(verdict.tokens.len());
        out.target_called = true;
        out.target_positions = pruned.len() + 1;
        out.emitted = prefix.to_vec();
        out.emitted.extend(&verdict.tokens);
        out.emitted.push(verdict.correction);
    }
    ctx.commit(&out.emitted);
    Ok(out)
}

/// Two-model greedy tree round: drafter tree verified by `verifier` directly.
pub fn sd_tree_round(
    drafter: &ModelOracle,
    verifier: &ModelOracle,
    ctx: &mut Context,
    limits: TreeLimits,
) -> Result<RoundOutcome, VerifyError> {
    let calls_before = drafter.invocations();
    let tree = draft_tree(drafter, ctx.tokens(), limits, 0.0)?;
    let verdict = verify_tree_greedy(&tree, verifier, ctx.tokens());
    let mut out = RoundOutcome::bare(RoundCase::Standard);
    out.drafted = tree.len();
    out.tau_t = Some(verdict.tokens.len());
    out.drafter_calls = drafter.invocations() - calls_before;
    out.target_called = true;
    out.target_positions = tree.len() + 1;
    out.emitted = verdict.tokens;
    out.emitted.push(verdict.correction);
    ctx.commit(&out.emitted);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{NoiseKind, ProxyDerivation, TableModel};
    use crate::verification::sd_round;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn t(i: u32) -> TokenId {
        TokenId(i)
    }

    /// A distribution whose predicate value under λ = 0.5 is `g`.
    fn gated(g: bool) -> Distribution {
        if g {
            d(&[0.9, 0.05, 0.05])
        } else {
            d(&[0.4, 0.35, 0.25])
        }
    }

    #[test]
    fn margin_predicate_examples() {
        let rule = MarginRule::default();
        assert!(margin_predicate(&d(&[0.8, 0.15, 0.05]), &rule));
        assert!(!margin_predicate(&d(&[0.5, 0.5, 0.0]), &rule));
        for dist in [d(&[0.5, 0.5]), Distribution::one_hot(3, t(1)), d(&[0.99, 0.01])] {
            assert!(!margin_predicate(&dist, &MarginRule::NEVER_TRUST));
            assert!(margin_predicate(&dist, &MarginRule::ALWAYS_TRUST));
            assert!(margin_predicate(&dist, &MarginRule::new(-3.0)));
        }
    }

    #[test]
    fn trusted_prefix_examples() {
        let rule = MarginRule::default();
        let seq = |gs: &[bool]| gs.iter().map(|&g| gated(g)).collect::<Vec<_>>();
        assert_eq!(trusted_prefix_len(&seq(&[true, true, false, true]), &rule), 2);
        assert_eq!(trusted_prefix_len(&seq(&[true, true, true, true]), &rule), 4);
        assert_eq!(trusted_prefix_len(&seq(&[false, true, true, true]), &rule), 0);
    }

    fn family() -> (ModelOracle, ModelOracle, ModelOracle) {
        let target = ModelOracle::table(
            "target",
            TableModel::new(d(&[0.6, 0.25, 0.15]))
                .with_row(&[t(0)], d(&[0.1, 0.75, 0.15]))
                .unwrap()
                .with_row(&[t(1)], d(&[0.2, 0.2, 0.6]))
                .unwrap()
                .with_row(&[t(2)], d(&[0.5, 0.4, 0.1]))
                .unwrap(),
        );
        let proxy = target.derive_proxy("proxy", ProxyDerivation::new(0.2, NoiseKind::Uniform));
        let drafter = target.derive_proxy("drafter", ProxyDerivation::new(0.6, NoiseKind::Uniform));
        (drafter, proxy, target)
    }

    /// Drafter disagrees with the target after token 2, where the proxy is
    /// confident; the proxy is unsure only after token 1.
    fn disagreeing_family() -> (ModelOracle, ModelOracle, ModelOracle) {
        let target = ModelOracle::table(
            "target",
            TableModel::new(d(&[0.6, 0.25, 0.15]))
                .with_row(&[t(0)], d(&[0.1, 0.75, 0.15]))
                .unwrap()
                .with_row(&[t(1)], d(&[0.2, 0.2, 0.6]))
                .unwrap()
                .with_row(&[t(2)], d(&[0.7, 0.2, 0.1]))
                .unwrap(),
        );
        let proxy = target.derive_proxy("proxy", ProxyDerivation::new(0.2, NoiseKind::Uniform));
        let drafter = ModelOracle::table(
            "drafter",
            TableModel::new(d(&[0.6, 0.25, 0.15]))
                .with_row(&[t(0)], d(&[0.1, 0.8, 0.1]))
                .unwrap()
                .with_row(&[t(1)], d(&[0.2, 0.2, 0.6]))
                .unwrap()
                .with_row(&[t(2)], d(&[0.1, 0.3, 0.6]))
                .unwrap(),
        );
        (drafter, proxy, target)
    }

    #[test]
    fn routing_invariants_hold_every_round() {
        let (dr, px, tg) = disagreeing_family();
        for temperature in [0.0, 1.0] {
            let mut ctx = Context::new(vec![t(2)]);
            let mut streams = SessionStreams::new(17);
            let cfg = TriSpecConfig::new(4, MarginRule::new(0.35), temperature);
            let (mut proxy_only, mut escalated) = (0, 0);
            for _ in 0..300 {
                let out = trispec_round(&dr, &px, &tg, &mut ctx, &cfg, &mut streams).unwrap();
                out.check().unwrap();
                match out.case {
                    RoundCase::ProxyOnly => proxy_only += 1,
                    RoundCase::TargetEscalated => escalated += 1,
                    _ => unreachable!(),
                }
                assert_eq!(out.case == RoundCase::ProxyOnly, out.tau_a < out.tau_m);
            }
            assert!(proxy_only > 0 && escalated > 0, "{proxy_only} / {escalated}");
        }
    }

    #[test]
    fn emitted_length_arithmetic() {
        // case I: k=4, tau_a=1, tau_m=3 -> 2 tokens; case II: tau_a=2, tau_m=2, tau_t=1 -> 4
        let mut a = RoundOutcome::bare(RoundCase::ProxyOnly);
        a.tau_a = Some(1);
        a.tau_m = Some(3);
        a.proxy_called = true;
        a.emitted = vec![t(0); 2];
        a.check().unwrap();
        let mut b = RoundOutcome::bare(RoundCase::TargetEscalated);
        b.tau_a = Some(2);
        b.tau_m = Some(2);
        b.tau_t = Some(1);
        b.proxy_called = true;
        b.target_called = true;
        b.emitted = vec![t(0); 4];
        b.check().unwrap();
        b.emitted.pop();
        assert!(b.check().is_err());
    }

    #[test]
    fn pruned_with_zero_tau_m_equals_full_verification() {
        let (dr, _, tg) = family();
        let ctx = [t(1)];
        let draft = draft_chain(&dr, &ctx, 5, 1.0, &mut RandomStream::new(4, "draft")).unwrap();
        let mut coins_a = CoinStream::new(4, "c");
        coins_a.start_round();
        let mut coins_b = coins_a.clone();
        let full = crate::verification::verify_chain(
            &draft,
            &tg.batch_score(&ctx, draft.tokens()),
            1.0,
            &mut coins_a,
            &mut RandomStream::new(4, "r"),
        )
        .unwrap();
        let pruned =
            pruned_target_verify(&draft, 0, &tg, &ctx, 1.0, &mut coins_b, &mut RandomStream::new(4, "r")).unwrap();
        assert_eq!(pruned.tau_t, full.tau);
        assert_eq!(pruned.correction, full.correction);
        assert_eq!(pruned.scored_positions, 6);
    }

    #[test]
    fn pruned_with_full_tau_m_only_draws_bonus() {
        let (dr, _, tg) = family();
        let ctx = [t(2)];
        let draft = draft_chain(&dr, &ctx, 3, 1.0, &mut RandomStream::new(8, "draft")).unwrap();
        let mut coins = CoinStream::new(1, "c");
        coins.start_round();
        let before = tg.invocations();
        let v = pruned_target_verify(&draft, 3, &tg, &ctx, 1.0, &mut coins, &mut RandomStream::new(1, "r")).unwrap();
        assert_eq!(tg.invocations(), before + 1);
        assert_eq!(v.tau_t, 0);
        assert_eq!(v.correction_kind, CorrectionKind::Bonus);
        assert_eq!(v.scored_positions, 1);
        assert_eq!(coins.drawn(), 0);
    }

    #[test]
    fn sentinels_reproduce_two_model_traces() {
        let (dr, px, tg) = family();
        for temperature in [0.0, 1.0] {
            for (rule, verifier, role) in [
                (MarginRule::NEVER_TRUST, &tg, VerifierRole::Target),
                (MarginRule::ALWAYS_TRUST, &px, VerifierRole::Proxy),
            ] {
                let mut c1 = Context::new(vec![t(0)]);
                let mut c2 = c1.clone();
                let mut s1 = SessionStreams::new(99);
                let mut s2 = SessionStreams::new(99);
                let cfg = TriSpecConfig::new(4, rule, temperature);
                for _ in 0..200 {
                    let a = trispec_round(&dr, &px, &tg, &mut c1, &cfg, &mut s1).unwrap();
                    let b = sd_round(&dr, verifier, &mut c2, 4, temperature, &mut s2, role).unwrap();
                    assert_eq!(a.emitted, b.emitted);
                }
                assert_eq!(c1, c2);
            }
        }
    }

    #[test]
    fn raw_bonus_changes_only_case_one_corrections() {
        let (dr, px, tg) = family();
        let mut cfg = TriSpecConfig::new(4, MarginRule::ALWAYS_TRUST, 1.0);
        cfg.raw_bonus = true;
        let mut ctx = Context::new(vec![t(0)]);
        let mut streams = SessionStreams::new(5);
        for _ in 0..50 {
            let out = trispec_round(&dr, &px, &tg, &mut ctx, &cfg, &mut streams).unwrap();
            assert_eq!(out.case, RoundCase::ProxyOnly);
            out.check().unwrap();
        }
    }

    #[test]
    fn greedy_coins_match_proxy_argmax() {
        let (dr, px, tg) = family();
        let mut ctx = Context::new(vec![t(1)]);
        let mut streams = SessionStreams::new(2);
        let cfg = TriSpecConfig::new(5, MarginRule::default(), 0.0);
        for _ in 0..100 {
            let out = trispec_round(&dr, &px, &tg, &mut ctx, &cfg, &mut streams).unwrap();
            for (i, &s) in out.proxy_coins.iter().enumerate() {
                assert_eq!(s, out.proxy_argmax[i] == out.draft[i]);
            }
        }
        assert_eq!(streams.proxy_coins.drawn(), 0);
    }

    #[test]
    fn single_branch_tree_round_matches_chain_round() {
        let (dr, px, tg) = family();
        for lambda in [0.0, 0.3, 0.5, 0.7, 1.01] {
            let rule = MarginRule::new(lambda);
            let mut c1 = Context::new(vec![t(2)]);
            let mut c2 = c1.clone();
            let mut streams = SessionStreams::new(1);
            let cfg = TriSpecConfig::new(4, rule, 0.0);
            for _ in 0..50 {
                let chain = trispec_round(&dr, &px, &tg, &mut c1, &cfg, &mut streams).unwrap();
                let tree =
                    trispec_tree_round(&dr, &px, &tg, &mut c2, TreeLimits::new(4, 1, 4).unwrap(), &rule).unwrap();
                assert_eq!(chain.case, tree.case);
                assert_eq!(
                    (chain.tau_a, chain.tau_m, chain.tau_t),
                    (tree.tau_a, tree.tau_m, tree.tau_t)
                );
                assert_eq!(chain.emitted, tree.emitted);
                assert_eq!(chain.proxy_coins, tree.proxy_coins);
                assert_eq!(chain.proxy_argmax, tree.proxy_argmax);
                assert_eq!(chain.target_positions, tree.target_positions);
            }
        }
    }

    #[test]
    fn never_trust_tree_matches_target_tree_verification() {
        let (dr, px, tg) = family();
        let limits = TreeLimits::new(4, 3, 12).unwrap();
        let mut c1 = Context::new(vec![t(0)]);
        let mut c2 = c1.clone();
        for _ in 0..50 {
            let a = trispec_tree_round(&dr, &px, &tg, &mut c1, limits, &MarginRule::NEVER_TRUST).unwrap();
            let b = sd_tree_round(&dr, &tg, &mut c2, limits).unwrap();
            assert_eq!(a.case, RoundCase::TargetEscalated);
            assert_eq!(a.tau_m, Some(0));
            assert_eq!(a.emitted, b.emitted);
        }
    }
}
