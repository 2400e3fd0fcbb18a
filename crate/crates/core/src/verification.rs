//! Draft verification by speculative sampling.
//!
//! A drafted token `x` at position `i` is accepted when the position's coin
//! `u_i` satisfies `u_i < min(1, p_v(x) / p_d(x))`. Coins are examined left to
//! right and the first rejection stops the scan. The rejected position is
//! replaced by a draw from `norm(max(0, p_v - p_d))`; if nothing was rejected a
//! bonus token is drawn from the verifier's distribution after the last draft.
//!
//! At `T = 0` the coin is replaced by the exact-match test
//! `argmax(p_v) == x`, and no coins are consumed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drafting::{draft_chain, DraftChain, DraftError, DraftTree};
use crate::models::ModelOracle;
use crate::prob::{apply_temperature, normalize, sample, Context, Distribution, ProbError, TokenId};
use crate::rng::{CoinStream, RandomStream, SessionStreams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("expected {expected} verifier distributions, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("residual at position {position} is all zero")]
    DegenerateResidual { position: usize },
    #[error(transparent)]
    Draft(#[from] DraftError),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

/// Where the replacement token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    /// Residual draw at the first rejected position.
    Residual,
    /// Full acceptance; drawn from the verifier's next distribution.
    Bonus,
    /// Drawn from the verifier distribution directly at a rejected position.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceTrace {
    /// `s_i` for every examined position; stops at the first `false`.
    pub coins: Vec<bool>,
    /// Number of leading accepted drafts.
    pub tau: usize,
    pub correction: TokenId,
    pub correction_dist: Distribution,
    pub correction_kind: CorrectionKind,
}

/// `min(1, p_v(x) / p_d(x))`.
pub fn acceptance_probability(p_v: &Distribution, p_d: &Distribution, token: TokenId) -> f64 {
    let pd = p_d.prob(token);
    if pd <= 0.0 {
        return 1.0;
    }
    (p_v.prob(token) / pd).min(1.0)
}

/// `norm(max(0, p_v - p_d))`.
pub fn residual(p_v: &Distribution, p_d: &Distribution) -> Result<Distribution, ProbError> {
    let weights: Vec<f64> = p_v
        .probs()
        .iter()
        .zip(p_d.probs())
        .map(|(v, d)| (v - d).max(0.0))
        .collect();
    normalize(&weights)
}

/// Exact first-token law of one speculative round with a single draft.
///
/// `P(x) = p_d(x) a(x) + (Σ_y p_d(y) (1 - a(y))) r(x)` with `a` the acceptance
/// probability and `r` the residual.
pub fn single_round_first_token_law(p_d: &Distribution, p_v: &Distribution) -> Vec<f64> {
    let v = p_d.len();
    let accept: Vec<f64> = (0..v)
        .map(|x| acceptance_probability(p_v, p_d, TokenId(x as u32)))
        .collect();
    let reject_mass: f64 = (0..v).map(|y| p_d.probs()[y] * (1.0 - accept[y])).sum();
    let mut law: Vec<f64> = (0..v).map(|x| p_d.probs()[x] * accept[x]).collect();
    if reject_mass > 0.0 {
        if let Ok(r) = residual(p_v, p_d) {
            for (l, rx) in law.iter_mut().zip(r.probs()) {
                *l += reject_mass * rx;
            }
        }
    }
    law
}

/// Accept/reject scan over `tokens` against already-shaped verifier
/// distributions.
///
/// `first_position` is the 1-based draft position of `tokens[0]`; coins are
/// addressed by absolute position so a suffix scan sees the same coins as a
/// full scan would at those positions.
pub fn accept_prefix(
    tokens: &[TokenId],
    draft_dists: &[Distribution],
    verifier_shaped: &[Distribution],
    temperature: f64,
    coins: &mut CoinStream,
    first_position: usize,
) -> (Vec<bool>, usize) {
    let mut outcomes = Vec::with_capacity(tokens.len());
    for (i, &x) in tokens.iter().enumerate() {
        let accepted = if temperature == 0.0 {
            verifier_shaped[i].argmax() == x
        } else {
            let ratio = acceptance_probability(&verifier_shaped[i], &draft_dists[i], x);
            coins.coin(first_position + i) < ratio
        };
        outcomes.push(accepted);
        if !accepted {
            return (outcomes, i);
        }
    }
    let n = tokens.len();
    (outcomes, n)
}

/// Draw the replacement (at `tau < k`) or bonus (at `tau == k`) token.
pub fn draw_correction(
    verifier_shaped: &[Distribution],
    draft_dists: &[Distribution],
    tau: usize,
    position_offset: usize,
    rng: &mut RandomStream,
) -> Result<(TokenId, Distribution, CorrectionKind), VerifyError> {
    if tau == draft_dists.len() {
        let dist = verifier_shaped[tau].clone();
        return Ok((sample(&dist, rng), dist, CorrectionKind::Bonus));
    }
    let dist = residual(&verifier_shaped[tau], &draft_dists[tau]).map_err(|_| VerifyError::DegenerateResidual {
        position: position_offset + tau + 1,
    })?;
    Ok((sample(&dist, rng), dist, CorrectionKind::Residual))
}

pub(crate) fn shape_all(dists: &[Distribution], temperature: f64) -> Result<Vec<Distribution>, ProbError> {
    dists.iter().map(|d| apply_temperature(d, temperature)).collect()
}

/// Verify a chain against `k + 1` raw verifier distributions.
pub fn verify_chain(
    draft: &DraftChain,
    verifier_dists: &[Distribution],
    temperature: f64,
    coins: &mut CoinStream,
    correction_rng: &mut RandomStream,
) -> Result<AcceptanceTrace, VerifyError> {
    let k = draft.len();
    if verifier_dists.len() != k + 1 {
        return Err(VerifyError::LengthMismatch {
            expected: k + 1,
            got: verifier_dists.len(),
        });
    }
    let shaped = shape_all(verifier_dists, temperature)?;
    let (coin_outcomes, tau) = accept_prefix(draft.tokens(), draft.dists(), &shaped, temperature, coins, 1);
    let (correction, correction_dist, correction_kind) =
        draw_correction(&shaped, draft.dists(), tau, 0, correction_rng)?;
    Ok(AcceptanceTrace {
        coins: coin_outcomes,
        tau,
        correction,
        correction_dist,
        correction_kind,
    })
}

/// Which coin stream a two-model round draws from.
///
/// Standard SD against the target uses the target coins; SD against the
/// proxy uses the proxy coins, which is what makes it line up with a
/// proxy-only ternary round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifierRole {
    Proxy,
    Target,
}

impl VerifierRole {
    pub(crate) fn coins<'a>(&self, streams: &'a mut SessionStreams) -> &'a mut CoinStream {
        match self {
            VerifierRole::Proxy => &mut streams.proxy_coins,
            VerifierRole::Target => &mut streams.target_coins,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdRound {
    pub draft: DraftChain,
    pub trace: AcceptanceTrace,
    pub emitted: Vec<TokenId>,
}

/// One draft-then-verify round; commits the emitted tokens to `ctx`.
///
/// Costs `k` drafter passes and one verifier pass.
pub fn sd_round(
    drafter: &ModelOracle,
    verifier: &ModelOracle,
    ctx: &mut Context,
    k: usize,
    temperature: f64,
    streams: &mut SessionStreams,
    role: VerifierRole,
) -> Result<SdRound, VerifyError> {
    role.coins(streams).start_round();
    let draft = draft_chain(drafter, ctx.tokens(), k, temperature, &mut streams.draft)?;
    let verifier_dists = verifier.batch_score(ctx.tokens(), draft.tokens());
    let SessionStreams {
        proxy_coins,
        target_coins,
        correction,
        ..
    } = streams;
    let coins = match role {
        VerifierRole::Proxy => proxy_coins,
        VerifierRole::Target => target_coins,
    };
    let trace = verify_chain(&draft, &verifier_dists, temperature, coins, correction)?;
    let mut emitted = draft.tokens()[..trace.tau].to_vec();
    emitted.push(trace.correction);
    ctx.commit(&emitted);
    Ok(SdRound { draft, trace, emitted })
}

/// Verifier distributions over a flattened tree: one at the root, one per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeScores {
    pub root: Distribution,
    pub nodes: Vec<Distribution>,
}

impl TreeScores {
    /// Distribution after `node` (`None` = root).
    pub fn at(&self, node: Option<usize>) -> &Distribution {
        match node {
            None => &self.root,
            Some(i) => &self.nodes[i],
        }
    }
}

/// Score every node of the tree (and the root) in one verifier pass.
pub fn score_tree(tree: &DraftTree, verifier: &ModelOracle, ctx: &[TokenId]) -> TreeScores {
    let mut contexts = Vec::with_capacity(tree.len() + 1);
    contexts.push(ctx.to_vec());
    contexts.extend(tree.attention_contexts(ctx));
    let mut dists = verifier.score_contexts(&contexts);
    let nodes = dists.split_off(1);
    TreeScores {
        root: dists.pop().expect("root scored"),
        nodes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeVerdict {
    /// Accepted node indices, root-anchored.
    pub path_nodes: Vec<usize>,
    pub tokens: Vec<TokenId>,
    /// Verifier argmax after the accepted path.
    pub correction: TokenId,
    pub scores: TreeScores,
}

/// Walk scored tree greedily: descend while a child matches the argmax.
pub fn greedy_walk(tree: &DraftTree, scores: &TreeScores) -> (Vec<usize>, TokenId) {
    let mut path = Vec::new();
    let mut cur = None;
    loop {
        let want = scores.at(cur).argmax();
        match tree.child_with_token(cur, want) {
            Some(next) => {
                path.push(next);
                cur = Some(next);
            }
            None => return (path, want),
        }
    }
}

/// Greedy tree verification in one verifier pass.
pub fn verify_tree_greedy(tree: &DraftTree, verifier: &ModelOracle, ctx: &[TokenId]) -> TreeVerdict {
    let scores = score_tree(tree, verifier, ctx);
    let (path_nodes, correction) = greedy_walk(tree, &scores);
    let tokens = path_nodes.iter().map(|&i| tree.nodes()[i].token).collect();
    TreeVerdict {
        path_nodes,
        tokens,
        correction,
        scores,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafting::{draft_tree, TreeLimits, TreeNode};
    use crate::models::TableModel;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn t(i: u32) -> TokenId {
        TokenId(i)
    }

    fn coins() -> CoinStream {
        let mut c = CoinStream::new(11, "coins");
        c.start_round();
        c
    }

    #[test]
    fn ratio_above_one_always_accepts() {
        let p_v = d(&[0.6, 0.4]);
        let p_d = d(&[0.3, 0.7]);
        assert_eq!(acceptance_probability(&p_v, &p_d, t(0)), 1.0);
        let chain = DraftChain::new(vec![t(0)], vec![p_d.clone()]).unwrap();
        for seed in 0..50 {
            let mut c = CoinStream::new(seed, "c");
            c.start_round();
            let tr = verify_chain(
                &chain,
                &[p_v.clone(), p_v.clone()],
                1.0,
                &mut c,
                &mut RandomStream::new(seed, "r"),
            )
            .unwrap();
            assert_eq!(tr.tau, 1);
            assert_eq!(tr.correction_kind, CorrectionKind::Bonus);
        }
    }

    #[test]
    fn residual_example() {
        let r = residual(&d(&[0.5, 0.3, 0.2]), &d(&[0.7, 0.2, 0.1])).unwrap();
        for (got, want) in r.probs().iter().zip([0.0, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(residual(&d(&[0.5, 0.5]), &d(&[0.5, 0.5])), Err(ProbError::AllZero));
    }

    #[test]
    fn rejection_draws_from_residual() {
        let p_v = d(&[0.5, 0.3, 0.2]);
        let p_d = d(&[0.7, 0.2, 0.1]);
        let chain = DraftChain::new(vec![t(0)], vec![p_d]).unwrap();
        let mut rejected = 0;
        for seed in 0..200 {
            let mut c = CoinStream::new(seed, "c");
            c.start_round();
            let tr = verify_chain(
                &chain,
                &[p_v.clone(), p_v.clone()],
                1.0,
                &mut c,
                &mut RandomStream::new(seed, "r"),
            )
            .unwrap();
            if tr.tau == 0 {
                rejected += 1;
                assert_eq!(tr.correction_kind, CorrectionKind::Residual);
                assert_ne!(tr.correction, t(0));
                assert!((tr.correction_dist.probs()[1] - 0.5).abs() < 1e-12);
            }
        }
        // rejection probability is 1 - 0.5/0.7
        assert!(rejected > 30 && rejected < 90, "{rejected}");
    }

    #[test]
    fn greedy_reduction_example() {
        // verifier argmaxes: 0, 1, 2, 0, 1 ; drafts: 0, 1, 0, 1
        let v: Vec<Distribution> = [0u32, 1, 2, 0, 1]
            .iter()
            .map(|&a| {
                let mut p = vec![0.1; 3];
                p[a as usize] = 0.8;
                d(&p)
            })
            .collect();
        let drafts = vec![t(0), t(1), t(0), t(1)];
        let dists = drafts.iter().map(|&x| Distribution::one_hot(3, x)).collect();
        let chain = DraftChain::new(drafts, dists).unwrap();
        let mut c = coins();
        let tr = verify_chain(&chain, &v, 0.0, &mut c, &mut RandomStream::new(0, "r")).unwrap();
        assert_eq!(tr.tau, 2);
        assert_eq!(tr.coins, vec![true, true, false]);
        assert_eq!(tr.correction, t(2));
        assert_eq!(c.drawn(), 0);
    }

    #[test]
    fn coins_stop_at_first_rejection() {
        // position 2 can never be accepted: verifier gives it zero mass
        let p_d = d(&[0.5, 0.5]);
        let v_ok = d(&[0.5, 0.5]);
        let v_no = d(&[0.0, 1.0]);
        let chain = DraftChain::new(vec![t(0); 5], vec![p_d; 5]).unwrap();
        let dists = vec![v_ok.clone(), v_no, v_ok.clone(), v_ok.clone(), v_ok.clone(), v_ok];
        let mut c = coins();
        let tr = verify_chain(&chain, &dists, 1.0, &mut c, &mut RandomStream::new(0, "r")).unwrap();
        assert_eq!(tr.tau, 1);
        assert_eq!(c.drawn(), 2);
        assert_eq!(tr.coins.len(), 2);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let chain = DraftChain::new(vec![t(0)], vec![d(&[0.5, 0.5])]).unwrap();
        let err = verify_chain(
            &chain,
            &[d(&[0.5, 0.5])],
            1.0,
            &mut coins(),
            &mut RandomStream::new(0, "r"),
        );
        assert_eq!(err, Err(VerifyError::LengthMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn analytic_law_example() {
        let law = single_round_first_token_law(&d(&[0.6, 0.3, 0.1]), &d(&[0.3, 0.4, 0.3]));
        for (got, want) in law.iter().zip([0.3, 0.4, 0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
        // identical distributions never reject
        let same = d(&[0.2, 0.8]);
        assert_eq!(single_round_first_token_law(&same, &same), vec![0.2, 0.8]);
    }

    fn table3() -> ModelOracle {
        let m = TableModel::new(d(&[0.5, 0.3, 0.2]))
            .with_row(&[t(0)], d(&[0.1, 0.6, 0.3]))
            .unwrap()
            .with_row(&[t(1)], d(&[0.2, 0.1, 0.7]))
            .unwrap()
            .with_row(&[t(2)], d(&[0.7, 0.2, 0.1]))
            .unwrap();
        ModelOracle::table("t3", m)
    }

    #[test]
    fn self_agreement_accepts_everything_greedy() {
        let m = table3();
        let mut ctx = Context::new(vec![t(0)]);
        let mut streams = SessionStreams::new(1);
        for _ in 0..20 {
            let r = sd_round(&m, &m, &mut ctx, 4, 0.0, &mut streams, VerifierRole::Target).unwrap();
            assert_eq!(r.trace.tau, 4);
            assert_eq!(r.emitted.len(), 5);
        }
        assert_eq!(ctx.len(), 1 + 20 * 5);
    }

    #[test]
    fn sd_round_call_accounting() {
        let drafter = table3();
        let verifier = drafter.derive_proxy(
            "v",
            crate::models::ProxyDerivation::new(0.3, crate::models::NoiseKind::Uniform),
        );
        let mut ctx = Context::new(vec![t(1)]);
        let mut streams = SessionStreams::new(3);
        let r = sd_round(
            &drafter,
            &verifier,
            &mut ctx,
            3,
            1.0,
            &mut streams,
            VerifierRole::Target,
        )
        .unwrap();
        assert_eq!(drafter.invocations(), 3);
        assert_eq!(verifier.invocations(), 1);
        assert_eq!(r.emitted.len(), r.trace.tau + 1);
        assert_eq!(&ctx.tokens()[1..], r.emitted.as_slice());
        assert_eq!(streams.proxy_coins.drawn(), 0);
    }

    #[test]
    fn tree_self_agreement_accepts_full_path() {
        let m = table3();
        let tree = draft_tree(&m, &[t(2)], TreeLimits::new(4, 1, 4).unwrap(), 0.0).unwrap();
        let v = verify_tree_greedy(&tree, &m, &[t(2)]);
        assert_eq!(v.tokens.len(), 4);
        assert_eq!(v.correction, m.peek(&tree.attention_contexts(&[t(2)])[3]).argmax());
    }

    #[test]
    fn tree_picks_matching_branch() {
        // root children {b=1, c=2}; verifier argmax at root is 2
        let verifier = ModelOracle::table(
            "v",
            TableModel::new(d(&[0.1, 0.2, 0.7]))
                .with_row(&[t(2)], d(&[0.8, 0.1, 0.1]))
                .unwrap(),
        );
        let node = |token, parent, depth| TreeNode {
            token: t(token),
            parent,
            depth,
            prob: 0.5,
            path_prob: 0.5,
        };
        let tree = crate::drafting::DraftTree::from_nodes(
            vec![
                node(1, None, 1),
                node(2, None, 1),
                node(1, Some(0), 2),
                node(0, Some(1), 2),
            ],
            TreeLimits::new(2, 2, 4).unwrap(),
        );
        let v = verify_tree_greedy(&tree, &verifier, &[]);
        assert_eq!(v.path_nodes, vec![1, 3]);
        assert_eq!(v.tokens, vec![t(2), t(0)]);
        assert_eq!(verifier.invocations(), 1);
    }
}
