//! Draft construction: sampled chains and static top-k trees.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ModelOracle;
use crate::prob::{apply_temperature, sample, Distribution, ProbError, TokenId};
use crate::rng::RandomStream;

/// Default chain length, matching the default tree depth.
pub const DEFAULT_DRAFT_LEN: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DraftError {
    #[error("draft length must be at least 1")]
    ZeroLength,
    #[error("invalid tree limits: depth={depth}, branch_topk={branch_topk}, budget={budget}")]
    InvalidTreeLimits {
        depth: usize,
        branch_topk: usize,
        budget: usize,
    },
    #[error("accepted path diverges from the tree at step {step}")]
    PathNotInTree { step: usize },
    #[error(transparent)]
    Prob(#[from] ProbError),
}

/// `k` drafted tokens and the (temperature-shaped) distributions they were
/// sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftChain {
    tokens: Vec<TokenId>,
    dists: Vec<Distribution>,
}

impl DraftChain {
    pub fn new(tokens: Vec<TokenId>, dists: Vec<Distribution>) -> Result<Self, DraftError> {
        if tokens.is_empty() {
            return Err(DraftError::ZeroLength);
        }
        assert_eq!(tokens.len(), dists.len(), "one distribution per drafted token");
        debug_assert!(tokens.iter().zip(&dists).all(|(t, d)| d.prob(*t) > 0.0));
        Ok(Self { tokens, dists })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn dists(&self) -> &[Distribution] {
        &self.dists
    }
}

/// Autoregressively sample `k` tokens from the drafter.
///
/// Costs `k` drafter forward passes and `k` uniforms from `rng`.
pub fn draft_chain(
    drafter: &ModelOracle,
    ctx: &[TokenId],
    k: usize,
    temperature: f64,
    rng: &mut RandomStream,
) -> Result<DraftChain, DraftError> {
    if k == 0 {
        return Err(DraftError::ZeroLength);
    }
    let mut buf = ctx.to_vec();
    let mut tokens = Vec::with_capacity(k);
    let mut dists = Vec::with_capacity(k);
    for _ in 0..k {
        let shaped = apply_temperature(&drafter.next_dist(&buf), temperature)?;
        let token = sample(&shaped, rng);
        buf.push(token);
        tokens.push(token);
        dists.push(shaped);
    }
    DraftChain::new(tokens, dists)
}

/// Depth, per-level beam width and total node budget of a draft tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLimits {
    pub depth: usize,
    pub branch_topk: usize,
    pub budget: usize,
}

impl TreeLimits {
    pub fn new(depth: usize, branch_topk: usize, budget: usize) -> Result<Self, DraftError> {
        if depth == 0 || branch_topk == 0 || budget < depth {
            return Err(DraftError::InvalidTreeLimits {
                depth,
                branch_topk,
                budget,
            });
        }
        Ok(Self {
            depth,
            branch_topk,
            budget,
        })
    }
}

impl Default for TreeLimits {
    fn default() -> Self {
        Self {
            depth: 6,
            branch_topk: 10,
            budget: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    /// `None` means the node hangs off the root (the committed context tip).
    pub parent: Option<usize>,
    pub depth: usize,
    /// Drafter probability of `token` given its ancestors.
    pub prob: f64,
    /// Product of `prob` along the root path.
    pub path_prob: f64,
}

/// A draft tree with its ancestor mask.
///
/// Nodes are stored parents-first; `mask[i][j]` is true iff `j` is `i` or an
/// ancestor of `i`. The root is implicit and not part of the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    nodes: Vec<TreeNode>,
    mask: Vec<Vec<bool>>,
    limits: TreeLimits,
}

fn ancestor_mask(nodes: &[TreeNode]) -> Vec<Vec<bool>> {
    let n = nodes.len();
    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        mask[i][i] = true;
        if let Some(p) = nodes[i].parent {
            debug_assert!(p < i);
            let (before, row) = mask.split_at_mut(i);
            for (j, &reach) in before[p].iter().enumerate().take(i) {
                if reach {
                    row[0][j] = true;
                }
            }
        }
    }
    mask
}

impl DraftTree {
    /// Build from parents-first nodes; the mask is derived.
    pub fn from_nodes(nodes: Vec<TreeNode>, limits: TreeLimits) -> Self {
        let mask = ancestor_mask(&nodes);
        Self { nodes, mask, limits }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn limits(&self) -> TreeLimits {
        self.limits
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Children of `parent` (`None` = root), most probable first.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == parent)
            .collect()
    }

    pub fn child_with_token(&self, parent: Option<usize>, token: TokenId) -> Option<usize> {
        (0..self.nodes.len()).find(|&i| self.nodes[i].parent == parent && self.nodes[i].token == token)
    }

    /// Root-anchored token path ending at `node`, read off the mask row.
    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        self.mask[node]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(j, _)| self.nodes[j].token)
            .collect()
    }

    /// Context each node attends to, `ctx + path`, in node order.
    pub fn attention_contexts(&self, ctx: &[TokenId]) -> Vec<Vec<TokenId>> {
        (0..self.nodes.len())
            .map(|i| {
                let mut c = ctx.to_vec();
                c.extend(self.path_tokens(i));
                c
            })
            .collect()
    }

    /// Follow the most probable child from `start` down to a leaf.
    pub fn greedy_continuation(&self, start: Option<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = start;
        while let Some(&first) = self.children(cur).first() {
            out.push(first);
            cur = Some(first);
        }
        out
    }

    /// Locate the node reached by following `path` from the root.
    pub fn find_path(&self, path: &[TokenId]) -> Result<Vec<usize>, DraftError> {
        let mut cur = None;
        let mut out = Vec::with_capacity(path.len());
        for (step, &tok) in path.iter().enumerate() {
            let next = self
                .child_with_token(cur, tok)
                .ok_or(DraftError::PathNotInTree { step })?;
            out.push(next);
            cur = Some(next);
        }
        Ok(out)
    }
}

/// Static top-k tree expansion.
///
/// Level `d` expands every frontier node into its `branch_topk` most probable
/// children, then keeps the candidates with the highest path probability.
/// The level width is capped at `branch_topk` and at whatever budget remains
/// after reserving one node for every deeper level, so the tree always reaches
/// full depth. Each level costs one drafter pass. For `T = 0` the raw drafter
/// probabilities rank children (argmax is temperature invariant).
pub fn draft_tree(
    drafter: &ModelOracle,
    ctx: &[TokenId],
    limits: TreeLimits,
    temperature: f64,
) -> Result<DraftTree, DraftError> {
    let limits = TreeLimits::new(limits.depth, limits.branch_topk, limits.budget)?;
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(limits.budget);
    let mut frontier: Vec<Option<usize>> = vec![None];

    for depth in 1..=limits.depth {
        let contexts: Vec<Vec<TokenId>> = frontier
            .iter()
            .map(|f| {
                let mut c = ctx.to_vec();
                if let Some(i) = f {
                    c.extend(path_of(&nodes, *i));
                }
                c
            })
            .collect();
        let dists = drafter.score_contexts(&contexts);

        // (path_prob, frontier slot, rank, node)
        let mut candidates: Vec<(f64, usize, usize, TreeNode)> = Vec::new();
        for (slot, (parent, dist)) in frontier.iter().zip(dists).enumerate() {
            let dist = if temperature > 0.0 {
                apply_temperature(&dist, temperature)?
            } else {
                dist
            };
            let parent_path = parent.map_or(1.0, |p| nodes[p].path_prob);
            for (rank, token) in dist.ranked().into_iter().take(limits.branch_topk).enumerate() {
                let prob = dist.prob(token);
                if prob <= 0.0 {
                    break;
                }
                let node = TreeNode {
                    token,
                    parent: *parent,
                    depth,
                    prob,
                    path_prob: parent_path * prob,
                };
                candidates.push((node.path_prob, slot, rank, node));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let reserve = limits.depth - depth;
        let width = limits
            .branch_topk
            .min(limits.budget - nodes.len() - reserve)
            .min(candidates.len());
        if width == 0 {
            break;
        }
        // keep parents-first order and, among siblings, most probable first
        let mut chosen: Vec<(usize, usize, TreeNode)> = candidates
            .into_iter()
            .take(width)
            .map(|(_, slot, rank, node)| (slot, rank, node))
            .collect();
        chosen.sort_by_key(|&(slot, rank, _)| (slot, rank));
        frontier.clear();
        for (_, _, node) in chosen {
            frontier.push(Some(nodes.len()));
            nodes.push(node);
        }
    }
    Ok(DraftTree::from_nodes(nodes, limits))
}

fn path_of(nodes: &[TreeNode], mut i: usize) -> Vec<TokenId> {
    let mut rev = vec![nodes[i].token];
    while let Some(p) = nodes[i].parent {
        rev.push(nodes[p].token);
        i = p;
    }
    rev.reverse();
    rev
}

/// Commit `accepted_path` and re-root the tree at its last node.
///
/// Sibling branches of the accepted nodes are dropped; surviving nodes keep
/// their tokens, probabilities and relative ancestry, and their mask rows and
/// columns are carried over unchanged.
pub fn prune_tree_prefix(tree: &DraftTree, accepted_path: &[TokenId]) -> Result<DraftTree, DraftError> {
    let path_nodes = tree.find_path(accepted_path)?;
    let Some(&anchor) = path_nodes.last() else {
        return Ok(tree.clone());
    };
    let keep: Vec<usize> = (0..tree.len())
        .filter(|&i| i != anchor && tree.mask[i][anchor])
        .collect();
    let mut remap = vec![usize::MAX; tree.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let shift = accepted_path.len();
    let nodes: Vec<TreeNode> = keep
        .iter()
        .map(|&old| {
            let n = tree.nodes[old];
            TreeNode {
                parent: match n.parent {
                    Some(p) if p == anchor => None,
                    Some(p) => Some(remap[p]),
                    None => unreachable!("kept nodes descend from the anchor"),
                },
                depth: n.depth - shift,
                ..n
            }
        })
        .collect();
    let mask = keep
        .iter()
        .map(|&r| keep.iter().map(|&c| tree.mask[r][c]).collect())
        .collect();
    let limits = TreeLimits {
        depth: tree.limits.depth.saturating_sub(shift),
        ..tree.limits
    };
    Ok(DraftTree { nodes, mask, limits })
}
