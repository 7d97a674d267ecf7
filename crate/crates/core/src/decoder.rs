//! Trie-constrained beam search over semantic ids.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::generator::{DecodeState, Generator, IdTable, Prompt, VocabSpec};
use crate::rqvae::SemanticId;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<u32>,
}

/// Fixed-depth prefix tree over the catalog's semantic ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogTrie {
    nodes: Vec<Node>,
    depth: usize,
    n_leaves: usize,
}

impl CatalogTrie {
    pub fn build(ids: &[SemanticId]) -> Result<Self> {
        let depth = ids.first().map_or(0, |s| s.tokens.len());
        let mut trie = Self {
            nodes: vec![Node::default()],
            depth,
            n_leaves: 0,
        };
        for id in ids {
            if id.tokens.len() != depth {
                return Err(Error::mismatch("semantic id length", depth, id.tokens.len()));
            }
            let mut node = 0;
            for &c in &id.tokens {
                node = match trie.nodes[node].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        trie.nodes.push(Node::default());
                        let n = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(c, n);
                        n
                    }
                };
            }
            if let Some(first) = trie.nodes[node].item {
                return Err(Error::DuplicateId {
                    tokens: id.tokens.clone(),
                    first,
                    second: id.item_id,
                });
            }
            trie.nodes[node].item = Some(id.item_id);
            trie.n_leaves += 1;
        }
        Ok(trie)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    /// Count leaves by walking the tree.
    pub fn count_leaves(&self) -> usize {
        let mut stack = vec![(0usize, 0usize)];
        let mut count = 0;
        while let Some((n, d)) = stack.pop() {
            if d == self.depth {
                count += usize::from(self.nodes[n].item.is_some());
                continue;
            }
            stack.extend(self.nodes[n].children.values().map(|&c| (c, d + 1)));
        }
        count
    }

    fn node(&self, prefix: &[u32]) -> Result<usize> {
        let mut node = 0;
        for &c in prefix {
            node = *self.nodes[node]
                .children
                .get(&c)
                .ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        }
        Ok(node)
    }

    /// Child codes of `prefix`, ascending.
    pub fn children(&self, prefix: &[u32]) -> Result<Vec<u32>> {
        if prefix.len() >= self.depth {
            return Err(Error::InvalidPrefix(prefix.to_vec()));
        }
        Ok(self.nodes[self.node(prefix)?].children.keys().copied().collect())
    }

    /// Item at a complete path.
    pub fn item(&self, codes: &[u32]) -> Option<u32> {
        if codes.len() != self.depth {
            return None;
        }
        self.node(codes).ok().and_then(|n| self.nodes[n].item)
    }

    pub fn contains(&self, codes: &[u32]) -> bool {
        self.item(codes).is_some()
    }
}

/// Tokens allowed after `prefix`: its child codes at level `|prefix| + 1`.
pub fn allowed_tokens(trie: &CatalogTrie, prefix: &[u32], vocab: &VocabSpec) -> Result<Vec<u32>> {
    let level = prefix.len() as u32 + 1;
    Ok(trie
        .children(prefix)?
        .into_iter()
        .map(|c| vocab.token_id(level, c))
        .collect())
}

/// Log-probabilities of `allowed` under the softmax restricted to them.
pub fn masked_log_probs<T: Scalar>(logits: &[T], allowed: &[u32]) -> Vec<f64> {
    let vals: Vec<f64> = allowed.iter().map(|&t| logits[t as usize].as_f64()).collect();
    let lse = crate::optim::log_sum_exp(vals.iter().copied());
    vals.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: u32,
    pub score: f64,
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub items: Vec<Recommendation>,
    /// Fewer than the requested number of items survived filtering.
    pub shortfall: bool,
}

impl RecommendationList {
    pub fn item_ids(&self) -> Vec<u32> {
        self.items.iter().map(|r| r.item).collect()
    }
}

struct Hyp<T> {
    codes: Vec<u32>,
    score: f64,
    state: DecodeState<T>,
}

fn by_score_then_codes(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn rank_final(out: &mut [Recommendation]) {
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
}

fn prompt_state<T: Scalar>(model: &Generator<T>, prompt: &Prompt, depth: usize) -> Result<DecodeState<T>> {
    let needed = prompt.token_ids.len() + depth.saturating_sub(1);
    if needed > model.max_len() {
        return Err(Error::Overlength {
            len: needed,
            max: model.max_len(),
        });
    }
    model.prime(&prompt.token_ids)
}

/// Width-`width` beam search restricted to catalog prefixes. Scores are
/// sums of masked log-probabilities; ties are broken by ascending codes
/// during search and by ascending item id in the final ranking.
pub fn beam_search<T: Scalar>(
    model: &Generator<T>,
    prompt: &Prompt,
    trie: &CatalogTrie,
    width: usize,
) -> Result<Vec<Recommendation>> {
    if width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let depth = trie.depth();
    if depth == 0 || trie.n_leaves() == 0 {
        return Ok(Vec::new());
    }
    let vocab = model.vocab;
    let mut beams = vec![Hyp {
        codes: Vec::new(),
        score: 0.0,
        state: prompt_state(model, prompt, depth)?,
    }];
    for level in 0..depth {
        let mut cands: Vec<(usize, Vec<u32>, f64, u32)> = Vec::new();
        for (bi, h) in beams.iter().enumerate() {
            let children = trie.children(&h.codes)?;
            let tokens: Vec<u32> = children.iter().map(|&c| vocab.token_id(level as u32 + 1, c)).collect();
            let lps = masked_log_probs(h.state.logits(), &tokens);
            for ((&c, &tok), lp) in children.iter().zip(&tokens).zip(lps) {
                let mut codes = h.codes.clone();
                codes.push(c);
                cands.push((bi, codes, h.score + lp, tok));
            }
        }
        if level + 1 == depth {
            let mut out: Vec<Recommendation> = cands
                .into_iter()
                .map(|(_, codes, score, _)| Recommendation {
                    item: trie.item(&codes).expect("complete path is a leaf"),
                    score,
                    codes,
                })
                .collect();
            rank_final(&mut out);
            out.truncate(width);
            return Ok(out);
        }
        cands.sort_by(|a, b| by_score_then_codes((a.2, &a.1), (b.2, &b.1)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (bi, codes, score, tok) in cands {
            let mut state = beams[bi].state.clone();
            model.extend(&mut state, tok)?;
            next.push(Hyp { codes, score, state });
        }
        beams = next;
    }
    unreachable!("loop returns at the last level")
}

/// Score every catalog id by walking the whole trie with the same
/// incremental decoder as [`beam_search`]; ranked like the beam output.
pub fn exhaustive_ranking<T: Scalar>(
    model: &Generator<T>,
    prompt: &Prompt,
    trie: &CatalogTrie,
) -> Result<Vec<Recommendation>> {
    let depth = trie.depth();
    let mut out = Vec::with_capacity(trie.n_leaves());
    if depth == 0 {
        return Ok(out);
    }
    let root = prompt_state(model, prompt, depth)?;
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64, root)];
    while let Some((codes, score, state)) = stack.pop() {
        let level = codes.len();
        let children = trie.children(&codes)?;
        let tokens: Vec<u32> = children.iter().map(|&c| model.vocab.token_id(level as u32 + 1, c)).collect();
        let lps = masked_log_probs(state.logits(), &tokens);
        for ((&c, &tok), lp) in children.iter().zip(&tokens).zip(lps) {
            let mut child = codes.clone();
            child.push(c);
            let s = score + lp;
            if level + 1 == depth {
                out.push(Recommendation {
                    item: trie.item(&child).expect("leaf"),
                    score: s,
                    codes: child,
                });
            } else {
                let mut st = state.clone();
                model.extend(&mut st, tok)?;
                stack.push((child, s, st));
            }
        }
    }
    rank_final(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub exclude_seen: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 30,
            exclude_seen: true,
        }
    }
}

/// Top-`k` items for a user with the given item history.
pub fn recommend<T: Scalar>(
    model: &Generator<T>,
    trie: &CatalogTrie,
    table: &IdTable,
    history: &[u32],
    k: usize,
    cfg: &DecodeConfig,
) -> Result<RecommendationList> {
    if cfg.beam < k {
        return Err(Error::config(format!("beam width {} is smaller than K = {k}", cfg.beam)));
    }
    let depth = trie.depth();
    let prompt = table.prompt(history, model.max_len() + 1 - depth.max(1))?;
    let ranked = beam_search(model, &prompt, trie, cfg.beam)?;
    let seen: HashSet<u32> = if cfg.exclude_seen {
        history.iter().copied().collect()
    } else {
        HashSet::new()
    };
    let items: Vec<Recommendation> = ranked.into_iter().filter(|r| !seen.contains(&r.item)).take(k).collect();
    Ok(RecommendationList {
        shortfall: items.len() < k,
        items,
    })
}
