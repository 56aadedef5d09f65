//! Reply trees flattened into root-to-leaf threads. A message shared by
//! several threads is trained on once: the first thread (depth-first by
//! child index) keeps its loss, later copies are masked.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Token};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    #[serde(default)]
    pub role: String,
    pub tokens: Vec<Token>,
    #[serde(default)]
    pub parent: Option<u64>,
}

/// Messages in any order; children keep the relative order of this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTree {
    pub nodes: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatThread {
    pub tokens: Vec<Token>,
    pub loss_mask: Vec<bool>,
    /// Message ids from root to leaf.
    pub path: Vec<u64>,
    /// Tokens cut from the tail to fit a length limit.
    pub truncated_tokens: usize,
    /// The cut fell inside a message rather than on a boundary.
    pub truncated_mid_message: bool,
}

struct Index<'a> {
    root: usize,
    children: Vec<Vec<usize>>,
    nodes: &'a [Message],
}

impl ConversationTree {
    fn index(&self) -> Result<Index<'_>, DataError> {
        let bad = |m: String| Err(DataError::InvalidTree(m));
        if self.nodes.is_empty() {
            return bad("empty tree".into());
        }
        let mut pos = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if pos.insert(n.id, i).is_some() {
                return bad(format!("duplicate message id {}", n.id));
            }
        }
        let mut children = vec![Vec::new(); self.nodes.len()];
        let mut root = None;
        for (i, n) in self.nodes.iter().enumerate() {
            match n.parent {
                None if root.is_some() => return bad(format!("second root {}", n.id)),
                None => root = Some(i),
                Some(p) => match pos.get(&p) {
                    Some(&pi) => children[pi].push(i),
                    None => return bad(format!("message {} has missing parent {p}", n.id)),
                },
            }
        }
        let Some(root) = root else {
            return bad("no root (every message has a parent)".into());
        };
        // everything must be reachable from the root, otherwise a cycle exists
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        let mut reached = 0;
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            reached += 1;
            stack.extend(&children[i]);
        }
        if reached != self.nodes.len() {
            return bad("cycle detected: some messages are unreachable from the root".into());
        }
        Ok(Index {
            root,
            children,
            nodes: &self.nodes,
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.index().map(|_| ())
    }

    /// Root-to-leaf paths (node indices), depth-first by child index.
    fn paths(&self) -> Result<Vec<Vec<usize>>, DataError> {
        let idx = self.index()?;
        let mut out = Vec::new();
        let mut stack = vec![(idx.root, vec![idx.root])];
        while let Some((node, path)) = stack.pop() {
            let kids = &idx.children[node];
            if kids.is_empty() {
                out.push(path);
                continue;
            }
            for &c in kids.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((c, p));
            }
        }
        debug_assert!(out.iter().all(|p| p[0] == idx.root && p.len() <= idx.nodes.len()));
        Ok(out)
    }

    pub fn flatten(&self) -> Result<Vec<FlatThread>, DataError> {
        self.flatten_limited(usize::MAX)
    }

    /// Flattens and truncates each thread's tail to at most `max_len` tokens.
    pub fn flatten_limited(&self, max_len: usize) -> Result<Vec<FlatThread>, DataError> {
        let mut trained = vec![false; self.nodes.len()];
        let mut threads = Vec::new();
        for path in self.paths()? {
            let mut t = FlatThread {
                tokens: Vec::new(),
                loss_mask: Vec::new(),
                path: path.iter().map(|&i| self.nodes[i].id).collect(),
                truncated_tokens: 0,
                truncated_mid_message: false,
            };
            for &i in &path {
                let msg = &self.nodes[i].tokens;
                let room = max_len.saturating_sub(t.tokens.len());
                let keep = msg.len().min(room);
                if keep < msg.len() {
                    t.truncated_tokens += msg.len() - keep;
                    if keep > 0 {
                        t.truncated_mid_message = true;
                    }
                }
                let first = !trained[i];
                t.tokens.extend_from_slice(&msg[..keep]);
                t.loss_mask.extend(std::iter::repeat_n(first, keep));
                // a message only counts as trained if its full text made it in
                if keep == msg.len() {
                    trained[i] = true;
                }
            }
            threads.push(t);
        }
        Ok(threads)
    }

    /// `sum(thread tokens) / sum(unique message tokens) - 1`.
    pub fn repetition_overhead(&self) -> Result<f64, DataError> {
        let unique: usize = self.nodes.iter().map(|n| n.tokens.len()).sum();
        if unique == 0 {
            return Err(DataError::InvalidTree("tree has no tokens".into()));
        }
        let total: usize = self
            .paths()?
            .iter()
            .flat_map(|p| p.iter().map(|&i| self.nodes[i].tokens.len()))
            .sum();
        Ok(total as f64 / unique as f64 - 1.0)
    }
}

/// Token-weighted overhead of a mixture: `sum(share_i * overhead_i)`.
pub fn weighted_overhead(shares_and_overheads: &[(f64, f64)]) -> f64 {
    shares_and_overheads.iter().map(|(s, o)| s * o).sum()
}
