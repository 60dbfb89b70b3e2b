//! Prefix tree over EOS-terminated token sequences.
//!
//! Only nodes with two or more leaves below them are materialized. Once a
//! prefix identifies a single stored sequence, the rest of the path is read
//! straight out of the flat token buffer, so the long unique tails of passages
//! cost four bytes per token. All queries still behave as if every token
//! position were a node, and [`TrieStats::node_count`] counts them that way.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tokenization::{TokenId, EOS};

/// Child maps wider than this switch from a sorted vector to a hash map.
pub const BRANCHING_THRESHOLD: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ChildRef {
    Node(u32),
    Leaf(u32),
}

#[derive(Debug, Clone)]
pub(crate) enum ChildMap {
    Small(Vec<(TokenId, ChildRef)>),
    Large(Box<HashMap<TokenId, ChildRef>>),
}

impl ChildMap {
    fn get(&self, token: TokenId) -> Option<ChildRef> {
        match self {
            ChildMap::Small(v) => v
                .binary_search_by_key(&token, |&(t, _)| t)
                .ok()
                .map(|i| v[i].1),
            ChildMap::Large(m) => m.get(&token).copied(),
        }
    }

    fn len(&self) -> usize {
        match self {
            ChildMap::Small(v) => v.len(),
            ChildMap::Large(m) => m.len(),
        }
    }

    /// Children in ascending token order.
    pub(crate) fn sorted(&self) -> Vec<(TokenId, ChildRef)> {
        match self {
            ChildMap::Small(v) => v.clone(),
            ChildMap::Large(m) => {
                let mut v: Vec<_> = m.iter().map(|(&t, &c)| (t, c)).collect();
                v.sort_unstable_by_key(|&(t, _)| t);
                v
            }
        }
    }

    fn heap_bytes(&self) -> usize {
        match self {
            ChildMap::Small(v) => v.capacity() * std::mem::size_of::<(TokenId, ChildRef)>(),
            ChildMap::Large(m) => {
                std::mem::size_of::<HashMap<TokenId, ChildRef>>()
                    + m.capacity() * (std::mem::size_of::<(TokenId, ChildRef)>() + 1)
            }
        }
    }

    pub(crate) fn from_sorted(children: Vec<(TokenId, ChildRef)>) -> Self {
        if children.len() > BRANCHING_THRESHOLD {
            ChildMap::Large(Box::new(children.into_iter().collect()))
        } else {
            ChildMap::Small(children)
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) depth: u32,
    pub(crate) leaf_count: u32,
    pub(crate) children: ChildMap,
}

/// A position in the trie after consuming some prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cursor {
    /// A materialized branching node.
    Node(u32),
    /// Inside the unique tail of a leaf, `pos` tokens consumed.
    Tail { leaf: u32, pos: u32 },
    /// After the terminating EOS of a leaf.
    End(u32),
}

#[derive(Debug, Clone, Default)]
pub struct TokenTrie {
    pub(crate) root: Option<ChildRef>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) leaf_ids: Vec<String>,
    pub(crate) offsets: Vec<u32>,
    pub(crate) tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrieStats {
    /// Nodes counted one per distinct prefix, EOS nodes included.
    pub node_count: u64,
    /// Nodes actually allocated (branching nodes only).
    pub materialized_nodes: u64,
    pub leaf_count: u64,
    /// Longest root-to-leaf path in tokens, EOS included.
    pub max_depth: u64,
    pub resident_bytes: u64,
}

impl TrieStats {
    pub(crate) fn merge(&mut self, other: &TrieStats) {
        self.node_count += other.node_count;
        self.materialized_nodes += other.materialized_nodes;
        self.leaf_count += other.leaf_count;
        self.max_depth = self.max_depth.max(other.max_depth);
        self.resident_bytes += other.resident_bytes;
    }
}

impl TokenTrie {
    /// Builds a trie from `(leaf_id, sequence)` pairs. Identical sequences are
    /// stored once, under the first leaf id given for them.
    pub fn build<S: AsRef<[TokenId]>>(entries: impl IntoIterator<Item = (String, S)>) -> Result<Self> {
        let mut leaf_ids = Vec::new();
        let mut offsets = vec![0u32];
        let mut tokens: Vec<TokenId> = Vec::new();
        let mut seen: HashMap<Vec<TokenId>, ()> = HashMap::new();
        for (id, seq) in entries {
            let seq = seq.as_ref();
            if seq.contains(&EOS) {
                return Err(Error::IndexFormat(format!("sequence for {id:?} contains EOS")));
            }
            if seen.insert(seq.to_vec(), ()).is_some() {
                continue;
            }
            leaf_ids.push(id);
            tokens.extend_from_slice(seq);
            let end = u32::try_from(tokens.len())
                .map_err(|_| Error::IndexFormat("trie exceeds u32 token capacity".into()))?;
            offsets.push(end);
        }
        drop(seen);

        let mut trie = TokenTrie {
            root: None,
            nodes: Vec::new(),
            leaf_ids,
            offsets,
            tokens,
        };
        trie.link();
        Ok(trie)
    }

    fn link(&mut self) {
        let n = self.leaf_ids.len();
        if n == 0 {
            return;
        }
        if n == 1 {
            self.root = Some(ChildRef::Leaf(0));
            return;
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            let (sa, sb) = (self.sequence(a), self.sequence(b));
            sa.iter()
                .chain(std::iter::once(&EOS))
                .cmp(sb.iter().chain(std::iter::once(&EOS)))
        });

        struct Task {
            parent: Option<u32>,
            token: TokenId,
            start: usize,
            end: usize,
            depth: u32,
        }
        let mut children: Vec<Vec<(TokenId, ChildRef)>> = Vec::new();
        let mut stack = vec![Task {
            parent: None,
            token: 0,
            start: 0,
            end: n,
            depth: 0,
        }];
        while let Some(task) = stack.pop() {
            let range = &order[task.start..task.end];
            let child = if range.len() == 1 {
                ChildRef::Leaf(range[0])
            } else {
                let id = self.nodes.len() as u32;
                self.nodes.push(Node {
                    depth: task.depth,
                    leaf_count: range.len() as u32,
                    children: ChildMap::Small(Vec::new()),
                });
                children.push(Vec::new());
                let mut groups = Vec::new();
                let mut i = task.start;
                while i < task.end {
                    let tok = self.token_at(order[i], task.depth);
                    let mut j = i + 1;
                    while j < task.end && self.token_at(order[j], task.depth) == tok {
                        j += 1;
                    }
                    groups.push((tok, i, j));
                    i = j;
                }
                for &(tok, start, end) in groups.iter().rev() {
                    stack.push(Task {
                        parent: Some(id),
                        token: tok,
                        start,
                        end,
                        depth: task.depth + 1,
                    });
                }
                ChildRef::Node(id)
            };
            match task.parent {
                None => self.root = Some(child),
                Some(p) => children[p as usize].push((task.token, child)),
            }
        }
        for (node, kids) in self.nodes.iter_mut().zip(children) {
            node.children = ChildMap::from_sorted(kids);
        }
    }

    fn token_at(&self, leaf: u32, depth: u32) -> TokenId {
        self.sequence(leaf)
            .get(depth as usize)
            .copied()
            .unwrap_or(EOS)
    }

    /// Stored sequence of a leaf, without EOS.
    pub fn sequence(&self, leaf: u32) -> &[TokenId] {
        let (a, b) = (self.offsets[leaf as usize], self.offsets[leaf as usize + 1]);
        &self.tokens[a as usize..b as usize]
    }

    pub fn leaf_id(&self, leaf: u32) -> &str {
        &self.leaf_ids[leaf as usize]
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_ids.is_empty()
    }

    /// `(leaf_id, sequence)` for every stored sequence, in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[TokenId])> {
        (0..self.leaf_ids.len() as u32).map(|l| (self.leaf_id(l), self.sequence(l)))
    }

    pub fn root(&self) -> Option<Cursor> {
        self.root.map(|r| self.enter(r, 0, None))
    }

    fn enter(&self, child: ChildRef, parent_depth: u32, via: Option<TokenId>) -> Cursor {
        match child {
            ChildRef::Node(n) => Cursor::Node(n),
            ChildRef::Leaf(l) if via == Some(EOS) => Cursor::End(l),
            ChildRef::Leaf(l) => Cursor::Tail {
                leaf: l,
                pos: if via.is_some() { parent_depth + 1 } else { 0 },
            },
        }
    }

    pub fn advance(&self, cursor: Cursor, token: TokenId) -> Option<Cursor> {
        match cursor {
            Cursor::Node(n) => {
                let node = &self.nodes[n as usize];
                node.children
                    .get(token)
                    .map(|c| self.enter(c, node.depth, Some(token)))
            }
            Cursor::Tail { leaf, pos } => {
                let seq = self.sequence(leaf);
                match seq.get(pos as usize) {
                    Some(&t) if t == token => Some(Cursor::Tail { leaf, pos: pos + 1 }),
                    None if token == EOS => Some(Cursor::End(leaf)),
                    _ => None,
                }
            }
            Cursor::End(_) => None,
        }
    }

    /// Allowed next tokens in ascending order.
    pub fn allowed(&self, cursor: Cursor) -> Vec<TokenId> {
        match cursor {
            Cursor::Node(n) => self.nodes[n as usize]
                .children
                .sorted()
                .into_iter()
                .map(|(t, _)| t)
                .collect(),
            Cursor::Tail { leaf, pos } => {
                vec![self.sequence(leaf).get(pos as usize).copied().unwrap_or(EOS)]
            }
            Cursor::End(_) => Vec::new(),
        }
    }

    /// Allowed tokens paired with the cursor each leads to, ascending by token.
    pub(crate) fn expansions(&self, cursor: Cursor) -> Vec<(TokenId, Cursor)> {
        match cursor {
            Cursor::Node(n) => {
                let node = &self.nodes[n as usize];
                node.children
                    .sorted()
                    .into_iter()
                    .map(|(t, c)| (t, self.enter(c, node.depth, Some(t))))
                    .collect()
            }
            Cursor::Tail { leaf, pos } => match self.sequence(leaf).get(pos as usize) {
                Some(&t) => vec![(t, Cursor::Tail { leaf, pos: pos + 1 })],
                None => vec![(EOS, Cursor::End(leaf))],
            },
            Cursor::End(_) => Vec::new(),
        }
    }

    pub fn subtree_leaf_count(&self, cursor: Cursor) -> usize {
        match cursor {
            Cursor::Node(n) => self.nodes[n as usize].leaf_count as usize,
            Cursor::Tail { .. } | Cursor::End(_) => 1,
        }
    }

    /// For a cursor with a single leaf below it: the tokens left before EOS
    /// and the leaf index.
    pub fn completion(&self, cursor: Cursor) -> Option<(&[TokenId], u32)> {
        match cursor {
            Cursor::Node(_) => None,
            Cursor::Tail { leaf, pos } => Some((&self.sequence(leaf)[pos as usize..], leaf)),
            Cursor::End(leaf) => Some((&[], leaf)),
        }
    }

    pub fn walk(&self, prefix: &[TokenId]) -> Result<Cursor> {
        let mut cursor = self.root().ok_or(Error::InvalidPrefix)?;
        for &t in prefix {
            cursor = self.advance(cursor, t).ok_or(Error::InvalidPrefix)?;
        }
        Ok(cursor)
    }

    /// Tokens that may follow `prefix`, EOS included where a stored sequence
    /// ends. Errors when `prefix` is not a path in the trie.
    pub fn allowed_next(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(self.allowed(self.walk(prefix)?))
    }

    /// `Some((remaining, leaf_id))` iff exactly one stored sequence extends
    /// `prefix`.
    pub fn unique_completion(&self, prefix: &[TokenId]) -> Result<Option<(Vec<TokenId>, &str)>> {
        let cursor = self.walk(prefix)?;
        Ok(self
            .completion(cursor)
            .map(|(rest, leaf)| (rest.to_vec(), self.leaf_id(leaf))))
    }

    pub fn lookup_leaf(&self, sequence: &[TokenId]) -> Option<u32> {
        let cursor = self.walk(sequence).ok()?;
        match self.advance(cursor, EOS)? {
            Cursor::End(leaf) => Some(leaf),
            _ => None,
        }
    }

    /// The leaf id stored for exactly `sequence`, if any.
    pub fn lookup(&self, sequence: &[TokenId]) -> Option<&str> {
        self.lookup_leaf(sequence).map(|l| self.leaf_id(l))
    }

    pub fn stats(&self) -> TrieStats {
        let mut stats = TrieStats {
            leaf_count: self.leaf_ids.len() as u64,
            materialized_nodes: self.nodes.len() as u64,
            resident_bytes: self.resident_bytes() as u64,
            max_depth: (0..self.leaf_ids.len() as u32)
                .map(|l| self.sequence(l).len() as u64 + 1)
                .max()
                .unwrap_or(0),
            node_count: 0,
        };
        stats.node_count = match self.root {
            None => 0,
            Some(ChildRef::Leaf(l)) => self.sequence(l).len() as u64 + 2,
            Some(ChildRef::Node(_)) => {
                let mut count = self.nodes.len() as u64;
                for node in &self.nodes {
                    for (_, child) in node.children.sorted() {
                        if let ChildRef::Leaf(l) = child {
                            count += self.sequence(l).len() as u64 - node.depth as u64 + 1;
                        }
                    }
                }
                count
            }
        };
        stats
    }

    pub fn resident_bytes(&self) -> usize {
        std::mem::size_of::<Self>()
            + self.nodes.capacity() * std::mem::size_of::<Node>()
            + self.nodes.iter().map(|n| n.children.heap_bytes()).sum::<usize>()
            + self.tokens.capacity() * std::mem::size_of::<TokenId>()
            + self.offsets.capacity() * std::mem::size_of::<u32>()
            + self
                .leaf_ids
                .iter()
                .map(|s| std::mem::size_of::<String>() + s.capacity())
                .sum::<usize>()
    }

    /// Checks structural invariants; used after deserialization.
    pub(crate) fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::IndexFormat(m.to_string()));
        if self.offsets.len() != self.leaf_ids.len() + 1 || self.offsets[0] != 0 {
            return bad("leaf offsets inconsistent");
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1])
            || *self.offsets.last().unwrap() as usize != self.tokens.len()
        {
            return bad("leaf offsets not monotone");
        }
        let leaves = self.leaf_ids.len() as u32;
        let in_range = |c: ChildRef| match c {
            ChildRef::Node(n) => (n as usize) < self.nodes.len(),
            ChildRef::Leaf(l) => l < leaves,
        };
        match self.root {
            None if leaves != 0 => return bad("missing root"),
            Some(r) if !in_range(r) => return bad("root out of range"),
            _ => {}
        }
        for node in &self.nodes {
            let mut total = 0u64;
            for (_, child) in node.children.sorted() {
                if !in_range(child) {
                    return bad("child out of range");
                }
                total += match child {
                    ChildRef::Node(n) => self.nodes[n as usize].leaf_count as u64,
                    ChildRef::Leaf(_) => 1,
                };
            }
            if total != node.leaf_count as u64 || node.children.len() < 2 && node.leaf_count < 2 {
                return bad("leaf counts inconsistent");
            }
        }
        // Every stored sequence must be reachable at its own leaf.
        for leaf in 0..leaves {
            if self.lookup_leaf(self.sequence(leaf)) != Some(leaf) {
                return bad("stored sequence not reachable");
            }
        }
        Ok(())
    }
}
