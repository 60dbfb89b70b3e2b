//! The two-level retrieval index: one trie over titles, one trie per document
//! over its passages. The on-disk form is a versioned, checksummed binary file.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::tokenization::{TokenId, Tokenizer, UNK};
use crate::trie::{ChildMap, ChildRef, Node, TokenTrie, TrieStats};

pub const INDEX_MAGIC: &[u8; 4] = b"SRTI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TrieIndex {
    tokenizer: Tokenizer,
    title_trie: TokenTrie,
    doc_order: Vec<String>,
    passage_tries: HashMap<String, TokenTrie>,
    title_leaf: HashMap<String, u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexStats {
    pub num_docs: u64,
    pub num_passages: u64,
    pub title_trie: TrieStats,
    pub passage_tries: TrieStats,
    pub resident_bytes: u64,
}

fn encode_checked(tok: &Tokenizer, text: &str, owner: &str) -> Result<Vec<TokenId>> {
    let ids = tok.encode(text);
    if ids.contains(&UNK) {
        return Err(Error::UnknownTokenInCorpus(owner.to_string()));
    }
    Ok(ids)
}

impl TrieIndex {
    pub fn build(store: &CorpusStore, tokenizer: &Tokenizer) -> Result<Self> {
        let mut titles = Vec::with_capacity(store.documents().len());
        let mut passage_tries = HashMap::with_capacity(store.documents().len());
        let mut doc_order = Vec::with_capacity(store.documents().len());
        for doc in store.documents() {
            titles.push((doc.doc_id.clone(), encode_checked(tokenizer, &doc.title, &doc.doc_id)?));
            let passages = store
                .passages_of(&doc.doc_id)
                .iter()
                .map(|p| Ok((p.passage_id.clone(), encode_checked(tokenizer, &p.text, &p.passage_id)?)))
                .collect::<Result<Vec<_>>>()?;
            passage_tries.insert(doc.doc_id.clone(), TokenTrie::build(passages)?);
            doc_order.push(doc.doc_id.clone());
        }
        Ok(Self::assemble(
            tokenizer.clone(),
            TokenTrie::build(titles)?,
            doc_order,
            passage_tries,
        ))
    }

    fn assemble(
        tokenizer: Tokenizer,
        title_trie: TokenTrie,
        doc_order: Vec<String>,
        passage_tries: HashMap<String, TokenTrie>,
    ) -> Self {
        let title_leaf = (0..title_trie.num_leaves() as u32)
            .map(|l| (title_trie.leaf_id(l).to_string(), l))
            .collect();
        TrieIndex {
            tokenizer,
            title_trie,
            doc_order,
            passage_tries,
            title_leaf,
        }
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn title_trie(&self) -> &TokenTrie {
        &self.title_trie
    }

    pub fn passage_trie(&self, doc_id: &str) -> Option<&TokenTrie> {
        self.passage_tries.get(doc_id)
    }

    /// Document ids in corpus order.
    pub fn doc_ids(&self) -> &[String] {
        &self.doc_order
    }

    pub fn is_empty(&self) -> bool {
        self.title_trie.is_empty()
    }

    pub fn title_tokens(&self, doc_id: &str) -> Option<&[TokenId]> {
        self.title_leaf
            .get(doc_id)
            .map(|&l| self.title_trie.sequence(l))
    }

    pub fn stats(&self) -> IndexStats {
        let mut passages = TrieStats::default();
        for trie in self.passage_tries.values() {
            passages.merge(&trie.stats());
        }
        let title = self.title_trie.stats();
        let resident = title.resident_bytes
            + passages.resident_bytes
            + self
                .doc_order
                .iter()
                .map(|d| 2 * (std::mem::size_of::<String>() + d.capacity()) as u64)
                .sum::<u64>();
        IndexStats {
            num_docs: self.doc_order.len() as u64,
            num_passages: passages.leaf_count,
            title_trie: title,
            passage_tries: passages,
            resident_bytes: resident,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut payload = Vec::new();
        let tokens = self.tokenizer.tokens();
        put_u32(&mut payload, tokens.len() as u32);
        for t in tokens {
            put_str(&mut payload, t);
        }
        write_trie(&mut payload, &self.title_trie);
        put_u32(&mut payload, self.doc_order.len() as u32);
        for doc in &self.doc_order {
            put_str(&mut payload, doc);
            write_trie(&mut payload, &self.passage_tries[doc]);
        }

        let io = |e| Error::io("<index writer>", e);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&INDEX_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(payload.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&payload).map_err(io)?;
        w.write_all(&crc32fast::hash(&payload).to_le_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::IndexFormat(m.to_string());
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        r.by_ref()
            .take(len as u64)
            .read_to_end(&mut payload)
            .map_err(|_| bad("truncated payload"))?;
        if payload.len() != len {
            return Err(bad("truncated payload"));
        }
        let mut crc = [0u8; 4];
        r.read_exact(&mut crc).map_err(|_| bad("missing checksum"))?;
        if u32::from_le_bytes(crc) != crc32fast::hash(&payload) {
            return Err(bad("checksum mismatch"));
        }

        let mut cur = Reader { buf: &payload, pos: 0 };
        let n = cur.u32()? as usize;
        let mut vocab = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            vocab.push(cur.string()?);
        }
        let tokenizer = Tokenizer::from_tokens(vocab)?;
        let title_trie = read_trie(&mut cur)?;
        let docs = cur.u32()? as usize;
        let mut doc_order = Vec::with_capacity(docs.min(1 << 24));
        let mut passage_tries = HashMap::with_capacity(docs.min(1 << 24));
        for _ in 0..docs {
            let doc = cur.string()?;
            let trie = read_trie(&mut cur)?;
            if passage_tries.insert(doc.clone(), trie).is_some() {
                return Err(bad("duplicate document"));
            }
            doc_order.push(doc);
        }
        if cur.pos != payload.len() {
            return Err(bad("trailing bytes"));
        }
        for (doc, _) in title_trie.entries() {
            if !passage_tries.contains_key(doc) {
                return Err(Error::IndexFormat(format!("no passage trie for {doc:?}")));
            }
        }
        Ok(Self::assemble(tokenizer, title_trie, doc_order, passage_tries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_ref(buf: &mut Vec<u8>, r: ChildRef) {
    match r {
        ChildRef::Node(n) => {
            buf.push(1);
            put_u32(buf, n);
        }
        ChildRef::Leaf(l) => {
            buf.push(2);
            put_u32(buf, l);
        }
    }
}

/// Leaves (id + tokens), then the root reference, then branching nodes in
/// preorder.
fn write_trie(buf: &mut Vec<u8>, trie: &TokenTrie) {
    put_u32(buf, trie.leaf_ids.len() as u32);
    for (id, seq) in trie.entries() {
        put_str(buf, id);
        put_u32(buf, seq.len() as u32);
        for &t in seq {
            put_u32(buf, t);
        }
    }
    match trie.root {
        None => buf.push(0),
        Some(r) => put_ref(buf, r),
    }
    put_u32(buf, trie.nodes.len() as u32);
    for node in &trie.nodes {
        put_u32(buf, node.depth);
        put_u32(buf, node.leaf_count);
        let children = node.children.sorted();
        put_u32(buf, children.len() as u32);
        for (t, c) in children {
            put_u32(buf, t);
            put_ref(buf, c);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::IndexFormat("truncated payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::IndexFormat("invalid utf-8".into()))
    }

    fn child_ref(&mut self) -> Result<Option<ChildRef>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(ChildRef::Node(self.u32()?))),
            2 => Ok(Some(ChildRef::Leaf(self.u32()?))),
            k => Err(Error::IndexFormat(format!("bad child kind {k}"))),
        }
    }
}

fn read_trie(cur: &mut Reader<'_>) -> Result<TokenTrie> {
    let leaves = cur.u32()? as usize;
    let mut trie = TokenTrie {
        offsets: vec![0],
        ..Default::default()
    };
    for _ in 0..leaves {
        trie.leaf_ids.push(cur.string()?);
        let n = cur.u32()? as usize;
        for _ in 0..n {
            let t = cur.u32()?;
            trie.tokens.push(t);
        }
        trie.offsets.push(trie.tokens.len() as u32);
    }
    trie.root = cur.child_ref()?;
    let nodes = cur.u32()? as usize;
    for _ in 0..nodes {
        let depth = cur.u32()?;
        let leaf_count = cur.u32()?;
        let n = cur.u32()? as usize;
        let mut children = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let t = cur.u32()?;
            let c = cur
                .child_ref()?
                .ok_or_else(|| Error::IndexFormat("empty child".into()))?;
            children.push((t, c));
        }
        if children.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::IndexFormat("children not sorted".into()));
        }
        trie.nodes.push(Node {
            depth,
            leaf_count,
            children: ChildMap::from_sorted(children),
        });
    }
    trie.validate()?;
    Ok(trie)
}
