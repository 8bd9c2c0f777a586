//! Proof-of-work hash chain of verdict transactions.
//!
//! Blocks hash a canonical little-endian serialisation with SHA-256; each
//! verdict carries an HMAC-SHA-256 tag under its node's registered secret.
//! Any edit to a block changes its hash and breaks the link to every later
//! block.

use std::collections::{BTreeMap, HashSet};

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

pub type Hash32 = [u8; 32];

pub const DEFAULT_DIFFICULTY: u32 = 12;
pub const CHAIN_MAGIC: &[u8; 4] = b"DFWC";
pub const CHAIN_VERSION: u32 = 1;

const TX_VERDICT: u8 = 0;
const TX_TRUST: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("transaction from {node_id} failed authentication")]
    AuthFailure { node_id: String },
    #[error("duplicate verdict from {node_id} for round {round}")]
    DuplicateVerdict { node_id: String, round: u64 },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("malformed chain data at block {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

/// Per-node HMAC secrets, keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyRegistry {
    keys: BTreeMap<String, [u8; 32]>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, node_id: impl Into<String>, key: [u8; 32]) {
        self.keys.insert(node_id.into(), key);
    }

    pub fn get(&self, node_id: &str) -> Option<&[u8; 32]> {
        self.keys.get(node_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &[u8; 32])> {
        self.keys.iter()
    }

    /// One `<node_id> <hex key>` line per node.
    pub fn to_text(&self) -> String {
        self.keys.iter().map(|(id, k)| format!("{id} {}\n", hex::encode(k))).collect()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut reg = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, key) = line.split_once(' ').ok_or_else(|| format!("line {}: expected `<id> <hex>`", n + 1))?;
            let bytes = hex::decode(key.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
            let key: [u8; 32] = bytes.try_into().map_err(|_| format!("line {}: key must be 32 bytes", n + 1))?;
            reg.register(id, key);
        }
        Ok(reg)
    }
}

/// A node's authenticated probability that a file is malicious.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictTx {
    pub file_id: Hash32,
    pub node_id: String,
    pub probability: f64,
    pub round: u64,
    pub auth_tag: Hash32,
}

fn verdict_message(file_id: &Hash32, node_id: &str, probability: f64, round: u64) -> Vec<u8> {
    let mut m = Vec::with_capacity(32 + 4 + node_id.len() + 16);
    m.extend_from_slice(file_id);
    put_str(&mut m, node_id);
    m.extend_from_slice(&probability.to_bits().to_le_bytes());
    m.extend_from_slice(&round.to_le_bytes());
    m
}

impl VerdictTx {
    pub fn new_signed(file_id: Hash32, node_id: impl Into<String>, probability: f64, round: u64, key: &[u8; 32]) -> Self {
        let node_id = node_id.into();
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(&verdict_message(&file_id, &node_id, probability, round));
        Self { file_id, node_id, probability, round, auth_tag: mac.finalize().into_bytes().into() }
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        if !(0.0..=1.0).contains(&self.probability) {
            return false;
        }
        let Some(key) = registry.get(&self.node_id) else {
            return false;
        };
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(&verdict_message(&self.file_id, &self.node_id, self.probability, self.round));
        mac.verify_slice(&self.auth_tag).is_ok()
    }
}

/// Post-round trust values, recorded so the trust history is itself chained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustSnapshot {
    pub round: u64,
    /// sorted by node id
    pub trust: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transaction {
    Verdict(VerdictTx),
    Trust(TrustSnapshot),
}

impl Transaction {
    pub fn as_verdict(&self) -> Option<&VerdictTx> {
        match self {
            Transaction::Verdict(v) => Some(v),
            Transaction::Trust(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Hash32,
    pub timestamp: u64,
    pub txs: Vec<Transaction>,
    pub nonce: u64,
    pub hash: Hash32,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_tx(out: &mut Vec<u8>, tx: &Transaction) {
    match tx {
        Transaction::Verdict(v) => {
            out.push(TX_VERDICT);
            out.extend_from_slice(&v.file_id);
            put_str(out, &v.node_id);
            out.extend_from_slice(&v.probability.to_bits().to_le_bytes());
            out.extend_from_slice(&v.round.to_le_bytes());
            out.extend_from_slice(&v.auth_tag);
        }
        Transaction::Trust(s) => {
            out.push(TX_TRUST);
            out.extend_from_slice(&s.round.to_le_bytes());
            out.extend_from_slice(&(s.trust.len() as u32).to_le_bytes());
            for (id, t) in &s.trust {
                put_str(out, id);
                out.extend_from_slice(&t.to_bits().to_le_bytes());
            }
        }
    }
}

/// Canonical header-and-body bytes, everything except the nonce.
fn header_bytes(index: u64, prev_hash: &Hash32, timestamp: u64, txs: &[Transaction]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&index.to_le_bytes());
    out.extend_from_slice(prev_hash);
    out.extend_from_slice(&timestamp.to_le_bytes());
    out.extend_from_slice(&(txs.len() as u32).to_le_bytes());
    for tx in txs {
        encode_tx(&mut out, tx);
    }
    out
}

fn hash_with_nonce(prefix: &Sha256, nonce: u64) -> Hash32 {
    let mut h = prefix.clone();
    h.update(nonce.to_le_bytes());
    h.finalize().into()
}

pub fn leading_zero_bits(hash: &Hash32) -> u32 {
    let mut bits = 0;
    for byte in hash {
        if *byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

pub fn meets_difficulty(hash: &Hash32, difficulty: u32) -> bool {
    leading_zero_bits(hash) >= difficulty
}

impl Block {
    /// SHA-256 of the canonical serialisation `(index, prev_hash, timestamp, txs, nonce)`.
    pub fn compute_hash(&self) -> Hash32 {
        let mut h = Sha256::new();
        h.update(header_bytes(self.index, &self.prev_hash, self.timestamp, &self.txs));
        h.update(self.nonce.to_le_bytes());
        h.finalize().into()
    }

    pub fn verdicts(&self) -> impl Iterator<Item = &VerdictTx> {
        self.txs.iter().filter_map(Transaction::as_verdict)
    }

    /// Canonical bytes followed by the stored hash.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = header_bytes(self.index, &self.prev_hash, self.timestamp, &self.txs);
        out.extend_from_slice(&self.nonce.to_le_bytes());
        out.extend_from_slice(&self.hash);
        out
    }
}

/// Ascending nonce search from 0.
fn mine(index: u64, prev_hash: Hash32, timestamp: u64, txs: Vec<Transaction>, difficulty: u32) -> Block {
    let mut prefix = Sha256::new();
    prefix.update(header_bytes(index, &prev_hash, timestamp, &txs));
    let mut nonce = 0u64;
    loop {
        let hash = hash_with_nonce(&prefix, nonce);
        if meets_difficulty(&hash, difficulty) {
            return Block { index, prev_hash, timestamp, txs, nonce, hash };
        }
        nonce += 1;
    }
}

/// Block 0: zero prev hash, timestamp 0, no transactions.
pub fn genesis(difficulty: u32) -> Block {
    mine(0, [0; 32], 0, Vec::new(), difficulty)
}

/// Mines the successor of `prev`. Every verdict must authenticate.
pub fn mine_block(
    prev: &Block,
    txs: Vec<Transaction>,
    difficulty: u32,
    timestamp: u64,
    registry: &KeyRegistry,
) -> Result<Block, ChainError> {
    for tx in &txs {
        if let Transaction::Verdict(v) = tx {
            if !v.verify(registry) {
                return Err(ChainError::AuthFailure { node_id: v.node_id.clone() });
            }
        }
    }
    Ok(mine(prev.index + 1, prev.hash, timestamp, txs, difficulty))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainVerdict {
    pub valid: bool,
    pub first_bad_index: Option<usize>,
}

impl ChainVerdict {
    fn bad(index: usize) -> Self {
        Self { valid: false, first_bad_index: Some(index) }
    }
}

fn block_is_sound(i: usize, block: &Block, prev: Option<&Block>, difficulty: u32, registry: &KeyRegistry) -> bool {
    let linked = match prev {
        None => block.prev_hash == [0; 32],
        Some(p) => block.prev_hash == p.hash,
    };
    linked
        && block.index == i as u64
        && block.compute_hash() == block.hash
        && meets_difficulty(&block.hash, difficulty)
        && block.verdicts().all(|v| v.verify(registry))
}

/// Checks hashes, difficulty, links and every verdict tag; reports the first bad block.
pub fn verify_chain(blocks: &[Block], difficulty: u32, registry: &KeyRegistry) -> ChainVerdict {
    for (i, block) in blocks.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| &blocks[p]);
        if !block_is_sound(i, block, prev, difficulty, registry) {
            return ChainVerdict::bad(i);
        }
    }
    ChainVerdict { valid: true, first_bad_index: None }
}

/// All verdicts about `file_id`, in chain order.
pub fn query_verdicts<'a>(blocks: &'a [Block], file_id: &Hash32) -> Vec<&'a VerdictTx> {
    blocks
        .iter()
        .flat_map(Block::verdicts)
        .filter(|v| &v.file_id == file_id)
        .collect()
}

/// Single-writer chain: appends enforce linkage, authentication and verdict uniqueness.
#[derive(Debug, Clone)]
pub struct Chain {
    blocks: Vec<Block>,
    difficulty: u32,
    seen: HashSet<(Hash32, String, u64)>,
}

impl Chain {
    pub fn new(difficulty: u32) -> Self {
        Self { blocks: vec![genesis(difficulty)], difficulty, seen: HashSet::new() }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn difficulty(&self) -> u32 {
        self.difficulty
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    /// Mines and appends a block of `txs`.
    pub fn append(&mut self, txs: Vec<Transaction>, timestamp: u64, registry: &KeyRegistry) -> Result<&Block, ChainError> {
        let mut batch = HashSet::new();
        for v in txs.iter().filter_map(Transaction::as_verdict) {
            if !(0.0..=1.0).contains(&v.probability) {
                return Err(ChainError::BadProbability(v.probability));
            }
            let key = (v.file_id, v.node_id.clone(), v.round);
            if self.seen.contains(&key) || !batch.insert(key) {
                return Err(ChainError::DuplicateVerdict { node_id: v.node_id.clone(), round: v.round });
            }
        }
        let block = mine_block(self.tip(), txs, self.difficulty, timestamp, registry)?;
        self.seen.extend(batch);
        self.blocks.push(block);
        Ok(self.tip())
    }

    pub fn query(&self, file_id: &Hash32) -> Vec<&VerdictTx> {
        query_verdicts(&self.blocks, file_id)
    }

    pub fn verify(&self, registry: &KeyRegistry) -> ChainVerdict {
        verify_chain(&self.blocks, self.difficulty, registry)
    }

    /// SHA-256 of the tip hash concatenated with the block count.
    pub fn digest(&self) -> Hash32 {
        let mut h = Sha256::new();
        h.update(self.tip().hash);
        h.update((self.blocks.len() as u64).to_le_bytes());
        h.finalize().into()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_chain(&self.blocks, self.difficulty)
    }
}

/// Chain log: magic, version, difficulty, then length-prefixed block records.
pub fn encode_chain(blocks: &[Block], difficulty: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHAIN_MAGIC);
    out.extend_from_slice(&CHAIN_VERSION.to_le_bytes());
    out.extend_from_slice(&difficulty.to_le_bytes());
    for b in blocks {
        let rec = b.encode();
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().unwrap())
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_tx(r: &mut Reader<'_>) -> Option<Transaction> {
    match r.u8()? {
        TX_VERDICT => Some(Transaction::Verdict(VerdictTx {
            file_id: r.array()?,
            node_id: r.string()?,
            probability: r.f64()?,
            round: r.u64()?,
            auth_tag: r.array()?,
        })),
        TX_TRUST => {
            let round = r.u64()?;
            let n = r.u32()? as usize;
            let mut trust = Vec::new();
            for _ in 0..n {
                trust.push((r.string()?, r.f64()?));
            }
            Some(Transaction::Trust(TrustSnapshot { round, trust }))
        }
        _ => None,
    }
}

pub fn decode_block(rec: &[u8]) -> Option<Block> {
    let mut r = Reader { buf: rec, pos: 0 };
    let index = r.u64()?;
    let prev_hash = r.array()?;
    let timestamp = r.u64()?;
    let n = r.u32()? as usize;
    let mut txs = Vec::new();
    for _ in 0..n {
        txs.push(decode_tx(&mut r)?);
    }
    let nonce = r.u64()?;
    let hash = r.array()?;
    r.done().then_some(Block { index, prev_hash, timestamp, txs, nonce, hash })
}

/// Result of reading a chain log: every block that decoded, the declared
/// difficulty, and the index of the first undecodable record if any.
#[derive(Debug, Clone)]
pub struct DecodedChain {
    pub difficulty: u32,
    pub blocks: Vec<Block>,
    pub error: Option<ChainError>,
}

impl DecodedChain {
    /// Verification over the decoded prefix; a decode failure counts as a bad block at its index.
    /// With `expected_difficulty`, a log declaring any other difficulty is bad from block 0.
    pub fn verify(&self, registry: &KeyRegistry, expected_difficulty: Option<u32>) -> ChainVerdict {
        if expected_difficulty.is_some_and(|d| d != self.difficulty) {
            return ChainVerdict::bad(0);
        }
        let v = verify_chain(&self.blocks, self.difficulty, registry);
        match (&v.first_bad_index, &self.error) {
            (Some(_), _) => v,
            (None, Some(ChainError::Malformed { index, .. })) => ChainVerdict::bad(*index),
            (None, Some(_)) => ChainVerdict::bad(self.blocks.len()),
            (None, None) => v,
        }
    }
}

pub fn decode_chain(buf: &[u8]) -> Result<DecodedChain, ChainError> {
    let header_err = |reason: &str| ChainError::Malformed { index: 0, reason: reason.into() };
    let mut r = Reader { buf, pos: 0 };
    if r.take(4) != Some(&CHAIN_MAGIC[..]) {
        return Err(header_err("bad magic"));
    }
    if r.u32() != Some(CHAIN_VERSION) {
        return Err(header_err("unsupported version"));
    }
    let difficulty = r.u32().ok_or_else(|| header_err("truncated header"))?;
    let mut blocks = Vec::new();
    while !r.done() {
        let index = blocks.len();
        let malformed = |reason: &str| ChainError::Malformed { index, reason: reason.into() };
        let Some(len) = r.u32() else {
            return Ok(DecodedChain { difficulty, blocks, error: Some(malformed("truncated length")) });
        };
        let Some(rec) = r.take(len as usize) else {
            return Ok(DecodedChain { difficulty, blocks, error: Some(malformed("truncated record")) });
        };
        match decode_block(rec) {
            Some(b) => blocks.push(b),
            None => return Ok(DecodedChain { difficulty, blocks, error: Some(malformed("undecodable record")) }),
        }
    }
    Ok(DecodedChain { difficulty, blocks, error: None })
}
