//! In-process peer-to-peer firewall network.
//!
//! Every node owns a uniquely seeded detection engine and an HMAC key. A
//! broadcast file is scored by every node; the verdicts are mined into a
//! block, aggregated by trust-weighted averaging, thresholded into
//! ALLOW/BLOCK, and the post-round trust ledger is mined into the following
//! block.

use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{self, Block, Chain, ChainError, Hash32, KeyRegistry, Transaction, TrustSnapshot, VerdictTx};
use crate::consensus::{self, ConsensusError, Decision, TrustLedger, TrustParams};
use crate::dataset::{self, Label};
use crate::dbn::{self, DbnArch, DbnError, DbnModel};
use crate::imgcodec::{self, InputVector};
use crate::seed;

const TAG_KEYS: u64 = 0x6b65_7973;
const TAG_RANDOM_FAULT: u64 = 0x7261_6e64;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] DbnError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("round {0}: every node abstained")]
    NoVerdicts(u64),
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("scenario line {line}: {msg}")]
    Scenario { line: usize, msg: String },
}

/// How a node turns its engine's output into the probability it reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultModel {
    Honest,
    /// reports `1 - p`
    Inverter,
    Constant(f64),
    /// uniform draw per round, independent of the file
    Random,
    /// never reports
    Abstain,
}

impl fmt::Display for FaultModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultModel::Honest => f.write_str("honest"),
            FaultModel::Inverter => f.write_str("inverter"),
            FaultModel::Constant(c) => write!(f, "constant:{c}"),
            FaultModel::Random => f.write_str("random"),
            FaultModel::Abstain => f.write_str("abstain"),
        }
    }
}

impl FromStr for FaultModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "honest" => Ok(FaultModel::Honest),
            "inverter" => Ok(FaultModel::Inverter),
            "random" => Ok(FaultModel::Random),
            "abstain" => Ok(FaultModel::Abstain),
            other => {
                let c = other
                    .strip_prefix("constant:")
                    .ok_or_else(|| format!("unknown fault model {other:?}"))?;
                let c: f64 = c.parse().map_err(|_| format!("bad constant {c:?}"))?;
                if (0.0..=1.0).contains(&c) {
                    Ok(FaultModel::Constant(c))
                } else {
                    Err(format!("constant {c} outside [0, 1]"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub n_nodes: usize,
    pub difficulty: u32,
    pub threshold: f64,
    pub trust: TrustParams,
    pub seed: u64,
    /// engine architecture and training schedule; the arch seed is replaced per node
    pub arch: DbnArch,
    /// `(node index, fault)`; unlisted nodes are honest
    pub faults: Vec<(usize, FaultModel)>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            difficulty: chain::DEFAULT_DIFFICULTY,
            threshold: consensus::DEFAULT_THRESHOLD,
            trust: TrustParams::default(),
            seed: 0,
            arch: DbnArch::default(),
            faults: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetsimError> {
        let bad = |m: String| Err(NetsimError::InvalidConfig(m));
        if self.n_nodes == 0 {
            return bad("n_nodes must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if self.difficulty > 64 {
            return bad(format!("difficulty {} is not practical", self.difficulty));
        }
        self.trust.validate()?;
        self.arch.validate()?;
        if self.input_side().is_none() {
            return bad(format!("input size {} is not a square image", self.arch.input_size()));
        }
        if let Some((i, _)) = self.faults.iter().find(|(i, _)| *i >= self.n_nodes) {
            return bad(format!("fault assigned to node {i}, but only {} nodes", self.n_nodes));
        }
        Ok(())
    }

    pub fn input_side(&self) -> Option<usize> {
        let n = self.arch.input_size();
        let side = (n as f64).sqrt().round() as usize;
        (side * side == n).then_some(side)
    }

    pub fn fault_of(&self, index: usize) -> FaultModel {
        self.faults
            .iter()
            .rev()
            .find(|(i, _)| *i == index)
            .map(|(_, f)| *f)
            .unwrap_or(FaultModel::Honest)
    }
}

pub fn node_id(index: usize) -> String {
    format!("node-{index:02}")
}

#[derive(Debug, Clone)]
pub struct Node {
    pub node_id: String,
    pub secret_key: [u8; 32],
    pub model: DbnModel,
    pub fault: FaultModel,
}

impl Node {
    /// The probability this node reports for `input`, or `None` if it abstains.
    fn report(&self, input: Option<&InputVector>, net_seed: u64, index: usize, round: u64) -> Option<f64> {
        let engine = || input.and_then(|x| dbn::predict_malicious(&self.model, x).ok());
        match self.fault {
            FaultModel::Honest => engine(),
            FaultModel::Inverter => engine().map(|p| 1.0 - p),
            FaultModel::Constant(c) => Some(c),
            FaultModel::Random => Some(seed::rng(net_seed, &[TAG_RANDOM_FAULT, index as u64, round]).gen()),
            FaultModel::Abstain => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub round: u64,
    pub file_id: Hash32,
    /// every node in id order; `None` marks an abstention
    pub verdicts: Vec<(String, Option<f64>)>,
    pub mean: f64,
    pub decision: Decision,
    pub trust_before: Vec<(String, f64)>,
    pub trust_after: Vec<(String, f64)>,
    pub verdict_block: u64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub nodes: Vec<Node>,
    pub chain: Chain,
    pub registry: KeyRegistry,
    pub ledger: TrustLedger,
    next_round: u64,
}

/// Trains one engine per node (seed = base seed + node index), generates
/// keys from the seeded generator and starts a genesis-only chain.
pub fn provision(cfg: &NetworkConfig, training: &[(InputVector, usize)]) -> Result<Network, NetsimError> {
    cfg.validate()?;
    let models: Vec<DbnModel> = (0..cfg.n_nodes)
        .into_par_iter()
        .map(|i| {
            let arch = DbnArch { rng_seed: cfg.seed.wrapping_add(i as u64), ..cfg.arch.clone() };
            dbn::train(&arch, training)
        })
        .collect::<Result<_, _>>()?;
    assemble(cfg, models)
}

/// Builds a network around already-trained engines, one per node.
pub fn assemble(cfg: &NetworkConfig, models: Vec<DbnModel>) -> Result<Network, NetsimError> {
    cfg.validate()?;
    if models.len() != cfg.n_nodes {
        return Err(NetsimError::InvalidConfig(format!("{} models for {} nodes", models.len(), cfg.n_nodes)));
    }
    if let Some(m) = models.iter().find(|m| m.input_size() != cfg.arch.input_size()) {
        return Err(NetsimError::InvalidConfig(format!(
            "engine input size {} does not match network input size {}",
            m.input_size(),
            cfg.arch.input_size()
        )));
    }
    let mut key_rng = seed::rng(cfg.seed, &[TAG_KEYS]);
    let mut registry = KeyRegistry::new();
    let nodes: Vec<Node> = models
        .into_iter()
        .enumerate()
        .map(|(i, model)| {
            let mut secret_key = [0u8; 32];
            key_rng.fill_bytes(&mut secret_key);
            registry.register(node_id(i), secret_key);
            Node { node_id: node_id(i), secret_key, model, fault: cfg.fault_of(i) }
        })
        .collect();
    let ledger = TrustLedger::with_nodes(cfg.trust, nodes.iter().map(|n| n.node_id.clone()));
    Ok(Network {
        config: cfg.clone(),
        nodes,
        chain: Chain::new(cfg.difficulty),
        registry,
        ledger,
        next_round: 0,
    })
}

pub fn file_id(bytes: &[u8]) -> Hash32 {
    Sha256::digest(bytes).into()
}

impl Network {
    pub fn rounds_played(&self) -> u64 {
        self.next_round
    }

    /// Broadcasts one file to every node and runs a full consensus round.
    pub fn broadcast_file(&mut self, bytes: &[u8]) -> Result<RoundResult, NetsimError> {
        let round = self.next_round;
        let fid = file_id(bytes);
        let side = self.config.input_side().expect("validated config");
        let input = imgcodec::file_to_input(bytes, side).ok();
        let net_seed = self.config.seed;

        let reports: Vec<Option<f64>> = self
            .nodes
            .par_iter()
            .enumerate()
            .map(|(i, node)| node.report(input.as_ref(), net_seed, i, round))
            .collect();
        let verdicts: Vec<(String, Option<f64>)> = self
            .nodes
            .iter()
            .zip(&reports)
            .map(|(n, r)| (n.node_id.clone(), *r))
            .collect();
        let participating: Vec<(&str, f64)> = verdicts
            .iter()
            .filter_map(|(id, p)| p.map(|p| (id.as_str(), p)))
            .collect();
        if participating.is_empty() {
            return Err(NetsimError::NoVerdicts(round));
        }

        let txs: Vec<Transaction> = self
            .nodes
            .iter()
            .zip(&reports)
            .filter_map(|(n, r)| {
                r.map(|p| Transaction::Verdict(VerdictTx::new_signed(fid, n.node_id.clone(), p, round, &n.secret_key)))
            })
            .collect();
        let verdict_block = self.chain.append(txs, 2 * round + 1, &self.registry)?.index;

        let trust_before = self.ledger.snapshot();
        let mean = consensus::weighted_verdict(&self.ledger, &participating)?;
        let decision = consensus::decide(mean, self.config.threshold);
        self.ledger = consensus::update_trust(&self.ledger, &participating, mean)?;
        let trust_after = self.ledger.snapshot();
        self.chain.append(
            vec![Transaction::Trust(TrustSnapshot { round, trust: trust_after.clone() })],
            2 * round + 2,
            &self.registry,
        )?;

        self.next_round += 1;
        Ok(RoundResult { round, file_id: fid, verdicts, mean, decision, trust_before, trust_after, verdict_block })
    }

    pub fn run_scenario(&mut self, events: &[ScenarioEvent]) -> Result<Transcript, NetsimError> {
        let mut rounds = Vec::with_capacity(events.len());
        for ev in events {
            let bytes = ev.load()?;
            rounds.push(self.broadcast_file(&bytes)?);
        }
        Ok(Transcript { rounds, n_blocks: self.chain.blocks().len(), chain_digest: self.chain.digest() })
    }
}

/// Recomputes every round's consensus mean from the chain alone: the verdicts
/// recorded for a round, weighted by the trust snapshot of the previous round
/// (initial trust before round 0).
pub fn audit_means(blocks: &[Block], params: TrustParams, node_ids: &[String]) -> Result<Vec<f64>, ConsensusError> {
    let mut ledger = TrustLedger::with_nodes(params, node_ids.iter().cloned());
    let mut means = Vec::new();
    let mut pending: Vec<(String, f64)> = Vec::new();
    for block in blocks {
        for tx in &block.txs {
            match tx {
                Transaction::Verdict(v) => pending.push((v.node_id.clone(), v.probability)),
                Transaction::Trust(snap) => {
                    means.push(consensus::weighted_verdict(&ledger, &pending)?);
                    pending.clear();
                    for (id, t) in &snap.trust {
                        ledger.set(id.clone(), *t);
                    }
                }
            }
        }
    }
    Ok(means)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioEvent {
    File(PathBuf),
    Synthetic { label: Label, seed: u64 },
}

impl ScenarioEvent {
    pub fn load(&self) -> Result<Vec<u8>, NetsimError> {
        match self {
            ScenarioEvent::File(p) => fs::read(p).map_err(|source| NetsimError::Io { path: p.clone(), source }),
            ScenarioEvent::Synthetic { label, seed } => Ok(dataset::synthetic_file(*label, *seed)),
        }
    }
}

/// One event per line: `file <path>` or `synthetic <benign|malicious> <seed>`.
/// Blank lines and `#` comments are skipped; relative paths resolve against `base`.
pub fn parse_scenario(text: &str, base: Option<&Path>) -> Result<Vec<ScenarioEvent>, NetsimError> {
    let mut events = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |msg: String| NetsimError::Scenario { line, msg };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (kind, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        let rest = rest.trim();
        match kind {
            "file" => {
                if rest.is_empty() {
                    return Err(err("missing path".into()));
                }
                let p = PathBuf::from(rest);
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                };
                events.push(ScenarioEvent::File(p));
            }
            "synthetic" => {
                let mut parts = rest.split_whitespace();
                let label = parts
                    .next()
                    .and_then(|l| l.parse::<Label>().ok())
                    .ok_or_else(|| err("expected `synthetic <benign|malicious> <seed>`".into()))?;
                let seed = parts
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| err("expected an integer seed".into()))?;
                if parts.next().is_some() {
                    return Err(err("trailing fields".into()));
                }
                events.push(ScenarioEvent::Synthetic { label, seed });
            }
            other => return Err(err(format!("unknown event {other:?}"))),
        }
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub rounds: Vec<RoundResult>,
    pub n_blocks: usize,
    pub chain_digest: Hash32,
}

impl Transcript {
    /// Tab-separated, one record per line, reals to 4 decimals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            let _ = writeln!(out, "round\t{}\tfile\t{}", r.round, hex::encode(r.file_id));
            for (id, p) in &r.verdicts {
                match p {
                    Some(p) => {
                        let _ = writeln!(out, "verdict\t{id}\t{p:.4}");
                    }
                    None => {
                        let _ = writeln!(out, "verdict\t{id}\tabstain");
                    }
                }
            }
            let _ = writeln!(out, "mean\t{:.4}\t{}", r.mean, r.decision);
            for (id, t) in &r.trust_after {
                let _ = writeln!(out, "trust\t{id}\t{t:.4}");
            }
        }
        let _ = writeln!(out, "blocks\t{}", self.n_blocks);
        let _ = writeln!(out, "chain\t{}", hex::encode(self.chain_digest));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(n: usize) -> NetworkConfig {
        NetworkConfig {
            n_nodes: n,
            difficulty: 4,
            seed: 99,
            arch: DbnArch {
                layer_sizes: vec![16, 6],
                pretrain_epochs: 1,
                finetune_epochs: 3,
                batch_size: 5,
                ..DbnArch::default()
            },
            ..NetworkConfig::default()
        }
    }

    fn tiny_training() -> Vec<(InputVector, usize)> {
        dataset::synthetic_inputs(10, 5, 4)
            .into_iter()
            .map(|(x, l)| (x, l.class_index()))
            .collect()
    }

    /// Network of zero-parameter engines whose head bias is set to emit `probs[i]`.
    fn fixed_network(probs: &[f64]) -> Network {
        let cfg = tiny_cfg(probs.len());
        let models = probs
            .iter()
            .map(|&p| {
                let mut m = DbnModel::zeros(cfg.arch.clone()).unwrap();
                let logit = if p <= 0.0 { -800.0 } else { (p / (1.0 - p)).ln() };
                m.softmax_b = vec![0.0, logit];
                m
            })
            .collect();
        assemble(&cfg, models).unwrap()
    }

    #[test]
    fn fault_model_parsing() {
        assert_eq!("inverter".parse::<FaultModel>(), Ok(FaultModel::Inverter));
        assert_eq!("constant:0.25".parse::<FaultModel>(), Ok(FaultModel::Constant(0.25)));
        assert!("constant:2".parse::<FaultModel>().is_err());
        assert!("evil".parse::<FaultModel>().is_err());
        for f in [FaultModel::Honest, FaultModel::Random, FaultModel::Abstain, FaultModel::Constant(0.5)] {
            assert_eq!(f.to_string().parse::<FaultModel>(), Ok(f));
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig { n_nodes: 0, ..tiny_cfg(1) }.validate().is_err());
        assert!(NetworkConfig { faults: vec![(3, FaultModel::Inverter)], ..tiny_cfg(2) }.validate().is_err());
        let mut cfg = tiny_cfg(2);
        cfg.arch.layer_sizes = vec![15, 4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn three_nodes_block_at_085() {
        let mut net = fixed_network(&[0.9, 0.8, 0.85]);
        let r = net.broadcast_file(b"payload").unwrap();
        assert!((r.mean - 0.85).abs() < 1e-9);
        assert_eq!(r.decision, Decision::Block);
        assert!(net.chain.verify(&net.registry).valid);
        // verdict block + trust block
        assert_eq!(net.chain.blocks().len(), 3);
    }

    #[test]
    fn unanimous_zero_keeps_trust() {
        let mut net = fixed_network(&[0.0, 0.0, 0.0]);
        let r = net.broadcast_file(b"clean").unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.decision, Decision::Allow);
        assert!(r.trust_after.iter().all(|(_, t)| *t == 1.0));
    }

    #[test]
    fn inverter_loses_trust_in_one_round() {
        let mut net = fixed_network(&[0.9, 0.9, 0.9]);
        net.nodes[2].fault = FaultModel::Inverter;
        let r = net.broadcast_file(b"x").unwrap();
        let before = r.trust_before[2].1;
        let after = r.trust_after[2].1;
        assert!(after < before, "{before} -> {after}");
        assert!(r.trust_after[0].1 > after);
    }

    #[test]
    fn abstainers_are_excluded() {
        let mut net = fixed_network(&[0.2, 0.6, 0.9]);
        net.nodes[2].fault = FaultModel::Abstain;
        let r = net.broadcast_file(b"x").unwrap();
        assert!((r.mean - 0.4).abs() < 1e-9);
        assert_eq!(r.verdicts[2].1, None);
        assert_eq!(r.trust_after[2].1, 1.0);
        assert_eq!(net.chain.blocks()[1].verdicts().count(), 2);

        for n in &mut net.nodes {
            n.fault = FaultModel::Abstain;
        }
        assert!(matches!(net.broadcast_file(b"y"), Err(NetsimError::NoVerdicts(1))));
    }

    #[test]
    fn single_node_consensus_is_its_own_probability() {
        let mut net = fixed_network(&[0.3]);
        let r = net.broadcast_file(b"z").unwrap();
        assert!((r.mean - 0.3).abs() < 1e-12);
    }

    #[test]
    fn provisioned_nodes_are_unique_and_reproducible() {
        let cfg = tiny_cfg(2);
        let data = tiny_training();
        let a = provision(&cfg, &data).unwrap();
        assert_ne!(a.nodes[0].model.parameter_digest(), a.nodes[1].model.parameter_digest());
        assert_ne!(a.nodes[0].secret_key, a.nodes[1].secret_key);
        let b = provision(&cfg, &data).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.model, y.model);
            assert_eq!(x.secret_key, y.secret_key);
        }
        assert_eq!(a.chain.blocks(), b.chain.blocks());
    }

    #[test]
    fn empty_scenario() {
        let mut net = fixed_network(&[0.5]);
        let t = net.run_scenario(&[]).unwrap();
        assert!(t.rounds.is_empty());
        assert_eq!(t.n_blocks, 1);
    }

    #[test]
    fn scenario_audit_and_determinism() {
        let events: Vec<ScenarioEvent> = (0..6)
            .map(|i| ScenarioEvent::Synthetic {
                label: if i % 2 == 0 { Label::Benign } else { Label::Malicious },
                seed: i,
            })
            .collect();
        let cfg = NetworkConfig { faults: vec![(1, FaultModel::Random), (2, FaultModel::Inverter)], ..tiny_cfg(4) };
        let data = tiny_training();
        let mut net = provision(&cfg, &data).unwrap();
        let t = net.run_scenario(&events).unwrap();
        assert!(net.chain.verify(&net.registry).valid);
        for r in &t.rounds {
            let block = &net.chain.blocks()[r.verdict_block as usize];
            assert_eq!(block.verdicts().count(), r.verdicts.iter().filter(|v| v.1.is_some()).count());
        }
        let ids: Vec<String> = net.nodes.iter().map(|n| n.node_id.clone()).collect();
        let audited = audit_means(net.chain.blocks(), cfg.trust, &ids).unwrap();
        let live: Vec<f64> = t.rounds.iter().map(|r| r.mean).collect();
        assert_eq!(audited, live);

        let mut again = provision(&cfg, &data).unwrap();
        assert_eq!(again.run_scenario(&events).unwrap().render(), t.render());
    }

    #[test]
    fn scenario_grammar() {
        let text = "# comment\nfile a.bin\n\nsynthetic malicious 7  # trailing\nsynthetic benign 0\n";
        let ev = parse_scenario(text, Some(Path::new("/tmp/s"))).unwrap();
        assert_eq!(
            ev,
            vec![
                ScenarioEvent::File(PathBuf::from("/tmp/s/a.bin")),
                ScenarioEvent::Synthetic { label: Label::Malicious, seed: 7 },
                ScenarioEvent::Synthetic { label: Label::Benign, seed: 0 },
            ]
        );
        assert!(matches!(parse_scenario("synthetic spam 1", None), Err(NetsimError::Scenario { line: 1, .. })));
        assert!(matches!(parse_scenario("ok\n", None), Err(NetsimError::Scenario { line: 1, .. })));
        assert!(matches!(parse_scenario("file\n", None), Err(NetsimError::Scenario { .. })));
    }

    #[test]
    fn transcript_format() {
        let mut net = fixed_network(&[0.25, 0.75]);
        net.nodes[1].fault = FaultModel::Abstain;
        let t = net.run_scenario(&[ScenarioEvent::Synthetic { label: Label::Benign, seed: 1 }]).unwrap();
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("round\t0\tfile\t"));
        assert_eq!(lines[1], "verdict\tnode-00\t0.2500");
        assert_eq!(lines[2], "verdict\tnode-01\tabstain");
        assert_eq!(lines[3], "mean\t0.2500\tALLOW");
        assert_eq!(lines[4], "trust\tnode-00\t1.0000");
        assert_eq!(lines[6], "blocks\t3");
        assert!(lines[7].starts_with("chain\t"));
    }
}
