//! Trust-weighted consensus over per-node probabilities.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_TRUST_FLOOR: f64 = 0.01;
pub const INITIAL_TRUST: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("no verdicts to aggregate")]
    EmptyVerdicts,
    #[error("node {0} is not in the trust ledger")]
    UnknownNode(String),
    #[error("invalid trust parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustParams {
    /// blend rate toward the round's agreement score
    pub alpha: f64,
    /// lower clamp for every trust value
    pub t_min: f64,
}

impl Default for TrustParams {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, t_min: DEFAULT_TRUST_FLOOR }
    }
}

impl TrustParams {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ConsensusError::InvalidParams(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(self.t_min > 0.0 && self.t_min <= 1.0) {
            return Err(ConsensusError::InvalidParams(format!("trust floor {} not in (0, 1]", self.t_min)));
        }
        Ok(())
    }
}

/// Trust per node, each in `[t_min, 1]`. Iteration order is by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustLedger {
    trust: BTreeMap<String, f64>,
    params: TrustParams,
}

impl TrustLedger {
    pub fn new(params: TrustParams) -> Self {
        Self { trust: BTreeMap::new(), params }
    }

    /// Ledger with every node at the initial trust of 1.0.
    pub fn with_nodes<I, S>(params: TrustParams, nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ledger = Self::new(params);
        for n in nodes {
            ledger.add_node(n);
        }
        ledger
    }

    pub fn add_node(&mut self, node_id: impl Into<String>) {
        self.trust.insert(node_id.into(), INITIAL_TRUST);
    }

    /// Sets a node's trust, clamped into `[t_min, 1]`.
    pub fn set(&mut self, node_id: impl Into<String>, trust: f64) {
        self.trust.insert(node_id.into(), trust.clamp(self.params.t_min, 1.0));
    }

    pub fn get(&self, node_id: &str) -> Option<f64> {
        self.trust.get(node_id).copied()
    }

    pub fn params(&self) -> TrustParams {
        self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.trust.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.trust.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trust.is_empty()
    }

    pub fn snapshot(&self) -> Vec<(String, f64)> {
        self.trust.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    fn lookup(&self, node_id: &str) -> Result<f64, ConsensusError> {
        self.get(node_id).ok_or_else(|| ConsensusError::UnknownNode(node_id.to_owned()))
    }
}

/// `Σ trust_i · p_i / Σ trust_i` with the ledger as given.
pub fn weighted_verdict<S: AsRef<str>>(ledger: &TrustLedger, verdicts: &[(S, f64)]) -> Result<f64, ConsensusError> {
    if verdicts.is_empty() {
        return Err(ConsensusError::EmptyVerdicts);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (node, p) in verdicts {
        let t = ledger.lookup(node.as_ref())?;
        num += t * p;
        den += t;
    }
    // the ratio can drift past the input range by an ulp
    let (lo, hi) = verdicts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, p)| (lo.min(*p), hi.max(*p)));
    Ok((num / den).clamp(lo, hi))
}

/// Unweighted mean of a round's probabilities.
pub fn plain_mean<S>(verdicts: &[(S, f64)]) -> Result<f64, ConsensusError> {
    if verdicts.is_empty() {
        return Err(ConsensusError::EmptyVerdicts);
    }
    Ok(verdicts.iter().map(|(_, p)| p).sum::<f64>() / verdicts.len() as f64)
}

/// `trust' = clamp((1-α)·trust + α·(1 - |p - reference|), t_min, 1)` for every
/// participating node; everyone else is untouched.
pub fn update_trust<S: AsRef<str>>(
    ledger: &TrustLedger,
    verdicts: &[(S, f64)],
    reference: f64,
) -> Result<TrustLedger, ConsensusError> {
    let TrustParams { alpha, t_min } = ledger.params;
    let mut next = ledger.clone();
    for (node, p) in verdicts {
        let node = node.as_ref();
        let t = ledger.lookup(node)?;
        let agreement = 1.0 - (p - reference).abs();
        next.trust
            .insert(node.to_owned(), ((1.0 - alpha) * t + alpha * agreement).clamp(t_min, 1.0));
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Block,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Allow => "ALLOW",
            Decision::Block => "BLOCK",
        })
    }
}

/// BLOCK iff `mean >= threshold`.
pub fn decide(mean: f64, threshold: f64) -> Decision {
    if mean >= threshold {
        Decision::Block
    } else {
        Decision::Allow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ledger(entries: &[(&str, f64)]) -> TrustLedger {
        let mut l = TrustLedger::new(TrustParams::default());
        for (id, t) in entries {
            l.set(*id, *t);
        }
        l
    }

    #[test]
    fn weighted_examples() {
        let l = ledger(&[("A", 1.0), ("B", 1.0)]);
        assert!((weighted_verdict(&l, &[("A", 0.2), ("B", 0.8)]).unwrap() - 0.5).abs() < 1e-15);
        let l = ledger(&[("A", 0.8), ("B", 0.2)]);
        assert!((weighted_verdict(&l, &[("A", 1.0), ("B", 0.0)]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(weighted_verdict(&l, &[("A", 0.37)]).unwrap(), 0.37);
    }

    #[test]
    fn weighted_errors() {
        let l = ledger(&[("A", 1.0)]);
        assert_eq!(weighted_verdict::<&str>(&l, &[]), Err(ConsensusError::EmptyVerdicts));
        assert_eq!(weighted_verdict(&l, &[("Z", 0.5)]), Err(ConsensusError::UnknownNode("Z".into())));
    }

    #[test]
    fn trust_update_examples() {
        let l = ledger(&[("A", 1.0)]);
        assert_eq!(update_trust(&l, &[("A", 0.3)], 0.3).unwrap().get("A"), Some(1.0));
        let n = update_trust(&l, &[("A", 1.0)], 0.0).unwrap();
        assert!((n.get("A").unwrap() - 0.9).abs() < 1e-15);
        let low = ledger(&[("A", 0.01)]);
        assert_eq!(update_trust(&low, &[("A", 1.0)], 0.0).unwrap().get("A"), Some(0.01));
    }

    #[test]
    fn non_participants_unchanged() {
        let l = ledger(&[("A", 0.7), ("B", 0.4)]);
        let n = update_trust(&l, &[("A", 0.0)], 1.0).unwrap();
        assert_eq!(n.get("B"), Some(0.4));
        assert_eq!(
            update_trust(&l, &[("C", 0.0)], 1.0),
            Err(ConsensusError::UnknownNode("C".into()))
        );
    }

    #[test]
    fn decision_boundary() {
        assert_eq!(decide(0.85, 0.5), Decision::Block);
        assert_eq!(decide(0.49, 0.5), Decision::Allow);
        assert_eq!(decide(0.5, 0.5), Decision::Block);
        assert_eq!(Decision::Block.to_string(), "BLOCK");
    }

    #[test]
    fn params_validation() {
        assert!(TrustParams::default().validate().is_ok());
        assert!(TrustParams { alpha: 0.0, t_min: 0.01 }.validate().is_err());
        assert!(TrustParams { alpha: 0.1, t_min: 0.0 }.validate().is_err());
    }

    #[test]
    fn agreeing_node_converges_to_full_trust() {
        let mut l = ledger(&[("A", 0.2)]);
        for _ in 0..400 {
            l = update_trust(&l, &[("A", 0.6)], 0.6).unwrap();
        }
        assert!((l.get("A").unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weighted_mean_bounded(
            entries in proptest::collection::vec((0.01f64..=1.0, 0.0f64..=1.0), 1..12)
        ) {
            let names: Vec<String> = (0..entries.len()).map(|i| format!("n{i}")).collect();
            let l = ledger(&names.iter().zip(&entries).map(|(n, (t, _))| (n.as_str(), *t)).collect::<Vec<_>>());
            let v: Vec<(&str, f64)> = names.iter().zip(&entries).map(|(n, (_, p))| (n.as_str(), *p)).collect();
            let m = weighted_verdict(&l, &v).unwrap();
            let lo = v.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= m && m <= hi);
        }

        #[test]
        fn equal_trust_is_arithmetic_mean(t in 0.01f64..=1.0, ps in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            let names: Vec<String> = (0..ps.len()).map(|i| format!("n{i}")).collect();
            let l = ledger(&names.iter().map(|n| (n.as_str(), t)).collect::<Vec<_>>());
            let v: Vec<(&str, f64)> = names.iter().map(String::as_str).zip(ps.iter().copied()).collect();
            let m = weighted_verdict(&l, &v).unwrap();
            prop_assert!((m - plain_mean(&v).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn update_is_order_independent(ps in proptest::collection::vec(0.0f64..=1.0, 2..8), reference in 0.0f64..=1.0) {
            let names: Vec<String> = (0..ps.len()).map(|i| format!("n{i}")).collect();
            let l = ledger(&names.iter().map(|n| (n.as_str(), 0.5)).collect::<Vec<_>>());
            let v: Vec<(&str, f64)> = names.iter().map(String::as_str).zip(ps.iter().copied()).collect();
            let mut rev = v.clone();
            rev.reverse();
            prop_assert_eq!(update_trust(&l, &v, reference).unwrap(), update_trust(&l, &rev, reference).unwrap());
        }

        #[test]
        fn persistent_deviation_caps_trust(d in 0.0f64..=1.0, start in 0.01f64..=1.0) {
            let mut l = ledger(&[("A", start)]);
            for _ in 0..300 {
                l = update_trust(&l, &[("A", d)], 0.0).unwrap();
            }
            prop_assert!(l.get("A").unwrap() <= (1.0 - d).max(0.01) + 1e-9);
        }
    }
}
