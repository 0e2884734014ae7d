//! Ensemble members: triplet hinge with semi-hard mining, binomial
//! deviance, Proxy-NCA and label-smoothed classification.
//!
//! The free functions operate on embeddings as given. [`LossMember`] wraps a
//! loss together with its internal parameters and applies the input
//! contract of each loss: triplet, binomial and Proxy-NCA see unit-normalized
//! embeddings (with the normalization differentiated exactly), the classifier
//! sees the raw head output.

mod binomial;
mod classify;
mod proxy;
mod triplet;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{normalize_rows, Matrix, Param};

pub use binomial::{
    binomial_deviance, enumerate_pairs, pair_deviance, BinomialConfig, NegativeBalance, Pair, PairSet,
};
pub use classify::{smoothed_ce, smoothed_targets, SmoothedCeOutput, SoftmaxLayer};
pub use proxy::{proxy_nca, ProxyBank, ProxyNcaOutput};
pub use triplet::{mine_semi_hard, triplet_hinge, Triplet, TripletSet};

/// Loss value and gradient with respect to the embeddings it consumed.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_emb: Matrix,
    /// Set when there was nothing to average over (no triplets or pairs).
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Binomial,
    ProxyNca,
    Classification,
}

impl LossKind {
    /// The four members in their canonical ensemble order.
    pub const ALL: [LossKind; 4] = [
        LossKind::Triplet,
        LossKind::Binomial,
        LossKind::ProxyNca,
        LossKind::Classification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Binomial => "binomial",
            LossKind::ProxyNca => "proxy_nca",
            LossKind::Classification => "classification",
        }
    }

    /// Whether the loss consumes unit-normalized embeddings.
    pub fn normalizes_input(self) -> bool {
        !matches!(self, LossKind::Classification)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    /// Triplet hinge margin.
    pub margin: f64,
    pub binomial: BinomialConfig,
    /// Label smoothing factor of the classification loss.
    pub smoothing: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            margin: 0.1,
            binomial: BinomialConfig::default(),
            smoothing: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MemberParams {
    None,
    Proxies(ProxyBank),
    Softmax(SoftmaxLayer),
}

/// Result of [`LossMember::forward_backward`].
#[derive(Debug, Clone)]
pub struct MemberOutput {
    pub loss: f64,
    /// Gradient with respect to the raw head output.
    pub grad_emb: Matrix,
    /// Gradients of the member's own parameters, in [`LossMember::params`] order.
    pub param_grads: Vec<Matrix>,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossMember {
    pub kind: LossKind,
    pub params: MemberParams,
}

impl LossMember {
    pub fn new<R: Rng + ?Sized>(kind: LossKind, classes: usize, embed_dim: usize, rng: &mut R) -> Self {
        let params = match kind {
            LossKind::Triplet | LossKind::Binomial => MemberParams::None,
            LossKind::ProxyNca => MemberParams::Proxies(ProxyBank::new(classes, embed_dim, rng)),
            LossKind::Classification => MemberParams::Softmax(SoftmaxLayer::new(embed_dim, classes, rng)),
        };
        LossMember { kind, params }
    }

    pub fn params(&self) -> Vec<&Param> {
        match &self.params {
            MemberParams::None => vec![],
            MemberParams::Proxies(bank) => vec![&bank.proxies],
            MemberParams::Softmax(layer) => vec![&layer.weight, &layer.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.params {
            MemberParams::None => vec![],
            MemberParams::Proxies(bank) => vec![&mut bank.proxies],
            MemberParams::Softmax(layer) => vec![&mut layer.weight, &mut layer.bias],
        }
    }

    /// Restores invariants after an optimizer step (unit-length proxies).
    pub fn after_step(&mut self) {
        if let MemberParams::Proxies(bank) = &mut self.params {
            bank.renormalize();
        }
    }

    /// Evaluates the loss on a raw head output and returns gradients with
    /// respect to that output and to the member's parameters.
    pub fn forward_backward(&self, raw_emb: &Matrix, labels: &[usize], settings: &LossSettings) -> Result<MemberOutput> {
        if labels.len() != raw_emb.rows() {
            return Err(Error::shape("loss labels", raw_emb.rows(), labels.len()));
        }
        if self.kind == LossKind::Classification {
            let MemberParams::Softmax(layer) = &self.params else {
                return Err(Error::InvalidArgument("classification member lacks a softmax layer".into()));
            };
            let out = smoothed_ce(raw_emb, labels, layer, settings.smoothing)?;
            return Ok(MemberOutput {
                loss: out.loss,
                grad_emb: out.grad_emb,
                param_grads: vec![out.grad_weight, out.grad_bias],
                empty: false,
            });
        }

        let normalized = normalize_rows(raw_emb);
        let emb = &normalized.unit;
        let (loss, grad_unit, param_grads, empty) = match (&self.kind, &self.params) {
            (LossKind::Triplet, _) => {
                let triplets = mine_semi_hard(emb, labels, settings.margin)?;
                let out = triplet_hinge(emb, &triplets, settings.margin)?;
                (out.loss, out.grad_emb, vec![], out.empty)
            }
            (LossKind::Binomial, _) => {
                let pairs = enumerate_pairs(labels);
                let out = binomial_deviance(emb, &pairs, &settings.binomial)?;
                (out.loss, out.grad_emb, vec![], out.empty)
            }
            (LossKind::ProxyNca, MemberParams::Proxies(bank)) => {
                let out = proxy_nca(emb, labels, bank)?;
                (out.loss, out.grad_emb, vec![out.grad_proxies], false)
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} member has mismatched parameters",
                    self.kind
                )))
            }
        };
        Ok(MemberOutput {
            loss,
            grad_emb: normalized.backward(&grad_unit),
            param_grads,
            empty,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("npair".parse::<LossKind>().is_err());
    }
}
