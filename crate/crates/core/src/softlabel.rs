//! Group classification targets and losses.
//!
//! The soft target for group `g` places logit `|G|` at index `g` and lowers it
//! by `beta` per step of group distance on both sides, then applies softmax.
//! Cross-entropy against that target, plain CE and logit-adjusted CE all
//! return their value together with the exact gradient w.r.t. the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax};

/// Floor added to empirical group frequencies before building an LA prior.
pub const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelCodec {
    num_groups: usize,
    beta: f64,
}

impl SoftLabelCodec {
    pub fn new(num_groups: usize, beta: f64) -> Result<Self> {
        if num_groups < 2 {
            return Err(Error::InvalidGroups(num_groups));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("beta must be > 0, got {beta}")));
        }
        Ok(SoftLabelCodec { num_groups, beta })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn check(&self, g: usize) -> Result<()> {
        if g >= self.num_groups {
            return Err(Error::InvalidGroup {
                group: g,
                num_groups: self.num_groups,
            });
        }
        Ok(())
    }

    /// `l[j] = |G| - beta * |j - g|`.
    pub fn encode_soft_logits(&self, g: usize) -> Result<Vec<f64>> {
        self.check(g)?;
        let top = self.num_groups as f64;
        Ok((0..self.num_groups)
            .map(|j| top - self.beta * j.abs_diff(g) as f64)
            .collect())
    }

    pub fn soft_target(&self, g: usize) -> Result<SoftTarget> {
        let logits = self.encode_soft_logits(g)?;
        Ok(SoftTarget {
            probs: softmax(&logits),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    pub probs: Vec<f64>,
}

impl SoftTarget {
    pub fn one_hot(num_groups: usize, g: usize) -> Self {
        let mut probs = vec![0.0; num_groups];
        probs[g] = 1.0;
        SoftTarget { probs }
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.ln())
            .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

fn check_finite(logits: &[f64], what: &'static str) -> Result<()> {
    if logits.iter().all(|l| l.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `-sum_g q_g log softmax(logits)_g`, gradient `p - q`.
pub fn soft_ce_loss(logits: &[f64], target: &SoftTarget) -> Result<LossWithGrad> {
    check_finite(logits, "soft_ce_loss")?;
    if logits.len() != target.probs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for a {}-group target",
            logits.len(),
            target.probs.len()
        )));
    }
    let logp = log_softmax(logits);
    let value = -target
        .probs
        .iter()
        .zip(&logp)
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &lp)| q * lp)
        .sum::<f64>();
    let grad_logits = logp
        .iter()
        .zip(&target.probs)
        .map(|(&lp, &q)| lp.exp() - q)
        .collect();
    Ok(LossWithGrad { value, grad_logits })
}

pub fn hard_ce_loss(logits: &[f64], g: usize) -> Result<LossWithGrad> {
    check_finite(logits, "hard_ce_loss")?;
    if g >= logits.len() {
        return Err(Error::InvalidGroup {
            group: g,
            num_groups: logits.len(),
        });
    }
    let logp = log_softmax(logits);
    let mut grad_logits: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
    grad_logits[g] -= 1.0;
    Ok(LossWithGrad {
        value: -logp[g],
        grad_logits,
    })
}

/// Logit-adjusted CE: hard CE on `logits + tau * ln(prior)`. The shift is
/// constant in the logits, so the gradient is the adjusted `p - onehot`.
pub fn la_ce_loss(logits: &[f64], g: usize, prior: &[f64], tau: f64) -> Result<LossWithGrad> {
    validate_prior(prior)?;
    if prior.len() != logits.len() {
        return Err(Error::ShapeMismatch(format!(
            "prior of length {} for {} logits",
            prior.len(),
            logits.len()
        )));
    }
    check_finite(logits, "la_ce_loss")?;
    let adjusted: Vec<f64> = logits
        .iter()
        .zip(prior)
        .map(|(&l, &p)| l + tau * p.ln())
        .collect();
    hard_ce_loss(&adjusted, g)
}

pub fn validate_prior(prior: &[f64]) -> Result<()> {
    if prior.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidPrior("every entry must be > 0".into()));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPrior(format!("entries sum to {sum}, not 1")));
    }
    Ok(())
}

/// Empirical group frequencies with a small additive floor, renormalized.
pub fn empirical_prior(counts: &[usize]) -> Result<Vec<f64>> {
    let total = counts.iter().sum::<usize>() as f64;
    if counts.is_empty() || total == 0.0 {
        return Err(Error::InvalidPrior("no samples to estimate a prior".into()));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / total + PRIOR_FLOOR)
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|p| p / s).collect())
}

/// Group classification criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Soft,
    Ce,
    La,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Soft => "soft",
            Criterion::Ce => "ce",
            Criterion::La => "la",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(Criterion::Soft),
            "ce" => Ok(Criterion::Ce),
            "la" => Ok(Criterion::La),
            other => Err(Error::Config(format!("unknown criterion '{other}'"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A criterion bound to everything it needs to score one sample.
#[derive(Clone, Debug)]
pub enum GroupLoss {
    Soft(Vec<SoftTarget>),
    Ce,
    La { prior: Vec<f64>, tau: f64 },
}

impl GroupLoss {
    pub fn new(
        criterion: Criterion,
        codec: &SoftLabelCodec,
        train_counts: &[usize],
        tau: f64,
    ) -> Result<Self> {
        Ok(match criterion {
            Criterion::Soft => GroupLoss::Soft(
                (0..codec.num_groups())
                    .map(|g| codec.soft_target(g))
                    .collect::<Result<_>>()?,
            ),
            Criterion::Ce => GroupLoss::Ce,
            Criterion::La => GroupLoss::La {
                prior: empirical_prior(train_counts)?,
                tau,
            },
        })
    }

    pub fn loss(&self, logits: &[f64], g: usize) -> Result<LossWithGrad> {
        match self {
            GroupLoss::Soft(targets) => {
                let t = targets.get(g).ok_or(Error::InvalidGroup {
                    group: g,
                    num_groups: targets.len(),
                })?;
                soft_ce_loss(logits, t)
            }
            GroupLoss::Ce => hard_ce_loss(logits, g),
            GroupLoss::La { prior, tau } => la_ce_loss(logits, g, prior, *tau),
        }
    }
}
