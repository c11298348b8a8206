//! Bernoulli cache policy: probabilities, actions, rewards and the
//! score-function gradient.

use blockdance_core::{Error, Result, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::net::DecisionNet;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `Σ_t [u_t ln m_t + (1 − u_t) ln(1 − m_t)]` with `m = sigmoid(logits)`,
/// using `ln sigmoid(x) = −softplus(−x)` and `ln(1 − sigmoid(x)) = −softplus(x)`.
pub fn log_prob(logits: &[f64], u: &[bool]) -> f64 {
    assert_eq!(logits.len(), u.len(), "logits and actions differ in length");
    logits
        .iter()
        .zip(u)
        .map(|(&l, &a)| if a { -softplus(-l) } else { -softplus(l) })
        .sum()
}

/// `∂ log π(u) / ∂ logits = u − m`.
pub fn log_prob_grad(m: &[f64], u: &[bool]) -> Vec<f64> {
    m.iter().zip(u).map(|(&p, &a)| f64::from(u8::from(a)) - p).collect()
}

/// Draws `u_t = 1` with probability `m_t`, one uniform per entry.
pub fn sample_actions(m: &[f64], rng: &mut RngStream) -> Vec<bool> {
    m.iter().map(|&p| rng.uniform() < p).collect()
}

/// Cache wherever `m_t ≥ 0.5`; an exact tie caches.
pub fn greedy_actions(m: &[f64]) -> Vec<bool> {
    m.iter().map(|&p| p >= 0.5).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityOracle {
    /// [`quality_proxy`] against the full-compute output.
    Proxy,
    /// 1 if the output equals the full-compute output bit for bit, else 0.
    ExactMatch,
}

impl QualityOracle {
    pub fn score(self, z0: &Tensor, reference: &Tensor) -> Result<f64> {
        match self {
            QualityOracle::Proxy => quality_proxy(z0, reference),
            QualityOracle::ExactMatch => {
                if z0.shape() != reference.shape() {
                    return Err(Error::Dimension(format!("{:?} vs {:?}", z0.shape(), reference.shape())));
                }
                Ok(if z0.bit_eq(reference) { 1.0 } else { 0.0 })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda: f64,
    pub oracle: QualityOracle,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            oracle: QualityOracle::Proxy,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("reward lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub total: f64,
    pub compute: f64,
    pub quality: f64,
}

/// `C = 1 − Σu / len(u)`, `R = C + λ Q`.
pub fn compute_reward(u: &[bool], quality: f64, cfg: &RewardConfig) -> Reward {
    let cached = u.iter().filter(|&&a| a).count();
    let compute = if u.is_empty() { 0.0 } else { 1.0 - cached as f64 / u.len() as f64 };
    Reward {
        total: compute + cfg.lambda * quality,
        compute,
        quality,
    }
}

/// `1 − min(1, RMSE / RMS(reference))`; an all-zero reference uses scale 1.
pub fn quality_proxy(z0: &Tensor, reference: &Tensor) -> Result<f64> {
    if z0.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "quality proxy shapes {:?} vs {:?}",
            z0.shape(),
            reference.shape()
        )));
    }
    let n = reference.len().max(1) as f64;
    let mse = z0.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let rms = (reference.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let scale = if rms > 0.0 { rms } else { 1.0 };
    Ok(1.0 - (mse.sqrt() / scale).min(1.0))
}

/// One sampled decision and the reward it earned.
#[derive(Debug, Clone)]
pub struct PolicySample<'a> {
    pub z_rho: &'a Tensor,
    pub context: &'a [f64],
    pub actions: Vec<bool>,
    pub reward: f64,
}

/// `(1/B) Σ_i (R_i − b) ∇_w log π(u_i | z_ρ,i, c_i)`, accumulated in batch order.
pub fn reinforce_grad(net: &DecisionNet, batch: &[PolicySample<'_>], baseline: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Training("empty policy-gradient batch".into()));
    }
    if !baseline.is_finite() {
        return Err(Error::Training(format!("non-finite reward baseline {baseline}")));
    }
    let mut grad = vec![0.0; net.num_params()];
    let inv_b = 1.0 / batch.len() as f64;
    for (i, s) in batch.iter().enumerate() {
        if !s.reward.is_finite() {
            return Err(Error::Training(format!("non-finite reward {} for batch item {i}", s.reward)));
        }
        let fwd = net.forward(s.z_rho, s.context)?;
        if s.actions.len() != fwd.logits.len() {
            return Err(Error::Config(format!(
                "{} actions for a network with {} outputs",
                s.actions.len(),
                fwd.logits.len()
            )));
        }
        let m: Vec<f64> = fwd.logits.iter().map(|&l| sigmoid(l)).collect();
        let weight = (s.reward - baseline) * inv_b;
        let dlogits: Vec<f64> = log_prob_grad(&m, &s.actions).into_iter().map(|g| g * weight).collect();
        net.backward_acc(&fwd, &dlogits, &mut grad);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(compute_reward(&[true; 5], 0.0, &cfg).compute, 0.0);
        assert_eq!(compute_reward(&[false; 5], 0.0, &cfg).compute, 1.0);
        let r = compute_reward(&[true, false], 0.3, &cfg);
        assert!((r.total - 1.1).abs() < 1e-15);
    }

    #[test]
    fn greedy_threshold() {
        assert_eq!(greedy_actions(&[0.7, 0.2, 0.5]), vec![true, false, true]);
    }

    #[test]
    fn lambda_must_be_nonnegative() {
        let bad = RewardConfig { lambda: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }

    #[test]
    fn proxy_boundaries() {
        let r = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(quality_proxy(&r, &r).unwrap(), 1.0);
        assert_eq!(quality_proxy(&Tensor::zeros(&[2, 2]), &r).unwrap(), 0.0);
        let z = Tensor::zeros(&[2, 2]);
        let one = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        assert!((quality_proxy(&one, &z).unwrap() - 0.5).abs() < 1e-15);
        assert!(quality_proxy(&z, &Tensor::zeros(&[4])).is_err());
    }
}
