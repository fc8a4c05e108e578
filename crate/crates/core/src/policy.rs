//! Softmax policy over the discrete action alphabet.
//!
//! One tanh hidden layer (or none, when `hidden == 0`), analytic backward pass,
//! inverse-CDF sampling and a frozen snapshot for stop-gradient evaluation.
//! Observations are mostly one-hot, so the first layer skips zero inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const POLICY_HEADER: &str = "policy-v1";
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Arch {
    pub fn param_count(&self) -> usize {
        if self.hidden == 0 {
            self.output * self.input + self.output
        } else {
            self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Arch,
    theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ActionDistribution {
    /// Softmax of `logits / temperature` with max-logit subtraction.
    pub fn from_logits(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Numerical(format!("temperature {temperature}")));
        }
        if logits.is_empty() {
            return Err(Error::InvalidDistribution("empty logits".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        let shifted: Vec<f64> = logits.iter().map(|&z| (z - max) / temperature).collect();
        let lse = shifted.iter().map(|&s| s.exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = shifted.iter().map(|&s| s - lse).collect();
        let probs = log_probs.iter().map(|&l| l.exp()).collect();
        Ok(Self {
            logits,
            probs,
            log_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, l)| p * l)
            .sum::<f64>()
    }
}

/// Hidden activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            theta: vec![0.0; arch.param_count()],
        }
    }

    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(arch);
        let (w1, b1, w2, _) = p.offsets();
        if arch.hidden == 0 {
            let bound = 1.0 / (arch.input as f64).sqrt();
            for v in &mut p.theta[..arch.output * arch.input] {
                *v = rng.random_range(-bound..bound) * 0.1;
            }
            return p;
        }
        let bound1 = (6.0 / (arch.input + arch.hidden) as f64).sqrt();
        for v in &mut p.theta[w1..b1] {
            *v = rng.random_range(-bound1..bound1);
        }
        let bound2 = (6.0 / (arch.hidden + arch.output) as f64).sqrt() * 0.1;
        for v in &mut p.theta[w2..w2 + arch.output * arch.hidden] {
            *v = rng.random_range(-bound2..bound2);
        }
        p
    }

    pub fn from_theta(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.param_count() {
            return Err(Error::Shape {
                expected: arch.param_count(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// Start offsets of (W1, b1, W2, b2). Without a hidden layer, W1/b1 are
    /// the only block and W2 = b2 = end.
    fn offsets(&self) -> (usize, usize, usize, usize) {
        let a = self.arch;
        if a.hidden == 0 {
            let b = a.output * a.input;
            (0, b, b + a.output, b + a.output)
        } else {
            let b1 = a.hidden * a.input;
            let w2 = b1 + a.hidden;
            (0, b1, w2, w2 + a.output * a.hidden)
        }
    }

    fn check_input(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.arch.input {
            return Err(Error::Shape {
                expected: self.arch.input,
                got: obs.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, obs: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(obs)?;
        let a = self.arch;
        let (w1, b1, w2, b2) = self.offsets();
        let t = &self.theta;
        if a.hidden == 0 {
            let mut z = t[b1..b1 + a.output].to_vec();
            for (i, &x) in obs.iter().enumerate() {
                if x != 0.0 {
                    for (o, zo) in z.iter_mut().enumerate() {
                        *zo += t[w1 + o * a.input + i] * x;
                    }
                }
            }
            return Ok((z, ForwardCache { hidden: Vec::new() }));
        }
        let mut pre = t[b1..b1 + a.hidden].to_vec();
        for (i, &x) in obs.iter().enumerate() {
            if x != 0.0 {
                for (h, ph) in pre.iter_mut().enumerate() {
                    *ph += t[w1 + h * a.input + i] * x;
                }
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut z = t[b2..b2 + a.output].to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &t[w2 + o * a.hidden..w2 + (o + 1) * a.hidden];
            *zo += row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        Ok((z, ForwardCache { hidden }))
    }

    pub fn forward(&self, obs: &[f64]) -> Result<ActionDistribution> {
        self.forward_tempered(obs, 1.0)
    }

    pub fn forward_tempered(&self, obs: &[f64], temperature: f64) -> Result<ActionDistribution> {
        let (z, _) = self.logits(obs)?;
        ActionDistribution::from_logits(z, temperature)
    }

    /// Forward pass at temperature 1 keeping activations for `backward`.
    pub fn forward_cached(&self, obs: &[f64]) -> Result<(ActionDistribution, ForwardCache)> {
        let (z, cache) = self.logits(obs)?;
        Ok((ActionDistribution::from_logits(z, 1.0)?, cache))
    }

    /// Accumulates `dL/dtheta` into `grad` given `dL/dlogits`.
    pub fn backward(&self, obs: &[f64], cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let a = self.arch;
        let (w1, b1, w2, b2) = self.offsets();
        let t = &self.theta;
        if a.hidden == 0 {
            for (o, &d) in dlogits.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[b1 + o] += d;
                for (i, &x) in obs.iter().enumerate() {
                    if x != 0.0 {
                        grad[w1 + o * a.input + i] += d * x;
                    }
                }
            }
            return;
        }
        let mut dh = vec![0.0; a.hidden];
        for (o, &d) in dlogits.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[b2 + o] += d;
            let row = w2 + o * a.hidden;
            for h in 0..a.hidden {
                grad[row + h] += d * cache.hidden[h];
                dh[h] += d * t[row + h];
            }
        }
        for h in 0..a.hidden {
            let dpre = dh[h] * (1.0 - cache.hidden[h] * cache.hidden[h]);
            if dpre == 0.0 {
                continue;
            }
            grad[b1 + h] += dpre;
            let row = w1 + h * a.input;
            for (i, &x) in obs.iter().enumerate() {
                if x != 0.0 {
                    grad[row + i] += dpre * x;
                }
            }
        }
    }

    /// Analytic gradient of `log pi(action | obs)`.
    pub fn grad_logprob(&self, obs: &[f64], action: usize) -> Result<Vec<f64>> {
        let (dist, cache) = self.forward_cached(obs)?;
        if action >= dist.len() {
            return Err(Error::InvalidAction {
                action,
                size: dist.len(),
            });
        }
        let dlogits: Vec<f64> = dist
            .probs
            .iter()
            .enumerate()
            .map(|(j, &p)| (j == action) as u8 as f64 - p)
            .collect();
        let mut grad = vec![0.0; self.param_count()];
        self.backward(obs, &cache, &dlogits, &mut grad);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok(grad)
    }

    /// Serializes as the `policy-v1` checkpoint text.
    pub fn to_checkpoint(&self) -> String {
        let a = self.arch;
        let mut out = format!(
            "{POLICY_HEADER} input={} hidden={} output={} params={}\n",
            a.input,
            a.hidden,
            a.output,
            self.theta.len()
        );
        for v in &self.theta {
            out.push_str(&format!("{v:?}\n"));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(POLICY_HEADER) {
            return Err(Error::Parse(format!("expected {POLICY_HEADER} header")));
        }
        let mut get = |name: &str| -> Result<usize> {
            let field = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {name}")))?;
            field
                .strip_prefix(&format!("{name}="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad header field {field:?}")))
        };
        let arch = Arch {
            input: get("input")?,
            hidden: get("hidden")?,
            output: get("output")?,
        };
        let n = get("params")?;
        let theta = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter {l:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if theta.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: theta.len(),
            });
        }
        Self::from_theta(arch, theta)
    }
}

/// Inverse-CDF draw from `probs`.
pub fn sample<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Frozen copy of the parameters taken at the start of a training step.
#[derive(Debug, Clone)]
pub struct RolloutSnapshot(Arc<PolicyParams>);

impl RolloutSnapshot {
    pub fn new(params: &PolicyParams) -> Self {
        Self(Arc::new(params.clone()))
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }

    pub fn eval_frozen(&self, obs: &[f64]) -> Result<ActionDistribution> {
        self.0.forward(obs)
    }
}
