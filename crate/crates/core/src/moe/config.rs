use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Top-1 routing, balance statistics after capacity.
    Switch,
    /// Top-2 routing with a stochastic second expert, statistics before capacity.
    Gshard,
}

impl Variant {
    pub fn top_k(self) -> usize {
        match self {
            Variant::Switch => 1,
            Variant::Gshard => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// Block output adds the dense feed-forward and the MoE layer.
    Layer,
    /// Like `Layer`, but the dense feed-forward is never updated.
    Frozen,
    /// The dense feed-forward is replaced by the experts.
    None,
}

impl Sharing {
    pub fn keeps_shared(self) -> bool {
        !matches!(self, Sharing::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum K1Weighting {
    /// Scale the single expert's output by its gate value.
    RawGate,
    /// Weight 1, the literal normalized form for one expert.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondExpertRule {
    /// Keep with probability `min(1, scale * g2)`.
    Sample,
    /// Keep iff `scale * g2 >= 0.5`; the deterministic inference rule.
    Threshold,
    /// Always keep (forced top-2).
    Always,
}

macro_rules! text_enum {
    ($t:ty, $($name:literal => $v:expr),+ $(,)?) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $(x if *x == $v => $name,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(Error::Config(format!(
                        "`{other}` is not one of {}", [$($name),+].join("|")
                    ))),
                }
            }
        }
    };
}

text_enum!(Variant, "switch" => Variant::Switch, "gshard" => Variant::Gshard);
text_enum!(Sharing, "layer" => Sharing::Layer, "frozen" => Sharing::Frozen, "none" => Sharing::None);
text_enum!(K1Weighting, "raw_gate" => K1Weighting::RawGate, "normalized" => K1Weighting::Normalized);
text_enum!(
    SecondExpertRule,
    "sample" => SecondExpertRule::Sample,
    "threshold" => SecondExpertRule::Threshold,
    "always" => SecondExpertRule::Always,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub variant: Variant,
    pub capacity_factor: f64,
    pub sharing: Sharing,
    pub d_expert: usize,
    pub router_hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub second_expert_scale: f64,
    pub k1_weighting: K1Weighting,
    pub expert_dropout: f64,
    pub expert_init_std: f64,
    pub expert_noise_std: f64,
    pub zero_init_expert_output: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 7,
            variant: Variant::Gshard,
            capacity_factor: 1.25,
            sharing: Sharing::Layer,
            d_expert: 128,
            router_hidden: 48,
            alpha: 0.1,
            beta: 1.0,
            second_expert_scale: 2.0,
            k1_weighting: K1Weighting::RawGate,
            expert_dropout: 0.1,
            expert_init_std: 0.02,
            expert_noise_std: 0.01,
            zero_init_expert_output: false,
        }
    }
}

impl MoeConfig {
    pub fn top_k(&self) -> usize {
        self.variant.top_k()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_experts < 2 {
            return bad(format!("need at least 2 experts, got {}", self.num_experts));
        }
        if self.top_k() > self.num_experts {
            return bad(format!("top-{} routing needs more than {} experts", self.top_k(), self.num_experts));
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            return bad(format!("capacity_factor must be positive, got {}", self.capacity_factor));
        }
        if self.d_expert == 0 || self.router_hidden == 0 {
            return bad("d_expert and router_hidden must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.second_expert_scale > 0.0) {
            return bad("second_expert_scale must be positive".into());
        }
        if !(0.0..1.0).contains(&self.expert_dropout) {
            return bad(format!("expert_dropout must lie in [0, 1), got {}", self.expert_dropout));
        }
        if !(self.expert_init_std >= 0.0 && self.expert_noise_std >= 0.0) {
            return bad("initialization scales must be non-negative".into());
        }
        Ok(())
    }

    /// Expert capacity for `n` tokens: `ceil(cf * n * K / M)`.
    pub fn capacity(&self, n: usize) -> usize {
        capacity(self.capacity_factor, n, self.top_k(), self.num_experts)
    }
}

pub fn capacity(capacity_factor: f64, n: usize, k: usize, m: usize) -> usize {
    // The tolerance keeps exact products such as 1.1 * 10 from rounding up.
    (capacity_factor * n as f64 * k as f64 / m as f64 - 1e-9).ceil().max(0.0) as usize
}
