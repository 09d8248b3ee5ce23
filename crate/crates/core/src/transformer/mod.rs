//! Encoder-decoder transformer with optional MoE decoder blocks.
//!
//! Blocks are post-norm: `rms_norm(x + sublayer(x))`. Decoder blocks after
//! the first carry an MoE layer when the model has one; all of them share a
//! single router.

mod checkpoint;
mod decode;
mod forward;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{greedy_decode, vote_error_type, Decoded};
pub use forward::{ffn_forward, Batch, ForwardOutput, LayerRouting, RunMode, Session};
pub use params::{Param, ParamStore};


use crate::error::{Error, Result};
use crate::moe::{MoeConfig, Sharing};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub num_error_types: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 3,
            max_len: 24,
            dropout: 0.1,
            num_error_types: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no room beyond the special tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.enc_layers == 0 || self.dec_layers == 0 || self.max_len == 0 {
            return bad("d_ff, layer counts and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.num_error_types < 2 {
            return bad(format!("need at least 2 error types, got {}", self.num_error_types));
        }
        Ok(())
    }
}

/// MoE settings attached to a model, plus whether the shared feed-forward
/// has been folded into the experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeState {
    pub config: MoeConfig,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel<F: Real = f32> {
    pub config: ModelConfig,
    pub moe: Option<MoeState>,
    pub params: ParamStore<F>,
}

pub fn ffn_prefix(side: &str, layer: usize) -> String {
    format!("{side}.{layer}.ffn")
}

pub fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("dec.{layer}.expert.{expert}")
}

/// Canonical parameter layout: `(name, shape, trainable)`.
pub fn param_specs(config: &ModelConfig, moe: Option<&MoeState>) -> Vec<(String, Vec<usize>, bool)> {
    let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
    let mut out = vec![
        ("embed".to_string(), vec![v, d], true),
        ("out.w".to_string(), vec![d, v], true),
        ("out.b".to_string(), vec![v], true),
    ];
    let ffn = |out: &mut Vec<(String, Vec<usize>, bool)>, p: String, hidden: usize, trainable: bool| {
        out.push((format!("{p}.w1"), vec![d, hidden], trainable));
        out.push((format!("{p}.b1"), vec![hidden], trainable));
        out.push((format!("{p}.w2"), vec![hidden, d], trainable));
        out.push((format!("{p}.b2"), vec![d], trainable));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>, bool)>, p: String| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.{m}"), vec![d, d], true));
        }
    };
    for l in 0..config.enc_layers {
        attn(&mut out, format!("enc.{l}.attn"));
        ffn(&mut out, ffn_prefix("enc", l), ff, true);
        for n in ["norm1", "norm2"] {
            out.push((format!("enc.{l}.{n}"), vec![d], true));
        }
    }
    for l in 0..config.dec_layers {
        attn(&mut out, format!("dec.{l}.self"));
        attn(&mut out, format!("dec.{l}.cross"));
        for n in ["norm1", "norm2", "norm3"] {
            out.push((format!("dec.{l}.{n}"), vec![d], true));
        }
        match moe {
            Some(ms) if l >= 1 => {
                let c = &ms.config;
                if ms.merged {
                    for e in 0..c.num_experts {
                        let p = expert_prefix(l, e);
                        ffn(&mut out, p.clone(), c.d_expert + ff, true);
                        out.push((format!("{p}.b2_shared"), vec![d], true));
                    }
                } else {
                    if c.sharing.keeps_shared() {
                        ffn(&mut out, ffn_prefix("dec", l), ff, c.sharing != Sharing::Frozen);
                    }
                    for e in 0..c.num_experts {
                        ffn(&mut out, expert_prefix(l, e), c.d_expert, true);
                    }
                }
            }
            _ => ffn(&mut out, ffn_prefix("dec", l), ff, true),
        }
    }
    if let Some(ms) = moe {
        let (h, t, m) = (ms.config.router_hidden, config.num_error_types, ms.config.num_experts);
        out.extend([
            ("router.wh".to_string(), vec![d, h], true),
            ("router.bh".to_string(), vec![h], true),
            ("router.wp".to_string(), vec![h, t], true),
            ("router.bp".to_string(), vec![t], true),
            ("router.wg".to_string(), vec![h, m], true),
            ("router.bg".to_string(), vec![m], true),
        ]);
    }
    out
}

/// Default initializer for a parameter: gains 1, biases 0, embeddings
/// `N(0, 1/d)`, weight matrices `N(0, 1/fan_in)`.
pub fn init_tensor<F: Real, R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<F> {
    let last = name.rsplit('.').next().unwrap_or(name);
    if last.starts_with("norm") {
        Tensor::full(shape, F::one())
    } else if shape.len() == 1 {
        Tensor::zeros(shape)
    } else if name == "embed" {
        Tensor::randn(shape, 1.0 / (shape[1] as f64).sqrt(), rng)
    } else {
        Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
    }
}

impl<F: Real> Seq2SeqModel<F> {
    /// Freshly initialized dense model.
    pub fn new_dense<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, trainable) in param_specs(&config, None) {
            let t = init_tensor(&name, &shape, rng);
            params.insert(name, t, trainable);
        }
        Ok(Self {
            config,
            moe: None,
            params,
        })
    }

    /// Decoder blocks carrying an MoE layer.
    pub fn moe_layers(&self) -> Vec<usize> {
        if self.moe.is_some() {
            (1..self.config.dec_layers).collect()
        } else {
            Vec::new()
        }
    }

    pub fn is_dense(&self) -> bool {
        self.moe.is_none()
    }

    pub fn moe_config(&self) -> Option<&MoeConfig> {
        self.moe.as_ref().map(|m| &m.config)
    }

    pub fn cast<G: Real>(&self) -> Seq2SeqModel<G> {
        Seq2SeqModel {
            config: self.config.clone(),
            moe: self.moe.clone(),
            params: self.params.cast(),
        }
    }

    /// Names and shapes must match the canonical layout for the configs.
    pub fn check_layout(&self) -> Result<()> {
        let specs = param_specs(&self.config, self.moe.as_ref());
        if specs.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "model has {} parameter tensors, layout expects {}",
                self.params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in specs {
            let p = self.params.get(&name)?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::shape("parameter layout", p.value.shape(), &shape));
            }
        }
        Ok(())
    }

    /// Every parameter, all experts included.
    pub fn total_param_count(&self) -> usize {
        self.params.count()
    }

    fn expert_size(&self, layer: usize) -> usize {
        self.params.count_prefix(&format!("{}.", expert_prefix(layer, 0)))
    }

    /// Parameters active for one token: everything except the `M - K`
    /// experts a token does not use in each MoE layer.
    pub fn effective_param_count(&self) -> usize {
        let Some(ms) = &self.moe else {
            return self.total_param_count();
        };
        let idle = ms.config.num_experts - ms.config.top_k();
        self.total_param_count() - self.moe_layers().iter().map(|&l| idle * self.expert_size(l)).sum::<usize>()
    }

    /// Count under the convention that a same-width shared feed-forward is
    /// merged into the experts at no cost: dense + router + (K-1) experts
    /// per layer. Otherwise (low-rank or no sharing) dense + router + K experts.
    pub fn merged_convention_epc(&self) -> usize {
        let Some(ms) = &self.moe else {
            return self.total_param_count();
        };
        let c = &ms.config;
        let (d, ff) = (self.config.d_model, self.config.d_ff);
        let shared = 2 * d * ff + ff + d;
        let mergeable = c.d_expert == ff && c.sharing.keeps_shared();
        let mut count = self.total_param_count();
        for &l in &self.moe_layers() {
            let stored = self.expert_size(l);
            // Own expert parameters, excluding any merged shared copy.
            let own = if ms.merged { stored - shared } else { stored };
            count -= c.num_experts * stored;
            if ms.merged {
                count += shared;
            }
            let used = if mergeable { c.top_k() - 1 } else { c.top_k() };
            count += used * own;
        }
        count
    }
}
