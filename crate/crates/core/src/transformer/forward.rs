use std::collections::{BTreeMap, HashMap};

use rand::RngCore;

use super::{expert_prefix, ffn_prefix, Seq2SeqModel};
use crate::corpus::{Example, Vocabulary, START, END};
use crate::error::{Error, Result};
use crate::moe::{
    moe_forward, plan_dispatch_gshard, plan_dispatch_switch, route, DispatchPlan, ExpertVars, MergedPart, RouteOutput,
    RouterVars, SecondExpertRule, Variant,
};
use crate::numerics::{dropout, AttentionLayout, Graph, Real, Segment, Tensor, Var, RMS_EPS};

/// Token ids of a batch. Decoder inputs are `START + tgt`, decoder targets
/// `tgt + END`; `labels` (if any) align with decoder targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub labels: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>, vocab: &Vocabulary) -> Self {
        let mut b = Batch {
            src: Vec::new(),
            tgt: Vec::new(),
            labels: Some(Vec::new()),
        };
        for ex in examples {
            b.src.push(vocab.encode(&ex.source));
            b.tgt.push(vocab.encode(&ex.target));
            if let Some(l) = b.labels.as_mut() {
                l.push(ex.decoder_labels().iter().map(|t| t.index()).collect());
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn dec_inputs(&self) -> Vec<Vec<usize>> {
        self.tgt
            .iter()
            .map(|t| std::iter::once(START).chain(t.iter().copied()).collect())
            .collect()
    }

    pub fn dec_targets(&self) -> Vec<usize> {
        self.tgt
            .iter()
            .flat_map(|t| t.iter().copied().chain(std::iter::once(END)))
            .collect()
    }

    pub fn flat_labels(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().flatten().copied().collect())
    }

    /// Decoder positions (target tokens plus one end token per sentence).
    pub fn num_target_positions(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }
}

/// Stochastic behaviour of one forward pass.
pub struct RunMode<'r> {
    pub rng: Option<&'r mut dyn RngCore>,
    pub dropout: bool,
    /// Enforce expert capacity (never applied to merged models).
    pub capacity: bool,
    pub second_expert: SecondExpertRule,
}

impl<'r> RunMode<'r> {
    /// Dropout, capacity and sampled second experts.
    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Self {
            rng: Some(rng),
            dropout: true,
            capacity: true,
            second_expert: SecondExpertRule::Sample,
        }
    }

    /// Deterministic: no dropout, unlimited capacity, thresholded second expert.
    pub fn eval() -> Self {
        Self {
            rng: None,
            dropout: false,
            capacity: false,
            second_expert: SecondExpertRule::Threshold,
        }
    }

    pub fn with_second_expert(mut self, rule: SecondExpertRule) -> Self {
        self.second_expert = rule;
        self
    }

    pub fn with_capacity(mut self, on: bool) -> Self {
        self.capacity = on;
        self
    }
}

/// Routing intermediates of one MoE layer.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub layer: usize,
    pub route: RouteOutput,
    pub plan: DispatchPlan,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `rows × vocab`, one row per decoder position (packed).
    pub logits: Var,
    pub encoder: Var,
    pub routing: Vec<LayerRouting>,
}

/// A tape plus lazily bound model parameters. Parameters are bound as
/// gradient-receiving leaves only when `train` is set and they are trainable.
pub struct Session<'m, F: Real> {
    pub graph: Graph<F>,
    model: &'m Seq2SeqModel<F>,
    vars: HashMap<String, Var>,
    train: bool,
}

/// `W2 relu(x W1 + b1) + b2`.
pub fn ffn_forward<F: Real>(graph: &mut Graph<F>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = graph.matmul(x, w1)?;
    let h = graph.add_row(h, b1)?;
    let h = graph.relu(h)?;
    let y = graph.matmul(h, w2)?;
    graph.add_row(y, b2)
}

fn positional<F: Real>(positions: &[usize], d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * rate;
            data.push(F::from_f64_lossy(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[positions.len(), d], data).expect("positional shape")
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    let mut o = Vec::with_capacity(lens.len());
    let mut acc = 0;
    for &l in lens {
        o.push(acc);
        acc += l;
    }
    o
}

impl<'m, F: Real> Session<'m, F> {
    pub fn new(model: &'m Seq2SeqModel<F>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            model,
            vars: HashMap::new(),
            train,
        }
    }

    pub fn model(&self) -> &'m Seq2SeqModel<F> {
        self.model
    }

    pub fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self.model.params.get(name)?;
        let v = if self.train && p.trainable {
            self.graph.param(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter(|(_, &v)| self.graph.requires_grad(v))
            .map(|(k, &v)| (k.clone(), self.graph.grad_or_zeros(v)))
            .collect()
    }

    fn embed(&mut self, seqs: &[Vec<usize>]) -> Result<Var> {
        let cfg = &self.model.config;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.is_empty() {
                return Err(Error::invalid("empty sequence"));
            }
            if s.len() > cfg.max_len {
                return Err(Error::invalid(format!("sequence of {} tokens exceeds max_len {}", s.len(), cfg.max_len)));
            }
            for (p, &id) in s.iter().enumerate() {
                if id >= cfg.vocab_size {
                    return Err(Error::invalid(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
                }
                ids.push(id);
                pos.push(p);
            }
        }
        let table = self.var("embed")?;
        let x = self.graph.gather_rows(table, &ids)?;
        let x = self.graph.scale(x, F::from_f64_lossy((cfg.d_model as f64).sqrt()))?;
        self.graph.add_const(x, &positional(&pos, cfg.d_model))
    }

    fn mha(&mut self, prefix: &str, xq: Var, xkv: Var, layout: AttentionLayout) -> Result<Var> {
        let wq = self.var(&format!("{prefix}.q"))?;
        let wk = self.var(&format!("{prefix}.k"))?;
        let wv = self.var(&format!("{prefix}.v"))?;
        let wo = self.var(&format!("{prefix}.o"))?;
        let q = self.graph.matmul(xq, wq)?;
        let k = self.graph.matmul(xkv, wk)?;
        let v = self.graph.matmul(xkv, wv)?;
        let a = self.graph.attention(q, k, v, layout)?;
        self.graph.matmul(a, wo)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.var(&format!("{prefix}.w1"))?;
        let b1 = self.var(&format!("{prefix}.b1"))?;
        let w2 = self.var(&format!("{prefix}.w2"))?;
        let b2 = self.var(&format!("{prefix}.b2"))?;
        ffn_forward(&mut self.graph, x, w1, b1, w2, b2)
    }

    fn residual_norm(&mut self, x: Var, y: Var, norm: &str, mode: &mut RunMode) -> Result<Var> {
        let y = self.maybe_dropout(y, self.model.config.dropout, mode)?;
        let s = self.graph.add(x, y)?;
        let gain = self.var(norm)?;
        self.graph.rms_norm(s, gain, RMS_EPS)
    }

    fn maybe_dropout(&mut self, x: Var, p: f64, mode: &mut RunMode) -> Result<Var> {
        if !mode.dropout || p <= 0.0 {
            return Ok(x);
        }
        let rng = mode
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::invalid("dropout requested without a random source"))?;
        dropout(&mut self.graph, x, p, rng)
    }

    pub fn router_vars(&mut self) -> Result<RouterVars> {
        Ok(RouterVars {
            wh: self.var("router.wh")?,
            bh: self.var("router.bh")?,
            wp: self.var("router.wp")?,
            bp: self.var("router.bp")?,
            wg: self.var("router.wg")?,
            bg: self.var("router.bg")?,
        })
    }

    pub fn expert_vars(&mut self, layer: usize) -> Result<Vec<ExpertVars>> {
        let ms = self.model.moe.as_ref().ok_or_else(|| Error::invalid("dense model has no experts"))?;
        let (m, merged, de) = (ms.config.num_experts, ms.merged, ms.config.d_expert);
        (0..m)
            .map(|e| {
                let p = expert_prefix(layer, e);
                Ok(ExpertVars {
                    w1: self.var(&format!("{p}.w1"))?,
                    b1: self.var(&format!("{p}.b1"))?,
                    w2: self.var(&format!("{p}.w2"))?,
                    b2: self.var(&format!("{p}.b2"))?,
                    merged: if merged {
                        Some(MergedPart {
                            d_expert: de,
                            b2_shared: self.var(&format!("{p}.b2_shared"))?,
                        })
                    } else {
                        None
                    },
                })
            })
            .collect()
    }

    /// Dispatch plan for gate values `g` under `mode`.
    pub fn plan(&self, g: Var, mode: &mut RunMode) -> Result<DispatchPlan> {
        let ms = self.model.moe.as_ref().ok_or_else(|| Error::invalid("dense model has no router"))?;
        let c = &ms.config;
        let cap = (mode.capacity && !ms.merged).then_some(c.capacity_factor);
        let gv = self.graph.value(g);
        match c.variant {
            Variant::Switch => plan_dispatch_switch(gv, cap, c.k1_weighting),
            Variant::Gshard => match (mode.second_expert, mode.rng.as_deref_mut()) {
                (SecondExpertRule::Sample, Some(rng)) => plan_dispatch_gshard(gv, cap, SecondExpertRule::Sample, c.second_expert_scale, rng),
                (SecondExpertRule::Sample, None) => Err(Error::invalid("sampled second expert needs a random source")),
                (rule, _) => plan_dispatch_gshard(gv, cap, rule, c.second_expert_scale, &mut NoDraws),
            },
        }
    }

    /// Feed-forward sublayer of decoder block `layer`: dense, or shared plus
    /// MoE with its routing record.
    fn decoder_ffn(&mut self, layer: usize, x: Var, mode: &mut RunMode) -> Result<(Var, Option<LayerRouting>)> {
        let model = self.model;
        if model.moe.is_none() || layer == 0 {
            return Ok((self.ffn(&ffn_prefix("dec", layer), x)?, None));
        }
        let ms = model.moe.as_ref().expect("moe");
        let router = self.router_vars()?;
        let r = route(&mut self.graph, &router, x)?;
        let plan = self.plan(r.g, mode)?;
        let experts = self.expert_vars(layer)?;
        let ed = if mode.dropout { ms.config.expert_dropout } else { 0.0 };
        let rng = if ed > 0.0 { mode.rng.as_deref_mut() } else { None };
        if ed > 0.0 && rng.is_none() {
            return Err(Error::invalid("expert dropout requested without a random source"));
        }
        let y = moe_forward(&mut self.graph, x, r.g, &plan, &experts, rng.map(|r| (ed, r)))?;
        let shared = ffn_prefix("dec", layer);
        let y = if !ms.merged && model.params.contains(&format!("{shared}.w1")) {
            let f = self.ffn(&shared, x)?;
            self.graph.add(f, y)?
        } else {
            y
        };
        Ok((
            y,
            Some(LayerRouting {
                layer,
                route: r,
                plan,
            }),
        ))
    }

    pub fn encode(&mut self, src: &[Vec<usize>], mode: &mut RunMode) -> Result<Var> {
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let offs = offsets(&lens);
        let heads = self.model.config.n_heads;
        let layout = AttentionLayout {
            segments: offs
                .iter()
                .zip(&lens)
                .map(|(&s, &l)| Segment {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                })
                .collect(),
            heads,
            causal: false,
            key_valid: None,
        };
        let mut x = self.embed(src)?;
        x = self.maybe_dropout(x, self.model.config.dropout, mode)?;
        for l in 0..self.model.config.enc_layers {
            let a = self.mha(&format!("enc.{l}.attn"), x, x, layout.clone())?;
            x = self.residual_norm(x, a, &format!("enc.{l}.norm1"), mode)?;
            let f = self.ffn(&ffn_prefix("enc", l), x)?;
            x = self.residual_norm(x, f, &format!("enc.{l}.norm2"), mode)?;
        }
        Ok(x)
    }

    /// Decoder over packed inputs given packed encoder states for sources of
    /// lengths `src_lens`. Returns logits and per-MoE-layer routing.
    pub fn decode(&mut self, encoder: Var, src_lens: &[usize], dec_in: &[Vec<usize>], mode: &mut RunMode) -> Result<(Var, Vec<LayerRouting>)> {
        if src_lens.len() != dec_in.len() {
            return Err(Error::shape("decode", &[src_lens.len()], &[dec_in.len()]));
        }
        let cfg = &self.model.config;
        let heads = cfg.n_heads;
        let dec_lens: Vec<usize> = dec_in.iter().map(Vec::len).collect();
        let (so, dof) = (offsets(src_lens), offsets(&dec_lens));
        let self_layout = AttentionLayout {
            segments: dof
                .iter()
                .zip(&dec_lens)
                .map(|(&s, &l)| Segment {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                })
                .collect(),
            heads,
            causal: true,
            key_valid: None,
        };
        let cross_layout = AttentionLayout {
            segments: (0..dec_lens.len())
                .map(|i| Segment {
                    q_start: dof[i],
                    q_len: dec_lens[i],
                    k_start: so[i],
                    k_len: src_lens[i],
                })
                .collect(),
            heads,
            causal: false,
            key_valid: None,
        };
        let mut x = self.embed(dec_in)?;
        x = self.maybe_dropout(x, cfg.dropout, mode)?;
        let mut routing = Vec::new();
        for l in 0..cfg.dec_layers {
            let a = self.mha(&format!("dec.{l}.self"), x, x, self_layout.clone())?;
            x = self.residual_norm(x, a, &format!("dec.{l}.norm1"), mode)?;
            let c = self.mha(&format!("dec.{l}.cross"), x, encoder, cross_layout.clone())?;
            x = self.residual_norm(x, c, &format!("dec.{l}.norm2"), mode)?;
            let (f, r) = self.decoder_ffn(l, x, mode)?;
            routing.extend(r);
            x = self.residual_norm(x, f, &format!("dec.{l}.norm3"), mode)?;
        }
        let w = self.var("out.w")?;
        let b = self.var("out.b")?;
        let logits = self.graph.matmul(x, w)?;
        let logits = self.graph.add_row(logits, b)?;
        Ok((logits, routing))
    }

    pub fn forward(&mut self, src: &[Vec<usize>], dec_in: &[Vec<usize>], mode: &mut RunMode) -> Result<ForwardOutput> {
        let encoder = self.encode(src, mode)?;
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let (logits, routing) = self.decode(encoder, &lens, dec_in, mode)?;
        Ok(ForwardOutput {
            logits,
            encoder,
            routing,
        })
    }

    /// Teacher-forced pass over a batch.
    pub fn forward_teacher_forced(&mut self, batch: &Batch, mode: &mut RunMode) -> Result<ForwardOutput> {
        self.forward(&batch.src, &batch.dec_inputs(), mode)
    }
}

/// Random source for deterministic rules, which never draw.
struct NoDraws;

impl RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic dispatch drew a random number")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic dispatch drew a random number")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("deterministic dispatch drew a random number")
    }
}
