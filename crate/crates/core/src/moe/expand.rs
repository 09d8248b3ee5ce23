use rand::Rng;

use super::config::{MoeConfig, Sharing};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::transformer::{expert_prefix, ffn_prefix, init_tensor, param_specs, MoeState, ParamStore, Seq2SeqModel};

/// Turns a dense model into an MoE model.
///
/// Every dense tensor is carried over. With layer or frozen sharing the
/// dense feed-forward stays as the shared path (non-trainable when frozen)
/// and experts start random with std `expert_init_std`, or with zero output
/// projections when `zero_init_expert_output` is set. Without sharing the
/// dense feed-forward is removed and each expert starts as a copy of it plus
/// Gaussian noise of std `expert_noise_std`. The router is always random.
///
/// Returns the model and human-readable warnings.
pub fn expand_dense_to_moe<F: Real, R: Rng + ?Sized>(
    dense: &Seq2SeqModel<F>,
    cfg: &MoeConfig,
    rng: &mut R,
) -> Result<(Seq2SeqModel<F>, Vec<String>)> {
    if !dense.is_dense() {
        return Err(Error::invalid("expand needs a dense model"));
    }
    cfg.validate()?;
    dense.check_layout()?;
    let mut warnings = Vec::new();
    let ff = dense.config.d_ff;
    if cfg.d_expert != ff {
        warnings.push(match cfg.sharing {
            Sharing::None => format!(
                "d_expert {} differs from d_ff {ff}: experts copy only the overlapping hidden units, the rest start random",
                cfg.d_expert
            ),
            _ => format!(
                "d_expert {} differs from d_ff {ff}: a merged model is wider than the dense one and no-cost merging does not apply",
                cfg.d_expert
            ),
        });
    }
    let state = MoeState {
        config: cfg.clone(),
        merged: false,
    };
    let mut params = ParamStore::new();
    for (name, shape, trainable) in param_specs(&dense.config, Some(&state)) {
        if let Ok(p) = dense.params.get(&name) {
            params.insert(name, p.value.clone(), trainable);
            continue;
        }
        let value = match expert_source(&name) {
            Some((layer, part)) => {
                if cfg.sharing == Sharing::None {
                    let src = dense.params.value(&format!("{}.{part}", ffn_prefix("dec", layer)))?;
                    copy_with_noise(src, &shape, part, cfg.expert_noise_std, rng)
                } else if shape.len() == 1 || (cfg.zero_init_expert_output && part == "w2") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, cfg.expert_init_std, rng)
                }
            }
            None => init_tensor(&name, &shape, rng),
        };
        params.insert(name, value, trainable);
    }
    let model = Seq2SeqModel {
        config: dense.config.clone(),
        moe: Some(state),
        params,
    };
    model.check_layout()?;
    Ok((model, warnings))
}

/// `(layer, part)` for names of the form `dec.{layer}.expert.{e}.{part}`.
fn expert_source(name: &str) -> Option<(usize, &str)> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["dec", l, "expert", _, part] => Some((l.parse().ok()?, part)),
        _ => None,
    }
}

/// Copies `src` into `shape`, truncating or extending along the hidden axis
/// (columns of `w1`/`b1`, rows of `w2`); extension entries are random.
fn copy_with_noise<F: Real, R: Rng + ?Sized>(src: &Tensor<F>, shape: &[usize], part: &str, std: f64, rng: &mut R) -> Tensor<F> {
    let mut out: Tensor<F> = Tensor::randn(shape, std, rng);
    let ss = src.shape();
    match (part, shape) {
        ("w1", [r, c]) => {
            for i in 0..*r {
                for j in 0..(*c).min(ss[1]) {
                    out.data_mut()[i * c + j] += src.data()[i * ss[1] + j];
                }
            }
        }
        ("w2", [r, c]) => {
            for i in 0..(*r).min(ss[0]) {
                for j in 0..*c {
                    out.data_mut()[i * c + j] += src.data()[i * ss[1] + j];
                }
            }
        }
        (_, [n]) => {
            for i in 0..(*n).min(ss[0]) {
                out.data_mut()[i] += src.data()[i];
            }
        }
        _ => {}
    }
    out
}

/// Folds the shared feed-forward of every MoE layer into each expert by
/// width concatenation: `W1' = [W1_e | W1_f]`, `b1' = [b1_e, b1_f]`,
/// `W2' = [W2_e ; W2_f]`, with `b2_f` kept separately. Under combine weights
/// `a_k` the shared block is scaled by `a_k / Σ a`, so the merged layer
/// reproduces `Σ a_k E_k(x) + f(x)` and no separate shared path remains.
pub fn merge_shared_into_experts<F: Real>(model: &Seq2SeqModel<F>) -> Result<Seq2SeqModel<F>> {
    let Some(ms) = &model.moe else {
        return Err(Error::invalid("merge needs an MoE model"));
    };
    if ms.merged {
        return Err(Error::invalid("model is already merged"));
    }
    if !ms.config.sharing.keeps_shared() {
        return Err(Error::invalid("model has no shared feed-forward to merge"));
    }
    model.check_layout()?;
    let mut params = model.params.clone();
    for l in model.moe_layers() {
        let f = ffn_prefix("dec", l);
        let fw1 = params.remove(&format!("{f}.w1"))?.value;
        let fb1 = params.remove(&format!("{f}.b1"))?.value;
        let fw2 = params.remove(&format!("{f}.w2"))?.value;
        let fb2 = params.remove(&format!("{f}.b2"))?.value;
        for e in 0..ms.config.num_experts {
            let p = expert_prefix(l, e);
            let w1 = concat_cols(params.value(&format!("{p}.w1"))?, &fw1)?;
            let b1 = concat_vec(params.value(&format!("{p}.b1"))?, &fb1);
            let w2 = concat_rows(params.value(&format!("{p}.w2"))?, &fw2)?;
            params.insert(format!("{p}.w1"), w1, true);
            params.insert(format!("{p}.b1"), b1, true);
            params.insert(format!("{p}.w2"), w2, true);
            params.insert(format!("{p}.b2_shared"), fb2.clone(), true);
        }
    }
    let merged = Seq2SeqModel {
        config: model.config.clone(),
        moe: Some(MoeState {
            config: ms.config.clone(),
            merged: true,
        }),
        params,
    };
    merged.check_layout()?;
    Ok(merged)
}

fn concat_cols<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (ra, ca) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    if ra != rb {
        return Err(Error::shape("concat_cols", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for i in 0..ra {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::from_vec(&[ra, ca + cb], data)
}

fn concat_rows<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (ra, ca) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    if ca != cb {
        return Err(Error::shape("concat_rows", a.shape(), b.shape()));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ra + rb, ca], data)
}

fn concat_vec<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[data.len()], data).expect("vector concat")
}
