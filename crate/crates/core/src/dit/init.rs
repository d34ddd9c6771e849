use super::{CondMode, ModelConfig};
use crate::autodiff::{ParamStore, Rng, Tensor};
use crate::Result;

const MOD_STD: f64 = 0.02;

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n).into_iter().map(|x| x * std).collect()).expect("shape by construction")
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    normal(rng, &[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt())
}

fn linear(p: &mut ParamStore, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{prefix}.weight"), xavier(rng, fan_in, fan_out));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

fn zero_linear(p: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{prefix}.weight"), Tensor::zeros(&[fan_in, fan_out]));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

fn norm(p: &mut ParamStore, prefix: &str, dim: usize) {
    p.insert(format!("{prefix}.scale"), Tensor::full(&[dim], 1.0));
    p.insert(format!("{prefix}.shift"), Tensor::zeros(&[dim]));
}

/// Zeroes the gate thirds (`[2d, 3d)` and `[5d, 6d)`) of a 6d-wide modulation tensor's last axis.
fn zero_gates(t: &mut Tensor, width: usize) {
    let cols = 6 * width;
    for row in t.data_mut().chunks_mut(cols) {
        row[2 * width..3 * width].fill(0.0);
        row[5 * width..6 * width].fill(0.0);
    }
}

/// AdaLN head `[fan_in, 6d]`: small random shift/scale columns, zero gates, zero bias.
fn adaln_head(p: &mut ParamStore, rng: &mut Rng, prefix: &str, fan_in: usize, width: usize) {
    let mut w = normal(rng, &[fan_in, 6 * width], MOD_STD);
    zero_gates(&mut w, width);
    p.insert(format!("{prefix}.weight"), w);
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[6 * width]));
}

fn attention(
    p: &mut ParamStore,
    rng: &mut Rng,
    cfg: &ModelConfig,
    prefix: &str,
    kv_dim: usize,
    zero_out: bool,
) {
    let d = cfg.width;
    linear(p, rng, &format!("{prefix}.q"), d, d);
    linear(p, rng, &format!("{prefix}.k"), kv_dim, d);
    linear(p, rng, &format!("{prefix}.v"), kv_dim, d);
    if zero_out {
        zero_linear(p, &format!("{prefix}.o"), d, d);
    } else {
        linear(p, rng, &format!("{prefix}.o"), d, d);
    }
    if cfg.use_qk_norm {
        let s = (cfg.head_dim() as f64).sqrt();
        p.insert(format!("{prefix}.q_scale"), Tensor::full(&[cfg.num_heads], s));
        p.insert(format!("{prefix}.k_scale"), Tensor::full(&[cfg.num_heads], s));
    }
}

fn cross_attention(p: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, block: usize) {
    let prefix = format!("blocks.{block}");
    norm(p, &format!("{prefix}.cross_norm"), cfg.width);
    attention(p, rng, cfg, &format!("{prefix}.cross"), cfg.text_dim, true);
}

/// Adds zero-output cross-attention weights to every block.
pub(crate) fn init_cross_attention(cfg: &ModelConfig, p: &mut ParamStore, rng: &mut Rng) {
    for b in 0..cfg.num_blocks {
        cross_attention(p, rng, cfg, b);
    }
}

/// Fresh parameters for `cfg`.
///
/// Initialisation contracts: every modulation gate, every cross-attention
/// output projection, every SOLA up-projection `B_b` and the final output
/// projection are exactly zero. Token-prepend blocks, which have no gates,
/// instead zero their self-attention output and second feed-forward
/// projection, so every block starts as the identity.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.width;
    let te = cfg.time_embed_dim;
    let mut p = ParamStore::new();

    p.insert("t_embed.fc1.weight", normal(rng, &[te, te], MOD_STD));
    p.insert("t_embed.fc1.bias", Tensor::zeros(&[te]));
    p.insert("t_embed.fc2.weight", normal(rng, &[te, te], MOD_STD));
    p.insert("t_embed.fc2.bias", Tensor::zeros(&[te]));
    linear(&mut p, rng, "input_proj", cfg.input_channels(), d);
    p.insert("text_embed.table", normal(rng, &[cfg.text_vocab, cfg.text_dim], 1.0));

    match cfg.cond_mode {
        CondMode::AdalnSingle | CondMode::AdalnSola => adaln_head(&mut p, rng, "adaln_shared", te, d),
        CondMode::TokenPrepend => linear(&mut p, rng, "step_token", te, d),
        CondMode::AdalnPerBlock => {}
    }

    let token_prepend = cfg.cond_mode == CondMode::TokenPrepend;
    let hidden = cfg.mlp_hidden();
    let fc1_out = if cfg.ffn_glu { 2 * hidden } else { hidden };
    for b in 0..cfg.num_blocks {
        let prefix = format!("blocks.{b}");
        match cfg.cond_mode {
            CondMode::AdalnPerBlock => adaln_head(&mut p, rng, &format!("{prefix}.adaln"), te, d),
            CondMode::AdalnSingle => {
                let mut off = normal(rng, &[6 * d], MOD_STD);
                zero_gates(&mut off, d);
                p.insert(format!("{prefix}.adaln_offset"), off);
            }
            CondMode::AdalnSola => {
                p.insert(format!("{prefix}.sola.down"), xavier(rng, te, cfg.sola_rank));
                p.insert(format!("{prefix}.sola.up"), Tensor::zeros(&[cfg.sola_rank, 6 * d]));
            }
            CondMode::TokenPrepend => {
                norm(&mut p, &format!("{prefix}.norm1"), d);
                norm(&mut p, &format!("{prefix}.norm2"), d);
            }
        }
        attention(&mut p, rng, cfg, &format!("{prefix}.attn"), d, token_prepend);
        if cfg.cross_attention {
            cross_attention(&mut p, rng, cfg, b);
        }
        linear(&mut p, rng, &format!("{prefix}.ffn.fc1"), d, fc1_out);
        if token_prepend {
            zero_linear(&mut p, &format!("{prefix}.ffn.fc2"), hidden, d);
        } else {
            linear(&mut p, rng, &format!("{prefix}.ffn.fc2"), hidden, d);
        }
    }

    for (_, deep) in cfg.skip_pairs() {
        linear(&mut p, rng, &format!("skips.{deep}.proj"), 2 * d, d);
        norm(&mut p, &format!("skips.{deep}.norm"), d);
    }

    if cfg.cond_mode.uses_adaln() {
        p.insert("final.adaln.weight", normal(rng, &[te, 2 * d], MOD_STD));
        p.insert("final.adaln.bias", Tensor::zeros(&[2 * d]));
    } else {
        norm(&mut p, "final.norm", d);
    }
    zero_linear(&mut p, "final.proj", d, cfg.latent_channels);
    Ok(p)
}

/// Adds `N(0, std²)` noise to every tensor, breaking all zero-init contracts.
/// Used to exercise the model away from its identity initialisation.
pub fn perturb_params(params: &mut ParamStore, rng: &mut Rng, std: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += std * rng.normal();
        }
    }
}
