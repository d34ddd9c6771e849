use serde::Serialize;

use super::{CondMode, ModelConfig};

/// Group name of a parameter tensor, used for itemised counts.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("t_embed.") {
        "time_embed"
    } else if name.starts_with("input_proj.") {
        "input_proj"
    } else if name.starts_with("text_embed.") {
        "text_embed"
    } else if name.starts_with("adaln_shared.")
        || name.starts_with("step_token.")
        || name.starts_with("final.adaln.")
        || name.contains(".adaln")
        || name.contains(".sola.")
    {
        "modulation"
    } else if name.contains(".attn.") || name.contains(".norm1.") {
        "self_attn"
    } else if name.contains(".cross") {
        "cross_attn"
    } else if name.contains(".ffn.") || name.contains(".norm2.") {
        "ffn"
    } else if name.starts_with("skips.") {
        "long_skip"
    } else {
        "final"
    }
}

/// Itemised parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamTable {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamTable {
    pub fn group(&self, name: &str) -> usize {
        self.groups.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c)
    }
}

/// Training-memory estimate in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    /// Weights, gradients and two AdamW moments.
    pub param_bytes: u64,
    /// Saved forward activations for the whole batch.
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

/// Exact parameter counts of [`super::init_params`] for `cfg`, computed analytically.
pub fn count_params(cfg: &ModelConfig) -> ParamTable {
    let d = cfg.width;
    let te = cfg.time_embed_dim;
    let n = cfg.num_blocks;
    let hidden = cfg.mlp_hidden();
    let fc1_out = if cfg.ffn_glu { 2 * hidden } else { hidden };
    let qk = if cfg.use_qk_norm { 2 * cfg.num_heads } else { 0 };
    let prepend = cfg.cond_mode == CondMode::TokenPrepend;
    let adaln_head = te * 6 * d + 6 * d;
    let final_adaln = te * 2 * d + 2 * d;

    let modulation = match cfg.cond_mode {
        CondMode::AdalnPerBlock => n * adaln_head + final_adaln,
        CondMode::AdalnSingle => adaln_head + n * 6 * d + final_adaln,
        CondMode::AdalnSola => adaln_head + n * (te * cfg.sola_rank + cfg.sola_rank * 6 * d) + final_adaln,
        CondMode::TokenPrepend => te * d + d,
    };
    let self_attn = n * (4 * (d * d + d) + qk + if prepend { 2 * d } else { 0 });
    let cross_attn = if cfg.cross_attention {
        n * (2 * (d * d + d) + 2 * (cfg.text_dim * d + d) + qk + 2 * d)
    } else {
        0
    };
    let ffn = n * (d * fc1_out + fc1_out + hidden * d + d + if prepend { 2 * d } else { 0 });
    let long_skip = cfg.skip_pairs().len() * (2 * d * d + d + 2 * d);
    let final_ = d * cfg.latent_channels + cfg.latent_channels + if prepend { 2 * d } else { 0 };

    let groups = vec![
        ("time_embed".to_string(), 2 * (te * te + te)),
        ("input_proj".to_string(), cfg.input_channels() * d + d),
        ("text_embed".to_string(), cfg.text_vocab * cfg.text_dim),
        ("modulation".to_string(), modulation),
        ("self_attn".to_string(), self_attn),
        ("cross_attn".to_string(), cross_attn),
        ("ffn".to_string(), ffn),
        ("long_skip".to_string(), long_skip),
        ("final".to_string(), final_),
    ];
    let total = groups.iter().map(|(_, c)| c).sum();
    ParamTable { groups, total }
}

/// Bytes per stored activation (16-bit mixed-precision training).
pub const ACTIVATION_BYTES: u64 = 2;

impl ParamTable {
    /// Estimate for training `cfg` at `batch` sequences of `frames` latent
    /// frames with `text_len` text tokens.
    ///
    /// Parameters, gradients and both optimizer moments are fp32. Activations
    /// count the tensors a memory-efficient training step keeps for backward:
    /// linear-layer inputs, norm inputs and outputs, gated branch outputs and
    /// feed-forward hidden states. Attention uses a fused kernel that keeps
    /// its inputs, output and one log-sum-exp per row, never the `s x s` map.
    pub fn memory_estimate(&self, cfg: &ModelConfig, batch: usize, frames: usize, text_len: usize) -> MemoryEstimate {
        let d = cfg.width as u64;
        let heads = cfg.num_heads as u64;
        let hidden = cfg.mlp_hidden() as u64;
        let s = frames as u64 + u64::from(cfg.cond_mode == CondMode::TokenPrepend);
        let l = text_len.max(1) as u64;
        let adaln = cfg.cond_mode.uses_adaln();
        let qk = cfg.use_qk_norm;

        // Norm input and output, plus the modulated copy in AdaLN modes.
        let norm = if adaln { 3 * s * d } else { 2 * s * d };
        let gate = if adaln { s * d } else { 0 };
        let self_attn = norm + 3 * s * d + if qk { 2 * s * d } else { 0 } + s * d + heads * s + gate;
        let cross = if cfg.cross_attention {
            2 * s * d + s * d + 2 * l * d + if qk { (s + l) * d } else { 0 } + s * d + heads * s
        } else {
            0
        };
        let ffn = norm + if cfg.ffn_glu { 4 * s * hidden } else { 2 * s * hidden } + gate;
        let per_block = self_attn + cross + ffn;
        let skips = cfg.skip_pairs().len() as u64 * 3 * s * d;
        let io = s * cfg.input_channels() as u64 + 2 * s * d + s * cfg.latent_channels as u64;
        let floats = cfg.num_blocks as u64 * per_block + skips + io;

        let param_bytes = self.total as u64 * 16;
        let activation_bytes = batch as u64 * floats * ACTIVATION_BYTES;
        MemoryEstimate {
            param_bytes,
            activation_bytes,
            total_bytes: param_bytes + activation_bytes,
        }
    }
}
