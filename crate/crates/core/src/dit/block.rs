use super::attention::multi_head_attention;
use super::model::{Ctx, StepEmbedding};
use super::modulation::modulation;
use crate::autodiff::Var;
use crate::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// `h * (1 + scale) + shift`.
fn modulate(ctx: &Ctx<'_>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let g = ctx.graph;
    let s = g.add_scalar(scale, 1.0)?;
    let h = g.mul_row(h, s)?;
    g.add_row(h, shift)
}

fn feed_forward(ctx: &Ctx<'_>, h: Var, prefix: &str) -> Result<Var> {
    let g = ctx.graph;
    let hidden = ctx.linear(h, &format!("{prefix}.fc1"))?;
    let act = if ctx.config.ffn_glu {
        let n = ctx.config.mlp_hidden();
        let halves = g.split(hidden, 1, &[n, n])?;
        let gate = g.gelu(halves[1])?;
        g.mul(halves[0], gate)?
    } else {
        g.gelu(hidden)?
    };
    ctx.linear(act, &format!("{prefix}.fc2"))
}

/// One DiT block on `x[seq, width]`.
///
/// Sub-layer order is modulated self-attention, plain-residual
/// cross-attention onto `text[text_len, text_dim]`, modulated feed-forward:
///
/// ```text
/// y = x + gate1 * SelfAttn(mod(LN(x); shift1, scale1))
/// y = y + CrossAttn(LN(y), text)
/// y = y + gate2 * FFN(mod(LN(y); shift2, scale2))
/// ```
///
/// In token-prepend mode the step token is prepended before the block and
/// stripped after it, and the sub-layers use affine layer norms without
/// modulation or gates. `positions` are the RoPE positions of the rows of `x`.
pub fn dit_block_forward(
    ctx: &Ctx<'_>,
    x: Var,
    step: &StepEmbedding,
    text: Option<Var>,
    block: usize,
    positions: &[usize],
) -> Result<Var> {
    let g = ctx.graph;
    let cfg = ctx.config;
    let seq = g.shape(x)[0];
    let prefix = format!("blocks.{block}");
    let heads = cfg.num_heads;

    let (x_in, positions): (Var, Vec<usize>) = match step.token {
        Some(tok) => (
            g.concat(&[tok, x], 0)?,
            std::iter::once(0).chain(positions.iter().map(|p| p + 1)).collect(),
        ),
        None => (x, positions.to_vec()),
    };
    let rope = cfg.use_rope.then_some((&positions[..], &positions[..]));
    let self_w = ctx.attention_weights(&format!("{prefix}.attn"))?;

    let m = if cfg.cond_mode.uses_adaln() {
        Some(modulation(ctx, step, block)?)
    } else {
        None
    };

    let mut y = match &m {
        Some(m) => {
            let h = g.layer_norm_rows(x_in, LN_EPS)?;
            let h = modulate(ctx, h, m.shift1, m.scale1)?;
            let a = multi_head_attention(g, &self_w, h, h, heads, rope)?;
            let a = g.mul_row(a, m.gate1)?;
            g.add(x_in, a)?
        }
        None => {
            let h = ctx.layer_norm(x_in, &format!("{prefix}.norm1"))?;
            let a = multi_head_attention(g, &self_w, h, h, heads, rope)?;
            g.add(x_in, a)?
        }
    };

    if cfg.cross_attention {
        let text = text.ok_or_else(|| Error::InvalidArgument("cross-attention block needs a text embedding".into()))?;
        let cross_w = ctx.attention_weights(&format!("{prefix}.cross"))?;
        let h = ctx.layer_norm(y, &format!("{prefix}.cross_norm"))?;
        let a = multi_head_attention(g, &cross_w, h, text, heads, None)?;
        y = g.add(y, a)?;
    }

    y = match &m {
        Some(m) => {
            let h = g.layer_norm_rows(y, LN_EPS)?;
            let h = modulate(ctx, h, m.shift2, m.scale2)?;
            let f = feed_forward(ctx, h, &format!("{prefix}.ffn"))?;
            let f = g.mul_row(f, m.gate2)?;
            g.add(y, f)?
        }
        None => {
            let h = ctx.layer_norm(y, &format!("{prefix}.norm2"))?;
            let f = feed_forward(ctx, h, &format!("{prefix}.ffn"))?;
            g.add(y, f)?
        }
    };

    if step.token.is_some() {
        y = g.slice(y, 0, 1, seq)?;
    }
    Ok(y)
}

/// `LayerNorm(Linear(concat(deep, shallow)))` for the skip entering block `block`.
pub fn long_skip_fuse(ctx: &Ctx<'_>, deep: Var, shallow: Var, block: usize) -> Result<Var> {
    let g = ctx.graph;
    let (ds, ss) = (g.shape(deep), g.shape(shallow));
    if ds != ss {
        return Err(Error::Shape {
            op: "long_skip_fuse",
            lhs: ds,
            rhs: ss,
        });
    }
    let cat = g.concat(&[deep, shallow], 1)?;
    let h = ctx.linear(cat, &format!("skips.{block}.proj"))?;
    ctx.layer_norm(h, &format!("skips.{block}.norm"))
}
