use super::model::{Ctx, StepEmbedding};
use super::CondMode;
use crate::autodiff::Var;
use crate::{Error, Result};

/// Shift, scale and gate vectors (each `[width]`) for the self-attention
/// and feed-forward sub-layers of one block.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub shift1: Var,
    pub scale1: Var,
    pub gate1: Var,
    pub shift2: Var,
    pub scale2: Var,
    pub gate2: Var,
}

/// Modulation of block `block` for the current step.
///
/// - per-block: `Linear_b(SiLU(temb))`
/// - single: `Linear(SiLU(temb)) + offset_b`
/// - SOLA: `Linear(SiLU(temb)) + B_b (A_b SiLU(temb))`
pub fn modulation(ctx: &Ctx<'_>, step: &StepEmbedding, block: usize) -> Result<Modulation> {
    let g = ctx.graph;
    let cfg = ctx.config;
    let six = 6 * cfg.width;
    let raw = match cfg.cond_mode {
        CondMode::TokenPrepend => {
            return Err(Error::InvalidArgument(
                "token_prepend mode has no AdaLN modulation".into(),
            ))
        }
        CondMode::AdalnPerBlock => ctx.linear(step.act, &format!("blocks.{block}.adaln"))?,
        CondMode::AdalnSingle => {
            let shared = step.shared.expect("shared trunk in adaln_single");
            let offset = ctx.p(&format!("blocks.{block}.adaln_offset"))?;
            let offset = g.reshape(offset, &[1, six])?;
            g.add(shared, offset)?
        }
        CondMode::AdalnSola => {
            let shared = step.shared.expect("shared trunk in adaln_sola");
            let down = g.matmul(step.act, ctx.p(&format!("blocks.{block}.sola.down"))?)?;
            let up = g.matmul(down, ctx.p(&format!("blocks.{block}.sola.up"))?)?;
            g.add(shared, up)?
        }
    };
    let flat = g.reshape(raw, &[six])?;
    let parts = g.split(flat, 0, &[cfg.width; 6])?;
    Ok(Modulation {
        shift1: parts[0],
        scale1: parts[1],
        gate1: parts[2],
        shift2: parts[3],
        scale2: parts[4],
        gate2: parts[5],
    })
}
