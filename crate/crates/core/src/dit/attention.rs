//! Multi-head attention with optional RoPE and QK-Norm.

use crate::autodiff::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;
/// Added to the L2 norm before dividing; keeps all-zero rows finite.
pub const QK_NORM_EPS: f64 = 1e-6;

/// Rotary embedding of a `[heads, seq, head_dim]` tensor, row `s` rotated by `positions[s]`.
pub fn rope_apply(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let &[heads, seq, head_dim] = x.shape() else {
        return Err(Error::Shape {
            op: "rope",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0, 0],
        });
    };
    if head_dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("rope: head_dim {head_dim} is odd")));
    }
    let g = Graph::new();
    let mut data = Vec::with_capacity(x.len());
    for h in 0..heads {
        let slice = x.data()[h * seq * head_dim..(h + 1) * seq * head_dim].to_vec();
        let v = g.constant(Tensor::new(&[seq, head_dim], slice)?);
        let r = g.rope(v, positions, ROPE_BASE)?;
        data.extend_from_slice(g.value(r).data());
    }
    Tensor::new(x.shape(), data)
}

/// L2-normalises rows of `q` and `k` and multiplies each by its learnable per-head scale.
pub fn qk_normalize(g: &Graph, q: Var, k: Var, q_scale: Var, k_scale: Var) -> Result<(Var, Var)> {
    let qn = g.l2_normalize_rows(q, QK_NORM_EPS)?;
    let kn = g.l2_normalize_rows(k, QK_NORM_EPS)?;
    Ok((g.mul_scalar(qn, q_scale)?, g.mul_scalar(kn, k_scale)?))
}

/// Per-head options for [`attend_head`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadOptions<'a> {
    /// `(query scale, key scale)` one-element tensors, enabling QK-Norm.
    pub qk_scales: Option<(Var, Var)>,
    /// `(query positions, key positions)` for RoPE.
    pub rope: Option<(&'a [usize], &'a [usize])>,
}

/// Scaled dot-product attention of one head. Returns `(output, probabilities)`.
pub fn attend_head(g: &Graph, q: Var, k: Var, v: Var, opts: HeadOptions<'_>) -> Result<(Var, Var)> {
    let head_dim = *g.shape(q).last().unwrap_or(&1);
    let (mut q, mut k) = (q, k);
    if let Some((qs, ks)) = opts.qk_scales {
        (q, k) = qk_normalize(g, q, k, qs, ks)?;
    }
    if let Some((qp, kp)) = opts.rope {
        q = g.rope(q, qp, ROPE_BASE)?;
        k = g.rope(k, kp, ROPE_BASE)?;
    }
    let logits = g.matmul_bt(q, k)?;
    let logits = g.scale(logits, 1.0 / (head_dim as f64).sqrt())?;
    let probs = g.softmax(logits)?;
    Ok((g.matmul(probs, v)?, probs))
}

/// `x W + b` with `W` stored `[in, out]`.
pub fn linear(g: &Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_row(y, bias)
}

/// Weights of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    /// `[heads]` query and key scales when QK-Norm is on.
    pub qk_scales: Option<(Var, Var)>,
}

/// Multi-head attention from `x_q[seq_q, width]` onto `x_kv[seq_kv, dim_kv]`.
pub fn multi_head_attention(
    g: &Graph,
    w: &AttentionWeights,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    rope: Option<(&[usize], &[usize])>,
) -> Result<Var> {
    let q = linear(g, x_q, w.q.0, w.q.1)?;
    let k = linear(g, x_kv, w.k.0, w.k.1)?;
    let v = linear(g, x_kv, w.v.0, w.v.1)?;
    let width = g.shape(q)[1];
    let hd = width / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * hd, hd)?;
        let kh = g.slice(k, 1, h * hd, hd)?;
        let vh = g.slice(v, 1, h * hd, hd)?;
        let qk_scales = match w.qk_scales {
            Some((qs, ks)) => Some((g.slice(qs, 0, h, 1)?, g.slice(ks, 0, h, 1)?)),
            None => None,
        };
        let (out, _) = attend_head(g, qh, kh, vh, HeadOptions { qk_scales, rope })?;
        outs.push(out);
    }
    let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, merged, w.o.0, w.o.1)
}
