use super::attention::{linear, AttentionWeights};
use super::block::{dit_block_forward, long_skip_fuse, LN_EPS};
use super::init::{init_cross_attention, init_params};
use super::ModelConfig;
use crate::autodiff::{sinusoidal_embedding, sinusoidal_positions, Bindings, Graph, ParamStore, Rng, Tensor, Var};
use crate::{Error, Result};

/// Graph, bound parameters and configuration for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    pub params: &'a Bindings,
    pub config: &'a ModelConfig,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a Graph, params: &'a Bindings, config: &'a ModelConfig) -> Self {
        Self { graph, params, config }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    pub fn linear(&self, x: Var, prefix: &str) -> Result<Var> {
        linear(
            self.graph,
            x,
            self.p(&format!("{prefix}.weight"))?,
            self.p(&format!("{prefix}.bias"))?,
        )
    }

    /// Layer norm with the learnable `{prefix}.scale` / `{prefix}.shift`.
    pub fn layer_norm(&self, x: Var, prefix: &str) -> Result<Var> {
        self.graph.layer_norm(
            x,
            self.p(&format!("{prefix}.scale"))?,
            self.p(&format!("{prefix}.shift"))?,
            LN_EPS,
        )
    }

    pub fn attention_weights(&self, prefix: &str) -> Result<AttentionWeights> {
        let wb = |n: &str| -> Result<(Var, Var)> {
            Ok((
                self.p(&format!("{prefix}.{n}.weight"))?,
                self.p(&format!("{prefix}.{n}.bias"))?,
            ))
        };
        let qk_scales = if self.config.use_qk_norm {
            Some((self.p(&format!("{prefix}.q_scale"))?, self.p(&format!("{prefix}.k_scale"))?))
        } else {
            None
        };
        Ok(AttentionWeights {
            q: wb("q")?,
            k: wb("k")?,
            v: wb("v")?,
            o: wb("o")?,
            qk_scales,
        })
    }
}

/// Diffusion-step conditioning shared by all blocks of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StepEmbedding {
    /// Timestep MLP output, `[1, time_embed_dim]`.
    pub temb: Var,
    /// `SiLU(temb)`, the input of every AdaLN head.
    pub act: Var,
    /// Shared AdaLN trunk output `[1, 6 width]` (single and SOLA modes).
    pub shared: Option<Var>,
    /// Step token `[1, width]` (token-prepend mode).
    pub token: Option<Var>,
}

impl StepEmbedding {
    pub fn new(ctx: &Ctx<'_>, t: usize) -> Result<Self> {
        let g = ctx.graph;
        let cfg = ctx.config;
        let sin = sinusoidal_embedding(t as f64, cfg.time_embed_dim);
        let sin = g.constant(sin.reshape(&[1, cfg.time_embed_dim])?);
        let h = ctx.linear(sin, "t_embed.fc1")?;
        let h = g.silu(h)?;
        let temb = ctx.linear(h, "t_embed.fc2")?;
        let act = g.silu(temb)?;
        let shared = match cfg.cond_mode {
            super::CondMode::AdalnSingle | super::CondMode::AdalnSola => Some(ctx.linear(act, "adaln_shared")?),
            _ => None,
        };
        let token = match cfg.cond_mode {
            super::CondMode::TokenPrepend => Some(ctx.linear(act, "step_token")?),
            _ => None,
        };
        Ok(Self {
            temb,
            act,
            shared,
            token,
        })
    }
}

/// One model evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// Noisy (or partially clean) latent `[channels, frames]`.
    pub latent: &'a Tensor,
    /// Per-frame indicator: `true` where the frame carries diffusion noise.
    /// `None` means every frame is noised.
    pub mask: Option<&'a [bool]>,
    pub t: usize,
    /// Text tokens; empty selects the null token.
    pub text: &'a [usize],
}

/// Model parameters together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DitModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl DitModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Velocity estimate `[channels, frames]` recorded on `ctx.graph`.
    pub fn forward(ctx: &Ctx<'_>, input: &ModelInput<'_>) -> Result<Var> {
        let latent = ctx.graph.constant(input.latent.clone());
        Self::forward_from(ctx, latent, input)
    }

    /// Like [`Self::forward`] but reads the latent from the recorded `latent`
    /// node (whose value must equal `input.latent`), so gradients can flow
    /// back into the model input.
    pub fn forward_from(ctx: &Ctx<'_>, latent: Var, input: &ModelInput<'_>) -> Result<Var> {
        let g = ctx.graph;
        let cfg = ctx.config;
        let (channels, frames) = input.latent.dims2("model_forward")?;
        if channels != cfg.latent_channels || frames == 0 || g.shape(latent) != input.latent.shape() {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: input.latent.shape().to_vec(),
                rhs: vec![cfg.latent_channels, frames.max(1)],
            });
        }
        if let Some(mask) = input.mask {
            if mask.len() != frames {
                return Err(Error::Shape {
                    op: "model_forward",
                    lhs: vec![frames],
                    rhs: vec![mask.len()],
                });
            }
        }

        let indicator: Vec<f64> = (0..frames)
            .map(|f| if input.mask.map_or(true, |m| m[f]) { 1.0 } else { 0.0 })
            .collect();
        let indicator = g.constant(Tensor::new(&[frames, 1], indicator)?);
        let x = g.concat(&[g.transpose(latent)?, indicator], 1)?;
        let mut h = ctx.linear(x, "input_proj")?;
        if !cfg.use_rope {
            let pos = g.constant(sinusoidal_positions(frames, cfg.width));
            h = g.add(h, pos)?;
        }

        let step = StepEmbedding::new(ctx, input.t)?;
        let text = if cfg.cross_attention {
            let null = [cfg.null_token()];
            let ids = if input.text.is_empty() { &null[..] } else { input.text };
            Some(g.gather_rows(ctx.p("text_embed.table")?, ids)?)
        } else {
            None
        };

        let positions: Vec<usize> = (0..frames).collect();
        let pairs = cfg.skip_pairs();
        let mut stored: Vec<Option<Var>> = vec![None; cfg.num_blocks];
        for i in 0..cfg.num_blocks {
            let wrap = |e: Error| Error::Block {
                block: i,
                source: Box::new(e),
            };
            if let Some(&(shallow, _)) = pairs.iter().find(|&&(_, deep)| deep == i) {
                let skip = stored[shallow].expect("shallow block runs first");
                h = long_skip_fuse(ctx, h, skip, i).map_err(wrap)?;
            }
            h = dit_block_forward(ctx, h, &step, text, i, &positions).map_err(wrap)?;
            if pairs.iter().any(|&(shallow, _)| shallow == i) {
                stored[i] = Some(h);
            }
        }

        let h = if cfg.cond_mode.uses_adaln() {
            let m = ctx.linear(step.act, "final.adaln")?;
            let m = g.reshape(m, &[2 * cfg.width])?;
            let parts = g.split(m, 0, &[cfg.width, cfg.width])?;
            let n = g.layer_norm_rows(h, LN_EPS)?;
            let s = g.add_scalar(parts[1], 1.0)?;
            let n = g.mul_row(n, s)?;
            g.add_row(n, parts[0])?
        } else {
            ctx.layer_norm(h, "final.norm")?
        };
        let out = ctx.linear(h, "final.proj")?;
        g.transpose(out)
    }

    /// Evaluates the model without keeping the graph.
    pub fn predict(&self, input: &ModelInput<'_>) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.params.bind(&g);
        let ctx = Ctx::new(&g, &b, &self.config);
        let v = Self::forward(&ctx, input)?;
        Ok((*g.value(v)).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}

/// Adds text cross-attention to every block of a model trained without it.
///
/// Existing tensors are copied bitwise; new cross-attention weights use the
/// usual initialisation with a zero output projection, so the grafted model
/// initially computes exactly what the source model did.
pub fn graft_cross_attention(source: &DitModel, rng: &mut Rng) -> Result<DitModel> {
    let config = source.config.with_cross_attention();
    config.validate()?;
    let reference = init_params(&source.config, &mut Rng::new(0))?;
    let mut mismatched: Vec<String> = Vec::new();
    for (name, t) in reference.iter() {
        match source.params.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => mismatched.push(format!("{name}: expected {:?}, found {:?}", t.shape(), s.shape())),
            None => mismatched.push(format!("{name}: missing")),
        }
    }
    for name in source.params.names() {
        if !reference.contains(name) {
            mismatched.push(format!("{name}: unexpected"));
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Incompatible(mismatched));
    }
    let mut params = source.params.clone();
    init_cross_attention(&config, &mut params, rng);
    Ok(DitModel { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{CondMode, Scale, Variant};

    fn small(variant: Variant) -> ModelConfig {
        let mut c = variant.apply(&Scale::Toy.config());
        c.num_blocks = 2;
        c.width = 32;
        c.time_embed_dim = 32;
        c.sola_rank = 4;
        c
    }

    fn latent(rng: &mut Rng, c: usize, f: usize) -> Tensor {
        Tensor::new(&[c, f], rng.normal_vec(c * f)).unwrap()
    }

    #[test]
    fn init_output_is_zero_for_every_variant() {
        for v in Variant::ALL {
            let cfg = small(v);
            let mut rng = Rng::new(3);
            let model = DitModel::new(cfg.clone(), &mut rng).unwrap();
            let x = latent(&mut rng, cfg.latent_channels, 12);
            for (t, text) in [(0usize, &[][..]), (500, &[2usize][..]), (999, &[1, 4][..])] {
                let out = model
                    .predict(&ModelInput {
                        latent: &x,
                        mask: None,
                        t,
                        text,
                    })
                    .unwrap();
                assert_eq!(out.shape(), &[cfg.latent_channels, 12]);
                assert!(out.data().iter().all(|&v| v == 0.0), "{v}");
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let cfg = small(Variant::EzaudioDit);
        let model = DitModel::new(cfg, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[3, 8]);
        let r = model.predict(&ModelInput {
            latent: &x,
            mask: None,
            t: 0,
            text: &[],
        });
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn graft_rejects_incompatible_checkpoints() {
        let mut cfg = small(Variant::EzaudioDit);
        cfg.cross_attention = false;
        let mut model = DitModel::new(cfg, &mut Rng::new(0)).unwrap();
        model.params.insert("input_proj.weight", Tensor::zeros(&[2, 2]));
        match graft_cross_attention(&model, &mut Rng::new(1)) {
            Err(Error::Incompatible(list)) => assert!(list[0].starts_with("input_proj.weight")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn token_prepend_has_no_modulation() {
        let cfg = small(Variant::StableAudioDit);
        assert_eq!(cfg.cond_mode, CondMode::TokenPrepend);
        let model = DitModel::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let g = Graph::new();
        let b = model.params.bind(&g);
        let ctx = Ctx::new(&g, &b, &cfg);
        let step = StepEmbedding::new(&ctx, 10).unwrap();
        assert!(crate::dit::modulation(&ctx, &step, 0).is_err());
    }
}
