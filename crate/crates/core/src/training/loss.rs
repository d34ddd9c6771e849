use crate::autodiff::{Graph, ParamStore, Rng, Tensor, Var};
use crate::diffusion::{add_noise, v_target, NoiseSchedule};
use crate::dit::{Ctx, DitModel, ModelInput};
use crate::parallel::{self, Exec};
use crate::{Error, Result};

/// One fully drawn training example: all randomness is fixed up front so
/// the loss is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Tensor,
    /// `true` = noised frame. `None` noises every frame.
    pub mask: Option<Vec<bool>>,
    pub text: Vec<usize>,
    pub t: usize,
    pub eps: Tensor,
}

fn draw_noise(schedule: &NoiseSchedule, x0: &Tensor, rng: &mut Rng) -> Result<(usize, Tensor)> {
    let t = rng.below(schedule.len());
    let eps = Tensor::new(x0.shape(), rng.normal_vec(x0.len()))?;
    Ok((t, eps))
}

/// Masked-modeling example without text.
pub fn draw_masked(schedule: &NoiseSchedule, x0: &Tensor, mask: Vec<bool>, rng: &mut Rng) -> Result<Example> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("mask has no noised frames".into()));
    }
    let (t, eps) = draw_noise(schedule, x0, rng)?;
    Ok(Example {
        x0: x0.clone(),
        mask: Some(mask),
        text: Vec::new(),
        t,
        eps,
    })
}

/// Text-conditioned example; the text is dropped with probability `text_drop_prob`.
pub fn draw_conditional(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    text: &[usize],
    text_drop_prob: f64,
    mask: Option<Vec<bool>>,
    rng: &mut Rng,
) -> Result<Example> {
    let dropped = rng.bernoulli(text_drop_prob);
    let (t, eps) = draw_noise(schedule, x0, rng)?;
    Ok(Example {
        x0: x0.clone(),
        mask,
        text: if dropped { Vec::new() } else { text.to_vec() },
        t,
        eps,
    })
}

/// Mean squared velocity error over the noised frames (and all channels).
///
/// Clean frames enter the model as `x0`, noised frames as `x_t`, and the
/// model also sees the mask through its indicator channel.
pub fn example_loss(ctx: &Ctx<'_>, schedule: &NoiseSchedule, ex: &Example) -> Result<Var> {
    let g = ctx.graph;
    let (channels, frames) = ex.x0.dims2("example_loss")?;
    let x_t = add_noise(schedule, &ex.x0, &ex.eps, ex.t)?;
    let target = v_target(schedule, &ex.x0, &ex.eps, ex.t)?;
    let noised = |f: usize| ex.mask.as_ref().map_or(true, |m| m[f]);
    let count = (0..frames).filter(|&f| noised(f)).count();
    if count == 0 {
        return Err(Error::InvalidArgument("mask has no noised frames".into()));
    }
    let latent = Tensor::from_fn(&[channels, frames], |i| {
        if noised(i % frames) {
            x_t.data()[i]
        } else {
            ex.x0.data()[i]
        }
    });
    let v_hat = DitModel::forward(
        ctx,
        &ModelInput {
            latent: &latent,
            mask: ex.mask.as_deref(),
            t: ex.t,
            text: &ex.text,
        },
    )?;
    let weight = 1.0 / (count * channels) as f64;
    let w = Tensor::from_fn(&[channels, frames], |i| if noised(i % frames) { weight } else { 0.0 });
    let diff = g.sub(v_hat, g.constant(target))?;
    let sq = g.mul(diff, diff)?;
    g.sum(g.mul(sq, g.constant(w))?)
}

fn eval_loss(model: &DitModel, schedule: &NoiseSchedule, ex: &Example) -> Result<f64> {
    let g = Graph::new();
    let b = model.params.bind(&g);
    let ctx = Ctx::new(&g, &b, &model.config);
    let loss = example_loss(&ctx, schedule, ex)?;
    Ok(g.value(loss).item())
}

/// Stage-1 loss for one sample: draws `t` and noise, reconstructs masked frames.
pub fn masked_diffusion_loss(
    model: &DitModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    mask: &[bool],
    rng: &mut Rng,
) -> Result<f64> {
    let ex = draw_masked(schedule, x0, mask.to_vec(), rng)?;
    eval_loss(model, schedule, &ex)
}

/// Stage-2/3 loss for one sample: full-sequence v-loss with prompt dropout.
pub fn conditional_loss(
    model: &DitModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    text: &[usize],
    text_drop_prob: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let ex = draw_conditional(schedule, x0, text, text_drop_prob, None, rng)?;
    eval_loss(model, schedule, &ex)
}

/// Mean loss and mean gradient over `batch`.
///
/// Per-example gradients may be computed in parallel; they are summed in
/// batch order, so the result does not depend on `exec`.
pub fn batch_loss_and_grads(
    model: &DitModel,
    schedule: &NoiseSchedule,
    batch: &[Example],
    exec: Exec,
) -> Result<(f64, ParamStore)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per = parallel::try_map_indexed(exec, batch.len(), |i| {
        let g = Graph::new();
        let b = model.params.bind(&g);
        let ctx = Ctx::new(&g, &b, &model.config);
        let loss = example_loss(&ctx, schedule, &batch[i])?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        Ok::<_, Error>((value, b.grads(&g, &model.params)))
    })?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = model.params.zeros_like();
    for (loss, g) in &per {
        total += loss;
        grads.accumulate(g);
    }
    for (_, t) in grads.iter_mut() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok((total / n, grads))
}
