use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::plan::{selector, MaskPlan};
use crate::data::WindowBatch;
use crate::error::{CtError, Result};
use crate::model::{
    build_attention_mask, split_positions, ControlTransformer, ForwardCtx, MaskKind, HEAD_FWD,
    HEAD_INV, HEAD_MASK_INV, HEAD_MASK_STATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Hide everything between the first and last observation and
    /// regress the first action.
    MultistepInverse,
    /// Always use the largest mask sizes.
    MaxFixedMask,
    /// Also regress momentum-encoded targets of masked observations.
    MaskedStatePred,
    /// Also contrast each input token with its own output representation.
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub variant: Option<Variant>,
    /// Draw one mask plan per window instead of one per batch.
    pub per_sample_mask: bool,
    /// Ablation: run the inverse-dynamics term under the plain causal
    /// mask, which lets `o_{t+1}` see `a_t`.
    pub inverse_causal_ablation: bool,
    pub contrastive_temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            variant: None,
            per_sample_mask: false,
            inverse_causal_ablation: false,
            contrastive_temperature: 0.1,
        }
    }
}

/// Scalar values of one evaluation of the pretraining loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_fwd: f64,
    pub l_inv: f64,
    pub l_mask_inv: f64,
    /// Extra term contributed by a variant, zero otherwise.
    pub l_variant: f64,
    pub total: f64,
}

/// Differentiable loss terms; `total` is their unweighted sum.
#[derive(Debug, Clone)]
pub struct PretrainLoss {
    pub fwd: Tensor,
    pub inv: Tensor,
    pub mask_inv: Tensor,
    pub variant: Option<Tensor>,
    pub total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl PretrainLoss {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let l_fwd = scalar(&self.fwd)?;
        let l_inv = scalar(&self.inv)?;
        let l_mask_inv = scalar(&self.mask_inv)?;
        let l_variant = self.variant.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
        Ok(LossBreakdown {
            l_fwd,
            l_inv,
            l_mask_inv,
            l_variant,
            total: l_fwd + l_inv + l_mask_inv + l_variant,
        })
    }
}

/// Model-ready tensors for a window batch. Rewards are never read.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    /// `[B, T, H, W, C]` in `[0, 1]`.
    pub obs: Tensor,
    pub next_obs: Tensor,
    /// `[B, T, A_max]`, zero beyond each task's action dimension.
    pub actions: Tensor,
}

impl BatchTensors {
    pub fn from_batch(model: &ControlTransformer, batch: &WindowBatch) -> Result<Self> {
        let (b, t) = (batch.batch, batch.window);
        let [h, w, c] = model.config().image_shape;
        if (batch.height, batch.width, batch.channels) != (h, w, c) || batch.a_max != model.config().a_max {
            return Err(CtError::Shape(format!(
                "batch of {}x{}x{} images with a_max {} does not fit the model",
                batch.height, batch.width, batch.channels, batch.a_max
            )));
        }
        let images = |bytes: &[u8]| -> Result<Tensor> {
            Ok(model.images_to_tensor(bytes, b * t)?.reshape((b, t, h, w, c))?)
        };
        let actions = Tensor::from_slice(&batch.actions_padded, (b, t, batch.a_max), model.device())?
            .to_dtype(model.dtype())?;
        Ok(Self {
            obs: images(&batch.obs)?,
            next_obs: images(&batch.next_obs)?,
            actions,
        })
    }

    pub fn batch(&self) -> usize {
        self.actions.dim(0).unwrap_or(0)
    }

    pub fn pairs(&self) -> usize {
        self.actions.dim(1).unwrap_or(0)
    }
}

/// Unmasked observation and action tokens, computed once per batch.
struct Tokens {
    obs: Tensor,
    act: Tensor,
}

impl Tokens {
    fn new(model: &ControlTransformer, inputs: &BatchTensors) -> Result<Self> {
        let (b, t, h, w, c) = inputs.obs.dims5()?;
        if [h, w, c] != model.config().image_shape {
            return Err(CtError::Shape(format!("images {:?} do not fit the model", inputs.obs.dims())));
        }
        if inputs.actions.dims3()? != (b, t, model.config().a_max) {
            return Err(CtError::Shape(format!("actions {:?} do not fit the model", inputs.actions.dims())));
        }
        Ok(Self {
            obs: model.tokenize_obs_seq(&inputs.obs)?,
            act: model.tokenize_actions(&inputs.actions)?,
        })
    }
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Momentum-encoded next observations, `[B, T, latent]`, gradient-stopped.
fn forward_targets(model: &ControlTransformer, inputs: &BatchTensors) -> Result<Tensor> {
    let (b, t, h, w, c) = inputs.next_obs.dims5()?;
    let z = model.momentum_encode(&inputs.next_obs.reshape((b * t, h, w, c))?)?;
    Ok(z.reshape((b, t, ()))?)
}

fn forward_term(
    model: &ControlTransformer,
    tokens: &Tokens,
    target: &Tensor,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor, Tensor)> {
    let pairs = tokens.obs.dim(1)?;
    let x = model.interleave(&tokens.obs, &tokens.act)?;
    let phi = model.encode(&x, &build_attention_mask(MaskKind::Causal, pairs)?, ctx)?;
    let (po, pa) = split_positions(&phi)?;
    let pred = model.head(HEAD_FWD, &Tensor::cat(&[&po, &pa], D::Minus1)?)?;
    Ok((mse(&pred, target)?, phi))
}

fn inverse_term(model: &ControlTransformer, tokens: &Tokens, actions: &Tensor, leak: bool, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let pairs = tokens.obs.dim(1)?;
    let kind = if leak { MaskKind::Causal } else { MaskKind::InverseDyn };
    let x = model.interleave(&tokens.obs, &tokens.act)?;
    let phi = model.encode(&x, &build_attention_mask(kind, pairs)?, ctx)?;
    let (po, _) = split_positions(&phi)?;
    let now = po.narrow(1, 0, pairs - 1)?;
    let next = po.narrow(1, 1, pairs - 1)?;
    let pred = model.head(HEAD_INV, &Tensor::cat(&[&now, &next], D::Minus1)?)?;
    mse(&pred, &actions.narrow(1, 0, pairs - 1)?)
}

/// Mean of squared errors over the positions selected by `weights`
/// (`[B or 1, T, 1]` of zeros and ones) and every feature. Zero when
/// nothing is selected.
fn selected_mse(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, _, f) = pred.dims3()?;
    let per_row = if weights.dim(0)? == b { 1.0 } else { b as f64 };
    let count = scalar(&weights.sum_all()?)? * per_row * f as f64;
    let sq = (pred - target)?.sqr()?.broadcast_mul(weights)?.sum_all()?;
    if count == 0.0 {
        return Ok(sq.zeros_like()?);
    }
    Ok((sq / count)?)
}

fn hindsight_pass(
    model: &ControlTransformer,
    tokens: &Tokens,
    plans: &[MaskPlan],
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let (b, pairs, d) = tokens.obs.dims3()?;
    if plans.len() != 1 && plans.len() != b {
        return Err(CtError::Shape(format!("{} mask plans for a batch of {b}", plans.len())));
    }
    for plan in plans {
        if let Some(&i) = plan.action_indices.iter().chain(&plan.obs_indices).find(|&&i| i >= pairs) {
            return Err(CtError::Index { index: i, bound: pairs });
        }
    }
    let dtype = model.dtype();
    let sel_o = selector(plans, pairs, |p| p.obs_indices.clone(), dtype)?;
    let sel_a = selector(plans, pairs, |p| p.hidden_actions(pairs), dtype)?;
    // A masked frame's token is the tokenizer's response to the mask
    // input, so substituting tokens equals substituting inputs.
    let swap = |tok: &Tensor, sel: &Tensor, m: Tensor| -> Result<Tensor> {
        let keep = sel.affine(-1.0, 1.0)?;
        Ok(tok.broadcast_mul(&keep)?.broadcast_add(&sel.broadcast_mul(&m.reshape((1, 1, d))?)?)?)
    };
    let obs = swap(&tokens.obs, &sel_o, model.obs_mask_token()?)?;
    let act = swap(&tokens.act, &sel_a, model.action_mask_token()?)?;
    let x = model.interleave(&obs, &act)?;
    model.encode(&x, &build_attention_mask(MaskKind::HindsightNoncausal, pairs)?, ctx)
}

fn hindsight_term(model: &ControlTransformer, phi: &Tensor, actions: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    let pairs = actions.dim(1)?;
    let (_, pa) = split_positions(phi)?;
    let pred = model.head(HEAD_MASK_INV, &pa)?;
    let w = selector(plans, pairs, |p| p.targets.clone(), model.dtype())?;
    selected_mse(&pred, actions, &w)
}

fn masked_state_term(model: &ControlTransformer, phi: &Tensor, fwd_target: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    let pairs = fwd_target.dim(1)?;
    let (po, _) = split_positions(phi)?;
    let po = po.narrow(1, 1, pairs - 1)?;
    let pred = model.head(HEAD_MASK_STATE, &po)?;
    // Observation i is the next observation of pair i - 1.
    let target = fwd_target.narrow(1, 0, pairs - 1)?;
    let w = selector(plans, pairs, |p| p.obs_indices.clone(), model.dtype())?.narrow(1, 1, pairs - 1)?;
    selected_mse(&pred, &target, &w)
}

/// InfoNCE between each input token and the representation at the same
/// position; every other position in the batch is a negative.
pub fn contrastive_term(tokens: &Tensor, phi: &Tensor, temperature: f64) -> Result<Tensor> {
    let d = tokens.dim(D::Minus1)?;
    let normalize = |x: &Tensor| -> Result<Tensor> {
        let x = x.reshape(((), d))?;
        let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(x.broadcast_div(&norm)?)
    };
    let q = normalize(phi)?;
    let k = normalize(tokens)?;
    let logits = (q.matmul(&k.t()?)? / temperature)?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let n = shifted.dim(0)?;
    let eye = Tensor::eye(n, shifted.dtype(), shifted.device())?;
    let positive = (shifted * eye)?.sum_keepdim(1)?;
    Ok((lse - positive)?.mean_all()?)
}

/// Forward-dynamics loss alone, under the causal mask.
pub fn loss_forward(model: &ControlTransformer, inputs: &BatchTensors, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let tokens = Tokens::new(model, inputs)?;
    let target = forward_targets(model, inputs)?;
    Ok(forward_term(model, &tokens, &target, ctx)?.0)
}

/// Inverse-dynamics loss; `leak` swaps in the causal mask.
pub fn loss_inverse(model: &ControlTransformer, inputs: &BatchTensors, leak: bool, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let tokens = Tokens::new(model, inputs)?;
    inverse_term(model, &tokens, &inputs.actions, leak, ctx)
}

/// Masked hindsight action loss under full visibility.
pub fn loss_hindsight(model: &ControlTransformer, inputs: &BatchTensors, plans: &[MaskPlan], ctx: &mut ForwardCtx) -> Result<Tensor> {
    let tokens = Tokens::new(model, inputs)?;
    let phi = hindsight_pass(model, &tokens, plans, ctx)?;
    hindsight_term(model, &phi, &inputs.actions, plans)
}

/// All three terms from three encoder passes over shared tokens, plus the
/// configured variant term.
pub fn total_pretrain_loss(
    model: &ControlTransformer,
    inputs: &BatchTensors,
    plans: &[MaskPlan],
    cfg: &ObjectiveConfig,
    ctx: &mut ForwardCtx,
) -> Result<PretrainLoss> {
    let tokens = Tokens::new(model, inputs)?;
    let target = forward_targets(model, inputs)?;
    let (fwd, phi_causal) = forward_term(model, &tokens, &target, ctx)?;
    let inv = inverse_term(model, &tokens, &inputs.actions, cfg.inverse_causal_ablation, ctx)?;
    let phi_h = hindsight_pass(model, &tokens, plans, ctx)?;
    let mask_inv = hindsight_term(model, &phi_h, &inputs.actions, plans)?;
    let variant = match cfg.variant {
        Some(Variant::MaskedStatePred) => Some(masked_state_term(model, &phi_h, &target, plans)?),
        Some(Variant::Contrastive) => {
            let x = model.interleave(&tokens.obs, &tokens.act)?;
            Some(contrastive_term(&x, &phi_causal, cfg.contrastive_temperature)?)
        }
        _ => None,
    };
    let mut total = ((&fwd + &inv)? + &mask_inv)?;
    if let Some(v) = &variant {
        total = (total + v)?;
    }
    Ok(PretrainLoss {
        fwd,
        inv,
        mask_inv,
        variant,
        total,
    })
}
