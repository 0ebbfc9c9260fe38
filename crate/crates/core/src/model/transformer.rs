use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::conv::conv3x3_s2;
use super::mask::AttentionMask;
use super::params::{Init, ParamStore};
use crate::error::{CtError, Result};

pub const OBS_TOK: &str = "obs_tok.";
pub const MOMENTUM: &str = "momentum.";
pub const ACT_TOK: &str = "act_tok.";
pub const RTG_TOK: &str = "rtg_tok.";
pub const POS_EMB: &str = "pos_emb";
pub const BLOCKS: &str = "blocks.";
pub const LN_F: &str = "ln_f.";
pub const MASK_EMB: &str = "mask_emb.";
pub const HEAD_FWD: &str = "head.fwd.";
pub const HEAD_INV: &str = "head.inv.";
pub const HEAD_MASK_INV: &str = "head.mask_inv.";
pub const HEAD_MASK_STATE: &str = "head.mask_state.";
pub const HEAD_BC: &str = "head.bc.";
pub const HEAD_RTG: &str = "head.rtg.";

const PRETRAIN_HEADS: [&str; 4] = [HEAD_FWD, HEAD_INV, HEAD_MASK_INV, HEAD_MASK_STATE];
const LN_EPS: f64 = 1e-5;

/// Parameters shared by every objective: tokenizers, positions, blocks.
pub fn is_backbone(name: &str) -> bool {
    [OBS_TOK, ACT_TOK, POS_EMB, BLOCKS, LN_F, MASK_EMB]
        .iter()
        .any(|p| name.starts_with(p))
}

pub fn is_momentum(name: &str) -> bool {
    name.starts_with(MOMENTUM)
}

/// Matrices and kernels get weight decay; biases, norms and embeddings don't.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyHead {
    Bc,
    Rtg,
}

impl PolicyHead {
    pub fn prefix(self) -> &'static str {
        match self {
            PolicyHead::Bc => HEAD_BC,
            PolicyHead::Rtg => HEAD_RTG,
        }
    }
}

/// Dropout state for one forward pass. `eval()` disables dropout.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some() && self.p > 0.0
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.p;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x.clone());
        };
        let keep = (1.0 / (1.0 - p)) as f32;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// GPT-style encoder over interleaved observation/action tokens, plus
/// tokenizers, an EMA copy of the observation tokenizer, and heads.
#[derive(Debug, Clone)]
pub struct ControlTransformer {
    cfg: ModelConfig,
    params: ParamStore,
}

impl ControlTransformer {
    /// Fresh model with the pretraining heads. Every tensor is drawn from
    /// a stream keyed by `(seed, name)`.
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut model = Self {
            params: ParamStore::new(dtype, Device::Cpu),
            cfg,
        };
        model.init_obs_tokenizer(seed)?;
        model.init_action_tokenizer(seed)?;
        let (d, n) = (model.cfg.d_embed, model.cfg.seq_len());
        model.params.init(POS_EMB, &[n, d], Init::Normal(0.02), seed)?;
        for i in 0..model.cfg.n_layers {
            model.init_block(i, seed)?;
        }
        model.init_layer_norm(LN_F, seed)?;
        if model.cfg.learned_mask_embedding {
            model.params.init(&format!("{MASK_EMB}obs"), &[d], Init::Normal(0.02), seed)?;
            model.params.init(&format!("{MASK_EMB}act"), &[d], Init::Normal(0.02), seed)?;
        }
        let latent = model.cfg.latent();
        let a = model.cfg.a_max;
        model.init_linear(HEAD_FWD, 2 * d, latent, seed)?;
        model.init_linear(HEAD_INV, 2 * d, a, seed)?;
        model.init_linear(HEAD_MASK_INV, d, a, seed)?;
        model.reset_momentum()?;
        Ok(model)
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.to_dtype(dtype)?,
        })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.deep_clone()?,
        })
    }

    fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
        self.init_linear_std(prefix, fan_in, fan_out, 0.02, seed)
    }

    fn init_linear_std(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        seed: u64,
    ) -> Result<()> {
        self.params
            .init(&format!("{prefix}weight"), &[fan_out, fan_in], Init::Normal(std), seed)?;
        self.params
            .init(&format!("{prefix}bias"), &[fan_out], Init::Zeros, seed)
    }

    fn init_layer_norm(&mut self, prefix: &str, seed: u64) -> Result<()> {
        let d = self.cfg.d_embed;
        self.params.init(&format!("{prefix}gamma"), &[d], Init::Ones, seed)?;
        self.params.init(&format!("{prefix}beta"), &[d], Init::Zeros, seed)
    }

    fn init_obs_tokenizer(&mut self, seed: u64) -> Result<()> {
        let mut c_in = self.cfg.image_shape[2];
        for (i, &c_out) in self.cfg.conv_channels.clone().iter().enumerate() {
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            self.params.init(
                &format!("{OBS_TOK}conv{i}.weight"),
                &[c_out, c_in, 3, 3],
                Init::Uniform(bound),
                seed,
            )?;
            self.params
                .init(&format!("{OBS_TOK}conv{i}.bias"), &[c_out], Init::Uniform(bound), seed)?;
            c_in = c_out;
        }
        let flat = self.cfg.conv_flat();
        let d = self.cfg.d_embed;
        self.init_linear(&format!("{OBS_TOK}proj."), flat, d, seed)
    }

    pub(crate) fn init_action_tokenizer(&mut self, seed: u64) -> Result<()> {
        self.init_linear(ACT_TOK, self.cfg.a_max, self.cfg.d_embed, seed)
    }

    fn init_block(&mut self, i: usize, seed: u64) -> Result<()> {
        let d = self.cfg.d_embed;
        let p = format!("{BLOCKS}{i}.");
        let proj_std = 0.02 / (2.0 * self.cfg.n_layers as f64).sqrt();
        self.init_layer_norm(&format!("{p}ln1."), seed)?;
        self.init_linear(&format!("{p}attn.qkv."), d, 3 * d, seed)?;
        self.init_linear_std(&format!("{p}attn.proj."), d, d, proj_std, seed)?;
        self.init_layer_norm(&format!("{p}ln2."), seed)?;
        self.init_linear(&format!("{p}mlp.fc."), d, 4 * d, seed)?;
        self.init_linear_std(&format!("{p}mlp.proj."), 4 * d, d, proj_std, seed)
    }

    /// Copies the live observation tokenizer into the momentum encoder.
    pub fn reset_momentum(&mut self) -> Result<()> {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with(OBS_TOK))
            .map(str::to_string)
            .collect();
        for n in names {
            let var = self.params.get(&n)?;
            let shape = var.dims().to_vec();
            let vals = self.params.values(&n)?;
            self.params.insert_values(&format!("{MOMENTUM}{n}"), &shape, vals)?;
        }
        Ok(())
    }

    /// Adds the extra head used by the masked-state-prediction variant.
    pub fn add_mask_state_head(&mut self, seed: u64) -> Result<()> {
        let (d, latent) = (self.cfg.d_embed, self.cfg.latent());
        self.init_linear(HEAD_MASK_STATE, d, latent, seed)
    }

    pub fn has_pretraining_heads(&self) -> bool {
        self.params.has_prefix(HEAD_FWD)
    }

    pub fn remove_pretraining_heads(&mut self) {
        for p in PRETRAIN_HEADS {
            self.params.remove_prefix(p);
        }
    }

    pub fn has_head(&self, head: PolicyHead) -> bool {
        self.params.has_prefix(head.prefix())
    }

    /// (Re)initializes a policy head; the RTG head also owns the return
    /// tokenizer.
    pub fn add_policy_head(&mut self, head: PolicyHead, seed: u64) -> Result<()> {
        let (d, a) = (self.cfg.d_embed, self.cfg.a_max);
        match head {
            PolicyHead::Bc => self.init_linear(HEAD_BC, d, a, seed),
            PolicyHead::Rtg => {
                self.init_linear(RTG_TOK, 1, d, seed)?;
                self.init_linear(HEAD_RTG, 2 * d, a, seed)
            }
        }
    }

    /// Re-initializes the action tokenizer and any head that emits actions.
    pub fn reinit_action_interfaces(&mut self, seed: u64) -> Result<()> {
        let (d, a) = (self.cfg.d_embed, self.cfg.a_max);
        self.init_action_tokenizer(seed)?;
        if self.params.has_prefix(HEAD_INV) {
            self.init_linear(HEAD_INV, 2 * d, a, seed)?;
        }
        if self.params.has_prefix(HEAD_MASK_INV) {
            self.init_linear(HEAD_MASK_INV, d, a, seed)?;
        }
        for head in [PolicyHead::Bc, PolicyHead::Rtg] {
            if self.has_head(head) {
                self.add_policy_head(head, seed)?;
            }
        }
        Ok(())
    }

    /// `momentum <- tau * momentum + (1 - tau) * live`, elementwise.
    pub fn update_momentum(&self, tau: f64) -> Result<()> {
        for (name, var) in self.params.iter().filter(|(n, _)| n.starts_with(OBS_TOK)) {
            let target = self.params.get(&format!("{MOMENTUM}{name}"))?;
            let next = (target.as_tensor().affine(tau, 0.0)? + var.as_tensor().affine(1.0 - tau, 0.0)?)?;
            target.set(&next)?;
        }
        Ok(())
    }

    // ---- primitive layers ----

    pub(crate) fn linear(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.params.tensor(&format!("{prefix}weight"))?;
        let b = self.params.tensor(&format!("{prefix}bias"))?;
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().unwrap();
        let rows = x.elem_count() / fan_in;
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&w.t()?)?
            .broadcast_add(&b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let gamma = self.params.tensor(&format!("{prefix}gamma"))?;
        let beta = self.params.tensor(&format!("{prefix}beta"))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    // ---- tokenizers ----

    /// Converts `[N, H, W, C]` bytes to a channels-last tensor in `[0, 1]`.
    pub fn images_to_tensor(&self, bytes: &[u8], n: usize) -> Result<Tensor> {
        let [h, w, c] = self.cfg.image_shape;
        if bytes.len() != n * h * w * c {
            return Err(CtError::Shape(format!(
                "{} image bytes, expected {n} x {h} x {w} x {c}",
                bytes.len()
            )));
        }
        let vals: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Tensor::from_vec(vals, (n, h, w, c), self.device())?.to_dtype(self.dtype())?)
    }

    fn conv_stack(&self, images: &Tensor, prefix: &str) -> Result<Tensor> {
        let mut x = images.clone();
        for i in 0..3 {
            let w = self.params.tensor(&format!("{prefix}conv{i}.weight"))?;
            let b = self.params.tensor(&format!("{prefix}conv{i}.bias"))?;
            x = conv3x3_s2(&x, &w, &b)?.relu()?;
        }
        let x = x.flatten_from(1)?;
        self.linear(&x, &format!("{prefix}proj."))
    }

    /// Observation tokenizer: `[N, H, W, C]` in normalized space to `[N, d]`.
    pub fn tokenize_obs(&self, images: &Tensor) -> Result<Tensor> {
        self.conv_stack(images, OBS_TOK)
    }

    /// Momentum encoder output, gradient-stopped.
    pub fn momentum_encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.conv_stack(images, &format!("{MOMENTUM}{OBS_TOK}"))?.detach())
    }

    pub fn tokenize_actions(&self, actions: &Tensor) -> Result<Tensor> {
        self.linear(actions, ACT_TOK)
    }

    /// Token that replaces a masked observation: either the tokenizer's
    /// response to the constant `-1` image or a learned embedding. `[d]`.
    pub fn obs_mask_token(&self) -> Result<Tensor> {
        if self.cfg.learned_mask_embedding {
            return self.params.tensor(&format!("{MASK_EMB}obs"));
        }
        let [h, w, c] = self.cfg.image_shape;
        let img = Tensor::full(-1f32, (1, h, w, c), self.device())?.to_dtype(self.dtype())?;
        Ok(self.tokenize_obs(&img)?.squeeze(0)?)
    }

    pub fn action_mask_token(&self) -> Result<Tensor> {
        if self.cfg.learned_mask_embedding {
            return self.params.tensor(&format!("{MASK_EMB}act"));
        }
        let a = Tensor::full(-1f32, (1, self.cfg.a_max), self.device())?.to_dtype(self.dtype())?;
        Ok(self.tokenize_actions(&a)?.squeeze(0)?)
    }

    /// Tokenizes `[B, T, H, W, C]` images into `[B, T, d]`.
    pub fn tokenize_obs_seq(&self, obs: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, c) = obs.dims5()?;
        let tok = self.tokenize_obs(&obs.reshape((b * t, h, w, c))?)?;
        Ok(tok.reshape((b, t, self.cfg.d_embed))?)
    }

    /// Interleaves `[B, T, d]` observation and action tokens into
    /// `(o_0, a_0, o_1, ...)` and adds positional embeddings.
    pub fn interleave(&self, obs_tok: &Tensor, act_tok: &Tensor) -> Result<Tensor> {
        let (b, t, d) = obs_tok.dims3()?;
        if act_tok.dims3()? != (b, t, d) {
            return Err(CtError::Shape(format!(
                "observation tokens {:?} vs action tokens {:?}",
                obs_tok.dims(),
                act_tok.dims()
            )));
        }
        if t > self.cfg.context_pairs {
            return Err(CtError::Shape(format!(
                "{t} pairs exceed context of {}",
                self.cfg.context_pairs
            )));
        }
        let x = Tensor::stack(&[obs_tok, act_tok], 2)?.reshape((b, 2 * t, d))?;
        let pos = self.params.tensor(POS_EMB)?.narrow(0, 0, 2 * t)?;
        Ok(x.broadcast_add(&pos)?)
    }

    /// Full tokenization: `[B, T, H, W, C]` images (normalized) and
    /// `[B, T, a_max]` actions to `[B, 2T, d]` tokens.
    pub fn tokenize_and_embed(&self, obs: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, c) = obs.dims5()?;
        if [h, w, c] != self.cfg.image_shape {
            return Err(CtError::Shape(format!(
                "images {:?} do not match configured [H, W, C] = {:?}",
                obs.dims(),
                self.cfg.image_shape
            )));
        }
        if actions.dims3()? != (b, t, self.cfg.a_max) {
            return Err(CtError::Shape(format!(
                "actions {:?}, expected [{b}, {t}, {}]",
                actions.dims(),
                self.cfg.a_max
            )));
        }
        let obs_tok = self.tokenize_obs_seq(obs)?;
        let act_tok = self.tokenize_actions(actions)?;
        self.interleave(&obs_tok, &act_tok)
    }

    // ---- transformer ----

    fn attention(&self, x: &Tensor, prefix: &str, bias: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let heads = self.cfg.n_heads;
        let hd = d / heads;
        let qkv = self.linear(x, &format!("{prefix}qkv."))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((b, n, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?.broadcast_add(bias)?;
        // Row max is finite because every token sees itself.
        let max = scores.max_keepdim(D::Minus1)?.detach();
        let e = scores.broadcast_sub(&max)?.exp()?;
        let weights = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
        let weights = ctx.dropout(&weights)?;
        let y = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, d))?;
        let y = self.linear(&y, &format!("{prefix}proj."))?;
        ctx.dropout(&y)
    }

    fn block(&self, x: &Tensor, i: usize, bias: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let p = format!("{BLOCKS}{i}.");
        let h = self.layer_norm(x, &format!("{p}ln1."))?;
        let x = (x + self.attention(&h, &format!("{p}attn."), bias, ctx)?)?;
        let h = self.layer_norm(&x, &format!("{p}ln2."))?;
        let h = self.linear(&h, &format!("{p}mlp.fc."))?.gelu_erf()?;
        let h = self.linear(&h, &format!("{p}mlp.proj."))?;
        let h = ctx.dropout(&h)?;
        Ok((x + h)?)
    }

    /// Runs the pre-norm blocks with the given visibility applied in every
    /// attention layer. `[B, 2T, d]` in and out.
    pub fn encode(&self, tokens: &Tensor, mask: &AttentionMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let n = tokens.dim(1)?;
        if n != mask.len() {
            return Err(CtError::Shape(format!(
                "sequence of {n} tokens with a {0}x{0} mask",
                mask.len()
            )));
        }
        let bias = mask.to_bias(self.dtype(), self.device())?;
        let mut x = ctx.dropout(tokens)?;
        for i in 0..self.cfg.n_layers {
            x = self.block(&x, i, &bias, ctx)?;
        }
        self.layer_norm(&x, LN_F)
    }

    // ---- heads ----

    pub fn head(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        if !self.params.has_prefix(prefix) {
            return Err(CtError::Config(format!("model has no `{prefix}` head")));
        }
        self.linear(x, prefix)
    }

    /// Policy output from observation representations `[..., d]`, squashed
    /// to `(-1, 1)`. The BC head ignores `rtg`; the RTG head requires it
    /// with shape `[...]`.
    pub fn predict_action(&self, head: PolicyHead, phi_o: &Tensor, rtg: Option<&Tensor>) -> Result<Tensor> {
        if !self.has_head(head) {
            return Err(CtError::Config(format!("checkpoint has no {head:?} policy head")));
        }
        match head {
            PolicyHead::Bc => Ok(self.linear(phi_o, HEAD_BC)?.tanh()?),
            PolicyHead::Rtg => {
                let rtg = rtg.ok_or_else(|| {
                    CtError::Config("RTG head needs a return-to-go value".into())
                })?;
                let r = (rtg.unsqueeze(D::Minus1)? * self.cfg.rtg_scale)?;
                let r_emb = self.linear(&r, RTG_TOK)?;
                let x = Tensor::cat(&[phi_o, &r_emb], D::Minus1)?;
                Ok(self.linear(&x, HEAD_RTG)?.tanh()?)
            }
        }
    }
}

/// Splits `[B, 2T, d]` representations into observation positions
/// (even) and action positions (odd), each `[B, T, d]`.
pub fn split_positions(phi: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = phi.dims3()?;
    let t = n / 2;
    let r = phi.reshape((b, t, 2, d))?;
    Ok((r.narrow(2, 0, 1)?.squeeze(2)?, r.narrow(2, 1, 1)?.squeeze(2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_attention_mask, MaskKind};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_embed: 8,
            context_pairs: 3,
            image_shape: [8, 8, 3],
            conv_channels: [4, 4, 4],
            ..ModelConfig::default()
        }
    }

    fn inputs(b: usize, t: usize, seed: u64) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..b * t * 8 * 8 * 3).map(|_| rng.random::<f64>()).collect();
        let act: Vec<f64> = (0..b * t * 2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        (
            Tensor::from_vec(obs, (b, t, 8, 8, 3), &dev).unwrap(),
            Tensor::from_vec(act, (b, t, 2), &dev).unwrap(),
        )
    }

    fn encode(m: &ControlTransformer, obs: &Tensor, act: &Tensor, kind: MaskKind) -> Tensor {
        let x = m.tokenize_and_embed(obs, act).unwrap();
        let mask = build_attention_mask(kind, obs.dim(1).unwrap()).unwrap();
        m.encode(&x, &mask, &mut ForwardCtx::eval()).unwrap()
    }

    fn max_abs(t: Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn shapes_and_purity() {
        let m = ControlTransformer::new(tiny(), 0, DType::F64).unwrap();
        let (obs, act) = inputs(2, 3, 1);
        let a = encode(&m, &obs, &act, MaskKind::Causal);
        assert_eq!(a.dims(), [2, 6, 8]);
        let b = encode(&m, &obs, &act, MaskKind::Causal);
        assert_eq!(max_abs((a - b).unwrap()), 0.0);
        let (po, pa) = split_positions(&encode(&m, &obs, &act, MaskKind::Causal)).unwrap();
        assert_eq!(po.dims(), [2, 3, 8]);
        assert_eq!(pa.dims(), [2, 3, 8]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = ControlTransformer::new(tiny(), 0, DType::F64).unwrap();
        let (obs, act) = inputs(3, 3, 2);
        let out = encode(&m, &obs, &act, MaskKind::Causal);
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let swapped = encode(
            &m,
            &obs.index_select(&perm, 0).unwrap(),
            &act.index_select(&perm, 0).unwrap(),
            MaskKind::Causal,
        );
        let expect = out.index_select(&perm, 0).unwrap();
        assert!(max_abs((swapped - expect).unwrap()) < 1e-12);
    }

    #[test]
    fn causal_outputs_ignore_later_inputs() {
        let m = ControlTransformer::new(tiny(), 0, DType::F64).unwrap();
        let (obs, act) = inputs(1, 3, 3);
        let base = encode(&m, &obs, &act, MaskKind::Causal);
        // Perturb o_2 (token 4): tokens 0..4 must not move, token 4 must.
        let bump = Tensor::zeros((1, 3, 8, 8, 3), DType::F64, &Device::Cpu)
            .unwrap()
            .slice_assign(&[0..1, 2..3, 0..8, 0..8, 0..3], &Tensor::ones((1, 1, 8, 8, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let moved = encode(&m, &(obs + bump).unwrap(), &act, MaskKind::Causal);
        let d = (moved - base).unwrap().abs().unwrap();
        assert_eq!(max_abs(d.narrow(1, 0, 4).unwrap()), 0.0);
        assert!(max_abs(d.narrow(1, 4, 1).unwrap()) > 1e-8);
    }

    #[test]
    fn policy_heads() {
        let mut m = ControlTransformer::new(tiny(), 0, DType::F64).unwrap();
        let phi = Tensor::randn(0f64, 3.0, (4, 8), &Device::Cpu).unwrap();
        assert!(m.predict_action(PolicyHead::Bc, &phi, None).is_err());
        m.add_policy_head(PolicyHead::Bc, 1).unwrap();
        let a = m.predict_action(PolicyHead::Bc, &phi, None).unwrap();
        assert_eq!(a.dims(), [4, 2]);
        assert!(max_abs(a.clone()) < 1.0);
        let rtg = Tensor::new(&[1f64, 2.0, 3.0, 4.0], &Device::Cpu).unwrap();
        let with_rtg = m.predict_action(PolicyHead::Bc, &phi, Some(&rtg)).unwrap();
        assert_eq!(max_abs((a - with_rtg).unwrap()), 0.0);

        let n = m.params().get(&format!("{HEAD_BC}weight")).unwrap().elem_count();
        m.params().set_values(&format!("{HEAD_BC}weight"), &vec![0.0; n]).unwrap();
        let zero = m.predict_action(PolicyHead::Bc, &phi, None).unwrap();
        assert_eq!(max_abs(zero), 0.0);

        m.add_policy_head(PolicyHead::Rtg, 1).unwrap();
        assert!(m.predict_action(PolicyHead::Rtg, &phi, None).is_err());
        let r = m.predict_action(PolicyHead::Rtg, &phi, Some(&rtg)).unwrap();
        assert_eq!(r.dims(), [4, 2]);
    }

    #[test]
    fn momentum_follows_closed_form() {
        let m = ControlTransformer::new(tiny(), 0, DType::F64).unwrap();
        let name = format!("{OBS_TOK}conv0.weight");
        let live: Vec<f64> = m.params().values(&name).unwrap().iter().map(|v| v + 0.5).collect();
        m.params().set_values(&name, &live).unwrap();
        let before = m.params().values(&format!("{MOMENTUM}{name}")).unwrap();
        m.update_momentum(0.9).unwrap();
        let after = m.params().values(&format!("{MOMENTUM}{name}")).unwrap();
        for ((a, b), l) in after.iter().zip(&before).zip(&live) {
            assert!((a - (0.9 * b + 0.1 * l)).abs() < 1e-15);
        }
    }

    #[test]
    fn head_bookkeeping() {
        let mut m = ControlTransformer::new(tiny(), 0, DType::F32).unwrap();
        assert!(m.has_pretraining_heads());
        m.remove_pretraining_heads();
        assert!(!m.has_pretraining_heads());
        assert!(m.head(HEAD_FWD, &Tensor::zeros((1, 16), DType::F32, &Device::Cpu).unwrap()).is_err());
        assert!(is_backbone("blocks.0.attn.qkv.weight"));
        assert!(!is_backbone("head.bc.weight"));
        assert!(is_momentum("momentum.obs_tok.conv0.bias"));
        assert!(decays("blocks.1.mlp.fc.weight"));
        assert!(!decays("ln_f.gamma"));
    }
}
