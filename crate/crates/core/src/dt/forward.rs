use super::{ContextBatch, DtConfig, SplitModel};
use crate::error::Result;
use crate::nn::layers::{dense, layer_norm, self_attention};
use crate::nn::{AdamW, Bound, Float, Graph, Tensor, Traffic, Var};

fn tensor<T: Float>(shape: &[usize], data: &[f32]) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data.iter().map(|&v| T::lit(f64::from(v))).collect())
}

/// Interleaved (RTG, state, action) tokens plus timestep embedding, then the
/// embedding layer norm. Output `[B, 3L, H]`.
pub fn embed_tokens<T: Float>(g: &mut Graph<T>, p: &Bound, cfg: &DtConfig, batch: &ContextBatch) -> Result<Var> {
    batch.validate(cfg)?;
    let (b, l, h) = (batch.batch, batch.len, cfg.hidden_dim);
    let rtg = g.constant(tensor(&[b, l, 1], &batch.rtg)?);
    let states = g.constant(tensor(&[b, l, cfg.state_dim], &batch.states)?);
    let actions = g.constant(tensor(&[b, l, cfg.action_dim], &batch.actions)?);
    let table = p.get("embed.timestep.weight")?;
    let time = g.gather(table, &batch.timesteps)?;
    let time = g.reshape(time, &[b, l, h])?;
    let mut parts = Vec::with_capacity(3);
    for (prefix, x) in [("embed.return", rtg), ("embed.state", states), ("embed.action", actions)] {
        let e = dense(g, p, prefix, x)?;
        parts.push(g.add(e, time)?);
    }
    let tokens = g.interleave(&parts)?;
    layer_norm(g, p, "embed.ln", tokens)
}

/// Key mask over the interleaved token stream.
pub fn token_mask(batch: &ContextBatch) -> Vec<bool> {
    batch.pad_mask.iter().flat_map(|&m| [m; 3]).collect()
}

/// Pre-norm GPT blocks without a final layer norm.
pub fn decoder_forward<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DtConfig,
    tokens: Var,
    key_mask: &[bool],
) -> Result<Var> {
    let mut x = tokens;
    for i in 0..cfg.n_blocks {
        let pre = format!("decoder.blocks.{i}");
        let h = layer_norm(g, p, &format!("{pre}.ln1"), x)?;
        let a = self_attention(g, p, &format!("{pre}.attn"), h, cfg.n_heads, Some(key_mask))?;
        let a = g.dropout(a, cfg.dropout)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, &format!("{pre}.ln2"), x)?;
        let h = dense(g, p, &format!("{pre}.mlp.fc"), h)?;
        let h = g.gelu(h)?;
        let h = dense(g, p, &format!("{pre}.mlp.proj"), h)?;
        let h = g.dropout(h, cfg.dropout)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

pub struct Heads {
    /// `[B, L, action_dim]` in (0,1), read from state tokens.
    pub action: Var,
    /// Next-state prediction from action tokens, when its loss weight is set.
    pub state: Option<Var>,
    /// Next-RTG prediction from action tokens, when its loss weight is set.
    pub ret: Option<Var>,
}

pub fn predict_heads<T: Float>(g: &mut Graph<T>, p: &Bound, cfg: &DtConfig, hidden: Var) -> Result<Heads> {
    let state_tokens = g.take_strided(hidden, 1, 3)?;
    let action = dense(g, p, "predict.action", state_tokens)?;
    let action = g.sigmoid(action)?;
    let (mut state, mut ret) = (None, None);
    if cfg.state_loss_weight > 0.0 || cfg.return_loss_weight > 0.0 {
        let action_tokens = g.take_strided(hidden, 2, 3)?;
        if cfg.state_loss_weight > 0.0 {
            state = Some(dense(g, p, "predict.state", action_tokens)?);
        }
        if cfg.return_loss_weight > 0.0 {
            ret = Some(dense(g, p, "predict.return", action_tokens)?);
        }
    }
    Ok(Heads { action, state, ret })
}

/// Targets shifted one slot ahead, valid where both slots are real.
fn next_slot_targets(batch: &ContextBatch, values: &[f32], dim: usize) -> (Vec<f32>, Vec<bool>) {
    let (b, l) = (batch.batch, batch.len);
    let mut target = vec![0.0; b * l * dim];
    let mut mask = vec![false; b * l];
    for r in 0..b {
        for t in 0..l.saturating_sub(1) {
            let (i, j) = (r * l + t, r * l + t + 1);
            if batch.pad_mask[i] && batch.pad_mask[j] {
                mask[i] = true;
                target[i * dim..(i + 1) * dim].copy_from_slice(&values[j * dim..(j + 1) * dim]);
            }
        }
    }
    (target, mask)
}

/// Action MSE over unpadded slots plus the weighted auxiliary head losses.
pub fn dt_loss<T: Float>(g: &mut Graph<T>, cfg: &DtConfig, heads: &Heads, batch: &ContextBatch) -> Result<Var> {
    let (b, l) = (batch.batch, batch.len);
    let target = tensor(&[b, l, cfg.action_dim], &batch.actions)?;
    let mut loss = g.masked_mse(heads.action, &target, &batch.pad_mask)?;
    if let Some(state) = heads.state {
        let (t, m) = next_slot_targets(batch, &batch.states, cfg.state_dim);
        let aux = g.masked_mse(state, &tensor(&[b, l, cfg.state_dim], &t)?, &m)?;
        let aux = g.scale(aux, T::lit(cfg.state_loss_weight))?;
        loss = g.add(loss, aux)?;
    }
    if let Some(ret) = heads.ret {
        let (t, m) = next_slot_targets(batch, &batch.rtg, 1);
        let aux = g.masked_mse(ret, &tensor(&[b, l, 1], &t)?, &m)?;
        let aux = g.scale(aux, T::lit(cfg.return_loss_weight))?;
        loss = g.add(loss, aux)?;
    }
    Ok(loss)
}

/// Which parts of a model an update may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub embed: bool,
    pub decoder: bool,
    pub predict: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { embed: true, decoder: true, predict: true };
    /// Embedding and prediction only; the decoder is frozen.
    pub const LOCAL: Trainable = Trainable { embed: true, decoder: false, predict: true };
    pub const DECODER: Trainable = Trainable { embed: false, decoder: true, predict: false };
    pub const NONE: Trainable = Trainable { embed: false, decoder: false, predict: false };
}

struct Pass {
    loss: Var,
    action: Var,
    embed: Bound,
    decoder: Bound,
    predict: Bound,
}

/// Full forward pass. With `split`, activations cross a metered boundary on
/// the way to the decoder and again on the way back.
fn forward_pass<T: Float>(
    g: &mut Graph<T>,
    model: &SplitModel<T>,
    batch: &ContextBatch,
    trainable: Trainable,
    split: bool,
) -> Result<Pass> {
    let cfg = &model.config;
    let embed = Bound::new(g, &model.embed, trainable.embed);
    let decoder = Bound::new(g, &model.decoder, trainable.decoder);
    let predict = Bound::new(g, &model.predict, trainable.predict);
    let mut tokens = embed_tokens(g, &embed, cfg, batch)?;
    tokens = g.dropout(tokens, cfg.dropout)?;
    if split {
        tokens = g.boundary(tokens)?;
    }
    let mut hidden = decoder_forward(g, &decoder, cfg, tokens, &token_mask(batch))?;
    if split {
        hidden = g.boundary(hidden)?;
    }
    let heads = predict_heads(g, &predict, cfg, hidden)?;
    let loss = dt_loss(g, cfg, &heads, batch)?;
    Ok(Pass { loss, action: heads.action, embed, decoder, predict })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub traffic: Traffic,
}

/// One optimizer step on the trainable parts. Frozen parts are bit-identical
/// afterwards.
pub fn train_step<T: Float>(
    model: &mut SplitModel<T>,
    opt: &AdamW,
    batch: &ContextBatch,
    trainable: Trainable,
    split: bool,
    dropout_seed: u64,
) -> Result<StepStats> {
    let mut g = Graph::training(dropout_seed);
    let pass = forward_pass(&mut g, model, batch, trainable, split)?;
    let loss = g.value(pass.loss).item().to_f64().unwrap_or(f64::NAN);
    g.backward(pass.loss)?;
    let parts = [
        (trainable.embed, &mut model.embed, &pass.embed),
        (trainable.decoder, &mut model.decoder, &pass.decoder),
        (trainable.predict, &mut model.predict, &pass.predict),
    ];
    for (on, params, bound) in parts {
        if on {
            params.zero_grad();
            params.accumulate_grads(&g, bound.vars())?;
            opt.step(params);
        }
    }
    Ok(StepStats { loss, traffic: g.traffic() })
}

/// Loss without dropout or updates.
pub fn evaluate_loss<T: Float>(model: &SplitModel<T>, batch: &ContextBatch) -> Result<f64> {
    let mut g = Graph::new();
    let pass = forward_pass(&mut g, model, batch, Trainable::NONE, false)?;
    Ok(g.value(pass.loss).item().to_f64().unwrap_or(f64::NAN))
}

/// Predicted raw action at the last position of every row, `[B, action_dim]`.
pub fn last_actions<T: Float>(model: &SplitModel<T>, batch: &ContextBatch) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pass = forward_pass(&mut g, model, batch, Trainable::NONE, false)?;
    let a = g.value(pass.action).data();
    let (l, ad) = (batch.len, model.config.action_dim);
    let mut out = Vec::with_capacity(batch.batch * ad);
    for b in 0..batch.batch {
        let row = (b * l + l - 1) * ad;
        out.extend(a[row..row + ad].iter().map(|v| v.to_f64().unwrap()));
    }
    Ok(out)
}
