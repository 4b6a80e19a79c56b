//! Split decision transformer: an edge-side embedding module, a cloud-side
//! GPT-style decoder, and edge-side prediction heads.

mod batch;
mod forward;
mod rollout;

pub use batch::{compute_rtg, observation_scale, sample_batch, ContextBatch};
pub use forward::{
    decoder_forward, dt_loss, embed_tokens, evaluate_loss, last_actions, predict_heads, token_mask, train_step, Heads,
    StepStats, Trainable,
};
pub use rollout::{rollout_episode, rollout_episodes, EpisodeRecord, RolloutEnv, Transition};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, Float, LayerSpec, ParamCount, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtConfig {
    pub n_heads: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_timestep: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f64,
    pub state_loss_weight: f64,
    pub return_loss_weight: f64,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            n_heads: 4,
            n_blocks: 6,
            hidden_dim: 256,
            context_len: 50,
            state_dim: 36,
            action_dim: 24,
            max_timestep: 100,
            mlp_ratio: 4,
            dropout: 0.1,
            rtg_scale: 100.0,
            state_loss_weight: 0.0,
            return_loss_weight: 0.0,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_heads > 0
            && self.hidden_dim.is_multiple_of(self.n_heads)
            && self.n_blocks > 0
            && self.context_len > 0
            && self.state_dim > 0
            && self.action_dim > 0
            && self.max_timestep > 0
            && self.mlp_ratio > 0
            && (0.0..1.0).contains(&self.dropout)
            && self.rtg_scale > 0.0
            && self.state_loss_weight >= 0.0
            && self.return_loss_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model configuration {self:?}")))
        }
    }

    pub fn embed_layers(&self) -> Vec<(String, LayerSpec)> {
        let h = self.hidden_dim;
        vec![
            ("embed.return".into(), LayerSpec::Dense { input: 1, output: h }),
            ("embed.state".into(), LayerSpec::Dense { input: self.state_dim, output: h }),
            ("embed.action".into(), LayerSpec::Dense { input: self.action_dim, output: h }),
            ("embed.timestep".into(), LayerSpec::EmbeddingTable { rows: self.max_timestep, dim: h }),
            ("embed.ln".into(), LayerSpec::LayerNorm { dim: h }),
        ]
    }

    pub fn decoder_layers(&self) -> Vec<(String, LayerSpec)> {
        let h = self.hidden_dim;
        let mut out = Vec::new();
        for i in 0..self.n_blocks {
            let p = format!("decoder.blocks.{i}");
            out.push((format!("{p}.ln1"), LayerSpec::LayerNorm { dim: h }));
            out.push((format!("{p}.attn"), LayerSpec::CausalSelfAttention { dim: h, heads: self.n_heads }));
            out.push((format!("{p}.ln2"), LayerSpec::LayerNorm { dim: h }));
            out.push((format!("{p}.mlp.fc"), LayerSpec::Dense { input: h, output: self.mlp_ratio * h }));
            out.push((format!("{p}.mlp.proj"), LayerSpec::Dense { input: self.mlp_ratio * h, output: h }));
        }
        out
    }

    pub fn predict_layers(&self) -> Vec<(String, LayerSpec)> {
        let h = self.hidden_dim;
        vec![
            ("predict.action".into(), LayerSpec::Dense { input: h, output: self.action_dim }),
            ("predict.state".into(), LayerSpec::Dense { input: h, output: self.state_dim }),
            ("predict.return".into(), LayerSpec::Dense { input: h, output: 1 }),
        ]
    }
}

fn init_part<T: Float>(layers: &[(String, LayerSpec)], rng: &mut impl Rng) -> Result<ParamSet<T>> {
    let mut ps = ParamSet::new();
    for (name, spec) in layers {
        spec.init(name, &mut ps, rng)?;
    }
    Ok(ps)
}

/// Parameter counts of the three parts of a [`SplitModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub embed: ParamCount,
    pub decoder: ParamCount,
    pub predict: ParamCount,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.embed.params + self.decoder.params + self.predict.params
    }

    /// Parameters held by an agent: embedding plus prediction.
    pub fn local(&self) -> usize {
        self.embed.params + self.predict.params
    }
}

#[derive(Clone, Debug)]
pub struct SplitModel<T> {
    pub config: DtConfig,
    pub embed: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub predict: ParamSet<T>,
}

impl<T: Float> SplitModel<T> {
    pub fn new(config: DtConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let embed = init_part(&config.embed_layers(), rng)?;
        let decoder = init_part(&config.decoder_layers(), rng)?;
        let predict = init_part(&config.predict_layers(), rng)?;
        Ok(SplitModel { config, embed, decoder, predict })
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            embed: self.embed.param_count(|_| true),
            decoder: self.decoder.param_count(|_| true),
            predict: self.predict.param_count(|_| true),
        }
    }

    pub fn cast<U: Float>(&self) -> SplitModel<U> {
        SplitModel {
            config: self.config.clone(),
            embed: self.embed.cast(),
            decoder: self.decoder.cast(),
            predict: self.predict.cast(),
        }
    }
}

/// Counts from the layer list alone, without allocating weights.
pub fn split_counts(config: &DtConfig) -> SplitCounts {
    let count = |layers: Vec<(String, LayerSpec)>| {
        let params = layers.iter().map(|(_, s)| s.param_count()).sum::<usize>();
        ParamCount { params, bytes: params * 4 }
    };
    SplitCounts {
        embed: count(config.embed_layers()),
        decoder: count(config.decoder_layers()),
        predict: count(config.predict_layers()),
    }
}

impl SplitModel<f32> {
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        Ok(save_checkpoint(&self.embed.merged(&self.decoder)?.merged(&self.predict)?))
    }

    /// Rebuilds a model from a checkpoint written by [`SplitModel::to_checkpoint`],
    /// splitting entries by name prefix.
    pub fn from_checkpoint(config: DtConfig, bytes: &[u8]) -> Result<Self> {
        let all = load_checkpoint(bytes)?;
        let model = SplitModel {
            embed: all.subset(|n| n.starts_with("embed.")),
            decoder: all.subset(|n| n.starts_with("decoder.")),
            predict: all.subset(|n| n.starts_with("predict.")),
            config,
        };
        let expected = split_counts(&model.config);
        let got = model.counts();
        if got != expected || model.embed.len() + model.decoder.len() + model.predict.len() != all.len() {
            return Err(Error::Schema(format!("checkpoint does not fit the model configuration: {got:?}")));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_by_prefix() {
        let cfg = DtConfig { hidden_dim: 8, n_heads: 2, n_blocks: 1, context_len: 3, ..DtConfig::default() };
        let m = SplitModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = m.to_checkpoint().unwrap();
        let back = SplitModel::from_checkpoint(cfg.clone(), &bytes).unwrap();
        assert_eq!(back.embed.fingerprint(), m.embed.fingerprint());
        assert_eq!(back.decoder.fingerprint(), m.decoder.fingerprint());
        assert_eq!(back.predict.fingerprint(), m.predict.fingerprint());
        assert_eq!(back.to_checkpoint().unwrap(), bytes);

        let other = DtConfig { hidden_dim: 16, ..cfg };
        assert!(SplitModel::from_checkpoint(other, &bytes).is_err());
    }
}
