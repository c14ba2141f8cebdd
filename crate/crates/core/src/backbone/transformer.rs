use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EncoderBackbone, Tokenizer};
use crate::autograd::{Graph, NodeId, ParamId, ParamStore, Segment};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceTransformerConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Filled from the tokenizer when the model is built.
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ReferenceTransformerConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_positions: 256,
            vocab_size: 0,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl ReferenceTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even".into()));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_dim and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc1: ParamId,
    b_fc1: ParamId,
    w_fc2: ParamId,
    b_fc2: ParamId,
}

/// Pre-norm causal transformer with learned absolute positions and a final
/// layer norm.
#[derive(Clone, Debug)]
pub struct ReferenceTransformer<T> {
    config: ReferenceTransformerConfig,
    tokenizer: Tokenizer,
    params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

// Token rows start with the same per-component variance as the sin/cos rows
// of the temporal encoding (1/2), so neither dominates the residual stream.
const TOKEN_INIT_STD: f64 = std::f64::consts::FRAC_1_SQRT_2;
const POSITION_INIT_STD: f64 = 0.1;

impl<T: Scalar> ReferenceTransformer<T> {
    pub fn new(mut config: ReferenceTransformerConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.model_dim;
        let f = config.ffn_dim;
        let out_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();

        let mut params = ParamStore::new();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Mat<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols)
                .map(|_| T::from_f64(dist.sample(&mut rng)))
                .collect();
            Mat::from_vec(rows, cols, data).expect("shape")
        };
        let tok_emb = params.add("tok_emb", normal(config.vocab_size, d, TOKEN_INIT_STD));
        let pos_emb = params.add("pos_emb", normal(config.max_positions, d, POSITION_INIT_STD));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let in_std = 1.0 / (d as f64).sqrt();
            let ffn_std = 1.0 / (f as f64).sqrt();
            let layer = Layer {
                ln1_g: params.add(p("ln1.g"), Mat::filled(1, d, T::one())),
                ln1_b: params.add(p("ln1.b"), Mat::zeros(1, d)),
                w_qkv: params.add(p("attn.w_qkv"), normal(d, 3 * d, in_std)),
                b_qkv: params.add(p("attn.b_qkv"), Mat::zeros(1, 3 * d)),
                w_o: params.add(p("attn.w_o"), normal(d, d, in_std * out_scale)),
                b_o: params.add(p("attn.b_o"), Mat::zeros(1, d)),
                ln2_g: params.add(p("ln2.g"), Mat::filled(1, d, T::one())),
                ln2_b: params.add(p("ln2.b"), Mat::zeros(1, d)),
                w_fc1: params.add(p("mlp.w_fc1"), normal(d, f, in_std)),
                b_fc1: params.add(p("mlp.b_fc1"), Mat::zeros(1, f)),
                w_fc2: params.add(p("mlp.w_fc2"), normal(f, d, ffn_std * out_scale)),
                b_fc2: params.add(p("mlp.b_fc2"), Mat::zeros(1, d)),
            };
            layers.push(layer);
        }
        let lnf_g = params.add("ln_f.g", Mat::filled(1, d, T::one()));
        let lnf_b = params.add("ln_f.b", Mat::zeros(1, d));
        Ok(Self {
            config,
            tokenizer,
            params,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    /// Rebuild from stored parameters; names and shapes must match a fresh
    /// model with the same configuration.
    pub fn from_parts(
        config: ReferenceTransformerConfig,
        tokenizer: Tokenizer,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let mut model = Self::new(config, tokenizer)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let (name, fresh) = (model.params.name(id), model.params.get(id));
            let stored = params.get(id);
            if params.name(id) != name || stored.shape() != fresh.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} does not match the configuration"
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ReferenceTransformerConfig {
        &self.config
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ReferenceTransformer<U> {
        ReferenceTransformer {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
        }
    }
}

impl<T: Scalar> EncoderBackbone<T> for ReferenceTransformer<T> {
    fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn token_embed(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<NodeId> {
        g.gather(self.tok_emb, ids)
    }

    fn forward_packed(
        &self,
        g: &mut Graph<'_, T>,
        inputs: NodeId,
        segments: &[Segment],
        key_mask: Option<&[bool]>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let (n, d) = g.value(inputs).shape();
        if d != self.config.model_dim {
            return Err(Error::Shape(format!(
                "input width {d}, model_dim {}",
                self.config.model_dim
            )));
        }
        let mut positions = vec![0usize; n];
        let mut covered = 0;
        for seg in segments {
            if seg.len > self.config.max_positions {
                return Err(Error::LengthOverflow {
                    len: seg.len,
                    max: self.config.max_positions,
                });
            }
            for (p, slot) in positions[seg.start..seg.start + seg.len].iter_mut().enumerate() {
                *slot = p;
            }
            covered += seg.len;
        }
        if covered != n {
            return Err(Error::Shape("segments must tile the input rows".into()));
        }

        let p = self.config.dropout;
        let mut x = g.add_positions(inputs, self.pos_emb, &positions)?;
        for layer in &self.layers {
            let h = g.layer_norm(x, layer.ln1_g, layer.ln1_b);
            let qkv = g.linear(h, layer.w_qkv, layer.b_qkv)?;
            let a = g.causal_attention(qkv, self.config.n_heads, segments, key_mask)?;
            let mut a = g.linear(a, layer.w_o, layer.b_o)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                a = g.dropout(a, p, rng);
            }
            x = g.add(x, a)?;

            let h = g.layer_norm(x, layer.ln2_g, layer.ln2_b);
            let f = g.linear(h, layer.w_fc1, layer.b_fc1)?;
            let f = g.gelu(f);
            let mut f = g.linear(f, layer.w_fc2, layer.b_fc2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = g.dropout(f, p, rng);
            }
            x = g.add(x, f)?;
        }
        Ok(g.layer_norm(x, self.lnf_g, self.lnf_b))
    }
}
