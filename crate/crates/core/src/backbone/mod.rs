//! Encoder backbones: the token-embedding table plus a causal transformer
//! that turns input rows into per-position hidden states.

mod checkpoint;
mod tokenizer;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use tokenizer::{words, Tokenizer, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
pub use transformer::{ReferenceTransformer, ReferenceTransformerConfig};

use rand::RngCore;

use crate::autograd::{Graph, NodeId, ParamStore, Segment};
use crate::error::Result;
use crate::tensor::Scalar;

/// Capability the embedders need from a language-model backbone.
///
/// Implementations own their parameters in a [`ParamStore`]; callers build a
/// [`Graph`] over [`EncoderBackbone::params`] and pass it to the methods
/// below, so one forward pass can be differentiated end to end.
pub trait EncoderBackbone<T: Scalar> {
    fn model_dim(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn tokenizer(&self) -> &Tokenizer;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenizer().encode(text)
    }

    /// `ids.len() x model_dim` rows of the embedding table.
    fn token_embed(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<NodeId>;

    /// Hidden states for several independent sequences packed row-wise.
    ///
    /// Rows with `key_mask[r] == false` never influence other rows. Passing
    /// `dropout_rng` switches on training-mode dropout.
    fn forward_packed(
        &self,
        g: &mut Graph<'_, T>,
        inputs: NodeId,
        segments: &[Segment],
        key_mask: Option<&[bool]>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId>;

    /// Single-sequence forward with an attention mask over `L` rows.
    fn forward(&self, g: &mut Graph<'_, T>, inputs: NodeId, mask: &[bool]) -> Result<NodeId> {
        let len = g.value(inputs).rows();
        self.forward_packed(g, inputs, &[Segment::new(0, len)], Some(mask), None)
    }
}
