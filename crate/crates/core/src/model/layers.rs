use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attention, multi_head_attention, AttentionOutput, AttnParams, HeadGrouping, ShuntedMaskSet};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{Tape, Var};

use super::ModelError;

/// Post-norm self-attention encoder layer.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    attn: AttnParams,
    out: Linear,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: AttnParams::new(store, &format!("{name}.sa"), dim, rng),
            out: Linear::new(store, &format!("{name}.sa_out"), dim, dim, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn, dim], rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn num_params(dim: usize, ffn: usize) -> usize {
        AttnParams::num_params(dim) + Linear::num_params(dim, dim) + 4 * dim + Mlp::num_params(&[dim, ffn, dim])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, pos: Option<Var>, heads: usize) -> Result<Var, ModelError> {
        let qk = match pos {
            Some(pos) => tape.add(x, pos)?,
            None => x,
        };
        let sa = multi_head_attention(tape, p, &self.attn, qk, qk, x, heads, None, None)?;
        let sa = self.out.forward(tape, p, sa.output)?;
        let x = tape.add(x, sa)?;
        let x = self.ln1.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        Ok(self.ln2.forward(tape, p, x)?)
    }
}

/// Post-norm decoder layer: self-attention among query rows, cross-attention
/// onto the memory, then a feed-forward block.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    self_attn: AttnParams,
    sa_out: Linear,
    ln1: LayerNorm,
    cross: AttnParams,
    ca_out: Linear,
    ln2: LayerNorm,
    ffn: Mlp,
    ln3: LayerNorm,
}

pub(crate) struct DecoderInputs<'a> {
    pub queries: Var,
    pub memory: Var,
    pub key_pos: Option<Var>,
    pub allowed: Option<&'a [bool]>,
    pub shunt: Option<(&'a ShuntedMaskSet, &'a HeadGrouping)>,
    pub heads: usize,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: AttnParams::new(store, &format!("{name}.sa"), dim, rng),
            sa_out: Linear::new(store, &format!("{name}.sa_out"), dim, dim, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            cross: AttnParams::new(store, &format!("{name}.ca"), dim, rng),
            ca_out: Linear::new(store, &format!("{name}.ca_out"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn, dim], rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
        }
    }

    pub fn num_params(dim: usize, ffn: usize) -> usize {
        2 * (AttnParams::num_params(dim) + Linear::num_params(dim, dim)) + 6 * dim + Mlp::num_params(&[dim, ffn, dim])
    }

    /// Returns the new embedding and the cross-attention maps of every head.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, prev: Var, inp: &DecoderInputs) -> Result<(Var, Vec<Var>), ModelError> {
        let qk = tape.add(inp.queries, prev)?;
        let sa = multi_head_attention(tape, p, &self.self_attn, qk, qk, prev, inp.heads, inp.allowed, None)?;
        let sa = self.sa_out.forward(tape, p, sa.output)?;
        let x = tape.add(prev, sa)?;
        let x = self.ln1.forward(tape, p, x)?;
        let AttentionOutput { output, maps } =
            cross_attention(tape, p, &self.cross, inp.queries, x, inp.memory, inp.key_pos, inp.heads, inp.shunt)?;
        let ca = self.ca_out.forward(tape, p, output)?;
        let x = tape.add(x, ca)?;
        let x = self.ln2.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        Ok((self.ln3.forward(tape, p, x)?, maps))
    }
}
