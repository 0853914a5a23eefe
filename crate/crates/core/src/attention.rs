//! Multi-head attention with shunted head groups.
//!
//! Heads are laid out human group first, then object group, then global
//! group. For query rows that carry a [`MaskPair`], the post-softmax map of
//! every human-group head is multiplied by the human mask and every
//! object-group head by the object mask. Masked rows are not renormalized, so
//! they sum to the softmax mass that falls inside the box.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PatchMask;
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("attention configuration: {0}")]
    Config(String),
    #[error("attention state: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Head counts for the human, object and global groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGrouping {
    pub human: usize,
    pub object: usize,
    pub global: usize,
}

impl Default for HeadGrouping {
    fn default() -> Self {
        Self { human: 2, object: 2, global: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadGroup {
    Human,
    Object,
    Global,
}

impl HeadGrouping {
    pub fn total(&self) -> usize {
        self.human + self.object + self.global
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.total() != heads {
            return Err(AttentionError::Config(format!(
                "head grouping {}+{}+{} does not sum to {heads} heads",
                self.human, self.object, self.global
            )));
        }
        Ok(())
    }

    pub fn group_of(&self, head: usize) -> HeadGroup {
        if head < self.human {
            HeadGroup::Human
        } else if head < self.human + self.object {
            HeadGroup::Object
        } else {
            HeadGroup::Global
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub human: PatchMask,
    pub object: PatchMask,
}

/// Per-query-row mask pairs; rows without a pair attend without masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuntedMaskSet {
    rows: Vec<Option<MaskPair>>,
}

impl ShuntedMaskSet {
    pub fn new(n_rows: usize) -> Self {
        Self { rows: vec![None; n_rows] }
    }

    pub fn set(&mut self, row: usize, pair: MaskPair) {
        self.rows[row] = Some(pair);
    }

    pub fn get(&self, row: usize) -> Option<&MaskPair> {
        self.rows[row].as_ref()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn masked_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    /// `[n_rows × patches]` multiplier for one head group.
    fn multiplier(&self, group: HeadGroup, patches: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.rows.len() * patches);
        for row in &self.rows {
            match row {
                None => data.extend(std::iter::repeat(1.0).take(patches)),
                Some(pair) => {
                    let m = if group == HeadGroup::Human { &pair.human } else { &pair.object };
                    if m.cells().len() != patches {
                        return Err(AttentionError::Config(format!(
                            "mask has {} cells, memory has {patches} patches",
                            m.cells().len()
                        )));
                    }
                    data.extend(m.as_f64());
                }
            }
        }
        Ok(Tensor::new(vec![self.rows.len(), patches], data)?)
    }
}

/// Query, key and value projections of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttnParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        3 * Linear::num_params(dim, dim)
    }
}

pub struct AttentionOutput {
    /// Concatenation of the per-head outputs, `[n_queries × dim]`.
    pub output: Var,
    /// Post-mask attention map of every head, `[n_queries × n_keys]`.
    pub maps: Vec<Var>,
}

/// Scaled dot-product attention over `heads` heads.
///
/// `allowed` (row-major `[n_q × n_k]`) restricts which keys each query may
/// attend to before the softmax; `shunt` multiplies post-softmax maps.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &AttnParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    allowed: Option<&[bool]>,
    shunt: Option<(&ShuntedMaskSet, &HeadGrouping)>,
) -> Result<AttentionOutput> {
    let (n_q, dim) = tape.value(q_in).dims2()?;
    let (n_k, _) = tape.value(k_in).dims2()?;
    if heads == 0 || dim % heads != 0 {
        return Err(AttentionError::Config(format!("model width {dim} not divisible by {heads} heads")));
    }
    let mut multipliers = None;
    if let Some((masks, grouping)) = shunt {
        grouping.validate(heads)?;
        if masks.n_rows() != n_q {
            return Err(AttentionError::Config(format!("{} mask rows for {n_q} queries", masks.n_rows())));
        }
        let human = tape.constant(masks.multiplier(HeadGroup::Human, n_k)?);
        let object = tape.constant(masks.multiplier(HeadGroup::Object, n_k)?);
        multipliers = Some((human, object, grouping));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = params.q.forward(tape, p, q_in)?;
    let k = params.k.forward(tape, p, k_in)?;
    let v = params.v.forward(tape, p, v_in)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let mut a = match allowed {
            Some(mask) => tape.masked_softmax(logits, mask)?,
            None => tape.softmax(logits, 1)?,
        };
        if let Some((human, object, grouping)) = multipliers {
            match grouping.group_of(h) {
                HeadGroup::Human => a = tape.mul(a, human)?,
                HeadGroup::Object => a = tape.mul(a, object)?,
                HeadGroup::Global => {}
            }
        }
        maps.push(a);
        outs.push(tape.matmul(a, vh)?);
    }
    let output = tape.concat(&outs, 1)?;
    Ok(AttentionOutput { output, maps })
}

/// Cross-attention of queries onto encoder memory. Query rows are formed as
/// `queries + prev` (query content plus the previous layer's embedding); keys
/// carry the memory's positional codes, values do not.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &AttnParams,
    queries: Var,
    prev: Var,
    memory: Var,
    key_pos: Option<Var>,
    heads: usize,
    shunt: Option<(&ShuntedMaskSet, &HeadGrouping)>,
) -> Result<AttentionOutput> {
    let q_in = tape.add(queries, prev)?;
    let k_in = match key_pos {
        Some(pos) => tape.add(memory, pos)?,
        None => memory,
    };
    multi_head_attention(tape, p, params, q_in, k_in, memory, heads, None, shunt)
}

/// Collected attention maps, keyed by (decoder, layer, head).
#[derive(Debug, Default)]
pub struct AttentionRecorder {
    enabled: bool,
    grid: (usize, usize),
    maps: BTreeMap<(String, usize, usize), Tensor>,
}

impl AttentionRecorder {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn enabled(rows: usize, cols: usize) -> Self {
        Self { enabled: true, grid: (rows, cols), maps: BTreeMap::new() }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn clear(&mut self) {
        self.maps.clear();
    }

    pub fn record(&mut self, decoder: &str, layer: usize, head: usize, map: &Tensor) {
        if self.enabled {
            self.maps.insert((decoder.to_string(), layer, head), map.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &(String, usize, usize)> {
        self.maps.keys()
    }

    /// Post-mask attention of each query reshaped to the patch grid.
    pub fn dump(&self, decoder: &str, layer: usize, head: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        if !self.enabled {
            return Err(AttentionError::State("attention recording is disabled".into()));
        }
        let map = self.maps.get(&(decoder.to_string(), layer, head)).ok_or_else(|| {
            AttentionError::State(format!("no attention recorded for {decoder} layer {layer} head {head}"))
        })?;
        let (rows, cols) = self.grid;
        let (n_q, n_k) = map.dims2()?;
        if n_k != rows * cols {
            return Err(AttentionError::State(format!("{n_k} keys do not form a {rows}x{cols} grid")));
        }
        Ok((0..n_q)
            .map(|q| map.row(q).chunks(cols).map(<[f64]>::to_vec).collect())
            .collect())
    }

    /// Writes one plain-text grid per (decoder, layer, head, query) into `dir`;
    /// returns the number of files written.
    pub fn write_dumps(&self, dir: &Path) -> Result<usize> {
        std::fs::create_dir_all(dir)?;
        let mut written = 0;
        for (decoder, layer, head) in self.maps.keys() {
            for (q, grid) in self.dump(decoder, *layer, *head)?.iter().enumerate() {
                let mut text = String::new();
                for row in grid {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
                    writeln!(text, "{}", line.join(" ")).unwrap();
                }
                let name = format!("{decoder}_l{layer}_h{head}_q{q}.txt");
                std::fs::write(dir.join(name), text)?;
                written += 1;
            }
        }
        Ok(written)
    }
}
