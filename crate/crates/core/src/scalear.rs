//! Scale-wise autoregressive transformer.
//!
//! The input sequence is laid out coarse to fine. The span that produces the
//! conditioning for scale `i` holds `i` tokens: the task token (broadcast)
//! for the coarsest scale, and the previous scale's actions upsampled to `i`
//! rows for every later scale. A block-causal mask lets each span read only
//! itself and coarser spans, so the features for scale `i` never depend on
//! finer-scale inputs.

use std::ops::Range;
use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::multiscale::ScaleSchedule;
use crate::nn::{heads_for, AdaLnBlock, Bound, Init, Linear, ParamBuilder, ParamId};
use crate::numerics::{AttentionMask, Graph, Tensor, Var};

/// Positions of each scale's span in the flattened sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleLayout {
    schedule: ScaleSchedule,
    spans: Vec<Range<usize>>,
}

impl ScaleLayout {
    pub fn new(schedule: &ScaleSchedule) -> Self {
        let mut start = 0;
        let spans = schedule
            .scales()
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        Self { schedule: schedule.clone(), spans }
    }

    /// Rebuilds a layout from explicit spans, checking contiguity.
    pub fn from_spans(schedule: &ScaleSchedule, spans: Vec<Range<usize>>) -> Result<Self> {
        let expected = Self::new(schedule);
        if spans != expected.spans {
            return Err(Error::Layout(format!("spans {spans:?} do not match schedule {schedule}")));
        }
        Ok(expected)
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn num_spans(&self) -> usize {
        self.spans.len()
    }

    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, |r| r.end)
    }

    /// Sequence length when only the first `n` spans are present.
    pub fn prefix_len(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            self.spans[n - 1].end
        }
    }

    /// Span index of each position.
    pub fn span_index(&self) -> Vec<usize> {
        self.spans
            .iter()
            .enumerate()
            .flat_map(|(k, r)| std::iter::repeat(k).take(r.len()))
            .collect()
    }
}

/// Block-causal mask over the first `num_spans` spans. With `strict`, a
/// token reads coarser spans and itself only.
pub fn build_mask(layout: &ScaleLayout, num_spans: usize, strict: bool) -> AttentionMask {
    let span_of = layout.span_index();
    let len = layout.prefix_len(num_spans);
    AttentionMask::from_fn(len, |q, k| {
        if strict {
            span_of[k] < span_of[q] || k == q
        } else {
            span_of[k] <= span_of[q]
        }
    })
    .expect("diagonal is always permitted")
}

/// Sum of the divisors of `n`: an upper bound on the sequence length of any
/// schedule for chunk length `n`.
fn divisor_sum(n: usize) -> usize {
    (1..=n).filter(|d| n % d == 0).sum()
}

#[derive(Clone, Debug)]
pub struct ScaleAr {
    in_proj: Linear,
    pos_emb: ParamId,
    scale_emb: ParamId,
    blocks: Vec<AdaLnBlock>,
    out_proj: Linear,
    layout: ScaleLayout,
    masks: Vec<Arc<AttentionMask>>,
    hidden: usize,
    action_dim: usize,
}

impl ScaleAr {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, schedule: &ScaleSchedule) -> Self {
        let h = cfg.hidden;
        let layout = ScaleLayout::new(schedule);
        let masks = (1..=layout.num_spans())
            .map(|n| Arc::new(build_mask(&layout, n, cfg.strict_mask)))
            .collect();
        b.scoped("scalear", |b| Self {
            in_proj: b.linear("in_proj", cfg.action_dim, h, Init::XavierUniform),
            pos_emb: b.tensor("pos_emb", divisor_sum(cfg.chunk_len), h, Init::Normal(0.02)),
            scale_emb: b.tensor("scale_emb", cfg.chunk_len + 1, h, Init::Normal(0.02)),
            blocks: (0..cfg.ar_depth)
                .map(|i| b.scoped(&format!("block{i}"), |b| AdaLnBlock::new(b, h, cfg.mlp_ratio, heads_for(h))))
                .collect(),
            out_proj: b.linear("out_proj", h, h, Init::XavierUniform),
            layout,
            masks,
            hidden: h,
            action_dim: cfg.action_dim,
        })
    }

    pub fn layout(&self) -> &ScaleLayout {
        &self.layout
    }

    pub fn mask(&self, num_spans: usize) -> &Arc<AttentionMask> {
        &self.masks[num_spans - 1]
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Interleaves per-example spans into the flattened sequence
    /// `[B · prefix_len, H]`, example-major.
    ///
    /// `task_rows` holds the coarsest span (`B · S₀` rows) and
    /// `span_inputs[k - 1]` the `B · S_k` rows of span `k`.
    pub fn assemble_input(
        &self,
        g: &mut Graph,
        task_rows: Var,
        span_inputs: &[Var],
        batch: usize,
    ) -> Result<Var> {
        let num_spans = span_inputs.len() + 1;
        if num_spans > self.layout.num_spans() {
            return Err(Error::Layout(format!(
                "{num_spans} spans for a layout of {}",
                self.layout.num_spans()
            )));
        }
        let parts: Vec<Var> = std::iter::once(task_rows).chain(span_inputs.iter().copied()).collect();
        let mut offsets = Vec::with_capacity(num_spans);
        let mut off = 0;
        for (k, &part) in parts.iter().enumerate() {
            let want = batch * self.layout.spans()[k].len();
            let t = g.value(part);
            if t.rows() != want || t.cols() != self.hidden {
                return Err(Error::Layout(format!(
                    "span {k} expects [{want}, {}], got {:?}",
                    self.hidden,
                    t.shape()
                )));
            }
            offsets.push(off);
            off += want;
        }
        let stacked = g.concat_rows(&parts)?;
        let mut index = Vec::with_capacity(off);
        for b in 0..batch {
            for (k, span) in self.layout.spans()[..num_spans].iter().enumerate() {
                let len = span.len();
                index.extend((0..len).map(|r| offsets[k] + b * len + r));
            }
        }
        g.gather_rows(stacked, index)
    }

    /// Builds the embedded sequence: task token broadcast over the coarsest
    /// span, projected coarse actions in later spans, plus positional and
    /// scale embeddings.
    ///
    /// `task_tokens` is `[B, H]`; `coarse[k - 1]` is `[B · S_k, A]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, task_tokens: Var, coarse: &[Tensor]) -> Result<Var> {
        let batch = g.value(task_tokens).rows();
        let s0 = self.layout.spans()[0].len();
        let task_rows = g.gather_rows(task_tokens, (0..batch).flat_map(|b| std::iter::repeat(b).take(s0)).collect())?;
        let mut inputs = Vec::with_capacity(coarse.len());
        for c in coarse {
            if c.cols() != self.action_dim {
                return Err(Error::Layout(format!("coarse actions have width {}, expected {}", c.cols(), self.action_dim)));
            }
            let x = g.constant(c.clone());
            inputs.push(self.in_proj.forward(g, p, x)?);
        }
        let z = self.assemble_input(g, task_rows, &inputs, batch)?;
        let num_spans = coarse.len() + 1;
        let len = self.layout.prefix_len(num_spans);
        let scales = self.layout.schedule().scales();
        let span_of = self.layout.span_index();
        let pos = g.gather_rows(p[self.pos_emb], (0..batch).flat_map(|_| 0..len).collect())?;
        let sc = g.gather_rows(
            p[self.scale_emb],
            (0..batch).flat_map(|_| span_of[..len].iter().map(|&k| scales[k])).collect(),
        )?;
        let z = g.add(z, pos)?;
        g.add(z, sc)
    }

    /// Runs the blocks over `z` (`[B · prefix_len, H]`) modulated by the
    /// global condition `[B, H]`. Output rows mirror the input layout.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, c_global: Var, num_spans: usize) -> Result<Var> {
        let mask = self.mask(num_spans);
        let len = mask.len();
        let batch = g.value(c_global).rows();
        if g.value(z).rows() != batch * len {
            return Err(Error::Layout(format!(
                "sequence has {} rows, expected {batch} × {len}",
                g.value(z).rows()
            )));
        }
        let expand: Vec<usize> = (0..batch * len).map(|r| r / len).collect();
        let cond = g.silu(c_global);
        let mut x = z;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x, cond, Some(&expand), mask)?;
            if !g.value(x).all_finite() {
                return Err(Error::Numeric(format!("non-finite activation after scale-wise block {i}")));
            }
        }
        let x = g.layer_norm(x);
        self.out_proj.forward(g, p, x)
    }

    /// Rows of span `k` for every example, `[B · S_k, H]`.
    pub fn select_span(&self, g: &mut Graph, out: Var, batch: usize, num_spans: usize, k: usize) -> Result<Var> {
        let len = self.layout.prefix_len(num_spans);
        let span = self.layout.spans()[k].clone();
        let index = (0..batch).flat_map(|b| span.clone().map(move |r| b * len + r)).collect();
        g.gather_rows(out, index)
    }
}
