//! Sequence and description embedding.
//!
//! An event contributes its type-text token rows followed by one temporal
//! row (the inclusion mode may drop either kind). The rows of a sequence go
//! through the backbone, a subset of the final hidden states is selected,
//! and the subset is pooled into one vector. Descriptions are tokenized,
//! run through the same backbone and pooled over every token.
//!
//! Batches are packed: every item occupies its own block of rows and
//! attention never crosses blocks, so no padding is involved on the training
//! path. [`embed_batch`] implements the padded path for callers that need it.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamStore, Reduce, Segment};
use crate::backbone::{EncoderBackbone, Tokenizer};
use crate::data::{
    normalize_times, serialize_sequence_as_text, DescribedSequence, EventSequence, DEFAULT_TIME_DECIMALS,
};
use crate::error::{Error, Result};
use crate::temporal::{encode_times, TemporalEncodingConfig};
use crate::tensor::{Mat, Scalar};

closed_enum!(
    /// Which row kinds make up an event's input representation.
    InclusionMode {
        TemporalOnly => "TEMPORAL_ONLY",
        TextualOnly => "TEXTUAL_ONLY",
        All => "ALL",
    }
);

closed_enum!(
    /// Which final-layer hidden states of a sequence feed the pooling step.
    SelectionMode {
        TemporalTokens => "TEMPORAL_TOKENS",
        TemporalPlusLastType => "TEMPORAL_PLUS_LAST_TYPE",
        AllTokens => "ALL_TOKENS",
    }
);

closed_enum!(
    /// How the sequence side reaches the backbone: as event rows, or as its
    /// serialized `time,type` text (the text baseline).
    SequenceView {
        Events => "EVENTS",
        SerializedText => "SERIALIZED_TEXT",
    }
);

closed_enum!(
    PoolingMode {
        Mean => "MEAN",
        Max => "MAX",
        LastToken => "LAST_TOKEN",
    }
);

impl PoolingMode {
    fn reduce(self) -> Reduce {
        match self {
            PoolingMode::Mean => Reduce::Mean,
            PoolingMode::Max => Reduce::Max,
            PoolingMode::LastToken => Reduce::Last,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    TypeText,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRow {
    pub role: TokenRole,
    pub event: usize,
    pub last_type_token: bool,
}

/// Role of every input row of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenRoleTrace {
    pub rows: Vec<TokenRow>,
}

impl TokenRoleTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        self.rows.iter().map(|r| r.role).collect()
    }

    /// Indices of the rows kept by `mode`, in input order.
    pub fn selected_rows(&self, mode: SelectionMode) -> Result<Vec<usize>> {
        let keep = |r: &TokenRow| match mode {
            SelectionMode::AllTokens => true,
            SelectionMode::TemporalTokens => r.role == TokenRole::Temporal,
            SelectionMode::TemporalPlusLastType => {
                r.role == TokenRole::Temporal || r.last_type_token
            }
        };
        if mode != SelectionMode::AllTokens
            && !self.rows.iter().any(|r| r.role == TokenRole::Temporal)
        {
            return Err(Error::Config(format!(
                "selection {mode} needs temporal rows, but the input has none (TEXTUAL_ONLY inclusion?)"
            )));
        }
        Ok(self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| keep(r))
            .map(|(i, _)| i)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub temporal: TemporalEncodingConfig,
    pub inclusion: InclusionMode,
    pub selection: SelectionMode,
    pub pooling: PoolingMode,
    pub view: SequenceView,
    /// Decimal places of times in the serialized-text view.
    pub time_decimals: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            temporal: TemporalEncodingConfig::default(),
            inclusion: InclusionMode::All,
            selection: SelectionMode::AllTokens,
            pooling: PoolingMode::Mean,
            view: SequenceView::Events,
            time_decimals: DEFAULT_TIME_DECIMALS,
        }
    }
}

impl EmbedConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            temporal: TemporalEncodingConfig::new(dim),
            ..Self::default()
        }
    }

    /// Rejects combinations that can never produce a selection.
    pub fn validate(&self) -> Result<()> {
        self.temporal.validate()?;
        if self.view == SequenceView::Events
            && self.inclusion == InclusionMode::TextualOnly
            && self.selection != SelectionMode::AllTokens
        {
            return Err(Error::Config(format!(
                "selection {} needs temporal rows, but inclusion is {}",
                self.selection, self.inclusion
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum RowSource {
    Token(usize),
    Time(usize),
}

/// Input layout of one sequence before any tensors exist.
#[derive(Clone, Debug)]
struct Layout {
    token_ids: Vec<usize>,
    times: Vec<f64>,
    order: Vec<RowSource>,
    trace: TokenRoleTrace,
}

fn layout_sequence(seq: &EventSequence, tok: &Tokenizer, inclusion: InclusionMode) -> Result<Layout> {
    if seq.is_empty() {
        return Err(Error::Empty("event sequence"));
    }
    let mut out = Layout {
        token_ids: Vec::new(),
        times: Vec::new(),
        order: Vec::new(),
        trace: TokenRoleTrace::default(),
    };
    for (j, e) in seq.events.iter().enumerate() {
        if inclusion != InclusionMode::TemporalOnly {
            let ids = tok.encode(&e.type_text);
            if ids.is_empty() {
                return Err(Error::EmptyTokenization(e.type_text.clone()));
            }
            let n = ids.len();
            for (k, id) in ids.into_iter().enumerate() {
                out.order.push(RowSource::Token(out.token_ids.len()));
                out.token_ids.push(id);
                out.trace.rows.push(TokenRow {
                    role: TokenRole::TypeText,
                    event: j,
                    last_type_token: k + 1 == n,
                });
            }
        }
        if inclusion != InclusionMode::TextualOnly {
            out.order.push(RowSource::Time(out.times.len()));
            out.times.push(e.t);
            out.trace.rows.push(TokenRow {
                role: TokenRole::Temporal,
                event: j,
                last_type_token: false,
            });
        }
    }
    Ok(out)
}

fn event_rows(e: &crate::data::Event, tok: &Tokenizer, cfg: &EmbedConfig) -> usize {
    match (cfg.view, cfg.inclusion) {
        // A serialized line is "t,type"; its tokens are the time's digit
        // groups followed by the type words.
        (SequenceView::SerializedText, _) => {
            tok.encode(&format!("{:.*} {}", cfg.time_decimals, e.t, e.type_text)).len()
        }
        (_, InclusionMode::TemporalOnly) => 1,
        (_, InclusionMode::TextualOnly) => tok.encode(&e.type_text).len(),
        (_, InclusionMode::All) => tok.encode(&e.type_text).len() + 1,
    }
}

/// Number of backbone rows `seq` occupies under `cfg`.
pub fn input_rows(seq: &EventSequence, tok: &Tokenizer, cfg: &EmbedConfig) -> usize {
    seq.events.iter().map(|e| event_rows(e, tok, cfg)).sum()
}

/// Keep the most recent events whose rows fit in `max_rows`, then shift the
/// times back to a zero start.
pub fn truncate_to_fit(
    seq: &EventSequence,
    tok: &Tokenizer,
    cfg: &EmbedConfig,
    max_rows: usize,
) -> EventSequence {
    let mut used = 0;
    let mut first = seq.events.len();
    for (j, e) in seq.events.iter().enumerate().rev() {
        let rows = event_rows(e, tok, cfg);
        if used + rows > max_rows {
            break;
        }
        used += rows;
        first = j;
    }
    let mut out = seq.clone();
    out.events.drain(..first);
    normalize_times(&out)
}

/// Copies of `items` whose sequences are cut, where needed, to the most
/// recent events that fit in `max_rows`.
pub fn fit_items(
    items: &[&DescribedSequence],
    tok: &Tokenizer,
    cfg: &EmbedConfig,
    max_rows: usize,
) -> Vec<DescribedSequence> {
    items
        .iter()
        .map(|d| {
            let mut d = (*d).clone();
            if input_rows(&d.sequence, tok, cfg) > max_rows {
                d.sequence = truncate_to_fit(&d.sequence, tok, cfg, max_rows);
            }
            d
        })
        .collect()
}

/// Materialise the packed input rows of several layouts in `g`.
fn pack_inputs<T: Scalar, B: EncoderBackbone<T>>(
    g: &mut Graph<'_, T>,
    backbone: &B,
    layouts: &[&Layout],
    temporal: &TemporalEncodingConfig,
) -> Result<(NodeId, Vec<Segment>)> {
    if temporal.dim != backbone.model_dim() {
        return Err(Error::Config(format!(
            "temporal dim {} differs from model_dim {}",
            temporal.dim,
            backbone.model_dim()
        )));
    }
    let all_ids: Vec<usize> = layouts.iter().flat_map(|l| l.token_ids.iter().copied()).collect();
    let all_times: Vec<f64> = layouts.iter().flat_map(|l| l.times.iter().copied()).collect();
    let n_tok = all_ids.len();
    let mut order = Vec::new();
    let mut segments = Vec::with_capacity(layouts.len());
    let (mut tok_off, mut time_off) = (0, 0);
    for l in layouts {
        if l.order.len() > backbone.max_positions() {
            return Err(Error::LengthOverflow {
                len: l.order.len(),
                max: backbone.max_positions(),
            });
        }
        segments.push(Segment::new(order.len(), l.order.len()));
        order.extend(l.order.iter().map(|s| match *s {
            RowSource::Token(k) => tok_off + k,
            RowSource::Time(k) => n_tok + time_off + k,
        }));
        tok_off += l.token_ids.len();
        time_off += l.times.len();
    }
    let mut parts = Vec::new();
    if n_tok > 0 {
        parts.push(backbone.token_embed(g, &all_ids)?);
    }
    if !all_times.is_empty() {
        let rows: Mat<T> = encode_times(&all_times, temporal)?;
        parts.push(g.input(rows));
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let x = if order.iter().enumerate().all(|(i, &r)| i == r) {
        stacked
    } else {
        g.select_rows(stacked, &order)?
    };
    Ok((x, segments))
}

/// Input rows of a single sequence and the role of every row.
pub fn build_event_inputs<T: Scalar, B: EncoderBackbone<T>>(
    g: &mut Graph<'_, T>,
    seq: &EventSequence,
    backbone: &B,
    temporal: &TemporalEncodingConfig,
    inclusion: InclusionMode,
) -> Result<(NodeId, TokenRoleTrace)> {
    let layout = layout_sequence(seq, backbone.tokenizer(), inclusion)?;
    let (x, _) = pack_inputs(g, backbone, &[&layout], temporal)?;
    Ok((x, layout.trace))
}

/// Keep the rows selected by `mode`.
pub fn select_hidden_states<T: Scalar>(
    g: &mut Graph<'_, T>,
    hidden: NodeId,
    trace: &TokenRoleTrace,
    mode: SelectionMode,
) -> Result<NodeId> {
    if g.value(hidden).rows() != trace.len() {
        return Err(Error::Shape("trace length differs from hidden-state rows".into()));
    }
    if mode == SelectionMode::AllTokens {
        return Ok(hidden);
    }
    let rows = trace.selected_rows(mode)?;
    g.select_rows(hidden, &rows)
}

/// Pool all rows of `hidden` into one `1 x d` row.
pub fn pool_node<T: Scalar>(g: &mut Graph<'_, T>, hidden: NodeId, mode: PoolingMode) -> Result<NodeId> {
    let rows = g.value(hidden).rows();
    if rows == 0 {
        return Err(Error::Empty("pooling input"));
    }
    g.segment_pool(hidden, &[Segment::new(0, rows)], mode.reduce())
}

/// Column-wise mean / max, or the last row.
pub fn pool<T: Scalar>(hidden: &Mat<T>, mode: PoolingMode) -> Result<Vec<T>> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let h = g.input(hidden.clone());
    let p = pool_node(&mut g, h, mode)?;
    Ok(g.value(p).data().to_vec())
}

/// Packed sequence embeddings (`B x d`) recorded in `g`.
pub fn embed_sequences_node<T: Scalar, B: EncoderBackbone<T>>(
    g: &mut Graph<'_, T>,
    backbone: &B,
    seqs: &[&EventSequence],
    cfg: &EmbedConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<NodeId> {
    if seqs.is_empty() {
        return Err(Error::Empty("sequence batch"));
    }
    cfg.validate()?;
    if cfg.view == SequenceView::SerializedText {
        let texts = seqs
            .iter()
            .map(|s| serialize_sequence_as_text(s, cfg.time_decimals))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        return embed_descriptions_node(g, backbone, &refs, cfg.pooling, dropout_rng);
    }
    let layouts = seqs
        .iter()
        .map(|s| layout_sequence(s, backbone.tokenizer(), cfg.inclusion))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Layout> = layouts.iter().collect();
    let (x, segments) = pack_inputs(g, backbone, &refs, &cfg.temporal)?;
    let h = backbone.forward_packed(g, x, &segments, None, dropout_rng)?;

    let (h, pooled_segments) = if cfg.selection == SelectionMode::AllTokens {
        (h, segments)
    } else {
        let mut rows = Vec::new();
        let mut segs = Vec::with_capacity(layouts.len());
        for (l, seg) in layouts.iter().zip(&segments) {
            let sel = l.trace.selected_rows(cfg.selection)?;
            segs.push(Segment::new(rows.len(), sel.len()));
            rows.extend(sel.into_iter().map(|r| seg.start + r));
        }
        (g.select_rows(h, &rows)?, segs)
    };
    g.segment_pool(h, &pooled_segments, cfg.pooling.reduce())
}

/// Packed description embeddings (`B x d`) recorded in `g`.
pub fn embed_descriptions_node<T: Scalar, B: EncoderBackbone<T>>(
    g: &mut Graph<'_, T>,
    backbone: &B,
    texts: &[&str],
    pooling: PoolingMode,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<NodeId> {
    if texts.is_empty() {
        return Err(Error::Empty("description batch"));
    }
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(texts.len());
    for t in texts {
        let tok = backbone.tokenize(t);
        if tok.is_empty() {
            return Err(Error::EmptyTokenization(t.to_string()));
        }
        if tok.len() > backbone.max_positions() {
            return Err(Error::LengthOverflow {
                len: tok.len(),
                max: backbone.max_positions(),
            });
        }
        segments.push(Segment::new(ids.len(), tok.len()));
        ids.extend(tok);
    }
    let x = backbone.token_embed(g, &ids)?;
    let h = backbone.forward_packed(g, x, &segments, None, dropout_rng)?;
    g.segment_pool(h, &segments, pooling.reduce())
}

pub fn embed_sequence<T: Scalar, B: EncoderBackbone<T>>(
    backbone: &B,
    seq: &EventSequence,
    cfg: &EmbedConfig,
) -> Result<Vec<T>> {
    let mut g = Graph::new(backbone.params());
    let e = embed_sequences_node(&mut g, backbone, &[seq], cfg, None)?;
    Ok(g.value(e).data().to_vec())
}

pub fn embed_description<T: Scalar, B: EncoderBackbone<T>>(
    backbone: &B,
    text: &str,
    pooling: PoolingMode,
) -> Result<Vec<T>> {
    let mut g = Graph::new(backbone.params());
    let e = embed_descriptions_node(&mut g, backbone, &[text], pooling, None)?;
    Ok(g.value(e).data().to_vec())
}

/// Inference over many sequences in packed chunks.
pub fn embed_sequences<T: Scalar, B: EncoderBackbone<T>>(
    backbone: &B,
    seqs: &[&EventSequence],
    cfg: &EmbedConfig,
    chunk: usize,
) -> Result<Mat<T>> {
    let mut rows = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let mut g = Graph::new(backbone.params());
        let e = embed_sequences_node(&mut g, backbone, part, cfg, None)?;
        rows.extend(g.value(e).to_rows());
    }
    Mat::from_rows(&rows)
}

/// Inference over many descriptions in packed chunks.
pub fn embed_descriptions<T: Scalar, B: EncoderBackbone<T>>(
    backbone: &B,
    texts: &[&str],
    pooling: PoolingMode,
    chunk: usize,
) -> Result<Mat<T>> {
    let mut rows = Vec::with_capacity(texts.len());
    for part in texts.chunks(chunk.max(1)) {
        let mut g = Graph::new(backbone.params());
        let e = embed_descriptions_node(&mut g, backbone, part, pooling, None)?;
        rows.extend(g.value(e).to_rows());
    }
    Mat::from_rows(&rows)
}

/// Item accepted by [`embed_batch`].
#[derive(Clone, Copy, Debug)]
pub enum EmbedItem<'a> {
    Sequence(&'a EventSequence),
    Text(&'a str),
}

/// Padded batch path: every item is right-padded with zero rows to the
/// longest item, padded rows are masked out of attention, and only valid
/// selected rows are pooled.
pub fn embed_batch<T: Scalar, B: EncoderBackbone<T>>(
    backbone: &B,
    items: &[EmbedItem<'_>],
    cfg: &EmbedConfig,
) -> Result<Mat<T>> {
    if items.is_empty() {
        return Err(Error::Empty("embedding batch"));
    }
    cfg.validate()?;
    let d = backbone.model_dim();
    let mut g = Graph::new(backbone.params());

    // Per item: unpadded input rows and the rows to pool (item-relative).
    let mut inputs = Vec::with_capacity(items.len());
    let mut pooled_rows = Vec::with_capacity(items.len());
    let serialized: Vec<Option<String>> = items
        .iter()
        .map(|item| match item {
            EmbedItem::Sequence(seq) if cfg.view == SequenceView::SerializedText => {
                serialize_sequence_as_text(seq, cfg.time_decimals).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    for (item, text) in items.iter().zip(&serialized) {
        let item = match text {
            Some(t) => EmbedItem::Text(t),
            None => *item,
        };
        match item {
            EmbedItem::Sequence(seq) => {
                let layout = layout_sequence(seq, backbone.tokenizer(), cfg.inclusion)?;
                let (x, _) = pack_inputs(&mut g, backbone, &[&layout], &cfg.temporal)?;
                pooled_rows.push(layout.trace.selected_rows(cfg.selection)?);
                inputs.push(x);
            }
            EmbedItem::Text(text) => {
                let ids = backbone.tokenize(text);
                if ids.is_empty() {
                    return Err(Error::EmptyTokenization(text.to_string()));
                }
                pooled_rows.push((0..ids.len()).collect());
                inputs.push(backbone.token_embed(&mut g, &ids)?);
            }
        }
    }
    let width = inputs.iter().map(|x| g.value(*x).rows()).max().unwrap_or(0);
    if width > backbone.max_positions() {
        return Err(Error::LengthOverflow {
            len: width,
            max: backbone.max_positions(),
        });
    }
    let mut parts = Vec::new();
    let mut mask = Vec::with_capacity(items.len() * width);
    let mut segments = Vec::with_capacity(items.len());
    for (i, x) in inputs.iter().enumerate() {
        let len = g.value(*x).rows();
        parts.push(*x);
        if len < width {
            parts.push(g.input(Mat::zeros(width - len, d)));
        }
        mask.extend((0..width).map(|r| r < len));
        segments.push(Segment::new(i * width, width));
    }
    let x = g.concat_rows(&parts)?;
    let h = backbone.forward_packed(&mut g, x, &segments, Some(&mask), None)?;

    let mut rows = Vec::new();
    let mut pool_segs = Vec::with_capacity(items.len());
    for (i, sel) in pooled_rows.iter().enumerate() {
        pool_segs.push(Segment::new(rows.len(), sel.len()));
        rows.extend(sel.iter().map(|r| i * width + r));
    }
    let h = g.select_rows(h, &rows)?;
    // Description items always pool with the configured mode over all tokens.
    let e = g.segment_pool(h, &pool_segs, cfg.pooling.reduce())?;
    Ok(g.value(e).clone())
}
