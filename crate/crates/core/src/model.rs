//! Transformer encoder–decoder with three encoder variants.
//!
//! * `Baseline`: post-norm encoder layers over embeddings plus sinusoid rows.
//! * `Exgre`: after every layer a reorder predictor produces a real position
//!   per word, the Gaussian-selected sinusoid for that position is added to
//!   the layer output, and the sum feeds the next layer.
//! * `Refsr`: both of the above passes run over the same layer weights; a
//!   per-word sigmoid gate mixes the two top-layer outputs once.
//!
//! All sentences of a batch are packed row-wise without padding; attention
//! uses segment ranges instead of masks.

use std::fmt;
use std::ops::Range;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionLayout, Tape, Var, WindowGradient};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::positional::{gaussian_reorder_embedding, predict_positions, PositionalTable, WindowConfig};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Exgre,
    Refsr,
}

impl Variant {
    pub fn reorders(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Exgre => "exgre",
            Variant::Refsr => "refsr",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "exgre" => Ok(Variant::Exgre),
            "refsr" => Ok(Variant::Refsr),
            other => Err(Error::Config(format!("unknown variant {other:?} (baseline|exgre|refsr)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub variant: Variant,
    /// Weight of the reordering similarity term.
    pub lambda: f64,
    pub window: WindowConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            heads: 4,
            layers: 2,
            src_vocab: 0,
            tgt_vocab: 0,
            dropout: 0.1,
            max_len: 64,
            variant: Variant::Baseline,
            lambda: 0.0,
            window: WindowConfig::default(),
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model must be even, got {}", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("layers, d_ff and max_len must be positive".into());
        }
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return bad("vocabularies must contain tokens beyond the four reserved ones".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.variant == Variant::Baseline {
            return bad("lambda > 0 needs the exgre or refsr variant".into());
        }
        if !(self.window.half_width > 0.0 && self.window.sigma > 0.0) {
            return bad("window half-width and sigma must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: AttentionParams,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: AttentionParams,
    norm1: Norm,
    cross: AttentionParams,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

/// Per-layer `W` (`d×d`) and `u` (`d×1`) of the position predictor.
#[derive(Debug, Clone, Copy)]
struct ReorderPredictor {
    w: ParamId,
    u: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FusionGate {
    u_plain: ParamId,
    w_reordered: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    predictors: Vec<ReorderPredictor>,
    gate: Option<FusionGate>,
    output: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.store.insert_uniform(format!("{name}.w"), fan_in, fan_out, &mut self.rng)?,
            b: self.store.insert_filled(format!("{name}.b"), 1, fan_out, 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.store.insert_filled(format!("{name}.gain"), 1, d, 1.0)?,
            bias: self.store.insert_filled(format!("{name}.bias"), 1, d, 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, d_ff)?,
            outer: self.linear(&format!("{name}.outer"), d_ff, d)?,
        })
    }

    /// Embedding rows with variance `1/d`; they are scaled by `sqrt(d)` on lookup.
    fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> Result<ParamId> {
        use rand::Rng;
        let bound = (3.0 / d as f64).sqrt();
        let data = (0..vocab * d).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.insert(name, Tensor::matrix(vocab, d, data)?)
    }
}

/// Which encoder sub-results to expose, and test-time overrides.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub dropout: f64,
    /// Replaces the learned fusion gate by a constant.
    pub gate: Option<f64>,
    /// Replaces every predicted position `b_j` by the word's own index `j`.
    pub source_order_positions: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train(config: &ModelConfig) -> Self {
        ForwardOptions { dropout: config.dropout, ..Default::default() }
    }
}

/// Packed source sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
}

impl SourceBatch {
    pub fn new(sentences: &[&[usize]]) -> Self {
        SourceBatch {
            ids: sentences.iter().flat_map(|s| s.iter().copied()).collect(),
            lens: sentences.iter().map(|s| s.len()).collect(),
        }
    }

    pub fn segments(&self) -> Vec<Range<usize>> {
        segments(&self.lens)
    }

    /// Sentence length for every packed row.
    pub fn row_lens(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&n| std::iter::repeat_n(n, n)).collect()
    }

    /// Position index within its sentence for every packed row.
    pub fn row_positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&n| 0..n).collect()
    }
}

pub(crate) fn segments(lens: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    lens.iter()
        .map(|&n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Encoder results. `output` is what the decoder attends to.
pub struct EncoderOutput<'t> {
    pub output: Var<'t>,
    /// Top layer of the plain pass (baseline and refsr).
    pub plain: Option<Var<'t>>,
    /// Top layer of the reordering pass, `H̄^N` (exgre and refsr).
    pub reordered: Option<Var<'t>>,
    /// Predicted positions `B^n` per layer, each `rows×1`.
    pub positions: Vec<Var<'t>>,
    /// Reordering embeddings `PR^n` per layer.
    pub reorder_embeddings: Vec<Var<'t>>,
    /// Fusion gate, `rows×1` (refsr only).
    pub gate: Option<Var<'t>>,
}

impl<'t> EncoderOutput<'t> {
    /// `PR^N`, the embedding supervised by the reordering loss.
    pub fn final_reorder_embedding(&self) -> Option<Var<'t>> {
        self.reorder_embeddings.last().copied()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    table: PositionalTable,
    layout: Layout,
}

type Bound<'t> = [Var<'t>];

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let d = config.d_model;
        let src_embed = b.embedding("src.embed", config.src_vocab, d)?;
        let tgt_embed = b.embedding("tgt.embed", config.tgt_vocab, d)?;
        let encoder = (0..config.layers)
            .map(|n| {
                Ok(EncoderLayer {
                    attn: b.attention(&format!("enc.{n}.attn"), d)?,
                    norm1: b.norm(&format!("enc.{n}.norm1"), d)?,
                    ffn: b.ffn(&format!("enc.{n}.ffn"), d, config.d_ff)?,
                    norm2: b.norm(&format!("enc.{n}.norm2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.layers)
            .map(|n| {
                Ok(DecoderLayer {
                    self_attn: b.attention(&format!("dec.{n}.self"), d)?,
                    norm1: b.norm(&format!("dec.{n}.norm1"), d)?,
                    cross: b.attention(&format!("dec.{n}.cross"), d)?,
                    norm2: b.norm(&format!("dec.{n}.norm2"), d)?,
                    ffn: b.ffn(&format!("dec.{n}.ffn"), d, config.d_ff)?,
                    norm3: b.norm(&format!("dec.{n}.norm3"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let predictors = if config.variant.reorders() {
            (0..config.layers)
                .map(|n| {
                    Ok(ReorderPredictor {
                        w: b.store.insert_uniform(format!("reorder.{n}.w"), d, d, &mut b.rng)?,
                        u: b.store.insert_uniform(format!("reorder.{n}.u"), d, 1, &mut b.rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let gate = if config.variant == Variant::Refsr {
            Some(FusionGate {
                u_plain: b.store.insert_uniform("gate.u", d, 1, &mut b.rng)?,
                w_reordered: b.store.insert_uniform("gate.w", d, 1, &mut b.rng)?,
            })
        } else {
            None
        };
        let output = b.linear("out", d, config.tgt_vocab)?;
        let table = PositionalTable::sinusoidal(config.max_len, d)?;
        Ok(Model {
            config,
            params,
            table,
            layout: Layout { src_embed, tgt_embed, encoder, decoder, predictors, gate, output },
        })
    }

    /// Rebuilds a model from a configuration and a parameter store with matching names.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn table(&self) -> &PositionalTable {
        &self.table
    }

    pub fn window_gradient(&self) -> WindowGradient {
        self.config.window.gradient
    }

    pub fn set_window_gradient(&mut self, gradient: WindowGradient) {
        self.config.window.gradient = gradient;
    }

    /// Names of the reorder-predictor parameters.
    pub fn predictor_param_ids(&self) -> Vec<ParamId> {
        self.layout.predictors.iter().flat_map(|p| [p.w, p.u]).collect()
    }

    pub fn gate_param_ids(&self) -> Vec<ParamId> {
        self.layout.gate.iter().flat_map(|g| [g.u_plain, g.w_reordered]).collect()
    }

    /// Parameter ids of encoder layer `n`'s self-attention and feed-forward sublayers.
    pub fn encoder_sublayer_param_ids(&self, n: usize) -> Vec<ParamId> {
        let l = &self.layout.encoder[n];
        let lin = |x: Linear| [x.w, x.b];
        [l.attn.q, l.attn.k, l.attn.v, l.attn.o, l.ffn.inner, l.ffn.outer]
            .into_iter()
            .flat_map(lin)
            .chain([l.norm1.gain, l.norm1.bias, l.norm2.gain, l.norm2.bias])
            .collect()
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        tape.bind_all(&self.params)
    }

    fn check_tokens(&self, ids: &[usize], lens: &[usize], vocab: usize, side: &str) -> Result<()> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(Error::Invalid(format!("{side} batch contains an empty sentence")));
        }
        if let Some(&n) = lens.iter().find(|&&n| n > self.config.max_len) {
            return Err(Error::Invalid(format!(
                "{side} sentence of length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if lens.iter().sum::<usize>() != ids.len() {
            return Err(Error::shape("batch", format!("{side} lengths do not cover {} ids", ids.len())));
        }
        if let Some(&t) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Invalid(format!("{side} token id {t} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    fn linear<'t>(&self, p: &Bound<'t>, l: Linear, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p[l.w.0])?.add_row(p[l.b.0])
    }

    fn norm<'t>(&self, p: &Bound<'t>, n: Norm, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[n.gain.0], p[n.bias.0], LN_EPS)
    }

    fn attend<'t>(
        &self,
        p: &Bound<'t>,
        a: AttentionParams,
        queries: Var<'t>,
        memory: Var<'t>,
        layout: &Rc<AttentionLayout>,
        dropout: f64,
    ) -> Result<Var<'t>> {
        let q = self.linear(p, a.q, queries)?;
        let k = self.linear(p, a.k, memory)?;
        let v = self.linear(p, a.v, memory)?;
        let ctx = q.attention(k, v, layout, dropout)?;
        self.linear(p, a.o, ctx)
    }

    fn feed_forward<'t>(&self, p: &Bound<'t>, f: FeedForward, x: Var<'t>, dropout: f64) -> Result<Var<'t>> {
        let h = self.linear(p, f.inner, x)?.relu().dropout(dropout);
        self.linear(p, f.outer, h)
    }

    /// Multi-head self-attention of encoder layer `layer` over packed rows.
    pub fn multi_head_self_attention<'t>(
        &self,
        p: &Bound<'t>,
        layer: usize,
        x: Var<'t>,
        lens: &[usize],
        causal: bool,
    ) -> Result<Var<'t>> {
        let segs = segments(lens);
        let layout = Rc::new(AttentionLayout { heads: self.config.heads, queries: segs.clone(), keys: segs, causal });
        self.attend(p, self.layout.encoder[layer].attn, x, x, &layout, 0.0)
    }

    fn embed<'t>(&self, p: &Bound<'t>, table: ParamId, ids: &[usize], lens: &[usize], dropout: f64) -> Result<Var<'t>> {
        let tape = p[table.0].tape();
        let d = self.config.d_model;
        let e = p[table.0].gather_rows(ids)?.scale((d as f64).sqrt());
        let pe: Vec<f64> = lens.iter().flat_map(|&n| self.table.prefix(n).iter().copied()).collect();
        let pe = tape.constant(ids.len(), d, pe)?;
        Ok(e.add(pe)?.dropout(dropout))
    }

    fn encoder_layer<'t>(
        &self,
        p: &Bound<'t>,
        l: &EncoderLayer,
        x: Var<'t>,
        layout: &Rc<AttentionLayout>,
        dropout: f64,
    ) -> Result<Var<'t>> {
        let att = self.attend(p, l.attn, x, x, layout, dropout)?.dropout(dropout);
        let c = self.norm(p, l.norm1, att.add(x)?)?;
        let f = self.feed_forward(p, l.ffn, c, dropout)?.dropout(dropout);
        self.norm(p, l.norm2, f.add(c)?)
    }

    fn self_layout(&self, lens: &[usize], causal: bool) -> Rc<AttentionLayout> {
        let segs = segments(lens);
        Rc::new(AttentionLayout { heads: self.config.heads, queries: segs.clone(), keys: segs, causal })
    }

    /// `H^N` of the plain encoder pass; available for every variant.
    pub fn encode_baseline<'t>(&self, p: &Bound<'t>, src: &SourceBatch, opts: &ForwardOptions) -> Result<Var<'t>> {
        self.check_tokens(&src.ids, &src.lens, self.config.src_vocab, "source")?;
        let layout = self.self_layout(&src.lens, false);
        let mut h = self.embed(p, self.layout.src_embed, &src.ids, &src.lens, opts.dropout)?;
        for l in &self.layout.encoder {
            h = self.encoder_layer(p, l, h, &layout, opts.dropout)?;
        }
        Ok(h)
    }

    /// Reordering pass: returns `(H̄^N, B^n per layer, PR^n per layer)`.
    #[allow(clippy::type_complexity)]
    pub fn encode_exgre<'t>(
        &self,
        p: &Bound<'t>,
        src: &SourceBatch,
        opts: &ForwardOptions,
    ) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<Var<'t>>)> {
        if !self.config.variant.reorders() {
            return Err(Error::Invalid("the baseline variant has no reorder predictors".into()));
        }
        self.check_tokens(&src.ids, &src.lens, self.config.src_vocab, "source")?;
        let tape = p[0].tape();
        let layout = self.self_layout(&src.lens, false);
        let row_lens = src.row_lens();
        let mut h = self.embed(p, self.layout.src_embed, &src.ids, &src.lens, opts.dropout)?;
        let mut positions = Vec::with_capacity(self.config.layers);
        let mut embeddings = Vec::with_capacity(self.config.layers);
        for (l, pred) in self.layout.encoder.iter().zip(&self.layout.predictors) {
            let hn = self.encoder_layer(p, l, h, &layout, opts.dropout)?;
            let b = if opts.source_order_positions {
                let own = src.row_positions().into_iter().map(|j| j as f64).collect();
                tape.constant(hn.rows(), 1, own)?
            } else {
                predict_positions(hn, p[pred.w.0], p[pred.u.0], &row_lens)?
            };
            let pr = gaussian_reorder_embedding(b, &self.table, self.config.window, &row_lens)?;
            h = hn.add(pr)?;
            positions.push(b);
            embeddings.push(pr);
        }
        Ok((h, positions, embeddings))
    }

    /// Both passes over shared sublayers, fused by a per-word gate.
    pub fn encode_refsr<'t>(&self, p: &Bound<'t>, src: &SourceBatch, opts: &ForwardOptions) -> Result<EncoderOutput<'t>> {
        let gate = self
            .layout
            .gate
            .ok_or_else(|| Error::Invalid(format!("the {} variant has no fusion gate", self.config.variant)))?;
        let plain = self.encode_baseline(p, src, opts)?;
        let (reordered, positions, reorder_embeddings) = self.encode_exgre(p, src, opts)?;
        let g = match opts.gate {
            Some(v) => p[0].tape().constant(plain.rows(), 1, vec![v; plain.rows()])?,
            None => plain
                .matmul(p[gate.u_plain.0])?
                .add(reordered.matmul(p[gate.w_reordered.0])?)?
                .sigmoid(),
        };
        let one_minus = g.scale(-1.0).add_scalar(1.0);
        let fused = reordered.mul_col(g)?.add(plain.mul_col(one_minus)?)?;
        Ok(EncoderOutput {
            output: fused,
            plain: Some(plain),
            reordered: Some(reordered),
            positions,
            reorder_embeddings,
            gate: Some(g),
        })
    }

    /// Encoder for the configured variant.
    pub fn encode<'t>(&self, p: &Bound<'t>, src: &SourceBatch, opts: &ForwardOptions) -> Result<EncoderOutput<'t>> {
        match self.config.variant {
            Variant::Baseline => {
                let h = self.encode_baseline(p, src, opts)?;
                Ok(EncoderOutput {
                    output: h,
                    plain: Some(h),
                    reordered: None,
                    positions: Vec::new(),
                    reorder_embeddings: Vec::new(),
                    gate: None,
                })
            }
            Variant::Exgre => {
                let (h, positions, reorder_embeddings) = self.encode_exgre(p, src, opts)?;
                Ok(EncoderOutput {
                    output: h,
                    plain: None,
                    reordered: Some(h),
                    positions,
                    reorder_embeddings,
                    gate: None,
                })
            }
            Variant::Refsr => self.encode_refsr(p, src, opts),
        }
    }

    /// Logits (`rows × tgt_vocab`) for packed decoder inputs attending to `memory`.
    pub fn decode<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        src_lens: &[usize],
        tgt_ids: &[usize],
        tgt_lens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<Var<'t>> {
        self.check_tokens(tgt_ids, tgt_lens, self.config.tgt_vocab, "target")?;
        if src_lens.len() != tgt_lens.len() {
            return Err(Error::shape(
                "decode",
                format!("{} source vs {} target sentences", src_lens.len(), tgt_lens.len()),
            ));
        }
        if memory.shape() != (src_lens.iter().sum(), self.config.d_model) {
            return Err(Error::shape("decode", format!("memory {:?} for source lengths {src_lens:?}", memory.shape())));
        }
        let self_layout = self.self_layout(tgt_lens, true);
        let cross_layout = Rc::new(AttentionLayout {
            heads: self.config.heads,
            queries: segments(tgt_lens),
            keys: segments(src_lens),
            causal: false,
        });
        let dr = opts.dropout;
        let mut x = self.embed(p, self.layout.tgt_embed, tgt_ids, tgt_lens, dr)?;
        for l in &self.layout.decoder {
            let a = self.attend(p, l.self_attn, x, x, &self_layout, dr)?.dropout(dr);
            let c = self.norm(p, l.norm1, a.add(x)?)?;
            let a = self.attend(p, l.cross, c, memory, &cross_layout, dr)?.dropout(dr);
            let e = self.norm(p, l.norm2, a.add(c)?)?;
            let f = self.feed_forward(p, l.ffn, e, dr)?.dropout(dr);
            x = self.norm(p, l.norm3, f.add(e)?)?;
        }
        self.linear(p, self.layout.output, x)
    }
}
