//! Transformer-PSM: chunk encoder, attention aggregator and chunk-local
//! inference head, evaluated either with the static tree scan over chunk
//! encodings or token by token with the binary-counter scan.
//!
//! All three modules are stacks of pre-norm transformer blocks with learned
//! window-local absolute positions. The aggregator attends causally over the
//! concatenation `[s; x]` of two chunk states and compresses the `2c` outputs
//! back to `c` rows, either by keeping the second half or with a learned
//! `c × 2c` mixing matrix over positions.
//!
//! Streaming decode keeps a per-layer key/value cache inside the inference
//! window. Every kernel here is row-independent, so the cached path produces
//! the same bits as a full-window forward.

use rayon::prelude::*;

use crate::error::{PsmError, Result};
use crate::scan::{blelloch_par, Aggregator, CounterState, ScanTrace, StateElement};
use crate::tensor::{attend_row, matmul, seeded_init, Matrix};
use crate::weights::{Manifest, WeightBundle};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    /// Keep the last `c` of the `2c` aggregator outputs.
    DropFirstHalf,
    /// Mix the `2c` outputs down to `c` with a learned `c × 2c` matrix.
    LinearProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsmConfig {
    pub chunk: usize,
    pub dim: usize,
    pub heads: usize,
    pub agg_layers: usize,
    pub inf_layers: usize,
    pub vocab: usize,
    pub compression: Compression,
}

impl PsmConfig {
    pub fn new(chunk: usize, dim: usize, heads: usize, layers: usize, vocab: usize) -> Self {
        Self {
            chunk,
            dim,
            heads,
            agg_layers: layers,
            inf_layers: layers,
            vocab,
            compression: Compression::DropFirstHalf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PsmError::InvalidConfig(m.to_string()));
        if self.chunk == 0 {
            return bad("chunk size must be at least 1");
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("model dim must be a positive multiple of heads");
        }
        if self.agg_layers == 0 || self.inf_layers == 0 {
            return bad("layer counts must be at least 1");
        }
        if self.vocab == 0 {
            return bad("vocabulary must be non-empty");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * MLP_RATIO
    }

    /// Parameter names and shapes, grouped by `embed.`, `enc.`, `agg.` and `inf.`.
    pub fn manifest(&self) -> Manifest {
        let (c, d, h) = (self.chunk, self.dim, self.mlp_dim());
        let mut m: Manifest = vec![("embed.tok".into(), self.vocab, d)];
        let mut stack = |prefix: &str, window: usize, layers: usize| {
            m.push((format!("{prefix}.pos"), window, d));
            for l in 0..layers {
                let b = format!("{prefix}.block{l}");
                for (name, r, cols) in [
                    ("ln1.g", 1, d),
                    ("ln1.b", 1, d),
                    ("attn.wq", d, d),
                    ("attn.wk", d, d),
                    ("attn.wv", d, d),
                    ("attn.wo", d, d),
                    ("ln2.g", 1, d),
                    ("ln2.b", 1, d),
                    ("mlp.w1", d, h),
                    ("mlp.b1", 1, h),
                    ("mlp.w2", h, d),
                    ("mlp.b2", 1, d),
                ] {
                    m.push((format!("{b}.{name}"), r, cols));
                }
            }
        };
        stack("enc", c, 1);
        stack("agg", 2 * c, self.agg_layers);
        stack("inf", 2 * c, self.inf_layers);
        if self.compression == Compression::LinearProjection {
            m.push(("agg.compress".into(), c, 2 * c));
        }
        m.push(("inf.ln_f.g".into(), 1, d));
        m.push(("inf.ln_f.b".into(), 1, d));
        m.push(("inf.readout".into(), d, self.vocab));
        m
    }

    /// Seeded weights: layer-norm gains 1, biases 0, everything else uniform
    /// with a fan-in scale.
    pub fn init_weights(&self, seed: u64) -> WeightBundle {
        let mut w = WeightBundle::new();
        for (i, (name, r, c)) in self.manifest().into_iter().enumerate() {
            let m = if name.ends_with(".g") {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Matrix::zeros(r, c)
            } else {
                let scale = if name == "embed.tok" {
                    1.0
                } else if name.ends_with(".pos") {
                    0.1
                } else {
                    1.0 / (r as f64).sqrt()
                };
                seeded_init(r, c, seed ^ (0xA076_1D64_78BD_642F_u64.wrapping_mul(i as u64 + 1)), scale)
            };
            w.insert(name, m).expect("manifest names are unique");
        }
        w
    }

    /// All-zero weights of the right shapes.
    pub fn zero_weights(&self) -> WeightBundle {
        let mut w = WeightBundle::new();
        for (name, r, c) in self.manifest() {
            w.insert(name, Matrix::zeros(r, c)).expect("manifest names are unique");
        }
        w
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerNorm {
    fn apply(&self, x: &Matrix) -> Matrix {
        let d = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= d;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * inv * self.gain[c] + self.bias[c];
            }
        }
        out
    }
}

fn add_bias(x: &mut Matrix, bias: &[f64]) {
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2: LayerNorm,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

/// Keys and values seen so far by one attention layer.
#[derive(Debug, Clone)]
struct LayerCache {
    keys: Matrix,
    values: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct StackCache {
    layers: Vec<LayerCache>,
}

impl StackCache {
    fn new(layers: usize, dim: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerCache {
                    keys: Matrix::zeros(0, dim),
                    values: Matrix::zeros(0, dim),
                })
                .collect(),
        }
    }

    fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }
}

impl Block {
    /// Runs new rows through the block, appending their keys and values to
    /// `cache`. Row `i` attends to every cached row plus new rows `0..=i`.
    fn forward(&self, x: &Matrix, cache: &mut LayerCache, heads: usize) -> Matrix {
        let d = x.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let past = cache.keys.rows();

        let a = self.ln1.apply(x);
        let q = matmul(&a, &self.wq).expect("block shapes validated");
        let k = matmul(&a, &self.wk).expect("block shapes validated");
        let v = matmul(&a, &self.wv).expect("block shapes validated");
        for r in 0..x.rows() {
            cache.keys.push_row(k.row(r));
            cache.values.push_row(v.row(r));
        }

        let mut attn = Matrix::zeros(x.rows(), d);
        let mut scores = Vec::with_capacity(cache.keys.rows());
        for i in 0..x.rows() {
            for h in 0..heads {
                let c0 = h * hd;
                let out = &mut attn.row_mut(i)[c0..c0 + hd];
                attend_row(
                    &q.row(i)[c0..c0 + hd],
                    &cache.keys,
                    &cache.values,
                    c0,
                    past + i + 1,
                    scale,
                    &mut scores,
                    out,
                );
            }
        }
        let mut h = x.clone();
        add_in_place(&mut h, &matmul(&attn, &self.wo).expect("block shapes validated"));

        let b = self.ln2.apply(&h);
        let mut m = matmul(&b, &self.w1).expect("block shapes validated");
        add_bias(&mut m, &self.b1);
        m.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut m = matmul(&m, &self.w2).expect("block shapes validated");
        add_bias(&mut m, &self.b2);
        add_in_place(&mut h, &m);
        h
    }
}

#[derive(Debug, Clone)]
struct Stack {
    pos: Matrix,
    blocks: Vec<Block>,
}

impl Stack {
    fn forward(&self, x: &Matrix, cache: &mut StackCache, heads: usize) -> Matrix {
        let mut h = x.clone();
        for (block, lc) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            h = block.forward(&h, lc, heads);
        }
        h
    }

    fn fresh_cache(&self) -> StackCache {
        StackCache::new(self.blocks.len(), self.pos.cols())
    }

    /// Adds positional rows `offset..offset + x.rows()` to `x`.
    fn with_positions(&self, x: &Matrix, offset: usize) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows() {
            for (v, p) in out.row_mut(r).iter_mut().zip(self.pos.row(offset + r)) {
                *v += p;
            }
        }
        out
    }
}

/// Validated, typed view of a Transformer-PSM weight bundle.
#[derive(Debug, Clone)]
pub struct PsmModel {
    cfg: PsmConfig,
    embed: Matrix,
    enc: Stack,
    agg: Stack,
    compress: Option<Matrix>,
    inf: Stack,
    ln_f: LayerNorm,
    readout: Matrix,
}

fn take_row(w: &WeightBundle, name: &str) -> Result<Vec<f64>> {
    Ok(w.get(name)?.row(0).to_vec())
}

fn load_stack(w: &WeightBundle, prefix: &str, layers: usize) -> Result<Stack> {
    let blocks = (0..layers)
        .map(|l| {
            let b = format!("{prefix}.block{l}");
            let g = |n: &str| w.get(&format!("{b}.{n}")).cloned();
            let r = |n: &str| take_row(w, &format!("{b}.{n}"));
            Ok(Block {
                ln1: LayerNorm {
                    gain: r("ln1.g")?,
                    bias: r("ln1.b")?,
                },
                wq: g("attn.wq")?,
                wk: g("attn.wk")?,
                wv: g("attn.wv")?,
                wo: g("attn.wo")?,
                ln2: LayerNorm {
                    gain: r("ln2.g")?,
                    bias: r("ln2.b")?,
                },
                w1: g("mlp.w1")?,
                b1: r("mlp.b1")?,
                w2: g("mlp.w2")?,
                b2: r("mlp.b2")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Stack {
        pos: w.get(&format!("{prefix}.pos"))?.clone(),
        blocks,
    })
}

impl PsmModel {
    pub fn new(cfg: PsmConfig, weights: &WeightBundle) -> Result<Self> {
        cfg.validate()?;
        for (name, r, c) in cfg.manifest() {
            let m = weights.get(&name)?;
            if m.shape() != (r, c) {
                return Err(PsmError::ManifestMismatch(format!(
                    "{name}: expected {r}x{c}, found {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self {
            cfg,
            embed: weights.get("embed.tok")?.clone(),
            enc: load_stack(weights, "enc", 1)?,
            agg: load_stack(weights, "agg", cfg.agg_layers)?,
            compress: match cfg.compression {
                Compression::DropFirstHalf => None,
                Compression::LinearProjection => Some(weights.get("agg.compress")?.clone()),
            },
            inf: load_stack(weights, "inf", cfg.inf_layers)?,
            ln_f: LayerNorm {
                gain: take_row(weights, "inf.ln_f.g")?,
                bias: take_row(weights, "inf.ln_f.b")?,
            },
            readout: weights.get("inf.readout")?.clone(),
        })
    }

    /// Model with freshly seeded weights.
    pub fn seeded(cfg: PsmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg, &cfg.init_weights(seed))
    }

    pub fn config(&self) -> &PsmConfig {
        &self.cfg
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(0, self.cfg.dim);
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(PsmError::TokenOutOfRange {
                    id: t,
                    vocab: self.cfg.vocab,
                });
            }
            out.push_row(self.embed.row(t));
        }
        Ok(out)
    }

    fn check_chunk(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.cfg.chunk {
            return Err(PsmError::dim("chunk", self.cfg.chunk, tokens.len()));
        }
        Ok(())
    }

    fn check_state(&self, s: &Matrix) -> Result<()> {
        if s.shape() != (self.cfg.chunk, self.cfg.dim) {
            return Err(PsmError::dim(
                "chunk state",
                format!("{}x{}", self.cfg.chunk, self.cfg.dim),
                format!("{}x{}", s.rows(), s.cols()),
            ));
        }
        Ok(())
    }

    /// `Enc`: embeds the `c` tokens and runs one causal block over them.
    pub fn encode_chunk(&self, tokens: &[usize]) -> Result<Matrix> {
        self.check_chunk(tokens)?;
        let x = self.enc.with_positions(&self.embed_tokens(tokens)?, 0);
        Ok(self.enc.forward(&x, &mut self.enc.fresh_cache(), self.cfg.heads))
    }

    /// `Agg(s, x)`: causal attention over `[s; x]`, compressed back to `c` rows.
    pub fn agg_attention(&self, s: &Matrix, x: &Matrix) -> Result<Matrix> {
        self.check_state(s)?;
        self.check_state(x)?;
        let joined = self.agg.with_positions(&s.vstack(x)?, 0);
        let h = self.agg.forward(&joined, &mut self.agg.fresh_cache(), self.cfg.heads);
        Ok(match &self.compress {
            None => h.slice_rows(self.cfg.chunk, 2 * self.cfg.chunk),
            Some(p) => matmul(p, &h)?,
        })
    }

    /// `Inf(s, C)`: logits (`c × vocab`) for the chunk's positions, attending
    /// causally over `[s; embedded chunk]`. State rows take positions
    /// `0..c`; chunk rows always take `c..2c`.
    pub fn infer_chunk(&self, s: &StateElement<Matrix>, tokens: &[usize]) -> Result<Matrix> {
        self.check_chunk(tokens)?;
        let c = self.cfg.chunk;
        let chunk = self.inf.with_positions(&self.embed_tokens(tokens)?, c);
        let window = match s {
            StateElement::Identity => chunk,
            StateElement::Value(s) => {
                self.check_state(s)?;
                self.inf.with_positions(s, 0).vstack(&chunk)?
            }
        };
        let h = self.inf.forward(&window, &mut self.inf.fresh_cache(), self.cfg.heads);
        let h = h.slice_rows(h.rows() - c, h.rows());
        self.logits(&h)
    }

    fn logits(&self, h: &Matrix) -> Result<Matrix> {
        matmul(&self.ln_f.apply(h), &self.readout)
    }

    /// Null chunk used to right-pad the static scan input.
    pub fn null_chunk(&self) -> Matrix {
        Matrix::zeros(self.cfg.chunk, self.cfg.dim)
    }

    pub fn aggregator(&self) -> AttentionAggregator<'_> {
        AttentionAggregator { model: self }
    }
}

/// [`PsmModel::agg_attention`] as a scan operator.
#[derive(Debug, Clone, Copy)]
pub struct AttentionAggregator<'m> {
    model: &'m PsmModel,
}

impl Aggregator for AttentionAggregator<'_> {
    type State = Matrix;

    fn combine(&self, left: &Matrix, right: &Matrix) -> Matrix {
        self.model
            .agg_attention(left, right)
            .expect("chunk states share the configured shape")
    }
}

/// Exclusive prefix states for every chunk, via the static tree scan.
/// The input is right-padded with `null` up to a power of two; padded
/// prefixes are dropped.
pub fn prefix_states_static<A>(encoded: &[A::State], null: &A::State, agg: &A) -> Result<Vec<StateElement<A::State>>>
where
    A: Aggregator + Sync,
    A::State: Send + Sync,
{
    let r = encoded.len();
    if r == 0 {
        return Ok(Vec::new());
    }
    let mut padded = encoded.to_vec();
    padded.resize(r.next_power_of_two(), null.clone());
    let mut prefixes = blelloch_par(&padded, agg)?.prefixes;
    prefixes.truncate(r);
    Ok(prefixes)
}

/// Streaming counterpart of [`prefix_states_static`]: feed chunk encodings
/// one at a time and read the prefix state for the next chunk.
#[derive(Debug, Clone)]
pub struct PrefixStream<T> {
    counter: CounterState<T>,
    trace: ScanTrace,
    current: StateElement<T>,
}

impl<T: Clone> Default for PrefixStream<T> {
    fn default() -> Self {
        Self {
            counter: CounterState::new(),
            trace: ScanTrace::new(),
            current: StateElement::Identity,
        }
    }
}

impl<T: Clone> PrefixStream<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prefix state covering every chunk pushed so far (identity before the first).
    pub fn current(&self) -> &StateElement<T> {
        &self.current
    }

    pub fn push<A: Aggregator<State = T>>(&mut self, x: T, agg: &A) -> Result<&StateElement<T>> {
        self.counter.insert(x, agg, &mut self.trace)?;
        self.current = StateElement::Value(self.counter.emit(agg, &mut self.trace)?);
        Ok(&self.current)
    }

    pub fn trace(&self) -> &ScanTrace {
        &self.trace
    }

    pub fn counter(&self) -> &CounterState<T> {
        &self.counter
    }
}

fn chunk_tokens(tokens: &[usize], c: usize) -> Result<std::slice::Chunks<'_, usize>> {
    if !tokens.len().is_multiple_of(c) {
        return Err(PsmError::ChunkMisaligned {
            len: tokens.len(),
            chunk: c,
        });
    }
    Ok(tokens.chunks(c))
}

/// Static evaluation: encode every chunk, tree-scan the encodings with the
/// attention aggregator, then run the inference head on each chunk with the
/// prefix of the chunks before it. Returns `n × vocab` logits.
pub fn psm_forward_static(model: &PsmModel, tokens: &[usize]) -> Result<Matrix> {
    let cfg = model.config();
    let chunks: Vec<&[usize]> = chunk_tokens(tokens, cfg.chunk)?.collect();
    let encoded = chunks
        .par_iter()
        .map(|ch| model.encode_chunk(ch))
        .collect::<Result<Vec<_>>>()?;
    let prefixes = prefix_states_static(&encoded, &model.null_chunk(), &model.aggregator())?;
    let per_chunk = chunks
        .par_iter()
        .zip(prefixes.par_iter())
        .map(|(ch, s)| model.infer_chunk(s, ch))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Matrix::zeros(0, cfg.vocab);
    for m in &per_chunk {
        for r in 0..m.rows() {
            out.push_row(m.row(r));
        }
    }
    Ok(out)
}

/// Token-at-a-time decoder holding `O(log r)` chunk states.
#[derive(Debug, Clone)]
pub struct PsmDecoder<'m> {
    model: &'m PsmModel,
    prefixes: PrefixStream<Matrix>,
    buf: Vec<usize>,
    cache: StackCache,
    tokens_seen: usize,
}

impl<'m> PsmDecoder<'m> {
    pub fn new(model: &'m PsmModel) -> Self {
        Self {
            model,
            prefixes: PrefixStream::new(),
            buf: Vec::with_capacity(model.cfg.chunk),
            cache: model.inf.fresh_cache(),
            tokens_seen: 0,
        }
    }

    /// Feeds one token and returns its logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let c = model.cfg.chunk;
        let row = model.embed_tokens(&[token])?;

        if self.buf.is_empty() {
            // new chunk: rebuild the window cache from the current prefix state
            self.cache = model.inf.fresh_cache();
            if let StateElement::Value(s) = self.prefixes.current() {
                let s = model.inf.with_positions(s, 0);
                model.inf.forward(&s, &mut self.cache, model.cfg.heads);
            }
        }
        let x = model.inf.with_positions(&row, c + self.buf.len());
        let h = model.inf.forward(&x, &mut self.cache, model.cfg.heads);
        let logits = model.logits(&h)?.into_data();

        self.buf.push(token);
        self.tokens_seen += 1;
        if self.buf.len() == c {
            let x = model.encode_chunk(&self.buf)?;
            self.prefixes.push(x, &model.aggregator())?;
            self.buf.clear();
        }
        Ok(logits)
    }

    pub fn trace(&self) -> &ScanTrace {
        self.prefixes.trace()
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    /// Chunk states currently held: occupied counter roots plus the prefix
    /// state in use by the inference window.
    pub fn live_chunk_states(&self) -> usize {
        self.prefixes.counter().occupied() + usize::from(!self.prefixes.current().is_identity())
    }

    /// Rows in the inference key/value cache.
    pub fn window_len(&self) -> usize {
        self.cache.len()
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `n × vocab`, row `t` produced when token `t` arrived.
    pub logits: Matrix,
    pub trace: ScanTrace,
    /// Largest [`PsmDecoder::live_chunk_states`] seen during the run.
    pub peak_live_states: usize,
}

/// Streams `tokens` through a [`PsmDecoder`].
pub fn psm_decode_stream(model: &PsmModel, tokens: &[usize]) -> Result<DecodeOutput> {
    let mut dec = PsmDecoder::new(model);
    let mut logits = Matrix::zeros(0, model.cfg.vocab);
    let mut peak = 0;
    for &t in tokens {
        logits.push_row(&dec.push(t)?);
        peak = peak.max(dec.live_chunk_states());
    }
    Ok(DecodeOutput {
        logits,
        trace: dec.trace().clone(),
        peak_live_states: peak,
    })
}

/// Reference KV-cache transformer with the same block structure, used as the
/// full-context decoding baseline.
#[derive(Debug, Clone)]
pub struct KvBaseline {
    heads: usize,
    embed: Matrix,
    stack: Stack,
    ln_f: LayerNorm,
    readout: Matrix,
    cache: StackCache,
    max_len: usize,
}

impl KvBaseline {
    /// `layers` seeded blocks; learned positions for up to `max_len` tokens.
    pub fn seeded(dim: usize, heads: usize, layers: usize, vocab: usize, max_len: usize, seed: u64) -> Result<Self> {
        let cfg = PsmConfig {
            chunk: max_len.div_ceil(2).max(1),
            dim,
            heads,
            agg_layers: 1,
            inf_layers: layers,
            vocab,
            compression: Compression::DropFirstHalf,
        };
        let model = PsmModel::seeded(cfg, seed)?;
        let cache = model.inf.fresh_cache();
        Ok(Self {
            heads,
            embed: model.embed,
            stack: model.inf,
            ln_f: model.ln_f,
            readout: model.readout,
            cache,
            max_len,
        })
    }

    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let pos = self.cache.len();
        if pos >= self.max_len {
            return Err(PsmError::InvalidConfig(format!("baseline context limit {} reached", pos)));
        }
        if token >= self.embed.rows() {
            return Err(PsmError::TokenOutOfRange {
                id: token,
                vocab: self.embed.rows(),
            });
        }
        let x = self.stack.with_positions(&Matrix::row_vector(self.embed.row(token)), pos);
        let h = self.stack.forward(&x, &mut self.cache, self.heads);
        Ok(matmul(&self.ln_f.apply(&h), &self.readout)?.into_data())
    }
}

/// Seeded token ids uniform over the vocabulary.
pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let u = seeded_init(1, n, seed, 0.5);
    u.data()
        .iter()
        .map(|v| (((v + 0.5) * vocab as f64) as usize).min(vocab - 1))
        .collect()
}

/// Largest absolute difference between two chunk states.
pub fn state_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c: usize) -> PsmModel {
        PsmModel::seeded(PsmConfig::new(c, 8, 2, 1, 11), 3).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PsmConfig::new(0, 8, 2, 1, 4).validate().is_err());
        assert!(PsmConfig::new(2, 9, 2, 1, 4).validate().is_err());
        assert!(PsmConfig::new(2, 8, 2, 0, 4).validate().is_err());
        assert!(PsmConfig::new(2, 8, 2, 1, 0).validate().is_err());
        assert!(PsmConfig::new(2, 8, 2, 1, 4).validate().is_ok());
    }

    #[test]
    fn manifest_groups_and_loading() {
        let cfg = PsmConfig::new(2, 8, 2, 2, 5);
        let names: Vec<String> = cfg.manifest().into_iter().map(|m| m.0).collect();
        assert!(names.iter().all(|n| ["embed.", "enc.", "agg.", "inf."].iter().any(|p| n.starts_with(p))));
        assert!(!names.contains(&"agg.compress".to_string()));

        let mut w = cfg.init_weights(1);
        assert!(w.check_manifest(&cfg.manifest()).is_ok());
        *w.get_mut("inf.readout").unwrap() = Matrix::zeros(8, 6);
        assert!(matches!(PsmModel::new(cfg, &w), Err(PsmError::ManifestMismatch(_))));

        let mut lin = cfg;
        lin.compression = Compression::LinearProjection;
        assert!(matches!(PsmModel::new(lin, &cfg.init_weights(1)), Err(PsmError::MissingWeight(_))));
    }

    #[test]
    fn encode_is_deterministic_and_checks_length() {
        let m = small(3);
        let a = m.encode_chunk(&[1, 2, 3]).unwrap();
        assert!(a.bits_eq(&m.encode_chunk(&[1, 2, 3]).unwrap()));
        assert_eq!(a.shape(), (3, 8));
        assert!(m.encode_chunk(&[1, 2]).is_err());
        assert!(matches!(m.encode_chunk(&[1, 2, 99]), Err(PsmError::TokenOutOfRange { .. })));
    }

    #[test]
    fn zero_weights_aggregator_keeps_residual() {
        let cfg = PsmConfig::new(3, 8, 2, 2, 7);
        let m = PsmModel::new(cfg, &cfg.zero_weights()).unwrap();
        let s = seeded_init(3, 8, 1, 1.0);
        let x = seeded_init(3, 8, 2, 1.0);
        assert!(m.agg_attention(&s, &x).unwrap().bits_eq(&x));
    }

    #[test]
    fn aggregator_shape_errors() {
        let m = small(2);
        assert!(m.agg_attention(&Matrix::zeros(2, 8), &Matrix::zeros(3, 8)).is_err());
        assert!(m.infer_chunk(&StateElement::Value(Matrix::zeros(2, 7)), &[0, 1]).is_err());
    }

    #[test]
    fn linear_projection_compression() {
        let mut cfg = PsmConfig::new(2, 8, 2, 1, 7);
        cfg.compression = Compression::LinearProjection;
        let m = PsmModel::seeded(cfg, 5).unwrap();
        let s = m.encode_chunk(&[0, 1]).unwrap();
        let x = m.encode_chunk(&[2, 3]).unwrap();
        assert_eq!(m.agg_attention(&s, &x).unwrap().shape(), (2, 8));
        let tokens = random_tokens(16, 7, 1);
        let a = psm_forward_static(&m, &tokens).unwrap();
        let b = psm_decode_stream(&m, &tokens).unwrap().logits;
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn misaligned_stream_is_rejected() {
        let m = small(4);
        assert!(matches!(
            psm_forward_static(&m, &[1, 2, 3, 4, 5]),
            Err(PsmError::ChunkMisaligned { len: 5, chunk: 4 })
        ));
    }

    #[test]
    fn single_chunk_matches_infer() {
        let m = small(4);
        let tokens = [3, 1, 4, 1];
        let a = psm_forward_static(&m, &tokens).unwrap();
        let b = m.infer_chunk(&StateElement::Identity, &tokens).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn two_chunks_compose_by_hand() {
        let m = small(2);
        let tokens = [5, 6, 7, 8];
        let a = psm_forward_static(&m, &tokens).unwrap();
        let x0 = m.encode_chunk(&tokens[..2]).unwrap();
        let chunk1 = m.infer_chunk(&StateElement::Value(x0), &tokens[2..]).unwrap();
        assert!(a.slice_rows(2, 4).bits_eq(&chunk1));
    }

    #[test]
    fn decoder_prefix_after_first_chunk_is_its_encoding() {
        let m = small(2);
        let mut dec = PsmDecoder::new(&m);
        dec.push(1).unwrap();
        dec.push(2).unwrap();
        let x0 = m.encode_chunk(&[1, 2]).unwrap();
        assert_eq!(dec.prefixes.current().value().map(|s| s.bits_eq(&x0)), Some(true));
        assert_eq!(dec.trace().insert_agg_calls + dec.trace().emit_agg_calls, 0);
    }

    #[test]
    fn static_and_decode_agree() {
        for c in [1, 2, 3] {
            let m = small(c);
            let tokens = random_tokens(c * 11, 11, c as u64);
            let a = psm_forward_static(&m, &tokens).unwrap();
            let out = psm_decode_stream(&m, &tokens).unwrap();
            assert!(a.bits_eq(&out.logits), "c = {c}");
        }
    }

    #[test]
    fn baseline_decodes() {
        let mut b = KvBaseline::seeded(8, 2, 2, 5, 4, 1).unwrap();
        for t in [0, 1, 2, 3] {
            assert_eq!(b.push(t).unwrap().len(), 5);
        }
        assert!(b.push(0).is_err());
    }

    #[test]
    fn random_tokens_in_range() {
        let t = random_tokens(1000, 7, 3);
        assert!(t.iter().all(|&x| x < 7));
        assert!((0..7).all(|v| t.contains(&v)));
    }
}
