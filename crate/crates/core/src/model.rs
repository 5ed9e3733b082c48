//! The toy online transformer: strided frontend, chunkwise self-attention
//! encoder, and a pre-norm decoder whose cross-attention uses the
//! configured mechanism.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mechanism::{Lookahead, MechanismConfig};
use crate::tape::{Gradients, Tape, Var, WeightFn};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
/// Target positions carrying this id are ignored by the loss.
pub const PAD: usize = usize::MAX;
pub const FIRST_CONTENT: usize = 2;

/// Chunk sizes of the encoder: `central` frames per chunk plus `left` and
/// `right` context frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkLayout {
    pub central: usize,
    pub left: usize,
    pub right: usize,
}

impl ChunkLayout {
    pub fn new(central: usize, left: usize, right: usize) -> Result<Self> {
        let layout = Self { central, left, right };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.central < 1 {
            return Err(Error::Config("chunk length must be at least 1".into()));
        }
        Ok(())
    }

    /// Frames of look-ahead the encoder adds.
    pub fn latency_frames(&self) -> usize {
        self.right
    }

    /// Half-open range of frames that frame `t` may attend to.
    pub fn context_range(&self, t: usize, frames: usize) -> (usize, usize) {
        let chunk = t / self.central;
        let start = chunk * self.central;
        let end = (start + self.central).min(frames);
        (start.saturating_sub(self.left), (end + self.right).min(frames))
    }
}

/// `T x T` `{0,1}` mask of the chunkwise encoder.
pub fn chunk_mask(frames: usize, layout: &ChunkLayout) -> Matrix {
    let mut m = Matrix::zeros(frames, frames);
    for t in 0..frames {
        let (lo, hi) = layout.context_range(t, frames);
        for c in lo..hi {
            m.set(t, c, 1.0);
        }
    }
    m
}

/// Lower-triangular `{0,1}` mask for decoder self-attention.
pub fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in 0..=i {
            m.set(i, j, 1.0);
        }
    }
    m
}

/// Sinusoidal encoding; dimensions `2i` and `2i+1` carry
/// `sin`/`cos` of `t / 10000^(2i/d_m)`.
pub fn positional_encoding(frames: usize, d_model: usize) -> Result<Matrix> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut pe = Matrix::zeros(frames, d_model);
    for t in 0..frames {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.set(t, 2 * i, angle.sin());
            pe.set(t, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontendMode {
    /// keep every `stride`-th frame
    #[default]
    Pick,
    /// average each window of `stride` frames
    Average,
}

/// Reduces the frame rate by `stride`, producing `ceil(T / stride)` frames.
pub fn select_frames(features: &Matrix, stride: usize, mode: FrontendMode) -> Result<Matrix> {
    if stride < 1 {
        return Err(Error::Config("subsampling stride must be at least 1".into()));
    }
    if features.rows() == 0 {
        return Err(Error::Empty("features"));
    }
    let out_frames = features.rows().div_ceil(stride);
    let mut out = Matrix::zeros(out_frames, features.cols());
    for k in 0..out_frames {
        let lo = k * stride;
        match mode {
            FrontendMode::Pick => out.row_mut(k).copy_from_slice(features.row(lo)),
            FrontendMode::Average => {
                let hi = (lo + stride).min(features.rows());
                let row = out.row_mut(k);
                for r in lo..hi {
                    for (o, v) in row.iter_mut().zip(features.row(r)) {
                        *o += v;
                    }
                }
                let n = (hi - lo) as f64;
                row.iter_mut().for_each(|o| *o /= n);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub stride: usize,
    #[serde(default)]
    pub frontend: FrontendMode,
    pub chunk: ChunkLayout,
    pub mechanism: MechanismConfig,
}

impl ModelConfig {
    /// Small CPU-friendly configuration used by tests and the toy presets.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size,
            feature_dim,
            stride: 4,
            frontend: FrontendMode::Pick,
            chunk: ChunkLayout { central: 8, left: 8, right: 8 },
            mechanism: MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded },
        }
    }

    /// Desk configuration at full frame rate, so look-ahead counts raw toy frames.
    pub fn toy(vocab_size: usize, feature_dim: usize) -> Self {
        Self { stride: 1, ..Self::desk(vocab_size, feature_dim) }
    }

    /// 12-layer encoder, 6-layer decoder, width 256, 4 heads, chunks of 64.
    pub fn large(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            encoder_layers: 12,
            decoder_layers: 6,
            heads: 4,
            d_model: 256,
            d_ff: 2048,
            vocab_size,
            feature_dim,
            stride: 4,
            frontend: FrontendMode::Pick,
            chunk: ChunkLayout { central: 64, left: 64, right: 64 },
            mechanism: MechanismConfig::Dacs { max_lookahead: Lookahead::Bounded(14) },
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("feature_dim", self.feature_dim),
            ("stride", self.stride),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must be at least 3 (two reserved symbols plus content)".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sinusoidal positions".into()));
        }
        self.chunk.validate()?;
        self.mechanism.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in &mut self.values {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn register(&mut self, name: String, value: Matrix) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    pub norm_attn: Norm,
    pub attn: AttnParams,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: AttnParams,
    pub norm_cross: Norm,
    pub cross: AttnParams,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub frontend: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub embedding: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Norm,
    pub output: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.register(name, Matrix::from_raw(rows, cols, data))
    }

    fn filled(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.register(name, Matrix::filled(1, cols, v))
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Linear {
        Linear { w: self.weight(format!("{name}.w"), rows, cols), b: self.filled(format!("{name}.b"), cols, 0.0) }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { gain: self.filled(format!("{name}.gain"), d, 1.0), bias: self.filled(format!("{name}.bias"), d, 0.0) }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.weight(format!("{name}.wq"), d, d),
            wk: self.weight(format!("{name}.wk"), d, d),
            wv: self.weight(format!("{name}.wv"), d, d),
            wo: self.weight(format!("{name}.wo"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward { inner: self.linear(&format!("{name}.inner"), d, d_ff), outer: self.linear(&format!("{name}.outer"), d_ff, d) }
    }
}

fn build_layout(cfg: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let mut store = ParamStore::default();
    let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let d = cfg.d_model;
    let frontend = init.linear("frontend", cfg.feature_dim, d);
    let encoder = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayer {
                norm_attn: init.norm(&format!("{p}.norm_attn"), d),
                attn: init.attn(&format!("{p}.attn"), d),
                norm_ff: init.norm(&format!("{p}.norm_ff"), d),
                ff: init.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let encoder_norm = init.norm("encoder.norm", d);
    let embedding = init.weight("embedding".into(), cfg.vocab_size, d);
    let decoder = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayer {
                norm_self: init.norm(&format!("{p}.norm_self"), d),
                self_attn: init.attn(&format!("{p}.self_attn"), d),
                norm_cross: init.norm(&format!("{p}.norm_cross"), d),
                cross: init.attn(&format!("{p}.cross"), d),
                norm_ff: init.norm(&format!("{p}.norm_ff"), d),
                ff: init.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let decoder_norm = init.norm("decoder.norm", d);
    let output = init.linear("output", d, cfg.vocab_size);
    let layout = Layout { frontend, encoder, encoder_norm, embedding, decoder, decoder_norm, output };
    (store, layout)
}

/// Per-head cross-attention values recorded during a training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CrossHead {
    pub weights: Var,
    pub context: Var,
}

pub struct DecoderOutput {
    pub logits: Var,
    /// `[layer][head]`
    pub cross: Vec<Vec<CrossHead>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, seed);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the cross-attention mechanism without touching parameters.
    pub fn set_mechanism(&mut self, mech: MechanismConfig) -> Result<()> {
        mech.validate()?;
        self.config.mechanism = mech;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn p(&self, id: ParamId) -> &Matrix {
        self.params.get(id)
    }

    /// Replaces every parameter, checking names and shapes against this model.
    pub fn load_params(&mut self, named: Vec<(String, Matrix)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, found {}", self.params.len(), named.len())));
        }
        for (name, value) in named {
            let idx = self.params.index_of(&name).ok_or_else(|| Error::Config(format!("unexpected parameter `{name}`")))?;
            let expected = self.params.values[idx].shape();
            if value.shape() != expected {
                return Err(Error::Config(format!("parameter `{name}` has shape {:?}, config implies {expected:?}", value.shape())));
            }
            self.params.values[idx] = value;
        }
        Ok(())
    }

    /// Strided frontend followed by the learned projection to `d_model`.
    pub fn subsample_frontend(&self, features: &Matrix) -> Result<Matrix> {
        let mut f = Forward::new(self);
        let v = f.frontend(features)?;
        Ok(f.tape.value(v).clone())
    }

    /// Encoder output `T x d_model` for raw features.
    pub fn encode(&self, features: &Matrix) -> Result<Matrix> {
        let mut f = Forward::new(self);
        let v = f.encoder(features)?;
        Ok(f.tape.value(v).clone())
    }

    /// Teacher-forced logits `L x V` where `inputs` starts with SOS.
    pub fn decoder_logits(&self, encoder_states: &Matrix, inputs: &[usize]) -> Result<Matrix> {
        let mut f = Forward::new(self);
        let enc = f.tape.leaf(encoder_states.clone());
        let out = f.decoder(enc, inputs)?;
        Ok(f.tape.value(out.logits).clone())
    }

    /// Label-smoothed loss of one utterance and its gradient for every parameter.
    pub fn loss_and_grad(&self, features: &Matrix, tokens: &[usize], smoothing: f64) -> Result<(f64, Vec<Matrix>)> {
        let mut f = Forward::new(self);
        let root = f.utterance_loss(features, tokens, smoothing)?;
        let loss = f.tape.value(root).get(0, 0);
        let mut grads = f.tape.backward(root);
        Ok((loss, f.param_grads(&mut grads)))
    }

    pub fn loss(&self, features: &Matrix, tokens: &[usize], smoothing: f64) -> Result<f64> {
        let mut f = Forward::new(self);
        let root = f.utterance_loss(features, tokens, smoothing)?;
        Ok(f.tape.value(root).get(0, 0))
    }
}

/// Decoder input `[SOS, y_1..y_n]` and target `[y_1..y_n, EOS]` for a transcript.
pub fn teacher_forcing_pair(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(SOS);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS);
    (input, target)
}

/// One forward pass recorded on a tape, with parameters bound lazily as leaves.
pub struct Forward<'m> {
    pub tape: Tape,
    model: &'m Model,
    leaves: Vec<Option<Var>>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { tape: Tape::new(), model, leaves: vec![None; model.params.len()] }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.model.params.get(id).clone());
        self.leaves[id.0] = Some(v);
        v
    }

    /// Leaf variable of parameter `index`, if the pass touched it.
    pub fn param_var(&self, index: usize) -> Option<Var> {
        self.leaves[index]
    }

    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Matrix> {
        self.model
            .params
            .values
            .iter()
            .zip(&self.leaves)
            .map(|(m, leaf)| leaf.and_then(|v| grads.take(v)).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
            .collect()
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.param(l.w);
        let b = self.param(l.b);
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let g = self.param(n.gain);
        let b = self.param(n.bias);
        self.tape.layer_norm(x, g, b)
    }

    fn feed_forward(&mut self, x: Var, ff: FeedForward) -> Var {
        let h = self.linear(x, ff.inner);
        let h = self.tape.relu(h);
        self.linear(h, ff.outer)
    }

    fn self_attention(&mut self, x: Var, a: AttnParams, mask: &Arc<Matrix>) -> Result<Var> {
        let cfg = &self.model.config;
        let (heads, d_k) = (cfg.heads, cfg.d_k());
        let (wq, wk, wv, wo) = (self.param(a.wq), self.param(a.wk), self.param(a.wv), self.param(a.wo));
        let q = self.tape.matmul(x, wq);
        let k = self.tape.matmul(x, wk);
        let v = self.tape.matmul(x, wv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * d_k, d_k);
            let kh = self.tape.slice_cols(k, h * d_k, d_k);
            let vh = self.tape.slice_cols(v, h * d_k, d_k);
            let e = self.tape.energies(qh, kh);
            let w = self.tape.softmax(e, Some(mask))?;
            outs.push(self.tape.matmul(w, vh));
        }
        let cat = self.tape.concat_cols(&outs);
        Ok(self.tape.matmul(cat, wo))
    }

    fn cross_attention(&mut self, x: Var, enc: Var, a: AttnParams) -> Result<(Var, Vec<CrossHead>)> {
        let cfg = &self.model.config;
        let (heads, d_k, mech) = (cfg.heads, cfg.d_k(), cfg.mechanism);
        let (wq, wk, wv, wo) = (self.param(a.wq), self.param(a.wk), self.param(a.wv), self.param(a.wo));
        let q = self.tape.matmul(x, wq);
        let k = self.tape.matmul(enc, wk);
        let v = self.tape.matmul(enc, wv);
        let mut heads_out = Vec::with_capacity(heads);
        let mut recorded = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * d_k, d_k);
            let kh = self.tape.slice_cols(k, h * d_k, d_k);
            let vh = self.tape.slice_cols(v, h * d_k, d_k);
            let e = self.tape.energies(qh, kh);
            let w = match mech {
                MechanismConfig::Offline => self.tape.softmax(e, None)?,
                MechanismConfig::Dacs { .. } => {
                    let p = self.tape.sigmoid(e);
                    self.tape.weights(p, WeightFn::Dacs)
                }
                MechanismConfig::Hma => {
                    let p = self.tape.sigmoid(e);
                    self.tape.weights(p, WeightFn::Hma)
                }
                MechanismConfig::Mta => {
                    let p = self.tape.sigmoid(e);
                    self.tape.weights(p, WeightFn::Mta)
                }
                MechanismConfig::Mocha { window } => {
                    let p = self.tape.sigmoid(e);
                    let alpha = self.tape.weights(p, WeightFn::Hma);
                    self.tape.mocha(alpha, e, window)?
                }
                MechanismConfig::Smocha { window } => {
                    let p = self.tape.sigmoid(e);
                    let alpha = self.tape.weights(p, WeightFn::Smocha);
                    self.tape.mocha(alpha, e, window)?
                }
            };
            let c = self.tape.matmul(w, vh);
            heads_out.push(c);
            recorded.push(CrossHead { weights: w, context: c });
        }
        let cat = self.tape.concat_cols(&heads_out);
        Ok((self.tape.matmul(cat, wo), recorded))
    }

    pub fn frontend(&mut self, features: &Matrix) -> Result<Var> {
        let cfg = &self.model.config;
        if features.cols() != cfg.feature_dim {
            return Err(Error::dim("frontend", format!("feature width {} vs configured {}", features.cols(), cfg.feature_dim)));
        }
        let kept = select_frames(features, cfg.stride, cfg.frontend)?;
        let x = self.tape.leaf(kept);
        Ok(self.linear(x, self.model.layout.frontend))
    }

    pub fn encoder(&mut self, features: &Matrix) -> Result<Var> {
        let x = self.frontend(features)?;
        let frames = self.tape.value(x).rows();
        let cfg = &self.model.config;
        let pe = self.tape.leaf(positional_encoding(frames, cfg.d_model)?);
        let mask = Arc::new(chunk_mask(frames, &cfg.chunk));
        let mut x = self.tape.add(x, pe);
        let layers = self.model.layout.encoder.clone();
        for layer in layers {
            let h = self.norm(x, layer.norm_attn);
            let a = self.self_attention(h, layer.attn, &mask)?;
            x = self.tape.add(x, a);
            let h = self.norm(x, layer.norm_ff);
            let f = self.feed_forward(h, layer.ff);
            x = self.tape.add(x, f);
        }
        Ok(self.norm(x, self.model.layout.encoder_norm))
    }

    /// Teacher-forced decoder pass over `inputs` (starting with SOS).
    pub fn decoder(&mut self, enc: Var, inputs: &[usize]) -> Result<DecoderOutput> {
        let cfg = &self.model.config;
        if inputs.is_empty() {
            return Err(Error::Empty("decoder inputs"));
        }
        if inputs[0] != SOS {
            return Err(Error::contract("decoder", "decoder input must begin with SOS"));
        }
        if let Some(bad) = inputs.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::contract("decoder", format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let len = inputs.len();
        let scale = (cfg.d_model as f64).sqrt();
        let pe = positional_encoding(len, cfg.d_model)?;
        let mask = Arc::new(causal_mask(len));
        let table = self.param(self.model.layout.embedding);
        let emb = self.tape.gather(table, inputs);
        let emb = self.tape.scale(emb, scale);
        let pe = self.tape.leaf(pe);
        let mut x = self.tape.add(emb, pe);
        let layers = self.model.layout.decoder.clone();
        let mut cross = Vec::with_capacity(layers.len());
        for layer in layers {
            let h = self.norm(x, layer.norm_self);
            let a = self.self_attention(h, layer.self_attn, &mask)?;
            x = self.tape.add(x, a);
            let h = self.norm(x, layer.norm_cross);
            let (c, heads) = self.cross_attention(h, enc, layer.cross)?;
            cross.push(heads);
            x = self.tape.add(x, c);
            let h = self.norm(x, layer.norm_ff);
            let f = self.feed_forward(h, layer.ff);
            x = self.tape.add(x, f);
        }
        let x = self.norm(x, self.model.layout.decoder_norm);
        let logits = self.linear(x, self.model.layout.output);
        Ok(DecoderOutput { logits, cross })
    }

    /// Loss node of one utterance (features plus transcript without SOS/EOS).
    pub fn utterance_loss(&mut self, features: &Matrix, tokens: &[usize], smoothing: f64) -> Result<Var> {
        let enc = self.encoder(features)?;
        let (input, target) = teacher_forcing_pair(tokens);
        let out = self.decoder(enc, &input)?;
        let (loss, grad) = crate::train::label_smoothed_ce(self.tape.value(out.logits), &target, smoothing)?;
        Ok(self.tape.loss(out.logits, loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mech: MechanismConfig) -> Model {
        let mut cfg = ModelConfig::desk(7, 6);
        cfg.d_model = 8;
        cfg.d_ff = 12;
        cfg.stride = 1;
        cfg.chunk = ChunkLayout { central: 3, left: 2, right: 1 };
        cfg.mechanism = mech;
        Model::new(cfg, 42).unwrap()
    }

    fn features(frames: usize, width: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(frames, width, (0..frames * width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn chunk_mask_examples() {
        let m = chunk_mask(6, &ChunkLayout { central: 2, left: 2, right: 2 });
        assert_eq!(m.row(0), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(2), &[1.0; 6]);

        let m = chunk_mask(6, &ChunkLayout { central: 3, left: 0, right: 0 });
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m.get(r, c) == 1.0, r / 3 == c / 3);
            }
        }
        assert_eq!(chunk_mask(5, &ChunkLayout { central: 8, left: 0, right: 0 }), Matrix::filled(5, 5, 1.0));
        assert!(ChunkLayout::new(0, 1, 1).is_err());
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(20, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.get(0, 2 * i), 0.0);
            assert_eq!(pe.get(0, 2 * i + 1), 1.0);
        }
        assert!((pe.get(1, 0) - 0.84147).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(3, 7).is_err());
    }

    #[test]
    fn frontend_lengths_and_passthrough() {
        let f = features(16, 3, 1);
        assert_eq!(select_frames(&f, 4, FrontendMode::Pick).unwrap().rows(), 4);
        assert_eq!(select_frames(&features(17, 3, 1), 4, FrontendMode::Average).unwrap().rows(), 5);
        assert_eq!(select_frames(&f, 1, FrontendMode::Pick).unwrap(), f);
        assert!(select_frames(&f, 0, FrontendMode::Pick).is_err());

        let mut cfg = ModelConfig::desk(5, 8);
        cfg.d_model = 8;
        cfg.stride = 1;
        let mut model = Model::new(cfg, 0).unwrap();
        let w = model.params().index_of("frontend.w").unwrap();
        model.params_mut().values_mut()[w] = Matrix::identity(8);
        let f = features(5, 8, 2);
        assert_eq!(model.subsample_frontend(&f).unwrap(), f);
    }

    #[test]
    fn zeroed_sublayers_reduce_encoder_to_final_norm() {
        let mut model = tiny(MechanismConfig::Mta);
        let names: Vec<String> = model.params().names().to_vec();
        for (i, n) in names.iter().enumerate() {
            if n.starts_with("encoder.") && (n.ends_with(".wo") || n.contains(".ff.outer")) {
                let (r, c) = model.params().values()[i].shape();
                model.params_mut().values_mut()[i] = Matrix::zeros(r, c);
            }
        }
        let f = features(7, 6, 3);
        let base = model.subsample_frontend(&f).unwrap().add(&positional_encoding(7, 8).unwrap());
        let g = model.p(model.layout.encoder_norm.gain).data().to_vec();
        let b = model.p(model.layout.encoder_norm.bias).data().to_vec();
        let (expected, _, _) = crate::tape::layer_norm(&base, &g, &b);
        assert!(model.encode(&f).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn encoder_right_context_causality() {
        let model = tiny(MechanismConfig::Mta);
        let f = features(12, 6, 4);
        let base = model.encode(&f).unwrap();
        let layout = model.config().chunk;
        // two layers widen the receptive field: each layer reaches one chunk further
        for t in 0..12 {
            let (_, mut hi) = layout.context_range(t, 12);
            for _ in 1..model.config().encoder_layers {
                hi = layout.context_range(hi.saturating_sub(1).min(11), 12).1;
            }
            for later in hi..12 {
                let mut g = f.clone();
                g.row_mut(later).iter_mut().for_each(|v| *v += 5.0);
                let out = model.encode(&g).unwrap();
                let diff: f64 = out.row(t).iter().zip(base.row(t)).map(|(a, b)| (a - b).abs()).sum();
                assert!(diff < 1e-12, "frame {t} changed when frame {later} moved");
            }
        }
    }

    #[test]
    fn single_layer_mask_sensitivity() {
        let mut cfg = tiny(MechanismConfig::Mta).config().clone();
        cfg.encoder_layers = 1;
        let chunked = Model::new(cfg.clone(), 5).unwrap();
        cfg.chunk = ChunkLayout { central: 100, left: 0, right: 0 };
        let offline = Model::new(cfg, 5).unwrap();
        let f = features(9, 6, 6);
        let (a, b) = (chunked.encode(&f).unwrap(), offline.encode(&f).unwrap());
        let mask = chunk_mask(9, &chunked.config().chunk);
        for t in 0..9 {
            let full_row = mask.row(t).iter().all(|&m| m == 1.0);
            let same = a.row(t).iter().zip(b.row(t)).all(|(x, y)| (x - y).abs() < 1e-12);
            assert_eq!(full_row, same, "frame {t}");
        }
    }

    #[test]
    fn decoder_shapes_and_causality() {
        let model = tiny(MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded });
        let enc = model.encode(&features(10, 6, 7)).unwrap();
        assert_eq!(enc.shape(), (10, 8));
        assert_eq!(model.decoder_logits(&enc, &[SOS]).unwrap().shape(), (1, 7));
        assert!(model.decoder_logits(&enc, &[]).is_err());
        assert!(model.decoder_logits(&enc, &[3, 2]).is_err());

        let a = model.decoder_logits(&enc, &[SOS, 3, 4, 5]).unwrap();
        let b = model.decoder_logits(&enc, &[SOS, 3, 6, 2]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn swapping_mechanism_keeps_self_attention_path() {
        let dacs = tiny(MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded });
        let mut mta = dacs.clone();
        mta.set_mechanism(MechanismConfig::Mta).unwrap();
        let enc = dacs.encode(&features(10, 6, 8)).unwrap();
        let inputs = [SOS, 4, 2];
        let first_self = |m: &Model| {
            let mut f = Forward::new(m);
            let e = f.tape.leaf(enc.clone());
            let out = f.decoder(e, &inputs).unwrap();
            let heads: Vec<Matrix> = out.cross[0].iter().map(|h| f.tape.value(h.weights).clone()).collect();
            (f.tape.value(out.logits).clone(), heads)
        };
        let (la, wa) = first_self(&dacs);
        let (lb, wb) = first_self(&mta);
        // same parameters and inputs: the first cross-attention sees identical queries,
        // so energies agree and only the weighting differs
        assert_ne!(la, lb);
        for (a, b) in wa.iter().zip(&wb) {
            for i in 0..a.rows() {
                let first_a = a.get(i, 0);
                let first_b = b.get(i, 0);
                assert!((first_a - first_b).abs() < 1e-15, "first-frame weight is p_1 under both rules");
            }
        }
    }
}
