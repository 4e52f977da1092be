//! Desk-scale pre-norm transformers (decoder-only LM and encoder-decoder)
//! with configurable attention at every site, trained by hand-written
//! backprop.

mod decode;
mod layers;
mod tasks;
mod train;

pub(crate) use decode::argmax;
pub use decode::{greedy_decode, greedy_decode_recompute, DecoderState};
pub use tasks::{Example, TaskKind, TaskSampler, TaskSpec, Vocabulary, BOS, PAD, SEP};
pub use train::{
    evaluate, fit, loss_and_grads, positions_needed, train, Adam, AdamConfig, CurvePoint, EvalReport, TrainReport,
    TrainSettings,
};

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, Control, GradTape, LayerControl, LayerParams, Site, Weights};
use crate::checkpoint::Checkpoint;
use crate::error::{domain, Error, Result};
use crate::numerics::{axpy, Matrix, SeededRng};
use crate::strategies::{Activation, StrategyKind};
use layers::{layer_norm, layer_norm_backward, linear, linear_backward, LnCache};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Decoder-only causal language model.
    #[default]
    Lm,
    /// Encoder (self-attention) plus decoder (causal and cross attention).
    Seq2seq,
}

/// Strategy and memory size for one attention site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub strategy: StrategyKind,
    #[serde(default)]
    pub n: usize,
}

impl SiteSpec {
    pub fn new(strategy: StrategyKind, n: usize) -> Self {
        Self { strategy, n }
    }

    pub fn softmax() -> Self {
        Self::new(StrategyKind::Softmax, 0)
    }

    pub fn mlp(n: usize) -> Self {
        Self::new(StrategyKind::Mlp { activation: Activation::Exp }, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    /// Longest sequence any site handles.
    pub max_len: usize,
    pub encoder: SiteSpec,
    pub causal: SiteSpec,
    pub cross: SiteSpec,
    pub temperature: Option<f64>,
    /// Share each site type's learned control matrix across layers.
    pub tie_phi: bool,
    pub exp_clamp: Option<f64>,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lm,
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_mult: 4,
            vocab: 32,
            max_len: 128,
            encoder: SiteSpec::softmax(),
            causal: SiteSpec::mlp(32),
            cross: SiteSpec::mlp(32),
            temperature: None,
            tie_phi: true,
            exp_clamp: Some(30.0),
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn site(&self, site: Site) -> &SiteSpec {
        match site {
            Site::EncoderSelf => &self.encoder,
            Site::Causal => &self.causal,
            Site::Cross => &self.cross,
        }
    }

    pub fn attention(&self, site: Site) -> AttentionConfig {
        let spec = self.site(site);
        let mut cfg = AttentionConfig::new(self.heads, self.d_model, site, spec.strategy.clone(), spec.n, self.max_len);
        cfg.temperature = self.temperature;
        cfg.tie_phi_across_layers = self.tie_phi;
        cfg.exp_clamp = self.exp_clamp;
        cfg
    }

    fn sites(&self) -> Vec<Site> {
        match self.kind {
            ModelKind::Lm => vec![Site::Causal],
            ModelKind::Seq2seq => vec![Site::EncoderSelf, Site::Causal, Site::Cross],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.ffn_mult == 0 || self.max_len == 0 {
            return domain("layers, ffn_mult and max_len must be positive");
        }
        if self.vocab <= tasks::FIRST_CONTENT as usize {
            return domain(format!("vocab must exceed the {} reserved ids", tasks::FIRST_CONTENT));
        }
        if !self.d_model.is_multiple_of(2) {
            return domain("d_model must be even for sinusoidal positions");
        }
        for site in self.sites() {
            self.attention(site).validate()?;
        }
        Ok(())
    }
}

/// Named parameter matrices, addressed by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

impl ParamStore {
    fn new() -> Self {
        Self { names: Vec::new(), mats: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, m: Matrix) -> usize {
        self.names.push(name.into());
        self.mats.push(m);
        self.mats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.mats[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.mats[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.mats)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.mats.iter().map(Matrix::len).sum()
    }

    /// Zero matrices with the same shapes.
    pub fn zeros_like(&self) -> Grads {
        Grads(self.mats.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Matrix>);

impl Grads {
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|m| m.as_slice()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, f: f64) {
        self.0.iter_mut().for_each(|m| m.scale(f));
    }
}

#[derive(Clone, Copy, Debug)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
enum CtrlIdx {
    Fixed(LayerControl),
    Linformer(usize),
    Mlp(usize, Activation),
}

#[derive(Clone, Debug)]
struct AttnIdx {
    cfg: AttentionConfig,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    control: CtrlIdx,
}

impl AttnIdx {
    fn control_param(&self) -> Option<usize> {
        match self.control {
            CtrlIdx::Linformer(i) | CtrlIdx::Mlp(i, _) => Some(i),
            CtrlIdx::Fixed(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1: LnIdx,
    attn: AttnIdx,
    cross: Option<(LnIdx, AttnIdx)>,
    ln2: LnIdx,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<BlockIdx>,
    enc_ln: Option<LnIdx>,
    decoder: Vec<BlockIdx>,
    final_ln: LnIdx,
    head: usize,
    head_b: usize,
}

/// A toy model: configuration, parameters and the index layout tying them
/// to layers.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ToyModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    cfg: &'a ToyModelConfig,
    store: ParamStore,
    rng: SeededRng,
    shared: Vec<(Site, usize)>,
}

impl Builder<'_> {
    fn ln(&mut self, prefix: &str) -> LnIdx {
        let d = self.cfg.d_model;
        LnIdx {
            g: self.store.push(format!("{prefix}.g"), Matrix::filled(1, d, 1.0)),
            b: self.store.push(format!("{prefix}.b"), Matrix::zeros(1, d)),
        }
    }

    fn attn(&mut self, prefix: &str, site: Site, layer: usize) -> Result<AttnIdx> {
        let cfg = self.cfg.attention(site);
        let p = LayerParams::init(&cfg, layer, &mut self.rng)?;
        let wq = self.store.push(format!("{prefix}.wq"), p.wq);
        let wk = self.store.push(format!("{prefix}.wk"), p.wk);
        let wv = self.store.push(format!("{prefix}.wv"), p.wv);
        let wo = self.store.push(format!("{prefix}.wo"), p.wo);
        let learned = |b: &mut Self, m: Matrix| -> usize {
            if b.cfg.tie_phi {
                if let Some(&(_, i)) = b.shared.iter().find(|(s, _)| *s == site) {
                    return i;
                }
                let i = b.store.push(format!("ctrl.{}", site_name(site)), m);
                b.shared.push((site, i));
                i
            } else {
                b.store.push(format!("{prefix}.ctrl"), m)
            }
        };
        let control = match p.control {
            LayerControl::Linformer(m) => CtrlIdx::Linformer(learned(self, m)),
            LayerControl::Mlp { w_phi, activation } => CtrlIdx::Mlp(learned(self, w_phi), activation),
            other => CtrlIdx::Fixed(other),
        };
        Ok(AttnIdx { cfg, wq, wk, wv, wo, control })
    }

    fn block(&mut self, prefix: &str, self_site: Site, cross: bool, layer: usize) -> Result<BlockIdx> {
        let d = self.cfg.d_model;
        let dff = d * self.cfg.ffn_mult;
        let ln1 = self.ln(&format!("{prefix}.ln1"));
        let attn = self.attn(&format!("{prefix}.self"), self_site, layer)?;
        let cross = if cross {
            let ln = self.ln(&format!("{prefix}.lnc"));
            Some((ln, self.attn(&format!("{prefix}.cross"), Site::Cross, layer)?))
        } else {
            None
        };
        let ln2 = self.ln(&format!("{prefix}.ln2"));
        let w1 = self.store.push(format!("{prefix}.ffn.w1"), Matrix::random_normal(d, dff, 1.0 / (d as f64).sqrt(), &mut self.rng));
        let b1 = self.store.push(format!("{prefix}.ffn.b1"), Matrix::zeros(1, dff));
        let w2 = self.store.push(format!("{prefix}.ffn.w2"), Matrix::random_normal(dff, d, 1.0 / (dff as f64).sqrt(), &mut self.rng));
        let b2 = self.store.push(format!("{prefix}.ffn.b2"), Matrix::zeros(1, d));
        Ok(BlockIdx { ln1, attn, cross, ln2, w1, b1, w2, b2 })
    }
}

fn site_name(site: Site) -> &'static str {
    match site {
        Site::EncoderSelf => "encoder",
        Site::Causal => "causal",
        Site::Cross => "cross",
    }
}

/// Everything recorded by one block's forward pass.
struct BlockTape {
    ln1: LnCache,
    attn: GradTape,
    cross: Option<(LnCache, GradTape)>,
    ln2: LnCache,
    ffn_in: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

/// Intermediates of a model forward pass, consumed by [`Model::backward`].
pub struct ModelTape {
    src: Vec<u32>,
    tokens: Vec<u32>,
    encoder: Vec<BlockTape>,
    enc_ln: Option<LnCache>,
    decoder: Vec<BlockTape>,
    final_ln: LnCache,
    final_out: Matrix,
}

impl Model {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut b = Builder { cfg: &cfg, store: ParamStore::new(), rng: SeededRng::new(cfg.seed), shared: Vec::new() };
        let embed = b.store.push("embed", Matrix::random_normal(cfg.vocab, d, 1.0, &mut b.rng));
        let mut encoder = Vec::new();
        let mut enc_ln = None;
        if cfg.kind == ModelKind::Seq2seq {
            for l in 0..cfg.layers {
                encoder.push(b.block(&format!("enc.{l}"), Site::EncoderSelf, false, l)?);
            }
            enc_ln = Some(b.ln("enc.ln"));
        }
        let mut decoder = Vec::new();
        for l in 0..cfg.layers {
            decoder.push(b.block(&format!("dec.{l}"), Site::Causal, cfg.kind == ModelKind::Seq2seq, l)?);
        }
        let final_ln = b.ln("final_ln");
        let head = b.store.push("head.w", Matrix::random_normal(d, cfg.vocab, 0.02, &mut b.rng));
        let head_b = b.store.push("head.b", Matrix::zeros(1, cfg.vocab));
        let params = b.store;
        Ok(Self { layout: Layout { embed, encoder, enc_ln, decoder, final_ln, head, head_b }, params, cfg })
    }

    /// Same architecture as `cfg` with parameters taken from `params`.
    pub fn with_params(cfg: ToyModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        if m.params.names != params.names || m.params.mats.iter().zip(&params.mats).any(|(a, b)| a.shape() != b.shape()) {
            return domain("parameter layout does not match the configuration");
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Scalar count of learned control parameters (`W_φ`, `W_LF`).
    pub fn control_param_count(&self) -> usize {
        let mut seen = Vec::new();
        let blocks = self.layout.encoder.iter().chain(&self.layout.decoder);
        for b in blocks {
            for a in std::iter::once(&b.attn).chain(b.cross.as_ref().map(|(_, a)| a)) {
                if let Some(i) = a.control_param() {
                    if !seen.contains(&i) {
                        seen.push(i);
                    }
                }
            }
        }
        seen.iter().map(|&i| self.params.get(i).len()).sum()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = Checkpoint::new(meta);
        for (name, m) in self.params.iter() {
            c.arrays.push((name.to_string(), m.clone()));
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: ToyModelConfig =
            serde_json::from_str(&c.meta).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut store = ParamStore::new();
        for (name, m) in &c.arrays {
            store.push(name.clone(), m.clone());
        }
        Self::with_params(cfg, store)
    }

    fn weights<'a>(&'a self, a: &'a AttnIdx) -> Weights<'a> {
        let p = |i| self.params.get(i);
        let control = match &a.control {
            CtrlIdx::Fixed(c) => c.as_control(),
            CtrlIdx::Linformer(i) => Control::Linformer(p(*i)),
            CtrlIdx::Mlp(i, act) => Control::Mlp { w_phi: p(*i), activation: *act },
        };
        Weights { wq: p(a.wq), wk: p(a.wk), wv: p(a.wv), wo: p(a.wo), control }
    }

    fn ln_params(&self, ln: LnIdx) -> (&[f64], &[f64]) {
        (self.params.get(ln.g).as_slice(), self.params.get(ln.b).as_slice())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return domain("empty token sequence");
        }
        if tokens.len() > self.cfg.max_len {
            return domain(format!("sequence of {} tokens exceeds max_len {}", tokens.len(), self.cfg.max_len));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return domain(format!("token id {t} outside vocabulary of {}", self.cfg.vocab));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Matrix {
        let d = self.cfg.d_model;
        let e = self.params.get(self.layout.embed);
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            layers::position_row(i, d, row);
            axpy(1.0, e.row(t as usize), row);
        }
        x
    }

    fn block_forward(&self, b: &BlockIdx, x: Matrix, memory: Option<&Matrix>) -> Result<(Matrix, BlockTape)> {
        let (g, bb) = self.ln_params(b.ln1);
        let (a, ln1) = layer_norm(&x, g, bb);
        let (y, attn) = attention::forward(&b.attn.cfg, self.weights(&b.attn), &a, &a)?;
        let mut x = x;
        x.add_scaled(&y, 1.0);
        let cross = match (&b.cross, memory) {
            (Some((ln, ca)), Some(mem)) => {
                let (g, bb) = self.ln_params(*ln);
                let (c, lnc) = layer_norm(&x, g, bb);
                let (yc, tape) = attention::forward(&ca.cfg, self.weights(ca), &c, mem)?;
                x.add_scaled(&yc, 1.0);
                Some((lnc, tape))
            }
            (None, None) => None,
            _ => return domain("cross-attention block needs an encoder memory"),
        };
        let (g, bb) = self.ln_params(b.ln2);
        let (f, ln2) = layer_norm(&x, g, bb);
        let pre_act = linear(&f, self.params.get(b.w1), self.params.get(b.b1).as_slice());
        let mut act = pre_act.clone();
        act.as_mut_slice().iter_mut().for_each(|z| *z = layers::gelu(*z));
        let y2 = linear(&act, self.params.get(b.w2), self.params.get(b.b2).as_slice());
        x.add_scaled(&y2, 1.0);
        Ok((x, BlockTape { ln1, attn, cross, ln2, ffn_in: f, pre_act, act }))
    }

    /// Returns `dx` and accumulates into `grads` (and `dmem` for cross blocks).
    fn block_backward(&self, b: &BlockIdx, tape: BlockTape, dx: Matrix, grads: &mut Grads, dmem: Option<&mut Matrix>) -> Result<Matrix> {
        let mut dx = dx;
        let BlockTape { ln1, mut attn, cross, ln2, ffn_in, pre_act, act } = tape;
        {
            let (w1, w2) = (self.params.get(b.w1), self.params.get(b.w2));
            let mut db2 = std::mem::replace(&mut grads.0[b.b2], Matrix::zeros(0, 0));
            let mut dw2 = std::mem::replace(&mut grads.0[b.w2], Matrix::zeros(0, 0));
            let mut dh = linear_backward(&act, w2, &dx, &mut dw2, db2.as_mut_slice());
            grads.0[b.b2] = db2;
            grads.0[b.w2] = dw2;
            for (d, z) in dh.as_mut_slice().iter_mut().zip(pre_act.as_slice()) {
                *d *= layers::gelu_grad(*z);
            }
            let mut db1 = std::mem::replace(&mut grads.0[b.b1], Matrix::zeros(0, 0));
            let mut dw1 = std::mem::replace(&mut grads.0[b.w1], Matrix::zeros(0, 0));
            let df = linear_backward(&ffn_in, w1, &dh, &mut dw1, db1.as_mut_slice());
            grads.0[b.b1] = db1;
            grads.0[b.w1] = dw1;
            let dres = self.ln_backward(b.ln2, &df, &ln2, grads);
            dx.add_scaled(&dres, 1.0);
        }
        if let (Some((ln, ca)), Some((lnc, mut tape))) = (&b.cross, cross) {
            let g = attention::backward(&mut tape, &dx)?;
            self.add_attn_grads(ca, &g, grads);
            let dres = self.ln_backward(*ln, &g.dxq, &lnc, grads);
            dx.add_scaled(&dres, 1.0);
            match dmem {
                Some(m) => m.add_scaled(&g.dxkv, 1.0),
                None => return domain("cross-attention backward needs a memory gradient"),
            }
        }
        let g = attention::backward(&mut attn, &dx)?;
        self.add_attn_grads(&b.attn, &g, grads);
        let mut da = g.dxq;
        da.add_scaled(&g.dxkv, 1.0);
        let dres = self.ln_backward(b.ln1, &da, &ln1, grads);
        dx.add_scaled(&dres, 1.0);
        Ok(dx)
    }

    fn ln_backward(&self, ln: LnIdx, dy: &Matrix, cache: &LnCache, grads: &mut Grads) -> Matrix {
        let mut dg = std::mem::replace(&mut grads.0[ln.g], Matrix::zeros(0, 0));
        let mut db = std::mem::replace(&mut grads.0[ln.b], Matrix::zeros(0, 0));
        let dx = layer_norm_backward(dy, self.params.get(ln.g).as_slice(), cache, dg.as_mut_slice(), db.as_mut_slice());
        grads.0[ln.g] = dg;
        grads.0[ln.b] = db;
        dx
    }

    fn add_attn_grads(&self, a: &AttnIdx, g: &attention::AttentionGrads, grads: &mut Grads) {
        grads.0[a.wq].add_scaled(&g.wq, 1.0);
        grads.0[a.wk].add_scaled(&g.wk, 1.0);
        grads.0[a.wv].add_scaled(&g.wv, 1.0);
        grads.0[a.wo].add_scaled(&g.wo, 1.0);
        if let (Some(i), Some(gc)) = (a.control_param(), &g.control) {
            grads.0[i].add_scaled(gc, 1.0);
        }
    }

    fn run_decoder(&self, tokens: &[u32], memory: Option<&Matrix>) -> Result<(Matrix, Vec<BlockTape>, LnCache, Matrix)> {
        let mut x = self.embed(tokens);
        let mut tapes = Vec::with_capacity(self.layout.decoder.len());
        for b in &self.layout.decoder {
            let (nx, t) = self.block_forward(b, x, memory)?;
            x = nx;
            tapes.push(t);
        }
        let (g, bb) = self.ln_params(self.layout.final_ln);
        let (h, ln) = layer_norm(&x, g, bb);
        let logits = linear(&h, self.params.get(self.layout.head), self.params.get(self.layout.head_b).as_slice());
        Ok((logits, tapes, ln, h))
    }

    /// Encoder output for a source sequence (seq2seq only).
    pub fn encode(&self, src: &[u32]) -> Result<Matrix> {
        Ok(self.run_encoder(src)?.0)
    }

    fn run_encoder(&self, src: &[u32]) -> Result<(Matrix, Vec<BlockTape>, LnCache)> {
        let Some(enc_ln) = self.layout.enc_ln else {
            return domain("this model has no encoder");
        };
        self.check_tokens(src)?;
        let mut x = self.embed(src);
        let mut tapes = Vec::with_capacity(self.layout.encoder.len());
        for b in &self.layout.encoder {
            let (nx, t) = self.block_forward(b, x, None)?;
            x = nx;
            tapes.push(t);
        }
        let (g, bb) = self.ln_params(enc_ln);
        let (out, ln) = layer_norm(&x, g, bb);
        Ok((out, tapes, ln))
    }

    /// Causal LM logits (`tokens.len() × vocab`).
    pub fn forward_lm(&self, tokens: &[u32]) -> Result<(Matrix, ModelTape)> {
        if self.cfg.kind != ModelKind::Lm {
            return domain("forward_lm needs a language model");
        }
        self.check_tokens(tokens)?;
        let (logits, decoder, final_ln, final_out) = self.run_decoder(tokens, None)?;
        Ok((logits, ModelTape { src: Vec::new(), tokens: tokens.to_vec(), encoder: Vec::new(), enc_ln: None, decoder, final_ln, final_out }))
    }

    /// Decoder logits for `tgt_in` given source `src`.
    pub fn forward_seq2seq(&self, src: &[u32], tgt_in: &[u32]) -> Result<(Matrix, ModelTape)> {
        if self.cfg.kind != ModelKind::Seq2seq {
            return domain("forward_seq2seq needs an encoder-decoder model");
        }
        self.check_tokens(tgt_in)?;
        let (mem, encoder, enc_ln) = self.run_encoder(src)?;
        let (logits, decoder, final_ln, final_out) = self.run_decoder(tgt_in, Some(&mem))?;
        Ok((logits, ModelTape { src: src.to_vec(), tokens: tgt_in.to_vec(), encoder, enc_ln: Some(enc_ln), decoder, final_ln, final_out }))
    }

    /// Gradients of `sum(dlogits ⊙ logits)` for every parameter.
    pub fn backward(&self, tape: ModelTape, dlogits: &Matrix) -> Result<Grads> {
        let mut grads = self.params.zeros_like();
        self.backward_into(tape, dlogits, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(&self, tape: ModelTape, dlogits: &Matrix, grads: &mut Grads) -> Result<()> {
        let ModelTape { src, tokens, encoder, enc_ln, decoder, final_ln, final_out } = tape;
        if dlogits.shape() != (tokens.len(), self.cfg.vocab) {
            return domain("dlogits shape does not match the forward pass");
        }
        let l = &self.layout;
        let mut dhw = std::mem::replace(&mut grads.0[l.head], Matrix::zeros(0, 0));
        let mut dhb = std::mem::replace(&mut grads.0[l.head_b], Matrix::zeros(0, 0));
        let dh = linear_backward(&final_out, self.params.get(l.head), dlogits, &mut dhw, dhb.as_mut_slice());
        grads.0[l.head] = dhw;
        grads.0[l.head_b] = dhb;
        let mut dx = self.ln_backward(l.final_ln, &dh, &final_ln, grads);

        let mut dmem = enc_ln.as_ref().map(|_| Matrix::zeros(src.len(), self.cfg.d_model));
        for (b, t) in l.decoder.iter().zip(decoder).rev() {
            dx = self.block_backward(b, t, dx, grads, dmem.as_mut())?;
        }
        self.embed_backward(&tokens, &dx, grads);

        if let (Some(enc_cache), Some(dmem), Some(enc_idx)) = (enc_ln, dmem, l.enc_ln) {
            let mut dx = self.ln_backward(enc_idx, &dmem, &enc_cache, grads);
            for (b, t) in l.encoder.iter().zip(encoder).rev() {
                dx = self.block_backward(b, t, dx, grads, None)?;
            }
            self.embed_backward(&src, &dx, grads);
        }
        Ok(())
    }

    fn embed_backward(&self, tokens: &[u32], dx: &Matrix, grads: &mut Grads) {
        let ge = &mut grads.0[self.layout.embed];
        for (i, &t) in tokens.iter().enumerate() {
            axpy(1.0, dx.row(i), ge.row_mut(t as usize));
        }
    }

    /// Logits for one decoding step; see [`DecoderState`].
    /// Feeds one token to a streaming decoder state and returns the
    /// next-token logits.
    pub fn step_logits(&self, state: &mut DecoderState, token: u32) -> Result<Vec<f64>> {
        decode::step(self, state, token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(kind: ModelKind, causal: SiteSpec, cross: SiteSpec) -> ToyModelConfig {
        ToyModelConfig {
            kind,
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_mult: 2,
            vocab: 7,
            max_len: 12,
            encoder: SiteSpec::mlp(3),
            causal,
            cross,
            exp_clamp: None,
            seed: 5,
            ..ToyModelConfig::default()
        }
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let cfg = ToyModelConfig { seed: 1, ..ToyModelConfig::default() };
        let m = Model::new(cfg).unwrap();
        let tokens: Vec<u32> = (0..40).map(|i| 3 + (i * 7 % 29) as u32).collect();
        let (logits, _) = m.forward_lm(&tokens).unwrap();
        let mut nll = 0.0;
        for i in 0..tokens.len() - 1 {
            let row = logits.row(i);
            let lse = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|x| (x - lse).exp()).sum::<f64>().ln() + lse;
            nll += z - row[tokens[i + 1] as usize];
        }
        nll /= (tokens.len() - 1) as f64;
        let uniform = (32f64).ln();
        assert!((nll - uniform).abs() / uniform < 0.05, "{nll}");
    }

    #[test]
    fn basis_control_reproduces_softmax_logits() {
        // Every source position global: φ_i = e_i with n = N at the encoder and cross sites.
        let src = [3, 6, 4, 5, 3];
        let basis = SiteSpec::new(StrategyKind::LocalToGlobal { globals: (0..src.len()).collect() }, src.len());
        let soft = ToyModelConfig { encoder: SiteSpec::softmax(), ..tiny(ModelKind::Seq2seq, SiteSpec::softmax(), SiteSpec::softmax()) };
        let fixed = ToyModelConfig { encoder: basis.clone(), cross: basis, ..soft.clone() };
        let a = Model::new(soft).unwrap();
        let b = Model::with_params(fixed, a.params().clone()).unwrap();
        let tgt = [1, 4, 4, 6];
        let (la, _) = a.forward_seq2seq(&src, &tgt).unwrap();
        let (lb, _) = b.forward_seq2seq(&src, &tgt).unwrap();
        assert!(la.max_abs_diff(&lb) <= 1e-8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (kind, causal, cross) in [
            (ModelKind::Lm, SiteSpec::mlp(3), SiteSpec::mlp(3)),
            (ModelKind::Lm, SiteSpec::new(StrategyKind::Linformer, 3), SiteSpec::mlp(3)),
            (ModelKind::Seq2seq, SiteSpec::mlp(3), SiteSpec::new(StrategyKind::Mlp { activation: Activation::Sigmoid }, 2)),
        ] {
            let m = Model::new(tiny(kind, causal, cross)).unwrap();
            let err = crate::verify::model_gradcheck(&m, 0, 9).unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn tying_shares_one_matrix_per_site() {
        let tied = Model::new(tiny(ModelKind::Seq2seq, SiteSpec::mlp(3), SiteSpec::mlp(3))).unwrap();
        let untied = Model::new(ToyModelConfig { tie_phi: false, ..tiny(ModelKind::Seq2seq, SiteSpec::mlp(3), SiteSpec::mlp(3)) }).unwrap();
        assert_eq!(tied.control_param_count(), 3 * 3 * 8);
        assert_eq!(untied.control_param_count(), 2 * 3 * 3 * 8);
        assert!(tied.params().find("ctrl.causal").is_some());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny(ModelKind::Seq2seq, SiteSpec::mlp(3), SiteSpec::mlp(3))).unwrap();
        let c = m.to_checkpoint().unwrap();
        let bytes = c.to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), bytes);
    }
}
