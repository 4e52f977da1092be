//! Streaming decoder state and greedy decoding.

use crate::attention::{AttentionState, CrossMemory};
use crate::error::{domain, numeric, Result};
use crate::model::layers::{gelu, layer_norm, position_row, row_linear_acc};
use crate::model::tasks::BOS;
use crate::model::{Model, ModelKind};
use crate::numerics::{axpy, Matrix};

/// Per-layer recurrent self-attention state plus cached cross memories.
#[derive(Clone, Debug)]
pub struct DecoderState {
    layers: Vec<AttentionState>,
    cross: Vec<CrossMemory>,
    pos: usize,
}

impl DecoderState {
    /// Tokens consumed so far.
    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn layers(&self) -> &[AttentionState] {
        &self.layers
    }

    /// Floats held by the causal self-attention states.
    pub fn float_count(&self) -> usize {
        self.layers.iter().map(AttentionState::float_count).sum()
    }

    pub fn state_bytes(&self) -> usize {
        self.float_count() * std::mem::size_of::<f64>()
    }

    /// Floats held by the cached cross-attention memories.
    pub fn cross_float_count(&self) -> usize {
        self.cross.iter().map(CrossMemory::float_count).sum()
    }
}

impl Model {
    /// Fresh decoding state. Seq2seq models need the source sequence, which
    /// is encoded once and summarized into per-layer cross memories.
    pub fn decoder_state(&self, source: Option<&[u32]>) -> Result<DecoderState> {
        let layers = self
            .layout
            .decoder
            .iter()
            .map(|b| AttentionState::new(&b.attn.cfg, self.weights(&b.attn).control))
            .collect::<Result<Vec<_>>>()?;
        let cross = match (self.cfg.kind, source) {
            (ModelKind::Lm, None) => Vec::new(),
            (ModelKind::Seq2seq, Some(src)) => {
                let enc = self.encode(src)?;
                self.layout
                    .decoder
                    .iter()
                    .map(|b| {
                        let (_, ca) = b.cross.as_ref().expect("seq2seq decoder blocks have cross attention");
                        CrossMemory::build(&ca.cfg, self.weights(ca), &enc)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            (ModelKind::Lm, Some(_)) => return domain("a language model takes no source sequence"),
            (ModelKind::Seq2seq, None) => return domain("seq2seq decoding needs a source sequence"),
        };
        Ok(DecoderState { layers, cross, pos: 0 })
    }
}

fn ln_row(model: &Model, ln: super::LnIdx, x: &[f64]) -> Vec<f64> {
    let (g, b) = model.ln_params(ln);
    let m = Matrix::from_vec(1, x.len(), x.to_vec()).expect("finite activations");
    layer_norm(&m, g, b).0.into_vec()
}

/// Feeds one token and returns the next-token logits.
pub(super) fn step(model: &Model, state: &mut DecoderState, token: u32) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    if token as usize >= cfg.vocab {
        return domain(format!("token id {token} outside vocabulary of {}", cfg.vocab));
    }
    if state.pos >= cfg.max_len {
        return domain(format!("decoding past max_len {}", cfg.max_len));
    }
    let d = cfg.d_model;
    let mut x = vec![0.0; d];
    position_row(state.pos, d, &mut x);
    axpy(1.0, model.params.get(model.layout.embed).row(token as usize), &mut x);

    for (l, b) in model.layout.decoder.iter().enumerate() {
        let a = ln_row(model, b.ln1, &x);
        let y = state.layers[l].step(&b.attn.cfg, model.weights(&b.attn), &a)?;
        axpy(1.0, &y, &mut x);
        if let Some((ln, ca)) = &b.cross {
            let c = ln_row(model, *ln, &x);
            let y = state.cross[l].read(&ca.cfg, model.weights(ca), &c)?;
            axpy(1.0, &y, &mut x);
        }
        let f = ln_row(model, b.ln2, &x);
        let mut h = model.params.get(b.b1).as_slice().to_vec();
        row_linear_acc(&f, model.params.get(b.w1), &mut h);
        h.iter_mut().for_each(|z| *z = gelu(*z));
        let mut y = model.params.get(b.b2).as_slice().to_vec();
        row_linear_acc(&h, model.params.get(b.w2), &mut y);
        axpy(1.0, &y, &mut x);
    }
    let hfin = ln_row(model, model.layout.final_ln, &x);
    let mut logits = model.params.get(model.layout.head_b).as_slice().to_vec();
    row_linear_acc(&hfin, model.params.get(model.layout.head), &mut logits);
    if !logits.iter().all(|v| v.is_finite()) {
        return numeric("decoder produced non-finite logits");
    }
    state.pos += 1;
    Ok(logits)
}

/// Index of the largest logit; ties go to the lowest id.
pub(crate) fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding with the streaming state.
///
/// For a language model `input` is the prompt, fed verbatim; for a seq2seq
/// model it is the source and decoding starts from BOS. Returns `max_len`
/// generated tokens.
pub fn greedy_decode(model: &Model, input: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_len);
    if max_len == 0 {
        return Ok(out);
    }
    let (mut state, prompt): (DecoderState, Vec<u32>) = match model.cfg.kind {
        ModelKind::Lm => (model.decoder_state(None)?, input.to_vec()),
        ModelKind::Seq2seq => (model.decoder_state(Some(input))?, vec![BOS]),
    };
    if prompt.is_empty() {
        return domain("language-model decoding needs a nonempty prompt");
    }
    let mut logits = Vec::new();
    for &t in &prompt {
        logits = model.step_logits(&mut state, t)?;
    }
    loop {
        let next = argmax(&logits);
        out.push(next);
        if out.len() == max_len {
            return Ok(out);
        }
        logits = model.step_logits(&mut state, next)?;
    }
}

/// Greedy decoding that recomputes the full batch forward pass at every step.
pub fn greedy_decode_recompute(model: &Model, input: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_len);
    let mut seq: Vec<u32> = match model.cfg.kind {
        ModelKind::Lm => input.to_vec(),
        ModelKind::Seq2seq => vec![BOS],
    };
    while out.len() < max_len {
        let (logits, _) = match model.cfg.kind {
            ModelKind::Lm => model.forward_lm(&seq)?,
            ModelKind::Seq2seq => model.forward_seq2seq(input, &seq)?,
        };
        let next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::model::SiteSpec;
    use crate::strategies::StrategyKind;

    #[test]
    fn streaming_logits_match_batch() {
        for (kind, causal) in [
            (ModelKind::Lm, SiteSpec::mlp(3)),
            (ModelKind::Lm, SiteSpec::softmax()),
            (ModelKind::Lm, SiteSpec::new(StrategyKind::Window, 3)),
            (ModelKind::Seq2seq, SiteSpec::mlp(2)),
        ] {
            let m = Model::new(tiny(kind, causal, SiteSpec::mlp(3))).unwrap();
            let tokens = [1, 4, 3, 6, 5, 5, 3, 2];
            let src = [3, 4, 5, 6, 3];
            let (batch, _) = match kind {
                ModelKind::Lm => m.forward_lm(&tokens).unwrap(),
                ModelKind::Seq2seq => m.forward_seq2seq(&src, &tokens).unwrap(),
            };
            let mut st = m.decoder_state((kind == ModelKind::Seq2seq).then_some(&src[..])).unwrap();
            for (i, &t) in tokens.iter().enumerate() {
                let row = m.step_logits(&mut st, t).unwrap();
                assert!(crate::numerics::max_abs_diff(&row, batch.row(i)) <= 1e-8);
            }
        }
    }

    #[test]
    fn streaming_and_recompute_decode_agree() {
        let m = Model::new(tiny(ModelKind::Seq2seq, SiteSpec::mlp(3), SiteSpec::mlp(3))).unwrap();
        let src = [3, 5, 6, 4];
        assert_eq!(greedy_decode(&m, &src, 6).unwrap(), greedy_decode_recompute(&m, &src, 6).unwrap());
        assert!(greedy_decode(&m, &src, 0).unwrap().is_empty());
        let lm = Model::new(tiny(ModelKind::Lm, SiteSpec::mlp(3), SiteSpec::mlp(3))).unwrap();
        assert_eq!(greedy_decode(&lm, &[1, 3], 7).unwrap(), greedy_decode_recompute(&lm, &[1, 3], 7).unwrap());
    }

    #[test]
    fn state_size_is_constant() {
        let cfg = tiny(ModelKind::Lm, SiteSpec::mlp(3), SiteSpec::mlp(3));
        let m = Model::new(cfg.clone()).unwrap();
        let mut st = m.decoder_state(None).unwrap();
        let expected = cfg.layers * cfg.heads * (2 * 3 * (cfg.d_model / cfg.heads) + 3);
        for t in 0..10 {
            m.step_logits(&mut st, 3 + (t % 4)).unwrap();
            assert_eq!(st.float_count(), expected);
        }
    }

    #[test]
    fn argmax_prefers_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
