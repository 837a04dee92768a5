//! Exact forward log-probabilities and reverse-mode gradients.
//!
//! Because every position only sees the previous token and the pooled
//! context, all positions of all responses under one context that share a
//! previous token share one trunk evaluation. A [`Trace`] stores one row per
//! distinct previous token together with the target counts each response
//! contributes to it; the backward pass turns those counts into logit
//! cotangents `Σ_i c_i (n_i − N_i p)`.

use std::collections::HashMap;

use rand::Rng;

use super::{Modality, ModelState, TokenSequence};
use crate::error::{Error, Result};
use crate::gradient::GradientVector;

/// Which parameter copy a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSource {
    Live,
    Reference,
}

#[derive(Debug, Clone)]
struct Row {
    /// h0..hL stacked, `(L + 1) * d` values.
    hidden: Vec<f64>,
    /// `A_l h(l-1)` for every layer, `L * r` values.
    mid: Vec<f64>,
    /// Softmax over the modality vocabulary.
    probs: Vec<f64>,
    /// `(response index, target token, count)`.
    targets: Vec<(usize, u32, f64)>,
}

/// Recorded intermediates of one forward pass over one context and a set of
/// same-modality responses.
#[derive(Debug, Clone)]
pub struct Trace {
    modality: Modality,
    source: ParamSource,
    version: u64,
    rows: Vec<Row>,
    logprobs: Vec<f64>,
    lengths: Vec<usize>,
}

impl Trace {
    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn source(&self) -> ParamSource {
        self.source
    }

    /// Sequence log-probability of each response, in input order.
    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Number of distinct trunk evaluations the trace needed.
    pub fn distinct_positions(&self) -> usize {
        self.rows.len()
    }
}

/// Per-context quantities shared by every position.
struct ContextPrep {
    /// `W_in[:, d..] c + b_in`
    input_bias: Vec<f64>,
}

fn matvec_acc(out: &mut [f64], w: &[f64], cols: usize, col_start: usize, x: &[f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols + col_start..i * cols + col_start + x.len()];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl ModelState {
    fn prepare_context(&self, params: &[f64], context: &TokenSequence) -> Result<ContextPrep> {
        if context.modality != Modality::Text {
            return Err(Error::Domain("context must be a text sequence".into()));
        }
        context.validate(&self.config)?;
        let d = self.config.hidden_dim;
        let off = &self.layout.offsets;
        let mut pooled = vec![0.0; d];
        if !context.is_empty() {
            for &tok in &context.tokens {
                let e = &params[off.embed_text + tok as usize * d..][..d];
                for (p, v) in pooled.iter_mut().zip(e) {
                    *p += v;
                }
            }
            let inv = 1.0 / context.len() as f64;
            pooled.iter_mut().for_each(|p| *p *= inv);
        }
        let mut input_bias = params[off.input_b..off.input_b + d].to_vec();
        matvec_acc(&mut input_bias, &params[off.input_w..], 2 * d, d, &pooled);
        Ok(ContextPrep { input_bias })
    }

    /// Runs the trunk and head for one previous token, filling `hidden`, `mid`
    /// and returning log-probabilities over the vocabulary.
    fn eval_position(
        &self,
        params: &[f64],
        prep: &ContextPrep,
        modality: Modality,
        prev: Option<u32>,
        hidden: &mut [f64],
        mid: &mut [f64],
    ) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let r = cfg.adapter_rank;
        let s = cfg.adapter_scale;
        let off = &self.layout.offsets;

        let h0 = &mut hidden[..d];
        h0.copy_from_slice(&prep.input_bias);
        if let Some(tok) = prev {
            let e = &params[off.embed(modality) + tok as usize * d..][..d];
            matvec_acc(h0, &params[off.input_w..], 2 * d, 0, e);
        }
        h0.iter_mut().for_each(|z| *z = z.tanh());

        for l in 0..cfg.trunk_layers {
            let (before, after) = hidden.split_at_mut((l + 1) * d);
            let h_prev = &before[l * d..];
            let h_next = &mut after[..d];
            let a_out = &mut mid[l * r..(l + 1) * r];
            a_out.fill(0.0);
            matvec_acc(a_out, &params[off.adapter_a[l]..], d, 0, h_prev);
            h_next.copy_from_slice(&params[off.trunk_b[l]..off.trunk_b[l] + d]);
            matvec_acc(h_next, &params[off.trunk_w[l]..], d, 0, h_prev);
            let b = &params[off.adapter_b[l]..off.adapter_b[l] + d * r];
            for (i, z) in h_next.iter_mut().enumerate() {
                let row = &b[i * r..(i + 1) * r];
                *z += s * row.iter().zip(a_out.iter()).map(|(x, y)| x * y).sum::<f64>();
                *z = z.tanh();
            }
        }

        let vocab = cfg.vocab(modality);
        let (hw, hb) = off.head(modality);
        let top = &hidden[cfg.trunk_layers * d..];
        let mut logits = params[hb..hb + vocab].to_vec();
        matvec_acc(&mut logits, &params[hw..], d, 0, top);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        logits.iter_mut().for_each(|z| *z -= lse);
        logits
    }

    /// Log-probabilities of the next token given the previous one (`None` is
    /// the begin sentinel).
    pub fn next_token_logprobs(
        &self,
        context: &TokenSequence,
        modality: Modality,
        prev: Option<u32>,
        source: ParamSource,
    ) -> Result<Vec<f64>> {
        if let Some(tok) = prev {
            if tok as usize >= self.config.vocab(modality) {
                return Err(Error::Domain(format!("{modality} token id {tok} outside vocabulary")));
            }
        }
        let params = self.source(source);
        let prep = self.prepare_context(params, context)?;
        let d = self.config.hidden_dim;
        let mut hidden = vec![0.0; (self.config.trunk_layers + 1) * d];
        let mut mid = vec![0.0; self.config.trunk_layers * self.config.adapter_rank];
        Ok(self.eval_position(params, &prep, modality, prev, &mut hidden, &mut mid))
    }

    /// Forward pass over several responses sharing one context and modality.
    pub fn trace(&self, context: &TokenSequence, responses: &[TokenSequence], source: ParamSource) -> Result<Trace> {
        let modality = match responses.first() {
            Some(r) => r.modality,
            None => return Err(Error::Domain("trace needs at least one response".into())),
        };
        for resp in responses {
            if resp.modality != modality {
                return Err(Error::Domain("responses in one trace must share a modality".into()));
            }
            if resp.is_empty() {
                return Err(Error::Domain("empty response".into()));
            }
            resp.validate(&self.config)?;
        }

        let params = self.source(source);
        let prep = self.prepare_context(params, context)?;

        // prev token -> (target -> count) per response
        let mut slots: HashMap<Option<u32>, usize> = HashMap::new();
        let mut order: Vec<Option<u32>> = Vec::new();
        let mut counts: Vec<HashMap<(usize, u32), f64>> = Vec::new();
        for (i, resp) in responses.iter().enumerate() {
            let mut prev = None;
            for &tok in &resp.tokens {
                let slot = *slots.entry(prev).or_insert_with(|| {
                    order.push(prev);
                    counts.push(HashMap::new());
                    order.len() - 1
                });
                *counts[slot].entry((i, tok)).or_insert(0.0) += 1.0;
                prev = Some(tok);
            }
        }

        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let mut logprobs = vec![0.0; responses.len()];
        let mut rows = Vec::with_capacity(order.len());
        for (slot, prev) in order.into_iter().enumerate() {
            let mut hidden = vec![0.0; (cfg.trunk_layers + 1) * d];
            let mut mid = vec![0.0; cfg.trunk_layers * cfg.adapter_rank];
            let mut logp = self.eval_position(params, &prep, modality, prev, &mut hidden, &mut mid);
            let mut targets: Vec<(usize, u32, f64)> = counts[slot].iter().map(|(&(i, t), &n)| (i, t, n)).collect();
            // HashMap iteration order is not stable; the summation order must be.
            targets.sort_unstable_by_key(|&(i, t, _)| (i, t));
            for &(i, tok, n) in &targets {
                logprobs[i] += n * logp[tok as usize];
            }
            logp.iter_mut().for_each(|v| *v = v.exp());
            rows.push(Row {
                hidden,
                mid,
                probs: logp,
                targets,
            });
        }

        Ok(Trace {
            modality,
            source,
            version: self.version,
            rows,
            logprobs,
            lengths: responses.iter().map(TokenSequence::len).collect(),
        })
    }

    /// Ancestral sampling of `len` tokens at temperature 1.
    pub fn sample_response<R: Rng + ?Sized>(
        &self,
        context: &TokenSequence,
        modality: Modality,
        len: usize,
        source: ParamSource,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        let params = self.source(source);
        let prep = self.prepare_context(params, context)?;
        let d = self.config.hidden_dim;
        let mut hidden = vec![0.0; (self.config.trunk_layers + 1) * d];
        let mut mid = vec![0.0; self.config.trunk_layers * self.config.adapter_rank];
        let mut cache: HashMap<Option<u32>, Vec<f64>> = HashMap::new();
        let mut tokens = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let probs = cache.entry(prev).or_insert_with(|| {
                let mut lp = self.eval_position(params, &prep, modality, prev, &mut hidden, &mut mid);
                lp.iter_mut().for_each(|v| *v = v.exp());
                lp
            });
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            tokens.push(pick as u32);
            prev = Some(pick as u32);
        }
        Ok(TokenSequence::new(modality, tokens))
    }
}

pub(super) fn backward(state: &ModelState, trace: &Trace, cotangents: &[f64]) -> Result<GradientVector> {
    if trace.source != ParamSource::Live {
        return Err(Error::State(
            "trace was recorded against the frozen reference; nothing to differentiate".into(),
        ));
    }
    if trace.version != state.version {
        return Err(Error::State(format!(
            "trace recorded at parameter version {} but state is at version {}",
            trace.version, state.version
        )));
    }
    if cotangents.len() != trace.logprobs.len() {
        return Err(Error::Domain(format!(
            "{} cotangents for {} recorded responses",
            cotangents.len(),
            trace.logprobs.len()
        )));
    }

    let cfg = &state.config;
    let layout = &state.layout;
    let off = &layout.offsets;
    let d = cfg.hidden_dim;
    let r = cfg.adapter_rank;
    let s = cfg.adapter_scale;
    let layers = cfg.trunk_layers;
    let params = &state.params;
    let vocab = cfg.vocab(trace.modality);
    let (hw, hb) = off.head(trace.modality);
    let head_trainable = layout.segments().iter().any(|seg| seg.offset == hw && seg.trainable);

    let mut full = vec![0.0; layout.total_len()];
    if cotangents.iter().all(|&c| c == 0.0) {
        return Ok(GradientVector::gather(layout, &full));
    }

    let mut dlogits = vec![0.0; vocab];
    let mut dh = vec![0.0; d];
    let mut dz = vec![0.0; d];
    let mut t = vec![0.0; r];
    let mut per_response = vec![0.0; cotangents.len()];
    for row in &trace.rows {
        dlogits.fill(0.0);
        per_response.fill(0.0);
        for &(i, tok, n) in &row.targets {
            dlogits[tok as usize] += cotangents[i] * n;
            per_response[i] += n;
        }
        // Integer counts keep `c n - c n` exactly zero for mirrored responses.
        let total: f64 = per_response.iter().zip(cotangents).map(|(n, c)| n * c).sum();
        if total != 0.0 {
            for (g, p) in dlogits.iter_mut().zip(&row.probs) {
                *g -= total * p;
            }
        }

        let top = &row.hidden[layers * d..];
        if head_trainable {
            for (y, &g) in dlogits.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let dst = &mut full[hw + y * d..hw + (y + 1) * d];
                for (o, h) in dst.iter_mut().zip(top) {
                    *o += g * h;
                }
                full[hb + y] += g;
            }
        }

        // dh = H^T dlogits
        dh.fill(0.0);
        for (y, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let hrow = &params[hw + y * d..hw + (y + 1) * d];
            for (o, w) in dh.iter_mut().zip(hrow) {
                *o += g * w;
            }
        }

        for l in (0..layers).rev() {
            let h_out = &row.hidden[(l + 1) * d..(l + 2) * d];
            let h_in = &row.hidden[l * d..(l + 1) * d];
            let a_mid = &row.mid[l * r..(l + 1) * r];
            for ((z, g), h) in dz.iter_mut().zip(&dh).zip(h_out) {
                *z = g * (1.0 - h * h);
            }

            let b_off = off.adapter_b[l];
            let a_off = off.adapter_a[l];
            // dB = s dz a^T ; t = s B^T dz
            t.fill(0.0);
            for (i, &g) in dz.iter().enumerate() {
                let brow = &params[b_off + i * r..b_off + (i + 1) * r];
                let dst = &mut full[b_off + i * r..b_off + (i + 1) * r];
                for k in 0..r {
                    dst[k] += s * g * a_mid[k];
                    t[k] += s * g * brow[k];
                }
            }
            // dA = t h_in^T
            for (k, &tk) in t.iter().enumerate() {
                if tk == 0.0 {
                    continue;
                }
                let dst = &mut full[a_off + k * d..a_off + (k + 1) * d];
                for (o, h) in dst.iter_mut().zip(h_in) {
                    *o += tk * h;
                }
            }

            if l == 0 {
                break;
            }
            // dh_in = W^T dz + A^T t
            let w_off = off.trunk_w[l];
            dh.fill(0.0);
            for (i, &g) in dz.iter().enumerate() {
                let wrow = &params[w_off + i * d..w_off + (i + 1) * d];
                for (o, w) in dh.iter_mut().zip(wrow) {
                    *o += g * w;
                }
            }
            for (k, &tk) in t.iter().enumerate() {
                let arow = &params[a_off + k * d..a_off + (k + 1) * d];
                for (o, a) in dh.iter_mut().zip(arow) {
                    *o += tk * a;
                }
            }
        }
    }

    let grad = GradientVector::gather(layout, &full);
    if !grad.norm().is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(grad)
}
