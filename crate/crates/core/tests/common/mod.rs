//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use bdlab::dpo::{dpo_loss_and_grad, dpo_loss_from_margin, PreferencePair, Task};
use bdlab::model::{ModelConfig, TrainableSet};
use bdlab::{init_model, Modality, ModelState, ParamSource, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small model so that finite differences over every trainable coordinate stay cheap.
pub fn small_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelConfig {
        hidden_dim: rng.random_range(3..=6),
        trunk_layers: rng.random_range(1..=3),
        text_vocab: rng.random_range(4..=9),
        code_vocab: rng.random_range(4..=11),
        adapter_rank: rng.random_range(1..=3),
        adapter_scale: 2.0,
        gen_tokens: rng.random_range(3..=7),
        base_init_std: 0.5,
        rng_seed: seed,
        adapter_seed: None,
        trainable: TrainableSet {
            code_head: true,
            text_head: rng.random_bool(0.5),
        },
    }
}

/// A state whose trainable parameters have moved away from the reference
/// (non-zero `B`, perturbed heads), as after some training.
pub fn perturbed_state(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelState {
    let mut state = init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut values = state.trainable_values();
    for v in values.iter_mut() {
        *v += scale * (rng.random::<f64>() * 2.0 - 1.0);
    }
    state.set_trainable_values(&values).unwrap();
    state
}

pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn random_pair(cfg: &ModelConfig, task: Task, seed: u64) -> PreferencePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx_len = rng.random_range(0..=5);
    let context = TokenSequence::text(random_tokens(&mut rng, ctx_len, cfg.text_vocab));
    let (modality, len, vocab) = match task {
        Task::Understanding => (Modality::Text, rng.random_range(1..=8), cfg.text_vocab),
        Task::Generation => (Modality::Code, cfg.gen_tokens, cfg.code_vocab),
    };
    PreferencePair {
        task,
        context,
        chosen: TokenSequence::new(modality, random_tokens(&mut rng, len, vocab)),
        rejected: TokenSequence::new(modality, random_tokens(&mut rng, len, vocab)),
        construction_margin: 0.0,
        filter_bypassed: task == Task::Generation,
    }
}

/// Straight-line re-implementation of the per-position model, reading weights
/// by segment name. Shares no code with the library forward pass.
pub fn reference_logprob(state: &ModelState, context: &TokenSequence, response: &TokenSequence, live: bool) -> f64 {
    let cfg = state.config();
    let d = cfg.hidden_dim;
    let r = cfg.adapter_rank;
    let params = if live { state.params() } else { state.reference() };
    let seg = |name: &str| -> &[f64] {
        let s = state.layout().segment(name).unwrap();
        &params[s.offset..s.offset + s.rows * s.cols]
    };
    let (embed, head_w, head_b, vocab) = match response.modality {
        Modality::Text => (
            seg("embed.text"),
            seg("head.text.w"),
            seg("head.text.b"),
            cfg.text_vocab,
        ),
        Modality::Code => (
            seg("embed.code"),
            seg("head.code.w"),
            seg("head.code.b"),
            cfg.code_vocab,
        ),
    };
    let embed_text = seg("embed.text");

    let mut c = vec![0.0; d];
    for &t in &context.tokens {
        for k in 0..d {
            c[k] += embed_text[t as usize * d + k] / context.tokens.len() as f64;
        }
    }

    let w_in = seg("input.w");
    let b_in = seg("input.b");
    let mut total = 0.0;
    let mut prev: Option<u32> = None;
    for &y in &response.tokens {
        let mut u = vec![0.0; 2 * d];
        if let Some(p) = prev {
            u[..d].copy_from_slice(&embed[p as usize * d..(p as usize + 1) * d]);
        }
        u[d..].copy_from_slice(&c);
        let mut h: Vec<f64> = (0..d)
            .map(|i| (b_in[i] + (0..2 * d).map(|j| w_in[i * 2 * d + j] * u[j]).sum::<f64>()).tanh())
            .collect();
        for l in 0..cfg.trunk_layers {
            let w = seg(&format!("trunk.{l}.w"));
            let b = seg(&format!("trunk.{l}.b"));
            let a_mat = seg(&format!("adapter.{l}.a"));
            let b_mat = seg(&format!("adapter.{l}.b"));
            // Effective weight W + s·B·A, formed explicitly.
            let mut eff = w.to_vec();
            for i in 0..d {
                for j in 0..d {
                    let mut ba = 0.0;
                    for k in 0..r {
                        ba += b_mat[i * r + k] * a_mat[k * d + j];
                    }
                    eff[i * d + j] += cfg.adapter_scale * ba;
                }
            }
            h = (0..d)
                .map(|i| (b[i] + (0..d).map(|j| eff[i * d + j] * h[j]).sum::<f64>()).tanh())
                .collect();
        }
        let logits: Vec<f64> = (0..vocab)
            .map(|v| head_b[v] + (0..d).map(|k| head_w[v * d + k] * h[k]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        total += logits[y as usize] - max - z.ln();
        prev = Some(y);
    }
    total
}

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Coordinates whose analytical gradient is below this are treated as noise.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Scalar loss evaluated purely through forward passes.
pub type Loss<'a> = Box<dyn Fn(&ModelState) -> f64 + 'a>;

pub fn finite_difference(state: &ModelState, loss: &Loss, i: usize) -> f64 {
    let base = state.trainable_values();
    let mut probe = state.clone();
    let mut v = base.clone();
    v[i] = base[i] + STEP;
    probe.set_trainable_values(&v).unwrap();
    let plus = loss(&probe);
    v[i] = base[i] - STEP;
    probe.set_trainable_values(&v).unwrap();
    let minus = loss(&probe);
    (plus - minus) / (2.0 * STEP)
}

pub fn max_relative_error(state: &ModelState, analytic: &[f64], loss: &Loss) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, &g) in analytic.iter().enumerate() {
        if g.abs() <= NOISE_FLOOR {
            continue;
        }
        let fd = finite_difference(state, loss, i);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()));
        checked += 1;
    }
    (worst, checked)
}

/// Largest relative error between analytical and finite-difference gradients
/// for one random (state, pair, loss) case, with the number of coordinates checked.
/// Cases cycle through a weighted log-probability sum, a single log-probability
/// and the DPO loss with a random β.
pub fn fd_case(case: u64) -> (f64, usize) {
    let cfg = small_config(100 + case);
    let state = perturbed_state(&cfg, case, 0.5);
    let task = if case.is_multiple_of(2) {
        Task::Understanding
    } else {
        Task::Generation
    };
    let pair = random_pair(&cfg, task, 1000 + case);
    let mut rng = ChaCha8Rng::seed_from_u64(case);

    let (analytic, loss): (Vec<f64>, Loss) = match case % 3 {
        // Weighted sum of the two sequence log-probabilities.
        0 => {
            let c = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let trace = state
                .trace(
                    &pair.context,
                    &[pair.chosen.clone(), pair.rejected.clone()],
                    ParamSource::Live,
                )
                .unwrap();
            let g = state.backward(&trace, &c).unwrap().into_values();
            let p = pair.clone();
            (
                g,
                Box::new(move |s: &ModelState| {
                    c[0] * s.sequence_logprob(&p.context, &p.chosen, ParamSource::Live).unwrap()
                        + c[1] * s.sequence_logprob(&p.context, &p.rejected, ParamSource::Live).unwrap()
                }),
            )
        }
        // Log-probability of a single response.
        1 => {
            let trace = state
                .trace(&pair.context, std::slice::from_ref(&pair.chosen), ParamSource::Live)
                .unwrap();
            let g = state.backward(&trace, &[1.0]).unwrap().into_values();
            let p = pair.clone();
            (
                g,
                Box::new(move |s: &ModelState| s.sequence_logprob(&p.context, &p.chosen, ParamSource::Live).unwrap()),
            )
        }
        // The DPO loss itself, with a large β so the slope is far from its init value.
        _ => {
            let beta = rng.random_range(0.1..2.0);
            let g = dpo_loss_and_grad(&state, &pair, beta, None).unwrap().grad.into_values();
            let p = pair.clone();
            (
                g,
                Box::new(move |s: &ModelState| {
                    let lp = |src, r| s.sequence_logprob(&p.context, r, src).unwrap();
                    let margin = (lp(ParamSource::Live, &p.chosen) - lp(ParamSource::Reference, &p.chosen))
                        - (lp(ParamSource::Live, &p.rejected) - lp(ParamSource::Reference, &p.rejected));
                    dpo_loss_from_margin(margin, beta)
                }),
            )
        }
    };
    max_relative_error(&state, &analytic, &loss)
}
