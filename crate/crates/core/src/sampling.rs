use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{RewardModel, Token};
use crate::rng::Rng;
use crate::tensor::softmax_row;

/// Draws an index from unnormalized `logits` at `temperature`; zero
/// temperature is greedy with ties to the lowest index.
pub fn sample_logits(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        return crate::moe::top_indices(logits, 1)[0];
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_row(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Autoregressively samples a response after `BOS ‖ prompt`, stopping after
/// EOS, after `max_len` tokens, or when the context is full. A sampled EOS is
/// kept as the last token.
pub fn sample_response(
    policy: &RewardModel,
    prompt: &[Token],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    let cfg = policy.config();
    if prompt.len() + 2 > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + 2,
            max: cfg.max_seq,
        });
    }
    let eos = cfg.eos_id();
    let mut seq = Vec::with_capacity(prompt.len() + max_len + 1);
    seq.push(cfg.bos_id());
    seq.extend_from_slice(prompt);
    let start = seq.len();
    // Leave room for the EOS appended when the response is scored.
    while seq.len() - start < max_len && seq.len() < cfg.max_seq - 1 {
        let logits = policy.next_token_logits(&seq)?;
        let tok = sample_logits(&logits, temperature, rng) as Token;
        seq.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(seq.split_off(start))
}
