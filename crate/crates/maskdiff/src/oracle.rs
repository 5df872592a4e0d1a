//! Brute-force ground truth on tiny instances: the exact Bayes posterior over
//! token sequences, the exact path-marginalized distribution of the tilted
//! reverse chain, and distribution-distance helpers.
//!
//! Everything here trades exponential cost for independence from the code
//! under test: sequences and partial states are enumerated outright, with
//! hard size guards so a misconfigured call fails instead of hanging.

use crate::codebook::Quantizer;
use crate::diffusion::{Denoiser, StepTilt};
use crate::error::{Error, Result};
use crate::measure::MeasurementSpec;
use crate::schedule::NoiseSchedule;
use crate::state::TokenState;
use crate::world::{log_sum_exp, PatchDecoder, TemplatePrior};

/// Largest K^L the Bayes-posterior enumeration will attempt.
pub const EXACT_POSTERIOR_MAX_STATES: usize = 1_000_000;
/// Largest (K+1)^L the reverse-chain dynamic program will attempt.
pub const MODEL_POSTERIOR_MAX_STATES: usize = 4096;
/// Largest step count the reverse-chain dynamic program will attempt.
pub const MODEL_POSTERIOR_MAX_STEPS: usize = 4;

fn checked_power(base: usize, exp: usize, cap: usize, what: &str) -> Result<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base).unwrap_or(usize::MAX);
        if acc > cap {
            return Err(Error::SizeGuard(format!(
                "{what}: {base}^{exp} exceeds the cap of {cap}"
            )));
        }
    }
    Ok(acc)
}

fn code_to_tokens(code: usize, len: usize, base: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut c = code;
    for _ in 0..len {
        out.push(c % base);
        c /= base;
    }
    out
}

fn tokens_to_code(tokens: &[usize], base: usize) -> usize {
    let mut code = 0;
    for &t in tokens.iter().rev() {
        code = code * base + t;
    }
    code
}

/// The exact Bayes posterior q(x | y) over all K^L token sequences, obtained
/// by enumeration: unnormalized log weight = prior log mass + measurement
/// log likelihood of the decoded image.
#[derive(Debug, Clone)]
pub struct EnumeratedPosterior {
    pub len: usize,
    pub vocab: usize,
    /// Unnormalized log weights indexed by little-endian base-K code.
    log_weights: Vec<f64>,
    /// Log of the total unnormalized mass.
    log_norm: f64,
    /// Normalized probabilities, same indexing.
    probs: Vec<f64>,
    /// L x K per-position marginals.
    marginals: Vec<Vec<f64>>,
}

impl EnumeratedPosterior {
    pub fn prob(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        Ok(self.probs[tokens_to_code(tokens, self.vocab)])
    }

    /// Unnormalized log weight of one sequence.
    pub fn log_weight(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        Ok(self.log_weights[tokens_to_code(tokens, self.vocab)])
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.len {
            return Err(Error::invalid(format!(
                "sequence of length {}, posterior covers {}",
                tokens.len(),
                self.len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::OutOfRange(format!(
                "token {bad} exceeds vocabulary {}",
                self.vocab
            )));
        }
        Ok(())
    }
}

fn marginals_from_probs(probs: &[f64], len: usize, vocab: usize) -> Vec<Vec<f64>> {
    let mut marg = vec![vec![0.0; vocab]; len];
    for (code, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut c = code;
        for row in marg.iter_mut() {
            row[c % vocab] += p;
            c /= vocab;
        }
    }
    marg
}

/// Enumerate the Bayes posterior for a template prior observed through a
/// measurement that already carries its observation.
pub fn exact_posterior(
    prior: &TemplatePrior,
    quantizer: &dyn Quantizer,
    decoder: &PatchDecoder,
    spec: &MeasurementSpec,
) -> Result<EnumeratedPosterior> {
    let len = prior.len();
    let vocab = prior.vocab();
    if quantizer.size() != vocab {
        return Err(Error::invalid(format!(
            "codebook size {} does not match prior vocabulary {vocab}",
            quantizer.size()
        )));
    }
    if decoder.tokens() != len {
        return Err(Error::invalid(format!(
            "decoder grid covers {} tokens, prior covers {len}",
            decoder.tokens()
        )));
    }
    let total = checked_power(vocab, len, EXACT_POSTERIOR_MAX_STATES, "posterior enumeration")?;
    let mut log_weights = vec![f64::NEG_INFINITY; total];
    for (code, slot) in log_weights.iter_mut().enumerate() {
        let tokens = code_to_tokens(code, len, vocab);
        let log_prior = prior.log_prob(&tokens)?;
        if log_prior == f64::NEG_INFINITY {
            continue;
        }
        let image = decoder.decode_tokens(&tokens, quantizer)?;
        *slot = log_prior + spec.log_likelihood(&image)?;
    }
    let log_norm = log_sum_exp(&log_weights);
    if log_norm == f64::NEG_INFINITY {
        return Err(Error::DegenerateEvidence);
    }
    let probs: Vec<f64> = log_weights
        .iter()
        .map(|&lw| if lw == f64::NEG_INFINITY { 0.0 } else { (lw - log_norm).exp() })
        .collect();
    let marginals = marginals_from_probs(&probs, len, vocab);
    Ok(EnumeratedPosterior { len, vocab, log_weights, log_norm, probs, marginals })
}

/// The exact distribution of the tilted reverse chain, obtained by dynamic
/// programming over all partial states: starting from the all-masked state,
/// each step multiplies the factorized reveal transition by one tilt factor
/// evaluated at the denoiser prediction for the current state.
#[derive(Debug, Clone)]
pub struct ModelPosterior {
    pub len: usize,
    pub vocab: usize,
    /// Unnormalized log weights over final sequences, base-K indexed.
    log_weights: Vec<f64>,
    /// Log of the total path mass; exactly 0 for a unit tilt.
    log_mass: f64,
}

impl ModelPosterior {
    pub fn log_mass(&self) -> f64 {
        self.log_mass
    }

    /// Unnormalized log weight of one final sequence.
    pub fn log_weight(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        Ok(self.log_weights[tokens_to_code(tokens, self.vocab)])
    }

    /// Normalized probability of one final sequence.
    pub fn prob(&self, tokens: &[usize]) -> Result<f64> {
        let lw = self.log_weight(tokens)?;
        Ok(if lw == f64::NEG_INFINITY { 0.0 } else { (lw - self.log_mass).exp() })
    }

    pub fn normalized_probs(&self) -> Vec<f64> {
        self.log_weights
            .iter()
            .map(|&lw| if lw == f64::NEG_INFINITY { 0.0 } else { (lw - self.log_mass).exp() })
            .collect()
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        marginals_from_probs(&self.normalized_probs(), self.len, self.vocab)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.len {
            return Err(Error::invalid(format!(
                "sequence of length {}, distribution covers {}",
                tokens.len(),
                self.len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::OutOfRange(format!(
                "token {bad} exceeds vocabulary {}",
                self.vocab
            )));
        }
        Ok(())
    }
}

fn code_to_state(code: usize, len: usize, vocab: usize) -> TokenState {
    let mut opts = Vec::with_capacity(len);
    let mut c = code;
    for _ in 0..len {
        let digit = c % (vocab + 1);
        c /= vocab + 1;
        opts.push(if digit == vocab { None } else { Some(digit) });
    }
    TokenState::from_options(opts)
}

pub fn exact_model_posterior(
    denoiser: &dyn Denoiser,
    tilt: &dyn StepTilt,
    schedule: &NoiseSchedule,
) -> Result<ModelPosterior> {
    let len = denoiser.len();
    let vocab = denoiser.vocab();
    let steps = schedule.steps;
    if steps > MODEL_POSTERIOR_MAX_STEPS {
        return Err(Error::SizeGuard(format!(
            "reverse-chain enumeration caps at {MODEL_POSTERIOR_MAX_STEPS} steps, got {steps}"
        )));
    }
    let states = checked_power(vocab + 1, len, MODEL_POSTERIOR_MAX_STATES, "reverse-chain states")?;
    let base = vocab + 1;
    // Little-endian digit place values for updating one position of a code.
    let mut place = vec![1usize; len];
    for l in 1..len {
        place[l] = place[l - 1] * base;
    }
    let all_masked_code = (0..len).fold(0, |acc, l| acc + vocab * place[l]);
    let mut log_w = vec![f64::NEG_INFINITY; states];
    log_w[all_masked_code] = 0.0;

    for k in 1..=steps {
        let i = steps + 1 - k;
        let w = schedule.reveal_weight(i)?;
        let log_stay = if w < 1.0 { (1.0 - w).ln() } else { f64::NEG_INFINITY };
        let mut next = vec![f64::NEG_INFINITY; states];
        for code in 0..states {
            if log_w[code] == f64::NEG_INFINITY {
                continue;
            }
            let state = code_to_state(code, len, vocab);
            let masked: Vec<usize> = state.masked_positions().collect();
            // Every step multiplies one tilt factor, matching the loss-side
            // accounting which tilts every step of the forward trajectory —
            // even those whose state is already fully revealed.
            let prediction = denoiser.predict(&state, i)?;
            let step_tilt = tilt.log_tilt(&prediction, i)?;
            if !step_tilt.is_finite() && step_tilt != f64::NEG_INFINITY {
                return Err(Error::invalid(format!(
                    "tilt produced a non-finite log value {step_tilt} at step {i}"
                )));
            }
            if masked.is_empty() {
                let lf = log_w[code] + step_tilt;
                if lf != f64::NEG_INFINITY {
                    next[code] = log_sum_exp(&[next[code], lf]);
                }
                continue;
            }
            // Per masked position, option vocab means "stay masked"; option
            // k < vocab means "reveal to k". Precompute each option's log
            // factor, then walk the mixed-radix product of options.
            let mut factors = Vec::with_capacity(masked.len());
            for &l in &masked {
                let row = prediction.row(l);
                let mut opts = Vec::with_capacity(base);
                for &p in row.iter() {
                    opts.push(if w > 0.0 && p > 0.0 {
                        w.ln() + p.ln()
                    } else {
                        f64::NEG_INFINITY
                    });
                }
                opts.push(log_stay);
                factors.push((l, opts));
            }
            let mut choice = vec![0usize; masked.len()];
            loop {
                let mut log_factor = log_w[code] + step_tilt;
                let mut succ = code;
                for (slot, &(l, ref opts)) in choice.iter().zip(&factors) {
                    log_factor += opts[*slot];
                    if log_factor == f64::NEG_INFINITY {
                        break;
                    }
                    if *slot < vocab {
                        // Digit moves from MASK (vocab) to the revealed token.
                        succ -= (vocab - *slot) * place[l];
                    }
                }
                if log_factor != f64::NEG_INFINITY {
                    next[succ] = log_sum_exp(&[next[succ], log_factor]);
                }
                // Advance the mixed-radix counter.
                let mut pos = 0;
                loop {
                    if pos == choice.len() {
                        break;
                    }
                    choice[pos] += 1;
                    if choice[pos] < base {
                        break;
                    }
                    choice[pos] = 0;
                    pos += 1;
                }
                if pos == choice.len() {
                    break;
                }
            }
        }
        log_w = next;
    }

    // After the last step the reveal weight was 1, so no mass may remain on
    // any partially masked state.
    let mut final_weights = vec![f64::NEG_INFINITY; checked_power(vocab, len, states, "final states")?];
    for (code, &lw) in log_w.iter().enumerate() {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        let state = code_to_state(code, len, vocab);
        let tokens = state.fully_revealed().map_err(|_| {
            Error::InvariantViolation(format!(
                "reverse chain left mass {lw} on a partially masked state"
            ))
        })?;
        final_weights[tokens_to_code(&tokens, vocab)] = lw;
    }
    let log_mass = log_sum_exp(&final_weights);
    if log_mass == f64::NEG_INFINITY {
        return Err(Error::InvariantViolation(
            "the tilted reverse chain carries no mass".into(),
        ));
    }
    Ok(ModelPosterior { len, vocab, log_weights: final_weights, log_mass })
}

/// Total-variation distance between two distributions on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distributions of different sizes: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0)
}
