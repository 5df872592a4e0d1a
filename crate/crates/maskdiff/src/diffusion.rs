//! Masked discrete diffusion: forward corruption, reverse-step distributions,
//! and the variational objectives built from them.
//!
//! The forward process keeps each token of a clean sequence with probability
//! alpha(t) and replaces it with MASK otherwise; positions never interact.
//! Walking a T-step grid back toward t = 0, a masked position reveals with
//! probability (alpha_s - alpha_t)/(1 - alpha_t), drawing the revealed token
//! from a denoiser's categorical row; revealed positions stay fixed.
//!
//! Objectives provided here, all as expectations over forward states of the
//! clean sequence (computed exactly by enumerating mask patterns, or by Monte
//! Carlo):
//!
//! * [`nelbo`]: negative evidence lower bound of the unconditional model; the
//!   per-step integrand is the closed-form KL of [`step_kl`].
//! * [`ddps_loss`]: upper bound on the negative conditional log-likelihood of
//!   a reverse chain whose transitions are tilted by a measurement-likelihood
//!   weight; equals `nelbo` of the candidate when the tilt is constant.
//! * [`aps_loss`]: the same bound re-decomposed around a fixed pretrained
//!   denoiser: pretrained NELBO plus per-step log-ratio corrections minus the
//!   expected tilt.
//! * [`practical_aps_loss`]: the optimizable surrogate that replaces the
//!   unknown clean token by the pretrained prediction and drops terms that do
//!   not depend on the candidate.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::state::TokenState;
use crate::table::{ln_floored, ProbTable};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Exact expectations enumerate 2^L mask patterns per step; hard cap on L.
pub const EXACT_ENUM_MAX_LEN: usize = 20;

/// Anything that predicts per-position token probabilities for the clean
/// sequence given a partially revealed state. `step` is the schedule index in
/// 1..=T; state-independent candidates may ignore the state, step-independent
/// denoisers may ignore the step.
pub trait Denoiser {
    fn len(&self) -> usize;
    fn vocab(&self) -> usize;
    fn predict(&self, z: &TokenState, step: usize) -> Result<ProbTable>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One probability table per schedule step, independent of the state. This is
/// the shape of an optimized candidate: step i in 1..=T uses `tables[i-1]`.
#[derive(Debug, Clone)]
pub struct StepTables {
    tables: Vec<ProbTable>,
}

impl StepTables {
    pub fn new(tables: Vec<ProbTable>) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::invalid("need at least one per-step table"));
        }
        let (len, vocab) = (tables[0].len(), tables[0].vocab());
        for (i, t) in tables.iter().enumerate() {
            if t.len() != len || t.vocab() != vocab {
                return Err(Error::invalid(format!(
                    "table {i} is {}x{}, expected {len}x{vocab}",
                    t.len(),
                    t.vocab()
                )));
            }
        }
        Ok(StepTables { tables })
    }

    /// The same table at every step.
    pub fn constant(table: ProbTable, steps: usize) -> Result<Self> {
        StepTables::new(vec![table; steps.max(1)])
    }

    pub fn steps(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, step: usize) -> &ProbTable {
        &self.tables[step - 1]
    }
}

impl Denoiser for StepTables {
    fn len(&self) -> usize {
        self.tables[0].len()
    }

    fn vocab(&self) -> usize {
        self.tables[0].vocab()
    }

    fn predict(&self, _z: &TokenState, step: usize) -> Result<ProbTable> {
        if step == 0 || step > self.tables.len() {
            return Err(Error::OutOfRange(format!(
                "step {step} outside 1..={}",
                self.tables.len()
            )));
        }
        Ok(self.tables[step - 1].clone())
    }
}

/// Per-step multiplicative path weight, as a log value, evaluated on the
/// candidate's prediction. A measurement likelihood plugs in here; [`UnitTilt`]
/// is the constant-weight (pure prior) case.
pub trait StepTilt {
    fn log_tilt(&self, prediction: &ProbTable, step: usize) -> Result<f64>;
}

/// log-weight identically zero: no measurement information.
pub struct UnitTilt;

impl StepTilt for UnitTilt {
    fn log_tilt(&self, _prediction: &ProbTable, _step: usize) -> Result<f64> {
        Ok(0.0)
    }
}

impl<F> StepTilt for F
where
    F: Fn(&ProbTable, usize) -> Result<f64>,
{
    fn log_tilt(&self, prediction: &ProbTable, step: usize) -> Result<f64> {
        self(prediction, step)
    }
}

/// How to take the expectation over forward states.
#[derive(Debug, Clone, Copy)]
pub enum ExpectationMode {
    /// Enumerate all mask patterns (requires L <= [`EXACT_ENUM_MAX_LEN`]).
    Exact,
    /// Average over `samples` independent forward draws seeded by `seed`.
    MonteCarlo { samples: usize, seed: u64 },
}

/// An expectation value; `std_error` is populated in Monte-Carlo mode.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub std_error: Option<f64>,
}

/// Sample the forward corruption of a clean sequence at time `t`: each token
/// survives independently with probability alpha(t).
pub fn forward_sample(
    x: &[usize],
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TokenState> {
    if x.is_empty() {
        return Err(Error::invalid("clean sequence must be non-empty"));
    }
    let alpha = schedule.alpha(t)?;
    let mut out = Vec::with_capacity(x.len());
    for &tok in x {
        if rng.gen::<f64>() < alpha {
            out.push(Some(tok));
        } else {
            out.push(None);
        }
    }
    Ok(TokenState::from_options(out))
}

/// The reverse-step categorical at one position: probabilities of revealing
/// each token, plus the probability of staying masked.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub token_probs: Vec<f64>,
    pub mask_prob: f64,
}

/// Reverse-step distributions for every position of `z` at schedule step `i`:
/// a revealed position is a point mass on its token; a masked position
/// reveals token k with probability reveal_weight(i) * row(l)[k] and stays
/// masked with the complement.
pub fn posterior_step(
    z: &TokenState,
    prediction: &ProbTable,
    schedule: &NoiseSchedule,
    i: usize,
) -> Result<Vec<StepDistribution>> {
    if prediction.len() != z.len() {
        return Err(Error::invalid(format!(
            "prediction has {} rows for a state of length {}",
            prediction.len(),
            z.len()
        )));
    }
    z.check_vocab(prediction.vocab())?;
    let w = schedule.reveal_weight(i)?;
    let vocab = prediction.vocab();
    let mut out = Vec::with_capacity(z.len());
    for l in 0..z.len() {
        match z.get(l) {
            Some(tok) => {
                let mut token_probs = vec![0.0; vocab];
                token_probs[tok] = 1.0;
                out.push(StepDistribution { token_probs, mask_prob: 0.0 });
            }
            None => {
                let token_probs = prediction.row(l).iter().map(|&p| w * p).collect();
                out.push(StepDistribution { token_probs, mask_prob: 1.0 - w });
            }
        }
    }
    Ok(out)
}

/// Closed-form KL between the true reverse-step posterior at one position and
/// the model's reverse step. A revealed position contributes zero; a masked
/// position contributes reveal_weight(i) * (-ln model_row[true_token]). Zero
/// model probability at the true token yields +infinity.
pub fn step_kl(
    model_row: &[f64],
    true_token: usize,
    masked: bool,
    schedule: &NoiseSchedule,
    i: usize,
) -> Result<f64> {
    if true_token >= model_row.len() {
        return Err(Error::OutOfRange(format!(
            "true token {true_token} exceeds row of {}",
            model_row.len()
        )));
    }
    if !masked {
        // Consume the step index even on the trivial branch so callers get
        // range errors uniformly.
        schedule.reveal_weight(i)?;
        return Ok(0.0);
    }
    let w = schedule.reveal_weight(i)?;
    let p = model_row[true_token];
    if p < 0.0 || !p.is_finite() {
        return Err(Error::invalid(format!("model probability {p} at the true token")));
    }
    if p == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(w * (-p.ln()))
}

/// Reveal distribution scaled by a likelihood weight: token k carries
/// reveal_weight(i) * row[k] * exp(log_likelihood), the mask outcome carries
/// (1 - reveal_weight(i)) * exp(log_likelihood). Deliberately unnormalized —
/// the scale is a path weight, constant across this position's outcomes.
pub fn tilted_reveal_weights(
    model_row: &[f64],
    log_likelihood: f64,
    schedule: &NoiseSchedule,
    i: usize,
) -> Result<StepDistribution> {
    if !log_likelihood.is_finite() {
        return Err(Error::invalid(format!(
            "log likelihood {log_likelihood} is not finite"
        )));
    }
    let w = schedule.reveal_weight(i)?;
    let scale = log_likelihood.exp();
    Ok(StepDistribution {
        token_probs: model_row.iter().map(|&p| w * p * scale).collect(),
        mask_prob: (1.0 - w) * scale,
    })
}

/// Visit every forward state of `x` at keep probability `alpha`, calling
/// `f(weight, state, masked_positions)` for each mask pattern with non-zero
/// probability.
fn for_each_forward_state(
    x: &[usize],
    alpha: f64,
    mut f: impl FnMut(f64, &TokenState, &[usize]) -> Result<()>,
) -> Result<()> {
    let len = x.len();
    if len > EXACT_ENUM_MAX_LEN {
        return Err(Error::SizeGuard(format!(
            "exact expectation over {len} positions exceeds the cap of {EXACT_ENUM_MAX_LEN}"
        )));
    }
    for pattern in 0u64..(1u64 << len) {
        let mut weight = 1.0;
        let mut tokens = Vec::with_capacity(len);
        let mut masked = Vec::new();
        for (l, &tok) in x.iter().enumerate() {
            if (pattern >> l) & 1 == 1 {
                weight *= 1.0 - alpha;
                tokens.push(None);
                masked.push(l);
            } else {
                weight *= alpha;
                tokens.push(Some(tok));
            }
        }
        if weight == 0.0 {
            continue;
        }
        let state = TokenState::from_options(tokens);
        f(weight, &state, &masked)?;
    }
    Ok(())
}

/// Per-step integrands of the objectives, accumulated over the expectation.
struct StepAccumulator {
    cross_entropy_candidate: f64,
    cross_entropy_pretrained: f64,
    pairing: f64,
    log_tilt: f64,
}

/// One Monte-Carlo draw or one enumeration pass of every step's integrand.
/// `pretrained` of `None` skips the pretrained-side terms.
fn accumulate_steps(
    x: &[usize],
    candidate: &dyn Denoiser,
    pretrained: Option<&dyn Denoiser>,
    tilt: &dyn StepTilt,
    schedule: &NoiseSchedule,
    mode: ExpectationMode,
) -> Result<Vec<StepAccumulator>> {
    let mut per_sample = Vec::new();
    match mode {
        ExpectationMode::Exact => {
            let mut acc = StepAccumulator {
                cross_entropy_candidate: 0.0,
                cross_entropy_pretrained: 0.0,
                pairing: 0.0,
                log_tilt: 0.0,
            };
            for i in 1..=schedule.steps {
                let t = schedule.t_of(i)?;
                let alpha = schedule.alpha(t)?;
                let w = schedule.reveal_weight(i)?;
                for_each_forward_state(x, alpha, |weight, state, masked_positions| {
                    let table = candidate.predict(state, i)?;
                    let mut ce_c = 0.0;
                    let mut ce_p = 0.0;
                    let mut pair = 0.0;
                    let theta = match pretrained {
                        Some(p) => Some(p.predict(state, i)?),
                        None => None,
                    };
                    for &l in masked_positions {
                        ce_c += step_kl(table.row(l), x[l], true, schedule, i)?;
                        if let Some(theta) = &theta {
                            ce_p += step_kl(theta.row(l), x[l], true, schedule, i)?;
                            pair += w * (-ln_floored(inner_product(table.row(l), theta.row(l))));
                        }
                    }
                    acc.cross_entropy_candidate += weight * ce_c;
                    acc.cross_entropy_pretrained += weight * ce_p;
                    acc.pairing += weight * pair;
                    acc.log_tilt += weight * tilt.log_tilt(&table, i)?;
                    Ok(())
                })?;
            }
            per_sample.push(acc);
        }
        ExpectationMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::invalid("Monte-Carlo mode needs at least one sample"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples {
                let mut acc = StepAccumulator {
                    cross_entropy_candidate: 0.0,
                    cross_entropy_pretrained: 0.0,
                    pairing: 0.0,
                    log_tilt: 0.0,
                };
                for i in 1..=schedule.steps {
                    let t = schedule.t_of(i)?;
                    let w = schedule.reveal_weight(i)?;
                    let state = forward_sample(x, t, schedule, &mut rng)?;
                    let table = candidate.predict(&state, i)?;
                    let theta = match pretrained {
                        Some(p) => Some(p.predict(&state, i)?),
                        None => None,
                    };
                    for l in state.masked_positions() {
                        acc.cross_entropy_candidate +=
                            step_kl(table.row(l), x[l], true, schedule, i)?;
                        if let Some(theta) = &theta {
                            acc.cross_entropy_pretrained +=
                                step_kl(theta.row(l), x[l], true, schedule, i)?;
                            acc.pairing +=
                                w * (-ln_floored(inner_product(table.row(l), theta.row(l))));
                        }
                    }
                    acc.log_tilt += tilt.log_tilt(&table, i)?;
                }
                per_sample.push(acc);
            }
        }
    }
    Ok(per_sample)
}

fn inner_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reduce per-sample combined values to an estimate with a standard error.
fn reduce(values: Vec<f64>) -> Estimate {
    let n = values.len();
    if n == 1 {
        return Estimate { value: values[0], std_error: None };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    Estimate { value: mean, std_error: Some((var / n as f64).sqrt()) }
}

fn validate_sequence(x: &[usize], denoiser: &dyn Denoiser) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("clean sequence must be non-empty"));
    }
    if x.len() != denoiser.len() {
        return Err(Error::invalid(format!(
            "sequence of length {} against a predictor for {} positions",
            x.len(),
            denoiser.len()
        )));
    }
    if let Some(&bad) = x.iter().find(|&&t| t >= denoiser.vocab()) {
        return Err(Error::OutOfRange(format!(
            "token {bad} exceeds vocabulary of {}",
            denoiser.vocab()
        )));
    }
    Ok(())
}

/// Negative evidence lower bound of the unconditional model on `x`: the sum
/// over steps of the expected closed-form KL. The reconstruction term at
/// t = 0 vanishes because alpha(0) = 1 pins the t = 0 state to `x` itself.
pub fn nelbo(
    x: &[usize],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mode: ExpectationMode,
) -> Result<Estimate> {
    validate_sequence(x, denoiser)?;
    let per_sample = accumulate_steps(x, denoiser, None, &UnitTilt, schedule, mode)?;
    Ok(reduce(per_sample.into_iter().map(|a| a.cross_entropy_candidate).collect()))
}

/// Expected accumulated log tilt along the forward states:
/// sum_i E[log_tilt(candidate prediction at Z_t, i)].
pub fn expected_log_tilt(
    x: &[usize],
    candidate: &dyn Denoiser,
    tilt: &dyn StepTilt,
    schedule: &NoiseSchedule,
    mode: ExpectationMode,
) -> Result<Estimate> {
    validate_sequence(x, candidate)?;
    let per_sample = accumulate_steps(x, candidate, None, tilt, schedule, mode)?;
    Ok(reduce(per_sample.into_iter().map(|a| a.log_tilt).collect()))
}

/// Upper bound on the negative log-likelihood of `x` under the tilted reverse
/// chain driven by `candidate`: expected per-step cross-entropy minus the
/// expected log tilt. With a constant tilt of zero this is exactly the
/// candidate's NELBO.
pub fn ddps_loss(
    x: &[usize],
    candidate: &dyn Denoiser,
    tilt: &dyn StepTilt,
    schedule: &NoiseSchedule,
    mode: ExpectationMode,
) -> Result<Estimate> {
    validate_sequence(x, candidate)?;
    let per_sample = accumulate_steps(x, candidate, None, tilt, schedule, mode)?;
    Ok(reduce(
        per_sample
            .into_iter()
            .map(|a| a.cross_entropy_candidate - a.log_tilt)
            .collect(),
    ))
}

/// The same bound decomposed around a fixed pretrained denoiser: pretrained
/// NELBO, plus per-step expected log-ratios of pretrained to candidate mass
/// at the true token on masked positions, minus the expected log tilt. With
/// candidate == pretrained the middle term vanishes.
pub fn aps_loss(
    x: &[usize],
    candidate: &dyn Denoiser,
    pretrained: &dyn Denoiser,
    tilt: &dyn StepTilt,
    schedule: &NoiseSchedule,
    mode: ExpectationMode,
) -> Result<Estimate> {
    validate_sequence(x, candidate)?;
    validate_sequence(x, pretrained)?;
    if candidate.vocab() != pretrained.vocab() {
        return Err(Error::invalid("candidate and pretrained vocabularies differ"));
    }
    let per_sample = accumulate_steps(x, candidate, Some(pretrained), tilt, schedule, mode)?;
    Ok(reduce(
        per_sample
            .into_iter()
            .map(|a| {
                // nelbo(theta) + sum w (ln<theta,x> - ln<phi,x>) - tilt,
                // assembled from the two cross-entropy accumulators:
                // ln-ratio = ce_candidate - ce_pretrained per masked position.
                a.cross_entropy_pretrained
                    + (a.cross_entropy_candidate - a.cross_entropy_pretrained)
                    - a.log_tilt
            })
            .collect(),
    ))
}

/// Optimizable surrogate of [`aps_loss`]: the unknown clean token's one-hot is
/// replaced by the pretrained row, giving expected pairing terms
/// reveal_weight * (-ln <candidate_row, pretrained_row>) on masked positions,
/// minus the expected log tilt. Terms independent of the candidate (the
/// pretrained NELBO and the pretrained-side log masses) are dropped.
pub fn practical_aps_loss(
    x: &[usize],
    candidate: &dyn Denoiser,
    pretrained: &dyn Denoiser,
    tilt: &dyn StepTilt,
    schedule: &NoiseSchedule,
    mode: ExpectationMode,
) -> Result<Estimate> {
    validate_sequence(x, candidate)?;
    validate_sequence(x, pretrained)?;
    let per_sample = accumulate_steps(x, candidate, Some(pretrained), tilt, schedule, mode)?;
    Ok(reduce(per_sample.into_iter().map(|a| a.pairing - a.log_tilt).collect()))
}
