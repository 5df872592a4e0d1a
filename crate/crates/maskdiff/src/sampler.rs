//! Reverse-process drivers: measurement-guided sampling with anchored
//! remasking, its ablations, and an unguided ancestral sampler.
//!
//! The guided samplers walk the reverse schedule committing tokens in
//! irreversible anchor sets whose sizes follow the unmasking count schedule:
//! at each step the denoiser is queried at the current state, the inner loop
//! optimizes per-position logits against the measurement, expected embeddings
//! are quantized to candidate tokens, and the highest-confidence masked
//! positions are frozen. Variants differ only in whether the inner loop runs
//! and which table scores confidence.

use crate::codebook::Quantizer;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::measure::MeasurementSpec;
use crate::opt::{evaluate_table, optimize, GuidanceProblem, OptConfig};
use crate::schedule::{unmask_counts, NoiseSchedule};
use crate::state::TokenState;
use crate::table::ProbTable;
use crate::world::PatchDecoder;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Inner optimization; confidence from the optimized table.
    Aps,
    /// Inner optimization; confidence from the denoiser table.
    Aps1,
    /// No optimization: tokens sampled from the denoiser, denoiser confidence.
    Standard,
    /// Unguided ancestral reversal of the forward masking chain.
    Prior,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Aps => "aps",
            SamplerKind::Aps1 => "aps1",
            SamplerKind::Standard => "standard",
            SamplerKind::Prior => "prior",
        }
    }
}

/// Everything that shapes a run besides the world components.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub schedule: NoiseSchedule,
    pub opt: OptConfig,
    /// Scale of Gumbel noise added to confidences before ranking; zero (the
    /// default) keeps anchor selection deterministic.
    pub gumbel: f64,
    /// Reveal each anchor only with the schedule's reveal probability instead
    /// of deterministically. Exploratory; breaks the exact-count invariant.
    pub stochastic_reveal: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, schedule: NoiseSchedule) -> Self {
        SamplerConfig {
            kind,
            schedule,
            opt: OptConfig::default(),
            gumbel: 0.0,
            stochastic_reveal: false,
        }
    }
}

/// Everything recorded about one reverse step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Schedule index i (runs T down to 1).
    pub schedule_index: usize,
    pub state_before: TokenState,
    /// Denoiser prediction at `state_before`.
    pub denoised: ProbTable,
    /// Optimized table; equals `denoised` for the unoptimized kinds.
    pub optimized: ProbTable,
    /// Candidate token per position (committed tokens where frozen).
    pub tokens: Vec<usize>,
    /// Confidence per position, before any exploration noise.
    pub confidence: Vec<f64>,
    /// Positions newly committed this step, ascending.
    pub anchors: Vec<usize>,
    /// Inner-loop loss trace (empty for the unoptimized kinds).
    pub inner_losses: Vec<f64>,
    /// True when the inner loop aborted on a non-finite loss.
    pub diverged: bool,
    pub state_after: TokenState,
}

#[derive(Debug, Clone)]
pub struct SamplerRun {
    pub kind: SamplerKind,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<usize>,
    pub image: Image,
}

impl SamplerRun {
    /// True when any step's inner loop diverged.
    pub fn any_diverged(&self) -> bool {
        self.steps.iter().any(|s| s.diverged)
    }
}

/// Probability the table assigns to each chosen token.
pub fn confidence(table: &ProbTable, tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.len() != table.len() {
        return Err(Error::invalid(format!(
            "{} tokens against a table of {} rows",
            tokens.len(),
            table.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (l, &tok) in tokens.iter().enumerate() {
        if tok >= table.vocab() {
            return Err(Error::OutOfRange(format!(
                "token {tok} at position {l} exceeds vocabulary {}",
                table.vocab()
            )));
        }
        out.push(table.get(l, tok));
    }
    Ok(out)
}

/// Top-need masked positions by score, descending, ties to the lowest index.
/// `target` is the total number of committed positions after this step.
pub fn select_anchors(scores: &[f64], state: &TokenState, target: usize) -> Result<Vec<usize>> {
    if scores.len() != state.len() {
        return Err(Error::invalid(format!(
            "{} scores for a state of length {}",
            scores.len(),
            state.len()
        )));
    }
    let frozen = state.revealed_count();
    if target < frozen {
        return Err(Error::ScheduleViolation(format!(
            "target count {target} is below the {frozen} already-committed positions"
        )));
    }
    let need = target - frozen;
    let mut candidates: Vec<usize> = state.masked_positions().collect();
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = candidates.into_iter().take(need).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Commit the anchor positions to their candidate tokens; everything else is
/// untouched. Overwriting a committed position is an invariant violation.
pub fn update_state(state: &TokenState, tokens: &[usize], anchors: &[usize]) -> Result<TokenState> {
    if tokens.len() != state.len() {
        return Err(Error::invalid(format!(
            "{} tokens for a state of length {}",
            tokens.len(),
            state.len()
        )));
    }
    let mut next = state.clone();
    for &l in anchors {
        if l >= tokens.len() {
            return Err(Error::OutOfRange(format!("anchor {l} outside the sequence")));
        }
        next.reveal(l, tokens[l])?;
    }
    Ok(next)
}

fn sample_categorical(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    row.len() - 1
}

fn sample_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().max(1e-300);
    -(-u.ln()).ln()
}

fn check_components(
    denoiser: &dyn Denoiser,
    quantizer: &dyn Quantizer,
    decoder: &PatchDecoder,
) -> Result<()> {
    if denoiser.len() != decoder.tokens() {
        return Err(Error::invalid(format!(
            "denoiser covers {} positions, decoder grid has {}",
            denoiser.len(),
            decoder.tokens()
        )));
    }
    if denoiser.vocab() != quantizer.size() {
        return Err(Error::invalid(format!(
            "denoiser vocabulary {} does not match codebook size {}",
            denoiser.vocab(),
            quantizer.size()
        )));
    }
    if quantizer.dim() != decoder.dim {
        return Err(Error::invalid(format!(
            "codebook dimension {} does not match decoder dimension {}",
            quantizer.dim(),
            decoder.dim
        )));
    }
    Ok(())
}

/// Run the configured sampler to a fully revealed sequence and decoded image.
pub fn sample(
    denoiser: &dyn Denoiser,
    quantizer: &dyn Quantizer,
    decoder: &PatchDecoder,
    spec: &MeasurementSpec,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SamplerRun> {
    check_components(denoiser, quantizer, decoder)?;
    match cfg.kind {
        SamplerKind::Prior => ancestral_sample(denoiser, quantizer, decoder, cfg, rng),
        _ => anchored_sample(denoiser, quantizer, decoder, spec, cfg, rng),
    }
}

fn anchored_sample(
    denoiser: &dyn Denoiser,
    quantizer: &dyn Quantizer,
    decoder: &PatchDecoder,
    spec: &MeasurementSpec,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SamplerRun> {
    let len = denoiser.len();
    let steps = cfg.schedule.steps;
    let counts = unmask_counts(len, steps)?;
    let mut state = TokenState::all_masked(len);
    let mut records = Vec::with_capacity(steps);
    let mut carried_logits: Option<crate::table::LogitTable> = None;
    for k in 1..=steps {
        let i = steps + 1 - k;
        let target = counts[k - 1];
        let denoised = denoiser.predict(&state, i)?;
        let state_before = state.clone();
        let (optimized, tokens, inner_losses, diverged) = match cfg.kind {
            SamplerKind::Standard => {
                let mut tokens = Vec::with_capacity(len);
                for l in 0..len {
                    match state.get(l) {
                        Some(tok) => tokens.push(tok),
                        None => tokens.push(sample_categorical(denoised.row(l), rng)),
                    }
                }
                (denoised.clone(), tokens, Vec::new(), false)
            }
            SamplerKind::Aps | SamplerKind::Aps1 => {
                let problem = GuidanceProblem {
                    quantizer,
                    decoder,
                    spec,
                    pretrained: &denoised,
                    state: &state,
                };
                if cfg.opt.inner_steps == 0 && !cfg.opt.warm_start {
                    // Zero steps leave the denoiser output untouched; evaluate
                    // it directly rather than through a logit round trip.
                    let eval = evaluate_table(&problem, &denoised)?;
                    (eval.probs, eval.tokens, vec![eval.total_loss], false)
                } else {
                    let init = match (&carried_logits, cfg.opt.warm_start) {
                        (Some(prev), true) => prev.clone(),
                        _ => denoised.to_logits(),
                    };
                    let out = optimize(&problem, &init, &cfg.opt)?;
                    if cfg.opt.warm_start {
                        carried_logits = Some(out.logits.clone());
                    }
                    (out.eval.probs, out.eval.tokens, out.loss_trace, out.diverged)
                }
            }
            SamplerKind::Prior => unreachable!("ancestral runs take the other driver"),
        };
        let conf_source = match cfg.kind {
            SamplerKind::Aps => &optimized,
            _ => &denoised,
        };
        let kappa = confidence(conf_source, &tokens)?;
        let mut scores = kappa.clone();
        if cfg.gumbel > 0.0 {
            for l in state.masked_positions() {
                scores[l] += cfg.gumbel * sample_gumbel(rng);
            }
        }
        let mut anchors = select_anchors(&scores, &state, target)?;
        if cfg.stochastic_reveal {
            let w = cfg.schedule.reveal_weight(i)?;
            anchors.retain(|_| rng.gen::<f64>() < w);
        }
        state = update_state(&state, &tokens, &anchors)?;
        records.push(StepRecord {
            schedule_index: i,
            state_before,
            denoised,
            optimized,
            tokens,
            confidence: kappa,
            anchors,
            inner_losses,
            diverged,
            state_after: state.clone(),
        });
    }
    let final_tokens = state.fully_revealed()?;
    let image = decoder.decode_tokens(&final_tokens, quantizer)?;
    Ok(SamplerRun { kind: cfg.kind, steps: records, final_tokens, image })
}

/// Reverse the forward chain position by position: each masked position
/// reveals with the schedule's weight, drawing from the denoiser row.
fn ancestral_sample(
    denoiser: &dyn Denoiser,
    quantizer: &dyn Quantizer,
    decoder: &PatchDecoder,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SamplerRun> {
    let len = denoiser.len();
    let steps = cfg.schedule.steps;
    let mut state = TokenState::all_masked(len);
    let mut records = Vec::with_capacity(steps);
    for k in 1..=steps {
        let i = steps + 1 - k;
        let w = cfg.schedule.reveal_weight(i)?;
        let denoised = denoiser.predict(&state, i)?;
        let state_before = state.clone();
        let mut tokens = Vec::with_capacity(len);
        let mut anchors = Vec::new();
        for l in 0..len {
            match state.get(l) {
                Some(tok) => tokens.push(tok),
                None => {
                    let tok = sample_categorical(denoised.row(l), rng);
                    tokens.push(tok);
                    if rng.gen::<f64>() < w {
                        anchors.push(l);
                    }
                }
            }
        }
        let kappa = confidence(&denoised, &tokens)?;
        state = update_state(&state, &tokens, &anchors)?;
        records.push(StepRecord {
            schedule_index: i,
            state_before,
            denoised: denoised.clone(),
            optimized: denoised,
            tokens,
            confidence: kappa,
            anchors,
            inner_losses: Vec::new(),
            diverged: false,
            state_after: state.clone(),
        });
    }
    let final_tokens = state.fully_revealed()?;
    let image = decoder.decode_tokens(&final_tokens, quantizer)?;
    Ok(SamplerRun { kind: SamplerKind::Prior, steps: records, final_tokens, image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;
    use crate::measure::{LossKind, Operator};
    use crate::schedule::ScheduleKind;
    use crate::world::{PriorDenoiser, TemplatePrior};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cosine(steps: usize) -> NoiseSchedule {
        NoiseSchedule { kind: ScheduleKind::Cosine, steps }
    }

    fn toy_world(rho: f64, seed: u64) -> (TemplatePrior, Codebook, PatchDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let templates: Vec<Vec<usize>> =
            (0..3).map(|_| (0..16).map(|_| rng.gen_range(0..4)).collect()).collect();
        let prior = TemplatePrior::new(templates, vec![0.5, 0.3, 0.2], rho, 4).unwrap();
        let cb = Codebook::new(2).unwrap();
        let dec = PatchDecoder::new(4, 4, 2, 2, 77).unwrap();
        (prior, cb, dec)
    }

    fn identity_spec(y: Vec<f64>) -> MeasurementSpec {
        MeasurementSpec::new(Operator::Identity, 0.0, LossKind::L2)
            .unwrap()
            .with_observation(y)
    }

    fn unguided_spec() -> MeasurementSpec {
        MeasurementSpec {
            lambda_data: 0.0,
            ..MeasurementSpec::new(Operator::Identity, 0.0, LossKind::L2).unwrap()
        }
    }

    #[test]
    fn confidence_reads_the_chosen_probability() {
        let table = ProbTable::from_rows(vec![vec![0.7, 0.2, 0.1], vec![0.0, 1.0, 0.0]]).unwrap();
        let k = confidence(&table, &[0, 1]).unwrap();
        assert_eq!(k, vec![0.7, 1.0]);
        assert!(confidence(&table, &[0, 3]).is_err(), "token outside vocabulary");
        assert!(confidence(&table, &[0]).is_err(), "length mismatch");
    }

    #[test]
    fn select_anchors_takes_top_scores_with_index_ties() {
        let state = TokenState::all_masked(3);
        let picked = select_anchors(&[0.9, 0.4, 0.8], &state, 2).unwrap();
        assert_eq!(picked, vec![0, 2]);
        let tied = select_anchors(&[0.5, 0.5, 0.1], &state, 1).unwrap();
        assert_eq!(tied, vec![0], "ties break toward the lowest index");
        let mut frozen = TokenState::all_masked(3);
        frozen.reveal(0, 1).unwrap();
        frozen.reveal(1, 0).unwrap();
        frozen.reveal(2, 1).unwrap();
        assert_eq!(select_anchors(&[0.2, 0.3, 0.4], &frozen, 3).unwrap(), Vec::<usize>::new());
        assert!(
            matches!(select_anchors(&[0.2, 0.3, 0.4], &frozen, 2), Err(Error::ScheduleViolation(_))),
            "a shrinking target must be rejected"
        );
    }

    #[test]
    fn update_state_commits_exactly_the_anchors() {
        let state = TokenState::all_masked(4);
        let tokens = vec![2, 0, 1, 3];
        let same = update_state(&state, &tokens, &[]).unwrap();
        assert_eq!(same.masked_count(), 4);
        let all = update_state(&state, &tokens, &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.fully_revealed().unwrap(), tokens);
        let partial = update_state(&state, &tokens, &[1, 3]).unwrap();
        assert!(update_state(&partial, &tokens, &[1]).is_err(), "anchors must not overwrite");
    }

    #[test]
    fn aps_counts_follow_schedule_and_frozen_tokens_persist() {
        let (prior, cb, dec) = toy_world(0.1, 1);
        let den = PriorDenoiser::new(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt = prior.sample(&mut rng);
        let y = dec.decode_tokens(&gt, &cb).unwrap().data;
        let spec = identity_spec(y);
        let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(8));
        cfg.opt.inner_steps = 15;
        let run = sample(&den, &cb, &dec, &spec, &cfg, &mut rng).unwrap();
        let counts = unmask_counts(16, 8).unwrap();
        assert_eq!(run.steps.len(), 8);
        for (k, rec) in run.steps.iter().enumerate() {
            assert_eq!(rec.schedule_index, 8 - k);
            assert_eq!(
                rec.state_after.revealed_count(),
                counts[k],
                "step {k} should land exactly on the schedule"
            );
            for l in 0..16 {
                if let Some(tok) = rec.state_before.get(l) {
                    assert_eq!(rec.state_after.get(l), Some(tok), "frozen token moved at {l}");
                    assert_eq!(rec.tokens[l], tok);
                }
            }
            for &k2 in &rec.confidence {
                assert!((0.0..=1.0).contains(&k2), "confidence {k2} outside [0,1]");
            }
        }
        assert_eq!(run.final_tokens.len(), 16);
    }

    #[test]
    fn aps_is_deterministic_for_a_fixed_seed() {
        let (prior, cb, dec) = toy_world(0.1, 2);
        let den = PriorDenoiser::new(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = prior.sample(&mut rng);
        let y = dec.decode_tokens(&gt, &cb).unwrap().data;
        let spec = identity_spec(y);
        let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(6));
        cfg.opt.inner_steps = 10;
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        let a = sample(&den, &cb, &dec, &spec, &cfg, &mut rng_a).unwrap();
        let b = sample(&den, &cb, &dec, &spec, &cfg, &mut rng_b).unwrap();
        assert_eq!(a.final_tokens, b.final_tokens);
        assert_eq!(a.image.data, b.image.data);
        for (ra, rb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(ra.anchors, rb.anchors);
            assert_eq!(ra.tokens, rb.tokens);
            assert_eq!(ra.confidence, rb.confidence);
        }
    }

    #[test]
    fn aps_recovers_a_template_under_identity_measurement() {
        let (prior, cb, dec) = toy_world(0.1, 3);
        let den = PriorDenoiser::new(prior.clone());
        let mut hits = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = prior.templates()[seed as usize % 3].clone();
            let y = dec.decode_tokens(&gt, &cb).unwrap().data;
            let spec = identity_spec(y);
            let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(8));
            cfg.opt.inner_steps = 40;
            cfg.opt.lr = 0.5;
            let run = sample(&den, &cb, &dec, &spec, &cfg, &mut rng).unwrap();
            if run.final_tokens == gt {
                hits += 1;
            }
        }
        assert!(
            hits * 100 >= seeds * 95,
            "identity measurement recovered the truth on only {hits}/{seeds} seeds"
        );
    }

    #[test]
    fn aps_and_aps1_coincide_without_inner_steps() {
        let (prior, cb, dec) = toy_world(0.1, 5);
        let den = PriorDenoiser::new(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = prior.sample(&mut rng);
        let y = dec.decode_tokens(&gt, &cb).unwrap().data;
        let spec = identity_spec(y);
        let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(5));
        cfg.opt.inner_steps = 0;
        let mut cfg1 = cfg.clone();
        cfg1.kind = SamplerKind::Aps1;
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let a = sample(&den, &cb, &dec, &spec, &cfg, &mut rng_a).unwrap();
        let b = sample(&den, &cb, &dec, &spec, &cfg1, &mut rng_b).unwrap();
        assert_eq!(a.final_tokens, b.final_tokens);
        for (ra, rb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(ra.anchors, rb.anchors);
            assert_eq!(ra.confidence, rb.confidence, "confidence sources agree when nothing moves");
        }
    }

    #[test]
    fn aps1_differs_from_aps_only_in_the_confidence_source() {
        let (prior, cb, dec) = toy_world(0.1, 8);
        let den = PriorDenoiser::new(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = prior.sample(&mut rng);
        let y = dec.decode_tokens(&gt, &cb).unwrap().data;
        let spec = identity_spec(y);
        let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(6));
        cfg.opt.inner_steps = 25;
        let mut cfg1 = cfg.clone();
        cfg1.kind = SamplerKind::Aps1;
        let mut rng_a = ChaCha8Rng::seed_from_u64(11);
        let mut rng_b = ChaCha8Rng::seed_from_u64(11);
        let a = sample(&den, &cb, &dec, &spec, &cfg, &mut rng_a).unwrap();
        let b = sample(&den, &cb, &dec, &spec, &cfg1, &mut rng_b).unwrap();
        for rec in &a.steps {
            let expect = confidence(&rec.optimized, &rec.tokens).unwrap();
            assert_eq!(rec.confidence, expect, "optimized table scores the anchors");
        }
        for rec in &b.steps {
            let expect = confidence(&rec.denoised, &rec.tokens).unwrap();
            assert_eq!(rec.confidence, expect, "denoiser table scores the anchors");
        }
    }

    #[test]
    fn standard_with_deterministic_prior_emits_the_template() {
        let template = vec![1usize, 3, 0, 2, 1, 0, 3, 2, 2, 0, 1, 3, 0, 1, 2, 3];
        let prior = TemplatePrior::new(vec![template.clone()], vec![1.0], 0.0, 4).unwrap();
        let den = PriorDenoiser::new(prior);
        let cb = Codebook::new(2).unwrap();
        let dec = PatchDecoder::new(4, 4, 2, 2, 77).unwrap();
        let spec = unguided_spec();
        let cfg = SamplerConfig::new(SamplerKind::Standard, cosine(4));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = sample(&den, &cb, &dec, &spec, &cfg, &mut rng).unwrap();
            assert_eq!(run.final_tokens, template);
            let counts = unmask_counts(16, 4).unwrap();
            for (k, rec) in run.steps.iter().enumerate() {
                assert_eq!(rec.state_after.revealed_count(), counts[k]);
            }
        }
    }

    #[test]
    fn loss_offset_never_changes_anchor_decisions() {
        let (prior, cb, dec) = toy_world(0.1, 12);
        let den = PriorDenoiser::new(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gt = prior.sample(&mut rng);
        let y = dec.decode_tokens(&gt, &cb).unwrap().data;
        let spec_a = identity_spec(y.clone());
        let spec_b = MeasurementSpec { loss_offset: -2.5, ..identity_spec(y) };
        let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(6));
        cfg.opt.inner_steps = 20;
        let mut rng_a = ChaCha8Rng::seed_from_u64(14);
        let mut rng_b = ChaCha8Rng::seed_from_u64(14);
        let a = sample(&den, &cb, &dec, &spec_a, &cfg, &mut rng_a).unwrap();
        let b = sample(&den, &cb, &dec, &spec_b, &cfg, &mut rng_b).unwrap();
        assert_eq!(a.final_tokens, b.final_tokens);
        for (ra, rb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(ra.anchors, rb.anchors);
            assert_eq!(ra.tokens, rb.tokens);
        }
    }

    #[test]
    fn unguided_aps_marginals_track_the_ancestral_sampler() {
        // One template with light corruption: the deterministic guided run
        // commits to the template, so per-position marginals differ from the
        // ancestral chain by exactly the corruption mass.
        let template = vec![0usize, 1, 2, 3, 2, 1];
        let prior = TemplatePrior::new(vec![template.clone()], vec![1.0], 0.02, 4).unwrap();
        let den = PriorDenoiser::new(prior);
        let cb = Codebook::new(2).unwrap();
        let dec = PatchDecoder::new(2, 3, 2, 2, 21).unwrap();
        let spec = unguided_spec();
        let mut guided_cfg = SamplerConfig::new(SamplerKind::Aps, cosine(4));
        guided_cfg.opt.inner_steps = 2;
        let prior_cfg = SamplerConfig::new(SamplerKind::Prior, cosine(4));

        let runs = 2000;
        let mut guided_counts = vec![[0usize; 4]; 6];
        let mut ancestral_counts = vec![[0usize; 4]; 6];
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let g = sample(&den, &cb, &dec, &spec, &guided_cfg, &mut rng).unwrap();
            for (l, &tok) in g.final_tokens.iter().enumerate() {
                guided_counts[l][tok] += 1;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(500_000 + seed);
            let p = sample(&den, &cb, &dec, &spec, &prior_cfg, &mut rng).unwrap();
            for (l, &tok) in p.final_tokens.iter().enumerate() {
                ancestral_counts[l][tok] += 1;
            }
        }
        for l in 0..6 {
            let tv: f64 = (0..4)
                .map(|k| {
                    (guided_counts[l][k] as f64 - ancestral_counts[l][k] as f64).abs()
                        / runs as f64
                })
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.05, "position {l}: total variation {tv} above 0.05");
        }
    }

    #[test]
    fn ancestral_sampler_reverses_the_chain_exactly_for_pure_templates() {
        let template = vec![2usize, 0, 1, 3];
        let prior = TemplatePrior::new(vec![template.clone()], vec![1.0], 0.0, 4).unwrap();
        let den = PriorDenoiser::new(prior);
        let cb = Codebook::new(2).unwrap();
        let dec = PatchDecoder::new(2, 2, 2, 2, 31).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::Prior, cosine(3));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let run = sample(&den, &cb, &dec, &unguided_spec(), &cfg, &mut rng).unwrap();
            assert_eq!(run.final_tokens, template);
            let mut revealed = 0;
            for rec in &run.steps {
                assert!(rec.state_after.revealed_count() >= revealed, "monotone unmasking");
                revealed = rec.state_after.revealed_count();
            }
        }
    }

    #[test]
    fn exploration_flags_still_terminate_and_respect_permanence() {
        let (prior, cb, dec) = toy_world(0.1, 15);
        let den = PriorDenoiser::new(prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let gt = prior.sample(&mut rng);
        let y = dec.decode_tokens(&gt, &cb).unwrap().data;
        let spec = identity_spec(y);
        for (gumbel, stochastic) in [(0.3, false), (0.0, true), (0.2, true)] {
            let mut cfg = SamplerConfig::new(SamplerKind::Aps, cosine(5));
            cfg.opt.inner_steps = 5;
            cfg.gumbel = gumbel;
            cfg.stochastic_reveal = stochastic;
            let mut run_rng = ChaCha8Rng::seed_from_u64(17);
            let run = sample(&den, &cb, &dec, &spec, &cfg, &mut run_rng).unwrap();
            assert_eq!(run.final_tokens.len(), 16, "run must fully reveal");
            for rec in &run.steps {
                for l in 0..16 {
                    if let Some(tok) = rec.state_before.get(l) {
                        assert_eq!(rec.state_after.get(l), Some(tok));
                    }
                }
            }
        }
    }
}
