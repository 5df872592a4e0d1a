//! Inner-loop guidance: gradient descent on per-position token logits against
//! an image measurement.
//!
//! The differentiable pipeline is softmax -> expected codebook embedding ->
//! nearest-entry quantization -> patch decoding -> measurement losses. The
//! quantizer is piecewise constant, so the true pipeline has zero gradient
//! almost everywhere; the backward pass instead treats quantization as the
//! identity (a straight-through estimator). Equivalently, the returned
//! gradient is the exact gradient of the surrogate obtained by freezing the
//! quantization residual at the evaluation point, which is what
//! [`surrogate_loss`] computes and the finite-difference tests probe.

use crate::codebook::Quantizer;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::measure::MeasurementSpec;
use crate::state::TokenState;
use crate::table::{ln_floored, LogitTable, ProbTable, PROB_FLOOR};
use crate::world::PatchDecoder;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Learning-rate decay across the inner steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    /// Constant learning rate.
    None,
    /// eta / (1 + m / M) at 0-based step m of M.
    Harmonic,
}

/// Inner optimizer settings.
#[derive(Debug, Clone)]
pub struct OptConfig {
    /// Number of gradient steps per reverse step.
    pub inner_steps: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reuse the previous reverse step's optimized logits as the next
    /// initialization instead of restarting from the denoiser output.
    pub warm_start: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            inner_steps: 100,
            lr: 1.0,
            lr_decay: LrDecay::Harmonic,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warm_start: false,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam eps must be positive"));
        }
        Ok(())
    }

    /// Learning rate at 0-based inner step `m`.
    pub fn step_lr(&self, m: usize) -> f64 {
        match self.lr_decay {
            LrDecay::None => self.lr,
            LrDecay::Harmonic => {
                let total = self.inner_steps.max(1) as f64;
                self.lr / (1.0 + m as f64 / total)
            }
        }
    }
}

/// Adam first/second-moment state with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2, eps }
    }

    /// One descent step in place. A zero gradient entry leaves its parameter
    /// untouched (the moments stay zero), which is how frozen rows ride along.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam state sized for {} params", self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Everything the inner loop needs besides the logits being optimized.
pub struct GuidanceProblem<'a> {
    pub quantizer: &'a dyn Quantizer,
    pub decoder: &'a PatchDecoder,
    pub spec: &'a MeasurementSpec,
    /// Denoiser prediction at the current state; the prior-preservation
    /// anchor. Rows for committed positions are ignored.
    pub pretrained: &'a ProbTable,
    /// Which positions are already committed; their rows are pinned one-hot
    /// and receive no gradient.
    pub state: &'a TokenState,
}

impl GuidanceProblem<'_> {
    fn check(&self, logits: &LogitTable) -> Result<()> {
        let len = self.decoder.tokens();
        let vocab = self.quantizer.size();
        if logits.len() != len || self.state.len() != len || self.pretrained.len() != len {
            return Err(Error::invalid(format!(
                "logits/state/prediction cover {}/{}/{} positions, decoder grid has {len}",
                logits.len(),
                self.state.len(),
                self.pretrained.len()
            )));
        }
        if logits.vocab() != vocab || self.pretrained.vocab() != vocab {
            return Err(Error::invalid(format!(
                "logits vocabulary {} or prediction vocabulary {} does not match codebook size {vocab}",
                logits.vocab(),
                self.pretrained.vocab()
            )));
        }
        if self.quantizer.dim() != self.decoder.dim {
            return Err(Error::invalid(format!(
                "codebook dimension {} does not match decoder dimension {}",
                self.quantizer.dim(),
                self.decoder.dim
            )));
        }
        Ok(())
    }
}

/// One full forward pass through the guidance pipeline.
#[derive(Debug, Clone)]
pub struct PipelineEval {
    /// Softmax of the logits, with committed rows pinned one-hot.
    pub probs: ProbTable,
    /// L x d expected embeddings under `probs`, row-major.
    pub expected: Vec<f64>,
    /// Nearest codebook entry per position.
    pub tokens: Vec<usize>,
    /// L x d quantized embeddings (the decoder input), row-major.
    pub quantized: Vec<f64>,
    pub image: Image,
    pub data_loss: f64,
    pub perceptual_loss: f64,
    pub prior_loss: f64,
    /// Weighted sum of the terms plus the configured offset.
    pub total_loss: f64,
}

/// Seeded linear feature map on measurement vectors, used by the perceptual
/// loss (half squared distance between mapped measurement and mapped target).
#[derive(Debug, Clone)]
pub struct PerceptualMap {
    dim: usize,
    input_len: usize,
    /// Row-major dim x input_len.
    weights: Vec<f64>,
}

impl PerceptualMap {
    pub fn new(seed: u64, dim: usize, input_len: usize) -> Result<Self> {
        if dim == 0 || input_len == 0 {
            return Err(Error::invalid("perceptual map needs positive dimensions"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_len as f64).sqrt();
        let weights = (0..dim * input_len).map(|_| rng.gen_range(-scale..scale)).collect();
        Ok(PerceptualMap { dim, input_len, weights })
    }

    pub fn apply(&self, m: &[f64]) -> Result<Vec<f64>> {
        if m.len() != self.input_len {
            return Err(Error::invalid(format!(
                "perceptual map expects {} inputs, got {}",
                self.input_len,
                m.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (row, slot) in out.iter_mut().enumerate() {
            *slot = self.weights[row * self.input_len..(row + 1) * self.input_len]
                .iter()
                .zip(m)
                .map(|(w, x)| w * x)
                .sum();
        }
        Ok(out)
    }

    /// Half squared feature distance and its gradient in measurement space.
    pub fn loss_and_grad(&self, m: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let fm = self.apply(m)?;
        if target.len() != self.dim {
            return Err(Error::invalid(format!(
                "perceptual target has {} features, map produces {}",
                target.len(),
                self.dim
            )));
        }
        let diff: Vec<f64> = fm.iter().zip(target).map(|(a, b)| a - b).collect();
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        let mut grad = vec![0.0; self.input_len];
        for (row, &d) in diff.iter().enumerate() {
            for (g, &w) in grad
                .iter_mut()
                .zip(&self.weights[row * self.input_len..(row + 1) * self.input_len])
            {
                *g += w * d;
            }
        }
        Ok((loss, grad))
    }
}

/// Expected codebook embedding of one probability row.
pub fn expected_embedding(row: &[f64], quantizer: &dyn Quantizer) -> Vec<f64> {
    let mut acc = vec![0.0; quantizer.dim()];
    for (k, &p) in row.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (a, &c) in acc.iter_mut().zip(quantizer.entry(k)) {
            *a += p * c;
        }
    }
    acc
}

/// Softmax with committed rows pinned to one-hot point masses.
fn pinned_probs(logits: &LogitTable, state: &TokenState) -> ProbTable {
    let mut probs = logits.softmax();
    let vocab = probs.vocab();
    let mut rows: Vec<Vec<f64>> = (0..probs.len()).map(|l| probs.row(l).to_vec()).collect();
    for l in 0..state.len() {
        if let Some(tok) = state.get(l) {
            let mut row = vec![0.0; vocab];
            row[tok] = 1.0;
            rows[l] = row;
        }
    }
    probs = ProbTable::from_rows(rows).expect("pinned rows are valid distributions");
    probs
}

fn losses_at_image(
    spec: &MeasurementSpec,
    image: &Image,
) -> Result<(f64, Image, f64, Image)> {
    let (h, w) = (image.height, image.width);
    let (data, data_grad) = if spec.lambda_data != 0.0 {
        spec.data_loss(image)?
    } else {
        (0.0, Image::zeros(h, w))
    };
    let (perc, perc_grad) = if spec.lambda_perceptual != 0.0 {
        let m = spec.apply(image)?;
        let y = spec
            .y
            .as_ref()
            .ok_or_else(|| Error::MissingObservation("perceptual loss needs an observation".into()))?;
        let map = PerceptualMap::new(spec.perceptual_seed, spec.perceptual_dim, m.len())?;
        let target = map.apply(y)?;
        let (loss, g_m) = map.loss_and_grad(&m, &target)?;
        (loss, spec.op.vjp(image, &g_m)?)
    } else {
        (0.0, Image::zeros(h, w))
    };
    Ok((data, data_grad, perc, perc_grad))
}

/// Negative mean log-overlap between the optimized distribution and the
/// denoiser prediction over masked positions, averaged over all L positions.
fn prior_preservation(probs: &ProbTable, pretrained: &ProbTable, state: &TokenState) -> f64 {
    let len = probs.len() as f64;
    let mut acc = 0.0;
    for l in state.masked_positions() {
        let dot: f64 = probs.row(l).iter().zip(pretrained.row(l)).map(|(a, b)| a * b).sum();
        acc -= ln_floored(dot);
    }
    acc / len
}

/// Forward pass only.
pub fn evaluate(problem: &GuidanceProblem, logits: &LogitTable) -> Result<PipelineEval> {
    problem.check(logits)?;
    let probs = pinned_probs(logits, problem.state);
    finish_eval(problem, probs)
}

/// Forward pass straight from a probability table, skipping the logit
/// parameterization. With zero inner steps this is the exact statement that
/// the optimized table equals the denoiser output, free of the round-off a
/// log/softmax round trip would introduce.
pub fn evaluate_table(problem: &GuidanceProblem, table: &ProbTable) -> Result<PipelineEval> {
    let zeros = LogitTable::zeros(table.len(), table.vocab())?;
    problem.check(&zeros)?;
    let vocab = table.vocab();
    let mut rows: Vec<Vec<f64>> = (0..table.len()).map(|l| table.row(l).to_vec()).collect();
    for l in 0..problem.state.len() {
        if let Some(tok) = problem.state.get(l) {
            let mut row = vec![0.0; vocab];
            row[tok] = 1.0;
            rows[l] = row;
        }
    }
    finish_eval(problem, ProbTable::from_rows(rows)?)
}

fn finish_eval(problem: &GuidanceProblem, probs: ProbTable) -> Result<PipelineEval> {
    let d = problem.quantizer.dim();
    let len = probs.len();
    let mut expected = Vec::with_capacity(len * d);
    let mut tokens = Vec::with_capacity(len);
    let mut quantized = Vec::with_capacity(len * d);
    for l in 0..len {
        let e = expected_embedding(probs.row(l), problem.quantizer);
        let tok = match problem.state.get(l) {
            Some(committed) => committed,
            None => problem.quantizer.quantize(&e)?,
        };
        tokens.push(tok);
        quantized.extend_from_slice(problem.quantizer.entry(tok));
        expected.extend(e);
    }
    let image = problem.decoder.decode(&quantized)?;
    let (data, _dg, perc, _pg) = losses_at_image(problem.spec, &image)?;
    let prior = if problem.spec.lambda_prior != 0.0 {
        prior_preservation(&probs, problem.pretrained, problem.state)
    } else {
        0.0
    };
    let spec = problem.spec;
    let total = spec.lambda_data * data
        + spec.lambda_perceptual * perc
        + spec.lambda_prior * prior
        + spec.loss_offset;
    Ok(PipelineEval {
        probs,
        expected,
        tokens,
        quantized,
        image,
        data_loss: data,
        perceptual_loss: perc,
        prior_loss: prior,
        total_loss: total,
    })
}

/// Forward pass plus the straight-through gradient of the total loss with
/// respect to the logits. Committed rows get exactly zero gradient.
pub fn loss_and_grad(
    problem: &GuidanceProblem,
    logits: &LogitTable,
) -> Result<(PipelineEval, LogitTable)> {
    let eval = evaluate(problem, logits)?;
    let spec = problem.spec;
    let d = problem.quantizer.dim();
    let len = logits.len();
    let vocab = logits.vocab();

    let (h, w) = (eval.image.height, eval.image.width);
    let (_, data_grad, _, perc_grad) = losses_at_image(spec, &eval.image)?;
    let mut g_img = Image::zeros(h, w);
    for i in 0..g_img.data.len() {
        g_img.data[i] =
            spec.lambda_data * data_grad.data[i] + spec.lambda_perceptual * perc_grad.data[i];
    }
    // Decoder pullback at the quantized embeddings, then straight through the
    // quantizer: the gradient lands on the expected embeddings unchanged.
    let g_expected = problem.decoder.vjp(&eval.quantized, &g_img)?;

    let mut grad_rows = vec![vec![0.0; vocab]; len];
    for l in 0..len {
        if !problem.state.is_masked(l) {
            continue;
        }
        let g_e = &g_expected[l * d..(l + 1) * d];
        let mut g_p = vec![0.0; vocab];
        for (k, slot) in g_p.iter_mut().enumerate() {
            *slot = problem.quantizer.entry(k).iter().zip(g_e).map(|(c, g)| c * g).sum();
        }
        if spec.lambda_prior != 0.0 {
            let dot: f64 = eval
                .probs
                .row(l)
                .iter()
                .zip(problem.pretrained.row(l))
                .map(|(a, b)| a * b)
                .sum();
            let denom = dot.max(PROB_FLOOR) * len as f64;
            for (slot, &pt) in g_p.iter_mut().zip(problem.pretrained.row(l)) {
                *slot -= spec.lambda_prior * pt / denom;
            }
        }
        // Softmax pullback: g_logit = p * (g_p - <p, g_p>).
        let p = eval.probs.row(l);
        let inner: f64 = p.iter().zip(&g_p).map(|(a, b)| a * b).sum();
        for k in 0..vocab {
            grad_rows[l][k] = p[k] * (g_p[k] - inner);
        }
    }
    let grad = LogitTable::from_rows(grad_rows)?;
    Ok((eval, grad))
}

/// The loss the straight-through gradient actually differentiates: decode
/// expected embeddings plus a frozen per-position offset `c` instead of
/// re-quantizing. With `c` taken as quantized minus expected at a base point,
/// this agrees with the true pipeline loss at that point and its gradient
/// agrees with [`loss_and_grad`] there.
pub fn surrogate_loss(
    problem: &GuidanceProblem,
    logits: &LogitTable,
    offsets: &[f64],
) -> Result<f64> {
    problem.check(logits)?;
    let d = problem.quantizer.dim();
    let len = logits.len();
    if offsets.len() != len * d {
        return Err(Error::invalid(format!(
            "offset buffer holds {} values, expected {}",
            offsets.len(),
            len * d
        )));
    }
    let probs = pinned_probs(logits, problem.state);
    let mut shifted = Vec::with_capacity(len * d);
    for l in 0..len {
        let e = expected_embedding(probs.row(l), problem.quantizer);
        for (i, v) in e.into_iter().enumerate() {
            shifted.push(v + offsets[l * d + i]);
        }
    }
    let image = problem.decoder.decode(&shifted)?;
    let (data, _, perc, _) = losses_at_image(problem.spec, &image)?;
    let prior = if problem.spec.lambda_prior != 0.0 {
        prior_preservation(&probs, problem.pretrained, problem.state)
    } else {
        0.0
    };
    let spec = problem.spec;
    Ok(spec.lambda_data * data
        + spec.lambda_perceptual * perc
        + spec.lambda_prior * prior
        + spec.loss_offset)
}

/// Result of the inner loop.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub logits: LogitTable,
    /// Forward pass at the returned logits.
    pub eval: PipelineEval,
    /// Total loss before any update, then after each step: inner_steps + 1
    /// entries on a clean run.
    pub loss_trace: Vec<f64>,
    /// True when a non-finite loss aborted the loop; the best finite iterate
    /// is returned in that case.
    pub diverged: bool,
}

/// Run `inner_steps` Adam steps on the masked rows of `init`.
pub fn optimize(
    problem: &GuidanceProblem,
    init: &LogitTable,
    cfg: &OptConfig,
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let mut logits = init.clone();
    let (eval0, mut grad) = loss_and_grad(problem, &logits)?;
    let mut trace = vec![eval0.total_loss];
    let mut best = (eval0.total_loss, logits.clone());
    let mut eval = eval0;
    let mut diverged = false;
    let mut adam = AdamState::new(logits.as_slice().len(), cfg.beta1, cfg.beta2, cfg.eps);
    for m in 0..cfg.inner_steps {
        if !eval.total_loss.is_finite() {
            diverged = true;
            break;
        }
        if eval.total_loss < best.0 {
            best = (eval.total_loss, logits.clone());
        }
        adam.update(logits.as_mut_slice(), grad.as_slice(), cfg.step_lr(m));
        let next = loss_and_grad(problem, &logits)?;
        eval = next.0;
        grad = next.1;
        trace.push(eval.total_loss);
    }
    if !eval.total_loss.is_finite() {
        diverged = true;
    }
    if diverged {
        logits = best.1;
        eval = evaluate(problem, &logits)?;
    }
    Ok(OptimizeOutcome { logits, eval, loss_trace: trace, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;

    fn setup(
        grid: usize,
        dim: usize,
        seed: u64,
    ) -> (Codebook, PatchDecoder) {
        let cb = Codebook::new(dim).unwrap();
        let dec = PatchDecoder::new(grid, grid, 2, dim, seed).unwrap();
        (cb, dec)
    }

    fn uniform_pretrained(len: usize, vocab: usize) -> ProbTable {
        ProbTable::uniform(len, vocab).unwrap()
    }

    #[test]
    fn expected_embedding_hand_check() {
        let cb = Codebook::new(1).unwrap();
        // Entries are [-1] and [+1]; weights 0.75 / 0.25 average to -0.5.
        let e = expected_embedding(&[0.75, 0.25], &cb);
        assert_eq!(e, vec![-0.5]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let target = [1.5, -2.0, 0.25];
        let mut params = vec![0.0; 3];
        let mut adam = AdamState::new(3, 0.9, 0.999, 1e-8);
        for _ in 0..400 {
            let grads: Vec<f64> = params.iter().zip(&target).map(|(p, t)| p - t).collect();
            adam.update(&mut params, &grads, 0.05);
        }
        for (p, t) in params.iter().zip(&target) {
            assert!((p - t).abs() < 1e-3, "adam landed at {p}, wanted {t}");
        }
    }

    #[test]
    fn harmonic_decay_halves_by_the_last_step() {
        let cfg = OptConfig { inner_steps: 4, lr: 1.0, lr_decay: LrDecay::Harmonic, ..Default::default() };
        assert_eq!(cfg.step_lr(0), 1.0);
        assert!((cfg.step_lr(2) - 1.0 / 1.5).abs() < 1e-15);
        assert!((cfg.step_lr(4) - 0.5).abs() < 1e-15);
        let flat = OptConfig { lr_decay: LrDecay::None, lr: 0.3, ..Default::default() };
        assert_eq!(flat.step_lr(99), 0.3);
    }

    #[test]
    fn prior_preservation_uniform_binary_hand_value() {
        // Four positions, one masked, both distributions uniform over two
        // tokens: overlap 1/2, loss ln(2) / 4.
        let (cb, dec) = setup(2, 1, 0);
        let spec = MeasurementSpec {
            lambda_data: 0.0,
            lambda_prior: 1.0,
            ..MeasurementSpec::new(crate::measure::Operator::Identity, 0.0, crate::measure::LossKind::L2).unwrap()
        };
        let mut state = TokenState::all_masked(4);
        state.reveal(0, 1).unwrap();
        state.reveal(1, 0).unwrap();
        state.reveal(3, 1).unwrap();
        let pretrained = uniform_pretrained(4, 2);
        let problem = GuidanceProblem {
            quantizer: &cb,
            decoder: &dec,
            spec: &spec,
            pretrained: &pretrained,
            state: &state,
        };
        let logits = LogitTable::zeros(4, 2).unwrap();
        let eval = evaluate(&problem, &logits).unwrap();
        assert!(
            (eval.prior_loss - 2.0_f64.ln() / 4.0).abs() < 1e-12,
            "prior loss {} should be ln(2)/4",
            eval.prior_loss
        );
        assert_eq!(eval.total_loss, eval.prior_loss + spec.loss_offset);
    }

    #[test]
    fn pinned_rows_are_one_hot_and_get_zero_gradient() {
        let (cb, dec) = setup(2, 2, 3);
        let mut spec =
            MeasurementSpec::new(crate::measure::Operator::Identity, 0.0, crate::measure::LossKind::L2)
                .unwrap();
        let mut state = TokenState::all_masked(4);
        state.reveal(2, 3).unwrap();
        let target = dec.decode_tokens(&[0, 1, 3, 2], &cb).unwrap();
        spec.y = Some(target.data.clone());
        let pretrained = uniform_pretrained(4, 4);
        let problem = GuidanceProblem {
            quantizer: &cb,
            decoder: &dec,
            spec: &spec,
            pretrained: &pretrained,
            state: &state,
        };
        let logits = LogitTable::from_rows(vec![vec![0.3, -0.1, 0.2, 0.05]; 4]).unwrap();
        let (eval, grad) = loss_and_grad(&problem, &logits).unwrap();
        assert_eq!(eval.probs.row(2), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(eval.tokens[2], 3);
        assert!(grad.row(2).iter().all(|&g| g == 0.0), "committed row must not move");
        assert!(grad.row(0).iter().any(|&g| g != 0.0), "masked rows should feel the loss");
    }

    #[test]
    fn optimize_recovers_tokens_under_identity_measurement() {
        let (cb, dec) = setup(2, 2, 7);
        let truth = vec![2, 0, 3, 1];
        let target = dec.decode_tokens(&truth, &cb).unwrap();
        let spec = MeasurementSpec::new(
            crate::measure::Operator::Identity,
            0.0,
            crate::measure::LossKind::L2,
        )
        .unwrap()
        .with_observation(target.data.clone());
        let state = TokenState::all_masked(4);
        let pretrained = uniform_pretrained(4, 4);
        let problem = GuidanceProblem {
            quantizer: &cb,
            decoder: &dec,
            spec: &spec,
            pretrained: &pretrained,
            state: &state,
        };
        let init = LogitTable::zeros(4, 4).unwrap();
        let cfg = OptConfig { inner_steps: 80, lr: 0.5, ..Default::default() };
        let out = optimize(&problem, &init, &cfg).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.loss_trace.len(), 81);
        assert!(
            out.eval.total_loss < 0.05 * out.loss_trace[0],
            "loss went {} -> {}",
            out.loss_trace[0],
            out.eval.total_loss
        );
        assert_eq!(out.eval.tokens, truth, "identity measurement pins the tokens");
    }

    #[test]
    fn zero_inner_steps_returns_the_initialization() {
        let (cb, dec) = setup(2, 2, 5);
        let spec = MeasurementSpec {
            lambda_data: 0.0,
            ..MeasurementSpec::new(crate::measure::Operator::Identity, 0.0, crate::measure::LossKind::L2).unwrap()
        };
        let state = TokenState::all_masked(4);
        let pretrained = uniform_pretrained(4, 4);
        let problem = GuidanceProblem {
            quantizer: &cb,
            decoder: &dec,
            spec: &spec,
            pretrained: &pretrained,
            state: &state,
        };
        let init = LogitTable::from_rows(vec![vec![0.4, -0.2, 0.1, 0.0]; 4]).unwrap();
        let cfg = OptConfig { inner_steps: 0, ..Default::default() };
        let out = optimize(&problem, &init, &cfg).unwrap();
        assert_eq!(out.logits.as_slice(), init.as_slice());
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn loss_offset_shifts_totals_but_not_gradients_or_tokens() {
        let (cb, dec) = setup(2, 2, 11);
        let target = dec.decode_tokens(&[1, 1, 2, 0], &cb).unwrap();
        let base = MeasurementSpec::new(
            crate::measure::Operator::Downsample { factor: 2 },
            0.0,
            crate::measure::LossKind::L2,
        )
        .unwrap();
        let y = base.op.apply(&target).unwrap();
        let spec_a = MeasurementSpec { y: Some(y.clone()), ..base.clone() };
        let spec_b = MeasurementSpec { y: Some(y), loss_offset: 3.25, ..base };
        let state = TokenState::all_masked(4);
        let pretrained = uniform_pretrained(4, 4);
        let logits = LogitTable::from_rows(vec![vec![0.2, -0.3, 0.15, 0.0]; 4]).unwrap();
        let pa = GuidanceProblem { quantizer: &cb, decoder: &dec, spec: &spec_a, pretrained: &pretrained, state: &state };
        let pb = GuidanceProblem { quantizer: &cb, decoder: &dec, spec: &spec_b, pretrained: &pretrained, state: &state };
        let (ea, ga) = loss_and_grad(&pa, &logits).unwrap();
        let (eb, gb) = loss_and_grad(&pb, &logits).unwrap();
        assert!((eb.total_loss - ea.total_loss - 3.25).abs() < 1e-12);
        assert_eq!(ga.as_slice(), gb.as_slice(), "an additive offset must not steer");
        assert_eq!(ea.tokens, eb.tokens);
    }

    #[test]
    fn zero_data_weight_needs_no_observation() {
        let (cb, dec) = setup(2, 2, 13);
        let spec = MeasurementSpec {
            lambda_data: 0.0,
            lambda_prior: 0.5,
            ..MeasurementSpec::new(crate::measure::Operator::Identity, 0.0, crate::measure::LossKind::L2).unwrap()
        };
        assert!(spec.y.is_none());
        let state = TokenState::all_masked(4);
        let pretrained = uniform_pretrained(4, 4);
        let problem = GuidanceProblem { quantizer: &cb, decoder: &dec, spec: &spec, pretrained: &pretrained, state: &state };
        let logits = LogitTable::zeros(4, 4).unwrap();
        let eval = evaluate(&problem, &logits).unwrap();
        assert_eq!(eval.data_loss, 0.0);
        assert!(eval.prior_loss > 0.0);
    }

    fn fd_check(problem: &GuidanceProblem, logits: &LogitTable, tol: f64) {
        let (eval, grad) = loss_and_grad(problem, logits).unwrap();
        let offsets: Vec<f64> = eval
            .quantized
            .iter()
            .zip(&eval.expected)
            .map(|(q, e)| q - e)
            .collect();
        let at_base = surrogate_loss(problem, logits, &offsets).unwrap();
        assert!(
            (at_base - eval.total_loss).abs() < 1e-12,
            "surrogate must agree with the pipeline at the base point"
        );
        let h = 1e-6;
        let n = logits.as_slice().len();
        for i in 0..n {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.as_mut_slice()[i] += h;
            lm.as_mut_slice()[i] -= h;
            let fp = surrogate_loss(problem, &lp, &offsets).unwrap();
            let fm = surrogate_loss(problem, &lm, &offsets).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let g = grad.as_slice()[i];
            let denom = g.abs().max(1.0);
            assert!(
                ((g - fd) / denom).abs() < tol,
                "coordinate {i}: straight-through {g} vs frozen-residual fd {fd}"
            );
        }
    }

    #[test]
    fn straight_through_gradient_matches_frozen_residual_fd() {
        let (cb, dec) = setup(2, 2, 17);
        let target = dec.decode_tokens(&[3, 0, 1, 2], &cb).unwrap();
        let spec = MeasurementSpec {
            lambda_prior: 0.2,
            ..MeasurementSpec::new(
                crate::measure::Operator::GaussianBlur { side: 3, std: 1.0 },
                0.0,
                crate::measure::LossKind::L2,
            )
            .unwrap()
        };
        let spec = MeasurementSpec {
            y: Some(spec.op.apply(&target).unwrap().iter().map(|v| v + 0.17).collect()),
            ..spec
        };
        let mut state = TokenState::all_masked(4);
        state.reveal(1, 2).unwrap();
        let pretrained = ProbTable::from_rows(vec![vec![0.4, 0.3, 0.2, 0.1]; 4]).unwrap();
        let problem = GuidanceProblem { quantizer: &cb, decoder: &dec, spec: &spec, pretrained: &pretrained, state: &state };
        let logits = LogitTable::from_rows(vec![
            vec![0.3, -0.2, 0.5, 0.1],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![-0.4, 0.2, 0.3, -0.1],
            vec![0.1, 0.6, -0.3, 0.2],
        ])
        .unwrap();
        fd_check(&problem, &logits, 1e-5);
    }

    #[test]
    fn naive_identity_probe_disagrees_where_frozen_residual_agrees() {
        // Replacing quantization by the identity (zero offsets away from the
        // base point) evaluates the loss landscape at the wrong image, so its
        // finite differences drift far from the straight-through gradient.
        let (cb, dec) = setup(2, 2, 19);
        let target = dec.decode_tokens(&[0, 3, 1, 2], &cb).unwrap();
        let spec = MeasurementSpec::new(
            crate::measure::Operator::Identity,
            0.0,
            crate::measure::LossKind::L2,
        )
        .unwrap()
        .with_observation(target.data.clone());
        let state = TokenState::all_masked(4);
        let pretrained = uniform_pretrained(4, 4);
        let problem = GuidanceProblem { quantizer: &cb, decoder: &dec, spec: &spec, pretrained: &pretrained, state: &state };
        let logits = LogitTable::from_rows(vec![
            vec![0.8, -0.1, 0.3, -0.5],
            vec![-0.2, 0.7, 0.1, 0.4],
            vec![0.5, 0.2, -0.6, 0.1],
            vec![-0.3, 0.1, 0.2, 0.6],
        ])
        .unwrap();
        fd_check(&problem, &logits, 1e-5);

        let (_, grad) = loss_and_grad(&problem, &logits).unwrap();
        let zero_offsets = vec![0.0; 4 * cb.dim()];
        let h = 1e-6;
        let mut worst = 0.0_f64;
        for i in 0..logits.as_slice().len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.as_mut_slice()[i] += h;
            lm.as_mut_slice()[i] -= h;
            let fp = surrogate_loss(&problem, &lp, &zero_offsets).unwrap();
            let fm = surrogate_loss(&problem, &lm, &zero_offsets).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let g = grad.as_slice()[i];
            worst = worst.max((g - fd).abs() / g.abs().max(1.0));
        }
        assert!(
            worst > 1e-2,
            "identity probe should visibly disagree, worst relative gap {worst}"
        );
    }
}
