//! The synthetic data world: a mixture-of-templates prior over token
//! sequences, its exact Bayes denoiser, an EM fitter, and a deterministic
//! linear decoder from token embeddings to images.
//!
//! A draw from [`TemplatePrior`] picks template r with probability w_r, then
//! independently corrupts each position: the template token survives with
//! probability 1 - rho, otherwise it is resampled uniformly over the other
//! K - 1 tokens. Because positions are conditionally independent given the
//! template, the posterior over clean tokens given any set of revealed
//! positions has a closed form — which is what makes this prior a usable
//! stand-in for a pretrained denoiser: [`exact_denoiser`] is Bayes-exact, so
//! every downstream claim about reverse diffusion can be checked against
//! brute-force enumeration instead of against a trained network.

use crate::codebook::Quantizer;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::state::TokenState;
use crate::table::ProbTable;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fitted corruption rates are floored here: an exact zero would make the
/// denoiser assign zero mass to any token outside the template support.
pub const RHO_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct TemplatePrior {
    templates: Vec<Vec<usize>>,
    weights: Vec<f64>,
    rho: f64,
    vocab: usize,
}

impl TemplatePrior {
    pub fn new(
        templates: Vec<Vec<usize>>,
        weights: Vec<f64>,
        rho: f64,
        vocab: usize,
    ) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("prior needs at least one template"));
        }
        if templates.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} templates but {} weights",
                templates.len(),
                weights.len()
            )));
        }
        let len = templates[0].len();
        if len == 0 {
            return Err(Error::invalid("templates must be non-empty"));
        }
        if vocab == 0 {
            return Err(Error::invalid("vocabulary must be non-empty"));
        }
        for (r, t) in templates.iter().enumerate() {
            if t.len() != len {
                return Err(Error::invalid(format!(
                    "template {r} has length {}, expected {len}",
                    t.len()
                )));
            }
            if let Some(&bad) = t.iter().find(|&&tok| tok >= vocab) {
                return Err(Error::OutOfRange(format!(
                    "template {r} holds token {bad}, vocabulary is {vocab}"
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "mixture weights must be positive and sum to one",
            ));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::OutOfRange(format!("corruption rate {rho} outside [0, 1)")));
        }
        if rho > 0.0 && vocab < 2 {
            return Err(Error::invalid(
                "corruption needs at least two tokens to resample over",
            ));
        }
        Ok(TemplatePrior { templates, weights, rho, vocab })
    }

    pub fn len(&self) -> usize {
        self.templates[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn components(&self) -> usize {
        self.templates.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn templates(&self) -> &[Vec<usize>] {
        &self.templates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// P(observed token v | template token u) under the corruption channel.
    fn emission(&self, u: usize, v: usize) -> f64 {
        if v == u {
            1.0 - self.rho
        } else if self.rho == 0.0 {
            0.0
        } else {
            self.rho / (self.vocab as f64 - 1.0)
        }
    }

    /// Draw one sequence: template choice, then per-position corruption.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut pick = rng.gen::<f64>();
        let mut r = self.templates.len() - 1;
        for (idx, &w) in self.weights.iter().enumerate() {
            if pick < w {
                r = idx;
                break;
            }
            pick -= w;
        }
        self.templates[r]
            .iter()
            .map(|&u| {
                if self.rho > 0.0 && rng.gen::<f64>() < self.rho {
                    // Uniform over the other K-1 tokens.
                    let mut v = rng.gen_range(0..self.vocab - 1);
                    if v >= u {
                        v += 1;
                    }
                    v
                } else {
                    u
                }
            })
            .collect()
    }

    /// ln q(x) of a complete sequence.
    pub fn log_prob(&self, x: &[usize]) -> Result<f64> {
        if x.len() != self.len() {
            return Err(Error::invalid(format!(
                "sequence of length {}, prior is over {}",
                x.len(),
                self.len()
            )));
        }
        if let Some(&bad) = x.iter().find(|&&tok| tok >= self.vocab) {
            return Err(Error::OutOfRange(format!(
                "token {bad} exceeds vocabulary of {}",
                self.vocab
            )));
        }
        let mut per_template = Vec::with_capacity(self.templates.len());
        for (r, t) in self.templates.iter().enumerate() {
            let mut lw = self.weights[r].ln();
            for (l, &v) in x.iter().enumerate() {
                let e = self.emission(t[l], v);
                if e == 0.0 {
                    lw = f64::NEG_INFINITY;
                    break;
                }
                lw += e.ln();
            }
            per_template.push(lw);
        }
        Ok(log_sum_exp(&per_template))
    }

    /// Log posterior weights over templates given the revealed positions of
    /// `z`. Masked positions carry no evidence.
    fn template_log_posterior(&self, z: &TokenState) -> Result<Vec<f64>> {
        let mut logw = Vec::with_capacity(self.templates.len());
        for (r, t) in self.templates.iter().enumerate() {
            let mut lw = self.weights[r].ln();
            for l in 0..z.len() {
                if let Some(v) = z.get(l) {
                    let e = self.emission(t[l], v);
                    if e == 0.0 {
                        lw = f64::NEG_INFINITY;
                        break;
                    }
                    lw += e.ln();
                }
            }
            logw.push(lw);
        }
        let total = log_sum_exp(&logw);
        if total == f64::NEG_INFINITY {
            return Err(Error::DegenerateEvidence);
        }
        Ok(logw.iter().map(|lw| lw - total).collect())
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Exact per-position posterior over clean tokens given a partially revealed
/// state. Revealed positions become point masses (the forward process never
/// alters surviving tokens); masked positions mix the corruption channel over
/// the template posterior.
pub fn exact_denoiser(prior: &TemplatePrior, z: &TokenState) -> Result<ProbTable> {
    if z.len() != prior.len() {
        return Err(Error::invalid(format!(
            "state of length {}, prior is over {}",
            z.len(),
            prior.len()
        )));
    }
    z.check_vocab(prior.vocab())?;
    let post = prior.template_log_posterior(z)?;
    let vocab = prior.vocab();
    let mut rows = Vec::with_capacity(z.len());
    for l in 0..z.len() {
        match z.get(l) {
            Some(v) => {
                let mut row = vec![0.0; vocab];
                row[v] = 1.0;
                rows.push(row);
            }
            None => {
                let mut row = vec![0.0; vocab];
                for (r, t) in prior.templates().iter().enumerate() {
                    let wr = post[r].exp();
                    if wr == 0.0 {
                        continue;
                    }
                    for (k, slot) in row.iter_mut().enumerate() {
                        *slot += wr * prior.emission(t[l], k);
                    }
                }
                // Guard against drift from the exp/normalize round trip.
                let sum: f64 = row.iter().sum();
                for slot in row.iter_mut() {
                    *slot /= sum;
                }
                rows.push(row);
            }
        }
    }
    ProbTable::from_rows(rows)
}

/// The prior wrapped as a [`Denoiser`]: predictions ignore the step index.
#[derive(Debug, Clone)]
pub struct PriorDenoiser {
    prior: TemplatePrior,
}

impl PriorDenoiser {
    pub fn new(prior: TemplatePrior) -> Self {
        PriorDenoiser { prior }
    }

    pub fn prior(&self) -> &TemplatePrior {
        &self.prior
    }
}

impl Denoiser for PriorDenoiser {
    fn len(&self) -> usize {
        self.prior.len()
    }

    fn vocab(&self) -> usize {
        self.prior.vocab()
    }

    fn predict(&self, z: &TokenState, _step: usize) -> Result<ProbTable> {
        exact_denoiser(&self.prior, z)
    }
}

/// Per-iteration diagnostics of the EM fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Mean negative log-likelihood of the training set, one entry per
    /// iteration (recorded after each M-step). Non-increasing by the EM
    /// monotonicity guarantee.
    pub train_nll: Vec<f64>,
    pub final_rho: f64,
}

/// Fit a mixture-of-templates prior to complete sequences by EM.
///
/// The E-step computes template responsibilities; the M-step re-estimates
/// mixture weights, takes per-position majority votes (responsibility
/// weighted) for the discrete templates, and sets rho to the weighted
/// mismatch rate, floored at [`RHO_FLOOR`] and capped below (K-1)/K so a
/// match always stays more likely than any particular mismatch.
pub fn fit_prior(
    samples: &[Vec<usize>],
    vocab: usize,
    components: usize,
    iters: usize,
    seed: u64,
) -> Result<(TemplatePrior, FitReport)> {
    if samples.is_empty() {
        return Err(Error::invalid("need at least one sample"));
    }
    if components == 0 {
        return Err(Error::invalid("need at least one mixture component"));
    }
    if vocab < 2 {
        return Err(Error::invalid("EM fitting needs a vocabulary of at least two"));
    }
    let len = samples[0].len();
    if len == 0 {
        return Err(Error::invalid("samples must be non-empty sequences"));
    }
    for (n, s) in samples.iter().enumerate() {
        if s.len() != len {
            return Err(Error::invalid(format!(
                "sample {n} has length {}, expected {len}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&tok| tok >= vocab) {
            return Err(Error::OutOfRange(format!(
                "sample {n} holds token {bad}, vocabulary is {vocab}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Initial templates: distinct observed sequences where possible, random
    // sequences as filler.
    let mut uniques: Vec<&Vec<usize>> = Vec::new();
    for s in samples {
        if !uniques.contains(&s) {
            uniques.push(s);
        }
    }
    let mut templates: Vec<Vec<usize>> = Vec::with_capacity(components);
    let mut pool: Vec<usize> = (0..uniques.len()).collect();
    for _ in 0..components {
        if pool.is_empty() {
            templates.push((0..len).map(|_| rng.gen_range(0..vocab)).collect());
        } else {
            let pick = rng.gen_range(0..pool.len());
            templates.push(uniques[pool.swap_remove(pick)].clone());
        }
    }
    let mut weights = vec![1.0 / components as f64; components];
    let mut rho: f64 = 0.1;
    let rho_cap = (vocab as f64 - 1.0) / vocab as f64 - 1e-3;

    let n = samples.len();
    let mut train_nll = Vec::with_capacity(iters);
    let mut resp = vec![0.0f64; n * components];

    for _ in 0..iters {
        let prior = TemplatePrior::new(templates.clone(), weights.clone(), rho, vocab)?;
        // E-step.
        for (idx, s) in samples.iter().enumerate() {
            let mut logw = Vec::with_capacity(components);
            for (r, t) in prior.templates().iter().enumerate() {
                let mut lw = prior.weights()[r].ln();
                for (l, &v) in s.iter().enumerate() {
                    lw += prior.emission(t[l], v).ln();
                }
                logw.push(lw);
            }
            let total = log_sum_exp(&logw);
            for r in 0..components {
                resp[idx * components + r] = (logw[r] - total).exp();
            }
        }
        // M-step: weights.
        for r in 0..components {
            let mass: f64 = (0..n).map(|idx| resp[idx * components + r]).sum();
            weights[r] = (mass / n as f64).max(1e-12);
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
        // M-step: templates by responsibility-weighted majority vote.
        for r in 0..components {
            for l in 0..len {
                let mut votes = vec![0.0f64; vocab];
                for (idx, s) in samples.iter().enumerate() {
                    votes[s[l]] += resp[idx * components + r];
                }
                let mut best = 0usize;
                for k in 1..vocab {
                    if votes[k] > votes[best] {
                        best = k;
                    }
                }
                templates[r][l] = best;
            }
        }
        // M-step: corruption rate = responsibility-weighted mismatch rate.
        let mut mismatch = 0.0;
        for (idx, s) in samples.iter().enumerate() {
            for (r, t) in templates.iter().enumerate() {
                let m = s.iter().zip(t).filter(|(a, b)| a != b).count();
                mismatch += resp[idx * components + r] * m as f64;
            }
        }
        rho = (mismatch / (n as f64 * len as f64)).clamp(RHO_FLOOR, rho_cap);

        let fitted = TemplatePrior::new(templates.clone(), weights.clone(), rho, vocab)?;
        let nll = samples
            .iter()
            .map(|s| fitted.log_prob(s).map(|lp| -lp))
            .sum::<Result<f64>>()?
            / n as f64;
        train_nll.push(nll);
    }

    let prior = TemplatePrior::new(templates, weights, rho, vocab)?;
    let report = FitReport { train_nll, final_rho: rho };
    Ok((prior, report))
}

/// Deterministic linear decoder from token embeddings to a grayscale image.
///
/// Tokens sit on a grid_h x grid_w grid; each token's d-dimensional embedding
/// is mapped through a shared (patch * patch) x d weight matrix into its own
/// patch of the output image. Weights are i.i.d. uniform on
/// [-1/sqrt(d), 1/sqrt(d)], drawn once from `seed`, which also bounds every
/// output pixel to [-1, 1] for sign-pattern embeddings.
#[derive(Debug, Clone)]
pub struct PatchDecoder {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub dim: usize,
    /// Row-major (patch*patch) x dim map shared by all grid cells.
    weights: Vec<f64>,
    /// Optional saturating output stage.
    pub tanh_output: bool,
}

impl PatchDecoder {
    pub fn new(grid_h: usize, grid_w: usize, patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || patch == 0 || dim == 0 {
            return Err(Error::invalid("decoder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let weights = (0..patch * patch * dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Ok(PatchDecoder { grid_h, grid_w, patch, dim, weights, tanh_output: false })
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch
    }

    fn check_embeddings(&self, embeddings: &[f64]) -> Result<()> {
        if embeddings.len() != self.tokens() * self.dim {
            return Err(Error::invalid(format!(
                "embedding buffer holds {} values, expected {} tokens x {}",
                embeddings.len(),
                self.tokens(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Map L x d embeddings (row-major) to the output image.
    pub fn decode(&self, embeddings: &[f64]) -> Result<Image> {
        self.check_embeddings(embeddings)?;
        let mut img = Image::zeros(self.image_height(), self.image_width());
        for gr in 0..self.grid_h {
            for gc in 0..self.grid_w {
                let l = gr * self.grid_w + gc;
                let e = &embeddings[l * self.dim..(l + 1) * self.dim];
                for pr in 0..self.patch {
                    for pc in 0..self.patch {
                        let wrow = &self.weights
                            [(pr * self.patch + pc) * self.dim..(pr * self.patch + pc + 1) * self.dim];
                        let mut v: f64 = wrow.iter().zip(e).map(|(w, x)| w * x).sum();
                        if self.tanh_output {
                            v = v.tanh();
                        }
                        img.set(gr * self.patch + pr, gc * self.patch + pc, v);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Decode a fully revealed token sequence through a codebook.
    pub fn decode_tokens(&self, tokens: &[usize], quantizer: &dyn Quantizer) -> Result<Image> {
        if tokens.len() != self.tokens() {
            return Err(Error::invalid(format!(
                "{} tokens for a {}x{} grid",
                tokens.len(),
                self.grid_h,
                self.grid_w
            )));
        }
        if quantizer.dim() != self.dim {
            return Err(Error::invalid(format!(
                "codebook dimension {} does not match decoder dimension {}",
                quantizer.dim(),
                self.dim
            )));
        }
        let mut embeddings = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            if t >= quantizer.size() {
                return Err(Error::OutOfRange(format!(
                    "token {t} exceeds vocabulary of {}",
                    quantizer.size()
                )));
            }
            embeddings.extend_from_slice(quantizer.entry(t));
        }
        self.decode(&embeddings)
    }

    /// Pull an image-space gradient back to embedding space (the transpose of
    /// the per-patch weight map; through the tanh derivative when enabled).
    pub fn vjp(&self, embeddings: &[f64], upstream: &Image) -> Result<Vec<f64>> {
        self.check_embeddings(embeddings)?;
        if upstream.height != self.image_height() || upstream.width != self.image_width() {
            return Err(Error::invalid(format!(
                "upstream gradient is {}x{}, decoder output is {}x{}",
                upstream.height,
                upstream.width,
                self.image_height(),
                self.image_width()
            )));
        }
        let mut grad = vec![0.0; embeddings.len()];
        for gr in 0..self.grid_h {
            for gc in 0..self.grid_w {
                let l = gr * self.grid_w + gc;
                let e = &embeddings[l * self.dim..(l + 1) * self.dim];
                let g = &mut grad[l * self.dim..(l + 1) * self.dim];
                for pr in 0..self.patch {
                    for pc in 0..self.patch {
                        let wrow = &self.weights
                            [(pr * self.patch + pc) * self.dim..(pr * self.patch + pc + 1) * self.dim];
                        let mut up = upstream.get(gr * self.patch + pr, gc * self.patch + pc);
                        if self.tanh_output {
                            let pre: f64 = wrow.iter().zip(e).map(|(w, x)| w * x).sum();
                            let y = pre.tanh();
                            up *= 1.0 - y * y;
                        }
                        for (gi, &w) in g.iter_mut().zip(wrow) {
                            *gi += up * w;
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{nelbo, ExpectationMode};
    use crate::schedule::{NoiseSchedule, ScheduleKind};

    fn two_template_prior(rho: f64) -> TemplatePrior {
        TemplatePrior::new(
            vec![vec![0, 0, 1], vec![1, 1, 1]],
            vec![0.5, 0.5],
            rho,
            2,
        )
        .unwrap()
    }

    #[test]
    fn constructor_validates() {
        assert!(TemplatePrior::new(vec![], vec![], 0.0, 2).is_err());
        assert!(TemplatePrior::new(vec![vec![0]], vec![0.5], 0.0, 2).is_err());
        assert!(TemplatePrior::new(vec![vec![2]], vec![1.0], 0.0, 2).is_err());
        assert!(TemplatePrior::new(vec![vec![0]], vec![1.0], 1.0, 2).is_err());
        assert!(TemplatePrior::new(vec![vec![0]], vec![1.0], 0.1, 1).is_err());
        assert!(TemplatePrior::new(vec![vec![0], vec![0, 1]], vec![0.5, 0.5], 0.0, 2).is_err());
    }

    #[test]
    fn sample_without_corruption_returns_a_template() {
        let prior = two_template_prior(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = prior.sample(&mut rng);
            assert!(prior.templates().contains(&x), "{x:?} is not a template");
        }
    }

    #[test]
    fn single_template_prior_is_deterministic() {
        let prior = TemplatePrior::new(vec![vec![1, 0, 1, 1]], vec![1.0], 0.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(prior.sample(&mut rng), vec![1, 0, 1, 1]);
    }

    #[test]
    fn sample_frequencies_match_mixture_weights() {
        let prior = TemplatePrior::new(
            vec![vec![0, 0], vec![1, 1]],
            vec![0.3, 0.7],
            0.0,
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut first = 0usize;
        for _ in 0..n {
            if prior.sample(&mut rng) == vec![0, 0] {
                first += 1;
            }
        }
        let mean = 0.3 * n as f64;
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!(
            (first as f64 - mean).abs() < 3.0 * sd,
            "template frequency {first} outside 3 sigma of {mean}"
        );
    }

    #[test]
    fn denoiser_rules_out_inconsistent_templates() {
        // Evidence (0, MASK, MASK) with rho = 0 keeps only template (0,0,1):
        // the two masked positions become point masses on 0 and 1.
        let prior = two_template_prior(0.0);
        let mut z = TokenState::all_masked(3);
        z.reveal(0, 0).unwrap();
        let table = exact_denoiser(&prior, &z).unwrap();
        assert_eq!(table.row(0), &[1.0, 0.0]);
        assert_eq!(table.row(1), &[1.0, 0.0]);
        assert_eq!(table.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn denoiser_on_all_masked_returns_prior_marginals() {
        let prior = two_template_prior(0.1);
        let z = TokenState::all_masked(3);
        let table = exact_denoiser(&prior, &z).unwrap();
        // Position 0: templates give 0 and 1 with weight 1/2 each; both are
        // smeared by the corruption channel.
        let smear_match = 0.9;
        let smear_miss = 0.1;
        let expect0 = 0.5 * smear_match + 0.5 * smear_miss;
        assert!((table.get(0, 0) - expect0).abs() < 1e-12);
        // Position 2: both templates agree on token 1.
        assert!((table.get(2, 1) - smear_match).abs() < 1e-12);
    }

    #[test]
    fn denoiser_errors_on_impossible_evidence() {
        let prior = TemplatePrior::new(vec![vec![0, 0]], vec![1.0], 0.0, 2).unwrap();
        let mut z = TokenState::all_masked(2);
        z.reveal(0, 1).unwrap();
        match exact_denoiser(&prior, &z) {
            Err(Error::DegenerateEvidence) => {}
            other => panic!("expected degenerate evidence, got {other:?}"),
        }
    }

    #[test]
    fn denoiser_matches_brute_force_enumeration() {
        // Independent oracle: tabulate q(x) over all K^L sequences and read
        // the conditional marginals off directly.
        let prior = TemplatePrior::new(
            vec![vec![0, 1, 2, 0], vec![2, 2, 1, 0], vec![1, 0, 0, 1]],
            vec![0.5, 0.2, 0.3],
            0.15,
            3,
        )
        .unwrap();
        let len = 4;
        let vocab = 3;
        let states = [
            TokenState::all_masked(len),
            {
                let mut z = TokenState::all_masked(len);
                z.reveal(1, 2).unwrap();
                z
            },
            {
                let mut z = TokenState::all_masked(len);
                z.reveal(0, 1).unwrap();
                z.reveal(3, 0).unwrap();
                z
            },
        ];
        for z in &states {
            let table = exact_denoiser(&prior, z).unwrap();
            // Enumerate all sequences consistent with the evidence.
            let mut marginals = vec![vec![0.0f64; vocab]; len];
            let mut total = 0.0f64;
            let count = vocab.pow(len as u32);
            for code in 0..count {
                let mut x = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    x.push(c % vocab);
                    c /= vocab;
                }
                let consistent = (0..len).all(|l| match z.get(l) {
                    Some(v) => x[l] == v,
                    None => true,
                });
                if !consistent {
                    continue;
                }
                let q = prior.log_prob(&x).unwrap().exp();
                total += q;
                for l in 0..len {
                    marginals[l][x[l]] += q;
                }
            }
            for l in 0..len {
                for k in 0..vocab {
                    let expect = marginals[l][k] / total;
                    assert!(
                        (table.get(l, k) - expect).abs() < 1e-12,
                        "position {l} token {k}: {} vs {expect}",
                        table.get(l, k)
                    );
                }
            }
        }
    }

    #[test]
    fn denoiser_is_bayes_optimal_for_prior_averaged_nelbo() {
        // Among all predictors, the exact posterior minimizes the expected
        // objective over data drawn from the prior. Perturbed copies must
        // never do better.
        struct Perturbed<'a> {
            base: &'a TemplatePrior,
            epsilon: f64,
            salt: u64,
        }
        impl Denoiser for Perturbed<'_> {
            fn len(&self) -> usize {
                self.base.len()
            }
            fn vocab(&self) -> usize {
                self.base.vocab()
            }
            fn predict(&self, z: &TokenState, _step: usize) -> Result<ProbTable> {
                let base = exact_denoiser(self.base, z)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(z.fingerprint() ^ self.salt);
                let vocab = base.vocab();
                let mut rows = Vec::with_capacity(base.len());
                for l in 0..base.len() {
                    let noise: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let nsum: f64 = noise.iter().sum();
                    let row = (0..vocab)
                        .map(|k| (1.0 - self.epsilon) * base.get(l, k) + self.epsilon * noise[k] / nsum)
                        .collect();
                    rows.push(row);
                }
                ProbTable::from_rows(rows)
            }
        }

        let prior = TemplatePrior::new(
            vec![vec![0, 1], vec![2, 2]],
            vec![0.6, 0.4],
            0.1,
            3,
        )
        .unwrap();
        let schedule = NoiseSchedule::new(ScheduleKind::Linear, 2).unwrap();
        let exact = PriorDenoiser::new(prior.clone());

        let averaged = |d: &dyn Denoiser| -> f64 {
            let mut total = 0.0;
            for a in 0..3usize {
                for b in 0..3usize {
                    let x = vec![a, b];
                    let q = prior.log_prob(&x).unwrap().exp();
                    total +=
                        q * nelbo(&x, d, &schedule, ExpectationMode::Exact).unwrap().value;
                }
            }
            total
        };

        let best = averaged(&exact);
        for salt in 0..100u64 {
            let p = Perturbed { base: &prior, epsilon: 0.02 + 0.3 * (salt as f64 / 100.0), salt };
            let val = averaged(&p);
            assert!(
                best <= val + 1e-12,
                "perturbation {salt} beat the exact posterior: {val} < {best}"
            );
        }
    }

    #[test]
    fn fit_on_identical_samples_collapses_to_them() {
        let samples = vec![vec![1usize, 0, 1]; 20];
        let (prior, report) = fit_prior(&samples, 2, 1, 10, 0).unwrap();
        assert_eq!(prior.templates()[0], vec![1, 0, 1]);
        assert_eq!(prior.rho(), RHO_FLOOR);
        assert!(report.train_nll.len() == 10);
    }

    #[test]
    fn fit_recovers_true_templates_on_most_seeds() {
        let truth = TemplatePrior::new(
            vec![vec![0, 1, 2, 3, 0, 1, 2, 3], vec![3, 3, 0, 0, 1, 1, 2, 2]],
            vec![0.5, 0.5],
            0.05,
            4,
        )
        .unwrap();
        let mut hits = 0usize;
        let seeds = 40;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let samples: Vec<Vec<usize>> = (0..500).map(|_| truth.sample(&mut rng)).collect();
            let (fitted, _) = fit_prior(&samples, 4, 2, 30, seed).unwrap();
            let t = fitted.templates();
            let direct = t[0] == truth.templates()[0] && t[1] == truth.templates()[1];
            let swapped = t[0] == truth.templates()[1] && t[1] == truth.templates()[0];
            if direct || swapped {
                hits += 1;
            }
        }
        assert!(
            hits * 100 >= 95 * seeds as usize,
            "recovered templates on only {hits}/{seeds} seeds"
        );
    }

    #[test]
    fn fit_training_likelihood_is_monotone() {
        let truth = TemplatePrior::new(
            vec![vec![0, 0, 1, 1], vec![1, 1, 0, 0]],
            vec![0.5, 0.5],
            0.1,
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec<usize>> = (0..200).map(|_| truth.sample(&mut rng)).collect();
        let (_, report) = fit_prior(&samples, 2, 2, 25, 3).unwrap();
        for pair in report.train_nll.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "training NLL increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn decoder_is_linear_and_patch_local() {
        let dec = PatchDecoder::new(2, 3, 2, 4, 42).unwrap();
        let n = dec.tokens() * dec.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zeros = vec![0.0; n];
        assert!(dec.decode(&zeros).unwrap().data.iter().all(|&v| v == 0.0));
        // Linearity.
        let combo: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let d1 = dec.decode(&e1).unwrap();
        let d2 = dec.decode(&e2).unwrap();
        let dc = dec.decode(&combo).unwrap();
        for i in 0..dc.data.len() {
            assert!((dc.data[i] - (2.0 * d1.data[i] - 0.5 * d2.data[i])).abs() < 1e-12);
        }
        // Changing one token's embedding touches only its own patch.
        let mut e3 = e1.clone();
        for v in &mut e3[4..8] {
            *v += 1.0;
        }
        let d3 = dec.decode(&e3).unwrap();
        for r in 0..d3.height {
            for c in 0..d3.width {
                let in_patch = r < 2 && (2..4).contains(&c);
                if in_patch {
                    continue;
                }
                assert_eq!(d3.get(r, c), d1.get(r, c), "pixel ({r},{c}) leaked");
            }
        }
    }

    #[test]
    fn decoder_same_seed_same_weights() {
        let a = PatchDecoder::new(2, 2, 3, 4, 9).unwrap();
        let b = PatchDecoder::new(2, 2, 3, 4, 9).unwrap();
        let c = PatchDecoder::new(2, 2, 3, 4, 10).unwrap();
        let e: Vec<f64> = (0..a.tokens() * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(a.decode(&e).unwrap().data, b.decode(&e).unwrap().data);
        assert_ne!(a.decode(&e).unwrap().data, c.decode(&e).unwrap().data);
    }

    #[test]
    fn decoder_output_is_bounded_for_sign_embeddings() {
        let dec = PatchDecoder::new(3, 3, 2, 8, 77).unwrap();
        let e = vec![1.0; dec.tokens() * 8];
        for &v in &dec.decode(&e).unwrap().data {
            assert!((-1.0..=1.0).contains(&v), "pixel {v} escaped [-1, 1]");
        }
    }

    #[test]
    fn decoder_vjp_matches_finite_differences() {
        for tanh_output in [false, true] {
            let mut dec = PatchDecoder::new(2, 2, 2, 3, 21).unwrap();
            dec.tanh_output = tanh_output;
            let n = dec.tokens() * dec.dim;
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let img = dec.decode(&e).unwrap();
            let up_data: Vec<f64> = (0..img.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream = Image::from_vec(img.height, img.width, up_data).unwrap();
            let grad = dec.vjp(&e, &upstream).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut ep = e.clone();
                let mut em = e.clone();
                ep[i] += h;
                em[i] -= h;
                let scalar = |emb: &[f64]| -> f64 {
                    dec.decode(emb)
                        .unwrap()
                        .data
                        .iter()
                        .zip(&upstream.data)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let fd = (scalar(&ep) - scalar(&em)) / (2.0 * h);
                let denom = grad[i].abs().max(1e-7);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-7 || (grad[i] - fd).abs() < 1e-9,
                    "tanh={tanh_output} component {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }
}
