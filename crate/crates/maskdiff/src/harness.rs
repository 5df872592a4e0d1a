//! Experiment orchestration: synthesize a task from the configured prior,
//! observe it through the measurement operator, run every configured sampler
//! on seed-paired instances, and write metrics plus image artifacts.
//!
//! Determinism contract: everything written to `runs.csv` and the graymap
//! files is a pure function of (config, seed). Wall-clock timings go to a
//! separate `timings.csv` so the primary outputs stay bit-identical across
//! invocations and across serial/parallel execution.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::measure::Operator;
use crate::pgm::render_pgm;
use crate::sampler::sample;
use crate::world::PriorDenoiser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// Seed-stream salts keeping ground truth, observation noise, and the
/// sampler's own randomness independent while all derived from one run seed.
const GT_STREAM: u64 = 0x6774_7275_7468;
const OBS_STREAM: u64 = 0x6f62_7365_7276;

/// Deterministic per-run results; everything here lands in `runs.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Position of the sampler in the configured kind list (kinds may
    /// repeat, e.g. for self-comparison ablations).
    pub kind_index: usize,
    pub kind: String,
    /// "ok" or an error message; failed runs stay in the batch.
    pub status: String,
    /// Data residual ||y - A(x_hat)||.
    pub residual: Option<f64>,
    /// 10 log10(range^2 / MSE) against the ground-truth image, range 2;
    /// infinite when the reconstruction is exact.
    pub psnr: Option<f64>,
    /// Fraction of positions matching the ground-truth tokens.
    pub token_accuracy: Option<f64>,
    /// Masked positions remaining after each reverse step.
    pub masked_trace: Vec<usize>,
    /// Final reconstruction, for graymap output.
    pub image: Option<Image>,
}

/// A record plus its (non-deterministic) wall-clock cost.
#[derive(Debug, Clone)]
pub struct TimedRecord {
    pub record: RunRecord,
    pub elapsed_ms: f64,
}

/// Per-kind aggregates over the successful runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kind_index: usize,
    pub kind: String,
    pub runs: usize,
    pub failures: usize,
    pub median_residual: Option<f64>,
    pub iqr_residual: Option<f64>,
    pub median_psnr: Option<f64>,
    pub mean_token_accuracy: Option<f64>,
}

/// Paired win rate of one configured sampler over another.
#[derive(Debug, Clone, PartialEq)]
pub struct WinRate {
    pub kind_a: String,
    pub kind_b: String,
    /// Mean over paired seeds of 1 (a strictly better), 0.5 (tie), 0.
    pub rate: f64,
    pub pairs: usize,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub records: Vec<TimedRecord>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug)]
pub struct AblationOutput {
    pub records: Vec<TimedRecord>,
    pub wins: Vec<WinRate>,
}

/// Linearly interpolated quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Peak signal-to-noise ratio for images in [-1, 1] (range 2). Exact
/// reconstruction yields +infinity.
pub fn psnr(recon: &Image, truth: &Image) -> Result<f64> {
    if recon.height != truth.height || recon.width != truth.width {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            recon.height, recon.width, truth.height, truth.width
        )));
    }
    let n = recon.data.len() as f64;
    let mse: f64 =
        recon.data.iter().zip(&truth.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (4.0 / mse).log10())
    }
}

pub fn token_accuracy(tokens: &[usize], truth: &[usize]) -> Result<f64> {
    if tokens.len() != truth.len() {
        return Err(Error::invalid(format!(
            "token sequences differ in length: {} vs {}",
            tokens.len(),
            truth.len()
        )));
    }
    let hits = tokens.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / tokens.len().max(1) as f64)
}

/// Run every configured sampler kind on every seed. Row order is
/// (repeat, seed, kind) regardless of worker scheduling; a failed run is
/// recorded with its error message rather than aborting the batch.
pub fn execute_runs(cfg: &ExperimentConfig) -> Result<Vec<TimedRecord>> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let prior = cfg.build_prior()?;
    let codebook = cfg.build_codebook()?;
    let decoder = cfg.build_decoder()?;
    let base_spec = cfg.build_measurement()?;
    let sampler_cfgs = cfg.build_sampler_configs()?;
    let denoiser = PriorDenoiser::new(prior.clone());

    let mut tasks: Vec<(u64, usize)> = Vec::new();
    for rep in 0..cfg.run.repeats {
        for s in 0..cfg.run.seeds {
            let seed = cfg.run.base_seed + (rep * cfg.run.seeds + s) as u64;
            for k in 0..sampler_cfgs.len() {
                tasks.push((seed, k));
            }
        }
    }

    let worker = |&(seed, k): &(u64, usize)| -> TimedRecord {
        let scfg = &sampler_cfgs[k];
        let started = Instant::now();
        let mut record = RunRecord {
            config_hash: hash.clone(),
            seed,
            kind_index: k,
            kind: scfg.kind.name().to_string(),
            status: "ok".into(),
            residual: None,
            psnr: None,
            token_accuracy: None,
            masked_trace: Vec::new(),
            image: None,
        };
        let attempt = (|| -> Result<()> {
            let mut gt_rng = ChaCha8Rng::seed_from_u64(seed ^ GT_STREAM);
            let gt_tokens = prior.sample(&mut gt_rng);
            let gt_image = decoder.decode_tokens(&gt_tokens, &codebook)?;
            let mut obs_rng = ChaCha8Rng::seed_from_u64(seed ^ OBS_STREAM);
            let y = base_spec.observe(&gt_image, &mut obs_rng)?;
            let spec = base_spec.clone().with_observation(y);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = sample(&denoiser, &codebook, &decoder, &spec, scfg, &mut rng)?;
            record.residual = Some(spec.residual_norm(&run.image)?);
            record.psnr = Some(psnr(&run.image, &gt_image)?);
            record.token_accuracy = Some(token_accuracy(&run.final_tokens, &gt_tokens)?);
            record.masked_trace =
                run.steps.iter().map(|s| s.state_after.masked_count()).collect();
            record.image = Some(run.image);
            Ok(())
        })();
        if let Err(e) = attempt {
            record.status = format!("error: {e}");
        }
        TimedRecord { record, elapsed_ms: started.elapsed().as_secs_f64() * 1000.0 }
    };

    let records: Vec<TimedRecord> = if cfg.run.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.parallel)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(worker).collect())
    } else {
        tasks.iter().map(worker).collect()
    };
    Ok(records)
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_metric).unwrap_or_default()
}

pub fn render_runs_csv(records: &[TimedRecord]) -> String {
    let mut out = String::from("config_hash,seed,kind,status,residual,psnr,token_accuracy\n");
    for t in records {
        let r = &t.record;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.config_hash,
            r.seed,
            r.kind,
            r.status.replace(',', ";"),
            fmt_opt(r.residual),
            fmt_opt(r.psnr),
            fmt_opt(r.token_accuracy)
        ));
    }
    out
}

pub fn render_timings_csv(records: &[TimedRecord]) -> String {
    let mut out = String::from("config_hash,seed,kind,elapsed_ms\n");
    for t in records {
        let r = &t.record;
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.config_hash, r.seed, r.kind, t.elapsed_ms
        ));
    }
    out
}

pub fn render_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "kind,runs,failures,median_residual,iqr_residual,median_psnr,mean_token_accuracy\n",
    );
    for s in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.kind,
            s.runs,
            s.failures,
            fmt_opt(s.median_residual),
            fmt_opt(s.iqr_residual),
            fmt_opt(s.median_psnr),
            fmt_opt(s.mean_token_accuracy)
        ));
    }
    out
}

/// Per-step masked-count traces, one row per (run, reverse step).
pub fn render_traces_csv(records: &[TimedRecord]) -> String {
    let mut out = String::from("config_hash,seed,kind,step,masked_after\n");
    for t in records {
        let r = &t.record;
        for (k, &masked) in r.masked_trace.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.config_hash,
                r.seed,
                r.kind,
                k + 1,
                masked
            ));
        }
    }
    out
}

pub fn render_wins_csv(wins: &[WinRate]) -> String {
    let mut out = String::from("kind_a,kind_b,win_rate,pairs\n");
    for w in wins {
        out.push_str(&format!("{},{},{},{}\n", w.kind_a, w.kind_b, w.rate, w.pairs));
    }
    out
}

/// Paired residuals per seed for each ordered pair of distinct kind slots.
pub fn render_pairs_csv(records: &[TimedRecord]) -> String {
    let mut out = String::from("seed,kind_a,kind_b,residual_a,residual_b,delta\n");
    let slots = kind_slots(records);
    for (ai, a_name) in &slots {
        for (bi, b_name) in &slots {
            if bi <= ai {
                continue;
            }
            for (seed, ra, rb) in paired_residuals(records, *ai, *bi) {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    seed,
                    a_name,
                    b_name,
                    fmt_metric(ra),
                    fmt_metric(rb),
                    fmt_metric(ra - rb)
                ));
            }
        }
    }
    out
}

/// Kind slots in configured order: (kind_index, name).
fn kind_slots(records: &[TimedRecord]) -> Vec<(usize, String)> {
    let mut slots: Vec<(usize, String)> = Vec::new();
    for t in records {
        if !slots.iter().any(|(i, _)| *i == t.record.kind_index) {
            slots.push((t.record.kind_index, t.record.kind.clone()));
        }
    }
    slots.sort_by_key(|(i, _)| *i);
    slots
}

/// Seeds where both slots produced a residual, with the two residuals.
fn paired_residuals(
    records: &[TimedRecord],
    slot_a: usize,
    slot_b: usize,
) -> Vec<(u64, f64, f64)> {
    let mut seeds: Vec<u64> = Vec::new();
    for t in records {
        if !seeds.contains(&t.record.seed) {
            seeds.push(t.record.seed);
        }
    }
    let lookup = |seed: u64, slot: usize| -> Option<f64> {
        records
            .iter()
            .find(|t| t.record.seed == seed && t.record.kind_index == slot)
            .and_then(|t| t.record.residual)
    };
    seeds
        .into_iter()
        .filter_map(|seed| match (lookup(seed, slot_a), lookup(seed, slot_b)) {
            (Some(a), Some(b)) => Some((seed, a, b)),
            _ => None,
        })
        .collect()
}

/// Full win-rate matrix over configured kind slots, diagonal included
/// (self-comparison ties give exactly 0.5).
pub fn win_rates(records: &[TimedRecord]) -> Vec<WinRate> {
    let slots = kind_slots(records);
    let mut out = Vec::new();
    for (ai, a_name) in &slots {
        for (bi, b_name) in &slots {
            let paired = paired_residuals(records, *ai, *bi);
            let pairs = paired.len();
            let score: f64 = paired
                .iter()
                .map(|(_, a, b)| {
                    if a < b {
                        1.0
                    } else if a > b {
                        0.0
                    } else {
                        0.5
                    }
                })
                .sum();
            let rate = if pairs == 0 { f64::NAN } else { score / pairs as f64 };
            out.push(WinRate {
                kind_a: a_name.clone(),
                kind_b: b_name.clone(),
                rate,
                pairs,
            });
        }
    }
    out
}

/// Median/IQR aggregates per kind slot over the successful runs.
pub fn summarize(records: &[TimedRecord]) -> Vec<SummaryRow> {
    let slots = kind_slots(records);
    slots
        .into_iter()
        .map(|(slot, name)| {
            let of_kind: Vec<&RunRecord> = records
                .iter()
                .map(|t| &t.record)
                .filter(|r| r.kind_index == slot)
                .collect();
            let runs = of_kind.len();
            let failures = of_kind.iter().filter(|r| r.status != "ok").count();
            let mut residuals: Vec<f64> =
                of_kind.iter().filter_map(|r| r.residual).collect();
            residuals.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
            let mut psnrs: Vec<f64> = of_kind.iter().filter_map(|r| r.psnr).collect();
            psnrs.sort_by(|a, b| a.partial_cmp(b).expect("comparable psnr"));
            let accs: Vec<f64> = of_kind.iter().filter_map(|r| r.token_accuracy).collect();
            SummaryRow {
                kind_index: slot,
                kind: name,
                runs,
                failures,
                median_residual: (!residuals.is_empty())
                    .then(|| quantile(&residuals, 0.5)),
                iqr_residual: (!residuals.is_empty())
                    .then(|| quantile(&residuals, 0.75) - quantile(&residuals, 0.25)),
                median_psnr: (!psnrs.is_empty()).then(|| quantile(&psnrs, 0.5)),
                mean_token_accuracy: (!accs.is_empty())
                    .then(|| accs.iter().sum::<f64>() / accs.len() as f64),
            }
        })
        .collect()
}

/// Rebuild the image an observation vector depicts, when its geometry is an
/// image grid (the feature map and pixel-subset operators don't render).
fn measurement_image(op: &Operator, y: &[f64], h: usize, w: usize) -> Option<Image> {
    match op {
        Operator::Downsample { factor } if *factor > 0 => {
            Image::from_vec(h / factor, w / factor, y.to_vec()).ok()
        }
        _ if y.len() == h * w => Image::from_vec(h, w, y.to_vec()).ok(),
        _ => None,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}

/// Write the per-seed ground-truth/measurement graymaps and each run's
/// reconstruction into `dir`.
fn write_images(cfg: &ExperimentConfig, records: &[TimedRecord], dir: &Path) -> Result<()> {
    let prior = cfg.build_prior()?;
    let codebook = cfg.build_codebook()?;
    let decoder = cfg.build_decoder()?;
    let base_spec = cfg.build_measurement()?;
    let mut seeds: Vec<u64> = Vec::new();
    for t in records {
        if !seeds.contains(&t.record.seed) {
            seeds.push(t.record.seed);
        }
    }
    for &seed in &seeds {
        let mut gt_rng = ChaCha8Rng::seed_from_u64(seed ^ GT_STREAM);
        let gt_tokens = prior.sample(&mut gt_rng);
        let gt_image = decoder.decode_tokens(&gt_tokens, &codebook)?;
        render_pgm(&gt_image, &dir.join(format!("gt_{seed}.pgm")))?;
        let mut obs_rng = ChaCha8Rng::seed_from_u64(seed ^ OBS_STREAM);
        if let Ok(y) = base_spec.observe(&gt_image, &mut obs_rng) {
            if let Some(m) =
                measurement_image(&base_spec.op, &y, gt_image.height, gt_image.width)
            {
                render_pgm(&m, &dir.join(format!("measured_{seed}.pgm")))?;
            }
        }
    }
    for t in records {
        if let Some(img) = &t.record.image {
            let r = &t.record;
            render_pgm(
                img,
                &dir.join(format!("recon_{}_{}_{}.pgm", r.seed, r.kind_index, r.kind)),
            )?;
        }
    }
    Ok(())
}

/// Run the configured experiment and write `runs.csv`, `summary.csv`,
/// `timings.csv`, and the graymap artifacts into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let records = execute_runs(cfg)?;
    let summary = summarize(&records);
    let dir = Path::new(&cfg.run.out_dir);
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::invalid(format!("creating {}: {e}", dir.display())))?;
    write_text(&dir.join("runs.csv"), &render_runs_csv(&records))?;
    write_text(&dir.join("summary.csv"), &render_summary_csv(&summary))?;
    write_text(&dir.join("timings.csv"), &render_timings_csv(&records))?;
    write_images(cfg, &records, dir)?;
    Ok(ExperimentOutput { records, summary })
}

/// Paired comparison across the configured sampler kinds on identical
/// (ground truth, observation, seed) triples. Writes `runs.csv`,
/// `pairs.csv`, `wins.csv`, and per-step masked-count traces.
pub fn ablate(cfg: &ExperimentConfig) -> Result<AblationOutput> {
    if cfg.sampler.kinds.len() < 2 {
        return Err(Error::invalid(
            "ablation compares sampler kinds; configure at least two",
        ));
    }
    let records = execute_runs(cfg)?;
    let wins = win_rates(&records);
    let dir = Path::new(&cfg.run.out_dir);
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::invalid(format!("creating {}: {e}", dir.display())))?;
    write_text(&dir.join("runs.csv"), &render_runs_csv(&records))?;
    write_text(&dir.join("pairs.csv"), &render_pairs_csv(&records))?;
    write_text(&dir.join("wins.csv"), &render_wins_csv(&wins))?;
    write_text(&dir.join("traces.csv"), &render_traces_csv(&records))?;
    write_text(&dir.join("timings.csv"), &render_timings_csv(&records))?;
    Ok(AblationOutput { records, wins })
}
