//! Measurement operators, observation noise, and data-fit losses.
//!
//! An operator maps an image to a measurement vector: identity, mean-pool
//! downsampling, Gaussian blur, arbitrary convolution kernels (all with
//! symmetric-reflect padding), seeded random pixel selection, scaled clipping
//! (an HDR stand-in), or a seeded linear feature map followed by L2
//! normalization (a perceptual-feature stand-in). Every operator exposes a
//! vector-Jacobian product so losses can be pulled back to image space; for
//! the linear operators this is exactly the adjoint, checked by the
//! <Au, v> = <u, A^T v> identity in the tests.

use crate::error::{Error, Result};
use crate::image::Image;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A convolution kernel with odd side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows % 2 == 0 || cols % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must have odd positive sides, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "kernel data holds {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel holds a non-finite value"));
        }
        Ok(Kernel { rows, cols, data })
    }

    /// Normalized Gaussian kernel with standard deviation `std`.
    pub fn gaussian(side: usize, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::invalid(format!("gaussian std must be positive, got {std}")));
        }
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("gaussian side must be odd, got {side}")));
        }
        let half = (side / 2) as isize;
        let mut data = Vec::with_capacity(side * side);
        for r in -half..=half {
            for c in -half..=half {
                let d2 = (r * r + c * c) as f64;
                data.push((-d2 / (2.0 * std * std)).exp());
            }
        }
        let sum: f64 = data.iter().sum();
        for v in data.iter_mut() {
            *v /= sum;
        }
        Kernel::new(side, side, data)
    }

    /// Parse rows of whitespace-separated reals.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::Parse(format!("kernel line {}: `{tok}` is not a number", lineno + 1))
                })?;
                row.push(v);
            }
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse(format!(
                        "kernel line {}: {} values, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("kernel file holds no rows".into()));
        }
        let r = rows.len();
        let c = rows[0].len();
        Kernel::new(r, c, rows.into_iter().flatten().collect())
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Symmetric reflection of index `i` into 0..n (valid while the excursion is
/// at most n, which the kernel-size validation guarantees).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i as usize
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    /// Measurement is the image itself.
    Identity,
    /// Non-overlapping mean pooling by `factor` along both axes.
    Downsample { factor: usize },
    /// Gaussian blur with an odd `side` x `side` kernel.
    GaussianBlur { side: usize, std: f64 },
    /// Correlation with an explicit kernel, reflect padding.
    ConvKernel { kernel: Kernel },
    /// Keep each pixel independently with probability `keep_rate`; the
    /// measurement is the vector of kept pixels in row-major order.
    PixelMask { keep_rate: f64, seed: u64 },
    /// Scale then clamp into [lo, hi] elementwise.
    HdrClip { scale: f64, lo: f64, hi: f64 },
    /// Seeded linear map to `dim` features, then L2 normalization.
    FeatureCosine { seed: u64, dim: usize },
}

impl Operator {
    /// Check that the operator can act on an h x w image and return the
    /// measurement length.
    pub fn output_len(&self, h: usize, w: usize) -> Result<usize> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        match self {
            Operator::Identity => Ok(h * w),
            Operator::Downsample { factor } => {
                if *factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(Error::invalid(format!(
                        "downsample factor {factor} does not divide {h}x{w}"
                    )));
                }
                Ok((h / factor) * (w / factor))
            }
            Operator::GaussianBlur { side, std } => {
                let k = Kernel::gaussian(*side, *std)?;
                Operator::ConvKernel { kernel: k }.output_len(h, w)
            }
            Operator::ConvKernel { kernel } => {
                if kernel.rows / 2 > h || kernel.cols / 2 > w {
                    return Err(Error::invalid(format!(
                        "kernel {}x{} too large for a {h}x{w} image",
                        kernel.rows, kernel.cols
                    )));
                }
                Ok(h * w)
            }
            Operator::PixelMask { keep_rate, .. } => {
                if !(0.0..=1.0).contains(keep_rate) {
                    return Err(Error::OutOfRange(format!(
                        "keep rate {keep_rate} outside [0, 1]"
                    )));
                }
                Ok(self.mask_indices(h, w).len())
            }
            Operator::HdrClip { scale, lo, hi } => {
                if !scale.is_finite() || !(lo < hi) {
                    return Err(Error::invalid(format!(
                        "clip needs finite scale and lo < hi, got scale {scale}, [{lo}, {hi}]"
                    )));
                }
                Ok(h * w)
            }
            Operator::FeatureCosine { dim, .. } => {
                if *dim == 0 {
                    return Err(Error::invalid("feature dimension must be positive"));
                }
                Ok(*dim)
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Operator::Identity
                | Operator::Downsample { .. }
                | Operator::GaussianBlur { .. }
                | Operator::ConvKernel { .. }
                | Operator::PixelMask { .. }
        )
    }

    /// Row-major indices of the kept pixels (deterministic in the seed).
    fn mask_indices(&self, h: usize, w: usize) -> Vec<usize> {
        match self {
            Operator::PixelMask { keep_rate, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..h * w).filter(|_| rng.gen::<f64>() < *keep_rate).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Seeded feature matrix, row-major dim x (h*w).
    fn feature_matrix(&self, npix: usize) -> Vec<f64> {
        match self {
            Operator::FeatureCosine { seed, dim } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let scale = 1.0 / (npix as f64).sqrt();
                (0..dim * npix).map(|_| rng.gen_range(-scale..scale)).collect()
            }
            _ => Vec::new(),
        }
    }

    fn conv_kernel(&self) -> Result<Option<Kernel>> {
        match self {
            Operator::GaussianBlur { side, std } => Ok(Some(Kernel::gaussian(*side, *std)?)),
            Operator::ConvKernel { kernel } => Ok(Some(kernel.clone())),
            _ => Ok(None),
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Vec<f64>> {
        self.output_len(img.height, img.width)?;
        match self {
            Operator::Identity => Ok(img.data.clone()),
            Operator::Downsample { factor } => {
                let f = *factor;
                let oh = img.height / f;
                let ow = img.width / f;
                let area = (f * f) as f64;
                let mut out = Vec::with_capacity(oh * ow);
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let mut sum = 0.0;
                        for dr in 0..f {
                            for dc in 0..f {
                                sum += img.get(orow * f + dr, ocol * f + dc);
                            }
                        }
                        out.push(sum / area);
                    }
                }
                Ok(out)
            }
            Operator::GaussianBlur { .. } | Operator::ConvKernel { .. } => {
                let kernel = self.conv_kernel()?.expect("conv operators carry a kernel");
                let (h, w) = (img.height, img.width);
                let (hr, hc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
                let mut out = vec![0.0; h * w];
                for r in 0..h as isize {
                    for c in 0..w as isize {
                        let mut sum = 0.0;
                        for kr in 0..kernel.rows as isize {
                            for kc in 0..kernel.cols as isize {
                                let ir = reflect(r + kr - hr, h);
                                let ic = reflect(c + kc - hc, w);
                                sum += kernel.get(kr as usize, kc as usize)
                                    * img.get(ir, ic);
                            }
                        }
                        out[r as usize * w + c as usize] = sum;
                    }
                }
                Ok(out)
            }
            Operator::PixelMask { .. } => {
                let idx = self.mask_indices(img.height, img.width);
                Ok(idx.into_iter().map(|i| img.data[i]).collect())
            }
            Operator::HdrClip { scale, lo, hi } => {
                Ok(img.data.iter().map(|&v| (scale * v).clamp(*lo, *hi)).collect())
            }
            Operator::FeatureCosine { dim, .. } => {
                let npix = img.pixels();
                let m = self.feature_matrix(npix);
                let mut v = vec![0.0; *dim];
                for (row, slot) in v.iter_mut().enumerate() {
                    *slot = m[row * npix..(row + 1) * npix]
                        .iter()
                        .zip(&img.data)
                        .map(|(a, b)| a * b)
                        .sum();
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid(
                        "feature vector has zero norm; cosine features are undefined",
                    ));
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            }
        }
    }

    /// Pull a measurement-space gradient back to image space: the transpose
    /// of the Jacobian at `img`. For linear operators this never reads the
    /// image content.
    pub fn vjp(&self, img: &Image, upstream: &[f64]) -> Result<Image> {
        let out_len = self.output_len(img.height, img.width)?;
        if upstream.len() != out_len {
            return Err(Error::invalid(format!(
                "upstream gradient has {} entries, operator output has {out_len}",
                upstream.len()
            )));
        }
        let (h, w) = (img.height, img.width);
        let mut grad = Image::zeros(h, w);
        match self {
            Operator::Identity => {
                grad.data.copy_from_slice(upstream);
            }
            Operator::Downsample { factor } => {
                let f = *factor;
                let ow = w / f;
                let area = (f * f) as f64;
                for (o, &u) in upstream.iter().enumerate() {
                    let orow = o / ow;
                    let ocol = o % ow;
                    for dr in 0..f {
                        for dc in 0..f {
                            let v = grad.get(orow * f + dr, ocol * f + dc) + u / area;
                            grad.set(orow * f + dr, ocol * f + dc, v);
                        }
                    }
                }
            }
            Operator::GaussianBlur { .. } | Operator::ConvKernel { .. } => {
                let kernel = self.conv_kernel()?.expect("conv operators carry a kernel");
                let (hr, hc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
                // Transpose of the forward gather: scatter each output's
                // kernel taps back onto the (reflected) input pixels.
                for r in 0..h as isize {
                    for c in 0..w as isize {
                        let u = upstream[r as usize * w + c as usize];
                        for kr in 0..kernel.rows as isize {
                            for kc in 0..kernel.cols as isize {
                                let ir = reflect(r + kr - hr, h);
                                let ic = reflect(c + kc - hc, w);
                                let v = grad.get(ir, ic)
                                    + kernel.get(kr as usize, kc as usize) * u;
                                grad.set(ir, ic, v);
                            }
                        }
                    }
                }
            }
            Operator::PixelMask { .. } => {
                for (i, &u) in self.mask_indices(h, w).iter().zip(upstream) {
                    grad.data[*i] = u;
                }
            }
            Operator::HdrClip { scale, lo, hi } => {
                for (g, (&x, &u)) in grad.data.iter_mut().zip(img.data.iter().zip(upstream)) {
                    let pre = scale * x;
                    if pre > *lo && pre < *hi {
                        *g = scale * u;
                    }
                }
            }
            Operator::FeatureCosine { dim, .. } => {
                let npix = img.pixels();
                let m = self.feature_matrix(npix);
                let mut v = vec![0.0; *dim];
                for (row, slot) in v.iter_mut().enumerate() {
                    *slot = m[row * npix..(row + 1) * npix]
                        .iter()
                        .zip(&img.data)
                        .map(|(a, b)| a * b)
                        .sum();
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid(
                        "feature vector has zero norm; cosine features are undefined",
                    ));
                }
                let f: Vec<f64> = v.iter().map(|x| x / norm).collect();
                let dot: f64 = f.iter().zip(upstream).map(|(a, b)| a * b).sum();
                // d(v/|v|)^T u = (u - f <f, u>) / |v|, then through M^T.
                let gv: Vec<f64> = upstream
                    .iter()
                    .zip(&f)
                    .map(|(&u, &fi)| (u - fi * dot) / norm)
                    .collect();
                for (row, &g) in gv.iter().enumerate() {
                    for (p, &mv) in m[row * npix..(row + 1) * npix].iter().enumerate() {
                        grad.data[p] += mv * g;
                    }
                }
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Sum of absolute residuals; subgradient uses sign(0) = 0.
    L1,
    /// Half the sum of squared residuals.
    L2,
    /// 1 - <measurement, y/|y|>; intended for normalized feature operators.
    Cosine,
}

/// A measurement problem: operator, noise level, the stored observation, the
/// data-fit loss, and the weights of the optimizer's loss terms.
#[derive(Debug, Clone)]
pub struct MeasurementSpec {
    pub op: Operator,
    /// Observation noise standard deviation (>= 0; > 0 for likelihoods).
    pub sigma: f64,
    /// The stored observation, once set.
    pub y: Option<Vec<f64>>,
    pub loss: LossKind,
    /// Weight on the data-fit term. Zero turns measurements off entirely.
    pub lambda_data: f64,
    /// Weight on the perceptual (feature-space) term.
    pub lambda_perceptual: f64,
    /// Seed and size of the perceptual feature map.
    pub perceptual_seed: u64,
    pub perceptual_dim: usize,
    /// Weight on the prior-preservation term.
    pub lambda_prior: f64,
    /// Additive constant on the total loss; equivalent to scaling the
    /// measurement likelihood by a positive constant, so it must never change
    /// gradients or sampler decisions.
    pub loss_offset: f64,
}

impl MeasurementSpec {
    pub fn new(op: Operator, sigma: f64, loss: LossKind) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(MeasurementSpec {
            op,
            sigma,
            y: None,
            loss,
            lambda_data: 1.0,
            lambda_perceptual: 0.0,
            perceptual_seed: 0,
            perceptual_dim: 16,
            lambda_prior: 0.0,
            loss_offset: 0.0,
        })
    }

    pub fn with_observation(mut self, y: Vec<f64>) -> Self {
        self.y = Some(y);
        self
    }

    pub fn apply(&self, img: &Image) -> Result<Vec<f64>> {
        self.op.apply(img)
    }

    /// Apply the operator and add Gaussian noise of standard deviation sigma.
    pub fn observe(&self, img: &Image, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut m = self.op.apply(img)?;
        if self.sigma > 0.0 {
            for v in m.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += self.sigma * n;
            }
        }
        Ok(m)
    }

    fn observation(&self, len: usize) -> Result<&[f64]> {
        let y = self
            .y
            .as_ref()
            .ok_or_else(|| {
                Error::MissingObservation("no observation attached; use with_observation".into())
            })?;
        if y.len() != len {
            return Err(Error::invalid(format!(
                "observation has {} entries, operator output has {len}",
                y.len()
            )));
        }
        Ok(y)
    }

    /// Data-fit loss and its gradient with respect to the image.
    pub fn data_loss(&self, img: &Image) -> Result<(f64, Image)> {
        let m = self.op.apply(img)?;
        let y = self.observation(m.len())?;
        let (loss, g_m) = match self.loss {
            LossKind::L1 => {
                let mut loss = 0.0;
                let g = m
                    .iter()
                    .zip(y)
                    .map(|(&a, &b)| {
                        let r = b - a;
                        loss += r.abs();
                        // dL/da = -sign(b - a), with sign(0) = 0.
                        if r > 0.0 {
                            -1.0
                        } else if r < 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f64>>();
                (loss, g)
            }
            LossKind::L2 => {
                let mut loss = 0.0;
                let g = m
                    .iter()
                    .zip(y)
                    .map(|(&a, &b)| {
                        let r = b - a;
                        loss += 0.5 * r * r;
                        -r
                    })
                    .collect::<Vec<f64>>();
                (loss, g)
            }
            LossKind::Cosine => {
                let ynorm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if ynorm == 0.0 {
                    return Err(Error::invalid("cosine loss against a zero observation"));
                }
                let yhat: Vec<f64> = y.iter().map(|v| v / ynorm).collect();
                let dot: f64 = m.iter().zip(&yhat).map(|(a, b)| a * b).sum();
                (1.0 - dot, yhat.iter().map(|&v| -v).collect())
            }
        };
        let grad = self.op.vjp(img, &g_m)?;
        Ok((loss, grad))
    }

    /// Gaussian measurement log-likelihood -|y - A(img)|^2 / (2 sigma^2),
    /// up to the sigma-dependent normalizer.
    pub fn log_likelihood(&self, img: &Image) -> Result<f64> {
        if self.sigma <= 0.0 {
            return Err(Error::invalid(
                "log likelihood needs a strictly positive sigma",
            ));
        }
        let m = self.op.apply(img)?;
        let y = self.observation(m.len())?;
        let r2: f64 = m.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(-r2 / (2.0 * self.sigma * self.sigma))
    }

    /// L2 norm of the residual y - A(img); the headline run metric.
    pub fn residual_norm(&self, img: &Image) -> Result<f64> {
        let m = self.op.apply(img)?;
        let y = self.observation(m.len())?;
        Ok(m.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    /// Normalized feature vector of a reference image, for use as a cosine
    /// target. Only meaningful for the feature operator.
    pub fn style_target(&self, reference: &Image) -> Result<Vec<f64>> {
        match self.op {
            Operator::FeatureCosine { .. } => self.op.apply(reference),
            _ => Err(Error::invalid(
                "style targets require the cosine feature operator",
            )),
        }
    }
}
