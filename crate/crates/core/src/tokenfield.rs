//! Token fields, channel statistics, noise injection and PCA spectra.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

/// Lower bound applied to every per-channel standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// An `N×c` matrix of spatial tokens (row = token, column = channel).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenField<T> {
    n_tokens: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> TokenField<T> {
    /// Builds a field from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(n_tokens: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if n_tokens == 0 || channels == 0 {
            return Err(Error::shape(format!("empty field {n_tokens}x{channels}")));
        }
        if data.len() != n_tokens * channels {
            return Err(Error::shape(format!(
                "field {}x{} needs {} values, got {}",
                n_tokens,
                channels,
                n_tokens * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow("token field"));
        }
        Ok(Self { n_tokens, channels, data })
    }

    pub fn zeros(n_tokens: usize, channels: usize) -> Self {
        assert!(n_tokens > 0 && channels > 0, "empty token field");
        Self { n_tokens, channels, data: vec![T::zero(); n_tokens * channels] }
    }

    pub fn from_fn(n_tokens: usize, channels: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(n_tokens > 0 && channels > 0, "empty token field");
        let mut data = Vec::with_capacity(n_tokens * channels);
        for i in 0..n_tokens {
            for j in 0..channels {
                data.push(f(i, j));
            }
        }
        Self { n_tokens, channels, data }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_tokens, self.channels)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, token: usize, channel: usize) -> T {
        self.data[token * self.channels + channel]
    }

    pub fn token(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn cast<U: Real>(&self) -> TokenField<U> {
        TokenField {
            n_tokens: self.n_tokens,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Returns the same field with token order reversed.
    pub fn reversed_tokens(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..self.n_tokens).rev() {
            data.extend_from_slice(self.token(i));
        }
        Self { data, ..*self }
    }

    pub(crate) fn from_parts_unchecked(n_tokens: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), n_tokens * channels);
        Self { n_tokens, channels, data }
    }

    pub(crate) fn check_finite(self, ctx: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NumericalOverflow(ctx))
        }
    }
}

/// Per-channel mean and (strictly positive) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    mu: Vec<T>,
    sigma: Vec<T>,
}

impl<T: Real> ChannelStats<T> {
    /// Sigma entries below [`SIGMA_FLOOR`] are clamped up to it.
    pub fn new(mu: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape(format!("stats: {} means vs {} deviations", mu.len(), sigma.len())));
        }
        if mu.is_empty() {
            return Err(Error::NoData);
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow("channel stats"));
        }
        let floor = T::lit(SIGMA_FLOOR);
        let sigma = sigma.into_iter().map(|s| s.max(floor)).collect();
        Ok(Self { mu, sigma })
    }

    /// Zero mean, unit deviation.
    pub fn identity(channels: usize) -> Self {
        Self { mu: vec![T::zero(); channels], sigma: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn cast<U: Real>(&self) -> ChannelStats<U> {
        ChannelStats {
            mu: self.mu.iter().map(|v| U::lit(v.as_f64())).collect(),
            sigma: self.sigma.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Noise-injection policy applied to raw tokens before normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Same standard deviation for every example.
    Constant(f64),
    /// Each example draws its own deviation from `U(0, sigma_max)`.
    PerSampleUniform(f64),
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Constant(s) if s.is_finite() && s >= 0.0 => Ok(()),
            NoiseSpec::PerSampleUniform(s) if s.is_finite() && s > 0.0 => Ok(()),
            other => Err(Error::InvalidNoise(format!("{other:?}"))),
        }
    }
}

/// Sorted PCA eigenvalues with the cumulative explained-variance curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub cumulative_explained: Vec<f64>,
}

impl SpectrumReport {
    /// Builds the cumulative curve from raw eigenvalues (any order).
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Self {
        for v in eigenvalues.iter_mut() {
            // round-off can push null directions slightly negative
            *v = v.max(0.0);
        }
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
        let total: f64 = eigenvalues.iter().sum();
        let mut acc = 0.0;
        let cumulative_explained = eigenvalues
            .iter()
            .map(|v| {
                acc += v;
                if total > 0.0 {
                    (acc / total).min(1.0)
                } else {
                    1.0
                }
            })
            .collect();
        Self { eigenvalues, cumulative_explained }
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

fn check_channels<T: Real>(dataset: &[TokenField<T>]) -> Result<usize> {
    let first = dataset.first().ok_or(Error::NoData)?;
    let c = first.channels();
    if let Some(bad) = dataset.iter().find(|f| f.channels() != c) {
        return Err(Error::shape(format!("channel count {} vs {}", bad.channels(), c)));
    }
    Ok(c)
}

/// Pooled per-channel mean and population standard deviation over every
/// token of every field.
pub fn compute_channel_stats<T: Real>(dataset: &[TokenField<T>]) -> Result<ChannelStats<T>> {
    let c = check_channels(dataset)?;
    let total: usize = dataset.iter().map(|f| f.n_tokens()).sum();
    if total < 2 {
        return Err(Error::InsufficientData { needed: 2, got: total });
    }
    // Welford in f64, fixed traversal order
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    let mut count = 0.0f64;
    for field in dataset {
        for i in 0..field.n_tokens() {
            count += 1.0;
            for (j, &v) in field.token(i).iter().enumerate() {
                let x = v.as_f64();
                let delta = x - mean[j];
                mean[j] += delta / count;
                m2[j] += delta * (x - mean[j]);
            }
        }
    }
    let mu = mean.iter().map(|&m| T::lit(m)).collect();
    let sigma = m2.iter().map(|&s| T::lit((s / count).sqrt())).collect();
    ChannelStats::new(mu, sigma)
}

fn check_stats<T: Real>(field: &TokenField<T>, stats: &ChannelStats<T>) -> Result<()> {
    if field.channels() != stats.channels() {
        return Err(Error::shape(format!("field has {} channels, stats have {}", field.channels(), stats.channels())));
    }
    Ok(())
}

/// `(x - mu) / sigma` channel-wise.
pub fn normalize<T: Real>(field: &TokenField<T>, stats: &ChannelStats<T>) -> Result<TokenField<T>> {
    check_stats(field, stats)?;
    let c = field.channels();
    let data =
        field.as_slice().iter().enumerate().map(|(idx, &v)| (v - stats.mu[idx % c]) / stats.sigma[idx % c]).collect();
    TokenField::from_parts_unchecked(field.n_tokens(), c, data).check_finite("normalize")
}

/// `x * sigma + mu` channel-wise.
pub fn denormalize<T: Real>(field: &TokenField<T>, stats: &ChannelStats<T>) -> Result<TokenField<T>> {
    check_stats(field, stats)?;
    let c = field.channels();
    let data =
        field.as_slice().iter().enumerate().map(|(idx, &v)| v * stats.sigma[idx % c] + stats.mu[idx % c]).collect();
    TokenField::from_parts_unchecked(field.n_tokens(), c, data).check_finite("denormalize")
}

/// Adds Gaussian noise according to `spec`, deterministically in `seed`.
pub fn add_noise<T: Real>(field: &TokenField<T>, spec: NoiseSpec, seed: u64) -> Result<TokenField<T>> {
    spec.validate()?;
    let sigma = match spec {
        NoiseSpec::None => return Ok(field.clone()),
        NoiseSpec::Constant(s) => s,
        NoiseSpec::PerSampleUniform(max) => {
            let mut r = rng::substream(seed, &[0x5157]);
            Uniform::new(0.0, max).map_err(|e| Error::InvalidNoise(e.to_string()))?.sample(&mut r)
        }
    };
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidNoise(e.to_string()))?;
    let mut r = rng::substream(seed, &[0x0e75]);
    let data = field.as_slice().iter().map(|&v| v + T::lit(normal.sample(&mut r))).collect();
    Ok(TokenField::from_parts_unchecked(field.n_tokens(), field.channels(), data))
}

/// Empirical `c×c` covariance of tokens pooled over positions and fields.
pub fn pooled_covariance<T: Real>(dataset: &[TokenField<T>]) -> Result<DMatrix<f64>> {
    let c = check_channels(dataset)?;
    let total: usize = dataset.iter().map(|f| f.n_tokens()).sum();
    if total < c + 1 {
        return Err(Error::InsufficientData { needed: c + 1, got: total });
    }
    let mut mean = vec![0.0f64; c];
    for field in dataset {
        for (idx, v) in field.as_slice().iter().enumerate() {
            mean[idx % c] += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = vec![0.0f64; c];
    for field in dataset {
        for i in 0..field.n_tokens() {
            for (j, v) in field.token(i).iter().enumerate() {
                centered[j] = v.as_f64() - mean[j];
            }
            for a in 0..c {
                let ca = centered[a];
                for b in a..c {
                    cov[(a, b)] += ca * centered[b];
                }
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            let v = cov[(a, b)] / total as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Eigen-spectrum of the pooled token covariance.
pub fn pca_spectrum<T: Real>(dataset: &[TokenField<T>]) -> Result<SpectrumReport> {
    let cov = pooled_covariance(dataset)?;
    let eig = SymmetricEigen::new(cov);
    Ok(SpectrumReport::from_eigenvalues(eig.eigenvalues.iter().copied().collect()))
}

/// Smallest number of leading components whose cumulative explained
/// variance reaches `threshold`.
pub fn intrinsic_dim(report: &SpectrumReport, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidThreshold(threshold));
    }
    // absorb the last-ulp error of the running sum
    let target = threshold - 1e-12;
    report.cumulative_explained.iter().position(|&c| c >= target).map(|k| k + 1).ok_or(Error::NoData)
}

/// Draws an `N×c` field of i.i.d. standard normals.
pub fn standard_normal_field<T: Real>(n_tokens: usize, channels: usize, r: &mut impl Rng) -> TokenField<T> {
    TokenField::from_fn(n_tokens, channels, |_, _| T::lit(r.sample(rand_distr::StandardNormal)))
}
