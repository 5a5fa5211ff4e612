use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::substream;
use crate::tokenfield::TokenField;

/// Standard deviation of every mixture component.
pub const MIXTURE_STD: f64 = 0.1;

/// Token fields with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub fields: Vec<TokenField<T>>,
    pub labels: Option<Vec<u32>>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// `(N, c)` of the first field.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.fields.first().map(TokenField::shape)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |&m| m as usize + 1)
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset { fields: self.fields.iter().map(TokenField::cast).collect(), labels: self.labels.clone() }
    }

    /// First `at` examples and the rest.
    pub fn split(&self, at: usize) -> (Dataset<T>, Dataset<T>) {
        let at = at.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            fields: self.fields[r.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[r].to_vec()),
        };
        (part(0..at), part(at..self.len()))
    }
}

/// Orthonormal `rank×n` rows from Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rank: usize, n: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while rows.len() < rank {
        let mut v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        // two passes keep the basis orthogonal to round-off
        for _ in 0..2 {
            for b in &rows {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// Tokens `a·B + ε` with coefficients `a ~ N(0, diag(spectrum))`, a fixed
/// orthonormal basis `B` (rank×n, derived from `seed`) and isotropic ambient
/// noise of standard deviation `noise_std`.
pub fn gen_low_rank<T: Real>(
    examples: usize,
    tokens: usize,
    n: usize,
    rank: usize,
    spectrum: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if rank == 0 || rank > n || spectrum.len() != rank {
        return Err(Error::InvalidSpectrum(format!("rank {rank} with {} variances in {n} channels", spectrum.len())));
    }
    if spectrum.iter().any(|v| !(v.is_finite() && *v > 0.0)) || spectrum.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidSpectrum("variances must be positive and descending".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::InvalidNoise(format!("noise_std {noise_std}")));
    }
    if tokens == 0 {
        return Err(Error::shape("tokens must be positive"));
    }
    let basis = orthonormal_rows(rank, n, &mut substream(seed, &[0xba5e]));
    let scales: Vec<f64> = spectrum.iter().map(|v| v.sqrt()).collect();
    let mut r = substream(seed, &[0xc0ef]);
    let mut fields = Vec::with_capacity(examples);
    for _ in 0..examples {
        let mut data = Vec::with_capacity(tokens * n);
        for _ in 0..tokens {
            let a: Vec<f64> = scales.iter().map(|s| s * r.sample::<f64, _>(StandardNormal)).collect();
            for j in 0..n {
                let clean: f64 = a.iter().zip(&basis).map(|(ai, b)| ai * b[j]).sum();
                let eps = if noise_std > 0.0 { noise_std * r.sample::<f64, _>(StandardNormal) } else { 0.0 };
                data.push(T::lit(clean + eps));
            }
        }
        fields.push(TokenField::new(tokens, n, data)?);
    }
    Ok(Dataset { fields, labels: None })
}

/// Component means, indexed `[class][component]`, evenly spaced on the unit
/// circle (a single component sits at the origin).
pub fn mixture_means(classes: usize, components_per_class: usize) -> Vec<Vec<[f64; 2]>> {
    let total = classes * components_per_class;
    (0..classes)
        .map(|c| {
            (0..components_per_class)
                .map(|m| {
                    if total == 1 {
                        return [0.0, 0.0];
                    }
                    let t = TAU * (c * components_per_class + m) as f64 / total as f64;
                    [t.cos(), t.sin()]
                })
                .collect()
        })
        .collect()
}

fn mixture_point(means: &[[f64; 2]], r: &mut impl Rng) -> [f64; 2] {
    let m = means[r.random_range(0..means.len())];
    [m[0] + MIXTURE_STD * r.sample::<f64, _>(StandardNormal), m[1] + MIXTURE_STD * r.sample::<f64, _>(StandardNormal)]
}

/// Labeled 2D mixture (`N = 1`, `c = 2`): each example picks a class
/// uniformly, then one of its components uniformly.
pub fn gen_class_mixture<T: Real>(
    examples: usize,
    classes: usize,
    components_per_class: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes == 0 || components_per_class == 0 {
        return Err(Error::Config("mixture needs at least one class and component".into()));
    }
    let means = mixture_means(classes, components_per_class);
    let mut r = substream(seed, &[0x313]);
    let mut fields = Vec::with_capacity(examples);
    let mut labels = Vec::with_capacity(examples);
    for _ in 0..examples {
        let c = r.random_range(0..classes);
        let p = mixture_point(&means[c], &mut r);
        fields.push(TokenField::new(1, 2, vec![T::lit(p[0]), T::lit(p[1])])?);
        labels.push(c as u32);
    }
    Ok(Dataset { fields, labels: Some(labels) })
}

/// Ground-truth draws from one class of the mixture.
pub fn sample_mixture_class(
    count: usize,
    class: usize,
    classes: usize,
    components_per_class: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    if class >= classes || components_per_class == 0 {
        return Err(Error::UnknownLabel(class as u32));
    }
    let means = mixture_means(classes, components_per_class);
    let mut r = substream(seed, &[0x314, class as u64]);
    Ok((0..count).map(|_| mixture_point(&means[class], &mut r)).collect())
}
