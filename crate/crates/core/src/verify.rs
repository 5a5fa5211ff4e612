//! Independent oracles: dense finite-difference Jacobians, gradient checks,
//! round-trip and analytic-likelihood checks, histogram distances.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamSet};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, GuidanceSpec, Label};
use crate::nn::stack_fields;
use crate::real::Real;
use crate::rng::substream;
use crate::src::{SrcConfig, SrcModel};
use crate::tokenfield::{standard_normal_field, TokenField};

/// `½ ln(2πe)`, the per-dimension entropy of a standard normal.
pub const GAUSSIAN_ENTROPY: f64 = 1.418_938_533_204_672_7;

/// Largest `N·d` the dense Jacobian oracle accepts.
pub const MAX_ORACLE_DIMS: usize = 16;

/// Largest parameter count `gradcheck` accepts.
pub const MAX_GRADCHECK_PARAMS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub runtime_secs: f64,
}

impl VerifyReport {
    pub const CSV_HEADER: &'static str = "check,passed,measured,tolerance,runtime_secs";

    fn timed(name: impl Into<String>, start: Instant, measured: f64, tolerance: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            passed: passed && measured.is_finite(),
            measured,
            tolerance,
            runtime_secs: start.elapsed().as_secs_f64(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{:e},{:.3}", self.name, self.passed, self.measured, self.tolerance, self.runtime_secs)
    }
}

/// `ln|det A|` of a row-major `n×n` matrix via Gaussian elimination with
/// partial pivoting. `None` when a pivot vanishes.
pub fn log_abs_det(mut a: Vec<f64>, n: usize) -> Option<f64> {
    assert_eq!(a.len(), n * n);
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        let p = a[piv * n + col];
        if p == 0.0 || !p.is_finite() {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
        }
        acc += p.abs().ln();
        for i in col + 1..n {
            let f = a[i * n + col] / p;
            if f != 0.0 {
                for j in col..n {
                    a[i * n + j] -= f * a[col * n + j];
                }
            }
        }
    }
    Some(acc)
}

/// `ln|det ∂u/∂y|` of the flow at `field`, from a dense central-difference
/// Jacobian. Only the prior-space output of the forward map is used.
pub fn jacobian_logdet_oracle(model: &FlowModel<f64>, field: &TokenField<f64>, label: Label) -> Result<f64> {
    let (n, d) = field.shape();
    let dims = n * d;
    if dims > MAX_ORACLE_DIMS {
        return Err(Error::shape(format!("dense oracle limited to {MAX_ORACLE_DIMS} dims, got {dims}")));
    }
    let x = field.as_slice();
    let steps: Vec<f64> = x.iter().map(|v| 1e-5 * v.abs().max(1.0)).collect();
    let mut probes = Vec::with_capacity(2 * dims);
    for j in 0..dims {
        for sign in [1.0, -1.0] {
            let mut p = x.to_vec();
            p[j] += sign * steps[j];
            probes.push(TokenField::new(n, d, p)?);
        }
    }
    let refs: Vec<&TokenField<f64>> = probes.iter().collect();
    let outs = model.forward_batch(&refs, &vec![label; refs.len()])?;
    // jac[r][j] = ∂u_r / ∂x_j
    let mut jac = vec![0.0; dims * dims];
    for j in 0..dims {
        let (plus, minus) = (outs[2 * j].0.as_slice(), outs[2 * j + 1].0.as_slice());
        for r in 0..dims {
            jac[r * dims + j] = (plus[r] - minus[r]) / (2.0 * steps[j]);
        }
    }
    match log_abs_det(jac, dims) {
        Some(l) if l >= 1e-300f64.ln() => Ok(l),
        _ => Err(Error::DegenerateTransport),
    }
}

/// A scalar loss over a flat parameter vector.
pub trait Objective {
    fn loss(&self, theta: &[f64]) -> f64;
    fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>);
}

/// `½‖θ‖²`.
pub struct QuadraticObjective;

impl Objective for QuadraticObjective {
    fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * theta.iter().map(|v| v * v).sum::<f64>()
    }

    fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (self.loss(theta), theta.to_vec())
    }
}

/// Per-dimension mean `L_NF` of a flow on fixed fields and label slots.
pub struct FlowObjective {
    pub model: FlowModel<f64>,
    pub fields: Vec<TokenField<f64>>,
    pub labels: Vec<Label>,
}

impl FlowObjective {
    fn eval(&self, theta: &[f64], grad: bool) -> (f64, Option<Vec<f64>>) {
        let mut params = self.model.params().clone();
        params.set_flat(theta);
        let model = FlowModel::from_params(self.model.config().clone(), &params).expect("same config");
        let idx = model.label_indices(&self.labels).expect("labels in range");
        let refs: Vec<&TokenField<f64>> = self.fields.iter().collect();
        let mut g = Graph::new(&params);
        let (l, _) = model.loss_graph(&mut g, &refs, &idx);
        let value = g.value(l).data[0];
        (value, grad.then(|| g.backward(l).to_flat()))
    }
}

impl Objective for FlowObjective {
    fn loss(&self, theta: &[f64]) -> f64 {
        self.eval(theta, false).0
    }

    fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (l, g) = self.eval(theta, true);
        (l, g.unwrap_or_default())
    }
}

/// Reconstruction loss of a compressor on fixed input/target pairs.
pub struct SrcObjective {
    pub model: SrcModel<f64>,
    pub inputs: Vec<TokenField<f64>>,
    pub targets: Vec<TokenField<f64>>,
}

impl SrcObjective {
    fn eval(&self, theta: &[f64], grad: bool) -> (f64, Option<Vec<f64>>) {
        let mut params: ParamSet<f64> = self.model.params().clone();
        params.set_flat(theta);
        let model = SrcModel::from_params(self.model.config().clone(), &params).expect("same config");
        let seq = self.inputs[0].n_tokens();
        let inputs: Vec<&TokenField<f64>> = self.inputs.iter().collect();
        let targets: Vec<&TokenField<f64>> = self.targets.iter().collect();
        let mut g = Graph::new(&params);
        let l = model.reconstruction_loss_graph(&mut g, stack_fields(&inputs), stack_fields(&targets), seq);
        let value = g.value(l).data[0];
        (value, grad.then(|| g.backward(l).to_flat()))
    }
}

impl Objective for SrcObjective {
    fn loss(&self, theta: &[f64]) -> f64 {
        self.eval(theta, false).0
    }

    fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (l, g) = self.eval(theta, true);
        (l, g.unwrap_or_default())
    }
}

/// Relative error with the denominator floored at 1e-4, so gradients that
/// vanish exactly (e.g. attention key biases) are compared in absolute terms
/// against the finite-difference round-off.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Maximum relative error between the analytic gradient and central finite
/// differences (step `1e-5·max(1, |θ_i|)`) over every coordinate of `theta`.
pub fn gradcheck(name: &str, objective: &dyn Objective, theta: &[f64], tolerance: f64) -> VerifyReport {
    let start = Instant::now();
    if theta.len() > MAX_GRADCHECK_PARAMS {
        return VerifyReport::timed(name, start, f64::INFINITY, tolerance, false);
    }
    let (_, analytic) = objective.loss_and_grad(theta);
    if analytic.len() != theta.len() {
        return VerifyReport::timed(name, start, f64::INFINITY, tolerance, false);
    }
    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        probe[i] = theta[i] + h;
        let up = objective.loss(&probe);
        probe[i] = theta[i] - h;
        let down = objective.loss(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], fd);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    VerifyReport::timed(name, start, worst, tolerance, worst < tolerance)
}

fn random_label(num_classes: usize, r: &mut impl Rng) -> Label {
    if num_classes == 0 {
        None
    } else {
        Some(r.random_range(0..num_classes as u32))
    }
}

/// Max-abs error of `flow_inverse(flow_forward(y))` over `n_trials` random
/// standard-normal inputs (labels drawn uniformly when the model is
/// conditional).
pub fn check_invertibility<T: Real>(model: &FlowModel<T>, n_trials: usize, tolerance: f64, seed: u64) -> VerifyReport {
    let start = Instant::now();
    let name = format!("invertibility_{}bit", T::BITS);
    let run = || -> Result<f64> {
        if n_trials == 0 {
            return Err(Error::Config("n_trials must be positive".into()));
        }
        let (n, d) = (model.config().tokens, model.config().channels);
        let mut r = substream(seed, &[0x1e7]);
        let ys: Vec<TokenField<T>> = (0..n_trials).map(|_| standard_normal_field(n, d, &mut r)).collect();
        let labels: Vec<Label> = (0..n_trials).map(|_| random_label(model.config().num_classes, &mut r)).collect();
        let refs: Vec<&TokenField<T>> = ys.iter().collect();
        let us: Vec<TokenField<T>> = model.forward_batch(&refs, &labels)?.into_iter().map(|(u, _)| u).collect();
        let urefs: Vec<&TokenField<T>> = us.iter().collect();
        let back = model.inverse_batch(&urefs, &labels, GuidanceSpec::NONE)?;
        Ok(ys.iter().zip(&back).map(|(a, b)| a.max_abs_diff(b).as_f64()).fold(0.0, f64::max))
    };
    let measured = run().unwrap_or(f64::INFINITY);
    VerifyReport::timed(name, start, measured, tolerance, measured <= tolerance)
}

/// Mean full NLL per dimension of `n_samples` draws from `N(0, data_std²)`
/// (unconditional slot), compared with `½ln(2πe)`.
pub fn gaussian_nll_check_with<T: Real>(
    model: &FlowModel<T>,
    n_samples: usize,
    data_std: f64,
    tolerance: f64,
    seed: u64,
) -> VerifyReport {
    let start = Instant::now();
    let run = || -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::NoData);
        }
        let (n, d) = (model.config().tokens, model.config().channels);
        let mut r = substream(seed, &[0x9a55]);
        let mut nll = 0.0;
        let mut done = 0;
        while done < n_samples {
            let len = 1024.min(n_samples - done);
            let ys: Vec<TokenField<T>> = (0..len)
                .map(|_| {
                    let v = (0..n * d).map(|_| T::lit(data_std * r.sample::<f64, _>(StandardNormal))).collect();
                    TokenField::new(n, d, v)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&TokenField<T>> = ys.iter().collect();
            nll += model.full_nll_per_dim(&refs, &vec![None; len])?.iter().sum::<f64>();
            done += len;
        }
        Ok(nll / n_samples as f64)
    };
    let measured = run().unwrap_or(f64::INFINITY);
    let passed = (measured - GAUSSIAN_ENTROPY).abs() <= tolerance;
    VerifyReport::timed(format!("gaussian_nll_{}bit", T::BITS), start, measured, tolerance, passed)
}

/// `gaussian_nll_check_with` on standard-normal data at tolerance 0.05.
pub fn gaussian_nll_check<T: Real>(model: &FlowModel<T>, n_samples: usize, seed: u64) -> VerifyReport {
    gaussian_nll_check_with(model, n_samples, 1.0, 0.05, seed)
}

/// Axis-aligned 2D range `[lo, hi)` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range2 {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

fn histogram(points: &[[f64; 2]], bins: usize, range: Range2) -> Vec<f64> {
    // last slot collects everything outside the range
    let mut h = vec![0.0; bins * bins + 1];
    for p in points {
        let cell = |a: usize| {
            let t = (p[a] - range.lo[a]) / (range.hi[a] - range.lo[a]);
            (0.0..1.0).contains(&t).then(|| ((t * bins as f64) as usize).min(bins - 1))
        };
        match (cell(0), cell(1)) {
            (Some(i), Some(j)) => h[i * bins + j] += 1.0,
            _ => h[bins * bins] += 1.0,
        }
    }
    let total = points.len() as f64;
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Total-variation distance between the normalized `bins×bins` histograms
/// of two 2D sample sets; mass outside `range` shares one overflow bin.
pub fn histogram_tv(a: &[[f64; 2]], b: &[[f64; 2]], bins: usize, range: Range2) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoData);
    }
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    if !(0..2).all(|k| range.hi[k] > range.lo[k] && range.lo[k].is_finite() && range.hi[k].is_finite()) {
        return Err(Error::Config("empty histogram range".into()));
    }
    let (ha, hb) = (histogram(a, bins, range), histogram(b, bins, range));
    Ok(0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Largest relative disagreement between the analytic log-determinant and
/// the dense oracle over `fields`.
pub fn logdet_agreement(model: &FlowModel<f64>, fields: &[TokenField<f64>], labels: &[Label]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (f, &l) in fields.iter().zip(labels) {
        let (_, analytic) = model.flow_forward(f, l)?;
        let oracle = jacobian_logdet_oracle(model, f, l)?;
        worst = worst.max((analytic - oracle).abs() / analytic.abs().max(1.0));
    }
    Ok(worst)
}

fn logdet_report(name: &str, model: &FlowModel<f64>, trials: usize, tolerance: f64, seed: u64) -> VerifyReport {
    let start = Instant::now();
    let (n, d) = (model.config().tokens, model.config().channels);
    let mut r = substream(seed, &[0x1d]);
    let fields: Vec<TokenField<f64>> = (0..trials).map(|_| standard_normal_field(n, d, &mut r)).collect();
    let labels: Vec<Label> = (0..trials).map(|_| random_label(model.config().num_classes, &mut r)).collect();
    let measured = logdet_agreement(model, &fields, &labels).unwrap_or(f64::INFINITY);
    VerifyReport::timed(name, start, measured, tolerance, measured <= tolerance)
}

/// Tiny flow (`N=2, d=1`, one block) within the gradcheck size limit.
pub fn tiny_flow_config() -> FlowConfig {
    FlowConfig {
        blocks: 1,
        shallow_layers: 1,
        deep_layers: 1,
        width: 4,
        heads: 1,
        mlp_ratio: 2,
        channels: 1,
        tokens: 2,
        num_classes: 2,
        label_drop_p: 0.1,
        alpha_clamp: 8.0,
    }
}

/// Tiny compressor (`n=4 → d=2`, one block, three tokens).
pub fn tiny_src_config() -> SrcConfig {
    SrcConfig { n: 4, d: 2, blocks: 1, width: 4, heads: 2, mlp_ratio: 2, tokens: 3 }
}

fn perturbed(params: &ParamSet<f64>, std: f64, r: &mut impl Rng) -> Vec<f64> {
    params.to_flat().iter().map(|v| v + std * r.sample::<f64, _>(StandardNormal)).collect()
}

/// Gradient check of the flow objective on a tiny random model.
pub fn flow_gradcheck(seed: u64, tolerance: f64) -> Result<VerifyReport> {
    let model = FlowModel::<f64>::random(tiny_flow_config(), seed, 0.5)?;
    let mut r = substream(seed, &[0x96]);
    let theta = perturbed(model.params(), 0.3, &mut r);
    let fields = (0..3).map(|_| standard_normal_field(2, 1, &mut r)).collect();
    let obj = FlowObjective { model, fields, labels: vec![Some(0), Some(1), None] };
    Ok(gradcheck("gradcheck_flow", &obj, &theta, tolerance))
}

/// Gradient check of the compressor objective on a tiny random model.
pub fn src_gradcheck(seed: u64, tolerance: f64) -> Result<VerifyReport> {
    let cfg = tiny_src_config();
    let model = SrcModel::<f64>::new(cfg.clone(), seed)?;
    let mut r = substream(seed, &[0x97]);
    let theta = perturbed(model.params(), 0.3, &mut r);
    let inputs = (0..2).map(|_| standard_normal_field(cfg.tokens, cfg.n, &mut r)).collect();
    let targets = (0..2).map(|_| standard_normal_field(cfg.tokens, cfg.n, &mut r)).collect();
    let obj = SrcObjective { model, inputs, targets };
    Ok(gradcheck("gradcheck_src", &obj, &theta, tolerance))
}

/// Full oracle suite. `model` is checked for round-trip and (when small
/// enough) log-determinant exactness; `expect_gaussian` additionally scores
/// it against the analytic standard-normal likelihood. Structural checks
/// run on tiny random models derived from `seed`.
pub fn verify_suite(model: &FlowModel<f64>, expect_gaussian: bool, seed: u64) -> Result<Vec<VerifyReport>> {
    let mut out =
        vec![check_invertibility(model, 16, 1e-8, seed), check_invertibility(&model.cast::<f32>(), 16, 1e-3, seed)];
    if model.config().dims() <= MAX_ORACLE_DIMS {
        out.push(logdet_report("logdet_oracle", model, 4, 1e-4, seed));
    }
    if expect_gaussian {
        out.push(gaussian_nll_check_with(model, 10_000, 1.0, 0.02, seed));
    }
    let tiny = FlowConfig { blocks: 2, channels: 2, tokens: 3, ..tiny_flow_config() };
    let random = FlowModel::<f64>::random(tiny, seed, 0.5)?;
    out.push(logdet_report("logdet_oracle_random", &random, 4, 1e-4, seed));
    out.push(check_invertibility(&random, 32, 1e-8, seed));
    out.push(gradcheck("gradcheck_quadratic", &QuadraticObjective, &[0.3, -1.2, 2.5], 1e-10));
    out.push(flow_gradcheck(seed, 1e-4)?);
    out.push(src_gradcheck(seed, 1e-4)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small(blocks: usize, tokens: usize, channels: usize) -> FlowConfig {
        FlowConfig { blocks, tokens, channels, width: 8, heads: 2, ..tiny_flow_config() }
    }

    #[test]
    fn log_abs_det_of_known_matrices() {
        assert!((log_abs_det(vec![2.0, 0.0, 0.0, 3.0], 2).unwrap() - 6f64.ln()).abs() < 1e-15);
        // needs a row swap
        assert!((log_abs_det(vec![0.0, 1.0, 1.0, 0.0], 2).unwrap()).abs() < 1e-15);
        assert!(log_abs_det(vec![1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn oracle_on_identity_flow_is_zero() {
        let m = FlowModel::<f64>::new(small(2, 3, 2), 0).unwrap();
        let f = standard_normal_field(3, 2, &mut rng::stream(1));
        assert!(jacobian_logdet_oracle(&m, &f, Some(1)).unwrap().abs() < 1e-6);
    }

    #[test]
    fn oracle_on_constant_scale() {
        let mut m = FlowModel::<f64>::new(small(1, 1, 2), 0).unwrap();
        let ln2 = 2f64.ln();
        m.set_constant_affine(0, &[0.3, -0.1], &[ln2, ln2]);
        let f = TokenField::new(1, 2, vec![0.7, -1.1]).unwrap();
        assert!((jacobian_logdet_oracle(&m, &f, None).unwrap() + 2.0 * ln2).abs() < 1e-6);
    }

    #[test]
    fn oracle_matches_analytic_on_random_models() {
        for seed in 0..3 {
            let m = FlowModel::<f64>::random(small(3, 4, 2), seed, 0.7).unwrap();
            let f = standard_normal_field(4, 2, &mut rng::stream(seed + 10));
            let (_, analytic) = m.flow_forward(&f, Some(0)).unwrap();
            let oracle = jacobian_logdet_oracle(&m, &f, Some(0)).unwrap();
            assert!(analytic.abs() > 1e-2);
            assert!(relative_error(analytic, oracle) < 1e-4, "{analytic} vs {oracle}");
        }
    }

    #[test]
    fn oracle_rejects_large_and_singular() {
        let m = FlowModel::<f64>::new(small(1, 3, 6), 0).unwrap();
        let f = TokenField::zeros(3, 6);
        assert!(jacobian_logdet_oracle(&m, &f, None).is_err());
        let mut m = FlowModel::<f64>::new(small(1, 1, 2), 0).unwrap();
        m.set_constant_affine(0, &[0.0, 0.0], &[7.99, 7.99]);
        // scale e^-8 per dim is still regular
        assert!(jacobian_logdet_oracle(&m, &TokenField::zeros(1, 2), None).is_ok());
    }

    #[test]
    fn gradcheck_examples() {
        let q = gradcheck("q", &QuadraticObjective, &[0.5, -2.0, 3.0], 1e-10);
        assert!(q.passed, "{q:?}");
        let f = flow_gradcheck(3, 1e-4).unwrap();
        assert!(f.passed, "{f:?}");
        let s = src_gradcheck(3, 1e-4).unwrap();
        assert!(s.passed, "{s:?}");
        assert!(FlowModel::<f64>::new(tiny_flow_config(), 0).unwrap().params().num_scalars() <= MAX_GRADCHECK_PARAMS);
        assert!(SrcModel::<f64>::new(tiny_src_config(), 0).unwrap().params().num_scalars() <= MAX_GRADCHECK_PARAMS);
    }

    #[test]
    fn gradcheck_flags_a_wrong_gradient() {
        struct Wrong;
        impl Objective for Wrong {
            fn loss(&self, t: &[f64]) -> f64 {
                t.iter().map(|v| v * v * v).sum()
            }
            fn loss_and_grad(&self, t: &[f64]) -> (f64, Vec<f64>) {
                (self.loss(t), t.iter().map(|v| 2.0 * v * v).collect())
            }
        }
        assert!(!gradcheck("w", &Wrong, &[1.0, 2.0], 1e-4).passed);
    }

    #[test]
    fn invertibility_examples() {
        let zero = FlowModel::<f64>::new(small(2, 4, 2), 0).unwrap();
        assert_eq!(check_invertibility(&zero, 8, 0.0, 1).measured, 0.0);
        let rand = FlowModel::<f64>::random(small(3, 4, 2), 5, 0.7).unwrap();
        assert!(check_invertibility(&rand, 8, 1e-8, 1).passed);
        assert!(check_invertibility(&rand.cast::<f32>(), 8, 1e-3, 1).passed);
        assert!(!check_invertibility(&rand, 0, 1.0, 1).passed);
    }

    #[test]
    fn gaussian_nll_examples() {
        let m = FlowModel::<f64>::new(small(1, 2, 2), 0).unwrap();
        let r = gaussian_nll_check_with(&m, 10_000, 1.0, 0.02, 4);
        assert!(r.passed, "{r:?}");
        let wide = gaussian_nll_check_with(&m, 10_000, 2.0, 0.05, 4);
        let expected = 0.5 * (2.0 * std::f64::consts::PI).ln() + 2.0;
        assert!((wide.measured - expected).abs() < 0.05);
        assert!(!wide.passed);
    }

    #[test]
    fn histogram_tv_examples() {
        let range = Range2 { lo: [0.0, 0.0], hi: [1.0, 1.0] };
        let a: Vec<[f64; 2]> = (0..100).map(|i| [i as f64 / 100.0, 0.5]).collect();
        assert_eq!(histogram_tv(&a, &a, 8, range).unwrap(), 0.0);
        let left: Vec<[f64; 2]> = (0..50).map(|i| [0.1 + i as f64 * 1e-3, 0.2]).collect();
        let right: Vec<[f64; 2]> = (0..50).map(|i| [0.8 + i as f64 * 1e-3, 0.2]).collect();
        assert!((histogram_tv(&left, &right, 4, range).unwrap() - 1.0).abs() < 1e-12);
        // outside mass counts as its own bin
        let out = vec![[5.0, 5.0]; 10];
        assert!((histogram_tv(&left, &out, 4, range).unwrap() - 1.0).abs() < 1e-12);
        assert!(histogram_tv(&[], &a, 4, range).is_err());
        assert!(histogram_tv(&a, &a, 1, range).is_err());
    }

    #[test]
    fn suite_passes_on_a_fresh_model() {
        let m = FlowModel::<f64>::new(small(2, 4, 2), 0).unwrap();
        let reports = verify_suite(&m, true, 0).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert_eq!(r.csv_row().split(',').count(), 5);
        }
    }
}
