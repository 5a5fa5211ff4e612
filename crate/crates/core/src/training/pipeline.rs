use rand::seq::SliceRandom;
use rand::Rng;

use super::{lr_schedule, optimizer_step, EmaState, OptimizerState, TrainConfig};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::nn::stack_fields;
use crate::real::Real;
use crate::rng::{derive_seed, substream};
use crate::src::{SrcConfig, SrcModel};
use crate::tokenfield::{add_noise, compute_channel_stats, normalize, ChannelStats, NoiseSpec, TokenField};

const TAG_INIT: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_LABEL: u64 = 4;

/// One row of the per-step training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean per-example log-determinant (0 for the compressor stage).
    pub logdet_mean: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Deterministic example order for one epoch.
fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut substream(seed, &[TAG_ORDER, epoch as u64]));
    order
}

fn uniform_shape<T: Real>(fields: &[TokenField<T>]) -> Result<(usize, usize)> {
    let first = fields.first().ok_or(Error::NoData)?;
    let shape = first.shape();
    if let Some(f) = fields.iter().find(|f| f.shape() != shape) {
        return Err(Error::shape(format!("dataset mixes {:?} and {:?}", shape, f.shape())));
    }
    Ok(shape)
}

fn noise_seed(seed: u64, step: usize, index: usize) -> u64 {
    derive_seed(seed, &[TAG_NOISE, step as u64, index as u64])
}

/// Trains a freshly initialized compressor.
pub fn train_src<T: Real>(
    dataset: &[TokenField<T>],
    rae_stats: &ChannelStats<T>,
    config: SrcConfig,
    train: &TrainConfig,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<SrcModel<T>> {
    let model = SrcModel::new(config, derive_seed(train.seed, &[TAG_INIT]))?;
    train_src_from(model, dataset, rae_stats, train, log)
}

/// Continues training `model`: inputs are `normalize(raw + noise)`, targets
/// the clean `normalize(raw)`, loss the mean squared reconstruction error.
pub fn train_src_from<T: Real>(
    mut model: SrcModel<T>,
    dataset: &[TokenField<T>],
    rae_stats: &ChannelStats<T>,
    train: &TrainConfig,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<SrcModel<T>> {
    train.validate()?;
    let (seq, channels) = uniform_shape(dataset)?;
    if channels != model.config().n {
        return Err(Error::shape(format!("dataset has {channels} channels, compressor expects {}", model.config().n)));
    }
    let targets: Vec<TokenField<T>> = dataset.iter().map(|f| normalize(f, rae_stats)).collect::<Result<_>>()?;
    let per_epoch = train.steps_per_epoch(dataset.len());
    let total = per_epoch * train.epochs;
    let hp = train.optimizer();
    let mut state = OptimizerState::new(model.params());
    let mut step = 0;
    for epoch in 0..train.epochs {
        for batch in epoch_order(dataset.len(), train.seed, epoch).chunks(train.batch_size) {
            step += 1;
            let inputs: Vec<TokenField<T>> = batch
                .iter()
                .map(|&i| normalize(&add_noise(&dataset[i], train.noise, noise_seed(train.seed, step, i))?, rae_stats))
                .collect::<Result<_>>()?;
            let input_refs: Vec<&TokenField<T>> = inputs.iter().collect();
            let target_refs: Vec<&TokenField<T>> = batch.iter().map(|&i| &targets[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::new(model.params());
                let l =
                    model.reconstruction_loss_graph(&mut g, stack_fields(&input_refs), stack_fields(&target_refs), seq);
                (g.value(l).data[0].as_f64(), g.backward(l))
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let lr = lr_schedule(step, total, train);
            let grad_norm = optimizer_step(model.params_mut(), &grads, &mut state, &hp, lr).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteGradient(step),
                other => other,
            })?;
            log(&MetricsRow { step, lr, loss, logdet_mean: 0.0, grad_norm });
        }
    }
    Ok(model)
}

/// How raw dataset fields become the compact fields the flow models.
#[derive(Clone, Copy, Debug)]
pub enum CompactPath<'a, T: Real> {
    /// Raw fields are modeled directly (noise still applies).
    Direct,
    /// `normalize₂(encode(normalize(raw + noise)))`.
    Compressed { src: &'a SrcModel<T>, rae_stats: &'a ChannelStats<T>, compact_stats: &'a ChannelStats<T> },
}

impl<T: Real> CompactPath<'_, T> {
    /// Maps raw fields to compact fields; `seeds[i]` drives the noise of
    /// field `i`.
    pub fn compact(&self, raws: &[&TokenField<T>], noise: NoiseSpec, seeds: &[u64]) -> Result<Vec<TokenField<T>>> {
        assert_eq!(raws.len(), seeds.len());
        let noisy: Vec<TokenField<T>> =
            raws.iter().zip(seeds).map(|(f, &s)| add_noise(f, noise, s)).collect::<Result<_>>()?;
        match self {
            CompactPath::Direct => Ok(noisy),
            CompactPath::Compressed { src, rae_stats, compact_stats } => {
                let normed: Vec<TokenField<T>> =
                    noisy.iter().map(|f| normalize(f, rae_stats)).collect::<Result<_>>()?;
                let refs: Vec<&TokenField<T>> = normed.iter().collect();
                src.encode_batch(&refs)?.iter().map(|f| normalize(f, compact_stats)).collect()
            }
        }
    }
}

/// Channel statistics of compressor outputs over the (noised, normalized)
/// dataset.
pub fn compute_compact_stats<T: Real>(
    dataset: &[TokenField<T>],
    src: &SrcModel<T>,
    rae_stats: &ChannelStats<T>,
    noise: NoiseSpec,
    seed: u64,
) -> Result<ChannelStats<T>> {
    if dataset.is_empty() {
        return Err(Error::NoData);
    }
    let mut encoded = Vec::with_capacity(dataset.len());
    for (c, chunk) in dataset.chunks(256).enumerate() {
        let noisy: Vec<TokenField<T>> = chunk
            .iter()
            .enumerate()
            .map(|(i, f)| {
                normalize(&add_noise(f, noise, derive_seed(seed, &[TAG_NOISE, (c * 256 + i) as u64]))?, rae_stats)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&TokenField<T>> = noisy.iter().collect();
        encoded.extend(src.encode_batch(&refs)?);
    }
    compute_channel_stats(&encoded)
}

/// Training examples for the flow stage.
#[derive(Clone, Copy, Debug)]
pub struct FlowData<'a, T> {
    pub fields: &'a [TokenField<T>],
    /// Class ids; `None` trains an unconditional model.
    pub labels: Option<&'a [u32]>,
}

/// Maximum-likelihood training of a flow on compact fields. Returns the raw
/// parameters and their EMA.
pub fn train_flow<T: Real>(
    data: FlowData<'_, T>,
    path: &CompactPath<'_, T>,
    config: FlowConfig,
    train: &TrainConfig,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<(FlowModel<T>, EmaState<T>)> {
    train.validate()?;
    uniform_shape(data.fields)?;
    if let Some(labels) = data.labels {
        if labels.len() != data.fields.len() {
            return Err(Error::shape("one label per example required"));
        }
    }
    let mut model = FlowModel::new(config, derive_seed(train.seed, &[TAG_INIT]))?;
    let labels: Vec<usize> = match data.labels {
        Some(l) => model.label_indices(&l.iter().map(|&c| Some(c)).collect::<Vec<_>>())?,
        None => vec![model.config().num_classes; data.fields.len()],
    };
    let null = model.config().num_classes;
    let drop_p = model.config().label_drop_p;
    let mut ema = EmaState::new(model.params(), train.ema_decay)?;
    let per_epoch = train.steps_per_epoch(data.fields.len());
    let total = per_epoch * train.epochs;
    let hp = train.optimizer();
    let mut state = OptimizerState::new(model.params());
    let mut step = 0;
    for epoch in 0..train.epochs {
        for batch in epoch_order(data.fields.len(), train.seed, epoch).chunks(train.batch_size) {
            step += 1;
            let raws: Vec<&TokenField<T>> = batch.iter().map(|&i| &data.fields[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|&i| noise_seed(train.seed, step, i)).collect();
            let compact = path.compact(&raws, train.noise, &seeds)?;
            let mut r = substream(train.seed, &[TAG_LABEL, step as u64]);
            let batch_labels: Vec<usize> =
                batch.iter().map(|&i| if r.random::<f64>() < drop_p { null } else { labels[i] }).collect();
            let refs: Vec<&TokenField<T>> = compact.iter().collect();
            let (loss, logdet_mean, grads) = {
                let mut g = Graph::new(model.params());
                let (l, trace) = model.loss_graph(&mut g, &refs, &batch_labels);
                let alpha_sum: f64 =
                    trace.alphas.iter().map(|&a| g.value(a).data.iter().map(|v| v.as_f64()).sum::<f64>()).sum();
                (g.value(l).data[0].as_f64(), -alpha_sum / batch.len() as f64, g.backward(l))
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let lr = lr_schedule(step, total, train);
            let grad_norm = optimizer_step(model.params_mut(), &grads, &mut state, &hp, lr).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteGradient(step),
                other => other,
            })?;
            ema.update(model.params())?;
            log(&MetricsRow { step, lr, loss, logdet_mean, grad_norm });
        }
    }
    Ok((model, ema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tokenfield::standard_normal_field;

    fn tiny_src(n: usize, d: usize) -> SrcConfig {
        SrcConfig { n, d, blocks: 1, width: n, heads: 2, mlp_ratio: 2, tokens: 4 }
    }

    fn gaussian_set(count: usize, n_tok: usize, c: usize, seed: u64) -> Vec<TokenField<f32>> {
        let mut r = rng::stream(seed);
        (0..count).map(|_| standard_normal_field(n_tok, c, &mut r)).collect()
    }

    #[test]
    fn zero_epochs_with_selector_init_is_lossless() {
        let data = gaussian_set(8, 4, 4, 1);
        let stats = compute_channel_stats(&data).unwrap();
        let mut init = SrcModel::new(tiny_src(4, 4), 0).unwrap();
        init.set_selector_projections();
        let train = TrainConfig { epochs: 0, cosine_start_epoch: 0, warmup_epochs: 0, ..TrainConfig::src_desk() };
        let m = train_src_from(init, &data, &stats, &train, &mut |_| {}).unwrap();
        let z: Vec<TokenField<f32>> = data.iter().map(|f| normalize(f, &stats).unwrap()).collect();
        let refs: Vec<&TokenField<f32>> = z.iter().collect();
        let back = m.round_trip_batch(&refs).unwrap();
        assert_eq!(crate::src::mean_reconstruction_error(&z, &back).unwrap(), 0.0);
    }

    #[test]
    fn src_training_is_deterministic_and_reduces_loss() {
        let data = gaussian_set(32, 4, 4, 2);
        let stats = compute_channel_stats(&data).unwrap();
        let train = TrainConfig { epochs: 4, batch_size: 8, lr: 3e-3, seed: 5, ..TrainConfig::src_desk() };
        let mut losses = Vec::new();
        let a = train_src(&data, &stats, tiny_src(4, 2), &train, &mut |m| losses.push(m.loss)).unwrap();
        let b = train_src(&data, &stats, tiny_src(4, 2), &train, &mut |_| {}).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(losses.len(), 16);
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn compact_stats_standardize_outputs() {
        let data = gaussian_set(64, 4, 4, 3);
        let stats = compute_channel_stats(&data).unwrap();
        let src = SrcModel::new(tiny_src(4, 2), 9).unwrap();
        let cs = compute_compact_stats(&data, &src, &stats, NoiseSpec::Constant(0.4), 4).unwrap();
        let again = compute_compact_stats(&data, &src, &stats, NoiseSpec::Constant(0.4), 4).unwrap();
        assert_eq!(cs, again);
        let path = CompactPath::Compressed { src: &src, rae_stats: &stats, compact_stats: &cs };
        let refs: Vec<&TokenField<f32>> = data.iter().collect();
        let seeds: Vec<u64> = (0..64).map(|i| derive_seed(4, &[TAG_NOISE, i])).collect();
        let zc = path.compact(&refs, NoiseSpec::Constant(0.4), &seeds).unwrap();
        let s = compute_channel_stats(&zc).unwrap();
        for j in 0..2 {
            assert!(s.mu()[j].abs() < 1e-3);
            assert!((s.sigma()[j] - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn identity_compressor_on_unit_gaussians_has_unit_stats() {
        let data: Vec<TokenField<f64>> = {
            let mut r = rng::stream(7);
            (0..500).map(|_| standard_normal_field(4, 3, &mut r)).collect()
        };
        let cfg = SrcConfig { heads: 1, ..tiny_src(3, 3) };
        let mut src = SrcModel::<f64>::new(cfg, 0).unwrap();
        src.set_selector_projections();
        let cs = compute_compact_stats(&data, &src, &ChannelStats::identity(3), NoiseSpec::None, 0).unwrap();
        for j in 0..3 {
            assert!(cs.mu()[j].abs() < 0.1);
            assert!((cs.sigma()[j] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn flow_training_is_deterministic_and_learns() {
        let data = gaussian_set(64, 2, 2, 4);
        let scaled: Vec<TokenField<f32>> = data
            .iter()
            .map(|f| TokenField::new(2, 2, f.as_slice().iter().map(|v| 0.3 * v + 1.0).collect()).unwrap())
            .collect();
        let labels: Vec<u32> = (0..64).map(|i| i % 2).collect();
        let cfg =
            FlowConfig { width: 8, heads: 2, mlp_ratio: 2, deep_layers: 1, blocks: 2, ..FlowConfig::desk(2, 2, 2) };
        let train = TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-2,
            cosine_start_epoch: 5,
            noise: NoiseSpec::None,
            seed: 3,
            ..TrainConfig::flow_desk()
        };
        let fd = FlowData { fields: &scaled, labels: Some(&labels) };
        let mut losses = Vec::new();
        let (a, ema_a) =
            train_flow(fd, &CompactPath::Direct, cfg.clone(), &train, &mut |m| losses.push(m.loss)).unwrap();
        let (b, ema_b) = train_flow(fd, &CompactPath::Direct, cfg, &train, &mut |_| {}).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ema_a, ema_b);
        assert!(ema_a.shadow.is_finite());
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let data = gaussian_set(4, 2, 3, 1);
        let stats = compute_channel_stats(&data).unwrap();
        let train = TrainConfig::src_desk();
        assert!(train_src(&data, &stats, tiny_src(4, 2), &train, &mut |_| {}).is_err());
        assert!(train_src::<f32>(&[], &stats, tiny_src(4, 2), &train, &mut |_| {}).is_err());
    }
}
