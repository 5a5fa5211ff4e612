use super::{train_flow, CompactPath, FlowData, MetricsRow, TrainConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::real::Real;
use crate::rng::derive_seed;
use crate::tokenfield::{NoiseSpec, TokenField};

const TAG_EVAL: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReportRow {
    /// `constant` or `per_sample`.
    pub schedule: &'static str,
    pub train_noise: NoiseSpec,
    /// Mean full NLL per dimension on the held-out set.
    pub test_nll_per_dim: f64,
    pub final_train_loss: f64,
}

/// Constant vs per-example noise training under one budget, both evaluated
/// on held-out data corrupted with the constant level.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReport {
    pub eval_noise: NoiseSpec,
    pub rows: Vec<NoiseReportRow>,
    /// Constant-noise test NLL is no worse than per-example-noise test NLL.
    pub constant_wins: bool,
}

/// Trains one flow per noise schedule with identical config, seed and step
/// budget, then scores both on `test` noised at `constant_sigma`.
#[allow(clippy::too_many_arguments)]
pub fn noise_schedule_report<T: Real>(
    train: FlowData<'_, T>,
    test: FlowData<'_, T>,
    path: &CompactPath<'_, T>,
    flow_config: &FlowConfig,
    train_config: &TrainConfig,
    constant_sigma: f64,
    per_sample_max: f64,
    log: &mut dyn FnMut(&'static str, &MetricsRow),
) -> Result<NoiseReport> {
    if test.fields.is_empty() {
        return Err(Error::NoData);
    }
    let eval_noise = NoiseSpec::Constant(constant_sigma);
    let schedules = [("constant", eval_noise), ("per_sample", NoiseSpec::PerSampleUniform(per_sample_max))];
    let raws: Vec<&TokenField<T>> = test.fields.iter().collect();
    let seeds: Vec<u64> = (0..raws.len()).map(|i| derive_seed(train_config.seed, &[TAG_EVAL, i as u64])).collect();
    let compact = path.compact(&raws, eval_noise, &seeds)?;
    let compact_refs: Vec<&TokenField<T>> = compact.iter().collect();
    let labels: Vec<Option<u32>> = match test.labels {
        Some(l) => l.iter().map(|&c| Some(c)).collect(),
        None => vec![None; raws.len()],
    };
    let mut rows = Vec::new();
    for (name, noise) in schedules {
        noise.validate()?;
        let cfg = TrainConfig { noise, ..train_config.clone() };
        let mut last = f64::NAN;
        let (model, _) = train_flow(train, path, flow_config.clone(), &cfg, &mut |m| {
            last = m.loss;
            log(name, m);
        })?;
        let nll = model.full_nll_per_dim(&compact_refs, &labels)?;
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        rows.push(NoiseReportRow {
            schedule: name,
            train_noise: noise,
            test_nll_per_dim: mean,
            final_train_loss: last,
        });
    }
    let constant_wins = rows[0].test_nll_per_dim <= rows[1].test_nll_per_dim;
    Ok(NoiseReport { eval_noise, rows, constant_wins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tokenfield::standard_normal_field;

    #[test]
    fn report_has_both_rows_and_is_deterministic() {
        let mut r = rng::stream(11);
        let fields: Vec<TokenField<f32>> = (0..48).map(|_| standard_normal_field(1, 2, &mut r)).collect();
        let (tr, te) = fields.split_at(32);
        let cfg =
            FlowConfig { width: 8, heads: 2, mlp_ratio: 2, deep_layers: 1, blocks: 1, ..FlowConfig::desk(1, 2, 1) };
        let train = TrainConfig { epochs: 2, batch_size: 16, cosine_start_epoch: 1, ..TrainConfig::flow_desk() };
        let run = || {
            noise_schedule_report(
                FlowData { fields: tr, labels: None },
                FlowData { fields: te, labels: None },
                &CompactPath::Direct,
                &cfg,
                &train,
                0.4,
                0.8,
                &mut |_, _| {},
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].schedule, "constant");
        assert!(a.rows.iter().all(|r| r.test_nll_per_dim.is_finite()));
        assert_eq!(a.constant_wins, a.rows[0].test_nll_per_dim <= a.rows[1].test_nll_per_dim);
    }
}
