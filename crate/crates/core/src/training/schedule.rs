use super::TrainConfig;

/// Learning rate at optimizer step `step` of `total_steps`: linear warmup
/// over `warmup_epochs`, flat until `cosine_start_epoch`, then a half-cosine
/// down to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 || config.epochs == 0 {
        return config.lr;
    }
    let per_epoch = total_steps as f64 / config.epochs as f64;
    let warmup = config.warmup_epochs as f64 * per_epoch;
    let cos_start = config.cosine_start_epoch as f64 * per_epoch;
    let s = step.min(total_steps) as f64;
    let total = total_steps as f64;
    if s < warmup {
        return config.lr * s / warmup;
    }
    if s < cos_start || cos_start >= total {
        return config.lr;
    }
    let progress = (s - cos_start) / (total - cos_start);
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 10, lr: 1e-3, warmup_epochs: 2, cosine_start_epoch: 4, ..TrainConfig::flow_desk() }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        let total = 1000;
        assert_eq!(lr_schedule(0, total, &c), 0.0);
        assert_eq!(lr_schedule(100, total, &c), 0.5e-3);
        assert_eq!(lr_schedule(200, total, &c), 1e-3);
        assert_eq!(lr_schedule(300, total, &c), 1e-3);
        assert!((lr_schedule(700, total, &c) - 0.5e-3).abs() < 1e-12);
        assert!(lr_schedule(total, total, &c).abs() < 1e-12);
    }

    #[test]
    fn warmup_then_immediate_cosine() {
        let c =
            TrainConfig { epochs: 16, warmup_epochs: 1, cosine_start_epoch: 1, lr: 2e-4, ..TrainConfig::src_desk() };
        let total = 1600;
        assert_eq!(lr_schedule(100, total, &c), 2e-4);
        assert!((lr_schedule(850, total, &c) - 1e-4).abs() < 1e-12);
        let lrs: Vec<f64> = (100..=total).map(|s| lr_schedule(s, total, &c)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
