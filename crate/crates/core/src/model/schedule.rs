/// Warm-up plus exponential decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Multiplicative decay per epoch after warm-up.
    pub decay: f64,
}

/// Linear ramp `lr·(epoch+1)/warmup` during warm-up, then
/// `lr·decay^(epoch-warmup)`.
pub fn lr_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.lr * cfg.decay.powi((epoch - cfg.warmup_epochs) as i32)
    }
}
