use super::TrainConfig;

/// Tri-stage learning rate: linear ramp from 0, hold at the peak, then cosine
/// decay to `lr_peak · final_lr_ratio` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1) as f64;
    let t = (step as f64).min(total);
    let peak = cfg.lr_peak;
    let ramp_end = cfg.ramp_frac * total;
    let hold_end = (cfg.ramp_frac + cfg.hold_frac) * total;
    if t < ramp_end {
        peak * t / ramp_end
    } else if t <= hold_end || hold_end >= total {
        peak
    } else {
        let floor = peak * cfg.final_lr_ratio;
        let progress = (t - hold_end) / (total - hold_end);
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
