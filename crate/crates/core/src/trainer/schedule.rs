use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`. Steps past the end stay at 0.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps || total_steps <= warmup_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    (base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Warmup length for a fraction of the run, always below `total_steps`.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    ((total_steps as f64 * fraction).round() as usize).min(total_steps.saturating_sub(1))
}
