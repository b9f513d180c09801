//! Learning-rate schedule: linear warmup to the peak, then half-cosine decay
//! to zero at `total_steps`.

use std::f64::consts::PI;

pub fn lr_at(step: u64, peak_lr: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(0, 1e-3, 2500, 100_000), 0.0);
        assert!((lr_at(2500, 1e-3, 2500, 100_000) - 1e-3).abs() < 1e-18);
        assert!(lr_at(100_000, 1e-3, 2500, 100_000).abs() < 1e-18);
        assert!((lr_at(1250, 1e-3, 2500, 100_000) - 5e-4).abs() < 1e-15);
        let mid = 2500 + (100_000 - 2500) / 2;
        assert!((lr_at(mid, 1e-3, 2500, 100_000) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_warmup_and_nonnegative() {
        let (w, t) = (100, 1000);
        let before = lr_at(w - 1, 1.0, w, t);
        let at = lr_at(w, 1.0, w, t);
        let after = lr_at(w + 1, 1.0, w, t);
        assert!((at - before).abs() <= 1.0 / w as f64 + 1e-12);
        assert!((at - after).abs() < 1e-4);
        assert!((0..=t + 5).all(|s| lr_at(s, 1.0, w, t) >= 0.0));
    }

    #[test]
    fn no_warmup_and_degenerate_totals() {
        assert_eq!(lr_at(0, 0.5, 0, 10), 0.5);
        assert_eq!(lr_at(0, 0.5, 0, 0), 0.0);
        assert_eq!(lr_at(3, 0.5, 3, 3), 0.0);
    }
}
