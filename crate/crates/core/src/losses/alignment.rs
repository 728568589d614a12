use serde::Serialize;

use crate::error::{Error, Result};

/// Synthetic token-to-frame schedule for the streaming AED objective.
///
/// `timesteps[u-1]` is the number of encoder frames (1-based horizon) visible
/// when predicting token `u`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FastAlignment {
    pub timesteps: Vec<usize>,
    pub lambda: f64,
}

// Guards floor() against representation error when u·T'/(U·λ) is integral.
const FLOOR_SLACK: f64 = 1e-9;

/// `t_u = min(T', max(1, floor(u·T' / (U·λ))))` for `u = 1..=U`.
///
/// `λ = 1` is the even alignment; larger `λ` emits earlier, and any
/// `λ ≤ 1/U` pins every token to the final frame.
pub fn fast_alignment(frames: usize, tokens: usize, lambda: f64) -> Result<FastAlignment> {
    if frames == 0 || tokens == 0 {
        return Err(Error::Input(format!(
            "alignment needs at least one frame and one token (got T'={frames}, U={tokens})"
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("alignment speedup must be positive, got {lambda}")));
    }
    let denom = tokens as f64 * lambda;
    let timesteps = (1..=tokens)
        .map(|u| {
            let raw = ((u * frames) as f64 / denom + FLOOR_SLACK).floor();
            if raw >= frames as f64 {
                frames
            } else {
                (raw as usize).max(1)
            }
        })
        .collect();
    Ok(FastAlignment { timesteps, lambda })
}

/// Offline alignment: every token sees the whole utterance.
pub fn offline_alignment(frames: usize, tokens: usize) -> FastAlignment {
    FastAlignment {
        timesteps: vec![frames; tokens],
        lambda: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_alignment() {
        assert_eq!(fast_alignment(10, 5, 1.0).unwrap().timesteps, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn doubled_speed() {
        assert_eq!(fast_alignment(10, 5, 2.0).unwrap().timesteps, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn slow_alignment_is_offline() {
        assert_eq!(fast_alignment(10, 5, 0.1).unwrap().timesteps, vec![10; 5]);
        assert_eq!(fast_alignment(7, 3, 1.0 / 3.0).unwrap().timesteps, vec![7; 3]);
    }

    #[test]
    fn floor_at_first_frame() {
        assert_eq!(fast_alignment(2, 6, 4.0).unwrap().timesteps, vec![1; 6]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(fast_alignment(0, 1, 1.0).is_err());
        assert!(fast_alignment(1, 0, 1.0).is_err());
        assert!(fast_alignment(4, 2, 0.0).is_err());
        assert!(fast_alignment(4, 2, f64::NAN).is_err());
    }
}
