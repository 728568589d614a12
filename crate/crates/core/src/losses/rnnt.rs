//! Transducer loss via forward-backward over the `t × (u+1)` lattice.
//!
//! Indices are 0-based: `alpha[t][u]` is the log-mass of all partial paths
//! that reach frame `t` having emitted `y_1..y_u`. Emitting `y_{u+1}` at
//! `(t, u)` moves to `(t, u+1)`; a blank at `(t, u)` moves to `(t+1, u)`. The
//! path terminates with a mandatory blank at `(T'-1, U)`.

use crate::error::{Error, Result};
use crate::numeric::{logsumexp2, Graph, Tensor, Var};

/// Longest target sequence accepted by the loss.
pub const MAX_TARGET_LEN: usize = 4096;

/// Log-probability lattice plus its forward scores.
#[derive(Debug, Clone)]
pub struct Lattice {
    frames: usize,
    labels: usize,
    classes: usize,
    blank: usize,
    targets: Vec<usize>,
    log_probs: Vec<f64>,
    alpha: Vec<f64>,
}

impl Lattice {
    /// Builds the lattice from log-softmaxed scores shaped `[t, u+1, classes]`.
    pub fn from_log_probs(log_probs: &Tensor, targets: &[usize], blank: usize) -> Result<Self> {
        let shape = log_probs.shape();
        if shape.len() != 3 {
            return Err(Error::shape("rnnt", format!("lattice must be 3-D, got {shape:?}")));
        }
        let (frames, cols, classes) = (shape[0], shape[1], shape[2]);
        if targets.len() > MAX_TARGET_LEN {
            return Err(Error::TargetTooLong {
                len: targets.len(),
                max: MAX_TARGET_LEN,
            });
        }
        if cols != targets.len() + 1 {
            return Err(Error::shape(
                "rnnt",
                format!("lattice has {cols} label positions for {} targets", targets.len()),
            ));
        }
        if blank >= classes {
            return Err(Error::shape("rnnt", format!("blank {blank} >= {classes} classes")));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= classes || y == blank) {
            return Err(Error::Input(format!("target token {bad} is blank or out of range")));
        }
        if !log_probs.is_finite() {
            return Err(Error::NonFinite("rnnt lattice"));
        }
        let mut lattice = Self {
            frames,
            labels: targets.len(),
            classes,
            blank,
            targets: targets.to_vec(),
            log_probs: log_probs.data().to_vec(),
            alpha: Vec::new(),
        };
        lattice.alpha = lattice.forward();
        Ok(lattice)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    #[inline]
    fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * (self.labels + 1) + u) * self.classes + k]
    }

    #[inline]
    fn blank_lp(&self, t: usize, u: usize) -> f64 {
        self.lp(t, u, self.blank)
    }

    #[inline]
    fn emit_lp(&self, t: usize, u: usize) -> f64 {
        self.lp(t, u, self.targets[u])
    }

    fn forward(&self) -> Vec<f64> {
        let (nt, nu) = (self.frames, self.labels + 1);
        let mut alpha = vec![f64::NEG_INFINITY; nt * nu];
        for t in 0..nt {
            for u in 0..nu {
                if t == 0 && u == 0 {
                    alpha[0] = 0.0;
                    continue;
                }
                let from_emit = if u > 0 {
                    alpha[t * nu + u - 1] + self.emit_lp(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                let from_blank = if t > 0 {
                    alpha[(t - 1) * nu + u] + self.blank_lp(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                alpha[t * nu + u] = logsumexp2(from_emit, from_blank);
            }
        }
        alpha
    }

    fn backward(&self) -> Vec<f64> {
        let (nt, nu) = (self.frames, self.labels + 1);
        let mut beta = vec![f64::NEG_INFINITY; nt * nu];
        for t in (0..nt).rev() {
            for u in (0..nu).rev() {
                if t == nt - 1 && u == nu - 1 {
                    beta[t * nu + u] = self.blank_lp(t, u);
                    continue;
                }
                let via_blank = if t + 1 < nt {
                    beta[(t + 1) * nu + u] + self.blank_lp(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                let via_emit = if u + 1 < nu {
                    beta[t * nu + u + 1] + self.emit_lp(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                beta[t * nu + u] = logsumexp2(via_blank, via_emit);
            }
        }
        beta
    }

    /// Forward log-score grid, row-major `[t][u]`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Total log-likelihood of the target over all alignments.
    pub fn log_likelihood(&self) -> f64 {
        let (nt, nu) = (self.frames, self.labels + 1);
        self.alpha[nt * nu - 1] + self.blank_lp(nt - 1, nu - 1)
    }

    /// Negative log-likelihood and its gradient with respect to the
    /// log-probability lattice.
    pub fn loss_and_grad(&self) -> (f64, Vec<f64>) {
        let (nt, nu) = (self.frames, self.labels + 1);
        let beta = self.backward();
        let log_z = self.log_likelihood();
        let mut grad = vec![0.0; self.log_probs.len()];
        for t in 0..nt {
            for u in 0..nu {
                let a = self.alpha[t * nu + u];
                let base = (t * nu + u) * self.classes;
                let next_blank = if t + 1 < nt {
                    beta[(t + 1) * nu + u]
                } else if u + 1 == nu {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                let occupancy = a + self.blank_lp(t, u) + next_blank - log_z;
                grad[base + self.blank] = -occupancy.exp();
                if u + 1 < nu {
                    let occ = a + self.emit_lp(t, u) + beta[t * nu + u + 1] - log_z;
                    grad[base + self.targets[u]] -= occ.exp();
                }
            }
        }
        (-log_z, grad)
    }

    /// Most probable single alignment: the frame index at which each target
    /// token is emitted.
    pub fn best_path(&self) -> Vec<usize> {
        let (nt, nu) = (self.frames, self.labels + 1);
        let mut score = vec![f64::NEG_INFINITY; nt * nu];
        let mut came_by_emit = vec![false; nt * nu];
        for t in 0..nt {
            for u in 0..nu {
                if t == 0 && u == 0 {
                    score[0] = 0.0;
                    continue;
                }
                let e = if u > 0 {
                    score[t * nu + u - 1] + self.emit_lp(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                let b = if t > 0 {
                    score[(t - 1) * nu + u] + self.blank_lp(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                came_by_emit[t * nu + u] = e > b;
                score[t * nu + u] = e.max(b);
            }
        }
        let mut emits = vec![0; self.labels];
        let (mut t, mut u) = (nt - 1, nu - 1);
        while t > 0 || u > 0 {
            if came_by_emit[t * nu + u] {
                emits[u - 1] = t;
                u -= 1;
            } else {
                t -= 1;
            }
        }
        emits
    }
}

/// Loss from raw joiner scores shaped `[t, u+1, classes]`; returns the loss
/// and its gradient with respect to those scores.
pub fn rnnt_loss(logits: &Tensor, targets: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("rnnt logits"));
    }
    let mut g = Graph::new();
    let z = g.param(logits.clone())?;
    let lp = g.log_softmax(z)?;
    let loss = g.rnnt(lp, targets, blank)?;
    let mut grads = g.backward(loss)?;
    let grad = grads.take(z).unwrap_or_else(|| vec![0.0; logits.len()]);
    Ok((g.value(loss).item(), Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Same recursion expressed through scalar graph ops, so the gradient comes
/// from generic reverse-mode differentiation instead of the beta pass.
pub fn rnnt_loss_autodiff(g: &mut Graph, log_probs: Var, targets: &[usize], blank: usize) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 3 || shape[1] != targets.len() + 1 {
        return Err(Error::shape("rnnt", format!("lattice {shape:?} for {} targets", targets.len())));
    }
    let (nt, nu, k) = (shape[0], shape[1], shape[2]);
    let flat = |t: usize, u: usize, c: usize| (t * nu + u) * k + c;
    let mut alpha: Vec<Option<Var>> = vec![None; nt * nu];
    for t in 0..nt {
        for u in 0..nu {
            if t == 0 && u == 0 {
                continue;
            }
            let mut terms = Vec::with_capacity(2);
            if u > 0 {
                let lp = g.pick(log_probs, &[flat(t, u - 1, targets[u - 1])])?;
                terms.push(match alpha[t * nu + u - 1] {
                    Some(prev) => g.add(prev, lp)?,
                    None => lp,
                });
            }
            if t > 0 {
                let lp = g.pick(log_probs, &[flat(t - 1, u, blank)])?;
                terms.push(match alpha[(t - 1) * nu + u] {
                    Some(prev) => g.add(prev, lp)?,
                    None => lp,
                });
            }
            alpha[t * nu + u] = Some(match terms[..] {
                [a, b] => g.logsumexp2(a, b)?,
                [a] => a,
                _ => unreachable!(),
            });
        }
    }
    let last = g.pick(log_probs, &[flat(nt - 1, nu - 1, blank)])?;
    let total = match alpha[nt * nu - 1] {
        Some(a) => g.add(a, last)?,
        None => last,
    };
    g.scale(total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, u: usize, k: usize) -> Tensor {
        Tensor::zeros(&[t, u + 1, k])
    }

    #[test]
    fn single_mandatory_blank() {
        let logits = Tensor::new(vec![1, 1, 3], vec![0.2, -1.0, 0.7]).unwrap();
        let lp = crate::numeric::log_softmax(&logits);
        let (loss, _) = rnnt_loss(&logits, &[], 2).unwrap();
        assert!((loss + lp.data()[2]).abs() < 1e-12);
    }

    #[test]
    fn two_paths_uniform() {
        let k = 4usize;
        let (loss, _) = rnnt_loss(&uniform(2, 1, k), &[1], 3).unwrap();
        let expected = 3.0 * (k as f64).ln() - 2f64.ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero_for_logits() {
        let data: Vec<f64> = (0..3 * 3 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let logits = Tensor::new(vec![3, 3, 4], data).unwrap();
        let (_, grad) = rnnt_loss(&logits, &[0, 2], 3).unwrap();
        for row in grad.data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_targets_and_shapes() {
        assert!(rnnt_loss(&uniform(2, 1, 4), &[3], 3).is_err());
        assert!(rnnt_loss(&uniform(2, 2, 4), &[1], 3).is_err());
        let bad = Tensor::new(vec![1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(rnnt_loss(&bad, &[], 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn guards_degenerate_lengths() {
        let targets = vec![0; MAX_TARGET_LEN + 1];
        let t = Tensor::zeros(&[1, 1, 2]);
        let err = Lattice::from_log_probs(&t, &targets, 1).unwrap_err();
        assert!(matches!(err, Error::TargetTooLong { .. }));
    }

    #[test]
    fn best_path_follows_dominant_emissions() {
        // Emitting is overwhelmingly likely at frame 1 only.
        let (nt, nu, k) = (3, 2, 3);
        let mut data = vec![0.0; nt * nu * k];
        for t in 0..nt {
            for u in 0..nu {
                let base = (t * nu + u) * k;
                data[base + 2] = 5.0;
                if t == 1 && u == 0 {
                    data[base + 1] = 10.0;
                }
            }
        }
        let lp = crate::numeric::log_softmax(&Tensor::new(vec![nt, nu, k], data).unwrap());
        let lattice = Lattice::from_log_probs(&lp, &[1], 2).unwrap();
        assert_eq!(lattice.best_path(), vec![1]);
    }
}
