use super::alignment::FastAlignment;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

/// Decoder logits `[rows×classes]` computed against the first `horizon`
/// encoder frames. Row `u` predicts target token `u+1`.
#[derive(Debug, Clone, Copy)]
pub struct HorizonLogits {
    pub horizon: usize,
    pub logits: Var,
}

/// Label-smoothed cross-entropy over the decoder outputs, averaged per token.
///
/// Token `u` is scored with the logits of the smallest available horizon that
/// covers `align.timesteps[u-1]`. `per_horizon` must be sorted by horizon.
pub fn aed_ce_loss(
    g: &mut Graph,
    per_horizon: &[HorizonLogits],
    targets: &[usize],
    align: &FastAlignment,
    label_smoothing: f64,
) -> Result<Var> {
    if align.timesteps.len() != targets.len() {
        return Err(Error::Input(format!(
            "alignment covers {} tokens but the target has {}",
            align.timesteps.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Input("AED loss needs at least one target token".into()));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::Config(format!("label smoothing {label_smoothing} outside [0, 1)")));
    }
    let mut rows = Vec::with_capacity(targets.len());
    for (u, &t) in align.timesteps.iter().enumerate() {
        let chosen = per_horizon
            .iter()
            .find(|h| h.horizon >= t)
            .ok_or_else(|| Error::Input(format!("no decoder pass covers frame {t}")))?;
        rows.push(g.gather_rows(chosen.logits, &[u])?);
    }
    let logits = g.concat_rows(&rows)?;
    smoothed_nll(g, logits, targets, label_smoothing)
}

/// `mean_u [(1-ε)·(-log p(y_u)) + ε·mean_k(-log p(k))]` over `[U×K]` logits.
pub fn smoothed_nll(g: &mut Graph, logits: Var, targets: &[usize], label_smoothing: f64) -> Result<Var> {
    let classes = g.value(logits).cols();
    let n = g.value(logits).rows();
    if n != targets.len() {
        return Err(Error::shape("smoothed_nll", format!("{n} rows for {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("target {bad} >= {classes} classes")));
    }
    let lp = g.log_softmax(logits)?;
    let index: Vec<usize> = targets.iter().enumerate().map(|(u, &y)| u * classes + y).collect();
    let picked = g.pick(lp, &index)?;
    let nll = g.sum(picked)?;
    let mut total = g.scale(nll, -(1.0 - label_smoothing) / n as f64)?;
    if label_smoothing > 0.0 {
        let all = g.sum(lp)?;
        let smooth = g.scale(all, -label_smoothing / (classes * n) as f64)?;
        total = g.add(total, smooth)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::alignment::{fast_alignment, offline_alignment};
    use crate::numeric::Tensor;

    fn logits(g: &mut Graph, rows: usize, k: usize, f: impl Fn(usize, usize) -> f64) -> Var {
        let data = (0..rows * k).map(|i| f(i / k, i % k)).collect();
        g.input(Tensor::new(vec![rows, k], data).unwrap()).unwrap()
    }

    #[test]
    fn uniform_logits_cost_log_classes() {
        let mut g = Graph::new();
        let z = logits(&mut g, 3, 33, |_, _| 0.25);
        let h = [HorizonLogits { horizon: 6, logits: z }];
        for eps in [0.0, 0.1] {
            let loss = aed_ce_loss(&mut g, &h, &[1, 2, 3], &offline_alignment(6, 3), eps).unwrap();
            assert!((g.value(loss).item() - 33f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut g = Graph::new();
        let targets = [4usize, 1];
        let z = logits(&mut g, 2, 6, |u, k| if k == targets[u] { 60.0 } else { 0.0 });
        let h = [HorizonLogits { horizon: 2, logits: z }];
        let loss = aed_ce_loss(&mut g, &h, &targets, &offline_alignment(2, 2), 0.0).unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn picks_the_covering_horizon() {
        let mut g = Graph::new();
        // Early horizon is uniform, late horizon is confident; with the even
        // alignment the first token is scored early and the second late.
        let early = logits(&mut g, 2, 4, |_, _| 0.0);
        let late = logits(&mut g, 2, 4, |u, k| if k == u { 50.0 } else { 0.0 });
        let h = [
            HorizonLogits { horizon: 2, logits: early },
            HorizonLogits { horizon: 4, logits: late },
        ];
        let align = fast_alignment(4, 2, 1.0).unwrap();
        let loss = aed_ce_loss(&mut g, &h, &[0, 1], &align, 0.0).unwrap();
        assert!((g.value(loss).item() - 4f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_length_must_match() {
        let mut g = Graph::new();
        let z = logits(&mut g, 2, 4, |_, _| 0.0);
        let h = [HorizonLogits { horizon: 4, logits: z }];
        let err = aed_ce_loss(&mut g, &h, &[0, 1], &offline_alignment(4, 3), 0.0);
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
