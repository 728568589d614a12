use std::collections::HashMap;

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length; an empty reference counts as
/// length one.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    edit_distance(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// Total edits over total reference tokens.
pub fn corpus_wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> f64 {
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    let words: usize = refs.iter().map(Vec::len).sum();
    edits as f64 / words.max(1) as f64
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0..100 scale with up to 4-grams and a brevity penalty.
///
/// Precisions with zero matches use exponential smoothing: the k-th such
/// order counts `1 / 2^k` matches.
pub fn bleu<T: Eq + std::hash::Hash + Clone>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> f64 {
    const ORDER: usize = 4;
    let mut matches = [0usize; ORDER];
    let mut totals = [0usize; ORDER];
    let (mut ref_len, mut hyp_len) = (0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    for n in 0..ORDER {
        if totals[n] == 0 {
            return 0.0;
        }
        let p = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / ORDER as f64).exp()
}

/// Fraction of positions where both sequences hold the same token, over
/// the reference length.
pub fn token_accuracy<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    let hits = reference.iter().zip(hypothesis).filter(|(a, b)| a == b).count();
    hits as f64 / reference.len().max(1) as f64
}
