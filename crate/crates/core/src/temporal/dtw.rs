//! Dynamic time warping with 0/1 local cost.

use super::TemporalError;

/// Minimal accumulated cost over all monotone alignments of `a` and `b`,
/// computed with the full dynamic program (no warping band).
pub fn dtw_distance<T: PartialEq>(a: &[T], b: &[T]) -> Result<usize, TemporalError> {
    if a.is_empty() || b.is_empty() {
        return Err(TemporalError::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![usize::MAX; m + 1];
    let mut cur = vec![usize::MAX; m + 1];
    prev[0] = 0;
    for x in a {
        cur[0] = usize::MAX;
        for (j, y) in b.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = best + usize::from(x != y);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `1 - dtw / max(|a|, |b|)`, clamped to `[0, 1]`.
pub fn sequence_similarity<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, TemporalError> {
    let d = dtw_distance(a, b)? as f64;
    let len = a.len().max(b.len()) as f64;
    Ok((1.0 - d / len).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(dtw_distance(&["A", "B", "C"], &["A", "B", "C"]).unwrap(), 0);
        assert_eq!(dtw_distance(&["A", "B", "C"], &["A", "C"]).unwrap(), 1);
        assert_eq!(dtw_distance(&["A"], &["B"]).unwrap(), 1);
        assert!((sequence_similarity(&["A", "B", "C"], &["A", "C"]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(sequence_similarity(&[1, 2, 3, 4, 5], &[6, 7, 8, 9, 10]).unwrap(), 0.0);
        assert!(matches!(dtw_distance::<u8>(&[], &[1]), Err(TemporalError::EmptySequence)));
    }

    #[test]
    fn warping_absorbs_repeats() {
        assert_eq!(dtw_distance(&[1, 1, 1, 2], &[1, 2, 2]).unwrap(), 0);
    }
}
