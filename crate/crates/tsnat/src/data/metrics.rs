//! Character error rate: unit-cost edit distance over token sequences.

use super::DataError;

/// Unit-cost Levenshtein distance between two token sequences.
pub fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by reference length. The reference must be non-empty.
pub fn cer(hyp: &[u32], reference: &[u32]) -> Result<f64, DataError> {
    if reference.is_empty() {
        return Err(DataError::EmptyReference);
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level CER: summed edit distances over summed reference lengths.
pub fn corpus_cer<'a>(
    pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>,
) -> Result<f64, DataError> {
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in pairs {
        if reference.is_empty() {
            return Err(DataError::EmptyReference);
        }
        edits += levenshtein(hyp, reference);
        ref_len += reference.len();
    }
    if ref_len == 0 {
        return Err(DataError::EmptyReference);
    }
    Ok(edits as f64 / ref_len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: recursively explore every edit script.
    fn brute_force_edits(a: &[u32], b: &[u32]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_force_edits(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_force_edits(&a[1..], b) + 1;
        let ins = brute_force_edits(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identical_sequences_have_zero_cer() {
        let s = vec![5, 6, 7];
        assert_eq!(cer(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let reference = vec![5, 6, 7, 8, 9];
        assert_eq!(cer(&[], &reference).unwrap(), 1.0);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(matches!(cer(&[5], &[]), Err(DataError::EmptyReference)));
    }

    #[test]
    fn matches_brute_force_edit_scripts() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let la = rng.gen_range(0..=6);
            let lb = rng.gen_range(1..=6);
            let a: Vec<u32> = (0..la).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u32> = (0..lb).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(levenshtein(&a, &b), brute_force_edits(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let a: Vec<u32> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u32> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..4)).collect();
            // relabel token k -> 100 + (k*7 % 4): a bijection on {0..3}
            let relabel = |s: &[u32]| -> Vec<u32> { s.iter().map(|&k| 100 + (k * 7) % 4).collect() };
            assert_eq!(
                cer(&a, &b).unwrap(),
                cer(&relabel(&a), &relabel(&b)).unwrap()
            );
        }
    }

    #[test]
    fn edit_distance_is_metric_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let mut sample = || -> Vec<u32> {
                (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..3)).collect()
            };
            let (a, b, c) = (sample(), sample(), sample());
            // symmetry of the underlying distance
            assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            // triangle inequality
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            // cer(a,b)·len(b) recovers the distance
            let d = cer(&a, &b).unwrap() * b.len() as f64;
            assert!((d - levenshtein(&a, &b) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_cer_pools_edits_over_lengths() {
        let h1 = vec![5, 6];
        let r1 = vec![5, 6];
        let h2 = vec![5];
        let r2 = vec![5, 6, 7, 8];
        let pairs: Vec<(&[u32], &[u32])> = vec![(&h1, &r1), (&h2, &r2)];
        // 0 edits on 2 tokens + 3 edits on 4 tokens = 3/6
        assert!((corpus_cer(pairs).unwrap() - 0.5).abs() < 1e-15);
    }
}
