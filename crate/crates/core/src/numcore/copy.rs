use super::{shape_err, NumError, Real};

/// Numerically stable softmax. Entries equal to `-inf` receive zero mass.
pub fn softmax<F: Real>(scores: &[F]) -> Vec<F> {
    let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return vec![F::zero(); scores.len()];
    }
    let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp<F: Real>(scores: &[F]) -> F {
    let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + scores.iter().map(|&s| (s - max).exp()).sum::<F>().ln()
}

/// Joint generate/copy distribution.
///
/// One softmax runs over the concatenation of `gen_scores` (indexed by token
/// id) and `copy_scores` (indexed by source position). Copy mass at position
/// `i` is credited to token `alignment[i]`, which may lie beyond the generation
/// vocabulary for source-only tokens. The result has length
/// `max(gen_scores.len(), max(alignment) + 1)`. Scores of `-inf` are excluded.
pub fn copy_combine<F: Real>(gen_scores: &[F], copy_scores: &[F], alignment: &[usize]) -> Result<Vec<F>, NumError> {
    if copy_scores.len() != alignment.len() {
        return Err(shape_err("copy_combine", copy_scores.len(), alignment.len()));
    }
    let max = gen_scores.iter().chain(copy_scores).copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return Err(NumError::EmptySource { op: "copy_combine" });
    }
    let width = alignment.iter().map(|&a| a + 1).max().unwrap_or(0).max(gen_scores.len());
    let mut out = vec![F::zero(); width];
    let mut total = F::zero();
    for (o, &s) in out.iter_mut().zip(gen_scores) {
        let e = (s - max).exp();
        *o = e;
        total += e;
    }
    for (&s, &a) in copy_scores.iter().zip(alignment) {
        let e = (s - max).exp();
        out[a] += e;
        total += e;
    }
    out.iter_mut().for_each(|p| *p = *p / total);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_copy_mass_into_generated_token() {
        // vocab {a: 0, b: 1}; copy source [a]
        let p = copy_combine(&[0.0f64, 0.0], &[0.0], &[0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_copy_source_is_plain_softmax() {
        let p = copy_combine(&[0.0f64, 0.0], &[], &[]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn duplicated_copy_positions_are_summed() {
        // gen {a: 1, b: 0}, copy [b, b] with scores [0, 0]: four-way softmax over e, 1, 1, 1
        let e = std::f64::consts::E;
        let z = e + 3.0;
        let p = copy_combine(&[1.0f64, 0.0], &[0.0, 0.0], &[1, 1]).unwrap();
        assert!((p[0] - e / z).abs() < 1e-12);
        assert!((p[1] - 3.0 / z).abs() < 1e-12);
    }

    #[test]
    fn source_only_tokens_extend_the_support() {
        let p = copy_combine(&[0.0f64, 0.0], &[0.0], &[5]).unwrap();
        assert_eq!(p.len(), 6);
        assert!((p[5] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p[3], 0.0);
    }

    #[test]
    fn masked_scores_take_no_mass() {
        let p = copy_combine(&[0.0f64, f64::NEG_INFINITY], &[f64::NEG_INFINITY], &[1]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert!(copy_combine::<f64>(&[f64::NEG_INFINITY], &[], &[]).is_err());
    }

    #[test]
    fn misaligned_copy_scores_are_rejected() {
        assert!(copy_combine(&[0.0f32], &[0.0, 1.0], &[0]).is_err());
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [0.3f64, -1.2, 2.5];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }
}
