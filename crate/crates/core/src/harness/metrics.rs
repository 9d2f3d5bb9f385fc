//! Token error rate: unit-cost Levenshtein distance over content tokens.

use crate::error::{contract, Result};
use crate::policy::{Sequence, TokenId};

pub fn edit_distance(hyp: &[TokenId], reference: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// `edit_distance(hyp, ref) / |ref|`, EOS stripped from both.
pub fn token_error_rate(hyp: &Sequence, reference: &Sequence) -> Result<f64> {
    let r = reference.content();
    if r.is_empty() {
        return Err(contract("token error rate needs a non-empty reference"));
    }
    Ok(edit_distance(hyp.content(), r) as f64 / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use proptest::prelude::*;

    fn seq(content: &[usize]) -> Sequence {
        Sequence::from_content(content, Vocab::new(3).unwrap()).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(token_error_rate(&seq(&[0, 1]), &seq(&[0, 1])).unwrap(), 0.0);
        assert_eq!(token_error_rate(&seq(&[0, 1]), &seq(&[0, 2])).unwrap(), 0.5);
        assert_eq!(token_error_rate(&seq(&[]), &seq(&[0, 1, 2])).unwrap(), 1.0);
        assert!(token_error_rate(&seq(&[0]), &seq(&[])).is_err());
    }

    #[test]
    fn insertions_can_exceed_one() {
        assert_eq!(token_error_rate(&seq(&[1, 1, 1, 1]), &seq(&[0])).unwrap(), 4.0);
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in prop::collection::vec(0usize..3, 0..7),
                                b in prop::collection::vec(0usize..3, 0..7),
                                c in prop::collection::vec(0usize..3, 0..7)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        }
    }
}
