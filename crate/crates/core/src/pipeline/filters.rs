//! Per-caption keep/drop predicates.

use crate::error::Result;
use crate::pipeline::lm::CharNgramModel;
use crate::text::{MixedTokenizer, Tokenizer};

pub const MIN_CAPTION_TOKENS: usize = 3;
pub const MAX_CAPTION_TOKENS: usize = 12;

pub fn token_count(text: &str) -> usize {
    MixedTokenizer.tokenize(text).len()
}

/// Inclusive bounds on token count.
pub fn length_ok(text: &str, min_len: usize, max_len: usize) -> bool {
    (min_len..=max_len).contains(&token_count(text))
}

pub fn length_filter(captions: &[String], min_len: usize, max_len: usize) -> Vec<String> {
    captions.iter().filter(|c| length_ok(c, min_len, max_len)).cloned().collect()
}

/// Inclusive perplexity band; an empty caption has infinite perplexity.
pub fn perplexity_ok(text: &str, lm: &CharNgramModel, low: f64, high: f64) -> Result<bool> {
    let p = lm.perplexity(text)?;
    Ok(low <= p && p <= high)
}

pub fn perplexity_filter(captions: &[String], lm: &CharNgramModel, low: f64, high: f64) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for c in captions {
        if perplexity_ok(c, lm, low, high)? {
            out.push(c.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    #[test]
    fn length_bounds_inclusive() {
        let caps: Vec<String> = (0..=14).map(words).collect();
        let kept: Vec<usize> = length_filter(&caps, 3, 12).iter().map(|c| token_count(c)).collect();
        assert_eq!(kept, (3..=12).collect::<Vec<_>>());
        assert!(!length_ok("", 3, 12));
        assert!(length_ok("你好世", 3, 12));
    }

    #[test]
    fn perplexity_band() {
        let lm = CharNgramModel::train(2, 0.1, ["哈哈哈哈", "哈哈哈"]).unwrap();
        let caps = vec!["哈哈哈".to_string()];
        assert_eq!(perplexity_filter(&caps, &lm, 0.0, f64::INFINITY).unwrap(), caps);
        assert!(perplexity_filter(&caps, &lm, 1.5, 500.0).unwrap().is_empty());
        let untrained = CharNgramModel::new(2, 0.1).unwrap();
        assert!(perplexity_filter(&caps, &untrained, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn filters_commute(caps in proptest::collection::vec("[a-d 哈]{0,30}", 0..20), low in 0.0f64..4.0, high in 4.0f64..20.0) {
            let lm = CharNgramModel::train(2, 0.5, ["abc dab", "哈哈 abd", "cc dd"]).unwrap();
            let a = perplexity_filter(&length_filter(&caps, 3, 12), &lm, low, high).unwrap();
            let b = length_filter(&perplexity_filter(&caps, &lm, low, high).unwrap(), 3, 12);
            prop_assert_eq!(a, b);
        }
    }
}
