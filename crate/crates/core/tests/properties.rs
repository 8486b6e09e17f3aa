//! Property tests for the data layer and corrector selection rules.

use proptest::prelude::*;
use textshield_core::corrector::select_suspects;
use textshield_core::text::{encode, tokenize, Vocabulary, MAX_LEN, PAD};

proptest! {
    #[test]
    fn tokenize_is_deterministic_and_lowercase(s in ".{0,200}") {
        let a = tokenize(&s);
        let b = tokenize(&s);
        match (a, b) {
            (Ok(ta), Ok(tb)) => {
                prop_assert_eq!(&ta, &tb);
                for t in &ta {
                    prop_assert!(t.chars().all(|c| c.is_alphanumeric()));
                    prop_assert_eq!(t.to_lowercase(), t.clone());
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "tokenize was not deterministic"),
        }
    }

    #[test]
    fn encode_round_trips_known_tokens(words in proptest::collection::vec("[a-z]{1,8}", 1..40)) {
        let tokens: Vec<String> = words;
        let vocab = Vocabulary::build(std::slice::from_ref(&tokens));
        let ex = encode(&tokens, &vocab, 0);
        prop_assert_eq!(ex.ids.len(), MAX_LEN);
        prop_assert_eq!(ex.true_length, tokens.len().min(MAX_LEN));
        for (i, tok) in tokens.iter().take(ex.true_length).enumerate() {
            prop_assert_eq!(vocab.token(ex.ids[i]), tok.as_str());
        }
        for &id in &ex.ids[ex.true_length..] {
            prop_assert_eq!(id, PAD);
        }
    }

    #[test]
    fn suspect_sets_shrink_with_beta(column in proptest::collection::vec(0.0f64..1.0, 1..64)) {
        let mut prev: Option<Vec<usize>> = None;
        for step in 0..=10 {
            let beta = step as f64 / 10.0;
            let cur = select_suspects(&column, beta);
            if let Some(p) = &prev {
                prop_assert!(cur.iter().all(|i| p.contains(i)));
            }
            prev = Some(cur);
        }
        // The extremes pinned by the threshold formula.
        prop_assert!(select_suspects(&column, 1.0).is_empty());
    }
}
