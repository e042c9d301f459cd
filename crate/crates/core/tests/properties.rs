use chunklens::dsc::{self, Chunk, ChunkVocab, SymbolicState};
use chunklens::pa::{self, ChunkMeta, Normalization, Rows};
use chunklens::report::Table;
use chunklens::trace::{annotate_occurrences, decode_trace, encode_trace, shift_annotation, ActivationTrace, ConceptAnnotation};
use proptest::prelude::*;

fn trace_strategy() -> impl Strategy<Value = ActivationTrace> {
    (1usize..4, 1usize..6, 1usize..8).prop_flat_map(|(layers, dim, n)| {
        (
            proptest::collection::vec(
                proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO,
                layers * dim * n,
            ),
            proptest::collection::vec("[a-z ]{0,6}", n),
            proptest::collection::btree_set(0..n, 0..=n),
        )
            .prop_map(move |(values, tokens, idx)| {
                ActivationTrace::new(
                    "prop",
                    layers,
                    dim,
                    tokens,
                    values,
                    vec![ConceptAnnotation::new("x", idx.into_iter().collect())],
                )
                .unwrap()
            })
    })
}

/// Token index owning the last character of every whole-word match of
/// `concept` in the space-joined `words`, deduplicated.
fn expected_anchors(words: &[String], tokens: &[String], concept: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut pos = 0;
    for w in words {
        if w == concept {
            ends.push(pos + w.len() - 1);
        }
        pos += w.len() + 1;
    }
    let owner: Vec<usize> = tokens
        .iter()
        .enumerate()
        .flat_map(|(i, t)| std::iter::repeat_n(i, t.chars().count()))
        .collect();
    let mut anchors: Vec<usize> = ends.into_iter().map(|e| owner[e]).collect();
    anchors.dedup();
    anchors
}

/// Splits `text` at the given cut points.
fn split_at(text: &str, cuts: &[usize]) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut points: Vec<usize> = cuts.iter().map(|c| c % (chars.len() + 1)).collect();
    points.push(0);
    points.push(chars.len());
    points.sort_unstable();
    points.dedup();
    points.windows(2).map(|w| chars[w[0]..w[1]].iter().collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trace_round_trip_is_bit_exact(t in trace_strategy()) {
        let bytes = encode_trace(&t).unwrap();
        let back = decode_trace(&bytes).unwrap();
        prop_assert_eq!(back.tokens.clone(), t.tokens.clone());
        prop_assert_eq!(back.annotations.clone(), t.annotations.clone());
        prop_assert!(back.activations.iter().map(|v| v.to_bits()).eq(t.activations.iter().map(|v| v.to_bits())));
        prop_assert_eq!(encode_trace(&back).unwrap(), bytes);
    }

    #[test]
    fn annotation_ignores_tokenization(
        words in proptest::collection::vec(prop_oneof![Just("cat"), Just("dog"), Just("cats"), Just("a")], 1..20),
        cuts_a in proptest::collection::vec(0usize..200, 0..15),
        cuts_b in proptest::collection::vec(0usize..200, 0..15),
    ) {
        let words: Vec<String> = words.into_iter().map(String::from).collect();
        let text = words.join(" ");
        for cuts in [&cuts_a, &cuts_b, &(0..200).collect::<Vec<_>>()] {
            let tokens = split_at(&text, cuts);
            prop_assert_eq!(tokens.concat(), text.clone());
            let ann = annotate_occurrences(&tokens, "cat").unwrap();
            prop_assert_eq!(ann.indices, expected_anchors(&words, &tokens, "cat"));
        }
    }

    #[test]
    fn shifting_preserves_in_range_indices(
        idx in proptest::collection::btree_set(0usize..50, 0..20),
        k in -10i64..10,
        n in 1usize..60,
    ) {
        let idx: Vec<usize> = idx.into_iter().filter(|&i| i < n).collect();
        let ann = ConceptAnnotation::new("c", idx.clone());
        let s = shift_annotation(&ann, k, n);
        let expected: Vec<usize> = idx
            .iter()
            .map(|&i| i as i64 + k)
            .filter(|&j| j >= 0 && (j as usize) < n)
            .map(|j| j as usize)
            .collect();
        prop_assert_eq!(&s.indices, &expected);
        prop_assert_eq!(s.shift, k);
        let back = shift_annotation(&s, -k, n);
        prop_assert!(back.indices.iter().all(|i| idx.contains(i)));
        prop_assert_eq!(back.shift, 0);
    }

    #[test]
    fn support_grows_with_tolerance(
        data in proptest::collection::vec(-4.0f32..4.0, 6 * 5),
        t1 in 0.0f64..3.0,
        t2 in 0.0f64..3.0,
    ) {
        let src = Rows { data: &data, width: 5 };
        let v = [0, 2, 3, 5];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let small = pa::support_set(&src, &v, lo).unwrap();
        let large = pa::support_set(&src, &v, hi).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn chunks_scale_with_activations(
        data in proptest::collection::vec(-4.0f32..4.0, 6 * 5),
        tol in 0.05f64..3.0,
        exp in -2i32..4,
        support_norm in any::<bool>(),
    ) {
        let c = 2f64.powi(exp);
        let scaled: Vec<f32> = data.iter().map(|x| x * c as f32).collect();
        let v = [1, 2, 4];
        let norm = if support_norm { Normalization::Support } else { Normalization::FullWidth };
        let meta = ChunkMeta::default();
        let a = pa::chunk_at_tolerance(&Rows { data: &data, width: 5 }, &v, tol, norm, &meta).unwrap();
        let b = pa::chunk_at_tolerance(&Rows { data: &scaled, width: 5 }, &v, tol * c, norm, &meta).unwrap();
        match (a, b) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                prop_assert_eq!(&a.support, &b.support);
                prop_assert!((b.delta - a.delta * c * c).abs() <= 1e-9 * (1.0 + b.delta));
            }
            (a, b) => prop_assert!(false, "support presence differs: {:?} vs {:?}", a.is_some(), b.is_some()),
        }
    }

    #[test]
    fn fitted_chunk_fires_on_its_training_rows(
        data in proptest::collection::vec(-4.0f32..4.0, 8 * 4),
        tol in 0.1f64..5.0,
        v in proptest::collection::btree_set(0usize..8, 1..6),
    ) {
        let src = Rows { data: &data, width: 4 };
        let v: Vec<usize> = v.into_iter().collect();
        if let Some(chunk) = pa::chunk_at_tolerance(&src, &v, tol, Normalization::FullWidth, &ChunkMeta::default()).unwrap() {
            for &j in &v {
                prop_assert!(pa::detect(&chunk, &data[j * 4..(j + 1) * 4]).unwrap());
            }
        }
    }

    #[test]
    fn csv_round_trip(rows in proptest::collection::vec(proptest::collection::vec("[ -~]{0,8}", 3), 0..10)) {
        let mut t = Table::new(&["a", "b c", "d,e"]);
        for r in rows {
            t.push(r).unwrap();
        }
        let csv = t.to_csv().unwrap();
        prop_assert_eq!(Table::from_csv(csv.as_bytes()).unwrap(), t);
    }

    #[test]
    fn parse_reconstructs_sequence(
        seq in proptest::collection::vec(0u8..5, 0..60),
        words in proptest::collection::vec(proptest::collection::vec(0u8..4, 1..4), 0..6),
    ) {
        let sym = |x: &u8| SymbolicState(format!("s{x}"));
        let states: Vec<SymbolicState> = seq.iter().map(sym).collect();
        let vocab = ChunkVocab {
            null_state: None,
            chunks: words
                .iter()
                .map(|w| Chunk { states: w.iter().map(sym).collect(), count: 1 })
                .collect(),
        };
        let parse = dsc::parse_states(&states, &vocab);
        prop_assert_eq!(dsc::reconstruct(&parse, &vocab, &states), states.clone());
        let mut pos = 0;
        for s in &parse.segments {
            prop_assert_eq!(s.start, pos);
            pos += s.len;
        }
        prop_assert_eq!(pos, states.len());
    }
}
