use std::collections::BTreeMap;

use proptest::prelude::*;
use qnl_core::metrics::{bleu, levenshtein, rouge_l, spearman_rho};
use qnl_core::pairs::derangement;
use qnl_core::rewrite::{contains_absolute_iri, default_prefixes, extract_iris, replace_ids, tokenize, TokenKind};
use qnl_core::verifier::{
    cosine, head_gradient, head_objective, score_bi, train_head, Embedding, HeadData, HeadHyper, HeadModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn query_strategy() -> impl Strategy<Value = String> {
    let term = prop_oneof![
        "[a-z]{1,4}".prop_map(|v| format!("?{v}")),
        "Q[0-9]{1,5}".prop_map(|v| format!("wd:{v}")),
        "P[0-9]{1,4}".prop_map(|v| format!("wdt:{v}")),
        "[A-Za-z]{1,6}".prop_map(|v| format!("<http://example.org/{v}>")),
        "[a-z ]{0,6}".prop_map(|v| format!("\"{v}\"@en")),
    ];
    prop::collection::vec((term.clone(), term.clone(), term), 1..4).prop_map(|triples| {
        let body: Vec<String> = triples.into_iter().map(|(s, p, o)| format!("{s} {p} {o}")).collect();
        format!("SELECT ?x WHERE {{ {} }}", body.join(" . "))
    })
}

fn labels_for(query: &str) -> BTreeMap<String, String> {
    let tokens = tokenize(query).unwrap();
    extract_iris(&tokens, &default_prefixes())
        .unwrap()
        .into_iter()
        .map(|r| {
            let label = format!("label {}", qnl_core::rewrite::local_name(&r.iri));
            (r.iri, label)
        })
        .collect()
}

fn variables(query: &str) -> Vec<String> {
    let mut v: Vec<String> = tokenize(query)
        .unwrap()
        .into_iter()
        .filter(|t| t.kind == TokenKind::Variable)
        .map(|t| t.text)
        .collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn tokenizer_round_trips(q in query_strategy()) {
        let toks = tokenize(&q).unwrap();
        let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
        prop_assert_eq!(&joined, &q);
        let mut at = 0;
        for t in &toks {
            prop_assert_eq!(t.span.0, at);
            at = t.span.1;
        }
        prop_assert_eq!(at, q.len());
    }

    #[test]
    fn replace_ids_invariants(q in query_strategy()) {
        let labels = labels_for(&q);
        let once = replace_ids(&q, &labels, &default_prefixes()).unwrap();
        let twice = replace_ids(&once, &labels, &default_prefixes()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(!contains_absolute_iri(&once));
        prop_assert_eq!(variables(&q), variables(&once));
        for (iri, label) in &labels {
            let rendered = format!("[{label}]");
            prop_assert!(once.contains(&rendered));
            prop_assert!(!once.contains(iri.as_str()));
        }
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[ab]{0,12}", b in "[ab]{0,12}", c in "[abc]{0,12}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn bleu_rouge_bounds(a in "[a-d]( [a-d]){0,10}", b in "[a-d]( [a-d]){0,10}") {
        for v in [bleu(&a, &b, 4).unwrap(), rouge_l(&a, &b).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(bleu(&a, &a, 4).unwrap(), 1.0);
        prop_assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_tokens_score_zero(a in "[a-d]( [a-d]){0,10}", b in "[w-z]( [w-z]){0,10}") {
        prop_assert_eq!(bleu(&a, &b, 4).unwrap(), 0.0);
        prop_assert_eq!(rouge_l(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn spearman_monotone_invariance(
        x in prop::collection::vec(-5.0f64..5.0, 3..12),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let base = spearman_rho(&x, &y).unwrap();
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        let affine: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
        prop_assert!((spearman_rho(&cubed, &y).unwrap() - base).abs() < 1e-12);
        prop_assert!((spearman_rho(&x, &affine).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn cosine_symmetry_and_scale(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        k in 0.001f64..1000.0,
    ) {
        prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
        let ea = Embedding::new(a.clone(), "p").unwrap();
        let eb = Embedding::new(b, "p").unwrap();
        prop_assert_eq!(score_bi(&ea, &eb, 0.5).unwrap().value, score_bi(&eb, &ea, 0.5).unwrap().value);
        let scaled = Embedding::new(a.iter().map(|v| v * k).collect(), "p").unwrap();
        prop_assert!((cosine(&ea, &eb).unwrap() - cosine(&scaled, &eb).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn derangements_exhaustive_small() {
    for n in 2..=8 {
        for seed in 0..50 {
            let p = derangement(n, seed).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j), "n={n} seed={seed}");
        }
    }
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> HeadData {
    let pairs: Vec<(Embedding, Embedding, u8)> = (0..n)
        .map(|i| {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (
                Embedding::new(q, "r").unwrap(),
                Embedding::new(t, "r").unwrap(),
                (i % 2) as u8,
            )
        })
        .collect();
    HeadData::from_embeddings(&pairs).unwrap()
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let dim = rng.random_range(1..4);
        let data = random_data(&mut rng, 6, dim);
        let mut head = HeadModel::zeros(dim);
        head.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        head.bias = rng.random_range(-1.0..1.0);
        let (gw, gb) = head_gradient(&head, &data);
        let h = 1e-6;
        for (i, &g) in gw.iter().enumerate() {
            let mut plus = head.clone();
            plus.weights[i] += h;
            let mut minus = head.clone();
            minus.weights[i] -= h;
            let fd = (head_objective(&plus, &data) - head_objective(&minus, &data)) / (2.0 * h);
            let rel = (fd - g).abs() / g.abs().max(1e-8);
            assert!(rel < 1e-5 || (fd - g).abs() < 1e-10, "w{i}: fd={fd} an={g}");
        }
        let mut plus = head.clone();
        plus.bias += h;
        let mut minus = head.clone();
        minus.bias -= h;
        let fd = (head_objective(&plus, &data) - head_objective(&minus, &data)) / (2.0 * h);
        assert!((fd - gb).abs() / gb.abs().max(1e-8) < 1e-5);
    }
}

#[test]
fn separable_gaussian_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let dim = 16;
    let center_a: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let center_b: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
    let mut draw = |c: &[f64]| Embedding::new(c.iter().map(|v| v + noise.sample(&mut rng)).collect(), "gauss").unwrap();
    let mut pairs = Vec::new();
    for i in 0..40 {
        let (q, t, y) = if i % 2 == 0 {
            (draw(&center_a), draw(&center_a), 1)
        } else {
            (draw(&center_a), draw(&center_b), 0)
        };
        pairs.push((q, t, y));
    }
    let data = HeadData::from_embeddings(&pairs).unwrap();
    let trained = train_head(
        &data,
        &HeadHyper {
            epochs: 300,
            learning_rate: 0.1,
            seed: 0,
        },
    )
    .unwrap();
    let correct = pairs
        .iter()
        .filter(|(q, t, y)| trained.model.score(q, t, 0.5).unwrap().decision == (*y == 1))
        .count();
    assert!(correct as f64 / pairs.len() as f64 >= 0.95);
    assert!(trained.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}
