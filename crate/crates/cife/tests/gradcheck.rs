//! Finite-difference verification of every differentiable op.

mod common;

fn family(prefix: &str) -> Vec<common::CaseResult> {
    common::all_cases()
        .into_iter()
        .filter(|c| c.name.starts_with(prefix))
        .collect()
}

fn assert_family(prefix: &str) {
    let cases = family(prefix);
    assert!(!cases.is_empty(), "no cases for prefix {prefix:?}");
    for c in &cases {
        assert!(
            c.max_rel_err < c.tol,
            "{}: max rel err {} exceeds {}",
            c.name,
            c.max_rel_err,
            c.tol
        );
    }
}

#[test]
fn elementwise_ops_match_central_differences() {
    assert_family("elementwise-");
}

#[test]
fn matmul_matches_central_differences() {
    assert_family("matmul-");
}

#[test]
fn softmax_matches_central_differences() {
    assert_family("softmax-");
}

#[test]
fn log_matches_central_differences() {
    assert_family("log-");
}

#[test]
fn softmax_cross_entropy_matches_central_differences() {
    assert_family("softmax-ce-");
}

#[test]
fn binary_cross_entropy_matches_central_differences() {
    assert_family("bce-");
}

#[test]
fn concat_and_broadcast_match_central_differences() {
    assert_family("concat-broadcast-");
}

#[test]
fn outer_rows_matches_central_differences() {
    assert_family("outer-rows-");
}

#[test]
fn two_layer_mlp_all_params_match_central_differences() {
    assert_family("mlp-");
}

#[test]
fn gradient_reversal_is_negated_scaled_derivative() {
    assert_family("reversal-");
}

#[test]
fn case_corpus_is_large_enough() {
    assert!(common::all_cases().len() >= 100);
}
