mod support;

use support::checks;

fn ok(c: checks::Check) {
    match c {
        Ok(summary) => println!("{summary}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn in_batch_layer_matches_straight_line_oracle() {
    ok(checks::equation_oracle(10));
}

#[test]
fn similarity_rows_are_distributions() {
    ok(checks::similarity_contract(60));
}

#[test]
fn v_normalization_unit_values_and_ablation() {
    ok(checks::v_normalization(40));
}

#[test]
fn masking_and_causality() {
    ok(checks::masking(20));
}

#[test]
fn replug_loss_and_frozen_language_model() {
    ok(checks::replug_contract());
}

#[test]
fn ranking_metrics_match_definitions() {
    ok(checks::metric_oracles(100));
}

#[test]
fn rrf_matches_formula() {
    ok(checks::rrf_oracle(50));
}

#[test]
fn fused_forward_matches_pairwise_forward() {
    ok(checks::fused_path(5));
}
