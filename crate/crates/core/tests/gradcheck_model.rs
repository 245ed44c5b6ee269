//! End-to-end gradient check of the full loss on a six-node subgraph.

mod common;

use common::e2e;
use phenokg_core::model::EmbeddingMode;

fn run(mode: EmbeddingMode) {
    let start = std::time::Instant::now();
    let (report, tensors) = e2e::check(mode);
    println!(
        "{mode:?}: {} coordinates over {tensors} parameter tensors, max rel err {:.2e} ({}) in {:.1}s",
        report.checked,
        report.max_rel,
        report.worst,
        start.elapsed().as_secs_f64()
    );
    assert!(report.max_rel <= e2e::TOL, "{report:?}");
}

#[test]
fn end_to_end_gradient_pretrained_features() {
    run(EmbeddingMode::Pretrained);
}

#[test]
fn end_to_end_gradient_random_node_table() {
    run(EmbeddingMode::Random);
}
