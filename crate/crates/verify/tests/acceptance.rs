//! Runs every acceptance criterion, prints one line each, then fails if any
//! criterion failed.

use logonet_verify::criteria::{self, Outcome};

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{name}]: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    record(1, "gradient suite", criteria::gradients(&[0, 1, 2]));
    record(2, "conv oracle", criteria::conv_oracle(50, 0));
    record(3, "structure", criteria::structure());
    record(4, "ssl statistics", criteria::ssl_statistics(criteria::MASK_PLANS));
    record(5, "block complexity", criteria::complexity());
    record(6, "overfit", criteria::overfit());
    let (effect, table) = criteria::pretrain_effect_table(&[0, 1, 2]);
    print!("{table}");
    record(7, "pretrain effect", effect);
    record(8, "cost report", criteria::reporting());

    println!("\nsummary");
    for (n, name, o) in &results {
        println!("  criterion {n} {:<18} {}", name, if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
