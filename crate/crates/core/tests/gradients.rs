use rewired_core::gradcheck::{GradCheckRegistry, TOLERANCE};

#[test]
fn standard_suite_within_tolerance() {
    let results = GradCheckRegistry::standard(20).run(2024).unwrap();
    for r in &results {
        println!("{:<45} {:.3e}", r.name, r.max_relative_error);
    }
    for r in &results {
        assert!(r.max_relative_error < TOLERANCE, "{} failed: {:e}", r.name, r.max_relative_error);
    }
}
