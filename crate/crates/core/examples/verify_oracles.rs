//! The built-in oracle suite: executed MACs, linear-scan thresholds and
//! textbook kernel alignment against the fast implementations.

fn main() {
    let report = catpress::verify::run_suite();
    for c in &report.checks {
        println!("{:<12} {:>4} cases, {} failures", c.name, c.cases, c.failures);
    }
    println!("{}", if report.ok { "all checks passed" } else { "FAILED" });
}
