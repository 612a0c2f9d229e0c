//! Exact finite-world check of the client-conditioned divergence bound, with
//! the divergence taken in both directions as the bound's constant.
//!
//! cargo run --release --example verify_theory -- [WORLDS] [MAX_SIZE]

use flmg::theory::verify_theory;

fn main() -> flmg::Result<()> {
    let mut args = std::env::args().skip(1);
    let worlds = args
        .next()
        .map(|s| s.parse().expect("world count"))
        .unwrap_or(1000);
    let max = args
        .next()
        .map(|s| s.parse().expect("max support size"))
        .unwrap_or(64);
    let report = verify_theory(worlds, max, 0)?;
    println!(
        "{:>6}{:>6}{:>14}{:>14}{:>12}{:>10}",
        "world", "|X|", "lhs", "rhs", "margin", "reversed"
    );
    for w in report.worlds.iter().take(8) {
        println!(
            "{:>6}{:>6}{:>14.6}{:>14.6}{:>12.1e}{:>10}",
            w.index,
            w.size,
            w.lhs,
            w.rhs,
            w.margin,
            if w.holds_printed { "holds" } else { "fails" }
        );
    }
    println!(
        "{} worlds: {} counterexamples; with the reversed divergence the bound fails in {}",
        report.worlds.len(),
        report.counterexamples,
        report.printed_direction_violations
    );
    Ok(())
}
