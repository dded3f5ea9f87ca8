//! Equidistant acquisition mask, SSDU partitions and shifted cyclic masks.
//!
//! cargo run --release --example masks_and_splits

use spic_ssdu::sampling::{equidistant_mask, shifted_patterns, ssdu_split};

fn rows_of(text: &str) -> String {
    text.lines().map(|l| if l.contains('1') { '#' } else { '.' }).collect()
}

fn main() -> spic_ssdu::Result<()> {
    let omega = equidistant_mask(32, 32, 4, 4)?;
    println!("omega   {}  ({} points)", rows_of(&omega.to_bitmap_text()), omega.count());
    let split = ssdu_split(&omega, 0.4, 3, 7)?;
    for (k, pair) in split.pairs.iter().enumerate() {
        println!(
            "split {k}: |theta| = {}, |lambda| = {}, |lambda|/|theta| = {:.3}",
            pair.theta.count(),
            pair.lambda.count(),
            pair.lambda.count() as f64 / pair.theta.count() as f64
        );
    }
    for (j, delta) in shifted_patterns(&omega, 3, 7)?.iter().enumerate() {
        println!("delta {j} {}  ({} points)", rows_of(&delta.to_bitmap_text()), delta.count());
    }
    println!("{}", serde_json::to_string(&omega.descriptor())?);
    Ok(())
}
