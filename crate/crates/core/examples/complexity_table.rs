//! Attention cost of global versus frequency-time factorized attention.
//!
//! Prints the pair counts for the three reference clip lengths and draws the
//! factorized mask of a small 3 x 4 token grid: every patch token sees the
//! class token, its own frequency row and its own time column.
//!
//! ```bash
//! cargo run --example complexity_table
//! ```

use ftacl::accounting::complexity_report;
use ftacl::encoder::build_fta_mask;
use ftacl::tokenizer::{token_grid, TokenGrid, TokenizerConfig};

fn main() -> ftacl::Result<()> {
    let tok = TokenizerConfig::new(768);
    println!("{:>6} {:>7}  {:>3} {:>4} {:>10} {:>10} {:>6}", "bins", "frames", "m", "t", "gsa/d", "fta/d", "k");
    for frames in [101, 501, 1006] {
        let grid = token_grid(128, frames, &tok)?;
        let r = complexity_report(grid, 768)?;
        println!(
            "{:>6} {:>7}  {:>3} {:>4} {:>10} {:>10} {:>6}",
            128,
            frames,
            r.m,
            r.t,
            r.o_gsa_over_d(),
            r.o_fta_over_d(),
            r.k_display()
        );
    }

    let grid = TokenGrid { m: 3, t: 4 };
    let mask = build_fta_mask(grid);
    println!("\nfactorized mask on a {grid} grid ({} of {} pairs):", mask.nnz(), mask.len() * mask.len());
    for i in 0..mask.len() {
        let row: String = mask.row(i).iter().map(|&a| if a { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}
