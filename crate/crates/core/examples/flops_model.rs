//! The analytic cost model: what one generated token costs in a decoder
//! versus in the external MLP memory, and why the memory's advantage grows
//! with context length.
//!
//! The decoder pays for attention over the whole context at every step; the
//! memory reads a single hidden state and never looks at the context again.
//! For standard shapes (d_attn = d_model, d_ff = 4·d_model, memory sized to
//! the decoder) the ratio of the two costs collapses to the closed form
//! `1 + n_ctx / (12·d_model)`.
//!
//!     cargo run --release --example flops_model

use mlp_memory::lm::{flops_per_token, speed_ratio, CostConfig, CostModel, LmConfig};

fn main() {
    // A GPT-2-small-like shape: the cost table in full.
    let config = LmConfig::standard(12, 768, 12, 1024, 50_257);
    let cost = CostConfig::from(&config);

    println!("per-token forward FLOPs at d_model=768, n_ctx=1024:\n");
    for (name, model) in [
        ("decoder", CostModel::Transformer),
        ("mlp memory", CostModel::MlpMemory),
    ] {
        let breakdown = flops_per_token(&cost, model);
        println!("{name}");
        for (op, flops) in &breakdown.rows {
            println!("    {op:<20} {flops:>14}");
        }
        println!("    {:<20} {:>14}", "non-embedding total", breakdown.non_embedding);
        println!("    {:<20} {:>14}", "output projection", breakdown.de_embedding);
        println!();
    }

    // The closed form and the full table agree exactly on standard shapes.
    println!("decoder/memory speed ratio, 1 + n_ctx/(12 d_model):\n");
    println!("{:>8} {:>10} {:>10}", "n_ctx", "closed", "table");
    for n_ctx in [0usize, 128, 512, 1024, 4096, 16_384] {
        let closed = speed_ratio(&config, n_ctx);
        let mut c = cost.clone();
        c.n_ctx = n_ctx as u64;
        let table = flops_per_token(&c, CostModel::Transformer).non_embedding as f64
            / flops_per_token(&c, CostModel::MlpMemory).non_embedding as f64;
        println!("{:>8} {:>10.4} {:>10.4}", n_ctx, closed.ratio, table);
        assert!(closed.standard_shape);
        assert_eq!(closed.ratio, table, "closed form must equal the full table");
    }

    // The paper-scale reference point: 768 wide, 512 of context.
    let r = speed_ratio(&config, 512);
    println!("\nratio at (d_model=768, n_ctx=512): {:.4}", r.ratio);

    // Non-standard shapes fall back to the explicit table.
    let odd = LmConfig {
        d_ff: 1_000,
        ..LmConfig::standard(12, 768, 12, 1024, 50_257)
    };
    let r = speed_ratio(&odd, 512);
    println!(
        "non-standard d_ff=1000 falls back to the table: {:.4} (closed form used: {})",
        r.ratio, r.standard_shape
    );
}
