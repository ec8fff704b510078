//! Retrieval from first principles on a hand-built datastore: exact nearest
//! neighbours, the distance-weighted next-token distribution, self-exclusion,
//! and interpolation with a base distribution.
//!
//!     cargo run --release --example knn_basics

use mlp_memory::knn::{KnnIndex, SparseDistribution};
use mlp_memory::linalg::Matrix;

fn main() {
    // Twelve 2-d keys in three tight clusters; the stored value is the token
    // that followed each context. Cluster A continues with token 7, cluster B
    // with 3, and cluster C is split between 7 and 9.
    #[rustfmt::skip]
    let keys = Matrix::from_vec(12, 2, vec![
        // cluster A near (0, 0)
        0.00, 0.05,   0.10, 0.00,   0.05, 0.10,   0.00, 0.00,
        // cluster B near (4, 0)
        4.00, 0.10,   4.10, 0.00,   3.95, 0.05,   4.05, 0.10,
        // cluster C near (0, 4)
        0.00, 4.00,   0.10, 4.05,   0.05, 3.95,   0.00, 4.10,
    ]);
    let values = vec![7, 7, 7, 7, 3, 3, 3, 3, 7, 9, 7, 9];
    let index = KnnIndex::from_parts(&keys, &values);

    // A query inside cluster A retrieves only cluster A.
    let query = [0.02f32, 0.03];
    let neighbors = index.search(&query, 4, None);
    println!("query near cluster A, k=4:");
    for n in &neighbors {
        println!("    entry {:>2}  value {}  squared distance {:.4}", n.index, n.value, n.dist);
    }

    // Neighbours aggregate into p(y) ∝ Σ 1[vᵢ=y]·exp(−dᵢ): unanimous
    // neighbours give a one-hot distribution.
    let p = SparseDistribution::from_neighbors(&neighbors);
    println!("retrieval distribution: {:?} -> {:?}\n", p.tokens, p.probs);
    assert_eq!(p.tokens, vec![7]);

    // A query between clusters mixes their votes, weighted by distance.
    let query = [2.0f32, 0.1];
    let p = SparseDistribution::from_neighbors(&index.search(&query, 8, None));
    println!("query midway between A and B, k=8:");
    for (t, pr) in p.tokens.iter().zip(&p.probs) {
        println!("    token {t}  prob {pr:.4}");
    }
    println!("entropy {:.4} nats\n", p.entropy());

    // Cluster C disagrees internally, so even a central query keeps mass on
    // both continuations.
    let query = [0.04f32, 4.02];
    let p = SparseDistribution::from_neighbors(&index.search(&query, 4, None));
    println!("query inside cluster C, k=4:");
    for (t, pr) in p.tokens.iter().zip(&p.probs) {
        println!("    token {t}  prob {pr:.4}");
    }
    println!();

    // Self-exclusion: when datastore entries are queried against their own
    // store (as in retrieval-target precomputation), the entry itself is an
    // exact-match neighbour at distance zero and would swallow the whole
    // distribution. Excluding it keeps the target informative.
    let own = keys.row(0);
    let with_self = SparseDistribution::from_neighbors(&index.search(own, 1, None));
    let without = SparseDistribution::from_neighbors(&index.search(own, 1, Some(0)));
    println!("entry 0 queried against its own store, k=1:");
    println!("    without exclusion: nearest is itself (prob {:?})", with_self.probs);
    let n = &index.search(own, 1, Some(0))[0];
    println!(
        "    with exclusion:    entry {} at squared distance {:.4} (prob {:?})",
        n.index, n.dist, without.probs
    );

    // Interpolation: the retrieval distribution is sparse, the base LM's is
    // dense; mixing with weight λ leaves base mass everywhere while
    // concentrating on retrieved continuations.
    let n_vocab = 10usize;
    let base = vec![1.0 / n_vocab as f64; n_vocab];
    let lambda = 0.25;
    let mixed: Vec<f64> = (0..n_vocab as u32)
        .map(|t| lambda * p.prob_of(t) + (1.0 - lambda) * base[t as usize])
        .collect();
    println!("\nuniform base mixed with cluster-C retrieval at λ = {lambda}:");
    for (t, m) in mixed.iter().enumerate() {
        println!("    token {t}  prob {m:.4}");
    }
    assert!((mixed.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
