use std::collections::BTreeMap;

use mmg_core::ppr::build_text_reset;
use mmg_core::{MemoryGraph, TimeView, Timestamp};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Solves (I - d M) pi = (1 - d) r directly, where column u of M spreads
/// node u's mass over its active incident weights, or back to r when u
/// has none.
pub fn dense_oracle(view: &TimeView<'_>, r: &[f64], d: f64) -> Vec<f64> {
    let g = view.graph();
    let n = g.node_count();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for u in g.indices() {
        if !view.is_active(u) {
            continue;
        }
        let total: f64 = view.incident(u).map(|(e, _)| e.weight).sum();
        if total > 0.0 {
            for (e, v) in view.incident(u) {
                m[(v.index(), u.index())] += e.weight / total;
            }
        } else {
            for v in 0..n {
                m[(v, u.index())] += r[v];
            }
        }
    }
    let a = DMatrix::<f64>::identity(n, n) - m * d;
    let b = DVector::from_iterator(n, r.iter().map(|x| (1.0 - d) * x));
    a.lu().solve(&b).expect("nonsingular").iter().copied().collect()
}

pub fn random_reset(view: &TimeView<'_>, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let mut mass = BTreeMap::new();
    for ix in view.active_nodes() {
        if rng.random_bool(0.4) {
            mass.insert(ix, rng.random_range(0.01..1.0));
        }
    }
    build_text_reset(view, &mass).ok()
}

pub fn query_time(g: &MemoryGraph, rng: &mut ChaCha8Rng) -> Timestamp {
    let last = g.nodes().iter().filter_map(|n| n.anchor_time()).max().unwrap_or(Timestamp(0));
    if rng.random_bool(0.5) {
        Timestamp::END
    } else {
        Timestamp(rng.random_range(0..=last.secs()))
    }
}
