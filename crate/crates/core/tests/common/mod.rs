#![allow(dead_code)]

pub mod injection;
pub mod oracle;

use mmg_core::{
    ArtefactBundle, CaptionRow, Granularity, MentionRow, Timestamp, TripleRow, VisualRow,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 12] = [
    "marker", "box", "kitchen", "cake", "pot", "table", "laptop", "flowers", "stairs", "cart",
    "phone", "guitar",
];
pub const NAMES: [&str; 6] = ["Katrina", "Shure", "Lucia", "Tasha", "Alice", "I"];
pub const DIM_TEXT: usize = 8;
pub const DIM_VIS: usize = 6;

pub fn vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn sentence(rng: &mut ChaCha8Rng, names: &[&str]) -> String {
    let n = rng.random_range(2..7);
    let mut words: Vec<String> = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.random_bool(0.5) {
        words.insert(0, names.choose(rng).unwrap().to_string());
    }
    words.join(" ")
}

/// Small random bundle: up to `max_windows` 30 s windows (with gaps, some
/// longer than six hours), partial coarser layers, clips, mentions and a
/// consolidation log.
pub fn random_bundle(seed: u64, max_windows: usize) -> ArtefactBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_windows);
    let mut t = Timestamp::from_day_clock(1, rng.random_range(8..20), 0, 0).secs();
    let mut starts = Vec::new();
    for _ in 0..n {
        starts.push(t);
        t += 30 * match rng.random_range(0..10) {
            0 => rng.random_range(2..20),
            1 => 800,
            _ => 1,
        };
    }
    let mut b = ArtefactBundle::default();
    for &s in &starts {
        let skew = u64::from(rng.random_bool(0.2));
        b.captions.push(CaptionRow {
            granularity: Granularity::Sec30,
            start: Timestamp(s + skew),
            end: Timestamp(s + 30),
            text: sentence(&mut rng, &NAMES),
        });
        if rng.random_bool(0.7) {
            b.visual.push(VisualRow {
                start: Timestamp(s),
                end: Timestamp(s + 30),
                embedding: vector(&mut rng, DIM_VIS),
                frames: vec![format!("frames/{s}_0.jpg")],
            });
        }
    }
    for g in [Granularity::Min3, Granularity::Min10, Granularity::Hour1] {
        let mut buckets: Vec<u64> =
            starts.iter().map(|&s| g.bucket_start(Timestamp(s)).secs()).collect();
        buckets.dedup();
        for bs in buckets {
            if rng.random_bool(0.6) {
                b.captions.push(CaptionRow {
                    granularity: g,
                    start: Timestamp(bs),
                    end: Timestamp(bs + g.secs()),
                    text: sentence(&mut rng, &NAMES),
                });
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let s = *starts.choose(&mut rng).unwrap();
        b.mentions.push(MentionRow {
            entity: NAMES.choose(&mut rng).unwrap().to_string(),
            window: Some(Timestamp(s)),
        });
    }
    for i in 0..rng.random_range(0..6) {
        let s = *starts.choose(&mut rng).unwrap();
        let removes = if i > 0 && rng.random_bool(0.3) { vec![rng.random_range(0..i)] } else { vec![] };
        b.triples.push(TripleRow {
            subject: NAMES.choose(&mut rng).unwrap().to_string(),
            predicate: WORDS.choose(&mut rng).unwrap().to_string(),
            object: if rng.random_bool(0.4) {
                NAMES.choose(&mut rng).unwrap().to_string()
            } else {
                WORDS.choose(&mut rng).unwrap().to_string()
            },
            snapshot: Timestamp(s + 40 * i as u64),
            removes,
        });
    }
    for (id, _) in b.embedding_inputs() {
        let v = vector(&mut rng, DIM_TEXT);
        b.text_embeddings.insert(id, v);
    }
    b
}
