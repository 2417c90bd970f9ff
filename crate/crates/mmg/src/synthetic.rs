//! Seeded synthetic corpora with planted evidence.
//!
//! A cross-modal plant names an entity in the question whose only link to
//! the gold window is the extracted mention: the gold caption never uses
//! the name, decoy captions repeat the question's object word, and the
//! gold clip's visual embedding encodes unrelated scene words. A cross-time
//! plant is an entity discussed throughout the last day whose chain holds a
//! fact from the first day that no caption on that day mentions.

use std::collections::BTreeSet;
use std::path::Path;

use mmg_core::{CaptionRow, Granularity, NodeId, TimeSpan, Timestamp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artefacts::{self, ArtefactError, EmbeddingSlot, EmbeddingStore, Question, VisualRecord};
use crate::eval::GoldSpan;
use crate::mock::{HashEmbedder, Reply, ScriptRule};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub days: u32,
    pub windows_per_day: usize,
    pub cross_modal: usize,
    pub cross_time: usize,
    /// Plain recall questions about random filler windows.
    pub extra_questions: usize,
    pub start_hour: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 7, days: 2, windows_per_day: 120, cross_modal: 10, cross_time: 2, extra_questions: 38, start_hour: 10 }
    }
}

pub const DECOYS_PER_PLANT: usize = 4;
pub const CROSS_TIME_MENTIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyntheticError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
}

const OBJECTS: [&str; 12] =
    ["lantern", "compass", "kettle", "scarf", "notebook", "basket", "ladder", "helmet", "umbrella", "blanket", "hammer", "teapot"];
const PLACES: [&str; 12] = ["shelf", "drawer", "porch", "garage", "closet", "cupboard", "attic", "balcony", "desk", "bench", "sink", "stairs"];
const INSTRUMENTS: [&str; 6] = ["violin", "cello", "flute", "trumpet", "guitar", "harp"];
const CONTAINERS: [&str; 6] = ["cedar chest", "steel locker", "wicker hamper", "oak wardrobe", "tin trunk", "glass cabinet"];
const VERBS: [&str; 6] = ["tunes", "polishes", "plays", "carries", "cleans", "practices with"];

/// A planted cross-modal question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossModalPlant {
    pub question_id: String,
    pub entity: String,
    pub object: String,
    pub place: String,
    pub gold: TimeSpan,
    pub decoys: Vec<TimeSpan>,
}

/// A planted cross-time question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTimePlant {
    pub question_id: String,
    pub entity: String,
    pub instrument: String,
    pub container: String,
    /// Window the chain fact is dated to.
    pub fact_window: TimeSpan,
    pub fact_text: String,
    pub mentions: Vec<TimeSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub captions: Vec<CaptionRow>,
    pub visual: Vec<VisualRecord>,
    /// Visual clip embeddings keyed by clip node id.
    pub embeddings: EmbeddingStore,
    pub questions: Vec<Question>,
    pub gold: Vec<GoldSpan>,
    pub script: Vec<ScriptRule>,
    pub cross_modal: Vec<CrossModalPlant>,
    pub cross_time: Vec<CrossTimePlant>,
}

struct Vocab {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

impl Vocab {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS[self.rng.random_range(0..ONSETS.len())], VOWELS[self.rng.random_range(0..VOWELS.len())]))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn name(&mut self) -> String {
        let w = self.word(3);
        let mut c = w.chars();
        let first = c.next().expect("non-empty").to_ascii_uppercase();
        format!("{first}{}x", c.as_str())
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], n: usize) -> Vec<&'a str> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())].as_str()).collect()
}

fn choices_with(rng: &mut ChaCha8Rng, correct: String, pool: &[String]) -> (Vec<String>, String) {
    let mut choices: Vec<String> = pool.iter().filter(|p| **p != correct).take(3).cloned().collect();
    let at = rng.random_range(0..=choices.len());
    choices.insert(at, correct);
    (choices, char::from(b'A' + at as u8).to_string())
}

impl SyntheticSpec {
    pub fn windows(&self) -> usize {
        self.days as usize * self.windows_per_day
    }

    fn check(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Infeasible(m));
        if self.days == 0 || self.windows_per_day == 0 {
            return bad("need at least one day and one window".into());
        }
        if self.windows_per_day > 2880 - self.start_hour as usize * 120 {
            return bad("windows run past midnight".into());
        }
        if self.cross_modal > OBJECTS.len() || self.cross_time > INSTRUMENTS.len() {
            return bad(format!("at most {} cross-modal and {} cross-time plants", OBJECTS.len(), INSTRUMENTS.len()));
        }
        if self.cross_time > 0 && self.days < 2 {
            return bad("cross-time plants need two days".into());
        }
        let blocks_per_day = self.windows_per_day.div_ceil(20);
        if self.cross_modal > 0 && self.days as usize * blocks_per_day < 2 {
            return bad("cross-modal plants need two 10 min blocks".into());
        }
        let needed = self.cross_modal * (1 + DECOYS_PER_PLANT) + self.cross_time * (1 + CROSS_TIME_MENTIONS) + self.extra_questions;
        if needed > self.windows() {
            return bad(format!("plants need {needed} windows, corpus has {}", self.windows()));
        }
        if self.cross_time * CROSS_TIME_MENTIONS > self.windows_per_day || self.cross_time > self.windows_per_day / 2 {
            return bad("cross-time plants do not fit in one day".into());
        }
        Ok(())
    }

    fn window(&self, i: usize) -> TimeSpan {
        let day = (i / self.windows_per_day) as u32 + 1;
        let start = Timestamp::from_day_clock(day, self.start_hour, 0, 0).saturating_add(30 * (i % self.windows_per_day) as u64);
        TimeSpan::new(start, start.saturating_add(30))
    }

    /// 10 min block of window `i` (unique across days).
    fn block(&self, i: usize) -> u64 {
        Granularity::Min10.bucket_start(self.window(i).start).0
    }
}

pub fn generate(spec: &SyntheticSpec, visual_dim: usize, visual_seed: u64) -> Result<SyntheticCorpus, SyntheticError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocab = Vocab { rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed), used: BTreeSet::new() };
    let filler: Vec<String> = (0..400).map(|_| vocab.word(2)).collect();
    let scenery: Vec<String> = (0..200).map(|_| vocab.word(3)).collect();
    let n = spec.windows();
    let mut texts: Vec<Option<String>> = vec![None; n];
    let mut free: Vec<usize> = (0..n).collect();
    free.shuffle(&mut rng);
    let mut taken = vec![false; n];
    let mut script = Vec::new();
    let mut questions = Vec::new();
    let mut gold = Vec::new();
    let mut claim = |pred: &dyn Fn(usize) -> bool, taken: &mut Vec<bool>| -> Option<usize> {
        let pos = free.iter().position(|&w| !taken[w] && pred(w))?;
        let w = free.remove(pos);
        taken[w] = true;
        Some(w)
    };
    let sentence = |rng: &mut ChaCha8Rng, core: &str| {
        format!("{} {core} {}", pick(rng, &filler, 3).join(" "), pick(rng, &filler, 3).join(" "))
    };

    let mut cross_time = Vec::new();
    let first_day_end = spec.windows_per_day;
    let last_day_start = (spec.days as usize - 1) * spec.windows_per_day;
    for j in 0..spec.cross_time {
        let entity = vocab.name();
        let instrument = INSTRUMENTS[j].to_string();
        let container = CONTAINERS[j].to_string();
        let mut mentions = Vec::new();
        let mut triples_seen = Vec::new();
        for m in 0..CROSS_TIME_MENTIONS {
            let w = claim(&|w| w >= last_day_start, &mut taken).ok_or_else(|| SyntheticError::Infeasible("last day is full".into()))?;
            let verb = VERBS[m % VERBS.len()];
            let text = sentence(&mut rng, &format!("{entity} {verb} the {instrument}"));
            let reply = json!({"named_entities": [entity], "triples": [[entity, verb, format!("the {instrument}")]]});
            script.push(ScriptRule::new("openie", Some(&text), vec![Reply::text(reply.to_string())]));
            texts[w] = Some(text);
            mentions.push(spec.window(w));
            triples_seen.push(w);
        }
        // The fact window starts on a whole minute so the chain's minute
        // timestamp lands exactly on it.
        let w = claim(&|w| w < first_day_end && w % 2 == 0, &mut taken)
            .ok_or_else(|| SyntheticError::Infeasible("first day is full".into()))?;
        let fact_window = spec.window(w);
        texts[w] = Some(sentence(&mut rng, &format!("a case goes into the {container}")));
        let fact_text = format!("{entity}'s {instrument} was first stored in the {container}.");
        let mut facts = vec![json!({"time": fact_window.start.display_minutes(), "fact": fact_text})];
        for &m in triples_seen.iter().take(2) {
            let s = spec.window(m).start;
            facts.push(json!({"time": s.display_minutes(), "fact": format!("{entity} played the {instrument}.")}));
        }
        script.push(ScriptRule::new("topic_chain", Some(&format!("the entity \"{entity}\" appears")), vec![Reply::text(json!(facts).to_string())]));
        mentions.sort();
        let id = format!("xt{j:02}");
        let pool: Vec<String> = CONTAINERS.iter().map(|c| format!("the {c}")).collect();
        let (choices, answer) = choices_with(&mut rng, format!("the {container}"), &pool);
        questions.push(Question {
            id: id.clone(),
            question: format!("Where was the {instrument} of {entity} first stored?"),
            time: None,
            choices,
            answer: Some(answer),
            kind: Some("cross_time".into()),
        });
        gold.push(GoldSpan { question_id: id.clone(), spans: vec![[fact_window.start, fact_window.end]] });
        cross_time.push(CrossTimePlant { question_id: id, entity, instrument, container, fact_window, fact_text, mentions });
    }

    let mut cross_modal = Vec::new();
    let mut gold_clips = BTreeSet::new();
    for i in 0..spec.cross_modal {
        let entity = vocab.name();
        let object = OBJECTS[i].to_string();
        let place = PLACES[i].to_string();
        let g = claim(&|_| true, &mut taken).ok_or_else(|| SyntheticError::Infeasible("no window for plant".into()))?;
        let gb = spec.block(g);
        let text = sentence(&mut rng, &format!("someone sets a bundle down by the {place}"));
        let reply = json!({"named_entities": [entity], "triples": [[entity, "left", format!("{object} by the {place}")]]});
        script.push(ScriptRule::new("openie", Some(&text), vec![Reply::text(reply.to_string())]));
        texts[g] = Some(text);
        gold_clips.insert(g);
        let mut decoys = Vec::new();
        for _ in 0..DECOYS_PER_PLANT {
            let d = claim(&|w| spec.block(w) != gb, &mut taken).ok_or_else(|| SyntheticError::Infeasible("no decoy window".into()))?;
            texts[d] = Some(sentence(&mut rng, &format!("a {object} beside another {object}")));
            decoys.push(spec.window(d));
        }
        decoys.sort();
        let id = format!("xm{i:02}");
        let pool: Vec<String> = PLACES.iter().map(|p| format!("by the {p}")).collect();
        let (choices, answer) = choices_with(&mut rng, format!("by the {place}"), &pool);
        questions.push(Question {
            id: id.clone(),
            question: format!("Where did {entity} leave the {object}?"),
            time: None,
            choices,
            answer: Some(answer),
            kind: Some("cross_modal".into()),
        });
        let span = spec.window(g);
        gold.push(GoldSpan { question_id: id.clone(), spans: vec![[span.start, span.end]] });
        cross_modal.push(CrossModalPlant { question_id: id, entity, object, place, gold: span, decoys });
    }

    for slot in texts.iter_mut().filter(|s| s.is_none()) {
        *slot = Some(pick(&mut rng, &filler, 8).join(" "));
    }
    for k in 0..spec.extra_questions {
        let w = claim(&|_| true, &mut taken).ok_or_else(|| SyntheticError::Infeasible("no window for question".into()))?;
        let text = texts[w].clone().expect("filled");
        let cue: Vec<&str> = text.split_whitespace().take(3).collect();
        let span = spec.window(w);
        let correct = span.start.to_string();
        let pool: Vec<String> = (1..=4).map(|o| spec.window((w + o * 37) % n).start.to_string()).collect();
        let (choices, answer) = choices_with(&mut rng, correct, &pool);
        let id = format!("q{k:03}");
        questions.push(Question {
            id: id.clone(),
            question: format!("When was {} observed?", cue.join(" ")),
            time: None,
            choices,
            answer: Some(answer),
            kind: Some("recall".into()),
        });
        gold.push(GoldSpan { question_id: id, spans: vec![[span.start, span.end]] });
    }

    let embedder = HashEmbedder::visual(visual_dim, visual_seed);
    let mut embeddings = EmbeddingStore::default();
    let mut captions = Vec::with_capacity(n);
    let mut visual = Vec::with_capacity(n);
    for (w, text) in texts.into_iter().enumerate() {
        let span = spec.window(w);
        let text = text.expect("filled");
        // Clip embeddings: filler clips echo their caption, gold clips show
        // only unrelated scenery.
        let scene = if gold_clips.contains(&w) { pick(&mut rng, &scenery, 6).join(" ") } else { text.clone() };
        let id = NodeId::visual_clip(span);
        embeddings.insert(EmbeddingSlot::Visual, id.as_str(), embedder.embed(&scene));
        visual.push(VisualRecord { start: span.start, end: span.end, frames: vec![format!("frames/{}/{:06}.jpg", span.start.day(), w)] });
        captions.push(CaptionRow { granularity: Granularity::Sec30, start: span.start, end: span.end, text });
    }
    questions.sort_by(|a, b| a.id.cmp(&b.id));
    gold.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(SyntheticCorpus { spec: spec.clone(), captions, visual, embeddings, questions, gold, script, cross_modal, cross_time })
}

impl SyntheticCorpus {
    /// Writes the 30 s captions, clip records and embeddings, questions,
    /// gold spans and the provider script. Mentions and triples start empty
    /// and are produced by distillation.
    pub fn write(&self, dir: &Path) -> Result<(), ArtefactError> {
        std::fs::create_dir_all(dir).map_err(|source| ArtefactError::Io { path: dir.to_path_buf(), source })?;
        artefacts::write_jsonl(&dir.join(artefacts::CAPTIONS), &self.captions)?;
        artefacts::write_jsonl::<mmg_core::MentionRow>(&dir.join(artefacts::MENTIONS), &[])?;
        artefacts::write_jsonl::<mmg_core::TripleRow>(&dir.join(artefacts::TRIPLES), &[])?;
        artefacts::write_jsonl(&dir.join(artefacts::VISUAL), &self.visual)?;
        artefacts::write_jsonl(&dir.join(artefacts::QUESTIONS), &self.questions)?;
        artefacts::write_jsonl(&dir.join(artefacts::GOLD), &self.gold)?;
        artefacts::write_jsonl(&dir.join(artefacts::SCRIPT), &self.script)?;
        artefacts::write_jsonl(&dir.join("plants.jsonl"), &[json!({"cross_modal": self.cross_modal, "cross_time": self.cross_time})])?;
        self.embeddings.save(dir)
    }
}
