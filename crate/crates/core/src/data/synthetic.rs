//! Seeded synthetic English-like corpus.
//!
//! Sentences come from a small topic grammar with number agreement, so a
//! masked word is predictable from context to a degree that grows with how
//! much of the sentence a model can attend to.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Topic {
    nouns: &'static [(&'static str, &'static str)],
    verbs: &'static [(&'static str, &'static str)],
    adjectives: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        nouns: &[("dog", "dogs"), ("cat", "cats"), ("horse", "horses"), ("bird", "birds"), ("fox", "foxes"), ("rabbit", "rabbits"), ("wolf", "wolves"), ("sheep", "sheep")],
        verbs: &[("chases", "chase"), ("watches", "watch"), ("follows", "follow"), ("feeds", "feed"), ("hunts", "hunt"), ("ignores", "ignore")],
        adjectives: &["small", "wild", "hungry", "old", "quick", "lazy", "brown", "young"],
        places: &["farm", "forest", "field", "barn", "river", "meadow"],
    },
    Topic {
        nouns: &[("chef", "chefs"), ("baker", "bakers"), ("cook", "cooks"), ("waiter", "waiters"), ("guest", "guests"), ("farmer", "farmers")],
        verbs: &[("bakes", "bake"), ("cooks", "cook"), ("serves", "serve"), ("tastes", "taste"), ("buys", "buy"), ("slices", "slice")],
        adjectives: &["fresh", "warm", "sweet", "spicy", "salty", "busy", "careful", "tired"],
        places: &["kitchen", "market", "bakery", "restaurant", "garden", "table"],
    },
    Topic {
        nouns: &[("engineer", "engineers"), ("student", "students"), ("robot", "robots"), ("program", "programs"), ("server", "servers"), ("teacher", "teachers")],
        verbs: &[("builds", "build"), ("tests", "test"), ("repairs", "repair"), ("writes", "write"), ("studies", "study"), ("designs", "design")],
        adjectives: &["new", "clever", "broken", "fast", "quiet", "modern", "simple", "remote"],
        places: &["lab", "office", "school", "factory", "library", "network"],
    },
    Topic {
        nouns: &[("sailor", "sailors"), ("captain", "captains"), ("ship", "ships"), ("whale", "whales"), ("gull", "gulls"), ("diver", "divers")],
        verbs: &[("steers", "steer"), ("spots", "spot"), ("crosses", "cross"), ("guides", "guide"), ("reaches", "reach"), ("avoids", "avoid")],
        adjectives: &["brave", "distant", "stormy", "calm", "deep", "grey", "strong", "lonely"],
        places: &["harbor", "ocean", "island", "coast", "bay", "deck"],
    },
];

const CONNECTIVES: &[&str] = &["and", "but", "while", "because"];
const PREPOSITIONS: &[&str] = &["in", "near", "behind", "across"];

fn noun_phrase(rng: &mut ChaCha8Rng, topic: &Topic, plural: bool, out: &mut Vec<&'static str>) {
    let (sg, pl) = *topic.nouns.choose(rng).unwrap();
    out.push(if plural { *["the", "some", "many"].choose(rng).unwrap() } else { *["the", "a", "one"].choose(rng).unwrap() });
    if rng.gen_bool(0.6) {
        out.push(topic.adjectives.choose(rng).unwrap());
    }
    out.push(if plural { pl } else { sg });
}

fn clause(rng: &mut ChaCha8Rng, topic: &Topic, out: &mut Vec<&'static str>) {
    let plural = rng.gen_bool(0.5);
    noun_phrase(rng, topic, plural, out);
    let (vs, vp) = *topic.verbs.choose(rng).unwrap();
    out.push(if plural { vp } else { vs });
    let obj_plural = rng.gen_bool(0.5);
    noun_phrase(rng, topic, obj_plural, out);
    if rng.gen_bool(0.5) {
        out.push(PREPOSITIONS.choose(rng).unwrap());
        out.push("the");
        out.push(topic.places.choose(rng).unwrap());
    }
}

/// One line: one to three sentences from a single topic.
pub fn sentence(rng: &mut ChaCha8Rng) -> String {
    let topic = TOPICS.choose(rng).unwrap();
    let mut words = Vec::new();
    for s in 0..rng.gen_range(1..=3) {
        if s > 0 {
            words.push(".");
        }
        clause(rng, topic, &mut words);
        if rng.gen_bool(0.3) {
            words.push(CONNECTIVES.choose(rng).unwrap());
            clause(rng, topic, &mut words);
        }
    }
    words.push(".");
    words.join(" ")
}

/// Lines of synthetic text totalling at least `target_bytes`.
pub fn corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    while out.len() < target_bytes {
        out.push_str(&sentence(&mut rng));
        out.push('\n');
    }
    out
}

/// Exactly `n` lines.
pub fn corpus_lines(seed: u64, n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n {
        out.push_str(&sentence(&mut rng));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_sized() {
        let a = corpus(5, 10_000);
        assert!(a.len() >= 10_000);
        assert_eq!(a, corpus(5, 10_000));
        assert_ne!(a, corpus(6, 10_000));
        assert_eq!(corpus_lines(1, 50).lines().count(), 50);
    }
}
