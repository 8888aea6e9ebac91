//! Deterministic synthetic prose for corpora and task generators.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::render::TextCorpus;
use crate::seed::Rng;

/// Lowercase newspaper-register vocabulary.
pub const VOCAB: &[&str] = &[
    "the",
    "ship",
    "port",
    "harbour",
    "captain",
    "cargo",
    "sugar",
    "rum",
    "cotton",
    "coffee",
    "schooner",
    "brig",
    "sloop",
    "wharf",
    "street",
    "market",
    "town",
    "parish",
    "estate",
    "mill",
    "river",
    "bay",
    "island",
    "coast",
    "road",
    "bridge",
    "church",
    "court",
    "house",
    "store",
    "notice",
    "public",
    "sale",
    "auction",
    "reward",
    "letter",
    "office",
    "agent",
    "merchant",
    "planter",
    "clerk",
    "master",
    "owner",
    "widow",
    "son",
    "daughter",
    "servant",
    "sailor",
    "arrived",
    "sailed",
    "landed",
    "sold",
    "bought",
    "offered",
    "wanted",
    "lost",
    "found",
    "taken",
    "returned",
    "delivered",
    "signed",
    "ordered",
    "paid",
    "received",
    "stated",
    "from",
    "to",
    "with",
    "by",
    "at",
    "on",
    "for",
    "and",
    "of",
    "in",
    "near",
    "under",
    "after",
    "before",
    "during",
    "this",
    "that",
    "said",
    "last",
    "next",
    "first",
    "second",
    "new",
    "old",
    "good",
    "fine",
    "large",
    "small",
    "young",
    "tall",
    "short",
    "dark",
    "black",
    "brown",
    "monday",
    "tuesday",
    "friday",
    "saturday",
    "january",
    "march",
    "june",
    "october",
    "morning",
    "evening",
    "week",
    "month",
    "year",
    "day",
    "hour",
    "price",
    "pound",
    "dollar",
    "barrel",
    "bag",
    "cask",
    "bale",
    "ton",
    "acre",
    "mile",
    "yard",
    "boat",
    "horse",
    "cart",
    "mule",
    "cattle",
    "corn",
    "flour",
    "salt",
    "fish",
    "beef",
    "pork",
    "oil",
    "tea",
    "wine",
    "goods",
    "stock",
    "lot",
    "land",
    "field",
    "garden",
    "kitchen",
    "room",
    "door",
    "gate",
    "wind",
    "rain",
    "storm",
    "weather",
    "news",
    "report",
    "paper",
    "gazette",
    "editor",
    "price",
];

/// Uppercase names, disjoint from [`VOCAB`] once lowercased.
pub const NAMES: &[&str] = &[
    "JAMES",
    "MARY",
    "JOHN",
    "SARAH",
    "GEORGE",
    "ANN",
    "WILLIAM",
    "ELIZA",
    "THOMAS",
    "JANE",
    "HENRY",
    "RACHEL",
    "ROBERT",
    "SUSAN",
    "PETER",
    "GRACE",
    "DAVID",
    "MARTHA",
    "SAMUEL",
    "HANNAH",
    "KINGSTON",
    "BRIDGETOWN",
    "NASSAU",
    "HAVANA",
    "BRISTOL",
    "LONDON",
    "LIVERPOOL",
    "BOSTON",
    "CHARLESTON",
    "FALMOUTH",
    "MONTEGO",
    "SPANISH",
    "ROYAL",
    "MORANT",
];

pub fn sentence(rng: &mut Rng, words: (usize, usize)) -> String {
    let n = rng.gen_range(words.0..=words.1.max(words.0));
    (0..n)
        .map(|_| *VOCAB.choose(rng).expect("nonempty vocabulary"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn paragraph(rng: &mut Rng, sentences: (usize, usize)) -> String {
    let n = rng.gen_range(sentences.0..=sentences.1.max(sentences.0));
    (0..n).map(|_| sentence(rng, (6, 14))).collect::<Vec<_>>().join(" ")
}

/// A corpus of `n` generated paragraphs.
pub fn synthetic_corpus(rng: &mut Rng, n: usize) -> TextCorpus {
    TextCorpus::from_paragraphs((0..n).map(|_| paragraph(rng, (2, 8))))
}
