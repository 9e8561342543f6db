//! Seeded multi-skill corpus for desk-scale experiments.
//!
//! Four skills (`SQL`, `BOOK`, `Hotel`, `Train`) and six example classes:
//! SQL and BOOK queries in each domain, and a plain lookup answer per domain
//! that copies values out of a filtered memory record.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::data::{populate_memory, DialogueExample, MemoryRecord, SpeechAct, Speaker};
use crate::error::{contract, Result};
use crate::query::{synthesize_book_query, synthesize_sql_query, Clause, Relation};

pub const SYNTHETIC_SKILLS: [&str; 4] = ["SQL", "BOOK", "Hotel", "Train"];
pub const SYNTHETIC_DOMAINS: [&str; 2] = ["hotel", "train"];

const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const STARS: [&str; 5] = ["1", "2", "3", "4", "5"];
const KINDS: [&str; 2] = ["guesthouse", "lodge"];
const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const CITIES: [&str; 8] = ["cambridge", "london", "ely", "norwich", "stevenage", "peterborough", "stansted", "leicester"];
const TIMES: [&str; 8] = ["0815", "0900", "1030", "1215", "1400", "1530", "1745", "2000"];
const HOTELS: [&str; 12] = [
    "acorn", "alpha", "bridge", "cityroomz", "gonville", "hamilton", "lovell", "alexander", "allenbell", "aylesbray",
    "carolina", "warkworth",
];
const GREETINGS: [&[&str]; 3] = [&["hello", "how", "can", "i", "help"], &["what", "can", "i", "do", "for", "you"], &["good", "day", "how", "may", "i", "help"]];

/// The six generated example classes, in stratification order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticClass {
    Sql(&'static str),
    Book(&'static str),
    Lookup(&'static str),
}

impl SyntheticClass {
    pub const ALL: [SyntheticClass; 6] = [
        SyntheticClass::Sql("hotel"),
        SyntheticClass::Sql("train"),
        SyntheticClass::Book("hotel"),
        SyntheticClass::Book("train"),
        SyntheticClass::Lookup("hotel"),
        SyntheticClass::Lookup("train"),
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub skills: Vec<String>,
    pub train: Vec<DialogueExample>,
    pub valid: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
}

/// Deterministic corpus with `sizes = [train, valid, test]` examples.
/// Classes are balanced exactly up to the remainder of `size / 6`.
pub fn generate_synthetic_corpus(seed: u64, sizes: [usize; 3]) -> Result<SyntheticCorpus> {
    if sizes.contains(&0) {
        return Err(contract("split sizes must be positive"));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut splits = Vec::with_capacity(3);
    for size in sizes {
        let mut classes: Vec<SyntheticClass> = (0..size).map(|i| SyntheticClass::ALL[i % 6]).collect();
        classes.shuffle(&mut rng);
        let mut split = Vec::with_capacity(size);
        for class in classes {
            split.push(generate_example(&mut rng, class)?);
        }
        splits.push(split);
    }
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(SyntheticCorpus { skills: SYNTHETIC_SKILLS.iter().map(|s| s.to_string()).collect(), train, valid, test })
}

struct Builder {
    history: Vec<String>,
    types: Vec<String>,
    segments: Vec<String>,
    turn: usize,
}

impl Builder {
    fn new() -> Self {
        Builder { history: Vec::new(), types: Vec::new(), segments: Vec::new(), turn: 0 }
    }

    fn turn(&mut self, speaker: Speaker, tokens: &[String]) {
        let seg = format!("turn{}", self.turn);
        for t in tokens {
            self.history.push(t.clone());
            self.types.push(speaker.tag().to_string());
            self.segments.push(seg.clone());
        }
        self.turn += 1;
    }

    fn finish(mut self, memory: crate::data::MemoryTokens, target: Vec<String>, skills: &[&str]) -> DialogueExample {
        self.types.extend(memory.types);
        self.segments.extend(memory.segments);
        DialogueExample {
            history: self.history,
            memory: memory.tokens,
            target,
            skills: skills.iter().map(|s| s.to_string()).collect(),
            types: self.types,
            segments: self.segments,
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn greet<R: Rng>(rng: &mut R, b: &mut Builder) {
    let g: Vec<String> = GREETINGS[rng.gen_range(0..GREETINGS.len())].iter().map(|s| s.to_string()).collect();
    b.turn(Speaker::Sys, &g);
}

/// Search constraints with their surface phrase.
fn hotel_constraints<R: Rng>(rng: &mut R) -> Vec<(Clause, Vec<String>)> {
    let mut pool: Vec<(Clause, Vec<String>)> = Vec::new();
    let area = pick(rng, &AREAS);
    pool.push((Clause::eq("area", area), words(&format!("in the {area}"))));
    let price = pick(rng, &PRICES);
    pool.push((Clause::eq("pricerange", price), words(&format!("that is {price}"))));
    let stars = pick(rng, &STARS);
    pool.push((Clause::eq("stars", stars), words(&format!("with {stars} stars"))));
    let kind = pick(rng, &KINDS);
    pool.push((Clause::eq("type", kind), words(&format!("of type {kind}"))));
    if rng.gen_bool(0.5) {
        pool.push((Clause::eq("parking", "yes"), words("with free parking")));
    } else {
        pool.push((Clause::eq("parking", "no"), words("without parking")));
    }
    pool.push((Clause::eq("internet", "yes"), words("with wifi")));
    pool.shuffle(rng);
    let k = rng.gen_range(1..=3);
    pool.truncate(k);
    pool
}

fn train_constraints<R: Rng>(rng: &mut R) -> Vec<(Clause, Vec<String>)> {
    let mut pool: Vec<(Clause, Vec<String>)> = Vec::new();
    let mut cities = CITIES.to_vec();
    cities.shuffle(rng);
    pool.push((Clause::eq("destination", cities[0]), words(&format!("going to {}", cities[0]))));
    pool.push((Clause::eq("departure", cities[1]), words(&format!("leaving from {}", cities[1]))));
    let day = pick(rng, &DAYS);
    pool.push((Clause::eq("day", day), words(&format!("on {day}"))));
    let arrive = pick(rng, &TIMES);
    pool.push((Clause::with("arriveBy", Relation::Less, arrive), words(&format!("arriving before {arrive}"))));
    let leave = pick(rng, &TIMES);
    pool.push((Clause::with("leaveAt", Relation::Greater, leave), words(&format!("leaving after {leave}"))));
    pool.shuffle(rng);
    let k = rng.gen_range(1..=3);
    pool.truncate(k);
    pool
}

fn query_example<R: Rng>(rng: &mut R, domain: &'static str, book: bool) -> Result<DialogueExample> {
    let mut b = Builder::new();
    greet(rng, &mut b);
    let (clauses, utterance) = if book {
        let people = rng.gen_range(1..=8).to_string();
        let day = pick(rng, &DAYS);
        let mut clauses = vec![Clause::eq("people", &people), Clause::eq("day", day)];
        let unit = if domain == "hotel" { "rooms" } else { "seats" };
        let mut u = words(&format!("please reserve {unit} for {people} people on {day}"));
        if domain == "hotel" && rng.gen_bool(0.5) {
            let stay = rng.gen_range(1..=5).to_string();
            u.extend(words(&format!("for {stay} nights")));
            clauses.push(Clause::eq("stay", &stay));
        }
        (clauses, u)
    } else {
        let constraints = if domain == "hotel" { hotel_constraints(rng) } else { train_constraints(rng) };
        let opener = if domain == "hotel" { pick(rng, &["i need a place to stay", "i want somewhere to sleep"]) } else { pick(rng, &["i need to travel", "i want a ride"]) };
        let mut u = words(opener);
        let mut clauses = Vec::new();
        for (c, phrase) in constraints {
            u.extend(phrase);
            clauses.push(c);
        }
        (clauses, u)
    };
    b.turn(Speaker::Usr, &utterance);
    let (target, skill) = if book {
        (synthesize_book_query(domain, &clauses)?, "BOOK")
    } else {
        (synthesize_sql_query(domain, &clauses)?, "SQL")
    };
    let domain_skill = if domain == "hotel" { "Hotel" } else { "Train" };
    Ok(b.finish(Default::default(), target, &[skill, domain_skill]))
}

fn hotel_records<R: Rng>(rng: &mut R) -> Result<Vec<MemoryRecord>> {
    HOTELS
        .iter()
        .map(|name| {
            MemoryRecord::new(&[
                ("name", name),
                ("area", pick(rng, &AREAS)),
                ("pricerange", pick(rng, &PRICES)),
                ("stars", pick(rng, &STARS)),
            ])
        })
        .collect()
}

fn train_id<R: Rng>(rng: &mut R) -> String {
    format!("TR{}", rng.gen_range(1000..10000))
}

fn lookup_example<R: Rng>(rng: &mut R, domain: &'static str) -> Result<DialogueExample> {
    let mut b = Builder::new();
    greet(rng, &mut b);
    if domain == "hotel" {
        let records = hotel_records(rng)?;
        let chosen = &records[rng.gen_range(0..records.len())];
        let name = chosen.get("name").unwrap_or_default().to_string();
        b.turn(Speaker::Usr, &words(&format!("tell me about {name}")));
        let act = SpeechAct::new("INFORM-HOTEL", &[("name", &name)]);
        let memory = populate_memory(&records, &[act]);
        let target = words(&format!(
            "{name} is a {} hotel in the {} with {} stars",
            chosen.get("pricerange").unwrap_or_default(),
            chosen.get("area").unwrap_or_default(),
            chosen.get("stars").unwrap_or_default()
        ));
        Ok(b.finish(memory, target, &["Hotel"]))
    } else {
        let count = rng.gen_range(6..=8);
        let mut records = Vec::with_capacity(count);
        let mut ids: Vec<String> = Vec::with_capacity(count);
        while ids.len() < count {
            let id = train_id(rng);
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        for id in &ids {
            let mut cities = CITIES.to_vec();
            cities.shuffle(rng);
            records.push(MemoryRecord::new(&[
                ("trainID", id),
                ("departure", cities[0]),
                ("destination", cities[1]),
                ("leaveAt", pick(rng, &TIMES)),
            ])?);
        }
        let chosen = &records[rng.gen_range(0..records.len())];
        let id = chosen.get("trainID").unwrap_or_default().to_string();
        b.turn(Speaker::Usr, &words(&format!("when does {id} leave")));
        let act = SpeechAct::new("INFORM-TRAIN", &[("trainID", &id)]);
        let memory = populate_memory(&records, &[act]);
        let target = words(&format!(
            "{id} leaves {} at {} for {}",
            chosen.get("departure").unwrap_or_default(),
            chosen.get("leaveAt").unwrap_or_default(),
            chosen.get("destination").unwrap_or_default()
        ));
        Ok(b.finish(memory, target, &["Train"]))
    }
}

pub fn generate_example<R: Rng>(rng: &mut R, class: SyntheticClass) -> Result<DialogueExample> {
    match class {
        SyntheticClass::Sql(d) => query_example(rng, d, false),
        SyntheticClass::Book(d) => query_example(rng, d, true),
        SyntheticClass::Lookup(d) => lookup_example(rng, d),
    }
}
