//! Closed vocabulary and the templated route-instruction grammar.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

use super::labels::{Landmark, Room, LANDMARKS, ROOMS};
use super::World;

pub const PAD: u16 = 0;
pub const MASK: u16 = 1;
pub const CLS: u16 = 2;

/// Longest instruction, in tokens, including `[CLS]`.
pub const L_MAX: usize = 40;

const SPECIALS: [&str; 3] = ["[PAD]", "[MASK]", "[CLS]"];
const WORDS: [&str; 14] = [
    "turn", "go", "head", "walk", "into", "to", "the", "past", "towards", "stop", "at", "in", "and", "then",
];
const DIRECTIONS: [&str; 4] = ["left", "right", "straight", "back"];

/// The closed vocabulary: specials, grammar words, directions, rooms, landmarks.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Vocab {
    pub fn get() -> &'static Vocab {
        static VOCAB: std::sync::OnceLock<Vocab> = std::sync::OnceLock::new();
        VOCAB.get_or_init(|| {
            let words = SPECIALS
                .iter()
                .chain(&WORDS)
                .chain(&DIRECTIONS)
                .chain(&ROOMS)
                .chain(&LANDMARKS)
                .copied()
                .collect();
            Vocab { words }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u16> {
        self.words.iter().position(|w| *w == word).map(|i| i as u16)
    }

    pub fn word(&self, id: u16) -> Option<&'static str> {
        self.words.get(id as usize).copied()
    }

    fn must(&self, word: &str) -> u16 {
        self.id(word).expect("grammar word in vocabulary")
    }

    pub fn is_special(id: u16) -> bool {
        id <= CLS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<u16>,
}

impl Instruction {
    pub fn new(tokens: Vec<u16>) -> Result<Self> {
        let v = Vocab::get().len();
        if let Some(bad) = tokens.iter().find(|t| **t as usize >= v) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| *t as usize).collect()
    }

    pub fn text(&self) -> String {
        let vocab = Vocab::get();
        self.tokens
            .iter()
            .filter_map(|t| vocab.word(*t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.resize(len.max(tokens.len()), PAD);
        Self { tokens }
    }
}

/// Coarse relative direction of a heading change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Left,
    Right,
    Straight,
    Back,
}

impl Turn {
    /// `relative` is the signed heading change in radians, counter-clockwise positive.
    pub fn classify(relative: f64) -> Turn {
        let r = super::wrap_angle(relative);
        if r.abs() <= PI / 6.0 {
            Turn::Straight
        } else if r.abs() >= 5.0 * PI / 6.0 {
            Turn::Back
        } else if r > 0.0 {
            Turn::Left
        } else {
            Turn::Right
        }
    }

    fn word(self) -> &'static str {
        match self {
            Turn::Left => "left",
            Turn::Right => "right",
            Turn::Straight => "straight",
            Turn::Back => "back",
        }
    }
}

/// One slot of a clause template.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Word(&'static str),
    Dir,
    Room,
    Landmark,
}

use Slot::{Dir, Landmark as Lm, Room as Rm, Word as W};

const MOVE_TEMPLATES: [&[Slot]; 4] = [
    &[W("turn"), Dir, W("into"), W("the"), Rm],
    &[W("go"), Dir, W("to"), W("the"), Rm],
    &[W("head"), Dir, W("towards"), W("the"), Lm],
    &[W("walk"), Dir, W("past"), W("the"), Lm],
];
const STOP_ROOM: &[Slot] = &[W("stop"), W("in"), W("the"), Rm];
const STOP_LANDMARK: &[Slot] = &[W("stop"), W("at"), W("the"), Lm];

/// Every label and direction fills its slot with exactly one token.
fn template_len(t: &[Slot]) -> usize {
    t.len()
}

/// Upper bound on instruction length for paths of `hops` edges, obtained by
/// taking the longest move template per hop and the longest stop template.
pub fn max_instruction_tokens(hops: usize) -> usize {
    let longest_move = MOVE_TEMPLATES.iter().map(|t| template_len(t)).max().unwrap_or(0);
    let longest_stop = template_len(STOP_ROOM).max(template_len(STOP_LANDMARK));
    1 + hops * longest_move + longest_stop
}

fn fill(out: &mut Vec<u16>, template: &[Slot], dir: Turn, room: Room, landmark: Option<Landmark>) {
    let vocab = Vocab::get();
    for slot in template {
        let word = match slot {
            W(w) => w,
            Dir => dir.word(),
            Rm => room.name(),
            Lm => landmark.expect("landmark template needs a landmark").name(),
        };
        out.push(vocab.must(word));
    }
}

/// Renders one clause per hop followed by a stop clause.
///
/// Directions are relative to the heading the agent holds when it reaches
/// each node; the first hop is relative to `start_heading`.
pub fn render_instruction(world: &World, path: &[usize], start_heading: f64, grammar_seed: u64) -> Result<Instruction> {
    if path.is_empty() {
        return Err(Error::Input("empty path".into()));
    }
    for w in path.windows(2) {
        if world.edge_length(w[0], w[1]).is_none() {
            return Err(Error::Input(format!("path hop {} -> {} is not an edge", w[0], w[1])));
        }
    }
    let mut rng = stream(grammar_seed, Purpose::Grammar, 0, 0);
    let mut tokens = vec![CLS];
    let mut heading = start_heading;
    for hop in path.windows(2) {
        let next = &world.nodes[hop[1]];
        let abs = world.heading(hop[0], hop[1]);
        let dir = Turn::classify(abs - heading);
        heading = abs;
        let landmark = if next.landmarks.is_empty() {
            None
        } else {
            Some(next.landmarks[rng.random_range(0..next.landmarks.len())])
        };
        let choices: Vec<&[Slot]> = MOVE_TEMPLATES
            .iter()
            .copied()
            .filter(|t| landmark.is_some() || !t.iter().any(|s| matches!(s, Lm)))
            .collect();
        let template = choices[rng.random_range(0..choices.len())];
        fill(&mut tokens, template, dir, next.room, landmark);
    }
    let goal = &world.nodes[*path.last().expect("nonempty")];
    if !goal.landmarks.is_empty() && rng.random_bool(0.5) {
        let lm = goal.landmarks[rng.random_range(0..goal.landmarks.len())];
        fill(&mut tokens, STOP_LANDMARK, Turn::Straight, goal.room, Some(lm));
    } else {
        fill(&mut tokens, STOP_ROOM, Turn::Straight, goal.room, None);
    }
    Instruction::new(tokens)
}
