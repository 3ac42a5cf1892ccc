//! Closed label sets for rooms and landmarks and their fixed feature embeddings.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};

pub const ROOMS: [&str; 8] = [
    "kitchen", "hallway", "bedroom", "bathroom", "lounge", "office", "garage", "closet",
];

pub const LANDMARKS: [&str; 10] = [
    "door", "counter", "table", "sofa", "stairs", "window", "plant", "painting", "fridge", "bed",
];

/// Seed of the label embedding table; shared by every world so that
/// label semantics transfer to unseen layouts.
const LABEL_TABLE_SEED: u64 = 0x1abe_15ee_d000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Room(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Landmark(pub u8);

impl Room {
    pub fn name(self) -> &'static str {
        ROOMS[self.0 as usize]
    }
}

impl Landmark {
    pub fn name(self) -> &'static str {
        LANDMARKS[self.0 as usize]
    }
}

impl fmt::Display for Room {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Room {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        ROOMS
            .iter()
            .position(|r| *r == s)
            .map(|i| Room(i as u8))
            .ok_or_else(|| format!("unknown room label {s}"))
    }
}

impl TryFrom<String> for Landmark {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        LANDMARKS
            .iter()
            .position(|r| *r == s)
            .map(|i| Landmark(i as u8))
            .ok_or_else(|| format!("unknown landmark label {s}"))
    }
}

impl From<Room> for String {
    fn from(r: Room) -> String {
        r.name().to_string()
    }
}

impl From<Landmark> for String {
    fn from(l: Landmark) -> String {
        l.name().to_string()
    }
}

fn embedding(kind: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = stream(LABEL_TABLE_SEED, Purpose::Labels, kind, index);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn room_embedding(room: Room, dim: usize) -> Vec<f64> {
    embedding(0, room.0 as u64, dim)
}

pub fn landmark_embedding(landmark: Landmark, dim: usize) -> Vec<f64> {
    embedding(1, landmark.0 as u64, dim)
}
