use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Purpose};
use crate::world::{generate_world_with, sample_episode, EpisodeSpec, SplitTag, World, WorldParams};

use super::DataConfig;

/// One episode, pointing into a world list.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub world: usize,
    pub spec: EpisodeSpec,
}

/// Train and val_unseen worlds, and the episodes drawn on them.
///
/// val_seen episodes live on the training worlds but use their own sampling
/// seeds, so the layouts are familiar and the routes are new.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_worlds: Vec<World>,
    pub val_unseen_worlds: Vec<World>,
    pub train: Vec<Episode>,
    pub val_seen: Vec<Episode>,
    pub val_unseen: Vec<Episode>,
}

fn world_seed(base: u64, split: SplitTag, i: usize) -> u64 {
    derive_seed(base, Purpose::World, split as u64, i as u64)
}

fn episodes(worlds: &[World], per_world: usize, base: u64, tag: u64, cfg: &DataConfig) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(worlds.len() * per_world);
    for (w, world) in worlds.iter().enumerate() {
        for j in 0..per_world {
            let seed = derive_seed(base, Purpose::Episode, tag << 32 | w as u64, j as u64);
            out.push(Episode { world: w, spec: sample_episode(world, seed, cfg.min_len, cfg.max_len)? });
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, feature_dim: usize) -> Result<Self> {
        let params = WorldParams {
            n_nodes: cfg.nodes,
            max_degree: cfg.max_degree,
            feature_dim,
            ..WorldParams::default()
        };
        let make = |split: SplitTag, n: usize| -> Result<Vec<World>> {
            (0..n).map(|i| generate_world_with(world_seed(cfg.seed, split, i), split, &params)).collect()
        };
        let train = make(SplitTag::Train, cfg.train_worlds)?;
        let unseen = make(SplitTag::ValUnseen, cfg.val_unseen_worlds)?;
        Self::from_worlds(train, unseen, cfg)
    }

    /// Reads every `*.json` world in `dir`, split by each world's tag.
    /// Worlds tagged val_seen are treated as training layouts.
    pub fn load_dir(dir: &Path, cfg: &DataConfig) -> Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let (mut train, mut unseen) = (Vec::new(), Vec::new());
        for f in files {
            let w = World::load(&f)?;
            match w.split {
                SplitTag::ValUnseen => unseen.push(w),
                SplitTag::Train | SplitTag::ValSeen => train.push(w),
            }
        }
        Self::from_worlds(train, unseen, cfg)
    }

    pub fn from_worlds(train_worlds: Vec<World>, val_unseen_worlds: Vec<World>, cfg: &DataConfig) -> Result<Self> {
        if train_worlds.is_empty() {
            return Err(Error::Input("no training worlds".into()));
        }
        let train_seeds: HashSet<u64> = train_worlds.iter().map(|w| w.seed).collect();
        if let Some(w) = val_unseen_worlds.iter().find(|w| train_seeds.contains(&w.seed)) {
            return Err(Error::Input(format!("val_unseen world seed {} also appears in train", w.seed)));
        }
        let dim = train_worlds[0].feature_dim();
        if train_worlds.iter().chain(&val_unseen_worlds).any(|w| w.feature_dim() != dim) {
            return Err(Error::Input("worlds disagree on feature width".into()));
        }
        Ok(Self {
            train: episodes(&train_worlds, cfg.train_episodes_per_world, cfg.seed, 0, cfg)?,
            val_seen: episodes(&train_worlds, cfg.eval_episodes_per_world, cfg.seed, 1, cfg)?,
            val_unseen: episodes(&val_unseen_worlds, cfg.eval_episodes_per_world, cfg.seed, 2, cfg)?,
            train_worlds,
            val_unseen_worlds,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.train_worlds[0].feature_dim()
    }

    pub fn worlds(&self, split: SplitTag) -> &[World] {
        match split {
            SplitTag::Train | SplitTag::ValSeen => &self.train_worlds,
            SplitTag::ValUnseen => &self.val_unseen_worlds,
        }
    }

    pub fn episodes(&self, split: SplitTag) -> &[Episode] {
        match split {
            SplitTag::Train => &self.train,
            SplitTag::ValSeen => &self.val_seen,
            SplitTag::ValUnseen => &self.val_unseen,
        }
    }
}
