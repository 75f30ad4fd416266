use std::path::Path;

use crate::dataset;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// An indexable image collection.
pub trait ImageCorpus: Sync {
    fn len(&self) -> usize;

    fn get(&self, i: usize) -> ImageGrid;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The procedural training corpus rooted at `seed`.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub size: usize,
    pub len: usize,
}

impl ImageCorpus for SyntheticCorpus {
    fn len(&self) -> usize {
        self.len
    }

    fn get(&self, i: usize) -> ImageGrid {
        dataset::train_image(self.seed, i as u64, self.size)
    }
}

/// Procedural images disjoint from every [`SyntheticCorpus`].
#[derive(Clone, Copy, Debug)]
pub struct HeldoutCorpus {
    pub size: usize,
    pub len: usize,
}

impl ImageCorpus for HeldoutCorpus {
    fn len(&self) -> usize {
        self.len
    }

    fn get(&self, i: usize) -> ImageGrid {
        dataset::heldout_image(i as u64, self.size)
    }
}

impl ImageCorpus for Vec<ImageGrid> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> ImageGrid {
        self[i].clone()
    }
}

/// Loads every PNG/JPEG in `dir` (sorted by file name).
pub fn load_image_dir(dir: &Path) -> Result<Vec<ImageGrid>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("image directory"));
    }
    paths.iter().map(|p| ImageGrid::load(p)).collect()
}
