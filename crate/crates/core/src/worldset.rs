//! World collections on disk (SEMWORLD files plus a split manifest) and
//! seeded in-memory pools.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::eval::{Manifest, Split, MANIFEST_FILE};
use crate::sim::{generate_world, load_world, save_world, SimError, World, WorldParams};

#[derive(Debug, Error)]
pub enum WorldSetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: SimError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Manifest(String),
}

pub type NamedWorld = (String, Arc<World>);

pub fn world_file_name(i: usize) -> String {
    format!("world_{i:04}.semworld")
}

/// `count` worlds from one seeded generator, in generation order.
pub fn generate_pool(params: &WorldParams, seed: u64, stream: u64, count: usize) -> Result<Vec<Arc<World>>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| generate_world(params, &mut rng).map(Arc::new)).collect()
}

/// Write `count` SEMWORLD files and `manifest.csv` into `dir`.
pub fn make_worlds(
    dir: &Path,
    params: &WorldParams,
    seed: u64,
    count: usize,
    train_fraction: f64,
) -> Result<Manifest, WorldSetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| WorldSetError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let worlds = generate_pool(params, seed, 0, count)?;
    let mut names = Vec::with_capacity(count);
    for (i, w) in worlds.iter().enumerate() {
        let name = world_file_name(i);
        let p = dir.join(&name);
        std::fs::write(&p, save_world(w)).map_err(io(&p))?;
        names.push(name);
    }
    let manifest = Manifest::with_ratio(names, train_fraction);
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, manifest.to_csv()).map_err(io(&p))?;
    Ok(manifest)
}

pub fn load_world_file(path: &Path) -> Result<World, WorldSetError> {
    let text = std::fs::read_to_string(path).map_err(|source| WorldSetError::Io { path: path.to_path_buf(), source })?;
    load_world(&text).map_err(|source| WorldSetError::Parse { path: path.to_path_buf(), source })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, WorldSetError> {
    Manifest::load(dir)
        .map_err(|source| WorldSetError::Io { path: dir.join(MANIFEST_FILE), source })?
        .ok_or_else(|| WorldSetError::Manifest(format!("{} has no {MANIFEST_FILE}", dir.display())))
}

/// Worlds of one split, in manifest order.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<NamedWorld>, WorldSetError> {
    manifest
        .files(split)
        .map(|f| Ok((f.to_string(), Arc::new(load_world_file(&dir.join(f))?))))
        .collect()
}
