//! JSON-lines scene files and train/val/test split generation.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{generate_scene, Grade, Scene, SceneParams, Vocabulary};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub vocab: Vocabulary,
}

/// Scenes with grades cycling High, Low, Normal and seeds drawn from `seed`.
pub fn generate_split(count: usize, seed: u64, stream: u64, params: &SceneParams) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|i| {
            let grade = Grade::ALL[i % 3];
            let mut scene = generate_scene(rng.gen(), grade, params)?;
            scene.id = i as u64;
            Ok(scene)
        })
        .collect()
}

impl Dataset {
    pub fn generate(train: usize, val: usize, test: usize, seed: u64, params: &SceneParams) -> Result<Self> {
        let train = generate_split(train, seed, 0, params)?;
        let val = generate_split(val, seed, 1, params)?;
        let test = generate_split(test, seed, 2, params)?;
        let vocab = Vocabulary::build(train.iter().flat_map(|s| &s.reports));
        Ok(Self {
            train,
            val,
            test,
            vocab,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, scenes) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            write_jsonl(&dir.join(format!("{name}.jsonl")), scenes)?;
        }
        let vocab_path = dir.join("vocab.json");
        fs::write(&vocab_path, self.vocab.to_json()?).map_err(|e| Error::io(&vocab_path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = |name: &str| -> PathBuf { dir.join(name) };
        let need = |p: PathBuf| -> Result<PathBuf> {
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::DataMissing(p.display().to_string()))
            }
        };
        Ok(Self {
            train: read_jsonl(&need(path("train.jsonl"))?)?,
            val: read_jsonl(&need(path("val.jsonl"))?)?,
            test: read_jsonl(&need(path("test.jsonl"))?)?,
            vocab: read_vocab(&need(path("vocab.json"))?)?,
        })
    }
}

pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for scene in scenes {
        serde_json::to_writer(&mut out, scene)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates one scene per non-empty line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DataMissing(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut scenes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |detail: String| Error::Malformed {
            path: path.to_owned(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let scene: Scene = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        scene.validate().map_err(malformed)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_owned(),
        detail: e.to_string(),
    })
}
