//! Plain-text dataset manifest.
//!
//! ```text
//! split=train
//! seed=42
//! num_classes=4
//! pair=img_00000.ppm map_00000.pgm
//! ```
//!
//! Pair paths are relative to the directory holding the manifest.

use std::path::{Path, PathBuf};

use super::pnm;
use super::raster::{ImageBuffer, MapRaster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub image: PathBuf,
    pub map: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pairs: Vec<Pair>,
    pub split: String,
    pub seed: u64,
    pub num_classes: usize,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.txt";

    pub fn to_text(&self) -> String {
        let mut s = format!("split={}\nseed={}\nnum_classes={}\n", self.split, self.seed, self.num_classes);
        for p in &self.pairs {
            s.push_str(&format!("pair={} {}\n", p.image.display(), p.map.display()));
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut m = Self {
            root: root.to_path_buf(),
            pairs: Vec::new(),
            split: "train".into(),
            seed: 0,
            num_classes: 4,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            match key.trim() {
                "split" => m.split = value.trim().to_string(),
                "seed" => m.seed = value.trim().parse().map_err(|_| err("bad seed"))?,
                "num_classes" => m.num_classes = value.trim().parse().map_err(|_| err("bad num_classes"))?,
                "pair" => {
                    let mut parts = value.split_whitespace();
                    let (Some(image), Some(map), None) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(err("pair needs an image and a map path"));
                    };
                    m.pairs.push(Pair {
                        image: image.into(),
                        map: map.into(),
                    });
                }
                other => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        std::fs::write(self.root.join(Self::FILE_NAME), self.to_text())?;
        Ok(())
    }

    /// Accepts the manifest file itself or the directory containing it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(Self::FILE_NAME) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn load_pair(&self, index: usize) -> Result<(ImageBuffer, MapRaster)> {
        let pair = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Config(format!("pair index {index} out of range")))?;
        let image = pnm::read_image(&self.root.join(&pair.image))?;
        let map = pnm::read_map(&self.root.join(&pair.map), self.num_classes)?;
        if !map.same_dims(&image) {
            return Err(Error::Format(format!(
                "{}: map {}x{} does not match image {}x{}",
                pair.map.display(),
                map.width(),
                map.height(),
                image.width(),
                image.height()
            )));
        }
        Ok((image, map))
    }

    pub fn load_all(&self) -> Result<Vec<(ImageBuffer, MapRaster)>> {
        (0..self.pairs.len()).map(|i| self.load_pair(i)).collect()
    }
}
