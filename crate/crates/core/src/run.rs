//! Run configuration: model, scene and training keys in one flat file.

use std::fs;
use std::path::Path;

use crate::config::{parse_pairs, render_pairs, KeyValues};
use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const RUN_FORMAT: &str = "rgbdseg-run v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Applies one `key = value`. Keys shared by several sections (class
    /// count, disparity range) go to all of them; `image_side` also sets
    /// the scene height and width.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut known = false;
        if key == "image_side" {
            known |= self.scene.set("height", value)?;
            known |= self.scene.set("width", value)?;
        }
        known |= self.model.set(key, value)?;
        known |= self.scene.set(key, value)?;
        known |= self.train.set(key, value)?;
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides, as given on a command line.
    pub fn apply_overrides<'a>(&mut self, items: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        let side = self.model.image_side;
        if self.scene.height != side || self.scene.width != side {
            return Err(Error::Config(format!(
                "scene {}x{} does not match image_side {side}",
                self.scene.height, self.scene.width
            )));
        }
        if self.scene.num_classes != self.model.num_classes {
            return Err(Error::Config("scene and model class counts differ".into()));
        }
        if f64::from(self.scene.max_disparity) != self.model.max_disparity {
            return Err(Error::Config("scene and model max_disparity differ".into()));
        }
        Ok(())
    }

    /// Every value, one per line, shared keys once; parses back to `self`.
    pub fn render(&self) -> String {
        let mut pairs = self.model.pairs();
        for p in self.scene.pairs().into_iter().chain(self.train.pairs()) {
            if !pairs.iter().any(|(k, _)| *k == p.0) {
                pairs.push(p);
            }
        }
        format!("# {RUN_FORMAT}\n{}", render_pairs(&pairs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shared_keys() {
        let mut c = RunConfig::default();
        c.apply_text("image_side = 32\nnum_classes = 5\npe_mode = 3d\nsteps = 7\nambiguity = false\n")
            .unwrap();
        assert_eq!((c.scene.height, c.scene.width, c.model.image_side), (32, 32, 32));
        assert_eq!((c.scene.num_classes, c.model.num_classes), (5, 5));
        c.validate().unwrap();
        assert_eq!(RunConfig::from_text(&c.render()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_inconsistent() {
        assert!(RunConfig::from_text("colour = red\n").is_err());
        let c = RunConfig::from_text("height = 32\n").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(["steps=3", "seed = 9"]).is_ok());
        assert_eq!((c.train.steps, c.train.seed), (3, 9));
        assert!(c.apply_overrides(["steps"]).is_err());
    }
}
