//! Run configuration: the attack settings plus how the victim is built.

use std::fs;
use std::path::{Path, PathBuf};

use gradinv::attack::AttackConfig;
use gradinv::{Error, Preset, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub attack: AttackConfig,
    pub preset: Preset,
    /// Victim batch size.
    pub k: usize,
    /// Draw the victim batch without repeated labels.
    pub distinct: bool,
    /// IDX image and label files; synthetic data when unset.
    pub dataset_images: Option<PathBuf>,
    pub dataset_labels: Option<PathBuf>,
    /// Adam steps spent training the victim before its gradient is taken.
    pub train_steps: usize,
    /// Include batch-norm batch statistics in the bundle.
    pub bn_stats: bool,
    /// Images per row in exported montages; one row when unset.
    pub per_row: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            attack: AttackConfig::desk(),
            preset: Preset::Tinier,
            k: 1,
            distinct: true,
            dataset_images: None,
            dataset_labels: None,
            train_steps: 0,
            bn_stats: true,
            per_row: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Sets one key. `weights = reference|desk` resets every loss weight to that
    /// preset, so later lines can still adjust single weights.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "distinct" => self.distinct = parse(key, value)?,
            "dataset_images" => self.dataset_images = Some(value.into()),
            "dataset_labels" => self.dataset_labels = Some(value.into()),
            "train_steps" => self.train_steps = parse(key, value)?,
            "bn_stats" => self.bn_stats = parse(key, value)?,
            "per_row" => self.per_row = Some(parse(key, value)?),
            "weights" => {
                let w = match value {
                    "reference" => AttackConfig::default(),
                    "desk" => AttackConfig::desk(),
                    other => return Err(Error::InvalidSpec(format!("`weights`: unknown preset `{other}`"))),
                };
                let a = &mut self.attack;
                (a.alpha_grad, a.alpha_tv, a.alpha_l2, a.alpha_bn, a.alpha_group, a.alpha_noise) =
                    (w.alpha_grad, w.alpha_tv, w.alpha_l2, w.alpha_bn, w.alpha_group, w.alpha_noise);
            }
            _ => self.attack.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and text
    /// after `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--set` overrides, then the seed.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            config.apply_text(&text)?;
        }
        for kv in overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("--set expects key=value, got `{kv}`")))?;
            config.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = seed {
            config.attack.seed = seed;
        }
        config.attack.validate()?;
        Ok(config)
    }

    /// `key = value` text that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "preset = {}\nk = {}\ndistinct = {}\ntrain_steps = {}\nbn_stats = {}\n",
            match self.preset {
                Preset::Tiny => "tiny",
                Preset::Tinier => "tinier",
            },
            self.k,
            self.distinct,
            self.train_steps,
            self.bn_stats,
        );
        for (key, path) in [("dataset_images", &self.dataset_images), ("dataset_labels", &self.dataset_labels)] {
            if let Some(p) = path {
                s += &format!("{key} = {}\n", p.display());
            }
        }
        if let Some(n) = self.per_row {
            s += &format!("per_row = {n}\n");
        }
        s + &self.attack.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# victim\nk = 4   # four images\n\nweights = reference\nalpha_tv = 0.5\n")
            .unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.attack.alpha_bn, AttackConfig::default().alpha_bn);
        assert_eq!(c.attack.alpha_tv, 0.5);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::default().apply_text("k = 2\n\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("k = 3\npreset = tiny\nper_row = 2\nlabels = 1,2,3\nconsensus = lazy\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
    }
}
