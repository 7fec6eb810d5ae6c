//! Plain-text run configuration: `key = value` lines grouped under
//! `[section]` headers, `#` comments. Unknown sections and keys are errors.

use std::path::Path;
use std::str::FromStr;

use lrcr::cost_volume::MatcherConfig;
use lrcr::data::SceneParams;
use lrcr::pipeline::PipelineConfig;
use lrcr::training::TrainConfig;
use lrcr::{Error, ModelConfig, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Seeds data generation, the train/validation split and model init.
    pub seed: u64,
    pub scene: SceneParams,
    pub samples: usize,
    pub val_samples: usize,
    pub census_window: usize,
    pub matcher: MatcherConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub audit_points: u64,
    pub audit_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = PipelineConfig::desk();
        RunConfig {
            seed: desk.seed,
            matcher: MatcherConfig {
                d_max: desk.scene.d_max,
                ..MatcherConfig::default()
            },
            scene: desk.scene,
            samples: desk.n_train + desk.n_val,
            val_samples: desk.n_val,
            census_window: desk.census_window,
            stage1: desk.stage1,
            stage2: desk.stage2,
            audit_points: 10,
            audit_seed: 1000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_clip(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn set_stage(cfg: &mut TrainConfig, full: &str, key: &str, value: &str) -> Result<()> {
    match key {
        "epochs" => cfg.epochs = parse(full, value)?,
        "base_lr" => cfg.base_lr = parse(full, value)?,
        "lr_decay_every" => cfg.lr_decay_every = parse(full, value)?,
        "decay_factor" => cfg.decay_factor = parse(full, value)?,
        "steps" => cfg.steps = parse(full, value)?,
        "momentum" => cfg.momentum = parse(full, value)?,
        "clip_norm" => cfg.clip_norm = parse_clip(full, value)?,
        "seed" => cfg.seed = parse(full, value)?,
        _ => return Err(unknown(full)),
    }
    Ok(())
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown config key '{key}'"))
}

impl RunConfig {
    /// Sets one `section.key` (or top-level `key`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (section, name) = key.split_once('.').unwrap_or(("", key));
        match (section, name) {
            ("", "seed") => self.seed = parse(key, value)?,
            ("scene", "height") => self.scene.height = parse(key, value)?,
            ("scene", "width") => self.scene.width = parse(key, value)?,
            ("scene", "d_max") => {
                self.scene.d_max = parse(key, value)?;
                self.matcher.d_max = self.scene.d_max;
            }
            ("scene", "d_bg") => self.scene.d_bg = parse(key, value)?,
            ("scene", "rect_count") => self.scene.rect_count = parse(key, value)?,
            ("scene", "rect_disp_min") => self.scene.rect_disp_min = parse(key, value)?,
            ("scene", "rect_disp_max") => self.scene.rect_disp_max = parse(key, value)?,
            ("scene", "texture_amplitude") => self.scene.texture_amplitude = parse(key, value)?,
            ("scene", "sensor_noise") => self.scene.sensor_noise = parse(key, value)?,
            ("data", "samples") => self.samples = parse(key, value)?,
            ("data", "val_samples") => self.val_samples = parse(key, value)?,
            ("data", "census_window") => self.census_window = parse(key, value)?,
            ("matcher", "margin") => self.matcher.margin = parse(key, value)?,
            ("matcher", "epochs") => self.matcher.epochs = parse(key, value)?,
            ("matcher", "lr") => self.matcher.lr = parse(key, value)?,
            ("matcher", "momentum") => self.matcher.momentum = parse(key, value)?,
            ("matcher", "seed") => self.matcher.seed = parse(key, value)?,
            ("matcher", "pixels_per_sample") => self.matcher.pixels_per_sample = parse(key, value)?,
            ("stage1", k) => set_stage(&mut self.stage1, key, k, value)?,
            ("stage2", k) => set_stage(&mut self.stage2, key, k, value)?,
            ("audit", "points") => self.audit_points = parse(key, value)?,
            ("audit", "seed") => self.audit_seed = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got '{raw}'", n + 1)));
            };
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            self.set(&key, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.census_window % 2 == 0 {
            return Err(Error::Config(format!("census window must be odd, got {}", self.census_window)));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.scene.d_max, self.scene.height, self.scene.width)
    }

    /// Canonical text form; parses back to the same configuration.
    pub fn render(&self) -> String {
        let (sc, m) = (&self.scene, &self.matcher);
        let stage = |t: &TrainConfig| {
            vec![
                ("epochs", t.epochs.to_string()),
                ("base_lr", t.base_lr.to_string()),
                ("lr_decay_every", t.lr_decay_every.to_string()),
                ("decay_factor", t.decay_factor.to_string()),
                ("steps", t.steps.to_string()),
                ("momentum", t.momentum.to_string()),
                ("clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string())),
                ("seed", t.seed.to_string()),
            ]
        };
        let sections = [
            (
                "scene",
                vec![
                    ("height", sc.height.to_string()),
                    ("width", sc.width.to_string()),
                    ("d_max", sc.d_max.to_string()),
                    ("d_bg", sc.d_bg.to_string()),
                    ("rect_count", sc.rect_count.to_string()),
                    ("rect_disp_min", sc.rect_disp_min.to_string()),
                    ("rect_disp_max", sc.rect_disp_max.to_string()),
                    ("texture_amplitude", sc.texture_amplitude.to_string()),
                    ("sensor_noise", sc.sensor_noise.to_string()),
                ],
            ),
            (
                "data",
                vec![
                    ("samples", self.samples.to_string()),
                    ("val_samples", self.val_samples.to_string()),
                    ("census_window", self.census_window.to_string()),
                ],
            ),
            (
                "matcher",
                vec![
                    ("margin", m.margin.to_string()),
                    ("epochs", m.epochs.to_string()),
                    ("lr", m.lr.to_string()),
                    ("momentum", m.momentum.to_string()),
                    ("seed", m.seed.to_string()),
                    ("pixels_per_sample", m.pixels_per_sample.to_string()),
                ],
            ),
            ("stage1", stage(&self.stage1)),
            ("stage2", stage(&self.stage2)),
            (
                "audit",
                vec![("points", self.audit_points.to_string()), ("seed", self.audit_seed.to_string())],
            ),
        ];
        let mut out = format!("seed = {}\n", self.seed);
        for (name, entries) in sections {
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut a = RunConfig::default();
        a.apply_text("seed = 3\n[stage2]\nclip_norm = none\n[scene]\nsensor_noise = 0.125").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.render()).unwrap();
        assert_eq!(a.render(), b.render());
        assert_eq!(b.seed, 3);
        assert_eq!(b.stage2.clip_norm, None);
        assert_eq!(b.scene.sensor_noise, 0.125);
    }

    #[test]
    fn sections_scope_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n[stage1]\nepochs = 2 # trailing\n[matcher]\nepochs = 4\n").unwrap();
        assert_eq!((c.stage1.epochs, c.matcher.epochs), (2, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("[scene]\ncolour = 3"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("[nowhere]\nseed = 3"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("stage1.warmup=3"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_override("scene.height=tall").is_err());
        assert!(c.apply_override("stage2.clip_norm=-").is_err());
    }

    #[test]
    fn overrides_apply_and_d_max_follows_scene() {
        let mut c = RunConfig::default();
        c.apply_override("scene.d_max = 6").unwrap();
        assert_eq!((c.scene.d_max, c.matcher.d_max), (6, 6));
    }
}
