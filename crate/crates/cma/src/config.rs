//! Line-oriented `key = value` configuration shared by training, data
//! generation, and model geometry. `#` starts a comment; blank lines are
//! ignored; unknown keys are errors. CLI flags override file values.

use crate::data::{GenConfig, FLOW_CHANNELS};
use crate::model::BranchConfig;
use crate::train::TrainConfig;
use crate::{CmaError, Result};

#[derive(Debug, Clone)]
pub struct FullConfig {
    pub train: TrainConfig,
    pub gen: GenConfig,
    /// Videos produced by dataset generation.
    pub videos: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub cma_insertion: Vec<(usize, usize)>,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            videos: 2000,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            cma_insertion: vec![(1, 0), (2, 0)],
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> CmaError {
    CmaError::Config(format!("key {key}: cannot parse {value:?} as {what}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

/// `s:b` pairs separated by commas; the literal `none` means no insertions.
fn parse_insertions(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    if v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|pair| {
            let (s, b) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| bad(key, pair, "a stage:block pair"))?;
            Ok((parse_usize(key, s.trim())?, parse_usize(key, b.trim())?))
        })
        .collect()
}

impl FullConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.train.lr = parse_f64(key, value)?,
            "momentum" => self.train.momentum = parse_f64(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_f64(key, value)?,
            "dropout" => self.train.dropout = parse_f64(key, value)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "segments_train" => self.train.segments_train = parse_usize(key, value)?,
            "segments_test" => self.train.segments_test = parse_usize(key, value)?,
            "epochs_per_iteration" => self.train.epochs_per_iteration = parse_usize(key, value)?,
            "pretrain_epochs" => self.train.pretrain_epochs = parse_usize(key, value)?,
            "lr_drop_factor" => self.train.lr_drop_factor = parse_f64(key, value)?,
            "plateau_patience" => self.train.plateau_patience = parse_usize(key, value)?,
            "iteration_count" => self.train.iteration_count = parse_usize(key, value)?,
            "flip_prob" => self.train.flip_prob = parse_f64(key, value)?,
            "seed" => self.train.seed = parse_u64(key, value)?,
            "videos" => self.videos = parse_usize(key, value)?,
            "height" => self.gen.height = parse_usize(key, value)?,
            "width" => self.gen.width = parse_usize(key, value)?,
            "frames_per_video" => self.gen.frames_per_video = parse_usize(key, value)?,
            "classes" => self.gen.n_classes = parse_usize(key, value)?,
            "distractors" => self.gen.n_distractors = parse_usize(key, value)?,
            "radius" => self.gen.radius = parse_f64(key, value)?,
            "speed_min" => self.gen.speed_min = parse_f64(key, value)?,
            "speed_max" => self.gen.speed_max = parse_f64(key, value)?,
            "noise_sigma" => self.gen.noise_sigma = parse_f64(key, value)?,
            "stage_channels" => self.stage_channels = parse_usize_list(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_usize(key, value)?,
            "cma_insertion" => self.cma_insertion = parse_insertions(key, value)?,
            _ => return Err(CmaError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CmaError::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = FullConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn branch_configs(&self) -> (BranchConfig, BranchConfig) {
        let rgb = BranchConfig {
            input_channels: 3,
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            cma_insertion: self.cma_insertion.clone(),
            num_classes: self.gen.n_classes,
        };
        let flow = BranchConfig {
            input_channels: FLOW_CHANNELS,
            ..rgb.clone()
        };
        (rgb, flow)
    }

    /// Fully resolved listing in the same grammar, echoed before every run.
    pub fn to_text(&self) -> String {
        let insertions = if self.cma_insertion.is_empty() {
            "none".to_string()
        } else {
            self.cma_insertion
                .iter()
                .map(|(s, b)| format!("{s}:{b}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let channels = self
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "lr = {}\nmomentum = {}\nweight_decay = {}\ndropout = {}\nbatch_size = {}\n\
             segments_train = {}\nsegments_test = {}\nepochs_per_iteration = {}\n\
             pretrain_epochs = {}\nlr_drop_factor = {}\nplateau_patience = {}\n\
             iteration_count = {}\nflip_prob = {}\nseed = {}\nvideos = {}\nheight = {}\n\
             width = {}\nframes_per_video = {}\nclasses = {}\ndistractors = {}\nradius = {}\n\
             speed_min = {}\nspeed_max = {}\nnoise_sigma = {}\nstage_channels = {}\n\
             blocks_per_stage = {}\ncma_insertion = {}\n",
            self.train.lr,
            self.train.momentum,
            self.train.weight_decay,
            self.train.dropout,
            self.train.batch_size,
            self.train.segments_train,
            self.train.segments_test,
            self.train.epochs_per_iteration,
            self.train.pretrain_epochs,
            self.train.lr_drop_factor,
            self.train.plateau_patience,
            self.train.iteration_count,
            self.train.flip_prob,
            self.train.seed,
            self.videos,
            self.gen.height,
            self.gen.width,
            self.gen.frames_per_video,
            self.gen.n_classes,
            self.gen.n_distractors,
            self.gen.radius,
            self.gen.speed_min,
            self.gen.speed_max,
            self.gen.noise_sigma,
            channels,
            self.blocks_per_stage,
            insertions,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let text = "\n# schedule\nlr = 0.005   # inline comment\nbatch_size = 4\n\
                    cma_insertion = 0:1, 2:0\nstage_channels = 8,16,32\nseed = 42\n";
        let cfg = FullConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.cma_insertion, vec![(0, 1), (2, 0)]);
        assert_eq!(cfg.stage_channels, vec![8, 16, 32]);
        assert_eq!(cfg.train.seed, 42);
        // untouched keys keep defaults
        assert_eq!(cfg.train.momentum, 0.9);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(FullConfig::from_text("nope = 1\n").is_err());
        assert!(FullConfig::from_text("lr ten\n").is_err());
        assert!(FullConfig::from_text("lr = ten\n").is_err());
        assert!(FullConfig::from_text("cma_insertion = 1-0\n").is_err());
    }

    #[test]
    fn none_clears_insertions() {
        let cfg = FullConfig::from_text("cma_insertion = none\n").unwrap();
        assert!(cfg.cma_insertion.is_empty());
    }

    #[test]
    fn round_trips_through_echo_text() {
        let mut cfg = FullConfig::default();
        cfg.set("lr", "0.02").unwrap();
        cfg.set("cma_insertion", "1:0").unwrap();
        let echoed = FullConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(echoed.train.lr, cfg.train.lr);
        assert_eq!(echoed.cma_insertion, cfg.cma_insertion);
        assert_eq!(echoed.to_text(), cfg.to_text());
    }

    #[test]
    fn branch_configs_share_geometry() {
        let cfg = FullConfig::default();
        let (r, f) = cfg.branch_configs();
        assert_eq!(r.input_channels, 3);
        assert_eq!(f.input_channels, FLOW_CHANNELS);
        assert_eq!(r.stage_channels, f.stage_channels);
        assert_eq!(r.cma_insertion, f.cma_insertion);
    }
}
