//! Run configuration: `key = value` files with `#` comments, overridden by
//! command-line flags, echoed back fully resolved.

use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use slimsplit::slim::{WidthMultiplier, WidthSet};
use slimsplit::train::TrainConfig;
use slimsplit::zoo::{BottleneckSpec, CompressorVariant, ConfigMode, StudentOptions};

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "train_size",
    "val_size",
    "data",
    "teacher",
    "student",
    "mode",
    "variant",
    "bottleneck",
    "widths",
    "bits",
    "epochs",
    "batch_size",
    "n_sandwich",
    "lr",
    "lr_halving",
    "momentum",
    "post_bn_recalibrate",
    "tap_weights",
    "teacher_epochs",
    "teacher_lr",
    "pretrained_encoder",
    "near_identity",
    "allow_extrapolation",
    "alpha",
    "index",
    "bandwidth",
    "rtt",
    "compute_rate",
    "max_bytes",
    "max_mac",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Dataset file; when unset the dataset is generated from the seed.
    pub data: Option<PathBuf>,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub mode: ConfigMode,
    pub variant: CompressorVariant,
    pub bottleneck: usize,
    pub widths: WidthSet,
    pub bits: Vec<u8>,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_sandwich: usize,
    pub lr: f64,
    /// Defaults to the mode's schedule.
    pub lr_halving: Option<usize>,
    pub momentum: f64,
    pub post_bn_recalibrate: bool,
    pub tap_weights: [f64; 2],
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub pretrained_encoder: bool,
    pub near_identity: Option<f64>,
    pub allow_extrapolation: bool,
    pub alpha: WidthMultiplier,
    pub index: usize,
    pub bandwidth: f64,
    pub rtt: f64,
    pub compute_rate: f64,
    pub max_bytes: Option<usize>,
    pub max_mac: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let student = StudentOptions::default();
        let bn = BottleneckSpec::default();
        RunConfig {
            seed: 0,
            train_size: 2000,
            val_size: 500,
            data: None,
            teacher: "teacher.ckpt".into(),
            student: "student.ckpt".into(),
            mode: ConfigMode::BandwidthOnly,
            variant: bn.variant,
            bottleneck: bn.channels,
            widths: train.width_set,
            bits: vec![8],
            epochs: train.epochs,
            batch_size: train.batch_size,
            n_sandwich: train.n_sandwich,
            lr: train.lr0,
            lr_halving: None,
            momentum: train.momentum,
            post_bn_recalibrate: train.post_bn_recalibrate,
            tap_weights: train.tap_weights,
            teacher_epochs: TrainConfig::teacher().epochs,
            teacher_lr: TrainConfig::teacher().lr0,
            pretrained_encoder: student.pretrained_encoder,
            near_identity: student.near_identity,
            allow_extrapolation: student.allow_extrapolation,
            alpha: WidthMultiplier::FULL,
            index: 0,
            bandwidth: 1e6,
            rtt: 0.05,
            compute_rate: 1e9,
            max_bytes: None,
            max_mac: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), ToString::to_string)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "train_size" => self.train_size = num(key, v)?,
            "val_size" => self.val_size = num(key, v)?,
            "data" => self.data = (v != "none").then(|| v.into()),
            "teacher" => self.teacher = v.into(),
            "student" => self.student = v.into(),
            "mode" => self.mode = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "bottleneck" => self.bottleneck = num(key, v)?,
            "widths" => self.widths = WidthSet::parse_list(v).map_err(|e| format!("{key}: {e}"))?,
            "bits" => {
                let bits = v.split(',').map(|b| num::<u8>(key, b.trim())).collect::<Result<Vec<_>, _>>()?;
                if bits.is_empty() {
                    return Err("bits: empty list".into());
                }
                self.bits = bits;
            }
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "n_sandwich" => self.n_sandwich = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_halving" => self.lr_halving = optional(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "post_bn_recalibrate" => self.post_bn_recalibrate = flag(key, v)?,
            "tap_weights" => {
                let w: Vec<f64> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
                self.tap_weights = w.try_into().map_err(|_| "tap_weights: expected two values".to_string())?;
            }
            "teacher_epochs" => self.teacher_epochs = num(key, v)?,
            "teacher_lr" => self.teacher_lr = num(key, v)?,
            "pretrained_encoder" => self.pretrained_encoder = flag(key, v)?,
            "near_identity" => self.near_identity = optional(key, v)?,
            "allow_extrapolation" => self.allow_extrapolation = flag(key, v)?,
            "alpha" => self.alpha = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "index" => self.index = num(key, v)?,
            "bandwidth" => self.bandwidth = num(key, v)?,
            "rtt" => self.rtt = num(key, v)?,
            "compute_rate" => self.compute_rate = num(key, v)?,
            "max_bytes" => self.max_bytes = optional(key, v)?,
            "max_mac" => self.max_mac = optional(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let list = |v: &[String]| v.join(",");
        match key {
            "seed" => self.seed.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "data" => show(&self.data.as_ref().map(|p| p.display())),
            "teacher" => self.teacher.display().to_string(),
            "student" => self.student.display().to_string(),
            "mode" => self.mode.to_string(),
            "variant" => self.variant.to_string(),
            "bottleneck" => self.bottleneck.to_string(),
            "widths" => self.widths.to_string(),
            "bits" => list(&self.bits.iter().map(ToString::to_string).collect::<Vec<_>>()),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_sandwich" => self.n_sandwich.to_string(),
            "lr" => self.lr.to_string(),
            "lr_halving" => self.halving_period().to_string(),
            "momentum" => self.momentum.to_string(),
            "post_bn_recalibrate" => self.post_bn_recalibrate.to_string(),
            "tap_weights" => list(&self.tap_weights.iter().map(ToString::to_string).collect::<Vec<_>>()),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "teacher_lr" => self.teacher_lr.to_string(),
            "pretrained_encoder" => self.pretrained_encoder.to_string(),
            "near_identity" => show(&self.near_identity),
            "allow_extrapolation" => self.allow_extrapolation.to_string(),
            "alpha" => self.alpha.to_string(),
            "index" => self.index.to_string(),
            "bandwidth" => self.bandwidth.to_string(),
            "rtt" => self.rtt.to_string(),
            "compute_rate" => self.compute_rate.to_string(),
            "max_bytes" => show(&self.max_bytes),
            "max_mac" => show(&self.max_mac),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Applies a config file. Later lines win; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// The resolved configuration in the file format; feeding it back
    /// through `apply_text` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k} = {}", self.get(k)).unwrap();
        }
        s
    }

    pub fn halving_period(&self) -> usize {
        self.lr_halving.unwrap_or_else(|| TrainConfig::for_mode(self.mode).halving_period)
    }

    pub fn bottleneck_spec(&self) -> Result<BottleneckSpec, String> {
        BottleneckSpec::new(self.bottleneck, self.variant).map_err(|e| e.to_string())
    }

    pub fn student_options(&self) -> StudentOptions {
        StudentOptions {
            pretrained_encoder: self.pretrained_encoder,
            near_identity: self.near_identity,
            allow_extrapolation: self.allow_extrapolation,
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            n_sandwich: self.n_sandwich,
            width_set: self.widths.clone(),
            lr0: self.lr,
            halving_period: self.halving_period(),
            momentum: self.momentum,
            post_bn_recalibrate: self.post_bn_recalibrate,
            tap_weights: self.tap_weights,
            seed: self.seed,
        }
    }

    pub fn teacher_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            lr0: self.teacher_lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: self.seed,
            ..TrainConfig::teacher()
        }
    }
}

/// Resolves an output name inside `out_dir`. Absolute paths and `..`
/// components are refused so nothing lands outside the directory.
pub fn output_path(out_dir: &Path, name: &Path) -> Result<PathBuf, String> {
    if name.as_os_str().is_empty() {
        return Err("empty output path".into());
    }
    for c in name.components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            _ => return Err(format!("output path {} must stay inside the output directory", name.display())),
        }
    }
    Ok(out_dir.join(name))
}

/// Inputs may live anywhere; relative ones are looked up in `out_dir` so
/// the files of earlier steps are found without spelling out the directory.
pub fn input_path(out_dir: &Path, name: &Path) -> PathBuf {
    if name.is_absolute() {
        name.to_path_buf()
    } else {
        out_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("mode = full_config # trailing comment\n\n# whole line\nwidths = 0.5, 1.0\nmax_bytes = 900\nnear_identity = none\n")
            .unwrap();
        assert_eq!(c.halving_period(), 2);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.widths, c.widths);
        assert_eq!(back.lr_halving, Some(2));
    }

    #[test]
    fn unknown_and_malformed_lines_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("colour = red").unwrap_err().contains("unknown key"));
        assert!(c.apply_text("epochs 3").is_err());
        assert!(c.apply_text("epochs = three").is_err());
        assert!(c.apply_text("tap_weights = 1").is_err());
    }

    #[test]
    fn outputs_stay_inside() {
        let d = Path::new("out");
        assert_eq!(output_path(d, Path::new("a/b.csv")).unwrap(), Path::new("out/a/b.csv"));
        assert!(output_path(d, Path::new("../x")).is_err());
        assert!(output_path(d, Path::new("a/../../x")).is_err());
        assert!(output_path(d, Path::new("/tmp/x")).is_err());
        assert_eq!(input_path(d, Path::new("/abs/t.ckpt")), Path::new("/abs/t.ckpt"));
    }
}
