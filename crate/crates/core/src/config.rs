//! Run configuration files.
//!
//! A run is described by one TOML document:
//!
//! ```toml
//! dtype = "f32"
//! out_dir = "runs/blobs"
//!
//! [model]
//! num_couplings = 4
//! channel_ratio = 1            # or "all_channel"
//! spatial_policy = "alternate_all"
//! mode = "pairing"
//! seed = 0
//! vit = { depth = 1, width = 32, heads = 4 }
//! geom = { height = 8, width = 8, channels = 3, patch = 2 }
//!
//! [train]
//! preset = "desk"              # any field below overrides the preset
//! steps = 200
//! batch_size = 64
//!
//! [data]
//! source = "synth"
//! kind = "gaussian_blobs"
//! n = 256
//!
//! [eval]
//! noise_seed = 0
//! data = { source = "synth", kind = "uniform", n = 512, seed = 9 }
//! ```
//!
//! Unknown keys anywhere are errors. Relative paths resolve against the
//! working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{load_cifar10, synth_dataset, Dataset, Split, SynthKind};
use crate::error::{JetError, Result};
use crate::flow::JetConfig;
use crate::numerics::DType;
use crate::patchify::PatchGeometry;
use crate::training::{Preset, Seeds, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    pub out_dir: PathBuf,
    pub model: JetConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

fn default_dtype() -> DType {
    DType::F32
}

/// `[train]` as written: a preset plus optional overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Seeds>,
}

impl TrainSection {
    /// Apply overrides on top of the preset. `paper_strict` drops warmup
    /// and clipping regardless of what the file says.
    pub fn resolve(&self, paper_strict: bool) -> TrainConfig {
        let mut c = TrainConfig::preset(self.preset.unwrap_or(Preset::Desk));
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(
            base_lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            epochs,
            batch_size,
            warmup_steps,
            seeds
        );
        if self.steps.is_some() {
            c.steps = self.steps;
        }
        if self.grad_clip_norm.is_some() {
            c.grad_clip_norm = self.grad_clip_norm;
        }
        if self.eval_every.is_some() {
            c.eval_every = self.eval_every;
        }
        if self.checkpoint_every.is_some() {
            c.checkpoint_every = self.checkpoint_every;
        }
        if paper_strict {
            c.warmup_steps = 0;
            c.grad_clip_norm = None;
        }
        c
    }

    /// Every field spelled out, so the section no longer depends on presets.
    pub fn explicit(c: &TrainConfig) -> Self {
        TrainSection {
            preset: None,
            base_lr: Some(c.base_lr),
            weight_decay: Some(c.weight_decay),
            beta1: Some(c.beta1),
            beta2: Some(c.beta2),
            eps: Some(c.eps),
            epochs: Some(c.epochs),
            steps: c.steps,
            batch_size: Some(c.batch_size),
            warmup_steps: Some(c.warmup_steps),
            grad_clip_norm: c.grad_clip_norm,
            eval_every: c.eval_every,
            checkpoint_every: c.checkpoint_every,
            seeds: Some(c.seeds),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthName {
    GaussianBlobs,
    Stripes,
    ConstantPlusNoise,
    /// Shorthand for constant 0, amplitude 256.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Images sized to the model geometry.
    Synth {
        kind: SynthName,
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        constant: Option<u8>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amplitude: Option<u16>,
    },
    Cifar10 {
        path: PathBuf,
        #[serde(default = "default_split")]
        split: Split,
    },
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub data: DataSpec,
    #[serde(default)]
    pub noise_seed: u64,
}

impl DataSpec {
    /// Parse the short command-line form:
    /// `synth:<kind>[:n[:seed]]`, `cifar10:<dir>` (test batch),
    /// `cifar10-train:<dir>`, or a bare CIFAR-10 directory.
    pub fn parse_arg(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synth:") {
            let mut parts = rest.split(':');
            let name = parts.next().unwrap_or_default();
            let kind: SynthName = toml::Value::String(name.into())
                .try_into()
                .map_err(|_| JetError::Usage(format!("unknown synthetic kind {name:?}")))?;
            let num = |p: Option<&str>, default: u64, what: &str| -> Result<u64> {
                p.map_or(Ok(default), |v| {
                    v.parse()
                        .map_err(|_| JetError::Usage(format!("bad {what} {v:?} in {s:?}")))
                })
            };
            let n = num(parts.next(), 4096, "image count")? as usize;
            let seed = num(parts.next(), 0, "seed")?;
            if parts.next().is_some() {
                return Err(JetError::Usage(format!("too many fields in {s:?}")));
            }
            return Ok(DataSpec::Synth {
                kind,
                n,
                seed,
                constant: None,
                amplitude: None,
            });
        }
        if let Some(dir) = s.strip_prefix("cifar10-train:") {
            return Ok(DataSpec::Cifar10 {
                path: dir.into(),
                split: Split::Train,
            });
        }
        let dir = s.strip_prefix("cifar10:").unwrap_or(s);
        Ok(DataSpec::Cifar10 {
            path: dir.into(),
            split: Split::Validation,
        })
    }

    /// Materialize the dataset. `key` names the config entry in errors.
    pub fn load(&self, geom: &PatchGeometry, key: &str) -> Result<Dataset> {
        match self {
            DataSpec::Synth {
                kind,
                n,
                seed,
                constant,
                amplitude,
            } => {
                let kind = match kind {
                    SynthName::GaussianBlobs => SynthKind::GaussianBlobs,
                    SynthName::Stripes => SynthKind::Stripes,
                    SynthName::Uniform => SynthKind::UNIFORM,
                    SynthName::ConstantPlusNoise => SynthKind::ConstantPlusNoise {
                        constant: constant.unwrap_or(128),
                        amplitude: amplitude.unwrap_or(0),
                    },
                };
                synth_dataset(kind, *n, (geom.height, geom.width, geom.channels), *seed)
                    .map_err(|e| JetError::config(format!("{key}: {e}")))
            }
            DataSpec::Cifar10 { path, split } => {
                if !path.is_dir() {
                    return Err(JetError::Data(format!(
                        "{key}.path: directory {} does not exist",
                        path.display()
                    )));
                }
                load_cifar10(path, *split).map_err(|e| match e {
                    JetError::Data(m) => JetError::Data(format!("{key}.path: {m}")),
                    other => other,
                })
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| JetError::config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| JetError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            JetError::Config(m) => JetError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy with `[train]` fully spelled out.
    pub fn resolved(&self, paper_strict: bool) -> (RunConfig, TrainConfig) {
        let train = self.train.resolve(paper_strict);
        (
            RunConfig {
                train: TrainSection::explicit(&train),
                ..self.clone()
            },
            train,
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| JetError::config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
dtype = "f64"
out_dir = "runs/x"

[model]
num_couplings = 4
channel_ratio = 1
spatial_policy = "alternate_all"
vit = { depth = 1, width = 16, heads = 2 }
geom = { height = 4, width = 4, channels = 3, patch = 2 }

[train]
preset = "paper-strict"
steps = 5
batch_size = 8

[data]
source = "synth"
kind = "gaussian_blobs"
n = 16

[eval]
data = { source = "synth", kind = "uniform", n = 8, seed = 3 }
"#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(c.dtype, DType::F64);
        let (resolved, t) = c.resolved(false);
        assert_eq!(t.warmup_steps, 0);
        assert_eq!(t.steps, Some(5));
        assert_eq!(t.beta2, 0.95);
        let text = resolved.to_toml().unwrap();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(again, resolved);
        assert_eq!(again.train.resolve(false), t);
    }

    #[test]
    fn strict_flag_overrides_file() {
        let mut c = RunConfig::from_toml(EXAMPLE).unwrap();
        c.train.preset = Some(Preset::Desk);
        c.train.grad_clip_norm = Some(1.0);
        assert_eq!(c.train.resolve(false).warmup_steps, 500);
        let t = c.train.resolve(true);
        assert_eq!((t.warmup_steps, t.grad_clip_norm), (0, None));
    }

    #[test]
    fn unknown_keys_are_errors() {
        for (from, to) in [
            ("batch_size = 8", "batch_sise = 8"),
            ("n = 16", "n = 16\ncolour = 1"),
            ("dtype = \"f64\"", "dtype = \"f64\"\nextra = 1"),
            ("patch = 2 }", "patch = 2, stride = 1 }"),
        ] {
            let bad = EXAMPLE.replacen(from, to, 1);
            let err = RunConfig::from_toml(&bad).unwrap_err();
            assert!(matches!(err, JetError::Config(_)), "{to}: {err}");
        }
    }

    #[test]
    fn missing_cifar_dir_names_key() {
        let spec = DataSpec::Cifar10 {
            path: "/nonexistent/cifar".into(),
            split: Split::Train,
        };
        let err = spec
            .load(&PatchGeometry::new(32, 32, 3, 4).unwrap(), "data")
            .unwrap_err();
        assert!(matches!(err, JetError::Data(_)));
        assert!(err.to_string().contains("data.path"), "{err}");
    }

    #[test]
    fn short_data_args() {
        assert_eq!(
            DataSpec::parse_arg("synth:uniform:100:7").unwrap(),
            DataSpec::Synth {
                kind: SynthName::Uniform,
                n: 100,
                seed: 7,
                constant: None,
                amplitude: None
            }
        );
        assert!(matches!(
            DataSpec::parse_arg("synth:stripes").unwrap(),
            DataSpec::Synth { n: 4096, .. }
        ));
        assert!(DataSpec::parse_arg("synth:wobble").is_err());
        assert_eq!(
            DataSpec::parse_arg("cifar10:/d").unwrap(),
            DataSpec::Cifar10 {
                path: "/d".into(),
                split: Split::Validation
            }
        );
        assert_eq!(
            DataSpec::parse_arg("cifar10-train:/d").unwrap(),
            DataSpec::Cifar10 {
                path: "/d".into(),
                split: Split::Train
            }
        );
    }
}
