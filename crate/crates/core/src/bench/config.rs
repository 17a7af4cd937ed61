//! Plain `key = value` run configuration. `#` starts a comment, lists are
//! comma separated, and unknown or repeated keys are errors.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `input_shape` | `C,H,W` | `1,8,8` |
//! | `conv_channels` | output channels per conv layer | `8` |
//! | `conv_kernels` | kernel size per conv layer (one value broadcasts) | `3` |
//! | `conv_paddings` | padding per conv layer (one value broadcasts) | `1` |
//! | `fc_dims` | output size per fully connected energy layer | empty |
//! | `classes` | readout classes | `2` |
//! | `t_free`, `t_nudge` | free and nudged relaxation steps | `30`, `10` |
//! | `beta` | nudging strength used for training | `0.5` |
//! | `fp_tol` | free-phase early-exit tolerance | `1e-6` |
//! | `epochs`, `batch_size` | | `10`, `32` |
//! | `lrs` | one per energy layer plus the readout (one value broadcasts) | `0.05` |
//! | `momentum` | | `0.9` |
//! | `update_rule` | `symmetric` or `one_sided` | `symmetric` |
//! | `seed`, `init_gain`, `normalize` | | `0`, `1.0`, `true` |
//! | `augment_hflip`, `augment_crop_pad` | `augment_crop_pad = 0` disables cropping | `false`, `0` |
//! | `adv_norm`, `adv_epsilon`, `adv_steps` | adversarial training block | `l2`, `0.5`, `10` |
//! | `synth_kind`, `synth_train`, `synth_test`, `synth_noise`, `synth_jitter` | data for `--data synth` | `blobs`, `512`, `256`, `0.1`, `1.0` |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::attacks::Norm;
use crate::bench::dataset::{synth_dataset, Augment, Dataset, Split, SynthConfig, SynthKind};
use crate::energy::{FcSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;
use crate::train::{AdvTraining, TrainConfig, UpdateRule};

const KEYS: &[&str] = &[
    "input_shape",
    "conv_channels",
    "conv_kernels",
    "conv_paddings",
    "fc_dims",
    "classes",
    "t_free",
    "t_nudge",
    "beta",
    "fp_tol",
    "epochs",
    "batch_size",
    "lrs",
    "momentum",
    "update_rule",
    "seed",
    "init_gain",
    "normalize",
    "augment_hflip",
    "augment_crop_pad",
    "adv_norm",
    "adv_epsilon",
    "adv_steps",
    "synth_kind",
    "synth_train",
    "synth_test",
    "synth_noise",
    "synth_jitter",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub kind: SynthKind,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub jitter: f64,
}

impl SynthSettings {
    pub fn config(&self, spec: &ModelSpec, seed: u64) -> SynthConfig {
        SynthConfig {
            kind: self.kind,
            image_shape: spec.input_shape,
            classes: spec.classes,
            noise: self.noise,
            jitter: self.jitter,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Adversarial block; always parsed so `train --model adv` has defaults.
    pub adversarial: AdvTraining,
    pub synth: SynthSettings,
}

struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| Error::Config {
                line,
                msg: format!("cannot parse {key} = {v:?}"),
            }),
        }
    }

    fn list<T: FromStr + Clone>(&mut self, key: &str, default: Vec<T>) -> Result<(Vec<T>, usize)> {
        match self.map.remove(key) {
            None => Ok((default, 0)),
            Some((line, v)) if v.trim().is_empty() => Ok((Vec::new(), line)),
            Some((line, v)) => {
                let items = v
                    .split(',')
                    .map(|s| {
                        s.trim().parse().map_err(|_| Error::Config {
                            line,
                            msg: format!("cannot parse element {s:?} of {key}"),
                        })
                    })
                    .collect::<Result<Vec<T>>>()?;
                Ok((items, line))
            }
        }
    }

    fn with<T>(&mut self, key: &str, default: T, f: impl Fn(&str) -> Result<T>) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => f(&v).map_err(|e| Error::Config { line, msg: e.to_string() }),
        }
    }
}

fn broadcast<T: Clone>(v: Vec<T>, n: usize, key: &str, line: usize) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0].clone(); n]),
        k if k == n => Ok(v),
        k => Err(Error::Config {
            line,
            msg: format!("{key} has {k} entries, expected 1 or {n}"),
        }),
    }
}

/// Offset between the synthetic train and test seeds.
pub const SYNTH_TEST_SEED: u64 = 0x7e57;

impl RunConfig {
    /// The synthetic split described by this config: training data uses the
    /// training seed, every other split the seed plus [`SYNTH_TEST_SEED`].
    pub fn synth_split(&self, split: Split) -> Result<Dataset> {
        let (seed, n) = match split {
            Split::Train => (self.train.seed, self.synth.train),
            _ => (self.train.seed.wrapping_add(SYNTH_TEST_SEED), self.synth.test),
        };
        synth_dataset(&self.synth.config(&self.spec, seed), n, split)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got {body:?}"),
                });
            };
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
            if map.insert(k.to_string(), (line, v.trim().to_string())).is_some() {
                return Err(Error::Config {
                    line,
                    msg: format!("key {k:?} given twice"),
                });
            }
        }
        let mut e = Entries { map };

        let (shape, shape_line) = e.list::<usize>("input_shape", vec![1, 8, 8])?;
        let input_shape: [usize; 3] = shape.try_into().map_err(|_| Error::Config {
            line: shape_line,
            msg: "input_shape needs three entries C,H,W".into(),
        })?;
        let (channels, _) = e.list::<usize>("conv_channels", vec![8])?;
        let (kernels, kl) = e.list::<usize>("conv_kernels", vec![3])?;
        let (paddings, pl) = e.list::<usize>("conv_paddings", vec![1])?;
        let n_conv = channels.len();
        let kernels = if n_conv == 0 { vec![] } else { broadcast(kernels, n_conv, "conv_kernels", kl)? };
        let paddings = if n_conv == 0 { vec![] } else { broadcast(paddings, n_conv, "conv_paddings", pl)? };
        let (fc_dims, _) = e.list::<usize>("fc_dims", vec![])?;

        let mut conv_layers = Vec::with_capacity(n_conv);
        let mut c = input_shape[0];
        for i in 0..n_conv {
            conv_layers.push(ConvSpec::new(c, channels[i], kernels[i], paddings[i]));
            c = channels[i];
        }
        let beta = e.take("beta", 0.5)?;
        let mut spec = ModelSpec {
            input_shape,
            conv_layers,
            fc_layers: vec![],
            classes: e.take("classes", 2)?,
            t_free: e.take("t_free", 30)?,
            t_nudge: e.take("t_nudge", 10)?,
            beta,
            fp_tol: e.take("fp_tol", 1e-6)?,
        };
        let mut dim = if n_conv == 0 {
            spec.input_dim()
        } else {
            spec.state_shapes().map_err(|err| Error::Config { line: 0, msg: err.to_string() })?
                .last()
                .map(|s| s.iter().product())
                .unwrap_or(0)
        };
        for &out in &fc_dims {
            spec.fc_layers.push(FcSpec { in_dim: dim, out_dim: out });
            dim = out;
        }
        spec.validate().map_err(|err| Error::Config { line: 0, msg: err.to_string() })?;

        let mut train = TrainConfig::new(&spec);
        train.beta = beta;
        train.epochs = e.take("epochs", train.epochs)?;
        train.batch_size = e.take("batch_size", train.batch_size)?;
        let (lrs, ll) = e.list::<f64>("lrs", vec![0.05])?;
        train.lrs = broadcast(lrs, spec.num_layers() + 1, "lrs", ll)?;
        train.momentum = e.take("momentum", train.momentum)?;
        train.update_rule = e.with("update_rule", train.update_rule, UpdateRule::parse)?;
        train.seed = e.take("seed", train.seed)?;
        train.init_gain = e.take("init_gain", train.init_gain)?;
        train.normalize = e.take("normalize", train.normalize)?;
        let pad: usize = e.take("augment_crop_pad", 0)?;
        train.augment = Augment {
            hflip: e.take("augment_hflip", false)?,
            crop_pad: (pad > 0).then_some(pad),
        };
        let adversarial = AdvTraining {
            norm: e.with("adv_norm", Norm::L2, Norm::parse)?,
            epsilon: e.take("adv_epsilon", 0.5)?,
            steps: e.take("adv_steps", 10)?,
        };
        let synth = SynthSettings {
            kind: e.with("synth_kind", SynthKind::Blobs, SynthKind::parse)?,
            train: e.take("synth_train", 512)?,
            test: e.take("synth_test", 256)?,
            noise: e.take("synth_noise", 0.1)?,
            jitter: e.take("synth_jitter", 1.0)?,
        };
        debug_assert!(e.map.is_empty());
        train.validate(&spec).map_err(|err| Error::Config { line: 0, msg: err.to_string() })?;
        Ok(Self {
            spec,
            train,
            adversarial,
            synth,
        })
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let s = &self.spec;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("input_shape", join(s.input_shape.iter().map(|d| d.to_string()).collect()));
        kv("conv_channels", join(s.conv_layers.iter().map(|c| c.out_channels.to_string()).collect()));
        if !s.conv_layers.is_empty() {
            kv("conv_kernels", join(s.conv_layers.iter().map(|c| c.kernel.to_string()).collect()));
            kv("conv_paddings", join(s.conv_layers.iter().map(|c| c.padding.to_string()).collect()));
        }
        kv("fc_dims", join(s.fc_layers.iter().map(|f| f.out_dim.to_string()).collect()));
        kv("classes", s.classes.to_string());
        kv("t_free", s.t_free.to_string());
        kv("t_nudge", s.t_nudge.to_string());
        kv("beta", format!("{:?}", t.beta));
        kv("fp_tol", format!("{:?}", s.fp_tol));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lrs", join(t.lrs.iter().map(|v| format!("{v:?}")).collect()));
        kv("momentum", format!("{:?}", t.momentum));
        kv("update_rule", t.update_rule.as_str().to_string());
        kv("seed", t.seed.to_string());
        kv("init_gain", format!("{:?}", t.init_gain));
        kv("normalize", t.normalize.to_string());
        kv("augment_hflip", t.augment.hflip.to_string());
        kv("augment_crop_pad", t.augment.crop_pad.unwrap_or(0).to_string());
        kv("adv_norm", self.adversarial.norm.as_str().to_string());
        kv("adv_epsilon", format!("{:?}", self.adversarial.epsilon));
        kv("adv_steps", self.adversarial.steps.to_string());
        kv(
            "synth_kind",
            match self.synth.kind {
                SynthKind::Blobs => "blobs",
                SynthKind::Stripes => "stripes",
            }
            .to_string(),
        );
        kv("synth_train", self.synth.train.to_string());
        kv("synth_test", self.synth.test.to_string());
        kv("synth_noise", format!("{:?}", self.synth.noise));
        kv("synth_jitter", format!("{:?}", self.synth.jitter));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.spec.conv_layers.len(), 1);
        assert_eq!(c.train.lrs.len(), 2);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn full_config() {
        let text = "\
# two conv layers and an fc layer
input_shape = 3, 8, 8
conv_channels = 4, 6
conv_kernels = 3
conv_paddings = 1, 1
fc_dims = 10
classes = 3
lrs = 0.1, 0.05, 0.02, 0.01
update_rule = one_sided
augment_crop_pad = 4
adv_norm = linf
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.spec.conv_layers[1], ConvSpec::new(4, 6, 3, 1));
        assert_eq!(c.spec.fc_layers, vec![FcSpec { in_dim: 24, out_dim: 10 }]);
        assert_eq!(c.train.update_rule, UpdateRule::OneSided);
        assert_eq!(c.train.augment.crop_pad, Some(4));
        assert_eq!(c.adversarial.norm, Norm::Linf);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_repeated_keys_fail_with_line() {
        match RunConfig::parse("epochs = 3\nlearning_rate = 0.1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(RunConfig::parse("epochs = many"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(RunConfig::parse("lrs = 0.1, 0.2, 0.3"), Err(Error::Config { .. })));
    }
}
