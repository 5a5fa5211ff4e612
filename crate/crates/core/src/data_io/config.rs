use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::src::SrcConfig;
use crate::tokenfield::NoiseSpec;
use crate::training::TrainConfig;

/// Everything a two-stage run needs. Shape fields left at 0 (`src.n`,
/// `src.tokens`, `flow.channels`, `flow.tokens`, `flow.num_classes`) are
/// filled in from the data.
///
/// Text form, one `key = value` per line under `[src]`, `[flow]`, `[train]`
/// and `[noise]`; `#` starts a comment:
///
/// ```text
/// [src]
/// n = 64
/// d = 8
/// epochs = 16
///
/// [flow]
/// blocks = 6
/// lr = 0.0005
///
/// [train]
/// seed = 7
///
/// [noise]
/// src = uniform:0.8
/// flow = constant:0.4
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub src: SrcConfig,
    pub flow: FlowConfig,
    pub src_train: TrainConfig,
    pub flow_train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            src: SrcConfig { n: 0, width: 0, ..SrcConfig::desk(0) },
            flow: FlowConfig::desk(0, 0, 0),
            src_train: TrainConfig::src_desk(),
            flow_train: TrainConfig::flow_desk(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_noise(v: &str) -> Result<NoiseSpec> {
    let spec = match v.split_once(':') {
        None if v == "none" => NoiseSpec::None,
        Some(("constant", s)) => NoiseSpec::Constant(parse_num("noise", s)?),
        Some(("uniform", s)) => NoiseSpec::PerSampleUniform(parse_num("noise", s)?),
        _ => return Err(Error::Config(format!("noise: expected none, constant:S or uniform:S, got {v:?}"))),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn format_noise(n: NoiseSpec) -> String {
    match n {
        NoiseSpec::None => "none".into(),
        NoiseSpec::Constant(s) => format!("constant:{s:?}"),
        NoiseSpec::PerSampleUniform(s) => format!("uniform:{s:?}"),
    }
}

fn set_schedule(t: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "epochs" => t.epochs = parse_num(key, v)?,
        "batch_size" => t.batch_size = parse_num(key, v)?,
        "lr" => t.lr = parse_num(key, v)?,
        "warmup_epochs" => t.warmup_epochs = parse_num(key, v)?,
        "cosine_start_epoch" => t.cosine_start_epoch = parse_num(key, v)?,
        "ema_decay" => t.ema_decay = parse_num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_schedule(out: &mut String, t: &TrainConfig) {
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "lr = {:?}", t.lr);
    let _ = writeln!(out, "warmup_epochs = {}", t.warmup_epochs);
    let _ = writeln!(out, "cosine_start_epoch = {}", t.cosine_start_epoch);
    let _ = writeln!(out, "ema_decay = {:?}", t.ema_decay);
}

impl PipelineConfig {
    /// Parses config text over the defaults. Unknown sections and keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !matches!(name, "src" | "flow" | "train" | "noise") {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(format!("{section}.{key}")) {
                return Err(err(format!("duplicate key {section}.{key}")));
            }
            let known = match section.as_str() {
                "src" => match key {
                    "n" => {
                        c.src.n = parse_num(key, v)?;
                        c.src.width = c.src.n;
                        true
                    }
                    "d" => set(&mut c.src.d, key, v)?,
                    "blocks" => set(&mut c.src.blocks, key, v)?,
                    "heads" => set(&mut c.src.heads, key, v)?,
                    "mlp_ratio" => set(&mut c.src.mlp_ratio, key, v)?,
                    "tokens" => set(&mut c.src.tokens, key, v)?,
                    _ => set_schedule(&mut c.src_train, key, v)?,
                },
                "flow" => match key {
                    "blocks" => set(&mut c.flow.blocks, key, v)?,
                    "shallow_layers" => set(&mut c.flow.shallow_layers, key, v)?,
                    "deep_layers" => set(&mut c.flow.deep_layers, key, v)?,
                    "width" => set(&mut c.flow.width, key, v)?,
                    "heads" => set(&mut c.flow.heads, key, v)?,
                    "mlp_ratio" => set(&mut c.flow.mlp_ratio, key, v)?,
                    "channels" => set(&mut c.flow.channels, key, v)?,
                    "tokens" => set(&mut c.flow.tokens, key, v)?,
                    "num_classes" => set(&mut c.flow.num_classes, key, v)?,
                    "label_drop_p" => set(&mut c.flow.label_drop_p, key, v)?,
                    "alpha_clamp" => set(&mut c.flow.alpha_clamp, key, v)?,
                    _ => set_schedule(&mut c.flow_train, key, v)?,
                },
                "train" => {
                    let both = |c: &mut Self, f: &dyn Fn(&mut TrainConfig)| {
                        f(&mut c.src_train);
                        f(&mut c.flow_train);
                    };
                    match key {
                        "seed" => {
                            let s: u64 = parse_num(key, v)?;
                            both(&mut c, &|t| t.seed = s);
                        }
                        "grad_clip" => {
                            let g: f64 = parse_num(key, v)?;
                            both(&mut c, &|t| t.grad_clip = g);
                        }
                        "weight_decay" => {
                            let w: f64 = parse_num(key, v)?;
                            both(&mut c, &|t| t.weight_decay = w);
                        }
                        _ => return Err(err(format!("unknown key train.{key}"))),
                    }
                    true
                }
                "noise" => match key {
                    "src" => {
                        c.src_train.noise = parse_noise(v)?;
                        true
                    }
                    "flow" => {
                        c.flow_train.noise = parse_noise(v)?;
                        true
                    }
                    _ => false,
                },
                _ => return Err(err("key outside any section".into())),
            };
            if !known {
                return Err(err(format!("unknown key {section}.{key}")));
            }
        }
        Ok(c)
    }

    /// Canonical text: every key, fixed order, round-trip exact floats.
    pub fn to_text(&self) -> String {
        let (s, f) = (&self.src, &self.flow);
        let mut out = String::from("[src]\n");
        let _ = writeln!(
            out,
            "n = {}\nd = {}\nblocks = {}\nheads = {}\nmlp_ratio = {}\ntokens = {}",
            s.n, s.d, s.blocks, s.heads, s.mlp_ratio, s.tokens
        );
        write_schedule(&mut out, &self.src_train);
        out.push_str("\n[flow]\n");
        let _ = writeln!(
            out,
            "blocks = {}\nshallow_layers = {}\ndeep_layers = {}\nwidth = {}\nheads = {}\nmlp_ratio = {}\nchannels = {}\ntokens = {}\nnum_classes = {}\nlabel_drop_p = {:?}\nalpha_clamp = {:?}",
            f.blocks, f.shallow_layers, f.deep_layers, f.width, f.heads, f.mlp_ratio, f.channels, f.tokens, f.num_classes, f.label_drop_p, f.alpha_clamp
        );
        write_schedule(&mut out, &self.flow_train);
        let t = &self.flow_train;
        let _ = writeln!(
            out,
            "\n[train]\nseed = {}\ngrad_clip = {:?}\nweight_decay = {:?}",
            t.seed, t.grad_clip, t.weight_decay
        );
        let _ = writeln!(
            out,
            "\n[noise]\nsrc = {}\nflow = {}",
            format_noise(self.src_train.noise),
            format_noise(self.flow_train.noise)
        );
        out
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.src_train.seed = seed;
        self.flow_train.seed = seed;
    }
}

fn set<T: FromStr>(slot: &mut T, key: &str, v: &str) -> Result<bool> {
    *slot = parse_num(key, v)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_documented_example() {
        let c = PipelineConfig::parse(
            "# desk run\n[src]\nn = 64\nd = 8\nepochs = 16\n\n[flow]\nblocks = 6\nlr = 0.0005\n\n[train]\nseed = 7\n\n[noise]\nsrc = uniform:0.8\nflow = constant:0.4\n",
        )
        .unwrap();
        assert_eq!((c.src.n, c.src.width, c.src.d), (64, 64, 8));
        assert_eq!(c.flow_train.lr, 5e-4);
        assert_eq!((c.src_train.seed, c.flow_train.seed), (7, 7));
        assert_eq!(c.src_train.noise, NoiseSpec::PerSampleUniform(0.8));
        assert_eq!(c.flow_train.noise, NoiseSpec::Constant(0.4));
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in [
            "[model]\n",
            "[src]\nwidth = 3\n",
            "[train]\nlr = 1\n",
            "seed = 1\n",
            "[src]\nd = x\n",
            "[src]\nd\n",
            "[noise]\nflow = gaussian\n",
            "[noise]\nflow = uniform:0\n",
            "[src]\nd = 2\nd = 3\n",
        ] {
            assert!(matches!(PipelineConfig::parse(bad), Err(Error::Config(_) | Error::InvalidNoise(_))), "{bad:?}");
        }
    }

    #[test]
    fn noise_text_round_trips() {
        for n in [NoiseSpec::None, NoiseSpec::Constant(0.4), NoiseSpec::PerSampleUniform(0.8)] {
            assert_eq!(parse_noise(&format_noise(n)).unwrap(), n);
        }
    }

    proptest! {
        #[test]
        fn canonical_text_round_trips(
            d in 1usize..64, seed in any::<u64>(), lr in 1e-6f64..1.0, drop in 0.0f64..0.99,
            sigma in 0.0f64..2.0, epochs in 1usize..400,
        ) {
            let mut c = PipelineConfig::default();
            c.src.d = d;
            c.set_seed(seed);
            c.flow_train.lr = lr;
            c.flow_train.epochs = epochs;
            c.flow.label_drop_p = drop;
            c.flow_train.noise = NoiseSpec::Constant(sigma);
            let text = c.to_text();
            let back = PipelineConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
