//! Run configuration: a strict `[section]` / `key = value` format.
//!
//! Unknown sections and keys, duplicate keys and malformed lines are all
//! errors. `#` and `;` start comment lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapters::{AdapterSpec, Method};
use crate::error::{Error, Result};
use crate::hsi::{AugmentConfig, Normalization, PipelineConfig};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::presets::{default_lr, Dataset};

/// Parsed sections in file order, each with its keys in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ini {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |m: &str| Error::Config(format!("line {}: {m}: `{line}`", n + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
                if name.is_empty() {
                    return Err(err("empty section name"));
                }
                if ini.sections.iter().any(|(s, _)| s == name) {
                    return Err(err("section repeated"));
                }
                ini.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key"));
            }
            let (_, entries) = ini.sections.last_mut().ok_or_else(|| err("key outside any section"))?;
            if entries.iter().any(|(e, _)| e == k) {
                return Err(err("duplicate key"));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(ini)
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections
            .iter()
            .find(|(s, _)| s == name)
            .map(|(_, e)| e.as_slice())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)?
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// The body of one section as `key = value` lines.
    pub fn section_text(&self, name: &str) -> Option<String> {
        self.section(name).map(|entries| {
            entries.iter().fold(String::new(), |mut s, (k, v)| {
                writeln!(s, "{k} = {v}").unwrap();
                s
            })
        })
    }
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("[{section}] {key} = {value}: {e}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key} = {value}: expected a boolean"))),
    }
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

/// Where the cube comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Files { cube: PathBuf, labels: PathBuf },
    Synth(SynthConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            bands: 32,
            classes: 5,
            noise_std: 0.02,
            seed: 7,
        }
    }
}

/// Training pixels per class: one count for every class or one per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainCounts {
    Uniform(usize),
    PerClass(Vec<usize>),
}

impl TrainCounts {
    pub fn resolve(&self, k: usize) -> Result<Vec<usize>> {
        match self {
            TrainCounts::Uniform(n) => Ok(vec![*n; k]),
            TrainCounts::PerClass(v) if v.len() == k => Ok(v.clone()),
            TrainCounts::PerClass(v) => Err(Error::Config(format!(
                "train_per_class lists {} counts for {k} classes",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate on the test split every this many epochs; the last epoch is
    /// always evaluated.
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            eval_every: 1,
            augment: true,
        }
    }
}

/// Everything one run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<Dataset>,
    pub data: DataSource,
    pub split_file: Option<PathBuf>,
    pub train_counts: TrainCounts,
    pub split_seed: Option<u64>,
    pub pipeline: PipelineConfig,
    pub augment: AugmentConfig,
    pub model_preset: String,
    /// `[model]` geometry overrides applied after the preset.
    pub model_overrides: Vec<(String, String)>,
    pub adapter: AdapterSpec,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: None,
            data: DataSource::Synth(SynthConfig::default()),
            split_file: None,
            train_counts: TrainCounts::Uniform(50),
            split_seed: None,
            pipeline: PipelineConfig::default(),
            augment: AugmentConfig::default(),
            model_preset: "tiny".into(),
            model_overrides: Vec::new(),
            adapter: AdapterSpec::new(Method::Lora),
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

const SECTIONS: [&str; 8] = ["data", "synth", "pipeline", "model", "adapter", "optim", "train", "output"];

impl RunConfig {
    /// Reads a config file; relative data paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_text(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Files { cube, labels } = &mut cfg.data {
            resolve(cube);
            resolve(labels);
        }
        if let Some(p) = &mut cfg.split_file {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ini = Ini::parse(text)?;
        if let Some((name, _)) = ini.sections.iter().find(|(s, _)| !SECTIONS.contains(&s.as_str())) {
            return Err(Error::Config(format!("unknown section [{name}]")));
        }
        let mut cfg = RunConfig::default();

        // Dataset presets and the method go first so explicit keys override
        // the defaults they imply.
        let method: Method = match ini.get("adapter", "method") {
            Some(m) => m.parse()?,
            None => Method::Lora,
        };
        cfg.adapter = AdapterSpec::new(method);
        cfg.optim.lr = default_lr(method);
        if let Some(name) = ini.get("data", "dataset") {
            let d: Dataset = name.parse()?;
            cfg.dataset = Some(d);
            cfg.pipeline.patch_size = d.patch_size();
            cfg.pipeline.normalization = d.normalization();
            cfg.adapter = d.adapter_spec(method);
        }

        let mut cube = None;
        let mut labels = None;
        let mut synth = SynthConfig::default();
        let mut use_synth = None;
        let mut mean = None;
        let mut std = None;
        for (section, entries) in &ini.sections {
            let s = section.as_str();
            for (k, v) in entries {
                let (key, v) = (k.as_str(), v.as_str());
                match (s, key) {
                    ("data", "dataset") => {}
                    ("data", "cube") => cube = Some(PathBuf::from(v)),
                    ("data", "labels") => labels = Some(PathBuf::from(v)),
                    ("data", "split") => cfg.split_file = Some(PathBuf::from(v)),
                    ("data", "synthetic") => use_synth = Some(parse_bool(s, key, v)?),
                    ("data", "train_per_class") => {
                        let counts: Vec<usize> = parse_list(s, key, v)?;
                        cfg.train_counts = match counts.as_slice() {
                            [n] => TrainCounts::Uniform(*n),
                            _ => TrainCounts::PerClass(counts),
                        };
                    }
                    ("data", "split_seed") => cfg.split_seed = Some(parse(s, key, v)?),
                    ("synth", "height") => synth.height = parse(s, key, v)?,
                    ("synth", "width") => synth.width = parse(s, key, v)?,
                    ("synth", "bands") => synth.bands = parse(s, key, v)?,
                    ("synth", "classes") => synth.classes = parse(s, key, v)?,
                    ("synth", "noise_std") => synth.noise_std = parse(s, key, v)?,
                    ("synth", "seed") => synth.seed = parse(s, key, v)?,
                    ("pipeline", "patch_size") => cfg.pipeline.patch_size = parse(s, key, v)?,
                    ("pipeline", "normalization") => cfg.pipeline.normalization = v.parse::<Normalization>()?,
                    ("pipeline", "components") => cfg.pipeline.components = parse(s, key, v)?,
                    ("pipeline", "input_hw") => cfg.pipeline.input_hw = parse(s, key, v)?,
                    ("pipeline", "mean") => mean = Some(parse_list::<f32>(s, key, v)?),
                    ("pipeline", "std") => std = Some(parse_list::<f32>(s, key, v)?),
                    ("pipeline", "hflip_prob") => cfg.augment.hflip_prob = parse(s, key, v)?,
                    ("pipeline", "vflip_prob") => cfg.augment.vflip_prob = parse(s, key, v)?,
                    ("pipeline", "radiation_prob") => cfg.augment.radiation_prob = parse(s, key, v)?,
                    ("pipeline", "mixture_prob") => cfg.augment.mixture_prob = parse(s, key, v)?,
                    ("pipeline", "noise_std") => cfg.augment.noise_std = parse(s, key, v)?,
                    ("model", "preset") => cfg.model_preset = v.to_string(),
                    ("model", _) => {
                        // Validate the key now; values apply once n_classes is known.
                        ModelConfig::tiny(1).set(key, v)?;
                        cfg.model_overrides.push((key.to_string(), v.to_string()));
                    }
                    ("adapter", _) => cfg.adapter.set(key, v)?,
                    ("optim", "lr") => cfg.optim.lr = parse(s, key, v)?,
                    ("optim", "beta1") => cfg.optim.beta1 = parse(s, key, v)?,
                    ("optim", "beta2") => cfg.optim.beta2 = parse(s, key, v)?,
                    ("optim", "eps") => cfg.optim.eps = parse(s, key, v)?,
                    ("optim", "weight_decay") => cfg.optim.weight_decay = parse(s, key, v)?,
                    ("optim", "warmup_steps") => cfg.optim.warmup_steps = parse(s, key, v)?,
                    ("train", "epochs") => cfg.train.epochs = parse(s, key, v)?,
                    ("train", "batch_size") => cfg.train.batch_size = parse(s, key, v)?,
                    ("train", "eval_every") => cfg.train.eval_every = parse(s, key, v)?,
                    ("train", "augment") => cfg.train.augment = parse_bool(s, key, v)?,
                    ("train", "seed") => cfg.seed = parse(s, key, v)?,
                    ("output", "dir") => cfg.out_dir = PathBuf::from(v),
                    _ => return Err(Error::Config(format!("unknown key `{key}` in [{section}]"))),
                }
            }
        }
        cfg.data = match (use_synth, cube, labels) {
            (Some(true), None, None) | (None, None, None) => DataSource::Synth(synth),
            (Some(false) | None, Some(cube), Some(labels)) => DataSource::Files { cube, labels },
            (Some(true), _, _) => {
                return Err(Error::Config("[data] synthetic = true conflicts with cube/labels paths".into()))
            }
            _ => return Err(Error::Config("[data] needs both `cube` and `labels`, or neither".into())),
        };
        if ini.section("synth").is_some() && !matches!(cfg.data, DataSource::Synth(_)) {
            return Err(Error::Config("[synth] given but data comes from files".into()));
        }
        cfg.pipeline.user_moments = match (mean, std) {
            (Some(m), Some(s)) => Some((m, s)),
            (None, None) => None,
            _ => return Err(Error::Config("[pipeline] mean and std must be given together".into())),
        };
        cfg.optim.lambda = cfg.adapter.lambda;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.optim.validate()?;
        if self.pipeline.patch_size % 2 == 0 || self.pipeline.patch_size == 0 {
            return Err(Error::Config(format!(
                "patch_size must be odd, got {}",
                self.pipeline.patch_size
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || self.train.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if let DataSource::Synth(s) = &self.data {
            if s.classes == 0 || s.classes > 64 {
                return Err(Error::Config(format!("synth classes must be in 1..=64, got {}", s.classes)));
            }
        }
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.adapter.method
    }

    /// Model geometry for `n_classes` outputs.
    pub fn model_config(&self, n_classes: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.model_preset, n_classes)?;
        m.input_bands = self.pipeline.components;
        m.input_hw = self.pipeline.input_hw;
        for (k, v) in &self.model_overrides {
            m.set(k, v)?;
        }
        m.n_classes = n_classes;
        m.validate()?;
        Ok(m)
    }

    /// Seed for each independent random stream of a run.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        match stream {
            Stream::Split => self.split_seed.unwrap_or(self.seed),
            other => self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(other as u64),
        }
    }
}

/// Named random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Backbone = 2,
    Adapter = 3,
    Shuffle = 4,
    Augment = 5,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_basics() {
        let ini = Ini::parse("# c\n[a]\nx = 1\n; c\ny=two words\n[b]\n").unwrap();
        assert_eq!(ini.get("a", "y"), Some("two words"));
        assert_eq!(ini.section("b"), Some(&[][..]));
        assert_eq!(ini.section_text("a").unwrap(), "x = 1\ny = two words\n");
    }

    #[test]
    fn ini_rejects_malformed() {
        for bad in ["x = 1", "[a]\nnovalue", "[a]\nx=1\nx=2", "[a\n", "[a]\n[a]", "[a]\n= 3"] {
            assert!(matches!(Ini::parse(bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn unknown_keys_and_sections_fail() {
        assert!(RunConfig::from_text("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_text("[training]\n").is_err());
        assert!(RunConfig::from_text("[adapter]\nranks = 3\n").is_err());
        assert!(RunConfig::from_text("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn defaults_follow_the_method() {
        let lp = RunConfig::from_text("[adapter]\nmethod = lp\n").unwrap();
        assert_eq!(lp.optim.lr, 5e-5);
        let lora = RunConfig::from_text("[adapter]\nmethod = lora\n").unwrap();
        assert_eq!(lora.optim.lr, 5e-3);
        assert_eq!(lora.train, TrainConfig::default());
        assert_eq!(lora.adapter.rank, 4);
    }

    #[test]
    fn dataset_preset_then_overrides() {
        let cfg = RunConfig::from_text(
            "[data]\ndataset = pavia\ncube = a.hsic\nlabels = a.hsgt\n[adapter]\nmethod = krona+\n[pipeline]\npatch_size = 11\n",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.patch_size, 11);
        assert_eq!(cfg.adapter.krona_shape, Some((24, 32)));
        assert_eq!(cfg.optim.lambda, 8.0);
        let lk = RunConfig::from_text("[data]\ndataset = longkou\n").unwrap();
        assert_eq!(lk.pipeline.normalization, Normalization::MinMax);
        assert_eq!(lk.pipeline.patch_size, 27);
    }

    #[test]
    fn structural_errors() {
        assert!(RunConfig::from_text("[data]\ncube = a.hsic\n").is_err());
        assert!(RunConfig::from_text("[pipeline]\npatch_size = 8\n").is_err());
        assert!(RunConfig::from_text("[pipeline]\nmean = 1,2\n").is_err());
        assert!(RunConfig::from_text("[adapter]\nlambda = 0.5\n").is_err());
        assert!(RunConfig::from_text("[synth]\nclasses = 0\n").is_err());
        assert!(RunConfig::from_text("[train]\naugment = maybe\n").is_err());
    }

    #[test]
    fn per_class_counts() {
        let cfg = RunConfig::from_text("[data]\ntrain_per_class = 3, 4, 5\n").unwrap();
        assert_eq!(cfg.train_counts.resolve(3).unwrap(), vec![3, 4, 5]);
        assert!(cfg.train_counts.resolve(2).is_err());
    }

    #[test]
    fn model_geometry_follows_pipeline() {
        let cfg = RunConfig::from_text("[model]\npreset = tiny\nembed_dim = 32\n").unwrap();
        let m = cfg.model_config(4).unwrap();
        assert_eq!((m.embed_dim, m.n_classes, m.input_bands), (32, 4, 12));
    }

    #[test]
    fn streams_are_distinct() {
        let cfg = RunConfig { seed: 3, ..Default::default() };
        let seeds: Vec<u64> = [Stream::Split, Stream::Backbone, Stream::Adapter, Stream::Shuffle, Stream::Augment]
            .into_iter()
            .map(|s| cfg.stream_seed(s))
            .collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
