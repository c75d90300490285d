//! Experiment configuration: hyperparameters, named presets and the flat
//! `key=value` file format.
//!
//! A config file has one `key = value` pair per line; text after `#` is a
//! comment. Keys are the field names of [`ExperimentConfig`]. When a
//! `preset` key is present the preset is loaded first and every other key
//! overrides it, regardless of line order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dcn::TrainMode;
use crate::error::{Error, Result};
use crate::kmeans::CountOrder;
use crate::metrics::NmiNorm;
use crate::optim::Schedule;

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 7] = [
    "rcv1",
    "20news",
    "mnist_raw",
    "mnist_raw_lambda1",
    "mnist_scatnet",
    "pendigits",
    "synth_sigsig",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub mode: TrainMode,
    /// Number of clusters.
    pub k: usize,
    /// Encoder output widths; the last one is the latent dimension.
    pub widths: Vec<usize>,
    /// Weight of the clustering term.
    pub lambda: f64,
    /// Base pretraining step size.
    pub alpha_p: f64,
    /// Base joint-training step size.
    pub alpha_l: f64,
    /// Pretraining epochs per layer pair.
    pub t_p: usize,
    /// Joint-training epochs.
    pub t_l: usize,
    /// `None` means `max(2, round(0.01 N))`.
    pub batch_size: Option<usize>,
    pub momentum: f64,
    pub nesterov: bool,
    pub schedule: Schedule,
    pub seed: u64,
    pub linear_bottleneck: bool,
    pub relu_output: bool,
    pub count_order: CountOrder,
    /// K-means restarts for the initial (and two-stage final) clustering.
    pub lloyd_restarts: usize,
    pub lloyd_max_iter: usize,
    pub nmi_norm: NmiNorm,
    /// Write wall-clock seconds into reports; off gives byte-identical
    /// reports across runs.
    pub record_timing: bool,
    /// Draw a scatter of the first two latent coordinates even when the
    /// latent dimension exceeds 2.
    pub scatter: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            mode: TrainMode::Joint,
            k: 4,
            widths: vec![50, 10, 2],
            lambda: 0.1,
            alpha_p: 0.01,
            alpha_l: 0.01,
            t_p: 10,
            t_l: 50,
            batch_size: None,
            momentum: 0.9,
            nesterov: true,
            schedule: Schedule::Constant,
            seed: 0,
            linear_bottleneck: false,
            relu_output: false,
            count_order: CountOrder::IncrementFirst,
            lloyd_restarts: 10,
            lloyd_max_iter: 300,
            nmi_norm: NmiNorm::Sqrt,
            record_timing: true,
            scatter: false,
        }
    }
}

/// Hyperparameters of a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        preset: Some(name.to_string()),
        ..ExperimentConfig::default()
    };
    let table = |widths: &[usize], lambda, alpha_p, alpha_l, t_p, t_l, k| ExperimentConfig {
        widths: widths.to_vec(),
        lambda,
        alpha_p,
        alpha_l,
        t_p,
        t_l,
        k,
        ..base.clone()
    };
    Ok(match name {
        "rcv1" => ExperimentConfig {
            relu_output: true,
            ..table(&[2000, 1000, 1000, 1000, 50], 0.1, 0.01, 0.05, 50, 50, 4)
        },
        "20news" => ExperimentConfig {
            relu_output: true,
            ..table(&[250, 100, 20], 10.0, 0.01, 0.001, 10, 50, 20)
        },
        "mnist_raw" => ExperimentConfig {
            relu_output: true,
            ..table(&[500, 500, 2000, 10], 0.05, 0.01, 0.05, 50, 50, 10)
        },
        "mnist_raw_lambda1" => ExperimentConfig {
            relu_output: true,
            ..table(&[500, 500, 2000, 10], 1.0, 0.01, 0.05, 50, 50, 10)
        },
        "mnist_scatnet" => table(&[50, 20, 5], 0.1, 0.01, 0.01, 10, 50, 10),
        "pendigits" => table(&[50, 16, 10], 0.5, 0.01, 0.01, 50, 50, 10),
        // No published table; tuned on the sigsig generator. A linear
        // bottleneck keeps the 2-D codes from losing a half-plane to ReLU.
        "synth_sigsig" => ExperimentConfig {
            linear_bottleneck: true,
            ..table(&[50, 10, 2], 0.1, 0.01, 0.01, 50, 50, 4)
        },
        other => {
            return Err(Error::invalid(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.k < 2 {
            return fail(format!("k must be >= 2, got {}", self.k));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail(format!("widths must be nonempty and positive, got {:?}", self.widths));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.mode == TrainMode::NoReconstruction && self.lambda == 0.0 {
            return fail("no_reconstruction mode needs lambda > 0".into());
        }
        for (key, v) in [("alpha_p", self.alpha_p), ("alpha_l", self.alpha_l)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{key} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if let Some(b) = self.batch_size {
            if b < 2 {
                return fail(format!("batch_size must be >= 2 (batch norm), got {b}"));
            }
        }
        if self.lloyd_restarts == 0 || self.lloyd_max_iter == 0 {
            return fail("lloyd_restarts and lloyd_max_iter must be >= 1".into());
        }
        self.schedule.validate()
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(parse_err(format!("duplicate key {key:?}")));
            }
            pairs.push((line_no, key.to_string(), value.to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((line, _, v)) => preset(v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: *line,
                message: e.to_string(),
            })?,
            None => Self::default(),
        };
        for (line, key, value) in &pairs {
            if key == "preset" {
                continue;
            }
            cfg.set(key, value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: *line,
                message: match e {
                    Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        cfg.validate().map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets one field from its textual value. `preset` replaces every field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::invalid(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "preset" => *self = preset(value)?,
            "mode" => self.mode = value.parse()?,
            "k" => self.k = num(key, value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "lambda" => self.lambda = num(key, value)?,
            "alpha_p" => self.alpha_p = num(key, value)?,
            "alpha_l" => self.alpha_l = num(key, value)?,
            "t_p" => self.t_p = num(key, value)?,
            "t_l" => self.t_l = num(key, value)?,
            "batch_size" => {
                self.batch_size = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "momentum" => self.momentum = num(key, value)?,
            "nesterov" => self.nesterov = flag(key, value)?,
            "schedule" => self.schedule = parse_schedule(value)?,
            "seed" => self.seed = num(key, value)?,
            "linear_bottleneck" => self.linear_bottleneck = flag(key, value)?,
            "relu_output" => self.relu_output = flag(key, value)?,
            "count_order" => {
                self.count_order = match value {
                    "increment_first" => CountOrder::IncrementFirst,
                    "stale_count" => CountOrder::StaleCount,
                    v => {
                        return Err(Error::invalid(format!(
                            "count_order: expected increment_first or stale_count, got {v:?}"
                        )))
                    }
                }
            }
            "lloyd_restarts" => self.lloyd_restarts = num(key, value)?,
            "lloyd_max_iter" => self.lloyd_max_iter = num(key, value)?,
            "nmi_norm" => {
                self.nmi_norm = match value {
                    "sqrt" => NmiNorm::Sqrt,
                    "arithmetic" => NmiNorm::Arithmetic,
                    v => {
                        return Err(Error::invalid(format!(
                            "nmi_norm: expected sqrt or arithmetic, got {v:?}"
                        )))
                    }
                }
            }
            "record_timing" => self.record_timing = flag(key, value)?,
            "scatter" => self.scatter = flag(key, value)?,
            other => return Err(Error::invalid(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every field in config-file syntax; [`parse`](Self::parse) reads it
    /// back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "# preset: {p}");
        }
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let schedule = match self.schedule {
            Schedule::Constant => "constant".to_string(),
            Schedule::InverseTime(g) => format!("inverse_time:{g:?}"),
        };
        let count_order = match self.count_order {
            CountOrder::IncrementFirst => "increment_first",
            CountOrder::StaleCount => "stale_count",
        };
        let nmi_norm = match self.nmi_norm {
            NmiNorm::Sqrt => "sqrt",
            NmiNorm::Arithmetic => "arithmetic",
        };
        let batch = self
            .batch_size
            .map_or_else(|| "auto".to_string(), |b| b.to_string());
        let lines: [(&str, String); 21] = [
            ("mode", self.mode.to_string()),
            ("k", self.k.to_string()),
            ("widths", widths.join(",")),
            ("lambda", format!("{:?}", self.lambda)),
            ("alpha_p", format!("{:?}", self.alpha_p)),
            ("alpha_l", format!("{:?}", self.alpha_l)),
            ("t_p", self.t_p.to_string()),
            ("t_l", self.t_l.to_string()),
            ("batch_size", batch),
            ("momentum", format!("{:?}", self.momentum)),
            ("nesterov", self.nesterov.to_string()),
            ("schedule", schedule),
            ("seed", self.seed.to_string()),
            ("linear_bottleneck", self.linear_bottleneck.to_string()),
            ("relu_output", self.relu_output.to_string()),
            ("count_order", count_order.to_string()),
            ("lloyd_restarts", self.lloyd_restarts.to_string()),
            ("lloyd_max_iter", self.lloyd_max_iter.to_string()),
            ("nmi_norm", nmi_norm.to_string()),
            ("record_timing", self.record_timing.to_string()),
            ("scatter", self.scatter.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// `constant` or `inverse_time:GAMMA`.
pub fn parse_schedule(text: &str) -> Result<Schedule> {
    let schedule = match text.split_once(':') {
        None if text == "constant" => Schedule::Constant,
        Some(("inverse_time", g)) => Schedule::InverseTime(
            g.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("schedule: bad decay {g:?}")))?,
        ),
        _ => {
            return Err(Error::invalid(format!(
                "schedule: expected constant or inverse_time:GAMMA, got {text:?}"
            )))
        }
    };
    schedule.validate()?;
    Ok(schedule)
}
