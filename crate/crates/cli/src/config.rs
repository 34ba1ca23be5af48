//! Experiment configuration: TOML files layered over named presets.

use std::path::PathBuf;

use erank::gram::{build_grid, QuadratureGrid, QuadratureScheme};
use erank::init::Initializer;
use erank::net::{Activation, Network};
use erank::train::{OptimizerConfig, Task, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub depth: usize,
    pub width: usize,
    pub activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elu_alpha: Option<f64>,
}

impl NetworkSection {
    pub fn activation(&self) -> Result<Activation, String> {
        let act: Activation = self.activation.parse().map_err(|e: erank::Error| e.to_string())?;
        Ok(match (act, self.elu_alpha) {
            (Activation::Elu { .. }, Some(alpha)) => Activation::Elu { alpha },
            (_, Some(_)) => return Err("network.elu_alpha is only valid with activation = \"elu\"".into()),
            (a, None) => a,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub scheme: QuadratureScheme,
    /// Points per axis (total for Monte Carlo).
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Worker threads for the seed pool; 0 means one per CPU.
    #[serde(default)]
    pub workers: usize,
    pub out: PathBuf,
    pub task: Task,
    pub network: NetworkSection,
    pub init: Initializer,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub rank_grid: GridSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err("seeds: duplicate seed".into());
        }
        self.task.validate().map_err(|e| format!("task: {e}"))?;
        self.optimizer.validate().map_err(|e| format!("optimizer: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        let act = self.network.activation().map_err(|e| format!("network: {e}"))?;
        if self.task.kind.is_pde() && !act.supports_second_derivatives() {
            return Err(format!("network.activation: {act} cannot be used for {}", self.task.kind));
        }
        self.blank_network().map_err(|e| format!("network: {e}"))?;
        if matches!(self.init, Initializer::Grid) && self.task.kind.input_dim() != 1 {
            return Err(format!("init: grid initialization needs a 1-D task, got {}", self.task.kind));
        }
        self.grid().map_err(|e| format!("rank_grid: {e}"))?;
        Ok(())
    }

    pub fn blank_network(&self) -> erank::Result<Network> {
        let act = self.network.activation().map_err(erank::Error::Config)?;
        Network::zeros(self.task.kind.input_dim(), self.network.depth, self.network.width, act)
    }

    pub fn grid(&self) -> erank::Result<QuadratureGrid> {
        let g = &self.rank_grid;
        build_grid(&self.task.domain(), g.scheme, g.m, g.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

struct Preset {
    name: &'static str,
    about: &'static str,
    build: fn() -> ExperimentConfig,
}

fn base(name: &str, task: Task, depth: usize, width: usize, grid_m: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        seeds: (0..5).collect(),
        workers: 0,
        out: PathBuf::from("runs").join(name),
        task,
        network: NetworkSection {
            depth,
            width,
            activation: "tanh".into(),
            elu_alpha: None,
        },
        init: Initializer::Xavier,
        optimizer: OptimizerConfig::adam(1e-3),
        train: TrainConfig {
            steps: 20_000,
            rank_every: 100,
            epsilon: 1e-6,
            per_layer: false,
            top_eigenvalues: 0,
        },
        rank_grid: GridSection {
            scheme: QuadratureScheme::Trapezoid,
            m: grid_m,
            seed: None,
        },
    }
}

fn fit1d(name: &str, depth: usize, width: usize) -> ExperimentConfig {
    base(name, Task::fit1d(250).unwrap(), depth, width, 129)
}

fn with_activation(mut c: ExperimentConfig, act: &str) -> ExperimentConfig {
    c.network.activation = act.into();
    c
}

fn heat(name: &str, n1: usize, n2: usize, n3: usize) -> ExperimentConfig {
    base(name, Task::heat2d(n1, n2, n3).unwrap(), 3, 100, 50)
}

fn fit2d(name: &str, init: Initializer) -> ExperimentConfig {
    let mut c = base(name, Task::fit2d(550).unwrap(), 3, 50, 129);
    c.init = init;
    c.train.steps = 10_000;
    c
}

fn poisson(name: &str, width: usize, init: Initializer) -> ExperimentConfig {
    let mut c = base(name, Task::poisson2d(200, 50, 20.0).unwrap(), 2, width, 129);
    c.init = init;
    c.train.steps = 10_000;
    c
}

fn udi(gamma: f64) -> Initializer {
    Initializer::Udi { gamma, radius: None }
}

const PRESETS: &[Preset] = &[
    Preset { name: "ex2.1a", about: "fit cos x + cos 2x + cos 30x, L=2 n=50", build: || fit1d("ex2.1a", 2, 50) },
    Preset { name: "ex2.1b", about: "same target, L=2 n=25", build: || fit1d("ex2.1b", 2, 25) },
    Preset { name: "ex2.1c", about: "same target, L=4 n=50", build: || fit1d("ex2.1c", 4, 50) },
    Preset { name: "ex2.1d", about: "same target, L=4 n=25", build: || fit1d("ex2.1d", 4, 25) },
    Preset { name: "ex2.1-relu", about: "L=3 n=50, relu", build: || with_activation(fit1d("ex2.1-relu", 3, 50), "relu") },
    Preset { name: "ex2.1-elu", about: "L=3 n=50, elu", build: || with_activation(fit1d("ex2.1-elu", 3, 50), "elu") },
    Preset { name: "ex2.1-cosine", about: "L=3 n=50, cosine", build: || with_activation(fit1d("ex2.1-cosine", 3, 50), "cosine") },
    Preset { name: "ex2.1-tanh", about: "L=3 n=50, tanh", build: || fit1d("ex2.1-tanh", 3, 50) },
    Preset {
        name: "ex2.1-layers",
        about: "L=4 n=50, ε-rank of every layer",
        build: || {
            let mut c = fit1d("ex2.1-layers", 4, 50);
            c.train.per_layer = true;
            c
        },
    },
    Preset {
        name: "ex2.2",
        about: "Allen-Cahn PINN, L=3 n=50, ε=1e-8",
        build: || {
            let mut c = base("ex2.2", Task::allen_cahn(150, 50, 50).unwrap(), 3, 50, 100);
            c.train.epsilon = 1e-8;
            c
        },
    },
    Preset { name: "ex3.1-failed", about: "heat PINN, samples (1000, 1000, 50)", build: || heat("ex3.1-failed", 1000, 1000, 50) },
    Preset { name: "ex3.1-trainable", about: "heat PINN, samples (2500, 10000, 50)", build: || heat("ex3.1-trainable", 2500, 10000, 50) },
    Preset {
        name: "ex4.1",
        about: "L=2 n=30 fit with grid first-layer init",
        build: || {
            let mut c = fit1d("ex4.1", 2, 30);
            c.init = Initializer::Grid;
            c.train.steps = 10_000;
            c
        },
    },
    Preset {
        name: "ex4.1-xavier",
        about: "ex4.1 with Xavier init",
        build: || {
            let mut c = fit1d("ex4.1-xavier", 2, 30);
            c.train.steps = 10_000;
            c
        },
    },
    Preset {
        name: "ex4.1-deep",
        about: "L=4 n=50 fit with grid first-layer init",
        build: || {
            let mut c = fit1d("ex4.1-deep", 4, 50);
            c.init = Initializer::Grid;
            c.train.steps = 10_000;
            c
        },
    },
    Preset {
        name: "ex4.1-deep-xavier",
        about: "ex4.1-deep with Xavier init",
        build: || {
            let mut c = fit1d("ex4.1-deep-xavier", 4, 50);
            c.train.steps = 10_000;
            c
        },
    },
    Preset { name: "ex4.2", about: "2-D fit, L=3 n=50, UDI γ=2", build: || fit2d("ex4.2", udi(2.0)) },
    Preset { name: "ex4.2-xavier", about: "ex4.2 with Xavier init", build: || fit2d("ex4.2-xavier", Initializer::Xavier) },
    Preset { name: "ex4.3", about: "Poisson PINN, L=2 n=50, UDI γ=1, μ_bc=20", build: || poisson("ex4.3", 50, udi(1.0)) },
    Preset { name: "ex4.3-xavier", about: "ex4.3 with Xavier init", build: || poisson("ex4.3-xavier", 50, Initializer::Xavier) },
    Preset { name: "ex4.3-wide", about: "Poisson PINN, L=2 n=100, UDI γ=2", build: || poisson("ex4.3-wide", 100, udi(2.0)) },
    Preset {
        name: "ex4.3-wide-xavier",
        about: "ex4.3-wide with Xavier init",
        build: || poisson("ex4.3-wide-xavier", 100, Initializer::Xavier),
    },
];

/// Names handled by other subcommands.
const OTHER_PRESETS: &[(&str, &str)] = &[("ex3.2", "rfm-compare")];

#[cfg(test)]
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn preset_listing() -> String {
    PRESETS
        .iter()
        .map(|p| format!("  {:<18} {}", p.name, p.about))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn preset(name: &str) -> Result<ExperimentConfig, String> {
    if let Some(p) = PRESETS.iter().find(|p| p.name == name) {
        return Ok((p.build)());
    }
    if let Some((_, cmd)) = OTHER_PRESETS.iter().find(|(n, _)| *n == name) {
        return Err(format!("preset '{name}' is run with `erank {cmd} --preset {name}`"));
    }
    Err(format!("unknown preset '{name}'; available presets:\n{}", preset_listing()))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
}

/// Resolves a config file (optionally naming `preset = "…"`) and/or a
/// preset name into a full config. Fields in the file override the preset;
/// tables merge key by key.
pub fn resolve(file: Option<(&str, &str)>, preset_name: Option<&str>) -> Result<ExperimentConfig, String> {
    let mut over = match file {
        Some((path, text)) => text
            .parse::<toml::Table>()
            .map_err(|e| format!("{path}: {e}"))?,
        None => toml::Table::new(),
    };
    let file_preset = match over.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(_) => return Err("preset: expected a string".into()),
        None => None,
    };
    let name = preset_name.map(str::to_string).or(file_preset);
    let mut value = match &name {
        Some(n) => toml::Value::try_from(preset(n)?).expect("preset serializes"),
        None => toml::Value::Table(toml::Table::new()),
    };
    if name.is_some() && !over.contains_key("out") {
        if let Some(new_name) = over.get("name").and_then(|v| v.as_str()) {
            over.insert("out".into(), toml::Value::String(format!("runs/{new_name}")));
        }
    }
    merge(&mut value, toml::Value::Table(over));
    // round-trip through text so errors carry the offending key
    let merged = toml::to_string(&value).map_err(|e| e.to_string())?;
    toml::from_str::<ExperimentConfig>(&merged).map_err(|e| {
        let msg = e.message().to_string();
        let key = e
            .span()
            .and_then(|s| merged[..s.start].lines().last().map(str::to_string))
            .and_then(|l| l.split('=').next().map(|k| k.trim().to_string()))
            .filter(|k| !k.is_empty() && !k.starts_with('['));
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .or(key)
            .unwrap_or_default();
        match file {
            Some((path, text)) => match line_of_key(text, &field) {
                Some(l) => format!("{path}:{}: {field}: {msg}", l + 1),
                None => format!("{path}: {msg}"),
            },
            None => msg,
        }
    })
}
