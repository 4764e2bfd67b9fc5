use std::path::{Path, PathBuf};

use serde::Serialize;

use igt_core::experiment::ExperimentConfig;

/// A command failure, printed as one `key=value` line.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        let msg = msg.replace(['\n', '\r'], " ");
        format!("error kind={kind} message={msg:?}")
    }
}

impl From<igt_core::Error> for Failure {
    fn from(e: igt_core::Error) -> Self {
        match e {
            igt_core::Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(format!("{e:#}"))
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Caps the global rayon pool at `IGT_THREADS` when set.
pub fn init_threads() -> Outcome {
    let Ok(raw) = std::env::var("IGT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("IGT_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

/// Loads the config (or the desk preset) and applies flag overrides.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, alpha: Option<f32>) -> Outcome<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.corpus.seed = s;
        cfg.pretrain.seed = s;
        cfg.adapter.seed = s;
        cfg.bench.seed = s;
        cfg.bench.decode.seed = s;
    }
    if let Some(a) = alpha {
        cfg.gate.inference_alpha = a;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: &'a ExperimentConfig,
    pub run_dir: PathBuf,
    /// Files this command writes, relative to `run_dir`.
    pub outputs: Vec<String>,
}

pub fn version() -> String {
    format!("igt-v{}", env!("CARGO_PKG_VERSION"))
}

/// One run directory shared by all commands.
pub struct RunDir {
    pub root: PathBuf,
    pub force: bool,
}

impl RunDir {
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Creates the directory, refuses to clobber existing outputs without
    /// `--force`, then writes the manifest for `command`.
    pub fn begin(&self, command: &str, cfg: &ExperimentConfig, seed: Option<u64>, outputs: &[String]) -> Outcome {
        std::fs::create_dir_all(&self.root)?;
        let manifest_name = format!("manifest_{command}.json");
        if !self.force {
            if let Some(existing) = outputs.iter().chain([&manifest_name]).find(|f| self.path(f).exists()) {
                return Err(Failure::Runtime(format!(
                    "{} already exists; pass --force to overwrite",
                    self.path(existing).display()
                )));
            }
        }
        let manifest = RunManifest {
            command: command.to_string(),
            version: version(),
            seed,
            config: cfg,
            run_dir: self.root.clone(),
            outputs: outputs.to_vec(),
        };
        std::fs::write(self.path(&manifest_name), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Outcome {
        std::fs::write(self.path(name), contents)?;
        Ok(())
    }
}
