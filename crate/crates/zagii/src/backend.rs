//! Gateway construction from command-line options.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::ValueEnum;
use zagii_core::fixtures;
use zagii_core::llm::{Gateway, GatewayConfig, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Scripted,
    Remote,
}

pub const GATEWAY_CONFIG_FILE: &str = "gateway.toml";
pub const LIGHT_SCRIPT_FILE: &str = "light.jsonl";
pub const SOTA_SCRIPT_FILE: &str = "sota.jsonl";

/// Scripted: `<scripts>/gateway.toml` if present, else `light.jsonl` plus an
/// optional `sota.jsonl`, else the bundled demo scripts. Remote: a gateway
/// TOML file is required.
pub fn build_gateway(kind: BackendKind, scripts: Option<&Path>, config: Option<&Path>) -> anyhow::Result<Gateway> {
    if let Some(path) = config {
        return from_config_file(path);
    }
    match kind {
        BackendKind::Remote => bail!("--backend remote needs --config <gateway.toml> with remote backends"),
        BackendKind::Scripted => match scripts {
            None => Ok(fixtures::demo_gateway()),
            Some(dir) => {
                let toml_path = dir.join(GATEWAY_CONFIG_FILE);
                if toml_path.exists() {
                    return from_config_file(&toml_path);
                }
                let light = load_script("scripted-light", &dir.join(LIGHT_SCRIPT_FILE))?;
                let mut gateway = Gateway::new().with_light(Arc::new(light));
                let sota_path = dir.join(SOTA_SCRIPT_FILE);
                if sota_path.exists() {
                    gateway = gateway.with_sota(Arc::new(load_script("scripted-sota", &sota_path)?));
                }
                Ok(gateway)
            }
        },
    }
}

fn load_script(id: &str, path: &Path) -> anyhow::Result<ScriptedBackend> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScriptedBackend::parse(id, &text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn from_config_file(path: &Path) -> anyhow::Result<Gateway> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = GatewayConfig::from_toml(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(Gateway::from_config(&config, base)?)
}

/// Writes the bundled demo scripts as `light.jsonl` and `sota.jsonl`.
pub fn export_demo_scripts(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (file, entries) in [(LIGHT_SCRIPT_FILE, fixtures::demo_light_script()), (SOTA_SCRIPT_FILE, fixtures::golden_sota_script())] {
        let mut text = String::new();
        for entry in entries {
            text.push_str(&serde_json::to_string(&entry)?);
            text.push('\n');
        }
        let path = dir.join(file);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
