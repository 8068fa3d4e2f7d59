//! Human-readable TOML config files mirroring `ModelConfig`.

use std::path::Path;

use mow_core::ModelConfig;

use crate::error::{Error, Result};

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ModelConfig = toml::from_str(&text)?;
    cfg.validate().map_err(Error::Core)?;
    Ok(cfg)
}

pub fn save_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Built-in profiles addressable from the CLI: `full`, `desk:<K>`, `micro:<K>`.
pub fn builtin(name: &str) -> Option<ModelConfig> {
    if name == "full" {
        return Some(ModelConfig::full());
    }
    if let Some(k) = name.strip_prefix("desk:") {
        return k.parse().ok().map(ModelConfig::desk);
    }
    if let Some(k) = name.strip_prefix("micro:") {
        return k.parse().ok().map(ModelConfig::micro);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_preserves_every_field() {
        let cfg = ModelConfig::full();
        let dir = std::env::temp_dir().join(format!("mow-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.toml");
        save_config(&cfg, &path).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(cfg, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn builtin_profiles_resolve() {
        assert!(builtin("full").is_some());
        assert_eq!(builtin("micro:4").unwrap().num_tasks, 4);
        assert_eq!(builtin("desk:2").unwrap().num_tasks, 2);
        assert!(builtin("nope").is_none());
    }
}
