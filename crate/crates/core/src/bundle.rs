// SPDX-License-Identifier: Apache-2.0

//! Bundle configuration: the subset of an OCI `config.json` the runtime
//! uses plus the `c4` section describing the stage table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lifecycle::DEFAULT_C_UNTRUSTED;
use crate::protocol::SessionKey;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid bundle config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> BundleError {
    BundleError::Invalid(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Process {
    pub args: Vec<String>,
    #[serde(default)]
    pub env: Vec<String>,
    #[serde(default = "default_cwd")]
    pub cwd: String,
}

fn default_cwd() -> String {
    "/".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Root {
    pub path: String,
    #[serde(default)]
    pub readonly: bool,
}

/// One entry of the stage table.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Simulator behavior: `hello`, `aesgcm`, `fail` or `sleep`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<String>,
    /// Program path inside the rootfs, for the local-exec backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rc: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

fn default_backend() -> String {
    "sim".into()
}

fn default_c_untrusted() -> u8 {
    DEFAULT_C_UNTRUSTED
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct C4Config {
    #[serde(default = "default_backend")]
    pub backend_id: String,
    #[serde(default)]
    pub stage_table: BTreeMap<String, StageSpec>,
    #[serde(default)]
    pub require_conf: bool,
    #[serde(default = "default_c_untrusted")]
    pub c_untrusted: u8,
    /// Deterministic session key derivation, for reproducible tests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_seed: Option<String>,
}

impl Default for C4Config {
    fn default() -> Self {
        Self {
            backend_id: default_backend(),
            stage_table: BTreeMap::new(),
            require_conf: false,
            c_untrusted: DEFAULT_C_UNTRUSTED,
            session_seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BundleConfig {
    #[serde(rename = "ociVersion", default = "default_oci_version")]
    pub oci_version: String,
    pub process: Process,
    pub root: Root,
    #[serde(default)]
    pub c4: C4Config,
}

fn default_oci_version() -> String {
    "1.0.2".into()
}

/// A loaded bundle directory.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub config: BundleConfig,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let path = dir.join(CONFIG_FILE);
        let bytes = fs::read(&path).map_err(|source| BundleError::Io {
            path: path.clone(),
            source,
        })?;
        let config: BundleConfig =
            serde_json::from_slice(&bytes).map_err(|e| invalid(e.to_string()))?;
        let b = Self {
            dir: dir.to_path_buf(),
            config,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn rootfs(&self) -> PathBuf {
        let p = Path::new(&self.config.root.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Resolves a path given relative to the rootfs, refusing anything that
    /// escapes it.
    pub fn resolve_in_rootfs(&self, program: &str) -> Result<PathBuf, BundleError> {
        let rootfs = self
            .rootfs()
            .canonicalize()
            .map_err(|e| invalid(format!("rootfs {}: {e}", self.config.root.path)))?;
        let candidate = rootfs.join(program.trim_start_matches('/'));
        let resolved = candidate
            .canonicalize()
            .map_err(|e| invalid(format!("{program}: {e}")))?;
        if !resolved.starts_with(&rootfs) {
            return Err(invalid(format!("{program} escapes the rootfs")));
        }
        if !resolved.is_file() {
            return Err(invalid(format!("{program} is not a regular file")));
        }
        Ok(resolved)
    }

    pub fn anchor_program(&self) -> Result<PathBuf, BundleError> {
        let arg0 = self
            .config
            .process
            .args
            .first()
            .ok_or_else(|| invalid("process.args is empty"))?;
        self.resolve_in_rootfs(arg0)
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        self.anchor_program()?;
        for (name, spec) in &self.config.c4.stage_table {
            if !crate::protocol::is_safe_id(name) {
                return Err(invalid(format!("bad stage name {name:?}")));
            }
            if let Some(p) = &spec.program {
                self.resolve_in_rootfs(p)?;
            }
        }
        Ok(())
    }

    /// Fresh random key, or a key derived from `session_seed` and the CID.
    pub fn session_key(&self, cid: &str) -> SessionKey {
        match &self.config.c4.session_seed {
            None => SessionKey::random(),
            Some(seed) => {
                let mut h = Sha256::new();
                h.update(b"c4sk");
                h.update(seed.as_bytes());
                h.update(cid.as_bytes());
                SessionKey::new(h.finalize().into())
            }
        }
    }
}
