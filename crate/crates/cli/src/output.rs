//! Deferred output writing: every file is accumulated in memory and only
//! written once the whole command has succeeded, so failures leave no
//! partial outputs. Each file starts with comment lines carrying the seed,
//! tool version, and configuration hash.

use std::path::{Path, PathBuf};

use sae_ipw::error::Error;

/// FNV-1a over the canonical configuration description.
pub fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

pub struct OutputSet {
    dir: PathBuf,
    seed: u64,
    config_hash: u64,
    files: Vec<(String, String)>,
}

impl OutputSet {
    pub fn new(dir: &Path, seed: u64, config_hash: u64) -> Self {
        OutputSet {
            dir: dir.to_path_buf(),
            seed,
            config_hash,
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, content: String) {
        self.files.push((name.to_string(), content));
    }

    pub fn write_all(self) -> Result<(), Error> {
        std::fs::create_dir_all(&self.dir)?;
        let header = format!(
            "# seed: {}\n# version: {}\n# config: {:016x}\n",
            self.seed,
            env!("CARGO_PKG_VERSION"),
            self.config_hash
        );
        for (name, content) in &self.files {
            let path = self.dir.join(name);
            let body = if name.ends_with(".svg") {
                content.clone()
            } else {
                format!("{header}{content}")
            };
            std::fs::write(path, body)?;
        }
        Ok(())
    }
}
