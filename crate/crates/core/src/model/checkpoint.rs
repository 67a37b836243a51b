//! Checkpoint container: a JSON config block followed by named tensor records.
//!
//! ```text
//! magic    8 bytes  "SDETRCK1"
//! u64 LE   config length in bytes
//! bytes    config JSON (UTF-8)
//! u32 LE   tensor count
//! records  see `tensor::write_tensor`
//! ```
//!
//! The config text is kept verbatim on load, so load-then-save reproduces the
//! input byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::{read_tensor, write_tensor};

pub const MAGIC: &[u8; 8] = b"SDETRCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config_text: String,
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Result<Self> {
        Ok(Self {
            config_text: serde_json::to_string_pretty(&model.config)?,
            config: model.config.clone(),
            params: model.params.clone(),
        })
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.config, self.params)
    }

    pub fn config_text(&self) -> &str {
        &self.config_text
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.config_text.len() as u64).to_le_bytes())?;
        w.write_all(self.config_text.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_tensor(w, name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Format(format!("config block of {len} bytes is implausible")));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)
            .map_err(|e| Error::Format(format!("checkpoint config block: {e}")))?;
        let config_text =
            String::from_utf8(text).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config: ModelConfig = serde_json::from_str(&config_text)?;
        let mut count = [0u8; 4];
        r.read_exact(&mut count)
            .map_err(|e| Error::Format(format!("checkpoint tensor count: {e}")))?;
        let mut params = ParamStore::new();
        for _ in 0..u32::from_le_bytes(count) {
            let (name, t) = read_tensor(r)?;
            params.add(&name, t)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)
            .map_err(|e| Error::Format(format!("checkpoint trailer: {e}")))?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after last tensor", rest.len())));
        }
        Ok(Self {
            config_text,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
