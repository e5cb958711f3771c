//! Checkpoint archives.
//!
//! A checkpoint is a safetensors file. Tensors are stored as little-endian
//! `F64` under three prefixes: `param/` (model parameters), `adam.m/` and
//! `adam.v/` (optimizer moments). The header metadata holds `format`,
//! `epoch`, `global_step`, `adam_step`, `label_map` (comma-separated
//! identities in class order) and `config` (the training config text).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const FORMAT: &str = "facenet-checkpoint-v1";

const PARAM: &str = "param/";
const FIRST: &str = "adam.m/";
const SECOND: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    /// Identity of each class index.
    pub label_map: Vec<u32>,
    pub config_text: String,
}

fn bytes_of(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn to_tensor(view: &TensorView<'_>) -> Result<Tensor> {
    let data = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
        other => return Err(err(format!("unsupported dtype {other:?}"))),
    };
    Tensor::new(view.shape().to_vec(), data)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let groups = [
            (PARAM, self.params.iter().collect::<Vec<_>>()),
            (FIRST, self.adam.first.iter().collect()),
            (SECOND, self.adam.second.iter().collect()),
        ];
        for (prefix, entries) in groups {
            for (name, t) in entries {
                owned.push((format!("{prefix}{name}"), t.shape().to_vec(), bytes_of(t)));
            }
        }
        let views = owned
            .iter()
            .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F64, s.clone(), b).map_err(err)?)))
            .collect::<Result<Vec<_>>>()?;
        let label_map = self.label_map.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let meta: HashMap<String, String> = [
            ("format", FORMAT.to_string()),
            ("epoch", self.epoch.to_string()),
            ("global_step", self.global_step.to_string()),
            ("adam_step", self.adam.step.to_string()),
            ("label_map", label_map),
            ("config", self.config_text.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        safetensors::serialize(views, Some(meta)).map_err(err)
    }

    /// Adam hyper-parameters are not stored; the caller restores them from
    /// the config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| meta.get(k).ok_or_else(|| err(format!("missing metadata `{k}`")));
        if get("format")? != FORMAT {
            return Err(err(format!("unknown format `{}`", get("format")?)));
        }
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|e| err(format!("`{k}`: {e}")));
        let label_map = match get("label_map")?.as_str() {
            "" => Vec::new(),
            s => s.split(',').map(|v| v.parse::<u32>().map_err(err)).collect::<Result<_>>()?,
        };
        let st = SafeTensors::deserialize(bytes).map_err(err)?;
        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = to_tensor(&view)?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix(FIRST) {
                first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(SECOND) {
                second.insert(n.to_string(), t);
            } else {
                return Err(err(format!("unexpected tensor `{name}`")));
            }
        }
        for (n, m) in &first {
            let shape_ok = |t: Option<&Tensor>| t.is_some_and(|t| t.shape() == m.shape());
            if !shape_ok(second.get(n)) || !shape_ok(params.get(n)) {
                return Err(err(format!("optimizer state for `{n}` does not match its parameter")));
            }
        }
        if first.len() != second.len() {
            return Err(err("optimizer moment sets differ"));
        }
        Ok(Checkpoint {
            params,
            adam: Adam {
                step: num("adam_step")?,
                first,
                second,
                ..Default::default()
            },
            epoch: num("epoch")? as usize,
            global_step: num("global_step")? as usize,
            label_map,
            config_text: get("config")?.clone(),
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Copy tensors from a safetensors file into `store` wherever the name
/// exists. F32 and F64 files are accepted; a name match with a different
/// shape is an error. Returns the number of tensors copied.
pub fn load_pretrained(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(err)?;
    let mut copied = 0;
    for (name, view) in st.tensors() {
        let Some(dst) = store.get_mut(&name) else { continue };
        let t = to_tensor(&view)?;
        if t.shape() != dst.shape() {
            return Err(err(format!(
                "pretrained `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        copied += 1;
    }
    Ok(copied)
}
