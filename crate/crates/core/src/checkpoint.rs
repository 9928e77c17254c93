//! Adapter and full-model checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PEFT" | version u32 | method id u8 | meta length u32 | meta UTF-8
//! then until EOF, per tensor:
//! name length u16 | name UTF-8 | ndim u8 | dims u32 × ndim | f32 × prod(dims)
//! ```
//!
//! The meta text uses the run-config syntax and carries at least an
//! `[adapter]` section (adapter files) and a `[model]` section.

use std::path::Path;

use crate::adapters::{attach, AdapterSpec, Method, FULL_MODEL_ID};
use crate::config::Ini;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VitModel};

pub const MAGIC: &[u8; 4] = b"PEFT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    /// Bytes this record spends on its name and shape.
    pub fn overhead(&self) -> usize {
        2 + self.name.len() + 1 + 4 * self.shape.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method_id: u8,
    pub meta: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn is_full_model(&self) -> bool {
        self.method_id == FULL_MODEL_ID
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.method_id);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let method_id = r.take(1)?[0];
        if method_id != FULL_MODEL_ID && Method::from_id(method_id).is_none() {
            return Err(Error::Checkpoint(format!("unknown method id {method_id}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("meta text is not UTF-8".into()))?;
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, shape, data });
        }
        Ok(Checkpoint {
            method_id,
            meta,
            records,
        })
    }

    /// File size in bytes.
    pub fn len(&self) -> usize {
        self.header_len() + 4 * self.payload_scalars()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn payload_scalars(&self) -> usize {
        self.records.iter().map(|r| r.data.len()).sum()
    }

    /// Everything that is not tensor payload: the fixed header, the meta
    /// text and each record's name and shape.
    pub fn header_len(&self) -> usize {
        4 + 4 + 1 + 4 + self.meta.len() + self.records.iter().map(Record::overhead).sum::<usize>()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn meta_ini(&self) -> Result<Ini> {
        Ini::parse(&self.meta)
    }

    pub fn adapter_spec(&self) -> Result<Option<AdapterSpec>> {
        match self.meta_ini()?.section_text("adapter") {
            Some(text) => AdapterSpec::from_canonical(&text).map(Some),
            None => Ok(None),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let text = self
            .meta_ini()?
            .section_text("model")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no [model] section".into()))?;
        ModelConfig::from_canonical(&text)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("file truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Meta text for `model`: its geometry, its adapter spec if any, and any
/// extra sections the caller wants to keep with the weights.
pub fn meta_for(model: &VitModel<f32>, extra: &str) -> String {
    let mut meta = String::new();
    if let Some(spec) = model.adapter_spec() {
        meta.push_str("[adapter]\n");
        meta.push_str(&spec.to_canonical());
    }
    meta.push_str("[model]\n");
    meta.push_str(&model.config().to_canonical());
    meta.push_str(extra);
    meta
}

/// Checkpoint holding the parameters `model`'s method trains, or every
/// parameter for full fine-tuning.
pub fn adapter_checkpoint(model: &VitModel<f32>, extra_meta: &str) -> Result<Checkpoint> {
    if model.is_fused() {
        return Err(Error::Checkpoint("a fused model has no separate adapter weights".into()));
    }
    let method = model.method();
    if method == Method::Full {
        return Ok(full_checkpoint(model, extra_meta));
    }
    let mut records = Vec::new();
    model.visit(|name, kind, p| {
        if method.trains(kind) {
            records.push(Record {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
        }
    });
    Ok(Checkpoint {
        method_id: method.id(),
        meta: meta_for(model, extra_meta),
        records,
    })
}

/// Checkpoint of every parameter, adapters excluded (fuse them first).
pub fn full_checkpoint(model: &VitModel<f32>, extra_meta: &str) -> Checkpoint {
    let mut records = Vec::new();
    model.visit(|name, kind, p| {
        if !kind.is_adapter() {
            records.push(Record {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
        }
    });
    let mut meta = String::from("[model]\n");
    meta.push_str(&model.config().to_canonical());
    meta.push_str(extra_meta);
    Checkpoint {
        method_id: FULL_MODEL_ID,
        meta,
        records,
    }
}

/// Copies every record into the same-named parameter of `model`. Unknown
/// names and shape differences are errors; nothing is written unless all
/// records match.
pub fn apply_records(model: &mut VitModel<f32>, records: &[Record]) -> Result<()> {
    let infos = model.param_infos();
    for r in records {
        let info = infos
            .iter()
            .find(|i| i.name == r.name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{}`", r.name)))?;
        if info.shape != r.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{}`: file {:?}, model {:?}",
                r.name, r.shape, info.shape
            )));
        }
    }
    model.visit_mut(|name, _, p| {
        if let Some(r) = records.iter().find(|r| r.name == name) {
            p.value.data_mut().copy_from_slice(&r.data);
        }
    });
    Ok(())
}

/// Attaches the checkpoint's adapters to an adapter-free `model` (or
/// reuses matching ones) and loads the stored weights.
pub fn load_adapters(ckpt: &Checkpoint, model: &mut VitModel<f32>) -> Result<()> {
    if ckpt.is_full_model() {
        return apply_records(model, &ckpt.records);
    }
    let spec = ckpt
        .adapter_spec()?
        .ok_or_else(|| Error::Checkpoint("adapter checkpoint has no [adapter] section".into()))?;
    if spec.method.id() != ckpt.method_id {
        return Err(Error::Checkpoint(format!(
            "method id {} disagrees with [adapter] method {}",
            ckpt.method_id, spec.method
        )));
    }
    match model.adapter_spec() {
        None => {
            let mut trial = model.clone();
            attach(&mut trial, &spec, 0)?;
            apply_records(&mut trial, &ckpt.records)?;
            *model = trial;
        }
        Some(existing) if *existing == spec => apply_records(model, &ckpt.records)?,
        Some(existing) => {
            return Err(Error::Checkpoint(format!(
                "model already carries {} adapters, file holds {}",
                existing.method, spec.method
            )))
        }
    }
    Ok(())
}

/// Builds a model from a full-model checkpoint.
pub fn load_full_model(ckpt: &Checkpoint) -> Result<VitModel<f32>> {
    if !ckpt.is_full_model() {
        return Err(Error::Checkpoint("not a full-model checkpoint".into()));
    }
    let config = ckpt.model_config()?;
    let mut model = VitModel::new(config, 0)?;
    let expected = model.param_infos().len();
    if ckpt.records.len() != expected {
        return Err(Error::Checkpoint(format!(
            "full model needs {expected} tensors, file has {}",
            ckpt.records.len()
        )));
    }
    apply_records(&mut model, &ckpt.records)?;
    Ok(model)
}
