//! Checkpoint container: a tab-separated text manifest followed by raw
//! little-endian payloads.
//!
//! ```text
//! relcap-checkpoint<TAB>1
//! meta<TAB><key><TAB><value>
//! tensor<TAB><section><TAB><name><TAB><dtype><TAB><shape><TAB><offset><TAB><bytes>
//! end
//! <payload bytes>
//! ```
//!
//! `shape` is `x`-joined extents (`-` for a scalar); offsets are relative to
//! the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "relcap-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: String,
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    entries: Vec<Entry>,
}

fn check_field(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::validation(format!(
            "checkpoint {kind} {s:?} must be non-empty without tabs or newlines"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let value = value.into();
        check_field("meta key", key)?;
        if value.contains(['\t', '\n', '\r']) {
            return Err(Error::validation(format!("meta value for {key} contains a separator")));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::validation(format!("checkpoint lacks meta key {key}")))
    }

    pub fn push(&mut self, section: &str, name: &str, tensor: &Tensor, dtype: DType) -> Result<()> {
        check_field("section", section)?;
        check_field("name", name)?;
        if self.get(section, name).is_some() {
            return Err(Error::validation(format!("duplicate checkpoint entry {section}/{name}")));
        }
        self.entries.push(Entry {
            section: section.to_string(),
            name: name.to_string(),
            dtype,
            tensor: Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())?,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.entries.iter().any(|e| e.section == section)
    }

    pub fn get(&self, section: &str, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.section == section && e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn require(&self, section: &str, name: &str) -> Result<&Tensor> {
        self.get(section, name)
            .ok_or_else(|| Error::validation(format!("checkpoint lacks {section}/{name}")))
    }

    pub fn push_params(&mut self, section: &str, store: &ParamStore, dtype: DType) -> Result<()> {
        for id in store.ids() {
            self.push(section, store.name(id), store.get(id), dtype)?;
        }
        Ok(())
    }

    /// Overwrites the values of every parameter in `store` from `section`.
    pub fn load_params(&self, section: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let src = self.require(section, &name)?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::shape("load_params", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\t{VERSION}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut payload = Vec::new();
        for e in &self.entries {
            let shape = if e.tensor.shape().is_empty() {
                "-".to_string()
            } else {
                e.tensor
                    .shape()
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            let offset = payload.len();
            for v in e.tensor.data() {
                match e.dtype {
                    DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
            header.push_str(&format!(
                "tensor\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.section,
                e.name,
                e.dtype.as_str(),
                shape,
                offset,
                payload.len() - offset
            ));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut ckpt = Checkpoint::new();
        let mut pos = 0;
        let mut line_no = 0;
        let mut manifest = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| perr(line_no + 1, "manifest not terminated by `end`".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| perr(line_no + 1, "manifest is not UTF-8".into()))?;
            pos += end + 1;
            line_no += 1;
            if line_no == 1 {
                if line != format!("{MAGIC}\t{VERSION}") {
                    return Err(perr(1, format!("unsupported header {line:?}")));
                }
                continue;
            }
            if line == "end" {
                break;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    ckpt.meta.insert((*k).to_string(), (*v).to_string());
                }
                ["tensor", section, name, dtype, shape, offset, nbytes] => {
                    manifest.push((line_no, *section, *name, *dtype, *shape, *offset, *nbytes));
                }
                _ => return Err(perr(line_no, format!("unrecognized manifest line {line:?}"))),
            }
        }
        let payload = &bytes[pos..];
        for (line, section, name, dtype, shape, offset, nbytes) in manifest {
            let dtype = DType::parse(dtype).ok_or_else(|| perr(line, format!("bad dtype {dtype}")))?;
            let shape: Vec<usize> = if shape == "-" {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| perr(line, format!("bad shape {shape}")))?
            };
            let offset: usize = offset.parse().map_err(|_| perr(line, "bad offset".into()))?;
            let nbytes: usize = nbytes.parse().map_err(|_| perr(line, "bad byte count".into()))?;
            let numel: usize = shape.iter().product();
            if nbytes != numel * dtype.width() || offset + nbytes > payload.len() {
                return Err(perr(line, format!("payload range for {section}/{name} is invalid")));
            }
            let raw = &payload[offset..offset + nbytes];
            let data: Vec<f64> = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            ckpt.entries.push(Entry {
                section: section.to_string(),
                name: name.to_string(),
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let mut ckpt = Checkpoint::new();
            ckpt.set_meta("note", "a b c").unwrap();
            ckpt.push("model", "w", &t, DType::F64).unwrap();
            ckpt.push("gmm", "s", &Tensor::scalar(values[0]), DType::F64).unwrap();
            let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
            let got = back.get("model", "w").unwrap();
            prop_assert_eq!(got.shape(), t.shape());
            for (a, b) in got.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.get("gmm", "s").unwrap().shape(), &[] as &[usize]);
            prop_assert_eq!(back.meta("note"), Some("a b c"));
        }
    }

    #[test]
    fn f32_round_trip_at_matching_precision() {
        let vals = vec![0.5f32 as f64, (1.0f32 / 3.0) as f64, -7.25];
        let t = Tensor::vector(vals.clone());
        let mut ckpt = Checkpoint::new();
        ckpt.push("s", "v", &t, DType::F32).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.get("s", "v").unwrap().data(), vals.as_slice());
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut ckpt = Checkpoint::new();
        ckpt.push("s", "v", &Tensor::vector(vec![1.0, 2.0]), DType::F64).unwrap();
        let mut bytes = ckpt.to_bytes();
        bytes.truncate(bytes.len() - 3);
        let err = Checkpoint::from_bytes(&bytes, Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("x.ckpt:2"), "{err}");
    }

    #[test]
    fn rejects_tabs_in_names() {
        let mut ckpt = Checkpoint::new();
        assert!(ckpt.push("a\tb", "v", &Tensor::scalar(1.0), DType::F64).is_err());
    }
}
