//! Checkpoint persistence.
//!
//! Layout: the magic line `PRECISEv1`, a text header naming every parameter
//! with its shape and scalar width, a `data` line, the raw little-endian
//! buffers in header order, then `key=value` metadata lines. Round-trips are
//! bit-exact; float metadata uses Rust's shortest round-trip formatting.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::NormStats;
use crate::loss::ProtoMode;
use crate::model::{expected_params, Architecture, ModelError, Param, PreciseModel};
use crate::scalar::{Scalar, ScalarWidth};

pub const MAGIC: &str = "PRECISEv1";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: ProtoMode,
    pub train_seed: u64,
    pub norm: Option<NormStats>,
}

pub enum Loaded {
    F32(PreciseModel<f32>, CheckpointMeta),
    F64(PreciseModel<f64>, CheckpointMeta),
}

impl Loaded {
    pub fn width(&self) -> ScalarWidth {
        match self {
            Loaded::F32(..) => ScalarWidth::F32,
            Loaded::F64(..) => ScalarWidth::F64,
        }
    }
}

fn shape_token(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Serialized checkpoint bytes.
pub fn to_bytes<S: Scalar>(model: &PreciseModel<S>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC}\n").as_bytes());
    out.extend_from_slice(format!("params {}\n", model.params.len()).as_bytes());
    for p in &model.params {
        out.extend_from_slice(
            format!("{} {} {}\n", p.name, shape_token(&p.shape), S::WIDTH.name()).as_bytes(),
        );
    }
    out.extend_from_slice(b"data\n");
    for p in &model.params {
        for &v in &p.values {
            v.append_le_bytes(&mut out);
        }
    }
    let arch = &model.arch;
    let hidden = arch
        .hidden
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut meta_text = String::new();
    meta_text.push_str(&format!("arch.width={}\n", arch.width));
    meta_text.push_str(&format!("arch.height={}\n", arch.height));
    meta_text.push_str(&format!("arch.hidden={hidden}\n"));
    meta_text.push_str(&format!("arch.latent_dim={}\n", arch.latent_dim));
    meta_text.push_str(&format!(
        "arch.prototypes_per_class={}\n",
        arch.per_class_prototypes
    ));
    meta_text.push_str(&format!("arch.num_classes={}\n", arch.num_classes));
    meta_text.push_str(&format!("arch.classifier_bias={}\n", arch.classifier_bias));
    meta_text.push_str(&format!("init_seed={}\n", model.init_seed));
    meta_text.push_str(&format!("train_seed={}\n", meta.train_seed));
    meta_text.push_str(&format!("lambda1={}\n", meta.lambda1));
    meta_text.push_str(&format!("lambda2={}\n", meta.lambda2));
    meta_text.push_str(&format!("mode={}\n", meta.mode));
    if let Some(norm) = &meta.norm {
        meta_text.push_str(&format!("norm.mean={}\n", norm.mean));
        meta_text.push_str(&format!("norm.std={}\n", norm.std));
    }
    out.extend_from_slice(meta_text.as_bytes());
    out
}

pub fn save<S: Scalar>(
    path: &Path,
    model: &PreciseModel<S>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct LineReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LineReader<'a> {
    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        if self.pos >= self.bytes.len() {
            return Err(CheckpointError::Format("unexpected end of file".into()));
        }
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Format("missing newline".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| CheckpointError::Format("non-UTF8 header line".into()))
    }
}

fn parse_shape(token: &str) -> Result<Vec<usize>, CheckpointError> {
    token
        .split('x')
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| CheckpointError::Format(format!("bad shape token `{token}`")))
        })
        .collect()
}

fn parse_params<S: Scalar>(
    header: &[(String, Vec<usize>)],
    blob: &[u8],
) -> Result<Vec<Param<S>>, CheckpointError> {
    let bytes_per = S::WIDTH.bytes();
    let mut offset = 0usize;
    let mut params = Vec::with_capacity(header.len());
    for (name, shape) in header {
        let n: usize = shape.iter().product();
        let need = n * bytes_per;
        if offset + need > blob.len() {
            return Err(CheckpointError::Format(format!(
                "truncated data for parameter `{name}`"
            )));
        }
        let values = blob[offset..offset + need]
            .chunks_exact(bytes_per)
            .map(S::from_le_bytes)
            .collect();
        offset += need;
        params.push(Param {
            name: name.clone(),
            shape: shape.clone(),
            values,
        });
    }
    if offset != blob.len() {
        return Err(CheckpointError::Format(
            "trailing bytes after parameters".into(),
        ));
    }
    Ok(params)
}

fn meta_get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str, CheckpointError> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CheckpointError::Format(format!("missing metadata key `{key}`")))
}

fn parse_meta<T: std::str::FromStr>(
    pairs: &[(String, String)],
    key: &str,
) -> Result<T, CheckpointError> {
    meta_get(pairs, key)?
        .parse::<T>()
        .map_err(|_| CheckpointError::Format(format!("bad value for `{key}`")))
}

pub fn load(path: &Path) -> Result<Loaded, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = LineReader {
        bytes: &bytes,
        pos: 0,
    };
    if reader.line()? != MAGIC {
        return Err(CheckpointError::Format("missing magic".into()));
    }
    let params_line = reader.line()?;
    let count: usize = params_line
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| CheckpointError::Format(format!("bad params line `{params_line}`")))?;

    let mut header = Vec::with_capacity(count);
    let mut width: Option<ScalarWidth> = None;
    for _ in 0..count {
        let line = reader.line()?;
        let mut parts = line.split(' ');
        let (name, shape, w) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(s), Some(w), None) => (n, s, w),
            _ => {
                return Err(CheckpointError::Format(format!(
                    "bad parameter line `{line}`"
                )))
            }
        };
        let w = ScalarWidth::parse(w)
            .ok_or_else(|| CheckpointError::Format(format!("unknown scalar width `{w}`")))?;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(CheckpointError::Format("mixed scalar widths".into()))
            }
            _ => {}
        }
        header.push((name.to_string(), parse_shape(shape)?));
    }
    let width = width.ok_or_else(|| CheckpointError::Format("no parameters".into()))?;
    if reader.line()? != "data" {
        return Err(CheckpointError::Format("missing data marker".into()));
    }
    let blob_len: usize = header
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * width.bytes())
        .sum();
    if reader.pos + blob_len > bytes.len() {
        return Err(CheckpointError::Format("truncated parameter data".into()));
    }
    let blob = &bytes[reader.pos..reader.pos + blob_len];
    reader.pos += blob_len;

    let mut pairs = Vec::new();
    while reader.pos < bytes.len() {
        let line = reader.line()?;
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Format(format!("bad metadata line `{line}`")))?;
        pairs.push((k.to_string(), v.to_string()));
    }

    let hidden_raw = meta_get(&pairs, "arch.hidden")?;
    let hidden: Vec<usize> = if hidden_raw.is_empty() {
        Vec::new()
    } else {
        hidden_raw
            .split(',')
            .map(|t| {
                t.parse::<usize>().map_err(|_| {
                    CheckpointError::Format(format!("bad hidden sizes `{hidden_raw}`"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let arch = Architecture {
        width: parse_meta(&pairs, "arch.width")?,
        height: parse_meta(&pairs, "arch.height")?,
        hidden,
        latent_dim: parse_meta(&pairs, "arch.latent_dim")?,
        per_class_prototypes: parse_meta(&pairs, "arch.prototypes_per_class")?,
        num_classes: parse_meta(&pairs, "arch.num_classes")?,
        classifier_bias: parse_meta(&pairs, "arch.classifier_bias")?,
    };
    arch.validate()?;
    let expect = expected_params(&arch);
    if expect != header {
        return Err(CheckpointError::Format(
            "parameter header does not match the architecture".into(),
        ));
    }
    let norm = match (
        pairs.iter().any(|(k, _)| k == "norm.mean"),
        pairs.iter().any(|(k, _)| k == "norm.std"),
    ) {
        (true, true) => Some(NormStats {
            mean: parse_meta(&pairs, "norm.mean")?,
            std: parse_meta(&pairs, "norm.std")?,
        }),
        (false, false) => None,
        _ => return Err(CheckpointError::Format("incomplete norm stats".into())),
    };
    let meta = CheckpointMeta {
        lambda1: parse_meta(&pairs, "lambda1")?,
        lambda2: parse_meta(&pairs, "lambda2")?,
        mode: meta_get(&pairs, "mode")?
            .parse::<ProtoMode>()
            .map_err(CheckpointError::Format)?,
        train_seed: parse_meta(&pairs, "train_seed")?,
        norm,
    };
    let init_seed: u64 = parse_meta(&pairs, "init_seed")?;

    Ok(match width {
        ScalarWidth::F32 => Loaded::F32(
            PreciseModel {
                arch,
                params: parse_params::<f32>(&header, blob)?,
                init_seed,
            },
            meta,
        ),
        ScalarWidth::F64 => Loaded::F64(
            PreciseModel {
                arch,
                params: parse_params::<f64>(&header, blob)?,
                init_seed,
            },
            meta,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            width: 4,
            height: 4,
            hidden: vec![6],
            latent_dim: 3,
            per_class_prototypes: 2,
            num_classes: 2,
            classifier_bias: true,
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            lambda1: 1.0,
            lambda2: 0.001,
            mode: ProtoMode::Reserved,
            train_seed: 42,
            norm: Some(NormStats {
                mean: 0.2314159,
                std: 0.9000001,
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f64() {
        let model = PreciseModel::<f64>::init(arch(), 11).unwrap();
        let bytes = to_bytes(&model, &meta());
        assert!(bytes.starts_with(b"PRECISEv1\n"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &meta()).unwrap();
        match load(&path).unwrap() {
            Loaded::F64(loaded, loaded_meta) => {
                assert_eq!(loaded_meta, meta());
                assert_eq!(loaded.init_seed, 11);
                for (a, b) in model.params.iter().zip(&loaded.params) {
                    assert_eq!(a.name, b.name);
                    assert_eq!(a.shape, b.shape);
                    assert_eq!(a.values, b.values);
                }
                // save(load(x)) == x
                assert_eq!(to_bytes(&loaded, &loaded_meta), bytes);
            }
            Loaded::F32(..) => panic!("width mangled"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f32() {
        let model = PreciseModel::<f32>::init(arch(), 7).unwrap();
        let mut m = meta();
        m.norm = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m32.ckpt");
        save(&path, &model, &m).unwrap();
        match load(&path).unwrap() {
            Loaded::F32(loaded, lm) => {
                assert_eq!(lm.norm, None);
                for (a, b) in model.params.iter().zip(&loaded.params) {
                    assert_eq!(a.values, b.values);
                }
                assert_eq!(
                    std::fs::read(&path).unwrap(),
                    to_bytes(&loaded, &lm),
                    "byte-identical re-serialization"
                );
            }
            Loaded::F64(..) => panic!("width mangled"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");

        std::fs::write(&path, b"NOTMAGIC\n").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));

        // header/architecture disagreement
        let model = PreciseModel::<f64>::init(arch(), 0).unwrap();
        let mut bytes = to_bytes(&model, &meta());
        let needle = b"arch.latent_dim=3";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[at + needle.len() - 1] = b'4';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));

        // truncated blob
        let good = to_bytes(&model, &meta());
        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
