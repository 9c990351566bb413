//! Safetensors-backed parameter files.
//!
//! Every file carries a string header with the format version, the warp
//! grid, the trunk identity and truncation point, and the layer widths.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{
    BackboneSource, ConvLayer, Linear, ModelConfig, ModelParams, BACKBONE_CONVS, BACKBONE_ID, BACKBONE_TRUNCATION,
};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";

pub type Metadata = HashMap<String, String>;

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Checkpoint(format!("bad integer list {s:?}"))))
        .collect()
}

/// Header fields describing a model.
pub fn model_metadata(config: &ModelConfig, kind: &str) -> Metadata {
    let mut m = Metadata::new();
    m.insert("format_version".into(), FORMAT_VERSION.into());
    m.insert("kind".into(), kind.into());
    m.insert("grid_rows".into(), config.grid.0.to_string());
    m.insert("grid_cols".into(), config.grid.1.to_string());
    m.insert("backbone".into(), BACKBONE_ID.into());
    m.insert("backbone_truncation".into(), BACKBONE_TRUNCATION.into());
    m.insert("backbone_source".into(), config.backbone.identifier());
    m.insert("head_widths".into(), join(&config.head_widths));
    m.insert("head_kernels".into(), join(&config.head_kernels));
    m.insert("spatial_widths".into(), join(&config.spatial_widths));
    m.insert("init_std".into(), config.init_std.to_string());
    m.insert("init_seed".into(), config.init_seed.to_string());
    m
}

pub fn field<'a>(meta: &'a Metadata, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("header field {key:?} missing")))
}

pub fn parse_field<V: std::str::FromStr>(meta: &Metadata, key: &str) -> Result<V> {
    let raw = field(meta, key)?;
    raw.parse().map_err(|_| Error::Checkpoint(format!("header field {key:?} has bad value {raw:?}")))
}

pub fn config_from_metadata(meta: &Metadata) -> Result<ModelConfig> {
    let backbone = field(meta, "backbone")?;
    let trunc = field(meta, "backbone_truncation")?;
    if backbone != BACKBONE_ID || trunc != BACKBONE_TRUNCATION {
        return Err(Error::Checkpoint(format!("unsupported backbone {backbone} cut at {trunc}")));
    }
    let spatial = split(field(meta, "spatial_widths")?)?;
    let spatial_widths: [usize; 2] = spatial
        .try_into()
        .map_err(|_| Error::Checkpoint("spatial_widths must list two widths".into()))?;
    let config = ModelConfig {
        grid: (parse_field(meta, "grid_rows")?, parse_field(meta, "grid_cols")?),
        head_widths: split(field(meta, "head_widths")?)?,
        head_kernels: split(field(meta, "head_kernels")?)?,
        spatial_widths,
        backbone: BackboneSource::parse(field(meta, "backbone_source")?)?,
        init_std: parse_field(meta, "init_std")?,
        init_seed: parse_field(meta, "init_seed")?,
    };
    config.validate()?;
    Ok(config)
}

/// Serializes named tensors plus header to `path`.
pub fn write_tensors(path: &Path, tensors: &[(String, &Tensor<f32>)], meta: &Metadata) -> Result<()> {
    let bytes: Vec<Vec<u8>> =
        tensors.iter().map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, t), b)| {
            TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = safetensors::serialize(views, &Some(meta.clone())).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses the header and checks the format version before anything else.
pub fn read_metadata(bytes: &[u8]) -> Result<Metadata> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(format!("unreadable: {e}")))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let found = meta.get("format_version").cloned().unwrap_or_else(|| "none".into());
    if found != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found, expected: FORMAT_VERSION.into() });
    }
    Ok(meta)
}

pub fn deserialize(bytes: &[u8]) -> Result<SafeTensors<'_>> {
    SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("unreadable: {e}")))
}

pub fn read_f32(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let view = st.tensor(name).map_err(|_| Error::Checkpoint(format!("tensor {name:?} missing")))?;
    if view.dtype() != Dtype::F32 || view.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name:?} is {:?}{:?}, expected F32{shape:?}",
            view.dtype(),
            view.shape()
        )));
    }
    let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(shape.to_vec(), data))
}

/// Every parameter tensor of a model under its checkpoint name.
pub fn model_tensors(params: &ModelParams) -> Vec<(String, &Tensor<f32>)> {
    let mut all = params.frozen();
    all.extend(params.trainable());
    all
}

/// Rebuilds a model from a deserialized file, shapes checked against the
/// header.
pub fn model_from_file(st: &SafeTensors<'_>, meta: &Metadata) -> Result<ModelParams> {
    let config = config_from_metadata(meta)?;
    let conv = |prefix: &str, c_in: usize, c_out: usize, k: usize| -> Result<ConvLayer<f32>> {
        Ok(ConvLayer {
            weight: read_f32(st, &format!("{prefix}.weight"), &[c_out, c_in, k, k])?,
            bias: read_f32(st, &format!("{prefix}.bias"), &[c_out])?,
        })
    };
    let backbone = crate::model::VGG16_CONVS[..BACKBONE_CONVS]
        .iter()
        .enumerate()
        .map(|(i, &(c_in, c_out))| conv(&format!("backbone.{i}"), c_in, c_out, 3))
        .collect::<Result<Vec<_>>>()?;
    let mut c_in = crate::model::VGG16_CONVS[BACKBONE_CONVS - 1].1;
    let mut head = Vec::new();
    for (i, (&w, &k)) in config.head_widths.iter().zip(&config.head_kernels).enumerate() {
        head.push(conv(&format!("head.{i}"), c_in, w, k)?);
        c_in = w;
    }
    let feat = config.feature_channels();
    let [s1, s2] = config.spatial_widths;
    let spatial = vec![conv("spatial.0", feat, s1, 3)?, conv("spatial.1", s1, s2, 3)?, conv("spatial.2", s2, 1, 3)?];
    let channel = Linear {
        weight: read_f32(st, "channel.weight", &[feat, s2])?,
        bias: read_f32(st, "channel.bias", &[feat])?,
    };
    Ok(ModelParams { config, backbone, head, spatial, channel })
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    write_tensors(path, &model_tensors(params), &model_metadata(&params.config, "model"))
}

/// Loads the model stored in a model or training-state file.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    let meta = read_metadata(&bytes)?;
    let st = deserialize(&bytes)?;
    model_from_file(&st, &meta)
}

/// Order-sensitive hash of tensor bit patterns, for frozen-weight checks.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_parameters, Vgg16};

    fn small_model() -> ModelParams {
        let cfg = ModelConfig { grid: (6, 5), ..ModelConfig::default() };
        ModelParams::with_backbone(cfg, &Vgg16::seeded(16)).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bitwise() {
        let p = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save_model(&p, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(checksum(model_tensors(&back).into_iter().map(|(_, t)| t)), checksum(model_tensors(&p).into_iter().map(|(_, t)| t)));
        assert_eq!(count_parameters(&back), count_parameters(&p));
    }

    #[test]
    fn zero_model_roundtrip_keeps_count() {
        let p = ModelParams::zero_init(ModelConfig::default(), &Vgg16::seeded(16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.safetensors");
        save_model(&p, &path).unwrap();
        assert_eq!(count_parameters(&load_model(&path).unwrap()), count_parameters(&p));
    }

    #[test]
    fn wrong_version_is_named() {
        let p = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.safetensors");
        let mut meta = model_metadata(&p.config, "model");
        meta.insert("format_version".into(), "0".into());
        write_tensors(&path, &model_tensors(&p), &meta).unwrap();
        match load_model(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, "0");
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let p = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        save_model(&p, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));
    }
}
