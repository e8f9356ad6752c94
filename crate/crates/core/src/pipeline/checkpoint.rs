//! Weight files: `CRPNW1`, a `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, a `u32` rank and `u32` dims; after the
//! manifest, every tensor's `f32` data in manifest order. All little-endian.

use std::collections::HashMap;
use std::path::Path;

use super::config::PipelineConfig;
use super::model::Model;
use super::train::TrainState;
use crate::assign::TargetStats;
use crate::binio::{put_f32s, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::geometry::Delta;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CRPNW1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, to_u32(tensors.len(), "tensor count")?);
    for t in tensors {
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape("encode_tensors", &t.dims, t.data.len()));
        }
        put_u32(&mut out, to_u32(t.name.len(), "name length")?);
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, to_u32(t.dims.len(), "rank")?);
        for &d in &t.dims {
            put_u32(&mut out, to_u32(d, "dim")?);
        }
    }
    for t in tensors {
        put_f32s(&mut out, t.data.iter().copied());
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, dims));
    }
    let mut out = Vec::with_capacity(count);
    for (name, dims) in manifest {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.error(format!("{name}: element count overflows")))?;
        let data = r.f32_vec(n, &name)?;
        out.push(NamedTensor { name, dims, data });
    }
    if !r.at_end() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

fn stats_tensor(t: usize, s: &TargetStats) -> NamedTensor {
    let data = s
        .mean
        .to_array()
        .into_iter()
        .chain(s.std.to_array())
        .map(|v| v as f32)
        .collect();
    NamedTensor {
        name: format!("stats.stage{}", t + 1),
        dims: vec![2, 4],
        data,
    }
}

fn model_tensors(model: &Model<f32>, prefix: &str) -> Vec<NamedTensor> {
    model
        .param_specs()
        .into_iter()
        .zip(model.params())
        .map(|((name, dims), data)| NamedTensor {
            name: format!("{prefix}{name}"),
            dims,
            data: data.to_vec(),
        })
        .collect()
}

pub fn state_tensors(state: &TrainState) -> Vec<NamedTensor> {
    let mut out = model_tensors(&state.model, "");
    out.extend(model_tensors(&state.momentum, "momentum."));
    out.extend(
        state
            .stats
            .iter()
            .enumerate()
            .map(|(t, s)| stats_tensor(t, s)),
    );
    out.push(NamedTensor {
        name: "train.epoch".into(),
        dims: vec![1],
        data: vec![state.epoch as f32],
    });
    out
}

fn fill_model(
    model: &mut Model<f32>,
    prefix: &str,
    by_name: &HashMap<&str, &NamedTensor>,
    required: bool,
) -> Result<bool> {
    let specs = model.param_specs();
    let mut found = true;
    for ((name, dims), dst) in specs.iter().zip(model.params_mut()) {
        let key = format!("{prefix}{name}");
        match by_name.get(key.as_str()) {
            Some(t) if &t.dims == dims => dst.copy_from_slice(&t.data),
            Some(t) => {
                return Err(Error::config(
                    "checkpoint",
                    format!("{key} has dims {:?}, config expects {dims:?}", t.dims),
                ))
            }
            None if required => {
                return Err(Error::config(
                    "checkpoint",
                    format!("missing tensor {key} for this config"),
                ))
            }
            None => found = false,
        }
    }
    Ok(found)
}

/// Rebuild a training state for `cfg`; momentum defaults to zero when absent.
pub fn state_from_tensors(tensors: &[NamedTensor], cfg: &PipelineConfig) -> Result<TrainState> {
    let by_name: HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let expected = Model::<f32>::init(cfg)?.param_specs();
    let known = |n: &str| {
        n == "train.epoch"
            || n.starts_with("stats.")
            || expected
                .iter()
                .any(|(e, _)| n == e || n.strip_prefix("momentum.") == Some(e))
    };
    if let Some(extra) = tensors.iter().find(|t| !known(&t.name)) {
        return Err(Error::config(
            "checkpoint",
            format!("tensor {} does not belong to this config", extra.name),
        ));
    }
    let mut model = Model::<f32>::init(cfg)?;
    fill_model(&mut model, "", &by_name, true)?;
    let mut momentum = model.zeros_like();
    if !fill_model(&mut momentum, "momentum.", &by_name, false)? {
        momentum = model.zeros_like();
    }
    let stats = (0..cfg.num_stages)
        .map(|t| {
            let key = format!("stats.stage{}", t + 1);
            let s = by_name
                .get(key.as_str())
                .filter(|s| s.dims == [2, 4])
                .ok_or_else(|| {
                    Error::config("checkpoint", format!("missing or malformed {key}"))
                })?;
            let v: Vec<f64> = s.data.iter().map(|&x| x as f64).collect();
            Ok(TargetStats {
                mean: Delta::from_array([v[0], v[1], v[2], v[3]]),
                std: Delta::from_array([v[4], v[5], v[6], v[7]]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let epoch = by_name
        .get("train.epoch")
        .and_then(|t| t.data.first())
        .map_or(0, |&e| e as usize);
    Ok(TrainState {
        model,
        momentum,
        stats,
        epoch,
    })
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_tensors(&state_tensors(state))?)?;
    Ok(())
}

pub fn load_state(path: &Path, cfg: &PipelineConfig) -> Result<TrainState> {
    state_from_tensors(&decode_tensors(&std::fs::read(path)?)?, cfg)
}
