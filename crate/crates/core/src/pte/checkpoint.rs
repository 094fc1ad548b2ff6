//! Parameter checkpoints: an `FPK1` pack of width 1 whose index maps each
//! parameter path to its first row, plus a JSON sidecar (`.json` next to the
//! pack) holding the encoder config and every parameter shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PTEConfig;
use crate::datastore::{read_feature_pack, write_feature_pack, FeaturePack};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamShape {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: PTEConfig,
    params: Vec<ParamShape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PTEConfig,
    pub params: ParamStore<f64>,
}

/// Write `path` (the pack) and `path.with_extension("json")` (the sidecar).
/// Values are stored as `f32`.
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, config: &PTEConfig, params: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    let mut pack = FeaturePack::new(1);
    let mut shapes = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let mut first = None;
        for v in t.data() {
            let row = pack.push_row(&[v.as_f64() as f32])?;
            first.get_or_insert(row);
        }
        pack.index_row(name.clone(), first.expect("tensors are non-empty"))?;
        shapes.push(ParamShape {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
    }
    write_feature_pack(path, &pack)?;
    let sidecar = Sidecar {
        config: config.clone(),
        params: shapes,
    };
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let side = path.with_extension("json");
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&bytes)?;
    sidecar.config.validate()?;
    let pack = read_feature_pack(path)?;
    if pack.dim() != 1 {
        return Err(Error::Format(format!("checkpoint pack has width {}, expected 1", pack.dim())));
    }
    let mut params = ParamStore::new();
    for p in sidecar.params {
        let n: usize = p.shape.iter().product();
        let start = pack
            .row_of(&p.name)
            .ok_or_else(|| Error::Format(format!("parameter `{}` missing from pack", p.name)))?
            as usize;
        let values = pack
            .data()
            .get(start..start + n)
            .ok_or_else(|| Error::Length(format!("parameter `{}` runs past the pack", p.name)))?;
        params.insert(p.name, Tensor::new(p.shape, values.iter().map(|v| *v as f64).collect())?)?;
    }
    Ok(Checkpoint {
        config: sidecar.config,
        params,
    })
}
