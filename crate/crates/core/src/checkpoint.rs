//! Binary checkpoints: a magic header, a JSON metadata record and named
//! little-endian `f64` arrays.
//!
//! Layout: `FBZCKPT\x01`, `u64` metadata length, metadata JSON, `u64` array
//! count, then per array `u64` name length, name, `u64` rows, `u64` cols and
//! `rows·cols` values in row-major order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{FbError, Result};
use crate::mdp::MdpSpec;
use crate::model::FbModel;
use crate::networks::Layered;
use crate::tensor::{Array2, Parameter};

pub const MAGIC: &[u8; 8] = b"FBZCKPT\x01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub d: usize,
    pub blocks: usize,
    pub block_sizes: Vec<usize>,
    pub ensemble_m: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub enc_dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub config_hash: String,
    pub config: String,
    /// Single-line MDP spec the training data came from, when known.
    pub mdp: Option<String>,
    pub dataset_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: FbModel,
}

impl Checkpoint {
    pub fn new(model: FbModel, mdp: Option<&MdpSpec>, dataset_id: Option<String>) -> Self {
        let meta = CheckpointMeta {
            version: VERSION,
            d: model.layout.d(),
            blocks: model.layout.k(),
            block_sizes: model.layout.sizes().to_vec(),
            ensemble_m: model.forward.len(),
            n_states: model.encoding.rows(),
            n_actions: model.n_actions,
            enc_dim: model.encoding.cols(),
            hidden: model.hidden,
            gamma: model.gamma,
            config_hash: model.config_hash.clone(),
            config: model.config_text.clone(),
            mdp: mdp.map(MdpSpec::to_line),
            dataset_id,
        };
        Self { meta, model }
    }

    pub fn mdp_spec(&self) -> Result<Option<MdpSpec>> {
        self.meta.mdp.as_deref().map(MdpSpec::parse_line).transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let arrays = named_arrays(&self.model);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, a) in arrays {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.cols() as u64).to_le_bytes());
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(FbError::Format("not a checkpoint: bad magic header".into()));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| FbError::Format(format!("checkpoint metadata: {e}")))?;
        if meta.version != VERSION {
            return Err(FbError::Format(format!("checkpoint version {} unsupported", meta.version)));
        }
        let count = r.len()?;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.len()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FbError::Format("array name is not UTF-8".into()))?
                .to_string();
            let (rows, cols) = (r.len()?, r.len()?);
            let n = rows.checked_mul(cols).ok_or_else(|| FbError::Format(format!("array `{name}` too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| FbError::Format("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((name, Array2::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(FbError::Format(format!("{} trailing bytes after the arrays", bytes.len() - r.pos)));
        }
        let model = rebuild(&meta, arrays)?;
        Ok(Self { meta, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| FbError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| FbError::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex sha256 of the serialized checkpoint.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FbError::Format("checkpoint is truncated".into()));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn len(&mut self) -> Result<usize> {
        let raw: [u8; 8] = self.take(8)?.try_into().expect("8 bytes");
        usize::try_from(u64::from_le_bytes(raw)).map_err(|_| FbError::Format("length overflows".into()))
    }
}

fn groups(model: &FbModel) -> Vec<(String, Vec<&Parameter>)> {
    let mut out = Vec::new();
    for (m, f) in model.forward.members.iter().enumerate() {
        out.push((format!("forward.{m}"), f.params()));
    }
    for (m, f) in model.forward.targets.iter().enumerate() {
        out.push((format!("forward_target.{m}"), f.params()));
    }
    out.push(("backward".into(), model.backward.params()));
    out.push(("backward_target".into(), model.backward_target.params()));
    out.push(("policy".into(), model.policy.params()));
    out
}

fn named_arrays(model: &FbModel) -> Vec<(String, Array2)> {
    let mut out = vec![
        ("encoding".to_string(), model.encoding.clone()),
        ("rho".to_string(), Array2::row_vector(&model.rho)),
    ];
    for (prefix, params) in groups(model) {
        for p in params {
            out.push((format!("{prefix}/{}", p.name), p.value.clone()));
        }
    }
    out
}

fn rebuild(meta: &CheckpointMeta, arrays: Vec<(String, Array2)>) -> Result<FbModel> {
    let cfg = TrainConfig::parse(&meta.config)?;
    if cfg.hash() != meta.config_hash {
        return Err(FbError::Format("embedded config does not match its hash".into()));
    }
    let mut map: std::collections::BTreeMap<String, Array2> = arrays.into_iter().collect();
    let mut take = |name: &str| map.remove(name).ok_or_else(|| FbError::Format(format!("missing array `{name}`")));
    let encoding = take("encoding")?;
    let rho = take("rho")?.into_vec();
    let mut model = FbModel::new(&cfg, encoding, rho, meta.n_actions, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> =
        groups(&model).into_iter().flat_map(|(g, ps)| ps.into_iter().map(move |p| format!("{g}/{}", p.name))).collect();
    let values = names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
    let mut it = values.into_iter();
    let mut fill = |params: Vec<&mut Parameter>| -> Result<()> {
        for p in params {
            let v = it.next().expect("one value per parameter");
            if v.shape() != p.value.shape() {
                return Err(FbError::Format(format!("array `{}` has shape {:?}, expected {:?}", p.name, v.shape(), p.value.shape())));
            }
            p.value = v;
        }
        Ok(())
    };
    for f in model.forward.members.iter_mut() {
        fill(f.params_mut())?;
    }
    for f in model.forward.targets.iter_mut() {
        fill(f.params_mut())?;
    }
    fill(model.backward.params_mut())?;
    fill(model.backward_target.params_mut())?;
    fill(model.policy.params_mut())?;
    drop(fill);
    if let Some(extra) = map.keys().next() {
        return Err(FbError::Format(format!("unexpected array `{extra}`")));
    }
    Ok(model)
}
