//! Binary checkpoints: an 8-byte little-endian header length, a JSON header,
//! then every tensor as little-endian `f64` values at the offsets the header
//! lists.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GtnpModel;
use crate::numerics::{Method, OptimizerState, ParamStore, Tensor};
use crate::report::Provenance;
use crate::train::{DomainRef, TrainConfig, TrainState};

pub const FORMAT: &str = "gtnp-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header<M> {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// Writes a container holding `meta` and the named tensors.
pub fn write_container<M: Serialize>(
    path: &Path,
    provenance: Option<&Provenance>,
    meta: &M,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.to_string(),
        provenance: provenance.cloned(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + data.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Tensors of a container, in file order.
pub struct Container<M> {
    pub provenance: Option<Provenance>,
    pub meta: M,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn read_container<M: DeserializeOwned>(path: &Path) -> Result<Container<M>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = 8usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> =
        serde_json::from_slice(&bytes[8..body]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format {:?}", header.format)));
    }
    let data = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > data.len() {
            return Err(bad(&format!("tensor {} runs past end of file", e.name)));
        }
        let values = data[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(&e.shape, values)?));
    }
    Ok(Container {
        provenance: header.provenance,
        meta: header.meta,
        tensors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    method: Method,
    learning_rate: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RefMeta {
    indices: Vec<usize>,
    labels: Vec<usize>,
    labels_visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    config: TrainConfig,
    model: GtnpModel,
    epoch: usize,
    step: u64,
    optimizer: OptimizerMeta,
    source_ref: RefMeta,
    target_ref: RefMeta,
}

fn ref_meta(r: &DomainRef) -> RefMeta {
    RefMeta {
        indices: r.indices.clone(),
        labels: r.labels.clone(),
        labels_visible: r.labels_visible,
    }
}

/// Saves parameters, optimizer moments and both dependency graphs.
pub fn save_checkpoint(state: &TrainState, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
    let meta = StateMeta {
        config: state.config.clone(),
        model: state.model.clone(),
        epoch: state.epoch,
        step: state.step,
        optimizer: OptimizerMeta {
            method: state.optimizer.method,
            learning_rate: state.optimizer.learning_rate,
            step: state.optimizer.step,
        },
        source_ref: ref_meta(&state.source_ref),
        target_ref: ref_meta(&state.target_ref),
    };
    let moment = |v: &Vec<f64>| Tensor::vector(v.clone());
    let first: Vec<Tensor> = state.optimizer.first.iter().map(moment).collect();
    let second: Vec<Tensor> = state.optimizer.second.iter().map(moment).collect();
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in state.store.iter() {
        tensors.push((format!("param/{name}"), t));
    }
    for ((name, _), t) in state.store.iter().zip(&first) {
        tensors.push((format!("moment1/{name}"), t));
    }
    for ((name, _), t) in state.store.iter().zip(&second) {
        tensors.push((format!("moment2/{name}"), t));
    }
    tensors.push(("graph/source".into(), &state.source_ref.g));
    tensors.push(("graph/target".into(), &state.target_ref.g));
    write_container(path, provenance, &meta, &tensors)
}

/// Restores a [`TrainState`] written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, Option<Provenance>)> {
    let Container {
        provenance,
        meta,
        mut tensors,
    } = read_container::<StateMeta>(path)?;
    let names: Vec<String> = tensors
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("param/").map(str::to_string))
        .collect();
    let mut store = ParamStore::new();
    let mut first = Vec::with_capacity(names.len());
    let mut second = Vec::with_capacity(names.len());
    for name in &names {
        let value = take(&mut tensors, &format!("param/{name}"))?;
        let m1 = take(&mut tensors, &format!("moment1/{name}"))?.into_data();
        let m2 = take(&mut tensors, &format!("moment2/{name}"))?.into_data();
        if m1.len() != value.len() || m2.len() != value.len() {
            return Err(Error::Data(format!("optimizer moments for {name} have the wrong length")));
        }
        store.add(name.clone(), value);
        first.push(m1);
        second.push(m2);
    }
    let g_source = take(&mut tensors, "graph/source")?;
    let g_target = take(&mut tensors, "graph/target")?;
    for r in [(&meta.source_ref, &g_source), (&meta.target_ref, &g_target)] {
        let n = r.0.indices.len();
        if r.1.shape() != [n, n] || r.0.labels.len() != n {
            return Err(Error::Data("reference set and graph sizes disagree".into()));
        }
    }
    let optimizer = OptimizerState {
        method: meta.optimizer.method,
        learning_rate: meta.optimizer.learning_rate,
        step: meta.optimizer.step,
        first,
        second,
    };
    let mk = |r: RefMeta, g: Tensor| DomainRef {
        indices: r.indices,
        labels: r.labels,
        labels_visible: r.labels_visible,
        g,
    };
    let state = TrainState {
        config: meta.config,
        model: meta.model,
        store,
        optimizer,
        source_ref: mk(meta.source_ref, g_source),
        target_ref: mk(meta.target_ref, g_target),
        epoch: meta.epoch,
        step: meta.step,
    };
    Ok((state, provenance))
}

fn take(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
    Ok(tensors.remove(pos).1)
}

/// Header of a standalone dependency-graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub node_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn save_graph(path: &Path, meta: &GraphMeta, g: &Tensor, provenance: Option<&Provenance>) -> Result<()> {
    write_container(path, provenance, meta, &[("graph".into(), g)])
}

pub fn load_graph(path: &Path) -> Result<(GraphMeta, Tensor)> {
    let mut c: Container<GraphMeta> = read_container(path)?;
    let g = take(&mut c.tensors, "graph")?;
    Ok((c.meta, g))
}
