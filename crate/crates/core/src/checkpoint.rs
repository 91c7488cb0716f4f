//! Single-file checkpoint container.
//!
//! A UTF-8 manifest is followed by a raw little-endian payload:
//!
//! ```text
//! disp-checkpoint 1
//! kind dense
//! meta d 32
//! tensor tok_emb f64 257,32 0 65792
//! index blocks.0.s1 32 65792 132
//! end
//! <payload bytes>
//! ```
//!
//! Offsets are relative to the first payload byte. Index sets are stored as
//! a little-endian `u32` length followed by that many ascending `u32` indices.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DispError, Result};
use crate::hypernet::{GateParam, HyperNet, HyperNetDims};
use crate::model::{BlockGates, DenseModel, GateSlot, MlpKind, ModelSpec};
use crate::prune::{PrunedBlock, PrunedModel};
use crate::selection::{GateVector, IndexSet};
use crate::tensor::{Dtype, NormKind, Real, Tensor};

const MAGIC: &str = "disp-checkpoint 1";

/// A stored tensor in its on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            Dtype::F32 => StoredTensor::F32(t.cast()),
            Dtype::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            StoredTensor::F32(_) => Dtype::F32,
            StoredTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|&x| x.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|&x| x.write_le(out)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, StoredTensor)>,
    pub index_sets: Vec<(String, IndexSet)>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(DispError::Format(format!("{what} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            ..Checkpoint::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DispError::Format(format!("checkpoint is missing `{key}`")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| DispError::Format(format!("checkpoint field `{key}` has bad value `{raw}`")))
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.to_tensor())
            .ok_or_else(|| DispError::Format(format!("checkpoint is missing tensor `{name}`")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn index_set(&self, name: &str) -> Result<&IndexSet> {
        self.index_sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| DispError::Format(format!("checkpoint is missing index set `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(DispError::Format(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_token("kind", &self.kind)?;
        let mut header = format!("{MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(DispError::Format(format!("meta value for `{k}` contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let offset = payload.len();
            t.write(&mut payload);
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!(
                "tensor {name} {} {dims} {offset} {}\n",
                t.dtype().as_str(),
                payload.len() - offset
            ));
        }
        for (name, set) in &self.index_sets {
            check_token("index set name", name)?;
            let offset = payload.len();
            payload.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for &j in set.as_slice() {
                payload.extend_from_slice(&(j as u32).to_le_bytes());
            }
            header.push_str(&format!("index {name} {} {offset} {}\n", set.dim(), payload.len() - offset));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| DispError::Format(msg);
        let end = find_header_end(bytes).ok_or_else(|| bad("checkpoint manifest has no `end` line".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &bytes[end..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a disp checkpoint (bad magic line)".into()));
        }
        let mut ck = Checkpoint::default();
        let slice = |offset: &str, nbytes: &str| -> Result<&[u8]> {
            let o: usize = offset.parse().map_err(|_| bad(format!("bad offset `{offset}`")))?;
            let n: usize = nbytes.parse().map_err(|_| bad(format!("bad length `{nbytes}`")))?;
            payload
                .get(o..o.checked_add(n).ok_or_else(|| bad("offset overflow".into()))?)
                .ok_or_else(|| bad(format!("entry at {o}+{n} exceeds payload of {} bytes", payload.len())))
        };
        for line in lines {
            let f: Vec<&str> = line.splitn(3, ' ').collect();
            match f[0] {
                "end" => break,
                "kind" if f.len() == 2 => ck.kind = f[1].to_string(),
                "meta" if f.len() == 3 => {
                    ck.meta.insert(f[1].to_string(), f[2].to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = line.split(' ').collect();
                    if f.len() != 6 {
                        return Err(bad(format!("malformed tensor line `{line}`")));
                    }
                    let dtype = Dtype::parse(f[2]).map_err(|_| bad(format!("unknown dtype `{}`", f[2])))?;
                    let shape: Vec<usize> = if f[3] == "-" {
                        Vec::new()
                    } else {
                        f[3].split(',')
                            .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{}`", f[3]))))
                            .collect::<Result<_>>()?
                    };
                    let raw = slice(f[4], f[5])?;
                    let n: usize = shape.iter().product();
                    if raw.len() != n * dtype.size() {
                        return Err(bad(format!("tensor `{}` has {} bytes for shape {shape:?}", f[1], raw.len())));
                    }
                    let t = match dtype {
                        Dtype::F32 => StoredTensor::F32(Tensor::new(
                            shape,
                            raw.chunks(4).map(f32::read_le).collect(),
                        )?),
                        Dtype::F64 => StoredTensor::F64(Tensor::new(
                            shape,
                            raw.chunks(8).map(f64::read_le).collect(),
                        )?),
                    };
                    ck.tensors.push((f[1].to_string(), t));
                }
                "index" => {
                    let f: Vec<&str> = line.split(' ').collect();
                    if f.len() != 5 {
                        return Err(bad(format!("malformed index line `{line}`")));
                    }
                    let dim: usize = f[2].parse().map_err(|_| bad(format!("bad width `{}`", f[2])))?;
                    let raw = slice(f[3], f[4])?;
                    let words: Vec<usize> = raw
                        .chunks(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap_or([0; 4])) as usize)
                        .collect();
                    if raw.len() % 4 != 0 || words.is_empty() || words[0] != words.len() - 1 {
                        return Err(bad(format!("index set `{}` has an inconsistent length prefix", f[1])));
                    }
                    let set = IndexSet::new(dim, words[1..].to_vec())
                        .map_err(|e| bad(format!("index set `{}`: {e}", f[1])))?;
                    ck.index_sets.push((f[1].to_string(), set));
                }
                _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
            }
        }
        if ck.kind.is_empty() {
            return Err(bad("checkpoint has no kind".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    const END: &[u8] = b"\nend\n";
    bytes.windows(END.len()).position(|w| w == END).map(|p| p + END.len())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn write_spec(ck: &mut Checkpoint, spec: &ModelSpec) {
    ck.set("d", spec.d);
    ck.set("n_layers", spec.n_layers);
    ck.set("n_heads", spec.n_heads);
    ck.set("d_mid", spec.d_mid);
    ck.set("mlp_kind", spec.mlp_kind.as_str());
    ck.set("norm_kind", spec.norm_kind.as_str());
    ck.set("vocab_size", spec.vocab_size);
    ck.set("max_seq_len", spec.max_seq_len);
    ck.set("tie_embeddings", spec.tie_embeddings);
}

pub fn read_spec(ck: &Checkpoint) -> Result<ModelSpec> {
    let spec = ModelSpec {
        d: ck.parse("d")?,
        n_layers: ck.parse("n_layers")?,
        n_heads: ck.parse("n_heads")?,
        d_mid: ck.parse("d_mid")?,
        mlp_kind: MlpKind::parse(ck.get("mlp_kind")?)?,
        norm_kind: NormKind::parse(ck.get("norm_kind")?)?,
        vocab_size: ck.parse("vocab_size")?,
        max_seq_len: ck.parse("max_seq_len")?,
        tie_embeddings: ck.parse("tie_embeddings")?,
    };
    spec.validate()?;
    Ok(spec)
}

fn load_into<T: Real>(ck: &Checkpoint, slots: Vec<(String, &mut Tensor<T>)>) -> Result<()> {
    for (name, slot) in slots {
        let t: Tensor<T> = ck.tensor(&name)?;
        if t.shape() != slot.shape() {
            return Err(DispError::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

pub fn dense_to_checkpoint<T: Real>(model: &DenseModel<T>) -> Checkpoint {
    let mut ck = Checkpoint::new("dense");
    write_spec(&mut ck, &model.spec);
    for (name, t) in model.named_tensors() {
        ck.push_tensor(name, t);
    }
    ck
}

pub fn dense_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<DenseModel<T>> {
    ck.expect_kind("dense")?;
    let spec = read_spec(ck)?;
    let mut model = DenseModel::<T>::init(&spec, 0)?;
    load_into(ck, model.named_tensors_mut())?;
    Ok(model)
}

/// Hash of the canonical serialization of a model's weights.
pub fn model_hash<T: Real>(model: &DenseModel<T>) -> Result<String> {
    dense_to_checkpoint(model).sha256()
}

fn gate_name(l: usize, slot: GateSlot) -> String {
    format!("blocks.{l}.{}", slot.name())
}

fn write_gates(ck: &mut Checkpoint, gates: &[BlockGates]) {
    for (l, b) in gates.iter().enumerate() {
        for slot in GateSlot::ALL {
            ck.index_sets.push((gate_name(l, slot), b.get(slot).to_index_set()));
        }
    }
}

fn read_gates(ck: &Checkpoint, n_layers: usize) -> Result<Vec<BlockGates>> {
    (0..n_layers)
        .map(|l| {
            let mut gates = [(); 5].map(|_| GateVector::ones(0));
            for slot in GateSlot::ALL {
                gates[slot as usize] = GateVector::from_index_set(ck.index_set(&gate_name(l, slot))?);
            }
            Ok(BlockGates { gates })
        })
        .collect()
}

pub fn gates_to_checkpoint(spec: &ModelSpec, gates: &[BlockGates]) -> Checkpoint {
    let mut ck = Checkpoint::new("gates");
    write_spec(&mut ck, spec);
    write_gates(&mut ck, gates);
    ck
}

pub fn gates_from_checkpoint(ck: &Checkpoint) -> Result<(ModelSpec, Vec<BlockGates>)> {
    if ck.kind != "gates" && ck.kind != "pruned" {
        return Err(DispError::Format(format!("checkpoint kind `{}` carries no gates", ck.kind)));
    }
    let spec = read_spec(ck)?;
    let gates = read_gates(ck, spec.n_layers)?;
    crate::model::validate_gates(&spec, &gates)?;
    Ok((spec, gates))
}

pub fn pruned_to_checkpoint<T: Real>(model: &PrunedModel<T>) -> Checkpoint {
    let mut ck = Checkpoint::new("pruned");
    write_spec(&mut ck, &model.spec);
    ck.push_tensor("tok_emb", &model.tok_emb);
    ck.push_tensor("pos_emb", &model.pos_emb);
    for (l, b) in model.blocks.iter().enumerate() {
        for (name, t) in b.named_tensors() {
            ck.push_tensor(format!("blocks.{l}.{name}"), t);
        }
    }
    ck.push_tensor("final_norm.gain", &model.final_gain);
    if let Some(b) = &model.final_bias {
        ck.push_tensor("final_norm.bias", b);
    }
    if let Some(h) = &model.head {
        ck.push_tensor("head", h);
    }
    write_gates(&mut ck, &model.gates());
    ck
}

pub fn pruned_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<PrunedModel<T>> {
    ck.expect_kind("pruned")?;
    let spec = read_spec(ck)?;
    let gates = read_gates(ck, spec.n_layers)?;
    let opt = |name: String| -> Result<Option<Tensor<T>>> {
        if ck.has_tensor(&name) {
            ck.tensor(&name).map(Some)
        } else {
            Ok(None)
        }
    };
    let blocks = gates
        .iter()
        .enumerate()
        .map(|(l, gs)| {
            let t = |n: &str| ck.tensor::<T>(&format!("blocks.{l}.{n}"));
            let block = PrunedBlock {
                ind: GateSlot::ALL.map(|s| gs.get(s).to_index_set()),
                norm1_gain: t("norm1.gain")?,
                norm1_bias: opt(format!("blocks.{l}.norm1.bias"))?,
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                norm2_gain: t("norm2.gain")?,
                norm2_bias: opt(format!("blocks.{l}.norm2.bias"))?,
                w1: t("w1")?,
                w2: opt(format!("blocks.{l}.w2"))?,
                w3: t("w3")?,
            };
            check_pruned_shapes(&spec, l, &block)?;
            Ok(block)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrunedModel {
        tok_emb: ck.tensor("tok_emb")?,
        pos_emb: ck.tensor("pos_emb")?,
        blocks,
        final_gain: ck.tensor("final_norm.gain")?,
        final_bias: opt("final_norm.bias".into())?,
        head: opt("head".into())?,
        spec,
    })
}

fn check_pruned_shapes<T: Real>(spec: &ModelSpec, l: usize, b: &PrunedBlock<T>) -> Result<()> {
    let n = |s: GateSlot| b.index(s).len();
    let (d, i1, i2, i3, i4, i5) = (
        spec.d,
        n(GateSlot::AttnIn),
        n(GateSlot::AttnOut),
        n(GateSlot::MlpIn),
        n(GateSlot::MlpMid),
        n(GateSlot::MlpOut),
    );
    let mut want: Vec<(&str, Vec<usize>, &[usize])> = vec![
        ("norm1.gain", vec![i1], b.norm1_gain.shape()),
        ("wq", vec![i1, d], b.wq.shape()),
        ("wk", vec![i1, d], b.wk.shape()),
        ("wv", vec![i1, d], b.wv.shape()),
        ("wo", vec![d, i2], b.wo.shape()),
        ("norm2.gain", vec![i3], b.norm2_gain.shape()),
        ("w1", vec![i3, i4], b.w1.shape()),
        ("w3", vec![i4, i5], b.w3.shape()),
    ];
    if let Some(w2) = &b.w2 {
        want.push(("w2", vec![i3, i4], w2.shape()));
    }
    for (name, expect, got) in want {
        if expect != got {
            return Err(DispError::Format(format!(
                "block {l} tensor `{name}` has shape {got:?}, index sets imply {expect:?}"
            )));
        }
    }
    if (spec.mlp_kind == MlpKind::Gated) != b.w2.is_some() {
        return Err(DispError::Format(format!("block {l}: W2 presence does not match the MLP kind")));
    }
    Ok(())
}

pub fn hypernet_to_checkpoint<T: Real>(net: &HyperNet<T>, spec: &ModelSpec) -> Checkpoint {
    let mut ck = Checkpoint::new("hypernet");
    write_spec(&mut ck, spec);
    ck.set("gate_param", net.mode.as_str());
    ck.set("hyper_input", net.dims.input);
    ck.set("hyper_hidden", net.dims.hidden);
    if let Some(z) = &net.fixed_input {
        ck.push_tensor("fixed_input", z);
    }
    for (name, t) in net.named_tensors() {
        ck.push_tensor(name, t);
    }
    ck
}

pub fn hypernet_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(ModelSpec, HyperNet<T>)> {
    ck.expect_kind("hypernet")?;
    let spec = read_spec(ck)?;
    let mode = GateParam::parse(ck.get("gate_param")?)?;
    let dims = HyperNetDims {
        input: ck.parse("hyper_input")?,
        hidden: ck.parse("hyper_hidden")?,
    };
    let mut net = HyperNet::<T>::with_dims(&spec, mode, dims, 0)?;
    if let Some(z) = net.fixed_input.as_mut() {
        load_into(ck, vec![("fixed_input".to_string(), z)])?;
    }
    load_into(ck, net.named_tensors_mut())?;
    Ok((spec, net))
}
