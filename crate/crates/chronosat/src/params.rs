//! Named parameter store with training partitions and checkpoint I/O.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a unique name and
//! one of three partitions: the structural control stack, the
//! semantic-temporal stack, or the frozen backbone. The optimizer only ever
//! touches partitions explicitly marked trainable, and the frozen partition
//! can never be marked trainable, which is what makes staged training
//! auditable by byte-diffing checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAMK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Structural,
    SemanticTemporal,
    Frozen,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Structural => 0,
            Partition::SemanticTemporal => 1,
            Partition::Frozen => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Partition> {
        match tag {
            0 => Some(Partition::Structural),
            1 => Some(Partition::SemanticTemporal),
            2 => Some(Partition::Frozen),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub partition: Partition,
    m: Tensor,
    v: Tensor,
    step: u64,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    trainable: BTreeSet<Partition>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, partition: Partition) {
        let shape = value.shape().to_vec();
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry {
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
                step: 0,
                value,
                partition,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks which partitions the optimizer may update. The frozen partition
    /// is rejected outright.
    pub fn set_trainable(&mut self, partitions: &[Partition]) {
        assert!(
            !partitions.contains(&Partition::Frozen),
            "the frozen partition cannot be made trainable"
        );
        self.trainable = partitions.iter().copied().collect();
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries
            .get(name)
            .map(|e| self.trainable.contains(&e.partition))
            .unwrap_or(false)
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) {
        let e = self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(e.value.shape(), grad.shape(), "gradient shape mismatch for {name}");
        for (g, &d) in e.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Re-tags every entry as frozen (used when a pretrained backbone is
    /// persisted for the later stages).
    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.partition = Partition::Frozen;
        }
        self.trainable.clear();
    }

    /// Names in a partition, sorted.
    pub fn partition_names(&self, p: Partition) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.partition == p)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// One decoupled-weight-decay Adam step over the trainable partitions,
    /// consuming the accumulated gradients (which are then zeroed).
    pub fn adamw_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) {
        let trainable = self.trainable.clone();
        for e in self.entries.values_mut() {
            if !trainable.contains(&e.partition) {
                continue;
            }
            e.step += 1;
            let t = e.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (w, g, m, v) = (
                e.value.data_mut(),
                e.grad.data_mut(),
                e.m.data_mut(),
                e.v.data_mut(),
            );
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w[i]);
                g[i] = 0.0;
            }
        }
    }

    /// Clears Adam moments and step counters for every entry. Checkpoints
    /// never carry optimizer state, so running stages back to back in memory
    /// must start each stage from the same blank optimizer a reloaded
    /// checkpoint would.
    pub fn reset_optimizer(&mut self) {
        for e in self.entries.values_mut() {
            e.m.data_mut().fill(0.0);
            e.v.data_mut().fill(0.0);
            e.step = 0;
        }
    }

    // ── Checkpoint codec ─────────────────────────────────────────────────────

    /// Serializes values and partition tags (not optimizer state): magic,
    /// version, then per-parameter records sorted by name. All integers and
    /// floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.partition.tag());
            let shape = e.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in e.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
        fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
            if cur.len() < n {
                return Err(CheckpointError::Format("truncated record".into()));
            }
            let (head, rest) = cur.split_at(n);
            *cur = rest;
            Ok(head)
        }
        let mut cur = bytes;
        let magic = take(&mut cur, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let mut store = ParamStore::new();
        loop {
            if cur.is_empty() {
                break;
            }
            let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut cur, name_len)?)
                .map_err(|_| CheckpointError::Format("name is not utf-8".into()))?
                .to_string();
            let tag = take(&mut cur, 1)?[0];
            let partition = Partition::from_tag(tag)
                .ok_or_else(|| CheckpointError::Format(format!("bad partition tag {tag}")))?;
            let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
            }
            let volume: usize = shape.iter().product();
            let payload = take(&mut cur, volume * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.contains(&name) {
                return Err(CheckpointError::Format(format!("duplicate parameter {name}")));
            }
            store.insert(&name, Tensor::new(shape, data), partition);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ParamStore::from_bytes(&bytes)
    }

    /// Byte serialization of one partition's records only (sorted by name);
    /// lets tests diff a partition across checkpoints without the others.
    pub fn partition_bytes(&self, p: Partition) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, e) in &self.entries {
            if e.partition != p {
                continue;
            }
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for &x in e.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[(&str, Partition)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, p) in names {
            s.insert(n, Tensor::full(vec![2], 1.0), *p);
        }
        s
    }

    #[test]
    fn adamw_first_step_reference_value() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), Partition::Structural);
        s.set_trainable(&[Partition::Structural]);
        s.accumulate_grad("w", &Tensor::scalar(0.1));
        s.adamw_step(0.1, 0.9, 0.999, 1e-8, 0.01);
        let w = s.value("w").item();
        assert!((w - 0.899000).abs() < 1e-6, "got {w}");
    }

    #[test]
    fn frozen_partition_is_bit_stable_under_steps() {
        let mut s = store_with(&[("a", Partition::Frozen), ("b", Partition::Structural)]);
        s.set_trainable(&[Partition::Structural]);
        let before = s.value("a").data().to_vec();
        for _ in 0..25 {
            s.accumulate_grad("a", &Tensor::full(vec![2], 3.0));
            s.accumulate_grad("b", &Tensor::full(vec![2], 3.0));
            s.adamw_step(0.05, 0.9, 0.999, 1e-8, 0.01);
            s.zero_grads();
        }
        let after = s.value("a").data().to_vec();
        assert_eq!(
            before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(s.value("b").data()[0], 1.0);
    }

    #[test]
    #[should_panic]
    fn frozen_cannot_be_marked_trainable() {
        let mut s = store_with(&[("a", Partition::Frozen)]);
        s.set_trainable(&[Partition::Frozen]);
    }

    #[test]
    #[should_panic]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(0.0), Partition::Structural);
        s.insert("w", Tensor::scalar(0.0), Partition::Structural);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("alpha", Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.5, 0.1, -0.0, 7.75]),
            Partition::SemanticTemporal);
        s.insert("beta", Tensor::scalar(0.125), Partition::Frozen);
        s.insert("gamma", Tensor::new(vec![1, 2, 1], vec![9.0, -9.0]), Partition::Structural);
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.value("alpha").shape(), &[2, 3]);
        assert_eq!(back.entry("beta").unwrap().partition, Partition::Frozen);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ParamStore::from_bytes(b"NOPE").is_err());
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), Partition::Frozen);
        let mut bytes = s.to_bytes();
        bytes.push(7); // trailing garbage cannot form a record
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }
}
