use crate::error::{contract_err, Result};

/// Keys and values produced by one token, for every layer.
///
/// Layout: `keys[layer * width .. (layer + 1) * width]` holds that layer's
/// keys for all KV heads, heads contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvEntry {
    pub(crate) fn zeroed(num_layers: usize, width: usize) -> Self {
        Self {
            width,
            keys: vec![0.0; num_layers * width],
            values: vec![0.0; num_layers * width],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len() / self.width.max(1)
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer * self.width..(layer + 1) * self.width]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.width..(layer + 1) * self.width]
    }

    pub(crate) fn keys_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.keys[layer * self.width..(layer + 1) * self.width]
    }

    pub(crate) fn values_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.values[layer * self.width..(layer + 1) * self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().chain(&self.values).all(|v| v.is_finite())
    }
}

/// A sequence of [`KvEntry`] stored per layer for cache-friendly attention.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(num_layers: usize, width: usize) -> Self {
        Self {
            width,
            len: 0,
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn push(&mut self, entry: &KvEntry) -> Result<()> {
        if entry.width != self.width || entry.num_layers() != self.num_layers() {
            return Err(contract_err("KV entry shape does not match cache"));
        }
        if !entry.is_finite() {
            return Err(contract_err("KV entry holds non-finite values"));
        }
        for layer in 0..self.num_layers() {
            self.keys[layer].extend_from_slice(entry.keys(layer));
            self.values[layer].extend_from_slice(entry.values(layer));
        }
        self.len += 1;
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for layer in 0..self.num_layers() {
            self.keys[layer].truncate(len * self.width);
            self.values[layer].truncate(len * self.width);
        }
        self.len = len;
    }

    pub fn clear(&mut self) {
        self.truncate(0);
    }

    pub fn entry(&self, pos: usize) -> KvEntry {
        let mut e = KvEntry::zeroed(self.num_layers(), self.width);
        let r = pos * self.width..(pos + 1) * self.width;
        for layer in 0..self.num_layers() {
            e.keys_mut(layer).copy_from_slice(&self.keys[layer][r.clone()]);
            e.values_mut(layer).copy_from_slice(&self.values[layer][r.clone()]);
        }
        e
    }

    pub(crate) fn key(&self, layer: usize, pos: usize, kv_head: usize, head_dim: usize) -> &[f64] {
        let start = pos * self.width + kv_head * head_dim;
        &self.keys[layer][start..start + head_dim]
    }

    pub(crate) fn value(&self, layer: usize, pos: usize, kv_head: usize, head_dim: usize) -> &[f64] {
        let start = pos * self.width + kv_head * head_dim;
        &self.values[layer][start..start + head_dim]
    }
}
