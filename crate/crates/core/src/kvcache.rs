//! Per-layer key/value cache for incremental decoding.
//!
//! The cache owns one layer per attention site: indices `0..L` belong
//! to the base model's blocks and index `L` to the draft module's
//! context attention. Layers grow independently — during a verify step
//! the base layers run ahead of the draft layer, and the accept step
//! re-aligns them — so [`KVCache::truncate`] only shortens layers that
//! are longer than the target and leaves shorter ones untouched.
//!
//! Keys are stored post-rotation, so cached rows never need to be
//! revisited: truncating to a prefix is bit-identical to a fresh fill
//! of that prefix.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct LayerCache<S> {
    k: Vec<S>,
    v: Vec<S>,
    len: usize,
}

pub struct KVCache<S: Scalar> {
    layers: Vec<LayerCache<S>>,
    width: usize,
    capacity: usize,
}

impl<S: Scalar> KVCache<S> {
    /// `width` is the flattened row width (heads x head_dim) and
    /// `capacity` the maximum number of positions any layer may hold.
    pub fn new(layers: usize, width: usize, capacity: usize) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(Error::Cache(format!(
                "cache needs at least one layer and a positive row width, got {layers} layers x width {width}"
            )));
        }
        Ok(KVCache {
            layers: (0..layers)
                .map(|_| LayerCache {
                    k: Vec::new(),
                    v: Vec::new(),
                    len: 0,
                })
                .collect(),
            width,
            capacity,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of cached positions, measured at layer 0.
    pub fn len(&self) -> usize {
        self.layers[0].len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    /// Appends `rows` post-rotation key rows and value rows to a layer.
    pub fn append(&mut self, layer: usize, k: &[S], v: &[S], rows: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Cache(format!(
                "layer {layer} out of range (cache has {} layers)",
                self.layers.len()
            )));
        }
        if k.len() != rows * self.width || v.len() != rows * self.width {
            return Err(Error::Cache(format!(
                "append of {rows} rows expects {} values per side, got k={} v={}",
                rows * self.width,
                k.len(),
                v.len()
            )));
        }
        let needed = self.layers[layer].len + rows;
        if needed > self.capacity {
            return Err(Error::CacheOverflow {
                needed,
                capacity: self.capacity,
            });
        }
        let slot = &mut self.layers[layer];
        slot.k.extend_from_slice(k);
        slot.v.extend_from_slice(v);
        slot.len = needed;
        Ok(())
    }

    pub fn keys(&self, layer: usize) -> &[S] {
        &self.layers[layer].k
    }

    pub fn values(&self, layer: usize) -> &[S] {
        &self.layers[layer].v
    }

    /// Shortens every layer longer than `len` down to `len`. Layers
    /// already at or below `len` (the draft layer mid-step) are left
    /// alone. `len` may not exceed the layer-0 length.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.len() {
            return Err(Error::Cache(format!(
                "cannot truncate to {len}: cache holds {} positions",
                self.len()
            )));
        }
        for layer in &mut self.layers {
            if layer.len > len {
                layer.k.truncate(len * self.width);
                layer.v.truncate(len * self.width);
                layer.len = len;
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        for layer in &mut self.layers {
            layer.k.clear();
            layer.v.clear();
            layer.len = 0;
        }
    }
}
