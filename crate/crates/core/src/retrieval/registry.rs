use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense docids assigned in arrival order, grouped into per-timestep segments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocidRegistry {
    ids: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    segments: Vec<Range<usize>>,
}

impl DocidRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new segment; fails on ids already present.
    pub fn register<S: AsRef<str>>(&mut self, doc_ids: &[S]) -> Result<Range<usize>> {
        let start = self.ids.len();
        for (k, id) in doc_ids.iter().enumerate() {
            let id = id.as_ref();
            if self.index.contains_key(id) {
                self.ids.truncate(start);
                self.index.retain(|_, v| *v < start);
                return Err(Error::Data(format!("document {id} is already indexed")));
            }
            self.index.insert(id.to_string(), start + k);
            self.ids.push(id.to_string());
        }
        let seg = start..self.ids.len();
        self.segments.push(seg.clone());
        Ok(seg)
    }

    pub fn docid(&self, external: &str) -> Result<usize> {
        self.index
            .get(external)
            .copied()
            .ok_or_else(|| Error::Data(format!("document {external} is not indexed")))
    }

    pub fn external(&self, docid: usize) -> Option<&str> {
        self.ids.get(docid).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn segment(&self, t: usize) -> Option<Range<usize>> {
        self.segments.get(t).cloned()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }
}
