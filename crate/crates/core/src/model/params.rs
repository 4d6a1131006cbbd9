use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors. Iteration is in sorted path order, which fixes
/// the order of optimizer updates and checkpoint sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.map.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamStore {
            map: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Keyed by path with the final component removed (`blocks.3.attn`).
    pub by_group: BTreeMap<String, usize>,
    /// Q/K/V/O projection parameters summed over all blocks.
    pub attention_projections: usize,
    /// Q/K/V/O projection parameters of each block.
    pub attention_per_layer: Vec<usize>,
}

pub fn param_count<T: Scalar>(params: &ParamStore<T>) -> ParamCount {
    let mut by_group = BTreeMap::new();
    let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0;
    for (path, t) in params.iter() {
        let n = t.len();
        total += n;
        let group = path.rsplit_once('.').map_or(path.as_str(), |(g, _)| g);
        *by_group.entry(group.to_string()).or_insert(0) += n;
        if let Some(rest) = path.strip_prefix("blocks.") {
            if let Some((idx, tail)) = rest.split_once('.') {
                if tail.starts_with("attn.w_") {
                    if let Ok(i) = idx.parse::<usize>() {
                        *per_layer.entry(i).or_insert(0) += n;
                    }
                }
            }
        }
    }
    let attention_per_layer: Vec<usize> = per_layer.into_values().collect();
    ParamCount {
        total,
        by_group,
        attention_projections: attention_per_layer.iter().sum(),
        attention_per_layer,
    }
}
