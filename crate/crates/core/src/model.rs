//! Parameter storage and the vector arithmetic shared by learners and syncer.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use std::hash::Hasher;

use crate::error::{check_len, Error, Result};
use crate::fragmentation::FragmentPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Embedding,
    Transformer,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub size: usize,
    pub kind: TensorKind,
    /// 1-based transformer layer index, used by layer fragmentation.
    pub layer: Option<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, size: usize, kind: TensorKind) -> Self {
        TensorSpec { name: name.into(), size, kind, layer: None }
    }

    pub fn in_layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }
}

/// Tensor list plus the offsets of each tensor in the flat value vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    tensors: Vec<TensorSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl ModelLayout {
    pub fn new(tensors: Vec<TensorSpec>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut offsets = Vec::with_capacity(tensors.len());
        let mut total = 0;
        for t in &tensors {
            if t.size == 0 {
                return Err(Error::InvalidArgument(format!("tensor `{}` has size 0", t.name)));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name `{}`", t.name)));
            }
            offsets.push(total);
            total += t.size;
        }
        Ok(ModelLayout { tensors, offsets, total })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn tensor_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i] + self.tensors[i].size
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    layout: Arc<ModelLayout>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(layout: Arc<ModelLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        ParamStore { layout, values }
    }

    pub fn from_values(layout: Arc<ModelLayout>, values: Vec<f64>) -> Result<Self> {
        check_len(layout.len(), values.len())?;
        Ok(ParamStore { layout, values })
    }

    pub fn layout(&self) -> &Arc<ModelLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn tensor(&self, i: usize) -> &[f64] {
        &self.values[self.layout.tensor_range(i)]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.tensor_range(i);
        &mut self.values[r]
    }

    pub fn checksum(&self) -> u64 {
        checksum(&self.values)
    }

    pub fn fragment<'a>(&'a self, plan: &FragmentPlan, p: usize) -> Result<FragmentSlice<'a>> {
        let ranges = fragment_ranges(&self.layout, plan, p)?;
        Ok(FragmentSlice { values: &self.values, ranges })
    }

    pub fn fragment_mut<'a>(
        &'a mut self,
        plan: &FragmentPlan,
        p: usize,
    ) -> Result<FragmentSliceMut<'a>> {
        let ranges = fragment_ranges(&self.layout, plan, p)?;
        Ok(FragmentSliceMut { values: &mut self.values, ranges })
    }
}

fn fragment_ranges(layout: &ModelLayout, plan: &FragmentPlan, p: usize) -> Result<Vec<Range<usize>>> {
    if plan.tensor_count() != layout.tensors().len() {
        return Err(Error::Dimension {
            expected: layout.tensors().len(),
            actual: plan.tensor_count(),
        });
    }
    let ids = plan.tensors_of(p)?;
    Ok(ids.iter().map(|&t| layout.tensor_range(t)).collect())
}

/// Concatenated read view over one fragment's tensors, in plan order.
pub struct FragmentSlice<'a> {
    values: &'a [f64],
    ranges: Vec<Range<usize>>,
}

impl FragmentSlice<'_> {
    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.ranges.iter().flat_map(move |r| self.values[r.clone()].iter())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for r in &self.ranges {
            out.extend_from_slice(&self.values[r.clone()]);
        }
        out
    }
}

/// Concatenated write view; writes land in the owning store.
pub struct FragmentSliceMut<'a> {
    values: &'a mut [f64],
    ranges: Vec<Range<usize>>,
}

impl FragmentSliceMut<'_> {
    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        // Ranges are disjoint but may be listed in any order: split the backing
        // slice in address order, then hand the pieces out in plan order.
        let mut order: Vec<usize> = (0..self.ranges.len()).collect();
        order.sort_by_key(|&i| self.ranges[i].start);
        let mut pieces: Vec<Option<&mut [f64]>> = (0..self.ranges.len()).map(|_| None).collect();
        let mut rest: &mut [f64] = self.values;
        let mut consumed = 0;
        for i in order {
            let r = &self.ranges[i];
            let (_, tail) = std::mem::take(&mut rest).split_at_mut(r.start - consumed);
            let (piece, tail) = tail.split_at_mut(r.len());
            pieces[i] = Some(piece);
            rest = tail;
            consumed = r.end;
        }
        pieces.into_iter().flatten().flat_map(|c| c.iter_mut())
    }

    pub fn copy_from(&mut self, src: &[f64]) -> Result<()> {
        check_len(self.len(), src.len())?;
        let mut at = 0;
        for r in &self.ranges {
            let n = r.len();
            self.values[r.clone()].copy_from_slice(&src[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Returns `a*x + y`.
pub fn axpy(a: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_len(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect())
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// FNV-1a over the IEEE bit patterns, so equal checksums mean bitwise-equal vectors
/// (up to hash collisions).
pub fn checksum(values: &[f64]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(values.len() as u64);
    for v in values {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

pub fn encode_fragment_payload(fragment_id: u32, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * values.len());
    out.extend_from_slice(&fragment_id.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fragment_payload(bytes: &[u8]) -> Result<(u32, Vec<f64>)> {
    if bytes.len() < 12 {
        return Err(Error::Codec("fragment payload shorter than header".into()));
    }
    let id = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != n * 8 {
        return Err(Error::Codec(format!(
            "fragment payload declares {n} values but carries {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((id, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragmentation::FragmentPlan;

    fn layout(sizes: &[usize]) -> Arc<ModelLayout> {
        let specs = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| TensorSpec::new(format!("t{i}"), s, TensorKind::Other))
            .collect();
        Arc::new(ModelLayout::new(specs).unwrap())
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.0, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(axpy(1.0, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(axpy(2.0, &[1.0, -1.0], &[1.0, 1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(matches!(axpy(1.0, &[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[1.0, 1.0, 1.0, 1.0]), 2.0);
    }

    #[test]
    fn fragment_slice_examples() {
        let l = layout(&[3, 2]);
        let mut store = ParamStore::from_values(l.clone(), vec![1., 2., 3., 4., 5.]).unwrap();
        let plan = FragmentPlan::from_groups(l.tensors(), vec![vec![0], vec![1]]).unwrap();
        assert_eq!(store.fragment(&plan, 1).unwrap().len(), 2);
        assert!(matches!(store.fragment(&plan, 2), Err(Error::FragmentRange(2))));

        let single = FragmentPlan::from_groups(l.tensors(), vec![vec![0, 1]]).unwrap();
        assert_eq!(store.fragment(&single, 0).unwrap().to_vec(), store.values().to_vec());

        let swapped = FragmentPlan::from_groups(l.tensors(), vec![vec![1, 0]]).unwrap();
        assert_eq!(store.fragment(&swapped, 0).unwrap().to_vec(), vec![4., 5., 1., 2., 3.]);

        store.fragment_mut(&swapped, 0).unwrap().copy_from(&[9., 8., 7., 6., 5.]).unwrap();
        assert_eq!(store.values(), &[7., 6., 5., 9., 8.]);
        for v in store.fragment_mut(&swapped, 0).unwrap().iter_mut() {
            *v += 1.0;
        }
        assert_eq!(store.values(), &[8., 7., 6., 10., 9.]);
    }

    #[test]
    fn layout_rejects_bad_specs() {
        assert!(ModelLayout::new(vec![TensorSpec::new("a", 0, TensorKind::Other)]).is_err());
        assert!(ModelLayout::new(vec![
            TensorSpec::new("a", 1, TensorKind::Other),
            TensorSpec::new("a", 2, TensorKind::Other),
        ])
        .is_err());
    }

    #[test]
    fn payload_roundtrip() {
        let v = vec![1.5, -0.0, f64::MIN_POSITIVE, 3.25e100];
        let bytes = encode_fragment_payload(7, &v);
        assert_eq!(bytes.len(), 12 + 32);
        let (id, back) = decode_fragment_payload(&bytes).unwrap();
        assert_eq!(id, 7);
        assert_eq!(checksum(&back), checksum(&v));
        assert!(decode_fragment_payload(&bytes[..20]).is_err());
    }
}
