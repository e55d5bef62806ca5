//! Fragment planning: which tensors are synchronized together, and on which
//! step of the sync cycle.

use std::cmp::Reverse;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TensorKind, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Layer,
    Tensor,
    Balanced,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Strategy::Layer),
            "tensor" => Ok(Strategy::Tensor),
            "balanced" => Ok(Strategy::Balanced),
            other => Err(Error::InvalidArgument(format!("unknown fragmentation strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Layer => "layer",
            Strategy::Tensor => "tensor",
            Strategy::Balanced => "balanced",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentPlan {
    groups: Vec<Vec<usize>>,
    assignment: Vec<usize>,
    offsets: Vec<usize>,
    cycle: usize,
    sizes: Vec<usize>,
    names: Vec<String>,
    tensor_sizes: Vec<usize>,
    embedding: Vec<bool>,
}

/// Summary of one fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentView {
    pub fragment_id: usize,
    pub tensor_ids: Vec<usize>,
    pub byte_size: usize,
}

impl FragmentPlan {
    /// Builds a plan from explicit per-fragment tensor lists. Offsets default to
    /// `t_p = p` with cycle length `P`.
    pub fn from_groups(tensors: &[TensorSpec], groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InfeasiblePlan("plan needs at least one fragment".into()));
        }
        let mut assignment = vec![usize::MAX; tensors.len()];
        for (p, g) in groups.iter().enumerate() {
            for &t in g {
                if t >= tensors.len() {
                    return Err(Error::InvalidArgument(format!("tensor id {t} out of range")));
                }
                if assignment[t] != usize::MAX {
                    return Err(Error::InvalidArgument(format!("tensor {t} assigned twice")));
                }
                assignment[t] = p;
            }
        }
        if let Some(t) = assignment.iter().position(|&a| a == usize::MAX) {
            return Err(Error::InvalidArgument(format!("tensor {t} is not assigned")));
        }
        let sizes = groups.iter().map(|g| g.iter().map(|&t| tensors[t].size).sum()).collect();
        let p = groups.len();
        Ok(FragmentPlan {
            groups,
            assignment,
            offsets: (0..p).collect(),
            cycle: p,
            sizes,
            names: tensors.iter().map(|t| t.name.clone()).collect(),
            tensor_sizes: tensors.iter().map(|t| t.size).collect(),
            embedding: tensors.iter().map(|t| t.kind == TensorKind::Embedding).collect(),
        })
    }

    pub fn build(strategy: Strategy, tensors: &[TensorSpec], p: usize) -> Result<Self> {
        match strategy {
            Strategy::Layer => {
                let layers = tensors.iter().filter_map(|t| t.layer).max().unwrap_or(0);
                plan_layer(tensors, layers, p)
            }
            Strategy::Tensor => plan_tensor(tensors, p),
            Strategy::Balanced => plan_balanced(tensors, p),
        }
    }

    pub fn num_fragments(&self) -> usize {
        self.groups.len()
    }

    pub fn tensor_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn fragment_of(&self, tensor: usize) -> usize {
        self.assignment[tensor]
    }

    pub fn tensors_of(&self, p: usize) -> Result<&[usize]> {
        self.groups.get(p).map(|g| g.as_slice()).ok_or(Error::FragmentRange(p))
    }

    /// Element count of fragment `p`.
    pub fn fragment_len(&self, p: usize) -> usize {
        self.sizes[p]
    }

    /// Element count of every tensor, in layout order.
    pub fn tensor_sizes(&self) -> &[usize] {
        &self.tensor_sizes
    }

    /// Per-element embedding flags for fragment `p`, in fragment order.
    pub fn embedding_mask(&self, p: usize) -> Result<Vec<bool>> {
        let mut out = Vec::new();
        for &t in self.tensors_of(p)? {
            out.extend(std::iter::repeat(self.embedding[t]).take(self.tensor_sizes[t]));
        }
        Ok(out)
    }

    pub fn loads(&self) -> &[usize] {
        &self.sizes
    }

    pub fn max_load(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn view(&self, p: usize) -> Result<FragmentView> {
        let ids = self.tensors_of(p)?;
        Ok(FragmentView { fragment_id: p, tensor_ids: ids.to_vec(), byte_size: self.sizes[p] * 8 })
    }

    /// Fragment due at syncer step `t`, if any.
    pub fn due(&self, t: u64) -> Option<usize> {
        let phase = (t % self.cycle as u64) as usize;
        self.offsets.iter().position(|&o| o == phase)
    }

    /// One line per fragment: id, offset, tensor names, total element count.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, g) in self.groups.iter().enumerate() {
            let names: Vec<&str> = g.iter().map(|&t| self.names[t].as_str()).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", p, self.offsets[p], names.join(","), self.sizes[p]);
        }
        out
    }
}

fn single_fragment(tensors: &[TensorSpec]) -> Result<FragmentPlan> {
    FragmentPlan::from_groups(tensors, vec![(0..tensors.len()).collect()])
}

/// Fragment 0 holds every non-transformer tensor; transformer layers are
/// strided over the remaining `P-1` fragments.
pub fn plan_layer(tensors: &[TensorSpec], layers: usize, p: usize) -> Result<FragmentPlan> {
    if p == 0 {
        return Err(Error::InfeasiblePlan("P must be at least 1".into()));
    }
    if p == 1 {
        return single_fragment(tensors);
    }
    if p - 1 > layers {
        return Err(Error::InfeasiblePlan(format!("{} layer fragments but only {layers} layers", p - 1)));
    }
    let mut groups = vec![Vec::new(); p];
    for (i, t) in tensors.iter().enumerate() {
        if t.kind != TensorKind::Transformer {
            groups[0].push(i);
            continue;
        }
        let layer = t.layer.ok_or_else(|| {
            Error::InvalidArgument(format!("transformer tensor `{}` has no layer index", t.name))
        })?;
        if layer == 0 || layer > layers {
            return Err(Error::InvalidArgument(format!("tensor `{}` layer {layer} outside 1..={layers}", t.name)));
        }
        groups[1 + (layer - 1) % (p - 1)].push(i);
    }
    FragmentPlan::from_groups(tensors, groups)
}

/// Fragment 0 holds every non-transformer tensor; transformer tensors are
/// strided by index over the remaining `P-1` fragments.
pub fn plan_tensor(tensors: &[TensorSpec], p: usize) -> Result<FragmentPlan> {
    if p == 0 {
        return Err(Error::InfeasiblePlan("P must be at least 1".into()));
    }
    if p == 1 {
        return single_fragment(tensors);
    }
    let transformer: Vec<usize> =
        (0..tensors.len()).filter(|&i| tensors[i].kind == TensorKind::Transformer).collect();
    if transformer.len() < p - 1 {
        return Err(Error::InfeasiblePlan(format!(
            "{} transformer tensors for {} fragments",
            transformer.len(),
            p - 1
        )));
    }
    let mut groups = vec![Vec::new(); p];
    for (i, t) in tensors.iter().enumerate() {
        if t.kind != TensorKind::Transformer {
            groups[0].push(i);
        }
    }
    for (j, &i) in transformer.iter().enumerate() {
        groups[1 + j % (p - 1)].push(i);
    }
    FragmentPlan::from_groups(tensors, groups)
}

/// Greedy number partitioning: largest tensor first into the lightest fragment.
pub fn plan_balanced(tensors: &[TensorSpec], p: usize) -> Result<FragmentPlan> {
    if p == 0 || tensors.len() < p {
        return Err(Error::InfeasiblePlan(format!("{} tensors for {p} fragments", tensors.len())));
    }
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by(|&a, &b| {
        (Reverse(tensors[a].size), &tensors[a].name).cmp(&(Reverse(tensors[b].size), &tensors[b].name))
    });
    let mut groups = vec![Vec::new(); p];
    let mut loads = vec![0usize; p];
    for i in order {
        let target = (0..p).min_by_key(|&f| (loads[f], f)).unwrap();
        groups[target].push(i);
        loads[target] += tensors[i].size;
    }
    FragmentPlan::from_groups(tensors, groups)
}

/// Sets `t_p = p` within a cycle of `H` steps.
pub fn assign_offsets(mut plan: FragmentPlan, h: usize) -> Result<FragmentPlan> {
    let p = plan.num_fragments();
    if p > h {
        return Err(Error::InfeasiblePlan(format!("P={p} exceeds H={h}")));
    }
    plan.offsets = (0..p).collect();
    plan.cycle = h;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transformer_layers(l: usize) -> Vec<TensorSpec> {
        let mut v = vec![TensorSpec::new("embed", 100, TensorKind::Embedding)];
        for i in 1..=l {
            v.push(TensorSpec::new(format!("l{i}"), 10, TensorKind::Transformer).in_layer(i));
        }
        v.push(TensorSpec::new("head", 5, TensorKind::Other));
        v
    }

    fn names(plan: &FragmentPlan, tensors: &[TensorSpec], p: usize) -> Vec<String> {
        plan.tensors_of(p).unwrap().iter().map(|&t| tensors[t].name.clone()).collect()
    }

    #[test]
    fn layer_strides() {
        let t = transformer_layers(6);
        let plan = plan_layer(&t, 6, 4).unwrap();
        assert_eq!(names(&plan, &t, 0), ["embed", "head"]);
        assert_eq!(names(&plan, &t, 1), ["l1", "l4"]);
        assert_eq!(names(&plan, &t, 2), ["l2", "l5"]);
        assert_eq!(names(&plan, &t, 3), ["l3", "l6"]);

        let t2 = transformer_layers(2);
        let plan = plan_layer(&t2, 2, 3).unwrap();
        assert_eq!(names(&plan, &t2, 1), ["l1"]);
        assert_eq!(names(&plan, &t2, 2), ["l2"]);

        let t4 = transformer_layers(4);
        let plan = plan_layer(&t4, 4, 3).unwrap();
        assert_eq!(names(&plan, &t4, 1), ["l1", "l3"]);
        assert_eq!(names(&plan, &t4, 2), ["l2", "l4"]);

        assert!(matches!(plan_layer(&t4, 4, 6), Err(Error::InfeasiblePlan(_))));
    }

    #[test]
    fn tensor_strides() {
        let t = transformer_layers(9);
        let plan = plan_tensor(&t, 4).unwrap();
        assert_eq!(names(&plan, &t, 1), ["l1", "l4", "l7"]);
        assert_eq!(names(&plan, &t, 2), ["l2", "l5", "l8"]);
        assert_eq!(names(&plan, &t, 3), ["l3", "l6", "l9"]);

        let t3 = transformer_layers(3);
        let plan = plan_tensor(&t3, 4).unwrap();
        for p in 1..4 {
            assert_eq!(plan.tensors_of(p).unwrap().len(), 1);
        }

        let t5 = transformer_layers(5);
        let plan = plan_tensor(&t5, 3).unwrap();
        assert_eq!(names(&plan, &t5, 1), ["l1", "l3", "l5"]);
        assert_eq!(names(&plan, &t5, 2), ["l2", "l4"]);

        assert!(matches!(plan_tensor(&t3, 5), Err(Error::InfeasiblePlan(_))));
    }

    fn sized(sizes: &[usize]) -> Vec<TensorSpec> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| TensorSpec::new(format!("t{i:02}"), s, TensorKind::Other))
            .collect()
    }

    #[test]
    fn balanced_examples() {
        let plan = plan_balanced(&sized(&[9, 7, 6, 5, 4, 3]), 3).unwrap();
        let mut loads = plan.loads().to_vec();
        loads.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(loads, [12, 11, 11]);

        let plan = plan_balanced(&sized(&[4, 4, 4]), 3).unwrap();
        assert_eq!(plan.loads(), &[4, 4, 4]);
        assert_eq!(plan.tensors_of(0).unwrap(), &[0]);

        let plan = plan_balanced(&sized(&[10, 1, 1, 1]), 2).unwrap();
        assert_eq!(plan.loads(), &[10, 3]);

        assert!(matches!(plan_balanced(&sized(&[1, 2]), 3), Err(Error::InfeasiblePlan(_))));
    }

    #[test]
    fn offsets() {
        let t = sized(&[1; 24]);
        let plan = assign_offsets(plan_balanced(&t, 24).unwrap(), 24).unwrap();
        assert_eq!(plan.offsets(), (0..24).collect::<Vec<_>>().as_slice());
        for step in 0..48u64 {
            assert_eq!(plan.due(step), Some((step % 24) as usize));
        }

        let plan = assign_offsets(single_fragment(&t).unwrap(), 5).unwrap();
        assert_eq!(plan.offsets(), &[0]);

        let plan = assign_offsets(plan_balanced(&t, 3).unwrap(), 5).unwrap();
        assert_eq!(plan.offsets(), &[0, 1, 2]);
        assert_eq!(plan.due(3), None);
        assert_eq!(plan.due(4), None);
        assert_eq!(plan.due(7), Some(2));

        assert!(assign_offsets(plan_balanced(&t, 6).unwrap(), 5).is_err());
    }

    #[test]
    fn text_record() {
        let t = sized(&[3, 2]);
        let plan = FragmentPlan::from_groups(&t, vec![vec![1], vec![0]]).unwrap();
        assert_eq!(plan.to_text(), "0\t0\tt01\t2\n1\t1\tt00\t3\n");
    }
}
