//! Contribution weights, outer gradients, merge rules and int4 compression.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Avg,
    Rda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    F64,
    Int4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    TokenQuality,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub embedding_method: MergeMethod,
    pub compression: Compression,
    pub weight_mode: WeightMode,
    pub eps_dir: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: MergeMethod::Rda,
            embedding_method: MergeMethod::Avg,
            compression: Compression::F64,
            weight_mode: WeightMode::TokenQuality,
            eps_dir: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerContribution {
    pub learner_id: u16,
    pub fragment_id: usize,
    pub theta_frag: Vec<f64>,
    pub c_steps: u64,
    pub c_tokens: u64,
}

/// `c_tokens * (c_tokens / c_steps)`: more tokens amortized over fewer steps
/// weighs more.
pub fn weight(c_tokens: u64, c_steps: u64) -> Result<f64> {
    if c_steps == 0 {
        return Err(Error::UndefinedWeight("c_steps is zero".into()));
    }
    let tokens = c_tokens as f64;
    Ok(tokens * (tokens / c_steps as f64))
}

pub fn contribution_weight(mode: WeightMode, c_tokens: u64, c_steps: u64) -> Result<f64> {
    match mode {
        WeightMode::TokenQuality => weight(c_tokens, c_steps),
        WeightMode::Uniform if c_steps == 0 => Err(Error::UndefinedWeight("c_steps is zero".into())),
        WeightMode::Uniform => Ok(1.0),
    }
}

pub fn outer_gradient(prev_global: &[f64], learner_frag: &[f64]) -> Result<Vec<f64>> {
    check_len(prev_global.len(), learner_frag.len())?;
    Ok(prev_global.iter().zip(learner_frag).map(|(g, l)| g - l).collect())
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::NoQuorum);
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedWeight("all weights are zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Σ ŵ_i v_i over positive weights, seeded with the first term so a single
/// contribution passes through unchanged.
fn weighted_sum(vectors: &[&[f64]], w: &[f64]) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for (v, &wi) in vectors.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(v.iter().map(|x| wi * x).collect()),
            Some(a) => a.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += wi * x),
        }
    }
    acc.unwrap_or_else(|| vec![0.0; vectors.first().map_or(0, |v| v.len())])
}

fn check_shapes(vectors: &[&[f64]], weights: &[f64]) -> Result<usize> {
    check_len(vectors.len(), weights.len())?;
    let n = vectors.first().ok_or(Error::NoQuorum)?.len();
    for v in vectors {
        check_len(n, v.len())?;
    }
    Ok(n)
}

/// Weighted mean of outer gradients.
pub fn avg_deltas(deltas: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    check_shapes(deltas, weights)?;
    Ok(weighted_sum(deltas, &normalized(weights)?))
}

/// Norm and direction averaged separately. Zero outer gradients count as 0 in
/// the norm mean and are left out of the direction mean.
pub fn rda_deltas(deltas: &[&[f64]], weights: &[f64], eps_dir: f64) -> Result<Vec<f64>> {
    let n = check_shapes(deltas, weights)?;
    let w = normalized(weights)?;
    let norms: Vec<f64> = deltas.iter().map(|d| l2_norm(d)).collect();
    let norm_mean: f64 = norms.iter().zip(&w).map(|(r, wi)| r * wi).sum();
    if norm_mean == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut dir = vec![0.0; n];
    for ((d, &r), &wi) in deltas.iter().zip(&norms).zip(&w) {
        if r == 0.0 || wi == 0.0 {
            continue;
        }
        let s = wi / r;
        dir.iter_mut().zip(d.iter()).for_each(|(a, x)| *a += s * x);
    }
    let dn = l2_norm(&dir);
    if dn < eps_dir {
        return Err(Error::DegenerateDirection);
    }
    let s = norm_mean / dn;
    Ok(dir.into_iter().map(|x| x * s).collect())
}

fn contribution_deltas(contribs: &[LearnerContribution], prev: &[f64]) -> Result<Vec<Vec<f64>>> {
    if contribs.is_empty() {
        return Err(Error::NoQuorum);
    }
    contribs.iter().map(|c| outer_gradient(prev, &c.theta_frag)).collect()
}

pub fn merge_avg(contribs: &[LearnerContribution], weights: &[f64], prev_global: &[f64]) -> Result<Vec<f64>> {
    let deltas = contribution_deltas(contribs, prev_global)?;
    let refs: Vec<&[f64]> = deltas.iter().map(|d| d.as_slice()).collect();
    avg_deltas(&refs, weights)
}

pub fn merge_rda(contribs: &[LearnerContribution], weights: &[f64], prev_global: &[f64]) -> Result<Vec<f64>> {
    let deltas = contribution_deltas(contribs, prev_global)?;
    let refs: Vec<&[f64]> = deltas.iter().map(|d| d.as_slice()).collect();
    rda_deltas(&refs, weights, MergeConfig::default().eps_dir)
}

/// Output of a fragment merge. `anchor` is the weighted mean of the learner
/// fragments, present when the whole fragment was merged by plain averaging
/// without compression, or when a single learner contributed; the outer step
/// can use it to avoid cancellation.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedFragment {
    pub delta: Vec<f64>,
    pub anchor: Option<Vec<f64>>,
}

/// Merges one fragment. Elements flagged in `is_embedding` use
/// `cfg.embedding_method`, the rest use `cfg.method`; each part is merged as
/// its own vector.
pub fn merge_fragment(
    cfg: &MergeConfig,
    thetas: &[&[f64]],
    weights: &[f64],
    prev: &[f64],
    is_embedding: &[bool],
) -> Result<MergedFragment> {
    let n = check_shapes(thetas, weights)?;
    check_len(n, prev.len())?;
    check_len(n, is_embedding.len())?;
    let w = normalized(weights)?;

    // A lone contribution is reproduced exactly by either rule.
    let mut live = (0..w.len()).filter(|&i| w[i] > 0.0);
    if let (Some(i), None, Compression::F64) = (live.next(), live.next(), cfg.compression) {
        let delta = prev.iter().zip(thetas[i]).map(|(p, t)| p - t).collect();
        return Ok(MergedFragment { delta, anchor: Some(thetas[i].to_vec()) });
    }

    let emb: Vec<usize> = (0..n).filter(|&i| is_embedding[i]).collect();
    let rest: Vec<usize> = (0..n).filter(|&i| !is_embedding[i]).collect();
    let all_avg = cfg.compression == Compression::F64
        && (emb.is_empty() || cfg.embedding_method == MergeMethod::Avg)
        && (rest.is_empty() || cfg.method == MergeMethod::Avg);

    let mut delta = vec![0.0; n];
    for (idx, method) in [(&emb, cfg.embedding_method), (&rest, cfg.method)] {
        if idx.is_empty() {
            continue;
        }
        let mut deltas: Vec<Vec<f64>> = thetas
            .iter()
            .map(|th| idx.iter().map(|&i| prev[i] - th[i]).collect())
            .collect();
        if cfg.compression == Compression::Int4 {
            for d in deltas.iter_mut() {
                *d = quantize_int4(d).dequantize();
            }
        }
        let refs: Vec<&[f64]> = deltas.iter().map(|d| d.as_slice()).collect();
        let part = match method {
            MergeMethod::Avg => weighted_sum(&refs, &w),
            MergeMethod::Rda => match rda_deltas(&refs, &w, cfg.eps_dir) {
                Ok(v) => v,
                Err(Error::DegenerateDirection) => weighted_sum(&refs, &w),
                Err(e) => return Err(e),
            },
        };
        for (k, &i) in idx.iter().enumerate() {
            delta[i] = part[k];
        }
    }
    let anchor = all_avg.then(|| weighted_sum(thetas, &w));
    Ok(MergedFragment { delta, anchor })
}

/// Symmetric int4 codes in [-7, 7] with one scale per fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct Int4 {
    pub codes: Vec<i8>,
    pub scale: f64,
}

impl Int4 {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64 * self.scale).collect()
    }

    /// Two codes per byte, low nibble first.
    pub fn pack(&self) -> Vec<u8> {
        self.codes
            .chunks(2)
            .map(|c| {
                let lo = (c[0] as u8) & 0x0f;
                let hi = c.get(1).map_or(0, |&v| (v as u8) & 0x0f);
                lo | (hi << 4)
            })
            .collect()
    }

    pub fn unpack(bytes: &[u8], len: usize, scale: f64) -> Self {
        let nib = |b: u8| -> i8 { ((b << 4) as i8) >> 4 };
        let codes = (0..len)
            .map(|i| {
                let b = bytes[i / 2];
                if i % 2 == 0 { nib(b & 0x0f) } else { nib(b >> 4) }
            })
            .collect();
        Int4 { codes, scale }
    }
}

pub fn quantize_int4(x: &[f64]) -> Int4 {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Int4 { codes: vec![0; x.len()], scale: 0.0 };
    }
    let scale = max / 7.0;
    let codes = x.iter().map(|v| (v / scale).round().clamp(-7.0, 7.0) as i8).collect();
    Int4 { codes, scale }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(theta: &[f64]) -> LearnerContribution {
        LearnerContribution { learner_id: 0, fragment_id: 0, theta_frag: theta.to_vec(), c_steps: 1, c_tokens: 1 }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weight(4096, 4).unwrap(), 4_194_304.0);
        assert_eq!(weight(0, 3).unwrap(), 0.0);
        assert_eq!(weight(100, 1).unwrap() / weight(100, 2).unwrap(), 2.0);
        assert!(matches!(weight(5, 0), Err(Error::UndefinedWeight(_))));
    }

    #[test]
    fn outer_gradient_examples() {
        assert_eq!(outer_gradient(&[1.0, 2.0], &[0.5, 1.5]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(outer_gradient(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(outer_gradient(&[0.0, 0.0], &[-1.0, 1.0]).unwrap(), vec![1.0, -1.0]);
        assert!(outer_gradient(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn avg_examples() {
        let prev = [1.0, 1.0];
        let out = merge_avg(&[c(&[0.0, 0.0]), c(&[1.0, 1.0])], &[1.0, 1.0], &prev).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);

        let single = merge_avg(&[c(&[0.25, -3.0])], &[7.0], &prev).unwrap();
        assert_eq!(single, outer_gradient(&prev, &[0.25, -3.0]).unwrap());

        let zero = [0.0, 0.0];
        let out = merge_avg(&[c(&[-1.0, 0.0]), c(&[0.0, -1.0])], &[3.0, 1.0], &zero).unwrap();
        assert_eq!(out, vec![0.75, 0.25]);

        assert!(matches!(merge_avg(&[], &[], &prev), Err(Error::NoQuorum)));
        assert!(matches!(merge_avg(&[c(&[0.0, 0.0])], &[0.0], &prev), Err(Error::UndefinedWeight(_))));
    }

    #[test]
    fn rda_examples() {
        let zero = [0.0, 0.0];
        let out = merge_rda(&[c(&[-2.0, 0.0]), c(&[0.0, -2.0])], &[1.0, 1.0], &zero).unwrap();
        let s2 = 2f64.sqrt();
        assert!((out[0] - s2).abs() < 1e-15 && (out[1] - s2).abs() < 1e-15);
        assert!((l2_norm(&out) - 2.0).abs() < 1e-15);

        let single = merge_rda(&[c(&[-3.0, 4.0])], &[2.0], &zero).unwrap();
        assert!((single[0] - 3.0).abs() < 1e-15 && (single[1] + 4.0).abs() < 1e-15);

        let antipodal = rda_deltas(&[&[1.0, 0.0], &[-1.0, 0.0]], &[1.0, 1.0], 1e-12);
        assert!(matches!(antipodal, Err(Error::DegenerateDirection)));
    }

    #[test]
    fn rda_ignores_zero_direction() {
        // One idle learner: the norm mean halves, the direction is the other learner's.
        let out = rda_deltas(&[&[0.0, 0.0], &[0.0, 4.0]], &[1.0, 1.0], 1e-12).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn merge_fragment_falls_back_on_antipodal() {
        let cfg = MergeConfig::default();
        let prev = [0.0, 0.0];
        let th: [&[f64]; 2] = [&[-1.0, 0.0], &[1.0, 0.0]];
        let out = merge_fragment(&cfg, &th, &[1.0, 1.0], &prev, &[false, false]).unwrap();
        assert_eq!(out.delta, vec![0.0, 0.0]);
        assert!(out.anchor.is_none());
    }

    #[test]
    fn merge_fragment_splits_embedding() {
        let cfg = MergeConfig::default();
        let prev = [0.0, 0.0, 0.0];
        // Embedding element averaged; the other two merged with RDA.
        let th: [&[f64]; 2] = [&[-1.0, -2.0, 0.0], &[-3.0, 0.0, -2.0]];
        let out = merge_fragment(&cfg, &th, &[1.0, 1.0], &prev, &[true, false, false]).unwrap();
        assert_eq!(out.delta[0], 2.0);
        assert!((out.delta[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!((out.delta[2] - 2f64.sqrt()).abs() < 1e-15);

        let avg = MergeConfig { method: MergeMethod::Avg, ..cfg };
        let out = merge_fragment(&avg, &th, &[1.0, 1.0], &prev, &[true, false, false]).unwrap();
        assert_eq!(out.anchor.unwrap(), vec![-2.0, -1.0, -1.0]);
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_int4(&[1.0, -0.5, 0.25]);
        assert_eq!(q.scale, 1.0 / 7.0);
        assert_eq!(q.codes, vec![7, -4, 2]);
        let d = q.dequantize();
        assert!((d[1] + 4.0 / 7.0).abs() < 1e-15);
        assert!((d[2] - 2.0 / 7.0).abs() < 1e-15);

        let z = quantize_int4(&[0.0; 5]);
        assert_eq!(z.scale, 0.0);
        assert_eq!(z.dequantize(), vec![0.0; 5]);
    }

    #[test]
    fn pack_roundtrip() {
        let q = Int4 { codes: vec![-7, 7, 0, -1, 3], scale: 0.5 };
        let packed = q.pack();
        assert_eq!(packed.len(), 3);
        assert_eq!(Int4::unpack(&packed, 5, 0.5), q);
    }
}
