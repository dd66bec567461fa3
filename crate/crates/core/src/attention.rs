//! One-head residual attention used for feature aggregation:
//!
//! ```text
//! A(q_i, K) = q_i + Σ_j w_ij · (W · k_j),   w_i· = softmax_j(scale · q_i·k_j)
//! ```
//!
//! Similarity uses the raw query and key features; only keys go through `W`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryCoord {
    pub level_index: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyOrigin {
    pub frame_index: usize,
    pub level_index: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// `[N_q, C]`
    pub features: Tensor,
    pub coords: Vec<QueryCoord>,
}

impl QuerySet {
    /// Rows of `[N, C]` with placeholder coordinates `(0, i, 0)`.
    pub fn from_features(features: Tensor) -> Self {
        let n = features.shape()[0];
        Self {
            features,
            coords: (0..n)
                .map(|x| QueryCoord {
                    level_index: 0,
                    x,
                    y: 0,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    /// `[N_k, C]`
    pub features: Tensor,
    pub provenance: Vec<KeyOrigin>,
}

impl KeySet {
    /// Rows of `[N, C]` with placeholder provenance `(0, 0, i, 0)`.
    pub fn from_features(features: Tensor) -> Self {
        let n = features.shape()[0];
        Self {
            features,
            provenance: (0..n)
                .map(|x| KeyOrigin {
                    frame_index: 0,
                    level_index: 0,
                    x,
                    y: 0,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// The `[C, C]` map applied to every key.
    pub transform: Tensor,
    pub scale: f32,
}

impl AttentionParams {
    /// Square transform with the default `C^(-1/2)` scale.
    pub fn new(transform: Tensor) -> Result<Self> {
        let (r, c) = transform.dims2()?;
        if r != c || r == 0 {
            return shape_err(format!("attention transform must be square, got [{r}, {c}]"));
        }
        Ok(Self {
            transform,
            scale: (r as f32).powf(-0.5),
        })
    }

    /// Uniform `[-1/√C, 1/√C)` transform.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = (channels as f32).powf(-0.5);
        Self::new(Tensor::random_uniform(&[channels, channels], -b, b, &mut rng)).expect("square by construction")
    }

    /// Seeded transform whose first `protected` output rows are zero, so
    /// aggregation leaves those channels untouched. Analytic detectors keep
    /// their class-occupancy channels there.
    pub fn seeded_protecting(channels: usize, protected: usize, seed: u64) -> Self {
        let mut p = Self::seeded(channels, seed);
        let n = protected.min(channels);
        p.transform.data_mut()[..n * channels].fill(0.0);
        p
    }

    pub fn channels(&self) -> usize {
        self.transform.shape()[0]
    }
}

fn check_channels(q: &Tensor, k: &Tensor) -> Result<usize> {
    let (_, cq) = q.dims2()?;
    let (_, ck) = k.dims2()?;
    if cq != ck {
        return shape_err(format!("query dimension {cq} differs from key dimension {ck}"));
    }
    Ok(cq)
}

/// `[N_q, N_k]` row-stochastic weights, or `None` when there are no keys.
pub fn similarity_weights(queries: &QuerySet, keys: &KeySet, scale: f32) -> Result<Option<Tensor>> {
    check_channels(&queries.features, &keys.features)?;
    if keys.is_empty() {
        return Ok(None);
    }
    let mut logits = tensor::matmul(&queries.features, &tensor::transpose(&keys.features)?)?;
    logits.data_mut().iter_mut().for_each(|v| *v *= scale);
    tensor::softmax_rows(&logits).map(Some)
}

/// Enhanced queries `[N_q, C]`, or `None` (aggregation skipped) when there are no keys.
pub fn aggregate(queries: &QuerySet, keys: &KeySet, params: &AttentionParams) -> Result<Option<Tensor>> {
    let c = check_channels(&queries.features, &keys.features)?;
    if params.channels() != c {
        return shape_err(format!(
            "attention transform is {0}x{0}, features have {c} channels",
            params.channels()
        ));
    }
    let Some(weights) = similarity_weights(queries, keys, params.scale)? else {
        return Ok(None);
    };
    let values = tensor::matmul(&keys.features, &tensor::transpose(&params.transform)?)?;
    let mut out = tensor::matmul(&weights, &values)?;
    tensor::add_inplace(&mut out, &queries.features)?;
    Ok(Some(out))
}

/// Multiply-accumulate count of one [`aggregate`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    /// `N_q · N_k · C` for the pairwise dot products.
    pub similarity: u64,
    /// `N_k · C²` for applying `W` to every key.
    pub transform: u64,
    /// `N_q · N_k · C` for the weighted sum.
    pub weighted_sum: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.similarity + self.transform + self.weighted_sum
    }

    /// The terms that grow with `N_q · N_k`.
    pub fn quadratic(&self) -> u64 {
        self.similarity + self.weighted_sum
    }
}

impl std::ops::Add for OpCount {
    type Output = OpCount;

    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            similarity: self.similarity + o.similarity,
            transform: self.transform + o.transform,
            weighted_sum: self.weighted_sum + o.weighted_sum,
        }
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::default(), |a, b| a + b)
    }
}

/// Closed-form MAC count; zero when either side is empty since the call is skipped.
pub fn attention_op_count(n_q: usize, n_k: usize, channels: usize) -> OpCount {
    if n_q == 0 || n_k == 0 {
        return OpCount::default();
    }
    let (q, k, c) = (n_q as u64, n_k as u64, channels as u64);
    OpCount {
        similarity: q * k * c,
        transform: k * c * c,
        weighted_sum: q * k * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn qset(features: Tensor) -> QuerySet {
        let n = features.shape()[0];
        QuerySet {
            features,
            coords: (0..n)
                .map(|i| QueryCoord {
                    level_index: 0,
                    x: i,
                    y: 0,
                })
                .collect(),
        }
    }

    fn kset(features: Tensor) -> KeySet {
        let n = features.shape()[0];
        KeySet {
            features,
            provenance: (0..n)
                .map(|i| KeyOrigin {
                    frame_index: 0,
                    level_index: 0,
                    x: i,
                    y: 0,
                })
                .collect(),
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Per-pair loop in f64.
    fn oracle_weights(q: &Tensor, k: &Tensor, scale: f32) -> Vec<Vec<f64>> {
        let (nq, c) = q.dims2().unwrap();
        let nk = k.shape()[0];
        (0..nq)
            .map(|i| {
                let logits: Vec<f64> = (0..nk)
                    .map(|j| {
                        (0..c)
                            .map(|d| q.data()[i * c + d] as f64 * k.data()[j * c + d] as f64)
                            .sum::<f64>()
                            * scale as f64
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn oracle_aggregate(q: &Tensor, k: &Tensor, p: &AttentionParams) -> Tensor {
        let (nq, c) = q.dims2().unwrap();
        let nk = k.shape()[0];
        let w = oracle_weights(q, k, p.scale);
        let mut out = Tensor::zeros(&[nq, c]);
        for i in 0..nq {
            for r in 0..c {
                let mut acc = q.data()[i * c + r] as f64;
                for j in 0..nk {
                    let wk: f64 = (0..c)
                        .map(|d| p.transform.data()[r * c + d] as f64 * k.data()[j * c + d] as f64)
                        .sum();
                    acc += w[i][j] * wk;
                }
                out.data_mut()[i * c + r] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn single_key_weight_is_one() {
        let q = random(&[1, 8], 1);
        let w = similarity_weights(&qset(q.clone()), &kset(q), 0.3).unwrap().unwrap();
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let q = random(&[3, 8], 2);
        let k = random(&[1, 8], 3);
        let kk = Tensor::new(vec![2, 8], [k.data(), k.data()].concat()).unwrap();
        let w = similarity_weights(&qset(q), &kset(kk), 0.5).unwrap().unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn weights_match_oracle() {
        let (q, k) = (random(&[4, 8], 4), random(&[6, 8], 5));
        let w = similarity_weights(&qset(q.clone()), &kset(k.clone()), 0.35)
            .unwrap()
            .unwrap();
        let o = oracle_weights(&q, &k, 0.35);
        for i in 0..4 {
            for j in 0..6 {
                assert!((w.data()[i * 6 + j] as f64 - o[i][j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_transform_is_residual_identity() {
        let (q, k) = (random(&[5, 8], 6), random(&[7, 8], 7));
        let p = AttentionParams::new(Tensor::zeros(&[8, 8])).unwrap();
        let out = aggregate(&qset(q.clone()), &kset(k), &p).unwrap().unwrap();
        assert!(out.bitwise_eq(&q));
    }

    #[test]
    fn identity_transform_single_key_adds_key() {
        let (q, k) = (random(&[3, 4], 8), random(&[1, 4], 9));
        let p = AttentionParams::new(Tensor::identity(4)).unwrap();
        let out = aggregate(&qset(q.clone()), &kset(k.clone()), &p).unwrap().unwrap();
        for i in 0..3 {
            for d in 0..4 {
                assert_eq!(out.data()[i * 4 + d], q.data()[i * 4 + d] + k.data()[d]);
            }
        }
    }

    #[test]
    fn aggregate_matches_oracle() {
        let (q, k) = (random(&[9, 16], 10), random(&[13, 16], 11));
        let p = AttentionParams::seeded(16, 12);
        let out = aggregate(&qset(q.clone()), &kset(k.clone()), &p).unwrap().unwrap();
        assert!(out.max_abs_diff(&oracle_aggregate(&q, &k, &p)) <= 1e-5);
    }

    #[test]
    fn empty_keys_skip() {
        let q = qset(random(&[3, 4], 1));
        let k = kset(Tensor::zeros(&[0, 4]));
        let p = AttentionParams::seeded(4, 0);
        assert!(aggregate(&q, &k, &p).unwrap().is_none());
        assert!(similarity_weights(&q, &k, 1.0).unwrap().is_none());
    }

    #[test]
    fn mismatched_channels_error() {
        let q = qset(random(&[3, 4], 1));
        let k = kset(random(&[3, 5], 1));
        assert!(similarity_weights(&q, &k, 1.0).is_err());
        assert!(AttentionParams::new(Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn op_count_closed_form() {
        assert_eq!(attention_op_count(0, 10, 8).total(), 0);
        let a = attention_op_count(100, 200, 16);
        assert_eq!(a.similarity, 100 * 200 * 16);
        assert_eq!(a.transform, 200 * 16 * 16);
        let b = attention_op_count(200, 400, 16);
        assert_eq!(b.quadratic(), 4 * a.quadratic());
        let small = attention_op_count(300, 300, 256).quadratic() as f64;
        let large = attention_op_count(12_958, 12_958, 256).quadratic() as f64;
        let expected = (12_958.0f64 / 300.0).powi(2);
        assert!((large / small - expected).abs() / expected < 1e-12);
        assert!((large / small - 1866.0).abs() < 1.0);
    }

    #[test]
    fn protected_channels_pass_through() {
        let (q, k) = (random(&[4, 8], 1), random(&[5, 8], 2));
        let p = AttentionParams::seeded_protecting(8, 3, 9);
        let out = aggregate(&qset(q.clone()), &kset(k), &p).unwrap().unwrap();
        for i in 0..4 {
            for d in 0..3 {
                assert_eq!(out.data()[i * 8 + d], q.data()[i * 8 + d]);
            }
        }
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(seed in 0u64..500, nq in 1usize..8, nk in 1usize..10) {
            let q = qset(random(&[nq, 6], seed));
            let k = kset(random(&[nk, 6], seed + 1000));
            let w = similarity_weights(&q, &k, 0.4).unwrap().unwrap();
            for i in 0..nq {
                let s: f64 = w.row(i).iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn key_order_does_not_matter(seed in 0u64..500, shift in 1usize..6) {
            let q = random(&[4, 8], seed);
            let k = random(&[6, 8], seed + 1);
            let rotated = Tensor::from_fn(&[6, 8], |i| {
                let (r, c) = (i / 8, i % 8);
                k.data()[((r + shift) % 6) * 8 + c]
            });
            let p = AttentionParams::seeded(8, seed);
            let a = aggregate(&qset(q.clone()), &kset(k), &p).unwrap().unwrap();
            let b = aggregate(&qset(q), &kset(rotated), &p).unwrap().unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }
}
