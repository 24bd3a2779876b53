//! Positional encodings: rotary (RoPE), linear attention biases (ALiBi),
//! learned absolute tables and none at all (NoPE).

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Result, Tensor, Var};

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawMode")]
pub enum PositionalMode {
    Nope,
    Rope { theta: f64 },
    LearnedAbsolute { max_len: usize },
    Alibi,
}

// Internally tagged enums ignore stray keys on unit variants, so parsing
// goes through a flat struct that rejects them.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMode {
    kind: String,
    theta: Option<f64>,
    max_len: Option<usize>,
}

impl TryFrom<RawMode> for PositionalMode {
    type Error = String;

    fn try_from(r: RawMode) -> std::result::Result<Self, String> {
        match (r.kind.as_str(), r.theta, r.max_len) {
            ("nope", None, None) => Ok(PositionalMode::Nope),
            ("alibi", None, None) => Ok(PositionalMode::Alibi),
            ("rope", theta, None) => Ok(PositionalMode::Rope {
                theta: theta.unwrap_or(DEFAULT_ROPE_THETA),
            }),
            ("learned_absolute", None, Some(max_len)) => Ok(PositionalMode::LearnedAbsolute { max_len }),
            ("nope" | "alibi" | "rope" | "learned_absolute", _, _) => {
                Err(format!("fields do not match positional mode {:?}", r.kind))
            }
            (k, _, _) => Err(format!(
                "unknown positional mode {k:?} (expected nope, rope, learned_absolute or alibi)"
            )),
        }
    }
}

impl PositionalMode {
    pub const ALL: [PositionalMode; 4] = [
        PositionalMode::Nope,
        PositionalMode::Rope {
            theta: DEFAULT_ROPE_THETA,
        },
        PositionalMode::LearnedAbsolute { max_len: 0 },
        PositionalMode::Alibi,
    ];

    pub fn rope() -> Self {
        PositionalMode::Rope {
            theta: DEFAULT_ROPE_THETA,
        }
    }

    /// Sizes the learned table to `max_len`; other modes are returned unchanged.
    pub fn with_max_len(self, max_len: usize) -> Self {
        match self {
            PositionalMode::LearnedAbsolute { .. } => PositionalMode::LearnedAbsolute { max_len },
            other => other,
        }
    }

    /// Short column label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            PositionalMode::Nope => "NoPE",
            PositionalMode::Rope { .. } => "RoPE",
            PositionalMode::LearnedAbsolute { .. } => "Learned",
            PositionalMode::Alibi => "ALiBi",
        }
    }

    /// Whether position information is injected inside every attention call
    /// (and therefore again on every recurrent re-entry).
    pub fn applied_in_attention(&self) -> bool {
        matches!(self, PositionalMode::Rope { .. } | PositionalMode::Alibi)
    }
}

impl fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Cosine/sine tables for rotating a `(batch·T)×d` activation whose columns
/// hold `n_heads` contiguous heads. Entry `i` of a row covers the column pair
/// `(2i, 2i+1)`; within a head, pair `j` turns by `pos · theta^(−2j/head_dim)`.
pub fn rope_tables<F: Float>(
    positions: &[usize],
    batch: usize,
    hidden_dim: usize,
    n_heads: usize,
    theta: f64,
) -> (Rc<Vec<F>>, Rc<Vec<F>>) {
    let head_dim = hidden_dim / n_heads;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| theta.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    let mut row_cos = Vec::with_capacity(positions.len() * hidden_dim / 2);
    let mut row_sin = Vec::with_capacity(row_cos.capacity());
    for &pos in positions {
        for _ in 0..n_heads {
            for f in &freqs {
                let angle = pos as f64 * f;
                row_cos.push(F::from_f64(angle.cos()));
                row_sin.push(F::from_f64(angle.sin()));
            }
        }
    }
    (Rc::new(row_cos.repeat(batch)), Rc::new(row_sin.repeat(batch)))
}

/// Rotates queries and keys (`(batch·T)×(H·hd)`, heads contiguous) by their
/// positions. Both get exactly the same rotation.
pub fn apply_rope<'g, F: Float>(
    q: Var<'g, F>,
    k: Var<'g, F>,
    positions: &[usize],
    n_heads: usize,
    theta: f64,
) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let shape = q.shape();
    let (rows, d) = (shape[0], shape[1]);
    let batch = rows / positions.len().max(1);
    let (cos, sin) = rope_tables(positions, batch, d, n_heads, theta);
    Ok((q.rotate_pairs(cos.clone(), sin.clone())?, k.rotate_pairs(cos, sin)?))
}

/// Geometric ALiBi slopes `2^(−8h/H)` for `h = 1..=H`.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / n_heads as f64))
        .collect()
}

/// `H×T×T` bias with `bias[h,i,j] = −slope_h·(i − j)`. It depends on the
/// distance only; entries above the diagonal are removed by the causal mask.
pub fn alibi_bias<F: Float>(n_heads: usize, seq_len: usize) -> Tensor<F> {
    let slopes = alibi_slopes(n_heads);
    Tensor::from_fn([n_heads, seq_len, seq_len], |idx| {
        let h = idx / (seq_len * seq_len);
        let i = (idx / seq_len) % seq_len;
        let j = idx % seq_len;
        F::from_f64(-slopes[h] * (i as f64 - j as f64))
    })
    .expect("positive extents")
}

/// `T×T` additive mask: 0 where `j ≤ i`, `−∞` above the diagonal.
pub fn causal_mask<F: Float>(seq_len: usize) -> Tensor<F> {
    Tensor::from_fn([seq_len, seq_len], |idx| {
        if idx % seq_len <= idx / seq_len {
            F::zero()
        } else {
            F::neg_infinity()
        }
    })
    .expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 2], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let g = Graph::new();
        let q = g.constant(random([1, 8], 1));
        let k = g.constant(random([1, 8], 2));
        let (q2, k2) = apply_rope(q, k, &[0], 2, DEFAULT_ROPE_THETA).unwrap();
        assert_eq!(q2.value(), q.value());
        assert_eq!(k2.value(), k.value());
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let g = Graph::new();
        let x = random([5, 8], 3);
        let q = g.constant(x.clone());
        let (q2, _) = apply_rope(q, q, &[0, 3, 17, 250, 1023], 2, DEFAULT_ROPE_THETA).unwrap();
        let y = q2.value();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-12);
        }
    }

    /// Scores `q_m · k_n` after rotation depend only on `m − n`.
    #[test]
    fn rope_scores_are_shift_invariant() {
        let positions: Vec<usize> = (0..6).collect();
        let shifted: Vec<usize> = positions.iter().map(|p| p + 7).collect();
        let x = random([6, 8], 4);
        let y = random([6, 8], 5);
        let scores = |pos: &[usize]| {
            let g = Graph::new();
            let (q, k) = apply_rope(g.constant(x.clone()), g.constant(y.clone()), pos, 2, 10_000.0).unwrap();
            q.matmul(k.transpose().unwrap()).unwrap().value()
        };
        assert!(scores(&positions).max_abs_diff(&scores(&shifted)) < 1e-10);
    }

    #[test]
    fn alibi_slopes_for_eight_heads() {
        let s = alibi_slopes(8);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[7], 2f64.powi(-8));
        for w in s.windows(2) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn alibi_bias_depends_on_distance_only() {
        let (h, t) = (4, 6);
        let b = alibi_bias::<f64>(h, t);
        let at = |hh: usize, i: usize, j: usize| b.data()[hh * t * t + i * t + j];
        for hh in 0..h {
            for i in 0..t {
                assert_eq!(at(hh, i, i), 0.0);
                for j in 0..=i {
                    assert!(at(hh, i, j) <= 0.0);
                }
            }
            for i in 0..t - 1 {
                for j in 0..t - 1 {
                    assert_eq!(at(hh, i, j) - at(hh, i + 1, j + 1), 0.0);
                }
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask::<f64>(3);
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[1], f64::NEG_INFINITY);
        assert_eq!(m.data()[3], 0.0);
        assert_eq!(m.data()[8], 0.0);
    }

    #[test]
    fn serde_forms() {
        let s = serde_json::to_string(&PositionalMode::rope()).unwrap();
        assert_eq!(s, r#"{"kind":"rope","theta":10000.0}"#);
        let m: PositionalMode = serde_json::from_str(r#"{"kind":"learned_absolute","max_len":64}"#).unwrap();
        assert_eq!(m, PositionalMode::LearnedAbsolute { max_len: 64 });
        assert!(serde_json::from_str::<PositionalMode>(r#"{"kind":"nope","x":1}"#).is_err());
        assert!(serde_json::from_str::<PositionalMode>(r#"{"kind":"nope","theta":2.0}"#).is_err());
        assert!(serde_json::from_str::<PositionalMode>(r#"{"kind":"sinusoid"}"#).is_err());
        let r: PositionalMode = serde_json::from_str(r#"{"kind":"rope"}"#).unwrap();
        assert_eq!(r, PositionalMode::rope());
        for m in PositionalMode::ALL {
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<PositionalMode>(&json).unwrap(), m);
        }
    }
}
