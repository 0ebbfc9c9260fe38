use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Position `i` sees every `j <= i`.
    Causal,
    /// Causal, except observation `o_p` (p >= 1) cannot see action `a_{p-1}`.
    InverseDyn,
    /// Full visibility; masking happens on the inputs instead.
    HindsightNoncausal,
}

/// Visibility over the `2 * pairs` interleaved tokens
/// `(o_0, a_0, o_1, a_1, ...)`; `visible[i][j]` means `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    pairs: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn len(&self) -> usize {
        2 * self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.len() + j]
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.visible.chunks(self.len()).map(<[bool]>::to_vec).collect()
    }

    /// Additive attention bias: `0` where visible, `-inf` elsewhere.
    pub fn to_bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.len();
        let vals: Vec<f32> = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Ok(Tensor::from_vec(vals, (n, n), device)?.to_dtype(dtype)?)
    }
}

/// Builds the visibility matrix for `pairs` observation/action pairs.
/// Rollouts with a truncated context use `pairs = 1`.
pub fn build_attention_mask(kind: MaskKind, pairs: usize) -> Result<AttentionMask> {
    if pairs == 0 {
        return Err(CtError::Config("attention mask needs at least one pair".into()));
    }
    let n = 2 * pairs;
    let mut visible = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            visible[i * n + j] = match kind {
                MaskKind::HindsightNoncausal => true,
                MaskKind::Causal => j <= i,
                MaskKind::InverseDyn => j <= i && !(i % 2 == 0 && i >= 2 && j + 1 == i),
            };
        }
    }
    Ok(AttentionMask {
        kind,
        pairs,
        visible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent reference: reasons about (pair, modality) of each token.
    fn reference(kind: MaskKind, pairs: usize) -> Vec<Vec<bool>> {
        #[derive(PartialEq)]
        enum Tok {
            Obs(usize),
            Act(usize),
        }
        let toks: Vec<Tok> = (0..pairs).flat_map(|p| [Tok::Obs(p), Tok::Act(p)]).collect();
        // Temporal order: o_p precedes a_p precedes o_{p+1}.
        let time = |t: &Tok| match t {
            Tok::Obs(p) => 2 * p,
            Tok::Act(p) => 2 * p + 1,
        };
        toks.iter()
            .map(|q| {
                toks.iter()
                    .map(|k| match kind {
                        MaskKind::HindsightNoncausal => true,
                        MaskKind::Causal => time(k) <= time(q),
                        MaskKind::InverseDyn => {
                            let hidden = matches!((q, k), (Tok::Obs(p), Tok::Act(a)) if *p >= 1 && *a == p - 1);
                            time(k) <= time(q) && !hidden
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn causal_two_pairs_is_lower_triangular() {
        let m = build_attention_mask(MaskKind::Causal, 2).unwrap();
        let expect = vec![
            vec![true, false, false, false],
            vec![true, true, false, false],
            vec![true, true, true, false],
            vec![true, true, true, true],
        ];
        assert_eq!(m.rows(), expect);
    }

    #[test]
    fn inverse_two_pairs_has_single_hole() {
        let m = build_attention_mask(MaskKind::InverseDyn, 2).unwrap();
        let c = build_attention_mask(MaskKind::Causal, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if (i, j) == (2, 1) {
                    assert!(!m.get(i, j));
                } else {
                    assert_eq!(m.get(i, j), c.get(i, j));
                }
            }
        }
    }

    #[test]
    fn matches_reference_enumerator() {
        for kind in [MaskKind::Causal, MaskKind::InverseDyn, MaskKind::HindsightNoncausal] {
            for t in 1..=8 {
                assert_eq!(build_attention_mask(kind, t).unwrap().rows(), reference(kind, t), "{kind:?} T={t}");
            }
        }
    }

    #[test]
    fn bias_is_zero_or_neg_inf() {
        let m = build_attention_mask(MaskKind::InverseDyn, 3).unwrap();
        let b = m.to_bias(DType::F32, &Device::Cpu).unwrap().to_vec2::<f32>().unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(b[i][j] == 0.0, m.get(i, j));
                assert!(b[i][j] == 0.0 || b[i][j] == f32::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(build_attention_mask(MaskKind::Causal, 0).is_err());
    }
}
