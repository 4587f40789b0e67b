//! Masked-token corruption for the MLM objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{is_special, FIRST_REGULAR_ID, MASK_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    /// Indices into the token sequence, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    pub replacement: Vec<Replacement>,
}

impl MaskingPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub rate: f64,
    /// Probabilities of `[MASK]`, random token and unchanged token.
    pub split: (f64, f64, f64),
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            rate: 0.15,
            split: (0.8, 0.1, 0.1),
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("mask rate {} not in (0, 1]", self.rate)));
        }
        if [a, b, c].iter().any(|p| *p < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mask split must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Selects each non-special position independently with probability
/// `config.rate` (forcing one uniformly if none is picked), then replaces it
/// by `[MASK]`, a random regular id, or itself.
pub fn apply_masking<R: Rng + ?Sized>(
    tokens: &[usize],
    vocab_size: usize,
    rng: &mut R,
    config: &MaskingConfig,
) -> Result<(Vec<usize>, MaskingPlan)> {
    config.validate()?;
    let maskable: Vec<usize> = (0..tokens.len()).filter(|&i| !is_special(tokens[i])).collect();
    if maskable.is_empty() {
        return Err(Error::NoMaskablePositions);
    }
    let mut positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.random_bool(config.rate))
        .collect();
    if positions.is_empty() {
        positions.push(maskable[rng.random_range(0..maskable.len())]);
    }

    let mut out = tokens.to_vec();
    let mut plan = MaskingPlan::default();
    let (p_mask, p_random, _) = config.split;
    for &i in &positions {
        let u: f64 = rng.random();
        let r = if u < p_mask {
            out[i] = MASK_ID;
            Replacement::Mask
        } else if u < p_mask + p_random {
            out[i] = rng.random_range(FIRST_REGULAR_ID..vocab_size);
            Replacement::Random
        } else {
            Replacement::Keep
        };
        plan.positions.push(i);
        plan.targets.push(tokens[i]);
        plan.replacement.push(r);
    }
    Ok((out, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{CLS_ID, PAD_ID, SEP_ID};
    use crate::rng::{domain, stream};
    use proptest::prelude::*;

    #[test]
    fn full_rate_all_mask() {
        let cfg = MaskingConfig {
            rate: 1.0,
            split: (1.0, 0.0, 0.0),
        };
        let toks = [CLS_ID, 10, 11, SEP_ID, 12, PAD_ID];
        let (out, plan) = apply_masking(&toks, 100, &mut stream(1, domain::BATCH, 0), &cfg).unwrap();
        assert_eq!(out, vec![CLS_ID, MASK_ID, MASK_ID, SEP_ID, MASK_ID, PAD_ID]);
        assert_eq!(plan.positions, vec![1, 2, 4]);
        assert_eq!(plan.targets, vec![10, 11, 12]);
    }

    #[test]
    fn nothing_to_mask() {
        let r = apply_masking(
            &[CLS_ID, SEP_ID, PAD_ID],
            100,
            &mut stream(1, domain::BATCH, 0),
            &MaskingConfig::default(),
        );
        assert!(matches!(r, Err(Error::NoMaskablePositions)));
    }

    #[test]
    fn empirical_rate() {
        // long sequences so the force-one rule is negligible
        let toks: Vec<usize> = (0..1000).map(|i| FIRST_REGULAR_ID + i % 50).collect();
        let mut rng = stream(9, domain::BATCH, 0);
        let mut selected = 0;
        for _ in 0..100 {
            let (_, plan) = apply_masking(&toks, 100, &mut rng, &MaskingConfig::default()).unwrap();
            selected += plan.len();
        }
        let rate = selected as f64 / 100_000.0;
        assert!((rate - 0.15).abs() < 0.01, "rate {rate}");
    }

    proptest! {
        #[test]
        fn specials_untouched_and_targets_original(
            toks in proptest::collection::vec(0usize..40, 1..30),
            seed in any::<u64>(),
        ) {
            let mut rng = stream(seed, domain::BATCH, 0);
            match apply_masking(&toks, 40, &mut rng, &MaskingConfig::default()) {
                Err(Error::NoMaskablePositions) => {
                    prop_assert!(toks.iter().all(|&t| is_special(t)));
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok((out, plan)) => {
                    prop_assert!(!plan.is_empty());
                    for (i, &t) in toks.iter().enumerate() {
                        if is_special(t) {
                            prop_assert_eq!(out[i], t);
                            prop_assert!(!plan.positions.contains(&i));
                        } else if !plan.positions.contains(&i) {
                            prop_assert_eq!(out[i], t);
                        }
                    }
                    for (&p, &t) in plan.positions.iter().zip(&plan.targets) {
                        prop_assert_eq!(toks[p], t);
                    }
                }
            }
        }
    }
}
