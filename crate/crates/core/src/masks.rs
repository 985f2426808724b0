//! Auxiliary column masks.
//!
//! Every embedding column owns one auxiliary parameter `α`. A strategy turns
//! `α` into mask values on each forward pass and maps the gradient with
//! respect to those values back onto `α`:
//!
//! | strategy | forward                                   | backward            |
//! |----------|-------------------------------------------|---------------------|
//! | HAM      | `𝟙[α > 0]`                                | identity (STE)      |
//! | SAM      | `α`, kept in `[0, 1]`                     | identity            |
//! | SAM-GS   | `σ((logit α + logit u) / λ)`, `u ~ U(0,1)`| chain rule at `u`   |
//! | HAM-p    | `Bernoulli(α)`                            | identity or Gumbel  |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

pub const DEFAULT_GS_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_P_MIN: f64 = 1e-4;

/// Exact `{0, 1}` selection over the flat column layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinaryMask(Vec<bool>);

impl BinaryMask {
    pub fn ones(len: usize) -> Self {
        BinaryMask(vec![true; len])
    }

    pub fn zeros(len: usize) -> Self {
        BinaryMask(vec![false; len])
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        BinaryMask(bits.to_vec())
    }

    /// Mask whose slot `i` is bit `i` of `pattern`.
    pub fn from_pattern(pattern: u64, len: usize) -> Self {
        BinaryMask((0..len).map(|i| pattern >> i & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, slot: usize) -> bool {
        self.0[slot]
    }

    pub fn set(&mut self, slot: usize, on: bool) {
        self.0[slot] = on;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Number of surviving columns.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Slot `i` as bit `i`. Only meaningful for masks of at most 64 slots.
    pub fn pattern(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | (u64::from(b) << i))
    }

    /// Slot values as `1.0` / `0.0`.
    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Slots as a `0`/`1` string in slot order.
    pub fn bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Inverse of [`BinaryMask::bit_string`].
    pub fn parse_bits(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::invalid(format!("mask strings hold 0 and 1 only, found {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(BinaryMask)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientEstimator {
    /// Identity backward through the Bernoulli sample.
    #[default]
    Ste,
    /// Backward through the Gumbel-sigmoid relaxation of the same sample.
    GumbelSte,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskStrategy {
    Ham,
    Sam,
    SamGs { temperature: f64 },
    HamP {
        estimator: GradientEstimator,
        p_min: f64,
        temperature: f64,
    },
}

impl MaskStrategy {
    pub fn sam_gs() -> Self {
        MaskStrategy::SamGs {
            temperature: DEFAULT_GS_TEMPERATURE,
        }
    }

    pub fn ham_p() -> Self {
        MaskStrategy::HamP {
            estimator: GradientEstimator::Ste,
            p_min: DEFAULT_P_MIN,
            temperature: DEFAULT_GS_TEMPERATURE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Ham => "ham",
            MaskStrategy::Sam => "sam",
            MaskStrategy::SamGs { .. } => "sam-gs",
            MaskStrategy::HamP { .. } => "ham-p",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad_temp = |t: f64| !(t > 0.0 && t.is_finite());
        match *self {
            MaskStrategy::SamGs { temperature } if bad_temp(temperature) => {
                Err(Error::Mask(format!("temperature {temperature} must be positive")))
            }
            MaskStrategy::HamP { p_min, temperature, .. } => {
                if !(p_min > 0.0 && p_min < 0.5) {
                    Err(Error::Mask(format!("p_min {p_min} must lie in (0, 0.5)")))
                } else if bad_temp(temperature) {
                    Err(Error::Mask(format!("temperature {temperature} must be positive")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Auxiliary parameters of one search run plus the state its strategy needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskState {
    strategy: MaskStrategy,
    alpha: Vec<f64>,
    seed: u64,
    #[serde(skip, default = "unseeded")]
    rng: ChaCha8Rng,
    /// `dm/dα` per slot from the latest forward pass.
    #[serde(skip)]
    jacobian: Option<Vec<f64>>,
}

fn unseeded() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl PartialEq for MaskState {
    fn eq(&self, other: &Self) -> bool {
        self.strategy == other.strategy && self.alpha == other.alpha && self.seed == other.seed
    }
}

impl MaskState {
    /// `alpha` initialized to the constant `init` on all `len` slots.
    pub fn new(strategy: MaskStrategy, len: usize, init: f64, seed: u64) -> Result<Self> {
        Self::from_alpha(strategy, vec![init; len], seed)
    }

    pub fn from_alpha(strategy: MaskStrategy, alpha: Vec<f64>, seed: u64) -> Result<Self> {
        strategy.validate()?;
        if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
            return Err(Error::Mask(format!("auxiliary parameter {a} is not finite")));
        }
        let mut state = MaskState {
            strategy,
            alpha,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            jacobian: None,
        };
        state.project();
        Ok(state)
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// `‖𝟙[α > 0]‖₁`.
    pub fn positive_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a > 0.0).count()
    }

    /// Replaces `α` and re-applies the strategy's box constraint.
    pub fn set_alpha(&mut self, alpha: Vec<f64>) -> Result<()> {
        if alpha.len() != self.alpha.len() {
            return Err(Error::Shape {
                op: "set_alpha",
                lhs: vec![self.alpha.len()],
                rhs: vec![alpha.len()],
            });
        }
        if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("auxiliary parameter {a}")));
        }
        self.alpha = alpha;
        self.project();
        Ok(())
    }

    /// Clips to `[0, 1]` for SAM and `[p_min, 1 − p_min]` for HAM-p.
    pub fn project(&mut self) {
        let (lo, hi) = match self.strategy {
            MaskStrategy::Sam => (0.0, 1.0),
            MaskStrategy::HamP { p_min, .. } => (p_min, 1.0 - p_min),
            _ => return,
        };
        for a in &mut self.alpha {
            *a = a.clamp(lo, hi);
        }
    }

    /// Mask values for one forward pass, drawing fresh noise for the
    /// stochastic strategies.
    pub fn forward_mask(&mut self) -> Result<Vec<f64>> {
        let noise: Option<Vec<f64>> = match self.strategy {
            MaskStrategy::SamGs { .. } | MaskStrategy::HamP { .. } => {
                Some((0..self.alpha.len()).map(|_| self.rng.random::<f64>()).collect())
            }
            _ => None,
        };
        self.forward_mask_with_noise(noise.as_deref())
    }

    /// Mask values under explicit uniform noise `u`, one draw per slot.
    /// Deterministic strategies ignore `u`.
    pub fn forward_mask_with_noise(&mut self, u: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.alpha.len();
        let need_noise = || -> Result<&[f64]> {
            let u = u.ok_or_else(|| Error::Mask(format!("{} needs noise", self.strategy.name())))?;
            if u.len() != n {
                return Err(Error::Shape {
                    op: "forward_mask",
                    lhs: vec![n],
                    rhs: vec![u.len()],
                });
            }
            Ok(u)
        };
        let (mask, jac) = match self.strategy {
            MaskStrategy::Ham => (
                self.alpha.iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect(),
                vec![1.0; n],
            ),
            MaskStrategy::Sam => (self.alpha.clone(), vec![1.0; n]),
            MaskStrategy::SamGs { temperature } => {
                let u = need_noise()?;
                let mut mask = Vec::with_capacity(n);
                let mut jac = Vec::with_capacity(n);
                for (&a, &ui) in self.alpha.iter().zip(u) {
                    if !(a > 0.0 && a < 1.0) {
                        return Err(Error::Mask(format!("sam-gs parameter {a} outside (0, 1)")));
                    }
                    let (m, d) = gumbel_sigmoid(a, ui, temperature);
                    mask.push(m);
                    jac.push(d);
                }
                (mask, jac)
            }
            MaskStrategy::HamP {
                estimator, temperature, ..
            } => {
                let u = need_noise()?;
                let mut mask = Vec::with_capacity(n);
                let mut jac = Vec::with_capacity(n);
                for (&p, &ui) in self.alpha.iter().zip(u) {
                    // u < p has probability p, which also covers p ∈ {0, 1}.
                    mask.push(if ui < p { 1.0 } else { 0.0 });
                    jac.push(match estimator {
                        GradientEstimator::Ste => 1.0,
                        GradientEstimator::GumbelSte => {
                            // The reparameterized sample 𝟙[logit p + logit(1 − u) > 0]
                            // equals 𝟙[u < p]; differentiate its relaxation.
                            let pc = p.clamp(1e-12, 1.0 - 1e-12);
                            gumbel_sigmoid(pc, (1.0 - ui).clamp(1e-12, 1.0 - 1e-12), temperature).1
                        }
                    });
                }
                (mask, jac)
            }
        };
        self.jacobian = Some(jac);
        Ok(mask)
    }

    /// Gradient with respect to `α` given the gradient with respect to the
    /// mask values of the latest forward pass.
    pub fn backward_mask(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let jac = self
            .jacobian
            .as_ref()
            .ok_or_else(|| Error::Mask("backward_mask called before forward_mask".into()))?;
        if upstream.len() != jac.len() {
            return Err(Error::Shape {
                op: "backward_mask",
                lhs: vec![jac.len()],
                rhs: vec![upstream.len()],
            });
        }
        Ok(match self.strategy {
            MaskStrategy::Ham
            | MaskStrategy::Sam
            | MaskStrategy::HamP {
                estimator: GradientEstimator::Ste,
                ..
            } => upstream.to_vec(),
            _ => upstream.iter().zip(jac).map(|(g, d)| g * d).collect(),
        })
    }

    /// Exactly `s` ones at the largest `α`, ties to the lower slot.
    pub fn select_top_s(&self, s: usize) -> Result<BinaryMask> {
        top_s(&self.alpha, s)
    }

    /// `𝟙[α > 0]`; defined for HAM only.
    pub fn sign_mask(&self) -> Result<BinaryMask> {
        if self.strategy != MaskStrategy::Ham {
            return Err(Error::Mask(format!(
                "sign mask is defined for ham, not {}",
                self.strategy.name()
            )));
        }
        Ok(BinaryMask(self.alpha.iter().map(|&a| a > 0.0).collect()))
    }
}

/// Exactly `s` ones at the largest `scores`, ties to the lower slot.
pub fn top_s(scores: &[f64], s: usize) -> Result<BinaryMask> {
    if s > scores.len() {
        return Err(Error::Mask(format!("cannot keep {s} of {} columns", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = BinaryMask::zeros(scores.len());
    for &i in &order[..s] {
        mask.set(i, true);
    }
    Ok(mask)
}

/// `σ((logit a + logit u) / t)` and its derivative in `a`.
fn gumbel_sigmoid(a: f64, u: f64, t: f64) -> (f64, f64) {
    let z = ((a / (1.0 - a)).ln() + (u / (1.0 - u)).ln()) / t;
    let m = sigmoid(z);
    (m, m * (1.0 - m) / (t * a * (1.0 - a)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(strategy: MaskStrategy, alpha: &[f64]) -> MaskState {
        MaskState::from_alpha(strategy, alpha.to_vec(), 7).unwrap()
    }

    #[test]
    fn ham_forward_is_sign() {
        let mut s = state(MaskStrategy::Ham, &[0.01, -0.01, 0.0]);
        assert_eq!(s.forward_mask().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn ham_backward_is_identity_bitwise() {
        let mut s = state(MaskStrategy::Ham, &[0.3, -2.0, 0.0]);
        assert!(s.backward_mask(&[1.0, 2.0, 3.0]).is_err());
        s.forward_mask().unwrap();
        let g = [0.1f64, -3.7e-19, f64::MIN_POSITIVE];
        let out = s.backward_mask(&g).unwrap();
        for (a, b) in out.iter().zip(&g) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sam_passes_alpha_and_clips() {
        let mut s = state(MaskStrategy::Sam, &[1.5, 0.4, -0.2]);
        assert_eq!(s.alpha(), &[1.0, 0.4, 0.0]);
        assert_eq!(s.forward_mask().unwrap(), vec![1.0, 0.4, 0.0]);
        assert_eq!(s.backward_mask(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn sam_gs_symmetry_point() {
        for t in [1.0, 0.1, 0.01] {
            let mut s = state(MaskStrategy::SamGs { temperature: t }, &[0.5]);
            assert_eq!(s.forward_mask_with_noise(Some(&[0.5])).unwrap(), vec![0.5]);
            let g = s.backward_mask(&[1.0]).unwrap()[0];
            assert!((g - 1.0 / t).abs() < 1e-12 / t, "{g}");
        }
    }

    #[test]
    fn sam_gs_rejects_boundary_alpha() {
        let mut s = state(MaskStrategy::sam_gs(), &[1.0]);
        assert!(s.forward_mask().is_err());
        let mut s = state(MaskStrategy::sam_gs(), &[0.0]);
        assert!(s.forward_mask().is_err());
    }

    #[test]
    fn sam_gs_derivative_matches_finite_differences() {
        for &(a, u, t) in &[(0.3, 0.7, 0.5), (0.8, 0.2, 1.0), (0.55, 0.4, 0.1)] {
            let (_, d) = gumbel_sigmoid(a, u, t);
            let h = 1e-7;
            let fd = (gumbel_sigmoid(a + h, u, t).0 - gumbel_sigmoid(a - h, u, t).0) / (2.0 * h);
            assert!((d - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{d} vs {fd}");
        }
    }

    #[test]
    fn sam_gs_expectation_matches_quadrature() {
        let (a, t) = (0.3, 0.5);
        let mut s = state(MaskStrategy::SamGs { temperature: t }, &[a]);
        let n = 100_000;
        let mc: f64 = (0..n).map(|_| s.forward_mask().unwrap()[0]).sum::<f64>() / n as f64;
        // Midpoint rule over u.
        let k = 200_000;
        let quad: f64 = (0..k)
            .map(|i| gumbel_sigmoid(a, (i as f64 + 0.5) / k as f64, t).0)
            .sum::<f64>()
            / k as f64;
        assert!((mc - quad).abs() < 0.01, "{mc} vs {quad}");
    }

    #[test]
    fn ham_p_degenerate_probabilities() {
        let p_min = 1e-4;
        let strat = MaskStrategy::ham_p();
        let mut s = state(strat, &[1.0, 0.0]);
        assert_eq!(s.alpha(), &[1.0 - p_min, p_min]);
        // Noise strictly inside the clipped range still yields 1 and 0.
        let m = s.forward_mask_with_noise(Some(&[0.5, 0.5])).unwrap();
        assert_eq!(m, vec![1.0, 0.0]);

        // Unclipped Bernoulli rule at exactly p = 1 and p = 0.
        let mut raw = MaskState {
            strategy: strat,
            alpha: vec![1.0, 0.0],
            seed: 0,
            rng: unseeded(),
            jacobian: None,
        };
        for _ in 0..1000 {
            assert_eq!(raw.forward_mask().unwrap(), vec![1.0, 0.0]);
        }
        assert_eq!(raw.backward_mask(&[0.25, -1.0]).unwrap(), vec![0.25, -1.0]);
    }

    #[test]
    fn ham_p_mean_follows_probability() {
        let mut s = state(MaskStrategy::ham_p(), &[0.2]);
        let n = 20_000;
        let mean = (0..n).map(|_| s.forward_mask().unwrap()[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.2).abs() < 0.02);
    }

    #[test]
    fn ham_p_gumbel_estimator_is_positive_and_finite() {
        let strat = MaskStrategy::HamP {
            estimator: GradientEstimator::GumbelSte,
            p_min: DEFAULT_P_MIN,
            temperature: 1.0,
        };
        let mut s = state(strat, &[0.3, 0.7]);
        for _ in 0..100 {
            s.forward_mask().unwrap();
            let g = s.backward_mask(&[1.0, 1.0]).unwrap();
            assert!(g.iter().all(|x| x.is_finite() && *x > 0.0));
        }
    }

    #[test]
    fn top_s_examples() {
        let s = state(MaskStrategy::Sam, &[0.9, 0.1, 0.5]);
        assert_eq!(s.select_top_s(2).unwrap().as_slice(), &[true, false, true]);
        assert_eq!(s.select_top_s(0).unwrap(), BinaryMask::zeros(3));
        assert_eq!(s.select_top_s(3).unwrap(), BinaryMask::ones(3));
        assert!(s.select_top_s(4).is_err());
        let flat = state(MaskStrategy::Sam, &[0.4; 5]);
        assert_eq!(flat.select_top_s(1).unwrap().as_slice(), &[true, false, false, false, false]);
    }

    #[test]
    fn sign_mask_examples() {
        let s = state(MaskStrategy::Ham, &[0.2, -0.2, 0.0]);
        let m = s.sign_mask().unwrap();
        assert_eq!(m.as_slice(), &[true, false, false]);
        assert_eq!(m.count(), s.positive_count());
        let init = MaskState::new(MaskStrategy::Ham, 6, 0.01, 0).unwrap();
        assert_eq!(init.sign_mask().unwrap(), BinaryMask::ones(6));
        assert!(state(MaskStrategy::Sam, &[0.5]).sign_mask().is_err());
    }

    #[test]
    fn mask_patterns_round_trip() {
        let m = BinaryMask::from_bools(&[true, false, true, true]);
        assert_eq!(m.pattern(), 0b1101);
        assert_eq!(BinaryMask::from_pattern(0b1101, 4), m);
        assert_eq!(m.bit_string(), "1011");
        assert_eq!(BinaryMask::parse_bits("1011").unwrap(), m);
        assert!(BinaryMask::parse_bits("10x1").is_err());
    }

    #[test]
    fn snapshot_serializes_strategy_alpha_seed() {
        let s = state(MaskStrategy::sam_gs(), &[0.25, 0.75]);
        let json = serde_json::to_string(&s).unwrap();
        let back: MaskState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(json.contains("sam-gs"));
    }

    proptest::proptest! {
        #[test]
        fn top_s_has_exactly_s_ones(alpha in proptest::collection::vec(-1.0f64..1.0, 1..30), frac in 0.0f64..=1.0) {
            let s = ((alpha.len() as f64) * frac).floor() as usize;
            let m = top_s(&alpha, s).unwrap();
            proptest::prop_assert_eq!(m.count(), s);
            let kept_min = (0..alpha.len()).filter(|&i| m.get(i)).map(|i| alpha[i]).fold(f64::INFINITY, f64::min);
            let dropped_max = (0..alpha.len()).filter(|&i| !m.get(i)).map(|i| alpha[i]).fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(kept_min >= dropped_max);
        }

        #[test]
        fn ham_forward_is_deterministic(alpha in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let mut s = MaskState::from_alpha(MaskStrategy::Ham, alpha, 1).unwrap();
            let a = s.forward_mask().unwrap();
            let b = s.forward_mask().unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
