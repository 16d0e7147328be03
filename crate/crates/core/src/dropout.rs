//! The three dropout variants used inside dense-block layers: regular
//! Bernoulli dropout on activations, variational dropout with a learned
//! per-site noise variance, and targeted dropout on the lowest-magnitude
//! weights of a layer.
//!
//! All variants are exact identities in eval mode. Masks are deterministic
//! functions of the rng stream, so identical seeds reproduce identical
//! training runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Parameter, Tensor};

/// Coefficients of the cubic KL approximation for Gaussian multiplicative
/// noise (variational-dropout literature).
pub const KL_C1: f64 = 1.161_451_24;
pub const KL_C2: f64 = -1.502_041_18;
pub const KL_C3: f64 = 0.586_299_21;

/// Which dropout mechanism a model plugs into its dense-block layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DropoutSpec {
    /// Bernoulli activation dropout with drop probability `p` (inverted
    /// scaling: survivors are scaled by `1/(1-p)` so eval is identity).
    Regular { p: f32 },
    /// Multiplicative Gaussian noise with learned log-variance per site,
    /// clamped to `log_alpha <= log_alpha_max`.
    Variational { log_alpha_init: f32, log_alpha_max: f32 },
    /// Stochastic drop (rate `p`) restricted to the `gamma` fraction of
    /// lowest-magnitude weights of a layer.
    Targeted { gamma: f32, p: f32 },
}

impl DropoutSpec {
    pub fn regular_default() -> Self {
        DropoutSpec::Regular { p: 0.2 }
    }

    pub fn variational_default() -> Self {
        DropoutSpec::Variational { log_alpha_init: -3.0, log_alpha_max: 0.0 }
    }

    pub fn targeted_default() -> Self {
        DropoutSpec::Targeted { gamma: 0.5, p: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DropoutSpec::Regular { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!("regular dropout p={p} outside [0, 1)")));
                }
            }
            DropoutSpec::Variational { log_alpha_init, log_alpha_max } => {
                if !log_alpha_init.is_finite() || !log_alpha_max.is_finite() {
                    return Err(Error::Config("variational dropout log_alpha must be finite".into()));
                }
                if log_alpha_init > log_alpha_max {
                    return Err(Error::Config(format!(
                        "log_alpha_init {log_alpha_init} exceeds log_alpha_max {log_alpha_max}"
                    )));
                }
            }
            DropoutSpec::Targeted { gamma, p } => {
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(Error::Config(format!("targeted dropout gamma={gamma} outside [0, 1]")));
                }
                // p = 1 is a deterministic full drop of the target set; no
                // rescaling happens, so unlike regular dropout it is valid.
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("targeted dropout p={p} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            DropoutSpec::Regular { .. } => "regular",
            DropoutSpec::Variational { .. } => "variational",
            DropoutSpec::Targeted { .. } => "targeted",
        }
    }
}

/// Learned noise state for one variational-dropout site: a scalar
/// `log_alpha` parameter trained jointly with the weights.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub log_alpha: Parameter,
}

impl VariationalState {
    pub fn new(name: impl Into<String>, log_alpha_init: f32) -> Self {
        VariationalState { log_alpha: Parameter::new(name, Tensor::scalar(log_alpha_init)) }
    }

    pub fn alpha(&self) -> f32 {
        self.log_alpha.value.data[0].exp()
    }
}

// ── Mask construction (shared by the functional ops and the tape path) ──

/// Regular-dropout mask with inverted scaling folded in: entries are
/// `0` (dropped, probability `p`) or `1/(1-p)`.
pub fn regular_mask<R: Rng>(len: usize, p: f32, rng: &mut R) -> Vec<f32> {
    let keep_scale = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep_scale }).collect()
}

/// The target set `T` of targeted dropout: flat indices of the
/// `ceil(gamma * n)` weights of smallest absolute value, ties broken by
/// lower flat index.
pub fn targeted_set(weights: &[f32], gamma: f32) -> Vec<usize> {
    let n = weights.len();
    let t_size = ((gamma as f64) * n as f64).ceil() as usize;
    let t_size = t_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        weights[a].abs().partial_cmp(&weights[b].abs()).expect("finite weights").then(a.cmp(&b))
    });
    order.truncate(t_size);
    order
}

/// Targeted-dropout mask: 1 everywhere except entries of `T` that the
/// Bernoulli draw (rate `p`) zeroes. No rescaling.
pub fn targeted_mask<R: Rng>(weights: &[f32], gamma: f32, p: f32, rng: &mut R) -> Vec<f32> {
    let mut mask = vec![1.0f32; weights.len()];
    for idx in targeted_set(weights, gamma) {
        if rng.gen::<f32>() < p {
            mask[idx] = 0.0;
        }
    }
    mask
}

/// Standard-normal draws for the variational noise (Box-Muller; two draws
/// per pair keeps the stream deterministic for a given length).
pub fn standard_normal<R: Rng>(len: usize, rng: &mut R) -> Vec<f32> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push((r * theta.cos()) as f32);
        if out.len() < len {
            out.push((r * theta.sin()) as f32);
        }
    }
    out
}

// ── Functional ops on plain tensors ─────────────────────────────────

/// Bernoulli activation dropout. Train mode zeroes each activation with
/// probability `p` and scales survivors by `1/(1-p)`; eval returns the
/// input unchanged.
pub fn regular_dropout<R: Rng>(x: &Tensor, p: f32, rng: &mut R, mode: Mode) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("regular dropout p={p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = regular_mask(x.numel(), p, rng);
    let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::new(x.shape.clone(), data))
}

/// Multiplicative Gaussian noise `y = x * eps`, `eps ~ N(1, alpha)` with
/// `alpha = exp(log_alpha)`. Eval mode propagates the mean (identity).
pub fn variational_dropout<R: Rng>(
    x: &Tensor,
    state: &VariationalState,
    rng: &mut R,
    mode: Mode,
) -> Tensor {
    if mode == Mode::Eval {
        return x.clone();
    }
    let sigma = (state.log_alpha.value.data[0] / 2.0).exp();
    let noise = standard_normal(x.numel(), rng);
    let data = x.data.iter().zip(&noise).map(|(&v, &n)| v * (1.0 + sigma * n)).collect();
    Tensor::new(x.shape.clone(), data)
}

/// Stochastic drop of the lowest-|w| weights. Train mode zeroes each
/// weight of the target set with probability `p`; weights outside the set
/// are untouched and there is no rescaling. Eval returns the weights
/// unchanged.
pub fn targeted_dropout<R: Rng>(
    weights: &Tensor,
    gamma: f32,
    p: f32,
    rng: &mut R,
    mode: Mode,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("targeted dropout gamma={gamma} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("targeted dropout p={p} outside [0, 1]")));
    }
    if mode == Mode::Eval {
        return Ok(weights.clone());
    }
    let mask = targeted_mask(&weights.data, gamma, p, rng);
    let data = weights.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::new(weights.shape.clone(), data))
}

// ── KL penalty ──────────────────────────────────────────────────────

/// Per-site KL penalty of variational dropout as a function of
/// `alpha = exp(log_alpha)`:
///
/// `penalty(alpha) = 0.5*ln(1 + alpha) + c1*alpha + c2*alpha^2 + c3*alpha^3`
///
/// This is the cubic polynomial approximation of the Gaussian-dropout KL
/// with its log term taken in `log1p` form, which pins the zero-noise limit
/// to exactly zero and keeps the penalty non-negative and non-decreasing
/// over `alpha in [0, 1]`.
pub fn vd_kl_penalty_value(log_alpha: f32) -> f32 {
    let a = (log_alpha as f64).exp();
    (0.5 * a.ln_1p() + KL_C1 * a + KL_C2 * a * a + KL_C3 * a * a * a) as f32
}

/// d penalty / d log_alpha (the chain rule through `alpha = exp(log_alpha)`).
pub fn vd_kl_penalty_grad(log_alpha: f32) -> f32 {
    let a = (log_alpha as f64).exp();
    let dpen_da = 0.5 / (1.0 + a) + KL_C1 + 2.0 * KL_C2 * a + 3.0 * KL_C3 * a * a;
    (a * dpen_da) as f32
}

/// KL penalty summed over sites, as a plain value (the tape op
/// [`crate::tensor::Tape::kl_penalty`] is the differentiable route).
pub fn vd_kl_penalty(states: &[&VariationalState]) -> f32 {
    states.iter().map(|s| vd_kl_penalty_value(s.log_alpha.value.data[0])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, relative_error};
    use crate::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn regular_dropout_p_zero_is_identity() {
        let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.0]);
        let y = regular_dropout(&x, 0.0, &mut seeded_rng(1), Mode::Train).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn regular_dropout_eval_is_identity() {
        let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]);
        for p in [0.1, 0.5, 0.9] {
            let y = regular_dropout(&x, p, &mut seeded_rng(2), Mode::Eval).unwrap();
            assert_eq!(y.data, x.data);
        }
    }

    #[test]
    fn regular_dropout_rejects_p_of_one() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            regular_dropout(&x, 1.0, &mut seeded_rng(3), Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn regular_dropout_statistics_at_half() {
        let n = 100_000;
        let x = Tensor::new(vec![n], vec![2.0; n]);
        let y = regular_dropout(&x, 0.5, &mut seeded_rng(4), Mode::Train).unwrap();
        let zeros = y.data.iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "drop fraction {frac}");
        let mean = y.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    /// Inverted scaling keeps the expectation: elementwise mean over many
    /// trials stays within 3% of the input for p up to 0.8.
    #[test]
    fn regular_dropout_preserves_expectation() {
        let x = Tensor::new(vec![8], vec![1.0, -1.5, 2.0, 0.5, -0.25, 3.0, 1.25, -2.0]);
        for (seed, p) in [(10, 0.2f32), (11, 0.5), (12, 0.8)] {
            let trials = 100_000;
            let mut acc = vec![0.0f64; x.numel()];
            let mut rng = seeded_rng(seed);
            for _ in 0..trials {
                let y = regular_dropout(&x, p, &mut rng, Mode::Train).unwrap();
                for (a, &v) in acc.iter_mut().zip(&y.data) {
                    *a += v as f64;
                }
            }
            for (a, &v) in acc.iter().zip(&x.data) {
                let mean = a / trials as f64;
                assert!(
                    (mean - v as f64).abs() / (v as f64).abs() < 0.03,
                    "p={p}: mean {mean} vs {v}"
                );
            }
        }
    }

    #[test]
    fn variational_dropout_vanishing_noise_is_identity() {
        let state = VariationalState::new("la", -20.0);
        let x = Tensor::new(vec![5], vec![1.0, -2.0, 0.5, 3.0, -0.75]);
        let y = variational_dropout(&x, &state, &mut seeded_rng(5), Mode::Train);
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() / a.abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn variational_dropout_eval_is_exact_identity() {
        let state = VariationalState::new("la", 0.0);
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let y = variational_dropout(&x, &state, &mut seeded_rng(6), Mode::Eval);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn variational_noise_statistics_at_alpha_one() {
        let n = 100_000;
        let state = VariationalState::new("la", 0.0); // alpha = 1
        let x = Tensor::new(vec![n], vec![3.0; n]);
        let y = variational_dropout(&x, &state, &mut seeded_rng(7), Mode::Train);
        let ratios: Vec<f64> = y.data.iter().map(|&v| v as f64 / 3.0).collect();
        let mean = ratios.iter().sum::<f64>() / n as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn kl_penalty_vanishes_with_noise() {
        assert!(vd_kl_penalty_value(-20.0) < 1e-4);
        assert!(vd_kl_penalty_value(-20.0) >= 0.0);
    }

    #[test]
    fn kl_penalty_grows_with_alpha() {
        assert!(vd_kl_penalty_value((0.1f32).ln()) < vd_kl_penalty_value(0.0));
    }

    #[test]
    fn kl_penalty_monotone_non_negative_on_grid() {
        // 100 log-spaced alphas in [1e-8, 1].
        let mut last = -1.0f32;
        for i in 0..100 {
            let log10_alpha = -8.0 + 8.0 * i as f64 / 99.0;
            let la = (log10_alpha * std::f64::consts::LN_10) as f32;
            let pen = vd_kl_penalty_value(la);
            assert!(pen >= 0.0, "penalty {pen} negative at alpha 1e{log10_alpha}");
            assert!(pen >= last, "penalty not non-decreasing at alpha 1e{log10_alpha}");
            last = pen;
        }
    }

    #[test]
    fn kl_penalty_gradient_matches_finite_differences() {
        for la in [-3.0f32, -1.0, -0.2, 0.0] {
            let fd = finite_difference_grad(|x| vd_kl_penalty_value(x[0]), &[la], 1e-3);
            let analytic = [vd_kl_penalty_grad(la)];
            assert!(
                relative_error(&analytic, &fd) < 1e-3,
                "la={la}: {analytic:?} vs {fd:?}"
            );
        }
    }

    #[test]
    fn targeted_set_ranks_by_magnitude() {
        let t = targeted_set(&[0.1, -0.5, 0.03, 2.0], 0.5);
        assert_eq!(t, vec![2, 0]);
    }

    #[test]
    fn targeted_set_breaks_ties_by_lower_index() {
        let t = targeted_set(&[0.5, -0.5, 0.5, 0.1], 0.5);
        assert_eq!(t, vec![3, 0]);
    }

    #[test]
    fn targeted_dropout_full_drop_is_deterministic() {
        let w = Tensor::new(vec![4], vec![0.1, -0.5, 0.03, 2.0]);
        let y = targeted_dropout(&w, 0.5, 1.0, &mut seeded_rng(8), Mode::Train).unwrap();
        assert_eq!(y.data, vec![0.0, -0.5, 0.0, 2.0]);
    }

    #[test]
    fn targeted_dropout_eval_is_identity() {
        let w = Tensor::new(vec![4], vec![0.1, -0.5, 0.03, 2.0]);
        let y = targeted_dropout(&w, 0.5, 0.9, &mut seeded_rng(9), Mode::Eval).unwrap();
        assert_eq!(y.data, w.data);
    }

    #[test]
    fn targeted_dropout_rejects_invalid_rates() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0]);
        assert!(targeted_dropout(&w, 1.5, 0.5, &mut seeded_rng(10), Mode::Train).is_err());
        assert!(targeted_dropout(&w, 0.5, 1.5, &mut seeded_rng(10), Mode::Train).is_err());
    }

    #[test]
    fn targeted_dropout_never_drops_outside_target_set() {
        use rand::Rng as _;
        let n = 100_000;
        let mut rng = seeded_rng(13);
        let weights: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let w = Tensor::new(vec![n], weights.clone());
        let t_size = ((0.75f64 * n as f64).ceil()) as usize;

        // One trial for the binomial count at p = 0.5.
        let y = targeted_dropout(&w, 0.75, 0.5, &mut rng, Mode::Train).unwrap();
        let zeroed = y.data.iter().zip(&weights).filter(|(&a, &b)| a == 0.0 && b != 0.0).count();
        let mean = 0.5 * t_size as f64;
        let sd = (t_size as f64 * 0.25).sqrt();
        assert!(
            (zeroed as f64 - mean).abs() < 2.576 * sd,
            "zeroed {zeroed} outside 99% interval around {mean}"
        );

        // 100 trials: weights outside T are never zeroed.
        let small = Tensor::new(vec![64], (0..64).map(|i| (i as f32 - 31.5) / 10.0).collect());
        let small_t: Vec<bool> = {
            let mut flags = vec![false; 64];
            for idx in targeted_set(&small.data, 0.75) {
                flags[idx] = true;
            }
            flags
        };
        for trial in 0..100 {
            let y = targeted_dropout(&small, 0.75, 0.5, &mut seeded_rng(100 + trial), Mode::Train)
                .unwrap();
            for i in 0..64 {
                if !small_t[i] {
                    assert_eq!(y.data[i], small.data[i], "weight outside T changed");
                }
            }
        }
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let a = regular_mask(256, 0.3, &mut seeded_rng(21));
        let b = regular_mask(256, 0.3, &mut seeded_rng(21));
        assert_eq!(a, b);
        let w: Vec<f32> = (0..256).map(|i| ((i * 37) % 101) as f32 / 101.0 - 0.5).collect();
        let ta = targeted_mask(&w, 0.4, 0.5, &mut seeded_rng(22));
        let tb = targeted_mask(&w, 0.4, 0.5, &mut seeded_rng(22));
        assert_eq!(ta, tb);
        let na = standard_normal(99, &mut seeded_rng(23));
        let nb = standard_normal(99, &mut seeded_rng(23));
        assert_eq!(na, nb);
    }

    proptest! {
        /// |T| = ceil(gamma * n) exactly, and T is a deterministic function
        /// of (weights, gamma).
        #[test]
        fn targeted_set_size_and_determinism(
            weights in proptest::collection::vec(-10.0f32..10.0, 1..200),
            gamma in 0.0f32..=1.0,
        ) {
            let t1 = targeted_set(&weights, gamma);
            let t2 = targeted_set(&weights, gamma);
            prop_assert_eq!(&t1, &t2);
            let expect = ((gamma as f64) * weights.len() as f64).ceil() as usize;
            prop_assert_eq!(t1.len(), expect.min(weights.len()));
        }

        /// Eval mode is an exact identity for every variant.
        #[test]
        fn eval_mode_identity(
            data in proptest::collection::vec(-5.0f32..5.0, 1..64),
            p in 0.0f32..0.99,
            seed in 0u64..1000,
        ) {
            let x = Tensor::new(vec![data.len()], data);
            let r = regular_dropout(&x, p, &mut seeded_rng(seed), Mode::Eval).unwrap();
            prop_assert_eq!(&r.data, &x.data);
            let state = VariationalState::new("la", -1.0);
            let v = variational_dropout(&x, &state, &mut seeded_rng(seed), Mode::Eval);
            prop_assert_eq!(&v.data, &x.data);
            let t = targeted_dropout(&x, 0.5, p, &mut seeded_rng(seed), Mode::Eval).unwrap();
            prop_assert_eq!(&t.data, &x.data);
        }
    }
}
