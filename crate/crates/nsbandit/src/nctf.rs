//! Numerical ReLU-attention realization of the multi-scale scheduler.
//!
//! This module builds the scheduler of [`crate::scheduler`] out of actual
//! transformer primitives — ReLU attention layers and ReLU MLPs operating
//! on augmented tokens — and verifies the two implementations against each
//! other. The pipeline has four stages:
//!
//! 1. **CDF attention** ([`build_cdf_attention`]): a two-head-per-order
//!    attention layer that converts each order's carrier coordinate into
//!    its empirical CDF value over the block, `P̂(z) = (1/2^n)·Σ_j
//!    relu_indicator(z − z_j, k)` — the scheduler's uniform coin.
//! 2. **Bernoulli MLP** ([`build_bernoulli_mlp`]): two residual ReLU MLP
//!    sublayers that turn the coin into the gate
//!    `B_i ≈ 𝟙[rand·ρ(2^i) ≤ ρ(2^n)]`, approximating the product on a
//!    piecewise-linear grid via the squares identity
//!    `x·y = ((x+y)² − (x−y)²)/4` and then applying a sharp indicator
//!    ramp of width `1/k₂`.
//! 3. **Block-mask attention** ([`build_block_mask_attention`]): per
//!    order, a head pair that zeroes the order's token slots wherever its
//!    gate is 0.
//! 4. **σ2 attention** ([`build_sigma2_attention`]): per order, a head
//!    pair that zeroes the order's slots whenever any lower order is
//!    still live, leaving exactly the acting copy.
//!
//! Two realization choices keep the numerics exact rather than merely
//! approximate. First, the gating attention scores are multiplied by the
//! key token's round index, so the causal `1/t` prefix normalization
//! cancels and kept copies survive with weight exactly 1 (the bare
//! constructions would shrink them by `1/t`). Second, the CDF layer adds
//! a small constant tilt (default `4·10⁻⁴`) to every coin via one extra
//! always-on head. The coins are rank multiples of `2^{i−n}` and can tie
//! exactly with a dyadic scheduling ratio; the tilt pushes a tied coin
//! strictly above its ratio so the gate's closed inequality
//! `rand ≤ ratio` decides ties exactly like the scheduler's strict
//! `coin < ratio`, making the two implementations agree deterministically
//! instead of merely almost surely.
//!
//! Biases never appear explicitly: every affine offset is synthesized
//! from the structurally constant token slots (the order slot holding
//! `2^i` and the tail slot holding `2^n`), so a layer really is just its
//! `Q/K/V` or `W₁/W₂` matrices.
//!
//! [`nctf_rollout`] runs the full controller — blocks, stationarity
//! tests, restarts via the test matrix — using the attention pipeline for
//! all scheduling decisions and a cloned base learner for the acting
//! window, and emits the same per-round records as
//! [`crate::master::master_run`]. Because the attention stages read only
//! carrier and constant slots, the rollout evaluates them once per block
//! on the block's carrier tokens; re-running them per round would produce
//! identical gates.

use nalgebra::{DMatrix, DVector};

use crate::base_algs::Policy;
use crate::envs::LinearBanditEnv;
use crate::error::Error;
use crate::master::{select_from, test1_fails, test2_fails, RoundLog, TestConfig};
use crate::rng::{SeedDerivation, StreamKind};
use crate::scheduler::{sigma2, Malg, Rho, ScheduleMask};
use crate::Result;

/// Default tie-break tilt added to every coin by the CDF layer.
pub const DEFAULT_COIN_TILT: f64 = 4e-4;

/// Slot positions inside an augmented token.
///
/// A token is `𝔥_t ∈ R^D` with `D = (d+5)(n+1)+5`: for each order
/// `i ∈ {0..n}` a block `[x (d slots); 2^i; window reward sum; rand;
/// prefix aux; r̃]`, followed by the tail `[2^n; t; Σr; Σr̃; U]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    /// Context dimension `d` (first coordinate carries the carrier).
    pub dim: usize,
    /// Top order `n` of the block this layout serves.
    pub top: u32,
}

impl TokenLayout {
    /// Layout for context dimension `dim` and top order `top`.
    pub fn new(dim: usize, top: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("token layout needs dim >= 1"));
        }
        if top > 20 {
            return Err(Error::config(format!("top order {top} too large for token layout")));
        }
        Ok(TokenLayout { dim, top })
    }

    /// Width of one per-order block.
    pub fn order_width(&self) -> usize {
        self.dim + 5
    }

    /// Total token dimension `D`.
    pub fn token_dim(&self) -> usize {
        self.order_width() * (self.top as usize + 1) + 5
    }

    /// First slot of order `i`'s block.
    pub fn order_base(&self, i: u32) -> usize {
        debug_assert!(i <= self.top);
        self.order_width() * i as usize
    }

    /// Slot of order `i`'s first context coordinate (the carrier).
    pub fn carrier_slot(&self, i: u32) -> usize {
        self.order_base(i)
    }

    /// Slot holding the constant `2^i`.
    pub fn order_slot(&self, i: u32) -> usize {
        self.order_base(i) + self.dim
    }

    /// Slot holding order `i`'s window reward sum.
    pub fn winsum_slot(&self, i: u32) -> usize {
        self.order_base(i) + self.dim + 1
    }

    /// Slot holding order `i`'s coin / Bernoulli gate.
    pub fn rand_slot(&self, i: u32) -> usize {
        self.order_base(i) + self.dim + 2
    }

    /// Slot holding order `i`'s prefix auxiliary sum.
    pub fn prefix_slot(&self, i: u32) -> usize {
        self.order_base(i) + self.dim + 3
    }

    /// Slot holding order `i`'s performance estimate `r̃`.
    pub fn r_tilde_slot(&self, i: u32) -> usize {
        self.order_base(i) + self.dim + 4
    }

    /// Tail slot holding the constant `2^n`.
    pub fn pow_slot(&self) -> usize {
        self.order_width() * (self.top as usize + 1)
    }

    /// Tail slot holding the (block-local) round index.
    pub fn t_slot(&self) -> usize {
        self.pow_slot() + 1
    }

    /// Tail slot holding the running reward sum.
    pub fn sum_r_slot(&self) -> usize {
        self.pow_slot() + 2
    }

    /// Tail slot holding the running `r̃` sum.
    pub fn sum_rt_slot(&self) -> usize {
        self.pow_slot() + 3
    }

    /// Tail slot holding the running minimum `U`.
    pub fn u_slot(&self) -> usize {
        self.pow_slot() + 4
    }

    /// A token with the structural constants (`2^i` per order, `2^n`)
    /// set and everything else zero.
    pub fn new_token(&self) -> DVector<f64> {
        let mut token = DVector::zeros(self.token_dim());
        for i in 0..=self.top {
            token[self.order_slot(i)] = (1u64 << i) as f64;
        }
        token[self.pow_slot()] = (1u64 << self.top) as f64;
        token
    }
}

/// Sharp ReLU indicator `σ(kx) − σ(kx−1)`: 0 for `x ≤ 0`, `kx` on the
/// ramp `(0, 1/k]`, and 1 beyond it.
pub fn relu_indicator(x: f64, k: f64) -> f64 {
    debug_assert!(k > 0.0);
    (k * x).max(0.0) - (k * x - 1.0).max(0.0)
}

/// Normalization mode of a ReLU attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttnNorm {
    /// Every query attends to every token, scaled by a fixed `1/denom`
    /// (the sequence-level CDF layer uses `denom = 2^n`).
    Uniform(f64),
    /// Causal: query `i` attends to tokens `j ≤ i`, scaled by `1/i`
    /// (1-indexed positions).
    Prefix,
}

/// One attention head's parameter matrices.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    /// Query map.
    pub q: DMatrix<f64>,
    /// Key map.
    pub k: DMatrix<f64>,
    /// Value map.
    pub v: DMatrix<f64>,
}

/// A multi-head ReLU attention layer.
#[derive(Debug, Clone)]
pub struct AttentionLayerParams {
    /// The heads.
    pub heads: Vec<AttentionHead>,
    /// Prefix (causal) or fixed-denominator normalization.
    pub norm: AttnNorm,
}

/// Applies the layer in place: `h_i += scale_i · Σ_j Σ_m
/// σ(⟨Q_m h_i, K_m h_j⟩) · V_m h_j`, reading all of `Q/K/V` from the
/// pre-update tokens.
pub fn attention_apply(params: &AttentionLayerParams, tokens: &mut [DVector<f64>]) {
    let snapshot: Vec<DVector<f64>> = tokens.to_vec();
    let queries: Vec<Vec<DVector<f64>>> = params
        .heads
        .iter()
        .map(|h| snapshot.iter().map(|t| &h.q * t).collect())
        .collect();
    let keys: Vec<Vec<DVector<f64>>> = params
        .heads
        .iter()
        .map(|h| snapshot.iter().map(|t| &h.k * t).collect())
        .collect();
    let values: Vec<Vec<DVector<f64>>> = params
        .heads
        .iter()
        .map(|h| snapshot.iter().map(|t| &h.v * t).collect())
        .collect();
    for (i, token) in tokens.iter_mut().enumerate() {
        let (limit, scale) = match params.norm {
            AttnNorm::Uniform(denom) => (snapshot.len(), 1.0 / denom),
            AttnNorm::Prefix => (i + 1, 1.0 / (i + 1) as f64),
        };
        let mut acc = DVector::zeros(token.len());
        for (m, _) in params.heads.iter().enumerate() {
            for j in 0..limit {
                let score = queries[m][i].dot(&keys[m][j]);
                if score > 0.0 {
                    acc.axpy(score, &values[m][j], 1.0);
                }
            }
        }
        token.axpy(scale, &acc, 1.0);
    }
}

/// One residual ReLU MLP sublayer: `h += W₂·σ(W₁·h)`.
#[derive(Debug, Clone)]
pub struct MlpLayerParams {
    /// Hidden map, `D′×D`.
    pub w1: DMatrix<f64>,
    /// Output map, `D×D′`.
    pub w2: DMatrix<f64>,
}

/// Applies the sublayer to one token in place.
pub fn mlp_apply(params: &MlpLayerParams, token: &mut DVector<f64>) {
    let mut hidden = &params.w1 * &*token;
    hidden.apply(|x| *x = x.max(0.0));
    token.gemv(1.0, &params.w2, &hidden, 1.0);
}

/// Builds the CDF attention layer: per order, a head pair realizing
/// `relu_indicator(z_query − z_key, k)` summed over all keys with `1/2^n`
/// normalization, written into the order's rand slot — plus, when
/// `tilt > 0`, one always-on head adding the constant tilt to every rand
/// slot. Sharpness is split as `√k` across `Q` and `K`.
pub fn build_cdf_attention(layout: &TokenLayout, k: f64, tilt: f64) -> Result<AttentionLayerParams> {
    if k < 1.0 {
        return Err(Error::config(format!("cdf sharpness must be >= 1, got {k}")));
    }
    let d = layout.token_dim();
    let pow = (1u64 << layout.top) as f64;
    let sqrt_k = k.sqrt();
    let mut heads = Vec::new();
    for i in 0..=layout.top {
        let z = layout.carrier_slot(i);
        let rand = layout.rand_slot(i);
        // Head pair: score₁ = k(z_q − z_j), score₂ = k(z_q − z_j) − 1.
        for (bias, sign) in [(0.0, 1.0), (-1.0, -1.0)] {
            let mut q = DMatrix::zeros(d, d);
            let mut km = DMatrix::zeros(d, d);
            let mut v = DMatrix::zeros(d, d);
            // Component 0: (√k·z_q)·(√k·1).
            q[(0, z)] = sqrt_k;
            km[(0, layout.pow_slot())] = sqrt_k / pow;
            // Component 1: (−√k·1)·(√k·z_j).
            q[(1, layout.pow_slot())] = -sqrt_k / pow;
            km[(1, z)] = sqrt_k;
            // Component 2: bias·1.
            q[(2, layout.pow_slot())] = bias / pow;
            km[(2, layout.pow_slot())] = 1.0 / pow;
            v[(rand, layout.pow_slot())] = sign / pow;
            heads.push(AttentionHead { q, k: km, v });
        }
    }
    if tilt > 0.0 {
        // Always-on head: score 1, value tilt into every rand slot.
        let mut q = DMatrix::zeros(d, d);
        let mut km = DMatrix::zeros(d, d);
        let mut v = DMatrix::zeros(d, d);
        q[(0, layout.pow_slot())] = 1.0 / pow;
        km[(0, layout.pow_slot())] = 1.0 / pow;
        for i in 0..=layout.top {
            v[(layout.rand_slot(i), layout.pow_slot())] = tilt / pow;
        }
        heads.push(AttentionHead { q, k: km, v });
    }
    Ok(AttentionLayerParams { heads, norm: AttnNorm::Uniform(pow) })
}

/// Runs the raw (untilted) CDF layer over `tokens` and returns each
/// token's order-0 coin: the empirical CDF value of its carrier among
/// all carriers, `(1/2^n)·Σ_j relu_indicator(z_i − z_j, k)`.
pub fn cdf_attention(tokens: &mut [DVector<f64>], layout: &TokenLayout, k: f64) -> Result<Vec<f64>> {
    let expected = 1usize << layout.top;
    if tokens.len() != expected {
        return Err(Error::domain(format!(
            "cdf attention expects {expected} tokens, got {}",
            tokens.len()
        )));
    }
    let layer = build_cdf_attention(layout, k, 0.0)?;
    attention_apply(&layer, tokens);
    Ok(tokens.iter().map(|t| t[layout.rand_slot(0)]).collect())
}

/// The Bernoulli-gate MLP: two residual sublayers plus its error band.
#[derive(Debug, Clone)]
pub struct BernoulliMlp {
    /// The layout the matrices were built for.
    pub layout: TokenLayout,
    /// Sublayer computing the product margin `ρ(2^n) − rand·ρ(2^i)`.
    pub sub1: MlpLayerParams,
    /// Sublayer applying the sharp indicator to the margin.
    pub sub2: MlpLayerParams,
    /// Indicator sharpness `k₂`.
    pub k2: f64,
    /// Margin band inside which the gate may sit between 0 and 1:
    /// product grid error plus the `1/k₂` ramp.
    pub band: f64,
}

/// Builds the gate MLP. `grid_eps` budgets the product-approximation
/// error: the squares-identity grids use knot spacing `2√grid_eps`, so
/// the realized product error is at most `grid_eps/2`.
pub fn build_bernoulli_mlp(layout: &TokenLayout, k2: f64, grid_eps: f64) -> Result<BernoulliMlp> {
    if k2 < 1.0 {
        return Err(Error::config(format!("bernoulli sharpness must be >= 1, got {k2}")));
    }
    if !(grid_eps > 0.0 && grid_eps <= 0.25) {
        return Err(Error::config(format!("grid eps must lie in (0, 0.25], got {grid_eps}")));
    }
    let delta = 2.0 * grid_eps.sqrt();
    let knots = (2.0 / delta).ceil() as usize;
    let d = layout.token_dim();
    let pow = (1u64 << layout.top) as f64;
    let orders = layout.top as usize + 1;

    // Sublayer 1: per order, margin := ρn − (PL(s²) − PL(e²))/4 with
    // s = rand + ρi, e = rand − ρi, written over the winsum slot (which
    // holds the stashed ρ(2^i)); the prefix slot (stashed ρ(2^n)) is
    // zeroed. Hidden units per order: one constant, the two stash reads,
    // and the two knot grids.
    let width1 = orders * (3 + 2 * knots);
    let mut w1a = DMatrix::zeros(width1, d);
    let mut w2a = DMatrix::zeros(d, width1);
    let mut row = 0;
    for i in 0..=layout.top {
        let rand = layout.rand_slot(i);
        let winsum = layout.winsum_slot(i);
        let prefix = layout.prefix_slot(i);
        // u_const = σ(2^n/2^n) = 1.
        w1a[(row, layout.pow_slot())] = 1.0 / pow;
        let u_const = row;
        row += 1;
        // u_rho_i = σ(winsum) = ρ(2^i), u_rho_n = σ(prefix) = ρ(2^n).
        w1a[(row, winsum)] = 1.0;
        let u_rho_i = row;
        row += 1;
        w1a[(row, prefix)] = 1.0;
        let u_rho_n = row;
        row += 1;
        // Margin = −ρi + ρn − PL(s²)/4 + PL(e²)/4 over the winsum slot.
        w2a[(winsum, u_rho_i)] = -1.0;
        w2a[(winsum, u_rho_n)] = 1.0;
        // PL of t² on [0, 2] from knot 0: slope increments.
        for j in 0..knots {
            let t_j = j as f64 * delta;
            w1a[(row, rand)] = 1.0;
            w1a[(row, winsum)] = 1.0;
            w1a[(row, layout.pow_slot())] = -t_j / pow;
            let c = if j == 0 { delta } else { 2.0 * delta };
            w2a[(winsum, row)] = -c / 4.0;
            row += 1;
        }
        // PL of t² on [−1, 1] from knot −1: value 1 at the left end plus
        // slope increments.
        w2a[(winsum, u_const)] = 1.0 / 4.0;
        for j in 0..knots {
            let t_j = -1.0 + j as f64 * delta;
            w1a[(row, rand)] = 1.0;
            w1a[(row, winsum)] = -1.0;
            w1a[(row, layout.pow_slot())] = -t_j / pow;
            let c = if j == 0 { -2.0 + delta } else { 2.0 * delta };
            w2a[(winsum, row)] = c / 4.0;
            row += 1;
        }
        // Zero the ρ(2^n) stash.
        w2a[(prefix, u_rho_n)] = -1.0;
    }
    debug_assert_eq!(row, width1);

    // Sublayer 2: per order, gate := σ(k₂·m) − σ(k₂·m − 1) into the rand
    // slot (erasing the coin), and the margin slot is zeroed via a ± pair.
    // Hidden-unit order matters for bitwise saturation: the output gemv
    // accumulates into the token row by row, so the coin-erase unit comes
    // first (rand − rand = 0 exactly), then the ramp pair, whose huge
    // pre-activations differ by an exactly representable 1 and cancel to
    // exactly 1.0. Any other order mixes the O(k₂) terms with the O(1)
    // coin and leaves ulp-scale residue on the saturated gate.
    let width2 = orders * 5;
    let mut w1b = DMatrix::zeros(width2, d);
    let mut w2b = DMatrix::zeros(d, width2);
    let mut row = 0;
    for i in 0..=layout.top {
        let rand = layout.rand_slot(i);
        let winsum = layout.winsum_slot(i);
        w1b[(row, rand)] = 1.0;
        w2b[(rand, row)] = -1.0;
        row += 1;
        w1b[(row, winsum)] = k2;
        w2b[(rand, row)] = 1.0;
        row += 1;
        w1b[(row, winsum)] = k2;
        w1b[(row, layout.pow_slot())] = -1.0 / pow;
        w2b[(rand, row)] = -1.0;
        row += 1;
        w1b[(row, winsum)] = 1.0;
        w2b[(winsum, row)] = -1.0;
        row += 1;
        w1b[(row, winsum)] = -1.0;
        w2b[(winsum, row)] = 1.0;
        row += 1;
    }
    debug_assert_eq!(row, width2);

    // Per-square PL error is δ²/4; the squares identity divides the sum
    // of both by 4.
    let band = delta * delta / 8.0 + 1.0 / k2;
    Ok(BernoulliMlp {
        layout: *layout,
        sub1: MlpLayerParams { w1: w1a, w2: w2a },
        sub2: MlpLayerParams { w1: w1b, w2: w2b },
        k2,
        band,
    })
}

/// Writes the scheduling rates into their stash slots: `ρ(2^i)` into
/// order `i`'s winsum slot and `ρ(2^n)` into its prefix slot.
pub fn stash_rho(token: &mut DVector<f64>, layout: &TokenLayout, rho: &Rho) {
    let rho_n = rho.eval(1u64 << layout.top);
    for i in 0..=layout.top {
        token[layout.winsum_slot(i)] = rho.eval(1u64 << i);
        token[layout.prefix_slot(i)] = rho_n;
    }
}

/// Applies the gate MLP to one token whose rand slots hold coins and
/// whose winsum/prefix slots hold the stashed rates (see [`stash_rho`]).
/// Returns the per-order gate values now sitting in the rand slots; the
/// stash slots come back zeroed. Inputs outside `[0,1]` are rejected.
pub fn bernoulli_mask_mlp(mlp: &BernoulliMlp, token: &mut DVector<f64>) -> Result<Vec<f64>> {
    let layout = &mlp.layout;
    for i in 0..=layout.top {
        for (name, slot) in [
            ("rand", layout.rand_slot(i)),
            ("rho(2^i) stash", layout.winsum_slot(i)),
            ("rho(2^n) stash", layout.prefix_slot(i)),
        ] {
            let v = token[slot];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!(
                    "bernoulli mask input {name} for order {i} is {v}, outside [0,1]"
                )));
            }
        }
    }
    mlp_apply(&mlp.sub1, token);
    mlp_apply(&mlp.sub2, token);
    Ok((0..=layout.top).map(|i| token[layout.rand_slot(i)]).collect())
}

/// Selection matrix onto order `i`'s slot block, negated (the value
/// extractor used by the gating attentions: adding `−𝟙·E_i·h` through
/// the residual zeroes the copy).
fn negated_copy_extractor(layout: &TokenLayout, i: u32) -> DMatrix<f64> {
    let d = layout.token_dim();
    let mut v = DMatrix::zeros(d, d);
    let base = layout.order_base(i);
    for s in base..base + layout.order_width() {
        v[(s, s)] = -1.0;
    }
    v
}

/// Builds the block-mask attention: per order, a head pair whose score
/// at the diagonal is `t·(2 − 4·B_i)` (and strictly negative off it), so
/// after the `1/t` normalization the pair contributes
/// `−𝟙[B_i < ~0.5]·(copy i)` exactly — gates ≥ 0.5 keep the copy, gates
/// ≤ 0.25 zero it, with the indicator ramp in between. The large
/// off-diagonal suppressor `C = 2^{n+1}+1` is split as `√C` across `Q`
/// and `K`.
pub fn build_block_mask_attention(layout: &TokenLayout) -> AttentionLayerParams {
    let d = layout.token_dim();
    let pow = (1u64 << layout.top) as f64;
    let c_big = 2.0 * pow + 1.0;
    let sc = c_big.sqrt();
    let mut heads = Vec::new();
    for i in 0..=layout.top {
        let rand = layout.rand_slot(i);
        for second in [false, true] {
            let mut q = DMatrix::zeros(d, d);
            let mut k = DMatrix::zeros(d, d);
            // Component 0: 2·t_q·1.
            q[(0, layout.t_slot())] = 2.0 / sc;
            k[(0, layout.pow_slot())] = sc / pow;
            // Component 1: −4·t_q·B_{i,key}.
            q[(1, layout.t_slot())] = -4.0 / sc;
            k[(1, rand)] = sc;
            // Components 2–3: −C·(t_q − t_key).
            q[(2, layout.t_slot())] = -sc;
            k[(2, layout.pow_slot())] = sc / pow;
            q[(3, layout.pow_slot())] = sc / pow;
            k[(3, layout.t_slot())] = sc;
            if second {
                // Extra −t_key turns σ(z) into σ(z − t), capping the ramp.
                q[(4, layout.pow_slot())] = -1.0 / pow;
                k[(4, layout.t_slot())] = 1.0;
            }
            let v = if second {
                -negated_copy_extractor(layout, i)
            } else {
                negated_copy_extractor(layout, i)
            };
            heads.push(AttentionHead { q, k, v });
        }
    }
    AttentionLayerParams { heads, norm: AttnNorm::Prefix }
}

/// Applies the block mask to a token sequence whose rand slots hold the
/// gates and whose `t` slots hold 1-based positions.
pub fn block_mask_attention(tokens: &mut [DVector<f64>], layout: &TokenLayout) -> Result<()> {
    check_positions(tokens, layout)?;
    let layer = build_block_mask_attention(layout);
    attention_apply(&layer, tokens);
    Ok(())
}

/// Builds the σ2 attention: per order, a head pair zeroing the copy when
/// any lower order's (gated) marker is nonzero. Markers are the order
/// slots normalized by `1/2^p`, so the lower-order occupancy sum
/// `Σ_{p<i} marker_p` is 0 or ≥ 1; the score at the diagonal is
/// `a·t·(c₀·Σ − ε₀)` with `a = 2/(c₀ − ε₀)`, which the capped ramp turns
/// into an exact 0/1 gate.
pub fn build_sigma2_attention(
    layout: &TokenLayout,
    c0: f64,
    eps0: f64,
) -> Result<AttentionLayerParams> {
    if !(eps0 > 0.0 && c0 > eps0) {
        return Err(Error::config(format!(
            "sigma2 separation requires c0 > eps0 > 0 (got c0 = {c0}, eps0 = {eps0}); \
             with unit markers eps0 - c0 must be negative"
        )));
    }
    let d = layout.token_dim();
    let pow = (1u64 << layout.top) as f64;
    let a = 2.0 / (c0 - eps0);
    let c_big = a * c0 * (layout.top as f64 + 1.0) * pow + 1.0;
    let sc = c_big.sqrt();
    let sac = (a * c0).sqrt();
    let sae = (a * eps0).sqrt();
    let mut heads = Vec::new();
    for i in 0..=layout.top {
        for second in [false, true] {
            let mut q = DMatrix::zeros(d, d);
            let mut k = DMatrix::zeros(d, d);
            // Component 0: a·c₀·(Σ_{p<i} order_p/2^p)·t_key.
            for p in 0..i {
                q[(0, layout.order_slot(p))] = sac / (1u64 << p) as f64;
            }
            k[(0, layout.t_slot())] = sac;
            // Component 1: −a·ε₀·t_key.
            q[(1, layout.pow_slot())] = -sae / pow;
            k[(1, layout.t_slot())] = sae;
            // Components 2–3: −C·(t_q − t_key).
            q[(2, layout.t_slot())] = -sc;
            k[(2, layout.pow_slot())] = sc / pow;
            q[(3, layout.pow_slot())] = sc / pow;
            k[(3, layout.t_slot())] = sc;
            if second {
                q[(4, layout.pow_slot())] = -1.0 / pow;
                k[(4, layout.t_slot())] = 1.0;
            }
            let v = if second {
                -negated_copy_extractor(layout, i)
            } else {
                negated_copy_extractor(layout, i)
            };
            heads.push(AttentionHead { q, k, v });
        }
    }
    Ok(AttentionLayerParams { heads, norm: AttnNorm::Prefix })
}

/// Applies σ2 selection to a block-masked token sequence.
pub fn sigma2_attention(
    tokens: &mut [DVector<f64>],
    layout: &TokenLayout,
    c0: f64,
    eps0: f64,
) -> Result<()> {
    check_positions(tokens, layout)?;
    let layer = build_sigma2_attention(layout, c0, eps0)?;
    attention_apply(&layer, tokens);
    Ok(())
}

fn check_positions(tokens: &[DVector<f64>], layout: &TokenLayout) -> Result<()> {
    let t_slot = layout.t_slot();
    for (idx, token) in tokens.iter().enumerate() {
        if token[t_slot] != (idx + 1) as f64 {
            return Err(Error::domain(format!(
                "token {idx} carries position {} but sits at position {}",
                token[t_slot],
                idx + 1
            )));
        }
    }
    Ok(())
}

/// The diagonal test matrix: identity when `test` passes; on failure the
/// history slots (winsum, rand, prefix, r̃ per order; Σr, Σr̃, U in the
/// tail) are zeroed while contexts, order constants, `2^n`, and `t`
/// survive.
pub fn build_test_matrix(layout: &TokenLayout, test: bool) -> DMatrix<f64> {
    let d = layout.token_dim();
    let mut m = DMatrix::identity(d, d);
    if !test {
        for i in 0..=layout.top {
            for slot in [
                layout.winsum_slot(i),
                layout.rand_slot(i),
                layout.prefix_slot(i),
                layout.r_tilde_slot(i),
            ] {
                m[(slot, slot)] = 0.0;
            }
        }
        for slot in [layout.sum_r_slot(), layout.sum_rt_slot(), layout.u_slot()] {
            m[(slot, slot)] = 0.0;
        }
    }
    m
}

/// Applies the test matrix to a token in place.
pub fn apply_test_matrix(token: &mut DVector<f64>, layout: &TokenLayout, test: bool) {
    if !test {
        for i in 0..=layout.top {
            token[layout.winsum_slot(i)] = 0.0;
            token[layout.rand_slot(i)] = 0.0;
            token[layout.prefix_slot(i)] = 0.0;
            token[layout.r_tilde_slot(i)] = 0.0;
        }
        token[layout.sum_r_slot()] = 0.0;
        token[layout.sum_rt_slot()] = 0.0;
        token[layout.u_slot()] = 0.0;
    }
}

/// Softmax readout: the action distribution induced by readout matrix
/// `readout` (one row per action) applied to the final token.
pub fn policy_softmax(readout: &DMatrix<f64>, token: &DVector<f64>) -> Vec<f64> {
    let logits = readout * token;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// One transformer layer for norm accounting: an optional attention
/// sublayer and an optional MLP sublayer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    /// Attention sublayer, if present.
    pub attention: Option<AttentionLayerParams>,
    /// MLP sublayer, if present.
    pub mlp: Option<MlpLayerParams>,
}

/// Operator (spectral) norm via power iteration on `AᵀA`, to `1e-8`
/// relative tolerance.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut rng = crate::rng::SeedDerivation::new(0x6f70_6e6f_726d).stream(StreamKind::Bench, 0);
    let mut v = DVector::from_fn(cols, |_, _| crate::rng::unit_uniform(&mut rng) - 0.5);
    if v.norm() == 0.0 {
        v[0] = 1.0;
    }
    v /= v.norm();
    let mut lambda = 0.0f64;
    for _ in 0..10_000 {
        let w = m.tr_mul(&(m * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-8 * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// The transformer parameter norm: the maximum over layers of
/// `max_m max(‖Q_m‖, ‖K_m‖) + Σ_m ‖V_m‖ + ‖W₁‖ + ‖W₂‖`.
pub fn theta_norm(layers: &[TransformerLayer]) -> f64 {
    layers
        .iter()
        .map(|layer| {
            let mut total = 0.0;
            if let Some(attn) = &layer.attention {
                let mut qk_max = 0.0f64;
                let mut v_sum = 0.0;
                for head in &attn.heads {
                    qk_max = qk_max.max(operator_norm(&head.q)).max(operator_norm(&head.k));
                    v_sum += operator_norm(&head.v);
                }
                total += qk_max + v_sum;
            }
            if let Some(mlp) = &layer.mlp {
                total += operator_norm(&mlp.w1) + operator_norm(&mlp.w2);
            }
            total
        })
        .fold(0.0, f64::max)
}

/// The assembled scheduling network: all four stages plus the knobs they
/// were built with.
#[derive(Debug, Clone)]
pub struct SchedulerNet {
    /// Token layout.
    pub layout: TokenLayout,
    /// Scheduling rate (stashed into tokens for the gate MLP).
    pub rho: Rho,
    /// CDF layer (with tie-break tilt).
    pub cdf: AttentionLayerParams,
    /// Gate MLP.
    pub bernoulli: BernoulliMlp,
    /// Block-mask layer.
    pub block_mask: AttentionLayerParams,
    /// σ2 selection layer.
    pub sigma2: AttentionLayerParams,
    /// Coin tilt the CDF layer applies.
    pub tilt: f64,
}

impl SchedulerNet {
    /// The net as a layer stack, for norm accounting.
    pub fn layers(&self) -> Vec<TransformerLayer> {
        vec![
            TransformerLayer {
                attention: Some(self.cdf.clone()),
                mlp: Some(self.bernoulli.sub1.clone()),
            },
            TransformerLayer { attention: None, mlp: Some(self.bernoulli.sub2.clone()) },
            TransformerLayer { attention: Some(self.block_mask.clone()), mlp: None },
            TransformerLayer { attention: Some(self.sigma2.clone()), mlp: None },
        ]
    }
}

/// Builds the four-stage scheduling network.
pub fn build_scheduler_net(
    layout: TokenLayout,
    rho: Rho,
    k: f64,
    k2: f64,
    grid_eps: f64,
    c0: f64,
    eps0: f64,
    tilt: f64,
) -> Result<SchedulerNet> {
    if !(0.0..0.01).contains(&tilt) {
        return Err(Error::config(format!("coin tilt must lie in [0, 0.01), got {tilt}")));
    }
    Ok(SchedulerNet {
        layout,
        rho,
        cdf: build_cdf_attention(&layout, k, tilt)?,
        bernoulli: build_bernoulli_mlp(&layout, k2, grid_eps)?,
        block_mask: build_block_mask_attention(&layout),
        sigma2: build_sigma2_attention(&layout, c0, eps0)?,
        tilt,
    })
}

/// The scheduling decisions extracted from a pipeline pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecisions {
    /// Per-order window schedules (gates thresholded at 0.5).
    pub masks: Vec<ScheduleMask>,
    /// Acting order per round.
    pub active: Vec<u32>,
}

/// Runs the four stages over a block's tokens in place and extracts the
/// scheduling decisions. Tokens must carry carriers (window-start
/// carrier replicated per order in each copy's first context slot),
/// structural constants, and 1-based positions; rand/winsum/prefix slots
/// must be clear — the pipeline writes coins, stashes rates, gates, and
/// finally zeroes every copy except the acting one.
pub fn run_gate_pipeline(
    net: &SchedulerNet,
    tokens: &mut [DVector<f64>],
) -> Result<GateDecisions> {
    let layout = &net.layout;
    check_positions(tokens, layout)?;
    if tokens.is_empty() || tokens.len() > (1usize << layout.top) {
        return Err(Error::domain(format!(
            "gate pipeline expects 1..=2^{} tokens, got {}",
            layout.top,
            tokens.len()
        )));
    }
    attention_apply(&net.cdf, tokens);
    for token in tokens.iter_mut() {
        stash_rho(token, layout, &net.rho);
        bernoulli_mask_mlp(&net.bernoulli, token)?;
    }
    // Window schedules, read off the gates at window starts.
    let mut masks = Vec::with_capacity(layout.top as usize + 1);
    for i in 0..=layout.top {
        let window = 1u64 << i;
        let count = ((tokens.len() as u64 + window - 1) / window) as usize;
        let mut scheduled = Vec::with_capacity(count);
        for idx in 0..count {
            let start = idx * window as usize;
            scheduled.push(tokens[start][layout.rand_slot(i)] > 0.5);
        }
        masks.push(ScheduleMask {
            window,
            prob: net.rho.schedule_prob(i, layout.top),
            scheduled,
        });
    }
    attention_apply(&net.block_mask, tokens);
    attention_apply(&net.sigma2, tokens);
    let mut active = Vec::with_capacity(tokens.len());
    for (idx, token) in tokens.iter().enumerate() {
        let winner = (0..=layout.top)
            .find(|&i| token[layout.order_slot(i)] > 0.5)
            .ok_or_else(|| {
                Error::Contract(format!("no surviving copy at block round {}", idx + 1))
            })?;
        debug_assert_eq!(winner, sigma2(&masks, idx as u64 + 1)?);
        active.push(winner);
    }
    Ok(GateDecisions { masks, active })
}

/// The coins the CDF layer produces, computed directly: for each order
/// and window, the window-start carrier's `relu_indicator` CDF over all
/// of the block's (replicated) carriers, plus the tilt. Used as the
/// shared-randomness reference when comparing the pipeline against the
/// direct scheduler.
pub fn reference_coins(
    carriers: &[f64],
    top: u32,
    k: f64,
    tilt: f64,
) -> Vec<Vec<f64>> {
    let pow = 1usize << top;
    let len = carriers.len();
    let mut out = Vec::with_capacity(top as usize + 1);
    for i in 0..=top {
        let window = 1usize << i;
        let count = (len + window - 1) / window;
        let mut coins = Vec::with_capacity(count);
        for idx in 0..count {
            let zq = carriers[idx * window];
            // Mirror the attention's accumulation order: positive head
            // over all tokens, then negative head, then the tilt head.
            let mut acc = 0.0;
            for j in 0..len {
                let zj = carriers[(j / window) * window];
                acc += (k * (zq - zj)).max(0.0);
            }
            for j in 0..len {
                let zj = carriers[(j / window) * window];
                acc -= (k * (zq - zj) - 1.0).max(0.0);
            }
            for _ in 0..len {
                acc += tilt;
            }
            coins.push(acc / pow as f64);
        }
        out.push(coins);
    }
    out
}

/// Configuration of the attention-realized controller run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NctfConfig {
    /// Stationarity-test thresholds (shared with the direct controller).
    pub tests: TestConfig,
    /// CDF indicator sharpness.
    pub k: f64,
    /// Gate-MLP indicator sharpness.
    pub k2: f64,
    /// Product-grid error budget.
    pub grid_eps: f64,
    /// σ2 occupancy weight.
    pub c0: f64,
    /// σ2 occupancy threshold.
    pub eps0: f64,
    /// Coin tie-break tilt.
    pub tilt: f64,
    /// Skip the stationarity tests (every round's TEST passes).
    pub force_tests_pass: bool,
    /// Debug hook: force a restart at the end of this global round.
    pub force_restart_at: Option<u64>,
}

impl NctfConfig {
    /// Default knobs (`k = k₂ = 10⁶`, `grid_eps = 10⁻⁵`, `c₀ = 2`,
    /// `ε₀ = 0.5`) around the given test thresholds.
    pub fn new(tests: TestConfig) -> Self {
        NctfConfig {
            tests,
            k: 1e6,
            k2: 1e6,
            grid_eps: 1e-5,
            c0: 2.0,
            eps0: 0.5,
            tilt: DEFAULT_COIN_TILT,
            force_tests_pass: false,
            force_restart_at: None,
        }
    }
}

/// Runs the attention-realized controller over the environment's
/// horizon. Identical in structure to [`crate::master::master_run`], but
/// every scheduling decision comes from the gate pipeline operating on
/// the block's carrier tokens, and the interaction history is maintained
/// as augmented tokens to which the test matrix is applied on restarts.
pub fn nctf_rollout<P: Policy + Clone>(
    env: &LinearBanditEnv,
    seeds: &SeedDerivation,
    cfg: &NctfConfig,
    template: &P,
) -> Result<Vec<RoundLog>> {
    nctf_rollout_from(env, seeds, cfg, template, 1)
}

/// [`nctf_rollout`] started at global round `start`, as the continuation
/// of a run that restarted at `start − 1`.
pub fn nctf_rollout_from<P: Policy + Clone>(
    env: &LinearBanditEnv,
    seeds: &SeedDerivation,
    cfg: &NctfConfig,
    template: &P,
    start: u64,
) -> Result<Vec<RoundLog>> {
    let horizon = env.spec().horizon;
    if start == 0 || start > horizon {
        return Err(Error::domain(format!(
            "start round {start} outside horizon 1..={horizon}"
        )));
    }
    if cfg.tests.horizon != horizon {
        return Err(Error::config(format!(
            "test config horizon {} does not match environment horizon {horizon}",
            cfg.tests.horizon
        )));
    }
    let mut logs = Vec::with_capacity((horizon - start + 1) as usize);
    let mut t = start;
    'epoch: while t <= horizon {
        let mut top = 0u32;
        while t <= horizon {
            if run_nctf_block(env, seeds, cfg, template, top, &mut t, &mut logs)? {
                continue 'epoch;
            }
            top += 1;
        }
    }
    Ok(logs)
}

fn run_nctf_block<P: Policy + Clone>(
    env: &LinearBanditEnv,
    seeds: &SeedDerivation,
    cfg: &NctfConfig,
    template: &P,
    top: u32,
    t: &mut u64,
    logs: &mut Vec<RoundLog>,
) -> Result<bool> {
    let horizon = env.spec().horizon;
    let block_start = *t;
    let block_len = (1u64 << top).min(horizon - block_start + 1);
    let layout = TokenLayout::new(env.spec().dim, top)?;
    let net = build_scheduler_net(
        layout,
        cfg.tests.rho,
        cfg.k,
        cfg.k2,
        cfg.grid_eps,
        cfg.c0,
        cfg.eps0,
        cfg.tilt,
    )?;

    // Carriers for the block, keyed by global round.
    let carriers: Vec<f64> = (0..block_len)
        .map(|off| {
            let mut rng = seeds.stream(StreamKind::Carrier, block_start + off);
            crate::rng::unit_uniform(&mut rng)
        })
        .collect();

    // Gate pass on the block's carrier tokens.
    let mut gate_tokens: Vec<DVector<f64>> = (0..block_len as usize)
        .map(|idx| {
            let mut token = layout.new_token();
            for i in 0..=top {
                let window = 1usize << i;
                token[layout.carrier_slot(i)] = carriers[(idx / window) * window];
            }
            token[layout.t_slot()] = (idx + 1) as f64;
            token
        })
        .collect();
    let decisions = run_gate_pipeline(&net, &mut gate_tokens)?;

    let mut malg: Malg<P> = Malg::new(decisions.masks.clone());
    let mut history: Vec<DVector<f64>> = Vec::with_capacity(block_len as usize);
    let mut u = f64::INFINITY;
    let mut sum_r_tilde = 0.0;
    let mut sum_reward = 0.0;
    for tau in 1..=block_len {
        let g = *t;
        let actions = env.draw_action_set(g)?;
        let active = malg.begin_round(tau, |_, _| {
            let mut p = template.clone();
            p.reset();
            p
        })?;
        debug_assert_eq!(active, decisions.active[(tau - 1) as usize]);
        let mut rng = seeds.stream(StreamKind::Posterior, g);
        let inst = malg.active_mut()?;
        let (dist, r_tilde) = inst.payload.act(&actions, &mut rng)?;
        if dist.len() != actions.len() {
            return Err(Error::Contract(format!(
                "policy returned {} probabilities for {} actions",
                dist.len(),
                actions.len()
            )));
        }
        let choice = select_from(&dist, crate::rng::unit_uniform(&mut rng));
        let chosen = &actions[choice];
        let reward_raw = env.sample_reward(g, chosen);
        let reward_norm = env.normalize_reward(reward_raw);
        inst.payload.update(chosen, reward_norm);
        u = u.min(r_tilde);
        sum_r_tilde += r_tilde;
        sum_reward += reward_norm;

        // Insert the round into the interaction sequence: contexts,
        // per-window reward sums, estimates, and the tail statistics.
        let mut token = layout.new_token();
        for i in 0..=top {
            let window = 1usize << i;
            let idx = (tau - 1) as usize;
            token[layout.carrier_slot(i)] = carriers[(idx / window) * window];
            for d in 1..layout.dim.min(chosen.len()) {
                token[layout.order_base(i) + d] = chosen[d];
            }
            token[layout.rand_slot(i)] =
                if decisions.masks[i as usize].is_scheduled_at(tau) { 1.0 } else { 0.0 };
        }
        token[layout.t_slot()] = tau as f64;
        token[layout.r_tilde_slot(active)] = r_tilde;
        token[layout.sum_r_slot()] = sum_reward;
        token[layout.sum_rt_slot()] = sum_r_tilde;
        token[layout.u_slot()] = u;
        history.push(token);
        for inst in malg.live() {
            let i = inst.order;
            let hist_idx = history.len() - 1;
            history[hist_idx][layout.winsum_slot(i)] = inst.reward_sum + reward_norm;
        }

        let ended = malg.end_round(tau, reward_norm);
        let tail = &history[history.len() - 1];
        let (mut test1, mut test2) = (false, false);
        if !cfg.force_tests_pass {
            for done in &ended {
                let window_len = 1u64 << done.order;
                let mean = done.reward_sum / window_len as f64;
                test1 |= test1_fails(mean, tail[layout.u_slot()], done.order, &cfg.tests);
            }
            let gap_mean =
                (tail[layout.sum_rt_slot()] - tail[layout.sum_r_slot()]) / tau as f64;
            test2 = test2_fails(gap_mean, tau, &cfg.tests);
        }
        let restart = test1 || test2 || cfg.force_restart_at == Some(g);
        logs.push(RoundLog {
            t: g,
            active_order: active,
            action: choice,
            reward_raw,
            reward_norm,
            r_tilde,
            u_t: u,
            r_star: env.optimal_reward(g, &actions),
            mean_chosen: env.mean_reward(g, chosen),
            restart,
            test1_fail: test1,
            test2_fail: test2,
        });
        *t += 1;
        if restart {
            // All historical information is erased: the test matrix
            // clears every stored token's history slots.
            for token in &mut history {
                apply_test_matrix(token, &layout, false);
            }
            return Ok(true);
        }
    }
    Ok(false)
}
