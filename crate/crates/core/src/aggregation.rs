//! Cost aggregation: compact cost encoding, the recurrent 3D-GRU update with
//! temporal/spatial attention, and disparity upsampling.
//!
//! The GRU follows the gated form
//!
//! ```text
//! x  = [conv2d(E), conv2d(d), d, F_ctx]
//! x~ = attention(x)
//! z  = sigmoid(conv3d_z([h, x~]))        r = sigmoid(conv3d_r([h, x~]))
//! q  = tanh(conv3d_q([h .* r, x~]))
//! h' = (1 - z) .* h + z .* q
//! d' = d + conv3d(h')
//! ```
//!
//! with every 3D convolution separable: a (1,3,3) spatial conv followed by a
//! (3,1,1) temporal conv. The disparity head's final layer is
//! zero-initialized so iteration zero is a no-op delta. Hidden state starts
//! as `tanh(conv(F_ctx))`, and since the update is a convex combination, all
//! entries stay inside (-1, 1).
//!
//! Temporal convex upsampling forms each high-resolution pixel as a
//! softmax-weighted combination of its 27 low-resolution neighbors across
//! three frames; the 2D convex (9 neighbors) and plain bilinear variants are
//! kept as ablation baselines.

use rand_chacha::ChaCha8Rng;

use crate::correlation::{corr_schedule, cost_channels, CostVolume};
use crate::error::{Error, Result};
use crate::model::{
    apply_conv, init_conv, init_conv_zero, AttentionMode, ModelConfig, ParamMap, UpsampleMode,
};
use crate::tensor::{Scalar, Tensor};

/// Recurrent state at one cascade stage.
#[derive(Debug, Clone)]
pub struct GruState<T: Scalar> {
    /// `[B,C_h,T,H',W']`, entries in (-1, 1).
    pub h: Tensor<T>,
    /// `[B,1,T,H',W']` disparity in feature-grid pixels.
    pub d: Tensor<T>,
    /// 1-indexed; drives the correlation schedule.
    pub iter_index: usize,
}

/// Register all aggregation parameters: the cost MLP, motion encoders,
/// attention projections, GRU gates, the disparity head, and per-stage
/// upsample heads.
pub fn init_params<T: Scalar>(params: &mut ParamMap<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let k = cost_channels(cfg.correlation, corr_schedule(1));
    let l = cfg.l_channels;
    let ch = cfg.c_hidden;
    let cx = cfg.c_gru_input();

    // cost volume MLP: K -> 2L -> L, pointwise
    init_conv(params, rng, "agg.enc.c1", &[2 * l, k, 1, 1, 1]);
    init_conv(params, rng, "agg.enc.c2", &[l, 2 * l, 1, 1, 1]);

    // motion encoders feeding x
    init_conv(params, rng, "agg.enc_e", &[cfg.c_cost_enc(), l, 1, 3, 3]);
    init_conv(params, rng, "agg.enc_d", &[cfg.c_disp_enc(), 1, 1, 3, 3]);

    match cfg.attention {
        AttentionMode::None => {}
        AttentionMode::Temporal => init_attention_block(params, rng, "agg.attn_t", cx),
        AttentionMode::TemporalSpatial => {
            init_attention_block(params, rng, "agg.attn_t", cx);
            init_attention_block(params, rng, "agg.attn_s", cx);
        }
    }
    if cfg.super_kernel {
        init_conv_zero(params, "agg.super", &[cx, cx, 1, 7, 7]);
    }

    // gates: separable 3D convs on [h, x]
    for gate in ["z", "r", "q"] {
        init_conv(params, rng, &format!("agg.{gate}.s"), &[ch, ch + cx, 1, 3, 3]);
        init_conv(params, rng, &format!("agg.{gate}.t"), &[ch, ch, 3, 1, 1]);
    }

    // hidden init from context
    init_conv(params, rng, "agg.hinit", &[ch, cfg.c_features(), 1, 1, 1]);

    // disparity head; final layer zero so the first delta is exactly zero
    init_conv(params, rng, "agg.dhead.s", &[32, ch, 1, 3, 3]);
    init_conv_zero(params, "agg.dhead.t", &[1, 32, 3, 1, 1]);

    // per-stage upsample weight heads
    if cfg.upsample != UpsampleMode::Bilinear {
        let neighbors = if cfg.upsample == UpsampleMode::TemporalConvex {
            27
        } else {
            9
        };
        let n_stages = cfg.stages.len();
        for (i, &scale) in cfg.stages.iter().enumerate() {
            init_upsample_head(params, rng, &format!("ups.s{scale}"), ch, neighbors * scale * scale);
            if i + 1 < n_stages {
                init_upsample_head(params, rng, &format!("ups.prom{scale}"), ch, neighbors * 4);
            }
        }
    }
}

fn init_attention_block<T: Scalar>(
    params: &mut ParamMap<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: usize,
) {
    for proj in ["q", "k", "v"] {
        init_conv(params, rng, &format!("{name}.{proj}"), &[c, c, 1, 1, 1]);
    }
    // zero output projection: attention starts as the identity (residual)
    init_conv_zero(params, &format!("{name}.o"), &[c, c, 1, 1, 1]);
}

fn init_upsample_head<T: Scalar>(
    params: &mut ParamMap<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_hidden: usize,
    out_channels: usize,
) {
    init_conv(params, rng, &format!("{name}.s"), &[32, c_hidden, 1, 3, 3]);
    init_conv(params, rng, &format!("{name}.t"), &[32, 32, 3, 1, 1]);
    // zero logits give uniform softmax weights at initialization
    init_conv_zero(params, &format!("{name}.m"), &[out_channels, 32, 1, 1, 1]);
}

/// Initial hidden state from context features.
pub fn init_hidden<T: Scalar>(params: &ParamMap<T>, f_ctx: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(apply_conv(params, "agg.hinit", f_ctx, &[1, 1, 1], &[0, 0, 0])?.tanh())
}

/// Pointwise two-layer MLP mapping K cost channels to L.
pub fn encode_cost<T: Scalar>(params: &ParamMap<T>, volume: &CostVolume<T>) -> Result<Tensor<T>> {
    let expected = params.get("agg.enc.c1.w")?.shape()[1];
    if volume.channels() != expected {
        return Err(Error::ShapeMismatch {
            op: "encode_cost",
            lhs: volume.values.shape().to_vec(),
            rhs: vec![expected],
        });
    }
    let h = apply_conv(params, "agg.enc.c1", &volume.values, &[1, 1, 1], &[0, 0, 0])?.relu();
    apply_conv(params, "agg.enc.c2", &h, &[1, 1, 1], &[0, 0, 0])
}

fn attention_block<T: Scalar>(
    params: &ParamMap<T>,
    name: &str,
    x: &Tensor<T>,
    temporal: bool,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let q = apply_conv(params, &format!("{name}.q"), x, &[1, 1, 1], &[0, 0, 0])?;
    let k = apply_conv(params, &format!("{name}.k"), x, &[1, 1, 1], &[0, 0, 0])?;
    let v = apply_conv(params, &format!("{name}.v"), x, &[1, 1, 1], &[0, 0, 0])?;

    // tokens: every frame position attends over T (temporal) or over H'W'
    // within its frame (spatial)
    let (perm, inv_perm, tokens, batch) = if temporal {
        ([0, 3, 4, 2, 1], [0, 4, 3, 1, 2], t, b * h * w)
    } else {
        ([0, 2, 3, 4, 1], [0, 4, 1, 2, 3], h * w, b * t)
    };
    let reshape_tokens = |t_: &Tensor<T>| -> Result<Tensor<T>> {
        t_.permute(&perm)?.reshape(&[batch, tokens, c])
    };
    let qm = reshape_tokens(&q)?;
    let km = reshape_tokens(&k)?;
    let vm = reshape_tokens(&v)?;
    let scores = qm
        .matmul(&km.permute(&[0, 2, 1])?)?
        .mul_scalar(T::from_f64(1.0 / (c as f64).sqrt()));
    let attn = scores.softmax(2)?;
    let mixed = attn.matmul(&vm)?;
    let spatial_shape = if temporal {
        [b, h, w, t, c]
    } else {
        [b, t, h, w, c]
    };
    let mixed = mixed.reshape(&spatial_shape)?.permute(&inv_perm)?;
    let out = apply_conv(params, &format!("{name}.o"), &mixed, &[1, 1, 1], &[0, 0, 0])?;
    x.add(&out)
}

/// Attention over the GRU input. `None` is the identity; the other modes add
/// a residual single-head attention, temporal first, then spatial.
pub fn attention<T: Scalar>(
    params: &ParamMap<T>,
    mode: AttentionMode,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    match mode {
        AttentionMode::None => Ok(x.clone()),
        AttentionMode::Temporal => attention_block(params, "agg.attn_t", x, true),
        AttentionMode::TemporalSpatial => {
            let y = attention_block(params, "agg.attn_t", x, true)?;
            attention_block(params, "agg.attn_s", &y, false)
        }
    }
}

fn separable_conv3<T: Scalar>(
    params: &ParamMap<T>,
    name: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = apply_conv(params, &format!("{name}.s"), x, &[1, 1, 1], &[0, 1, 1])?;
    apply_conv(params, &format!("{name}.t"), &s, &[1, 1, 1], &[1, 0, 0])
}

/// One recurrent refinement step.
pub fn gru_step<T: Scalar>(
    params: &ParamMap<T>,
    cfg: &ModelConfig,
    state: &GruState<T>,
    e_n: &Tensor<T>,
    f_ctx: &Tensor<T>,
) -> Result<GruState<T>> {
    let xe = apply_conv(params, "agg.enc_e", e_n, &[1, 1, 1], &[0, 1, 1])?.relu();
    let xd = apply_conv(params, "agg.enc_d", &state.d, &[1, 1, 1], &[0, 1, 1])?.relu();
    let x = Tensor::concat(&[xe, xd, state.d.clone(), f_ctx.clone()], 1)?;
    let mut xt = attention(params, cfg.attention, &x)?;
    if cfg.super_kernel {
        let wide = apply_conv(params, "agg.super", &xt, &[1, 1, 1], &[0, 3, 3])?;
        xt = xt.add(&wide)?;
    }

    let hx = Tensor::concat(&[state.h.clone(), xt.clone()], 1)?;
    let z = separable_conv3(params, "agg.z", &hx)?.sigmoid();
    let r = separable_conv3(params, "agg.r", &hx)?.sigmoid();
    let gated = Tensor::concat(&[state.h.mul(&r)?, xt], 1)?;
    let q = separable_conv3(params, "agg.q", &gated)?.tanh();
    // h' = (1-z) .* h + z .* q, written as h + z .* (q - h)
    let h = state.h.add(&z.mul(&q.sub(&state.h)?)?)?;

    let delta_hidden = apply_conv(params, "agg.dhead.s", &h, &[1, 1, 1], &[0, 1, 1])?.relu();
    let delta = apply_conv(params, "agg.dhead.t", &delta_hidden, &[1, 1, 1], &[1, 0, 0])?;
    let d = state.d.add(&delta)?;
    if d.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "disparity at gru iteration {}",
            state.iter_index
        )));
    }
    Ok(GruState {
        h,
        d,
        iter_index: state.iter_index + 1,
    })
}

/// Predict upsample weight logits from the hidden state with the head
/// registered under `name`.
pub fn predict_upsample_logits<T: Scalar>(
    params: &ParamMap<T>,
    name: &str,
    h: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = apply_conv(params, &format!("{name}.s"), h, &[1, 1, 1], &[0, 1, 1])?.relu();
    let t = apply_conv(params, &format!("{name}.t"), &s, &[1, 1, 1], &[1, 0, 0])?.relu();
    apply_conv(params, &format!("{name}.m"), &t, &[1, 1, 1], &[0, 0, 0])
}

fn convex_upsample_impl<T: Scalar>(
    d: &Tensor<T>,
    w_logits: &Tensor<T>,
    alpha: usize,
    temporal: bool,
) -> Result<Tensor<T>> {
    let s = d.shape();
    if d.rank() != 5 || s[1] != 1 {
        return Err(Error::InvalidShape {
            op: "convex_upsample",
            shape: s.to_vec(),
            reason: "expected [B,1,T,H,W] disparity".into(),
        });
    }
    let (b, t, h, w) = (s[0], s[2], s[3], s[4]);
    let neighbors = if temporal { 27 } else { 9 };
    let want = [b, neighbors * alpha * alpha, t, h, w];
    if w_logits.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "convex_upsample",
            lhs: w_logits.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    // weights: [B,1,N,1,a,a,T,H,W], softmax over the neighbor axis
    let m = w_logits
        .reshape(&[b, 1, neighbors, 1, alpha, alpha, t, h, w])?
        .softmax(2)?;
    // neighborhoods of the scaled field: [B,1,N,1,1,1,T,H,W]
    let kt = if temporal { 3 } else { 1 };
    let scaled = d.mul_scalar(T::from_f64(alpha as f64));
    let patches = scaled
        .unfold3(kt, 3, 3)?
        .reshape(&[b, 1, neighbors, 1, 1, 1, t, h, w])?;
    let combined = m.mul(&patches)?.sum_axis(2, false)?;
    // [B,1,1,a,a,T,H,W] -> [B,1,1,T,H,a,W,a] -> [B,1,T,aH,aW]
    let out = combined.permute(&[0, 1, 2, 5, 6, 3, 7, 4])?;
    out.reshape(&[b, 1, t, h * alpha, w * alpha])
}

/// Temporal convex upsampling: each output subpixel is a softmax-convex
/// combination of the 27 space-time neighbors of its source cell, applied to
/// the disparity scaled by `alpha`.
pub fn temporal_convex_upsample<T: Scalar>(
    d: &Tensor<T>,
    w_logits: &Tensor<T>,
    alpha: usize,
) -> Result<Tensor<T>> {
    convex_upsample_impl(d, w_logits, alpha, true)
}

/// Spatial-only convex upsampling over 9 neighbors (ablation baseline).
pub fn convex_upsample_2d<T: Scalar>(
    d: &Tensor<T>,
    w_logits: &Tensor<T>,
    alpha: usize,
) -> Result<Tensor<T>> {
    convex_upsample_impl(d, w_logits, alpha, false)
}

/// Per-frame bilinear upsampling with values scaled by `alpha` (ablation
/// baseline; no temporal mixing, no learned weights).
pub fn bilinear_upsample<T: Scalar>(d: &Tensor<T>, alpha: usize) -> Result<Tensor<T>> {
    d.bilinear_up(alpha)
}

/// Upsample a disparity by `alpha` according to the configured mode, using
/// the head registered under `head` when weights are learned.
pub fn upsample_disparity<T: Scalar>(
    params: &ParamMap<T>,
    cfg: &ModelConfig,
    head: &str,
    h: &Tensor<T>,
    d: &Tensor<T>,
    alpha: usize,
) -> Result<Tensor<T>> {
    match cfg.upsample {
        UpsampleMode::Bilinear => bilinear_upsample(d, alpha),
        UpsampleMode::Convex2d => {
            let logits = predict_upsample_logits(params, head, h)?;
            convex_upsample_2d(d, &logits, alpha)
        }
        UpsampleMode::TemporalConvex => {
            let logits = predict_upsample_logits(params, head, h)?;
            temporal_convex_upsample(d, &logits, alpha)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::SearchWindow;
    use crate::model::CorrelationMode;
    use rand::{Rng, SeedableRng};

    type T64 = Tensor<f64>;

    fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
        let n = shape.iter().product();
        T64::from_f64s(&rand_vals(rng, n, lo, hi), shape).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            c_cnn: 4,
            c_prior: 0,
            l_channels: 6,
            c_hidden: 4,
            stages: vec![4],
            iters: 2,
            attention: AttentionMode::Temporal,
            ..ModelConfig::default()
        }
    }

    fn init(cfg: &ModelConfig, seed: u64) -> ParamMap<f64> {
        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut params, &mut rng, cfg);
        params
    }

    fn volume(values: T64, window: SearchWindow) -> CostVolume<f64> {
        CostVolume {
            values,
            mode: CorrelationMode::AllPairs,
            window,
        }
    }

    #[test]
    fn encode_cost_zero_volume_zero_bias_gives_zero() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 1);
        let v = volume(T64::zeros(&[1, 81, 2, 3, 3]), SearchWindow { r_x: 4, r_y: 0 });
        let e = encode_cost(&params, &v).unwrap();
        assert_eq!(e.shape(), &[1, 6, 2, 3, 3]);
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_cost_is_pointwise() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // two pixels share a K-vector
        let kvec = rand_vals(&mut rng, 81, -1.0, 1.0);
        let mut vals = vec![0.0; 81 * 4];
        for (k, &v) in kvec.iter().enumerate() {
            vals[k * 4] = v; // pixel 0
            vals[k * 4 + 3] = v; // pixel 3
            vals[k * 4 + 1] = rng.gen_range(-1.0..1.0);
            vals[k * 4 + 2] = rng.gen_range(-1.0..1.0);
        }
        let v = volume(
            T64::from_f64s(&vals, &[1, 81, 1, 2, 2]).unwrap(),
            SearchWindow { r_x: 4, r_y: 0 },
        );
        let e = encode_cost(&params, &v).unwrap();
        for l in 0..6 {
            assert!((e.data()[l * 4] - e.data()[l * 4 + 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_cost_commutes_with_spatial_permutation() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = rand_tensor(&mut rng, &[1, 81, 1, 2, 3], -1.0, 1.0);
        let e = encode_cost(&params, &volume(v.clone(), SearchWindow { r_x: 4, r_y: 0 })).unwrap();
        // transpose H and W in the input, encode, transpose back
        let vp = v.permute(&[0, 1, 2, 4, 3]).unwrap();
        let ep = encode_cost(&params, &volume(vp, SearchWindow { r_x: 4, r_y: 0 })).unwrap();
        let ep_back = ep.permute(&[0, 1, 2, 4, 3]).unwrap();
        for (a, b) in e.data().iter().zip(ep_back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_cost_channel_mismatch_errors() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 6);
        let v = volume(T64::zeros(&[1, 9, 1, 2, 2]), SearchWindow { r_x: 1, r_y: 1 });
        assert!(encode_cost(&params, &v).is_err());
    }

    fn make_state(params: &ParamMap<f64>, rng: &mut ChaCha8Rng, c_f: usize) -> (GruState<f64>, T64, T64) {
        let f_ctx = rand_tensor(rng, &[1, c_f, 2, 3, 3], -1.0, 1.0);
        let h = init_hidden(params, &f_ctx).unwrap();
        let d = T64::zeros(&[1, 1, 2, 3, 3]);
        let e = rand_tensor(rng, &[1, 6, 2, 3, 3], -1.0, 1.0);
        (
            GruState {
                h,
                d,
                iter_index: 1,
            },
            e,
            f_ctx,
        )
    }

    #[test]
    fn closed_update_gate_freezes_hidden_state() {
        let cfg = tiny_cfg();
        let mut params = init(&cfg, 7);
        // force z ~ 0 with a very negative temporal-gate bias
        let zb = params.get("agg.z.t.b").unwrap();
        let frozen = zb.with_data(vec![-60.0; zb.numel()]).unwrap();
        params.set("agg.z.t.b", frozen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (state, e, f_ctx) = make_state(&params, &mut rng, 4);
        let next = gru_step(&params, &cfg, &state, &e, &f_ctx).unwrap();
        for (a, b) in next.h.data().iter().zip(state.h.data()) {
            assert!((a - b).abs() < 1e-6, "h changed with closed gate");
        }
    }

    #[test]
    fn hidden_state_stays_bounded_from_zero_init() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f_ctx = rand_tensor(&mut rng, &[1, 4, 2, 3, 3], -1.0, 1.0);
        let mut state = GruState {
            h: T64::zeros(&[1, 4, 2, 3, 3]),
            d: T64::zeros(&[1, 1, 2, 3, 3]),
            iter_index: 1,
        };
        let e = rand_tensor(&mut rng, &[1, 6, 2, 3, 3], -1.0, 1.0);
        state = gru_step(&params, &cfg, &state, &e, &f_ctx).unwrap();
        assert!(state.h.data().iter().all(|&v| v.abs() < 1.0));
    }

    #[test]
    fn hidden_state_bounded_after_twenty_steps() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f_ctx = rand_tensor(&mut rng, &[1, 4, 2, 3, 3], -1.0, 1.0);
        // start from the corners of [-1, 1]
        let h0: Vec<f64> = (0..1 * 4 * 2 * 3 * 3)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let mut state = GruState {
            h: T64::from_f64s(&h0, &[1, 4, 2, 3, 3]).unwrap(),
            d: T64::zeros(&[1, 1, 2, 3, 3]),
            iter_index: 1,
        };
        for _ in 0..20 {
            let e = rand_tensor(&mut rng, &[1, 6, 2, 3, 3], -2.0, 2.0);
            state = gru_step(&params, &cfg, &state, &e, &f_ctx).unwrap();
            // detach so the graph does not grow across the loop
            state.h = state.h.detach();
            state.d = state.d.detach();
        }
        assert!(
            state.h.data().iter().all(|&v| v > -1.0 && v < 1.0),
            "hidden state left (-1,1)"
        );
    }

    #[test]
    fn zero_initialized_head_gives_zero_delta() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (state, e, f_ctx) = make_state(&params, &mut rng, 4);
        let next = gru_step(&params, &cfg, &state, &e, &f_ctx).unwrap();
        assert!(next.d.data().iter().all(|&v| v == 0.0));
        assert_eq!(next.iter_index, 2);
    }

    #[test]
    fn full_gru_step_passes_grad_check() {
        use crate::tensor::grad_check;
        let cfg = ModelConfig {
            c_cnn: 2,
            l_channels: 2,
            c_hidden: 2,
            stages: vec![4],
            attention: AttentionMode::Temporal,
            ..ModelConfig::default()
        };
        let params = init(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let e = Tensor::var(rand_vals(&mut rng, 2 * 2 * 2 * 2, -1.0, 1.0), &[1, 2, 2, 2, 2]).unwrap();
        let f_ctx =
            Tensor::var(rand_vals(&mut rng, 2 * 2 * 2 * 2, -1.0, 1.0), &[1, 2, 2, 2, 2]).unwrap();
        let h0 =
            Tensor::var(rand_vals(&mut rng, 2 * 2 * 2 * 2, -0.9, 0.9), &[1, 2, 2, 2, 2]).unwrap();
        let d0 = Tensor::var(rand_vals(&mut rng, 2 * 2 * 2, 0.1, 0.9), &[1, 1, 2, 2, 2]).unwrap();
        // give the zero-initialized head real weights so its gradient path
        // is exercised
        let head = params.get("agg.dhead.t.w").unwrap();
        let nonzero = head
            .with_data(rand_vals(&mut rng, head.numel(), -0.3, 0.3))
            .unwrap();
        let mut params = params;
        params.set("agg.dhead.t.w", nonzero).unwrap();

        let err = grad_check(
            |xs| {
                let state = GruState {
                    h: xs[0].clone(),
                    d: xs[1].clone(),
                    iter_index: 1,
                };
                let next = gru_step(&params, &cfg, &state, &xs[2], &xs[3]).unwrap();
                next.d.mul(&next.h.sum_axis(1, true).unwrap()).unwrap().sum_all()
            },
            &[h0, d0, e, f_ctx],
        )
        .unwrap();
        assert!(err < 1e-4, "gru grad check err {err}");
    }

    #[test]
    fn attention_none_is_bitwise_identity() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_tensor(&mut rng, &[1, 5, 2, 3, 3], -1.0, 1.0);
        let y = attention(&params, AttentionMode::None, &x).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn zero_projection_attention_is_identity() {
        // with the zero-initialized output projection the residual passes
        // the input through unchanged, for any T (including T=1)
        let cfg = tiny_cfg();
        let params = init(&cfg, 19);
        let cx = cfg.c_gru_input();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for t in [1usize, 3] {
            let x = rand_tensor(&mut rng, &[1, cx, t, 2, 2], -1.0, 1.0);
            let y = attention(&params, AttentionMode::Temporal, &x).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporally_uniform_input_stays_uniform_under_temporal_attention() {
        let cfg = tiny_cfg();
        let mut params = init(&cfg, 21);
        let cx = cfg.c_gru_input();
        // non-zero output projection so attention actually mixes
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let o = params.get("agg.attn_t.o.w").unwrap();
        let randomized = o.with_data(rand_vals(&mut rng, o.numel(), -0.5, 0.5)).unwrap();
        params.set("agg.attn_t.o.w", randomized).unwrap();

        let (t_n, h, w) = (4usize, 2usize, 3usize);
        let frame = rand_vals(&mut rng, cx * h * w, -1.0, 1.0);
        let mut vals = vec![0.0; cx * t_n * h * w];
        for c in 0..cx {
            for t in 0..t_n {
                for i in 0..h * w {
                    vals[(c * t_n + t) * h * w + i] = frame[c * h * w + i];
                }
            }
        }
        let x = T64::from_f64s(&vals, &[1, cx, t_n, h, w]).unwrap();
        let y = attention(&params, AttentionMode::Temporal, &x).unwrap();
        let yd = y.data();
        for c in 0..cx {
            for t in 1..t_n {
                for i in 0..h * w {
                    let a = yd[(c * t_n) * h * w + i];
                    let b = yd[(c * t_n + t) * h * w + i];
                    assert!((a - b).abs() < 1e-9, "c={c} t={t} i={i}");
                }
            }
        }
    }

    // ----- upsampling -----

    #[test]
    fn constant_disparity_upsamples_to_alpha_c_for_any_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = T64::full(&[1, 1, 3, 2, 2], 1.75);
        let alpha = 2;
        let logits = rand_tensor(&mut rng, &[1, 27 * alpha * alpha, 3, 2, 2], -2.0, 2.0);
        let up = temporal_convex_upsample(&d, &logits, alpha).unwrap();
        assert_eq!(up.shape(), &[1, 1, 3, 4, 4]);
        for &v in up.data() {
            assert!((v - 2.0 * 1.75).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_27_neighbor_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let d = rand_tensor(&mut rng, &[1, 1, 3, 2, 2], 0.0, 4.0);
        let alpha = 2;
        let logits = T64::zeros(&[1, 27 * alpha * alpha, 3, 2, 2]);
        let up = temporal_convex_upsample(&d, &logits, alpha).unwrap();
        let (t_n, h, w) = (3usize, 2usize, 2usize);
        let dd = d.data();
        let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for t in 0..t_n {
            for y in 0..h {
                for x in 0..w {
                    let mut mean = 0.0;
                    for dt in -1isize..=1 {
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                mean += dd[(cl(t as isize + dt, t_n) * h + cl(y as isize + dy, h))
                                    * w
                                    + cl(x as isize + dx, w)];
                            }
                        }
                    }
                    mean = mean * 2.0 / 27.0;
                    for sy in 0..alpha {
                        for sx in 0..alpha {
                            let got = up.data()
                                [(t * h * alpha + y * alpha + sy) * w * alpha + x * alpha + sx];
                            assert!((got - mean).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    /// Nested-loop evaluation of the convex combination, independent of the
    /// tensor-op composition.
    fn upsample_oracle(
        d: &[f64],
        logits: &[f64],
        t_n: usize,
        h: usize,
        w: usize,
        alpha: usize,
    ) -> Vec<f64> {
        let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut out = vec![0.0; t_n * h * alpha * w * alpha];
        for t in 0..t_n {
            for y in 0..h {
                for x in 0..w {
                    for sy in 0..alpha {
                        for sx in 0..alpha {
                            // softmax over the 27 neighbor logits of this subpixel
                            let mut exps = [0.0f64; 27];
                            let mut m = f64::NEG_INFINITY;
                            for j in 0..27 {
                                let ch = (j * alpha + sy) * alpha + sx;
                                let v = logits[(ch * t_n + t) * h * w + y * w + x];
                                m = m.max(v);
                            }
                            let mut sum = 0.0;
                            for j in 0..27 {
                                let ch = (j * alpha + sy) * alpha + sx;
                                let v = logits[(ch * t_n + t) * h * w + y * w + x];
                                exps[j] = (v - m).exp();
                                sum += exps[j];
                            }
                            let mut acc = 0.0;
                            for j in 0..27 {
                                let (dt, dy, dx) =
                                    ((j / 9) as isize - 1, ((j / 3) % 3) as isize - 1, (j % 3) as isize - 1);
                                let nb = d[(cl(t as isize + dt, t_n) * h + cl(y as isize + dy, h))
                                    * w
                                    + cl(x as isize + dx, w)];
                                acc += exps[j] / sum * alpha as f64 * nb;
                            }
                            out[(t * h * alpha + y * alpha + sy) * w * alpha + x * alpha + sx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn temporal_convex_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for alpha in [2usize, 4] {
            let d = rand_tensor(&mut rng, &[1, 1, 3, 2, 2], 0.0, 5.0);
            let logits = rand_tensor(&mut rng, &[1, 27 * alpha * alpha, 3, 2, 2], -2.0, 2.0);
            let up = temporal_convex_upsample(&d, &logits, alpha).unwrap();
            let want = upsample_oracle(d.data(), logits.data(), 3, 2, 2, alpha);
            for (i, (&g, &w)) in up.data().iter().zip(&want).enumerate() {
                assert!((g - w).abs() < 1e-6, "alpha={alpha} elem {i}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn convexity_bounds_hold_at_every_subpixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (t_n, h, w, alpha) = (3usize, 3usize, 4usize, 2usize);
        let d = rand_tensor(&mut rng, &[1, 1, t_n, h, w], -3.0, 7.0);
        let logits = rand_tensor(&mut rng, &[1, 27 * alpha * alpha, t_n, h, w], -3.0, 3.0);
        let up = temporal_convex_upsample(&d, &logits, alpha).unwrap();
        let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for t in 0..t_n {
            for y in 0..h {
                for x in 0..w {
                    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                    for dt in -1isize..=1 {
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let v = d.data()[(cl(t as isize + dt, t_n) * h
                                    + cl(y as isize + dy, h))
                                    * w
                                    + cl(x as isize + dx, w)];
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    for sy in 0..alpha {
                        for sx in 0..alpha {
                            let got = up.data()
                                [(t * h * alpha + y * alpha + sy) * w * alpha + x * alpha + sx];
                            assert!(
                                got >= alpha as f64 * lo - 1e-9 && got <= alpha as f64 * hi + 1e-9,
                                "subpixel out of convex bounds"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn temporally_constant_field_with_shared_weights_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (t_n, h, w, alpha) = (3usize, 2usize, 3usize, 2usize);
        let frame = rand_vals(&mut rng, h * w, 0.0, 4.0);
        let mut dvals = Vec::new();
        for _ in 0..t_n {
            dvals.extend_from_slice(&frame);
        }
        let d = T64::from_f64s(&dvals, &[1, 1, t_n, h, w]).unwrap();
        // one weight map repeated across frames
        let wframe = rand_vals(&mut rng, 27 * alpha * alpha * h * w, -1.0, 1.0);
        let mut wvals = vec![0.0; 27 * alpha * alpha * t_n * h * w];
        for c in 0..27 * alpha * alpha {
            for t in 0..t_n {
                for i in 0..h * w {
                    wvals[(c * t_n + t) * h * w + i] = wframe[c * h * w + i];
                }
            }
        }
        let logits = T64::from_f64s(&wvals, &[1, 27 * alpha * alpha, t_n, h, w]).unwrap();
        let up = temporal_convex_upsample(&d, &logits, alpha).unwrap();
        let hw_up = h * alpha * w * alpha;
        for t in 1..t_n {
            for i in 0..hw_up {
                assert!(
                    (up.data()[t * hw_up + i] - up.data()[i]).abs() < 1e-12,
                    "frame {t} differs at {i}"
                );
            }
        }
    }

    #[test]
    fn convex_2d_uniform_logits_give_9_neighbor_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let d = rand_tensor(&mut rng, &[1, 1, 1, 3, 3], 0.0, 2.0);
        let alpha = 2;
        let logits = T64::zeros(&[1, 9 * alpha * alpha, 1, 3, 3]);
        let up = convex_upsample_2d(&d, &logits, alpha).unwrap();
        let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for y in 0..3usize {
            for x in 0..3usize {
                let mut mean = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        mean += d.data()[cl(y as isize + dy, 3) * 3 + cl(x as isize + dx, 3)];
                    }
                }
                mean = mean * alpha as f64 / 9.0;
                let got = up.data()[(y * alpha) * 6 + x * alpha];
                assert!((got - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_on_single_frame_with_center_weights_reduces_to_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (h, w, alpha) = (3usize, 3usize, 2usize);
        let d = rand_tensor(&mut rng, &[1, 1, 1, h, w], 0.0, 4.0);
        let spatial = rand_vals(&mut rng, 9 * alpha * alpha * h * w, -1.5, 1.5);
        let logits2d = T64::from_f64s(&spatial, &[1, 9 * alpha * alpha, 1, h, w]).unwrap();
        // temporal logits: center frame carries the 2D logits, other frames
        // get a huge negative value so their weight vanishes
        let mut tvals = vec![-1e4; 27 * alpha * alpha * h * w];
        for j in 0..9 {
            for s in 0..alpha * alpha {
                let ch3 = ((9 + j) * alpha * alpha) + s; // dt = 0 block
                let ch2 = j * alpha * alpha + s;
                for i in 0..h * w {
                    tvals[ch3 * h * w + i] = spatial[ch2 * h * w + i];
                }
            }
        }
        let logits3d = T64::from_f64s(&tvals, &[1, 27 * alpha * alpha, 1, h, w]).unwrap();
        let up2 = convex_upsample_2d(&d, &logits2d, alpha).unwrap();
        let up3 = temporal_convex_upsample(&d, &logits3d, alpha).unwrap();
        for (a, b) in up3.data().iter().zip(up2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn all_three_upsamplers_agree_on_constant_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let d = T64::full(&[1, 1, 3, 2, 2], 0.8);
        let alpha = 2;
        let l3 = rand_tensor(&mut rng, &[1, 27 * alpha * alpha, 3, 2, 2], -1.0, 1.0);
        let l2 = rand_tensor(&mut rng, &[1, 9 * alpha * alpha, 3, 2, 2], -1.0, 1.0);
        let a = temporal_convex_upsample(&d, &l3, alpha).unwrap();
        let b = convex_upsample_2d(&d, &l2, alpha).unwrap();
        let c = bilinear_upsample(&d, alpha).unwrap();
        for i in 0..a.numel() {
            assert!((a.data()[i] - 1.6).abs() < 1e-12);
            assert!((b.data()[i] - 1.6).abs() < 1e-12);
            assert!((c.data()[i] - 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_convex_upsample_gradients() {
        use crate::tensor::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let alpha = 2usize;
        let d = Tensor::var(rand_vals(&mut rng, 3 * 2 * 2, 0.0, 3.0), &[1, 1, 3, 2, 2]).unwrap();
        let logits = Tensor::var(
            rand_vals(&mut rng, 27 * alpha * alpha * 3 * 2 * 2, -1.0, 1.0),
            &[1, 27 * alpha * alpha, 3, 2, 2],
        )
        .unwrap();
        // scalarize with a random linear projection; saturating nonlinearities
        // would make the finite differences ill-conditioned
        let proj = Tensor::from_vec(rand_vals(&mut rng, 3 * 4 * 4, -1.0, 1.0), &[1, 1, 3, 4, 4]).unwrap();
        let err = grad_check(
            |xs| {
                temporal_convex_upsample(&xs[0], &xs[1], alpha)
                    .unwrap()
                    .mul(&proj)
                    .unwrap()
                    .sum_all()
            },
            &[d, logits],
        )
        .unwrap();
        assert!(err < 1e-4, "upsample grad err {err}");
    }

    #[test]
    fn encode_cost_gradients() {
        use crate::tensor::grad_check;
        let cfg = ModelConfig {
            c_cnn: 2,
            l_channels: 3,
            c_hidden: 2,
            stages: vec![4],
            correlation: CorrelationMode::Local,
            ..ModelConfig::default()
        };
        let params = init(&cfg, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let v = Tensor::var(rand_vals(&mut rng, 9 * 2 * 2, -1.0, 1.0), &[1, 9, 1, 2, 2]).unwrap();
        let w1 = params.get("agg.enc.c1.w").unwrap().clone();
        let err = grad_check(
            |xs| {
                let vol = CostVolume {
                    values: xs[0].clone(),
                    mode: CorrelationMode::Local,
                    window: SearchWindow { r_x: 1, r_y: 1 },
                };
                // rebuild params view binding xs[1] as the first MLP weight
                let mut p = params.clone();
                p.set("agg.enc.c1.w", xs[1].clone()).unwrap();
                encode_cost(&p, &vol).unwrap().tanh().sum_all()
            },
            &[v, w1],
        )
        .unwrap();
        assert!(err < 1e-4, "encode_cost grad err {err}");
    }
}
