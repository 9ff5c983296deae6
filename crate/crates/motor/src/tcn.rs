//! Token Cross Network: one-order weighted sum, second-order pairwise
//! element-wise products (factorization-machine form), and an MLP
//! high-order term, summed per crossing group.
//!
//! Parameters are stored as f32; all arithmetic runs in f64 so analytic
//! gradients can be validated against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::token_store::xavier_bound;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcnVariant {
    ModalSpecific,
    ModalAgnostic,
    /// Ablation: unweighted average of all token embeddings.
    Mean,
    /// Ablation: single linear map of the concatenated token embeddings.
    Linear,
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out_dim x in_dim.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl MlpLayer {
    fn xavier(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = xavier_bound(in_dim, out_dim);
        MlpLayer {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.gen_range(-a..=a)).collect(),
            bias: vec![0.0; out_dim],
        }
    }
}

/// One crossing group: per-slot scalar weights plus the high-order MLP
/// (hidden layer of width d with rectifier, linear output of width d).
#[derive(Debug, Clone)]
pub struct CrossGroup {
    pub slot_weights: Vec<f32>,
    pub mlp: Vec<MlpLayer>,
}

#[derive(Debug, Clone)]
pub struct Tcn {
    pub variant: TcnVariant,
    pub dim: usize,
    /// Slot count per group (one group per modality for modal-specific,
    /// a single group otherwise).
    pub group_sizes: Vec<usize>,
    pub groups: Vec<CrossGroup>,
}

impl Tcn {
    /// `slots_per_modality` follows the canonical modality order; the
    /// total slot layout of the input embeddings never changes across
    /// variants, only the grouping does.
    pub fn init(variant: TcnVariant, slots_per_modality: &[usize], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = slots_per_modality.iter().sum();
        let group_sizes: Vec<usize> = match variant {
            TcnVariant::ModalSpecific => slots_per_modality.to_vec(),
            _ => vec![total],
        };
        let groups = match variant {
            TcnVariant::Mean => Vec::new(),
            TcnVariant::Linear => vec![CrossGroup {
                slot_weights: Vec::new(),
                mlp: vec![MlpLayer::xavier(total * dim, dim, &mut rng)],
            }],
            _ => group_sizes
                .iter()
                .map(|&n| CrossGroup {
                    // One-order starts as the mean of the group's embeddings.
                    slot_weights: vec![1.0 / n as f32; n],
                    mlp: vec![
                        MlpLayer::xavier(n * dim, dim, &mut rng),
                        MlpLayer::xavier(dim, dim, &mut rng),
                    ],
                })
                .collect(),
        };
        Tcn { variant, dim, group_sizes, groups }
    }

    pub fn param_count(&self) -> usize {
        self.groups
            .iter()
            .map(|g| {
                g.slot_weights.len()
                    + g.mlp.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            })
            .sum()
    }

    pub fn total_slots(&self) -> usize {
        self.group_sizes.iter().sum()
    }
}

/// Sum_x w_x e_x.
pub fn one_order(embs: &[&[f32]], w: &[f32]) -> Vec<f64> {
    assert_eq!(embs.len(), w.len());
    let d = embs.first().map_or(0, |e| e.len());
    let mut out = vec![0.0f64; d];
    for (e, &wx) in embs.iter().zip(w) {
        for (o, &v) in out.iter_mut().zip(*e) {
            *o += wx as f64 * v as f64;
        }
    }
    out
}

/// Sum_{x<y} w_x w_y (e_x . e_y), via the factorization-machine identity
/// 0.5 [ (sum w_x e_x)^2 - sum (w_x e_x)^2 ] taken element-wise.
pub fn second_order(embs: &[&[f32]], w: &[f32]) -> Vec<f64> {
    assert_eq!(embs.len(), w.len());
    let d = embs.first().map_or(0, |e| e.len());
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for (e, &wx) in embs.iter().zip(w) {
        for (k, &v) in e.iter().enumerate() {
            let t = wx as f64 * v as f64;
            sum[k] += t;
            sq[k] += t * t;
        }
    }
    sum.iter().zip(&sq).map(|(&s, &q)| 0.5 * (s * s - q)).collect()
}

/// Concatenate in slot order, rectifier hidden layers, linear last layer.
pub fn high_order(embs: &[&[f32]], mlp: &[MlpLayer]) -> Vec<f64> {
    let h0: Vec<f64> = embs.iter().flat_map(|e| e.iter().map(|&v| v as f64)).collect();
    let mut h = h0;
    for (l, layer) in mlp.iter().enumerate() {
        assert_eq!(h.len(), layer.in_dim, "MLP layer {l} input dim mismatch");
        let mut z = affine(layer, &h);
        if l + 1 < mlp.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    h
}

fn affine(layer: &MlpLayer, input: &[f64]) -> Vec<f64> {
    (0..layer.out_dim)
        .map(|o| {
            let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut acc = layer.bias[o] as f64;
            for (w, &x) in row.iter().zip(input) {
                acc += *w as f64 * x;
            }
            acc
        })
        .collect()
}

/// Forward-pass state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct TcnCache {
    /// Input embeddings widened to f64, in canonical slot order.
    pub inputs: Vec<Vec<f64>>,
    /// Per group: weighted sum vector s = sum w_x e_x.
    pub group_sums: Vec<Vec<f64>>,
    /// Per group, per layer: pre-activation vectors.
    pub pre_activations: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct TcnGrads {
    /// Mirrors `Tcn::groups`: slot-weight grads per group.
    pub slot_weights: Vec<Vec<f64>>,
    /// Mirrors the MLP layers: (weight grad, bias grad) per layer.
    pub mlp: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    /// Gradient w.r.t. each input token embedding, canonical order.
    pub inputs: Vec<Vec<f64>>,
}

impl Tcn {
    /// Token representation r_i from the item's token embeddings
    /// (canonical slot order). Returns the cache for `backward`.
    pub fn forward(&self, embs: &[&[f32]]) -> (Vec<f64>, TcnCache) {
        assert_eq!(embs.len(), self.total_slots(), "slot count mismatch");
        let d = self.dim;
        let inputs: Vec<Vec<f64>> =
            embs.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect();
        let mut r = vec![0.0f64; d];
        let mut group_sums = Vec::new();
        let mut pre_activations = Vec::new();
        match self.variant {
            TcnVariant::Mean => {
                let n = inputs.len() as f64;
                for e in &inputs {
                    for (o, &v) in r.iter_mut().zip(e) {
                        *o += v / n;
                    }
                }
            }
            TcnVariant::Linear => {
                let layer = &self.groups[0].mlp[0];
                let h0: Vec<f64> = inputs.iter().flatten().copied().collect();
                let z = affine(layer, &h0);
                pre_activations.push(vec![z.clone()]);
                r = z;
            }
            TcnVariant::ModalSpecific | TcnVariant::ModalAgnostic => {
                let mut offset = 0;
                for (g, group) in self.groups.iter().enumerate() {
                    let n = self.group_sizes[g];
                    let ge = &inputs[offset..offset + n];
                    let w = &group.slot_weights;
                    // s and the squared-term accumulator for the FM identity.
                    let mut s = vec![0.0f64; d];
                    let mut sq = vec![0.0f64; d];
                    for (e, &wx) in ge.iter().zip(w) {
                        for (k, &v) in e.iter().enumerate() {
                            let t = wx as f64 * v;
                            s[k] += t;
                            sq[k] += t * t;
                        }
                    }
                    for k in 0..d {
                        r[k] += s[k] + 0.5 * (s[k] * s[k] - sq[k]);
                    }
                    // High-order MLP.
                    let h0: Vec<f64> = ge.iter().flatten().copied().collect();
                    let mut acts = Vec::new();
                    let mut h = h0;
                    for (l, layer) in group.mlp.iter().enumerate() {
                        let z = affine(layer, &h);
                        acts.push(z.clone());
                        h = if l + 1 < group.mlp.len() {
                            z.into_iter().map(|v| v.max(0.0)).collect()
                        } else {
                            z
                        };
                    }
                    for (o, &v) in r.iter_mut().zip(&h) {
                        *o += v;
                    }
                    group_sums.push(s);
                    pre_activations.push(acts);
                    offset += n;
                }
            }
        }
        (r, TcnCache { inputs, group_sums, pre_activations })
    }

    /// Exact analytic gradients for every slot weight, MLP parameter and
    /// input token embedding, given dL/dr.
    pub fn backward(&self, cache: &TcnCache, upstream: &[f64]) -> TcnGrads {
        let d = self.dim;
        let total = self.total_slots();
        let mut input_grads = vec![vec![0.0f64; d]; total];
        let mut slot_w_grads = Vec::new();
        let mut mlp_grads = Vec::new();
        match self.variant {
            TcnVariant::Mean => {
                let n = total as f64;
                for gi in &mut input_grads {
                    for (o, &g) in gi.iter_mut().zip(upstream) {
                        *o = g / n;
                    }
                }
            }
            TcnVariant::Linear => {
                let layer = &self.groups[0].mlp[0];
                let h0: Vec<f64> = cache.inputs.iter().flatten().copied().collect();
                let (wg, bg, hg) = affine_backward(layer, &h0, upstream);
                for (x, gi) in input_grads.iter_mut().enumerate() {
                    gi.copy_from_slice(&hg[x * d..(x + 1) * d]);
                }
                slot_w_grads.push(Vec::new());
                mlp_grads.push(vec![(wg, bg)]);
            }
            TcnVariant::ModalSpecific | TcnVariant::ModalAgnostic => {
                let mut offset = 0;
                for (g, group) in self.groups.iter().enumerate() {
                    let n = self.group_sizes[g];
                    let ge = &cache.inputs[offset..offset + n];
                    let w = &group.slot_weights;
                    let s = &cache.group_sums[g];
                    // One-order + second-order contributions.
                    let mut wg = vec![0.0f64; n];
                    for x in 0..n {
                        let wx = w[x] as f64;
                        let e = &ge[x];
                        let gi = &mut input_grads[offset + x];
                        let mut dwx = 0.0f64;
                        for k in 0..d {
                            let u = upstream[k];
                            // d r1 / d w_x = e_x ; d r1 / d e_x = w_x
                            dwx += u * e[k];
                            gi[k] += wx * u;
                            // d r2 / d w_x = e_x (s - w_x e_x)
                            // d r2 / d e_x = w_x (s - w_x e_x)
                            let rest = s[k] - wx * e[k];
                            dwx += u * e[k] * rest;
                            gi[k] += wx * rest * u;
                        }
                        wg[x] = dwx;
                    }
                    // High-order MLP backward.
                    let acts = &cache.pre_activations[g];
                    let h0: Vec<f64> = ge.iter().flatten().copied().collect();
                    let mut layer_inputs = vec![h0.clone()];
                    for (l, z) in acts.iter().enumerate().take(group.mlp.len() - 1) {
                        let _ = l;
                        layer_inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
                    }
                    let mut grads = vec![(Vec::new(), Vec::new()); group.mlp.len()];
                    let mut gz: Vec<f64> = upstream.to_vec();
                    for l in (0..group.mlp.len()).rev() {
                        if l + 1 < group.mlp.len() {
                            // Rectifier gate on the hidden pre-activation.
                            for (gv, &z) in gz.iter_mut().zip(&acts[l]) {
                                if z <= 0.0 {
                                    *gv = 0.0;
                                }
                            }
                        }
                        let (wgl, bgl, hg) = affine_backward(&group.mlp[l], &layer_inputs[l], &gz);
                        grads[l] = (wgl, bgl);
                        gz = hg;
                    }
                    for x in 0..n {
                        for k in 0..d {
                            input_grads[offset + x][k] += gz[x * d + k];
                        }
                    }
                    slot_w_grads.push(wg);
                    mlp_grads.push(grads);
                    offset += n;
                }
            }
        }
        TcnGrads { slot_weights: slot_w_grads, mlp: mlp_grads, inputs: input_grads }
    }
}

/// Returns (dW, db, dInput) for z = W h + b given dL/dz.
fn affine_backward(layer: &MlpLayer, input: &[f64], gz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut wg = vec![0.0f64; layer.weight.len()];
    let mut hg = vec![0.0f64; layer.in_dim];
    for o in 0..layer.out_dim {
        let g = gz[o];
        let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
        let wrow = &mut wg[o * layer.in_dim..(o + 1) * layer.in_dim];
        for k in 0..layer.in_dim {
            wrow[k] = g * input[k];
            hg[k] += row[k] as f64 * g;
        }
    }
    (wg, gz.to_vec(), hg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(vals: &[&[f32]]) -> Vec<Vec<f32>> {
        vals.iter().map(|v| v.to_vec()).collect()
    }

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|e| e.as_slice()).collect()
    }

    #[test]
    fn one_order_cases() {
        let e = fixed(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(one_order(&refs(&e), &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(one_order(&refs(&e)[..1], &[1.0]), vec![1.0, 2.0]);
        assert_eq!(one_order(&refs(&e), &[0.5, 0.5]), vec![2.0, 3.0]);
    }

    #[test]
    fn second_order_cases() {
        let e = fixed(&[&[1.0, 1.0], &[2.0, 2.0]]);
        assert_eq!(second_order(&refs(&e)[..1], &[1.0]), vec![0.0, 0.0]);
        assert_eq!(second_order(&refs(&e), &[1.0, 1.0]), vec![2.0, 2.0]);
    }

    fn brute_force_second_order(embs: &[&[f32]], w: &[f32]) -> Vec<f64> {
        let d = embs[0].len();
        let mut out = vec![0.0f64; d];
        for x in 0..embs.len() {
            for y in x + 1..embs.len() {
                for k in 0..d {
                    out[k] +=
                        w[x] as f64 * w[y] as f64 * embs[x][k] as f64 * embs[y][k] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn fm_identity_matches_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for &n in &[1usize, 2, 4, 8, 16, 32] {
            for _ in 0..10 {
                let d = rng.gen_range(1..=8);
                let embs: Vec<Vec<f32>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fast = second_order(&refs(&embs), &w);
                let slow = brute_force_second_order(&refs(&embs), &w);
                for (a, b) in fast.iter().zip(&slow) {
                    let denom = b.abs().max(1e-9);
                    assert!((a - b).abs() / denom < 1e-6, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn second_order_scales_quadratically_in_w() {
        let e = fixed(&[&[1.0, -2.0], &[0.5, 3.0], &[2.0, 1.0]]);
        let w = [0.7f32, -0.3, 1.1];
        let scaled: Vec<f32> = w.iter().map(|&x| 2.0 * x).collect();
        let base = second_order(&refs(&e), &w);
        let big = second_order(&refs(&e), &scaled);
        for (a, b) in base.iter().zip(&big) {
            assert!((4.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn high_order_zero_params_is_zero() {
        let e = fixed(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mlp = vec![
            MlpLayer { in_dim: 4, out_dim: 2, weight: vec![0.0; 8], bias: vec![0.0; 2] },
            MlpLayer { in_dim: 2, out_dim: 2, weight: vec![0.0; 4], bias: vec![0.0; 2] },
        ];
        assert_eq!(high_order(&refs(&e), &mlp), vec![0.0, 0.0]);
    }

    #[test]
    fn high_order_identity_projection() {
        // Single linear layer W = [I | 0] returns e_1.
        let e = fixed(&[&[5.0, -1.0], &[3.0, 4.0]]);
        let mut weight = vec![0.0f32; 8];
        weight[0] = 1.0; // row 0 picks h0[0]
        weight[5] = 1.0; // row 1 picks h0[1]
        let mlp = vec![MlpLayer { in_dim: 4, out_dim: 2, weight, bias: vec![0.0; 2] }];
        assert_eq!(high_order(&refs(&e), &mlp), vec![5.0, -1.0]);
    }

    fn zeroed(mut tcn: Tcn) -> Tcn {
        for g in &mut tcn.groups {
            g.slot_weights.iter_mut().for_each(|w| *w = 0.0);
            for l in &mut g.mlp {
                l.weight.iter_mut().for_each(|w| *w = 0.0);
                l.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        tcn
    }

    #[test]
    fn modal_specific_is_sum_of_per_modality_parts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let tcn = Tcn::init(TcnVariant::ModalSpecific, &[2, 3], d, 77);
        let embs: Vec<Vec<f32>> =
            (0..5).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (r, _) = tcn.forward(&refs(&embs));
        // Each modality's part computed independently from the group params.
        let mut expected = vec![0.0f64; d];
        let mut offset = 0;
        for (g, group) in tcn.groups.iter().enumerate() {
            let n = tcn.group_sizes[g];
            let ge = &refs(&embs)[offset..offset + n];
            let r1 = one_order(ge, &group.slot_weights);
            let r2 = second_order(ge, &group.slot_weights);
            let rh = high_order(ge, &group.mlp);
            for k in 0..d {
                expected[k] += r1[k] + r2[k] + rh[k];
            }
            offset += n;
        }
        for (a, b) in r.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_zero_representation() {
        let embs = fixed(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]);
        for variant in [TcnVariant::ModalSpecific, TcnVariant::ModalAgnostic] {
            let tcn = zeroed(Tcn::init(variant, &[2, 2], 2, 0));
            let (r, _) = tcn.forward(&refs(&embs));
            assert!(r.iter().all(|&v| v == 0.0), "{variant:?}");
        }
    }

    #[test]
    fn agnostic_crosses_modalities_where_specific_cannot() {
        // D=1 per modality: each modal-specific group has a single slot so
        // its second-order term vanishes; the agnostic variant crosses the
        // two slots.
        let embs = fixed(&[&[1.0, 2.0], &[3.0, 5.0]]);
        let w = [1.0f32, 1.0];
        let specific: Vec<f64> = second_order(&refs(&embs)[..1], &w[..1])
            .iter()
            .zip(&second_order(&refs(&embs)[1..], &w[1..]))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(specific, vec![0.0, 0.0]);
        let agnostic = second_order(&refs(&embs), &w);
        assert_eq!(agnostic, vec![3.0, 10.0]);
    }

    #[test]
    fn mean_variant_is_average() {
        let embs = fixed(&[&[2.0, 4.0], &[4.0, 8.0]]);
        let tcn = Tcn::init(TcnVariant::Mean, &[1, 1], 2, 0);
        let (r, _) = tcn.forward(&refs(&embs));
        assert_eq!(r, vec![3.0, 6.0]);
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let embs = fixed(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let tcn = Tcn::init(TcnVariant::ModalAgnostic, &[1, 1], 2, 3);
        let (_, cache) = tcn.forward(&refs(&embs));
        let grads = tcn.backward(&cache, &[0.0, 0.0]);
        assert!(grads.inputs.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.slot_weights.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.mlp.iter().flatten().all(|(w, b)| w
            .iter()
            .chain(b)
            .all(|&g| g == 0.0)));
    }

    #[test]
    fn one_order_weight_gradient_is_dot() {
        // With second-order weights zeroed via a single slot and the MLP
        // zeroed, d loss / d w_x = e_x . upstream.
        let embs = fixed(&[&[1.0, 2.0]]);
        let mut tcn = Tcn::init(TcnVariant::ModalAgnostic, &[1], 2, 3);
        tcn = zeroed(tcn);
        tcn.groups[0].slot_weights[0] = 0.5;
        let (_, cache) = tcn.forward(&refs(&embs));
        let grads = tcn.backward(&cache, &[1.0, 1.0]);
        assert!((grads.slot_weights[0][0] - 3.0).abs() < 1e-12);
    }

    /// Central finite differences against the analytic gradients on the
    /// full network; the f64 compute path makes 1e-4 relative attainable.
    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        for variant in [TcnVariant::ModalSpecific, TcnVariant::ModalAgnostic, TcnVariant::Linear] {
            let d = 3;
            let mut tcn = Tcn::init(variant, &[2, 2], d, 9);
            let embs: Vec<Vec<f32>> =
                (0..4).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let up: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |t: &Tcn, e: &[Vec<f32>]| -> f64 {
                let (r, _) = t.forward(&refs(e));
                r.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = tcn.forward(&refs(&embs));
            let grads = tcn.backward(&cache, &up);
            let check = |analytic: f64, numeric: f64| {
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{variant:?}: analytic {analytic} vs numeric {numeric}"
                );
            };
            // Input embedding gradients.
            let mut e2 = embs.clone();
            for x in 0..4 {
                for k in 0..d {
                    let orig = e2[x][k];
                    e2[x][k] = orig + 1e-4;
                    let hi_v = e2[x][k];
                    let hi = loss(&tcn, &e2);
                    e2[x][k] = orig - 1e-4;
                    let lo_v = e2[x][k];
                    let lo = loss(&tcn, &e2);
                    e2[x][k] = orig;
                    check(grads.inputs[x][k], (hi - lo) / (hi_v as f64 - lo_v as f64));
                }
            }
            // Slot weights and MLP parameters.
            for g in 0..tcn.groups.len() {
                for x in 0..tcn.groups[g].slot_weights.len() {
                    let orig = tcn.groups[g].slot_weights[x];
                    tcn.groups[g].slot_weights[x] = orig + 1e-4;
                    let hi_v = tcn.groups[g].slot_weights[x];
                    let hi = loss(&tcn, &embs);
                    tcn.groups[g].slot_weights[x] = orig - 1e-4;
                    let lo_v = tcn.groups[g].slot_weights[x];
                    let lo = loss(&tcn, &embs);
                    tcn.groups[g].slot_weights[x] = orig;
                    check(grads.slot_weights[g][x], (hi - lo) / (hi_v as f64 - lo_v as f64));
                }
                for l in 0..tcn.groups[g].mlp.len() {
                    for idx in 0..tcn.groups[g].mlp[l].weight.len() {
                        let orig = tcn.groups[g].mlp[l].weight[idx];
                        tcn.groups[g].mlp[l].weight[idx] = orig + 1e-4;
                        let hi_v = tcn.groups[g].mlp[l].weight[idx];
                        let hi = loss(&tcn, &embs);
                        tcn.groups[g].mlp[l].weight[idx] = orig - 1e-4;
                        let lo_v = tcn.groups[g].mlp[l].weight[idx];
                        let lo = loss(&tcn, &embs);
                        tcn.groups[g].mlp[l].weight[idx] = orig;
                        check(
                            grads.mlp[g][l].0[idx],
                            (hi - lo) / (hi_v as f64 - lo_v as f64),
                        );
                    }
                }
            }
        }
    }
}
