//! Balanced specialization branch: N sub-modules producing channel-weighted
//! embeddings, the self-margined diversity loss with closed-form gradients,
//! annealed dataset-level gates, and the fusion head.
//!
//! The diversity loss drives, per channel, all but one sub-module weight
//! towards 0 and the largest towards 1. Its margin is recomputed from the
//! current weights every call and carries no gradient.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::dataforge::AttributeTable;
use crate::error::{Error, Result};
use crate::gnet::loss_g;
use crate::numkit::{relu, sigmoid, LinearLayer, Rng, Tensor2};

/// Default spread threshold below which a channel is degenerate.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// One specialization sub-module: a rectified linear tail (K -> K) and a
/// logistic balance generator (2K -> K).
#[derive(Debug, Clone)]
pub struct BsnSubModule {
    pub tail: LinearLayer,
    pub balance_gen: LinearLayer,
}

impl BsnSubModule {
    pub fn init(k: usize, rng: &mut Rng) -> Self {
        BsnSubModule {
            tail: LinearLayer::init_uniform(k, k, rng),
            balance_gen: LinearLayer::init_uniform(k, 2 * k, rng),
        }
    }
}

/// Sub-module forward: specialized embedding, channel weights in (0,1), and
/// the weighted embedding.
pub fn bsn_forward(
    m: &BsnSubModule,
    e_shared: &[f64],
    e_g: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if e_shared.len() != e_g.len() {
        return Err(Error::Shape("bsn_forward: embedding lengths differ".into()));
    }
    let z = m.tail.forward_vec(e_shared)?;
    let e_l: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
    let mut fb_in = e_l.clone();
    fb_in.extend_from_slice(e_g);
    let u = m.balance_gen.forward_vec(&fb_in)?;
    let w_t: Vec<f64> = u.iter().map(|&v| sigmoid(v)).collect();
    let e_t: Vec<f64> = w_t.iter().zip(&e_l).map(|(w, e)| w * e).collect();
    Ok((e_l, w_t, e_t))
}

/// Self-calculated margin for one channel's weights across sub-modules.
/// Returns `None` when the channel is degenerate (spread <= epsilon).
pub fn compute_margin(channel_weights: &[f64], eph: usize, epsilon: f64) -> Option<f64> {
    debug_assert!(channel_weights.len() >= 2 && eph >= 1);
    let max = channel_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = channel_weights.iter().cloned().fold(f64::INFINITY, f64::min);
    if max - min <= epsilon {
        return None;
    }
    let mean = channel_weights.iter().sum::<f64>() / channel_weights.len() as f64;
    let a = if mean + epsilon < max { mean + epsilon } else { mean };
    let b = (1.0 - 1.0 / (1.0 + eph as f64)) * max;
    Some(a.max(b))
}

/// Margins for every channel of an N x K weight matrix.
pub fn channel_margins(w: &Tensor2, eph: usize, epsilon: f64) -> Vec<Option<f64>> {
    let (n, k) = (w.rows, w.cols);
    (0..k)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|i| w.at(i, c)).collect();
            compute_margin(&col, eph, epsilon)
        })
        .collect()
}

/// Diversity loss value only, computed term-by-term from its definition with
/// the given frozen margins. This is the independent route the closed-form
/// gradients are checked against.
pub fn diversity_loss_value(w: &Tensor2, margins: &[Option<f64>]) -> f64 {
    let (n, k) = (w.rows, w.cols);
    let mut loss = 0.0;
    for c in 0..k {
        let Some(mrg) = margins[c] else { continue };
        for i in 0..n {
            let wi = w.at(i, c);
            let w_hat = (0..n)
                .filter(|&m| m != i)
                .map(|m| w.at(m, c))
                .fold(f64::NEG_INFINITY, f64::max);
            loss += wi * w_hat - mrg * (wi + w_hat);
        }
    }
    loss
}

/// Closed-form gradients with the given frozen margins. Per channel, weights
/// are ordered; the N-2 smallest get `w_max - mrg`, the second-largest gets
/// `2 (w_max - mrg)`, and the largest gets
/// `sum_{i<N} w_i + w_{N-1} - N mrg`. Ties at the max resolve to the lowest
/// sub-module index.
pub fn diversity_loss_with_margins(w: &Tensor2, margins: &[Option<f64>]) -> (f64, Tensor2) {
    let (n, k) = (w.rows, w.cols);
    let mut grad = Tensor2::zeros(n, k);
    for c in 0..k {
        let Some(mrg) = margins[c] else { continue };
        // Ascending by weight; equal weights order by descending index so the
        // slot holding the max is the lowest-index attainer.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            w.at(a, c)
                .partial_cmp(&w.at(b, c))
                .unwrap()
                .then(b.cmp(&a))
        });
        let max_i = order[n - 1];
        let second_i = order[n - 2];
        let w_max = w.at(max_i, c);
        let w_second = w.at(second_i, c);
        let sum_rest: f64 = order[..n - 1].iter().map(|&i| w.at(i, c)).sum();
        for &i in &order[..n.saturating_sub(2)] {
            *grad.at_mut(i, c) = w_max - mrg;
        }
        *grad.at_mut(second_i, c) = 2.0 * (w_max - mrg);
        *grad.at_mut(max_i, c) = sum_rest + w_second - n as f64 * mrg;
    }
    (diversity_loss_value(w, margins), grad)
}

/// Diversity loss with self-calculated margins: returns the loss, the
/// closed-form gradient (margins frozen), and the margins used.
pub fn diversity_loss(
    w: &Tensor2,
    eph: usize,
    epsilon: f64,
) -> Result<(f64, Tensor2, Vec<Option<f64>>)> {
    if w.rows < 2 {
        return Err(Error::Shape("diversity loss needs N >= 2 sub-modules".into()));
    }
    let margins = channel_margins(w, eph, epsilon);
    let (loss, grad) = diversity_loss_with_margins(w, &margins);
    Ok((loss, grad, margins))
}

/// Trainable per-sub-module gates with annealing parameters.
#[derive(Debug, Clone)]
pub struct DatasetGates {
    pub w_d: Vec<f64>,
    pub grad_w_d: Vec<f64>,
    pub s_max: f64,
    pub eph_max: usize,
}

impl DatasetGates {
    pub fn init(n: usize, s_max: f64, eph_max: usize, rng: &mut Rng) -> Result<Self> {
        let gates = DatasetGates {
            w_d: (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect(),
            grad_w_d: vec![0.0; n],
            s_max,
            eph_max,
        };
        gates.validate()?;
        Ok(gates)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_max <= 1.0 {
            return Err(Error::Config(format!("s_max {} must be > 1", self.s_max)));
        }
        if self.eph_max < 2 {
            return Err(Error::Config(format!("eph_max {} must be >= 2", self.eph_max)));
        }
        Ok(())
    }

    /// Gate values at a given sharpness.
    pub fn values(&self, s: f64) -> Vec<f64> {
        self.w_d.iter().map(|&w| sigmoid(s * w)).collect()
    }

    /// Count of sub-modules with gate <= 0.5 at full sharpness.
    pub fn pruned_count(&self) -> usize {
        self.values(self.s_max).iter().filter(|&&g| g <= 0.5).count()
    }
}

/// Linear annealing of the gate sharpness over epochs 1..=eph_max.
pub fn anneal_s(eph: usize, gates: &DatasetGates) -> Result<f64> {
    gates.validate()?;
    if eph < 1 || eph > gates.eph_max {
        return Err(Error::Domain(format!(
            "epoch {} outside 1..={}",
            eph, gates.eph_max
        )));
    }
    let inv = 1.0 / gates.s_max;
    Ok(inv + (gates.s_max - inv) * (eph as f64 - 1.0) / (gates.eph_max as f64 - 1.0))
}

/// Scale an embedding by the logistic gate of one sub-module.
pub fn apply_gate(e_t: &[f64], w_d_i: f64, s: f64) -> Vec<f64> {
    let gate = sigmoid(s * w_d_i);
    e_t.iter().map(|&v| gate * v).collect()
}

/// Two-layer fusion head (N*K -> K -> d) with dropout after the second layer
/// in training mode.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub layer1: LinearLayer,
    pub layer2: LinearLayer,
    pub dropout_rate: f64,
}

impl FusionHead {
    pub fn init(n: usize, k: usize, d: usize, dropout_rate: f64, rng: &mut Rng) -> Self {
        FusionHead {
            layer1: LinearLayer::init_uniform(k, n * k, rng),
            layer2: LinearLayer::init_uniform(d, k, rng),
            dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z: Vec<Vec<f64>>,
    e_l: Vec<Vec<f64>>,
    fb_in: Vec<Vec<f64>>,
    w_t: Vec<Vec<f64>>,
    e_t: Vec<Vec<f64>>,
    gate: Vec<f64>,
    e_s: Vec<f64>,
    h: Vec<f64>,
    dropout_mask: Option<Vec<f64>>,
    s: f64,
    unit_weights: bool,
}

/// The whole specialization branch.
#[derive(Debug, Clone)]
pub struct BsNet {
    pub subs: Vec<BsnSubModule>,
    pub gates: DatasetGates,
    pub head: FusionHead,
    pub k: usize,
    pub d: usize,
}

impl BsNet {
    /// Sub-modules are seeded individually so their generated weights differ
    /// from the start.
    pub fn init(
        n: usize,
        k: usize,
        d: usize,
        s_max: f64,
        eph_max: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = crate::numkit::rng_from_seed(seed);
        let subs = (0..n)
            .map(|i| {
                let mut sub_rng = crate::numkit::rng_from_seed(seed.wrapping_add(1 + i as u64));
                BsnSubModule::init(k, &mut sub_rng)
            })
            .collect();
        let gates = DatasetGates::init(n, s_max, eph_max, &mut rng)?;
        let head = FusionHead::init(n, k, d, dropout_rate, &mut rng);
        Ok(BsNet {
            subs,
            gates,
            head,
            k,
            d,
        })
    }

    pub fn n(&self) -> usize {
        self.subs.len()
    }

    /// Forward at an explicit sharpness. `unit_weights` bypasses the balance
    /// generators (all channel weights forced to 1). Dropout draws from
    /// `dropout_rng` and is active only in train mode.
    pub fn forward_with_s(
        &self,
        x: &[f64],
        s: f64,
        mode: Mode,
        unit_weights: bool,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<(Vec<f64>, Tensor2, ForwardCache)> {
        let n = self.n();
        let k = self.k;
        if x.len() != k {
            return Err(Error::Shape(format!(
                "bsnet forward: input length {} != K {}",
                x.len(),
                k
            )));
        }
        let mut cache = ForwardCache {
            z: Vec::with_capacity(n),
            e_l: Vec::with_capacity(n),
            fb_in: Vec::with_capacity(n),
            w_t: Vec::with_capacity(n),
            e_t: Vec::with_capacity(n),
            gate: self.gates.values(s),
            e_s: vec![0.0; n * k],
            h: Vec::new(),
            dropout_mask: None,
            s,
            unit_weights,
        };
        let mut w_all = Tensor2::zeros(n, k);
        for (i, sub) in self.subs.iter().enumerate() {
            let z = sub.tail.forward_vec(x)?;
            let e_l: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
            let (fb_in, w_t) = if unit_weights {
                (Vec::new(), vec![1.0; k])
            } else {
                let mut fb_in = e_l.clone();
                fb_in.extend_from_slice(x);
                let u = sub.balance_gen.forward_vec(&fb_in)?;
                let w_t: Vec<f64> = u.iter().map(|&v| sigmoid(v)).collect();
                (fb_in, w_t)
            };
            let e_t: Vec<f64> = w_t.iter().zip(&e_l).map(|(w, e)| w * e).collect();
            let gate = cache.gate[i];
            for (j, &v) in e_t.iter().enumerate() {
                cache.e_s[i * k + j] = gate * v;
            }
            w_all.data[i * k..(i + 1) * k].copy_from_slice(&w_t);
            cache.z.push(z);
            cache.e_l.push(e_l);
            cache.fb_in.push(fb_in);
            cache.w_t.push(w_t);
            cache.e_t.push(e_t);
        }
        cache.h = self.head.layer1.forward_vec(&cache.e_s)?;
        let a_pre = self.head.layer2.forward_vec(&cache.h)?;
        let a_s = if mode == Mode::Train && self.head.dropout_rate > 0.0 {
            let rng = dropout_rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("train-mode forward needs a dropout rng".into()))?;
            let keep = 1.0 - self.head.dropout_rate;
            let mask: Vec<f64> = (0..self.d)
                .map(|_| {
                    if rng.gen_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let out = a_pre.iter().zip(&mask).map(|(a, m)| a * m).collect();
            cache.dropout_mask = Some(mask);
            out
        } else {
            a_pre
        };
        Ok((a_s, w_all, cache))
    }

    /// Forward per the training/inference contract: annealed sharpness during
    /// training, full sharpness at inference.
    pub fn bsnet_forward(
        &self,
        x: &[f64],
        eph: usize,
        mode: Mode,
        unit_weights: bool,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(Vec<f64>, Tensor2, ForwardCache)> {
        let s = match mode {
            Mode::Train => anneal_s(eph, &self.gates)?,
            Mode::Infer => self.gates.s_max,
        };
        self.forward_with_s(x, s, mode, unit_weights, dropout_rng)
    }

    /// Accumulates parameter gradients for one sample. `grad_w_extra` is an
    /// additional gradient on the channel-weight matrix (the diversity term,
    /// already scaled); it must be absent when weights were forced to 1.
    pub fn backward(
        &mut self,
        x: &[f64],
        cache: &ForwardCache,
        grad_a_s: &[f64],
        grad_w_extra: Option<&Tensor2>,
    ) -> Result<()> {
        let n = self.n();
        let k = self.k;
        if cache.unit_weights && grad_w_extra.is_some() {
            return Err(Error::Config(
                "diversity gradient with bypassed channel weights".into(),
            ));
        }
        let grad_a_pre: Vec<f64> = match &cache.dropout_mask {
            Some(mask) => grad_a_s.iter().zip(mask).map(|(g, m)| g * m).collect(),
            None => grad_a_s.to_vec(),
        };
        let grad_h = self.head.layer2.backward_vec(&cache.h, &grad_a_pre)?;
        let grad_e_s = self.head.layer1.backward_vec(&cache.e_s, &grad_h)?;
        for i in 0..n {
            let sub = &mut self.subs[i];
            let grad_e_d = &grad_e_s[i * k..(i + 1) * k];
            let gate = cache.gate[i];
            let grad_gate: f64 = cache.e_t[i]
                .iter()
                .zip(grad_e_d)
                .map(|(e, g)| e * g)
                .sum();
            self.gates.grad_w_d[i] += grad_gate * gate * (1.0 - gate) * cache.s;
            let grad_e_t: Vec<f64> = grad_e_d.iter().map(|&g| gate * g).collect();

            let mut grad_e_l: Vec<f64> = cache.w_t[i]
                .iter()
                .zip(&grad_e_t)
                .map(|(w, g)| w * g)
                .collect();
            if !cache.unit_weights {
                let mut grad_w: Vec<f64> = cache.e_l[i]
                    .iter()
                    .zip(&grad_e_t)
                    .map(|(e, g)| e * g)
                    .collect();
                if let Some(extra) = grad_w_extra {
                    for (gw, &ex) in grad_w.iter_mut().zip(extra.row(i)) {
                        *gw += ex;
                    }
                }
                let grad_u: Vec<f64> = grad_w
                    .iter()
                    .zip(&cache.w_t[i])
                    .map(|(g, &w)| g * w * (1.0 - w))
                    .collect();
                let grad_fb_in = sub.balance_gen.backward_vec(&cache.fb_in[i], &grad_u)?;
                for (ge, &g) in grad_e_l.iter_mut().zip(&grad_fb_in[..k]) {
                    *ge += g;
                }
                // gradient into the shared trunk input is dropped (frozen)
            }
            let grad_z: Vec<f64> = grad_e_l
                .iter()
                .zip(&cache.z[i])
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
            sub.tail.backward_vec(x, &grad_z)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for sub in &mut self.subs {
            sub.tail.zero_grad();
            sub.balance_gen.zero_grad();
        }
        self.gates.grad_w_d.iter_mut().for_each(|g| *g = 0.0);
        self.head.layer1.zero_grad();
        self.head.layer2.zero_grad();
    }

    /// SGD update. In the instance-balance-bypassed stage the balance
    /// generators hold zero gradients, so stepping them is a no-op.
    pub fn sgd_step(&mut self, lr: f64) {
        for sub in &mut self.subs {
            sub.tail.sgd_step(lr);
            sub.balance_gen.sgd_step(lr);
        }
        for (w, g) in self.gates.w_d.iter_mut().zip(&self.gates.grad_w_d) {
            *w -= lr * g;
        }
        self.head.layer1.sgd_step(lr);
        self.head.layer2.sgd_step(lr);
    }

    pub fn param_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for sub in &self.subs {
            sub.tail.append_params(&mut v);
            sub.balance_gen.append_params(&mut v);
        }
        v.extend_from_slice(&self.gates.w_d);
        self.head.layer1.append_params(&mut v);
        self.head.layer2.append_params(&mut v);
        v
    }

    pub fn grad_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for sub in &self.subs {
            sub.tail.append_grads(&mut v);
            sub.balance_gen.append_grads(&mut v);
        }
        v.extend_from_slice(&self.gates.grad_w_d);
        self.head.layer1.append_grads(&mut v);
        self.head.layer2.append_grads(&mut v);
        v
    }

    pub fn set_param_vec(&mut self, flat: &[f64]) {
        let mut off = 0;
        for sub in &mut self.subs {
            off += sub.tail.load_params(&flat[off..]);
            off += sub.balance_gen.load_params(&flat[off..]);
        }
        let n = self.gates.w_d.len();
        self.gates.w_d.copy_from_slice(&flat[off..off + n]);
        off += n;
        off += self.head.layer1.load_params(&flat[off..]);
        self.head.layer2.load_params(&flat[off..]);
    }
}

/// Classification-plus-diversity objective for one sample.
pub struct BsnetLossOut {
    pub total: f64,
    pub l_s: f64,
    pub l_div: f64,
    pub grad_a_s: Vec<f64>,
    /// eta-scaled diversity gradient on the channel-weight matrix, when any
    /// channel was non-degenerate.
    pub grad_w: Option<Tensor2>,
}

pub fn bsnet_loss(
    a_s: &[f64],
    y: u32,
    attrs: &AttributeTable,
    class_set: &[u32],
    w: &Tensor2,
    eph: usize,
    eta: f64,
) -> Result<BsnetLossOut> {
    if eta < 0.0 {
        return Err(Error::Config("eta must be >= 0".into()));
    }
    let (l_s, grad_a_s) = loss_g(a_s, y, attrs, class_set)?;
    let (l_div, grad_div, margins) = diversity_loss(w, eph, DEFAULT_EPSILON)?;
    let grad_w = if eta > 0.0 && margins.iter().any(Option::is_some) {
        let mut g = grad_div;
        g.data.iter_mut().for_each(|v| *v *= eta);
        Some(g)
    } else {
        None
    };
    Ok(BsnetLossOut {
        total: l_s + eta * l_div,
        l_s,
        l_div,
        grad_a_s,
        grad_w,
    })
}

/// Descent simulation on free weights: random logits are squashed once to
/// give an initial weight matrix in (0,1), then `steps` projected SGD steps
/// run on the diversity loss alone, with the margin epoch advancing linearly
/// from 1 to `eph_end`. Returns the final weight matrix.
pub fn winner_take_all_sim(
    n: usize,
    k: usize,
    steps: usize,
    lr: f64,
    eph_end: usize,
    seed: u64,
) -> Result<Tensor2> {
    const CLAMP: f64 = 1e-4;
    let mut rng = crate::numkit::rng_from_seed(seed);
    let mut w = Tensor2::zeros(n, k);
    for v in w.data.iter_mut() {
        *v = sigmoid(rng.sample::<f64, _>(StandardNormal));
    }
    let per_eph = (steps / eph_end).max(1);
    for step in 0..steps {
        let eph = (step / per_eph + 1).min(eph_end);
        let (_, grad_w, _) = diversity_loss(&w, eph, DEFAULT_EPSILON)?;
        for (v, &g) in w.data.iter_mut().zip(&grad_w.data) {
            *v = (*v - lr * g).clamp(CLAMP, 1.0 - CLAMP);
        }
    }
    Ok(w)
}
