//! Generalization branch: a linear feature-to-attribute predictor trained
//! first conventionally, then episodically with one-inner-step meta updates.
//!
//! The compatibility loss normalizes over all seen classes, also inside
//! episodes. Second-order meta gradients go through the inner step exactly,
//! using the closed-form Hessian-vector product of the linear model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataforge::{AttributeTable, Episode, FeatureDataset};
use crate::error::{Error, Result};
use crate::numkit::{dot, softmax_ce, LinearLayer, Rng};
use crate::par;

/// Parameters of the generalization head: one linear layer, K -> d.
#[derive(Debug, Clone)]
pub struct GNetParams {
    pub f_g: LinearLayer,
}

impl GNetParams {
    pub fn init(k: usize, d: usize, rng: &mut Rng) -> Self {
        GNetParams {
            f_g: LinearLayer::init_uniform(d, k, rng),
        }
    }

    pub fn param_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.f_g.num_params());
        self.f_g.append_params(&mut v);
        v
    }

    pub fn set_param_vec(&mut self, flat: &[f64]) {
        self.f_g.load_params(flat);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaOrder {
    FirstOrder,
    SecondOrder,
}

/// Meta-training hyper-parameters: inner/outer learning rates and episode
/// shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tasks_per_episode: usize,
    pub episodes: usize,
    pub order: MetaOrder,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "meta config alpha={} beta={} out of range",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Projects a feature vector into attribute space.
pub fn gnet_forward(p: &GNetParams, e_g: &[f64]) -> Result<Vec<f64>> {
    p.f_g.forward_vec(e_g)
}

/// Attribute-compatibility cross-entropy: logits are inner products of the
/// predicted attribute vector with each candidate class attribute. Returns
/// the loss and its gradient with respect to the prediction.
pub fn loss_g(
    a_g: &[f64],
    y: u32,
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<(f64, Vec<f64>)> {
    let target = class_set
        .iter()
        .position(|&c| c == y)
        .ok_or_else(|| Error::Domain(format!("label {y} not in class set")))?;
    let logits: Vec<f64> = class_set
        .iter()
        .map(|&c| attrs.row(c).map(|phi| dot(a_g, phi)))
        .collect::<Result<_>>()?;
    let (loss, grad_logits) = softmax_ce(&logits, target)?;
    let mut grad_a = vec![0.0; a_g.len()];
    for (gc, &c) in grad_logits.iter().zip(class_set) {
        for (ga, &phi) in grad_a.iter_mut().zip(attrs.row(c)?) {
            *ga += gc * phi;
        }
    }
    Ok((loss, grad_a))
}

/// Mean compatibility loss over `samples`, accumulating parameter gradients
/// scaled by `1/len` into `p.f_g`.
fn batch_loss_and_grad(
    p: &mut GNetParams,
    ds: &FeatureDataset,
    samples: &[usize],
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<f64> {
    let inv = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for &i in samples {
        let x = &ds.features[i];
        let a_g = p.f_g.forward_vec(x)?;
        let (loss, grad_a) = loss_g(&a_g, ds.labels[i], attrs, class_set)?;
        total += loss;
        let scaled: Vec<f64> = grad_a.iter().map(|g| g * inv).collect();
        p.f_g.backward_vec(x, &scaled)?;
    }
    Ok(total * inv)
}

/// Mean loss only, no gradients.
fn batch_loss(
    p: &GNetParams,
    ds: &FeatureDataset,
    samples: &[usize],
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in samples {
        let a_g = p.f_g.forward_vec(&ds.features[i])?;
        let (loss, _) = loss_g(&a_g, ds.labels[i], attrs, class_set)?;
        total += loss;
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch SGD on the compatibility loss over the training split. Returns
/// the per-epoch mean loss trace.
pub fn pretrain_gnet(
    p: &mut GNetParams,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if ds.split.train_idx.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let class_set = ds.seen_classes();
    let mut order = ds.split.train_idx.clone();
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(batch_size) {
            p.f_g.zero_grad();
            let mean = batch_loss_and_grad(p, ds, batch, attrs, &class_set)?;
            p.f_g.sgd_step(lr);
            epoch_loss += mean * batch.len() as f64;
            count += batch.len();
        }
        trace.push(epoch_loss / count as f64);
    }
    Ok(trace)
}

/// Flat gradient of the mean compatibility loss at `theta`.
fn grad_at(
    template: &GNetParams,
    theta: &[f64],
    ds: &FeatureDataset,
    samples: &[usize],
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<Vec<f64>> {
    let mut p = template.clone();
    p.set_param_vec(theta);
    p.f_g.zero_grad();
    batch_loss_and_grad(&mut p, ds, samples, attrs, class_set)?;
    let mut g = Vec::with_capacity(theta.len());
    p.f_g.append_grads(&mut g);
    Ok(g)
}

/// Hessian-vector product of the mean compatibility loss. The model is
/// linear, so the logit Jacobian is constant and
/// `Hv = J^T (diag(p) - p p^T) J v` is exact.
fn hvp_at(
    template: &GNetParams,
    theta: &[f64],
    v: &[f64],
    ds: &FeatureDataset,
    samples: &[usize],
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<Vec<f64>> {
    let mut p = template.clone();
    p.set_param_vec(theta);
    let d = p.f_g.out_dim();
    let k = p.f_g.in_dim();
    let (vw, vb) = v.split_at(d * k);
    let mut hv = vec![0.0; v.len()];
    let inv = 1.0 / samples.len() as f64;
    for &i in samples {
        let x = &ds.features[i];
        let a_g = p.f_g.forward_vec(x)?;
        let logits: Vec<f64> = class_set
            .iter()
            .map(|&c| attrs.row(c).map(|phi| dot(&a_g, phi)))
            .collect::<Result<_>>()?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        // (J v)_c = phi_c . (V x + v_b)
        let mut va = vec![0.0; d];
        for m in 0..d {
            va[m] = vb[m] + dot(&vw[m * k..(m + 1) * k], x);
        }
        let jv: Vec<f64> = class_set
            .iter()
            .map(|&c| attrs.row(c).map(|phi| dot(&va, phi)))
            .collect::<Result<_>>()?;
        let p_dot_jv: f64 = probs.iter().zip(&jv).map(|(a, b)| a * b).sum();
        // r = sum_c q_c phi_c with q = diag(p) Jv - p (p.Jv)
        let mut r = vec![0.0; d];
        for ((&prob, &jvc), &c) in probs.iter().zip(&jv).zip(class_set) {
            let q = prob * (jvc - p_dot_jv);
            let phi = attrs.row(c)?;
            for m in 0..d {
                r[m] += q * phi[m];
            }
        }
        for m in 0..d {
            for j in 0..k {
                hv[m * k + j] += inv * r[m] * x[j];
            }
            hv[d * k + m] += inv * r[m];
        }
    }
    Ok(hv)
}

/// One-inner-step second-order meta gradient:
/// `g = (I - alpha H_tr(theta)) grad_val(theta - alpha grad_tr(theta))`.
pub fn second_order_meta_grad(
    theta: &[f64],
    alpha: f64,
    grad_tr: impl Fn(&[f64]) -> Result<Vec<f64>>,
    hvp_tr: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    grad_val: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let gtr = grad_tr(theta)?;
    let inner: Vec<f64> = theta
        .iter()
        .zip(&gtr)
        .map(|(&t, &g)| t - alpha * g)
        .collect();
    let gval = grad_val(&inner)?;
    let hv = hvp_tr(theta, &gval)?;
    Ok(gval
        .iter()
        .zip(&hv)
        .map(|(&g, &h)| g - alpha * h)
        .collect())
}

/// Per-task meta gradient (sum over tasks is applied by the caller's outer
/// update). Exposed for the gradient-check oracle.
pub fn meta_task_grad(
    p: &GNetParams,
    task: &Episode,
    cfg: &MetaConfig,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<Vec<f64>> {
    let theta = p.param_vec();
    let tr: Vec<usize> = task.d_tr.iter().map(|&(i, _)| i).collect();
    let val: Vec<usize> = task.d_val.iter().map(|&(i, _)| i).collect();
    match cfg.order {
        MetaOrder::FirstOrder => {
            let gtr = grad_at(p, &theta, ds, &tr, attrs, class_set)?;
            let inner: Vec<f64> = theta
                .iter()
                .zip(&gtr)
                .map(|(&t, &g)| t - cfg.alpha * g)
                .collect();
            grad_at(p, &inner, ds, &val, attrs, class_set)
        }
        MetaOrder::SecondOrder => second_order_meta_grad(
            &theta,
            cfg.alpha,
            |th| grad_at(p, th, ds, &tr, attrs, class_set),
            |th, v| hvp_at(p, th, v, ds, &tr, attrs, class_set),
            |th| grad_at(p, th, ds, &val, attrs, class_set),
        ),
    }
}

/// One meta episode: per-task inner adaptation, then a single outer update
/// with the summed task gradients. Task gradients are computed in parallel
/// and reduced in task order.
pub fn meta_episode(
    p: &mut GNetParams,
    tasks: &[Episode],
    cfg: &MetaConfig,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
) -> Result<()> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Sampling("meta episode with no tasks".into()));
    }
    let class_set = ds.seen_classes();
    let p_ref: &GNetParams = p;
    let grads = par::map_collect(tasks, |task| {
        meta_task_grad(p_ref, task, cfg, ds, attrs, &class_set)
    });
    let mut theta = p.param_vec();
    for g in grads {
        let g = g?;
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= cfg.beta * gi;
        }
    }
    p.set_param_vec(&theta);
    Ok(())
}

/// Outer objective of one episode, used by the finite-difference oracle:
/// `sum_j L_val_j(theta - alpha grad L_tr_j(theta))`.
pub fn meta_outer_objective(
    p: &GNetParams,
    theta: &[f64],
    tasks: &[Episode],
    alpha: f64,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    class_set: &[u32],
) -> Result<f64> {
    let mut total = 0.0;
    for task in tasks {
        let tr: Vec<usize> = task.d_tr.iter().map(|&(i, _)| i).collect();
        let val: Vec<usize> = task.d_val.iter().map(|&(i, _)| i).collect();
        let gtr = grad_at(p, theta, ds, &tr, attrs, class_set)?;
        let inner: Vec<f64> = theta
            .iter()
            .zip(&gtr)
            .map(|(&t, &g)| t - alpha * g)
            .collect();
        let mut probe = p.clone();
        probe.set_param_vec(&inner);
        total += batch_loss(&probe, ds, &val, attrs, class_set)?;
    }
    Ok(total)
}
