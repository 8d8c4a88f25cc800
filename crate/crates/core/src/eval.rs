//! Inference and scoring: attribute-space nearest-class prediction for the
//! unseen-only and generalized protocols, per-class accuracy reports, and the
//! calibration sweep.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsnet::Mode;
use crate::dataforge::{AttributeTable, FeatureDataset};
use crate::error::{Error, Result};
use crate::gnet::gnet_forward;
use crate::numkit::dot;
use crate::par;
use crate::pipeline::ModelState;

/// Which embedding feeds the class scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    GNetOnly,
    BsNetOnly,
    Fused,
}

/// Element-wise sum of the two branch embeddings (unit fusion weight).
pub fn fuse_predict(a_g: &[f64], a_s: &[f64]) -> Result<Vec<f64>> {
    if a_g.len() != a_s.len() {
        return Err(Error::Shape(format!(
            "fuse: branch dims {} vs {}",
            a_g.len(),
            a_s.len()
        )));
    }
    Ok(a_g.iter().zip(a_s).map(|(g, s)| g + s).collect())
}

/// Predicted attribute vector for one sample under the chosen branch.
/// Inference mode: deterministic, full gate sharpness, no dropout.
pub fn model_embed(state: &ModelState, x: &[f64], branch: Branch) -> Result<Vec<f64>> {
    match branch {
        Branch::GNetOnly => gnet_forward(&state.gnet, x),
        Branch::BsNetOnly => {
            let (a_s, _, _) = state.bsnet.bsnet_forward(x, 1, Mode::Infer, false, None)?;
            Ok(a_s)
        }
        Branch::Fused => {
            let a_g = gnet_forward(&state.gnet, x)?;
            let (a_s, _, _) = state.bsnet.bsnet_forward(x, 1, Mode::Infer, false, None)?;
            fuse_predict(&a_g, &a_s)
        }
    }
}

/// Unseen-only protocol: highest-scoring unseen class, ties broken toward
/// the lowest class id.
pub fn zsl_predict(a_bar: &[f64], attrs: &AttributeTable, unseen: &[u32]) -> Result<u32> {
    if unseen.is_empty() {
        return Err(Error::Validation("empty candidate class set".into()));
    }
    let mut best: Option<(u32, f64)> = None;
    for &c in unseen {
        let phi = attrs.row(c)?;
        let score = dot(a_bar, phi);
        if best.map_or(true, |(bc, bs)| score > bs || (score == bs && c < bc)) {
            best = Some((c, score));
        }
    }
    Ok(best.unwrap().0)
}

/// Generalized protocol with calibrated stacking: seen-class scores are
/// penalized by `delta` before the joint argmax. Ties break toward the
/// lowest class id.
pub fn gzsl_predict(
    a_bar: &[f64],
    attrs: &AttributeTable,
    seen: &[u32],
    unseen: &[u32],
    delta: f64,
) -> Result<u32> {
    if seen.is_empty() && unseen.is_empty() {
        return Err(Error::Validation("empty candidate class set".into()));
    }
    for s in seen {
        if unseen.contains(s) {
            return Err(Error::Validation(format!(
                "class {s} appears in both seen and unseen sets"
            )));
        }
    }
    let mut scored: Vec<(u32, f64)> = Vec::with_capacity(seen.len() + unseen.len());
    for &c in unseen {
        scored.push((c, dot(a_bar, attrs.row(c)?)));
    }
    for &c in seen {
        scored.push((c, dot(a_bar, attrs.row(c)?) - delta));
    }
    scored.sort_by_key(|&(c, _)| c);
    let mut best = scored[0];
    for &(c, score) in &scored[1..] {
        if score > best.1 {
            best = (c, score);
        }
    }
    Ok(best.0)
}

pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Accuracy figures are per-class Top-1 means, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t_zsl: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub delta: f64,
    pub pruned_count: usize,
    /// Generalized-protocol per-class accuracy, percent, keyed by class id.
    pub per_class: BTreeMap<u32, f64>,
}

fn per_class_top1(pairs: &[(u32, u32)]) -> BTreeMap<u32, f64> {
    let mut totals: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for &(truth, pred) in pairs {
        let e = totals.entry(truth).or_insert((0, 0));
        e.0 += 1;
        if pred == truth {
            e.1 += 1;
        }
    }
    totals
        .into_iter()
        .map(|(c, (n, hit))| (c, 100.0 * hit as f64 / n as f64))
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Unseen-only per-class Top-1 mean (percent) for one branch.
pub fn zsl_top1(
    state: &ModelState,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    branch: Branch,
) -> Result<f64> {
    if ds.split.test_unseen_idx.is_empty() {
        return Err(Error::Validation("no unseen test instances".into()));
    }
    let unseen = ds.unseen_classes();
    let pairs = par::map_collect(&ds.split.test_unseen_idx, |&i| -> Result<(u32, u32)> {
        let a_bar = model_embed(state, &ds.features[i], branch)?;
        Ok((ds.labels[i], zsl_predict(&a_bar, attrs, &unseen)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(mean(per_class_top1(&pairs).values().copied()))
}

/// Full evaluation with the fused embedding: unseen-only accuracy plus the
/// generalized U/S/H triple at calibration offset `delta`.
pub fn evaluate(
    state: &ModelState,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    delta: f64,
) -> Result<EvalReport> {
    ds.validate()?;
    if ds.split.test_unseen_idx.is_empty() || ds.split.test_seen_idx.is_empty() {
        return Err(Error::Validation(
            "evaluation needs both seen and unseen test instances".into(),
        ));
    }
    let seen = ds.seen_classes();
    let unseen = ds.unseen_classes();

    let t_zsl = zsl_top1(state, ds, attrs, Branch::Fused)?;

    let gzsl = |idx: &[usize]| -> Result<Vec<(u32, u32)>> {
        par::map_collect(idx, |&i| -> Result<(u32, u32)> {
            let a_bar = model_embed(state, &ds.features[i], Branch::Fused)?;
            Ok((
                ds.labels[i],
                gzsl_predict(&a_bar, attrs, &seen, &unseen, delta)?,
            ))
        })
        .into_iter()
        .collect()
    };
    let unseen_pairs = gzsl(&ds.split.test_unseen_idx)?;
    let seen_pairs = gzsl(&ds.split.test_seen_idx)?;

    let unseen_pc = per_class_top1(&unseen_pairs);
    let seen_pc = per_class_top1(&seen_pairs);
    let u = mean(unseen_pc.values().copied());
    let s = mean(seen_pc.values().copied());
    let mut per_class = unseen_pc;
    per_class.extend(seen_pc);

    Ok(EvalReport {
        t_zsl,
        u,
        s,
        h: harmonic_mean(u, s),
        delta,
        pruned_count: state.bsnet.gates.pruned_count(),
        per_class,
    })
}

/// Evaluates each calibration offset in turn; rows are `(delta, u, s, h)`.
pub fn sweep_delta(
    state: &ModelState,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    deltas: &[f64],
) -> Result<Vec<(f64, f64, f64, f64)>> {
    deltas
        .iter()
        .map(|&d| {
            let r = evaluate(state, ds, attrs, d)?;
            Ok((d, r.u, r.s, r.h))
        })
        .collect()
}

/// CSV with schema `delta,U,S,H`.
pub fn sweep_csv_string(rows: &[(f64, f64, f64, f64)]) -> String {
    let mut out = String::from("delta,U,S,H\n");
    for (d, u, s, h) in rows {
        out.push_str(&format!("{d},{u},{s},{h}\n"));
    }
    out
}

pub fn write_sweep_csv(rows: &[(f64, f64, f64, f64)], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_csv_string(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng_from_seed;
    use rand::Rng as _;

    fn basis_attrs(c: usize) -> AttributeTable {
        // orthonormal one-hot attributes: score of class c is a_bar[c]
        let rows = (0..c as u32)
            .map(|i| {
                let mut v = vec![0.0; c];
                v[i as usize] = 1.0;
                (i, v)
            })
            .collect();
        AttributeTable::new(c, rows).unwrap()
    }

    #[test]
    fn fuse_is_elementwise_sum() {
        assert_eq!(
            fuse_predict(&[1.0, 2.0], &[0.5, -1.0]).unwrap(),
            vec![1.5, 1.0]
        );
        assert!(matches!(
            fuse_predict(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zsl_picks_highest_unseen_with_low_id_ties() {
        let attrs = basis_attrs(4);
        let unseen = vec![1, 3];
        assert_eq!(
            zsl_predict(&[9.0, 1.0, 0.0, 2.0], &attrs, &unseen).unwrap(),
            3
        );
        // tie between classes 1 and 3 -> lowest id
        assert_eq!(
            zsl_predict(&[9.0, 2.0, 0.0, 2.0], &attrs, &unseen).unwrap(),
            1
        );
        assert!(matches!(
            zsl_predict(&[1.0], &attrs, &[]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn gzsl_zero_delta_is_union_argmax() {
        let attrs = basis_attrs(6);
        let seen = vec![0, 2, 4];
        let unseen = vec![1, 3, 5];
        let mut rng = rng_from_seed(11);
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pred = gzsl_predict(&a, &attrs, &seen, &unseen, 0.0).unwrap();
            let mut arg = 0usize;
            for i in 1..6 {
                if a[i] > a[arg] {
                    arg = i;
                }
            }
            assert_eq!(pred, arg as u32);
        }
    }

    #[test]
    fn gzsl_calibration_shifts_toward_unseen() {
        let attrs = basis_attrs(3);
        let seen = vec![0];
        let unseen = vec![1, 2];
        // seen class wins without calibration
        assert_eq!(
            gzsl_predict(&[1.0, 0.8, 0.2], &attrs, &seen, &unseen, 0.0).unwrap(),
            0
        );
        // delta larger than the margin flips it to the best unseen class
        assert_eq!(
            gzsl_predict(&[1.0, 0.8, 0.2], &attrs, &seen, &unseen, 0.5).unwrap(),
            1
        );
        // huge delta always lands in the unseen set
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = gzsl_predict(&a, &attrs, &seen, &unseen, 100.0).unwrap();
            assert!(unseen.contains(&p));
        }
    }

    #[test]
    fn gzsl_rejects_overlapping_sets() {
        let attrs = basis_attrs(3);
        assert!(matches!(
            gzsl_predict(&[0.0; 3], &attrs, &[0, 1], &[1, 2], 0.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn harmonic_mean_hand_values() {
        assert!((harmonic_mean(61.0, 81.8) - 69.885).abs() < 0.05);
        assert_eq!(harmonic_mean(0.0, 80.0), 0.0);
        assert_eq!(harmonic_mean(50.0, 50.0), 50.0);
    }

    #[test]
    fn per_class_top1_weighs_classes_equally() {
        // class 0: 1/2 correct, class 1: 1/1 correct -> mean 75%
        let pairs = vec![(0, 0), (0, 1), (1, 1)];
        let pc = per_class_top1(&pairs);
        assert_eq!(pc[&0], 50.0);
        assert_eq!(pc[&1], 100.0);
        assert_eq!(mean(pc.values().copied()), 75.0);
    }

    #[test]
    fn evaluate_reports_consistent_h() {
        use crate::dataforge::{synth_dataset, SynthConfig};
        use crate::pipeline::{init_model, TrainPlan};
        let (ds, attrs) = synth_dataset(&SynthConfig {
            num_seen: 5,
            num_unseen: 3,
            per_class: 10,
            k: 8,
            d: 4,
            noise_sigma: 0.1,
            seed: 2,
        })
        .unwrap();
        let plan = TrainPlan::desk_default(0);
        let model = init_model(&plan, ds.k, attrs.d).unwrap();
        let report = evaluate(&model, &ds, &attrs, 0.3).unwrap();
        assert_eq!(report.h, harmonic_mean(report.u, report.s));
        assert_eq!(report.delta, 0.3);
        // huge calibration offset suppresses all seen predictions
        let suppressed = evaluate(&model, &ds, &attrs, 1e6).unwrap();
        assert_eq!(suppressed.s, 0.0);
        assert_eq!(suppressed.h, 0.0);
    }

    #[test]
    fn sweep_emits_one_row_per_delta() {
        use crate::dataforge::{synth_dataset, SynthConfig};
        use crate::pipeline::{init_model, TrainPlan};
        let (ds, attrs) = synth_dataset(&SynthConfig {
            num_seen: 4,
            num_unseen: 2,
            per_class: 10,
            k: 6,
            d: 3,
            noise_sigma: 0.1,
            seed: 4,
        })
        .unwrap();
        let model = init_model(&TrainPlan::desk_default(1), ds.k, attrs.d).unwrap();
        let rows = sweep_delta(&model, &ds, &attrs, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 3);
        let csv = sweep_csv_string(&rows);
        assert!(csv.starts_with("delta,U,S,H\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
