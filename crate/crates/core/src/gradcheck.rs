//! Randomized gradient verification against central finite differences:
//! the closed-form diversity gradient and the second-order meta-gradient.

use rand::Rng as _;

use crate::bsnet::{channel_margins, diversity_loss_with_margins, DEFAULT_EPSILON};
use crate::dataforge::{sample_episode, synth_dataset, EpisodeConfig, SynthConfig};
use crate::error::Result;
use crate::gnet::{
    meta_outer_objective, meta_task_grad, GNetParams, MetaConfig, MetaOrder,
};
use crate::numkit::{finite_diff_grad, max_rel_err, rng_from_seed, Tensor2};
use crate::par;

/// Finite-difference tolerance for the second-order meta-gradient; looser
/// than the diversity check because the objective is evaluated through an
/// inner optimization step.
pub const META_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub diversity_trials: usize,
    pub diversity_max_rel: f64,
    pub diversity_tol: f64,
    pub meta_rel: f64,
    pub meta_tol: f64,
    pub ok: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "diversity: {} trials, max rel err {:.3e} (tol {:.1e})\nmeta: rel err {:.3e} (tol {:.1e})\nresult: {}",
            self.diversity_trials,
            self.diversity_max_rel,
            self.diversity_tol,
            self.meta_rel,
            self.meta_tol,
            if self.ok { "PASS" } else { "FAIL" }
        )
    }
}

/// Random channel-weight matrix with entries in (0.05, 0.95) and all
/// pairwise gaps above 1e-4, so finite differences never cross a sort kink.
fn sample_no_ties(n: usize, k: usize, rng: &mut crate::numkit::Rng) -> Tensor2 {
    let mut w = Tensor2::zeros(n, k);
    for col in 0..k {
        loop {
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).all(|p| p[1] - p[0] > 1e-4) {
                for (row, &v) in vals.iter().enumerate() {
                    *w.at_mut(row, col) = v;
                }
                break;
            }
        }
    }
    w
}

fn diversity_trial(seed: u64, trial: usize) -> f64 {
    let mut rng = rng_from_seed(seed.wrapping_add(trial as u64));
    let n = [2usize, 3, 5, 8][trial % 4];
    let k = [1usize, 4, 16][(trial / 4) % 3];
    let eph = rng.gen_range(1..=100usize);
    let w = sample_no_ties(n, k, &mut rng);
    let margins = channel_margins(&w, eph, DEFAULT_EPSILON);
    let (_, grad) = diversity_loss_with_margins(&w, &margins);
    // margins frozen at the base point; the loss is then polynomial in w
    let f = |flat: &[f64]| {
        let t = Tensor2 {
            rows: n,
            cols: k,
            data: flat.to_vec(),
        };
        diversity_loss_with_margins(&t, &margins).0
    };
    let fd = finite_diff_grad(f, &w.data, 1e-5).expect("finite differences on a total function");
    max_rel_err(&grad.data, &fd)
}

fn meta_gradient_rel_err(seed: u64) -> Result<f64> {
    let (ds, attrs) = synth_dataset(&SynthConfig {
        num_seen: 6,
        num_unseen: 2,
        per_class: 12,
        k: 5,
        d: 3,
        noise_sigma: 0.3,
        seed,
    })?;
    let cfg = MetaConfig {
        alpha: 1e-2,
        beta: 1e-2,
        tasks_per_episode: 1,
        episodes: 1,
        order: MetaOrder::SecondOrder,
    };
    let ep_cfg = EpisodeConfig {
        way: 3,
        shot: 3,
        query: 3,
    };
    let mut rng = rng_from_seed(seed.wrapping_add(31));
    let episode = sample_episode(&ds, &ep_cfg, &mut rng)?;
    let p = GNetParams::init(ds.k, attrs.d, &mut rng);
    let class_set = ds.seen_classes();
    let analytic = meta_task_grad(&p, &episode, &cfg, &ds, &attrs, &class_set)?;
    let theta = p.param_vec();
    let tasks = [episode];
    let f = |flat: &[f64]| {
        meta_outer_objective(&p, flat, &tasks, cfg.alpha, &ds, &attrs, &class_set).unwrap()
    };
    let fd = finite_diff_grad(f, &theta, 1e-5)?;
    let num: f64 = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    Ok(num / den)
}

/// Runs both verification suites. `tol` bounds the diversity check; the
/// meta check uses `max(tol, META_TOL)`.
pub fn run_gradcheck(trials: usize, tol: f64, seed: u64) -> Result<GradcheckReport> {
    let errs = par::map_range(trials, |t| diversity_trial(seed, t));
    let diversity_max_rel = errs.into_iter().fold(0.0f64, f64::max);
    let meta_rel = meta_gradient_rel_err(seed.wrapping_add(997))?;
    let meta_tol = tol.max(META_TOL);
    Ok(GradcheckReport {
        diversity_trials: trials,
        diversity_max_rel,
        diversity_tol: tol,
        meta_rel,
        meta_tol,
        ok: diversity_max_rel <= tol && meta_rel <= meta_tol,
    })
}
