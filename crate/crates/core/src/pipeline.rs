//! Staged training orchestration: conventional pretraining of the
//! generalization head, episodic meta-training, then specialization-branch
//! training under the Sequential or Parallel strategy. Also checkpoint
//! serialization and the training log.
//!
//! Training is a pure function of (plan, dataset, seed): a single seeded RNG
//! drives every shuffle, episode draw, and dropout mask in a fixed order, so
//! repeated runs are bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsnet::{anneal_s, bsnet_loss, BsNet, Mode};
use crate::dataforge::{sample_episode, AttributeTable, EpisodeConfig, FeatureDataset};
use crate::error::{Error, Result};
use crate::gnet::{loss_g, meta_episode, pretrain_gnet, GNetParams, MetaConfig, MetaOrder};
use crate::numkit::{rng_from_seed, LinearLayer, Rng, Tensor2};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Sequential,
    Parallel,
}

/// Full training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub pretrain_epochs: usize,
    pub meta_episodes: usize,
    pub eph_max: usize,
    /// Sequential only: epochs of whole-branch training after annealing.
    pub stage3b_epochs: usize,
    pub lr: f64,
    pub eta: f64,
    pub meta: MetaConfig,
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_submodules")]
    pub n_submodules: usize,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_n_submodules() -> usize {
    4
}
fn default_s_max() -> f64 {
    5.0
}
fn default_dropout() -> f64 {
    0.4
}
fn default_batch_size() -> usize {
    32
}

impl TrainPlan {
    /// Desk-scale defaults: N=4, eph_max=50, 50 pretrain epochs, 200 meta
    /// episodes of 4 tasks, lr 1e-3, eta 1e-3.
    pub fn desk_default(seed: u64) -> Self {
        TrainPlan {
            strategy: Strategy::Sequential,
            pretrain_epochs: 50,
            meta_episodes: 200,
            eph_max: 50,
            stage3b_epochs: 20,
            lr: 1e-3,
            eta: 1e-3,
            meta: MetaConfig {
                alpha: 1e-2,
                beta: 1e-2,
                tasks_per_episode: 4,
                episodes: 200,
                order: MetaOrder::FirstOrder,
            },
            episode: EpisodeConfig {
                way: 10,
                shot: 5,
                query: 3,
            },
            seed,
            n_submodules: 4,
            s_max: 5.0,
            dropout_rate: 0.4,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.eta < 0.0 {
            return Err(Error::Config("eta must be >= 0".into()));
        }
        if self.n_submodules < 1 {
            return Err(Error::Config("need at least one sub-module".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.meta.validate()?;
        self.episode.validate()
    }
}

/// All trainable parameters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub gnet: GNetParams,
    pub bsnet: BsNet,
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.bsnet.k
    }

    pub fn d(&self) -> usize {
        self.bsnet.d
    }

    pub fn param_vec(&self) -> Vec<f64> {
        let mut v = self.gnet.param_vec();
        v.extend(self.bsnet.param_vec());
        v
    }
}

/// Deterministic initialization for a given plan and data dimensions.
pub fn init_model(plan: &TrainPlan, k: usize, d: usize) -> Result<ModelState> {
    let mut rng = rng_from_seed(plan.seed);
    let gnet = GNetParams::init(k, d, &mut rng);
    let bsnet = BsNet::init(
        plan.n_submodules,
        k,
        d,
        plan.s_max,
        plan.eph_max.max(2),
        plan.dropout_rate,
        plan.seed.wrapping_add(1_000_003),
    )?;
    Ok(ModelState { gnet, bsnet })
}

/// One logged specialization-training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub stage: String,
    pub l_s: f64,
    pub l_div: f64,
    pub s: f64,
    pub gates: Vec<f64>,
}

impl TrainLogRow {
    /// Pruned sub-modules at this epoch: gate at or below one half. The gate
    /// logit sign is sharpness-independent, so this matches full-sharpness
    /// pruning.
    pub fn pruned_count(&self) -> usize {
        self.gates.iter().filter(|&&g| g <= 0.5).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub pretrain_loss: Vec<f64>,
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// CSV with schema `epoch,stage,L_s,L_div,s,gate_0..gate_{N-1}`.
    pub fn to_csv_string(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.gates.len());
        let mut out = String::from("epoch,stage,L_s,L_div,s");
        for i in 0..n {
            out.push_str(&format!(",gate_{i}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                row.epoch, row.stage, row.l_s, row.l_div, row.s
            ));
            for g in &row.gates {
                out.push_str(&format!(",{g}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn stage_err(stage: &'static str, e: Error) -> Error {
    Error::Stage {
        stage,
        source: Box::new(e),
    }
}

/// One epoch of specialization-branch training at sharpness `s`, with the
/// diversity margin driven by `margin_eph`. `unit_weights` bypasses the
/// balance generators and the diversity loss entirely. Returns the epoch
/// mean classification and diversity losses.
#[allow(clippy::too_many_arguments)]
fn train_bsnet_epoch(
    model: &mut ModelState,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
    class_set: &[u32],
    s: f64,
    margin_eph: usize,
    eta: f64,
    lr: f64,
    batch_size: usize,
    unit_weights: bool,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    use rand::seq::SliceRandom;
    let mut order = ds.split.train_idx.clone();
    order.shuffle(rng);
    let mut sum_ls = 0.0;
    let mut sum_ldiv = 0.0;
    for batch in order.chunks(batch_size) {
        model.bsnet.zero_grad();
        let inv = 1.0 / batch.len() as f64;
        for &i in batch {
            let x = &ds.features[i];
            let y = ds.labels[i];
            let (a_s, w, cache) =
                model
                    .bsnet
                    .forward_with_s(x, s, Mode::Train, unit_weights, Some(rng))?;
            if unit_weights {
                let (l_s, grad_a) = loss_g(&a_s, y, attrs, class_set)?;
                let scaled: Vec<f64> = grad_a.iter().map(|g| g * inv).collect();
                model.bsnet.backward(x, &cache, &scaled, None)?;
                sum_ls += l_s;
            } else {
                let out = bsnet_loss(&a_s, y, attrs, class_set, &w, margin_eph, eta)?;
                let scaled: Vec<f64> = out.grad_a_s.iter().map(|g| g * inv).collect();
                let grad_w = out.grad_w.map(|mut g| {
                    g.data.iter_mut().for_each(|v| *v *= inv);
                    g
                });
                model.bsnet.backward(x, &cache, &scaled, grad_w.as_ref())?;
                sum_ls += out.l_s;
                sum_ldiv += out.l_div;
            }
        }
        model.bsnet.sgd_step(lr);
    }
    let count = order.len() as f64;
    Ok((sum_ls / count, sum_ldiv / count))
}

/// Runs the staged protocol and returns the trained state plus the log.
/// The generalization head is frozen once specialization training starts.
pub fn run_training(
    plan: &TrainPlan,
    ds: &FeatureDataset,
    attrs: &AttributeTable,
) -> Result<(ModelState, TrainLog)> {
    plan.validate()?;
    ds.validate()?;
    let mut model = init_model(plan, ds.k, attrs.d)?;
    let mut log = TrainLog::default();
    let mut rng = rng_from_seed(plan.seed.wrapping_add(7_777));
    let class_set = ds.seen_classes();

    // Stage 1: conventional pretraining of the generalization head.
    log.pretrain_loss = pretrain_gnet(
        &mut model.gnet,
        ds,
        attrs,
        plan.pretrain_epochs,
        plan.lr,
        plan.batch_size,
        &mut rng,
    )
    .map_err(|e| stage_err("pretrain", e))?;

    // Stage 2: episodic meta-training.
    for _ in 0..plan.meta_episodes {
        let tasks: Vec<_> = (0..plan.meta.tasks_per_episode)
            .map(|_| sample_episode(ds, &plan.episode, &mut rng))
            .collect::<Result<_>>()
            .map_err(|e| stage_err("meta", e))?;
        meta_episode(&mut model.gnet, &tasks, &plan.meta, ds, attrs)
            .map_err(|e| stage_err("meta", e))?;
    }

    // Stage 3: specialization branch; the generalization head stays frozen.
    match plan.strategy {
        Strategy::Parallel => {
            for eph in 1..=plan.eph_max {
                let s = anneal_s(eph, &model.bsnet.gates).map_err(|e| stage_err("stage3", e))?;
                let (l_s, l_div) = train_bsnet_epoch(
                    &mut model,
                    ds,
                    attrs,
                    &class_set,
                    s,
                    eph,
                    plan.eta,
                    plan.lr,
                    plan.batch_size,
                    false,
                    &mut rng,
                )
                .map_err(|e| stage_err("stage3", e))?;
                log.rows.push(TrainLogRow {
                    epoch: eph,
                    stage: "3".into(),
                    l_s,
                    l_div,
                    s,
                    gates: model.bsnet.gates.values(s),
                });
            }
        }
        Strategy::Sequential => {
            for eph in 1..=plan.eph_max {
                let s = anneal_s(eph, &model.bsnet.gates).map_err(|e| stage_err("stage3a", e))?;
                let (l_s, _) = train_bsnet_epoch(
                    &mut model,
                    ds,
                    attrs,
                    &class_set,
                    s,
                    eph,
                    plan.eta,
                    plan.lr,
                    plan.batch_size,
                    true,
                    &mut rng,
                )
                .map_err(|e| stage_err("stage3a", e))?;
                log.rows.push(TrainLogRow {
                    epoch: eph,
                    stage: "3a".into(),
                    l_s,
                    l_div: 0.0,
                    s,
                    gates: model.bsnet.gates.values(s),
                });
            }
            // Annealing is complete; hold full sharpness and train the whole
            // branch. The margin epoch restarts with this stage.
            let s = model.bsnet.gates.s_max;
            for j in 1..=plan.stage3b_epochs {
                let (l_s, l_div) = train_bsnet_epoch(
                    &mut model,
                    ds,
                    attrs,
                    &class_set,
                    s,
                    j,
                    plan.eta,
                    plan.lr,
                    plan.batch_size,
                    false,
                    &mut rng,
                )
                .map_err(|e| stage_err("stage3b", e))?;
                log.rows.push(TrainLogRow {
                    epoch: plan.eph_max + j,
                    stage: "3b".into(),
                    l_s,
                    l_div,
                    s,
                    gates: model.bsnet.gates.values(s),
                });
            }
        }
    }
    Ok((model, log))
}

/// Serialized parameters of one linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl From<&LinearLayer> for LayerParams {
    fn from(l: &LinearLayer) -> Self {
        LayerParams {
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        }
    }
}

impl LayerParams {
    fn into_layer(self, out_dim: usize, in_dim: usize) -> Result<LinearLayer> {
        if self.weight.rows != out_dim || self.weight.cols != in_dim {
            return Err(Error::Shape(format!(
                "checkpoint layer is {}x{}, expected {}x{}",
                self.weight.rows, self.weight.cols, out_dim, in_dim
            )));
        }
        LinearLayer::from_params(self.weight, self.bias)
    }
}

/// On-disk model checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub s_max: f64,
    pub eph_max: usize,
    pub dropout_rate: f64,
    pub plan: TrainPlan,
    pub f_g: LayerParams,
    pub tails: Vec<LayerParams>,
    pub balance_gens: Vec<LayerParams>,
    pub w_d: Vec<f64>,
    pub fusion1: LayerParams,
    pub fusion2: LayerParams,
}

pub fn save_checkpoint(state: &ModelState, plan: &TrainPlan, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        n: state.bsnet.n(),
        k: state.k(),
        d: state.d(),
        s_max: state.bsnet.gates.s_max,
        eph_max: state.bsnet.gates.eph_max,
        dropout_rate: state.bsnet.head.dropout_rate,
        plan: plan.clone(),
        f_g: (&state.gnet.f_g).into(),
        tails: state.bsnet.subs.iter().map(|s| (&s.tail).into()).collect(),
        balance_gens: state
            .bsnet
            .subs
            .iter()
            .map(|s| (&s.balance_gen).into())
            .collect(),
        w_d: state.bsnet.gates.w_d.clone(),
        fusion1: (&state.bsnet.head.layer1).into(),
        fusion2: (&state.bsnet.head.layer2).into(),
    };
    let json = serde_json::to_string_pretty(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, TrainPlan)> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} unsupported",
            ckpt.version
        )));
    }
    if ckpt.tails.len() != ckpt.n || ckpt.balance_gens.len() != ckpt.n || ckpt.w_d.len() != ckpt.n {
        return Err(Error::Shape("checkpoint sub-module count mismatch".into()));
    }
    let (n, k, d) = (ckpt.n, ckpt.k, ckpt.d);
    let gnet = GNetParams {
        f_g: ckpt.f_g.into_layer(d, k)?,
    };
    let subs = ckpt
        .tails
        .into_iter()
        .zip(ckpt.balance_gens)
        .map(|(tail, bgen)| {
            Ok(crate::bsnet::BsnSubModule {
                tail: tail.into_layer(k, k)?,
                balance_gen: bgen.into_layer(k, 2 * k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bsnet = BsNet {
        subs,
        gates: crate::bsnet::DatasetGates {
            grad_w_d: vec![0.0; n],
            w_d: ckpt.w_d,
            s_max: ckpt.s_max,
            eph_max: ckpt.eph_max,
        },
        head: crate::bsnet::FusionHead {
            layer1: ckpt.fusion1.into_layer(k, n * k)?,
            layer2: ckpt.fusion2.into_layer(d, k)?,
            dropout_rate: ckpt.dropout_rate,
        },
        k,
        d,
    };
    Ok((ModelState { gnet, bsnet }, ckpt.plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{synth_dataset, SynthConfig};

    fn tiny_plan(seed: u64) -> TrainPlan {
        TrainPlan {
            strategy: Strategy::Sequential,
            pretrain_epochs: 3,
            meta_episodes: 2,
            eph_max: 4,
            stage3b_epochs: 2,
            lr: 1e-2,
            eta: 1e-3,
            meta: MetaConfig {
                alpha: 1e-2,
                beta: 1e-2,
                tasks_per_episode: 2,
                episodes: 2,
                order: MetaOrder::FirstOrder,
            },
            episode: EpisodeConfig {
                way: 2,
                shot: 2,
                query: 2,
            },
            seed,
            n_submodules: 3,
            s_max: 5.0,
            dropout_rate: 0.4,
            batch_size: 8,
        }
    }

    fn tiny_data() -> (FeatureDataset, AttributeTable) {
        synth_dataset(&SynthConfig {
            num_seen: 6,
            num_unseen: 2,
            per_class: 10,
            k: 6,
            d: 4,
            noise_sigma: 0.2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (ds, attrs) = tiny_data();
        let mut plan = tiny_plan(1);
        plan.pretrain_epochs = 0;
        plan.meta_episodes = 0;
        plan.eph_max = 0;
        plan.stage3b_epochs = 0;
        let (model, log) = run_training(&plan, &ds, &attrs).unwrap();
        let init = init_model(&plan, ds.k, attrs.d).unwrap();
        assert_eq!(model.param_vec(), init.param_vec());
        assert!(log.rows.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, attrs) = tiny_data();
        let plan = tiny_plan(9);
        let (m1, l1) = run_training(&plan, &ds, &attrs).unwrap();
        let (m2, l2) = run_training(&plan, &ds, &attrs).unwrap();
        assert_eq!(m1.param_vec(), m2.param_vec());
        assert_eq!(l1, l2);
    }

    #[test]
    fn gnet_frozen_in_stage3() {
        let (ds, attrs) = tiny_data();
        let mut plan = tiny_plan(2);
        plan.pretrain_epochs = 0;
        plan.meta_episodes = 0;
        let (model, _) = run_training(&plan, &ds, &attrs).unwrap();
        let init = init_model(&plan, ds.k, attrs.d).unwrap();
        assert_eq!(model.gnet.param_vec(), init.gnet.param_vec());
        assert_ne!(model.bsnet.param_vec(), init.bsnet.param_vec());
    }

    #[test]
    fn sequential_stage3a_logs_zero_ldiv_and_annealed_s() {
        let (ds, attrs) = tiny_data();
        let plan = tiny_plan(3);
        let (model, log) = run_training(&plan, &ds, &attrs).unwrap();
        let rows_3a: Vec<_> = log.rows.iter().filter(|r| r.stage == "3a").collect();
        assert_eq!(rows_3a.len(), plan.eph_max);
        for (i, row) in rows_3a.iter().enumerate() {
            assert_eq!(row.l_div, 0.0);
            let expect = anneal_s(i + 1, &model.bsnet.gates).unwrap();
            assert_eq!(row.s, expect);
        }
        let rows_3b: Vec<_> = log.rows.iter().filter(|r| r.stage == "3b").collect();
        assert_eq!(rows_3b.len(), plan.stage3b_epochs);
        assert!(rows_3b.iter().all(|r| r.s == plan.s_max));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_errors() {
        let (ds, attrs) = tiny_data();
        let mut plan = tiny_plan(4);
        plan.pretrain_epochs = 1;
        plan.meta_episodes = 0;
        plan.eph_max = 2;
        plan.stage3b_epochs = 1;
        let (model, _) = run_training(&plan, &ds, &attrs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &plan, &path).unwrap();
        let (loaded, plan2) = load_checkpoint(&path).unwrap();
        assert_eq!(model.param_vec(), loaded.param_vec());
        assert_eq!(plan, plan2);

        // corrupted JSON
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // wrong K: doctor the weight shape
        save_checkpoint(&model, &plan, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["k"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_json_is_byte_stable() {
        let (ds, attrs) = tiny_data();
        let plan = tiny_plan(8);
        let dir = tempfile::tempdir().unwrap();
        let (m1, _) = run_training(&plan, &ds, &attrs).unwrap();
        let (m2, _) = run_training(&plan, &ds, &attrs).unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&m1, &plan, &p1).unwrap();
        save_checkpoint(&m2, &plan, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
