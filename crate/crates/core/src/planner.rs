//! Wrist planner: maps a category id and a goal window to `T` bimanual
//! wrist poses.
//!
//! Each output is an offset from a grasp-standoff prior attached to the
//! corresponding window state. Priors are per category and per hand, fitted
//! as the mean object-frame wrist pose over the training demos, so a zero
//! network output already lands on a sensible grasp.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::env::WristAction;
use crate::error::{Error, Result};
use crate::expert::{Demo, DemoSet, Split};
use crate::geom::{mean_rotation, quat_angle, rot_frobenius_error, translation_error, ObjectState, Pose, Rot, Vec3};
use crate::net::{adam_step, AdamConfig, AdamState, Attention, AttnCache, Checkpoint, Mlp, MlpCache};
use crate::rng::{rng_from, stream, Rng};
use crate::traj::{goal_window_with_gaps, relative_state_features, GoalWindow, MAX_EXTRA_GAP, WINDOW_LEN};

const TOKEN_DIM: usize = 10;
const STATE_DIM: usize = 8;
const OUT_PER_ENTRY: usize = 14;
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Window length T.
    pub window: usize,
    pub category_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub d_k: usize,
    /// Fraction of training windows drawn with random gaps.
    pub random_gap_prob: f64,
    pub holdout_frac: f64,
    pub finetune_epochs: usize,
    pub finetune_lr_scale: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            window: WINDOW_LEN,
            category_count: 5,
            epochs: 12,
            batch_size: 64,
            lr: 1e-3,
            hidden: 128,
            d_k: 16,
            random_gap_prob: 0.5,
            holdout_frac: 0.1,
            finetune_epochs: 2,
            finetune_lr_scale: 0.1,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("planner window must be >= 1".into()));
        }
        if self.category_count < 1 || self.batch_size < 1 || self.hidden < 1 || self.d_k < 1 {
            return Err(Error::Config("planner sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Fallback standoff for categories without data: wrists beside the object.
fn generic_prior() -> [Pose; 2] {
    let y = Vec3::y();
    [
        Pose::new(Vec3::new(-0.12, 0.0, 0.05), Rot::from_axis_angle(&y, std::f64::consts::FRAC_PI_2)),
        Pose::new(Vec3::new(0.12, 0.0, 0.05), Rot::from_axis_angle(&y, -std::f64::consts::FRAC_PI_2)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Planner {
    pub window: usize,
    pub category_count: usize,
    pub attn: Attention,
    pub mlp: Mlp,
    /// Object-frame wrist standoff per category and hand.
    pub priors: Vec<[Pose; 2]>,
    /// Categories seen during training.
    pub trained: Vec<bool>,
}

struct Caches {
    attn: AttnCache,
    mlp: MlpCache,
}

#[derive(Serialize, Deserialize)]
struct PlannerMeta {
    window: usize,
    category_count: usize,
    d_k: usize,
    mlp_sizes: Vec<usize>,
    priors: Vec<[Pose; 2]>,
    trained: Vec<bool>,
}

impl Planner {
    pub fn new(cfg: &PlannerConfig, rng: &mut Rng) -> Result<Planner> {
        cfg.validate()?;
        let t = cfg.window;
        let attn = Attention::new(TOKEN_DIM, cfg.d_k, rng);
        let input = t * TOKEN_DIM + t * cfg.d_k + cfg.category_count + STATE_DIM;
        let mlp = Mlp::new(&[input, cfg.hidden, cfg.hidden, t * OUT_PER_ENTRY], rng, 0.01);
        Ok(Planner {
            window: t,
            category_count: cfg.category_count,
            attn,
            mlp,
            priors: vec![generic_prior(); cfg.category_count],
            trained: vec![false; cfg.category_count],
        })
    }

    pub fn n_params(&self) -> usize {
        self.attn.n_params() + self.mlp.n_params()
    }

    /// Resolves the category actually used for `category_id`.
    pub fn resolve_category(&self, category_id: usize, force: bool) -> Result<usize> {
        let known = category_id < self.category_count && self.trained[category_id];
        if known {
            return Ok(category_id);
        }
        if force {
            if let Some(c) = self.trained.iter().position(|&b| b) {
                return Ok(c);
            }
        }
        Err(Error::UnknownCategory {
            id: category_id,
            count: self.category_count,
        })
    }

    fn tokens(&self, window: &GoalWindow, current: &ObjectState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.window * TOKEN_DIM);
        for (s, gap) in window.states.iter().zip(&window.gaps) {
            x.extend_from_slice(&relative_state_features(s, current));
            x.push(s.joint_or_zero());
            x.push(*gap as f64 / (1 + MAX_EXTRA_GAP) as f64);
        }
        x
    }

    fn mlp_input(&self, cat: usize, tokens: &[f64], attn_out: &[f64], current: &ObjectState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.mlp.input_dim());
        x.extend_from_slice(tokens);
        x.extend_from_slice(attn_out);
        x.extend((0..self.category_count).map(|c| if c == cat { 1.0 } else { 0.0 }));
        x.extend_from_slice(&current.pose().to_array());
        x.push(current.joint_or_zero());
        x
    }

    fn check_window(&self, window: &GoalWindow) -> Result<()> {
        if window.len() != self.window {
            return Err(Error::Shape {
                expected: self.window,
                got: window.len(),
                context: "planner window".into(),
            });
        }
        Ok(())
    }

    fn run(&self, cat: usize, window: &GoalWindow, current: &ObjectState) -> Result<(Vec<f64>, Caches)> {
        self.check_window(window)?;
        let tokens = self.tokens(window, current);
        let (a, attn) = self.attn.forward(&tokens)?;
        let x = self.mlp_input(cat, &tokens, &a, current);
        let (y, mlp) = self.mlp.forward(&x)?;
        Ok((y, Caches { attn, mlp }))
    }

    fn prior_pose(&self, cat: usize, s: &ObjectState, hand: usize) -> Pose {
        s.pose().compose(&self.priors[cat][hand])
    }

    fn decode(&self, cat: usize, window: &GoalWindow, y: &[f64]) -> Vec<WristAction> {
        window
            .states
            .iter()
            .zip(y.chunks_exact(OUT_PER_ENTRY))
            .map(|(s, out)| {
                let hand = |h: usize| {
                    let o = &out[h * 7..h * 7 + 7];
                    let rot = Rot::new(1.0 + o[3], o[4], o[5], o[6]).unwrap_or(Rot::IDENTITY);
                    self.prior_pose(cat, s, h)
                        .compose(&Pose::new(Vec3::new(o[0], o[1], o[2]), rot))
                };
                WristAction::new(hand(0), hand(1))
            })
            .collect()
    }

    /// `T` world-frame wrist actions for the window.
    pub fn forward(
        &self,
        category_id: usize,
        window: &GoalWindow,
        current: &ObjectState,
        force_category: bool,
    ) -> Result<Vec<WristAction>> {
        let cat = self.resolve_category(category_id, force_category)?;
        let (y, _) = self.run(cat, window, current)?;
        Ok(self.decode(cat, window, &y))
    }

    /// Regression target for the raw network output.
    fn encode_target(&self, cat: usize, window: &GoalWindow, wrists: &[WristAction]) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.window * OUT_PER_ENTRY);
        for (s, w) in window.states.iter().zip(wrists) {
            for (h, p) in w.hands().iter().enumerate() {
                let rel = self.prior_pose(cat, s, h).inverse().compose(p);
                let q = rel.rotation.to_array();
                // canonical form already has w >= 0: the hemisphere of identity
                y.extend_from_slice(&[
                    rel.translation.x,
                    rel.translation.y,
                    rel.translation.z,
                    q[0] - 1.0,
                    q[1],
                    q[2],
                    q[3],
                ]);
            }
        }
        y
    }

    /// Loss of one sample; accumulates gradients into `grad` when given.
    fn sample_loss(&self, s: &Sample, grad: Option<&mut [f64]>) -> Result<f64> {
        let (y, caches) = self.run(s.cat, &s.window, &s.current)?;
        let target = self.encode_target(s.cat, &s.window, &s.targets);
        let n = y.len() as f64;
        let loss = y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        if let Some(g) = grad {
            let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let na = self.attn.n_params();
            let (ga, gm) = g.split_at_mut(na);
            let dx = self.mlp.backward_into(&caches.mlp, &dy, gm);
            let t = self.window;
            let mut dtok = dx[..t * TOKEN_DIM].to_vec();
            let dattn = &dx[t * TOKEN_DIM..t * TOKEN_DIM + t * self.attn.d_k];
            let dtok_attn = self.attn.backward_into(&caches.attn, dattn, ga);
            for (a, b) in dtok.iter_mut().zip(dtok_attn) {
                *a += b;
            }
        }
        Ok(loss)
    }

    fn params_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.attn.params, &mut self.mlp.params)
    }

    pub fn save(&self, path: &Path, config_hash: &str, seed: u64) -> Result<()> {
        let meta = PlannerMeta {
            window: self.window,
            category_count: self.category_count,
            d_k: self.attn.d_k,
            mlp_sizes: self.mlp.sizes().to_vec(),
            priors: self.priors.clone(),
            trained: self.trained.clone(),
        };
        let mut ck = Checkpoint::new("planner", config_hash, seed, serde_json::to_value(meta)?);
        ck.push("attn", &[3, self.attn.d_k, self.attn.d_in], &self.attn.params);
        ck.push("mlp", &[self.mlp.n_params()], &self.mlp.params);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Planner> {
        let ck = Checkpoint::load(path)?;
        if ck.meta.kind != "planner" {
            return Err(Error::Invalid(format!("{} is not a planner checkpoint", path.display())));
        }
        let meta: PlannerMeta = serde_json::from_value(ck.meta.extra.clone())?;
        let attn = Attention {
            d_in: TOKEN_DIM,
            d_k: meta.d_k,
            params: ck.get("attn")?.to_vec(),
        };
        let mlp = Mlp::from_params(&meta.mlp_sizes, ck.get("mlp")?.to_vec())?;
        Ok(Planner {
            window: meta.window,
            category_count: meta.category_count,
            attn,
            mlp,
            priors: meta.priors,
            trained: meta.trained,
        })
    }
}

/// Shorthand for [`Planner::forward`].
pub fn planner_forward(
    p: &Planner,
    category_id: usize,
    window: &GoalWindow,
    current: &ObjectState,
) -> Result<Vec<WristAction>> {
    p.forward(category_id, window, current, false)
}

#[derive(Clone, Debug)]
struct Sample {
    cat: usize,
    window: GoalWindow,
    current: ObjectState,
    targets: Vec<WristAction>,
}

fn make_sample(d: &Demo, cat: usize, t: usize, gaps: &[usize]) -> Sample {
    let window = goal_window_with_gaps(&d.goal, t, gaps);
    let targets = window.indices.iter().map(|&i| d.wrist_poses[i]).collect();
    Sample {
        cat,
        window,
        current: d.object_states[t],
        targets,
    }
}

fn draw_gaps(t: usize, rng: &mut Rng, random_prob: f64) -> Vec<usize> {
    if rng.random_bool(random_prob.clamp(0.0, 1.0)) {
        (0..t).map(|_| 1 + rng.random_range(0..=MAX_EXTRA_GAP)).collect()
    } else {
        vec![1; t]
    }
}

/// Fits per-category standoff priors as mean object-frame wrist poses.
pub fn fit_priors(p: &mut Planner, demos: &[&Demo]) {
    for c in 0..p.category_count {
        let mut rels: [Vec<Pose>; 2] = [Vec::new(), Vec::new()];
        for d in demos.iter().filter(|d| d.category_id == c) {
            for (s, w) in d.object_states.iter().zip(&d.wrist_poses) {
                for (h, wp) in w.hands().iter().enumerate() {
                    rels[h].push(s.pose().inverse().compose(wp));
                }
            }
        }
        if rels[0].is_empty() {
            continue;
        }
        let mean = |v: &[Pose]| {
            let t = v.iter().fold(Vec3::zeros(), |a, p| a + p.translation) / v.len() as f64;
            let r: Vec<Rot> = v.iter().map(|p| p.rotation).collect();
            Pose::new(t, mean_rotation(&r).unwrap_or(Rot::IDENTITY))
        };
        p.priors[c] = [mean(&rels[0]), mean(&rels[1])];
        p.trained[c] = true;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    /// Mean training loss per epoch; entry 0 is the loss before training.
    pub epoch_loss: Vec<f64>,
    pub holdout_initial: f64,
    pub holdout_final: f64,
}

fn batch_grad(p: &Planner, batch: &[Sample]) -> Result<(Vec<f64>, f64)> {
    let n = p.n_params();
    let parts: Vec<Result<(Vec<f64>, f64)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n];
            let mut l = 0.0;
            for s in chunk {
                l += p.sample_loss(s, Some(&mut g))?;
            }
            Ok((g, l))
        })
        .collect();
    let mut g = vec![0.0; n];
    let mut loss = 0.0;
    for part in parts {
        let (pg, pl) = part?;
        for (a, b) in g.iter_mut().zip(pg) {
            *a += b;
        }
        loss += pl;
    }
    let k = batch.len() as f64;
    g.iter_mut().for_each(|v| *v /= k);
    Ok((g, loss / k))
}

fn mean_loss(p: &Planner, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<Result<f64>> = samples.par_iter().map(|s| p.sample_loss(s, None)).collect();
    let mut tot = 0.0;
    for l in losses {
        tot += l?;
    }
    Ok(tot / samples.len() as f64)
}

fn build_samples(p: &Planner, demos: &[&Demo], rng: &mut Rng, random_prob: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for d in demos {
        d.validate()?;
        let cat = p.resolve_category(d.category_id, false)?;
        for t in 0..d.length {
            let gaps = draw_gaps(p.window, rng, random_prob);
            out.push(make_sample(d, cat, t, &gaps));
        }
    }
    Ok(out)
}

fn optimize(
    p: &mut Planner,
    train: &[Sample],
    epochs: usize,
    cfg: &PlannerConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut st_a = AdamState::new(p.attn.n_params());
    let mut st_m = AdamState::new(p.mlp.n_params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut tot = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let (g, l) = batch_grad(p, &batch)?;
            let na = p.attn.n_params();
            let (pa, pm) = p.params_mut();
            adam_step(pa, &g[..na], &mut st_a, &adam)?;
            adam_step(pm, &g[na..], &mut st_m, &adam)?;
            tot += l;
            batches += 1;
        }
        curve.push(tot / batches.max(1) as f64);
    }
    Ok(curve)
}

/// Behavior cloning on the trained split of `data`.
pub fn train_bc(data: &DemoSet, cfg: &PlannerConfig, seed: u64) -> Result<(Planner, TrainCurve)> {
    let demos = data.split(Split::Trained);
    if demos.is_empty() {
        return Err(Error::Invalid("no trained demos to clone".into()));
    }
    let mut rng = rng_from(seed, &[stream::PLANNER]);
    let mut p = Planner::new(cfg, &mut rng)?;
    fit_priors(&mut p, &demos);
    let mut samples = build_samples(&p, &demos, &mut rng, cfg.random_gap_prob)?;
    samples.shuffle(&mut rng);
    let n_hold = ((samples.len() as f64) * cfg.holdout_frac).round() as usize;
    let holdout = samples.split_off(samples.len() - n_hold);
    let initial = mean_loss(&p, &samples)?;
    let holdout_initial = mean_loss(&p, &holdout)?;
    let mut epoch_loss = vec![initial];
    epoch_loss.extend(optimize(&mut p, &samples, cfg.epochs, cfg, cfg.lr, &mut rng)?);
    let holdout_final = mean_loss(&p, &holdout)?;
    log::info!("planner bc: loss {initial:.3e} -> {:.3e}", epoch_loss.last().unwrap());
    Ok((
        p,
        TrainCurve {
            epoch_loss,
            holdout_initial,
            holdout_final,
        },
    ))
}

/// Continues behavior cloning on `original` plus `harvested` at a reduced
/// learning rate. An empty harvest leaves the planner untouched.
pub fn finetune(
    p: &Planner,
    original: &[&Demo],
    harvested: &[Demo],
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<Planner> {
    if harvested.is_empty() {
        return Ok(p.clone());
    }
    let mut out = p.clone();
    let mut rng = rng_from(seed, &[stream::PLANNER, 1]);
    let mut all: Vec<&Demo> = original.to_vec();
    all.extend(harvested.iter());
    let samples = build_samples(&out, &all, &mut rng, cfg.random_gap_prob)?;
    optimize(&mut out, &samples, cfg.finetune_epochs, cfg, cfg.lr * cfg.finetune_lr_scale, &mut rng)?;
    Ok(out)
}

/// Mean BC loss of `p` on `demos` (unit gaps).
pub fn bc_loss(p: &Planner, demos: &[&Demo]) -> Result<f64> {
    let mut rng = rng_from(0, &[]);
    let s = build_samples(p, demos, &mut rng, 0.0)?;
    mean_loss(p, &s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OeMetric {
    Angle,
    Frobenius,
}

impl OeMetric {
    pub fn name(&self) -> &'static str {
        match self {
            OeMetric::Angle => "angle",
            OeMetric::Frobenius => "frobenius",
        }
    }

    pub fn error(&self, a: &Rot, b: &Rot) -> f64 {
        match self {
            OeMetric::Angle => quat_angle(a, b),
            OeMetric::Frobenius => rot_frobenius_error(a, b),
        }
    }
}

/// Cumulative per-sequence errors; hands are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceError {
    pub demo_index: usize,
    pub steps: usize,
    pub te_cum_cm: f64,
    pub oe_cum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerReport {
    pub split: Split,
    pub metric: OeMetric,
    pub sequences: Vec<SequenceError>,
    /// Means over sequences.
    pub te_cum_cm: f64,
    pub oe_cum: f64,
    /// Mean per-step TE over all evaluated steps (cm).
    pub te_per_step_cm: f64,
}

/// Errors of predicted step-1 wrists against `demo` wrists, summed over
/// all window positions.
pub fn sequence_error(
    predicted: &[WristAction],
    reference: &[WristAction],
    metric: OeMetric,
) -> (f64, f64) {
    let mut te = 0.0;
    let mut oe = 0.0;
    for (p, r) in predicted.iter().zip(reference) {
        for (a, b) in p.hands().iter().zip(r.hands()) {
            te += translation_error(&a.translation, &b.translation) / 2.0;
            oe += metric.error(&a.rotation, &b.rotation) / 2.0;
        }
    }
    (te, oe)
}

/// Step-1 predictions over every window position of `d`.
pub fn predict_sequence(p: &Planner, d: &Demo, force_category: bool) -> Result<(Vec<WristAction>, Vec<WristAction>)> {
    let gaps = vec![1; p.window];
    let mut pred = Vec::with_capacity(d.length);
    let mut refs = Vec::with_capacity(d.length);
    for t in 0..d.length {
        let w = goal_window_with_gaps(&d.goal, t, &gaps);
        let out = p.forward(d.category_id, &w, &d.object_states[t], force_category)?;
        pred.push(out[0]);
        refs.push(d.wrist_poses[w.indices[0]]);
    }
    Ok((pred, refs))
}

pub fn eval_planner(p: &Planner, data: &DemoSet, split: Split, metric: OeMetric) -> Result<PlannerReport> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("split {} is empty", split.name())));
    }
    let force = split == Split::UnseenObj;
    let rows: Vec<Result<SequenceError>> = idx
        .par_iter()
        .map(|&i| {
            let d = &data.demos[i];
            let (pred, refs) = predict_sequence(p, d, force)?;
            let (te, oe) = sequence_error(&pred, &refs, metric);
            Ok(SequenceError {
                demo_index: i,
                steps: d.length,
                te_cum_cm: te,
                oe_cum: oe,
            })
        })
        .collect();
    let sequences = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = sequences.len() as f64;
    let steps: usize = sequences.iter().map(|s| s.steps).sum();
    let te_tot: f64 = sequences.iter().map(|s| s.te_cum_cm).sum();
    Ok(PlannerReport {
        split,
        metric,
        te_cum_cm: te_tot / n,
        oe_cum: sequences.iter().map(|s| s.oe_cum).sum::<f64>() / n,
        te_per_step_cm: te_tot / steps as f64,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SimConfig;
    use crate::expert::{default_categories, plan_expert};
    use crate::traj::GoalTrajectory;

    fn one_demo() -> Demo {
        let cfg = SimConfig::default();
        let spec = default_categories().remove(0);
        let (_, g) = crate::expert::reference_task(120).unwrap();
        plan_expert(&cfg, &spec, &g).unwrap()
    }

    #[test]
    fn zero_output_lands_on_prior() {
        let cfg = PlannerConfig::default();
        let mut p = Planner::new(&cfg, &mut rng_from(0, &[])).unwrap();
        p.mlp.params.iter_mut().for_each(|v| *v = 0.0);
        let d = one_demo();
        fit_priors(&mut p, &[&d]);
        let w = goal_window_with_gaps(&d.goal, 60, &[1; WINDOW_LEN]);
        let out = p.forward(0, &w, &d.object_states[60], false).unwrap();
        assert_eq!(out.len(), WINDOW_LEN);
        for (k, a) in out.iter().enumerate() {
            // rigid box: the fitted prior reproduces the expert exactly
            let e = &d.wrist_poses[w.indices[k]];
            assert!((a.left.translation - e.left.translation).norm() < 1e-9);
            assert!(quat_angle(&a.right.rotation, &e.right.rotation) < 1e-7);
        }
        assert!(matches!(p.forward(3, &w, &d.object_states[0], false), Err(Error::UnknownCategory { .. })));
        assert!(p.forward(3, &w, &d.object_states[0], true).is_ok());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let cfg = PlannerConfig {
            hidden: 8,
            d_k: 4,
            window: 3,
            ..PlannerConfig::default()
        };
        let mut p = Planner::new(&cfg, &mut rng_from(4, &[])).unwrap();
        p.mlp = Mlp::new(p.mlp.sizes(), &mut rng_from(5, &[]), 1.0);
        let d = one_demo();
        fit_priors(&mut p, &[&d]);
        let s = make_sample(&d, 0, 70, &[1, 3, 2]);
        let mut g = vec![0.0; p.n_params()];
        p.sample_loss(&s, Some(&mut g)).unwrap();
        let h = 1e-6;
        let na = p.attn.n_params();
        for i in (0..p.n_params()).step_by(7) {
            let mut q = p.clone();
            let bump = |q: &mut Planner, v: f64| {
                if i < na {
                    q.attn.params[i] += v
                } else {
                    q.mlp.params[i - na] += v
                }
            };
            bump(&mut q, h);
            let lp = q.sample_loss(&s, None).unwrap();
            bump(&mut q, -2.0 * h);
            let lm = q.sample_loss(&s, None).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn metric_arithmetic() {
        let a = WristAction::new(Pose::IDENTITY, Pose::IDENTITY);
        let shifted = Pose::from_translation(Vec3::new(0.01, 0.0, 0.0));
        let b = WristAction::new(shifted, shifted);
        let (te, oe) = sequence_error(&vec![b; 200], &vec![a; 200], OeMetric::Angle);
        assert!((te - 200.0).abs() < 1e-9);
        assert_eq!(oe, 0.0);
    }

    #[test]
    fn empty_split_is_rejected() {
        let p = Planner::new(&PlannerConfig::default(), &mut rng_from(0, &[])).unwrap();
        assert!(train_bc(&DemoSet::default(), &PlannerConfig::default(), 0).is_err());
        assert!(eval_planner(&p, &DemoSet::default(), Split::Trained, OeMetric::Angle).is_err());
        let _ = GoalTrajectory::new(vec![ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None); 2], 0).unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Planner::new(&PlannerConfig::default(), &mut rng_from(2, &[])).unwrap();
        fit_priors(&mut p, &[&one_demo()]);
        let path = dir.path().join("planner.bin");
        p.save(&path, "h", 2).unwrap();
        let back = Planner::load(&path).unwrap();
        assert_eq!(back.attn, p.attn);
        assert_eq!(back.mlp, p.mlp);
        assert_eq!(back.priors, p.priors);
        assert_eq!(back, p);
    }
}
