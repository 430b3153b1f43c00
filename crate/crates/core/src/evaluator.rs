//! Solution sets from the trained flow and from a damped-least-squares
//! baseline, accuracy and collision metrics, and the runtime benchmark.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{decode_flags, mix_seed, DECODE_THRESHOLD};
use crate::encoder::pose_embedding;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::robot::{wrap_angle, Configuration, Pose, RobotModel};
use crate::trainer::Checkpoint;
use crate::world::{env_collision, rasterize, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flow,
    Classical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub config: Configuration,
    /// `(self, env)` flags decoded from the model, when it emits them.
    pub decoded: Option<(bool, bool)>,
    /// `(self, env)` flags recomputed by the geometric oracles.
    pub truth: (bool, bool),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    /// Flow: rasterize, encode, sample and decode.
    pub sample: Duration,
    /// Classical: every DLS solve including failed restarts.
    pub ik: Duration,
    /// Classical: collision checks of the accepted solutions.
    pub cc: Duration,
}

impl Timings {
    pub fn total(&self) -> Duration {
        self.sample + self.ik + self.cc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionSet {
    pub source: Source,
    pub solutions: Vec<Solution>,
    pub timings: Timings,
    pub warning: Option<String>,
}

impl SolutionSet {
    fn empty(source: Source) -> Self {
        Self {
            source,
            solutions: Vec::new(),
            timings: Timings::default(),
            warning: None,
        }
    }

    /// Solutions the model presents as usable: decoded collision-free when
    /// flags are decoded, otherwise all of them.
    pub fn emitted(&self) -> Vec<&Solution> {
        self.solutions
            .iter()
            .filter(|s| s.decoded.is_none_or(|(a, b)| !a && !b))
            .collect()
    }
}

fn truth(robot: &RobotModel, scene: &Scene, c: &Configuration) -> Result<(bool, bool)> {
    Ok((robot.self_collision(c)?, env_collision(robot, c, scene)?))
}

/// How many scene latents a query draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentDraw {
    /// One latent shared by all `K` samples.
    Shared,
    /// A fresh latent per sample.
    PerSample,
}

/// A trained model with the metadata needed to check queries against it.
pub struct FlowSolver {
    pub model: Model,
    pub robot: RobotModel,
    pub scene_ids: Vec<u32>,
}

impl FlowSolver {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck.model()?,
            robot: ck.robot.clone(),
            scene_ids: ck.scene_ids.clone(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.model.config.mode
    }

    pub fn expect_mode(&self, mode: Mode) -> Result<()> {
        if mode != self.mode() {
            return Err(Error::Config(format!(
                "checkpoint was trained in mode {}, not {mode}",
                self.mode()
            )));
        }
        Ok(())
    }

    /// `K` configurations for `pose` in `scene`; ground-truth flags are
    /// recomputed and excluded from the timing.
    pub fn solve<R: Rng + ?Sized>(
        &self,
        pose: &Pose,
        scene: &Scene,
        k: usize,
        latent: LatentDraw,
        rng: &mut R,
    ) -> Result<SolutionSet> {
        if !self.scene_ids.contains(&scene.id) {
            return Err(Error::UnknownScene(scene.id));
        }
        if k == 0 {
            return Ok(SolutionSet::empty(Source::Flow));
        }
        let cfg = &self.model.config;
        let dof = cfg.dof;
        let start = Instant::now();
        let res = cfg.encoder.resolution;
        let image = rasterize(scene, cfg.reach, res, res);
        let pe = pose_embedding(pose, cfg.reach);
        let x = match latent {
            LatentDraw::Shared => self.model.sample(&image, &pe, k, rng)?,
            LatentDraw::PerSample => self.model.sample_resampled(&image, &pe, k, rng)?,
        };
        let mut out = Vec::with_capacity(k);
        for r in 0..k {
            let row = x.row(r);
            let decoded = match cfg.mode {
                Mode::P3 => Some(decode_flags(row, dof, DECODE_THRESHOLD)?),
                Mode::P1 | Mode::P2 => None,
            };
            out.push((Configuration(row[..dof].to_vec()), decoded));
        }
        let elapsed = start.elapsed();
        let solutions = out
            .into_iter()
            .map(|(config, decoded)| {
                Ok(Solution {
                    truth: truth(&self.robot, scene, &config)?,
                    config,
                    decoded,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SolutionSet {
            source: Source::Flow,
            solutions,
            timings: Timings {
                sample: elapsed,
                ..Timings::default()
            },
            warning: None,
        })
    }
}

pub const DLS_DAMPING: f64 = 0.1;
pub const DLS_MAX_ITERS: usize = 200;
pub const RESTARTS_PER_SOLUTION: usize = 100;

/// Pose error `(dx, dy, dθ)` from `c` to `target`.
fn pose_residual(robot: &RobotModel, c: &Configuration, target: &Pose) -> Result<[f64; 3]> {
    let p = robot.forward_kinematics(c)?;
    Ok([target.x - p.x, target.y - p.y, wrap_angle(target.theta - p.theta)])
}

/// Solve the 3×3 symmetric positive definite system `a·x = b` by Cholesky.
fn solve_spd3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        x[i] = (y[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Damped least squares from `q`; returns the converged configuration.
pub fn dls_solve(
    robot: &RobotModel,
    target: &Pose,
    mut q: Configuration,
    tol: f64,
) -> Result<Option<Configuration>> {
    let lam2 = DLS_DAMPING * DLS_DAMPING;
    for _ in 0..DLS_MAX_ITERS {
        let e = pose_residual(robot, &q, target)?;
        if e[0].hypot(e[1]) < tol && e[2].abs() < tol {
            return Ok(Some(q));
        }
        let j = robot.jacobian(&q)?;
        let mut jjt = [[0.0; 3]; 3];
        for col in &j {
            for r in 0..3 {
                for c in 0..3 {
                    jjt[r][c] += col[r] * col[c];
                }
            }
        }
        for (d, row) in jjt.iter_mut().enumerate() {
            row[d] += lam2;
        }
        let y = solve_spd3(jjt, e);
        for ((qi, col), &(lo, hi)) in q.0.iter_mut().zip(&j).zip(robot.joint_limits()) {
            *qi = (*qi + col[0] * y[0] + col[1] * y[1] + col[2] * y[2]).clamp(lo, hi);
        }
    }
    let e = pose_residual(robot, &q, target)?;
    Ok((e[0].hypot(e[1]) < tol && e[2].abs() < tol).then_some(q))
}

/// Random-restart DLS until `k` solutions meet `tol`, then collision-check
/// each one. The restart budget is `100·k`.
pub fn solve_classical<R: Rng + ?Sized>(
    robot: &RobotModel,
    pose: &Pose,
    scene: &Scene,
    k: usize,
    tol: f64,
    rng: &mut R,
) -> Result<SolutionSet> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut set = SolutionSet::empty(Source::Classical);
    let budget = RESTARTS_PER_SOLUTION * k;
    let mut found = Vec::with_capacity(k);
    let start = Instant::now();
    let mut restarts = 0;
    while found.len() < k && restarts < budget {
        restarts += 1;
        if let Some(q) = dls_solve(robot, pose, robot.sample_config(rng), tol)? {
            found.push(q);
        }
    }
    set.timings.ik = start.elapsed();
    let start = Instant::now();
    let checked = found
        .into_iter()
        .map(|q| Ok((truth(robot, scene, &q)?, q)))
        .collect::<Result<Vec<_>>>()?;
    set.timings.cc = start.elapsed();
    set.solutions = checked
        .into_iter()
        .map(|(t, config)| Solution {
            config,
            decoded: None,
            truth: t,
        })
        .collect();
    if set.solutions.len() < k {
        set.warning = Some(format!(
            "restart budget of {budget} exhausted with {} of {k} solutions",
            set.solutions.len()
        ));
    }
    Ok(set)
}

/// Euclidean distance between the FK position of `c` and the target, meters.
pub fn position_error(robot: &RobotModel, c: &Configuration, target: &Pose) -> Result<f64> {
    let p = robot.forward_kinematics(c)?;
    Ok((p.x - target.x).hypot(p.y - target.y))
}

/// Shortest-arc heading difference, radians.
pub fn angular_error(robot: &RobotModel, c: &Configuration, target: &Pose) -> Result<f64> {
    let p = robot.forward_kinematics(c)?;
    Ok(wrap_angle(p.theta - target.theta).abs())
}

/// Positive-class confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn merge(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// `TP/(TP+FP+FN)`, defined as 1 when there are no positives at all.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

pub const IOU_EMPTY_SET: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionMetrics {
    pub env_rate: f64,
    pub self_rate: f64,
    pub iou_env: Option<f64>,
    pub iou_self: Option<f64>,
    /// Raw counts behind the IoU values.
    pub confusion: Option<(Confusion, Confusion)>,
}

/// Ground-truth rates and decoded-vs-truth IoU over `solutions`. Rates are
/// NaN for an empty set; IoU is absent when flags were not decoded.
pub fn collision_metrics(solutions: &[&Solution]) -> CollisionMetrics {
    let n = solutions.len() as f64;
    let env = solutions.iter().filter(|s| s.truth.1).count() as f64;
    let slf = solutions.iter().filter(|s| s.truth.0).count() as f64;
    let confusion = solutions.iter().all(|s| s.decoded.is_some()).then(|| {
        let (mut cs, mut ce) = (Confusion::default(), Confusion::default());
        for s in solutions {
            let (ds, de) = s.decoded.unwrap();
            cs.add(ds, s.truth.0);
            ce.add(de, s.truth.1);
        }
        (cs, ce)
    });
    CollisionMetrics {
        env_rate: env / n,
        self_rate: slf / n,
        iou_env: confusion.map(|c| c.1.iou()),
        iou_self: confusion.map(|c| c.0.iou()),
        confusion,
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scene_id: u32,
    /// `p1`, `p2`, `p3`, `classical` or `test`.
    pub mode: String,
    pub k: usize,
    pub pos_err_mm: Option<f64>,
    pub ang_err_deg: Option<f64>,
    pub env_rate: f64,
    pub self_rate: f64,
    pub iou_env: Option<f64>,
    pub iou_self: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str =
    "scene_id,mode,K,pos_err_mm,ang_err_deg,env_rate,self_rate,iou_env,iou_self";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            self.scene_id,
            self.mode,
            self.k,
            opt(self.pos_err_mm),
            opt(self.ang_err_deg),
            self.env_rate,
            self.self_rate,
            opt(self.iou_env),
            opt(self.iou_self)
        )
    }
}

/// Target poses as forward kinematics of uniform configurations.
pub fn test_poses(robot: &RobotModel, n: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            robot
                .forward_kinematics(&robot.sample_config(&mut rng))
                .expect("sampled configuration has the robot's dimension")
        })
        .collect()
}

/// Flow metrics for one scene over `poses`, `k` samples each. Errors and
/// rates use emitted solutions; IoU pools all samples.
pub fn evaluate_flow(
    solver: &FlowSolver,
    scene: &Scene,
    poses: &[Pose],
    k: usize,
    seed: u64,
) -> Result<MetricsRow> {
    let sets = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[seed, scene.id as u64, i as u64]));
            let set = solver.solve(pose, scene, k, LatentDraw::Shared, &mut rng)?;
            Ok((pose, set))
        })
        .collect::<Result<Vec<_>>>()?;
    let robot = &solver.robot;
    let (mut pos, mut ang, mut n) = (0.0, 0.0, 0usize);
    let (mut env, mut slf) = (0usize, 0usize);
    let mut conf: Option<(Confusion, Confusion)> = None;
    for (pose, set) in &sets {
        for s in set.emitted() {
            pos += position_error(robot, &s.config, pose)?;
            ang += angular_error(robot, &s.config, pose)?;
            env += s.truth.1 as usize;
            slf += s.truth.0 as usize;
            n += 1;
        }
        let all: Vec<&Solution> = set.solutions.iter().collect();
        if let Some(c) = collision_metrics(&all).confusion {
            let acc = conf.get_or_insert_with(Default::default);
            acc.0.merge(c.0);
            acc.1.merge(c.1);
        }
    }
    let nf = n as f64;
    Ok(MetricsRow {
        scene_id: scene.id,
        mode: solver.mode().to_string(),
        k,
        pos_err_mm: (n > 0).then(|| 1e3 * pos / nf),
        ang_err_deg: (n > 0).then(|| (ang / nf).to_degrees()),
        env_rate: env as f64 / nf,
        self_rate: slf as f64 / nf,
        iou_env: conf.map(|c| c.1.iou()),
        iou_self: conf.map(|c| c.0.iou()),
    })
}

/// Collision rates of `n` uniform configurations in `scene`.
pub fn test_set_row(robot: &RobotModel, scene: &Scene, n: usize, seed: u64) -> Result<MetricsRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, scene.id as u64]));
    let (mut env, mut slf) = (0usize, 0usize);
    for _ in 0..n {
        let (s, e) = truth(robot, scene, &robot.sample_config(&mut rng))?;
        slf += s as usize;
        env += e as usize;
    }
    Ok(MetricsRow {
        scene_id: scene.id,
        mode: "test".into(),
        k: n,
        pos_err_mm: None,
        ang_err_deg: None,
        env_rate: env as f64 / n as f64,
        self_rate: slf as f64 / n as f64,
        iou_env: None,
        iou_self: None,
    })
}

/// One row of the runtime CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub method: &'static str,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

pub const BENCH_CSV_HEADER: &str = "K,method,median_ms,p10_ms,p90_ms";
pub const DEFAULT_K_LIST: [usize; 6] = [10, 20, 40, 100, 300, 1000];

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.4},{:.4},{:.4}",
            self.k, self.method, self.median_ms, self.p10_ms, self.p90_ms
        )
    }
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn summarize(k: usize, method: &'static str, mut ms: Vec<f64>) -> BenchRow {
    ms.sort_by(f64::total_cmp);
    BenchRow {
        k,
        method,
        median_ms: percentile(&ms, 0.5),
        p10_ms: percentile(&ms, 0.1),
        p90_ms: percentile(&ms, 0.9),
    }
}

/// Wall-clock comparison of flow sampling against DLS plus collision
/// checking, per `K`. Rows: `flow`, `classical` (= `classical_ik` +
/// `classical_cc`) and the two classical parts.
pub fn bench_runtime(
    solver: &FlowSolver,
    scenes: &[Scene],
    k_list: &[usize],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if k_list.is_empty() {
        return Err(Error::Config("K list is empty".into()));
    }
    if scenes.is_empty() || trials == 0 {
        return Err(Error::Config("benchmark needs scenes and at least one trial".into()));
    }
    let robot = &solver.robot;
    let mut rows = Vec::new();
    for &k in k_list {
        let (mut flow, mut total, mut ik, mut cc) = (vec![], vec![], vec![], vec![]);
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, k as u64, t as u64]));
            let scene = &scenes[t % scenes.len()];
            let pose = robot.forward_kinematics(&robot.sample_config(&mut rng))?;
            let f = solver.solve(&pose, scene, k, LatentDraw::Shared, &mut rng)?;
            let c = solve_classical(robot, &pose, scene, k, tol, &mut rng)?;
            let ms = |d: Duration| d.as_secs_f64() * 1e3;
            flow.push(ms(f.timings.total()));
            total.push(ms(c.timings.total()));
            ik.push(ms(c.timings.ik));
            cc.push(ms(c.timings.cc));
        }
        rows.push(summarize(k, "flow", flow));
        rows.push(summarize(k, "classical", total));
        rows.push(summarize(k, "classical_ik", ik));
        rows.push(summarize(k, "classical_cc", cc));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve() {
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = [1.0, -2.0, 0.5];
        let x = solve_spd3(a, b);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.1), 1.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
    }
}
