use std::f64::consts::PI;

use flowik::encoder::{pose_embedding, EncoderSpec};
use flowik::evaluator::{
    angular_error, bench_runtime, collision_metrics, dls_solve, evaluate_flow, position_error,
    solve_classical, test_poses, test_set_row, Confusion, FlowSolver, LatentDraw, MetricsRow,
    Solution, Source, BENCH_CSV_HEADER, METRICS_CSV_HEADER,
};
use flowik::flow::FlowInit;
use flowik::model::{Mode, Model, ModelConfig};
use flowik::nn::Activation;
use flowik::robot::{Configuration, Pose, RobotModel};
use flowik::world::{env_collision, random_scene, rasterize, Clutter, Scene};
use flowik::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn solver(mode: Mode, init: FlowInit) -> FlowSolver {
    let cfg = ModelConfig {
        flow_blocks: 2,
        flow_hidden: 16,
        activation: Activation::Tanh,
        encoder: EncoderSpec {
            resolution: 8,
            latent: 2,
            hidden: 16,
            projection: 8,
            latent_blocks: 2,
            latent_hidden: 8,
            activation: Activation::Tanh,
            ..EncoderSpec::default()
        },
        ..ModelConfig::new(mode, 4, 1.0)
    };
    FlowSolver {
        model: Model::new(cfg, init, 5).unwrap(),
        robot: RobotModel::default(),
        scene_ids: vec![0, 1],
    }
}

fn scene(id: u32) -> Scene {
    random_scene(&RobotModel::default(), id, Clutter::High, 40 + id as u64).unwrap()
}

fn sol(decoded: Option<(bool, bool)>, truth: (bool, bool)) -> Solution {
    Solution {
        config: Configuration::zeros(4),
        decoded,
        truth,
    }
}

#[test]
fn classical_solutions_meet_tolerance_and_limits() {
    let r = RobotModel::default();
    let s = scene(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pose in test_poses(&r, 20, 2) {
        let set = solve_classical(&r, &pose, &s, 5, 1e-3, &mut rng).unwrap();
        assert_eq!(set.source, Source::Classical);
        assert_eq!(set.solutions.len(), 5, "{:?}", set.warning);
        assert!(set.warning.is_none());
        for sol in &set.solutions {
            assert!(position_error(&r, &sol.config, &pose).unwrap() < 1e-3);
            assert!(angular_error(&r, &sol.config, &pose).unwrap() < 1e-3);
            assert!(r.within_limits(&sol.config));
            assert_eq!(sol.decoded, None);
            assert_eq!(sol.truth.0, r.self_collision(&sol.config).unwrap());
            assert_eq!(sol.truth.1, env_collision(&r, &sol.config, &s).unwrap());
        }
        assert!(set.timings.ik > std::time::Duration::ZERO);
        assert_eq!(set.timings.sample, std::time::Duration::ZERO);
    }
}

#[test]
fn classical_converges_from_nearby_start() {
    let r = RobotModel::default();
    let q = Configuration(vec![0.3, -0.5, 0.8, 0.2]);
    let target = r.forward_kinematics(&q).unwrap();
    let start = Configuration(q.0.iter().map(|v| v + 0.05).collect());
    let got = dls_solve(&r, &target, start, 1e-6).unwrap().unwrap();
    assert!(position_error(&r, &got, &target).unwrap() < 1e-6);
}

#[test]
fn unreachable_pose_exhausts_budget() {
    let r = RobotModel::default();
    let pose = Pose::new(5.0, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = solve_classical(&r, &pose, &Scene::empty(0), 2, 1e-3, &mut rng).unwrap();
    assert!(set.solutions.is_empty());
    let w = set.warning.unwrap();
    assert!(w.contains("200"), "{w}");
    assert!(solve_classical(&r, &pose, &Scene::empty(0), 2, 0.0, &mut rng).is_err());
}

#[test]
fn angular_error_wraps() {
    let r = RobotModel::default();
    let q = Configuration(vec![3.1, 0.0, 0.0, 0.0]);
    let p = r.forward_kinematics(&q).unwrap();
    let target = Pose::new(p.x, p.y, -3.1);
    let want = 2.0 * PI - 6.2;
    assert!((angular_error(&r, &q, &target).unwrap() - want).abs() < 1e-12);
    let shifted = Pose::new(p.x + 0.003, p.y - 0.004, p.theta);
    assert!((position_error(&r, &q, &shifted).unwrap() - 0.005).abs() < 1e-12);
}

#[test]
fn flow_solution_matches_direct_sampling() {
    let fs = solver(Mode::P3, FlowInit::Permuted);
    let s = scene(1);
    let pose = Pose::new(0.4, 0.3, 0.5);
    let set = fs
        .solve(&pose, &s, 64, LatentDraw::Shared, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let image = rasterize(&s, 1.0, 8, 8);
    let x = fs
        .model
        .sample(&image, &pose_embedding(&pose, 1.0), 64, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    assert_eq!(set.solutions.len(), 64);
    assert!(set.timings.sample > std::time::Duration::ZERO);
    for (i, sol) in set.solutions.iter().enumerate() {
        let row = x.row(i);
        assert_eq!(sol.config.0, row[..4]);
        assert_eq!(sol.decoded, Some((row[4] > 0.5, row[5] > 0.5)));
        assert_eq!(sol.truth.0, fs.robot.self_collision(&sol.config).unwrap());
        assert_eq!(sol.truth.1, env_collision(&fs.robot, &sol.config, &s).unwrap());
    }
    let emitted = set.emitted();
    let want = set.solutions.iter().filter(|s| s.decoded == Some((false, false))).count();
    assert_eq!(emitted.len(), want);
}

#[test]
fn flow_solver_rejects_bad_queries() {
    let fs = solver(Mode::P2, FlowInit::Identity);
    let pose = Pose::new(0.4, 0.3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = fs.solve(&pose, &scene(0), 0, LatentDraw::Shared, &mut rng).unwrap();
    assert!(set.solutions.is_empty());
    assert!(matches!(
        fs.solve(&pose, &scene(7), 4, LatentDraw::Shared, &mut rng),
        Err(Error::UnknownScene(7))
    ));
    assert!(fs.expect_mode(Mode::P2).is_ok());
    assert!(matches!(fs.expect_mode(Mode::P3), Err(Error::Config(_))));
    let set = fs.solve(&pose, &scene(0), 8, LatentDraw::PerSample, &mut rng).unwrap();
    assert!(set.solutions.iter().all(|s| s.decoded.is_none()));
    assert_eq!(set.emitted().len(), 8);
}

#[test]
fn iou_counts() {
    assert_eq!(Confusion::default().iou(), 1.0);
    let mut c = Confusion::default();
    for (p, a) in [(true, true), (true, true), (true, false), (false, true), (false, false)] {
        c.add(p, a);
    }
    assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
    assert_eq!(c.iou(), 0.5);
}

#[test]
fn metrics_over_constructed_solutions() {
    let set = [
        sol(Some((false, true)), (false, true)),
        sol(Some((false, false)), (false, true)),
        sol(Some((true, false)), (false, false)),
        sol(Some((false, false)), (false, false)),
    ];
    let refs: Vec<&Solution> = set.iter().collect();
    let m = collision_metrics(&refs);
    assert_eq!(m.env_rate, 0.5);
    assert_eq!(m.self_rate, 0.0);
    assert_eq!(m.iou_env, Some(0.5));
    assert_eq!(m.iou_self, Some(0.0));

    let plain = [sol(None, (true, false)), sol(None, (false, false))];
    let refs: Vec<&Solution> = plain.iter().collect();
    let m = collision_metrics(&refs);
    assert_eq!(m.self_rate, 0.5);
    assert_eq!(m.iou_env, None);
    assert_eq!(m.iou_self, None);

    let clean = [sol(Some((false, false)), (false, false))];
    let refs: Vec<&Solution> = clean.iter().collect();
    assert_eq!(collision_metrics(&refs).iou_env, Some(1.0));
}

#[test]
fn metrics_row_csv() {
    let row = MetricsRow {
        scene_id: 3,
        mode: "p2".into(),
        k: 100,
        pos_err_mm: Some(1.5),
        ang_err_deg: Some(0.25),
        env_rate: 0.1,
        self_rate: 0.0,
        iou_env: None,
        iou_self: None,
    };
    let line = row.to_string();
    assert_eq!(line.split(',').count(), METRICS_CSV_HEADER.split(',').count());
    assert!(line.starts_with("3,p2,100,1.500000,0.250000,0.100000,0.000000,"));
    assert!(line.ends_with(",,"));
}

#[test]
fn test_set_rates_match_independent_estimate() {
    let r = RobotModel::default();
    let s = scene(0);
    let row = test_set_row(&r, &s, 20_000, 4).unwrap();
    assert_eq!(row.mode, "test");
    assert!(row.iou_env.is_none() && row.pos_err_mm.is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let n = 20_000;
    let (mut env, mut slf) = (0.0, 0.0);
    for _ in 0..n {
        let q = r.sample_config(&mut rng);
        env += env_collision(&r, &q, &s).unwrap() as u8 as f64;
        slf += r.self_collision(&q).unwrap() as u8 as f64;
    }
    for (got, hits) in [(row.env_rate, env), (row.self_rate, slf)] {
        let p = hits / n as f64;
        let sd = (2.0 * p.max(1e-3) * (1.0 - p) / n as f64).sqrt();
        assert!((got - p).abs() < 5.0 * sd, "{got} vs {p}");
    }
}

#[test]
fn evaluate_flow_aggregates() {
    let fs = solver(Mode::P3, FlowInit::Permuted);
    let s = scene(0);
    let poses = test_poses(&fs.robot, 6, 11);
    let row = evaluate_flow(&fs, &s, &poses, 50, 7).unwrap();
    assert_eq!(row.mode, "p3");
    assert_eq!(row.k, 50);
    assert!(row.iou_env.is_some() && row.iou_self.is_some());
    assert!((0.0..=1.0).contains(&row.env_rate) || row.env_rate.is_nan());
    let again = evaluate_flow(&fs, &s, &poses, 50, 7).unwrap();
    assert_eq!(row.to_string(), again.to_string());

    let p2 = solver(Mode::P2, FlowInit::Permuted);
    let row = evaluate_flow(&p2, &s, &poses, 50, 7).unwrap();
    assert!(row.iou_env.is_none());
    assert!(row.pos_err_mm.unwrap() > 0.0);
}

#[test]
fn bench_rows() {
    let fs = solver(Mode::P3, FlowInit::Identity);
    let rows = bench_runtime(&fs, &[scene(0)], &[10], 3, 1e-3, 0).unwrap();
    let methods: Vec<_> = rows.iter().map(|r| r.method).collect();
    assert_eq!(methods, ["flow", "classical", "classical_ik", "classical_cc"]);
    for r in &rows {
        assert_eq!(r.k, 10);
        assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms);
        assert!(r.p10_ms >= 0.0);
        assert_eq!(r.to_string().split(',').count(), BENCH_CSV_HEADER.split(',').count());
    }
    assert!(bench_runtime(&fs, &[scene(0)], &[], 1, 1e-3, 0).is_err());
}
