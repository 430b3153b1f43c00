use std::f64::consts::PI;

use flowik::geometry::{point_segment_distance, Point};
use flowik::robot::{wrap_angle, Configuration, Pose, RobotModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Tip pose by chaining `Rot(qᵢ)·Trans(Lᵢ, 0)` homogeneous transforms.
fn fk_by_transforms(lengths: &[f64], q: &[f64]) -> (f64, f64, f64, f64) {
    let mut t: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (l, a) in lengths.iter().zip(q) {
        let (s, c) = a.sin_cos();
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let tr = [[1.0, 0.0, *l], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        t = mul(&mul(&t, &rot), &tr);
    }
    (t[0][2], t[1][2], t[1][0], t[0][0])
}

/// Segment sampled at `n` evenly spaced points, endpoints included.
fn dense(a: Point, b: Point, n: usize) -> Vec<Point> {
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
        })
        .collect()
}

fn self_clearance_by_sampling(robot: &RobotModel, c: &Configuration) -> f64 {
    let pts = robot.joint_positions(c).unwrap();
    let n = robot.dof();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 2..n {
            for p in dense(pts[i], pts[i + 1], 500) {
                best = best.min(point_segment_distance(p, pts[j], pts[j + 1]));
            }
            for p in dense(pts[j], pts[j + 1], 500) {
                best = best.min(point_segment_distance(p, pts[i], pts[i + 1]));
            }
        }
    }
    best - 2.0 * robot.link_radius()
}

#[test]
fn fk_examples() {
    let r = RobotModel::default();
    let p = r.forward_kinematics(&Configuration::zeros(4)).unwrap();
    assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.theta == 0.0);
    let p = r
        .forward_kinematics(&Configuration(vec![PI / 2.0, 0.0, 0.0, 0.0]))
        .unwrap();
    assert!(p.x.abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12);
    assert!((p.theta - PI / 2.0).abs() < 1e-12);
}

#[test]
fn fk_matches_transform_composition() {
    let r = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let c = r.sample_config(&mut rng);
        let p = r.forward_kinematics(&c).unwrap();
        let (x, y, s, co) = fk_by_transforms(r.link_lengths(), c.as_slice());
        assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12);
        assert!((p.theta.sin() - s).abs() < 1e-12 && (p.theta.cos() - co).abs() < 1e-12);
        assert!(p.theta > -PI && p.theta <= PI);
        assert!(x.hypot(y) <= r.reach() + 1e-12);
    }
}

#[test]
fn fk_rejects_wrong_dimension() {
    let r = RobotModel::default();
    assert!(r.forward_kinematics(&Configuration::zeros(3)).is_err());
    assert!(r.jacobian(&Configuration::zeros(5)).is_err());
}

#[test]
fn jacobian_at_zero() {
    let r = RobotModel::default();
    let j = r.jacobian(&Configuration::zeros(4)).unwrap();
    let want = [1.0, 0.6, 0.3, 0.1];
    for (col, w) in j.iter().zip(want) {
        assert_eq!(col[0], 0.0);
        assert!((col[1] - w).abs() < 1e-12);
        assert_eq!(col[2], 1.0);
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let r = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..1000 {
        let c = r.sample_config(&mut rng);
        let j = r.jacobian(&c).unwrap();
        for (i, col) in j.iter().enumerate() {
            let mut up = c.clone();
            up.0[i] += h;
            let mut down = c.clone();
            down.0[i] -= h;
            let (a, b) = (
                r.forward_kinematics(&up).unwrap(),
                r.forward_kinematics(&down).unwrap(),
            );
            let fd = [
                (a.x - b.x) / (2.0 * h),
                (a.y - b.y) / (2.0 * h),
                wrap_angle(a.theta - b.theta) / (2.0 * h),
            ];
            for k in 0..3 {
                assert!(
                    (col[k] - fd[k]).abs() <= 1e-5 * fd[k].abs() + 1e-8,
                    "{} vs {}",
                    col[k],
                    fd[k]
                );
            }
        }
    }
}

#[test]
fn self_collision_examples() {
    let r = RobotModel::default();
    assert!(!r.self_collision(&Configuration::zeros(4)).unwrap());
    // Fold joint 2 by π so links 2.. run back over link 1.
    assert!(r
        .self_collision(&Configuration(vec![0.0, PI, 0.0, 0.0]))
        .unwrap());
    let folded = RobotModel::new(vec![0.4, 0.3, 0.2, 0.1], vec![(-PI, PI); 4], 0.02).unwrap();
    assert!(folded
        .self_collision(&Configuration(vec![0.0, PI, PI, 0.0]))
        .unwrap());
}

#[test]
fn self_collision_matches_dense_sampling() {
    let r = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = 0;
    for _ in 0..10_000 {
        let c = r.sample_config(&mut rng);
        let exact = r.self_clearance(&c).unwrap();
        let oracle = self_clearance_by_sampling(&r, &c);
        if oracle.abs() > 1e-4 {
            assert_eq!(r.self_collision(&c).unwrap(), oracle < 0.0, "{exact} vs {oracle}");
        }
        hits += (oracle < 0.0) as usize;
    }
    assert!(hits > 100, "too few colliding cases ({hits}) to exercise the oracle");
}

#[test]
fn self_collision_rotation_invariant() {
    let r = RobotModel::new(vec![0.4, 0.3, 0.2, 0.1], vec![(-10.0, 10.0); 4], 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let c = r.sample_config(&mut rng);
        let delta = rand::Rng::random_range(&mut rng, -PI..PI);
        let mut rotated = c.clone();
        rotated.0[0] += delta;
        assert_eq!(r.self_collision(&c).unwrap(), r.self_collision(&rotated).unwrap());
    }
}

#[test]
fn sample_config_properties() {
    let r = RobotModel::new(vec![0.4, 0.3, 0.2], vec![(-1.0, 2.0), (0.5, 0.5), (-2.9, 2.9)], 0.02)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1_000_000;
    let mut sums = [0.0; 3];
    for _ in 0..n {
        let c = r.sample_config(&mut rng);
        assert!(r.within_limits(&c));
        assert_eq!(c.0[1], 0.5);
        for k in 0..3 {
            sums[k] += c.0[k];
        }
    }
    for (k, &(lo, hi)) in r.joint_limits().iter().enumerate() {
        let mean = sums[k] / n as f64;
        let se = (hi - lo) / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - (lo + hi) / 2.0).abs() <= 3.0 * se.max(1e-15));
    }
    let a: Vec<_> = (0..10)
        .map(|_| r.sample_config(&mut ChaCha8Rng::seed_from_u64(9)))
        .collect();
    assert!(a.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn angle_wrap_and_pose() {
    assert_eq!(wrap_angle(PI), PI);
    assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
    assert!((Pose::new(0.0, 0.0, 3.0 * PI).theta - PI).abs() < 1e-12);
}

#[test]
fn robot_validation() {
    assert!(RobotModel::new(vec![0.4, 0.3], vec![(-1.0, 1.0); 2], 0.01).is_err());
    assert!(RobotModel::new(vec![0.4, 0.3, 0.2], vec![(1.0, -1.0); 3], 0.01).is_err());
    assert!(RobotModel::new(vec![0.4, 0.3, 0.2], vec![(-1.0, 1.0); 3], 0.1).is_err());
    let r = RobotModel::default();
    assert_eq!(RobotModel::from_text(&r.to_text()).unwrap(), r);
}
