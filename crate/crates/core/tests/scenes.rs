use flowik::geometry::{point_segment_distance, Point};
use flowik::robot::{Configuration, RobotModel};
use flowik::world::{
    env_clearance, env_collision, random_scene, rasterize, Clutter, Obstacle, Scene,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn env_clearance_by_sampling(robot: &RobotModel, c: &Configuration, scene: &Scene) -> f64 {
    let pts = robot.joint_positions(c).unwrap();
    let mut best = f64::INFINITY;
    for w in pts.windows(2) {
        for k in 0..500 {
            let t = k as f64 / 499.0;
            let p = Point::new(w[0].x + t * (w[1].x - w[0].x), w[0].y + t * (w[1].y - w[0].y));
            for o in &scene.obstacles {
                let d = (p.x - o.center.x).hypot(p.y - o.center.y);
                best = best.min(d - o.radius - robot.link_radius());
            }
        }
    }
    best
}

#[test]
fn env_collision_matches_dense_sampling() {
    let r = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = 0;
    for case in 0..10_000u64 {
        let clutter = [Clutter::Low, Clutter::Medium, Clutter::High][(case % 3) as usize];
        let scene = random_scene(&r, case as u32, clutter, case).unwrap();
        let c = r.sample_config(&mut rng);
        let oracle = env_clearance_by_sampling(&r, &c, &scene);
        if oracle.abs() > 1e-4 {
            assert_eq!(
                env_collision(&r, &c, &scene).unwrap(),
                oracle < 0.0,
                "{} vs {oracle}",
                env_clearance(&r, &c, &scene).unwrap()
            );
        }
        hits += (oracle < 0.0) as usize;
    }
    assert!(hits > 1000, "{hits}");
}

#[test]
fn obstacle_over_first_link_midpoint() {
    let r = RobotModel::default();
    let s = Scene {
        id: 0,
        clutter: Clutter::Low,
        obstacles: vec![Obstacle {
            center: Point::new(0.2, 0.0),
            radius: 0.4,
        }],
    };
    assert!(env_collision(&r, &Configuration::zeros(4), &s).unwrap());
}

#[test]
fn growing_obstacles_never_clears_a_collision() {
    let r = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..500 {
        let mut scene = random_scene(&r, 0, Clutter::Medium, seed).unwrap();
        let c = r.sample_config(&mut rng);
        let before = env_collision(&r, &c, &scene).unwrap();
        let k = rng.random_range(0..scene.obstacles.len());
        scene.obstacles[k].radius *= rng.random_range(1.0..2.0);
        if before {
            assert!(env_collision(&r, &c, &scene).unwrap());
        }
    }
}

fn collision_rate(r: &RobotModel, clutter: Clutter, rng: &mut ChaCha8Rng) -> f64 {
    let mut hits = 0;
    for s in 0..100 {
        let scene = random_scene(r, s, clutter, 1000 + s as u64).unwrap();
        for _ in 0..1000 {
            hits += env_collision(r, &r.sample_config(rng), &scene).unwrap() as usize;
        }
    }
    hits as f64 / 100_000.0
}

#[test]
fn high_clutter_collides_more_than_low() {
    let r = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let low = collision_rate(&r, Clutter::Low, &mut rng);
    let high = collision_rate(&r, Clutter::High, &mut rng);
    assert!(high > low, "high {high} low {low}");
}

#[test]
fn obstacle_counts_follow_clutter() {
    let r = RobotModel::default();
    for seed in 0..200 {
        for c in [Clutter::Low, Clutter::Medium, Clutter::High] {
            let s = random_scene(&r, 0, c, seed).unwrap();
            let (lo, hi) = c.count_range();
            assert!((lo..=hi).contains(&s.obstacles.len()));
            for o in &s.obstacles {
                let rho = o.center.norm();
                assert!(rho >= 0.25 * r.reach() && rho <= 0.95 * r.reach());
                assert!(o.radius >= 0.05 * r.reach() && o.radius <= 0.15 * r.reach());
            }
        }
    }
}

#[test]
fn raster_is_repeatable() {
    let r = RobotModel::default();
    let s = random_scene(&r, 0, Clutter::High, 4).unwrap();
    let a = rasterize(&s, r.reach(), 32, 32);
    let b = rasterize(&s, r.reach(), 32, 32);
    let bits = |img: &flowik::world::OccupancyImage| {
        img.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert!(a.values.iter().all(|&v| v == 0.0 || v == 1.0));
    // Each occupied pixel center lies inside some obstacle.
    let px = 2.0 * r.reach() / 32.0;
    for (i, &v) in a.values.iter().enumerate() {
        let (row, col) = (i / 32, i % 32);
        let p = Point::new(
            -r.reach() + (col as f64 + 0.5) * px,
            -r.reach() + (row as f64 + 0.5) * px,
        );
        let inside = s
            .obstacles
            .iter()
            .any(|o| point_segment_distance(p, o.center, o.center) <= o.radius - 1e-9);
        if inside {
            assert_eq!(v, 1.0);
        }
    }
}

#[test]
fn base_clearance_enforced() {
    let r = RobotModel::default();
    let bad = Scene {
        id: 0,
        clutter: Clutter::Low,
        obstacles: vec![Obstacle {
            center: Point::new(0.05, 0.0),
            radius: 0.1,
        }],
    };
    assert!(bad.validate(&r).is_err());
}
