//! Circle-obstacle scenes, environment collision checks and occupancy rasters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, Point};
use crate::robot::{parse_f64, Configuration, RobotModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: Point,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Clutter {
    Low,
    Medium,
    High,
}

impl Clutter {
    /// Inclusive obstacle-count range for this level.
    pub fn count_range(self) -> (usize, usize) {
        match self {
            Clutter::Low => (2, 3),
            Clutter::Medium => (5, 7),
            Clutter::High => (9, 12),
        }
    }
}

impl fmt::Display for Clutter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Clutter::Low => "low",
            Clutter::Medium => "medium",
            Clutter::High => "high",
        })
    }
}

impl FromStr for Clutter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Clutter::Low),
            "medium" => Ok(Clutter::Medium),
            "high" => Ok(Clutter::High),
            other => Err(Error::Config(format!(
                "invalid clutter level '{other}' (expected low, medium or high)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u32,
    pub clutter: Clutter,
    pub obstacles: Vec<Obstacle>,
}

impl Scene {
    pub fn empty(id: u32) -> Self {
        Self {
            id,
            clutter: Clutter::Low,
            obstacles: Vec::new(),
        }
    }

    /// Validates radii and the base-clearance invariant for `robot`.
    pub fn validate(&self, robot: &RobotModel) -> Result<()> {
        for o in &self.obstacles {
            if !(o.radius > 0.0) {
                return Err(Error::Config(format!("scene {}: non-positive radius", self.id)));
            }
            if o.center.norm() <= o.radius + robot.link_radius() {
                return Err(Error::Config(format!(
                    "scene {}: obstacle at ({}, {}) covers the arm base",
                    self.id, o.center.x, o.center.y
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("scene {} {}\n", self.id, self.clutter);
        for o in &self.obstacles {
            s.push_str(&format!("{:?} {:?} {:?}\n", o.center.x, o.center.y, o.radius));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty scene file"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [tag, id, clutter] = parts.as_slice() else {
            return Err(Error::format(format!("bad scene header '{header}'")));
        };
        if *tag != "scene" {
            return Err(Error::format(format!("bad scene header '{header}'")));
        }
        let id = id
            .parse()
            .map_err(|_| Error::format(format!("bad scene id '{id}'")))?;
        let clutter = clutter.parse()?;
        let obstacles = lines
            .map(|l| {
                let v = l
                    .split_whitespace()
                    .map(parse_f64)
                    .collect::<Result<Vec<_>>>()?;
                match v.as_slice() {
                    [x, y, r] => Ok(Obstacle {
                        center: Point::new(*x, *y),
                        radius: *r,
                    }),
                    _ => Err(Error::format(format!("bad obstacle line '{l}'"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            clutter,
            obstacles,
        })
    }
}

/// Signed clearance between the arm capsules and the nearest obstacle.
pub fn env_clearance(robot: &RobotModel, c: &Configuration, scene: &Scene) -> Result<f64> {
    let pts = robot.joint_positions(c)?;
    let mut best = f64::INFINITY;
    for o in &scene.obstacles {
        for w in pts.windows(2) {
            let d = point_segment_distance(o.center, w[0], w[1]);
            best = best.min(d - o.radius - robot.link_radius());
        }
    }
    Ok(best)
}

/// True iff any link capsule intersects any obstacle circle.
pub fn env_collision(robot: &RobotModel, c: &Configuration, scene: &Scene) -> Result<bool> {
    Ok(env_clearance(robot, c, scene)? < 0.0)
}

/// Single-channel occupancy raster over `[-R, R]²`, row 0 at `y = -R`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyImage {
    pub width: usize,
    pub height: usize,
    pub extent: f64,
    pub values: Vec<f64>,
}

impl OccupancyImage {
    pub fn occupied_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub const DEFAULT_RESOLUTION: usize = 32;

/// Pixel value is 1 iff the pixel center lies inside some obstacle.
pub fn rasterize(scene: &Scene, extent: f64, width: usize, height: usize) -> OccupancyImage {
    let center = |i: usize, n: usize| ((2 * i + 1) as f64 - n as f64) * extent / n as f64;
    let mut values = vec![0.0; width * height];
    for row in 0..height {
        let y = center(row, height);
        for col in 0..width {
            let x = center(col, width);
            let inside = scene.obstacles.iter().any(|o| {
                let (dx, dy) = (x - o.center.x, y - o.center.y);
                dx * dx + dy * dy <= o.radius * o.radius
            });
            if inside {
                values[row * width + col] = 1.0;
            }
        }
    }
    OccupancyImage {
        width,
        height,
        extent,
        values,
    }
}

/// Sampling ranges for procedural scenes, as fractions of the arm reach.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub annulus: (f64, f64),
    pub radius: (f64, f64),
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            annulus: (0.25, 0.95),
            radius: (0.05, 0.15),
        }
    }
}

const MAX_REJECTIONS: usize = 10_000;

pub fn random_scene(robot: &RobotModel, id: u32, clutter: Clutter, seed: u64) -> Result<Scene> {
    random_scene_with(robot, id, clutter, seed, SceneParams::default())
}

pub fn random_scene_with(
    robot: &RobotModel,
    id: u32,
    clutter: Clutter,
    seed: u64,
    params: SceneParams,
) -> Result<Scene> {
    let reach = robot.reach();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = clutter.count_range();
    let count = rng.random_range(lo..=hi);
    let (r_in, r_out) = (params.annulus.0 * reach, params.annulus.1 * reach);
    let (rad_lo, rad_hi) = (params.radius.0 * reach, params.radius.1 * reach);
    let mut obstacles = Vec::with_capacity(count);
    let mut rejected = 0;
    while obstacles.len() < count {
        // Uniform by area over the annulus.
        let u: f64 = rng.random();
        let rho = (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt();
        let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let radius = if rad_lo == rad_hi {
            rad_lo
        } else {
            rng.random_range(rad_lo..rad_hi)
        };
        let center = Point::new(rho * ang.cos(), rho * ang.sin());
        if center.norm() <= radius + robot.link_radius() {
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::Config(format!(
                    "scene {id}: obstacle placement rejected {MAX_REJECTIONS} times"
                )));
            }
            continue;
        }
        obstacles.push(Obstacle { center, radius });
    }
    Ok(Scene {
        id,
        clutter,
        obstacles,
    })
}
