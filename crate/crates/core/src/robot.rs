//! Planar N-link revolute arm: forward kinematics, Jacobian, capsule
//! self-collision.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, segment_distance, Point};

/// Joint-angle vector in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// End-effector pose: position in meters, heading in `(-π, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    link_lengths: Vec<f64>,
    joint_limits: Vec<(f64, f64)>,
    link_radius: f64,
}

impl Default for RobotModel {
    /// Four links of 0.4/0.3/0.2/0.1 m, ±2.9 rad limits, 2 cm capsules.
    fn default() -> Self {
        Self::new(vec![0.4, 0.3, 0.2, 0.1], vec![(-2.9, 2.9); 4], 0.02)
            .expect("default robot is valid")
    }
}

impl RobotModel {
    pub fn new(
        link_lengths: Vec<f64>,
        joint_limits: Vec<(f64, f64)>,
        link_radius: f64,
    ) -> Result<Self> {
        let n = link_lengths.len();
        if n < 3 {
            return Err(Error::Config(format!("robot needs at least 3 links, got {n}")));
        }
        if joint_limits.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: joint_limits.len(),
            });
        }
        if link_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        // Degenerate [a, a] limits are accepted; they pin the joint.
        if joint_limits.iter().any(|&(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config("joint limits need lo <= hi".into()));
        }
        let shortest = link_lengths.iter().copied().fold(f64::INFINITY, f64::min);
        if !(link_radius > 0.0 && link_radius < shortest / 2.0) {
            return Err(Error::Config(format!(
                "link radius {link_radius} must lie in (0, {})",
                shortest / 2.0
            )));
        }
        Ok(Self {
            link_lengths,
            joint_limits,
            link_radius,
        })
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    pub fn joint_limits(&self) -> &[(f64, f64)] {
        &self.joint_limits
    }

    pub fn link_radius(&self) -> f64 {
        self.link_radius
    }

    /// Total reach Σ Lᵢ.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    fn check(&self, c: &Configuration) -> Result<()> {
        if c.len() != self.dof() {
            return Err(Error::Dimension {
                expected: self.dof(),
                got: c.len(),
            });
        }
        Ok(())
    }

    /// Joint positions from the base to the tip (N + 1 points).
    pub fn joint_positions(&self, c: &Configuration) -> Result<Vec<Point>> {
        self.check(c)?;
        let mut pts = Vec::with_capacity(self.dof() + 1);
        let (mut x, mut y, mut phi) = (0.0, 0.0, 0.0);
        pts.push(Point::new(0.0, 0.0));
        for (l, q) in self.link_lengths.iter().zip(&c.0) {
            phi += q;
            x += l * phi.cos();
            y += l * phi.sin();
            pts.push(Point::new(x, y));
        }
        Ok(pts)
    }

    pub fn forward_kinematics(&self, c: &Configuration) -> Result<Pose> {
        let pts = self.joint_positions(c)?;
        let tip = pts[pts.len() - 1];
        Ok(Pose::new(tip.x, tip.y, c.0.iter().sum()))
    }

    /// 3×N partials of `(x, y, θ)`, row-major.
    pub fn jacobian(&self, c: &Configuration) -> Result<Vec<[f64; 3]>> {
        self.check(c)?;
        let n = self.dof();
        let mut phi = 0.0;
        let mut dx = vec![0.0; n];
        let mut dy = vec![0.0; n];
        for (i, (l, q)) in self.link_lengths.iter().zip(&c.0).enumerate() {
            phi += q;
            dx[i] = -l * phi.sin();
            dy[i] = l * phi.cos();
        }
        // Joint i moves every link j ≥ i.
        let mut cols = vec![[0.0, 0.0, 1.0]; n];
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in (0..n).rev() {
            sx += dx[i];
            sy += dy[i];
            cols[i] = [sx, sy, 1.0];
        }
        Ok(cols)
    }

    /// Minimum clearance between non-adjacent link capsules; negative when
    /// they overlap.
    pub fn self_clearance(&self, c: &Configuration) -> Result<f64> {
        let pts = self.joint_positions(c)?;
        let n = self.dof();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 2..n {
                let d = segment_distance(pts[i], pts[i + 1], pts[j], pts[j + 1]);
                best = best.min(d - 2.0 * self.link_radius);
            }
        }
        Ok(best)
    }

    /// True iff two non-adjacent capsules overlap.
    pub fn self_collision(&self, c: &Configuration) -> Result<bool> {
        Ok(self.self_clearance(c)? < 0.0)
    }

    /// Distance from `p` to the arm's link segments (not including radius).
    pub fn distance_to_links(&self, c: &Configuration, p: Point) -> Result<f64> {
        let pts = self.joint_positions(c)?;
        Ok(pts
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min))
    }

    pub fn sample_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        Configuration(
            self.joint_limits
                .iter()
                .map(|&(lo, hi)| if lo == hi { lo } else { rng.random_range(lo..hi) })
                .collect(),
        )
    }

    pub fn within_limits(&self, c: &Configuration) -> bool {
        c.0.iter()
            .zip(&self.joint_limits)
            .all(|(q, (lo, hi))| (*lo..=*hi).contains(q))
    }

    /// Key-value text block embedded in dataset and checkpoint headers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &mut dyn Iterator<Item = f64>| {
            v.map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(s, "link_lengths = {}", join(&mut self.link_lengths.iter().copied()));
        let _ = writeln!(
            s,
            "joint_limits = {}",
            self.joint_limits
                .iter()
                .map(|(lo, hi)| format!("{lo:?}:{hi:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        let _ = writeln!(s, "link_radius = {:?}", self.link_radius);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lengths = None;
        let mut limits = None;
        let mut radius = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim();
            match k.trim() {
                "link_lengths" => {
                    lengths = Some(
                        v.split_whitespace()
                            .map(parse_f64)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "joint_limits" => {
                    limits = Some(
                        v.split_whitespace()
                            .map(|p| {
                                let (a, b) = p.split_once(':').ok_or_else(|| {
                                    Error::format(format!("bad joint limit '{p}'"))
                                })?;
                                Ok((parse_f64(a)?, parse_f64(b)?))
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "link_radius" => radius = Some(parse_f64(v)?),
                _ => {}
            }
        }
        match (lengths, limits, radius) {
            (Some(l), Some(j), Some(r)) => Self::new(l, j, r),
            _ => Err(Error::format("incomplete robot block")),
        }
    }
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(format!("bad number '{s}'")))
}
