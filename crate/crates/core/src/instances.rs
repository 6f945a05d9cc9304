//! Problem instances: a depot plus `n` pickup/delivery pairs in the plane.
//!
//! Node indices follow a fixed layout: `0` is the depot, `1..=n` are the
//! pickups and `n+1..=2n` the deliveries, so pickup `i` pairs with delivery
//! `i + n`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PdpError, Result};

/// File extension used for instance files.
pub const INSTANCE_EXTENSION: &str = "pdp.jsonl";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }

    fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Depot,
    Pickup,
    Delivery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    depot: Point,
    pickups: Vec<Point>,
    deliveries: Vec<Point>,
    speed: f64,
}

impl Instance {
    pub fn new(depot: Point, pickups: Vec<Point>, deliveries: Vec<Point>, speed: f64) -> Result<Self> {
        if pickups.is_empty() {
            return Err(PdpError::InvalidInstance("at least one pickup/delivery pair is required".into()));
        }
        if pickups.len() != deliveries.len() {
            return Err(PdpError::InvalidInstance(format!(
                "{} pickups but {} deliveries",
                pickups.len(),
                deliveries.len()
            )));
        }
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(PdpError::InvalidInstance(format!("speed must be positive, got {speed}")));
        }
        let all_finite = depot.is_finite() && pickups.iter().chain(&deliveries).all(|p| p.is_finite());
        if !all_finite {
            return Err(PdpError::InvalidInstance("coordinates must be finite".into()));
        }
        Ok(Self {
            depot,
            pickups,
            deliveries,
            speed,
        })
    }

    /// Number of pickup/delivery pairs.
    pub fn n(&self) -> usize {
        self.pickups.len()
    }

    /// `2n + 1`.
    pub fn num_nodes(&self) -> usize {
        2 * self.n() + 1
    }

    pub fn depot(&self) -> Point {
        self.depot
    }

    pub fn pickups(&self) -> &[Point] {
        &self.pickups
    }

    pub fn deliveries(&self) -> &[Point] {
        &self.deliveries
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn with_speed(mut self, speed: f64) -> Result<Self> {
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(PdpError::InvalidInstance(format!("speed must be positive, got {speed}")));
        }
        self.speed = speed;
        Ok(self)
    }

    pub fn role(&self, i: usize) -> NodeRole {
        let n = self.n();
        match i {
            0 => NodeRole::Depot,
            i if i <= n => NodeRole::Pickup,
            _ => NodeRole::Delivery,
        }
    }

    /// The partner node of a pickup or delivery; `None` for the depot.
    pub fn partner(&self, i: usize) -> Option<usize> {
        match self.role(i) {
            NodeRole::Depot => None,
            NodeRole::Pickup => Some(i + self.n()),
            NodeRole::Delivery => Some(i - self.n()),
        }
    }

    pub fn point(&self, i: usize) -> Result<Point> {
        self.check_index(i)?;
        Ok(self.coords(i))
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i < self.num_nodes() {
            Ok(())
        } else {
            Err(PdpError::IndexOutOfRange {
                index: i,
                nodes: self.num_nodes(),
            })
        }
    }

    /// Coordinates of node `i`; panics if `i > 2n`.
    pub fn coords(&self, i: usize) -> Point {
        let n = self.n();
        match i {
            0 => self.depot,
            i if i <= n => self.pickups[i - 1],
            i => self.deliveries[i - n - 1],
        }
    }

    /// Euclidean distance between nodes `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_index(j)?;
        Ok(self.coords(i).distance(self.coords(j)))
    }

    /// Travel time `D_ij / f`; panics on out-of-range indices.
    pub fn travel_time(&self, i: usize, j: usize) -> f64 {
        self.coords(i).distance(self.coords(j)) / self.speed
    }

    /// Row-major `(2n+1) × (2n+1)` distance matrix.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let m = self.num_nodes();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = self.coords(i).distance(self.coords(j));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    /// Each coordinate i.i.d. `U[0, 1]`.
    Uniform,
    /// 2-D normal centred at `(0.5, 0.5)` with per-axis standard deviation
    /// `sdv`, rejecting points outside the unit square.
    Gaussian { sdv: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n: usize,
    pub distribution: Distribution,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn uniform(n: usize, seed: u64) -> Self {
        Self {
            n,
            distribution: Distribution::Uniform,
            seed,
        }
    }

    pub fn gaussian(n: usize, sdv: f64, seed: u64) -> Self {
        Self {
            n,
            distribution: Distribution::Gaussian { sdv },
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(PdpError::InvalidConfig("n must be at least 1".into()));
        }
        if let Distribution::Gaussian { sdv } = self.distribution {
            if !(sdv > 0.0 && sdv.is_finite()) {
                return Err(PdpError::InvalidConfig(format!("sdv must be positive, got {sdv}")));
            }
        }
        Ok(())
    }
}

/// Draws points from one of the supported distributions.
#[derive(Clone, Debug)]
pub struct PointSampler {
    normal: Option<Normal<f64>>,
}

impl PointSampler {
    pub fn new(distribution: Distribution) -> Result<Self> {
        let normal = match distribution {
            Distribution::Uniform => None,
            Distribution::Gaussian { sdv } => Some(
                Normal::new(0.5, sdv).map_err(|e| PdpError::InvalidConfig(format!("sdv {sdv}: {e}")))?,
            ),
        };
        Ok(Self { normal })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match &self.normal {
            None => Point::new(rng.random::<f64>(), rng.random::<f64>()),
            Some(normal) => loop {
                let p = Point::new(normal.sample(rng), normal.sample(rng));
                if (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y) {
                    break p;
                }
            },
        }
    }

    /// Depot first, then the `n` pickups, then the `n` deliveries.
    pub fn instance<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Instance {
        let depot = self.sample(rng);
        let pickups = (0..n).map(|_| self.sample(rng)).collect();
        let deliveries = (0..n).map(|_| self.sample(rng)).collect();
        Instance::new(depot, pickups, deliveries, 1.0).expect("sampled instance is valid")
    }
}

/// Generates `count` instances from one seeded stream.
pub fn generate_many(config: &GeneratorConfig, count: usize) -> Result<Vec<Instance>> {
    config.validate()?;
    let sampler = PointSampler::new(config.distribution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok((0..count).map(|_| sampler.instance(&mut rng, config.n)).collect())
}

/// The first instance of [`generate_many`] for the same config.
pub fn generate(config: &GeneratorConfig) -> Result<Instance> {
    Ok(generate_many(config, 1)?.remove(0))
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    n: usize,
    speed: f64,
    depot: [f64; 2],
    pickups: Vec<[f64; 2]>,
    deliveries: Vec<[f64; 2]>,
}

impl From<&Instance> for InstanceRecord {
    fn from(inst: &Instance) -> Self {
        let xy = |p: &Point| [p.x, p.y];
        Self {
            n: inst.n(),
            speed: inst.speed,
            depot: xy(&inst.depot),
            pickups: inst.pickups.iter().map(xy).collect(),
            deliveries: inst.deliveries.iter().map(xy).collect(),
        }
    }
}

impl InstanceRecord {
    fn into_instance(self) -> Result<Instance> {
        if self.pickups.len() != self.n || self.deliveries.len() != self.n {
            return Err(PdpError::InvalidInstance(format!(
                "n = {} but {} pickups and {} deliveries",
                self.n,
                self.pickups.len(),
                self.deliveries.len()
            )));
        }
        let pt = |a: [f64; 2]| Point::new(a[0], a[1]);
        Instance::new(
            pt(self.depot),
            self.pickups.into_iter().map(pt).collect(),
            self.deliveries.into_iter().map(pt).collect(),
            self.speed,
        )
    }
}

pub fn write_instances<W: Write>(mut out: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, &InstanceRecord::from(inst))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses one instance per non-blank line.
pub fn read_instances<R: BufRead>(input: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstanceRecord = serde_json::from_str(&line).map_err(|e| PdpError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let inst = record.into_instance().map_err(|e| PdpError::Validation {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_instances(instances: &[Instance], path: impl AsRef<Path>) -> Result<()> {
    write_instances(BufWriter::new(File::create(path)?), instances)
}

pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    read_instances(BufReader::new(File::open(path)?))
}
