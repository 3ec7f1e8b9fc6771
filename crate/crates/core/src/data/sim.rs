//! Leapfrog (kick-drift-kick) N-body simulators.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream_rng, Stream};
use crate::tensor::Tensor;

type Vec3 = [f64; 3];

/// Positions and velocities of one system, recorded every `record_every`
/// integrator steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[frames, n, 3]`
    pub positions: Tensor,
    /// `[frames, n, 3]`
    pub velocities: Tensor,
    pub masses: Vec<f64>,
    pub charges: Option<Vec<f64>>,
    pub dt: f64,
    pub record_every: usize,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn n_bodies(&self) -> usize {
        self.positions.shape()[1]
    }

    fn frame(t: &Tensor, k: usize) -> Tensor {
        let n = t.shape()[1];
        let data = t.data()[k * n * 3..(k + 1) * n * 3].to_vec();
        Tensor::new(&[n, 3], data).expect("frame shape")
    }

    pub fn positions_at(&self, frame: usize) -> Tensor {
        Self::frame(&self.positions, frame)
    }

    pub fn velocities_at(&self, frame: usize) -> Tensor {
        Self::frame(&self.velocities, frame)
    }
}

/// Pairwise interaction law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Interaction<'a> {
    /// `F_ij = q_i q_j (x_i - x_j) / (r^2 + s^2)^{3/2}`
    Coulomb { charges: &'a [f64], softening: f64 },
    /// `F_ij = G m_i m_j (x_j - x_i) / (r^2 + s^2)^{3/2}`, with `G = 1`
    Gravity { softening: f64 },
}

impl Interaction<'_> {
    /// Accelerations of every body. Each pair is evaluated once and applied
    /// with opposite signs, so total momentum is conserved to rounding.
    pub fn accelerations(&self, pos: &[Vec3], masses: &[f64], out: &mut [Vec3]) {
        out.iter_mut().for_each(|a| *a = [0.0; 3]);
        let n = pos.len();
        for i in 0..n {
            for j in i + 1..n {
                let d = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1], pos[i][2] - pos[j][2]];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                // force on i along d = x_i - x_j
                let (coef, s) = match *self {
                    Interaction::Coulomb { charges, softening } => (charges[i] * charges[j], softening),
                    Interaction::Gravity { softening } => (-masses[i] * masses[j], softening),
                };
                let d2 = r2 + s * s;
                let inv = 1.0 / (d2 * d2.sqrt());
                let f = coef * inv;
                for k in 0..3 {
                    out[i][k] += f * d[k] / masses[i];
                    out[j][k] -= f * d[k] / masses[j];
                }
            }
        }
    }

    /// Softened potential energy.
    pub fn potential(&self, pos: &[Vec3], masses: &[f64]) -> f64 {
        let n = pos.len();
        let mut e = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let r2: f64 = (0..3).map(|k| (pos[i][k] - pos[j][k]).powi(2)).sum();
                match *self {
                    Interaction::Coulomb { charges, softening } => {
                        e += charges[i] * charges[j] / (r2 + softening * softening).sqrt();
                    }
                    Interaction::Gravity { softening } => {
                        e -= masses[i] * masses[j] / (r2 + softening * softening).sqrt();
                    }
                }
            }
        }
        e
    }
}

pub fn kinetic_energy(vel: &[Vec3], masses: &[f64]) -> f64 {
    vel.iter()
        .zip(masses)
        .map(|(v, m)| 0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
        .sum()
}

/// Integrates `n_steps` kick-drift-kick steps, recording the initial state
/// and every `record_every`-th state after it.
pub fn leapfrog(
    mut pos: Vec<Vec3>,
    mut vel: Vec<Vec3>,
    masses: &[f64],
    law: Interaction<'_>,
    dt: f64,
    n_steps: usize,
    record_every: usize,
) -> Result<(Tensor, Tensor)> {
    if record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be at least 1".into()));
    }
    let n = pos.len();
    let frames = n_steps / record_every + 1;
    let mut rec_pos = Vec::with_capacity(frames * n * 3);
    let mut rec_vel = Vec::with_capacity(frames * n * 3);
    let record = |p: &[Vec3], v: &[Vec3], rp: &mut Vec<f64>, rv: &mut Vec<f64>| {
        rp.extend(p.iter().flatten());
        rv.extend(v.iter().flatten());
    };
    record(&pos, &vel, &mut rec_pos, &mut rec_vel);
    let mut acc = vec![[0.0; 3]; n];
    law.accelerations(&pos, masses, &mut acc);
    let half = 0.5 * dt;
    for step in 1..=n_steps {
        for (v, a) in vel.iter_mut().zip(&acc) {
            for k in 0..3 {
                v[k] += half * a[k];
            }
        }
        for (p, v) in pos.iter_mut().zip(&vel) {
            for k in 0..3 {
                p[k] += dt * v[k];
            }
        }
        law.accelerations(&pos, masses, &mut acc);
        for (v, a) in vel.iter_mut().zip(&acc) {
            for k in 0..3 {
                v[k] += half * a[k];
            }
        }
        if !pos.iter().chain(&vel).flatten().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(format!("integration diverged at step {step}")));
        }
        if step % record_every == 0 {
            record(&pos, &vel, &mut rec_pos, &mut rec_vel);
        }
    }
    Ok((
        Tensor::new(&[frames, n, 3], rec_pos)?,
        Tensor::new(&[frames, n, 3], rec_vel)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargedConfig {
    pub n_particles: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub softening: f64,
    pub record_every: usize,
    /// Standard deviation of initial positions and velocities per axis.
    pub init_std: f64,
}

impl Default for ChargedConfig {
    fn default() -> Self {
        ChargedConfig {
            n_particles: 5,
            n_steps: 1000,
            dt: 0.001,
            softening: 0.1,
            record_every: 1,
            init_std: 0.5,
        }
    }
}

/// Charged particles with unit masses and charges drawn from {-1, +1}.
/// `index` selects an independent system under the same seed.
pub fn simulate_charged(cfg: &ChargedConfig, seed: u64, index: u64) -> Result<Trajectory> {
    if cfg.n_particles < 2 {
        return Err(Error::InvalidArgument("charged systems need at least 2 particles".into()));
    }
    if !(cfg.dt > 0.0) || !(cfg.softening > 0.0) || !(cfg.init_std > 0.0) {
        return Err(Error::InvalidArgument("dt, softening and init_std must be positive".into()));
    }
    let mut rng = substream_rng(seed, Stream::Data, index);
    let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
    let n = cfg.n_particles;
    let pos: Vec<Vec3> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let vel: Vec<Vec3> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let charges: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    charged_from_state(pos, vel, charges, cfg)
}

/// Integrates a charged system from an explicit initial state.
pub fn charged_from_state(
    pos: Vec<Vec3>,
    vel: Vec<Vec3>,
    charges: Vec<f64>,
    cfg: &ChargedConfig,
) -> Result<Trajectory> {
    let masses = vec![1.0; pos.len()];
    let law = Interaction::Coulomb {
        charges: &charges,
        softening: cfg.softening,
    };
    let (positions, velocities) = leapfrog(pos, vel, &masses, law, cfg.dt, cfg.n_steps, cfg.record_every)?;
    Ok(Trajectory {
        positions,
        velocities,
        masses,
        charges: Some(charges),
        dt: cfg.dt,
        record_every: cfg.record_every,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitalConfig {
    pub n_planets: usize,
    pub moons_per_planet: usize,
    pub central_mass: f64,
    pub planet_mass: (f64, f64),
    pub moon_mass: (f64, f64),
    pub planet_radius: (f64, f64),
    pub moon_radius: (f64, f64),
    pub softening: f64,
    pub n_steps: usize,
    pub dt: f64,
    pub record_every: usize,
}

impl Default for OrbitalConfig {
    fn default() -> Self {
        OrbitalConfig {
            n_planets: 3,
            moons_per_planet: 2,
            central_mass: 1.0,
            planet_mass: (1e-3, 5e-3),
            moon_mass: (1e-6, 1e-5),
            planet_radius: (1.0, 4.0),
            moon_radius: (0.015, 0.03),
            softening: 1e-3,
            n_steps: 4000,
            dt: 0.001,
            record_every: 10,
        }
    }
}

impl OrbitalConfig {
    pub fn n_bodies(&self) -> usize {
        1 + self.n_planets * (1 + self.moons_per_planet)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("planet_mass", self.planet_mass),
            ("moon_mass", self.moon_mass),
            ("planet_radius", self.planet_radius),
            ("moon_radius", self.moon_radius),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if !(self.central_mass > 0.0) {
            return Err(Error::InvalidArgument("central_mass must be positive".into()));
        }
        if !(self.dt > 0.0) || !(self.softening >= 0.0) {
            return Err(Error::InvalidArgument("dt must be positive and softening non-negative".into()));
        }
        if self.moons_per_planet > 0 && self.n_planets > 0 && self.moon_radius.1 > 0.1 * self.planet_radius.0 {
            return Err(Error::InvalidArgument(format!(
                "moon orbits up to {} are not hierarchically separated from planet orbits from {} (need <= 0.1x)",
                self.moon_radius.1, self.planet_radius.0
            )));
        }
        Ok(())
    }
}

/// Orthonormal pair spanning a uniformly random plane through the origin.
fn random_plane(rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    let normal = loop {
        let v: Vec3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-6 {
            break [v[0] / len, v[1] / len, v[2] / len];
        }
    };
    let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(normal, helper));
    let w = cross(normal, u);
    (u, w)
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let len = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / len, a[1] / len, a[2] / len]
}

/// Position and velocity of a circular orbit of `radius` about a body of
/// mass `mass`, at `phase` in the plane `(u, w)`.
pub fn circular_orbit(radius: f64, mass: f64, phase: f64, (u, w): (Vec3, Vec3)) -> (Vec3, Vec3) {
    let speed = (mass / radius).sqrt();
    let (s, c) = phase.sin_cos();
    let mut p = [0.0; 3];
    let mut v = [0.0; 3];
    for k in 0..3 {
        p[k] = radius * (c * u[k] + s * w[k]);
        v[k] = speed * (-s * u[k] + c * w[k]);
    }
    (p, v)
}

/// Body layout: index 0 is the central body, then for each planet the planet
/// followed by its moons.
pub fn simulate_orbital(cfg: &OrbitalConfig, seed: u64, index: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = substream_rng(seed, Stream::Data, index);
    let mut pos = vec![[0.0; 3]];
    let mut vel = vec![[0.0; 3]];
    let mut masses = vec![cfg.central_mass];
    let (r_lo, r_hi) = cfg.planet_radius;
    for k in 0..cfg.n_planets {
        // planets spread over the radius range, one per sub-interval
        let slot = (k as f64 + rng.gen_range(0.25..0.75)) / cfg.n_planets as f64;
        let radius = r_lo + (r_hi - r_lo) * slot;
        let mass = uniform(&mut rng, cfg.planet_mass);
        let plane = random_plane(&mut rng);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (p, v) = circular_orbit(radius, cfg.central_mass, phase, plane);
        pos.push(p);
        vel.push(v);
        masses.push(mass);
        for _ in 0..cfg.moons_per_planet {
            let moon_r = uniform(&mut rng, cfg.moon_radius);
            let moon_m = uniform(&mut rng, cfg.moon_mass);
            let plane = random_plane(&mut rng);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (mp, mv) = circular_orbit(moon_r, mass, phase, plane);
            pos.push([p[0] + mp[0], p[1] + mp[1], p[2] + mp[2]]);
            vel.push([v[0] + mv[0], v[1] + mv[1], v[2] + mv[2]]);
            masses.push(moon_m);
        }
    }
    orbital_from_state(pos, vel, masses, cfg)
}

pub fn orbital_from_state(pos: Vec<Vec3>, vel: Vec<Vec3>, masses: Vec<f64>, cfg: &OrbitalConfig) -> Result<Trajectory> {
    let law = Interaction::Gravity {
        softening: cfg.softening,
    };
    let (positions, velocities) = leapfrog(pos, vel, &masses, law, cfg.dt, cfg.n_steps, cfg.record_every)?;
    Ok(Trajectory {
        positions,
        velocities,
        masses,
        charges: None,
        dt: cfg.dt,
        record_every: cfg.record_every,
    })
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}
