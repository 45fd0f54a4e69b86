//! Shuffled versus plain Gaussians on a 2-D grid.
//!
//! A shuffled Gaussian centred at `y` is the uniform mixture of Gaussians
//! centred at every distinct reordering of `y`'s entries.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension for which the mixture is enumerated exactly.
pub const MAX_ENUM_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points_per_axis: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: -10.0, hi: 10.0, points_per_axis: 201 }
    }
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, points_per_axis: usize) -> Result<Self> {
        let g = Self { lo, hi, points_per_axis };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::domain(format!("grid needs lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if self.points_per_axis < 3 {
            return Err(Error::domain(format!("grid needs >= 3 points per axis, got {}", self.points_per_axis)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points_per_axis - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }
}

/// Advances `v` to its next lexicographic arrangement; false after the last one.
fn next_permutation(v: &mut [f64]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1].total_cmp(&v[i]).is_ge() {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j].total_cmp(&v[i - 1]).is_le() {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Every distinct reordering of `values`, each listed once.
pub fn distinct_permutations(values: &[f64]) -> Result<Vec<Vec<f64>>> {
    if values.len() > MAX_ENUM_DIM {
        return Err(Error::domain(format!(
            "exact enumeration supports dimension <= {MAX_ENUM_DIM}, got {}",
            values.len()
        )));
    }
    let mut cur = values.to_vec();
    cur.sort_by(f64::total_cmp);
    let mut out = vec![cur.clone()];
    while next_permutation(&mut cur) {
        out.push(cur.clone());
    }
    Ok(out)
}

fn gaussian_pdf(center: &[f64], sigma: f64, at: &[f64]) -> f64 {
    let k = center.len() as f64;
    let sq: f64 = center.iter().zip(at).map(|(c, x)| (x - c) * (x - c)).sum();
    (-sq / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma).powf(k / 2.0)
}

fn check(center: &[f64], sigma: f64, at: &[f64]) -> Result<()> {
    if center.len() != at.len() {
        return Err(Error::shape("density point", center.len(), at.len()));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn plain_gaussian_pdf(center: &[f64], sigma: f64, at: &[f64]) -> Result<f64> {
    check(center, sigma, at)?;
    Ok(gaussian_pdf(center, sigma, at))
}

/// Density of the shuffled Gaussian: the mean of `N(at; y', sigma^2 I)`
/// over distinct reorderings `y'` of `center`.
pub fn shuffled_gaussian_pdf(center: &[f64], sigma: f64, at: &[f64]) -> Result<f64> {
    check(center, sigma, at)?;
    let perms = distinct_permutations(center)?;
    Ok(perms.iter().map(|p| gaussian_pdf(p, sigma, at)).sum::<f64>() / perms.len() as f64)
}

/// One draw: add `N(0, sigma^2 I)` to `center`, then permute uniformly.
pub fn sample_shuffled_gaussian<R: rand::Rng + ?Sized>(center: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect();
    v.shuffle(rng);
    v
}

/// Density values over the grid, row-major with `y` as the row index.
pub fn grid_density(center: &[f64], sigma: f64, grid: &GridSpec, shuffled: bool) -> Result<Vec<f64>> {
    grid.validate()?;
    if center.len() != 2 {
        return Err(Error::shape("grid_density center", 2, center.len()));
    }
    check(center, sigma, &[0.0, 0.0])?;
    let perms = if shuffled { distinct_permutations(center)? } else { vec![center.to_vec()] };
    let n = grid.points_per_axis;
    Ok((0..n)
        .into_par_iter()
        .flat_map_iter(|iy| {
            let y = grid.coord(iy);
            let perms = &perms;
            (0..n).map(move |ix| {
                let at = [grid.coord(ix), y];
                perms.iter().map(|p| gaussian_pdf(p, sigma, &at)).sum::<f64>() / perms.len() as f64
            })
        })
        .collect())
}

/// Frobenius norm of the difference of two grid-sampled densities, without
/// multiplying by the cell area.
pub fn mixture_distance(c1: &[f64], c2: &[f64], sigma: f64, grid: &GridSpec, shuffled: bool) -> Result<f64> {
    let a = grid_density(c1, sigma, grid, shuffled)?;
    let b = grid_density(c2, sigma, grid, shuffled)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDistances {
    pub unshuffled: f64,
    pub shuffled: f64,
    pub ratio: f64,
}

pub fn toy_distances(c1: &[f64], c2: &[f64], sigma: f64, grid: &GridSpec) -> Result<ToyDistances> {
    let unshuffled = mixture_distance(c1, c2, sigma, grid, false)?;
    let shuffled = mixture_distance(c1, c2, sigma, grid, true)?;
    Ok(ToyDistances { unshuffled, shuffled, ratio: unshuffled / shuffled })
}
