//! Classical inpainting baseline: missing pixels minimize the discrete
//! biharmonic energy given the valid pixels.
//!
//! The energy is `Σ_p (L u)_p²` where `L` is the grid-graph Laplacian (in
//! the interior the usual 5-point stencil; at the image border only in-image
//! neighbors count). Its stationarity condition is the 13-point bilaplacian
//! away from the border. Unknowns couple at Manhattan distance ≤ 2, so the
//! missing set is split into components under that adjacency and each is
//! solved on its own.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::MaskMatrix;

/// Components with at most this many unknowns use the direct solver.
pub const DIRECT_LIMIT: usize = 10_000;
const CG_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Energy {
    Biharmonic,
    Harmonic,
}

struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    fn neighbors(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (p / self.w, p % self.w);
        let up = (r > 0).then(|| p - self.w);
        let down = (r + 1 < self.h).then(|| p + self.w);
        let left = (c > 0).then(|| p - 1);
        let right = (c + 1 < self.w).then(|| p + 1);
        [up, down, left, right].into_iter().flatten()
    }

    fn degree(&self, p: usize) -> f64 {
        self.neighbors(p).count() as f64
    }

    /// Row `p` of the graph Laplacian as `(column, coefficient)` pairs.
    fn laplacian_row(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        std::iter::once((p, -self.degree(p))).chain(self.neighbors(p).map(|q| (q, 1.0)))
    }
}

/// Symmetric positive definite system over one component, three
/// right-hand sides (one per channel).
struct System {
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<[f64; 3]>,
}

fn add_entry(row: &mut Vec<(usize, f64)>, col: usize, v: f64) {
    match row.iter_mut().find(|(c, _)| *c == col) {
        Some(e) => e.1 += v,
        None => row.push((col, v)),
    }
}

fn build_system(grid: &Grid, pixels: &[usize], index: &[usize], values: &[f32], energy: Energy) -> System {
    let n = pixels.len();
    let mut rows = vec![Vec::new(); n];
    let mut rhs = vec![[0.0; 3]; n];
    let mut couple = |i: usize, q: usize, coef: f64, rows: &mut Vec<Vec<(usize, f64)>>| {
        if index[q] != usize::MAX {
            add_entry(&mut rows[i], index[q], coef);
        } else {
            for ch in 0..3 {
                rhs[i][ch] -= coef * values[q * 3 + ch] as f64;
            }
        }
    };
    for (i, &pi) in pixels.iter().enumerate() {
        match energy {
            Energy::Biharmonic => {
                // Row i of LᵀL: Σ_p L[p][i] · L[p][·].
                for (p, c1) in grid.laplacian_row(pi) {
                    for (q, c2) in grid.laplacian_row(p) {
                        couple(i, q, c1 * c2, &mut rows);
                    }
                }
            }
            Energy::Harmonic => {
                for (q, c) in grid.laplacian_row(pi) {
                    couple(i, q, -c, &mut rows);
                }
            }
        }
    }
    System { rows, rhs }
}

/// Lower band of a symmetric matrix, factored in place as `L·Lᵀ`.
struct BandCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    fn at(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (i - j)
    }

    fn factor(sys: &System) -> Option<Self> {
        let n = sys.rows.len();
        let bw = sys.rows.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&(j, _)| i.saturating_sub(j))).max().unwrap_or(0);
        let mut m = Self { n, bw, band: vec![0.0; n * (bw + 1)] };
        for (i, row) in sys.rows.iter().enumerate() {
            for &(j, v) in row.iter().filter(|&&(j, _)| j <= i) {
                let k = m.at(i, j);
                m.band[k] = v;
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = m.band[m.at(i, j)];
                for k in lo.max(j.saturating_sub(bw))..j {
                    s -= m.band[m.at(i, k)] * m.band[m.at(j, k)];
                }
                if i == j {
                    if !(s > 0.0 && s.is_finite()) {
                        return None;
                    }
                    let k = m.at(i, i);
                    m.band[k] = s.sqrt();
                } else {
                    let k = m.at(i, j);
                    m.band[k] = s / m.band[m.at(j, j)];
                }
            }
        }
        Some(m)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        for i in 0..self.n {
            for k in i.saturating_sub(self.bw)..i {
                y[i] -= self.band[self.at(i, k)] * y[k];
            }
            y[i] /= self.band[self.at(i, i)];
        }
        for i in (0..self.n).rev() {
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                y[i] -= self.band[self.at(k, i)] * y[k];
            }
            y[i] /= self.band[self.at(i, i)];
        }
        y
    }
}

/// Jacobi-preconditioned conjugate gradient; `None` if it stalls.
fn conjugate_gradient(sys: &System, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let diag: Vec<f64> =
        sys.rows.iter().enumerate().map(|(i, r)| r.iter().find(|(c, _)| *c == i).map_or(1.0, |e| e.1)).collect();
    if diag.iter().any(|&d| d <= 0.0) {
        return None;
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        for (o, row) in out.iter_mut().zip(&sys.rows) {
            *o = row.iter().map(|&(j, a)| a * v[j]).sum();
        }
    };
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Some(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for _ in 0..(20 * n).max(100) {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= CG_TOLERANCE * b_norm {
            return Some(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

fn solve_system(sys: &System) -> Option<Vec<[f64; 3]>> {
    let n = sys.rows.len();
    let column = |ch: usize| -> Vec<f64> { sys.rhs.iter().map(|r| r[ch]).collect() };
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(3);
    let direct = |cols: &mut Vec<Vec<f64>>| -> Option<()> {
        let f = BandCholesky::factor(sys)?;
        cols.clear();
        cols.extend((0..3).map(|ch| f.solve(&column(ch))));
        Some(())
    };
    if n <= DIRECT_LIMIT {
        direct(&mut cols)?;
    } else {
        for ch in 0..3 {
            match conjugate_gradient(sys, &column(ch)) {
                Some(x) => cols.push(x),
                None => {
                    log::warn!("conjugate gradient did not converge on {n} unknowns; using the direct solver");
                    direct(&mut cols)?;
                    break;
                }
            }
        }
    }
    Some((0..n).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect())
}

/// Missing pixels grouped by Manhattan-distance-≤2 adjacency.
fn components(grid: &Grid, m: &MaskMatrix) -> Vec<Vec<usize>> {
    let bits = m.bits();
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    for start in 0..bits.len() {
        if bits[start] == 1 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = ((p / grid.w) as i64, (p % grid.w) as i64);
            for dr in -2i64..=2 {
                for dc in -2i64..=2 {
                    let (nr, nc) = (r + dr, c + dc);
                    if dr.abs() + dc.abs() > 2 || nr < 0 || nc < 0 || nr >= grid.h as i64 || nc >= grid.w as i64 {
                        continue;
                    }
                    let q = nr as usize * grid.w + nc as usize;
                    if bits[q] == 0 && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn fill(x_tilde: &ImageTensor, m: &MaskMatrix, energy: Energy) -> Result<(ImageTensor, bool)> {
    x_tilde.check_mask(m)?;
    if m.missing_count() == m.bits().len() {
        return Err(Error::validation("every pixel is missing; there is no boundary data to inpaint from"));
    }
    let grid = Grid { h: m.height(), w: m.width() };
    let mut out = x_tilde.clone();
    let mut index = vec![usize::MAX; m.bits().len()];
    let mut fell_back = false;
    for comp in components(&grid, m) {
        for (i, &p) in comp.iter().enumerate() {
            index[p] = i;
        }
        let solved = match solve_system(&build_system(&grid, &comp, &index, x_tilde.pixels(), energy)) {
            Some(s) => s,
            None if energy == Energy::Biharmonic => {
                log::warn!("biharmonic system is singular on a {}-pixel component; using a harmonic fill", comp.len());
                fell_back = true;
                solve_system(&build_system(&grid, &comp, &index, x_tilde.pixels(), Energy::Harmonic))
                    .ok_or_else(|| Error::Fault("harmonic fallback system is singular".into()))?
            }
            None => return Err(Error::Fault("harmonic system is singular".into())),
        };
        for (&p, v) in comp.iter().zip(&solved) {
            for ch in 0..3 {
                out.pixels_mut()[p * 3 + ch] = v[ch] as f32;
            }
            index[p] = usize::MAX;
        }
    }
    Ok((out, fell_back))
}

/// Biharmonic fill without clamping; missing pixels may leave [0, 1].
pub fn biharmonic_fill_unclamped(x_tilde: &ImageTensor, m: &MaskMatrix) -> Result<ImageTensor> {
    fill(x_tilde, m, Energy::Biharmonic).map(|(img, _)| img)
}

/// Harmonic (membrane) fill; obeys the discrete maximum principle.
pub fn harmonic_inpaint(x_tilde: &ImageTensor, m: &MaskMatrix) -> Result<ImageTensor> {
    fill(x_tilde, m, Energy::Harmonic).map(|(img, _)| img)
}

/// Biharmonic inpainting; valid pixels are returned unchanged and filled
/// pixels are clamped to [0, 1].
pub fn biharmonic_inpaint(x_tilde: &ImageTensor, m: &MaskMatrix) -> Result<ImageTensor> {
    let (mut out, _) = fill(x_tilde, m, Energy::Biharmonic)?;
    for (px, &valid) in out.pixels_mut().chunks_exact_mut(3).zip(m.bits()) {
        if valid == 0 {
            px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}
