//! Sparse 5-point Laplacian solves on an arbitrary set of unknown pixels.
//!
//! For every unknown pixel `p` the system reads
//! `sum_{q in N(p), q not free} (u_p - u_q) = g_p`
//! where neighbours carrying a fixed value are moved to the right-hand side
//! and free neighbours (Neumann) drop out of the stencil. Components of
//! unknowns that never touch a fixed value are singular and reported as
//! unanchored instead of being solved.

/// Role of a pixel adjacent to the unknown set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Boundary {
    Fixed(f64),
    Free,
}

pub(crate) struct LaplaceSystem {
    /// Pixel index of every unknown.
    pixels: Vec<usize>,
    /// Unknown index by pixel, `u32::MAX` for non-unknown pixels.
    slot: Vec<u32>,
    diag: Vec<f64>,
    neighbors: Vec<[u32; 4]>,
    counts: Vec<u8>,
    fixed_rhs: Vec<f64>,
    anchored: Vec<bool>,
}

pub(crate) struct Solution {
    /// Per-pixel values; only unknown pixels in anchored components are set.
    pub values: Vec<f64>,
    /// Per-pixel flag: unknown and solved.
    pub solved: Vec<bool>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub max_residual: f64,
}

impl LaplaceSystem {
    pub fn new(
        width: usize,
        height: usize,
        unknown: &[bool],
        boundary: impl Fn(usize) -> Boundary,
    ) -> Self {
        let n_pix = width * height;
        let mut slot = vec![u32::MAX; n_pix];
        let mut pixels = Vec::new();
        for (i, &u) in unknown.iter().enumerate() {
            if u {
                slot[i] = pixels.len() as u32;
                pixels.push(i);
            }
        }
        let n = pixels.len();
        let mut diag = vec![0.0; n];
        let mut neighbors = vec![[0u32; 4]; n];
        let mut counts = vec![0u8; n];
        let mut fixed_rhs = vec![0.0; n];
        let mut touches_fixed = vec![false; n];
        for (k, &p) in pixels.iter().enumerate() {
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if unknown[q] {
                    diag[k] += 1.0;
                    neighbors[k][counts[k] as usize] = slot[q];
                    counts[k] += 1;
                } else if let Boundary::Fixed(v) = boundary(q) {
                    diag[k] += 1.0;
                    fixed_rhs[k] += v;
                    touches_fixed[k] = true;
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }

        // Flood each component of unknowns; it is solvable iff some member
        // touches a fixed value.
        let mut anchored = vec![false; n];
        let mut seen = vec![false; n];
        let mut stack = Vec::new();
        let mut members = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            members.clear();
            seen[start] = true;
            stack.push(start);
            let mut any_fixed = false;
            while let Some(k) = stack.pop() {
                members.push(k);
                any_fixed |= touches_fixed[k];
                for &nb in &neighbors[k][..counts[k] as usize] {
                    let nb = nb as usize;
                    if !seen[nb] {
                        seen[nb] = true;
                        stack.push(nb);
                    }
                }
            }
            if any_fixed {
                for &k in &members {
                    anchored[k] = true;
                }
            }
        }

        Self {
            pixels,
            slot,
            diag,
            neighbors,
            counts,
            fixed_rhs,
            anchored,
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for k in 0..u.len() {
            if !self.anchored[k] {
                out[k] = 0.0;
                continue;
            }
            let mut acc = self.diag[k] * u[k];
            for &nb in &self.neighbors[k][..self.counts[k] as usize] {
                acc -= u[nb as usize];
            }
            out[k] = acc;
        }
    }

    /// Conjugate gradients with a Jacobi preconditioner until the max-abs
    /// residual drops below `tol`.
    ///
    /// `guidance` is indexed by pixel and added to the right-hand side;
    /// `init` (per pixel) seeds the iteration.
    pub fn solve(&self, guidance: Option<&[f64]>, init: Option<&[f64]>, tol: f64) -> Solution {
        let n = self.pixels.len();
        let mut b = self.fixed_rhs.clone();
        if let Some(g) = guidance {
            for (k, &p) in self.pixels.iter().enumerate() {
                b[k] += g[p];
            }
        }
        let mut u: Vec<f64> = match init {
            Some(init) => self.pixels.iter().map(|&p| init[p]).collect(),
            None => vec![0.0; n],
        };
        for k in 0..n {
            if !self.anchored[k] {
                b[k] = 0.0;
                u[k] = 0.0;
            }
        }

        let mut r = vec![0.0; n];
        self.apply(&u, &mut r);
        for k in 0..n {
            r[k] = b[k] - r[k];
        }
        let inv_diag: Vec<f64> = self
            .diag
            .iter()
            .zip(&self.anchored)
            .map(|(&d, &a)| if a && d > 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let mut res = max_abs(&r);
        let max_iter = 50_000 + 4 * n;
        let mut iter = 0;
        while res >= tol && iter < max_iter {
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                u[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            // Refresh the true residual now and then to avoid drift.
            if iter % 200 == 199 {
                self.apply(&u, &mut ap);
                for k in 0..n {
                    r[k] = b[k] - ap[k];
                }
            }
            res = max_abs(&r);
            for k in 0..n {
                z[k] = r[k] * inv_diag[k];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
            iter += 1;
        }
        // Report the true residual.
        self.apply(&u, &mut ap);
        let true_res = (0..n).fold(0.0f64, |m, k| m.max((b[k] - ap[k]).abs()));

        let total = self.slot.len();
        let mut values = vec![0.0; total];
        let mut solved = vec![false; total];
        for (k, &pix) in self.pixels.iter().enumerate() {
            if self.anchored[k] {
                values[pix] = u[k];
                solved[pix] = true;
            }
        }
        Solution {
            values,
            solved,
            max_residual: true_res,
        }
    }
}

/// Residual tolerance used for every Laplace/Poisson solve.
pub(crate) const SOLVE_TOL: f64 = 1e-9;
