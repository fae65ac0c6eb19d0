//! Steerable filter bases for the cyclic rotation group C_N.
//!
//! Atoms are generated as products of Gaussian radial ring profiles and
//! angular harmonics cos(m*phi) / sin(m*phi) sampled on the pixel grid,
//! then symmetrically orthonormalized. Because every atom is stored as a
//! coefficient vector over the raw (ring, harmonic) components, rotating an
//! atom is an exact closed-form phase shift of those coefficients -- no
//! pixel interpolation anywhere. At multiples of 90 degrees the analytic
//! rotation coincides with the grid permutation, which is what makes the
//! end-to-end equivariance checks exact.

use crate::error::{Error, Result};
use crate::image::Image;
use nalgebra::DMatrix;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Harmonic {
    Cos,
    Sin,
}

/// Which (ring, frequency) pair an atom descends from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtomLabel {
    /// Ring index; -1 is the center bump.
    pub ring: i32,
    pub frequency: u32,
    pub kind: Harmonic,
}

#[derive(Debug, Clone)]
pub struct SteerableBasis {
    pub kernel_size: usize,
    pub cyclicity: usize,
    pub max_frequency: usize,
    pub n_rings: usize,
    pub include_center: bool,
    pub labels: Vec<AtomLabel>,
    /// Raw unnormalized component grids, one per (ring, m, kind).
    raw: Vec<Vec<f64>>,
    /// Atom i (at rotation 0) = sum_c coeffs[i][c] * raw[c].
    coeffs: Vec<Vec<f64>>,
    /// Base atom grids, unit Frobenius norm, `[n_atoms][k*k]`.
    pub atoms: Vec<Vec<f64>>,
    /// All rotated copies, `[cyclicity][n_atoms][k*k]`.
    pub rotated: Vec<Vec<Vec<f64>>>,
}

/// Sample the raw ring/harmonic component grids and their labels.
fn sample_components(
    k: usize,
    max_frequency: usize,
    n_rings: usize,
    include_center: bool,
) -> (Vec<AtomLabel>, Vec<Vec<f64>>) {
    let r_max = (k - 1) as f64 / 2.0;
    let sigma = 0.5 * r_max / n_rings as f64;
    let center = r_max;
    let mut labels = Vec::new();
    let mut grids = Vec::new();
    // The center pixel has no defined angle; harmonics with m > 0 sample it
    // as zero so that analytic rotation and grid permutation agree exactly.
    let sample = |f: &dyn Fn(f64, f64) -> f64, mask_center: bool| -> Vec<f64> {
        let mut g = vec![0.0; k * k];
        for row in 0..k {
            for col in 0..k {
                let up = center - row as f64;
                let right = col as f64 - center;
                let d = (up * up + right * right).sqrt();
                if mask_center && d == 0.0 {
                    continue;
                }
                let phi = up.atan2(right);
                g[row * k + col] = f(d, phi);
            }
        }
        g
    };
    if include_center {
        labels.push(AtomLabel {
            ring: -1,
            frequency: 0,
            kind: Harmonic::Cos,
        });
        grids.push(sample(&|d, _| (-d * d / (2.0 * sigma * sigma)).exp(), false));
    }
    for j in 0..n_rings {
        let r0 = (j + 1) as f64 * r_max / n_rings as f64;
        for m in 0..=max_frequency {
            let radial = move |d: f64| (-(d - r0) * (d - r0) / (2.0 * sigma * sigma)).exp();
            labels.push(AtomLabel {
                ring: j as i32,
                frequency: m as u32,
                kind: Harmonic::Cos,
            });
            grids.push(sample(&|d, phi| radial(d) * (m as f64 * phi).cos(), m > 0));
            if m > 0 {
                labels.push(AtomLabel {
                    ring: j as i32,
                    frequency: m as u32,
                    kind: Harmonic::Sin,
                });
                    grids.push(sample(&|d, phi| radial(d) * (m as f64 * phi).sin(), true));
            }
        }
    }
    (labels, grids)
}

/// Build the orthonormalized steerable basis.
///
/// `max_frequency` must stay below `cyclicity / 2`; higher harmonics alias
/// on the discrete rotation group.
pub fn build_basis(
    kernel_size: usize,
    cyclicity: usize,
    max_frequency: usize,
    n_rings: usize,
    include_center: bool,
) -> Result<SteerableBasis> {
    if kernel_size % 2 == 0 || kernel_size < 3 {
        return Err(Error::invalid(format!(
            "kernel size must be odd and >= 3, got {kernel_size}"
        )));
    }
    if !matches!(cyclicity, 4 | 8 | 16) {
        return Err(Error::invalid(format!(
            "unsupported cyclicity {cyclicity} (expected 4, 8 or 16)"
        )));
    }
    if 2 * max_frequency >= cyclicity {
        return Err(Error::invalid(format!(
            "max frequency {max_frequency} aliases at cyclicity {cyclicity}"
        )));
    }
    if n_rings == 0 {
        return Err(Error::invalid("need at least one radial ring"));
    }

    let (labels, raw) = sample_components(kernel_size, max_frequency, n_rings, include_center);
    let n = labels.len();
    let kk = kernel_size * kernel_size;

    // Symmetric (Loewdin) orthonormalization of the normalized components:
    // keeps each atom as close as possible to its generating ring/harmonic.
    let norms: Vec<f64> = raw
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.iter().any(|&v| v < 1e-12) {
        return Err(Error::invalid("degenerate basis component (zero norm)"));
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = raw[i].iter().zip(&raw[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = dot / (norms[i] * norms[j]);
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_ev < 1e-6 {
        return Err(Error::invalid(format!(
            "basis family is numerically degenerate on a {kernel_size}x{kernel_size} grid \
             (min Gram eigenvalue {min_ev:.2e}); use fewer rings or frequencies"
        )));
    }
    let mut inv_sqrt = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for e in 0..n {
                s += eig.eigenvectors[(i, e)] * eig.eigenvectors[(j, e)] / eig.eigenvalues[e].sqrt();
            }
            inv_sqrt[(i, j)] = s;
        }
    }

    // Coefficients over the *unnormalized* raw grids, so rotations stay a
    // plain phase rotation of (cos, sin) coefficient pairs.
    let coeffs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|c| inv_sqrt[(i, c)] / norms[c]).collect())
        .collect();

    let grid_of = |cf: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; kk];
        for (c, &w) in cf.iter().enumerate() {
            if w != 0.0 {
                for (gv, rv) in g.iter_mut().zip(&raw[c]) {
                    *gv += w * rv;
                }
            }
        }
        g
    };

    let atoms: Vec<Vec<f64>> = coeffs.iter().map(|cf| grid_of(cf)).collect();
    let mut rotated = Vec::with_capacity(cyclicity);
    for r in 0..cyclicity {
        let angle = r as f64 * std::f64::consts::TAU / cyclicity as f64;
        let copies: Vec<Vec<f64>> = coeffs
            .iter()
            .map(|cf| grid_of(&rotate_coeffs(cf, &labels, angle)))
            .collect();
        rotated.push(copies);
    }

    Ok(SteerableBasis {
        kernel_size,
        cyclicity,
        max_frequency,
        n_rings,
        include_center,
        labels,
        raw,
        coeffs,
        atoms,
        rotated,
    })
}

/// Phase-rotate an atom's raw-component coefficients by `angle` radians.
fn rotate_coeffs(coeffs: &[f64], labels: &[AtomLabel], angle: f64) -> Vec<f64> {
    let mut out = coeffs.to_vec();
    let mut i = 0;
    while i < labels.len() {
        let l = labels[i];
        if l.frequency == 0 {
            i += 1;
            continue;
        }
        // cos/sin partners are adjacent by construction
        debug_assert_eq!(labels[i + 1].kind, Harmonic::Sin);
        let theta = l.frequency as f64 * angle;
        let (s, c) = theta.sin_cos();
        let a = coeffs[i];
        let b = coeffs[i + 1];
        out[i] = a * c - b * s;
        out[i + 1] = a * s + b * c;
        i += 2;
    }
    out
}

impl SteerableBasis {
    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Rotate the stored copy `(atom, from_rot)` by `steps` further group
    /// elements, returning the resulting grid. This is the module's own
    /// rotation operator; the stored rotated copies are its fixed points.
    pub fn rotate_atom(&self, atom: usize, from_rot: usize, steps: usize) -> Vec<f64> {
        let base_angle = from_rot as f64 * std::f64::consts::TAU / self.cyclicity as f64;
        let cf = rotate_coeffs(&self.coeffs[atom], &self.labels, base_angle);
        let step_angle = steps as f64 * std::f64::consts::TAU / self.cyclicity as f64;
        let cf = rotate_coeffs(&cf, &self.labels, step_angle);
        let kk = self.kernel_size * self.kernel_size;
        let mut g = vec![0.0; kk];
        for (c, &w) in cf.iter().enumerate() {
            for (gv, rv) in g.iter_mut().zip(&self.raw[c]) {
                *gv += w * rv;
            }
        }
        g
    }

    /// Debug dump: one row per atom, one column per rotation, mid-gray zero.
    pub fn write_contact_sheet(&self, path: &Path) -> Result<()> {
        let k = self.kernel_size;
        let cell = k + 1;
        let h = self.n_atoms() * cell + 1;
        let w = self.cyclicity * cell + 1;
        let mut img = Image::filled(h, w, 0.0);
        for (a, _) in self.atoms.iter().enumerate() {
            let peak = self.rotated[0][a]
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()))
                .max(1e-12);
            for r in 0..self.cyclicity {
                let grid = &self.rotated[r][a];
                for y in 0..k {
                    for x in 0..k {
                        let v = 0.5 + 0.5 * grid[y * k + x] / peak;
                        *img.at_mut(a * cell + 1 + y, r * cell + 1 + x) = v;
                    }
                }
            }
        }
        img.write_pgm(path)
    }
}

/// Exact lossless rotation by `k_turns` quarter turns (counter-clockwise).
pub fn rotate_image_90k(image: &Image, k_turns: usize) -> Image {
    let mut cur = image.clone();
    for _ in 0..k_turns % 4 {
        let (h, w) = (cur.h, cur.w);
        let mut out = Image::new(w, h);
        for r in 0..w {
            for c in 0..h {
                *out.at_mut(r, c) = cur.at(c, w - 1 - r);
            }
        }
        cur = out;
    }
    cur
}

/// Same quarter-turn permutation over a raw `[H, W]` grid.
pub fn rotate_grid_90(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..w {
        for c in 0..h {
            out[r * h + c] = data[c * w + (w - 1 - r)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atom_count_matches_ring_frequency_enumeration() {
        // 2 rings, frequencies {0,1,2,3}: 2 * (1 + 2*3) = 14 atoms
        let b = build_basis(5, 8, 3, 2, false).unwrap();
        assert_eq!(b.n_atoms(), 14);
        // adding the center bump gives 15
        let b = build_basis(5, 8, 3, 2, true).unwrap();
        assert_eq!(b.n_atoms(), 15);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        assert!(build_basis(4, 8, 3, 2, false).is_err()); // even kernel
        assert!(build_basis(5, 6, 2, 2, false).is_err()); // unsupported cyclicity
        assert!(build_basis(5, 8, 4, 2, false).is_err()); // aliasing frequency
    }

    #[test]
    fn atoms_are_unit_norm_and_nearly_orthogonal() {
        let b = build_basis(5, 8, 3, 2, true).unwrap();
        for i in 0..b.n_atoms() {
            let ni: f64 = b.atoms[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((ni - 1.0).abs() < 1e-10, "atom {i} norm {ni}");
            for j in 0..i {
                let dot: f64 = b.atoms[i].iter().zip(&b.atoms[j]).map(|(a, c)| a * c).sum();
                assert!(dot.abs() < 0.3, "atoms {i},{j} correlate at {dot}");
            }
        }
    }

    #[test]
    fn zero_frequency_atoms_are_rotation_invariant() {
        let b = build_basis(5, 8, 3, 2, true).unwrap();
        for (a, label) in b.labels.iter().enumerate() {
            if label.frequency == 0 {
                for r in 1..b.cyclicity {
                    for (x, y) in b.rotated[0][a].iter().zip(&b.rotated[r][a]) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_step_rotation_reproduces_stored_copies() {
        let b = build_basis(5, 8, 3, 2, true).unwrap();
        for a in 0..b.n_atoms() {
            for r in 0..b.cyclicity {
                let next = (r + 1) % b.cyclicity;
                let rotated = b.rotate_atom(a, r, 1);
                for (x, y) in rotated.iter().zip(&b.rotated[next][a]) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn full_cycle_returns_the_original_atom() {
        let b = build_basis(5, 8, 3, 2, true).unwrap();
        for a in 0..b.n_atoms() {
            let full = b.rotate_atom(a, 0, b.cyclicity);
            for (x, y) in full.iter().zip(&b.atoms[a]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quarter_turn_of_atoms_is_exactly_the_grid_permutation() {
        // cyclicity 8: two group steps = 90 degrees, which maps the pixel
        // grid onto itself.
        let b = build_basis(5, 8, 3, 2, true).unwrap();
        let k = b.kernel_size;
        for a in 0..b.n_atoms() {
            let analytic = &b.rotated[2][a];
            let permuted = rotate_grid_90(&b.rotated[0][a], k, k);
            for (x, y) in analytic.iter().zip(&permuted) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn image_rotation_helpers_compose_to_identity() {
        let mut img = Image::new(6, 6);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        assert_eq!(rotate_image_90k(&img, 0), img);
        let once = rotate_image_90k(&img, 1);
        let back = rotate_image_90k(&once, 3);
        assert_eq!(back, img);
        let full = rotate_image_90k(&img, 4);
        assert_eq!(full, img);
    }
}
