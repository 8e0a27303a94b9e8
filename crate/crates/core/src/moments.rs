//! Empirical and analytic moments consumed by the detector.
//!
//! Tensors are dense with the `d^2` axis (`x (x) x`, index `c * d + e`)
//! innermost:
//!
//! * `G[a, b, :] = E[y_a x_b (x (x) x)]`, shape `l x d x d^2`
//! * `H[a, b, :] = E[y_a y_b (x (x) x)]`, shape `l x l x d^2`, symmetric in `(a, b)`
//!
//! `E[y (x) x^3]` is the same data as `G` under a different index grouping.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distmat;
use crate::error::{Error, Result};
use crate::io::{self, MatrixFormat};
use crate::model::{DistributionSpec, NetworkParams, SampleSet};
use crate::reduce;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub d: usize,
    pub l: usize,
    /// Sample count; `None` for population (analytic) moments.
    pub n: Option<usize>,
    /// `E[x x^T]`, `d x d`.
    pub c2: DMatrix<f64>,
    /// `E[y x^T]`, `l x d`.
    pub cyx: DMatrix<f64>,
    /// `E[y y^T]`, `l x l`.
    pub cyy: DMatrix<f64>,
    /// `E[x (x) x]`, the flattened view of `c2`.
    pub c2vec: DVector<f64>,
    /// `E[y]`, used to fix the signs of recovered neurons.
    pub ey: DVector<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl MomentSet {
    pub fn d2(&self) -> usize {
        self.d * self.d
    }

    pub fn g(&self, a: usize, b: usize) -> &[f64] {
        let d2 = self.d2();
        let start = (a * self.d + b) * d2;
        &self.g[start..start + d2]
    }

    pub fn h(&self, a: usize, b: usize) -> &[f64] {
        let d2 = self.d2();
        let start = (a * self.l + b) * d2;
        &self.h[start..start + d2]
    }

    /// Sample-count weighted average of two empirical moment sets.
    pub fn merge(&self, other: &MomentSet) -> Result<MomentSet> {
        let (Some(n1), Some(n2)) = (self.n, other.n) else {
            return Err(Error::Config("population moments cannot be merged".into()));
        };
        if self.d != other.d || self.l != other.l {
            return Err(Error::Shape("moment sets have different dimensions".into()));
        }
        let total = (n1 + n2) as f64;
        let (w1, w2) = (n1 as f64 / total, n2 as f64 / total);
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| w1 * x + w2 * y).collect::<Vec<_>>();
        Ok(MomentSet {
            d: self.d,
            l: self.l,
            n: Some(n1 + n2),
            c2: &self.c2 * w1 + &other.c2 * w2,
            cyx: &self.cyx * w1 + &other.cyx * w2,
            cyy: &self.cyy * w1 + &other.cyy * w2,
            c2vec: &self.c2vec * w1 + &other.c2vec * w2,
            ey: &self.ey * w1 + &other.ey * w2,
            g: mix(&self.g, &other.g),
            h: mix(&self.h, &other.h),
        })
    }

    /// Moments of the projected outputs `P^T y` (`P` is `l x l'`).
    pub fn project_outputs(&self, p: &DMatrix<f64>) -> Result<MomentSet> {
        if p.nrows() != self.l {
            return Err(Error::Shape(format!("projector has {} rows, expected l={}", p.nrows(), self.l)));
        }
        let lp = p.ncols();
        let (d, d2) = (self.d, self.d2());
        let mut g = vec![0.0; lp * d * d2];
        for ap in 0..lp {
            for a in 0..self.l {
                let coef = p[(a, ap)];
                for b in 0..d {
                    let dst = &mut g[(ap * d + b) * d2..(ap * d + b + 1) * d2];
                    for (o, v) in dst.iter_mut().zip(self.g(a, b)) {
                        *o += coef * v;
                    }
                }
            }
        }
        let mut h = vec![0.0; lp * lp * d2];
        for ap in 0..lp {
            for bp in 0..lp {
                let dst = &mut h[(ap * lp + bp) * d2..(ap * lp + bp + 1) * d2];
                for a in 0..self.l {
                    for b in 0..self.l {
                        let coef = p[(a, ap)] * p[(b, bp)];
                        if coef != 0.0 {
                            for (o, v) in dst.iter_mut().zip(self.h(a, b)) {
                                *o += coef * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(MomentSet {
            d,
            l: lp,
            n: self.n,
            c2: self.c2.clone(),
            cyx: p.transpose() * &self.cyx,
            cyy: p.transpose() * &self.cyy * p,
            c2vec: self.c2vec.clone(),
            ey: p.transpose() * &self.ey,
            g,
            h,
        })
    }

    /// Writes every field as a matrix file plus `manifest.json`.
    pub fn write_dir(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let d2 = self.d2();
        io::write_matrix(&format.path_in(dir, "C2"), &self.c2, format)?;
        io::write_matrix(&format.path_in(dir, "Cyx"), &self.cyx, format)?;
        io::write_matrix(&format.path_in(dir, "Cyy"), &self.cyy, format)?;
        io::write_matrix(&format.path_in(dir, "c2vec"), &DMatrix::from_column_slice(d2, 1, self.c2vec.as_slice()), format)?;
        io::write_matrix(&format.path_in(dir, "Ey"), &DMatrix::from_column_slice(self.l, 1, self.ey.as_slice()), format)?;
        io::write_matrix(&format.path_in(dir, "G"), &DMatrix::from_row_slice(self.l * self.d, d2, &self.g), format)?;
        io::write_matrix(&format.path_in(dir, "H"), &DMatrix::from_row_slice(self.l * self.l, d2, &self.h), format)?;
        io::write_json(
            &dir.join("manifest.json"),
            &MomentManifest {
                n: self.n,
                d: self.d,
                l: self.l,
                shapes: MomentShapes {
                    c2: [self.d, self.d],
                    cyx: [self.l, self.d],
                    cyy: [self.l, self.l],
                    c2vec: [d2, 1],
                    ey: [self.l, 1],
                    g: [self.l * self.d, d2],
                    h: [self.l * self.l, d2],
                },
            },
        )
    }

    pub fn read_dir(dir: &Path) -> Result<MomentSet> {
        let manifest: MomentManifest = io::read_json(&dir.join("manifest.json"))?;
        let load = |stem: &str, shape: [usize; 2]| -> Result<DMatrix<f64>> {
            let m = io::read_matrix(&io::find_matrix(dir, stem)?)?;
            if m.shape() != (shape[0], shape[1]) {
                return Err(Error::Data(format!("{stem} has shape {:?}, manifest says {shape:?}", m.shape())));
            }
            Ok(m)
        };
        let s = &manifest.shapes;
        let row_major = |m: DMatrix<f64>| m.transpose().as_slice().to_vec();
        Ok(MomentSet {
            d: manifest.d,
            l: manifest.l,
            n: manifest.n,
            c2: load("C2", s.c2)?,
            cyx: load("Cyx", s.cyx)?,
            cyy: load("Cyy", s.cyy)?,
            c2vec: load("c2vec", s.c2vec)?.column(0).into_owned(),
            ey: load("Ey", s.ey)?.column(0).into_owned(),
            g: row_major(load("G", s.g)?),
            h: row_major(load("H", s.h)?),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentShapes {
    c2: [usize; 2],
    cyx: [usize; 2],
    cyy: [usize; 2],
    c2vec: [usize; 2],
    ey: [usize; 2],
    g: [usize; 2],
    h: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentManifest {
    n: Option<usize>,
    d: usize,
    l: usize,
    shapes: MomentShapes,
}

/// Arithmetic means of the per-sample outer products, accumulated in fixed
/// blocks with a fixed pairwise reduction tree.
pub fn estimate_moments(samples: &SampleSet) -> Result<MomentSet> {
    let n = samples.n();
    if n == 0 {
        return Err(Error::EmptyInput("no samples to estimate moments from".into()));
    }
    if samples.x.iter().chain(samples.y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sample entry".into()));
    }
    let (d, l) = (samples.d(), samples.l());
    let d2 = d * d;
    // Row-major copies keep the inner loops on contiguous memory.
    let xs: Vec<f64> = samples.x.transpose().as_slice().to_vec();
    let ys: Vec<f64> = samples.y.transpose().as_slice().to_vec();

    let off_cyx = d2;
    let off_cyy = off_cyx + l * d;
    let off_ey = off_cyy + l * l;
    let off_g = off_ey + l;
    let off_h = off_g + l * d * d2;
    let width = off_h + l * l * d2;

    let sums = reduce::block_sum(n, width, |rows, acc| {
        let mut xx = vec![0.0; d2];
        for r in rows {
            let x = &xs[r * d..(r + 1) * d];
            let y = &ys[r * l..(r + 1) * l];
            for c in 0..d {
                for e in 0..d {
                    xx[c * d + e] = x[c] * x[e];
                }
            }
            for (o, v) in acc[..d2].iter_mut().zip(&xx) {
                *o += v;
            }
            for a in 0..l {
                acc[off_ey + a] += y[a];
                for b in 0..d {
                    acc[off_cyx + a * d + b] += y[a] * x[b];
                    let coef = y[a] * x[b];
                    let dst = &mut acc[off_g + (a * d + b) * d2..off_g + (a * d + b + 1) * d2];
                    for (o, v) in dst.iter_mut().zip(&xx) {
                        *o += coef * v;
                    }
                }
                for b in a..l {
                    let coef = y[a] * y[b];
                    acc[off_cyy + a * l + b] += coef;
                    let dst = &mut acc[off_h + (a * l + b) * d2..off_h + (a * l + b + 1) * d2];
                    for (o, v) in dst.iter_mut().zip(&xx) {
                        *o += coef * v;
                    }
                }
            }
        }
    });

    let inv = 1.0 / n as f64;
    let mean = |range: std::ops::Range<usize>| sums[range].iter().map(|v| v * inv).collect::<Vec<_>>();
    let c2vec = mean(0..d2);
    let mut cyy = DMatrix::from_row_slice(l, l, &mean(off_cyy..off_cyy + l * l));
    let mut h = mean(off_h..width);
    for a in 0..l {
        for b in 0..a {
            cyy[(a, b)] = cyy[(b, a)];
            let (src, dst) = ((b * l + a) * d2, (a * l + b) * d2);
            h.copy_within(src..src + d2, dst);
        }
    }
    Ok(MomentSet {
        d,
        l,
        n: Some(n),
        c2: DMatrix::from_row_slice(d, d, &c2vec),
        cyx: DMatrix::from_row_slice(l, d, &mean(off_cyx..off_cyy)),
        cyy,
        c2vec: DVector::from_vec(c2vec),
        ey: DVector::from_vec(mean(off_ey..off_g)),
        g: mean(off_g..off_h),
        h,
    })
}

/// Exact population moments for standard Gaussian inputs.
///
/// Uses `E[relu(a.x)^p x^(q)] = 1/2 E[(a.x)^p x^(q)]` for even `p + q`,
/// `E[relu(a.x) relu(b.x) g(x)] = 1/2 (E[(a.x)(b.x) g(x)] - E[(a.x)(b.x) g(x) 1{(a.x)(b.x) <= 0}])`,
/// the Gaussian fourth-moment (Wick) expansion, and the closed-form
/// distinguishing columns.
pub fn analytic_gaussian_moments(params: &NetworkParams, spec: &DistributionSpec) -> Result<MomentSet> {
    let d = params.d();
    match spec {
        DistributionSpec::StandardGaussian { dim } if *dim == d => {}
        DistributionSpec::StandardGaussian { dim } => {
            return Err(Error::Shape(format!("distribution dim {dim} but the network expects d={d}")))
        }
        other => {
            return Err(Error::UnsupportedDistribution(format!(
                "analytic moments need a standard Gaussian, got {other:?}"
            )))
        }
    }
    let (k, l) = (params.k(), params.l());
    let d2 = d * d;
    let w = &params.w;
    let a = &params.a;
    let s2 = params.noise_sigma * params.noise_sigma;
    let rows: Vec<DVector<f64>> = (0..k).map(|i| w.row(i).transpose()).collect();
    let eye = DMatrix::<f64>::identity(d, d);

    // Pairwise E[relu(w_i.x) relu(w_j.x)] and E[relu relu (x (x) x)].
    let mut s = DMatrix::zeros(k, k);
    let mut q: Vec<DVector<f64>> = vec![DVector::zeros(d2); k * k];
    for i in 0..k {
        for j in i..k {
            let gram = rows[i].dot(&rows[j]);
            let sym = &rows[i] * rows[j].transpose() + &rows[j] * rows[i].transpose();
            let full = &eye * gram + sym;
            let (sij, qij) = if i == j {
                (0.5 * gram, full * 0.5)
            } else {
                let (n_ij, m_ij) = distmat::closed_form_pair(&rows[i], &rows[j]);
                (0.5 * (gram - m_ij), (full - n_ij) * 0.5)
            };
            s[(i, j)] = sij;
            s[(j, i)] = sij;
            let flat = distmat::flatten(&qij);
            q[i * k + j] = flat.clone();
            q[j * k + i] = flat;
        }
    }

    let mut g = vec![0.0; l * d * d2];
    for ao in 0..l {
        for b in 0..d {
            let dst = &mut g[(ao * d + b) * d2..(ao * d + b + 1) * d2];
            for i in 0..k {
                let coef = 0.5 * a[(ao, i)];
                if coef == 0.0 {
                    continue;
                }
                let wi = &rows[i];
                for c in 0..d {
                    for e in 0..d {
                        let mut v = 0.0;
                        if c == e {
                            v += wi[b];
                        }
                        if b == e {
                            v += wi[c];
                        }
                        if b == c {
                            v += wi[e];
                        }
                        dst[c * d + e] += coef * v;
                    }
                }
            }
        }
    }

    let vec_eye = distmat::flatten(&eye);
    let mut h = vec![0.0; l * l * d2];
    for ao in 0..l {
        for bo in 0..l {
            let dst = &mut h[(ao * l + bo) * d2..(ao * l + bo + 1) * d2];
            for i in 0..k {
                for j in 0..k {
                    let coef = a[(ao, i)] * a[(bo, j)];
                    if coef != 0.0 {
                        for (o, v) in dst.iter_mut().zip(q[i * k + j].iter()) {
                            *o += coef * v;
                        }
                    }
                }
            }
            if ao == bo && s2 > 0.0 {
                for (o, v) in dst.iter_mut().zip(vec_eye.iter()) {
                    *o += s2 * v;
                }
            }
        }
    }

    let half_norms = DVector::from_iterator(k, rows.iter().map(|r| r.norm() / (2.0 * std::f64::consts::PI).sqrt()));
    Ok(MomentSet {
        d,
        l,
        n: None,
        c2: eye.clone(),
        cyx: a * w * 0.5,
        cyy: a * s * a.transpose() + DMatrix::identity(l, l) * s2,
        c2vec: vec_eye,
        ey: a * half_norms,
        g,
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;

    #[test]
    fn single_sample_moments_are_outer_products() {
        let s = SampleSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 1, &[2.0]),
            0,
            None,
        )
        .unwrap();
        let m = estimate_moments(&s).unwrap();
        assert_eq!(m.c2, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(m.cyx, DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        assert_eq!(m.g(0, 0), &[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.g(0, 1), &[0.0; 4]);
        assert_eq!(m.h(0, 0), &[4.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.n, Some(1));
    }

    #[test]
    fn empty_and_non_finite_inputs_fail() {
        let empty = SampleSet::new(DMatrix::zeros(0, 2), DMatrix::zeros(0, 1), 0, None).unwrap();
        assert!(matches!(estimate_moments(&empty), Err(Error::EmptyInput(_))));
        let bad = SampleSet {
            x: DMatrix::from_row_slice(1, 1, &[f64::NAN]),
            y: DMatrix::zeros(1, 1),
            seed: 0,
            spec: None,
        };
        assert!(matches!(estimate_moments(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn structural_symmetries_hold_exactly() {
        let p = NetworkParams::random_orthonormal(3, 4, 3, 0.2, 5).unwrap();
        let s = model::draw_samples(&p, &DistributionSpec::standard_gaussian(4), 3000, 5).unwrap();
        let m = estimate_moments(&s).unwrap();
        assert_eq!(m.c2.transpose(), m.c2);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(m.h(a, b), m.h(b, a));
            }
            for b in 0..4 {
                let slice = DMatrix::from_row_slice(4, 4, m.g(a, b));
                assert!((&slice - slice.transpose()).amax() <= 1e-12);
            }
        }
        let flat = distmat::flatten(&m.c2);
        assert_eq!(flat, m.c2vec);
    }

    #[test]
    fn single_unit_analytic_values() {
        let p = NetworkParams::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            0.0,
        )
        .unwrap();
        let m = analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(3)).unwrap();
        assert_eq!(m.cyx, DMatrix::from_row_slice(1, 3, &[0.5, 0.0, 0.0]));
        assert!((m.cyy[(0, 0)] - 0.5).abs() < 1e-15);
        // trace of E[relu(w.x)^2 x x^T] = (d + 2) / 2
        let h = DMatrix::from_row_slice(3, 3, m.h(0, 0));
        assert!((h.trace() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn analytic_moments_reject_other_distributions() {
        let p = NetworkParams::random_orthonormal(2, 2, 2, 0.0, 1).unwrap();
        let spec = DistributionSpec::ShapedGaussian { q: vec![vec![1.0, 0.0], vec![0.0, 2.0]] };
        assert!(matches!(
            analytic_gaussian_moments(&p, &spec),
            Err(Error::UnsupportedDistribution(_))
        ));
    }

    #[test]
    fn projection_by_identity_is_a_no_op() {
        let p = NetworkParams::random_orthonormal(2, 3, 2, 0.1, 8).unwrap();
        let m = analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(3)).unwrap();
        let same = m.project_outputs(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(same, m);
    }

    #[test]
    fn moment_directory_round_trips() {
        let p = NetworkParams::random_orthonormal(2, 3, 3, 0.1, 2).unwrap();
        let s = model::draw_samples(&p, &DistributionSpec::standard_gaussian(3), 500, 2).unwrap();
        let m = estimate_moments(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for fmt in [MatrixFormat::Csv, MatrixFormat::Bin] {
            let sub = dir.path().join(fmt.extension());
            m.write_dir(&sub, fmt).unwrap();
            assert_eq!(MomentSet::read_dir(&sub).unwrap(), m);
        }
    }
}
