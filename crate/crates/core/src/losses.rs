//! Detector cross-entropy and descriptor hinge loss over cell grids, with
//! analytic gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::PseudoLabels;
use crate::correspondence::CellCorrespondence;
use crate::error::{Error, Result};

pub const CELL: usize = 8;
pub const CLASSES: usize = CELL * CELL + 1;
pub const DUSTBIN: usize = CELL * CELL;

/// `hc × wc` cells of `dim`-dimensional descriptors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    pub hc: usize,
    pub wc: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorGrid {
    pub fn new(hc: usize, wc: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != hc * wc * dim {
            return Err(Error::Shape(format!(
                "descriptor grid {hc}x{wc}x{dim} needs {} values, got {}",
                hc * wc * dim,
                data.len()
            )));
        }
        Ok(Self { hc, wc, dim, data })
    }

    /// Rescales every cell to unit length; zero cells are an error.
    pub fn normalized(mut self) -> Result<Self> {
        for (i, c) in self.data.chunks_mut(self.dim).enumerate() {
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return Err(Error::Degenerate(format!("descriptor cell {i} has zero norm")));
            }
            c.iter_mut().for_each(|x| *x /= n);
        }
        Ok(self)
    }

    pub fn cells(&self) -> usize {
        self.hc * self.wc
    }

    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        self.data
            .chunks(self.dim)
            .all(|c| (c.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorLossParams {
    pub m_p: f64,
    pub m_n: f64,
    pub lambda_d: f64,
}

impl Default for DescriptorLossParams {
    fn default() -> Self {
        Self {
            m_p: 1.0,
            m_n: 0.2,
            lambda_d: 250.0,
        }
    }
}

impl DescriptorLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_n && self.m_n < self.m_p && self.m_p <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "margins need 0 <= m_n < m_p <= 1, got m_n={} m_p={}",
                self.m_n, self.m_p
            )));
        }
        if !(self.lambda_d > 0.0 && self.lambda_d.is_finite()) {
            return Err(Error::InvalidParam(format!("lambda_d must be positive, got {}", self.lambda_d)));
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hinge loss of one descriptor pair; `s` marks a positive pair.
pub fn hinge_term(d: &[f64], d2: &[f64], s: bool, p: &DescriptorLossParams) -> f64 {
    hinge_of_dot(dot(d, d2), s, p)
}

#[inline]
fn hinge_of_dot(x: f64, s: bool, p: &DescriptorLossParams) -> f64 {
    if s {
        p.lambda_d * (p.m_p - x).max(0.0)
    } else {
        (x - p.m_n).max(0.0)
    }
}

/// Derivative of the hinge with respect to the dot product (zero at kinks).
#[inline]
fn hinge_slope(x: f64, s: bool, p: &DescriptorLossParams) -> f64 {
    if s {
        if x < p.m_p {
            -p.lambda_d
        } else {
            0.0
        }
    } else if x > p.m_n {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub grad_dst: Vec<f64>,
}

/// Neumaier-compensated sum.
fn compensated_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Mean hinge loss over every (source cell, destination cell) pair, plus the
/// gradient with respect to both grids. Descriptors are treated as free
/// vectors; no normalization term enters the gradient.
pub fn descriptor_loss(
    d: &DescriptorGrid,
    d2: &DescriptorGrid,
    s: &CellCorrespondence,
    p: &DescriptorLossParams,
) -> Result<DescriptorLoss> {
    p.validate()?;
    if d.dim != d2.dim {
        return Err(Error::Shape(format!("descriptor dims differ: {} vs {}", d.dim, d2.dim)));
    }
    if (s.hc, s.wc, s.hc_dst, s.wc_dst) != (d.hc, d.wc, d2.hc, d2.wc) {
        return Err(Error::Shape(format!(
            "correspondence is {}x{} -> {}x{}, grids are {}x{} and {}x{}",
            s.hc, s.wc, s.hc_dst, s.wc_dst, d.hc, d.wc, d2.hc, d2.wc
        )));
    }
    let (n, m, dim) = (d.cells(), d2.cells(), d.dim);
    let dense = s.to_dense();
    let norm = 1.0 / (n * m) as f64;

    // per pair, in row-major order: the hinge term and dl/d(dot)
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|a| {
            let da = d.cell(a);
            let mut terms = Vec::with_capacity(m);
            let mut slopes = Vec::with_capacity(m);
            for b in 0..m {
                let x = dot(da, d2.cell(b));
                let pos = dense[a * m + b];
                terms.push(hinge_of_dot(x, pos, p));
                slopes.push(hinge_slope(x, pos, p) * norm);
            }
            (terms, slopes)
        })
        .collect();
    let loss = compensated_sum(rows.iter().flat_map(|r| &r.0)) / (n * m) as f64;

    let grad: Vec<f64> = rows
        .par_iter()
        .flat_map_iter(|(_, slopes)| {
            let mut g = vec![0.0; dim];
            for (b, &k) in slopes.iter().enumerate() {
                if k != 0.0 {
                    for (gi, v) in g.iter_mut().zip(d2.cell(b)) {
                        *gi += k * v;
                    }
                }
            }
            g
        })
        .collect();
    let grad_dst: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut g = vec![0.0; dim];
            for (a, row) in rows.iter().enumerate() {
                let k = row.1[b];
                if k != 0.0 {
                    for (gi, v) in g.iter_mut().zip(d.cell(a)) {
                        *gi += k * v;
                    }
                }
            }
            g
        })
        .collect();
    Ok(DescriptorLoss { loss, grad, grad_dst })
}

/// `hc × wc` cells of 65 raw class scores: 64 in-cell positions (row-major)
/// and a trailing "no point" class.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLogits {
    pub hc: usize,
    pub wc: usize,
    pub data: Vec<f64>,
}

impl DetectorLogits {
    pub fn new(hc: usize, wc: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != hc * wc * CLASSES {
            return Err(Error::Shape(format!(
                "logits {hc}x{wc}x{CLASSES} need {} values, got {}",
                hc * wc * CLASSES,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("logits must be finite".into()));
        }
        Ok(Self { hc, wc, data })
    }
}

/// Target class per cell. When several labels share a cell the one first in
/// row-major order wins.
pub fn cell_targets(hc: usize, wc: usize, labels: &PseudoLabels) -> Result<Vec<usize>> {
    let mut t = vec![DUSTBIN; hc * wc];
    for &(x, y) in &labels.points {
        let (x, y) = (x as usize, y as usize);
        if x >= wc * CELL || y >= hc * CELL {
            return Err(Error::InvalidParam(format!(
                "label ({x}, {y}) outside the {}x{} grid area",
                wc * CELL,
                hc * CELL
            )));
        }
        let c = (y / CELL) * wc + x / CELL;
        let k = (y % CELL) * CELL + x % CELL;
        if t[c] == DUSTBIN || k < t[c] {
            t[c] = k;
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean softmax cross-entropy over cells.
pub fn detector_loss(x: &DetectorLogits, labels: &PseudoLabels) -> Result<DetectorLoss> {
    let targets = cell_targets(x.hc, x.wc, labels)?;
    let scale = 1.0 / targets.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.data.len()];
    for (c, &t) in targets.iter().enumerate() {
        let z = &x.data[c * CLASSES..(c + 1) * CLASSES];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[t];
        let g = &mut grad[c * CLASSES..(c + 1) * CLASSES];
        for (k, gk) in g.iter_mut().enumerate() {
            let prob = (z[k] - lse).exp();
            *gk = (prob - if k == t { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok(DetectorLoss {
        loss: loss * scale,
        grad,
    })
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr(hc: usize, wc: usize, positives: Vec<[u32; 4]>) -> CellCorrespondence {
        CellCorrespondence {
            hc,
            wc,
            hc_dst: hc,
            wc_dst: wc,
            cell: 8,
            eps_s: 4.0,
            crop: (wc * 8, hc * 8),
            positives,
        }
    }

    fn all_pairs(hc: usize, wc: usize) -> Vec<[u32; 4]> {
        let mut v = Vec::new();
        for h in 0..hc as u32 {
            for w in 0..wc as u32 {
                for h2 in 0..hc as u32 {
                    for w2 in 0..wc as u32 {
                        v.push([h, w, h2, w2]);
                    }
                }
            }
        }
        v
    }

    fn random_grid(rng: &mut ChaCha8Rng, hc: usize, wc: usize, dim: usize) -> DescriptorGrid {
        let data = (0..hc * wc * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        DescriptorGrid::new(hc, wc, dim, data).unwrap().normalized().unwrap()
    }

    fn random_corr(rng: &mut ChaCha8Rng, hc: usize, wc: usize) -> CellCorrespondence {
        let mut p: Vec<[u32; 4]> = all_pairs(hc, wc).into_iter().filter(|_| rng.random_bool(0.15)).collect();
        p.sort_unstable();
        corr(hc, wc, p)
    }

    #[test]
    fn hinge_examples() {
        let p = DescriptorLossParams::default();
        let d = [0.6, 0.8];
        let e = [-0.8, 0.6];
        assert_eq!(hinge_term(&d, &d, true, &p), 0.0);
        assert!((hinge_term(&d, &d, false, &p) - 0.8).abs() < 1e-12);
        assert_eq!(hinge_term(&d, &e, false, &p), 0.0);
        assert!((hinge_term(&d, &e, true, &p) - 250.0).abs() < 1e-12);
    }

    #[test]
    fn constant_grids() {
        let p = DescriptorLossParams::default();
        let one = vec![1.0, 0.0, 0.0, 0.0];
        let g = DescriptorGrid::new(2, 3, 4, one.repeat(6)).unwrap();
        let pos = descriptor_loss(&g, &g, &corr(2, 3, all_pairs(2, 3)), &p).unwrap();
        assert_eq!(pos.loss, 0.0);
        let neg = descriptor_loss(&g, &g, &corr(2, 3, vec![]), &p).unwrap();
        assert_eq!(neg.loss, 0.8);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_when_margins_hold() {
        let p = DescriptorLossParams::default();
        // orthogonal cells, positives only on the diagonal
        let dim = 4;
        let data: Vec<f64> = (0..4).flat_map(|i| (0..dim).map(move |k| if k == i { 1.0 } else { 0.0 })).collect();
        let g = DescriptorGrid::new(2, 2, dim, data).unwrap();
        let diag = vec![[0, 0, 0, 0], [0, 1, 0, 1], [1, 0, 1, 0], [1, 1, 1, 1]];
        assert_eq!(descriptor_loss(&g, &g, &corr(2, 2, diag), &p).unwrap().loss, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_grid(&mut rng, 3, 3, 8);
            let b = random_grid(&mut rng, 3, 3, 8);
            let s = random_corr(&mut rng, 3, 3);
            assert!(descriptor_loss(&a, &b, &s, &p).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn swap_symmetry_and_rotation_invariance() {
        let p = DescriptorLossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [4, 16] {
            let a = random_grid(&mut rng, 3, 4, dim);
            let b = random_grid(&mut rng, 3, 4, dim);
            let s = random_corr(&mut rng, 3, 4);
            let l = descriptor_loss(&a, &b, &s, &p).unwrap().loss;
            let swapped = descriptor_loss(&b, &a, &s.transpose(), &p).unwrap().loss;
            assert!((l - swapped).abs() <= 1e-12 * l.max(1.0));

            let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let q = m.qr().q();
            let rotate = |g: &DescriptorGrid| {
                let data = g
                    .data
                    .chunks(dim)
                    .flat_map(|c| (&q * nalgebra::DVector::from_column_slice(c)).iter().copied().collect::<Vec<_>>())
                    .collect();
                DescriptorGrid::new(g.hc, g.wc, dim, data).unwrap()
            };
            let lr = descriptor_loss(&rotate(&a), &rotate(&b), &s, &p).unwrap().loss;
            assert!((l - lr).abs() <= 1e-9 * l.max(1.0), "{l} vs {lr}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = DescriptorLossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_grid(&mut rng, 2, 2, 4);
        let b = random_grid(&mut rng, 2, 2, 8);
        assert!(matches!(descriptor_loss(&a, &b, &corr(2, 2, vec![]), &p), Err(Error::Shape(_))));
        let c = random_grid(&mut rng, 2, 2, 4);
        assert!(matches!(descriptor_loss(&a, &c, &corr(3, 2, vec![]), &p), Err(Error::Shape(_))));
    }

    /// Keeps every dot product at least `gap` away from both margins so
    /// central differences never straddle a kink.
    fn off_kink(a: &DescriptorGrid, b: &DescriptorGrid, p: &DescriptorLossParams, gap: f64) -> bool {
        (0..a.cells()).all(|i| {
            (0..b.cells()).all(|j| {
                let x = dot(a.cell(i), b.cell(j));
                (x - p.m_p).abs() > gap && (x - p.m_n).abs() > gap
            })
        })
    }

    #[test]
    fn descriptor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for (dim, params) in [
            (4, DescriptorLossParams::default()),
            (16, DescriptorLossParams::default()),
            (64, DescriptorLossParams::default()),
            (16, DescriptorLossParams { m_p: 0.7, m_n: 0.1, lambda_d: 3.0 }),
        ] {
            let (a, b, s) = loop {
                let a = random_grid(&mut rng, 4, 4, dim);
                let b = random_grid(&mut rng, 4, 4, dim);
                if off_kink(&a, &b, &params, 1e-3) {
                    break (a, b, random_corr(&mut rng, 4, 4));
                }
            };
            let out = descriptor_loss(&a, &b, &s, &params).unwrap();
            let mut worst: f64 = 0.0;
            for which in 0..2 {
                let base = if which == 0 { &a } else { &b };
                let g = if which == 0 { &out.grad } else { &out.grad_dst };
                for k in 0..base.data.len() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus.data[k] += h;
                    minus.data[k] -= h;
                    let eval = |x: &DescriptorGrid| {
                        if which == 0 {
                            descriptor_loss(x, &b, &s, &params).unwrap().loss
                        } else {
                            descriptor_loss(&a, x, &s, &params).unwrap().loss
                        }
                    };
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    worst = worst.max(relative_error(g[k], numeric));
                }
            }
            assert!(worst < 1e-4, "dim {dim}: {worst}");
        }
    }

    #[test]
    fn detector_loss_examples() {
        let labels = PseudoLabels { frame: 0, points: vec![(3, 2), (9, 12)] };
        let zero = DetectorLogits::new(2, 2, vec![0.0; 4 * CLASSES]).unwrap();
        let l = detector_loss(&zero, &labels).unwrap();
        assert!((l.loss - (65f64).ln()).abs() < 1e-12);

        let targets = cell_targets(2, 2, &labels).unwrap();
        assert_eq!(targets, vec![2 * 8 + 3, DUSTBIN, DUSTBIN, 4 * 8 + 1]);
        let mut data = vec![0.0; 4 * CLASSES];
        for (c, t) in targets.iter().enumerate() {
            data[c * CLASSES + t] = 60.0;
        }
        let sharp = detector_loss(&DetectorLogits::new(2, 2, data).unwrap(), &labels).unwrap();
        assert!(sharp.loss < 1e-20, "{}", sharp.loss);
    }

    #[test]
    fn shared_cell_resolves_row_major() {
        let labels = PseudoLabels { frame: 0, points: vec![(5, 6), (7, 1), (1, 1)] };
        assert_eq!(cell_targets(1, 1, &labels).unwrap(), vec![8 + 1]);
        let out = PseudoLabels { frame: 0, points: vec![(8, 0)] };
        assert!(cell_targets(1, 1, &out).is_err());
    }

    #[test]
    fn detector_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for labels in [
            PseudoLabels { frame: 0, points: vec![(3, 5)] },
            PseudoLabels { frame: 0, points: vec![] },
        ] {
            let data: Vec<f64> = (0..CLASSES).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = DetectorLogits::new(1, 1, data).unwrap();
            let out = detector_loss(&x, &labels).unwrap();
            let h = 1e-5;
            for k in 0..CLASSES {
                let mut p = x.clone();
                let mut m = x.clone();
                p.data[k] += h;
                m.data[k] -= h;
                let numeric =
                    (detector_loss(&p, &labels).unwrap().loss - detector_loss(&m, &labels).unwrap().loss) / (2.0 * h);
                let e = relative_error(out.grad[k], numeric);
                assert!(e < 1e-6, "class {k}: {e}");
            }
        }
    }
}
