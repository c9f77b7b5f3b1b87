//! Training objectives on rendered patches.
//!
//! Each term has a graph builder (suffix `_g`) used during training and a
//! plain-value wrapper that evaluates the same graph. Patches are row-major
//! `h × w` pixel grids; colour and albedo are `[h·w, 3]`, depth and
//! projection error `[h·w]`. Every "sum over pixels" is a mean, so weights
//! are resolution independent.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Weights of the seven terms of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub color: f64,
    pub ac: f64,
    pub dc: f64,
    pub ds: f64,
    pub edge: f64,
    pub pid: f64,
    pub chrom: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            ac: 1.0,
            dc: 1.0,
            ds: 0.1,
            edge: 0.1,
            pid: 1.0,
            chrom: 0.01,
        }
    }
}

impl LossWeights {
    pub const NAMES: [&'static str; 7] = ["L_color", "L_ac", "L_dc", "L_ds", "L_edge", "L_pid", "L_chrom"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.color, self.ac, self.dc, self.ds, self.edge, self.pid, self.chrom]
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in Self::NAMES.iter().zip(self.as_array()) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("weight of {n} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Terms in [`LossWeights::NAMES`] order.
    pub terms: [f64; 7],
    pub total: f64,
    pub valid_correspondences: usize,
}

impl LossReport {
    pub fn new(terms: [f64; 7], w: &LossWeights, valid_correspondences: usize) -> Result<Self> {
        for (n, t) in LossWeights::NAMES.iter().zip(terms) {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("loss term {n}")));
            }
        }
        let total = terms.iter().zip(w.as_array()).map(|(t, l)| t * l).sum();
        Ok(Self {
            terms,
            total,
            valid_correspondences,
        })
    }

    pub fn csv_row(&self, iter: usize) -> String {
        let mut s = iter.to_string();
        for t in self.terms.iter().chain(std::iter::once(&self.total)) {
            s.push(',');
            s.push_str(&format!("{t:e}"));
        }
        s
    }
}

/// Per-pixel occlusion weights ω.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityWeights {
    pub omega: Vec<f64>,
    pub in_bounds: Vec<bool>,
    pub r_e: f64,
    /// Largest in-bounds projection error of the batch.
    pub m_proj: f64,
}

const M_PROJ_FLOOR: f64 = 1e-12;

/// `ω = r_e (1 − E/M)` on in-bounds pixels, 0 elsewhere.
pub fn visibility_weights(e_proj: &[f64], in_bounds: &[bool], r_e: f64) -> VisibilityWeights {
    let m_proj = e_proj
        .iter()
        .zip(in_bounds)
        .filter(|(_, ok)| **ok)
        .map(|(e, _)| *e)
        .fold(0.0, f64::max);
    let omega = e_proj
        .iter()
        .zip(in_bounds)
        .map(|(e, ok)| match (*ok, m_proj < M_PROJ_FLOOR) {
            (false, _) => 0.0,
            (true, true) => r_e,
            (true, false) => (r_e * (1.0 - e / m_proj)).max(0.0),
        })
        .collect();
    VisibilityWeights {
        omega,
        in_bounds: in_bounds.to_vec(),
        r_e,
        m_proj,
    }
}

/// Unordered 4-neighbour pairs `(p, q)` with `q` right of or below `p`.
pub fn neighbour_pairs(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                out.push((p, p + 1));
            }
            if r + 1 < h {
                out.push((p, p + w));
            }
        }
    }
    out
}

fn zero(g: &mut Graph) -> Var {
    g.constant(&[1], vec![0.0])
}

/// Squared differences `x[q·ch + c] − x[p·ch + c]` for every pair and channel.
fn pair_diff_sq(g: &mut Graph, x: Var, pairs: &[(usize, usize)], ch: usize) -> Var {
    let mut ia = Vec::with_capacity(pairs.len() * ch);
    let mut ib = Vec::with_capacity(pairs.len() * ch);
    for &(p, q) in pairs {
        for c in 0..ch {
            ia.push(q * ch + c);
            ib.push(p * ch + c);
        }
    }
    let a = g.gather(x, ia);
    let b = g.gather(x, ib);
    let d = g.sub(a, b);
    g.square(d)
}

fn rgb_weights(per_pixel: impl Iterator<Item = f64>) -> Vec<f64> {
    per_pixel.flat_map(|w| [w, w, w]).collect()
}

pub fn color_loss_g(g: &mut Graph, pred: Var, gt: &[f64], valid: &[bool]) -> Var {
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return zero(g);
    }
    let target = g.constant(g.shape(pred).to_vec().as_slice(), gt.to_vec());
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let inv = 1.0 / n as f64;
    g.weighted_sum(sq, rgb_weights(valid.iter().map(|v| if *v { inv } else { 0.0 })))
}

pub fn albedo_consistency_g(g: &mut Graph, src: Var, tgt: Var, omega: &[f64]) -> Var {
    let d = g.sub(src, tgt);
    let sq = g.square(d);
    let inv = 1.0 / omega.len().max(1) as f64;
    g.weighted_sum(sq, rgb_weights(omega.iter().map(|w| w * inv)))
}

pub fn depth_consistency_g(g: &mut Graph, e_proj: Var, in_bounds: &[bool], h: usize, w: usize) -> Var {
    let pairs: Vec<_> = neighbour_pairs(h, w)
        .into_iter()
        .filter(|(p, q)| in_bounds[*p] && in_bounds[*q])
        .collect();
    if pairs.is_empty() {
        return zero(g);
    }
    let sq = pair_diff_sq(g, e_proj, &pairs, 1);
    g.mean(sq)
}

pub fn depth_smoothness_g(g: &mut Graph, depth: Var, h: usize, w: usize) -> Var {
    let pairs = neighbour_pairs(h, w);
    if pairs.is_empty() {
        return zero(g);
    }
    let sq = pair_diff_sq(g, depth, &pairs, 1);
    g.mean(sq)
}

/// Gradient-of-difference edge loss. Pair `(p, q)` is weighted by `ω(p)` and
/// dropped when `q` is out of bounds. With `exp_variant`, albedo enters
/// through `exp(mask · a)` instead.
pub fn edge_preserving_g(
    g: &mut Graph,
    src: Var,
    tgt: Var,
    vis: &VisibilityWeights,
    h: usize,
    w: usize,
    exp_variant: bool,
) -> Var {
    let pairs = neighbour_pairs(h, w);
    if pairs.is_empty() {
        return zero(g);
    }
    let diff = if exp_variant {
        let mask = rgb_weights(vis.in_bounds.iter().map(|b| if *b { 1.0 } else { 0.0 }));
        let ms = g.mul_const(src, mask.clone());
        let es = g.exp(ms);
        let mt = g.mul_const(tgt, mask);
        let et = g.exp(mt);
        g.sub(es, et)
    } else {
        g.sub(src, tgt)
    };
    let sq = pair_diff_sq(g, diff, &pairs, 3);
    let inv = 1.0 / pairs.len() as f64;
    let weights: Vec<f64> = pairs
        .iter()
        .flat_map(|&(p, q)| {
            let wgt = if vis.in_bounds[q] { vis.omega[p] * inv } else { 0.0 };
            [wgt, wgt, wgt]
        })
        .collect();
    g.weighted_sum(sq, weights)
}

/// `mean( mask·‖ch(src) − ch(tgt)‖² + ‖ch(src) − ch(color)‖² )`.
pub fn chromaticity_consistency_g(g: &mut Graph, src: Var, tgt: Var, color: Var, mask: &[bool]) -> Var {
    let inv = 1.0 / mask.len().max(1) as f64;
    let cs = g.chromaticity(src);
    let ct = g.chromaticity(tgt);
    let cc = g.chromaticity(color);
    let d1 = g.sub(cs, ct);
    let s1 = g.square(d1);
    let t1 = g.weighted_sum(s1, rgb_weights(mask.iter().map(|m| if *m { inv } else { 0.0 })));
    let d2 = g.sub(cs, cc);
    let s2 = g.square(d2);
    let t2 = g.weighted_sum(s2, vec![inv; 3 * mask.len()]);
    g.add(t1, t2)
}

pub fn intrinsic_smoothness_g(g: &mut Graph, albedo: Var, h: usize, w: usize) -> Var {
    let pairs = neighbour_pairs(h, w);
    if pairs.is_empty() {
        return zero(g);
    }
    let sq = pair_diff_sq(g, albedo, &pairs, 3);
    g.weighted_sum(sq, vec![1.0 / pairs.len() as f64; 3 * pairs.len()])
}

/// Graph nodes of the seven terms, in [`LossWeights::NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub vars: [Var; 7],
}

/// Weighted sum node plus its report. Aborts on a non-finite term.
pub fn total_loss_g(g: &mut Graph, terms: &LossTerms, w: &LossWeights, valid: usize) -> Result<(Var, LossReport)> {
    w.validate()?;
    let values: [f64; 7] = terms.vars.map(|v| g.scalar(v));
    let report = LossReport::new(values, w, valid)?;
    let mut total: Option<Var> = None;
    for (v, lam) in terms.vars.iter().zip(w.as_array()) {
        if lam == 0.0 {
            continue;
        }
        let s = g.scale(*v, lam);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| zero(g));
    Ok((total, report))
}

fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.scalar(v)
}

fn c3(g: &mut Graph, x: &[f64]) -> Var {
    g.constant(&[x.len() / 3, 3], x.to_vec())
}

fn c1(g: &mut Graph, x: &[f64]) -> Var {
    g.constant(&[x.len()], x.to_vec())
}

pub fn color_loss(pred: &[f64], gt: &[f64], valid: &[bool]) -> f64 {
    eval(|g| {
        let p = c3(g, pred);
        color_loss_g(g, p, gt, valid)
    })
}

pub fn albedo_consistency(src: &[f64], tgt: &[f64], vis: &VisibilityWeights) -> f64 {
    eval(|g| {
        let (s, t) = (c3(g, src), c3(g, tgt));
        albedo_consistency_g(g, s, t, &vis.omega)
    })
}

pub fn depth_consistency(e_proj: &[f64], in_bounds: &[bool], h: usize, w: usize) -> f64 {
    eval(|g| {
        let e = c1(g, e_proj);
        depth_consistency_g(g, e, in_bounds, h, w)
    })
}

pub fn depth_smoothness(depth: &[f64], h: usize, w: usize) -> f64 {
    eval(|g| {
        let d = c1(g, depth);
        depth_smoothness_g(g, d, h, w)
    })
}

pub fn edge_preserving(src: &[f64], tgt: &[f64], vis: &VisibilityWeights, h: usize, w: usize, exp_variant: bool) -> f64 {
    eval(|g| {
        let (s, t) = (c3(g, src), c3(g, tgt));
        edge_preserving_g(g, s, t, vis, h, w, exp_variant)
    })
}

pub fn chromaticity_consistency(src: &[f64], tgt: &[f64], color: &[f64], mask: &[bool]) -> f64 {
    eval(|g| {
        let (s, t, c) = (c3(g, src), c3(g, tgt), c3(g, color));
        chromaticity_consistency_g(g, s, t, c, mask)
    })
}

pub fn intrinsic_smoothness(albedo: &[f64], h: usize, w: usize) -> f64 {
    eval(|g| {
        let a = c3(g, albedo);
        intrinsic_smoothness_g(g, a, h, w)
    })
}

pub fn total_loss(terms: [f64; 7], w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    LossReport::new(terms, w, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, ParamStore, Precision};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn near(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn color_examples() {
        let gt = vec![0.2, 0.4, 0.6, 0.1, 0.5, 0.9];
        let v = vec![true, true];
        assert_eq!(color_loss(&gt, &gt, &v), 0.0);
        let p: Vec<f64> = gt.iter().map(|x| x + 0.1).collect();
        assert!(near(color_loss(&p, &gt, &v), 0.03, 1e-15));
        assert_eq!(color_loss(&p, &gt, &[false, false]), 0.0);
    }

    #[test]
    fn visibility_examples() {
        let v = visibility_weights(&[0.0], &[true], 1.0);
        assert_eq!(v.omega, vec![1.0]);
        let v = visibility_weights(&[1.0, 4.0, 9.0], &[true, true, false], 0.5);
        assert_eq!(v.m_proj, 4.0);
        assert_eq!(v.omega, vec![0.375, 0.0, 0.0]);
        let v = visibility_weights(&[0.0, 0.0], &[true, false], 0.7);
        assert_eq!(v.omega, vec![0.7, 0.0]);
    }

    #[test]
    fn albedo_consistency_examples() {
        let a = vec![0.3; 12];
        let vis = visibility_weights(&[0.0; 4], &[true; 4], 1.0);
        assert_eq!(albedo_consistency(&a, &a, &vis), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!(near(albedo_consistency(&a, &b, &vis), 0.03, 1e-15));
        let occluded = visibility_weights(&[0.0; 4], &[false; 4], 1.0);
        assert_eq!(albedo_consistency(&a, &b, &occluded), 0.0);
    }

    #[test]
    fn depth_examples() {
        assert_eq!(depth_consistency(&[0.5; 9], &[true; 9], 3, 3), 0.0);
        assert_eq!(depth_consistency(&[0.0, 1.0], &[true, true], 1, 2), 1.0);
        assert_eq!(depth_consistency(&[0.0, 1.0], &[true, false], 1, 2), 0.0);
        assert_eq!(depth_smoothness(&[2.0; 4], 2, 2), 0.0);
        assert_eq!(depth_smoothness(&[0.0, 1.0, 0.0, 1.0], 2, 2), 0.5);
    }

    #[test]
    fn edge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 48, 0.1, 0.9);
        let vis = visibility_weights(&rand_vec(&mut rng, 16, 0.0, 1.0), &[true; 16], 1.0);
        assert_eq!(edge_preserving(&a, &a, &vis, 4, 4, false), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        assert!(edge_preserving(&a, &shifted, &vis, 4, 4, false).abs() < 1e-28);
    }

    #[test]
    fn chromaticity_examples() {
        let gray = vec![0.4; 12];
        assert_eq!(chromaticity_consistency(&gray, &gray, &gray, &[true; 4]), 0.0);
        let tgt = vec![0.2, 0.3, 0.1, 0.4, 0.1, 0.2];
        let src: Vec<f64> = tgt.iter().map(|x| 2.5 * x).collect();
        let color: Vec<f64> = tgt.iter().map(|x| 0.7 * x).collect();
        assert!(chromaticity_consistency(&src, &tgt, &color, &[true; 2]) < 1e-30);
    }

    #[test]
    fn intrinsic_smoothness_two_tone() {
        // Left column 0.2, right column 0.6: only the two horizontal pairs differ.
        let a = [[0.2; 3], [0.6; 3], [0.2; 3], [0.6; 3]].concat();
        let expected = 2.0 * 3.0 * 0.16 / 4.0;
        assert!(near(intrinsic_smoothness(&a, 2, 2), expected, 1e-15));
        assert_eq!(intrinsic_smoothness(&[0.5; 12], 2, 2), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss([0.0; 7], &w).unwrap().total, 0.0);
        assert!(near(total_loss([1.0; 7], &w).unwrap().total, 4.21, 1e-12));
        let err = total_loss([1.0, 1.0, f64::NAN, 1.0, 1.0, 1.0, 1.0], &w).unwrap_err();
        assert!(err.to_string().contains("L_dc"));
        let r = total_loss([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], &w).unwrap();
        assert_eq!(r.csv_row(7).split(',').count(), 9);
    }

    #[test]
    fn total_graph_skips_zero_weights() {
        let mut g = Graph::new();
        let vars = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0].map(|v| g.constant(&[1], vec![v]));
        let w = LossWeights { ac: 0.0, dc: 0.0, ..Default::default() };
        let (t, r) = total_loss_g(&mut g, &LossTerms { vars }, &w, 3).unwrap();
        assert!(near(g.scalar(t), r.total, 1e-12));
        assert!(near(r.total, 1.0 + 0.4 + 0.5 + 6.0 + 0.07, 1e-12));
    }

    fn grad_ok(n: usize, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut store = ParamStore::new(Precision::Double);
        store.insert("x", &[n], rand_vec(&mut rng, n, 0.1, 0.9)).unwrap();
        let report = gradient_check(
            |s| {
                let mut g = Graph::new();
                let x = g.param(s, "x")?;
                let l = build(&mut g, x);
                g.backward(l).accumulate_into(&g, s);
                Ok(g.scalar(l))
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.blocks);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let other = rand_vec(&mut rng, 48, 0.1, 0.9);
        let inb: Vec<bool> = (0..16).map(|i| i != 5).collect();
        let vis = visibility_weights(&rand_vec(&mut rng, 16, 0.0, 1.0), &inb, 0.8);
        let (o1, o2, o3, v2) = (other.clone(), other.clone(), other.clone(), vis.clone());
        grad_ok(48, move |g, x| {
            let x = g.reshape(x, &[16, 3]);
            color_loss_g(g, x, &o1, &[true; 16])
        });
        grad_ok(48, move |g, x| {
            let x = g.reshape(x, &[16, 3]);
            let t = g.constant(&[16, 3], o2.clone());
            albedo_consistency_g(g, x, t, &vis.omega)
        });
        let ib = inb.clone();
        grad_ok(16, move |g, x| depth_consistency_g(g, x, &ib, 4, 4));
        grad_ok(16, |g, x| depth_smoothness_g(g, x, 4, 4));
        for exp_variant in [false, true] {
            let (o, v) = (o3.clone(), v2.clone());
            grad_ok(48, move |g, x| {
                let x = g.reshape(x, &[16, 3]);
                let t = g.constant(&[16, 3], o.clone());
                edge_preserving_g(g, x, t, &v, 4, 4, exp_variant)
            });
        }
        let o = other.clone();
        let ib = inb.clone();
        grad_ok(48, move |g, x| {
            let x = g.reshape(x, &[16, 3]);
            let t = g.constant(&[16, 3], o.clone());
            let c = g.scale(x, 0.5);
            chromaticity_consistency_g(g, x, t, c, &ib)
        });
        grad_ok(48, |g, x| {
            let x = g.reshape(x, &[16, 3]);
            intrinsic_smoothness_g(g, x, 4, 4)
        });
    }

    proptest! {
        #[test]
        fn omega_is_monotone_and_bounded(e in prop::collection::vec(0.0f64..5.0, 2..40), r_e in 0.0f64..1.0) {
            let inb = vec![true; e.len()];
            let v = visibility_weights(&e, &inb, r_e);
            for i in 0..e.len() {
                prop_assert!(v.omega[i] >= 0.0 && v.omega[i] <= r_e);
                for j in 0..e.len() {
                    if e[i] <= e[j] {
                        prop_assert!(v.omega[i] >= v.omega[j]);
                    }
                }
            }
        }

        #[test]
        fn chromaticity_is_degree_zero(seed in any::<u64>(), k in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rand_vec(&mut rng, 12, 0.05, 1.0);
            let t = rand_vec(&mut rng, 12, 0.05, 1.0);
            let c = rand_vec(&mut rng, 12, 0.05, 1.0);
            let mask = [true, false, true, true];
            let ks: Vec<f64> = s.iter().map(|x| x * k).collect();
            let kt: Vec<f64> = t.iter().map(|x| x * k).collect();
            let a = chromaticity_consistency(&s, &t, &c, &mask);
            let b = chromaticity_consistency(&ks, &kt, &c, &mask);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn terms_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_vec(&mut rng, 48, 0.0, 1.0);
            let b = rand_vec(&mut rng, 48, 0.0, 1.0);
            let e = rand_vec(&mut rng, 16, 0.0, 1.0);
            let inb: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.8)).collect();
            let vis = visibility_weights(&e, &inb, 0.6);
            prop_assert!(color_loss(&a, &b, &inb) >= 0.0);
            prop_assert!(albedo_consistency(&a, &b, &vis) >= 0.0);
            prop_assert!(depth_consistency(&e, &inb, 4, 4) >= 0.0);
            prop_assert!(depth_smoothness(&e, 4, 4) >= 0.0);
            prop_assert!(edge_preserving(&a, &b, &vis, 4, 4, false) >= 0.0);
            prop_assert!(chromaticity_consistency(&a, &b, &a, &inb) >= 0.0);
            prop_assert!(intrinsic_smoothness(&a, 4, 4) >= 0.0);
        }
    }
}
