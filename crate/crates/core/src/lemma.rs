//! Exact checks of bias-free generator transfer in linear worlds.
//!
//! With a linear generator `Z`, the matching matrix `W*` fitted on the seen
//! classes and an unseen generator `Z_u` implied by the unseen bridging
//! condition, the transfer is bias-free iff `Z_u = Z_s`. When the seen and
//! unseen attribute Gram matrices agree this holds exactly, which these
//! routines verify with direct solves.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, inverse, lstsq, lstsq_min_norm, random_orthogonal, MAX_CONDITION};
use crate::rng::{gaussian, stream_rng, SrwganRng, Stream};
use crate::tensor::Tensor;

/// Upper bound on the attribute condition numbers drawn by
/// [`LinearWorld::random_square`].
pub const SAMPLE_CONDITION_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWorld {
    pub u_as: Tensor,
    pub u_au: Tensor,
    pub u_xs: Tensor,
    pub u_xu: Tensor,
    /// Ground-truth generator, when known.
    pub z: Option<Tensor>,
    pub gram_matched: bool,
    pub square: bool,
}

fn diff_norm(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |x, y| x - y).frobenius()
}

/// `‖U_asᵀU_as − U_auᵀU_au‖_F`.
pub fn cbc_residual(u_as: &Tensor, u_au: &Tensor) -> f64 {
    diff_norm(&u_as.matmul_tn(u_as), &u_au.matmul_tn(u_au))
}

/// `U_au = Q·U_as` for a random orthogonal `Q`, which preserves the Gram
/// matrix.
pub fn construct_gram_matched(u_as: &Tensor, rng: &mut SrwganRng) -> Result<Tensor> {
    if u_as.rows() != u_as.cols() {
        return Err(Error::NotSquare { rows: u_as.rows(), cols: u_as.cols() });
    }
    Ok(random_orthogonal(u_as.rows(), rng).matmul(u_as))
}

/// Least-squares `Z` minimizing `‖U_a·Z − U_x‖_F`.
pub fn solve_generator(u_a: &Tensor, u_x: &Tensor) -> Result<Tensor> {
    lstsq(u_a, u_x)
}

impl LinearWorld {
    /// Features generated exactly by `z`: `U_x = U_a·Z`.
    pub fn from_generator(u_as: Tensor, u_au: Tensor, z: Tensor) -> Result<Self> {
        if u_as.cols() != z.rows() || u_au.cols() != z.rows() {
            return Err(Error::Shape { context: "LinearWorld", expected: [u_as.cols(), z.cols()], found: z.shape() });
        }
        let u_xs = u_as.matmul(&z);
        let u_xu = u_au.matmul(&z);
        let gram_matched = cbc_residual(&u_as, &u_au) < 1e-10;
        let square = u_as.rows() == u_as.cols() && u_au.rows() == u_au.cols() && z.rows() == z.cols();
        Ok(Self { u_as, u_au, u_xs, u_xu, z: Some(z), gram_matched, square })
    }

    /// `d = p = q = n` world with Gaussian attributes and generator. Draws
    /// are repeated until both `U_as` and `Z` have condition number below
    /// [`SAMPLE_CONDITION_LIMIT`].
    pub fn random_square(d: usize, gram_matched: bool, rng: &mut SrwganRng) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        let draw = |rng: &mut SrwganRng| loop {
            let m = gaussian(d, d, 1.0, rng);
            if condition_number(&m) < SAMPLE_CONDITION_LIMIT {
                break m;
            }
        };
        let u_as = draw(rng);
        let z = draw(rng);
        let u_au = if gram_matched { construct_gram_matched(&u_as, rng)? } else { draw(rng) };
        Self::from_generator(u_as, u_au, z)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, d) = (self.u_as.rows(), self.u_as.cols());
        let q = self.u_au.rows();
        let n = self.u_xs.cols();
        let shape = |ctx, t: &Tensor, e: [usize; 2]| {
            if t.shape() == e {
                Ok(())
            } else {
                Err(Error::Shape { context: ctx, expected: e, found: t.shape() })
            }
        };
        shape("u_au", &self.u_au, [q, d])?;
        shape("u_xs", &self.u_xs, [p, n])?;
        shape("u_xu", &self.u_xu, [q, n])?;
        if let Some(z) = &self.z {
            shape("z", z, [d, n])?;
        }
        if self.gram_matched && !(cbc_residual(&self.u_as, &self.u_au) < 1e-10) {
            return Err(Error::InvalidConfig("world is flagged gram-matched but the Gram matrices differ".into()));
        }
        if self.square {
            if !(p == d && q == d && n == d) {
                return Err(Error::NotSquare { rows: p, cols: d });
            }
            for m in [&self.u_as, &self.u_au] {
                let c = condition_number(m);
                if !(c < MAX_CONDITION) {
                    return Err(Error::RankDeficient { condition: c });
                }
            }
        }
        Ok(())
    }

    /// Applies `U_x → U_x·R` to both feature blocks.
    pub fn rotate_visual(&self, r: &Tensor) -> Self {
        Self {
            u_xs: self.u_xs.matmul(r),
            u_xu: self.u_xu.matmul(r),
            z: self.z.as_ref().map(|z| z.matmul(r)),
            ..self.clone()
        }
    }

    /// Copy with `U_au` multiplied by `k`, which breaks the Gram equality
    /// for `k ≠ ±1`.
    pub fn scale_unseen_attributes(&self, k: f64) -> Self {
        let u_au = self.u_au.scale(k);
        let u_xu = match &self.z {
            Some(z) => u_au.matmul(z),
            None => self.u_xu.scale(k),
        };
        let gram_matched = cbc_residual(&self.u_as, &u_au) < 1e-10;
        Self { u_au, u_xu, gram_matched, ..self.clone() }
    }
}

/// Replacements used to break one bridging condition at a time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LemmaOverrides {
    /// Used instead of the SBC solution `W*`.
    pub w: Option<Tensor>,
    /// Unseen matching target instead of the identity.
    pub u_yu: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub z_s: Tensor,
    pub z_u: Tensor,
    pub w: Tensor,
    /// `‖Z_u − Z_s‖_F / ‖Z_s‖_F`.
    pub generator_gap: f64,
    /// `‖U_xs·W·U_asᵀ − I‖_F`.
    pub sbc_residual: f64,
    /// `‖U_xu·W·U_auᵀ − U_yu‖_F` on the observed unseen features.
    pub ubc_residual: f64,
    pub cbc_residual: f64,
    /// `‖Z_s − Z‖_F / ‖Z‖_F` when the true generator is known.
    pub recovery_error: Option<f64>,
}

/// Fits `W*` from the seen bridging condition, `Z_s` from the seen data and
/// `Z_u` from the unseen bridging condition, and measures how far apart the
/// two generators are.
pub fn verify_lemma(world: &LinearWorld) -> Result<LemmaReport> {
    verify_lemma_with(world, &LemmaOverrides::default())
}

pub fn verify_lemma_with(world: &LinearWorld, ov: &LemmaOverrides) -> Result<LemmaReport> {
    world.validate()?;
    if !world.square {
        return Err(Error::NotSquare { rows: world.u_as.rows(), cols: world.u_as.cols() });
    }
    let q = world.u_au.rows();
    let inv_as = inverse(&world.u_as)?;
    let inv_au = inverse(&world.u_au)?;
    // U_xs·W·U_asᵀ = I  ⇒  W = U_xs⁻¹·U_as⁻ᵀ
    let w_star = inverse(&world.u_xs)?.matmul(&inv_as.transpose());
    // W*⁻¹ = U_asᵀ·U_xs exactly; inverting the product numerically loses
    // most of the digits the certificate needs.
    let (w, w_inv) = match &ov.w {
        Some(w) => (w.clone(), inverse(w)?),
        None => (w_star, world.u_as.matmul_tn(&world.u_xs)),
    };
    let u_yu = ov.u_yu.clone().unwrap_or_else(|| Tensor::identity(q));
    if u_yu.shape() != [q, q] {
        return Err(Error::Shape { context: "u_yu", expected: [q, q], found: u_yu.shape() });
    }

    let z_s = solve_generator(&world.u_as, &world.u_xs)?;
    // U_au·Z_u·W·U_auᵀ = U_yu  ⇒  Z_u = U_au⁻¹·U_yu·U_au⁻ᵀ·W⁻¹
    let z_u = inv_au.matmul(&u_yu).matmul(&inv_au.transpose()).matmul(&w_inv);

    let eye_s = Tensor::identity(world.u_as.rows());
    let sbc_residual = diff_norm(&world.u_xs.matmul(&w).matmul_nt(&world.u_as), &eye_s);
    let ubc_residual = diff_norm(&world.u_xu.matmul(&w).matmul_nt(&world.u_au), &u_yu);
    let generator_gap = diff_norm(&z_u, &z_s) / z_s.frobenius();
    let recovery_error = world.z.as_ref().map(|z| diff_norm(&z_s, z) / z.frobenius());
    Ok(LemmaReport {
        generator_gap,
        sbc_residual,
        ubc_residual,
        cbc_residual: cbc_residual(&world.u_as, &world.u_au),
        recovery_error,
        z_s,
        z_u,
        w,
    })
}

/// Residuals for worlds where the inverses do not exist. Everything is a
/// least-squares or minimum-norm fit; no transfer guarantee is implied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectangularReport {
    pub sbc_residual: f64,
    pub ubc_residual: f64,
    pub cbc_residual: f64,
    /// `‖U_au·Z_s − U_xu‖_F / ‖U_xu‖_F`.
    pub transfer_error: f64,
    pub condition_seen: f64,
    pub condition_unseen: f64,
}

pub fn least_squares_report(world: &LinearWorld) -> Result<RectangularReport> {
    world.validate()?;
    let rcond = 1e-12;
    let z_s = lstsq_min_norm(&world.u_as, &world.u_xs, rcond)?;
    // W = pinv(U_xs)·pinv(U_asᵀ)
    let p = world.u_as.rows();
    let left = lstsq_min_norm(&world.u_xs, &Tensor::identity(p), rcond)?;
    let right = lstsq_min_norm(&world.u_as, &Tensor::identity(p), rcond)?.transpose();
    let w = left.matmul(&right);
    let sbc = diff_norm(&world.u_xs.matmul(&w).matmul_nt(&world.u_as), &Tensor::identity(p));
    let q = world.u_au.rows();
    let ubc = diff_norm(&world.u_xu.matmul(&w).matmul_nt(&world.u_au), &Tensor::identity(q));
    let transfer_error = diff_norm(&world.u_au.matmul(&z_s), &world.u_xu) / world.u_xu.frobenius();
    Ok(RectangularReport {
        sbc_residual: sbc,
        ubc_residual: ubc,
        cbc_residual: cbc_residual(&world.u_as, &world.u_au),
        transfer_error,
        condition_seen: condition_number(&world.u_as),
        condition_unseen: condition_number(&world.u_au),
    })
}

/// One seeded square world, checked as drawn and with `U_au` doubled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaTrial {
    pub trial: u64,
    pub dim: usize,
    pub gap: f64,
    pub cbc_residual: f64,
    pub violated_gap: f64,
    pub violated_cbc_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaSweep {
    pub master_seed: u64,
    pub trials: Vec<LemmaTrial>,
    pub max_gap: f64,
    /// Trials whose violated world has a gap above 0.1.
    pub violated_detected: usize,
}

/// Runs `trials` gram-matched worlds, cycling through `dims`. Trial `i`
/// draws from stream `(master_seed, i)`.
pub fn lemma_sweep(master_seed: u64, trials: u64, dims: &[usize]) -> Result<LemmaSweep> {
    if dims.is_empty() {
        return Err(Error::InvalidConfig("no dimensions given".into()));
    }
    let mut out = Vec::with_capacity(trials as usize);
    for i in 0..trials {
        let dim = dims[(i % dims.len() as u64) as usize];
        let world = LinearWorld::random_square(dim, true, &mut stream_rng(master_seed, i, Stream::Lemma))?;
        let ok = verify_lemma(&world)?;
        let bad = verify_lemma(&world.scale_unseen_attributes(2.0))?;
        out.push(LemmaTrial {
            trial: i,
            dim,
            gap: ok.generator_gap,
            cbc_residual: ok.cbc_residual,
            violated_gap: bad.generator_gap,
            violated_cbc_residual: bad.cbc_residual,
        });
    }
    let max_gap = out.iter().map(|t| t.gap).fold(0.0, f64::max);
    let violated_detected = out.iter().filter(|t| t.violated_gap > 0.1).count();
    Ok(LemmaSweep { master_seed, trials: out, max_gap, violated_detected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rng(seed: u64) -> SrwganRng {
        stream_rng(seed, 0, Stream::Lemma)
    }

    #[test]
    fn identity_q_keeps_attributes() {
        let a = gaussian(4, 4, 1.0, &mut rng(1));
        let w = LinearWorld::from_generator(a.clone(), a.clone(), Tensor::identity(4)).unwrap();
        assert!(w.gram_matched);
        assert_eq!(cbc_residual(&w.u_as, &w.u_au), 0.0);
    }

    #[test]
    fn gram_matched_construction() {
        let a = gaussian(4, 4, 1.0, &mut rng(2));
        let b = construct_gram_matched(&a, &mut rng(3)).unwrap();
        assert!(cbc_residual(&a, &b) < 1e-12);
        assert!(construct_gram_matched(&gaussian(3, 4, 1.0, &mut rng(2)), &mut rng(3)).is_err());
    }

    #[test]
    fn permutation_keeps_gram() {
        let a = gaussian(3, 3, 1.0, &mut rng(4));
        let perm = Tensor::from_vec(3, 3, vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]).unwrap();
        let b = perm.matmul(&a);
        assert_eq!(b.row(0), a.row(1));
        assert!(cbc_residual(&a, &b) < 1e-14);
    }

    #[test]
    fn solve_generator_examples() {
        let x = gaussian(3, 5, 1.0, &mut rng(5));
        let z = solve_generator(&Tensor::identity(3), &x).unwrap();
        assert!(diff_norm(&z, &x) < 1e-14);

        let w = LinearWorld::random_square(5, true, &mut rng(6)).unwrap();
        let z = solve_generator(&w.u_as, &w.u_xs).unwrap();
        assert!(diff_norm(&z, w.z.as_ref().unwrap()) < 1e-10);

        let mut a = gaussian(4, 3, 1.0, &mut rng(7));
        for r in 0..4 {
            let v = a.get(r, 0);
            a.set(r, 2, 2.0 * v);
        }
        match solve_generator(&a, &gaussian(4, 2, 1.0, &mut rng(8))) {
            Err(Error::RankDeficient { condition }) => assert!(condition > 1e12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matched_world_has_no_gap() {
        let w = LinearWorld::random_square(6, true, &mut rng(9)).unwrap();
        let r = verify_lemma(&w).unwrap();
        assert!(r.generator_gap < 1e-8, "{}", r.generator_gap);
        assert!(r.ubc_residual < 1e-8);
        assert!(r.sbc_residual < 1e-8);
        assert!(r.recovery_error.unwrap() < 1e-10);
    }

    #[test]
    fn scaled_unseen_attributes_give_known_gap() {
        // Z_u = Z_s / k² when U_au is scaled by k.
        let w = LinearWorld::random_square(5, true, &mut rng(10)).unwrap().scale_unseen_attributes(2.0);
        assert!(!w.gram_matched);
        let r = verify_lemma(&w).unwrap();
        assert!((r.generator_gap - 0.75).abs() < 1e-9, "{}", r.generator_gap);
    }

    #[test]
    fn breaking_sbc_or_ubc_opens_a_gap() {
        let w = LinearWorld::random_square(4, true, &mut rng(11)).unwrap();
        let base = verify_lemma(&w).unwrap();
        let mut bumped = base.w.clone();
        bumped.data_mut()[0] += 0.5 * base.w.frobenius();
        let r = verify_lemma_with(&w, &LemmaOverrides { w: Some(bumped), u_yu: None }).unwrap();
        assert!(r.sbc_residual > 1e-3 && r.generator_gap > 1e-3);
        let u_yu = Tensor::identity(4).scale(1.5);
        let r = verify_lemma_with(&w, &LemmaOverrides { w: None, u_yu: Some(u_yu) }).unwrap();
        assert!(r.ubc_residual > 1e-3 && (r.generator_gap - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rotation_of_visual_space_is_invisible() {
        let w = LinearWorld::random_square(5, true, &mut rng(12)).unwrap();
        let r = random_orthogonal(5, &mut rng(13));
        let a = verify_lemma(&w).unwrap();
        let b = verify_lemma(&w.rotate_visual(&r)).unwrap();
        assert!((a.generator_gap - b.generator_gap).abs() < 1e-10);
        let bad = w.scale_unseen_attributes(1.5);
        let a = verify_lemma(&bad).unwrap();
        let b = verify_lemma(&bad.rotate_visual(&r)).unwrap();
        assert!((a.generator_gap - b.generator_gap).abs() < 1e-10);
    }

    #[test]
    fn validation_catches_bad_worlds() {
        let mut w = LinearWorld::random_square(3, false, &mut rng(14)).unwrap();
        assert!(!w.gram_matched);
        w.gram_matched = true;
        assert!(w.validate().is_err());
        let mut w = LinearWorld::random_square(3, true, &mut rng(15)).unwrap();
        w.u_as = Tensor::zeros(3, 3);
        w.gram_matched = false;
        assert!(verify_lemma(&w).is_err());
    }

    #[test]
    fn rectangular_worlds_report_residuals() {
        let mut r = rng(16);
        let u_as = gaussian(7, 4, 1.0, &mut r);
        let u_au = gaussian(3, 4, 1.0, &mut r);
        let z = gaussian(4, 6, 1.0, &mut r);
        let w = LinearWorld::from_generator(u_as, u_au, z).unwrap();
        assert!(!w.square);
        assert!(verify_lemma(&w).is_err());
        let rep = least_squares_report(&w).unwrap();
        // noiseless shared generator: transfer is exact even though the
        // bridging conditions cannot all hold
        assert!(rep.transfer_error < 1e-10);
        assert!(rep.sbc_residual > 1e-3 && rep.cbc_residual > 1e-3);
        assert!(rep.condition_seen.is_finite());
    }

    #[test]
    fn sweep_cycles_dimensions() {
        let s = lemma_sweep(4, 6, &[3, 5]).unwrap();
        let dims: Vec<usize> = s.trials.iter().map(|t| t.dim).collect();
        assert_eq!(dims, [3, 5, 3, 5, 3, 5]);
        assert!(s.max_gap < 1e-8);
        assert_eq!(s.violated_detected, 6);
        assert!(lemma_sweep(4, 1, &[]).is_err());
    }
}
