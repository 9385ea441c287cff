//! Output-drift bridge: from final feature drift to score, decision and
//! loss changes under linear heads.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::linalg::spectral_norm;
use crate::model::ModuleParams;
use crate::softmax::{argmax_lowest, cross_entropy, softmax, top1_margin};

/// Borrowed linear score map z = W·h + b.
#[derive(Clone, Copy, Debug)]
pub struct LinearHead<'a> {
    pub weight: &'a DMatrix<f64>,
    pub bias: Option<&'a DVector<f64>>,
}

impl<'a> LinearHead<'a> {
    pub fn from_params(entry: &'a ModuleParams, path: &str) -> Result<Self> {
        let (weight, bias) = entry.as_linear(path)?;
        Ok(LinearHead { weight, bias })
    }

    fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scores = self.weight * features;
        if let Some(b) = self.bias {
            for mut col in scores.column_iter_mut() {
                col += b;
            }
        }
        scores
    }
}

/// Per-sample score drift, Lipschitz bound, margin rule and loss bridge.
#[derive(Clone, Debug)]
pub struct OutputDriftReport {
    /// z^mer − z^exp, K × M.
    pub delta_z: DMatrix<f64>,
    /// Spectral norm of the merged head weight: a global Lipschitz bound.
    pub b: f64,
    /// ‖(ψ^mer − ψ^exp)(h_L^exp)‖₂ per sample; zero for a shared head.
    pub delta_psi: Vec<f64>,
    /// B·‖e_L‖₂ + δ^ψ per sample.
    pub bound: Vec<f64>,
    /// ‖Δz‖₂ ≤ bound per sample (with a 1e-9 relative guard covering the
    /// spectral-norm iteration tolerance).
    pub bound_satisfied: Vec<bool>,
    /// Expert top-1 margin; `None` when the winner is not unique.
    pub min_margin: Vec<Option<f64>>,
    /// ‖Δz‖_∞ < μ/2 per sample (false when the margin is undefined).
    pub margin_condition_met: Vec<bool>,
    /// Merged argmax equals expert argmax (lowest-index ties).
    pub margin_preserved: Vec<bool>,
    /// CE(y, z^mer) − CE(y, z^exp) per sample.
    pub loss_drift: Vec<f64>,
    /// ‖ḡ‖₂·‖Δz‖₂ with ḡ the segment-averaged loss gradient.
    pub loss_bound: Vec<f64>,
    /// |ḡᵀΔz − loss_drift| after node-doubling quadrature of ḡ.
    pub loss_identity_gap: Vec<f64>,
    /// Final midpoint-node count used for ḡ.
    pub gbar_nodes: usize,
}

/// Composite-midpoint average of the cross-entropy gradient along the
/// segment z_exp + t·Δz, doubling nodes until ḡᵀΔz stabilizes.
fn averaged_loss_gradient(
    z_exp: &DVector<f64>,
    delta_z: &DVector<f64>,
    label: usize,
    tol: f64,
) -> (DVector<f64>, usize) {
    let midpoint = |nodes: usize| -> DVector<f64> {
        let h = 1.0 / nodes as f64;
        let mut acc = DVector::zeros(z_exp.len());
        for k in 0..nodes {
            let t = (k as f64 + 0.5) * h;
            let z = z_exp + delta_z * t;
            let mut g = softmax(&z);
            g[label] -= 1.0;
            acc += g * h;
        }
        acc
    };
    let mut nodes = 8usize;
    let mut g = midpoint(nodes);
    loop {
        let next = midpoint(nodes * 2);
        let stable = ((&next - &g).dot(delta_z)).abs() <= tol;
        g = next;
        nodes *= 2;
        if stable || nodes >= 1 << 14 {
            return (g, nodes);
        }
    }
}

const GBAR_TOL: f64 = 1e-10;
/// Relative slack on the score bound, covering the documented 1e-10
/// spectral-norm tolerance (power iteration approaches B from below).
const BOUND_GUARD: f64 = 1e-9;

/// Builds the full output-drift report for one batch.
///
/// `h_l_exp` / `h_l_mer` are the final feature matrices of the expert and
/// merged traces; `labels` drive the loss bridge.
pub fn output_drift_report(
    head_mer: LinearHead<'_>,
    head_exp: LinearHead<'_>,
    h_l_exp: &DMatrix<f64>,
    h_l_mer: &DMatrix<f64>,
    labels: &[usize],
) -> Result<OutputDriftReport> {
    if h_l_exp.shape() != h_l_mer.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "output drift features".into(),
            expected: format!("{:?}", h_l_exp.shape()),
            actual: format!("{:?}", h_l_mer.shape()),
        });
    }
    let m = h_l_exp.ncols();
    if labels.len() != m {
        return Err(CoreError::ShapeMismatch {
            context: "output drift labels".into(),
            expected: format!("{m}"),
            actual: format!("{}", labels.len()),
        });
    }

    let z_exp = head_exp.apply(h_l_exp);
    let z_mer = head_mer.apply(h_l_mer);
    let delta_z = &z_mer - &z_exp;
    let b = spectral_norm(head_mer.weight, 1e-13);

    // Score-map mismatch at the expert features.
    let psi_mer_at_exp = head_mer.apply(h_l_exp);
    let psi_exp_at_exp = head_exp.apply(h_l_exp);
    let mismatch = &psi_mer_at_exp - &psi_exp_at_exp;

    let mut delta_psi = Vec::with_capacity(m);
    let mut bound = Vec::with_capacity(m);
    let mut bound_satisfied = Vec::with_capacity(m);
    let mut min_margin = Vec::with_capacity(m);
    let mut margin_condition_met = Vec::with_capacity(m);
    let mut margin_preserved = Vec::with_capacity(m);
    let mut loss_drift = Vec::with_capacity(m);
    let mut loss_bound = Vec::with_capacity(m);
    let mut loss_identity_gap = Vec::with_capacity(m);
    let mut gbar_nodes = 0usize;

    for j in 0..m {
        let dpsi = mismatch.column(j).norm();
        let e_l = (h_l_mer.column(j) - h_l_exp.column(j)).norm();
        let dz_norm = delta_z.column(j).norm();
        let bnd = b * e_l + dpsi;
        delta_psi.push(dpsi);
        bound.push(bnd);
        bound_satisfied.push(dz_norm <= bnd * (1.0 + BOUND_GUARD));

        let ze = z_exp.column(j).into_owned();
        let zm = z_mer.column(j).into_owned();
        let dz = delta_z.column(j).into_owned();
        let margin = top1_margin(&ze);
        let dz_inf = dz.amax();
        let condition = matches!(margin, Some(mu) if dz_inf < mu / 2.0);
        min_margin.push(margin);
        margin_condition_met.push(condition);
        margin_preserved.push(argmax_lowest(&zm) == argmax_lowest(&ze));

        let y = labels[j];
        let ld = cross_entropy(&zm, y) - cross_entropy(&ze, y);
        let (gbar, nodes) = averaged_loss_gradient(&ze, &dz, y, GBAR_TOL);
        gbar_nodes = gbar_nodes.max(nodes);
        loss_identity_gap.push((gbar.dot(&dz) - ld).abs());
        loss_bound.push(gbar.norm() * dz.norm());
        loss_drift.push(ld);
    }

    Ok(OutputDriftReport {
        delta_z,
        b,
        delta_psi,
        bound,
        bound_satisfied,
        min_margin,
        margin_condition_met,
        margin_preserved,
        loss_drift,
        loss_bound,
        loss_identity_gap,
        gbar_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::softmax_jacobian;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| (rng.gen::<f64>() - 0.5) * 2.0 * scale)
    }

    #[test]
    fn shared_head_has_zero_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 3, 4, 1.0);
        let b = DVector::from_fn(3, |i, _| i as f64 * 0.1);
        let head = LinearHead {
            weight: &w,
            bias: Some(&b),
        };
        let h_exp = random_matrix(&mut rng, 4, 6, 1.0);
        let h_mer = &h_exp + random_matrix(&mut rng, 4, 6, 0.1);
        let report =
            output_drift_report(head, head, &h_exp, &h_mer, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!(report.delta_psi.iter().all(|d| *d == 0.0));
        assert!(report.bound_satisfied.iter().all(|ok| *ok));
    }

    #[test]
    fn score_bound_holds_for_random_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let k = 2 + (rng.gen::<u64>() % 4) as usize;
            let d = 2 + (rng.gen::<u64>() % 5) as usize;
            let wm = random_matrix(&mut rng, k, d, 2.0);
            let we = random_matrix(&mut rng, k, d, 2.0);
            let bm = DVector::from_fn(k, |i, _| (i as f64 - 1.0) * 0.3);
            let be = DVector::from_fn(k, |i, _| (i as f64) * 0.2);
            let h_exp = random_matrix(&mut rng, d, 3, 1.5);
            let h_mer = &h_exp + random_matrix(&mut rng, d, 3, 0.5);
            let labels = vec![0; 3];
            let report = output_drift_report(
                LinearHead {
                    weight: &wm,
                    bias: Some(&bm),
                },
                LinearHead {
                    weight: &we,
                    bias: Some(&be),
                },
                &h_exp,
                &h_mer,
                &labels,
            )
            .unwrap();
            assert!(
                report.bound_satisfied.iter().all(|ok| *ok),
                "score bound violated"
            );
            // Loss identity and Cauchy-Schwarz bound.
            for j in 0..3 {
                assert!(report.loss_identity_gap[j] <= 1e-8);
                assert!(report.loss_drift[j].abs() <= report.loss_bound[j] + 1e-8);
            }
        }
    }

    #[test]
    fn margin_rule_explicit_example() {
        // Expert scores (2,0,0): margin 2. A drift of sup-norm 0.9 < 1 must
        // keep the argmax at index 0.
        let we = DMatrix::identity(3, 3);
        let wm = DMatrix::identity(3, 3);
        let h_exp = DMatrix::from_column_slice(3, 1, &[2.0, 0.0, 0.0]);
        let h_mer = DMatrix::from_column_slice(3, 1, &[1.1, 0.9, 0.0]);
        let report = output_drift_report(
            LinearHead {
                weight: &wm,
                bias: None,
            },
            LinearHead {
                weight: &we,
                bias: None,
            },
            &h_exp,
            &h_mer,
            &[0],
        )
        .unwrap();
        assert_eq!(report.min_margin[0], Some(2.0));
        assert!(report.margin_condition_met[0]);
        assert!(report.margin_preserved[0]);
    }

    #[test]
    fn margin_rule_never_misfires_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut met = 0usize;
        for _ in 0..2000 {
            let k = 3 + (rng.gen::<u64>() % 3) as usize;
            let ze = DVector::from_fn(k, |_, _| (rng.gen::<f64>() - 0.5) * 4.0);
            let dz = DVector::from_fn(k, |_, _| (rng.gen::<f64>() - 0.5) * 2.0);
            let zm = &ze + &dz;
            let margin = top1_margin(&ze);
            if let Some(mu) = margin {
                if dz.amax() < mu / 2.0 {
                    met += 1;
                    assert_eq!(argmax_lowest(&zm), argmax_lowest(&ze), "margin rule misfired");
                }
            }
        }
        assert!(met > 100, "too few qualifying draws: {met}");
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let z = DVector::from_row_slice(&[0.3, -1.0, 0.7, 0.1]);
        let p = softmax(&z);
        let j = softmax_jacobian(&p);
        let h = 1e-6;
        for b in 0..4 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[b] += h;
            zm[b] -= h;
            let fd = (softmax(&zp) - softmax(&zm)) / (2.0 * h);
            for a in 0..4 {
                assert!(
                    (j[(a, b)] - fd[a]).abs() < 1e-7,
                    "J[{a},{b}] analytic {} vs fd {}",
                    j[(a, b)],
                    fd[a]
                );
            }
        }
    }

    #[test]
    fn loss_identity_sharp_on_large_perturbations() {
        // Even large logit drift satisfies the exact segment identity.
        let ze = DVector::from_row_slice(&[2.0, -1.0, 0.5]);
        let dz = DVector::from_row_slice(&[-3.0, 2.0, 1.0]);
        let (gbar, _) = averaged_loss_gradient(&ze, &dz, 1, 1e-12);
        let direct = cross_entropy(&(&ze + &dz), 1) - cross_entropy(&ze, 1);
        assert!((gbar.dot(&dz) - direct).abs() < 1e-9);
    }
}
