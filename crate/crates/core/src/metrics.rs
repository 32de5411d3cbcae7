//! Achievable rates, information leakage, secrecy energy efficiency (SEE)
//! and the unsupervised training loss.
//!
//! Everything is computed batched over samples from effective channels, so
//! the same code path serves training (differentiable) and evaluation.

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{ChannelBatch, ChannelError, ChannelRealization};
use crate::numerics::{ComplexPair, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("design does not match channel: {0}")]
    Dimension(String),
    #[error("infeasible design: {0}")]
    Infeasible(String),
    #[error("non-finite loss contribution from sample {sample}")]
    NonFinite { sample: usize },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Slack allowed on the total transmit power check.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Constants of the SEE objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the worst-case leakage in the unclamped secrecy rate.
    pub gamma: f64,
    /// Circuit power (W).
    pub p_c: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { gamma: 0.1, p_c: 0.5 }
    }
}

/// Maps a phase into `[0, 2 pi)`; rounding that lands on `2 pi` maps to 0.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(2.0 * std::f64::consts::PI);
    if r < 2.0 * std::f64::consts::PI {
        r
    } else {
        0.0
    }
}

/// Plain-value transmit design for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmitDesign {
    pub phi: Vec<f64>,
    pub w: Vec<Vec<Complex64>>,
    pub z: Vec<Vec<Complex64>>,
}

impl TransmitDesign {
    pub fn zeros(ch: &ChannelRealization) -> Self {
        TransmitDesign {
            phi: vec![0.0; ch.l],
            w: vec![vec![Complex64::new(0.0, 0.0); ch.n_t]; ch.k],
            z: vec![vec![Complex64::new(0.0, 0.0); ch.n_t]; ch.m],
        }
    }

    pub fn total_power(&self) -> f64 {
        self.w.iter().chain(&self.z).flatten().map(|c| c.norm_sqr()).sum()
    }

    pub fn check_dims(&self, ch: &ChannelRealization) -> Result<()> {
        let ok = self.phi.len() == ch.l
            && self.w.len() == ch.k
            && self.z.len() == ch.m
            && self.w.iter().chain(&self.z).all(|v| v.len() == ch.n_t);
        if ok {
            Ok(())
        } else {
            Err(MetricsError::Dimension(format!(
                "expected (l, k, m, n_t) = ({}, {}, {}, {})",
                ch.l, ch.k, ch.m, ch.n_t
            )))
        }
    }

    /// Checks the power budget and the phase range.
    pub fn check_feasible(&self, p_max: f64) -> Result<()> {
        let p = self.total_power();
        if !(p <= p_max + POWER_TOLERANCE) {
            return Err(MetricsError::Infeasible(format!("total power {p} exceeds {p_max}")));
        }
        if let Some(bad) = self.phi.iter().find(|x| !(0.0..2.0 * std::f64::consts::PI).contains(*x)) {
            return Err(MetricsError::Infeasible(format!("phase {bad} outside [0, 2pi)")));
        }
        Ok(())
    }
}

/// Design tensors for a batch: `phi [b, l]`, `w [b, k, n_t]`, `z [b, m, n_t]`.
#[derive(Clone, Debug)]
pub struct DesignBatch {
    pub phi: Tensor,
    pub w: ComplexPair,
    pub z: ComplexPair,
}

fn pack(rows: &[&Vec<Vec<Complex64>>], shape: &[usize]) -> Result<ComplexPair> {
    let (re, im): (Vec<f64>, Vec<f64>) = rows.iter().flat_map(|r| r.iter().flatten()).map(|c| (c.re, c.im)).unzip();
    Ok(ComplexPair::constant(re, im, shape)?)
}

impl DesignBatch {
    /// Constant tensors for a set of designs with identical dimensions.
    pub fn from_designs(designs: &[&TransmitDesign], n_t: usize) -> Result<Self> {
        let b = designs.len();
        let first = designs
            .first()
            .ok_or_else(|| MetricsError::Dimension("empty design batch".into()))?;
        let (l, k, m) = (first.phi.len(), first.w.len(), first.z.len());
        for d in designs {
            if d.phi.len() != l || d.w.len() != k || d.z.len() != m || d.w.iter().chain(&d.z).any(|v| v.len() != n_t) {
                return Err(MetricsError::Dimension("designs in one batch must share dimensions".into()));
            }
        }
        let ws: Vec<_> = designs.iter().map(|d| &d.w).collect();
        let zs: Vec<_> = designs.iter().map(|d| &d.z).collect();
        Ok(DesignBatch {
            phi: Tensor::constant(designs.iter().flat_map(|d| d.phi.clone()).collect(), &[b, l])?,
            w: pack(&ws, &[b, k, n_t])?,
            z: pack(&zs, &[b, m, n_t])?,
        })
    }

    /// Splits the current values back into per-sample designs.
    pub fn to_designs(&self) -> Vec<TransmitDesign> {
        let b = self.phi.shape()[0];
        let l = self.phi.shape()[1];
        let (k, n) = (self.w.shape()[1], self.w.shape()[2]);
        let m = self.z.shape()[1];
        let rows = |p: &ComplexPair, s: usize, count: usize| -> Vec<Vec<Complex64>> {
            (0..count)
                .map(|r| {
                    let base = (s * count + r) * n;
                    (0..n)
                        .map(|i| Complex64::new(p.re.values()[base + i], p.im.values()[base + i]))
                        .collect()
                })
                .collect()
        };
        (0..b)
            .map(|s| TransmitDesign {
                phi: self.phi.values()[s * l..(s + 1) * l].to_vec(),
                w: rows(&self.w, s, k),
                z: rows(&self.z, s, m),
            })
            .collect()
    }
}

/// Per-sample rate terms of a batch.
#[derive(Clone, Debug)]
pub struct RateTerms {
    /// `[b, k]` LU rates.
    pub rates: Tensor,
    /// `[b, m, k]` leakage of LU `k`'s stream at Eve `m`.
    pub leakage: Tensor,
    /// `[b]` total transmit power.
    pub power: Tensor,
}

fn diag_masks(b: usize, rows: usize, k: usize, cols: usize) -> (Tensor, Tensor) {
    // mask[s, r, j] for j < cols; "own" selects j == r
    let mut own = Vec::with_capacity(b * rows * cols);
    let mut other = Vec::with_capacity(b * rows * cols);
    for _ in 0..b {
        for r in 0..rows {
            for j in 0..cols {
                let same = j == r && r < k;
                own.push(if same { 1.0 } else { 0.0 });
                other.push(if same { 0.0 } else { 1.0 });
            }
        }
    }
    let shape = [b, rows, cols];
    (
        Tensor::constant(own, &shape).expect("mask shape"),
        Tensor::constant(other, &shape).expect("mask shape"),
    )
}

/// `|conj(a) v^T|^2` per batch: `a [b, r, n]`, `v [b, c, n]` -> `[b, r, c]`.
fn gains(a: &ComplexPair, v: &ComplexPair) -> Result<Tensor> {
    Ok(a.conj().cbmm(&v.conj(), false, true)?.abs2()?)
}

/// Rates, leakage and power from effective channels
/// `h_eff [b, k, n_t]`, `f_eff [b, m, n_t]` and noise `sigma2 [b, k]`,
/// `sigma2_e [b, m]`.
pub fn rate_terms(
    h_eff: &ComplexPair,
    f_eff: &ComplexPair,
    w: &ComplexPair,
    z: &ComplexPair,
    sigma2: &Tensor,
    sigma2_e: &Tensor,
) -> Result<RateTerms> {
    let (b, k, n) = match h_eff.shape() {
        [b, k, n] => (*b, *k, *n),
        s => return Err(MetricsError::Dimension(format!("effective LU channels have shape {s:?}"))),
    };
    let m = f_eff.shape()[1];
    if w.shape() != [b, k, n] || z.shape() != [b, m, n] || f_eff.shape() != [b, m, n] {
        return Err(MetricsError::Dimension(format!(
            "w {:?}, z {:?}, f {:?} against h {:?}",
            w.shape(),
            z.shape(),
            f_eff.shape(),
            h_eff.shape()
        )));
    }
    let cols = k + m;
    let v = ComplexPair::new(Tensor::concat(&[w.re.clone(), z.re.clone()], 1)?, Tensor::concat(&[w.im.clone(), z.im.clone()], 1)?)?;

    let g_lu = gains(h_eff, &v)?;
    let (own, other) = diag_masks(b, k, k, cols);
    let signal = g_lu.mul(&own)?.sum_axis(2)?;
    let interference = g_lu.mul(&other)?.sum_axis(2)?.add(sigma2)?;
    let rates = signal.div(&interference)?.add_scalar(1.0).log2()?;

    let leakage = if m == 0 {
        Tensor::zeros(&[b, 0, k])
    } else {
        let g_eve = gains(f_eff, &v)?; // [b, m, cols]
        let wanted = g_eve.narrow(2, 0, k)?; // [b, m, k]
        let spread = g_eve.expand(2, k)?.reshape(&[b * m, k, cols])?;
        let (_, other_e) = diag_masks(b * m, k, k, cols);
        let rest = spread.mul(&other_e)?.sum_axis(2)?.reshape(&[b, m, k])?;
        let noise = sigma2_e.expand(2, k)?;
        wanted.div(&rest.add(&noise)?)?.add_scalar(1.0).log2()?
    };

    let power = v.abs2()?.sum_axis(2)?.sum_axis(1)?;
    Ok(RateTerms { rates, leakage, power })
}

impl RateTerms {
    /// `[b, k]` worst-case leakage over Eves (zero when there are none).
    pub fn worst_leakage(&self) -> Result<Tensor> {
        let s = self.leakage.shape();
        if s[1] == 0 {
            return Ok(Tensor::zeros(&[s[0], s[2]]));
        }
        Ok(self.leakage.max_axis(1)?.0)
    }

    /// `[b]` SEE with the clamped secrecy rate.
    pub fn hard_see(&self, p_c: f64) -> Result<Tensor> {
        let secrecy = self.rates.sub(&self.worst_leakage()?)?.relu();
        Ok(secrecy.sum_axis(1)?.div(&self.power.add_scalar(p_c))?)
    }

    /// `[b]` SEE with the unclamped, leakage-weighted secrecy rate.
    pub fn soft_see(&self, obj: &ObjectiveConfig) -> Result<Tensor> {
        let secrecy = self.rates.sub(&self.worst_leakage()?.scale(obj.gamma))?;
        Ok(secrecy.sum_axis(1)?.div(&self.power.add_scalar(obj.p_c))?)
    }
}

/// Rate terms of a design batch on a channel batch.
pub fn batch_rate_terms(ch: &ChannelBatch, design: &DesignBatch) -> Result<RateTerms> {
    let (h_eff, f_eff) = ch.effective_csi(&design.phi)?;
    rate_terms(&h_eff, &f_eff, &design.w, &design.z, &ch.sigma2, &ch.sigma2_e)
}

/// Mean negative soft SEE over the batch. A non-finite per-sample value is
/// reported with its batch index.
pub fn loss_from_terms(terms: &RateTerms, obj: &ObjectiveConfig) -> Result<Tensor> {
    let per_sample = terms.soft_see(obj)?;
    if let Some(i) = per_sample.values().iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite { sample: i });
    }
    let b = per_sample.numel().max(1) as f64;
    Ok(per_sample.sum_all().scale(-1.0 / b))
}

/// Training loss of a design batch: the batch mean of
/// `-(sum_k (R_k - gamma max_m R_E,m,k)) / (P_tx + P_C)`.
pub fn training_loss(ch: &ChannelBatch, design: &DesignBatch, obj: &ObjectiveConfig) -> Result<Tensor> {
    loss_from_terms(&batch_rate_terms(ch, design)?, obj)
}

/// Evaluation summary of one design.
#[derive(Clone, Debug, PartialEq)]
pub struct SeeBreakdown {
    pub rates: Vec<f64>,
    /// `leakage[m][k]`.
    pub leakage: Vec<Vec<f64>>,
    pub secrecy: Vec<f64>,
    pub total_power: f64,
    pub see: f64,
}

fn breakdowns(terms: &RateTerms, p_c: f64) -> Vec<SeeBreakdown> {
    let b = terms.power.numel();
    let k = terms.rates.shape()[1];
    let m = terms.leakage.shape()[1];
    (0..b)
        .map(|s| {
            let rates = terms.rates.values()[s * k..(s + 1) * k].to_vec();
            let leakage: Vec<Vec<f64>> = (0..m)
                .map(|e| terms.leakage.values()[(s * m + e) * k..(s * m + e + 1) * k].to_vec())
                .collect();
            let secrecy: Vec<f64> = (0..k)
                .map(|u| {
                    let worst = leakage.iter().map(|row| row[u]).fold(0.0, f64::max);
                    (rates[u] - worst).max(0.0)
                })
                .collect();
            let total_power = terms.power.values()[s];
            let see = secrecy.iter().sum::<f64>() / (total_power + p_c);
            SeeBreakdown {
                rates,
                leakage,
                secrecy,
                total_power,
                see,
            }
        })
        .collect()
}

/// Evaluation metrics for every sample of a batch.
pub fn see_batch(ch: &ChannelBatch, design: &DesignBatch, p_c: f64) -> Result<Vec<SeeBreakdown>> {
    Ok(breakdowns(&batch_rate_terms(ch, design)?, p_c))
}

/// Evaluation metrics for one design (hard clamp, hard max).
pub fn see(ch: &ChannelRealization, design: &TransmitDesign, p_c: f64) -> Result<SeeBreakdown> {
    design.check_dims(ch)?;
    let cb = ChannelBatch::new(&[ch])?;
    let db = DesignBatch::from_designs(&[design], ch.n_t)?;
    Ok(see_batch(&cb, &db, p_c)?.remove(0))
}

/// Rate of LU `k`.
pub fn rate_lu(ch: &ChannelRealization, design: &TransmitDesign, k: usize) -> Result<f64> {
    let b = see(ch, design, 0.0)?;
    b.rates
        .get(k)
        .copied()
        .ok_or_else(|| MetricsError::Dimension(format!("LU index {k} out of range")))
}

/// Leakage of LU `k`'s stream at Eve `m`.
pub fn rate_eve(ch: &ChannelRealization, design: &TransmitDesign, m: usize, k: usize) -> Result<f64> {
    let b = see(ch, design, 0.0)?;
    b.leakage
        .get(m)
        .and_then(|row| row.get(k))
        .copied()
        .ok_or_else(|| MetricsError::Dimension(format!("Eve/LU index ({m}, {k}) out of range")))
}
