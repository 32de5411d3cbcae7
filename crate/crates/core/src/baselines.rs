//! Reference designs: a multi-restart projected gradient-ascent oracle that
//! supplies per-sample SEE denominators, and a random MRT floor baseline.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{complex_rows, effective_csi, ChannelBatch, ChannelError, ChannelRealization, PowerBudget};
use crate::metrics::{batch_rate_terms, see, wrap_phase, DesignBatch, MetricsError, ObjectiveConfig, TransmitDesign};
use crate::model::ModelError;
use crate::numerics::{ComplexPair, NumericsError, Tensor};
use crate::stage2::zf_directions;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid oracle configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, BaselineError>;

/// Samples optimized together in one batched ascent.
const ORACLE_CHUNK: usize = 32;
/// Steps between convergence checks of a restart.
const CONVERGENCE_WINDOW: usize = 250;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Transmit-power fraction of the MRT starting point.
const MRT_START_FRACTION: f64 = 0.1;
/// Smallest transmit-power fraction drawn for a random start.
const MIN_START_FRACTION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Step-size multiplier applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    /// A restart stops once its best SEE improves by less than this
    /// relative amount over a check window; zero disables early stopping.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            restarts: 8,
            steps: 1500,
            step_size: 0.02,
            decay: 0.5,
            decay_every: 500,
            tolerance: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.steps == 0 {
            return Err(BaselineError::Config("restarts and steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !(self.decay > 0.0) || self.decay_every == 0 {
            return Err(BaselineError::Config("step size schedule must be positive".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(BaselineError::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        self.step_size * self.decay.powi((t / self.decay_every) as i32)
    }
}

/// Best design found for one sample and its hard SEE.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub design: TransmitDesign,
    pub see: f64,
}

fn unit(v: &[Complex64]) -> Vec<Complex64> {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|c| c / norm).collect()
    } else {
        v.to_vec()
    }
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    loop {
        let v: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        if v.iter().any(|c| c.norm_sqr() > 0.0) {
            return unit(&v);
        }
    }
}

/// MRT beams toward every LU and AN nulled at the LUs (random directions
/// when nulling is impossible), equal power `power / (K + M)` per vector.
fn mrt_design(ch: &ChannelRealization, phi: Vec<f64>, power: f64, rng: &mut impl Rng) -> Result<TransmitDesign> {
    let (n, _, k, m) = ch.dims();
    let (h_eff, f_eff) = effective_csi(ch, &Tensor::constant(phi.clone(), &[ch.l])?)?;
    let each = if k + m > 0 { (power / (k + m) as f64).sqrt() } else { 0.0 };
    let w = complex_rows(&h_eff).iter().map(|h| unit(h).iter().map(|c| c * each).collect()).collect();
    let z = if m == 0 {
        Vec::new()
    } else if k < n {
        let lift = |p: &ComplexPair, rows: usize| p.map(|t| t.reshape(&[1, rows, n]));
        let (_, v_eve) = zf_directions(&lift(&h_eff, k)?, &lift(&f_eff, m)?)?;
        complex_rows(&v_eve.map(|t| t.reshape(&[m, n]))?)
            .iter()
            .map(|v| unit(v).iter().map(|c| c * each).collect())
            .collect()
    } else {
        (0..m).map(|_| random_unit(n, rng).iter().map(|c| c * each).collect()).collect()
    };
    Ok(TransmitDesign { phi, w, z })
}

/// Floor baseline: uniform random phases, MRT beams and nulling AN at full
/// power with an equal split over all `K + M` vectors.
pub fn random_mrt(ch: &ChannelRealization, budget: &PowerBudget, rng: &mut impl Rng) -> Result<TransmitDesign> {
    ch.validate()?;
    let phi = (0..ch.l).map(|_| wrap_phase(rng.random::<f64>() * 2.0 * PI)).collect();
    mrt_design(ch, phi, budget.p_max, rng)
}

/// Optimization variables of one restart, with beams scaled by `1/sqrt(P)`.
#[derive(Clone, Debug)]
struct Lane {
    phi: Vec<f64>,
    /// `[w re | w im | z re | z im]`, each block row-major `[rows, n]`.
    u: Vec<f64>,
}

impl Lane {
    fn project(&mut self) {
        for p in &mut self.phi {
            *p = wrap_phase(*p);
        }
        let total: f64 = self.u.iter().map(|x| x * x).sum();
        if total > 1.0 {
            let c = total.sqrt().recip();
            for x in &mut self.u {
                *x *= c;
            }
        }
    }

    fn from_design(d: &TransmitDesign, p_max: f64) -> Self {
        let s = if p_max > 0.0 { p_max.sqrt().recip() } else { 0.0 };
        let flat = |rows: &Vec<Vec<Complex64>>, f: fn(&Complex64) -> f64| -> Vec<f64> {
            rows.iter().flatten().map(|c| f(c) * s).collect()
        };
        let mut u = flat(&d.w, |c| c.re);
        u.extend(flat(&d.w, |c| c.im));
        u.extend(flat(&d.z, |c| c.re));
        u.extend(flat(&d.z, |c| c.im));
        Lane { phi: d.phi.clone(), u }
    }

    fn design(&self, k: usize, m: usize, n: usize, p_max: f64) -> TransmitDesign {
        let s = p_max.sqrt();
        let rows = |re0: usize, im0: usize, count: usize| -> Vec<Vec<Complex64>> {
            (0..count)
                .map(|r| (0..n).map(|i| Complex64::new(self.u[re0 + r * n + i] * s, self.u[im0 + r * n + i] * s)).collect())
                .collect()
        };
        let (kn, mn) = (k * n, m * n);
        TransmitDesign {
            phi: self.phi.clone(),
            w: rows(0, kn, k),
            z: rows(2 * kn, 2 * kn + mn, m),
        }
    }
}

fn initial_lane(ch: &ChannelRealization, budget: &PowerBudget, cfg: &OracleConfig, restart: usize) -> Result<Lane> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let (n, l, k, m) = ch.dims();
    let phi: Vec<f64> = (0..l).map(|_| wrap_phase(rng.random::<f64>() * 2.0 * PI)).collect();
    if restart == 0 {
        let d = mrt_design(ch, phi, MRT_START_FRACTION * budget.p_max, &mut rng)?;
        let mut lane = Lane::from_design(&d, budget.p_max);
        lane.project();
        return Ok(lane);
    }
    let fraction = MIN_START_FRACTION.powf(1.0 - rng.random::<f64>());
    let raw: Vec<f64> = (0..2 * (k + m) * n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = if norm > 0.0 { fraction.sqrt() / norm } else { 0.0 };
    let mut lane = Lane {
        phi,
        u: raw.iter().map(|x| x * c).collect(),
    };
    lane.project();
    Ok(lane)
}

struct LaneState {
    lane: Lane,
    m1: Vec<f64>,
    /// Second moments of the phase and beam blocks.
    m2: [f64; 2],
    best: Lane,
    best_see: f64,
    checkpoint_see: f64,
    frozen: bool,
}

/// Evaluates the smoothed objective (ascent direction) and hard SEE of all
/// lanes; returns per-lane `(hard see, d phi, d u)`.
fn evaluate_lanes(
    cb: &ChannelBatch,
    lanes: &[&Lane],
    budget: &PowerBudget,
    with_grad: bool,
) -> Result<Vec<(f64, Vec<f64>, Vec<f64>)>> {
    let (b, n, l, k, m) = (lanes.len(), cb.n_t, cb.l, cb.k, cb.m);
    let s = budget.p_max.sqrt();
    let (kn, mn) = (k * n, m * n);
    let gather = |off: usize, len: usize| -> Vec<f64> { lanes.iter().flat_map(|x| x.u[off..off + len].to_vec()).collect() };
    let phi = Tensor::param(lanes.iter().flat_map(|x| x.phi.clone()).collect(), &[b, l])?;
    let ur = Tensor::param(gather(0, kn), &[b, k, n])?;
    let ui = Tensor::param(gather(kn, kn), &[b, k, n])?;
    let vr = Tensor::param(gather(2 * kn, mn), &[b, m, n])?;
    let vi = Tensor::param(gather(2 * kn + mn, mn), &[b, m, n])?;
    let design = DesignBatch {
        phi: phi.clone(),
        w: ComplexPair::new(ur.scale(s), ui.scale(s))?,
        z: ComplexPair::new(vr.scale(s), vi.scale(s))?,
    };
    let terms = batch_rate_terms(cb, &design)?;
    let hard = terms.hard_see(budget.p_c)?;
    let hard = hard.values().to_vec();
    if !with_grad {
        return Ok(hard.into_iter().map(|h| (h, Vec::new(), Vec::new())).collect());
    }
    let obj = ObjectiveConfig { gamma: 1.0, p_c: budget.p_c };
    terms.soft_see(&obj)?.sum_all().backward()?;
    let (gp, gur, gui, gvr, gvi) = (phi.grad(), ur.grad(), ui.grad(), vr.grad(), vi.grad());
    Ok((0..b)
        .map(|j| {
            let mut du = gur[j * kn..(j + 1) * kn].to_vec();
            du.extend_from_slice(&gui[j * kn..(j + 1) * kn]);
            du.extend_from_slice(&gvr[j * mn..(j + 1) * mn]);
            du.extend_from_slice(&gvi[j * mn..(j + 1) * mn]);
            let mut h = hard[j];
            if !h.is_finite() {
                h = f64::NEG_INFINITY;
            }
            (h, gp[j * l..(j + 1) * l].to_vec(), du)
        })
        .collect())
}

/// Adam step with one second-moment scalar for the whole block, so the
/// step stays parallel to the momentum. Per-coordinate scaling would drift
/// toward the sign vector of the gradient at a norm-ball optimum.
fn adam_update(x: &mut [f64], g: &[f64], m1: &mut [f64], m2: &mut f64, lr: f64, t: i32) {
    if x.is_empty() {
        return;
    }
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let clean = |v: f64| if v.is_finite() { v } else { 0.0 };
    let mean_sq = g.iter().map(|&v| clean(v) * clean(v)).sum::<f64>() / g.len() as f64;
    *m2 = ADAM_BETA2 * *m2 + (1.0 - ADAM_BETA2) * mean_sq;
    let denom = (*m2 / c2).sqrt() + ADAM_EPS;
    for i in 0..x.len() {
        m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * clean(g[i]);
        x[i] += lr * (m1[i] / c1) / denom;
    }
}

fn oracle_chunk(chs: &[&ChannelRealization], budget: &PowerBudget, cfg: &OracleConfig) -> Result<Vec<OracleResult>> {
    let r = cfg.restarts;
    let (n, _, k, m) = chs[0].dims();
    let replicated: Vec<&ChannelRealization> = chs.iter().flat_map(|c| std::iter::repeat_n(*c, r)).collect();
    let cb = ChannelBatch::new(&replicated)?;
    let mut states = Vec::with_capacity(replicated.len());
    for (i, ch) in replicated.iter().enumerate() {
        let lane = initial_lane(ch, budget, cfg, i % r)?;
        let dim_phi = lane.phi.len();
        let dim_u = lane.u.len();
        states.push(LaneState {
            best: lane.clone(),
            lane,
            m1: vec![0.0; dim_phi + dim_u],
            m2: [0.0; 2],
            best_see: f64::NEG_INFINITY,
            checkpoint_see: f64::NEG_INFINITY,
            frozen: false,
        });
    }

    for t in 0..=cfg.steps {
        let last = t == cfg.steps;
        let lanes: Vec<&Lane> = states.iter().map(|s| &s.lane).collect();
        let evals = evaluate_lanes(&cb, &lanes, budget, !last)?;
        let lr = cfg.step_at(t);
        for (st, (hard, dphi, du)) in states.iter_mut().zip(evals) {
            if st.frozen {
                continue;
            }
            if hard > st.best_see {
                st.best_see = hard;
                st.best = st.lane.clone();
            }
            if last {
                continue;
            }
            let dim_phi = st.lane.phi.len();
            let (m1p, m1u) = st.m1.split_at_mut(dim_phi);
            let [m2p, m2u] = &mut st.m2;
            adam_update(&mut st.lane.phi, &dphi, m1p, m2p, lr, t as i32 + 1);
            adam_update(&mut st.lane.u, &du, m1u, m2u, lr, t as i32 + 1);
            st.lane.project();
            if cfg.tolerance > 0.0 && (t + 1) % CONVERGENCE_WINDOW == 0 {
                let gain = st.best_see - st.checkpoint_see;
                if st.checkpoint_see.is_finite() && gain <= cfg.tolerance * st.best_see.abs() {
                    st.frozen = true;
                }
                st.checkpoint_see = st.best_see;
            }
        }
        if states.iter().all(|s| s.frozen) {
            break;
        }
    }

    let mut out = Vec::with_capacity(chs.len());
    for (i, ch) in chs.iter().enumerate() {
        let group = &states[i * r..(i + 1) * r];
        // strict comparison keeps the lowest restart index on ties
        let mut pick = &group[0];
        for st in &group[1..] {
            if st.best_see > pick.best_see {
                pick = st;
            }
        }
        let design = pick.best.design(k, m, n, budget.p_max);
        let value = see(ch, &design, budget.p_c)?.see;
        out.push(OracleResult { design, see: value });
    }
    Ok(out)
}

/// Oracle designs for many samples. Samples are split into fixed chunks that
/// run in parallel; each result depends only on its own channel and `cfg`.
pub fn gradient_oracle_many(
    chs: &[&ChannelRealization],
    budget: &PowerBudget,
    cfg: &OracleConfig,
) -> Result<Vec<OracleResult>> {
    cfg.validate()?;
    if !(budget.p_max >= 0.0) || !(budget.p_c > 0.0) {
        return Err(BaselineError::Config(format!(
            "power budget needs p_max >= 0 and p_c > 0, got {} and {}",
            budget.p_max, budget.p_c
        )));
    }
    for c in chs {
        c.validate()?;
    }
    let groups: Vec<Vec<&ChannelRealization>> = chs
        .chunk_by(|a, b| a.dims() == b.dims())
        .flat_map(|run| run.chunks(ORACLE_CHUNK).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect();
    let parts: Vec<Result<Vec<OracleResult>>> = groups.par_iter().map(|g| oracle_chunk(g, budget, cfg)).collect();
    let mut out = Vec::with_capacity(chs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Multi-restart projected gradient ascent on the leakage-weighted SEE with
/// weight one; returns the iterate with the best clamped SEE.
pub fn gradient_oracle(ch: &ChannelRealization, budget: &PowerBudget, cfg: &OracleConfig) -> Result<OracleResult> {
    Ok(gradient_oracle_many(&[ch], budget, cfg)?.remove(0))
}
