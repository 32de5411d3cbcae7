//! Scenario geometry, CSI synthesis and effective-channel composition.
//!
//! Direct BS links are Rayleigh; every RIS-related link is Rician with a
//! uniform-linear-array line-of-sight component. All randomness is drawn
//! from per-entity ChaCha streams keyed by `(seed, sample, entity)`, so the
//! draws of one receiver never depend on how many other receivers exist.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ComplexPair, NumericsError, Tensor};

/// ULA element spacing in wavelengths.
const ELEMENT_SPACING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, ChannelError>;

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Deployment and propagation parameters of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_t: usize,
    pub l: usize,
    pub k: usize,
    pub m: usize,
    pub bs_pos: [f64; 2],
    pub ris_pos: [f64; 2],
    pub lu_center: [f64; 2],
    pub lu_radius: f64,
    pub eve_center: [f64; 2],
    pub eve_radius: f64,
    pub rho_db: f64,
    pub alpha: f64,
    pub rician_beta_db: f64,
    /// Recorded with the scenario; the half-wavelength array response does
    /// not depend on it.
    pub carrier_hz: f64,
    pub noise_dbm: f64,
    pub eve_noise_dbm: f64,
    pub p_max_dbm: f64,
    pub p_c_watt: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_t: 4,
            l: 4,
            k: 2,
            m: 2,
            bs_pos: [0.0, 0.0],
            ris_pos: [10.0, 0.0],
            lu_center: [50.0, 50.0],
            lu_radius: 10.0,
            eve_center: [25.0, 25.0],
            eve_radius: 10.0,
            rho_db: -20.0,
            alpha: 2.8,
            rician_beta_db: 3.0,
            carrier_hz: 1.8e9,
            noise_dbm: -80.0,
            eve_noise_dbm: -80.0,
            p_max_dbm: 30.0,
            p_c_watt: 0.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_dims(mut self, n_t: usize, l: usize, k: usize, m: usize) -> Self {
        self.n_t = n_t;
        self.l = l;
        self.k = k;
        self.m = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.k == 0 {
            return Err(ChannelError::Config(format!(
                "need at least one antenna and one LU, got n_t = {}, k = {}",
                self.n_t, self.k
            )));
        }
        if !(self.lu_radius > 0.0 && self.eve_radius > 0.0) {
            return Err(ChannelError::Config("disk radii must be positive".into()));
        }
        if !self.p_max_dbm.is_finite() {
            return Err(ChannelError::Config("p_max_dbm must be finite".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> PowerBudget {
        PowerBudget {
            p_max: dbm_to_watt(self.p_max_dbm),
            p_c: self.p_c_watt,
        }
    }
}

/// Transmit power budget and constant circuit power, in watts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerBudget {
    pub p_max: f64,
    pub p_c: f64,
}

/// All CSI blocks of one channel draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub n_t: usize,
    pub l: usize,
    pub k: usize,
    pub m: usize,
    /// BS-RIS channel, `l x n_t` row-major.
    pub h: Vec<Complex64>,
    /// Direct BS-LU channels, one `n_t` vector per LU.
    pub h_b: Vec<Vec<Complex64>>,
    /// RIS-LU channels, one `l` vector per LU.
    pub h_r: Vec<Vec<Complex64>>,
    /// Direct BS-Eve channels.
    pub f_b: Vec<Vec<Complex64>>,
    /// RIS-Eve channels.
    pub f_r: Vec<Vec<Complex64>>,
    /// Noise power per LU (W).
    pub sigma2: Vec<f64>,
    /// Noise power per Eve (W).
    pub sigma2_e: Vec<f64>,
}

impl ChannelRealization {
    /// Checks every block against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(ChannelError::Dimension(what.to_string()));
        if self.h.len() != self.l * self.n_t {
            return bad("H must be l x n_t");
        }
        if self.h_b.len() != self.k || self.h_r.len() != self.k || self.sigma2.len() != self.k {
            return bad("LU blocks must have k entries");
        }
        if self.f_b.len() != self.m || self.f_r.len() != self.m || self.sigma2_e.len() != self.m {
            return bad("Eve blocks must have m entries");
        }
        if self.h_b.iter().chain(&self.f_b).any(|v| v.len() != self.n_t) {
            return bad("direct channels must have n_t entries");
        }
        if self.h_r.iter().chain(&self.f_r).any(|v| v.len() != self.l) {
            return bad("RIS channels must have l entries");
        }
        let finite = self
            .h
            .iter()
            .chain(self.h_b.iter().flatten())
            .chain(self.h_r.iter().flatten())
            .chain(self.f_b.iter().flatten())
            .chain(self.f_r.iter().flatten())
            .all(|c| c.re.is_finite() && c.im.is_finite());
        if !finite {
            return Err(ChannelError::Config("non-finite CSI entry".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_t, self.l, self.k, self.m)
    }

    /// Keeps only the listed LUs and Eves (in the given order). Used to build
    /// permuted and reduced instances.
    pub fn select(&self, lus: &[usize], eves: &[usize]) -> ChannelRealization {
        ChannelRealization {
            n_t: self.n_t,
            l: self.l,
            k: lus.len(),
            m: eves.len(),
            h: self.h.clone(),
            h_b: lus.iter().map(|&i| self.h_b[i].clone()).collect(),
            h_r: lus.iter().map(|&i| self.h_r[i].clone()).collect(),
            f_b: eves.iter().map(|&i| self.f_b[i].clone()).collect(),
            f_r: eves.iter().map(|&i| self.f_r[i].clone()).collect(),
            sigma2: lus.iter().map(|&i| self.sigma2[i]).collect(),
            sigma2_e: eves.iter().map(|&i| self.sigma2_e[i]).collect(),
        }
    }

    /// Reorders the reflecting elements: new element `i` is old `perm[i]`.
    pub fn permute_elements(&self, perm: &[usize]) -> ChannelRealization {
        let mut out = self.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.h[i * self.n_t..(i + 1) * self.n_t].copy_from_slice(&self.h[p * self.n_t..(p + 1) * self.n_t]);
        }
        for (dst, src) in out.h_r.iter_mut().zip(&self.h_r).chain(out.f_r.iter_mut().zip(&self.f_r)) {
            for (i, &p) in perm.iter().enumerate() {
                dst[i] = src[p];
            }
        }
        out
    }
}

/// ULA response `a_N(phi)` with half-wavelength spacing.
pub fn steering_vector(n: usize, phi: f64) -> Vec<Complex64> {
    steering_vector_spaced(n, phi, ELEMENT_SPACING)
}

/// ULA response with element spacing given in wavelengths.
pub fn steering_vector_spaced(n: usize, phi: f64, spacing_wavelengths: f64) -> Vec<Complex64> {
    let step = -2.0 * PI * spacing_wavelengths * phi.sin();
    (0..n).map(|i| Complex64::from_polar(1.0, step * i as f64)).collect()
}

fn bearing(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Large-scale amplitude gain `sqrt(rho d^-alpha)`.
pub fn path_amplitude(rho_db: f64, alpha: f64, d: f64) -> f64 {
    (db_to_linear(rho_db) * d.powf(-alpha)).sqrt()
}

/// Stream labels for the per-entity generators.
#[derive(Clone, Copy, Debug)]
enum Entity {
    BsRis,
    LuPosition(usize),
    LuDirect(usize),
    LuRis(usize),
    EvePosition(usize),
    EveDirect(usize),
    EveRis(usize),
}

impl Entity {
    fn stream(self) -> u64 {
        let (kind, idx) = match self {
            Entity::BsRis => (1u64, 0usize),
            Entity::LuPosition(i) => (2, i),
            Entity::LuDirect(i) => (3, i),
            Entity::LuRis(i) => (4, i),
            Entity::EvePosition(i) => (5, i),
            Entity::EveDirect(i) => (6, i),
            Entity::EveRis(i) => (7, i),
        };
        (kind << 32) | idx as u64
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based source of independent generators for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleStreams {
    key: u64,
}

impl SampleStreams {
    pub fn new(seed: u64, sample: u64) -> Self {
        SampleStreams {
            key: splitmix64(seed ^ splitmix64(sample.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    fn rng(&self, entity: Entity) -> ChaCha20Rng {
        let mut r = ChaCha20Rng::seed_from_u64(self.key);
        r.set_stream(entity.stream());
        r
    }

    /// Generator for an auxiliary purpose outside the channel draw.
    pub fn aux(&self, tag: u64) -> ChaCha20Rng {
        let mut r = ChaCha20Rng::seed_from_u64(self.key);
        r.set_stream((0xA5u64 << 56) | tag);
        r
    }
}

fn cn01(rng: &mut impl Rng) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

fn uniform_in_disk(rng: &mut impl Rng, center: [f64; 2], radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let t = 2.0 * PI * rng.random::<f64>();
    [center[0] + r * t.cos(), center[1] + r * t.sin()]
}

fn rician_weights(beta: f64) -> (f64, f64) {
    if beta.is_infinite() {
        (1.0, 0.0)
    } else {
        ((beta / (1.0 + beta)).sqrt(), (1.0 / (1.0 + beta)).sqrt())
    }
}

/// Draws one channel realization. Identical `(cfg, streams)` always give
/// identical CSI.
pub fn sample_scenario(cfg: &ScenarioConfig, streams: &SampleStreams) -> Result<ChannelRealization> {
    cfg.validate()?;
    let spacing = ELEMENT_SPACING;
    let beta = db_to_linear(cfg.rician_beta_db);
    let (w_los, w_nlos) = rician_weights(beta);
    let amp = |d: f64| path_amplitude(cfg.rho_db, cfg.alpha, d);

    // BS-RIS
    let d_br = distance(cfg.bs_pos, cfg.ris_pos);
    let theta_br = bearing(cfg.bs_pos, cfg.ris_pos);
    let a_ris = steering_vector_spaced(cfg.l, theta_br, spacing);
    let a_bs = steering_vector_spaced(cfg.n_t, theta_br, spacing);
    let mut rng = streams.rng(Entity::BsRis);
    let g = amp(d_br);
    let mut h = Vec::with_capacity(cfg.l * cfg.n_t);
    for l in 0..cfg.l {
        for n in 0..cfg.n_t {
            let los = a_ris[l] * a_bs[n].conj();
            h.push(g * (w_los * los + w_nlos * cn01(&mut rng)));
        }
    }

    let receiver = |pos: [f64; 2], direct: Entity, ris: Entity| {
        let mut rd = streams.rng(direct);
        let gd = amp(distance(cfg.bs_pos, pos));
        let hb: Vec<Complex64> = (0..cfg.n_t).map(|_| gd * cn01(&mut rd)).collect();
        let mut rr = streams.rng(ris);
        let gr = amp(distance(cfg.ris_pos, pos));
        let los = steering_vector_spaced(cfg.l, bearing(cfg.ris_pos, pos), spacing);
        let hr: Vec<Complex64> = los.iter().map(|a| gr * (w_los * a + w_nlos * cn01(&mut rr))).collect();
        (hb, hr)
    };

    let mut h_b = Vec::with_capacity(cfg.k);
    let mut h_r = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let pos = uniform_in_disk(&mut streams.rng(Entity::LuPosition(k)), cfg.lu_center, cfg.lu_radius);
        let (hb, hr) = receiver(pos, Entity::LuDirect(k), Entity::LuRis(k));
        h_b.push(hb);
        h_r.push(hr);
    }
    let mut f_b = Vec::with_capacity(cfg.m);
    let mut f_r = Vec::with_capacity(cfg.m);
    for m in 0..cfg.m {
        let pos = uniform_in_disk(&mut streams.rng(Entity::EvePosition(m)), cfg.eve_center, cfg.eve_radius);
        let (fb, fr) = receiver(pos, Entity::EveDirect(m), Entity::EveRis(m));
        f_b.push(fb);
        f_r.push(fr);
    }

    Ok(ChannelRealization {
        n_t: cfg.n_t,
        l: cfg.l,
        k: cfg.k,
        m: cfg.m,
        h,
        h_b,
        h_r,
        f_b,
        f_r,
        sigma2: vec![dbm_to_watt(cfg.noise_dbm); cfg.k],
        sigma2_e: vec![dbm_to_watt(cfg.eve_noise_dbm); cfg.m],
    })
}

/// Draws `count` consecutive samples starting at index `first`.
pub fn sample_many(cfg: &ScenarioConfig, first: u64, count: usize) -> Result<Vec<ChannelRealization>> {
    (0..count as u64)
        .map(|i| sample_scenario(cfg, &SampleStreams::new(cfg.seed, first + i)))
        .collect()
}

fn split_parts(vs: impl Iterator<Item = Complex64>) -> (Vec<f64>, Vec<f64>) {
    vs.map(|c| (c.re, c.im)).unzip()
}

/// Constant tensors for a batch of realizations with identical dimensions.
/// Shapes: `h [b, l, n_t]`, `h_b [b, k, n_t]`, `h_r [b, k, l]`,
/// `f_b [b, m, n_t]`, `f_r [b, m, l]`, `sigma2 [b, k]`, `sigma2_e [b, m]`.
#[derive(Clone, Debug)]
pub struct ChannelBatch {
    pub batch: usize,
    pub n_t: usize,
    pub l: usize,
    pub k: usize,
    pub m: usize,
    pub h: ComplexPair,
    pub h_b: ComplexPair,
    pub h_r: ComplexPair,
    pub f_b: ComplexPair,
    pub f_r: ComplexPair,
    pub sigma2: Tensor,
    pub sigma2_e: Tensor,
}

impl ChannelBatch {
    pub fn new(chs: &[&ChannelRealization]) -> Result<Self> {
        let first = chs
            .first()
            .ok_or_else(|| ChannelError::Dimension("empty batch".into()))?;
        let (n_t, l, k, m) = first.dims();
        for c in chs {
            c.validate()?;
            if c.dims() != (n_t, l, k, m) {
                return Err(ChannelError::Dimension(format!(
                    "batch mixes dimensions {:?} and {:?}",
                    first.dims(),
                    c.dims()
                )));
            }
        }
        let b = chs.len();
        let pair = |get: &dyn Fn(&ChannelRealization) -> Vec<Complex64>, shape: &[usize]| {
            let (re, im) = split_parts(chs.iter().flat_map(|c| get(c)));
            ComplexPair::constant(re, im, shape)
        };
        Ok(ChannelBatch {
            batch: b,
            n_t,
            l,
            k,
            m,
            h: pair(&|c| c.h.clone(), &[b, l, n_t])?,
            h_b: pair(&|c| c.h_b.concat(), &[b, k, n_t])?,
            h_r: pair(&|c| c.h_r.concat(), &[b, k, l])?,
            f_b: pair(&|c| c.f_b.concat(), &[b, m, n_t])?,
            f_r: pair(&|c| c.f_r.concat(), &[b, m, l])?,
            sigma2: Tensor::constant(chs.iter().flat_map(|c| c.sigma2.clone()).collect(), &[b, k])?,
            sigma2_e: Tensor::constant(chs.iter().flat_map(|c| c.sigma2_e.clone()).collect(), &[b, m])?,
        })
    }

    /// Effective channels `h_b + H^H Phi^H h_r` for every LU and Eve, with
    /// `phi: [b, l]`. Returns `([b, k, n_t], [b, m, n_t])`, differentiable in
    /// `phi`.
    pub fn effective_csi(&self, phi: &Tensor) -> Result<(ComplexPair, ComplexPair)> {
        if phi.shape() != [self.batch, self.l] {
            return Err(ChannelError::Dimension(format!(
                "phase tensor {:?} does not match [{}, {}]",
                phi.shape(),
                self.batch,
                self.l
            )));
        }
        let cos = phi.cos();
        let sin = phi.sin();
        let h_conj = self.h.conj();
        let compose = |direct: &ComplexPair, ris: &ComplexPair, rows: usize| -> Result<ComplexPair> {
            let c = cos.expand(1, rows)?;
            let s = sin.expand(1, rows)?;
            // e^{-j phi} r = (cos r_re + sin r_im) + j (cos r_im - sin r_re)
            let coeff = ComplexPair::new(
                c.mul(&ris.re)?.add(&s.mul(&ris.im)?)?,
                c.mul(&ris.im)?.sub(&s.mul(&ris.re)?)?,
            )?;
            let cascaded = coeff.cbmm(&h_conj, false, false)?;
            Ok(direct.add(&cascaded)?)
        };
        Ok((compose(&self.h_b, &self.h_r, self.k)?, compose(&self.f_b, &self.f_r, self.m)?))
    }
}

/// Single-sample effective CSI with `phi: [l]`; returns `([k, n_t], [m, n_t])`.
pub fn effective_csi(ch: &ChannelRealization, phi: &Tensor) -> Result<(ComplexPair, ComplexPair)> {
    if phi.shape() != [ch.l] {
        return Err(ChannelError::Dimension(format!(
            "phase vector {:?} does not match l = {}",
            phi.shape(),
            ch.l
        )));
    }
    let batch = ChannelBatch::new(&[ch])?;
    let (h, f) = batch.effective_csi(&phi.reshape(&[1, ch.l])?)?;
    let squeeze = |p: ComplexPair, rows: usize| p.map(|t| t.reshape(&[rows, ch.n_t]));
    Ok((squeeze(h, ch.k)?, squeeze(f, ch.m)?))
}

/// Plain complex vectors of a `[rows, n]` (or `[1, rows, n]`) complex tensor.
pub fn complex_rows(p: &ComplexPair) -> Vec<Vec<Complex64>> {
    let n = *p.shape().last().unwrap_or(&0);
    if n == 0 {
        return vec![Vec::new(); p.re.numel()];
    }
    p.re
        .values()
        .chunks(n)
        .zip(p.im.values().chunks(n))
        .map(|(r, i)| r.iter().zip(i).map(|(a, b)| Complex64::new(*a, *b)).collect())
        .collect()
}
