//! Independent scalar-loop oracles shared by the integration tests and the
//! acceptance target. Nothing here calls into the tensor engine except to
//! read values back.

#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;
use rispls::channel::{sample_scenario, ChannelRealization, PowerBudget, SampleStreams, ScenarioConfig};
use rispls::metrics::TransmitDesign;
use rispls::model::{HgnnModel, LayerWidth, ModelDims};
use rispls::numerics::{ComplexPair, Tensor};

pub const SLOPE: f64 = 0.01;

pub fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        SLOPE * x
    }
}

/// `a [m, k]` times `b [k, n]`, both row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Row vector `x [in]` times `w [in, out]`.
pub fn project(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    matmul(x, w, 1, x.len(), out)
}

/// One neighbor of an attention target: source features and the optional
/// edge features of the connecting edge.
pub struct Neighbor {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

/// Raw attention weights, row-major as stored by the engine.
pub struct AttnOracleWeights<'a> {
    pub w_s: &'a [f64],
    pub w_n: &'a [f64],
    pub w_e: Option<&'a [f64]>,
    pub a: &'a [f64],
    pub heads: usize,
    pub head_dim: usize,
}

/// One target of the attention operator, computed head by head:
/// `logit_j = a_d . lrelu(W_S x_i + m_j)`, `m_j = W_N x_j (+ W_E y_ij)`,
/// output `(W_S x_i if self_term) + sum_j alpha_j m_j`. Returns the output
/// row and `alpha[j][d]`. The sum over an empty neighbor set is zero.
pub fn attention_target(x_i: &[f64], nbrs: &[Neighbor], w: &AttnOracleWeights, self_term: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (d, b) = (w.heads, w.head_dim);
    let width = d * b;
    let s = project(x_i, w.w_s, width);
    let msgs: Vec<Vec<f64>> = nbrs
        .iter()
        .map(|nb| {
            let mut m = project(&nb.x, w.w_n, width);
            if let (Some(we), Some(y)) = (w.w_e, &nb.y) {
                for (mi, e) in m.iter_mut().zip(project(y, we, width)) {
                    *mi += e;
                }
            }
            m
        })
        .collect();
    let mut out = if self_term { s.clone() } else { vec![0.0; width] };
    let mut alpha = vec![vec![0.0; d]; nbrs.len()];
    for h in 0..d {
        let logits: Vec<f64> = msgs
            .iter()
            .map(|m| (0..b).map(|c| w.a[h * b + c] * lrelu(s[h * b + c] + m[h * b + c])).sum())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = ex.iter().sum();
        for (j, m) in msgs.iter().enumerate() {
            let a = ex[j] / z;
            alpha[j][h] = a;
            for c in 0..b {
                out[h * b + c] += a * m[h * b + c];
            }
        }
    }
    (out, alpha)
}

/// `sum_n conj(a_n) b_n`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Effective channels `h_k + H^H Phi^H g_k` written out entry by entry.
pub fn effective(ch: &ChannelRealization, phi: &[f64]) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
    let n = ch.n_t;
    let one = |direct: &[Complex64], ris: &[Complex64]| -> Vec<Complex64> {
        (0..n)
            .map(|t| {
                let mut v = direct[t];
                for l in 0..ch.l {
                    let refl = Complex64::from_polar(1.0, phi[l]).conj();
                    v += ch.h[l * n + t].conj() * refl * ris[l];
                }
                v
            })
            .collect()
    };
    let lu = (0..ch.k).map(|k| one(&ch.h_b[k], &ch.h_r[k])).collect();
    let eve = (0..ch.m).map(|m| one(&ch.f_b[m], &ch.f_r[m])).collect();
    (lu, eve)
}

/// Rate of every LU and leakage `[m][k]` of every stream at every Eve.
pub fn rates(ch: &ChannelRealization, d: &TransmitDesign) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (h, f) = effective(ch, &d.phi);
    let gain = |c: &[Complex64], v: &[Complex64]| inner(c, v).norm_sqr();
    let rate = |c: &[Complex64], k: usize, noise: f64| {
        let mut interf = noise;
        for (j, w) in d.w.iter().enumerate() {
            if j != k {
                interf += gain(c, w);
            }
        }
        for z in &d.z {
            interf += gain(c, z);
        }
        (1.0 + gain(c, &d.w[k]) / interf).log2()
    };
    let lu = (0..ch.k).map(|k| rate(&h[k], k, ch.sigma2[k])).collect();
    let leak = (0..ch.m)
        .map(|m| (0..ch.k).map(|k| rate(&f[m], k, ch.sigma2_e[m])).collect())
        .collect();
    (lu, leak)
}

pub fn total_power(d: &TransmitDesign) -> f64 {
    d.w.iter().chain(&d.z).flat_map(|v| v.iter()).map(|c| c.norm_sqr()).sum()
}

fn worst(leak: &[Vec<f64>], k: usize) -> f64 {
    leak.iter().map(|row| row[k]).fold(0.0, f64::max)
}

/// `sum_k [R_k - max_m R_E,m,k]^+ / (P_tx + P_C)`.
pub fn see(ch: &ChannelRealization, d: &TransmitDesign, p_c: f64) -> f64 {
    let (r, leak) = rates(ch, d);
    let s: f64 = (0..ch.k).map(|k| (r[k] - worst(&leak, k)).max(0.0)).sum();
    s / (total_power(d) + p_c)
}

/// `sum_k (R_k - gamma max_m R_E,m,k) / (P_tx + P_C)`.
pub fn soft_see(ch: &ChannelRealization, d: &TransmitDesign, gamma: f64, p_c: f64) -> f64 {
    let (r, leak) = rates(ch, d);
    let s: f64 = (0..ch.k).map(|k| r[k] - gamma * worst(&leak, k)).sum();
    s / (total_power(d) + p_c)
}

/// Batch mean of the negative soft SEE.
pub fn loss(chs: &[ChannelRealization], ds: &[TransmitDesign], gamma: f64, p_c: f64) -> f64 {
    let s: f64 = chs.iter().zip(ds).map(|(c, d)| soft_see(c, d, gamma, p_c)).sum();
    -s / chs.len() as f64
}

/// Central differences of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor for vanishing gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

/// Norm-wise relative error of a gradient vector.
pub fn norm_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn scenario(n_t: usize, l: usize, k: usize, m: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    }
    .with_dims(n_t, l, k, m)
}

pub fn channel(cfg: &ScenarioConfig, sample: u64) -> ChannelRealization {
    sample_scenario(cfg, &SampleStreams::new(cfg.seed, sample)).expect("valid scenario")
}

pub fn complex_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
        .collect()
}

/// Random design with phases in `[0, 2 pi)` and vectors rescaled to a total
/// power drawn from `[0, p_max]`.
pub fn random_design(ch: &ChannelRealization, p_max: f64, rng: &mut impl Rng) -> TransmitDesign {
    let phi = (0..ch.l).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut w: Vec<Vec<Complex64>> = (0..ch.k).map(|_| complex_vec(ch.n_t, 1.0, rng)).collect();
    let mut z: Vec<Vec<Complex64>> = (0..ch.m).map(|_| complex_vec(ch.n_t, 1.0, rng)).collect();
    let raw: f64 = w.iter().chain(&z).flat_map(|v| v.iter()).map(|c| c.norm_sqr()).sum();
    let c = (rng.random_range(0.0..=1.0) * p_max / raw).sqrt();
    for v in w.iter_mut().chain(z.iter_mut()) {
        v.iter_mut().for_each(|x| *x *= c);
    }
    TransmitDesign { phi, w, z }
}

/// Small widths that keep finite-difference checks of the whole network fast.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        lift: 8,
        augment: LayerWidth::new(1, 4),
        stage1_layers: vec![LayerWidth::new(2, 6)],
        phase_hidden: [8, 4],
        stage2_layers: vec![LayerWidth::new(2, 6)],
        head_hidden: 8,
    }
}

/// Input ranges for a differentiable operation under test.
#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
}

/// One differentiable operation with its input shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub f: Box<dyn Fn(&[Tensor]) -> Tensor>,
}

fn case(name: &'static str, shapes: &[&[usize]], domain: Domain, f: impl Fn(&[Tensor]) -> Tensor + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        domain,
        f: Box::new(f),
    }
}

fn pair(x: &[Tensor], i: usize) -> ComplexPair {
    ComplexPair::new(x[i].clone(), x[i + 1].clone()).unwrap()
}

/// Every differentiable operation of the engine.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case("add", &[&[3, 4], &[3, 4]], Any, |x| x[0].add(&x[1]).unwrap()),
        case("sub", &[&[3, 4], &[3, 4]], Any, |x| x[0].sub(&x[1]).unwrap()),
        case("mul", &[&[3, 4], &[3, 4]], Any, |x| x[0].mul(&x[1]).unwrap()),
        case("div", &[&[3, 4], &[3, 4]], Positive, |x| x[0].div(&x[1]).unwrap()),
        case("neg", &[&[5]], Any, |x| x[0].neg()),
        case("scale", &[&[5]], Any, |x| x[0].scale(-1.7)),
        case("add_scalar", &[&[5]], Any, |x| x[0].add_scalar(0.3)),
        case("exp", &[&[5]], Any, |x| x[0].exp()),
        case("log2", &[&[5]], Positive, |x| x[0].log2().unwrap()),
        case("reciprocal", &[&[5]], Positive, |x| x[0].reciprocal().unwrap()),
        case("relu", &[&[6]], Any, |x| x[0].relu()),
        case("leaky_relu", &[&[6]], Any, |x| x[0].leaky_relu(SLOPE)),
        case("sigmoid", &[&[6]], Any, |x| x[0].sigmoid()),
        case("sqrt", &[&[5]], Positive, |x| x[0].sqrt().unwrap()),
        case("square", &[&[5]], Any, |x| x[0].square()),
        case("cos", &[&[5]], Any, |x| x[0].cos()),
        case("sin", &[&[5]], Any, |x| x[0].sin()),
        case("max_scalar", &[&[6]], Any, |x| x[0].max_scalar(0.05)),
        case("select", &[&[2, 3], &[2, 3]], Any, |x| {
            Tensor::select(&[true, false, false, true, true, false], &x[0], &x[1]).unwrap()
        }),
        case("reshape", &[&[2, 3]], Any, |x| x[0].reshape(&[3, 2]).unwrap().mul(&x[0].reshape(&[3, 2]).unwrap()).unwrap()),
        case("expand", &[&[2, 3]], Any, |x| x[0].expand(1, 4).unwrap().square()),
        case("sum_axis", &[&[2, 3, 4]], Any, |x| x[0].sum_axis(1).unwrap().square()),
        case("sum_all", &[&[2, 3]], Any, |x| x[0].sum_all().square()),
        case("max_axis", &[&[3, 4]], Any, |x| x[0].max_axis(1).unwrap().0.square()),
        case("narrow", &[&[3, 5]], Any, |x| x[0].narrow(1, 1, 3).unwrap().square()),
        case("gather_rows", &[&[4, 3]], Any, |x| x[0].gather_rows(&[2, 0, 2, 3, 1, 2]).unwrap().square()),
        case("segment_sum", &[&[6, 2]], Any, |x| x[0].segment_sum(&[1, 0, 1, 2, 2, 1], 4).unwrap().square()),
        case("zero_pad", &[&[3, 2]], Any, |x| x[0].zero_pad(5).unwrap().square()),
        case("concat", &[&[2, 3], &[2, 2]], Any, |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1).unwrap().square()),
        case("matmul", &[&[3, 4], &[4, 2]], Any, |x| x[0].matmul(&x[1]).unwrap()),
        case("bmm", &[&[2, 4, 3], &[2, 2, 4]], Any, |x| x[0].bmm(&x[1], true, true).unwrap()),
        case("solve", &[&[2, 3, 3], &[2, 3, 2]], Any, |x| {
            let eye: Vec<f64> = (0..18).map(|i| if i % 9 % 4 == 0 { 4.0 } else { 0.0 }).collect();
            let a = x[0].add(&Tensor::constant(eye, &[2, 3, 3]).unwrap()).unwrap();
            Tensor::solve(&a, &x[1]).unwrap()
        }),
        case("cmul", &[&[4], &[4], &[4], &[4]], Any, |x| {
            let c = pair(x, 0).cmul(&pair(x, 2)).unwrap();
            c.re.add(&c.im.scale(0.7)).unwrap()
        }),
        case("cbmm", &[&[1, 2, 3], &[1, 2, 3], &[1, 2, 3], &[1, 2, 3]], Any, |x| {
            let c = pair(x, 0).cbmm(&pair(x, 2), true, false).unwrap();
            c.re.sub(&c.im.scale(1.3)).unwrap()
        }),
        case("hermitian_dot", &[&[3], &[3], &[3], &[3]], Any, |x| {
            let c = pair(x, 0).hermitian_dot(&pair(x, 2)).unwrap();
            c.re.add(&c.im).unwrap()
        }),
        case("csolve", &[&[1, 2, 2], &[1, 2, 2], &[1, 2, 1], &[1, 2, 1]], Any, |x| {
            let eye = Tensor::constant(vec![3.0, 0.0, 0.0, 3.0], &[1, 2, 2]).unwrap();
            let a = ComplexPair::new(x[0].add(&eye).unwrap(), x[1].clone()).unwrap();
            let c = ComplexPair::csolve(&a, &pair(x, 2)).unwrap();
            c.re.add(&c.im.scale(0.5)).unwrap()
        }),
        case("abs2_norm", &[&[2, 3], &[2, 3]], Any, |x| pair(x, 0).norm_last().unwrap()),
    ]
}

/// Draws inputs for `case` as gradient-tracked leaves.
pub fn op_inputs(case: &OpCase, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    case.shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| match case.domain {
                    // Magnitudes of at least 0.1 keep central differences off the kinks.
                    Domain::Any => {
                        let v: f64 = rng.random_range(0.1..1.0);
                        if rng.random_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    }
                    Domain::Positive => rng.random_range(0.5..2.0),
                })
                .collect()
        })
        .collect()
}

/// Weighted sum `sum_i c_i out_i` of the case output, with analytic and
/// central-difference gradients over all inputs (flattened in order).
pub fn op_gradients(case: &OpCase, inputs: &[Vec<f64>], weights_seed: u64) -> (Vec<f64>, Vec<f64>) {
    use rand::SeedableRng;
    let eval = |vals: &[Vec<f64>], track: bool| -> (f64, Vec<Tensor>) {
        let leaves: Vec<Tensor> = vals
            .iter()
            .zip(&case.shapes)
            .map(|(v, s)| {
                if track {
                    Tensor::param(v.clone(), s).unwrap()
                } else {
                    Tensor::constant(v.clone(), s).unwrap()
                }
            })
            .collect();
        let out = (case.f)(&leaves);
        let mut wr = rand_chacha::ChaCha8Rng::seed_from_u64(weights_seed);
        let c: Vec<f64> = (0..out.numel()).map(|_| wr.random_range(-1.0..1.0)).collect();
        let total = out.mul(&Tensor::constant(c, out.shape()).unwrap()).unwrap().sum_all();
        if track {
            total.backward().unwrap();
        }
        (total.item(), leaves)
    };
    let (_, leaves) = eval(inputs, true);
    let analytic: Vec<f64> = leaves.iter().flat_map(|t| t.grad()).collect();
    let sizes: Vec<usize> = inputs.iter().map(|v| v.len()).collect();
    let flat: Vec<f64> = inputs.concat();
    let numeric = central_diff(
        |x| {
            let mut parts = Vec::new();
            let mut at = 0;
            for &n in &sizes {
                parts.push(x[at..at + n].to_vec());
                at += n;
            }
            eval(&parts, false).0
        },
        &flat,
        1e-6,
    );
    (analytic, numeric)
}

pub fn random_perm(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Largest deviation between the outputs on a permuted instance and the
/// permuted outputs, for random permutations of elements, LUs and Eves.
pub fn equivariance_error(model: &HgnnModel, ch: &ChannelRealization, budget: &PowerBudget, rng: &mut impl Rng) -> f64 {
    let pl = random_perm(ch.l, rng);
    let pk = random_perm(ch.k, rng);
    let pm = random_perm(ch.m, rng);
    let moved = ch.permute_elements(&pl).select(&pk, &pm);
    let base = model.infer(&[ch], budget).expect("forward").remove(0);
    let perm = model.infer(&[&moved], budget).expect("forward").remove(0);
    let mut dev: f64 = 0.0;
    for (i, &p) in pl.iter().enumerate() {
        // Phases compare on the circle.
        let d = (perm.phi[i] - base.phi[p]).abs();
        dev = dev.max(d.min(std::f64::consts::TAU - d));
    }
    for (rows_p, rows_b, order) in [(&perm.w, &base.w, &pk), (&perm.z, &base.z, &pm)] {
        for (i, &p) in order.iter().enumerate() {
            for (a, b) in rows_p[i].iter().zip(&rows_b[p]) {
                dev = dev.max((a - b).norm());
            }
        }
    }
    dev
}

/// Residuals of the zero-forcing and MRT identities for one channel.
pub struct ZfCheck {
    /// Max over `j != k` of `|h_j^H w_k| / (||h_j|| ||w_k||)` with pure ZF.
    pub zf_leak: f64,
    /// Max over `k, m` of `|h_k^H z_m| / (||h_k|| ||z_m||)` with pure nulling AN.
    pub an_leak: f64,
    /// Min over `k` of `|cos angle(w_k, h_k)|` with pure MRT.
    pub mrt_cos: f64,
    /// Max deviation of any direction norm from 1.
    pub unit: f64,
}

pub fn zf_check(ch: &ChannelRealization, phi: &[f64]) -> ZfCheck {
    use rispls::channel::{complex_rows, effective_csi, ChannelBatch};
    use rispls::stage2::{hybrid_directions, zf_directions};
    let cb = ChannelBatch::new(&[ch]).unwrap();
    let (h, f) = cb.effective_csi(&Tensor::constant(phi.to_vec(), &[1, ch.l]).unwrap()).unwrap();
    let (v, v_eve) = zf_directions(&h, &f).unwrap();
    let ones = |r: usize| Tensor::constant(vec![1.0; r], &[1, r]).unwrap();
    let zeros = |r: usize| Tensor::zeros(&[1, r]);
    let zf = complex_rows(&hybrid_directions(&v, &h, &ones(ch.k)).unwrap());
    let mrt = complex_rows(&hybrid_directions(&v, &h, &zeros(ch.k)).unwrap());
    let an = if ch.m > 0 {
        complex_rows(&hybrid_directions(&v_eve, &f, &ones(ch.m)).unwrap())
    } else {
        Vec::new()
    };
    let (hs, _) = effective_csi(ch, &Tensor::constant(phi.to_vec(), &[ch.l]).unwrap()).unwrap();
    let hs = complex_rows(&hs);
    let norm = |v: &[Complex64]| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut out = ZfCheck {
        zf_leak: 0.0,
        an_leak: 0.0,
        mrt_cos: f64::INFINITY,
        unit: 0.0,
    };
    for (j, hj) in hs.iter().enumerate() {
        for (k, wk) in zf.iter().enumerate() {
            if j != k {
                out.zf_leak = out.zf_leak.max(inner(hj, wk).norm() / (norm(hj) * norm(wk)));
            }
        }
        for z in &an {
            out.an_leak = out.an_leak.max(inner(hj, z).norm() / (norm(hj) * norm(z)));
        }
        out.mrt_cos = out.mrt_cos.min(inner(&mrt[j], hj).norm() / (norm(&mrt[j]) * norm(hj)));
    }
    for v in zf.iter().chain(&mrt).chain(&an) {
        out.unit = out.unit.max((norm(v) - 1.0).abs());
    }
    out
}

/// Analytic and central-difference gradients of the training loss with
/// respect to `coords` randomly chosen scalar parameters.
pub fn model_gradients(
    model: &HgnnModel,
    chs: &[&ChannelRealization],
    budget: &PowerBudget,
    coords: usize,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    use rispls::metrics::{loss_from_terms, ObjectiveConfig};
    use rispls::numerics::ParamBinder;
    let obj = ObjectiveConfig {
        gamma: 0.1,
        p_c: budget.p_c,
    };
    let loss = |m: &HgnnModel, track: bool| -> (f64, Option<ParamBinder>) {
        let binder = if track { ParamBinder::new(&m.params) } else { ParamBinder::frozen(&m.params) };
        let out = m.forward(&binder, chs, budget).unwrap();
        let l = loss_from_terms(&out.terms, &obj).unwrap();
        if track {
            l.backward().unwrap();
            (l.item(), Some(binder))
        } else {
            (l.item(), None)
        }
    };
    let (_, binder) = loss(model, true);
    let grads = binder.unwrap().leaf_grads();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut analytic = Vec::with_capacity(coords);
    let mut numeric = Vec::with_capacity(coords);
    for _ in 0..coords {
        let name = &names[rng.random_range(0..names.len())];
        let len = model.params.get(name).unwrap().value.len();
        let i = rng.random_range(0..len);
        analytic.push(grads[name][i]);
        let x0 = model.params.get(name).unwrap().value[i];
        let mut probe = model.clone();
        let eval = |probe: &mut HgnnModel, x: f64| {
            let p = probe.params.get_mut(name).unwrap();
            let mut v = p.value.to_vec();
            v[i] = x;
            p.value = std::sync::Arc::new(v);
            loss(probe, false).0
        };
        let h = 1e-6;
        let up = eval(&mut probe, x0 + h);
        let down = eval(&mut probe, x0 - h);
        numeric.push((up - down) / (2.0 * h));
    }
    (analytic, numeric)
}

/// A two-type graph of 2 + 3 nodes with a random non-empty bipartite edge
/// set, its raw features and the edge features keyed by `(a row, b row)`.
pub struct AttnCase {
    pub graph: rispls::hetgraph::HeteroGraph,
    pub feats: [Vec<Vec<f64>>; 2],
    pub edges: std::collections::HashMap<(usize, usize), Vec<f64>>,
}

pub const ATTN_IN: usize = 3;
pub const ATTN_EDGE: usize = 2;

fn uniform_rows(rng: &mut impl Rng, n: usize, w: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn random_attn_case(rng: &mut impl Rng) -> AttnCase {
    use rispls::hetgraph::{EdgeSet, HeteroGraph, NodeSet};
    let feats = [uniform_rows(rng, 2, ATTN_IN), uniform_rows(rng, 3, ATTN_IN)];
    let mut pairs = Vec::new();
    while pairs.is_empty() {
        pairs = (0..2)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|_| rng.random_bool(0.6))
            .collect();
    }
    let y = uniform_rows(rng, pairs.len(), ATTN_EDGE);
    let edges = pairs.iter().cloned().zip(y.iter().cloned()).collect();
    let tensor = |r: &Vec<Vec<f64>>, w: usize| Tensor::constant(r.concat(), &[r.len(), w]).unwrap();
    let graph = HeteroGraph {
        batch: 1,
        node_sets: vec![
            NodeSet {
                name: "a",
                per_sample: 2,
                features: tensor(&feats[0], ATTN_IN),
            },
            NodeSet {
                name: "b",
                per_sample: 3,
                features: tensor(&feats[1], ATTN_IN),
            },
        ],
        edge_sets: vec![EdgeSet {
            name: "ab",
            a: 0,
            b: 1,
            pairs,
            features: Some(tensor(&y, ATTN_EDGE)),
            directed: false,
        }],
    };
    AttnCase { graph, feats, edges }
}

impl AttnCase {
    pub fn features(&self) -> [Tensor; 2] {
        [self.graph.node_sets[0].features.clone(), self.graph.node_sets[1].features.clone()]
    }
}

/// Operator weights stored under the prefix `op`.
pub struct AttnWeights {
    pub params: rispls::numerics::ModelParams,
    pub spec: rispls::attention::AttentionSpec,
}

impl AttnWeights {
    pub fn new(edge_dim: Option<usize>, rng: &mut impl Rng) -> Self {
        let spec = rispls::attention::AttentionSpec {
            in_dim: ATTN_IN,
            edge_dim,
            heads: 3,
            head_dim: 2,
        };
        let mut params = rispls::numerics::ModelParams::new();
        spec.init(&mut params, "op", rng).unwrap();
        AttnWeights { params, spec }
    }

    pub fn bound(&self) -> rispls::attention::AttentionWeights {
        use rispls::numerics::ParamBinder;
        rispls::attention::AttentionWeights::bind(&ParamBinder::frozen(&self.params), "op", self.spec).unwrap()
    }

    fn raw(&self, name: &str) -> &[f64] {
        &self.params.get(&format!("op.{name}")).unwrap().value
    }

    pub fn oracle(&self) -> AttnOracleWeights<'_> {
        AttnOracleWeights {
            w_s: self.raw("w_s"),
            w_n: self.raw("w_n"),
            w_e: self.spec.edge_dim.map(|_| self.raw("w_e")),
            a: self.raw("a"),
            heads: self.spec.heads,
            head_dim: self.spec.head_dim,
        }
    }
}

/// Worst deviations of one attention call from the scalar oracle.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnErrors {
    /// Max `|got - want| / (1 + |want|)` over output entries.
    pub output: f64,
    pub alpha: f64,
    /// Max `|sum_j alpha_ij - 1|` over non-isolated targets and heads.
    pub row_sum: f64,
}

impl AttnErrors {
    pub fn merge(self, o: AttnErrors) -> AttnErrors {
        AttnErrors {
            output: self.output.max(o.output),
            alpha: self.alpha.max(o.alpha),
            row_sum: self.row_sum.max(o.row_sum),
        }
    }
}

type NeighborList = Vec<((usize, usize), Option<Vec<f64>>)>;

/// Compares one operator call against the oracle. `neighbors(t, i)` lists
/// the in-neighbors of target `(t, i)` as `((type, row), edge features)`.
pub fn attention_errors(
    view: &rispls::hetgraph::GraphView,
    out: &rispls::attention::AttentionOutput,
    case: &AttnCase,
    w: &AttnWeights,
    self_term: bool,
    neighbors: impl Fn(usize, usize) -> NeighborList,
) -> AttnErrors {
    let heads = w.spec.heads;
    let width = w.spec.out_dim();
    let arcs = view.typed_arcs();
    let mut alpha = std::collections::HashMap::new();
    for (a, (src, dst)) in arcs.iter().enumerate() {
        for h in 0..heads {
            alpha.insert((*src, *dst, h), out.alpha.values()[a * heads + h]);
        }
    }
    let mut e = AttnErrors::default();
    for (pos, &t) in view.target_types.iter().enumerate() {
        for i in 0..view.target_counts[pos] {
            let nb = neighbors(t, i);
            let list: Vec<Neighbor> = nb
                .iter()
                .map(|((st, sr), y)| Neighbor {
                    x: case.feats[*st][*sr].clone(),
                    y: y.clone(),
                })
                .collect();
            let (want, want_alpha) = attention_target(&case.feats[t][i], &list, &w.oracle(), self_term);
            let got = &out.outputs[pos].values()[i * width..(i + 1) * width];
            for (g, x) in got.iter().zip(&want) {
                e.output = e.output.max((g - x).abs() / (1.0 + x.abs()));
            }
            for h in 0..heads {
                let mut sum = 0.0;
                for (j, (src, _)) in nb.iter().enumerate() {
                    let g = alpha[&(*src, (t, i), h)];
                    e.alpha = e.alpha.max((g - want_alpha[j][h]).abs());
                    sum += g;
                }
                if !nb.is_empty() {
                    e.row_sum = e.row_sum.max((sum - 1.0).abs());
                }
            }
        }
    }
    e
}

/// Both operators on one random 5-node case: the edge-based one over the
/// directed and bidirectional bipartite views, the edge-free one over the
/// complete and per-type complete views.
pub fn attention_case_errors(seed: u64) -> AttnErrors {
    use rand::SeedableRng;
    use rispls::attention::{att, eatt};
    use rispls::hetgraph::{psi_bi, psi_fc, psi_fc_each, psi_uni};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let case = random_attn_case(&mut rng);
    let feats = case.features();
    let (a, b) = (0, 1);

    let w = AttnWeights::new(Some(ATTN_EDGE), &mut rng);
    let uni = psi_uni(&case.graph, a, b).unwrap().with_zero_fill();
    let out = eatt(&uni, &w.bound(), &feats).unwrap();
    let mut e = attention_errors(&uni, &out, &case, &w, true, |_, j| {
        (0..2).filter_map(|i| case.edges.get(&(i, j)).map(|y| ((a, i), Some(y.clone())))).collect()
    });
    let bi = psi_bi(&case.graph, a, b).unwrap().with_zero_fill();
    let out = eatt(&bi, &w.bound(), &feats).unwrap();
    e = e.merge(attention_errors(&bi, &out, &case, &w, true, |t, r| {
        if t == a {
            (0..3).filter_map(|j| case.edges.get(&(r, j)).map(|y| ((b, j), Some(y.clone())))).collect()
        } else {
            (0..2).filter_map(|i| case.edges.get(&(i, r)).map(|y| ((a, i), Some(y.clone())))).collect()
        }
    }));

    let w = AttnWeights::new(None, &mut rng);
    let all: Vec<(usize, usize)> = (0..2).map(|i| (a, i)).chain((0..3).map(|j| (b, j))).collect();
    let fc = psi_fc(&case.graph, &[a, b]).unwrap();
    let out = att(&fc, &w.bound(), &feats).unwrap();
    e = e.merge(attention_errors(&fc, &out, &case, &w, false, |t, r| {
        all.iter().filter(|n| **n != (t, r)).map(|n| (*n, None)).collect()
    }));
    let each = psi_fc_each(&case.graph, &[a, b]).unwrap();
    let out = att(&each, &w.bound(), &feats).unwrap();
    e.merge(attention_errors(&each, &out, &case, &w, false, |t, r| {
        all.iter().filter(|n| n.0 == t && n.1 != r).map(|n| (*n, None)).collect()
    }))
}

/// Analytic directional derivative of the training loss along a random unit
/// direction through every parameter at once, and its central difference.
pub fn model_directional_gradient(
    model: &HgnnModel,
    chs: &[&ChannelRealization],
    budget: &PowerBudget,
    h: f64,
    rng: &mut impl Rng,
) -> (f64, f64) {
    use rand_distr::StandardNormal;
    use rispls::metrics::{loss_from_terms, ObjectiveConfig};
    use rispls::numerics::ParamBinder;
    let obj = ObjectiveConfig {
        gamma: 0.1,
        p_c: budget.p_c,
    };
    let binder = ParamBinder::new(&model.params);
    let out = model.forward(&binder, chs, budget).unwrap();
    loss_from_terms(&out.terms, &obj).unwrap().backward().unwrap();
    let grads = binder.leaf_grads();
    let mut dirs: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .map(|(n, p)| (n.clone(), (0..p.value.len()).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let norm = dirs.iter().flat_map(|(_, v)| v).map(|x| x * x).sum::<f64>().sqrt();
    dirs.iter_mut().for_each(|(_, v)| v.iter_mut().for_each(|x| *x /= norm));
    let analytic: f64 = dirs
        .iter()
        .map(|(n, v)| grads[n].iter().zip(v).map(|(g, d)| g * d).sum::<f64>())
        .sum();
    let shifted = |s: f64| {
        let mut probe = model.clone();
        for (n, v) in &dirs {
            let q = probe.params.get_mut(n).unwrap();
            q.value = std::sync::Arc::new(q.value.iter().zip(v).map(|(x, d)| x + s * d).collect());
        }
        let b = ParamBinder::frozen(&probe.params);
        loss_from_terms(&probe.forward(&b, chs, budget).unwrap().terms, &obj).unwrap().item()
    };
    (analytic, (shifted(h) - shifted(-h)) / (2.0 * h))
}
