//! Central finite-difference gradient checking at 64-bit precision, plus a
//! catalogue of randomized instances for every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{highway, lstm_step};
use super::{Result, Tape, Tensor, Var};
use crate::rng::StreamRng;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A concrete function of some tensors to be differentiated.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl Instance {
    pub fn new(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Instance {
            inputs,
            build: Box::new(build),
        }
    }
}

pub struct OpCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub eps: f64,
    generate: fn(&mut StreamRng) -> Instance,
}

impl OpCase {
    pub fn instance(&self, rng: &mut StreamRng) -> Instance {
        (self.generate)(rng)
    }

    /// Largest per-input relative error over one random instance.
    pub fn check_once(&self, rng: &mut StreamRng) -> Result<f64> {
        check(&self.instance(rng), self.eps)
    }
}

/// `||a - n|| / max(||a||, ||n||, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn scalar_loss(inst: &Instance, inputs: &[Tensor<f64>], tape: &mut Tape<f64>, trainable: bool) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = (inst.build)(tape, &vars)?;
    if tape.value(out).len() == 1 {
        return Ok((out, vars));
    }
    // fixed random projection so every output element contributes
    let shape = tape.value(out).shape().to_vec();
    let mut prng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n: usize = shape.iter().product();
    let proj: Vec<f64> = (0..n).map(|_| prng.gen_range(-1.0..1.0)).collect();
    let p = tape.constant(Tensor::new(shape, proj)?);
    let m = tape.mul(out, p)?;
    Ok((tape.sum_all(m), vars))
}

fn eval(inst: &Instance, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = scalar_loss(inst, inputs, &mut tape, false)?;
    Ok(tape.value(loss).data()[0])
}

/// Analytic gradients of the instance with respect to each input.
pub fn analytic_grads(inst: &Instance) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (loss, vars) = scalar_loss(inst, &inst.inputs, &mut tape, true)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(&inst.inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

/// Central differences `(f(x + eps) - f(x - eps)) / 2 eps` per input element.
pub fn numeric_grads(inst: &Instance, eps: f64) -> Result<Vec<Vec<f64>>> {
    let mut inputs = inst.inputs.clone();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + eps;
            let lp = eval(inst, &inputs)?;
            inputs[k].data_mut()[j] = orig - eps;
            let lm = eval(inst, &inputs)?;
            inputs[k].data_mut()[j] = orig;
            *gj = (lp - lm) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn check(inst: &Instance, eps: f64) -> Result<f64> {
    let a = analytic_grads(inst)?;
    let n = numeric_grads(inst, eps)?;
    Ok(a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

fn rand_t(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Like `rand_t` but keeps every entry at least `margin` away from zero.
fn rand_away_from_zero(rng: &mut StreamRng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = rand_t(rng, shape, 1.0);
    for v in t.data_mut() {
        while v.abs() < margin {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    t
}

fn dim(rng: &mut StreamRng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn binary(f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    move |t, v| f(t, v[0], v[1])
}

/// Smallest gap between the best and runner-up window response over all
/// (segment, feature) pairs; near-ties make max-pooling non-differentiable.
fn conv_margin(input: &Tensor<f64>, kernel: &Tensor<f64>, width: usize, segments: &[(usize, usize)]) -> f64 {
    let d = input.cols();
    let f = kernel.cols();
    let mut margin = f64::INFINITY;
    for &(start, len) in segments {
        for j in 0..f {
            let mut vals: Vec<f64> = (0..=len - width)
                .map(|p| {
                    (0..width * d)
                        .map(|q| input.data()[(start + p) * d + q] * kernel.data()[q * f + j])
                        .sum()
                })
                .collect();
            vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            if vals.len() > 1 {
                margin = margin.min(vals[0] - vals[1]);
            }
        }
    }
    margin
}

fn gen_matmul(rng: &mut StreamRng) -> Instance {
    let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    Instance::new(vec![rand_t(rng, &[m, k], 1.0), rand_t(rng, &[k, n], 1.0)], binary(Tape::matmul))
}

fn gen_binary(rng: &mut StreamRng, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    Instance::new(vec![rand_t(rng, &[m, n], 1.0), rand_t(rng, &[m, n], 1.0)], binary(f))
}

fn gen_unary(rng: &mut StreamRng, f: fn(&mut Tape<f64>, Var) -> Var) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    Instance::new(vec![rand_away_from_zero(rng, &[m, n], 1e-3)], move |t, v| Ok(f(t, v[0])))
}

fn gen_add_bias(rng: &mut StreamRng) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    Instance::new(vec![rand_t(rng, &[m, n], 1.0), rand_t(rng, &[n], 1.0)], binary(Tape::add_bias))
}

fn gen_scale(rng: &mut StreamRng) -> Instance {
    let f = rng.gen_range(-2.0..2.0);
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    Instance::new(vec![rand_t(rng, &[m, n], 1.0)], move |t, v| Ok(t.scale(v[0], f)))
}

fn gen_concat_cols(rng: &mut StreamRng) -> Instance {
    let m = dim(rng, 1, 4);
    let parts = dim(rng, 1, 3);
    let inputs = (0..parts).map(|_| {
        let w = dim(rng, 1, 4);
        rand_t(rng, &[m, w], 1.0)
    });
    Instance::new(inputs.collect(), |t, v| t.concat_cols(v))
}

fn gen_slice_cols(rng: &mut StreamRng) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 6));
    let start = rng.gen_range(0..n);
    let len = rng.gen_range(1..=n - start);
    Instance::new(vec![rand_t(rng, &[m, n], 1.0)], move |t, v| t.slice_cols(v[0], start, len))
}

fn gen_concat_rows(rng: &mut StreamRng) -> Instance {
    let n = dim(rng, 1, 4);
    let parts = dim(rng, 1, 3);
    let inputs = (0..parts).map(|_| {
        let h = dim(rng, 1, 3);
        rand_t(rng, &[h, n], 1.0)
    });
    Instance::new(inputs.collect(), |t, v| t.concat_rows(v))
}

fn gen_slice_rows(rng: &mut StreamRng) -> Instance {
    let (m, n) = (dim(rng, 2, 6), dim(rng, 1, 4));
    let start = rng.gen_range(0..m);
    let len = rng.gen_range(1..=m - start);
    Instance::new(vec![rand_t(rng, &[m, n], 1.0)], move |t, v| t.slice_rows(v[0], start, len))
}

fn gen_gather_rows(rng: &mut StreamRng) -> Instance {
    let (r, c) = (dim(rng, 2, 6), dim(rng, 1, 4));
    let n = dim(rng, 1, 8);
    // repeats exercise scatter-add accumulation
    let index: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
    Instance::new(vec![rand_t(rng, &[r, c], 1.0)], move |t, v| t.gather_rows(v[0], &index))
}

fn gen_softmax_rows(rng: &mut StreamRng) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 6));
    Instance::new(vec![rand_t(rng, &[m, n], 2.0)], |t, v| Ok(t.softmax_rows(v[0])))
}

fn gen_xent(rng: &mut StreamRng) -> Instance {
    let (b, c) = (4, 7);
    let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let weighted = rng.gen_bool(0.5);
    let weights: Vec<f64> = (0..b).map(|i| if i == 0 || rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
    Instance::new(vec![rand_t(rng, &[b, c], 3.0)], move |t, v| {
        t.softmax_cross_entropy(v[0], &targets, weighted.then_some(weights.as_slice()))
    })
}

fn gen_lstm_cell(rng: &mut StreamRng) -> Instance {
    let (b, h) = (dim(rng, 1, 3), dim(rng, 1, 4));
    Instance::new(vec![rand_t(rng, &[b, 4 * h], 2.0), rand_t(rng, &[b, h], 1.0)], binary(Tape::lstm_cell))
}

fn gen_lstm_hidden(rng: &mut StreamRng) -> Instance {
    let (b, h) = (dim(rng, 1, 3), dim(rng, 1, 4));
    Instance::new(vec![rand_t(rng, &[b, 4 * h], 2.0), rand_t(rng, &[b, h], 1.5)], binary(Tape::lstm_hidden))
}

fn gen_lstm_bptt(rng: &mut StreamRng) -> Instance {
    let (b, din, h) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let inputs = vec![
        rand_t(rng, &[din, 4 * h], 0.8),
        rand_t(rng, &[h, 4 * h], 0.8),
        rand_t(rng, &[4 * h], 0.5),
        rand_t(rng, &[b, din], 1.0),
        rand_t(rng, &[b, din], 1.0),
        rand_t(rng, &[b, din], 1.0),
        rand_t(rng, &[b, h], 0.5),
        rand_t(rng, &[b, h], 0.5),
    ];
    Instance::new(inputs, |t, v| {
        let (mut hs, mut c) = (v[6], v[7]);
        let mut outs = Vec::new();
        for &x in &v[3..6] {
            let (h2, c2) = lstm_step(t, x, hs, c, v[0], v[1], v[2])?;
            hs = h2;
            c = c2;
            outs.push(h2);
        }
        outs.push(c);
        t.concat_rows(&outs)
    })
}

fn gen_conv(rng: &mut StreamRng) -> Instance {
    loop {
        let d = dim(rng, 1, 3);
        let f = dim(rng, 1, 3);
        let width = dim(rng, 1, 3);
        let nseg = dim(rng, 1, 3);
        let mut segments = Vec::new();
        let mut rows = 0;
        for _ in 0..nseg {
            let len = rng.gen_range(width..=width + 3);
            segments.push((rows, len));
            rows += len;
        }
        let input = rand_t(rng, &[rows, d], 1.0);
        let kernel = rand_t(rng, &[width * d, f], 1.0);
        let bias = rand_t(rng, &[f], 0.5);
        if conv_margin(&input, &kernel, width, &segments) < 1e-3 {
            continue;
        }
        return Instance::new(vec![input, kernel, bias], move |t, v| t.conv_maxpool(v[0], v[1], v[2], width, &segments));
    }
}

fn gen_highway(rng: &mut StreamRng) -> Instance {
    loop {
        let (b, d) = (dim(rng, 1, 3), dim(rng, 1, 4));
        let x = rand_t(rng, &[b, d], 1.0);
        let wt = rand_t(rng, &[d, d], 1.0);
        let bt = rand_t(rng, &[d], 1.0);
        let wg = rand_t(rng, &[d, d], 1.0);
        let bg = rand_t(rng, &[d], 1.0);
        // keep the relu pre-activations off the kink
        let near_kink = (0..b).any(|r| {
            (0..d).any(|j| {
                let s: f64 = (0..d).map(|i| x.get(r, i) * wg.get(i, j)).sum::<f64>() + bg.data()[j];
                s.abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        return Instance::new(vec![x, wt, bt, wg, bg], |t, v| highway(t, v[0], v[1], v[2], v[3], v[4]));
    }
}

fn gen_dropout(rng: &mut StreamRng) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 6));
    let seed: u64 = rng.gen();
    Instance::new(vec![rand_t(rng, &[m, n], 1.0)], move |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Ok(t.dropout(v[0], 0.3, &mut r))
    })
}

fn gen_stack_steps(rng: &mut StreamRng) -> Instance {
    let (b, d, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    Instance::new((0..n).map(|_| rand_t(rng, &[b, d], 1.0)).collect(), |t, v| t.stack_steps(v))
}

fn gen_attn_scores(rng: &mut StreamRng) -> Instance {
    let (b, n, d, steps) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3));
    Instance::new(
        vec![rand_t(rng, &[b * steps, d], 1.0), rand_t(rng, &[b, n, d], 1.0)],
        binary(Tape::attn_scores),
    )
}

fn gen_attn_context(rng: &mut StreamRng) -> Instance {
    let (b, n, d, steps) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3));
    Instance::new(
        vec![rand_t(rng, &[b * steps, n], 1.0), rand_t(rng, &[b, n, d], 1.0)],
        binary(Tape::attn_context),
    )
}

fn gen_global_attention(rng: &mut StreamRng) -> Instance {
    let (b, n, d, steps) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3));
    let inputs = vec![
        rand_t(rng, &[b * steps, d], 1.0),
        rand_t(rng, &[b, n, d], 1.0),
        rand_t(rng, &[d, d], 1.0),
        rand_t(rng, &[2 * d, d], 1.0),
    ];
    Instance::new(inputs, |t, v| {
        let q = t.matmul(v[0], v[2])?;
        let s = t.attn_scores(q, v[1])?;
        let a = t.softmax_rows(s);
        let ctx = t.attn_context(a, v[1])?;
        let cat = t.concat_cols(&[ctx, v[0]])?;
        let pre = t.matmul(cat, v[3])?;
        Ok(t.tanh(pre))
    })
}

fn gen_sum_all(rng: &mut StreamRng) -> Instance {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    Instance::new(vec![rand_t(rng, &[m, n], 1.0)], |t, v| Ok(t.sum_all(v[0])))
}

macro_rules! case {
    ($name:expr, $tol:expr, $gen:expr) => {
        OpCase {
            name: $name,
            tolerance: $tol,
            eps: 1e-5,
            generate: $gen,
        }
    };
}

/// Every differentiable operation with its tolerance.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("matmul", 1e-6, gen_matmul),
        case!("add", 1e-4, |r| gen_binary(r, Tape::add)),
        case!("sub", 1e-4, |r| gen_binary(r, Tape::sub)),
        case!("mul", 1e-4, |r| gen_binary(r, Tape::mul)),
        case!("add_bias", 1e-4, gen_add_bias),
        case!("scale", 1e-4, gen_scale),
        case!("sigmoid", 1e-4, |r| gen_unary(r, Tape::sigmoid)),
        case!("tanh", 1e-4, |r| gen_unary(r, Tape::tanh)),
        case!("relu", 1e-4, |r| gen_unary(r, Tape::relu)),
        case!("concat_cols", 1e-4, gen_concat_cols),
        case!("slice_cols", 1e-4, gen_slice_cols),
        case!("concat_rows", 1e-4, gen_concat_rows),
        case!("slice_rows", 1e-4, gen_slice_rows),
        case!("gather_rows", 1e-4, gen_gather_rows),
        case!("softmax_rows", 1e-4, gen_softmax_rows),
        case!("softmax_cross_entropy", 1e-6, gen_xent),
        case!("lstm_cell", 1e-4, gen_lstm_cell),
        case!("lstm_hidden", 1e-4, gen_lstm_hidden),
        case!("lstm_bptt_3_steps", 1e-4, gen_lstm_bptt),
        case!("conv_maxpool", 1e-4, gen_conv),
        case!("highway", 1e-5, gen_highway),
        case!("dropout", 1e-4, gen_dropout),
        case!("stack_steps", 1e-4, gen_stack_steps),
        case!("attn_scores", 1e-4, gen_attn_scores),
        case!("attn_context", 1e-4, gen_attn_context),
        case!("global_attention", 1e-4, gen_global_attention),
        case!("sum_all", 1e-4, gen_sum_all),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        // d/dx sum(x * x) = 2x; numeric oracle must disagree with a fake 3x
        let inst = Instance::new(vec![Tensor::from_f64(&[2], &[0.3, -0.4]).unwrap()], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum_all(sq))
        });
        let n = numeric_grads(&inst, 1e-5).unwrap();
        assert!((n[0][0] - 0.6).abs() < 1e-8);
        assert!(relative_error(&[0.9, -1.2], &n[0]) > 0.1);
    }

    #[test]
    fn every_op_passes_randomized_checks() {
        for case in op_cases() {
            let mut rng = stream(11, case.name);
            for i in 0..20 {
                let err = case.check_once(&mut rng).unwrap();
                assert!(err < case.tolerance, "{} instance {i}: rel err {err:e}", case.name);
            }
        }
    }
}
