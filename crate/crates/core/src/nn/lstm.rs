//! LSTM cell, sequence unrolling with backpropagation through time, and the
//! bidirectional wrapper.

use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::nn::tensor::{axpy, Mat, Tensor};

/// Gate weights act on the concatenation `[h_{t-1}, x_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub hidden: usize,
    pub input: usize,
    pub w_f: Mat,
    pub w_i: Mat,
    pub w_c: Mat,
    pub w_o: Mat,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let m = || Mat::zeros(hidden, hidden + input);
        Self {
            hidden,
            input,
            w_f: m(),
            w_i: m(),
            w_c: m(),
            w_o: m(),
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        }
    }

    fn check(&self) -> Result<()> {
        let cols = self.hidden + self.input;
        for w in [&self.w_f, &self.w_i, &self.w_c, &self.w_o] {
            if w.rows != self.hidden || w.cols != cols {
                return Err(Error::Shape(format!(
                    "gate matrix is {}x{}, expected {}x{cols}",
                    w.rows, w.cols, self.hidden
                )));
            }
        }
        for b in [&self.b_f, &self.b_i, &self.b_c, &self.b_o] {
            if b.len() != self.hidden {
                return Err(Error::Shape(format!(
                    "gate bias has {} entries, expected {}",
                    b.len(),
                    self.hidden
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.w_f.data,
            &self.w_i.data,
            &self.w_c.data,
            &self.w_o.data,
            &self.b_f,
            &self.b_i,
            &self.b_c,
            &self.b_o,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.w_f.data,
            &mut self.w_i.data,
            &mut self.w_c.data,
            &mut self.w_o.data,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }
}

/// One cell update. Returns `(h_t, C_t)`.
pub fn lstm_step(
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check()?;
    if x_t.len() != p.input || h_prev.len() != p.hidden || c_prev.len() != p.hidden {
        return Err(Error::Shape(format!(
            "lstm step expects x={}, h=C={}; got x={}, h={}, C={}",
            p.input,
            p.hidden,
            x_t.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = h_prev.to_vec();
    z.extend_from_slice(x_t);
    let mut g = Gates::new(p.hidden);
    g.compute(p, &z);
    let mut c = vec![0.0; p.hidden];
    let mut h = vec![0.0; p.hidden];
    for k in 0..p.hidden {
        c[k] = g.f[k] * c_prev[k] + g.i[k] * g.c[k];
        h[k] = g.o[k] * c[k].tanh();
    }
    Ok((h, c))
}

struct Gates {
    f: Vec<f64>,
    i: Vec<f64>,
    c: Vec<f64>,
    o: Vec<f64>,
}

impl Gates {
    fn new(h: usize) -> Self {
        Self {
            f: vec![0.0; h],
            i: vec![0.0; h],
            c: vec![0.0; h],
            o: vec![0.0; h],
        }
    }

    fn compute(&mut self, p: &LstmParams, z: &[f64]) {
        p.w_f.matvec_bias(z, &p.b_f, &mut self.f);
        p.w_i.matvec_bias(z, &p.b_i, &mut self.i);
        p.w_c.matvec_bias(z, &p.b_c, &mut self.c);
        p.w_o.matvec_bias(z, &p.b_o, &mut self.o);
        for k in 0..self.f.len() {
            self.f[k] = sigmoid(self.f[k]);
            self.i[k] = sigmoid(self.i[k]);
            self.c[k] = self.c[k].tanh();
            self.o[k] = sigmoid(self.o[k]);
        }
    }
}

/// Everything a sequence pass needs to run backward. All arrays are indexed
/// by processing step, not by original time.
#[derive(Debug, Clone)]
pub(crate) struct LstmTrace {
    pub steps: usize,
    pub reverse: bool,
    z: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmTrace {
    /// Hidden state after processing step `s`.
    pub fn h_at(&self, s: usize, hidden: usize) -> &[f64] {
        &self.h[s * hidden..(s + 1) * hidden]
    }
}

/// Original time index consumed at processing step `s`.
#[inline]
fn time_index(s: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - s
    } else {
        s
    }
}

/// Unrolls the cell over a row-major `steps x input` sequence starting from
/// zero state; `reverse` walks the sequence back to front.
pub(crate) fn run_sequence(p: &LstmParams, xs: &[f64], reverse: bool) -> LstmTrace {
    let (hd, inp) = (p.hidden, p.input);
    let steps = xs.len() / inp;
    let zc = hd + inp;
    let mut tr = LstmTrace {
        steps,
        reverse,
        z: vec![0.0; steps * zc],
        f: vec![0.0; steps * hd],
        i: vec![0.0; steps * hd],
        g: vec![0.0; steps * hd],
        o: vec![0.0; steps * hd],
        c: vec![0.0; steps * hd],
        tanh_c: vec![0.0; steps * hd],
        h: vec![0.0; steps * hd],
    };
    for s in 0..steps {
        let t = time_index(s, steps, reverse);
        let z = &mut tr.z[s * zc..(s + 1) * zc];
        if s > 0 {
            z[..hd].copy_from_slice(&tr.h[(s - 1) * hd..s * hd]);
        }
        z[hd..].copy_from_slice(&xs[t * inp..(t + 1) * inp]);
        let r = s * hd..(s + 1) * hd;
        p.w_f.matvec_bias(z, &p.b_f, &mut tr.f[r.clone()]);
        p.w_i.matvec_bias(z, &p.b_i, &mut tr.i[r.clone()]);
        p.w_c.matvec_bias(z, &p.b_c, &mut tr.g[r.clone()]);
        p.w_o.matvec_bias(z, &p.b_o, &mut tr.o[r.clone()]);
        for k in r {
            let f = sigmoid(tr.f[k]);
            let i = sigmoid(tr.i[k]);
            let g = tr.g[k].tanh();
            let o = sigmoid(tr.o[k]);
            let c_prev = if s > 0 { tr.c[k - hd] } else { 0.0 };
            let c = f * c_prev + i * g;
            let tc = c.tanh();
            tr.f[k] = f;
            tr.i[k] = i;
            tr.g[k] = g;
            tr.o[k] = o;
            tr.c[k] = c;
            tr.tanh_c[k] = tc;
            tr.h[k] = o * tc;
        }
    }
    tr
}

/// Backpropagation through time.
///
/// `dh` holds the loss gradient w.r.t. each step's output (processing order).
/// Parameter gradients are accumulated into `grads`; the input gradient is
/// accumulated into `dx` at original time positions.
pub(crate) fn backward_sequence(
    p: &LstmParams,
    tr: &LstmTrace,
    dh: &[f64],
    grads: &mut LstmParams,
    dx: &mut [f64],
) {
    let (hd, inp) = (p.hidden, p.input);
    let zc = hd + inp;
    let steps = tr.steps;
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut da = [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]];
    let mut dz = vec![0.0; zc];
    for s in (0..steps).rev() {
        let r = s * hd;
        for k in 0..hd {
            let dh_k = dh[r + k] + dh_next[k];
            let o = tr.o[r + k];
            let tc = tr.tanh_c[r + k];
            let dc = dc_next[k] + dh_k * o * (1.0 - tc * tc);
            let c_prev = if s > 0 { tr.c[r - hd + k] } else { 0.0 };
            let (f, i, g) = (tr.f[r + k], tr.i[r + k], tr.g[r + k]);
            da[0][k] = dc * c_prev * f * (1.0 - f);
            da[1][k] = dc * g * i * (1.0 - i);
            da[2][k] = dc * i * (1.0 - g * g);
            da[3][k] = dh_k * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let z = &tr.z[s * zc..(s + 1) * zc];
        dz.iter_mut().for_each(|v| *v = 0.0);
        let gw = [
            (&p.w_f, &mut grads.w_f, &mut grads.b_f),
            (&p.w_i, &mut grads.w_i, &mut grads.b_i),
            (&p.w_c, &mut grads.w_c, &mut grads.b_c),
            (&p.w_o, &mut grads.w_o, &mut grads.b_o),
        ];
        for (gate, (w, dw, db)) in gw.into_iter().enumerate() {
            for k in 0..hd {
                let a = da[gate][k];
                if a == 0.0 {
                    continue;
                }
                db[k] += a;
                axpy(a, z, dw.row_mut(k));
                axpy(a, w.row(k), &mut dz);
            }
        }
        dh_next.copy_from_slice(&dz[..hd]);
        let t = time_index(s, steps, tr.reverse);
        for (d, v) in dx[t * inp..(t + 1) * inp].iter_mut().zip(&dz[hd..]) {
            *d += v;
        }
    }
}

/// Forward LSTM plus time-reversed LSTM, outputs concatenated per time step
/// (`steps x 2 * hidden`). The backward half at time `t` is the reverse
/// cell's state after it has consumed `x_t`.
pub fn bilstm_forward(x: &Tensor, fwd: &LstmParams, bwd: &LstmParams) -> Result<Tensor> {
    fwd.check()?;
    bwd.check()?;
    let (steps, inp) = x.as_matrix();
    if steps == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if inp != fwd.input || inp != bwd.input || fwd.hidden != bwd.hidden {
        return Err(Error::Shape(format!(
            "sequence has {inp} features; lstm inputs are {} and {}",
            fwd.input, bwd.input
        )));
    }
    let hd = fwd.hidden;
    let tf = run_sequence(fwd, x.data(), false);
    let tb = run_sequence(bwd, x.data(), true);
    let mut out = vec![0.0; steps * 2 * hd];
    for t in 0..steps {
        let row = &mut out[t * 2 * hd..(t + 1) * 2 * hd];
        row[..hd].copy_from_slice(tf.h_at(t, hd));
        row[hd..].copy_from_slice(tb.h_at(steps - 1 - t, hd));
    }
    Tensor::new(vec![steps, 2 * hd], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        let mut p = LstmParams::zeros(input, hidden);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        p
    }

    #[test]
    fn zero_params_step() {
        let p = LstmParams::zeros(3, 2);
        let (h, c) = lstm_step(&[0.4, -1.0, 2.0], &[0.1, 0.2], &[0.0, 0.0], &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);

        let cp = 1.3;
        let (h, c) = lstm_step(&[0.4, -1.0, 2.0], &[0.1, 0.2], &[cp, cp], &p).unwrap();
        for k in 0..2 {
            assert!((c[k] - 0.5 * cp).abs() < 1e-15);
            assert!((h[k] - 0.5 * (0.5 * cp).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let p = LstmParams::zeros(3, 2);
        assert!(lstm_step(&[0.0; 2], &[0.0; 2], &[0.0; 2], &p).is_err());
        assert!(lstm_step(&[0.0; 3], &[0.0; 3], &[0.0; 2], &p).is_err());
    }

    /// Straight transcription of the six cell equations with separate
    /// matrix-vector products, independent of the fused implementation.
    fn scripted_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
        let concat: Vec<f64> = h.iter().chain(x).copied().collect();
        let affine = |w: &Mat, b: &[f64], k: usize| -> f64 {
            (0..concat.len())
                .map(|j| w.data[k * w.cols + j] * concat[j])
                .sum::<f64>()
                + b[k]
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_out = vec![];
        let mut c_out = vec![];
        for k in 0..p.hidden {
            let f = sig(affine(&p.w_f, &p.b_f, k));
            let i = sig(affine(&p.w_i, &p.b_i, k));
            let cand = affine(&p.w_c, &p.b_c, k).tanh();
            let ct = f * c[k] + i * cand;
            let o = sig(affine(&p.w_o, &p.b_o, k));
            h_out.push(o * ct.tanh());
            c_out.push(ct);
        }
        (h_out, c_out)
    }

    #[test]
    fn step_matches_scripted_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_params(5, 4, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (h1, c1) = lstm_step(&x, &h, &c, &p).unwrap();
            let (h2, c2) = scripted_step(&x, &h, &c, &p);
            for k in 0..4 {
                assert!((h1[k] - h2[k]).abs() < 1e-12);
                assert!((c1[k] - c2[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequence_matches_repeated_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(2, 3, &mut rng);
        let xs: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        for reverse in [false, true] {
            let tr = run_sequence(&p, &xs, reverse);
            let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
            for s in 0..7 {
                let t = if reverse { 6 - s } else { s };
                (h, c) = lstm_step(&xs[t * 2..t * 2 + 2], &h, &c, &p).unwrap();
                for k in 0..3 {
                    assert!((tr.h_at(s, 3)[k] - h[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn bilstm_shapes_and_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_params(3, 4, &mut rng);
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let y = bilstm_forward(&x, &f, &f).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
        assert_eq!(&y.data()[..4], &y.data()[4..]);

        let b = random_params(3, 4, &mut rng);
        let x = Tensor::new(vec![6, 3], (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(bilstm_forward(&x, &f, &b).unwrap().shape(), &[6, 8]);
        assert!(bilstm_forward(&Tensor::new(vec![0, 3], vec![]).unwrap(), &f, &b).is_err());
    }

    #[test]
    fn bilstm_palindrome_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(2, 3, &mut rng);
        let half: Vec<[f64; 2]> = (0..4)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let seq: Vec<[f64; 2]> = half.iter().chain(half.iter().rev()).copied().collect();
        let x = Tensor::new(vec![8, 2], seq.concat()).unwrap();
        let y = bilstm_forward(&x, &p, &p).unwrap();
        let row = |t: usize| &y.data()[t * 6..(t + 1) * 6];
        for t in 0..8 {
            let (a, b) = (row(t), row(7 - t));
            for k in 0..3 {
                assert!((a[k] - b[k + 3]).abs() < 1e-14);
                assert!((a[k + 3] - b[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (inp, hd, steps) = (2, 3, 5);
        for reverse in [false, true] {
            let mut p = random_params(inp, hd, &mut rng);
            let mut xs: Vec<f64> = (0..steps * inp)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let w: Vec<f64> = (0..steps * hd)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let loss = |p: &LstmParams, xs: &[f64]| {
                let tr = run_sequence(p, xs, reverse);
                tr.h.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let tr = run_sequence(&p, &xs, reverse);
            let mut grads = LstmParams::zeros(inp, hd);
            let mut dx = vec![0.0; xs.len()];
            backward_sequence(&p, &tr, &w, &mut grads, &mut dx);
            let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
            let h = 1e-6;
            for (k, g) in analytic.iter().enumerate() {
                for (j, &a) in g.iter().enumerate() {
                    let orig = p.tensors()[k][j];
                    p.tensors_mut()[k][j] = orig + h;
                    let lp = loss(&p, &xs);
                    p.tensors_mut()[k][j] = orig - h;
                    let lm = loss(&p, &xs);
                    p.tensors_mut()[k][j] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                    assert!(
                        rel < 1e-5,
                        "tensor {k}[{j}] reverse={reverse}: {a} vs {num}"
                    );
                }
            }
            for j in 0..xs.len() {
                let orig = xs[j];
                xs[j] = orig + h;
                let lp = loss(&p, &xs);
                xs[j] = orig - h;
                let lm = loss(&p, &xs);
                xs[j] = orig;
                let num = (lp - lm) / (2.0 * h);
                let rel = (dx[j] - num).abs() / dx[j].abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5, "dx[{j}] reverse={reverse}: {} vs {num}", dx[j]);
            }
        }
    }
}
