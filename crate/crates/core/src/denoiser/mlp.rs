
use super::{Differentiable, EpsQuery, NoisePredictor, Tape};
use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, RngState};

/// Layer sizes of the MLP: `[x | time embedding | one-hot condition]` →
/// `hidden` → `hidden` → `data_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub data_dim: usize,
    pub time_dim: usize,
    pub num_conditions: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            data_dim: 2,
            time_dim: 16,
            num_conditions: 8,
            hidden: 128,
        }
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.num_conditions
    }

    /// Offsets of `[w1, b1, w2, b2, w3, b3]` in the flat parameter vector,
    /// plus the total length as the final entry. Weight matrices are stored
    /// input-major: `w[i * fan_out + o]`.
    pub fn offsets(&self) -> [usize; 7] {
        let (i, h, d) = (self.input_dim(), self.hidden, self.data_dim);
        let sizes = [i * h, h, h * h, h, h * d, d];
        let mut out = [0; 7];
        for k in 0..6 {
            out[k + 1] = out[k] + sizes[k];
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.offsets()[6]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.num_conditions == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        if self.time_dim % 2 != 0 || self.time_dim < 4 {
            return Err(Error::invalid("time embedding dimension must be even and at least 4"));
        }
        Ok(())
    }
}

/// Three-layer fully connected noise predictor with SiLU activations and a
/// linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    params: Vec<f64>,
}

impl Denoiser {
    /// All parameters zero; predicts zero noise everywhere.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: vec![0.0; arch.num_params()],
        })
    }

    /// Weights drawn `N(0, 1/fan_in)` in layout order, biases zero.
    pub fn init(arch: Architecture, rng: &mut RngState) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let off = arch.offsets();
        let fans = [arch.input_dim(), arch.hidden, arch.hidden];
        for (layer, fan_in) in fans.iter().enumerate() {
            let w = &mut model.params[off[2 * layer]..off[2 * layer + 1]];
            rng.fill_gaussian(w);
            let scale = 1.0 / (*fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(model)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::invalid(format!(
                "{} parameters for an architecture needing {}",
                params.len(),
                arch.num_params()
            )));
        }
        ensure_finite(&params, "denoiser parameters")?;
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn param_digest(&self) -> [u8; 32] {
        crate::numerics::digest_f64(&self.params)
    }

    fn build_input(&self, query: &EpsQuery<'_>) -> Vec<f64> {
        let a = &self.arch;
        let in_dim = a.input_dim();
        let half = a.time_dim / 2;
        let mut input = vec![0.0; query.rows() * in_dim];
        for (r, row) in input.chunks_exact_mut(in_dim).enumerate() {
            row[..a.data_dim].copy_from_slice(&query.x[r * a.data_dim..(r + 1) * a.data_dim]);
            let tau = query.t[r] as f64 / query.steps as f64;
            let emb = &mut row[a.data_dim..a.data_dim + a.time_dim];
            for k in 0..half {
                let angle = tau * time_frequency(k, half);
                emb[k] = angle.sin();
                emb[half + k] = angle.cos();
            }
            row[a.data_dim + a.time_dim + query.conds[r].index()] = 1.0;
        }
        input
    }

    fn run(&self, query: &EpsQuery<'_>) -> Result<[Vec<f64>; 4]> {
        query.validate(self.arch.data_dim, Some(self.arch.num_conditions))?;
        let a = &self.arch;
        let off = a.offsets();
        let p = &self.params;
        let rows = query.rows();
        let input = self.build_input(query);
        let z1 = affine(&input, rows, a.input_dim(), &p[off[0]..off[1]], &p[off[1]..off[2]]);
        let h1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
        let z2 = affine(&h1, rows, a.hidden, &p[off[2]..off[3]], &p[off[3]..off[4]]);
        Ok([input, z1, h1, z2])
    }

    fn head(&self, z2: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = &self.arch;
        let off = a.offsets();
        let p = &self.params;
        let h2: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
        let out = affine(&h2, rows, a.hidden, &p[off[4]..off[5]], &p[off[5]..off[6]]);
        ensure_finite(&out, "denoiser output")?;
        Ok((h2, out))
    }
}

/// Frequencies of the sinusoidal time embedding, geometric from 1 to 32.
fn time_frequency(k: usize, half: usize) -> f64 {
    if half <= 1 {
        return 1.0;
    }
    (5.0 * k as f64 / (half - 1) as f64).exp2()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// `input (rows x fan_in) * w (fan_in x fan_out) + b`.
fn affine(input: &[f64], rows: usize, fan_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let fan_out = b.len();
    let mut out = Vec::with_capacity(rows * fan_out);
    for r in 0..rows {
        let start = out.len();
        out.extend_from_slice(b);
        let acc = &mut out[start..];
        for (i, &v) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, &wv) in acc.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                *o += v * wv;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of an affine layer and, when
/// `grad_in` is given, writes the gradient with respect to its input.
fn affine_backward(
    input: &[f64],
    grad_out: &[f64],
    rows: usize,
    fan_in: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let fan_out = gb.len();
    for r in 0..rows {
        let go = &grad_out[r * fan_out..(r + 1) * fan_out];
        for (b, g) in gb.iter_mut().zip(go) {
            *b += g;
        }
        for (i, &v) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (acc, g) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(go) {
                *acc += v * g;
            }
        }
    }
    if let Some(gi) = grad_in {
        for r in 0..rows {
            let go = &grad_out[r * fan_out..(r + 1) * fan_out];
            for i in 0..fan_in {
                gi[r * fan_in + i] = w[i * fan_out..(i + 1) * fan_out]
                    .iter()
                    .zip(go)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, query: EpsQuery<'_>) -> Result<Vec<f64>> {
        let [_, _, _, z2] = self.run(&query)?;
        Ok(self.head(&z2, query.rows())?.1)
    }
}

impl Differentiable for Denoiser {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_recorded(&self, query: EpsQuery<'_>, tape: &mut Tape) -> Result<Vec<f64>> {
        let [input, z1, h1, z2] = self.run(&query)?;
        let (h2, out) = self.head(&z2, query.rows())?;
        tape.record(query.rows(), vec![input, z1, h1, z2, h2]);
        Ok(out)
    }

    fn backward(&self, tape: &Tape, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let bufs = tape.buffers()?;
        let a = &self.arch;
        let rows = tape.rows();
        if upstream.len() != rows * a.data_dim {
            return Err(Error::invalid(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                rows * a.data_dim
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer length differs from parameters"));
        }
        let [input, z1, h1, z2, h2] = [&bufs[0], &bufs[1], &bufs[2], &bufs[3], &bufs[4]];
        let off = a.offsets();
        let p = &self.params;
        let (g01, rest) = grad.split_at_mut(off[2]);
        let (g23, g45) = rest.split_at_mut(off[4] - off[2]);
        let (gw1, gb1) = g01.split_at_mut(off[1]);
        let (gw2, gb2) = g23.split_at_mut(off[3] - off[2]);
        let (gw3, gb3) = g45.split_at_mut(off[5] - off[4]);

        let mut g_h2 = vec![0.0; rows * a.hidden];
        affine_backward(h2, upstream, rows, a.hidden, &p[off[4]..off[5]], gw3, gb3, Some(&mut g_h2));
        let g_z2: Vec<f64> = g_h2.iter().zip(z2.iter()).map(|(g, &z)| g * silu_grad(z)).collect();
        let mut g_h1 = vec![0.0; rows * a.hidden];
        affine_backward(h1, &g_z2, rows, a.hidden, &p[off[2]..off[3]], gw2, gb2, Some(&mut g_h1));
        let g_z1: Vec<f64> = g_h1.iter().zip(z1.iter()).map(|(g, &z)| g * silu_grad(z)).collect();
        affine_backward(input, &g_z1, rows, a.input_dim(), &p[off[0]..off[1]], gw1, gb1, None);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Condition;
    use crate::numerics::{finite_diff_coords, relative_error, DenseArray};

    fn small_arch() -> Architecture {
        Architecture {
            data_dim: 2,
            time_dim: 4,
            num_conditions: 3,
            hidden: 7,
        }
    }

    fn query<'a>(x: &'a [f64], t: &'a [usize], conds: &'a [Condition]) -> EpsQuery<'a> {
        EpsQuery { x, t, steps: 10, conds }
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = Denoiser::zeros(Architecture::default()).unwrap();
        let x = DenseArray::from_vec(vec![3.0, -1.0]).unwrap();
        let out = m.eps(&x, 5, 80, Condition::unchecked(2)).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let m = Denoiser::zeros(Architecture::default()).unwrap();
        let x = DenseArray::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(m.eps(&x, 1, 80, Condition::unchecked(0)).is_err());
        let x = DenseArray::from_vec(vec![1.0, 2.0]).unwrap();
        assert!(m.eps(&x, 81, 80, Condition::unchecked(0)).is_err());
        assert!(m.eps(&x, 1, 80, Condition::unchecked(8)).is_err());
    }

    // Snapshot taken at first build; guards the embedding, layout, and init.
    #[test]
    fn seeded_forward_golden() {
        let m = Denoiser::init(Architecture::default(), &mut RngState::new(7)).unwrap();
        let x = DenseArray::from_vec(vec![0.5, -1.25]).unwrap();
        let out = m.eps(&x, 17, 80, Condition::unchecked(3)).unwrap();
        let golden = GOLDEN_FORWARD;
        for (o, g) in out.as_slice().iter().zip(golden) {
            assert!((o - g).abs() < 1e-12, "{:?}", out.as_slice());
        }
    }

    const GOLDEN_FORWARD: [f64; 2] = [3.715_355_884_602_364_9e-1, 3.499_704_445_634_728_2e-1];

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = Denoiser::init(small_arch(), &mut RngState::new(3)).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        let conds = [Condition::unchecked(0), Condition::unchecked(2)];
        let q = query(&x, &[1, 9], &conds);
        assert_eq!(m.predict(q).unwrap(), m.predict(q).unwrap());
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let m = Denoiser::zeros(small_arch()).unwrap();
        let mut g = vec![0.0; m.num_params()];
        let err = m.backward(&Tape::new(), &[0.0, 0.0], &mut g);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = Denoiser::init(small_arch(), &mut RngState::new(4)).unwrap();
        let mut tape = Tape::new();
        let x = [0.3, -0.7];
        m.forward_recorded(query(&x, &[4], &[Condition::unchecked(1)]), &mut tape)
            .unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&tape, &[0.0, 0.0], &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_bias_gradient_of_squared_output() {
        // d||out||^2 / d b3 = 2 * out because the head is linear.
        let m = Denoiser::init(small_arch(), &mut RngState::new(5)).unwrap();
        let mut tape = Tape::new();
        let x = [1.1, -0.4];
        let out = m
            .forward_recorded(query(&x, &[6], &[Condition::unchecked(2)]), &mut tape)
            .unwrap();
        let upstream: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&tape, &upstream, &mut g).unwrap();
        let off = small_arch().offsets();
        for (k, o) in out.iter().enumerate() {
            assert!((g[off[5] + k] - 2.0 * o).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = small_arch();
        let mut rng = RngState::new(11);
        let m = Denoiser::init(arch, &mut rng).unwrap();
        let x = rng.gaussian_vec(6);
        let t = [0, 3, 10];
        let conds = [Condition::unchecked(0), Condition::unchecked(1), Condition::unchecked(2)];
        let weights = rng.gaussian_vec(6);
        let objective = |params: &[f64]| -> Result<f64> {
            let mm = Denoiser::from_params(arch, params.to_vec())?;
            let out = mm.predict(query(&x, &t, &conds))?;
            Ok(out.iter().zip(&weights).map(|(o, w)| w * o * o).sum())
        };
        let mut tape = Tape::new();
        let out = m.forward_recorded(query(&x, &t, &conds), &mut tape).unwrap();
        let upstream: Vec<f64> = out.iter().zip(&weights).map(|(o, w)| 2.0 * w * o).collect();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&tape, &upstream, &mut g).unwrap();
        let coords: Vec<usize> = (0..20).map(|_| rng.below(m.num_params())).collect();
        let fd = finite_diff_coords(objective, m.params(), &coords, 1e-5).unwrap();
        for (k, &i) in coords.iter().enumerate() {
            let err = relative_error(g[i], fd[k], 1e-7);
            assert!(err < 1e-4, "coord {i}: analytic {} fd {} err {err}", g[i], fd[k]);
        }
    }

    #[test]
    fn digest_tracks_parameters() {
        let a = Denoiser::init(small_arch(), &mut RngState::new(1)).unwrap();
        let mut b = a.clone();
        assert_eq!(a.param_digest(), b.param_digest());
        b.params_mut()[0] += 1e-12;
        assert_ne!(a.param_digest(), b.param_digest());
    }
}
