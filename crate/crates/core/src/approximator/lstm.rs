//! Gated recurrent memory cell (input, forget, output gates and a tanh
//! candidate) unrolled over a scalar sequence, with backpropagation through
//! every step.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentBranchSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub sequence_len: usize,
}

impl RecurrentBranchSpec {
    pub fn scalar_series(hidden_dim: usize, sequence_len: usize) -> Self {
        Self {
            input_dim: 1,
            hidden_dim,
            sequence_len,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through one exponential; about twice as fast as the libm call and
/// accurate to a few ulps of 1 in absolute terms.
fn fast_tanh(x: f64) -> f64 {
    2.0 * sigmoid(2.0 * x) - 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub spec: RecurrentBranchSpec,
    /// `input_dim x 4H`, gate blocks ordered input, forget, candidate, output.
    wx: usize,
    /// `H x 4H`.
    wh: usize,
    /// `1 x 4H`.
    b: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Array2<f64>,
    /// Activated gates per step, `B x 4H`.
    gates: Vec<Array2<f64>>,
    /// Cell states, `L + 1` entries starting from zeros.
    cells: Vec<Array2<f64>>,
    /// Hidden states, `L + 1` entries starting from zeros.
    hidden: Vec<Array2<f64>>,
    tanh_cells: Vec<Array2<f64>>,
}

impl LstmCache {
    pub fn last_hidden(&self) -> &Array2<f64> {
        self.hidden.last().expect("at least the initial state")
    }
}

impl Lstm {
    pub fn new<R: Rng>(
        spec: RecurrentBranchSpec,
        prefix: &str,
        params: &mut ParameterBundle,
        rng: &mut R,
    ) -> Self {
        let h = spec.hidden_dim;
        let wx = params.add_uniform(
            format!("{prefix}.wx"),
            spec.input_dim,
            4 * h,
            1.0 / (spec.input_dim as f64).sqrt(),
            rng,
        );
        let bound = 1.0 / (h as f64).sqrt();
        let wh = params.add_uniform(format!("{prefix}.wh"), h, 4 * h, bound, rng);
        let b = params.add_uniform(format!("{prefix}.b"), 1, 4 * h, bound, rng);
        params.values[b].slice_mut(s![.., h..2 * h]).fill(1.0);
        Self { spec, wx, wh, b }
    }

    /// Runs the recurrence over `seq` (`B x L`, one scalar per step).
    pub fn forward(&self, p: &ParameterBundle, seq: ArrayView2<f64>) -> Result<LstmCache> {
        let (batch, len) = seq.dim();
        if len != self.spec.sequence_len || self.spec.input_dim != 1 {
            return Err(Error::Shape(format!(
                "recurrent branch expects sequences of length {} with 1 input, got {len}",
                self.spec.sequence_len
            )));
        }
        let h = self.spec.hidden_dim;
        let wx = p.values[self.wx].row(0);
        let wh = &p.values[self.wh];
        let bias = p.values[self.b].row(0);

        let mut gates = Vec::with_capacity(len);
        let mut cells = Vec::with_capacity(len + 1);
        let mut hidden = Vec::with_capacity(len + 1);
        let mut tanh_cells = Vec::with_capacity(len);
        cells.push(Array2::zeros((batch, h)));
        hidden.push(Array2::zeros((batch, h)));

        for t in 0..len {
            let x = seq.column(t);
            let mut z = Array2::from_shape_fn((batch, 4 * h), |(r, k)| bias[k] + x[r] * wx[k]);
            general_mat_mul(1.0, &hidden[t], wh, 1.0, &mut z);
            let mut c = Array2::<f64>::zeros((batch, h));
            let mut tc = Array2::<f64>::zeros((batch, h));
            let mut hn = Array2::<f64>::zeros((batch, h));
            {
                let zs = z.as_slice_mut().expect("standard layout");
                let cp = cells[t].as_slice().expect("standard layout");
                let (cs, ts, hs) = (
                    c.as_slice_mut().expect("standard layout"),
                    tc.as_slice_mut().expect("standard layout"),
                    hn.as_slice_mut().expect("standard layout"),
                );
                for r in 0..batch {
                    let g = &mut zs[r * 4 * h..(r + 1) * 4 * h];
                    for v in &mut g[..2 * h] {
                        *v = sigmoid(*v);
                    }
                    for v in &mut g[2 * h..3 * h] {
                        *v = fast_tanh(*v);
                    }
                    for v in &mut g[3 * h..] {
                        *v = sigmoid(*v);
                    }
                    for j in 0..h {
                        let k = r * h + j;
                        let cv = g[h + j] * cp[k] + g[j] * g[2 * h + j];
                        let tv = fast_tanh(cv);
                        cs[k] = cv;
                        ts[k] = tv;
                        hs[k] = g[3 * h + j] * tv;
                    }
                }
            }
            gates.push(z);
            cells.push(c);
            tanh_cells.push(tc);
            hidden.push(hn);
        }
        Ok(LstmCache {
            input: seq.to_owned(),
            gates,
            cells,
            hidden,
            tanh_cells,
        })
    }

    /// Backpropagates `d_last` (gradient at the final hidden state) through
    /// every step, accumulating into `grads`.
    pub fn backward(
        &self,
        values: &[Array2<f64>],
        grads: &mut [Array2<f64>],
        cache: &LstmCache,
        d_last: &Array2<f64>,
    ) {
        let h = self.spec.hidden_dim;
        let (batch, len) = cache.input.dim();
        let wh = &values[self.wh];
        let mut dh = d_last.as_standard_layout().into_owned();
        let mut dc: Array2<f64> = Array2::zeros((batch, h));
        let mut dz = Array2::zeros((batch, 4 * h));

        for t in (0..len).rev() {
            {
                let g = cache.gates[t].as_slice().expect("standard layout");
                let tc = cache.tanh_cells[t].as_slice().expect("standard layout");
                let cp = cache.cells[t].as_slice().expect("standard layout");
                let dhs = dh.as_slice().expect("standard layout");
                let dcs = dc.as_slice_mut().expect("standard layout");
                let dzs = dz.as_slice_mut().expect("standard layout");
                for r in 0..batch {
                    let g = &g[r * 4 * h..(r + 1) * 4 * h];
                    let dzr = &mut dzs[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let k = r * h + j;
                        let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                        let tv = tc[k];
                        let dhv = dhs[k];
                        let dcv = dcs[k] + dhv * o * (1.0 - tv * tv);
                        dzr[j] = dcv * cand * i * (1.0 - i);
                        dzr[h + j] = dcv * cp[k] * f * (1.0 - f);
                        dzr[2 * h + j] = dcv * i * (1.0 - cand * cand);
                        dzr[3 * h + j] = dhv * tv * o * (1.0 - o);
                        dcs[k] = dcv * f;
                    }
                }
            }
            let x = cache.input.column(t);
            Zip::from(grads[self.wx].row_mut(0))
                .and(dz.columns())
                .for_each(|gw, col| *gw += col.dot(&x));
            general_mat_mul(1.0, &cache.hidden[t].t(), &dz, 1.0, &mut grads[self.wh]);
            grads[self.b] += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            if t > 0 {
                general_mat_mul(1.0, &dz, &wh.t(), 0.0, &mut dh);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn branch(len: usize) -> (Lstm, ParameterBundle) {
        let mut p = ParameterBundle::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Lstm::new(RecurrentBranchSpec::scalar_series(4, len), "r", &mut p, &mut rng);
        (l, p)
    }

    #[test]
    fn zero_params_give_zero_state() {
        let (l, mut p) = branch(6);
        p.fill_values(0.0);
        let seq = Array2::from_shape_fn((2, 6), |(r, t)| (r + t) as f64);
        let c = l.forward(&p, seq.view()).unwrap();
        assert!(c.last_hidden().iter().all(|&x| x == 0.0));
        // Gates sit at 0.5 and the candidate at 0.
        assert!(c.gates[0].row(0).iter().enumerate().all(|(k, &g)| {
            if (8..12).contains(&k) {
                g == 0.0
            } else {
                g == 0.5
            }
        }));
        let doubled = seq.mapv(|x| 2.0 * x);
        assert!(l
            .forward(&p, doubled.view())
            .unwrap()
            .last_hidden()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_is_one_cell_application() {
        let (l, p) = branch(1);
        let seq = Array2::from_elem((1, 1), 0.7);
        let c = l.forward(&p, seq.view()).unwrap();
        let h = 4;
        let (wx, b) = (&p.values[0], &p.values[2]);
        for j in 0..h {
            let z = |k: usize| b[[0, k]] + 0.7 * wx[[0, k]];
            let i = sigmoid(z(j));
            let g = z(2 * h + j).tanh();
            let o = sigmoid(z(3 * h + j));
            let expected = o * (i * g).tanh();
            assert!((c.last_hidden()[[0, j]] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (_, p) = branch(3);
        assert!(p.values[2].slice(s![.., 4..8]).iter().all(|&b| b == 1.0));
    }

    #[test]
    fn wrong_length_is_an_error() {
        let (l, p) = branch(3);
        assert!(l.forward(&p, Array2::zeros((1, 4)).view()).is_err());
    }
}
