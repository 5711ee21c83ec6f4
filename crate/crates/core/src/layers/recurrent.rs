//! GRU and LSTM cells with hard-sigmoid gates and tanh unit activations.
//!
//! Weights act on row vectors: input-to-hidden matrices are in×H and
//! hidden-to-hidden matrices are H×H, so a gate pre-activation is
//! `x·W + h·U + b`.

use super::{add_assign, hard_sigmoid, hard_sigmoid_grad, mat_t_acc, outer_acc, vecmat_acc};
use crate::error::{Error, Result};
use crate::rng::{glorot_uniform, Rng};
use crate::tensor::Tensor;

/// Gated recurrent unit:
///
/// ```text
/// z  = hardSig(x·W_zx + h·U_zh + b_z)
/// r  = hardSig(x·W_rx + h·U_rh + b_r)
/// h~ = tanh(x·W_x + (r⊙h)·U_h + b)
/// h' = (1 - z)⊙h + z⊙h~
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_zx: Tensor,
    pub u_zh: Tensor,
    pub b_z: Tensor,
    pub w_rx: Tensor,
    pub u_rh: Tensor,
    pub b_r: Tensor,
    pub w_x: Tensor,
    pub u_h: Tensor,
    pub b: Tensor,
}

/// Gradients share the cell's layout.
pub type GruGrads = GruCell;

#[derive(Clone, Debug)]
pub struct GruStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    a_z: Vec<f64>,
    a_r: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    h_tilde: Vec<f64>,
}

impl GruStepCache {
    pub fn update_gate(&self) -> &[f64] {
        &self.z
    }

    pub fn reset_gate(&self) -> &[f64] {
        &self.r
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

fn sequence_rows(xs: &Tensor, input: usize) -> Result<usize> {
    if xs.rank() != 2 || xs.shape()[1] != input {
        return Err(Error::dim(format!(
            "sequence {:?} does not match input size {input}",
            xs.shape()
        )));
    }
    Ok(xs.shape()[0])
}

impl GruCell {
    pub const NAMES: [&'static str; 9] =
        ["W_zx", "U_zh", "b_z", "W_rx", "U_rh", "b_r", "W_x", "U_h", "b"];

    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::arg("GRU input and hidden sizes must be >= 1"));
        }
        let w = Tensor::zeros(&[input, hidden]);
        let u = Tensor::zeros(&[hidden, hidden]);
        let b = Tensor::zeros(&[hidden]);
        Ok(Self {
            w_zx: w.clone(),
            u_zh: u.clone(),
            b_z: b.clone(),
            w_rx: w.clone(),
            u_rh: u.clone(),
            b_r: b.clone(),
            w_x: w,
            u_h: u,
            b,
        })
    }

    /// Glorot-uniform weights (fans (in, H) and (H, H)), zero biases.
    pub fn glorot(rng: &mut Rng, input: usize, hidden: usize) -> Result<Self> {
        let mut cell = Self::zeros(input, hidden)?;
        for (name, t) in Self::NAMES.iter().zip(cell.tensors_mut()) {
            if name.starts_with('W') {
                *t = glorot_uniform(rng, input, hidden, &[input, hidden])?;
            } else if name.starts_with('U') {
                *t = glorot_uniform(rng, hidden, hidden, &[hidden, hidden])?;
            }
        }
        Ok(cell)
    }

    pub fn input_size(&self) -> usize {
        self.w_zx.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_zx.shape()[1]
    }

    pub fn parameter_count(input: usize, hidden: usize) -> usize {
        3 * (input * hidden + hidden * hidden + hidden)
    }

    /// Tensors in (W_zx, U_zh, b_z, W_rx, U_rh, b_r, W_x, U_h, b) order.
    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_zx, &self.u_zh, &self.b_z, &self.w_rx, &self.u_rh, &self.b_r, &self.w_x,
            &self.u_h, &self.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_zx,
            &mut self.u_zh,
            &mut self.b_z,
            &mut self.w_rx,
            &mut self.u_rh,
            &mut self.b_r,
            &mut self.w_x,
            &mut self.u_h,
            &mut self.b,
        ]
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, GruStepCache)> {
        let (input, hidden) = (self.input_size(), self.hidden_size());
        check_len("GRU input", x.len(), input)?;
        check_len("GRU state", h_prev.len(), hidden)?;

        let mut a_z = self.b_z.data().to_vec();
        vecmat_acc(x, self.w_zx.data(), hidden, &mut a_z);
        vecmat_acc(h_prev, self.u_zh.data(), hidden, &mut a_z);
        let mut a_r = self.b_r.data().to_vec();
        vecmat_acc(x, self.w_rx.data(), hidden, &mut a_r);
        vecmat_acc(h_prev, self.u_rh.data(), hidden, &mut a_r);
        let z: Vec<f64> = a_z.iter().map(|&u| hard_sigmoid(u)).collect();
        let r: Vec<f64> = a_r.iter().map(|&u| hard_sigmoid(u)).collect();

        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let mut a_h = self.b.data().to_vec();
        vecmat_acc(x, self.w_x.data(), hidden, &mut a_h);
        vecmat_acc(&rh, self.u_h.data(), hidden, &mut a_h);
        let h_tilde: Vec<f64> = a_h.iter().map(|u| u.tanh()).collect();

        let h: Vec<f64> = (0..hidden)
            .map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * h_tilde[j])
            .collect();
        Ok((
            h,
            GruStepCache {
                x: x.to_vec(),
                h_prev: h_prev.to_vec(),
                a_z,
                a_r,
                z,
                r,
                h_tilde,
            },
        ))
    }

    /// Runs the cell over the rows of `xs` (T×in) from state `h0`.
    pub fn forward_sequence(&self, xs: &Tensor, h0: &[f64]) -> Result<(Vec<f64>, Vec<GruStepCache>)> {
        let steps = sequence_rows(xs, self.input_size())?;
        let mut h = h0.to_vec();
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let (next, cache) = self.step(xs.row(t), &h)?;
            h = next;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    /// Backpropagation through time from a gradient on the final state.
    /// Returns the per-step input gradients (T×in) and parameter gradients
    /// accumulated over all steps.
    pub fn backward(&self, caches: &[GruStepCache], grad_h_final: &[f64]) -> Result<(Tensor, GruGrads)> {
        let (input, hidden) = (self.input_size(), self.hidden_size());
        check_len("GRU output gradient", grad_h_final.len(), hidden)?;
        if caches.is_empty() {
            return Err(Error::dim("GRU backward needs at least one cached step"));
        }
        let mut g = Self::zeros(input, hidden)?;
        let mut dxs = vec![0.0; caches.len() * input];
        let mut dh = grad_h_final.to_vec();

        for (t, c) in caches.iter().enumerate().rev() {
            check_len("GRU cached input", c.x.len(), input)?;
            check_len("GRU cached state", c.h_prev.len(), hidden)?;
            let dx = &mut dxs[t * input..(t + 1) * input];
            let mut dh_prev: Vec<f64> = (0..hidden).map(|j| dh[j] * (1.0 - c.z[j])).collect();

            // Candidate branch.
            let da_h: Vec<f64> = (0..hidden)
                .map(|j| dh[j] * c.z[j] * (1.0 - c.h_tilde[j] * c.h_tilde[j]))
                .collect();
            let rh: Vec<f64> = c.r.iter().zip(&c.h_prev).map(|(a, b)| a * b).collect();
            outer_acc(&c.x, &da_h, g.w_x.data_mut());
            outer_acc(&rh, &da_h, g.u_h.data_mut());
            add_assign(g.b.data_mut(), &da_h);
            mat_t_acc(&da_h, self.w_x.data(), hidden, dx);
            let mut drh = vec![0.0; hidden];
            mat_t_acc(&da_h, self.u_h.data(), hidden, &mut drh);
            for j in 0..hidden {
                dh_prev[j] += drh[j] * c.r[j];
            }

            // Update gate.
            let da_z: Vec<f64> = (0..hidden)
                .map(|j| dh[j] * (c.h_tilde[j] - c.h_prev[j]) * hard_sigmoid_grad(c.a_z[j]))
                .collect();
            outer_acc(&c.x, &da_z, g.w_zx.data_mut());
            outer_acc(&c.h_prev, &da_z, g.u_zh.data_mut());
            add_assign(g.b_z.data_mut(), &da_z);
            mat_t_acc(&da_z, self.w_zx.data(), hidden, dx);
            mat_t_acc(&da_z, self.u_zh.data(), hidden, &mut dh_prev);

            // Reset gate.
            let da_r: Vec<f64> = (0..hidden)
                .map(|j| drh[j] * c.h_prev[j] * hard_sigmoid_grad(c.a_r[j]))
                .collect();
            outer_acc(&c.x, &da_r, g.w_rx.data_mut());
            outer_acc(&c.h_prev, &da_r, g.u_rh.data_mut());
            add_assign(g.b_r.data_mut(), &da_r);
            mat_t_acc(&da_r, self.w_rx.data(), hidden, dx);
            mat_t_acc(&da_r, self.u_rh.data(), hidden, &mut dh_prev);

            dh = dh_prev;
        }
        Ok((Tensor::new(&[caches.len(), input], dxs)?, g))
    }
}

/// LSTM with input, forget and output gates:
///
/// ```text
/// i = hardSig(x·W_ix + h·U_ih + b_i)      f = hardSig(x·W_fx + h·U_fh + b_f)
/// g = tanh(x·W_cx + h·U_ch + b_c)         o = hardSig(x·W_ox + h·U_oh + b_o)
/// c' = f⊙c + i⊙g                          h' = o⊙tanh(c')
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ix: Tensor,
    pub u_ih: Tensor,
    pub b_i: Tensor,
    pub w_fx: Tensor,
    pub u_fh: Tensor,
    pub b_f: Tensor,
    pub w_cx: Tensor,
    pub u_ch: Tensor,
    pub b_c: Tensor,
    pub w_ox: Tensor,
    pub u_oh: Tensor,
    pub b_o: Tensor,
}

pub type LstmGrads = LstmCell;

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    a_i: Vec<f64>,
    a_f: Vec<f64>,
    a_o: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmStepCache {
    /// (input, forget, output) gate values.
    pub fn gates(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.i, &self.f, &self.o)
    }
}

impl LstmCell {
    pub const NAMES: [&'static str; 12] = [
        "W_ix", "U_ih", "b_i", "W_fx", "U_fh", "b_f", "W_cx", "U_ch", "b_c", "W_ox", "U_oh", "b_o",
    ];

    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::arg("LSTM input and hidden sizes must be >= 1"));
        }
        let w = Tensor::zeros(&[input, hidden]);
        let u = Tensor::zeros(&[hidden, hidden]);
        let b = Tensor::zeros(&[hidden]);
        Ok(Self {
            w_ix: w.clone(),
            u_ih: u.clone(),
            b_i: b.clone(),
            w_fx: w.clone(),
            u_fh: u.clone(),
            b_f: b.clone(),
            w_cx: w.clone(),
            u_ch: u.clone(),
            b_c: b.clone(),
            w_ox: w,
            u_oh: u,
            b_o: b,
        })
    }

    pub fn glorot(rng: &mut Rng, input: usize, hidden: usize) -> Result<Self> {
        let mut cell = Self::zeros(input, hidden)?;
        for (name, t) in Self::NAMES.iter().zip(cell.tensors_mut()) {
            if name.starts_with('W') {
                *t = glorot_uniform(rng, input, hidden, &[input, hidden])?;
            } else if name.starts_with('U') {
                *t = glorot_uniform(rng, hidden, hidden, &[hidden, hidden])?;
            }
        }
        Ok(cell)
    }

    pub fn input_size(&self) -> usize {
        self.w_ix.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_ix.shape()[1]
    }

    pub fn parameter_count(input: usize, hidden: usize) -> usize {
        4 * (input * hidden + hidden * hidden + hidden)
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_ix, &self.u_ih, &self.b_i, &self.w_fx, &self.u_fh, &self.b_f, &self.w_cx,
            &self.u_ch, &self.b_c, &self.w_ox, &self.u_oh, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_ix,
            &mut self.u_ih,
            &mut self.b_i,
            &mut self.w_fx,
            &mut self.u_fh,
            &mut self.b_f,
            &mut self.w_cx,
            &mut self.u_ch,
            &mut self.b_c,
            &mut self.w_ox,
            &mut self.u_oh,
            &mut self.b_o,
        ]
    }

    fn preact(&self, w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hidden = self.hidden_size();
        let mut a = b.data().to_vec();
        vecmat_acc(x, w.data(), hidden, &mut a);
        vecmat_acc(h, u.data(), hidden, &mut a);
        a
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache)> {
        let hidden = self.hidden_size();
        check_len("LSTM input", x.len(), self.input_size())?;
        check_len("LSTM state", h_prev.len(), hidden)?;
        check_len("LSTM cell state", c_prev.len(), hidden)?;

        let a_i = self.preact(&self.w_ix, &self.u_ih, &self.b_i, x, h_prev);
        let a_f = self.preact(&self.w_fx, &self.u_fh, &self.b_f, x, h_prev);
        let a_c = self.preact(&self.w_cx, &self.u_ch, &self.b_c, x, h_prev);
        let a_o = self.preact(&self.w_ox, &self.u_oh, &self.b_o, x, h_prev);
        let i: Vec<f64> = a_i.iter().map(|&u| hard_sigmoid(u)).collect();
        let f: Vec<f64> = a_f.iter().map(|&u| hard_sigmoid(u)).collect();
        let g: Vec<f64> = a_c.iter().map(|u| u.tanh()).collect();
        let o: Vec<f64> = a_o.iter().map(|&u| hard_sigmoid(u)).collect();
        let c: Vec<f64> = (0..hidden).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hidden).map(|j| o[j] * tanh_c[j]).collect();
        Ok((
            h,
            c,
            LstmStepCache {
                x: x.to_vec(),
                h_prev: h_prev.to_vec(),
                c_prev: c_prev.to_vec(),
                a_i,
                a_f,
                a_o,
                i,
                f,
                g,
                o,
                tanh_c,
            },
        ))
    }

    /// Runs the cell over the rows of `xs` from `(h0, c0)`; returns the final
    /// hidden and cell states.
    pub fn forward_sequence(
        &self,
        xs: &Tensor,
        h0: &[f64],
        c0: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<LstmStepCache>)> {
        let steps = sequence_rows(xs, self.input_size())?;
        let (mut h, mut c) = (h0.to_vec(), c0.to_vec());
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let (hn, cn, cache) = self.step(xs.row(t), &h, &c)?;
            h = hn;
            c = cn;
            caches.push(cache);
        }
        Ok((h, c, caches))
    }

    /// Backpropagation through time from a gradient on the final hidden state
    /// (the final cell state is not an output).
    pub fn backward(&self, caches: &[LstmStepCache], grad_h_final: &[f64]) -> Result<(Tensor, LstmGrads)> {
        let (input, hidden) = (self.input_size(), self.hidden_size());
        check_len("LSTM output gradient", grad_h_final.len(), hidden)?;
        if caches.is_empty() {
            return Err(Error::dim("LSTM backward needs at least one cached step"));
        }
        let mut gr = Self::zeros(input, hidden)?;
        let mut dxs = vec![0.0; caches.len() * input];
        let mut dh = grad_h_final.to_vec();
        let mut dc = vec![0.0; hidden];

        for (t, s) in caches.iter().enumerate().rev() {
            check_len("LSTM cached input", s.x.len(), input)?;
            let dx = &mut dxs[t * input..(t + 1) * input];
            let mut da_i = vec![0.0; hidden];
            let mut da_f = vec![0.0; hidden];
            let mut da_c = vec![0.0; hidden];
            let mut da_o = vec![0.0; hidden];
            let mut dc_prev = vec![0.0; hidden];
            for j in 0..hidden {
                let d_o = dh[j] * s.tanh_c[j];
                let dct = dc[j] + dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
                da_i[j] = dct * s.g[j] * hard_sigmoid_grad(s.a_i[j]);
                da_f[j] = dct * s.c_prev[j] * hard_sigmoid_grad(s.a_f[j]);
                da_c[j] = dct * s.i[j] * (1.0 - s.g[j] * s.g[j]);
                da_o[j] = d_o * hard_sigmoid_grad(s.a_o[j]);
                dc_prev[j] = dct * s.f[j];
            }
            let mut dh_prev = vec![0.0; hidden];
            let groups = [
                (&da_i, &self.w_ix, &self.u_ih, 0usize),
                (&da_f, &self.w_fx, &self.u_fh, 3),
                (&da_c, &self.w_cx, &self.u_ch, 6),
                (&da_o, &self.w_ox, &self.u_oh, 9),
            ];
            let grads = gr.tensors_mut();
            for (da, w, u, base) in groups {
                outer_acc(&s.x, da, grads[base].data_mut());
                outer_acc(&s.h_prev, da, grads[base + 1].data_mut());
                add_assign(grads[base + 2].data_mut(), da);
                mat_t_acc(da, w.data(), hidden, dx);
                mat_t_acc(da, u.data(), hidden, &mut dh_prev);
            }
            dh = dh_prev;
            dc = dc_prev;
        }
        Ok((Tensor::new(&[caches.len(), input], dxs)?, gr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_gru(rng: &mut Rng, input: usize, hidden: usize) -> GruCell {
        let mut cell = GruCell::glorot(rng, input, hidden).unwrap();
        for (name, t) in GruCell::NAMES.iter().zip(cell.tensors_mut()) {
            if name.starts_with('b') {
                *t = random_tensor(rng, t.shape(), 0.5);
            }
        }
        cell
    }

    fn random_lstm(rng: &mut Rng, input: usize, hidden: usize) -> LstmCell {
        let mut cell = LstmCell::glorot(rng, input, hidden).unwrap();
        for (name, t) in LstmCell::NAMES.iter().zip(cell.tensors_mut()) {
            if name.starts_with('b') {
                *t = random_tensor(rng, t.shape(), 0.5);
            }
        }
        cell
    }

    #[test]
    fn gru_zero_cell_halves_the_state() {
        let cell = GruCell::zeros(3, 4).unwrap();
        let v = [0.4, -1.0, 2.0, 0.0];
        let (h, cache) = cell.step(&[1.0, 2.0, 3.0], &v).unwrap();
        assert!(cache.update_gate().iter().all(|&z| z == 0.5));
        assert!(cache.reset_gate().iter().all(|&r| r == 0.5));
        assert_eq!(h, v.iter().map(|x| 0.5 * x).collect::<Vec<_>>());
        let (h, _) = cell.step(&[1.0, 2.0, 3.0], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn gru_parameter_count_matches_tensors() {
        let cell = GruCell::zeros(17, 8).unwrap();
        let n: usize = cell.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(n, GruCell::parameter_count(17, 8));
        assert_eq!(cell.tensors().len(), 9);
        assert_eq!(cell.tensors().iter().filter(|t| t.rank() == 2).count(), 6);
    }

    #[test]
    fn lstm_parameter_count_matches_tensors() {
        let cell = LstmCell::zeros(17, 8).unwrap();
        let n: usize = cell.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(n, LstmCell::parameter_count(17, 8));
        assert_eq!(cell.tensors().iter().filter(|t| t.rank() == 2).count(), 8);
        assert_eq!(cell.tensors().iter().filter(|t| t.rank() == 1).count(), 4);
    }

    #[test]
    fn gru_zero_gradient_and_zero_input() {
        let mut rng = Rng::new(1);
        let cell = random_gru(&mut rng, 4, 3);
        let x = random_tensor(&mut rng, &[1, 4], 1.0);
        let (_, caches) = cell.forward_sequence(&x, &[0.1, -0.2, 0.3]).unwrap();
        let (dx, g) = cell.backward(&caches, &[0.0; 3]).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

        let zeros = Tensor::zeros(&[3, 4]);
        let (_, caches) = cell.forward_sequence(&zeros, &[0.1, -0.2, 0.3]).unwrap();
        let (_, g) = cell.backward(&caches, &[1.0, -1.0, 0.5]).unwrap();
        for w in [&g.w_zx, &g.w_rx, &g.w_x] {
            assert!(w.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gru_rejects_mismatched_shapes() {
        let cell = GruCell::zeros(3, 2).unwrap();
        assert!(cell.step(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        let (_, caches) = cell.forward_sequence(&Tensor::zeros(&[2, 3]), &[0.0; 2]).unwrap();
        assert!(matches!(cell.backward(&caches, &[1.0; 3]), Err(Error::Dimension(_))));
    }

    fn gru_loss(cell: &GruCell, xs: &Tensor, h0: &[f64], w: &[f64]) -> f64 {
        dot(&cell.forward_sequence(xs, h0).unwrap().0, w)
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let mut rng = Rng::new(500 + trial);
            let steps = if trial % 2 == 0 { 1 } else { 3 };
            let (input, hidden) = (5, 4);
            let cell = random_gru(&mut rng, input, hidden);
            let xs = random_tensor(&mut rng, &[steps, input], 1.5);
            let h0 = random_tensor(&mut rng, &[hidden], 0.8).into_data();
            let w = random_tensor(&mut rng, &[hidden], 1.0).into_data();
            let (_, caches) = cell.forward_sequence(&xs, &h0).unwrap();
            let (dx, g) = cell.backward(&caches, &w).unwrap();

            check_gradient("xs", &xs, &dx, |p| gru_loss(&cell, p, &h0, &w)).unwrap();
            for (k, name) in GruCell::NAMES.iter().enumerate() {
                let mut probe = cell.clone();
                let base = cell.tensors()[k].clone();
                check_gradient(name, &base, g.tensors()[k], |p| {
                    *probe.tensors_mut()[k] = p.clone();
                    gru_loss(&probe, &xs, &h0, &w)
                })
                .unwrap();
            }
        }
    }

    #[test]
    fn lstm_zero_cell() {
        let cell = LstmCell::zeros(2, 3).unwrap();
        let (h, c, _) = cell.step(&[1.0, -1.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!((h, c), (vec![0.0; 3], vec![0.0; 3]));
        let v = [1.0, -2.0, 0.3];
        let (h, c, cache) = cell.step(&[1.0, -1.0], &[0.0; 3], &v).unwrap();
        for j in 0..3 {
            assert_eq!(c[j], 0.5 * v[j]);
            assert_eq!(h[j], 0.5 * (0.5 * v[j]).tanh());
        }
        let (i, f, o) = cache.gates();
        assert!(i.iter().chain(f).chain(o).all(|&g| g == 0.5));
    }

    fn lstm_loss(cell: &LstmCell, xs: &Tensor, h0: &[f64], c0: &[f64], w: &[f64]) -> f64 {
        dot(&cell.forward_sequence(xs, h0, c0).unwrap().0, w)
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let mut rng = Rng::new(900 + trial);
            let steps = if trial % 2 == 0 { 1 } else { 3 };
            let (input, hidden) = (4, 3);
            let cell = random_lstm(&mut rng, input, hidden);
            let xs = random_tensor(&mut rng, &[steps, input], 1.5);
            let h0 = random_tensor(&mut rng, &[hidden], 0.8).into_data();
            let c0 = random_tensor(&mut rng, &[hidden], 0.8).into_data();
            let w = random_tensor(&mut rng, &[hidden], 1.0).into_data();
            let (_, _, caches) = cell.forward_sequence(&xs, &h0, &c0).unwrap();
            let (dx, g) = cell.backward(&caches, &w).unwrap();

            check_gradient("xs", &xs, &dx, |p| lstm_loss(&cell, p, &h0, &c0, &w)).unwrap();
            for (k, name) in LstmCell::NAMES.iter().enumerate() {
                let mut probe = cell.clone();
                let base = cell.tensors()[k].clone();
                check_gradient(name, &base, g.tensors()[k], |p| {
                    *probe.tensors_mut()[k] = p.clone();
                    lstm_loss(&probe, &xs, &h0, &c0, &w)
                })
                .unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn gru_state_stays_in_open_unit_interval(seed in any::<u64>(), steps in 1usize..6) {
            let mut rng = Rng::new(seed);
            let cell = random_gru(&mut rng, 6, 5);
            let xs = random_tensor(&mut rng, &[steps, 6], 3.0);
            let mut h = vec![0.0; 5];
            for t in 0..steps {
                let (next, cache) = cell.step(xs.row(t), &h).unwrap();
                prop_assert!(cache.update_gate().iter().chain(cache.reset_gate()).all(|g| (0.0..=1.0).contains(g)));
                prop_assert!(next.iter().all(|v| v.abs() < 1.0));
                h = next;
            }
        }

        #[test]
        fn lstm_gates_in_unit_interval(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let cell = random_lstm(&mut rng, 3, 4);
            let x = random_tensor(&mut rng, &[3], 3.0).into_data();
            let (_, _, cache) = cell.step(&x, &[0.2; 4], &[-0.5; 4]).unwrap();
            let (i, f, o) = cache.gates();
            prop_assert!(i.iter().chain(f).chain(o).all(|g| (0.0..=1.0).contains(g)));
        }
    }
}
