use super::{LstmModel, Weights};
use crate::error::{Error, Result};

const INPUT: usize = 0;
const FORGET: usize = 1;
const OUTPUT: usize = 2;
const CANDIDATE: usize = 3;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one layer over a window.
#[derive(Debug, Clone)]
struct LayerCache {
    /// Gate activations, `[t][gate][unit]`.
    gates: Vec<f64>,
    /// Cell state, `[t + 1][unit]`; row 0 is the zero initial state.
    cell: Vec<f64>,
    /// Hidden state, `[t + 1][unit]`; row 0 is the zero initial state.
    hidden: Vec<f64>,
    /// `tanh(cell)`, `[t][unit]`.
    cell_tanh: Vec<f64>,
}

/// Reusable buffers for forward and backward passes of one model shape.
///
/// A workspace carries no state between calls: every forward pass starts
/// from zero hidden and cell states.
#[derive(Debug, Clone)]
pub struct Workspace {
    steps: usize,
    units: usize,
    layers: Vec<LayerCache>,
    input: Vec<f64>,
    // backward scratch
    grad_above: Vec<f64>,
    grad_below: Vec<f64>,
    grad_pre: Vec<f64>,
    dh_next: Vec<f64>,
    dc_next: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &LstmModel) -> Self {
        let steps = model.window_length;
        let units = model.setting.units;
        let layer = LayerCache {
            gates: vec![0.0; steps * 4 * units],
            cell: vec![0.0; (steps + 1) * units],
            hidden: vec![0.0; (steps + 1) * units],
            cell_tanh: vec![0.0; steps * units],
        };
        Workspace {
            steps,
            units,
            layers: vec![layer; model.setting.layers],
            input: vec![0.0; steps],
            grad_above: vec![0.0; steps * units],
            grad_below: vec![0.0; steps * units],
            grad_pre: vec![0.0; 4 * units],
            dh_next: vec![0.0; units],
            dc_next: vec![0.0; units],
        }
    }

    /// Run the network over one window, caching activations for
    /// [`Workspace::backward`]. Returns the normalized prediction.
    pub fn forward(&mut self, weights: &Weights, window: &[f64]) -> Result<f64> {
        if window.len() != self.steps {
            return Err(Error::data(format!(
                "input window has {} values, model expects {}",
                window.len(),
                self.steps
            )));
        }
        let h = self.units;
        self.input.copy_from_slice(window);
        for l in 0..self.layers.len() {
            let (below, rest) = self.layers.split_at_mut(l);
            let cache = &mut rest[0];
            let layer = &weights.layers[l];
            let in_width = layer.input_size();
            let gates = layer.gates();
            for t in 0..self.steps {
                let x: &[f64] = if l == 0 {
                    &self.input[t..t + 1]
                } else {
                    &below[l - 1].hidden[(t + 1) * h..(t + 2) * h]
                };
                let h_prev = &cache.hidden[t * h..(t + 1) * h];
                let act = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
                for (k, gate) in gates.iter().enumerate() {
                    for j in 0..h {
                        let mut z = gate.bias[j];
                        let wx = &gate.input.as_slice()[j * in_width..(j + 1) * in_width];
                        for (w, xv) in wx.iter().zip(x) {
                            z += w * xv;
                        }
                        let wh = gate.recurrent.row(j);
                        for (w, hv) in wh.iter().zip(h_prev) {
                            z += w * hv;
                        }
                        act[k * h + j] = if k == CANDIDATE { z.tanh() } else { sigmoid(z) };
                    }
                }
                let (c_done, c_next) = cache.cell.split_at_mut((t + 1) * h);
                let c_prev = &c_done[t * h..];
                let c_new = &mut c_next[..h];
                let tanh_c = &mut cache.cell_tanh[t * h..(t + 1) * h];
                let h_new = &mut cache.hidden[(t + 1) * h..(t + 2) * h];
                let mut finite = true;
                for j in 0..h {
                    let c = act[FORGET * h + j] * c_prev[j] + act[INPUT * h + j] * act[CANDIDATE * h + j];
                    c_new[j] = c;
                    tanh_c[j] = c.tanh();
                    h_new[j] = act[OUTPUT * h + j] * tanh_c[j];
                    finite &= h_new[j].is_finite() && c.is_finite();
                }
                if !finite {
                    return Err(Error::Numerical { layer: l, step: t });
                }
            }
        }
        let top = self.layers.last().expect("at least one layer");
        let h_last = &top.hidden[self.steps * h..];
        let mut y = weights.output_bias;
        for (w, hv) in weights.output_weights.iter().zip(h_last) {
            y += w * hv;
        }
        if !y.is_finite() {
            return Err(Error::Numerical {
                layer: self.layers.len(),
                step: self.steps - 1,
            });
        }
        Ok(y)
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to the last prediction is `d_output`. Must follow a
    /// successful [`Workspace::forward`] with the same weights.
    pub fn backward(&mut self, weights: &Weights, d_output: f64, grads: &mut Weights) {
        let h = self.units;
        let steps = self.steps;
        let n_layers = self.layers.len();

        let top_hidden = &self.layers[n_layers - 1].hidden[steps * h..];
        for j in 0..h {
            grads.output_weights[j] += d_output * top_hidden[j];
        }
        grads.output_bias += d_output;

        self.grad_above.fill(0.0);
        for j in 0..h {
            self.grad_above[(steps - 1) * h + j] = d_output * weights.output_weights[j];
        }

        for l in (0..n_layers).rev() {
            let layer = &weights.layers[l];
            let grad_layer = &mut grads.layers[l];
            let in_width = layer.input_size();
            let cache = &self.layers[l];
            self.dh_next.fill(0.0);
            self.dc_next.fill(0.0);
            if l > 0 {
                self.grad_below.fill(0.0);
            }
            for t in (0..steps).rev() {
                let act = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
                let c_prev = &cache.cell[t * h..(t + 1) * h];
                let tanh_c = &cache.cell_tanh[t * h..(t + 1) * h];
                for j in 0..h {
                    let i = act[INPUT * h + j];
                    let f = act[FORGET * h + j];
                    let o = act[OUTPUT * h + j];
                    let g = act[CANDIDATE * h + j];
                    let dh = self.grad_above[t * h + j] + self.dh_next[j];
                    let d_o = dh * tanh_c[j];
                    let dc = dh * o * (1.0 - tanh_c[j] * tanh_c[j]) + self.dc_next[j];
                    let d_i = dc * g;
                    let d_g = dc * i;
                    let d_f = dc * c_prev[j];
                    self.dc_next[j] = dc * f;
                    self.grad_pre[INPUT * h + j] = d_i * i * (1.0 - i);
                    self.grad_pre[FORGET * h + j] = d_f * f * (1.0 - f);
                    self.grad_pre[OUTPUT * h + j] = d_o * o * (1.0 - o);
                    self.grad_pre[CANDIDATE * h + j] = d_g * (1.0 - g * g);
                }

                let x: &[f64] = if l == 0 {
                    &self.input[t..t + 1]
                } else {
                    &self.layers[l - 1].hidden[(t + 1) * h..(t + 2) * h]
                };
                let h_prev = &cache.hidden[t * h..(t + 1) * h];
                self.dh_next.fill(0.0);
                let gates = layer.gates();
                let grad_gates = grad_layer.gates_mut();
                for (k, (gate, grad)) in gates.iter().zip(grad_gates).enumerate() {
                    for j in 0..h {
                        let dz = self.grad_pre[k * h + j];
                        if dz == 0.0 {
                            continue;
                        }
                        grad.bias[j] += dz;
                        let gw = &mut grad.input.as_mut_slice()[j * in_width..(j + 1) * in_width];
                        for (gv, xv) in gw.iter_mut().zip(x) {
                            *gv += dz * xv;
                        }
                        let gu = &mut grad.recurrent.as_mut_slice()[j * h..(j + 1) * h];
                        for (gv, hv) in gu.iter_mut().zip(h_prev) {
                            *gv += dz * hv;
                        }
                        let wu = gate.recurrent.row(j);
                        for (dn, w) in self.dh_next.iter_mut().zip(wu) {
                            *dn += dz * w;
                        }
                        if l > 0 {
                            let wx = gate.input.row(j);
                            let below = &mut self.grad_below[t * h..(t + 1) * h];
                            for (db, w) in below.iter_mut().zip(wx) {
                                *db += dz * w;
                            }
                        }
                    }
                }
            }
            if l > 0 {
                std::mem::swap(&mut self.grad_above, &mut self.grad_below);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, HyperparameterSetting};
    use super::*;
    use crate::nmm::GridSpec;

    /// Straightforward scalar re-implementation of the cell equations,
    /// written without any shared buffers.
    fn reference_forward(model: &LstmModel, window: &[f64]) -> f64 {
        let units = model.setting.units;
        let mut seq: Vec<Vec<f64>> = window.iter().map(|&v| vec![v]).collect();
        for layer in &model.weights.layers {
            let mut h = vec![0.0; units];
            let mut c = vec![0.0; units];
            let mut out = Vec::new();
            for x in &seq {
                let pre = |gate: &super::super::Gate, j: usize| {
                    let mut z = gate.bias[j];
                    for (k, xv) in x.iter().enumerate() {
                        z += gate.input.row(j)[k] * xv;
                    }
                    for (k, hv) in h.iter().enumerate() {
                        z += gate.recurrent.row(j)[k] * hv;
                    }
                    z
                };
                let mut h_new = vec![0.0; units];
                let mut c_new = vec![0.0; units];
                for j in 0..units {
                    let i = sigmoid(pre(&layer.input_gate, j));
                    let f = sigmoid(pre(&layer.forget_gate, j));
                    let o = sigmoid(pre(&layer.output_gate, j));
                    let g = pre(&layer.candidate, j).tanh();
                    c_new[j] = f * c[j] + i * g;
                    h_new[j] = o * c_new[j].tanh();
                }
                h = h_new;
                c = c_new;
                out.push(h.clone());
            }
            seq = out;
        }
        let last = seq.last().unwrap();
        model.weights.output_bias
            + model
                .weights
                .output_weights
                .iter()
                .zip(last)
                .map(|(w, h)| w * h)
                .sum::<f64>()
    }

    #[test]
    fn forward_matches_scalar_reference() {
        for (layers, units, window, seed) in [(1, 2, 4, 1u64), (2, 4, 6, 2), (3, 6, 5, 3)] {
            let s = HyperparameterSetting {
                learning_rate: 0.01,
                layers,
                units,
                epochs: 100,
            };
            let m = init_model(&s, &GridSpec::production(), window, 70.0, seed).unwrap();
            let input: Vec<f64> = (0..window).map(|k| 0.3 + 0.1 * k as f64).collect();
            let got = m.predict(&input).unwrap();
            let want = reference_forward(&m, &input);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn forward_keeps_no_state_between_calls() {
        let s = HyperparameterSetting {
            learning_rate: 0.01,
            layers: 2,
            units: 4,
            epochs: 100,
        };
        let m = init_model(&s, &GridSpec::production(), 4, 70.0, 5).unwrap();
        let mut ws = Workspace::new(&m);
        let a = ws.forward(&m.weights, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        ws.forward(&m.weights, &[0.9, 0.9, 0.9, 0.9]).unwrap();
        let b = ws.forward(&m.weights, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
