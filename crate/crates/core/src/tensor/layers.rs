//! Composite layers built from tape primitives.

use super::{Real, Result, Tape, TensorError, Var};

/// One LSTM step for a batch: `x` is `B x d_in`, `h_prev`/`c_prev` are
/// `B x d_h`, `w_x` is `d_in x 4d_h`, `w_h` is `d_h x 4d_h`, `b` is `4d_h`.
/// Gate blocks are ordered input, forget, candidate, output.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w_x: Var,
    w_h: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, w_x)?;
    let hw = tape.matmul(h_prev, w_h)?;
    let pre = tape.add(xw, hw)?;
    let gates = tape.add_bias(pre, b)?;
    lstm_from_gates(tape, gates, c_prev)
}

/// Finishes a step whose gate pre-activations are already summed.
pub fn lstm_from_gates<T: Real>(tape: &mut Tape<T>, gates: Var, c_prev: Var) -> Result<(Var, Var)> {
    let c = tape.lstm_cell(gates, c_prev)?;
    let h = tape.lstm_hidden(gates, c)?;
    Ok((h, c))
}

/// Highway layer `t * relu(x W_g + b_g) + (1 - t) * x` with
/// `t = sigmoid(x W_t + b_t)`, computed as `x + t * (g - x)`.
pub fn highway<T: Real>(tape: &mut Tape<T>, x: Var, w_t: Var, b_t: Var, w_g: Var, b_g: Var) -> Result<Var> {
    let d = tape.value(x).cols();
    for w in [w_t, w_g] {
        let s = tape.value(w).shape();
        if s != [d, d] {
            return Err(TensorError::Shape {
                op: "highway",
                left: tape.value(x).shape().to_vec(),
                right: s.to_vec(),
            });
        }
    }
    let tp = tape.matmul(x, w_t)?;
    let tp = tape.add_bias(tp, b_t)?;
    let t = tape.sigmoid(tp);
    let gp = tape.matmul(x, w_g)?;
    let gp = tape.add_bias(gp, b_g)?;
    let g = tape.relu(gp);
    let diff = tape.sub(g, x)?;
    let gated = tape.mul(t, diff)?;
    tape.add(x, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn hw_case(carry_bias: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = [0.3, -0.7, 1.2];
        let w = [0.5, -0.2, 0.1, 0.3, 0.4, -0.6, -0.1, 0.2, 0.7];
        let bg = [0.05, -0.1, 0.2];
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::from_f64(&[1, 3], &x).unwrap());
        let wt = tape.constant(Tensor::zeros(&[3, 3]));
        let bt = tape.constant(Tensor::filled(&[3], carry_bias));
        let wg = tape.constant(Tensor::from_f64(&[3, 3], &w).unwrap());
        let bgv = tape.constant(Tensor::from_f64(&[3], &bg).unwrap());
        let y = highway(&mut tape, xv, wt, bt, wg, bgv).unwrap();
        let mut relu = vec![0.0; 3];
        for j in 0..3 {
            let s: f64 = (0..3).map(|i| x[i] * w[i * 3 + j]).sum::<f64>() + bg[j];
            relu[j] = s.max(0.0);
        }
        (tape.value(y).data().to_vec(), x.to_vec(), relu)
    }

    #[test]
    fn highway_carry_saturation_passes_input() {
        let (y, x, _) = hw_case(-50.0);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn highway_transform_saturation_gives_relu() {
        let (y, _, r) = hw_case(50.0);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        let wx = tape.constant(Tensor::zeros(&[4, 8]));
        let wh = tape.constant(Tensor::zeros(&[2, 8]));
        let b = tape.constant(Tensor::zeros(&[8]));
        assert!(matches!(lstm_step(&mut tape, x, h, c, wx, wh, b), Err(TensorError::Shape { .. })));
    }
}
