//! GRU cell built from tape primitives, so its backward comes for free.
//!
//! Gate order in the packed weights is (reset, update, candidate). The
//! candidate mixes the reset-gated recurrent term:
//!
//!   r = σ(x·Wx[:,0:H] + h·Wh[:,0:H] + b[0:H])
//!   z = σ(x·Wx[:,H:2H] + h·Wh[:,H:2H] + b[H:2H])
//!   n = tanh(x·Wx[:,2H:3H] + b[2H:3H] + r ⊙ (h·Wh[:,2H:3H]))
//!   h' = (1 − z) ⊙ n + z ⊙ h

use crate::Result;

use super::rng::Rng;
use super::tape::{DiffTensor, Tape};
use super::tensor::Tensor;

/// Packed GRU parameters: `w_x` is I×3H, `w_h` is H×3H, `bias` is 3H.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        GruParams {
            w_x: init_uniform(&[input, 3 * hidden], input, rng),
            w_h: init_uniform(&[hidden, 3 * hidden], hidden, rng),
            bias: Tensor::zeros(&[3 * hidden]),
            input,
            hidden,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_x: Tensor::zeros(&[input, 3 * hidden]),
            w_h: Tensor::zeros(&[hidden, 3 * hidden]),
            bias: Tensor::zeros(&[3 * hidden]),
            input,
            hidden,
        }
    }
}

/// Uniform ±1/√fan_in init used for every weight matrix in the pipeline.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

/// Tape handles for a watched [`GruParams`].
#[derive(Clone, Copy, Debug)]
pub struct GruHandles {
    pub w_x: DiffTensor,
    pub w_h: DiffTensor,
    pub bias: DiffTensor,
    pub hidden: usize,
}

impl GruHandles {
    pub fn watch(tape: &mut Tape, p: &GruParams) -> Self {
        GruHandles {
            w_x: tape.leaf(&p.w_x),
            w_h: tape.leaf(&p.w_h),
            bias: tape.leaf(&p.bias),
            hidden: p.hidden,
        }
    }
}

/// One GRU step for a batch: `x` is B×I, `h_prev` is B×H.
pub fn gru_cell(
    tape: &mut Tape,
    x: DiffTensor,
    h_prev: DiffTensor,
    p: &GruHandles,
) -> Result<DiffTensor> {
    let gx = tape.matmul(x, p.w_x)?;
    let gx = tape.add_row(gx, p.bias)?;
    gru_cell_from_gx(tape, gx, h_prev, p)
}

/// GRU step with the input-side projection `gx = x·Wx + b` precomputed.
/// When the per-step input is constant over time this avoids recomputing
/// the projection every frame.
pub fn gru_cell_from_gx(
    tape: &mut Tape,
    gx: DiffTensor,
    h_prev: DiffTensor,
    p: &GruHandles,
) -> Result<DiffTensor> {
    let h = p.hidden;
    let gh = tape.matmul(h_prev, p.w_h)?;

    let rx = tape.slice_cols(gx, 0, h)?;
    let rh = tape.slice_cols(gh, 0, h)?;
    let r_pre = tape.add(rx, rh)?;
    let r = tape.sigmoid(r_pre)?;

    let zx = tape.slice_cols(gx, h, h)?;
    let zh = tape.slice_cols(gh, h, h)?;
    let z_pre = tape.add(zx, zh)?;
    let z = tape.sigmoid(z_pre)?;

    let nx = tape.slice_cols(gx, 2 * h, h)?;
    let nh = tape.slice_cols(gh, 2 * h, h)?;
    let gated = tape.mul(r, nh)?;
    let n_pre = tape.add(nx, gated)?;
    let n = tape.tanh(n_pre)?;

    // h' = n − z⊙n + z⊙h
    let zn = tape.mul(z, n)?;
    let zh_term = tape.mul(z, h_prev)?;
    let partial = tape.sub(n, zn)?;
    tape.add(partial, zh_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{central_diff, max_rel_err};

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let p = GruParams::zeros(3, 4);
        let mut tape = Tape::new();
        let hp = GruHandles::watch(&mut tape, &p);
        let x = tape.leaf(&Tensor::zeros(&[2, 3]));
        let h = tape.leaf(&Tensor::zeros(&[2, 4]));
        let out = gru_cell(&mut tape, x, h, &hp).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_propagates_state() {
        // Bias of +30 on the update gate makes z ≈ 1, so h' ≈ h_prev.
        let mut p = GruParams::zeros(2, 3);
        for j in 3..6 {
            p.bias.data_mut()[j] = 30.0;
        }
        let mut tape = Tape::new();
        let hp = GruHandles::watch(&mut tape, &p);
        let x = tape.leaf_from(vec![0.3, -0.4], &[1, 2]);
        let h0 = tape.leaf_from(vec![0.9, -0.5, 0.2], &[1, 3]);
        let out = gru_cell(&mut tape, x, h0, &hp).unwrap();
        for (o, h) in tape.data(out).iter().zip(tape.data(h0)) {
            assert!((o - h).abs() < 1e-9, "h'={o} vs h={h}");
        }
    }

    #[test]
    fn outputs_bounded_by_gate_mixing() {
        let mut rng = Rng::from_seed(3);
        let p = GruParams::init(3, 4, &mut rng);
        let mut tape = Tape::new();
        let hp = GruHandles::watch(&mut tape, &p);
        let x0 = rng.gaussian_tensor(&[2, 3]);
        let x = tape.leaf(&x0);
        let mut h = tape.leaf(&Tensor::zeros(&[2, 4]));
        for _ in 0..50 {
            h = gru_cell(&mut tape, x, h, &hp).unwrap();
        }
        assert!(tape.data(h).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(7);
        let (b, i, h) = (2, 3, 4);
        let p = GruParams::init(i, h, &mut rng);
        let x0 = rng.gaussian_tensor(&[b, i]);
        let h0 = rng.gaussian_tensor(&[b, h]);

        // Flatten (w_x, w_h, bias, x, h_prev) into a single vector.
        let mut flat = Vec::new();
        flat.extend_from_slice(p.w_x.data());
        flat.extend_from_slice(p.w_h.data());
        flat.extend_from_slice(p.bias.data());
        flat.extend_from_slice(x0.data());
        flat.extend_from_slice(h0.data());

        let run = |v: &[f64]| -> Result<(Tape, DiffTensor, Vec<DiffTensor>)> {
            let mut tape = Tape::new();
            let mut pos = 0;
            let mut take = |tape: &mut Tape, shape: &[usize]| {
                let n: usize = shape.iter().product();
                let t = tape.leaf_from(v[pos..pos + n].to_vec(), shape);
                pos += n;
                t
            };
            let w_x = take(&mut tape, &[i, 3 * h]);
            let w_h = take(&mut tape, &[h, 3 * h]);
            let bias = take(&mut tape, &[3 * h]);
            let x = take(&mut tape, &[b, i]);
            let hp = take(&mut tape, &[b, h]);
            let handles = GruHandles { w_x, w_h, bias, hidden: h };
            let out = gru_cell(&mut tape, x, hp, &handles)?;
            let sq = tape.mul(out, out)?;
            let loss = tape.sum_all(sq)?;
            Ok((tape, loss, vec![w_x, w_h, bias, x, hp]))
        };

        let (mut tape, loss, leaves) = run(&flat).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for leaf in leaves {
            analytic.extend_from_slice(tape.grad(leaf));
        }

        let numeric = central_diff(
            &mut |v: &[f64]| {
                let (tape, loss, _) = run(v)?;
                Ok(tape.scalar_value(loss))
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric, 1e-8);
        assert!(err < 1e-5, "rel err {err}");
    }
}
