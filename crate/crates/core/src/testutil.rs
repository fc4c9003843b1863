//! Shared oracles for unit tests.

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::numerics::{Bound, ParamStore, Tape, Var};

pub fn small_model() -> ModelConfig {
    ModelConfig {
        clip_len: 4,
        frame_size: 8,
        channels: [2, 3, 4],
        d_model: 8,
        depth: 1,
        heads: 2,
        mlp_dim: 8,
        head_hidden: 4,
        decoder_taps: 3,
        ln_eps: 1e-5,
        pos_init_std: 0.5,
    }
}

/// Central differences (h = 1e-4) against the tape gradient for up to
/// `per_tensor` evenly spaced entries of every parameter under `prefix`.
/// Returns the worst relative error and the parameter it occurred in.
pub fn fd_check(
    params: &ParamStore<f64>,
    prefix: &str,
    per_tensor: usize,
    loss: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
) -> (f64, String) {
    let eval = |p: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let l = loss(&mut tape, &b).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let b = params.bind_all(&mut tape);
    let l = loss(&mut tape, &b).unwrap();
    let grads = b.gradients(&tape.backward(l).unwrap());
    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    for name in params.names().filter(|n| n.starts_with(prefix)) {
        let len = params.get(name).unwrap().len();
        let step = (len / per_tensor.max(1)).max(1);
        for j in (0..len).step_by(step).take(per_tensor) {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[j] += h;
            let up = eval(&p);
            p.get_mut(name).unwrap().data_mut()[j] -= 2.0 * h;
            let down = eval(&p);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[j]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{name}[{j}]"));
            }
        }
    }
    worst
}
