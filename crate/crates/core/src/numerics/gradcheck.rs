use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step at double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest `|g_fd - g_ad| / max(1, |g_fd|, |g_ad|)` over every coordinate of
/// every input, comparing tape gradients with central differences of `f`.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[which]);
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            probe[which].data_mut()[k] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic.data()[k];
            worst = worst.max((fd - ad).abs() / 1f64.max(fd.abs()).max(ad.abs()));
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`finite_difference_check`].
pub fn finite_difference_check_fn<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check(|t, v| f(t, v[0]), std::slice::from_ref(x), h)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Shape { op: "finite_difference_check", detail: format!("output {:?}", t.shape()) });
    }
    Ok(t.item())
}
