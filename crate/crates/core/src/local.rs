//! Learned local stencil: depthwise k x k convolution (zero padding), GELU,
//! then a 1 x 1 pointwise channel-mixing convolution.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::{normal_vec, CatoRng};
use crate::scalar::Scalar;
use crate::tape::{FlopClass, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LocalStencil {
    pub depthwise: ParamId,
    pub dw_bias: ParamId,
    pub pointwise: ParamId,
    pub pw_bias: ParamId,
    pub kernel_size: usize,
}

impl LocalStencil {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        channels: usize,
        kernel_size: usize,
        rng: &mut CatoRng,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel_size}")));
        }
        let k2 = kernel_size * kernel_size;
        let dw_std = 1.0 / (k2 as f64).sqrt();
        let pw_std = 1.0 / (channels as f64).sqrt();
        let depthwise = {
            let mut d = normal_vec::<F>(rng, channels * k2);
            d.iter_mut().for_each(|v| *v = *v * F::c(dw_std));
            ps.add(
                format!("{prefix}.depthwise"),
                Tensor::new(vec![channels, kernel_size, kernel_size], d)?,
            )?
        };
        let dw_bias = ps.add(format!("{prefix}.dw_bias"), Tensor::zeros(vec![channels]))?;
        let pointwise = {
            let mut d = normal_vec::<F>(rng, channels * channels);
            d.iter_mut().for_each(|v| *v = *v * F::c(pw_std));
            ps.add(format!("{prefix}.pointwise"), Tensor::new(vec![channels, channels], d)?)?
        };
        let pw_bias = ps.add(format!("{prefix}.pw_bias"), Tensor::zeros(vec![channels]))?;
        Ok(LocalStencil { depthwise, dw_bias, pointwise, pw_bias, kernel_size })
    }

    /// `h2d` is `[N, C]` over an `h x w` grid; returns `[N, C]`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        h2d: VarId,
        grid: (usize, usize),
    ) -> Result<VarId> {
        let (h, w) = grid;
        let c = tape.shape(h2d)[1];
        let prev = tape.set_class(FlopClass::Local);
        let result = (|| {
            let x = tape.reshape(h2d, vec![h, w, c])?;
            let dw = tape.depthwise_conv2d(x, binding.var(self.depthwise), binding.var(self.dw_bias))?;
            let act = tape.gelu(dw)?;
            let flat = tape.reshape(act, vec![h * w, c])?;
            let mixed = tape.matmul(flat, binding.var(self.pointwise))?;
            tape.add_bias(mixed, binding.var(self.pw_bias))
        })();
        tape.set_class(prev);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn gelu(x: f64) -> f64 {
        let c0 = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c0 * (x + 0.044715 * x * x * x)).tanh())
    }

    fn setup(c: usize, k: usize) -> (ParamSet<f64>, LocalStencil) {
        let mut ps = ParamSet::new();
        let mut rng = rng_from_seed(9);
        let st = LocalStencil::new(&mut ps, "local", c, k, &mut rng).unwrap();
        (ps, st)
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = rng_from_seed(0);
        assert!(LocalStencil::new(&mut ps, "local", 4, 2, &mut rng).is_err());
    }

    #[test]
    fn delta_kernel_identity_pointwise_reduces_to_gelu() {
        let (mut ps, st) = setup(3, 3);
        {
            let t = &mut ps.get_mut(st.depthwise).tensor;
            t.data.iter_mut().for_each(|v| *v = 0.0);
            for ch in 0..3 {
                t.data[ch * 9 + 4] = 1.0; // centered delta per channel
            }
        }
        {
            let t = &mut ps.get_mut(st.pointwise).tensor;
            t.data.iter_mut().for_each(|v| *v = 0.0);
            for ch in 0..3 {
                t.data[ch * 3 + ch] = 1.0;
            }
        }
        let mut rng = rng_from_seed(1);
        let x = Tensor::new(vec![12, 3], crate::rng::normal_vec(&mut rng, 36)).unwrap();
        let mut tape = Tape::new();
        let binding = ps.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = st.forward(&mut tape, &binding, xv, (3, 4)).unwrap();
        for (a, b) in tape.value(out).data.iter().zip(&x.data) {
            assert!((a - gelu(*b)).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_kernels_broadcast_pointwise_bias() {
        let (mut ps, st) = setup(2, 3);
        for id in [st.depthwise, st.pointwise, st.dw_bias] {
            ps.get_mut(id).tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        ps.get_mut(st.pw_bias).tensor.data.copy_from_slice(&[0.5, -1.5]);
        let mut rng = rng_from_seed(2);
        let x = Tensor::new(vec![6, 2], crate::rng::normal_vec(&mut rng, 12)).unwrap();
        let mut tape = Tape::new();
        let binding = ps.bind(&mut tape).unwrap();
        let xv = tape.constant(x).unwrap();
        let out = st.forward(&mut tape, &binding, xv, (2, 3)).unwrap();
        for row in tape.value(out).data.chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn single_channel_conv_matches_nested_loop_oracle() {
        let (ps, st) = setup(1, 3);
        let mut rng = rng_from_seed(3);
        let x = Tensor::new(vec![9, 1], crate::rng::normal_vec(&mut rng, 9)).unwrap();
        let mut tape = Tape::new();
        let binding = ps.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = st.forward(&mut tape, &binding, xv, (3, 3)).unwrap();

        let kern = &ps.get(st.depthwise).tensor.data;
        let dwb = ps.get(st.dw_bias).tensor.data[0];
        let pw = ps.get(st.pointwise).tensor.data[0];
        let pwb = ps.get(st.pw_bias).tensor.data[0];
        for i in 0..3i64 {
            for j in 0..3i64 {
                let mut acc = dwb;
                for u in 0..3i64 {
                    for v in 0..3i64 {
                        let (ii, jj) = (i + u - 1, j + v - 1);
                        if (0..3).contains(&ii) && (0..3).contains(&jj) {
                            acc += x.data[(ii * 3 + jj) as usize] * kern[(u * 3 + v) as usize];
                        }
                    }
                }
                let expect = gelu(acc) * pw + pwb;
                let got = tape.value(out).data[(i * 3 + j) as usize];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }
}
