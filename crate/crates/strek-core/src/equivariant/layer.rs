//! Rotation-equivariant convolution layers over a shared steerable basis.
//!
//! Three kinds: lifting (scalar field -> regular field), regular
//! (regular -> regular) and projection (regular -> rotation-invariant
//! scalar field via group pooling). A regular field occupies `cyclicity`
//! consecutive channels per field; rotating the input rotates the grid and
//! cyclically shifts those channels.

use super::basis::SteerableBasis;
use crate::error::{Error, Result};
use crate::tensor::{ExpandKind, ExpandTable, ParamSet, Tape, TensorId};
use rand::Rng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Lifting,
    Regular,
    Projection,
}

#[derive(Clone)]
pub struct ReConvLayer {
    pub kind: LayerKind,
    pub fields_in: usize,
    pub fields_out: usize,
    pub basis: Arc<SteerableBasis>,
    pub weight_slot: usize,
    table: Arc<ExpandTable>,
}

impl ReConvLayer {
    /// Register a layer's basis weights in `params` and return the layer.
    /// For lifting layers `fields_in` is ignored (the input is one scalar
    /// channel); projection layers always produce one scalar channel.
    pub fn new(
        kind: LayerKind,
        fields_in: usize,
        fields_out: usize,
        basis: Arc<SteerableBasis>,
        params: &mut ParamSet,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = basis.cyclicity;
        let a = basis.n_atoms();
        let (fi, fo, expand_kind, wshape) = match kind {
            LayerKind::Lifting => (1, fields_out, ExpandKind::Lifting, vec![fields_out, a]),
            LayerKind::Regular => (
                fields_in,
                fields_out,
                ExpandKind::Regular,
                vec![fields_out, fields_in, n, a],
            ),
            LayerKind::Projection => (fields_in, 1, ExpandKind::Regular, vec![1, fields_in, n, a]),
        };
        if fi == 0 || fo == 0 {
            return Err(Error::invalid("layer needs at least one field on each side"));
        }
        // Materialized-kernel variance matched to Kaiming init: atoms are
        // orthonormal, so each kernel entry carries ~A * var(w) / k^2.
        let fan_in_channels = match kind {
            LayerKind::Lifting => 1,
            _ => fi * n,
        };
        let sigma = (2.0 / (fan_in_channels * a) as f64).sqrt();
        let len: usize = wshape.iter().product();
        let data: Vec<f64> = (0..len)
            .map(|_| {
                // Box-Muller keeps us independent of distribution crates here.
                let u1: f64 = rng.random_range(1e-12..1.0);
                let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                sigma * (-2.0 * u1.ln()).sqrt() * u2.cos()
            })
            .collect();
        let weight_slot = params.register(name, &wshape, data);
        let mut rotated = Vec::with_capacity(n * a * basis.kernel_size * basis.kernel_size);
        for r in 0..n {
            for at in 0..a {
                rotated.extend_from_slice(&basis.rotated[r][at]);
            }
        }
        let table = Arc::new(ExpandTable {
            kind: expand_kind,
            fields_in: fi,
            fields_out: fo,
            n_rot: n,
            n_atoms: a,
            kernel_size: basis.kernel_size,
            rotated,
        });
        Ok(ReConvLayer {
            kind,
            fields_in: fi,
            fields_out: fo,
            basis,
            weight_slot,
            table,
        })
    }

    /// Learnable parameter count: atoms x in-fields x out-fields, with the
    /// extra group-offset factor for regular/projection kernels.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Lifting => self.fields_out * self.basis.n_atoms(),
            _ => self.fields_out * self.fields_in * self.basis.cyclicity * self.basis.n_atoms(),
        }
    }

    /// Expanded dense kernel as a tape tensor (differentiable w.r.t. the
    /// basis weights).
    pub fn materialize_kernel(&self, tape: &mut Tape, params: &ParamSet) -> Result<TensorId> {
        let w = tape.param(params, self.weight_slot);
        tape.reconv_expand(w, Arc::clone(&self.table))
    }

    /// Apply the layer with same-padding. Projection layers group-pool the
    /// regular response down to one invariant scalar channel.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: TensorId) -> Result<TensorId> {
        let kernel = self.materialize_kernel(tape, params)?;
        let pad = self.basis.kernel_size / 2;
        let out = tape.conv2d(input, kernel, pad)?;
        match self.kind {
            LayerKind::Projection => tape.channel_group_mean(out, self.basis.cyclicity),
            _ => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::basis::{build_basis, rotate_grid_90};
    use rand::SeedableRng;

    fn test_basis() -> Arc<SteerableBasis> {
        Arc::new(build_basis(5, 8, 3, 2, true).unwrap())
    }

    #[test]
    fn zero_weights_give_zero_kernel_and_output() {
        let basis = test_basis();
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layer = ReConvLayer::new(LayerKind::Lifting, 1, 2, basis, &mut params, "l", &mut rng).unwrap();
        for v in &mut params.get_mut(layer.weight_slot).data {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 8, 8], (0..64).map(|i| i as f64).collect()).unwrap();
        let y = layer.forward(&mut tape, &params, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lifting_with_one_atom_selected_outputs_its_rotations() {
        let basis = test_basis();
        // pick an m=1 cos atom
        let atom_idx = basis
            .labels
            .iter()
            .position(|l| l.frequency == 1 && l.kind == super::super::basis::Harmonic::Cos)
            .unwrap();
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layer =
            ReConvLayer::new(LayerKind::Lifting, 1, 1, Arc::clone(&basis), &mut params, "l", &mut rng)
                .unwrap();
        {
            let w = params.get_mut(layer.weight_slot);
            for v in &mut w.data {
                *v = 0.0;
            }
            w.data[atom_idx] = 1.0;
        }
        let mut tape = Tape::new();
        let kernel = layer.materialize_kernel(&mut tape, &params).unwrap();
        assert_eq!(tape.shape(kernel), &[8, 1, 5, 5]);
        let kk = 25;
        for r in 0..8 {
            let got = &tape.data(kernel)[r * kk..(r + 1) * kk];
            for (x, y) in got.iter().zip(&basis.rotated[r][atom_idx]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_beats_plain_convolution() {
        let basis = test_basis();
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layer =
            ReConvLayer::new(LayerKind::Regular, 4, 4, Arc::clone(&basis), &mut params, "l", &mut rng)
                .unwrap();
        let plain = (4 * 8) * (4 * 8) * 5 * 5;
        assert!(layer.param_count() < plain);
        assert_eq!(layer.param_count(), params.count_scalars());
    }

    #[test]
    fn lifting_layer_is_exactly_equivariant_at_quarter_turns() {
        // Rotating the input by 90 degrees (2 group steps at cyclicity 8)
        // must rotate each output plane and cyclically shift the group
        // channels by 2.
        let basis = test_basis();
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let layer =
            ReConvLayer::new(LayerKind::Lifting, 1, 3, Arc::clone(&basis), &mut params, "l", &mut rng)
                .unwrap();
        let n = 10;
        let img: Vec<f64> = (0..n * n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let rot_img = rotate_grid_90(&img, n, n);

        let mut t0 = Tape::new();
        let x0 = t0.leaf(&[1, n, n], img).unwrap();
        let y0 = layer.forward(&mut t0, &params, x0).unwrap();
        let mut t1 = Tape::new();
        let x1 = t1.leaf(&[1, n, n], rot_img).unwrap();
        let y1 = layer.forward(&mut t1, &params, x1).unwrap();

        let plane = n * n;
        let s = 2; // group steps for 90 degrees at cyclicity 8
        for f in 0..3 {
            for ro in 0..8 {
                // channel (f, ro) of the rotated input equals the rotated
                // plane of channel (f, ro - s) of the original input
                let src = f * 8 + (ro + 8 - s) % 8;
                let dst = f * 8 + ro;
                let expect = rotate_grid_90(&t0.data(y0)[src * plane..(src + 1) * plane], n, n);
                let got = &t1.data(y1)[dst * plane..(dst + 1) * plane];
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10, "field {f} rot {ro}");
                }
            }
        }
    }

    #[test]
    fn projection_layer_output_is_rotation_equivariant_scalar_field() {
        let basis = test_basis();
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let lift =
            ReConvLayer::new(LayerKind::Lifting, 1, 2, Arc::clone(&basis), &mut params, "l0", &mut rng)
                .unwrap();
        let proj =
            ReConvLayer::new(LayerKind::Projection, 2, 1, Arc::clone(&basis), &mut params, "l1", &mut rng)
                .unwrap();
        let n = 12;
        let img: Vec<f64> = (0..n * n).map(|i| ((i * 29) % 97) as f64 / 97.0).collect();
        let rot_img = rotate_grid_90(&img, n, n);
        let run = |input: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(&[1, n, n], input).unwrap();
            let h = lift.forward(&mut tape, &params, x).unwrap();
            let h = tape.leaky_relu(h, 0.1);
            let y = proj.forward(&mut tape, &params, h).unwrap();
            tape.data(y).to_vec()
        };
        let y0 = run(img);
        let y1 = run(rot_img);
        let y0_rot = rotate_grid_90(&y0, n, n);
        for (a, b) in y1.iter().zip(&y0_rot) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
