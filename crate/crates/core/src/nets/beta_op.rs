//! β as a graph op: `(B, J, 2)` normalized joints → `(B, C, H, W)` skeleton
//! images, with the analytic backward pass from [`crate::raster`].

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::raster::{gradient_coords, rasterize_coords, RasterParams};
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone)]
pub struct RasterOp {
    pub params: Arc<RasterParams>,
    pub topology: Arc<SkeletonTopology>,
}

fn to_pairs(flat: &[f32]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2)
        .map(|c| [c[0] as f64, c[1] as f64])
        .collect()
}

impl CustomOp1 for RasterOp {
    fn name(&self) -> &'static str {
        "skeleton-raster"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("raster input must be contiguous".into()))?;
        let data = &storage.as_slice::<f32>()?[start..end];
        let dims = layout.dims();
        let j = self.topology.joint_count();
        if dims.len() != 3 || dims[1] != j || dims[2] != 2 {
            candle_core::bail!("raster input must be (B, {j}, 2), got {dims:?}");
        }
        let n = self.params.image_len();
        let mut out = vec![0f32; dims[0] * n];
        let mut buf = vec![0f64; n];
        for (b, pose) in data.chunks_exact(2 * j).enumerate() {
            rasterize_coords(&self.params, &self.topology, &to_pairs(pose), &mut buf)
                .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            for (o, v) in out[b * n..(b + 1) * n].iter_mut().zip(&buf) {
                *o = *v as f32;
            }
        }
        let shape = Shape::from((
            dims[0],
            self.params.channels(),
            self.params.height(),
            self.params.width(),
        ));
        Ok((CpuStorage::F32(out), shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let coords = arg.flatten_all()?.to_vec1::<f32>()?;
        let up = grad_res.flatten_all()?.to_vec1::<f32>()?;
        let j = self.topology.joint_count();
        let n = self.params.image_len();
        let mut grad = Vec::with_capacity(coords.len());
        for (pose, g) in coords.chunks_exact(2 * j).zip(up.chunks_exact(n)) {
            let g64: Vec<f64> = g.iter().map(|&x| x as f64).collect();
            let d = gradient_coords(&self.params, &self.topology, &to_pairs(pose), &g64)
                .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            grad.extend(d.iter().flatten().map(|&x| x as f32));
        }
        Ok(Some(Tensor::from_vec(grad, arg.dims(), arg.device())?))
    }
}

impl RasterOp {
    pub fn new(params: RasterParams, topology: SkeletonTopology) -> Self {
        Self {
            params: Arc::new(params),
            topology: Arc::new(topology),
        }
    }

    /// Applies β to a `(B, J, 2)` pose tensor.
    pub fn apply(&self, poses: &Tensor) -> candle_core::Result<Tensor> {
        poses.contiguous()?.apply_op1(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize;
    use crate::skeleton::Pose2D;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_and_backward_match_raster() {
        let t = SkeletonTopology::mouse18();
        let p = RasterParams::default_for(&t, (32, 32));
        let op = RasterOp::new(p.clone(), t.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flat: Vec<f32> = (0..2 * 36).map(|_| rng.random_range(-0.7f32..0.7)).collect();
        let v = Var::from_vec(flat.clone(), (2, 18, 2), &Device::Cpu).unwrap();
        let s = op.apply(v.as_tensor()).unwrap();
        assert_eq!(s.dims(), &[2, 3, 32, 32]);
        let w: Vec<f32> = (0..s.elem_count()).map(|_| rng.random_range(-1f32..1.0)).collect();
        let wt = Tensor::from_vec(w.clone(), s.dims(), &Device::Cpu).unwrap();
        let grads = (&s * &wt).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let n = p.image_len();
        let out = s.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for b in 0..2 {
            let coords: Vec<[f64; 2]> = flat[b * 36..(b + 1) * 36]
                .chunks(2)
                .map(|c| [c[0] as f64, c[1] as f64])
                .collect();
            let pose = Pose2D::new(&t, coords.clone()).unwrap();
            let img = rasterize(&pose, &t, &p).unwrap();
            for (a, e) in out[b * n..(b + 1) * n].iter().zip(&img.pixels) {
                assert!((*a as f64 - e).abs() < 1e-6);
            }
            let up: Vec<f64> = w[b * n..(b + 1) * n].iter().map(|&x| x as f64).collect();
            let exp = gradient_coords(&p, &t, &coords, &up).unwrap();
            for (a, e) in g[b * 36..(b + 1) * 36].iter().zip(exp.iter().flatten()) {
                assert!((*a as f64 - e).abs() <= 1e-4 * e.abs().max(1.0));
            }
        }
    }
}
