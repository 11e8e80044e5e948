//! Content-altering and style-preserving perturbations.
//!
//! The content-altering transform cuts each image into a `P x P` grid and
//! permutes the patches, destroying global structure while keeping local
//! texture and color. The style transform works on an intermediate feature
//! map: each instance's per-channel mean and standard deviation are jittered
//! by Gaussian multiples of their spread across the batch, and the map is
//! re-standardized to the new statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{RngStream, Tensor};

/// Floor on instance standard deviations used by the restyle.
pub const S_FLOOR: f64 = 1e-5;

pub const DEFAULT_GRID: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShuffleSpec {
    /// Patches per side.
    pub grid: usize,
    /// Use one permutation for the whole batch instead of one per sample.
    pub shared_permutation: bool,
}

impl Default for ShuffleSpec {
    fn default() -> Self {
        ShuffleSpec {
            grid: DEFAULT_GRID,
            shared_permutation: false,
        }
    }
}

/// Geometry of the shuffled region: patch size and the center-crop offset.
struct Grid {
    p: usize,
    ph: usize,
    pw: usize,
    top: usize,
    left: usize,
}

impl Grid {
    fn new(p: usize, h: usize, w: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::Config(format!("patch grid must be at least 2, got {p}")));
        }
        if h < p || w < p {
            return Err(Error::Contract(format!(
                "image {h}x{w} is smaller than the {p}x{p} patch grid"
            )));
        }
        let (ph, pw) = (h / p, w / p);
        Ok(Grid {
            p,
            ph,
            pw,
            top: (h - ph * p) / 2,
            left: (w - pw * p) / 2,
        })
    }
}

fn draw_permutation(rng: &mut RngStream, n: usize) -> Vec<usize> {
    let mut perm = rng.permutation(n);
    if perm.iter().enumerate().all(|(i, &v)| i == v) {
        perm = rng.permutation(n);
    }
    perm
}

/// Permutes patches of every sample. Output patch `j` is input patch `perm[j]`.
///
/// When the image side is not a multiple of the grid, the largest centered
/// region that is gets shuffled and the border is left in place.
pub fn patch_shuffle(batch: &Tensor, spec: &ShuffleSpec, rng: &mut RngStream) -> Result<Tensor> {
    let (b, _, h, w) = batch.dims4("patch_shuffle")?;
    let grid = Grid::new(spec.grid, h, w)?;
    let n = grid.p * grid.p;
    let shared = spec.shared_permutation.then(|| draw_permutation(rng, n));
    let perms: Vec<Vec<usize>> = (0..b)
        .map(|_| shared.clone().unwrap_or_else(|| draw_permutation(rng, n)))
        .collect();
    shuffle_with_permutations(batch, spec.grid, &perms)
}

/// Applies explicit per-sample patch permutations.
pub fn shuffle_with_permutations(batch: &Tensor, grid: usize, perms: &[Vec<usize>]) -> Result<Tensor> {
    let (b, c, h, w) = batch.dims4("patch_shuffle")?;
    let g = Grid::new(grid, h, w)?;
    if perms.len() != b {
        return Err(Error::shape("patch_shuffle", format!("{} permutations for {b} samples", perms.len())));
    }
    let mut out = batch.clone();
    let src = batch.data();
    let dst = out.data_mut();
    for (bi, perm) in perms.iter().enumerate() {
        if perm.len() != g.p * g.p {
            return Err(Error::shape("patch_shuffle", "permutation length does not match grid"));
        }
        for ch in 0..c {
            let plane = (bi * c + ch) * h * w;
            for (to, &from) in perm.iter().enumerate() {
                let (tr, tc) = (to / g.p, to % g.p);
                let (fr, fc) = (from / g.p, from % g.p);
                for dy in 0..g.ph {
                    let ty = g.top + tr * g.ph + dy;
                    let fy = g.top + fr * g.ph + dy;
                    let t0 = plane + ty * w + g.left + tc * g.pw;
                    let f0 = plane + fy * w + g.left + fc * g.pw;
                    dst[t0..t0 + g.pw].copy_from_slice(&src[f0..f0 + g.pw]);
                }
            }
        }
    }
    Ok(out)
}

/// Per-instance channel statistics of a feature map and their perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    /// (B, C) instance means.
    pub mean: Tensor,
    /// (B, C) instance population standard deviations.
    pub std: Tensor,
    /// (C,) spread of `mean` across the batch.
    pub mean_sigma: Tensor,
    /// (C,) spread of `std` across the batch.
    pub std_sigma: Tensor,
    /// (B, C) perturbed means.
    pub mean_sp: Tensor,
    /// (B, C) perturbed standard deviations, floored at [`S_FLOOR`].
    pub std_sp: Tensor,
}

/// Instance mean and population standard deviation over (H, W) per (b, c).
pub fn instance_stats(z: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = z.dims4("instance_stats")?;
    let n = (h * w) as f64;
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    for plane in z.data().chunks(h * w) {
        let m = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok((Tensor::new(vec![b, c], mean)?, Tensor::new(vec![b, c], std)?))
}

/// Population standard deviation across the batch axis of a (B, C) tensor.
pub fn cross_batch_std(u: &Tensor) -> Result<Tensor> {
    let (b, c) = u.dims2("cross_batch_std")?;
    let d = u.data();
    let out = (0..c)
        .map(|ch| {
            let m = (0..b).map(|i| d[i * c + ch]).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (d[i * c + ch] - m).powi(2)).sum::<f64>() / b as f64;
            var.sqrt()
        })
        .collect();
    Tensor::new(vec![c], out)
}

impl StyleStats {
    /// Statistics of `z` with the perturbed fields equal to the originals.
    pub fn from_features(z: &Tensor) -> Result<Self> {
        let (mean, std) = instance_stats(z)?;
        let mean_sigma = cross_batch_std(&mean)?;
        let std_sigma = cross_batch_std(&std)?;
        Ok(StyleStats {
            mean_sp: mean.clone(),
            std_sp: std.map(|s| s.max(S_FLOOR)),
            mean,
            std,
            mean_sigma,
            std_sigma,
        })
    }

    /// `mean_sp = mean + eps_u * mean_sigma`, `std_sp = std + eps_s * std_sigma`
    /// with one noise scalar per sample shared by all channels.
    pub fn perturb_with(&mut self, eps_mean: &[f64], eps_std: &[f64]) -> Result<()> {
        let (b, c) = self.mean.dims2("perturb_stats")?;
        if eps_mean.len() != b || eps_std.len() != b {
            return Err(Error::shape("perturb_stats", format!("need {b} noise values per statistic")));
        }
        let (u, s) = (self.mean.data(), self.std.data());
        let (us, ss) = (self.mean_sigma.data(), self.std_sigma.data());
        let mut mean_sp = Vec::with_capacity(b * c);
        let mut std_sp = Vec::with_capacity(b * c);
        for i in 0..b {
            for ch in 0..c {
                mean_sp.push(u[i * c + ch] + eps_mean[i] * us[ch]);
                std_sp.push((s[i * c + ch] + eps_std[i] * ss[ch]).max(S_FLOOR));
            }
        }
        self.mean_sp = Tensor::new(vec![b, c], mean_sp)?;
        self.std_sp = Tensor::new(vec![b, c], std_sp)?;
        Ok(())
    }

    /// Draws standard-normal per-sample noise and perturbs.
    pub fn perturb(&mut self, rng: &mut RngStream) -> Result<()> {
        let b = self.mean.shape()[0];
        let eps_mean: Vec<f64> = (0..b).map(|_| rng.gaussian()).collect();
        let eps_std: Vec<f64> = (0..b).map(|_| rng.gaussian()).collect();
        self.perturb_with(&eps_mean, &eps_std)
    }
}

/// Free-function form of [`StyleStats::perturb`].
pub fn perturb_stats(mut stats: StyleStats, rng: &mut RngStream) -> Result<StyleStats> {
    stats.perturb(rng)?;
    Ok(stats)
}

/// `z_sp = (z - mean) * std_sp / max(std, S_FLOOR) + mean_sp` per (b, c).
pub fn restyle(z: &Tensor, stats: &StyleStats) -> Result<Tensor> {
    let (b, c, h, w) = z.dims4("restyle")?;
    if stats.mean.shape() != [b, c] {
        return Err(Error::shape("restyle", "statistics do not match the feature map"));
    }
    let (u, s) = (stats.mean.data(), stats.std.data());
    let (usp, ssp) = (stats.mean_sp.data(), stats.std_sp.data());
    let mut out = z.clone();
    for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let ratio = ssp[p] / s[p].max(S_FLOOR);
        for v in plane {
            *v = (*v - u[p]) * ratio + usp[p];
        }
    }
    Ok(out)
}

/// Full style perturbation of a feature map.
pub fn style_perturb(z: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
    let mut stats = StyleStats::from_features(z)?;
    stats.perturb(rng)?;
    restyle(z, &stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_permutation_2x2() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = shuffle_with_permutations(&img, 2, &[vec![3, 2, 1, 0]]).unwrap();
        assert_eq!(out.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn shape_preserved_and_never_identity() {
        let mut rng = RngStream::new(1);
        let img = rng.gaussian_tensor(&[6, 3, 28, 28]);
        let out = patch_shuffle(&img, &ShuffleSpec::default(), &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
        // with 16 patches an identity survives one resample with probability < 1e-26
        for b in 0..6 {
            let a = img.select_rows(&[b]).unwrap();
            let o = out.select_rows(&[b]).unwrap();
            assert_ne!(a, o);
        }
    }

    #[test]
    fn channels_move_together() {
        let mut base = RngStream::new(2).gaussian_tensor(&[1, 1, 8, 8]);
        let plane = base.data().to_vec();
        base = Tensor::new(vec![1, 2, 8, 8], [plane.clone(), plane].concat()).unwrap();
        let out = patch_shuffle(&base, &ShuffleSpec::default(), &mut RngStream::new(3)).unwrap();
        assert_eq!(out.data()[..64], out.data()[64..]);
    }

    #[test]
    fn crop_leaves_border() {
        let img = RngStream::new(4).gaussian_tensor(&[1, 1, 10, 10]);
        let out = patch_shuffle(&img, &ShuffleSpec::default(), &mut RngStream::new(5)).unwrap();
        // 10 = 4*2 + 2: one-pixel border on each side stays put
        for i in 0..10 {
            assert_eq!(out.data()[i], img.data()[i]);
            assert_eq!(out.data()[90 + i], img.data()[90 + i]);
        }
    }

    #[test]
    fn too_small_image() {
        let img = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            patch_shuffle(&img, &ShuffleSpec::default(), &mut RngStream::new(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn constant_map_stats() {
        let z = Tensor::full(&[2, 3, 4, 4], 5.0);
        let (u, s) = instance_stats(&z).unwrap();
        assert!(u.data().iter().all(|&v| v == 5.0));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_cell_stats() {
        let z = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (u, s) = instance_stats(&z).unwrap();
        assert_eq!(u.data(), &[2.0]);
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn cross_batch_cases() {
        let u = Tensor::new(vec![2, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(cross_batch_std(&u).unwrap().data(), &[1.0]);
        let single = Tensor::new(vec![1, 3], vec![2.0, 4.0, 7.0]).unwrap();
        assert_eq!(cross_batch_std(&single).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn zero_noise_keeps_stats() {
        let z = RngStream::new(6).gaussian_tensor(&[3, 2, 4, 4]);
        let mut st = StyleStats::from_features(&z).unwrap();
        st.perturb_with(&[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(st.mean_sp, st.mean);
        assert_eq!(st.std_sp, st.std.map(|s| s.max(S_FLOOR)));
    }

    #[test]
    fn single_sample_batch_keeps_mean() {
        let z = RngStream::new(7).gaussian_tensor(&[1, 4, 5, 5]);
        let mut st = StyleStats::from_features(&z).unwrap();
        st.perturb(&mut RngStream::new(8)).unwrap();
        assert_eq!(st.mean_sp, st.mean);
    }

    #[test]
    fn perturbation_scale() {
        // Two samples with means -1 and +1 give a cross-batch spread of exactly 1.
        let mut data = vec![-1.0; 4];
        data.extend([1.0; 4]);
        let z = Tensor::new(vec![2, 1, 2, 2], data).unwrap();
        let st = StyleStats::from_features(&z).unwrap();
        assert_eq!(st.mean_sigma.data(), &[1.0]);
        let mut rng = RngStream::new(9).split("scale");
        let mut diffs = Vec::new();
        for _ in 0..5_000 {
            let mut s = st.clone();
            s.perturb(&mut rng).unwrap();
            for (a, b) in s.mean_sp.data().iter().zip(st.mean.data()) {
                diffs.push(a - b);
            }
        }
        let n = diffs.len() as f64;
        let m = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.97..=1.03).contains(&sd), "{sd}");
    }

    #[test]
    fn identity_restyle() {
        let z = RngStream::new(10).gaussian_tensor(&[4, 3, 5, 5]);
        let st = StyleStats::from_features(&z).unwrap();
        let out = restyle(&z, &st).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn restyle_hits_target_stats() {
        let z = RngStream::new(11).gaussian_tensor(&[4, 3, 6, 6]);
        let mut st = StyleStats::from_features(&z).unwrap();
        st.perturb(&mut RngStream::new(12)).unwrap();
        let out = restyle(&z, &st).unwrap();
        let (u, s) = instance_stats(&out).unwrap();
        assert!(u.max_abs_diff(&st.mean_sp) < 1e-9);
        assert!(s.max_abs_diff(&st.std_sp) < 1e-9);
    }

    #[test]
    fn flat_channel_becomes_target_mean() {
        let z = Tensor::full(&[2, 1, 3, 3], 2.5);
        let mut st = StyleStats::from_features(&z).unwrap();
        st.mean_sp = Tensor::new(vec![2, 1], vec![1.0, -4.0]).unwrap();
        let out = restyle(&z, &st).unwrap();
        assert!(out.data()[..9].iter().all(|&v| v == 1.0));
        assert!(out.data()[9..].iter().all(|&v| v == -4.0));
    }
}
