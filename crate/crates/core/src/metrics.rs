//! Fréchet distance, pairwise perceptual diversity and depth RMSE.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::config::Mode;
use crate::data::{haze_depth_probe, Triplet};
use crate::depth_ops::depth_order_valid;
use crate::error::{Error, Result};
use crate::generator::{Generated, Generator};
use crate::perceptual::{perceptual_distance, Features, RandomConvExtractor};
use crate::pipeline::sample_seeds;
use crate::tensor::{no_grad, Tensor, Var};
use crate::types::{DepthMap, SegmentationMap};

pub use nalgebra;

/// Eigenvalues below `-PSD_TOLERANCE · max(1, |λ|max)` mean "not PSD";
/// anything between that and zero is clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Shrinkage toward a scaled identity applied when a set has no more
/// samples than feature dimensions.
pub const FID_SHRINKAGE: f64 = 0.1;

fn sym_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!("{what} is not square")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NotPsd(min));
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m, what)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μ1-μ2‖² + Tr(Σ1 + Σ2 - 2(Σ1Σ2)^{1/2})`, via the symmetric form
/// `Tr((Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2})`. Rounding below zero is clipped.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::ShapeMismatch(format!(
            "moments of dimension {d} and {} with covariances {:?} {:?}",
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    sym_eigen(cov2, "second covariance")?;
    let s1 = psd_sqrt(cov1, "first covariance")?;
    let inner = &s1 * cov2 * &s1;
    let tr_sqrt: f64 = sym_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    let fd = diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

/// Sample mean and (unbiased) covariance of row vectors, with
/// [`FID_SHRINKAGE`] applied when `n <= dim`.
pub fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / ((n.max(2) - 1) as f64);
    if n <= d {
        let mu = cov.trace() / d as f64;
        cov = cov * (1.0 - FID_SHRINKAGE) + DMatrix::identity(d, d) * (FID_SHRINKAGE * mu);
    }
    Ok((mean, cov))
}

fn embed_all<F: Features>(items: &[Tensor<f32>], extractor: &F) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(16) {
        out.extend(extractor.embed(&Tensor::stack(chunk)));
    }
    out
}

/// Fréchet distance between extractor embeddings of two sets of `C×H×W` samples.
pub fn fid<F: Features>(real: &[Tensor<f32>], fake: &[Tensor<f32>], extractor: &F) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (m1, c1) = moments(&embed_all(real, extractor))?;
    let (m2, c2) = moments(&embed_all(fake, extractor))?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// Mean perceptual distance over all unordered pairs.
pub fn mean_pairwise_distance<F: Features>(samples: &[Tensor<f32>], extractor: &F) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidConfig("diversity needs at least two samples".into()));
    }
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = no_grad(|| {
                let a = Var::constant(batch1(&samples[i]).cast::<f64>());
                let b = Var::constant(batch1(&samples[j]).cast::<f64>());
                perceptual_distance(extractor, &a, &b).item()
            });
            sum += d;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

fn batch1(t: &Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

/// Network-range `C×H×W` tensor of a generator output.
pub fn generated_tensor(g: &Generated) -> Tensor<f32> {
    match g {
        Generated::Image(img) => img.to_tensor(),
        Generated::Depth(d) => d.to_signed_tensor(),
    }
}

/// Mean pairwise perceptual distance of `k` samples under fixed conditions.
pub fn diversity_lpips<F: Features>(
    generator: &Generator<f32>,
    seg: &SegmentationMap,
    depth: Option<&DepthMap>,
    k: usize,
    seed: u64,
    extractor: &F,
) -> Result<f64> {
    let z_dim = generator.config().z_dim;
    let samples = sample_seeds(seed, k)
        .into_iter()
        .map(|(zs, ns)| {
            generator
                .generate(seg, depth, &crate::generator::sample_z(z_dim, zs), ns)
                .map(|g| generated_tensor(&g))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_pairwise_distance(&samples, extractor)
}

/// RMSE on the 0–255 scale.
pub fn depth_rmse(reference: &DepthMap, estimate: &DepthMap) -> Result<f64> {
    if (reference.height(), reference.width()) != (estimate.height(), estimate.width()) {
        return Err(Error::ShapeMismatch(format!(
            "depth maps {}x{} and {}x{}",
            reference.height(),
            reference.width(),
            estimate.height(),
            estimate.width()
        )));
    }
    let n = reference.values().len() as f64;
    let sq: f64 = reference
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(a, b)| ((*a as f64 - *b as f64) * 255.0).powi(2))
        .sum();
    Ok((sq / n).sqrt())
}

/// Fraction of present label pairs ordered the same way in both maps.
pub fn order_agreement(seg: &SegmentationMap, reference: &DepthMap, estimate: &DepthMap) -> Result<f64> {
    let a = depth_order_valid(reference, seg)?;
    let b = depth_order_valid(estimate, seg)?;
    let pos = |r: &[usize], l: usize| r.iter().position(|&x| x == l).expect("same label set");
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += 1;
            agree += usize::from(pos(&b, a[i]) < pos(&b, a[j]));
        }
    }
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Samples per condition for diversity.
    pub diversity_k: usize,
    /// Number of test items (from the front) used for diversity.
    pub diversity_items: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            diversity_k: 10,
            diversity_items: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub mode: Mode,
    pub fid: f64,
    pub diversity: f64,
    pub depth_rmse: f64,
    pub order_agreement: f64,
    pub extractor: String,
    pub seed: u64,
    pub n_test: usize,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "model",
        "mode",
        "fid",
        "lpips_diversity",
        "depth_rmse",
        "order_agreement",
        "extractor",
        "seed",
        "n_test",
    ];

    fn fields(&self) -> [String; 9] {
        [
            self.model.clone(),
            self.mode.to_string(),
            format!("{:.6}", self.fid),
            format!("{:.6}", self.diversity),
            format!("{:.6}", self.depth_rmse),
            format!("{:.6}", self.order_agreement),
            self.extractor.clone(),
            self.seed.to_string(),
            self.n_test.to_string(),
        ]
    }
}

/// One CSV row per report plus a header.
pub fn write_eval_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EvalReport::CSV_HEADER).map_err(io)?;
    for r in reports {
        w.write_record(r.fields()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Depth associated with a generated sample: the output itself for S2D,
/// the haze probe of the image otherwise.
pub fn output_depth(g: &Generated, seg: &SegmentationMap) -> Result<DepthMap> {
    match g {
        Generated::Depth(d) => Ok(d.clone()),
        Generated::Image(img) => haze_depth_probe(img, seg),
    }
}

fn depth_input(mode: Mode, t: &Triplet) -> Option<&DepthMap> {
    mode.uses_depth_input().then_some(&t.depth)
}

/// FID, diversity, depth RMSE and order agreement on `test`. One sample per
/// test item is drawn with seeds derived from `config.seed`.
pub fn evaluate_model(name: &str, generator: &Generator<f32>, test: &[Triplet], config: &EvalConfig) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mode = generator.config().mode;
    let extractor = RandomConvExtractor::default_for(mode.output_channels());
    let z_dim = generator.config().z_dim;
    let outputs = sample_seeds(config.seed, test.len())
        .into_iter()
        .zip(test)
        .map(|((zs, ns), t)| generator.generate(&t.seg, depth_input(mode, t), &crate::generator::sample_z(z_dim, zs), ns))
        .collect::<Result<Vec<_>>>()?;
    let div_items = config.diversity_items.clamp(1, test.len());
    let mut diversity = 0.0;
    for (i, t) in test[..div_items].iter().enumerate() {
        diversity += diversity_lpips(
            generator,
            &t.seg,
            depth_input(mode, t),
            config.diversity_k,
            config.seed.wrapping_add(1 + i as u64),
            &extractor,
        )?;
    }
    let mut report = score_outputs(name, test, &outputs, diversity / div_items as f64, config.seed)?;
    report.mode = mode;
    Ok(report)
}

/// FID, depth RMSE and order agreement of `outputs[i]` against `test[i]`.
/// Image depth comes from [`haze_depth_probe`], so real images scored
/// against themselves give the probe's error, not zero. Image outputs are
/// reported as `sd2i`.
pub fn score_outputs(name: &str, test: &[Triplet], outputs: &[Generated], diversity: f64, seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if outputs.len() != test.len() {
        return Err(Error::ShapeMismatch(format!("{} outputs for {} test items", outputs.len(), test.len())));
    }
    let mode = match outputs[0] {
        Generated::Depth(_) => Mode::S2d,
        Generated::Image(_) => Mode::Sd2i,
    };
    let extractor = RandomConvExtractor::default_for(mode.output_channels());
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    let (mut rmse, mut agree) = (0.0, 0.0);
    for (t, g) in test.iter().zip(outputs) {
        let est = output_depth(g, &t.seg)?;
        rmse += depth_rmse(&t.depth, &est)?;
        agree += order_agreement(&t.seg, &t.depth, &est)?;
        real.push(match g {
            Generated::Depth(_) => t.depth.to_signed_tensor(),
            Generated::Image(_) => t.image.to_tensor(),
        });
        fake.push(generated_tensor(g));
    }
    let n = test.len() as f64;
    Ok(EvalReport {
        model: name.to_string(),
        mode,
        fid: fid(&real, &fake, &extractor)?,
        diversity,
        depth_rmse: rmse / n,
        order_agreement: agree / n,
        extractor: extractor.id().to_string(),
        seed,
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn analytic_frechet_cases() {
        let eye1 = DMatrix::identity(1, 1);
        let d = frechet_distance(&DVector::from_vec(vec![0.0]), &eye1, &DVector::from_vec(vec![1.0]), &eye1).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        let eye2 = DMatrix::identity(2, 2);
        let d = frechet_distance(
            &DVector::from_vec(vec![0.0, 0.0]),
            &eye2,
            &DVector::from_vec(vec![3.0, 4.0]),
            &eye2,
        )
        .unwrap();
        assert!((d - 25.0).abs() < 1e-9);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            frechet_distance(&DVector::zeros(2), &bad, &DVector::zeros(2), &eye2),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn diagonal_covariances_match_closed_form() {
        // For commuting covariances the trace term is Σ (√a - √b)².
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 9.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 4.0]));
        let d = frechet_distance(&DVector::zeros(3), &a, &DVector::zeros(3), &b).unwrap();
        assert!((d - (1.0 + 0.0 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn self_comparison() {
        let test = crate::data::Dataset::synthetic(4, 6, 16).unwrap().triplets;
        let depths: Vec<Generated> = test.iter().map(|t| Generated::Depth(t.depth.clone())).collect();
        let r = score_outputs("gt", &test, &depths, 0.0, 0).unwrap();
        assert!(r.fid < 1e-6 && r.depth_rmse == 0.0 && r.order_agreement == 1.0, "{r:?}");
        let images: Vec<Generated> = test.iter().map(|t| Generated::Image(t.image.clone())).collect();
        let r = score_outputs("gt", &test, &images, 0.0, 0).unwrap();
        assert!(r.fid < 1e-6 && r.depth_rmse < 25.5, "{r:?}");
        let mut csv = Vec::new();
        write_eval_csv(&mut csv, &[r.clone(), r]).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn collapsed_generator_has_zero_diversity() {
        let x = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i as f32 * 0.1).sin()).collect());
        let e = RandomConvExtractor::default_for(3);
        assert_eq!(mean_pairwise_distance(&[x.clone(), x.clone(), x.clone()], &e).unwrap(), 0.0);
        let y = x.map(|v| -v);
        let two = mean_pairwise_distance(&[x.clone(), y.clone()], &e).unwrap();
        let direct = no_grad(|| {
            perceptual_distance(&e, &Var::constant(batch1(&x).cast::<f64>()), &Var::constant(batch1(&y).cast::<f64>())).item()
        });
        assert_eq!(two, direct);
    }

    #[test]
    fn rmse_constant_offset() {
        let a = DepthMap::constant(8, 8, 0.25).unwrap();
        let b = DepthMap::constant(8, 8, 0.35).unwrap();
        assert!((depth_rmse(&a, &b).unwrap() - 25.5).abs() < 1e-4);
        assert_eq!(depth_rmse(&a, &a).unwrap(), 0.0);
    }

    fn spd(seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(3, 3, seed);
        &a * a.transpose() + DMatrix::identity(3, 3) * 0.1
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric_and_zero_on_identical(
            m in proptest::collection::vec(-3.0f64..3.0, 6),
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 9),
        ) {
            let (m1, m2) = (DVector::from_vec(m[..3].to_vec()), DVector::from_vec(m[3..].to_vec()));
            let (c1, c2) = (spd(&a), spd(&b));
            let ab = frechet_distance(&m1, &c1, &m2, &c2).unwrap();
            let ba = frechet_distance(&m2, &c2, &m1, &c1).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-7 * (1.0 + ab));
            prop_assert!(frechet_distance(&m1, &c1, &m1, &c1).unwrap() < 1e-9);
        }

        #[test]
        fn rmse_is_symmetric(
            x in proptest::collection::vec(0.0f32..=1.0, 64),
            y in proptest::collection::vec(0.0f32..=1.0, 64),
        ) {
            let (a, b) = (DepthMap::new(8, 8, x).unwrap(), DepthMap::new(8, 8, y).unwrap());
            prop_assert_eq!(depth_rmse(&a, &b).unwrap(), depth_rmse(&b, &a).unwrap());
        }
    }
}
