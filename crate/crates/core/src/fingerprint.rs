//! Reference patterns, correlation and camera matching.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerKind};
use crate::denoise::FrameResidue;
use crate::error::{Error, Result};
use crate::raster::{CfaChannel, CfaLayout, CfaStack};

/// Pearson correlation of two equally shaped arrays, flattened.
///
/// Fails when either array has zero variance.
pub fn correlate(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("cannot correlate {:?} with {:?}", x.dim(), y.dim())));
    }
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput {
            plane: String::from("?"),
            reason: String::from("constant input has no centred norm"),
        });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Frame-averaged residue of one camera/lens combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePattern {
    pub stack: CfaStack,
    pub frame_count: usize,
    pub camera_id: String,
    pub lens_id: String,
    pub config_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct ReferenceHeader {
    camera_id: String,
    lens_id: String,
    frame_count: usize,
    cfa_layout: CfaLayout,
}

impl ReferencePattern {
    /// `<camera>_<lens>`, also the file stem.
    pub fn id(&self) -> String {
        reference_id(&self.camera_id, &self.lens_id)
    }

    pub fn to_container(&self) -> Container {
        let header = ReferenceHeader {
            camera_id: self.camera_id.clone(),
            lens_id: self.lens_id.clone(),
            frame_count: self.frame_count,
            cfa_layout: self.stack.layout(),
        };
        Container {
            kind: ContainerKind::Reference,
            config_hash: self.config_hash,
            meta: serde_json::to_value(header).expect("header serialises"),
            planes: self.stack.planes().to_vec(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind(ContainerKind::Reference)?;
        let h: ReferenceHeader =
            serde_json::from_value(c.meta).map_err(|e| Error::Decode(format!("reference header: {e}")))?;
        let planes: [Array2<f64>; 4] = c
            .planes
            .try_into()
            .map_err(|p: Vec<_>| Error::Decode(format!("reference holds {} planes, expected 4", p.len())))?;
        if h.frame_count == 0 {
            return Err(Error::Decode("reference with zero frames".into()));
        }
        Ok(ReferencePattern {
            stack: CfaStack::new(planes, h.cfa_layout)?,
            frame_count: h.frame_count,
            camera_id: h.camera_id,
            lens_id: h.lens_id,
            config_hash: c.config_hash,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        ReferencePattern::from_container(Container::read(path)?)
    }
}

pub fn reference_id(camera_id: &str, lens_id: &str) -> String {
    format!("{camera_id}_{lens_id}")
}

/// Running element-wise mean of frame residues.
#[derive(Debug, Default)]
pub struct ReferenceBuilder {
    sum: Option<[Array2<f64>; 4]>,
    count: usize,
    first: Option<(String, String, u64, CfaLayout)>,
}

impl ReferenceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, r: &FrameResidue) -> Result<()> {
        match &mut self.sum {
            None => {
                self.sum = Some(r.stack.planes().clone());
                self.first = Some((
                    r.meta.camera_id.clone(),
                    r.meta.lens_id.clone(),
                    r.config_hash,
                    r.stack.layout(),
                ));
            }
            Some(sum) => {
                if sum[0].dim() != r.stack.plane_dim() {
                    return Err(Error::Validation(format!(
                        "residue {} has planes {:?}, reference has {:?}",
                        r.image_id,
                        r.stack.plane_dim(),
                        sum[0].dim()
                    )));
                }
                let (_, _, hash, _) = self.first.as_ref().expect("set with sum");
                if *hash != r.config_hash {
                    return Err(Error::Validation(format!(
                        "residue {} was produced with a different filter configuration",
                        r.image_id
                    )));
                }
                for (acc, p) in sum.iter_mut().zip(r.stack.planes()) {
                    *acc += p;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Merges another partial accumulation (for parallel folds).
    pub fn merge(mut self, other: ReferenceBuilder) -> Result<Self> {
        match (&mut self.sum, other.sum) {
            (_, None) => {}
            (None, Some(s)) => {
                self.sum = Some(s);
                self.first = other.first;
            }
            (Some(a), Some(b)) => {
                if a[0].dim() != b[0].dim() {
                    return Err(Error::Validation("partial references differ in shape".into()));
                }
                if self.first.as_ref().map(|f| f.2) != other.first.as_ref().map(|f| f.2) {
                    return Err(Error::Validation("partial references differ in filter configuration".into()));
                }
                for (acc, p) in a.iter_mut().zip(b.iter()) {
                    *acc += p;
                }
            }
        }
        self.count += other.count;
        Ok(self)
    }

    pub fn finish(self) -> Result<ReferencePattern> {
        let (Some(sum), Some((camera_id, lens_id, config_hash, layout))) = (self.sum, self.first) else {
            return Err(Error::Protocol("a reference needs at least one residue".into()));
        };
        let n = self.count as f64;
        let planes = sum.map(|p| p / n);
        Ok(ReferencePattern {
            stack: CfaStack::new(planes, layout)?,
            frame_count: self.count,
            camera_id,
            lens_id,
            config_hash,
        })
    }
}

/// Element-wise mean of the residues; provenance is taken from the first.
pub fn build_reference(residues: &[FrameResidue]) -> Result<ReferencePattern> {
    let mut b = ReferenceBuilder::new();
    for r in residues {
        b.add(r)?;
    }
    b.finish()
}

/// Correlation of one image under test against one reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub per_plane: [f64; 4],
    pub value: f64,
    pub image_id: String,
    pub reference_id: String,
}

/// Correlates each CFA plane of `iut` with its counterpart in `reference`
/// and averages the four values.
pub fn match_residue(reference: &ReferencePattern, iut: &FrameResidue) -> Result<MatchScore> {
    if reference.stack.plane_dim() != iut.stack.plane_dim() {
        return Err(Error::Shape(format!(
            "image {} planes {:?} vs reference {} planes {:?}",
            iut.image_id,
            iut.stack.plane_dim(),
            reference.id(),
            reference.stack.plane_dim()
        )));
    }
    let mut per_plane = [0.0; 4];
    for c in CfaChannel::ALL {
        per_plane[c.index()] = correlate(reference.stack.plane(c), iut.plane(c)).map_err(|e| match e {
            Error::DegenerateInput { reason, .. } => Error::DegenerateInput {
                plane: format!("{c} ({} vs {})", iut.image_id, reference.id()),
                reason,
            },
            other => other,
        })?;
    }
    Ok(MatchScore {
        per_plane,
        value: per_plane.iter().sum::<f64>() / 4.0,
        image_id: iut.image_id.clone(),
        reference_id: reference.id(),
    })
}

/// One row of the score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub camera_id: String,
    pub lens_id: String,
    pub ref_id: String,
    pub image_id: String,
    #[serde(rename = "corr_R")]
    pub corr_r: f64,
    #[serde(rename = "corr_G1")]
    pub corr_g1: f64,
    #[serde(rename = "corr_G2")]
    pub corr_g2: f64,
    #[serde(rename = "corr_B")]
    pub corr_b: f64,
    pub corr_mean: f64,
}

impl ScoreRow {
    pub fn new(score: MatchScore, iut: &FrameResidue) -> Self {
        let [r, g1, g2, b] = score.per_plane;
        ScoreRow {
            camera_id: iut.meta.camera_id.clone(),
            lens_id: iut.meta.lens_id.clone(),
            ref_id: score.reference_id,
            image_id: score.image_id,
            corr_r: r,
            corr_g1: g1,
            corr_g2: g2,
            corr_b: b,
            corr_mean: score.value,
        }
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        (&self.ref_id, &self.image_id).cmp(&(&other.ref_id, &other.image_id))
    }
}

/// Full reference x image cross product, sorted by `(ref_id, image_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn from_rows(mut rows: Vec<ScoreRow>) -> Self {
        rows.sort_by(ScoreRow::key_cmp);
        ScoreTable { rows }
    }

    pub fn extend(&mut self, other: ScoreTable) {
        self.rows.extend(other.rows);
        self.rows.sort_by(ScoreRow::key_cmp);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "camera_id", "lens_id", "ref_id", "image_id", "corr_R", "corr_G1", "corr_G2", "corr_B", "corr_mean",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::Validation(format!("csv flush: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Ingestion { path: path.to_path_buf() });
        }
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
        Ok(ScoreTable::from_rows(rows))
    }
}

/// Matches every image against every reference.
pub fn batch_match(refs: &[ReferencePattern], images: &[FrameResidue]) -> Result<ScoreTable> {
    let rows = refs
        .par_iter()
        .flat_map_iter(|r| images.iter().map(move |img| (r, img)))
        .map(|(r, img)| match_residue(r, img).map(|s| ScoreRow::new(s, img)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable::from_rows(rows))
}

/// File-based variant: every path is checked before any work starts.
pub fn batch_match_files(ref_paths: &[PathBuf], residue_paths: &[PathBuf]) -> Result<ScoreTable> {
    if let Some(missing) = ref_paths.iter().chain(residue_paths).find(|p| !p.exists()) {
        return Err(Error::Ingestion { path: missing.clone() });
    }
    let refs = ref_paths
        .iter()
        .map(|p| ReferencePattern::read(p))
        .collect::<Result<Vec<_>>>()?;
    let images = residue_paths
        .par_iter()
        .map(|p| FrameResidue::read(p))
        .collect::<Result<Vec<_>>>()?;
    batch_match(&refs, &images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CaptureMeta;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gauss(rng: &mut ChaCha8Rng, dim: (usize, usize), sd: f64) -> Array2<f64> {
        let n = Normal::new(0.0, sd).unwrap();
        Array2::from_shape_fn(dim, |_| n.sample(rng))
    }

    fn residue(id: &str, camera: &str, planes: [Array2<f64>; 4]) -> FrameResidue {
        FrameResidue {
            image_id: id.into(),
            stack: CfaStack::new(planes, CfaLayout::Rggb).unwrap(),
            config_hash: 42,
            meta: CaptureMeta {
                camera_id: camera.into(),
                lens_id: "L1".into(),
                ..CaptureMeta::default()
            },
        }
    }

    fn random_residue(seed: u64, dim: (usize, usize)) -> FrameResidue {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        residue(&format!("img{seed}"), "cam", std::array::from_fn(|_| gauss(&mut rng, dim, 1.0)))
    }

    #[test]
    fn hand_computed_pearson() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        assert!((correlate(&x, &array![[2.0, 4.0, 6.0, 8.0]]).unwrap() - 1.0).abs() < 1e-12);
        assert!((correlate(&x, &array![[1.0, 3.0, 2.0, 4.0]]).unwrap() - 0.8).abs() < 1e-12);
        assert!((correlate(&x, &x.mapv(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlate_errors() {
        let x = array![[1.0, 2.0]];
        assert!(matches!(correlate(&x, &array![[3.0, 3.0]]), Err(Error::DegenerateInput { .. })));
        assert!(matches!(correlate(&x, &array![[1.0], [2.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn reference_means() {
        let a = random_residue(1, (4, 4));
        let r = build_reference(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(r.frame_count, 3);
        for c in CfaChannel::ALL {
            for (p, q) in r.stack.plane(c).iter().zip(a.plane(c).iter()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
        let neg = FrameResidue {
            stack: a.stack.try_map(|_, p| Ok(-p)).unwrap(),
            ..a.clone()
        };
        let z = build_reference(&[a.clone(), neg]).unwrap();
        assert!(z.stack.planes().iter().all(|p| p.iter().all(|&v| v == 0.0)));
        assert!(matches!(build_reference(&[]), Err(Error::Protocol(_))));

        let other = random_residue(2, (4, 6));
        assert!(matches!(build_reference(&[a, other]), Err(Error::Validation(_))));
    }

    #[test]
    fn reference_converges_to_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dim = (64, 64);
        let sigma = 1.0;
        let pattern: [Array2<f64>; 4] = std::array::from_fn(|_| gauss(&mut rng, dim, 0.3));
        let frames: Vec<_> = (0..50)
            .map(|i| {
                let planes = std::array::from_fn(|k| &pattern[k] + &gauss(&mut rng, dim, sigma));
                residue(&format!("f{i}"), "cam", planes)
            })
            .collect();
        let r = build_reference(&frames).unwrap();
        let mse: f64 = CfaChannel::ALL
            .iter()
            .map(|&c| (r.stack.plane(c) - &pattern[c.index()]).mapv(|v| v * v).sum())
            .sum::<f64>()
            / (4 * 64 * 64) as f64;
        let expect = sigma / 50f64.sqrt();
        assert!((mse.sqrt() / expect - 1.0).abs() < 0.05, "rms {} vs {expect}", mse.sqrt());
    }

    #[test]
    fn averaging_law_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = (32, 32);
        let pattern: [Array2<f64>; 4] = std::array::from_fn(|_| gauss(&mut rng, dim, 0.5));
        let mut pts = Vec::new();
        for k in 0..=6 {
            let n = 1usize << k;
            let frames: Vec<_> = (0..n)
                .map(|i| {
                    let planes = std::array::from_fn(|p| &pattern[p] + &gauss(&mut rng, dim, 1.0));
                    residue(&format!("f{i}"), "cam", planes)
                })
                .collect();
            let r = build_reference(&frames).unwrap();
            let d2: f64 = CfaChannel::ALL
                .iter()
                .map(|&c| (r.stack.plane(c) - &pattern[c.index()]).mapv(|v| v * v).sum())
                .sum();
            pts.push(((n as f64).ln(), (d2 / (4 * 32 * 32) as f64).ln()));
        }
        let slope = crate::stats::ols_slope(&pts);
        assert!((slope + 1.0).abs() < 0.15, "slope {slope}");
    }

    #[test]
    fn match_self_is_one_and_mean_is_exact() {
        let a = random_residue(5, (8, 8));
        let r = build_reference(std::slice::from_ref(&a)).unwrap();
        let s = match_residue(&r, &a).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        assert_eq!(s.value, s.per_plane.iter().sum::<f64>() / 4.0);
        assert_eq!(s.reference_id, "cam_L1");
    }

    #[test]
    fn match_names_degenerate_plane() {
        let a = random_residue(5, (8, 8));
        let r = build_reference(std::slice::from_ref(&a)).unwrap();
        let mut planes = a.stack.planes().clone();
        planes[2] = Array2::zeros((8, 8));
        let bad = residue("flat", "cam", planes);
        match match_residue(&r, &bad) {
            Err(Error::DegenerateInput { plane, .. }) => assert!(plane.starts_with("G2")),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn null_distribution_bound() {
        let dim = (32, 32);
        let bound = 3.0 / ((dim.0 * dim.1) as f64).sqrt();
        let reference = build_reference(&[random_residue(1000, dim)]).unwrap();
        let fails = (0..300)
            .filter(|&s| match_residue(&reference, &random_residue(s, dim)).unwrap().value.abs() >= bound)
            .count();
        assert!(fails <= 3, "{fails} of 300 exceeded the bound");
    }

    #[test]
    fn batch_cardinality_and_order() {
        let imgs: Vec<_> = (0..100).map(|s| random_residue(s, (4, 4))).collect();
        let refs: Vec<_> = (0..21)
            .map(|k| {
                let mut r = build_reference(&[random_residue(500 + k, (4, 4))]).unwrap();
                r.lens_id = format!("L{k:02}");
                r
            })
            .collect();
        let t = batch_match(&refs, &imgs).unwrap();
        assert_eq!(t.len(), 2100);
        assert!(t.rows.windows(2).all(|w| w[0].key_cmp(&w[1]) != Ordering::Greater));

        let one = batch_match(&refs[..1], &imgs[..1]).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn csv_and_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<_> = (0..3).map(|s| random_residue(s, (4, 4))).collect();
        let reference = build_reference(&imgs).unwrap();
        let ref_path = dir.path().join(format!("{}.ref", reference.id()));
        reference.write(&ref_path).unwrap();
        assert_eq!(ReferencePattern::read(&ref_path).unwrap(), reference);

        let mut res_paths = Vec::new();
        for img in &imgs {
            let p = dir.path().join(format!("{}.res", img.image_id));
            img.write(&p).unwrap();
            res_paths.push(p);
        }
        let t = batch_match_files(std::slice::from_ref(&ref_path), &res_paths).unwrap();
        assert_eq!(t, batch_match(&[reference], &imgs).unwrap());
        let csv_path = dir.path().join("s.csv");
        t.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("camera_id,lens_id,ref_id,image_id,corr_R,corr_G1,corr_G2,corr_B,corr_mean\n"));
        assert_eq!(ScoreTable::read_csv(&csv_path).unwrap(), t);

        let missing = dir.path().join("nope.res");
        match batch_match_files(&[ref_path], std::slice::from_ref(&missing)) {
            Err(Error::Ingestion { path }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn correlation_invariants(
            v in proptest::collection::vec(-10.0f64..10.0, 16),
            u in proptest::collection::vec(-10.0f64..10.0, 16),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            let x = Array2::from_shape_vec((4, 4), v).unwrap();
            let y = Array2::from_shape_vec((4, 4), u).unwrap();
            prop_assume!(x.std(0.0) > 1e-3 && y.std(0.0) > 1e-3);
            let c = correlate(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((c - correlate(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!((correlate(&x, &x).unwrap() - 1.0).abs() < 1e-12);
            let ax = x.mapv(|t| a * t + b);
            prop_assert!((correlate(&ax, &y).unwrap() - c).abs() < 1e-12);
            let nx = x.mapv(|t| -a * t + b);
            prop_assert!((correlate(&nx, &y).unwrap() + c).abs() < 1e-12);
        }

        #[test]
        fn reference_permutation_invariant(seed in any::<u64>(), rot in 0usize..5) {
            let imgs: Vec<_> = (0..5).map(|k| random_residue(seed.wrapping_add(k), (4, 4))).collect();
            let mut shuffled = imgs.clone();
            shuffled.rotate_left(rot);
            shuffled.swap(0, 4);
            let a = build_reference(&imgs).unwrap();
            let b = build_reference(&shuffled).unwrap();
            for c in CfaChannel::ALL {
                for (p, q) in a.stack.plane(c).iter().zip(b.stack.plane(c).iter()) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
