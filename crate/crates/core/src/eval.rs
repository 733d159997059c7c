//! Evaluation: Dice metrics, five-fold cross-validation splits, the
//! ablation runner over the paper's variants, and table rendering.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::fuse::{fuse_majority, propagate, AtlasPrior};
use crate::register::RegConfig;
use crate::segnet::{infer, train_two_stage, TwoStageConfig};
use crate::tensorad::SgdConfig;
use crate::volume::{LabelMap, RoiId, Volume3};

/// Dice overlap of one label code: 2|P∩T| / (|P|+|T|). Both sets empty
/// scores 1.0 (the ROI is legitimately absent); exactly one empty scores 0.
pub fn dice(pred: &LabelMap, truth: &LabelMap, code: u8) -> f64 {
    assert_eq!(
        pred.dims(),
        truth.dims(),
        "dice: prediction and truth grids differ"
    );
    let mut p = 0u64;
    let mut t = 0u64;
    let mut both = 0u64;
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let pa = a == code;
        let tb = b == code;
        p += pa as u64;
        t += tb as u64;
        both += (pa && tb) as u64;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    }
}

/// Disjoint five-fold partition of subject indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    /// Test subjects of fold `k`.
    pub fn test(&self, k: usize) -> &[usize] {
        &self.folds[k]
    }

    /// Training subjects of fold `k`: everything outside the test fold,
    /// in ascending order.
    pub fn train(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle followed by round-robin assignment into five folds.
pub fn five_fold(n_subjects: usize, seed: u64) -> Result<FoldSplit> {
    if n_subjects < 5 {
        return Err(CoreError::argument(format!(
            "five-fold split needs at least 5 subjects, got {}",
            n_subjects
        )));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); 5];
    for (i, subject) in order.into_iter().enumerate() {
        folds[i % 5].push(subject);
    }
    Ok(FoldSplit { folds })
}

/// Per-variant Dice scores collected across test subjects of all folds.
/// Raw values are kept in [0, 1]; presentation scales by 100.
#[derive(Debug, Clone)]
pub struct DiceReport {
    pub variant: String,
    /// Indexed by `code - 1`; one sample per test subject whose truth or
    /// prediction contains the ROI-bearing grid (all subjects).
    pub roi_scores: Vec<Vec<f64>>,
    /// Per test subject: mean Dice across the 17 ROIs.
    pub subject_means: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl DiceReport {
    pub fn new(variant: impl Into<String>) -> DiceReport {
        DiceReport {
            variant: variant.into(),
            roi_scores: vec![Vec::new(); 17],
            subject_means: Vec::new(),
        }
    }

    /// Scores one prediction against its truth and folds it into the
    /// report. ROIs absent from the truth are skipped per ROI (so a
    /// missing structure does not read as a perfect score) but still count
    /// toward the subject mean when predicted spuriously.
    pub fn add_subject(&mut self, pred: &LabelMap, truth: &LabelMap) {
        let mut subject_sum = 0.0;
        for code in 1..=17u8 {
            let d = dice(pred, truth, code);
            subject_sum += d;
            let present = truth.labels().iter().any(|&l| l == code)
                || pred.labels().iter().any(|&l| l == code);
            if present {
                self.roi_scores[code as usize - 1].push(d);
            }
        }
        self.subject_means.push(subject_sum / 17.0);
    }

    /// Mean and std (×100) for one ROI code, `None` if it never appeared.
    pub fn roi_mean_std(&self, code: u8) -> Option<(f64, f64)> {
        mean_std(&self.roi_scores[code as usize - 1]).map(|(m, s)| (m * 100.0, s * 100.0))
    }

    /// Mean and std (×100) across test subjects.
    pub fn overall_mean_std(&self) -> Option<(f64, f64)> {
        mean_std(&self.subject_means).map(|(m, s)| (m * 100.0, s * 100.0))
    }
}

/// Table-1-style summary plus a Table-2-style per-ROI grid,
/// plain text. Stds aggregate across (subject, fold); per-ROI cells that
/// never appeared render as an em dash.
pub fn render_tables(reports: &[DiceReport]) -> String {
    let mut out = String::new();
    out.push_str("Dice(%) mean ± std across test subjects of all folds\n\n");
    let width = reports
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(0)
        .max("Variant".len());
    out.push_str(&format!("{:<width$}  Dice(%)\n", "Variant", width = width));
    for r in reports {
        let cell = match r.overall_mean_std() {
            Some((m, s)) => format!("{:.2} ± {:.2}", m, s),
            None => "—".to_string(),
        };
        out.push_str(&format!("{:<width$}  {}\n", r.variant, cell, width = width));
    }
    for r in reports {
        out.push_str(&format!("\nPer-ROI Dice(%), {}\n", r.variant));
        // Table-2 layout: ROI columns grouped in rows of at most six
        for group in RoiId::ALL.chunks(6) {
            let mut header = String::new();
            let mut values = String::new();
            for roi in group {
                header.push_str(&format!("{:>14}", roi.abbrev()));
                let cell = match r.roi_mean_std(roi.code()) {
                    Some((m, s)) => format!("{:.2} ± {:.2}", m, s),
                    None => "—".to_string(),
                };
                values.push_str(&format!("{:>14}", cell));
            }
            out.push_str(&header);
            out.push('\n');
            out.push_str(&values);
            out.push('\n');
        }
    }
    out
}

/// Table-1 rows: the attention ablation plus the fused prior on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Modalities only, no attention (stands in for the plain Unet rows).
    Base,
    /// 21-channel input: modalities + fused atlas prior.
    BaseHard,
    /// Hard prior plus position attention at both bottlenecks.
    BaseHardSoft,
    /// The majority-vote consensus map itself, no network.
    MabsOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::BaseHard,
        Variant::BaseHardSoft,
        Variant::MabsOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::BaseHard => "Base + Hard",
            Variant::BaseHardSoft => "Base + Hard + Soft",
            Variant::MabsOnly => "MABS only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "base" => Ok(Variant::Base),
            "base_hard" => Ok(Variant::BaseHard),
            "base_hard_soft" => Ok(Variant::BaseHardSoft),
            "mabs_only" => Ok(Variant::MabsOnly),
            other => Err(CoreError::argument(format!(
                "unknown variant '{}' (expected base, base_hard, base_hard_soft or mabs_only)",
                other
            ))),
        }
    }

    fn use_hard(self) -> bool {
        !matches!(self, Variant::Base)
    }

    fn use_attention(self) -> bool {
        matches!(self, Variant::BaseHardSoft)
    }
}

/// Knobs shared by every variant of one ablation run.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub reg: RegConfig,
    pub levels: usize,
    pub base_channels: usize,
    pub crop_margin: usize,
    pub augment: bool,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> AblationConfig {
        // the raw-sum smoothness term grows with voxel count, so the
        // registration lambda here is far below RegConfig's default;
        // 1e-7 at 32^3 keeps the ~2-voxel phantom ROIs recoverable
        let reg = RegConfig {
            levels: 3,
            iters_per_level: 100,
            lambda_smooth: 1e-7,
            ..RegConfig::default()
        };
        AblationConfig {
            reg,
            levels: 2,
            base_channels: 6,
            crop_margin: 2,
            augment: true,
            steps: 300,
            lr: 0.02,
            seed: 0,
        }
    }
}

impl AblationConfig {
    /// Cascade architecture for one variant under these knobs.
    pub fn two_stage(&self, variant: Variant) -> TwoStageConfig {
        let mut cfg = TwoStageConfig::new(variant.use_hard(), variant.use_attention());
        for stage in [&mut cfg.coarse, &mut cfg.fine] {
            stage.levels = self.levels;
            stage.base_channels = self.base_channels;
            stage.crop_margin = self.crop_margin;
        }
        cfg.augment = self.augment;
        cfg
    }
}

/// Memoized atlas→query label propagations. A propagation depends only on
/// the (atlas, query) subject pair, so it is shared across folds and
/// variants; consensus maps for different atlas subsets reuse the entries.
pub struct PropCache<'a> {
    dataset: &'a [(Volume3, LabelMap)],
    reg: RegConfig,
    props: Mutex<HashMap<(usize, usize), LabelMap>>,
}

impl<'a> PropCache<'a> {
    pub fn new(dataset: &'a [(Volume3, LabelMap)], reg: RegConfig) -> PropCache<'a> {
        PropCache {
            dataset,
            reg,
            props: Mutex::new(HashMap::new()),
        }
    }

    /// Registers every missing (atlas, query) pair in parallel.
    fn ensure(&self, pairs: &[(usize, usize)]) -> Result<()> {
        let missing: Vec<(usize, usize)> = {
            let props = self.props.lock().expect("prop cache poisoned");
            let mut m: Vec<(usize, usize)> = pairs
                .iter()
                .copied()
                .filter(|p| !props.contains_key(p))
                .collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        let computed: Vec<((usize, usize), LabelMap)> = missing
            .par_iter()
            .map(|&(a, q)| {
                propagate(&self.dataset[a], &self.dataset[q].0, &self.reg).map(|l| ((a, q), l))
            })
            .collect::<Result<_>>()?;
        self.props
            .lock()
            .expect("prop cache poisoned")
            .extend(computed);
        Ok(())
    }

    /// Consensus label map and vote prior for one query from the given
    /// atlas subjects.
    pub fn prior(&self, atlas_ids: &[usize], query: usize) -> Result<(LabelMap, AtlasPrior)> {
        let pairs: Vec<(usize, usize)> = atlas_ids.iter().map(|&a| (a, query)).collect();
        self.ensure(&pairs)?;
        let props = self.props.lock().expect("prop cache poisoned");
        let maps: Vec<LabelMap> = pairs.iter().map(|p| props[p].clone()).collect();
        drop(props);
        fuse_majority(&maps)
    }
}

fn with_fold(k: usize, e: CoreError) -> CoreError {
    let tag = |m: String| format!("fold {}: {}", k, m);
    match e {
        CoreError::Argument(m) => CoreError::Argument(tag(m)),
        CoreError::Degenerate(m) => CoreError::Degenerate(tag(m)),
        CoreError::Resource(m) => CoreError::Resource(tag(m)),
        CoreError::Numerical(m) => CoreError::Numerical(tag(m)),
        CoreError::Format { offset, message } => CoreError::Format {
            offset,
            message: tag(message),
        },
        e @ CoreError::Io(_) => e,
    }
}

fn run_fold(
    dataset: &[(Volume3, LabelMap)],
    split: &FoldSplit,
    k: usize,
    variant: Variant,
    cfg: &AblationConfig,
    cache: &PropCache,
    report: &mut DiceReport,
) -> Result<()> {
    let train_ids = split.train(k);
    let test_ids = split.test(k);

    if variant == Variant::MabsOnly {
        for &q in test_ids {
            let (consensus, _) = cache.prior(&train_ids, q)?;
            report.add_subject(&consensus, &dataset[q].1);
        }
        return Ok(());
    }

    let subjects: Vec<(Volume3, LabelMap)> =
        train_ids.iter().map(|&i| dataset[i].clone()).collect();
    let priors = if variant.use_hard() {
        // leave-one-out within the training set, so no subject ever sees
        // a prior built from its own labels
        let mut out = Vec::with_capacity(train_ids.len());
        for &i in &train_ids {
            let atlas_ids: Vec<usize> =
                train_ids.iter().copied().filter(|&j| j != i).collect();
            out.push(cache.prior(&atlas_ids, i)?.1);
        }
        Some(out)
    } else {
        None
    };

    let sgd = SgdConfig {
        lr0: cfg.lr,
        ..SgdConfig::new(cfg.steps)
    };
    let seed = cfg.seed ^ ((variant as u64) << 32) ^ (k as u64) << 16;
    let (model, _) = train_two_stage(
        &subjects,
        priors.as_deref(),
        &cfg.two_stage(variant),
        &sgd,
        cfg.steps,
        seed,
    )?;

    for &q in test_ids {
        let prior = if variant.use_hard() {
            Some(cache.prior(&train_ids, q)?.1)
        } else {
            None
        };
        let pred = infer(&model, &dataset[q].0, prior.as_ref())?;
        report.add_subject(&pred, &dataset[q].1);
    }
    Ok(())
}

fn run_variant_cached(
    dataset: &[(Volume3, LabelMap)],
    split: &FoldSplit,
    variant: Variant,
    cfg: &AblationConfig,
    cache: &PropCache,
) -> Result<DiceReport> {
    let n: usize = split.folds().iter().map(|f| f.len()).sum();
    if n != dataset.len() {
        return Err(CoreError::argument(format!(
            "split covers {} subjects but the dataset has {}",
            n,
            dataset.len()
        )));
    }
    let mut report = DiceReport::new(variant.name());
    for k in 0..split.folds().len() {
        run_fold(dataset, split, k, variant, cfg, cache, &mut report)
            .map_err(|e| with_fold(k, e))?;
    }
    Ok(report)
}

/// Cross-validated Dice of one Table-1 variant: per fold, registers and
/// fuses the training atlases where the variant needs a prior, trains the
/// cascade, and scores every test subject.
pub fn run_variant(
    dataset: &[(Volume3, LabelMap)],
    split: &FoldSplit,
    variant: Variant,
    cfg: &AblationConfig,
) -> Result<DiceReport> {
    let cache = PropCache::new(dataset, cfg.reg);
    run_variant_cached(dataset, split, variant, cfg, &cache)
}

/// All four variants over one split, sharing one propagation cache so
/// each atlas→subject registration runs exactly once.
pub fn run_ablation(
    dataset: &[(Volume3, LabelMap)],
    split: &FoldSplit,
    cfg: &AblationConfig,
) -> Result<Vec<DiceReport>> {
    let cache = PropCache::new(dataset, cfg.reg);
    Variant::ALL
        .iter()
        .map(|&v| run_variant_cached(dataset, split, v, cfg, &cache))
        .collect()
}

/// CSV form of the same numbers: variant,roi,mean,std with an `ALL` row
/// per variant; absent ROIs leave mean/std empty.
pub fn render_csv(reports: &[DiceReport]) -> String {
    let mut out = String::from("variant,roi,mean,std\n");
    for r in reports {
        let all = r
            .overall_mean_std()
            .map(|(m, s)| format!("{:.2},{:.2}", m, s))
            .unwrap_or_else(|| ",".into());
        out.push_str(&format!("{},ALL,{}\n", r.variant, all));
        for roi in RoiId::ALL {
            let cell = r
                .roi_mean_std(roi.code())
                .map(|(m, s)| format!("{:.2},{:.2}", m, s))
                .unwrap_or_else(|| ",".into());
            out.push_str(&format!("{},{},{}\n", r.variant, roi.abbrev(), cell));
        }
    }
    out
}

/// Parses [`render_csv`] output back into (variant, roi, mean, std) rows.
pub fn parse_csv(text: &str) -> Result<Vec<(String, String, Option<(f64, f64)>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "variant,roi,mean,std" {
                return Err(CoreError::format(0, "unexpected CSV header"));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(CoreError::format(i as u64, "expected 4 CSV fields"));
        }
        let cell = if parts[2].is_empty() && parts[3].is_empty() {
            None
        } else {
            let m: f64 = parts[2]
                .parse()
                .map_err(|_| CoreError::format(i as u64, "bad mean"))?;
            let s: f64 = parts[3]
                .parse()
                .map_err(|_| CoreError::format(i as u64, "bad std"))?;
            Some((m, s))
        };
        rows.push((parts[0].to_string(), parts[1].to_string(), cell));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn map(dims: (usize, usize, usize), labels: Vec<u8>) -> LabelMap {
        LabelMap::new(dims, labels).unwrap()
    }

    #[test]
    fn dice_of_identical_maps_is_one() {
        let m = map((2, 2, 1), vec![0, 1, 1, 2]);
        assert_eq!(dice(&m, &m, 1), 1.0);
        assert_eq!(dice(&m, &m, 2), 1.0);
    }

    #[test]
    fn dice_of_disjoint_sets_is_zero() {
        let a = map((2, 1, 1), vec![1, 0]);
        let b = map((2, 1, 1), vec![0, 1]);
        assert_eq!(dice(&a, &b, 1), 0.0);
    }

    #[test]
    fn dice_empty_conventions() {
        let empty = map((2, 1, 1), vec![0, 0]);
        let full = map((2, 1, 1), vec![3, 0]);
        assert_eq!(dice(&empty, &empty, 3), 1.0);
        assert_eq!(dice(&full, &empty, 3), 0.0);
        assert_eq!(dice(&empty, &full, 3), 0.0);
    }

    #[test]
    fn dice_half_overlap_matches_recount() {
        // |P| = 4, |T| = 4, |P∩T| = 2 -> 2*2/8 = 0.5
        let p = map((8, 1, 1), vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let t = map((8, 1, 1), vec![0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&p, &t, 1), 0.5);
    }

    #[test]
    fn twenty_one_subjects_split_five_four_four_four_four() {
        let split = five_fold(21, 0).unwrap();
        let mut sizes: Vec<usize> = split.folds().iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![4, 4, 4, 4, 5]);
        let mut all: Vec<usize> = split.folds().concat();
        all.sort_unstable();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        assert_eq!(five_fold(13, 7).unwrap(), five_fold(13, 7).unwrap());
        assert_ne!(five_fold(13, 7).unwrap(), five_fold(13, 8).unwrap());
    }

    #[test]
    fn four_subjects_are_rejected() {
        assert!(matches!(five_fold(4, 0), Err(CoreError::Argument(_))));
    }

    #[test]
    fn train_test_partition_fold() {
        let split = five_fold(11, 3).unwrap();
        for k in 0..5 {
            let mut joined = split.train(k);
            joined.extend_from_slice(split.test(k));
            joined.sort_unstable();
            assert_eq!(joined, (0..11).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn fold_invariants_hold(n in 5usize..200, seed in 0u64..50) {
            let split = five_fold(n, seed).unwrap();
            let sizes: Vec<usize> = split.folds().iter().map(|f| f.len()).collect();
            let min = *sizes.iter().min().unwrap();
            let max = *sizes.iter().max().unwrap();
            prop_assert!(max - min <= 1);
            let mut all: Vec<usize> = split.folds().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn dice_matches_brute_force(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = (4, 3, 2);
            let n = 24;
            let p = map(dims, (0..n).map(|_| rng.gen_range(0..4u8)).collect());
            let t = map(dims, (0..n).map(|_| rng.gen_range(0..4u8)).collect());
            for code in 1..4u8 {
                let mut np = 0.0;
                let mut nt = 0.0;
                let mut ni = 0.0;
                for i in 0..n as usize {
                    if p.labels()[i] == code { np += 1.0; }
                    if t.labels()[i] == code { nt += 1.0; }
                    if p.labels()[i] == code && t.labels()[i] == code { ni += 1.0; }
                }
                let expect = if np + nt == 0.0 { 1.0 } else { 2.0 * ni / (np + nt) };
                prop_assert_eq!(dice(&p, &t, code), expect);
            }
        }
    }

    #[test]
    fn report_and_tables_render() {
        let mut r = DiceReport::new("base");
        let truth = map((4, 1, 1), vec![0, 1, 1, 2]);
        let pred = map((4, 1, 1), vec![0, 1, 2, 2]);
        r.add_subject(&pred, &truth);
        let (m, _) = r.roi_mean_std(1).unwrap();
        assert!((m - 2.0 / 3.0 * 100.0).abs() < 1e-9);
        assert!(r.roi_mean_std(5).is_none());
        let text = render_tables(std::slice::from_ref(&r));
        assert!(text.contains("base"));
        assert!(text.contains("±"));
        assert!(text.contains("—"), "absent ROI should render as a dash");
        // Table-2 grouping: 17 ROIs -> rows of 6, 6, 5
        let header_rows: Vec<&str> = text
            .lines()
            .filter(|l| l.contains("IR") || l.contains("CRA") || l.contains("IPL"))
            .collect();
        assert_eq!(header_rows.len(), 3);
    }

    fn copies_dataset(n: usize) -> Vec<(Volume3, LabelMap)> {
        let base = crate::phantom::make_base_atlas((24, 24, 24)).unwrap();
        vec![base; n]
    }

    #[test]
    fn mabs_only_on_identical_copies_is_near_perfect() {
        // every atlas equals the query, so propagation reduces to (at
        // worst) a tiny residual deformation and the consensus is exact
        let dataset = copies_dataset(5);
        let split = five_fold(5, 0).unwrap();
        let cfg = AblationConfig::default();
        let report = run_variant(&dataset, &split, Variant::MabsOnly, &cfg).unwrap();
        for roi in RoiId::ALL {
            let (m, _) = report.roi_mean_std(roi.code()).unwrap();
            assert!(m >= 95.0, "{}: {:.2}", roi.abbrev(), m);
        }
    }

    #[test]
    fn mabs_only_is_seed_deterministic() {
        let dataset = copies_dataset(5);
        let split = five_fold(5, 1).unwrap();
        let cfg = AblationConfig::default();
        let a = run_variant(&dataset, &split, Variant::MabsOnly, &cfg).unwrap();
        let b = run_variant(&dataset, &split, Variant::MabsOnly, &cfg).unwrap();
        assert_eq!(a.roi_scores, b.roi_scores);
        assert_eq!(a.subject_means, b.subject_means);
    }

    #[test]
    fn variant_names_parse_and_render() {
        for v in Variant::ALL {
            assert!(!v.name().is_empty());
        }
        assert_eq!(Variant::parse("base_hard_soft").unwrap(), Variant::BaseHardSoft);
        assert!(matches!(
            Variant::parse("hard"),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn split_dataset_mismatch_is_rejected() {
        let dataset = copies_dataset(5);
        let split = five_fold(6, 0).unwrap();
        let err = run_variant(&dataset, &split, Variant::MabsOnly, &AblationConfig::default());
        assert!(matches!(err, Err(CoreError::Argument(_))));
    }

    #[test]
    fn all_variants_complete_on_a_micro_dataset() {
        let phantoms = crate::phantom::make_dataset(&crate::phantom::PhantomConfig {
            dims: (24, 24, 24),
            n_subjects: 6,
            seed: 3,
            ..crate::phantom::PhantomConfig::default()
        })
        .unwrap();
        let dataset: Vec<(Volume3, LabelMap)> = phantoms
            .into_iter()
            .map(|s| (s.image, s.labels))
            .collect();
        let split = five_fold(6, 0).unwrap();
        // smoke contract only: throwaway step counts and a tiny net
        let cfg = AblationConfig {
            reg: RegConfig {
                levels: 1,
                iters_per_level: 2,
                lambda_smooth: 5e-4,
                ..RegConfig::default()
            },
            base_channels: 2,
            steps: 2,
            augment: false,
            ..AblationConfig::default()
        };
        let reports = run_ablation(&dataset, &split, &cfg).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            for roi in RoiId::ALL {
                assert!(
                    !r.roi_scores[roi.code() as usize - 1].is_empty(),
                    "{}: no samples for {}",
                    r.variant,
                    roi.abbrev()
                );
            }
            assert!(r.overall_mean_std().is_some());
        }
        let text = render_tables(&reports);
        assert!(text.contains("Base + Hard + Soft"));
    }

    #[test]
    fn csv_round_trips() {
        let mut r = DiceReport::new("base_hard");
        let truth = map((4, 1, 1), vec![0, 1, 1, 17]);
        let pred = map((4, 1, 1), vec![0, 1, 17, 17]);
        r.add_subject(&pred, &truth);
        let csv = render_csv(std::slice::from_ref(&r));
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows.len(), 18);
        assert_eq!(rows[0].0, "base_hard");
        assert_eq!(rows[0].1, "ALL");
        let (m, s) = rows[0].2.unwrap();
        let (em, es) = r.overall_mean_std().unwrap();
        assert!((m - (em * 100.0).round() / 100.0).abs() < 5e-3);
        assert!((s - (es * 100.0).round() / 100.0).abs() < 5e-3);
        // absent ROI row parses as None
        let ipr = rows.iter().find(|row| row.1 == "TSR" || row.1 == "TR").unwrap();
        assert!(ipr.2.is_none());
    }
}
