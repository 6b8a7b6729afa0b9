//! Empirical evaluation: perturb a known truth with its sampling variances,
//! refit the models on each perturbed copy, and score the posterior-mean
//! log-scale predictions against the truth.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::design::{build_design, DesignOptions};
use crate::fay_herriot::{fit_fh, FhConfig};
use crate::gaussian::Gaussian;
use crate::graph::{build_adjacency, SpatialStructure};
use crate::mixture::{canonical_labels, fit_msmm, MixtureConfig};
use crate::moran::{BasisSize, MoranBasis};
use crate::msm::{fit_msm, MsmConfig};
use crate::observations::Observations;
use crate::par::map_indexed;
use crate::posterior::{format_float, predict_summaries};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tabulation::LogTable;
use crate::{Error, Result};

/// `R_i = Z_i + ε_i`, `ε_i ~ N(0, d_i)`; variances are carried over.
pub fn perturb<R: Rng + ?Sized>(truth: &LogTable, rng: &mut R) -> Result<LogTable> {
    let d = truth.variances()?;
    let z = truth
        .z
        .iter()
        .zip(&d)
        .map(|(z, d)| {
            let e: f64 = StandardNormal.sample(rng);
            z + d.sqrt() * e
        })
        .collect();
    truth.with_values(z)
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("nothing to score".into()));
    }
    Ok(())
}

/// Median of `|pred − truth|`; midpoint of the central pair for even lengths.
pub fn mab(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    Ok(median(&mut abs))
}

/// Mean of `(pred − truth)²`.
pub fn amse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of item pairs on which two partitions agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("partitions differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("rand index needs at least two items".into()));
    }
    let n = a.len();
    let mut agree = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StudyModel {
    Msmm,
    Fh,
    Msm,
}

impl StudyModel {
    pub fn name(self) -> &'static str {
        match self {
            StudyModel::Msmm => "msmm",
            StudyModel::Fh => "fh",
            StudyModel::Msm => "msm",
        }
    }

    fn stage(self) -> u64 {
        match self {
            StudyModel::Msmm => 1,
            StudyModel::Fh => 2,
            StudyModel::Msm => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub replicates: usize,
    pub seed: u64,
    pub msmm: MixtureConfig,
    pub fh: FhConfig,
    /// Also fit the single-field model when set.
    pub msm: Option<MsmConfig>,
    /// Truth table; variances must be complete.
    pub truth: LogTable,
    pub design: DMatrix<f64>,
    pub basis: MoranBasis,
    /// Generating split of the observations, scored with the Rand index
    /// against the mixture's point partition.
    pub truth_partition: Option<Vec<usize>>,
    pub parallel: bool,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        self.msmm.validate()?;
        self.fh.validate()?;
        if let Some(msm) = &self.msm {
            msm.validate()?;
        }
        let n = self.truth.len();
        if self.design.nrows() != n || self.basis.psi.nrows() != n {
            return Err(Error::Shape(format!(
                "truth has {n} entries, design {} rows, basis {} rows",
                self.design.nrows(),
                self.basis.psi.nrows()
            )));
        }
        if matches!(&self.truth_partition, Some(p) if p.len() != n) {
            return Err(Error::Shape("truth partition length differs from the table".into()));
        }
        self.truth.variances()?;
        Ok(())
    }

    pub fn models(&self) -> Vec<StudyModel> {
        let mut m = vec![StudyModel::Msmm, StudyModel::Fh];
        if self.msm.is_some() {
            m.push(StudyModel::Msm);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mab: f64,
    pub amse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub model: StudyModel,
    /// `Err` holds the failure message of a divergent fit.
    pub scores: std::result::Result<Scores, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub outcomes: Vec<ModelOutcome>,
    pub rand_index: Option<f64>,
    pub modal_clusters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model: StudyModel,
    pub scored: usize,
    pub excluded: usize,
    pub mab: Option<Quartiles>,
    pub amse: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub replicates: Vec<ReplicateResult>,
    pub summaries: Vec<ModelSummary>,
}

impl StudyResult {
    fn from_replicates(models: &[StudyModel], replicates: Vec<ReplicateResult>) -> Self {
        let summaries = models
            .iter()
            .map(|&model| {
                let outcomes: Vec<&ModelOutcome> = replicates
                    .iter()
                    .flat_map(|r| r.outcomes.iter().filter(move |o| o.model == model))
                    .collect();
                let ok: Vec<Scores> = outcomes.iter().filter_map(|o| o.scores.as_ref().ok().copied()).collect();
                ModelSummary {
                    model,
                    scored: ok.len(),
                    excluded: outcomes.len() - ok.len(),
                    mab: Quartiles::of(&ok.iter().map(|s| s.mab).collect::<Vec<_>>()),
                    amse: Quartiles::of(&ok.iter().map(|s| s.amse).collect::<Vec<_>>()),
                }
            })
            .collect();
        Self { replicates, summaries }
    }

    pub fn summary(&self, model: StudyModel) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.model == model)
    }

    /// Scores of one model over the replicates where it converged.
    pub fn scores(&self, model: StudyModel) -> Vec<Scores> {
        self.replicates
            .iter()
            .flat_map(|r| r.outcomes.iter())
            .filter(|o| o.model == model)
            .filter_map(|o| o.scores.as_ref().ok().copied())
            .collect()
    }

    pub fn rand_indices(&self) -> Vec<f64> {
        self.replicates.iter().filter_map(|r| r.rand_index).collect()
    }

    /// Per-replicate rows, then a summary block (`model,statistic,mab,amse`),
    /// then, when partitions were scored, `replicate,rand_index,clusters`.
    /// Failed fits leave `mab` and `amse` empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "replicate,model,mab,amse")?;
        for r in &self.replicates {
            for o in &r.outcomes {
                match &o.scores {
                    Ok(s) => writeln!(w, "{},{},{},{}", r.replicate, o.model.name(), format_float(s.mab), format_float(s.amse))?,
                    Err(_) => writeln!(w, "{},{},,", r.replicate, o.model.name())?,
                }
            }
        }
        writeln!(w)?;
        writeln!(w, "model,statistic,mab,amse")?;
        for s in &self.summaries {
            let name = s.model.name();
            writeln!(w, "{name},scored,{},{}", s.scored, s.scored)?;
            writeln!(w, "{name},excluded,{},{}", s.excluded, s.excluded)?;
            if let (Some(m), Some(a)) = (s.mab, s.amse) {
                for (stat, mv, av) in [
                    ("min", m.min, a.min),
                    ("q1", m.q1, a.q1),
                    ("median", m.median, a.median),
                    ("q3", m.q3, a.q3),
                    ("max", m.max, a.max),
                ] {
                    writeln!(w, "{name},{stat},{},{}", format_float(mv), format_float(av))?;
                }
            }
        }
        if self.replicates.iter().any(|r| r.rand_index.is_some()) {
            writeln!(w)?;
            writeln!(w, "replicate,rand_index,clusters")?;
            for r in &self.replicates {
                let ri = r.rand_index.map(format_float).unwrap_or_default();
                let k = r.modal_clusters.map(|k| k.to_string()).unwrap_or_default();
                writeln!(w, "{},{ri},{k}", r.replicate)?;
            }
        }
        Ok(())
    }
}

/// Runs one replicate; its seeds depend only on `(master, replicate)`.
pub fn run_replicate(config: &StudyConfig, replicate: usize) -> Result<ReplicateResult> {
    let mut rng = rng_from_seed(derive_seed(config.seed, &[replicate as u64, 0]));
    let perturbed = perturb(&config.truth, &mut rng)?;
    let obs = Observations::from_log_table(&perturbed)?;
    let truth = &config.truth.z;
    let seed_for = |model: StudyModel| derive_seed(config.seed, &[replicate as u64, model.stage()]);
    let score = |latent: Result<Vec<f64>>| -> std::result::Result<Scores, String> {
        let pred = latent.map_err(|e| e.to_string())?;
        Ok(Scores {
            mab: mab(&pred, truth).map_err(|e| e.to_string())?,
            amse: amse(&pred, truth).map_err(|e| e.to_string())?,
        })
    };

    let mut outcomes = Vec::new();
    let mut rand = None;
    let mut modal = None;
    for model in config.models() {
        let seed = seed_for(model);
        let latent = match model {
            StudyModel::Msmm => {
                let mut mc = config.msmm;
                mc.mcmc.seed = seed;
                mc.keep_assignments |= config.truth_partition.is_some();
                fit_msmm(&obs, &config.design, &config.basis, &mc).and_then(|fit| {
                    modal = fit.modal_clusters();
                    if let (Some(truth_split), Some(point)) = (&config.truth_partition, fit.point_partition()) {
                        rand = Some(rand_index(&canonical_labels(truth_split), &point)?);
                    }
                    Ok(predict_summaries(&fit.draws)?.mean)
                })
            }
            StudyModel::Fh => {
                let mut fc = config.fh;
                fc.mcmc.seed = seed;
                fit_fh(&obs, &config.design, &fc).and_then(|d| Ok(predict_summaries(&d)?.mean))
            }
            StudyModel::Msm => {
                let mut mc = config.msm.expect("listed only when configured");
                mc.mcmc.seed = seed;
                fit_msm(&obs, &config.design, &config.basis, &mc).and_then(|d| Ok(predict_summaries(&d)?.mean))
            }
        };
        let scores = score(latent);
        if let Err(msg) = &scores {
            log::warn!("replicate {replicate}, {}: {msg}", model.name());
        }
        outcomes.push(ModelOutcome { model, scores });
    }
    Ok(ReplicateResult {
        replicate,
        outcomes,
        rand_index: rand,
        modal_clusters: modal,
    })
}

/// Runs every replicate, concurrently when `config.parallel` is set and the
/// `parallel` feature is enabled. Results are ordered by replicate index.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let replicates = map_indexed(config.replicates, config.parallel, |r| run_replicate(config, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult::from_replicates(&config.models(), replicates))
}

/// Synthetic truth on a square grid where two groups of cells follow
/// different spatial fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoFieldFixture {
    pub truth: LogTable,
    pub design: DMatrix<f64>,
    pub basis: MoranBasis,
    pub spatial: SpatialStructure,
    /// 0 for cells in the first half, 1 for the second half.
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoFieldSpec {
    pub side: usize,
    pub cells: usize,
    /// Root-mean-square of the first and second spatial fields.
    pub scales: (f64, f64),
    /// Sampling variances are drawn uniformly from this range...
    pub variance_range: (f64, f64),
    /// ...except for this fraction of entries (small cells), drawn from
    /// `noisy_range`.
    pub noisy_fraction: f64,
    pub noisy_range: (f64, f64),
    pub basis_size: BasisSize,
}

impl Default for TwoFieldSpec {
    fn default() -> Self {
        Self {
            side: 6,
            cells: 4,
            scales: (3.0, 1.0),
            variance_range: (0.05, 0.15),
            noisy_fraction: 0.1,
            noisy_range: (1.0, 3.0),
            basis_size: BasisSize::Fraction(crate::moran::DEFAULT_FRACTION),
        }
    }
}

/// Area ids and rook-neighbour edges of a `side × side` grid.
pub fn grid_graph(side: usize) -> (Vec<String>, Vec<(String, String)>) {
    let id = |r: usize, c: usize| format!("g{r:02}{c:02}");
    let areas = (0..side * side).map(|i| id(i / side, i % side)).collect();
    let mut edges = Vec::new();
    for r in 0..side {
        for c in 0..side {
            if c + 1 < side {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < side {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    (areas, edges)
}

/// Builds the fixture: design with intercept and cell indicators, Moran
/// basis, and truth `z = Xβ + Ψη_g` where cells `1..=L/2` use field `η_0`
/// and the rest use `η_1`, each drawn from `N(0, K)` and rescaled.
pub fn two_field_fixture(spec: TwoFieldSpec, seed: u64) -> Result<TwoFieldFixture> {
    if spec.side < 2 || spec.cells < 2 {
        return Err(Error::Config("two-field fixture needs side >= 2 and at least two cells".into()));
    }
    let (areas, edges) = grid_graph(spec.side);
    let adjacency = build_adjacency(&edges, &areas)?;
    let spatial = SpatialStructure::new(adjacency, spec.cells)?;
    let design = build_design(areas.len(), spec.cells, None, DesignOptions::default())?.matrix;
    let basis = MoranBasis::build(&design, &spatial, spec.basis_size)?;
    let n = design.nrows();
    let mut rng = rng_from_seed(seed);

    let groups: Vec<usize> = (0..n).map(|i| usize::from(i % spec.cells >= spec.cells / 2)).collect();
    let prior = Gaussian::from_canonical(basis.k_inv.clone(), &DVector::zeros(basis.rank()))?;
    let mut fields = Vec::new();
    for scale in [spec.scales.0, spec.scales.1] {
        let field = &basis.psi * prior.sample(&mut rng);
        let rms = (field.norm_squared() / n as f64).sqrt();
        fields.push(field * (scale / rms));
    }
    let beta = DVector::from_fn(design.ncols(), |j, _| if j == 0 { 3.0 } else { 0.25 * j as f64 - 0.4 });
    let fixed = &design * beta;
    let z: Vec<f64> = (0..n).map(|i| fixed[i] + fields[groups[i]][i]).collect();
    let d = (0..n)
        .map(|_| {
            let (lo, hi) = if rng.random::<f64>() < spec.noisy_fraction { spec.noisy_range } else { spec.variance_range };
            Some(rng.random_range(lo..hi))
        })
        .collect();
    let truth = LogTable::new(areas, spec.cells, z, d)?;
    Ok(TwoFieldFixture {
        truth,
        design,
        basis,
        spatial,
        groups,
    })
}
