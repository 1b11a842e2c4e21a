//! Synthetic planted-subspace benchmark.
//!
//! Every adapter owns a known `r`-dimensional row subspace `V` and is built
//! as `BA = U diag(s) Vᵀ` with spectrum `s_i = decay^i`, then disguised by a
//! random invertible mixing `B = U G⁻¹`, `A = G diag(s) Vᵀ` so alignment has
//! real work to do. Each token on each layer is drawn from one ground-truth
//! adapter per covering library:
//!
//! ```text
//! x = √(1−ε) · x_in + √ε · x_out
//! ```
//!
//! where `x_in` is a unit vector in the owner's subspace and `x_out` a unit
//! vector orthogonal to it, so `ε` is exactly the out-of-subspace energy.
//!
//! Planting modes: `Orthogonal` carves disjoint blocks out of one random
//! orthonormal basis (exact ground truth, needs `n_adapters · r ≤ h`);
//! `Gaussian` draws independent random subspaces and scales to thousands of
//! adapters.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::align_library_with;
use crate::metrics::cost_model;
use crate::parallel::Exec;
use crate::router::Router;
use crate::types::{
    AdapterLibrary, LayerId, LayerSpec, LibraryTag, Matrix, RawAdapter, RoutingConfig, Targets,
    TokenVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planting {
    Orthogonal,
    Gaussian,
}

/// How a token's coordinates inside its owner's subspace are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coefficients {
    /// `c_i = s_i · ξ_i · (1 + jitter · z_i)` with random signs `ξ_i`: every
    /// direction is excited in proportion to its singular value.
    Signed,
    /// `c_i = s_i · z_i`: tokens follow the adapter's input covariance.
    Gaussian,
}

/// Which libraries target which layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Even layers carry task adapters, odd layers knowledge adapters.
    Alternating,
    Both,
    TaskOnly,
    KnowledgeOnly,
}

impl Coverage {
    fn targets(self, layer: usize) -> Targets {
        match self {
            Coverage::Alternating => Targets {
                task: layer.is_multiple_of(2),
                knowledge: !layer.is_multiple_of(2),
            },
            Coverage::Both => Targets {
                task: true,
                knowledge: true,
            },
            Coverage::TaskOnly => Targets {
                task: true,
                knowledge: false,
            },
            Coverage::KnowledgeOnly => Targets {
                task: false,
                knowledge: true,
            },
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_TASK_RANK: usize = 8;
pub const DEFAULT_KNOWLEDGE_RANK: usize = 6;
pub const DEFAULT_SPECTR_BUDGET: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    /// Adapters per library per layer.
    pub n_adapters: usize,
    pub hidden: usize,
    pub task_rank: usize,
    pub knowledge_rank: usize,
    pub layers: usize,
    pub coverage: Coverage,
    pub epsilon: f64,
    pub tokens: usize,
    pub seed: u64,
    pub planting: Planting,
    pub coefficients: Coefficients,
    /// Ratio between consecutive planted singular values, in `(0, 1]`.
    pub spectrum_decay: f64,
    /// Relative spread of [`Coefficients::Signed`] magnitudes.
    pub jitter: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_adapters: 100,
            hidden: DEFAULT_HIDDEN,
            task_rank: DEFAULT_TASK_RANK,
            knowledge_rank: DEFAULT_KNOWLEDGE_RANK,
            layers: 2,
            coverage: Coverage::Alternating,
            epsilon: 0.0,
            tokens: 128,
            seed: 0,
            planting: Planting::Gaussian,
            coefficients: Coefficients::Signed,
            spectrum_decay: 0.8,
            jitter: 0.25,
        }
    }
}

impl BenchmarkConfig {
    pub fn rank(&self, tag: LibraryTag) -> usize {
        match tag {
            LibraryTag::Task => self.task_rank,
            LibraryTag::Knowledge => self.knowledge_rank,
        }
    }

    pub fn layer_id(layer: usize) -> LayerId {
        LayerId(format!("layer{layer}"))
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("n_adapters", self.n_adapters),
            ("hidden", self.hidden),
            ("task_rank", self.task_rank),
            ("knowledge_rank", self.knowledge_rank),
            ("layers", self.layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Usage(format!("{name} must be positive")));
            }
        }
        if self.task_rank > self.hidden || self.knowledge_rank > self.hidden {
            return Err(Error::Usage("rank cannot exceed the hidden size".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Usage(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        if !(self.spectrum_decay > 0.0 && self.spectrum_decay <= 1.0) {
            return Err(Error::Usage("spectrum decay must lie in (0, 1]".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Usage("jitter must be nonnegative".into()));
        }
        if self.planting == Planting::Orthogonal {
            for layer in 0..self.layers {
                let t = self.coverage.targets(layer);
                let per_adapter = usize::from(t.task) * self.task_rank
                    + usize::from(t.knowledge) * self.knowledge_rank;
                if self.n_adapters * per_adapter > self.hidden {
                    return Err(Error::Capacity {
                        requested: self.n_adapters,
                        max: self.hidden / per_adapter,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth library indices for one token on one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Truth {
    pub task: Option<usize>,
    pub knowledge: Option<usize>,
}

impl Truth {
    pub fn get(&self, tag: LibraryTag) -> Option<usize> {
        match tag {
            LibraryTag::Task => self.task,
            LibraryTag::Knowledge => self.knowledge,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBenchmark {
    pub config: BenchmarkConfig,
    pub layers: Vec<LayerSpec>,
    pub raw_task: Vec<RawAdapter>,
    pub raw_knowledge: Vec<RawAdapter>,
    pub task: AdapterLibrary,
    pub knowledge: AdapterLibrary,
    /// `inputs[layer][token]`
    pub inputs: Vec<Vec<TokenVector>>,
    /// `truth[layer][token]`
    pub truth: Vec<Vec<Truth>>,
}

impl PlantedBenchmark {
    pub fn library(&self, tag: LibraryTag) -> &AdapterLibrary {
        match tag {
            LibraryTag::Task => &self.task,
            LibraryTag::Knowledge => &self.knowledge,
        }
    }

    pub fn libraries(&self) -> [&AdapterLibrary; 2] {
        [&self.task, &self.knowledge]
    }
}

fn gaussian_f64(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `rows×cols` matrix with orthonormal columns, uniformly distributed.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian_f64(rows, cols, rng).qr().q()
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] as f32)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

struct Planted {
    basis: DMatrix<f64>,
    spectrum: Vec<f64>,
}

fn plant_adapter(
    id: String,
    layer: &LayerId,
    tag: LibraryTag,
    basis: DMatrix<f64>,
    spectrum: Vec<f64>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(RawAdapter, Planted)> {
    let r = spectrum.len();
    let u = random_orthonormal(m, r, rng);
    let rot = random_orthonormal(r, r, rng);
    let scales: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..2.0)).collect();
    // G = rot · diag(scales), G⁻¹ = diag(1/scales) · rotᵀ
    let g = DMatrix::from_fn(r, r, |i, j| rot[(i, j)] * scales[j]);
    let g_inv = DMatrix::from_fn(r, r, |i, j| rot[(j, i)] / scales[i]);
    let s_vt = DMatrix::from_fn(r, basis.nrows(), |i, j| spectrum[i] * basis[(j, i)]);
    let a = g * s_vt;
    let b = u * g_inv;
    let adapter = RawAdapter::new(id, layer.clone(), tag, to_matrix(&b), to_matrix(&a))?;
    Ok((adapter, Planted { basis, spectrum }))
}

fn in_span_unit(planted: &Planted, cfg: &BenchmarkConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = planted.spectrum.len();
    let mut coeffs: Vec<f64> = planted
        .spectrum
        .iter()
        .map(|&s| match cfg.coefficients {
            Coefficients::Signed => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let z: f64 = StandardNormal.sample(rng);
                s * sign * (1.0 + cfg.jitter * z)
            }
            Coefficients::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            }
        })
        .collect();
    if coeffs.iter().all(|c| *c == 0.0) {
        coeffs[0] = 1.0;
    }
    let n = planted.basis.nrows();
    let mut x: Vec<f64> = (0..n)
        .map(|i| (0..r).map(|j| planted.basis[(i, j)] * coeffs[j]).sum())
        .collect();
    normalize(&mut x);
    x
}

/// Unit vector orthogonal to every column of `bases`.
fn out_of_span_unit(bases: &[&DMatrix<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cols: usize = bases.iter().map(|b| b.ncols()).sum();
    let union = DMatrix::from_fn(n, cols, |i, j| {
        let mut j = j;
        for b in bases {
            if j < b.ncols() {
                return b[(i, j)];
            }
            j -= b.ncols();
        }
        unreachable!()
    });
    let q = union.qr().q();
    loop {
        let g = gaussian_f64(n, 1, rng);
        let residual = &g - &q * (q.transpose() * &g);
        let mut v: Vec<f64> = residual.iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

/// Generates a benchmark. Deterministic in `cfg.seed`.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<PlantedBenchmark> {
    generate_benchmark_with(cfg, Exec::default())
}

pub fn generate_benchmark_with(cfg: &BenchmarkConfig, exec: Exec) -> Result<PlantedBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut raw_task = Vec::new();
    let mut raw_knowledge = Vec::new();
    let mut inputs = Vec::with_capacity(cfg.layers);
    let mut truth = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let id = BenchmarkConfig::layer_id(l);
        let targets = cfg.coverage.targets(l);
        let scale = 1.0 / (h as f64).sqrt();
        let w = gaussian_f64(h, h, &mut rng).map(|v| v * scale);
        layers.push(LayerSpec {
            id: id.clone(),
            weight: to_matrix(&w),
            targets,
        });

        let shared_basis = (cfg.planting == Planting::Orthogonal).then(|| random_orthonormal(h, h, &mut rng));
        let mut offset = 0;
        let mut planted: Vec<(LibraryTag, Vec<Planted>)> = Vec::new();
        for tag in [LibraryTag::Task, LibraryTag::Knowledge] {
            if !targets.covers(tag) {
                continue;
            }
            let r = cfg.rank(tag);
            let spectrum: Vec<f64> = (0..r).map(|i| cfg.spectrum_decay.powi(i as i32)).collect();
            let mut owned = Vec::with_capacity(cfg.n_adapters);
            for j in 0..cfg.n_adapters {
                let basis = match &shared_basis {
                    Some(q) => {
                        let block = q.columns(offset, r).into_owned();
                        offset += r;
                        block
                    }
                    None => random_orthonormal(h, r, &mut rng),
                };
                let (raw, p) = plant_adapter(
                    format!("{tag}-{id}-{j}"),
                    &id,
                    tag,
                    basis,
                    spectrum.clone(),
                    h,
                    &mut rng,
                )?;
                match tag {
                    LibraryTag::Task => raw_task.push(raw),
                    LibraryTag::Knowledge => raw_knowledge.push(raw),
                }
                owned.push(p);
            }
            planted.push((tag, owned));
        }

        let mut layer_inputs = Vec::with_capacity(cfg.tokens);
        let mut layer_truth = Vec::with_capacity(cfg.tokens);
        for _ in 0..cfg.tokens {
            let mut t = Truth::default();
            let mut x_in = vec![0.0f64; h];
            let mut owners = Vec::new();
            for (tag, owned) in &planted {
                let j = rng.random_range(0..owned.len());
                match tag {
                    LibraryTag::Task => t.task = Some(j),
                    LibraryTag::Knowledge => t.knowledge = Some(j),
                }
                let u = in_span_unit(&owned[j], cfg, &mut rng);
                x_in.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
                owners.push(&owned[j].basis);
            }
            normalize(&mut x_in);
            let x_out = out_of_span_unit(&owners, h, &mut rng);
            let (w_in, w_out) = ((1.0 - cfg.epsilon).sqrt(), cfg.epsilon.sqrt());
            let x: Vec<f32> = x_in
                .iter()
                .zip(&x_out)
                .map(|(a, b)| (w_in * a + w_out * b) as f32)
                .collect();
            layer_inputs.push(TokenVector::new(x)?);
            layer_truth.push(t);
        }
        inputs.push(layer_inputs);
        truth.push(layer_truth);
    }

    let align_cfg = RoutingConfig::default();
    let task = align_library_with(LibraryTag::Task, &raw_task, &align_cfg, exec)?;
    let knowledge = align_library_with(LibraryTag::Knowledge, &raw_knowledge, &align_cfg, exec)?;
    // planted adapters have full rank, so library index = planting index
    for lib in [&task, &knowledge] {
        if !lib.skipped().is_empty() {
            return Err(Error::Internal("planted adapter lost rank during alignment".into()));
        }
    }

    Ok(PlantedBenchmark {
        config: cfg.clone(),
        layers,
        raw_task,
        raw_knowledge,
        task,
        knowledge,
        inputs,
        truth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Top-1 arrow score.
    Arrow,
    /// Exhaustive spectral rerank.
    Spectr,
    /// Arrow top-k, then spectral rerank.
    Lag { k: usize },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Arrow => "arrow",
            Method::Spectr => "spectr",
            Method::Lag { .. } => "lag",
        }
    }

    fn filter_width(&self) -> usize {
        match *self {
            Method::Arrow => 1,
            Method::Spectr => usize::MAX,
            Method::Lag { k } => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub spectr_budget: usize,
    pub allow_large_spectr: bool,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            spectr_budget: DEFAULT_SPECTR_BUDGET,
            allow_large_spectr: false,
            exec: Exec::default(),
        }
    }
}

/// Accuracy for one (layer, library) pair, or the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub layer: String,
    pub library: String,
    pub decisions: usize,
    pub correct: usize,
    pub contained: usize,
    pub accuracy: f64,
    /// Fraction of decisions whose ground truth survived the arrow filter.
    pub containment: f64,
    /// Closed-form FLOPs per token for this method.
    pub flops_per_token: f64,
    /// FLOPs per token counted by the router.
    pub counted_flops_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: &'static str,
    pub k: usize,
    pub epsilon: f64,
    pub n_adapters: usize,
    pub seed: u64,
    pub groups: Vec<GroupResult>,
    pub aggregate: GroupResult,
    /// `selected[layer][token]` per library, `None` where uncovered.
    #[serde(skip)]
    pub decisions: Vec<Vec<[Option<usize>; 2]>>,
}

fn tag_slot(tag: LibraryTag) -> usize {
    match tag {
        LibraryTag::Task => 0,
        LibraryTag::Knowledge => 1,
    }
}

/// Routes every benchmark token with `method` and scores the decisions
/// against the planted ground truth.
pub fn evaluate(bench: &PlantedBenchmark, method: Method, opts: &EvalOptions) -> Result<EvalReport> {
    let n_adapters = bench.config.n_adapters;
    if method == Method::Spectr && n_adapters > opts.spectr_budget && !opts.allow_large_spectr {
        return Err(Error::SpectrBudget {
            n_adapters,
            budget: opts.spectr_budget,
        });
    }
    if let Method::Lag { k: 0 } = method {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let k = method.filter_width();
    let cfg = RoutingConfig {
        k,
        ..RoutingConfig::default()
    };
    let router = Router::new(&bench.libraries(), cfg)?.with_exec(opts.exec);
    let out = router.route_sequence(&bench.inputs, &bench.layers)?;

    let layer_index = |id: &LayerId| bench.layers.iter().position(|l| &l.id == id).expect("known layer");
    let mut decisions = vec![vec![[None; 2]; bench.config.tokens]; bench.layers.len()];
    let mut groups: Vec<GroupResult> = Vec::new();
    for e in &out.trace.entries {
        let l = layer_index(&e.layer);
        decisions[l][e.token][tag_slot(e.tag)] = Some(e.selected_index);
        let want = bench.truth[l][e.token]
            .get(e.tag)
            .ok_or_else(|| Error::Internal(format!("no ground truth for {} on {}", e.tag, e.layer)))?;
        let pos = match groups
            .iter()
            .position(|g| g.layer == e.layer.0 && g.library == e.tag.as_str())
        {
            Some(p) => p,
            None => {
                let r = bench.config.rank(e.tag) as u64;
                let costs = cost_model(e.n_adapters as u64, bench.config.hidden as u64, r, k.min(e.n_adapters) as u64)?;
                let formula = match method {
                    Method::Arrow => costs.flops.arrow,
                    Method::Spectr => costs.flops.spectr,
                    Method::Lag { .. } => costs.flops.lag,
                };
                groups.push(GroupResult {
                    layer: e.layer.0.clone(),
                    library: e.tag.as_str().into(),
                    decisions: 0,
                    correct: 0,
                    contained: 0,
                    accuracy: 0.0,
                    containment: 0.0,
                    flops_per_token: formula as f64,
                    counted_flops_per_token: 0.0,
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[pos];
        g.decisions += 1;
        g.correct += usize::from(e.selected_index == want);
        g.contained += usize::from(e.candidates.contains(want));
    }
    groups.sort_by_key(|g| (layer_index(&LayerId(g.layer.clone())), g.library.clone()));
    let mut totals = std::collections::BTreeMap::new();
    for e in &out.trace.entries {
        *totals.entry((e.layer.0.clone(), e.tag.as_str())).or_insert(0u64) += e.flops.total();
    }
    for g in &mut groups {
        g.accuracy = g.correct as f64 / g.decisions as f64;
        g.containment = g.contained as f64 / g.decisions as f64;
        g.counted_flops_per_token =
            totals[&(g.layer.clone(), g.library.as_str())] as f64 / g.decisions as f64;
    }

    let total: usize = groups.iter().map(|g| g.decisions).sum();
    let sum = |f: fn(&GroupResult) -> usize| groups.iter().map(f).sum::<usize>();
    let weighted = |f: fn(&GroupResult) -> f64| {
        groups.iter().map(|g| f(g) * g.decisions as f64).sum::<f64>() / total.max(1) as f64
    };
    let aggregate = GroupResult {
        layer: "all".into(),
        library: "all".into(),
        decisions: total,
        correct: sum(|g| g.correct),
        contained: sum(|g| g.contained),
        accuracy: sum(|g| g.correct) as f64 / total.max(1) as f64,
        containment: sum(|g| g.contained) as f64 / total.max(1) as f64,
        flops_per_token: weighted(|g| g.flops_per_token),
        counted_flops_per_token: weighted(|g| g.counted_flops_per_token),
    };

    Ok(EvalReport {
        method: method.name(),
        k: match method {
            Method::Spectr => n_adapters,
            _ => k.min(n_adapters),
        },
        epsilon: bench.config.epsilon,
        n_adapters,
        seed: bench.config.seed,
        groups,
        aggregate,
        decisions,
    })
}

/// Evaluates the two-stage router at every `k`.
pub fn sweep_k(bench: &PlantedBenchmark, k_values: &[usize], opts: &EvalOptions) -> Result<Vec<EvalReport>> {
    if let Some(&bad) = k_values.iter().find(|&&k| k == 0 || k > bench.config.n_adapters) {
        return Err(Error::Usage(format!(
            "k = {bad} outside 1..={}",
            bench.config.n_adapters
        )));
    }
    k_values
        .iter()
        .map(|&k| evaluate(bench, Method::Lag { k }, opts))
        .collect()
}

/// Formats with six significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

pub const CSV_HEADER: &str =
    "method,k,epsilon,n_adapters,seed,layer,library,accuracy,containment,flops_per_token";

/// One CSV block per report: each (layer, library) group, then the
/// aggregate row.
pub fn write_csv<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    let mut text = String::new();
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in reports {
        for g in r.groups.iter().chain(std::iter::once(&r.aggregate)) {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.k,
                fmt_sig6(r.epsilon),
                r.n_adapters,
                r.seed,
                g.layer,
                g.library,
                fmt_sig6(g.accuracy),
                fmt_sig6(g.containment),
                fmt_sig6(g.flops_per_token)
            );
        }
    }
    out.write_all(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::spectr_score;
    use crate::types::dot;

    fn small(planting: Planting, n_adapters: usize, rank: usize, eps: f64, seed: u64) -> BenchmarkConfig {
        BenchmarkConfig {
            n_adapters,
            hidden: 64,
            task_rank: rank,
            knowledge_rank: rank,
            layers: 2,
            epsilon: eps,
            tokens: 64,
            seed,
            planting,
            ..Default::default()
        }
    }

    #[test]
    fn orthogonal_blocks_are_orthogonal() {
        let cfg = BenchmarkConfig {
            hidden: 8,
            task_rank: 2,
            knowledge_rank: 2,
            layers: 1,
            coverage: Coverage::TaskOnly,
            ..small(Planting::Orthogonal, 2, 2, 0.0, 1)
        };
        let bench = generate_benchmark(&cfg).unwrap();
        let layer = bench.task.layer(&BenchmarkConfig::layer_id(0)).unwrap();
        let (a, b) = (&layer.adapters()[0].a_star, &layer.adapters()[1].a_star);
        for i in 0..2 {
            for j in 0..2 {
                assert!(dot(a.row(i), b.row(j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn capacity_error_reports_feasible_maximum() {
        let cfg = small(Planting::Orthogonal, 20, 4, 0.0, 1);
        match generate_benchmark(&cfg) {
            Err(Error::Capacity { requested, max }) => {
                assert_eq!(requested, 20);
                assert_eq!(max, 16);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        let both = BenchmarkConfig {
            coverage: Coverage::Both,
            ..small(Planting::Orthogonal, 9, 4, 0.0, 1)
        };
        assert!(matches!(generate_benchmark(&both), Err(Error::Capacity { max: 8, .. })));
    }

    #[test]
    fn noiseless_tokens_lie_in_owner_span() {
        let bench = generate_benchmark(&small(Planting::Gaussian, 10, 4, 0.0, 3)).unwrap();
        for (l, layer) in bench.layers.iter().enumerate() {
            for (t, x) in bench.inputs[l].iter().enumerate() {
                for lib in bench.libraries() {
                    if let (Some(owner), Some(layer_lib)) = (bench.truth[l][t].get(lib.tag), lib.layer(&layer.id)) {
                        let (score, _) = spectr_score(&layer_lib.adapters()[owner], x).unwrap();
                        assert!((score - x.norm()).abs() < 1e-5, "{score} vs {}", x.norm());
                    }
                }
            }
        }
    }

    #[test]
    fn noise_energy_matches_epsilon() {
        let eps = 0.3;
        let bench = generate_benchmark(&small(Planting::Gaussian, 10, 4, eps, 4)).unwrap();
        let layer_lib = bench.task.layer(&BenchmarkConfig::layer_id(0)).unwrap();
        for (t, x) in bench.inputs[0].iter().enumerate() {
            let owner = bench.truth[0][t].task.unwrap();
            let (score, _) = spectr_score(&layer_lib.adapters()[owner], x).unwrap();
            assert!((score * score - (1.0 - eps)).abs() < 1e-5);
            assert!((x.norm() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_same_benchmark() {
        let cfg = small(Planting::Gaussian, 12, 3, 0.2, 99);
        let a = generate_benchmark_with(&cfg, Exec::Sequential).unwrap();
        let b = generate_benchmark_with(&cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&BenchmarkConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn noiseless_orthogonal_spectral_is_exact() {
        let bench = generate_benchmark(&small(Planting::Orthogonal, 8, 4, 0.0, 5)).unwrap();
        let spectr = evaluate(&bench, Method::Spectr, &EvalOptions::default()).unwrap();
        assert_eq!(spectr.aggregate.accuracy, 1.0);
        let arrow = evaluate(&bench, Method::Arrow, &EvalOptions::default()).unwrap();
        for k in [1, 2, 4, 8] {
            let lag = evaluate(&bench, Method::Lag { k }, &EvalOptions::default()).unwrap();
            assert!(lag.aggregate.accuracy >= arrow.aggregate.accuracy);
            assert_eq!(lag.aggregate.accuracy, lag.aggregate.containment);
        }
    }

    #[test]
    fn spectral_budget_enforced() {
        let bench = generate_benchmark(&small(Planting::Gaussian, 30, 2, 0.1, 6)).unwrap();
        let tight = EvalOptions {
            spectr_budget: 10,
            ..Default::default()
        };
        assert!(matches!(
            evaluate(&bench, Method::Spectr, &tight),
            Err(Error::SpectrBudget { n_adapters: 30, budget: 10 })
        ));
        let overridden = EvalOptions {
            allow_large_spectr: true,
            ..tight
        };
        assert!(evaluate(&bench, Method::Spectr, &overridden).is_ok());
    }

    #[test]
    fn sweep_endpoints_match_arrow_and_spectral() {
        let bench = generate_benchmark(&small(Planting::Gaussian, 40, 4, 0.3, 7)).unwrap();
        let opts = EvalOptions::default();
        let rows = sweep_k(&bench, &[1, 40], &opts).unwrap();
        let arrow = evaluate(&bench, Method::Arrow, &opts).unwrap();
        let spectr = evaluate(&bench, Method::Spectr, &opts).unwrap();
        assert_eq!(rows[0].decisions, arrow.decisions);
        assert_eq!(rows[1].decisions, spectr.decisions);
        assert_eq!(rows[0].aggregate.accuracy, arrow.aggregate.accuracy);
        assert_eq!(rows[1].aggregate.accuracy, spectr.aggregate.accuracy);
        assert!(sweep_k(&bench, &[0], &opts).is_err());
        assert!(sweep_k(&bench, &[41], &opts).is_err());
    }

    #[test]
    fn csv_has_header_and_six_significant_digits() {
        let bench = generate_benchmark(&small(Planting::Gaussian, 10, 2, 0.1, 8)).unwrap();
        let report = evaluate(&bench, Method::Lag { k: 3 }, &EvalOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&[report], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[2].starts_with("lag,3,0.100000,10,8,all,all,"));
        assert_eq!(fmt_sig6(0.9375), "0.937500");
        assert_eq!(fmt_sig6(148480.0), "148480");
        assert_eq!(fmt_sig6(12.5), "12.5000");
        assert_eq!(fmt_sig6(0.0), "0");
    }
}
