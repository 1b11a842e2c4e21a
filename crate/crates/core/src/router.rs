//! Per-token, per-layer routing and adapter application.
//!
//! Each library covering a layer is routed on its own: arrow top-k, then a
//! spectral rerank of the survivors. One winner per library is applied and
//! their deltas add: `h = W x + Σ B*(A* x)`.
//!
//! When `k` reaches the number of adapters on a layer the arrow stage is
//! skipped and every adapter is reranked (exhaustive spectral routing).

use std::collections::{BTreeMap, BTreeSet};

use crate::arrow_index::{arrow_scores, arrow_scores_batch, topk, CandidateSet};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::spectral::{rerank_scored, Selection};
use crate::types::{
    AdapterLibrary, AlignedAdapter, LayerId, LayerLibrary, LayerSpec, LibraryTag, Matrix,
    RoutingConfig, TokenVector,
};

/// FLOPs spent on one routing decision, multiply-add counted as 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub arrow: u64,
    pub spectral: u64,
    pub apply: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.arrow + self.spectral + self.apply
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: Self) {
        self.arrow += rhs.arrow;
        self.spectral += rhs.spectral;
        self.apply += rhs.apply;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryPick {
    pub tag: LibraryTag,
    pub adapter_id: String,
    pub selection: Selection,
}

/// Routing outcome for one token on one layer. No picks means no library
/// covers the layer and the base layer passes through unmodified.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub layer: LayerId,
    pub picks: Vec<LibraryPick>,
}

impl TokenRoute {
    pub fn is_passthrough(&self) -> bool {
        self.picks.is_empty()
    }

    pub fn pick(&self, tag: LibraryTag) -> Option<&LibraryPick> {
        self.picks.iter().find(|p| p.tag == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub token: usize,
    pub layer: LayerId,
    pub tag: LibraryTag,
    /// Adapters on the layer in this library.
    pub n_adapters: usize,
    pub k: usize,
    /// Full arrow score vector, kept only when auditing.
    pub arrow_scores: Option<Vec<f64>>,
    pub candidates: CandidateSet,
    /// Spectral scores in candidate order.
    pub spectral_scores: Vec<f64>,
    pub selected_index: usize,
    pub selected_id: String,
    pub flops: FlopCount,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouteTrace {
    pub entries: Vec<TraceEntry>,
}

impl RouteTrace {
    pub fn total_flops(&self) -> FlopCount {
        let mut sum = FlopCount::default();
        for e in &self.entries {
            sum += e.flops;
        }
        sum
    }

    /// Distinct selected adapters per (layer, library).
    pub fn selected_working_set(&self) -> BTreeMap<(LayerId, LibraryTag), BTreeSet<usize>> {
        let mut out: BTreeMap<_, BTreeSet<usize>> = BTreeMap::new();
        for e in &self.entries {
            out.entry((e.layer.clone(), e.tag)).or_default().insert(e.selected_index);
        }
        out
    }

    /// Distinct adapters that had to be resident (every arrow candidate) per
    /// (layer, library).
    pub fn loaded_working_set(&self) -> BTreeMap<(LayerId, LibraryTag), BTreeSet<usize>> {
        let mut out: BTreeMap<_, BTreeSet<usize>> = BTreeMap::new();
        for e in &self.entries {
            out.entry((e.layer.clone(), e.tag))
                .or_default()
                .extend(e.candidates.indices.iter().copied());
        }
        out
    }
}

/// Outputs of a routed sequence, indexed `[layer][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub outputs: Vec<Vec<Vec<f32>>>,
    pub routes: Vec<Vec<TokenRoute>>,
    pub trace: RouteTrace,
}

/// Routes tokens against up to one task and one knowledge library.
#[derive(Debug, Clone)]
pub struct Router<'a> {
    libs: Vec<&'a AdapterLibrary>,
    cfg: RoutingConfig,
    audit: bool,
    exec: Exec,
}

impl<'a> Router<'a> {
    pub fn new(libs: &[&'a AdapterLibrary], cfg: RoutingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut libs = libs.to_vec();
        libs.sort_by_key(|l| l.tag);
        if libs.windows(2).any(|w| w[0].tag == w[1].tag) {
            return Err(Error::Usage("at most one library per tag".into()));
        }
        Ok(Router {
            libs,
            cfg,
            audit: false,
            exec: Exec::default(),
        })
    }

    /// Keep full arrow score vectors in the trace.
    pub fn with_audit(mut self, audit: bool) -> Self {
        self.audit = audit;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.cfg
    }

    fn library(&self, tag: LibraryTag) -> Option<&'a AdapterLibrary> {
        self.libs.iter().copied().find(|l| l.tag == tag)
    }

    fn decide(
        &self,
        x: &TokenVector,
        layer_id: &LayerId,
        layer: &LayerLibrary,
        tag: LibraryTag,
        token: usize,
        precomputed: Option<&[f64]>,
    ) -> Result<(LibraryPick, TraceEntry)> {
        let count = layer.len();
        let n = layer.n() as u64;
        if x.len() != layer.n() {
            return Err(Error::Shape(format!(
                "token of length {} on layer `{layer_id}` with input dimension {}",
                x.len(),
                layer.n()
            )));
        }
        let mut flops = FlopCount::default();
        let (candidates, scores) = if self.cfg.k >= count {
            (CandidateSet::all(count), None)
        } else {
            let scores = match precomputed {
                Some(s) => s.to_vec(),
                None => arrow_scores(x, layer.arrows())?,
            };
            flops.arrow = 2 * count as u64 * n;
            (topk(&scores, self.cfg.k, self.cfg.tie_break), Some(scores))
        };
        let (selection, spectral_scores) = rerank_scored(&candidates, layer, x, self.cfg.tie_break)?;
        flops.spectral = candidates
            .indices
            .iter()
            .map(|&i| 2 * layer.adapters()[i].r_eff() as u64 * n)
            .sum();
        let winner = &layer.adapters()[selection.adapter_index];
        flops.apply = 2 * (winner.m() * winner.r_eff()) as u64;

        let entry = TraceEntry {
            token,
            layer: layer_id.clone(),
            tag,
            n_adapters: count,
            k: self.cfg.k.min(count),
            arrow_scores: if self.audit { scores } else { None },
            candidates,
            spectral_scores,
            selected_index: selection.adapter_index,
            selected_id: winner.id.clone(),
            flops,
        };
        let pick = LibraryPick {
            tag,
            adapter_id: winner.id.clone(),
            selection,
        };
        Ok((pick, entry))
    }

    fn route_inner(
        &self,
        x: &TokenVector,
        layer: &LayerId,
        token: usize,
        precomputed: &[(LibraryTag, &[f64])],
    ) -> Result<(TokenRoute, Vec<TraceEntry>)> {
        let mut picks = Vec::new();
        let mut entries = Vec::new();
        for lib in &self.libs {
            let Some(layer_lib) = lib.layer(layer) else {
                continue;
            };
            let (pick, entry) =
                self.decide(
                x,
                layer,
                layer_lib,
                lib.tag,
                token,
                precomputed.iter().find(|(t, _)| *t == lib.tag).map(|(_, s)| *s),
            )?;
            picks.push(pick);
            entries.push(entry);
        }
        Ok((
            TokenRoute {
                layer: layer.clone(),
                picks,
            },
            entries,
        ))
    }

    /// Routes one token on one layer.
    pub fn route_token(
        &self,
        x: &TokenVector,
        layer: &LayerId,
        token: usize,
    ) -> Result<(TokenRoute, Vec<TraceEntry>)> {
        self.route_inner(x, layer, token, &[])
    }

    fn adapter(&self, layer: &LayerId, pick: &LibraryPick) -> Result<&'a AlignedAdapter> {
        self.library(pick.tag)
            .and_then(|l| l.layer(layer))
            .and_then(|l| l.adapters().get(pick.selection.adapter_index))
            .filter(|a| a.id == pick.adapter_id)
            .ok_or_else(|| {
                Error::Internal(format!(
                    "selection `{}` not found in the {} library on layer `{layer}`",
                    pick.adapter_id, pick.tag
                ))
            })
    }

    /// `W x + Σ B* (A* x)` using the cached projections.
    pub fn apply(&self, x: &TokenVector, weight: &Matrix, route: &TokenRoute) -> Result<Vec<f32>> {
        let mut h = weight.matvec(x.as_slice())?;
        for pick in &route.picks {
            let adapter = self.adapter(&route.layer, pick)?;
            let delta = adapter_delta(adapter, &pick.selection.projected)?;
            if delta.len() != h.len() {
                return Err(Error::Shape(format!(
                    "adapter `{}` produces {} outputs but the layer has {}",
                    adapter.id,
                    delta.len(),
                    h.len()
                )));
            }
            h.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        }
        Ok(h.into_iter().map(|v| v as f32).collect())
    }

    /// Routes and applies every token on every layer. `inputs[l][t]` is the
    /// input of token `t` to `layers[l]`.
    pub fn route_sequence(
        &self,
        inputs: &[Vec<TokenVector>],
        layers: &[LayerSpec],
    ) -> Result<SequenceOutput> {
        if inputs.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} input rows for {} layers",
                inputs.len(),
                layers.len()
            )));
        }
        let seq_len = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|row| row.len() != seq_len) {
            return Err(Error::Shape("every layer needs the same number of tokens".into()));
        }

        let mut outputs = Vec::with_capacity(layers.len());
        let mut routes = Vec::with_capacity(layers.len());
        let mut entries = Vec::new();
        for (spec, tokens) in layers.iter().zip(inputs) {
            // batch arrow scoring per library; decisions match the per-token path exactly
            let mut batched: BTreeMap<LibraryTag, Vec<Vec<f64>>> = BTreeMap::new();
            for lib in &self.libs {
                if let Some(layer_lib) = lib.layer(&spec.id) {
                    if self.cfg.k < layer_lib.len() {
                        batched.insert(
                            lib.tag,
                            arrow_scores_batch(tokens, layer_lib.arrows(), self.exec)?,
                        );
                    }
                }
            }
            let results = self.exec.try_map(
                &tokens.iter().enumerate().collect::<Vec<_>>(),
                |&(t, x)| {
                    let scores: Vec<(LibraryTag, &[f64])> = batched
                        .iter()
                        .map(|(tag, rows)| (*tag, rows[t].as_slice()))
                        .collect();
                    let (route, trace) = self.route_inner(x, &spec.id, t, &scores)?;
                    let h = self.apply(x, &spec.weight, &route)?;
                    Ok::<_, Error>((route, trace, h))
                },
            )?;
            let mut layer_routes = Vec::with_capacity(seq_len);
            let mut layer_outputs = Vec::with_capacity(seq_len);
            for (route, trace, h) in results {
                layer_routes.push(route);
                layer_outputs.push(h);
                entries.extend(trace);
            }
            routes.push(layer_routes);
            outputs.push(layer_outputs);
        }
        let layer_pos: BTreeMap<&LayerId, usize> =
            layers.iter().enumerate().map(|(i, l)| (&l.id, i)).collect();
        entries.sort_by_key(|e| (e.token, layer_pos[&e.layer], e.tag));
        Ok(SequenceOutput {
            outputs,
            routes,
            trace: RouteTrace { entries },
        })
    }
}

/// `B* · projected` in `f64`.
pub fn adapter_delta(adapter: &AlignedAdapter, projected: &[f64]) -> Result<Vec<f64>> {
    if projected.len() != adapter.r_eff() {
        return Err(Error::Internal(format!(
            "cached projection has length {} but adapter `{}` has rank {}",
            projected.len(),
            adapter.id,
            adapter.r_eff()
        )));
    }
    adapter.b_star.matvec_f64(projected)
}

/// Routes one token on one layer against the given libraries.
pub fn route_token(
    x: &TokenVector,
    layer: &LayerId,
    libs: &[&AdapterLibrary],
    cfg: &RoutingConfig,
) -> Result<(TokenRoute, Vec<TraceEntry>)> {
    Router::new(libs, *cfg)?.route_token(x, layer, 0)
}

/// Applies a routed token to a layer weight.
pub fn apply(
    x: &TokenVector,
    weight: &Matrix,
    route: &TokenRoute,
    libs: &[&AdapterLibrary],
) -> Result<Vec<f32>> {
    Router::new(libs, RoutingConfig::default())?.apply(x, weight, route)
}

/// Routes and applies a whole sequence.
pub fn route_sequence(
    inputs: &[Vec<TokenVector>],
    layers: &[LayerSpec],
    libs: &[&AdapterLibrary],
    cfg: &RoutingConfig,
) -> Result<SequenceOutput> {
    Router::new(libs, *cfg)?.route_sequence(inputs, layers)
}
