//! Structural SVM with margin rescaling, solved in the dual by SMO over a
//! cutting-plane working set.
//!
//! Multipliers are scaled so that each sample's simplex is `Σ α ≤ 1`; the
//! missing mass acts as the multiplier of the always-present zero constraint
//! (`L = 0`, `Δφ = 0`). Then `ω = D Σ α Δφ` and the dual objective, in the
//! same units as the primal `½‖ω‖² + D Σ ξ`, is `D Σ α L − ½‖ω‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Label;

/// Sparse real vector with strictly increasing indices and no stored zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn from_dense(v: &[f64]) -> Self {
        let mut s = SparseVec::default();
        for (k, &x) in v.iter().enumerate() {
            if x != 0.0 {
                s.idx.push(k as u32);
                s.val.push(x);
            }
        }
        s
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.add_to(&mut out, 1.0);
        out
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn is_finite(&self) -> bool {
        self.val.iter().all(|v| v.is_finite())
    }

    pub fn dot_dense(&self, w: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&k, &v)| v * w[k as usize])
            .sum()
    }

    /// `out += s * self`.
    pub fn add_to(&self, out: &mut [f64], s: f64) {
        for (&k, &v) in self.idx.iter().zip(&self.val) {
            out[k as usize] += s * v;
        }
    }

    /// `self − other`.
    pub fn sub(&self, other: &SparseVec) -> SparseVec {
        let mut out = SparseVec::default();
        let (mut a, mut b) = (0, 0);
        let mut push = |k: u32, v: f64| {
            if v != 0.0 {
                out.idx.push(k);
                out.val.push(v);
            }
        };
        while a < self.idx.len() || b < other.idx.len() {
            let ka = self.idx.get(a).copied().unwrap_or(u32::MAX);
            let kb = other.idx.get(b).copied().unwrap_or(u32::MAX);
            if ka == kb {
                push(ka, self.val[a] - other.val[b]);
                a += 1;
                b += 1;
            } else if ka < kb {
                push(ka, self.val[a]);
                a += 1;
            } else {
                push(kb, -other.val[b]);
                b += 1;
            }
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum()
    }

    /// `‖self − other‖²` without materializing the difference.
    pub fn dist_sq(&self, other: &SparseVec) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.idx.len() || b < other.idx.len() {
            let ka = self.idx.get(a).copied().unwrap_or(u32::MAX);
            let kb = other.idx.get(b).copied().unwrap_or(u32::MAX);
            let d = if ka == kb {
                a += 1;
                b += 1;
                self.val[a - 1] - other.val[b - 1]
            } else if ka < kb {
                a += 1;
                self.val[a - 1]
            } else {
                b += 1;
                -other.val[b - 1]
            };
            acc += d * d;
        }
        acc
    }
}

/// One (y, H) constraint of sample `sample`:
/// `ω·Δφ ≥ loss − ξ_sample` with `Δφ = anchor − feature`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingConstraint {
    pub sample: usize,
    pub label: Label,
    /// φ(X_k, y, H) of the constraint's labeling.
    pub feature: SparseVec,
    pub delta: SparseVec,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub constraints: Vec<WorkingConstraint>,
    pub alpha: Vec<f64>,
    pub d: f64,
    pub n_samples: usize,
    dim: usize,
    /// `Σ α Δφ`, kept in sync with `alpha`.
    u: Vec<f64>,
}

impl DualState {
    pub fn new(dim: usize, n_samples: usize, d: f64) -> Self {
        DualState {
            constraints: Vec::new(),
            alpha: Vec::new(),
            d,
            n_samples,
            dim,
            u: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, c: WorkingConstraint) {
        self.constraints.push(c);
        self.alpha.push(0.0);
    }

    /// ω = D Σ α Δφ.
    pub fn omega(&self) -> Vec<f64> {
        self.u.iter().map(|v| self.d * v).collect()
    }

    /// `D Σ α L − ½‖ω‖²`.
    pub fn dual(&self) -> f64 {
        let lin: f64 = self
            .constraints
            .iter()
            .zip(&self.alpha)
            .map(|(c, a)| a * c.loss)
            .sum();
        let norm: f64 = self.u.iter().map(|v| v * v).sum();
        self.d * lin - 0.5 * self.d * self.d * norm
    }

    /// `½‖ω‖² + D Σ_k ξ_k` with slacks taken over the working set only.
    pub fn working_primal(&self, omega: &[f64]) -> f64 {
        let slack: f64 = self.slacks(omega).iter().sum();
        0.5 * omega.iter().map(|v| v * v).sum::<f64>() + self.d * slack
    }

    /// Per-sample `max(0, max_c L_c − ω·Δφ_c)` over the working set.
    pub fn slacks(&self, omega: &[f64]) -> Vec<f64> {
        let mut xi = vec![0.0_f64; self.n_samples];
        for c in &self.constraints {
            xi[c.sample] = xi[c.sample].max(c.loss - c.delta.dot_dense(omega));
        }
        xi
    }

    fn recompute_u(&mut self) {
        self.u = vec![0.0; self.dim];
        for (c, &a) in self.constraints.iter().zip(&self.alpha) {
            if a != 0.0 {
                c.delta.add_to(&mut self.u, a);
            }
        }
    }

    /// Replaces every delta with `anchors[sample] − feature`, keeping α.
    pub fn rebase(&mut self, anchors: &[SparseVec]) {
        for c in &mut self.constraints {
            c.delta = anchors[c.sample].sub(&c.feature);
        }
        self.recompute_u();
    }

    /// Drops constraints whose multiplier is below `tol`.
    pub fn prune(&mut self, tol: f64) {
        let keep: Vec<bool> = self.alpha.iter().map(|&a| a >= tol).collect();
        let mut k = 0;
        self.constraints.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        self.alpha.retain(|&a| a >= tol);
        self.recompute_u();
    }
}

/// Recovers ω = D Σ α Δφ.
pub fn recover_omega(state: &DualState) -> Vec<f64> {
    state.omega()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmoReport {
    pub steps: usize,
    pub max_violation: f64,
    /// Dual objective after every step, when recording was requested.
    pub duals: Vec<f64>,
}

/// Pairwise coordinate ascent within each sample's simplex until every KKT
/// violation is below `eps_kkt` (in units of the per-constraint margin).
pub fn smo_ascent(state: &mut DualState, eps_kkt: f64, record: bool) -> SmoReport {
    let d = state.d;
    let mut by_sample: Vec<Vec<usize>> = vec![Vec::new(); state.n_samples];
    for (c, wc) in state.constraints.iter().enumerate() {
        by_sample[wc.sample].push(c);
    }
    let mut report = SmoReport::default();
    if record {
        report.duals.push(state.dual());
    }
    let max_sweeps = 100_000;
    for _ in 0..max_sweeps {
        let mut worst = 0.0_f64;
        for cs in &by_sample {
            if cs.is_empty() {
                continue;
            }
            // Inner loop on one sample: its variables only interact with the
            // others through ω.
            for _ in 0..50 {
                let omega: Vec<f64> = state.u.iter().map(|v| d * v).collect();
                let slack_mass = 1.0 - cs.iter().map(|&c| state.alpha[c]).sum::<f64>();
                // (constraint or None for the zero constraint, gradient)
                let mut hi: (Option<usize>, f64) = (None, 0.0);
                let mut lo: Option<(Option<usize>, f64)> =
                    (slack_mass > 1e-15).then_some((None, 0.0));
                for &c in cs {
                    let wc = &state.constraints[c];
                    let g = wc.loss - wc.delta.dot_dense(&omega);
                    if g > hi.1 {
                        hi = (Some(c), g);
                    }
                    if state.alpha[c] > 0.0 && lo.map_or(true, |(_, l)| g < l) {
                        lo = Some((Some(c), g));
                    }
                }
                let Some(lo) = lo else { break };
                let gap = hi.1 - lo.1;
                worst = worst.max(gap);
                if gap < eps_kkt || hi.0 == lo.0 {
                    break;
                }
                let zero = SparseVec::default();
                let da = hi.0.map_or(&zero, |c| &state.constraints[c].delta);
                let db = lo.0.map_or(&zero, |c| &state.constraints[c].delta);
                let q = da.dist_sq(db);
                let avail = match lo.0 {
                    Some(c) => state.alpha[c],
                    None => slack_mass,
                };
                let t = if q > 0.0 {
                    (gap / (d * q)).min(avail)
                } else {
                    avail
                };
                if t <= 0.0 {
                    break;
                }
                if let Some(a) = hi.0 {
                    state.alpha[a] += t;
                    let delta = state.constraints[a].delta.clone();
                    delta.add_to(&mut state.u, t);
                }
                if let Some(b) = lo.0 {
                    state.alpha[b] = (state.alpha[b] - t).max(0.0);
                    let delta = state.constraints[b].delta.clone();
                    delta.add_to(&mut state.u, -t);
                }
                report.steps += 1;
                if record {
                    report.duals.push(state.dual());
                }
            }
        }
        report.max_violation = worst;
        if worst < eps_kkt {
            break;
        }
    }
    report
}

/// Most violated labeling of one sample under the current ω.
#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub label: Label,
    pub feature: SparseVec,
    pub loss: f64,
}

/// Loss-augmented inference over a training set.
pub trait SeparationOracle {
    fn n_samples(&self) -> usize;
    /// Feature of the ground-truth labeling: φ^d for positives, zero for
    /// negatives.
    fn anchor(&self, sample: usize) -> &SparseVec;
    /// One most-violated labeling per sample.
    fn separate(&mut self, omega: &[f64]) -> Result<Vec<Separation>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub d: f64,
    pub eps_cp: f64,
    pub eps_kkt: f64,
    pub max_rounds: usize,
    pub prune_every: usize,
    pub prune_tol: f64,
    /// Record the dual after every SMO step.
    pub record_duals: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            d: 0.005,
            eps_cp: 1e-3,
            eps_kkt: 1e-5,
            max_rounds: 500,
            prune_every: 10,
            prune_tol: 1e-8,
            record_duals: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub added: usize,
    pub working_set: usize,
    /// Primal objective over all labelings, from the oracle's answers at the
    /// ω of this round.
    pub primal: f64,
    /// Dual objective of the multipliers that produced that ω.
    pub dual: f64,
    pub smo: SmoReport,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub omega: Vec<f64>,
    pub state: DualState,
    pub rounds: Vec<RoundLog>,
}

impl SolveOutcome {
    /// Primal objective at the returned ω (from the final separation round).
    pub fn primal(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.primal)
    }

    pub fn dual(&self) -> f64 {
        self.state.dual()
    }
}

/// Cutting-plane loop. `warm` carries multipliers from a previous solve; its
/// deltas are rebased onto the oracle's current anchors.
pub fn solve(
    oracle: &mut dyn SeparationOracle,
    dim: usize,
    params: &SolverParams,
    warm: Option<DualState>,
) -> Result<SolveOutcome> {
    if !(params.d > 0.0) {
        return Err(Error::Config(format!("penalty D must be positive, got {}", params.d)));
    }
    let n = oracle.n_samples();
    let anchors: Vec<SparseVec> = (0..n).map(|k| oracle.anchor(k).clone()).collect();
    if let Some(k) = anchors.iter().position(|a| !a.is_finite()) {
        return Err(Error::Solver(format!("sample {k}: non-finite anchor feature")));
    }
    let mut state = match warm {
        Some(mut s) if s.dim == dim && s.n_samples == n => {
            s.d = params.d;
            s.rebase(&anchors);
            s
        }
        _ => DualState::new(dim, n, params.d),
    };
    let mut rounds = Vec::new();
    for round in 0..params.max_rounds {
        let omega = state.omega();
        let seps = oracle.separate(&omega)?;
        if seps.len() != n {
            return Err(Error::Solver(format!(
                "oracle returned {} separations for {n} samples",
                seps.len()
            )));
        }
        let xi = state.slacks(&omega);
        let norm_sq: f64 = omega.iter().map(|v| v * v).sum();
        let mut primal = 0.5 * norm_sq;
        let mut added = 0;
        for (k, s) in seps.into_iter().enumerate() {
            if !s.feature.is_finite() {
                return Err(Error::Solver(format!("sample {k}: non-finite feature")));
            }
            let delta = anchors[k].sub(&s.feature);
            let h = s.loss - delta.dot_dense(&omega);
            primal += params.d * h.max(0.0).max(xi[k]);
            if h > xi[k] + params.eps_cp {
                let dup = state.constraints.iter().any(|c| {
                    c.sample == k && c.loss == s.loss && c.label == s.label && c.delta == delta
                });
                if !dup {
                    state.push(WorkingConstraint {
                        sample: k,
                        label: s.label,
                        feature: s.feature,
                        delta,
                        loss: s.loss,
                    });
                    added += 1;
                }
            }
        }
        let dual = state.dual();
        if added == 0 {
            rounds.push(RoundLog {
                added,
                working_set: state.constraints.len(),
                primal,
                dual,
                smo: SmoReport::default(),
            });
            return Ok(SolveOutcome {
                omega,
                state,
                rounds,
            });
        }
        let smo = smo_ascent(&mut state, params.eps_kkt, params.record_duals);
        rounds.push(RoundLog {
            added,
            working_set: state.constraints.len(),
            primal,
            dual,
            smo,
        });
        if params.prune_every > 0 && (round + 1) % params.prune_every == 0 {
            state.prune(params.prune_tol);
        }
    }
    let last = rounds.last();
    Err(Error::Solver(format!(
        "cutting plane did not converge in {} rounds (working set {}, primal {:.6e}, dual {:.6e})",
        params.max_rounds,
        state.constraints.len(),
        last.map_or(f64::NAN, |r| r.primal),
        state.dual()
    )))
}

/// Oracle over explicit candidate lists, mostly for tests and small problems.
#[derive(Debug, Clone)]
pub struct ListOracle {
    pub anchors: Vec<SparseVec>,
    /// Per sample: candidate labelings as (label, feature, loss).
    pub candidates: Vec<Vec<Separation>>,
}

impl SeparationOracle for ListOracle {
    fn n_samples(&self) -> usize {
        self.anchors.len()
    }

    fn anchor(&self, sample: usize) -> &SparseVec {
        &self.anchors[sample]
    }

    fn separate(&mut self, omega: &[f64]) -> Result<Vec<Separation>> {
        Ok(self
            .candidates
            .iter()
            .map(|cands| {
                let mut best: Option<(&Separation, f64)> = None;
                for c in cands {
                    let v = c.loss + c.feature.dot_dense(omega);
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((c, v));
                    }
                }
                best.expect("non-empty candidate list").0.clone()
            })
            .collect())
    }
}

impl ListOracle {
    /// Exact primal objective over all candidates.
    pub fn primal(&self, omega: &[f64], d: f64) -> f64 {
        let mut p = 0.5 * omega.iter().map(|v| v * v).sum::<f64>();
        for (a, cands) in self.anchors.iter().zip(&self.candidates) {
            let base = a.dot_dense(omega);
            let xi = cands
                .iter()
                .map(|c| c.loss - base + c.feature.dot_dense(omega))
                .fold(0.0, f64::max);
            p += d * xi;
        }
        p
    }
}
