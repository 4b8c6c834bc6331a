//! Balance residuals over subtrajectories and the losses built from them.
//!
//! Every residual in this module has the shape
//! `delta(i, j) = sum_{i <= t < j} c[t] + p[i] - p[j]` where `c[t]` is the
//! per-edge log ratio `log pi_F - log pi_B` and `p` is a potential along the
//! trajectory (`log F`, `V` or `W`). On the terminal edge `c[L-1]` is just
//! `log pi_F(s_f | x)` and `p[L]` carries the terminal target `log R(x)`,
//! minus `log Z` for the forward evaluation residual when that head is
//! active. Losses are computed on these terms first, then their gradients are
//! routed to whichever heads produced live terms.

use crate::diff::Tape;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{add_log_softmax_grad, BundleGrads, HeadKind, ParamSet, PolicyBundle, StateBatch};
use crate::sampler::Trajectory;

/// Which residual to form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    /// Flow residual; `pi_F`, `log F` (and a learned `pi_B`) are live.
    SubTb,
    /// Forward evaluation residual; only `V` and a learned `pi_B` are live.
    SubEb,
    /// Backward evaluation residual; only `pi_F` and `W` are live.
    SubEbBackward,
}

impl ResidualKind {
    fn potential_head(self) -> HeadKind {
        match self {
            ResidualKind::SubTb => HeadKind::LogFlow,
            ResidualKind::SubEb => HeadKind::Value,
            ResidualKind::SubEbBackward => HeadKind::BackwardValue,
        }
    }

    fn live_forward(self) -> bool {
        matches!(self, ResidualKind::SubTb | ResidualKind::SubEbBackward)
    }

    fn live_backward(self) -> bool {
        matches!(self, ResidualKind::SubTb | ResidualKind::SubEb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    SubtbGeometric,
    EdgesOnly,
    FullOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightScheme {
    pub lambda: f64,
    pub kind: WeightKind,
}

impl Default for WeightScheme {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            kind: WeightKind::SubtbGeometric,
        }
    }
}

impl WeightScheme {
    /// Weights aligned with `subtrajectory_pairs(len)`.
    pub fn weights(&self, len: usize) -> Vec<f64> {
        let pairs = subtrajectory_pairs(len);
        match self.kind {
            WeightKind::SubtbGeometric => {
                let raw: Vec<f64> = pairs
                    .iter()
                    .map(|&(i, j)| self.lambda.powi((j - i) as i32))
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            }
            WeightKind::EdgesOnly => pairs
                .iter()
                .map(|&(i, j)| if j - i == 1 { 1.0 } else { 0.0 })
                .collect(),
            WeightKind::FullOnly => pairs
                .iter()
                .map(|&(i, j)| if i == 0 && j == len { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// All `(i, j)` with `0 <= i < j <= len`, ordered by `i` then `j`.
pub fn subtrajectory_pairs(len: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(len * (len + 1) / 2);
    for i in 0..len {
        for j in i + 1..=len {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Per-trajectory residual ingredients: `edge.len() == L`,
/// `potential.len() == L + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceTerms {
    pub edge: Vec<f64>,
    pub potential: Vec<f64>,
}

impl BalanceTerms {
    pub fn len(&self) -> usize {
        self.edge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge.is_empty()
    }

    pub fn residual(&self, i: usize, j: usize) -> Result<f64> {
        if !(i < j && j <= self.len()) {
            return Err(Error::Contract(format!(
                "subtrajectory ({i}, {j}) is outside a trajectory of length {}",
                self.len()
            )));
        }
        Ok(self.edge[i..j].iter().sum::<f64>() + self.potential[i] - self.potential[j])
    }

    /// Residuals for every pair, in `subtrajectory_pairs` order.
    pub fn residuals(&self) -> Vec<f64> {
        let l = self.len();
        let mut prefix = vec![0.0; l + 1];
        for t in 0..l {
            prefix[t + 1] = prefix[t] + self.edge[t];
        }
        subtrajectory_pairs(l)
            .into_iter()
            .map(|(i, j)| prefix[j] - prefix[i] + self.potential[i] - self.potential[j])
            .collect()
    }
}

/// Loss gradients with respect to `BalanceTerms` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGrads {
    pub edge: Vec<f64>,
    pub potential: Vec<f64>,
}

fn check_finite(residuals: &[Vec<f64>], terms: &[BalanceTerms]) -> Result<()> {
    for (k, (res, t)) in residuals.iter().zip(terms).enumerate() {
        for (&r, (i, j)) in res.iter().zip(subtrajectory_pairs(t.len())) {
            if !r.is_finite() {
                return Err(Error::NonFinite(format!(
                    "residual of trajectory {k}, pair ({i}, {j}) is {r}"
                )));
            }
        }
    }
    Ok(())
}

/// `(1/K) sum_tau sum_{i<j} w_{j-i} delta(i, j)^2`, its per-pair residuals and
/// its gradients with respect to the terms.
pub fn weighted_loss(
    terms: &[BalanceTerms],
    scheme: &WeightScheme,
) -> Result<(f64, Vec<Vec<f64>>, Vec<TermGrads>)> {
    if terms.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let scale = 1.0 / terms.len() as f64;
    let residuals: Vec<Vec<f64>> = terms.iter().map(BalanceTerms::residuals).collect();
    check_finite(&residuals, terms)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(terms.len());
    for (t, res) in terms.iter().zip(&residuals) {
        let l = t.len();
        let w = scheme.weights(l);
        let mut g = TermGrads {
            edge: vec![0.0; l],
            potential: vec![0.0; l + 1],
        };
        // d/dc[t] collects pairs with i <= t < j; difference arrays keep it O(pairs)
        let mut diff = vec![0.0; l + 1];
        for (((i, j), &r), &wk) in subtrajectory_pairs(l).into_iter().zip(res).zip(&w) {
            loss += scale * wk * r * r;
            let d = 2.0 * scale * wk * r;
            g.potential[i] += d;
            g.potential[j] -= d;
            diff[i] += d;
            diff[j] -= d;
        }
        let mut run = 0.0;
        for e in 0..l {
            run += diff[e];
            g.edge[e] = run;
        }
        grads.push(g);
    }
    Ok((loss, residuals, grads))
}

/// The lambda-TD critic loss.
///
/// With edge TD errors `e_t = -delta(t, t+1)`, the target at `s_h` is
/// `V(s_h) + sum_{i >= h} lambda^{i-h} e_i`, held constant. The loss is
/// `(1/K) sum_tau sum_{h < L} (target_h - V(s_h))^2` and only the potentials
/// at `s_0 .. s_{L-1}` receive gradient.
pub fn lambda_td_loss(
    terms: &[BalanceTerms],
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<TermGrads>)> {
    if terms.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let scale = 1.0 / terms.len() as f64;
    let mut loss = 0.0;
    let mut gaps_all = Vec::with_capacity(terms.len());
    let mut grads = Vec::with_capacity(terms.len());
    for (k, t) in terms.iter().enumerate() {
        let l = t.len();
        let mut gaps = vec![0.0; l];
        let mut acc = 0.0;
        for h in (0..l).rev() {
            let e = -(t.edge[h] + t.potential[h] - t.potential[h + 1]);
            acc = e + lambda * acc;
            gaps[h] = acc;
        }
        if let Some(h) = gaps.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "TD target of trajectory {k} at step {h} is {}",
                gaps[h]
            )));
        }
        let mut g = TermGrads {
            edge: vec![0.0; l],
            potential: vec![0.0; l + 1],
        };
        for h in 0..l {
            loss += scale * gaps[h] * gaps[h];
            g.potential[h] = -2.0 * scale * gaps[h];
        }
        gaps_all.push(gaps);
        grads.push(g);
    }
    Ok((loss, gaps_all, grads))
}

/// Loss value, residuals and gradients of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub loss: f64,
    /// Per trajectory, per pair residuals (weighted losses) or per-step TD
    /// gaps (lambda-TD).
    pub residuals: Vec<Vec<f64>>,
    pub grads: BundleGrads,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
}

/// Head outputs over the distinct states of a batch of trajectories.
pub(crate) struct Evaluated {
    pub batch: StateBatch,
    /// Per trajectory, the batch row of `s_t` for `t < L`.
    pub rows: Vec<Vec<usize>>,
    pub forward: Option<(Tape, Vec<Vec<f64>>)>,
    pub backward: Option<(Option<Tape>, Vec<Vec<f64>>)>,
    pub potential: Option<(HeadKind, Tape)>,
}

impl Evaluated {
    pub fn new(
        bundle: &PolicyBundle,
        env: &dyn Environment,
        trajs: &[Trajectory],
        forward: bool,
        backward: bool,
        potential: Option<HeadKind>,
    ) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::Contract("empty trajectory batch".into()));
        }
        let mut batch = StateBatch::new(env);
        let mut rows = Vec::with_capacity(trajs.len());
        for t in trajs {
            let r = t.states[..t.len()]
                .iter()
                .map(|s| batch.insert(env, s))
                .collect::<Result<Vec<_>>>()?;
            rows.push(r);
        }
        let forward = if forward {
            Some(bundle.forward_log_probs_rows(env, &batch)?)
        } else {
            None
        };
        let backward = if backward {
            Some(bundle.backward_log_probs_rows(env, &batch)?)
        } else {
            None
        };
        let potential = match potential {
            Some(kind) => Some((kind, bundle.pass(kind, &batch)?)),
            None => None,
        };
        Ok(Self {
            batch,
            rows,
            forward,
            backward,
            potential,
        })
    }

    /// Fresh `log pi_F` of every edge.
    pub fn fresh_log_pf(&self, trajs: &[Trajectory]) -> Vec<Vec<f64>> {
        let (_, lp) = self.forward.as_ref().expect("forward rows evaluated");
        trajs
            .iter()
            .zip(&self.rows)
            .map(|(t, r)| (0..t.len()).map(|e| lp[r[e]][t.actions[e].index]).collect())
            .collect()
    }

    /// Fresh `log pi_B` of every non-terminal edge; the terminal slot is 0.
    pub fn fresh_log_pb(&self, trajs: &[Trajectory]) -> Vec<Vec<f64>> {
        let (_, lp) = self.backward.as_ref().expect("backward rows evaluated");
        trajs
            .iter()
            .zip(&self.rows)
            .map(|(t, r)| {
                let l = t.len();
                (0..l)
                    .map(|e| {
                        if e + 1 < l {
                            lp[r[e + 1]][t.actions[e].index]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn build_terms(
    kind: ResidualKind,
    bundle: &PolicyBundle,
    trajs: &[Trajectory],
    ev: &Evaluated,
) -> Vec<BalanceTerms> {
    let log_pf = if kind.live_forward() {
        ev.fresh_log_pf(trajs)
    } else {
        trajs.iter().map(|t| t.log_pf.clone()).collect()
    };
    let log_pb = if kind.live_backward() {
        ev.fresh_log_pb(trajs)
    } else {
        trajs.iter().map(|t| t.log_pb.clone()).collect()
    };
    let (_, tape) = ev.potential.as_ref().expect("potential head evaluated");
    let out = tape.output();
    trajs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let l = t.len();
            let edge = (0..l)
                .map(|e| {
                    if e + 1 < l {
                        log_pf[k][e] - log_pb[k][e]
                    } else {
                        log_pf[k][e]
                    }
                })
                .collect();
            let mut potential: Vec<f64> = ev.rows[k].iter().map(|&r| out[r]).collect();
            let target = match kind {
                ResidualKind::SubEb => t.log_reward - bundle.log_z.unwrap_or(0.0),
                _ => t.log_reward,
            };
            potential.push(target);
            if kind == ResidualKind::SubTb {
                if let Some(lz) = bundle.log_z {
                    potential[0] = lz;
                }
            }
            BalanceTerms { edge, potential }
        })
        .collect()
}

/// Balance terms of `kind` for every trajectory, with the heads evaluated.
pub(crate) fn evaluate_kind(
    kind: ResidualKind,
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    extra_forward: bool,
    extra_backward: bool,
) -> Result<(Evaluated, Vec<BalanceTerms>)> {
    let ev = Evaluated::new(
        bundle,
        env,
        trajs,
        kind.live_forward() || extra_forward,
        kind.live_backward() || extra_backward,
        Some(kind.potential_head()),
    )?;
    let terms = build_terms(kind, bundle, trajs, &ev);
    Ok((ev, terms))
}

/// Balance terms of `kind` for every trajectory of the batch.
pub fn balance_terms(
    kind: ResidualKind,
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
) -> Result<Vec<BalanceTerms>> {
    Ok(evaluate_kind(kind, bundle, env, trajs, false, false)?.1)
}

/// Accumulates `coef[k][e] * d log pi_F(a_e | s_e)` into the forward head.
pub(crate) fn route_forward(
    bundle: &PolicyBundle,
    ev: &Evaluated,
    trajs: &[Trajectory],
    coef: &[Vec<f64>],
    grads: &mut BundleGrads,
) -> Result<()> {
    let (tape, lp) = ev.forward.as_ref().expect("forward rows evaluated");
    let width = bundle.forward.output_width();
    let mut up = vec![0.0; ev.batch.len() * width];
    let mut any = false;
    for (k, t) in trajs.iter().enumerate() {
        for e in 0..t.len() {
            let c = coef[k][e];
            if c != 0.0 {
                let r = ev.rows[k][e];
                add_log_softmax_grad(&mut up[r * width..(r + 1) * width], &lp[r], t.actions[e].index, c);
                any = true;
            }
        }
    }
    if any {
        bundle.forward.backward_batch(tape, &up, &mut grads.forward)?;
    }
    Ok(())
}

/// Accumulates `coef[k][e] * d log pi_B(s_e | s_{e+1})` into a learned
/// backward head; a uniform backward policy has nothing to update.
pub(crate) fn route_backward(
    bundle: &PolicyBundle,
    ev: &Evaluated,
    trajs: &[Trajectory],
    coef: &[Vec<f64>],
    grads: &mut BundleGrads,
) -> Result<()> {
    let Some(head) = bundle.backward.as_ref() else {
        return Ok(());
    };
    let (tape, lp) = ev.backward.as_ref().expect("backward rows evaluated");
    let tape = tape.as_ref().expect("learned backward head has a tape");
    let width = head.output_width();
    let mut up = vec![0.0; ev.batch.len() * width];
    let mut any = false;
    for (k, t) in trajs.iter().enumerate() {
        for e in 0..t.len().saturating_sub(1) {
            let c = coef[k][e];
            if c != 0.0 {
                let r = ev.rows[k][e + 1];
                add_log_softmax_grad(&mut up[r * width..(r + 1) * width], &lp[r], t.actions[e].index, c);
                any = true;
            }
        }
    }
    if any {
        let acc = grads.backward.as_mut().expect("gradient slot for the backward head");
        head.backward_batch(tape, &up, acc)?;
    }
    Ok(())
}

fn route_potential(
    kind: ResidualKind,
    bundle: &PolicyBundle,
    ev: &Evaluated,
    term_grads: &[TermGrads],
    grads: &mut BundleGrads,
) -> Result<()> {
    let (head_kind, tape) = ev.potential.as_ref().expect("potential head evaluated");
    let mut up = vec![0.0; ev.batch.len()];
    for (k, g) in term_grads.iter().enumerate() {
        for (h, &r) in ev.rows[k].iter().enumerate() {
            if h == 0 && kind == ResidualKind::SubTb && bundle.log_z.is_some() {
                grads.log_z += g.potential[0];
            } else {
                up[r] += g.potential[h];
            }
        }
    }
    let head = bundle.require(*head_kind)?;
    let acc = grads
        .head_mut(*head_kind)
        .expect("gradient slot for an active head");
    head.backward_batch(tape, &up, acc)?;
    Ok(())
}

fn report(
    kind: ResidualKind,
    bundle: &PolicyBundle,
    trajs: &[Trajectory],
    ev: &Evaluated,
    loss: f64,
    residuals: Vec<Vec<f64>>,
    term_grads: &[TermGrads],
) -> Result<ResidualReport> {
    let mut grads = BundleGrads::zeros(bundle);
    if kind.live_forward() {
        let coef: Vec<Vec<f64>> = term_grads.iter().map(|g| g.edge.clone()).collect();
        route_forward(bundle, ev, trajs, &coef, &mut grads)?;
    }
    if kind.live_backward() {
        // c[e] = log pi_F - log pi_B on non-terminal edges
        let coef: Vec<Vec<f64>> = term_grads
            .iter()
            .map(|g| g.edge.iter().map(|v| -v).collect())
            .collect();
        route_backward(bundle, ev, trajs, &coef, &mut grads)?;
    }
    route_potential(kind, bundle, ev, term_grads, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok(ResidualReport {
        loss,
        residuals,
        grad_norm_theta: grads.norm(ParamSet::Theta),
        grad_norm_phi: grads.norm(ParamSet::Phi),
        grads,
    })
}

/// Weighted squared-residual loss of `kind` over a batch, with gradients in
/// the heads that own the live terms.
pub fn loss_weighted(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    kind: ResidualKind,
    scheme: &WeightScheme,
) -> Result<ResidualReport> {
    let (ev, terms) = evaluate_kind(kind, bundle, env, trajs, false, false)?;
    let (loss, residuals, term_grads) = weighted_loss(&terms, scheme)?;
    report(kind, bundle, trajs, &ev, loss, residuals, &term_grads)
}

/// The lambda-TD loss for `V`. Targets use the current `V` and backward
/// policy and are held constant, so only `V` receives gradient.
pub fn loss_lambda_td(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    trajs: &[Trajectory],
    lambda: f64,
) -> Result<ResidualReport> {
    let (ev, terms) = evaluate_kind(ResidualKind::SubEb, bundle, env, trajs, false, false)?;
    let (loss, residuals, term_grads) = lambda_td_loss(&terms, lambda)?;
    let mut grads = BundleGrads::zeros(bundle);
    route_potential(ResidualKind::SubEb, bundle, &ev, &term_grads, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("lambda-TD gradient".into()));
    }
    Ok(ResidualReport {
        loss,
        residuals,
        grad_norm_theta: grads.norm(ParamSet::Theta),
        grad_norm_phi: grads.norm(ParamSet::Phi),
        grads,
    })
}

fn single_residual(
    kind: ResidualKind,
    bundle: &PolicyBundle,
    env: &dyn Environment,
    traj: &Trajectory,
    i: usize,
    j: usize,
) -> Result<f64> {
    balance_terms(kind, bundle, env, std::slice::from_ref(traj))?[0].residual(i, j)
}

/// `log P_F(tau_ij | s_i) F(s_i) / (P_B(tau_ij | s_j) F(s_j))`.
pub fn residual_subtb(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    traj: &Trajectory,
    i: usize,
    j: usize,
) -> Result<f64> {
    single_residual(ResidualKind::SubTb, bundle, env, traj, i, j)
}

/// The forward evaluation residual with `V` as potential.
pub fn residual_subeb(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    traj: &Trajectory,
    i: usize,
    j: usize,
) -> Result<f64> {
    single_residual(ResidualKind::SubEb, bundle, env, traj, i, j)
}

/// The backward evaluation residual with `W` as potential.
pub fn residual_subeb_backward(
    bundle: &PolicyBundle,
    env: &dyn Environment,
    traj: &Trajectory,
    i: usize,
    j: usize,
) -> Result<f64> {
    single_residual(ResidualKind::SubEbBackward, bundle, env, traj, i, j)
}
