//! Top-1 routed expert layers and the load-balancing auxiliary loss.

use rand::Rng;

use crate::encoder::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{argmax, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterMode {
    PerLayer,
    /// Every MoE layer holds the same weight id.
    Shared,
}

/// Linear map `D -> N` followed by a softmax. No bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Router {
    pub weight: ParamId,
    pub mode: RouterMode,
}

/// Two-layer GELU feed-forward block, also used as the dense FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Expert {
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2)?;
        tape.add_bias(y, b2)
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<Expert>,
    pub layer_index: usize,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Routing outcome of one MoE layer for `T` tokens.
#[derive(Clone, Debug)]
pub struct DispatchResult<S> {
    /// Expert that processed each token.
    pub assignment: Vec<usize>,
    /// Router probability of the chosen expert, per token.
    pub gate: Vec<f64>,
    /// `[T x N]` router probabilities.
    pub probs: Tensor<S>,
    /// Tokens evaluated by each expert; sums to `T`.
    pub expert_tokens: Vec<usize>,
    pub(crate) probs_var: Var,
}

impl<S: Real> DispatchResult<S> {
    pub fn num_tokens(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs_var(&self) -> Var {
        self.probs_var
    }

    /// Fraction of tokens dispatched to each expert.
    pub fn usage(&self) -> Vec<f64> {
        usage_fractions(&self.assignment, self.num_experts())
    }
}

pub fn usage_fractions(assignment: &[usize], n: usize) -> Vec<f64> {
    let mut f = vec![0.0; n];
    for &a in assignment {
        f[a] += 1.0;
    }
    let t = assignment.len().max(1) as f64;
    f.iter_mut().for_each(|x| *x /= t);
    f
}

/// Random reassignment of routed experts, used by the specialization probe.
pub struct Perturbation {
    pub p: f64,
    /// Draw the replacement from the other `N - 1` experts only.
    pub exclude_original: bool,
    pub rng: StreamRng,
}

impl Perturbation {
    fn apply(&mut self, assignment: &mut [usize], n: usize) {
        if self.p <= 0.0 {
            return;
        }
        for a in assignment.iter_mut() {
            if self.rng.random::<f64>() >= self.p {
                continue;
            }
            *a = if self.exclude_original && n > 1 {
                let r = self.rng.random_range(0..n - 1);
                if r >= *a {
                    r + 1
                } else {
                    r
                }
            } else {
                self.rng.random_range(0..n)
            };
        }
    }
}

#[derive(Default)]
pub struct MoeOptions<'a> {
    pub perturb: Option<&'a mut Perturbation>,
    /// Treat the gate factor as a constant (diagnostics only).
    pub detach_gate: bool,
}

/// Router probabilities and argmax assignment (lowest index wins ties).
pub fn route<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    router: &Router,
    x: Var,
) -> Result<DispatchResult<S>> {
    let w = tape.param(store, router.weight);
    let logits = tape.matmul(x, w)?;
    let probs_var = tape.softmax(logits)?;
    let probs = tape.value(probs_var).clone();
    let n = probs.cols();
    let assignment: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    let gate = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| probs.at(i, j).as_f64())
        .collect();
    let mut expert_tokens = vec![0; n];
    assignment.iter().for_each(|&a| expert_tokens[a] += 1);
    Ok(DispatchResult {
        assignment,
        gate,
        probs,
        expert_tokens,
        probs_var,
    })
}

/// Sends every token through its assigned expert only and scales the result
/// by the gate probability.
pub fn moe_forward<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    layer: &MoeLayer,
    x: Var,
    opts: MoeOptions<'_>,
) -> Result<(Var, DispatchResult<S>)> {
    let mut d = route(tape, store, &layer.router, x)?;
    let n = layer.num_experts();
    if d.num_experts() != n {
        return Err(Error::shape("moe_forward", &[n], &[d.num_experts()]));
    }
    let t = d.num_tokens();
    if let Some(p) = opts.perturb {
        p.apply(&mut d.assignment, n);
        let probs = &d.probs;
        d.gate = d
            .assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| probs.at(i, j).as_f64())
            .collect();
        d.expert_tokens = vec![0; n];
        d.assignment.iter().for_each(|&a| d.expert_tokens[a] += 1);
    }

    let mut combined: Option<Var> = None;
    for (j, expert) in layer.experts.iter().enumerate() {
        let idx: Vec<usize> = (0..t).filter(|&i| d.assignment[i] == j).collect();
        if idx.is_empty() {
            continue;
        }
        let xj = tape.gather_rows(x, &idx)?;
        let yj = expert.forward(tape, store, xj)?;
        let placed = tape.scatter_add_rows(yj, &idx, t)?;
        combined = Some(match combined {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    let combined = combined.ok_or_else(|| Error::Contract("moe_forward on zero tokens".into()))?;
    let gate = if opts.detach_gate {
        let g = d.gate.iter().map(|&x| S::from_f64(x)).collect();
        tape.constant(Tensor::vector(g))
    } else {
        tape.pick(d.probs_var, &d.assignment)?
    };
    let out = tape.mul_rows(combined, gate)?;
    Ok((out, d))
}

/// `sum_l N * sum_j f_j * rho_j` with `f` the dispatch fractions (constant
/// under differentiation) and `rho` the per-expert mean of winning
/// probabilities.
pub fn load_balance_loss<S: Real>(
    tape: &mut Tape<S>,
    dispatches: &[DispatchResult<S>],
    num_experts: usize,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for d in dispatches {
        if d.num_experts() != num_experts {
            return Err(Error::shape(
                "load_balance_loss",
                &[num_experts],
                &[d.num_experts()],
            ));
        }
        let t = d.num_tokens();
        if t == 0 {
            return Err(Error::Contract("load_balance_loss over zero tokens".into()));
        }
        let f = usage_fractions(&d.assignment, num_experts);
        let winning = tape.pick(d.probs_var, &d.assignment)?;
        let winning = tape.reshape(winning, &[t, 1])?;
        let mass = tape.scatter_add_rows(winning, &d.assignment, num_experts)?;
        let rho = tape.scale(mass, S::from_f64(1.0 / t as f64));
        let f = tape.constant(Tensor::new(
            vec![num_experts, 1],
            f.into_iter().map(S::from_f64).collect(),
        )?);
        let dot = tape.mul(rho, f)?;
        let dot = tape.sum(dot);
        let layer = tape.scale(dot, S::from_f64(num_experts as f64));
        total = Some(match total {
            Some(acc) => tape.add(acc, layer)?,
            None => layer,
        });
    }
    total.ok_or_else(|| Error::Contract("load_balance_loss without MoE layers".into()))
}

/// Router weights in the model: `L*D*N` for Switch, `D*N` for Omni-router.
pub fn router_param_count(config: &ModelConfig) -> Result<usize> {
    let per_router = config.embed_dim * config.experts;
    match config.variant {
        Variant::Dense => Err(Error::Contract("dense models have no router".into())),
        Variant::Switch => Ok(config.layers * per_router),
        Variant::Omni => Ok(per_router),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_router(w: Tensor<f64>) -> (ParamStore<f64>, Router) {
        let mut store = ParamStore::new();
        let weight = store.add("router", w).unwrap();
        (
            store,
            Router {
                weight,
                mode: RouterMode::PerLayer,
            },
        )
    }

    #[test]
    fn zero_router_is_uniform_and_ties_to_expert_zero() {
        let (store, router) = store_with_router(Tensor::zeros(&[3, 4]));
        let mut tape = Tape::new();
        let x =
            tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap());
        let d = route(&mut tape, &store, &router, x).unwrap();
        assert!(d.probs.data().iter().all(|&p| p == 0.25));
        assert_eq!(d.assignment, vec![0, 0]);
        assert_eq!(d.gate, vec![0.25, 0.25]);
    }

    #[test]
    fn two_expert_route_matches_direct_softmax() {
        let (store, router) =
            store_with_router(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let d = route(&mut tape, &store, &router, x).unwrap();
        // e^2 / (e^2 + 1)
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((d.probs.at(0, 0) - p0).abs() < 1e-12);
        assert!((d.probs.at(0, 0) - 0.8808).abs() < 1e-4);
        assert!((d.probs.at(0, 1) - 0.1192).abs() < 1e-4);
        assert_eq!(d.assignment, vec![0]);
    }

    #[test]
    fn identical_tokens_route_identically() {
        let (store, router) =
            store_with_router(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.7, 0.1]]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.4, 0.9], vec![0.4, 0.9]]).unwrap());
        let d = route(&mut tape, &store, &router, x).unwrap();
        assert_eq!(d.probs.row(0), d.probs.row(1));
        assert_eq!(d.assignment[0], d.assignment[1]);
    }

    #[test]
    fn route_rejects_dimension_mismatch() {
        let (store, router) = store_with_router(Tensor::zeros(&[3, 2]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            route(&mut tape, &store, &router, x),
            Err(Error::Shape { .. })
        ));
    }

    fn dispatch_from_rows(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> DispatchResult<f64> {
        let t = Tensor::from_rows(rows).unwrap();
        let probs_var = tape.leaf(t.clone());
        let assignment: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        let gate = assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| rows[i][j])
            .collect();
        let mut expert_tokens = vec![0; t.cols()];
        assignment.iter().for_each(|&a| expert_tokens[a] += 1);
        DispatchResult {
            assignment,
            gate,
            probs: t,
            expert_tokens,
            probs_var,
        }
    }

    #[test]
    fn load_balance_balanced_is_one() {
        // f_j = rho_j = 1/N: one confident token per expert.
        let mut tape = Tape::new();
        let n = 4;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let d = dispatch_from_rows(&mut tape, &rows);
        let loss = load_balance_loss(&mut tape, &[d], n).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_balance_uniform_probabilities_give_one_over_n() {
        // Winning mass per token is only 1/N when every row is uniform.
        let mut tape = Tape::new();
        let n = 4;
        let mut d = dispatch_from_rows(&mut tape, &vec![vec![0.25; n]; n]);
        d.assignment = (0..n).collect();
        let loss = load_balance_loss(&mut tape, &[d], n).unwrap();
        assert!((tape.value(loss).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn load_balance_collapse_is_n() {
        let mut tape = Tape::new();
        let d = dispatch_from_rows(&mut tape, &[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let loss = load_balance_loss(&mut tape, &[d], 2).unwrap();
        assert_eq!(tape.value(loss).item(), 2.0);
    }

    #[test]
    fn load_balance_four_token_example() {
        let mut tape = Tape::new();
        let d = dispatch_from_rows(
            &mut tape,
            &[
                vec![0.9, 0.1],
                vec![0.8, 0.2],
                vec![0.6, 0.4],
                vec![0.3, 0.7],
            ],
        );
        let loss = load_balance_loss(&mut tape, &[d], 2).unwrap();
        assert!((tape.value(loss).item() - 0.95).abs() < 1e-9);
    }

    #[test]
    fn load_balance_rejects_empty() {
        let mut tape = Tape::<f64>::new();
        assert!(load_balance_loss(&mut tape, &[], 2).is_err());
    }
}
