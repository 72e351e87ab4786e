//! Per-cycle reliability scoring, reliability-weighted aggregation,
//! adaptive halting and search-derived training targets for the scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mhsp::{CycleVars, Halter};
use crate::model::{glorot, init_uniform};
use crate::numcore::{softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct IueConfig {
    /// Softmax temperature over per-cycle reliabilities.
    pub tau_ens: f64,
    /// Batch-mean reliability above which the run halts (from cycle 2).
    pub tau_stop: f64,
    /// Train a second head on the search targets instead of the
    /// aggregation head.
    pub reward_head: bool,
}

impl Default for IueConfig {
    fn default() -> Self {
        Self {
            tau_ens: 4.0,
            tau_stop: 0.85,
            reward_head: false,
        }
    }
}

/// Affine scorer on `[g; ℓ]`: `W[1×(U+K)]`, `b[1]`.
#[derive(Clone, Debug)]
pub struct ReliabilityHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub w: Var,
    pub b: Var,
}

impl ReliabilityHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        state_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = state_dim + classes;
        Ok(Self {
            w: store.add(
                format!("{prefix}.w"),
                init_uniform(&[1, fan_in], glorot(1, fan_in), rng),
            )?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1]))?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundHead {
        BoundHead {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
        }
    }
}

/// Pre-sigmoid score `W·[g; ℓ] + b` for every sample, `[B]`.
pub fn score(g: &mut Graph, head: &BoundHead, state: Var, logits: Var) -> Result<Var> {
    let joined = g.concat_cols(state, logits)?;
    let want = g.value(head.w).shape()[1];
    let have = g.value(joined).shape()[1];
    if want != have {
        return Err(Error::dim(
            "reliability",
            &[1, want],
            g.value(joined).shape(),
        ));
    }
    let s = g.linear(joined, head.w, head.b)?;
    let batch = g.value(s).shape()[0];
    g.reshape(s, &[batch])
}

/// Reliability `sigmoid(W·[g; ℓ] + b)` for `g[B×U]`, `ℓ[B×K]`.
pub fn reliability(
    store: &ParamStore,
    head: &ReliabilityHead,
    state: &Tensor,
    logits: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = head.bind(&mut g, store);
    let (sv, lv) = (g.constant(state.clone()), g.constant(logits.clone()));
    let s = score(&mut g, &bound, sv, lv)?;
    let r = g.sigmoid(s);
    Ok(g.value(r).clone())
}

/// True iff `cycle >= 2` and the batch-mean reliability strictly exceeds
/// `tau_stop`.
pub fn should_halt(reliabilities: &[f64], cycle: usize, tau_stop: f64) -> bool {
    if cycle < 2 || reliabilities.is_empty() {
        return false;
    }
    let mean = reliabilities.iter().sum::<f64>() / reliabilities.len() as f64;
    mean > tau_stop
}

/// Softmax-weighted combination of cycle logits on the tape.
///
/// Returns `(ℓ_final[B×K], α[B×L'])` with
/// `α(b) = softmax(tau · [r¹_b … r^L'_b])`.
pub fn aggregate_vars(
    g: &mut Graph,
    logits: &[Var],
    reliabilities: &[Var],
    tau_ens: f64,
) -> Result<(Var, Var)> {
    if logits.is_empty() || logits.len() != reliabilities.len() {
        return Err(Error::Contract(format!(
            "aggregation needs one reliability per cycle, got {} logits and {} scores",
            logits.len(),
            reliabilities.len()
        )));
    }
    let r = g.stack_cols(reliabilities)?;
    let alpha = g.softmax_temp(r, tau_ens);
    let mut total: Option<Var> = None;
    for (c, &l) in logits.iter().enumerate() {
        let a = g.column(alpha, c)?;
        let term = g.scale_rows(l, a)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((total.expect("non-empty"), alpha))
}

/// Halter that scores every cycle and, when a threshold is set, stops on
/// [`should_halt`].
pub struct IueHalter {
    head: BoundHead,
    reward: Option<BoundHead>,
    tau_stop: Option<f64>,
    pub scores: Vec<Var>,
    pub reliabilities: Vec<Var>,
    pub reward_scores: Vec<Var>,
}

impl IueHalter {
    pub fn new(
        g: &mut Graph,
        store: &ParamStore,
        head: &ReliabilityHead,
        reward: Option<&ReliabilityHead>,
        tau_stop: Option<f64>,
    ) -> Self {
        Self {
            head: head.bind(g, store),
            reward: reward.map(|h| h.bind(g, store)),
            tau_stop,
            scores: Vec::new(),
            reliabilities: Vec::new(),
            reward_scores: Vec::new(),
        }
    }
}

impl Halter for IueHalter {
    fn observe(&mut self, g: &mut Graph, cycle: &CycleVars) -> Result<bool> {
        let s = score(g, &self.head, cycle.state, cycle.logits)?;
        let r = g.sigmoid(s);
        self.scores.push(s);
        self.reliabilities.push(r);
        if let Some(head) = &self.reward {
            let rs = score(g, head, cycle.state, cycle.logits)?;
            self.reward_scores.push(rs);
        }
        Ok(match self.tau_stop {
            Some(tau) => should_halt(g.value(r).data(), cycle.cycle, tau),
            None => false,
        })
    }
}

/// Values of one cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutput {
    pub logits: Tensor,
    pub state: Tensor,
    pub cycle_index: usize,
}

/// Everything one forward pass produced, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleTrace {
    pub outputs: Vec<CycleOutput>,
    /// `r^(c)` per cycle, `[B]` each.
    pub reliabilities: Vec<Tensor>,
    pub halted_early: bool,
    pub final_logits: Tensor,
}

impl CycleTrace {
    pub fn new(
        outputs: Vec<CycleOutput>,
        reliabilities: Vec<Tensor>,
        tau_ens: f64,
    ) -> Result<Self> {
        let mut trace = Self {
            outputs,
            reliabilities,
            halted_early: false,
            final_logits: Tensor::scalar(0.0),
        };
        trace.final_logits = aggregate(&trace, tau_ens)?;
        Ok(trace)
    }

    pub fn from_forward(g: &Graph, fwd: &crate::model::Forward) -> Self {
        Self {
            outputs: fwd
                .cycles
                .iter()
                .map(|c| CycleOutput {
                    logits: g.value(c.logits).clone(),
                    state: g.value(c.state).clone(),
                    cycle_index: c.cycle,
                })
                .collect(),
            reliabilities: fwd
                .reliabilities
                .iter()
                .map(|&r| g.value(r).clone())
                .collect(),
            halted_early: fwd.halted_early,
            final_logits: g.value(fwd.logits).clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.outputs
            .first()
            .map(|o| o.logits.shape()[0])
            .unwrap_or(0)
    }
}

/// Aggregated logits over all cycles of `trace`.
pub fn aggregate(trace: &CycleTrace, tau_ens: f64) -> Result<Tensor> {
    aggregate_prefix(trace, trace.len(), tau_ens)
}

fn aggregate_prefix(trace: &CycleTrace, depth: usize, tau_ens: f64) -> Result<Tensor> {
    if depth == 0 || depth > trace.len() || trace.reliabilities.len() < depth {
        return Err(Error::Contract(format!(
            "cannot aggregate {depth} cycles of a trace with {} outputs",
            trace.len()
        )));
    }
    let mut g = Graph::new();
    let logits: Vec<Var> = trace.outputs[..depth]
        .iter()
        .map(|o| g.constant(o.logits.clone()))
        .collect();
    let rel: Vec<Var> = trace.reliabilities[..depth]
        .iter()
        .map(|r| g.constant(r.clone()))
        .collect();
    let (out, _) = aggregate_vars(&mut g, &logits, &rel, tau_ens)?;
    Ok(g.value(out).clone())
}

/// Batch-mean probability of the true label under the aggregate of cycles
/// `1..=depth`; lies in `[0, 1]`.
pub fn rollout_return(
    trace: &CycleTrace,
    labels: &[usize],
    depth: usize,
    tau_ens: f64,
) -> Result<f64> {
    let logits = aggregate_prefix(trace, depth, tau_ens)?;
    let k = logits.shape()[1];
    if labels.len() != logits.shape()[0] {
        return Err(Error::dim(
            "rollout_return",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let probs = softmax_rows(logits.data(), k, 1.0);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label {
                index: i,
                label,
                classes: k,
            });
        }
        total += probs[i * k + label];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MctsConfig {
    pub n_simulations: usize,
    /// UCB1 exploration constant.
    pub ucb_c: f64,
    pub rng_seed: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            n_simulations: 8,
            ucb_c: std::f64::consts::SQRT_2,
            rng_seed: 0,
        }
    }
}

const HALT: usize = 0;
const CONTINUE: usize = 1;

struct Node {
    depth: usize,
    terminal: bool,
    children: [Option<usize>; 2],
    visits: u64,
    value: f64,
}

/// Search tree over halt/continue decisions along the cycle chain.
struct HaltTree {
    nodes: Vec<Node>,
    max_depth: usize,
}

impl HaltTree {
    fn new(max_depth: usize) -> Self {
        Self {
            nodes: vec![Node {
                depth: 1,
                terminal: false,
                children: [None, None],
                visits: 0,
                value: 0.0,
            }],
            max_depth,
        }
    }

    fn legal(&self, node: usize) -> &'static [usize] {
        if self.nodes[node].depth < self.max_depth {
            &[HALT, CONTINUE]
        } else {
            &[HALT]
        }
    }

    fn expand(&mut self, node: usize, action: usize) -> usize {
        let parent_depth = self.nodes[node].depth;
        let child = Node {
            depth: if action == HALT {
                parent_depth
            } else {
                parent_depth + 1
            },
            terminal: action == HALT,
            children: [None, None],
            visits: 0,
            value: 0.0,
        };
        self.nodes.push(child);
        let id = self.nodes.len() - 1;
        self.nodes[node].children[action] = Some(id);
        id
    }

    fn ucb_select(&self, node: usize, c: f64) -> usize {
        let parent_visits = self.nodes[node].visits.max(1) as f64;
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for &a in self.legal(node) {
            let child = self.nodes[node].children[a].expect("fully expanded");
            let n = &self.nodes[child];
            let score =
                n.value / n.visits as f64 + c * (parent_visits.ln() / n.visits as f64).sqrt();
            if score > best_score {
                best_score = score;
                best = Some(child);
            }
        }
        best.expect("at least one legal action")
    }
}

/// Per-depth reliability targets from a shallow search over halting
/// decisions.
///
/// Halting at depth `c` earns [`rollout_return`] for `c`. Each simulation
/// descends the tree with UCB1, expands one untried action, finishes with a
/// uniform random rollout and backs its return up the path. The target for
/// depth `c` is the mean return of all simulations whose trajectory reached
/// `c`; depths no simulation reached fall back to their own halting return.
pub fn mcts_targets(
    trace: &CycleTrace,
    labels: &[usize],
    cfg: &MctsConfig,
    tau_ens: f64,
) -> Result<Tensor> {
    let depth = trace.len();
    if depth == 0 {
        return Err(Error::Contract("search over an empty trace".into()));
    }
    if cfg.n_simulations == 0 {
        return Err(Error::Config("n_simulations must be at least 1".into()));
    }
    let returns: Vec<f64> = (1..=depth)
        .map(|c| rollout_return(trace, labels, c, tau_ens))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut tree = HaltTree::new(depth);
    let mut sums = vec![0.0; depth];
    let mut counts = vec![0u64; depth];

    for _ in 0..cfg.n_simulations {
        let mut path = vec![0usize];
        let mut node = 0usize;
        let halt_depth = loop {
            if tree.nodes[node].terminal {
                break tree.nodes[node].depth;
            }
            let untried: Vec<usize> = tree
                .legal(node)
                .iter()
                .copied()
                .filter(|&a| tree.nodes[node].children[a].is_none())
                .collect();
            if !untried.is_empty() {
                let action = untried[rng.random_range(0..untried.len())];
                let child = tree.expand(node, action);
                path.push(child);
                let mut d = tree.nodes[child].depth;
                if !tree.nodes[child].terminal {
                    // random rollout below the frontier
                    while d < depth && rng.random_bool(0.5) {
                        d += 1;
                    }
                }
                break d;
            }
            node = tree.ucb_select(node, cfg.ucb_c);
            path.push(node);
        };
        let ret = returns[halt_depth - 1];
        for &n in &path {
            tree.nodes[n].visits += 1;
            tree.nodes[n].value += ret;
        }
        for c in 0..halt_depth {
            sums[c] += ret;
            counts[c] += 1;
        }
    }

    let targets: Vec<f64> = (0..depth)
        .map(|c| {
            if counts[c] > 0 {
                sums[c] / counts[c] as f64
            } else {
                returns[c]
            }
        })
        .collect();
    Ok(Tensor::vector(&targets))
}
