"""Exact brute-force analysis of small discrete constrained MDPs.

Enumerates every trajectory with nonzero probability under the empirical
behavior model of an offline dataset, computes the closed-form optimal
budget-constrained reweighting and its smoothed relaxation, and evaluates
finite-sample return/cost error bounds by exact dynamic programming.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleBudgetError, UndefinedBoundError


@dataclass
class TrajectoryTable:
    """Every nonzero-probability trajectory of the empirical behavior model."""

    gamma: float
    horizon: int                # decision steps per trajectory
    states: np.ndarray          # (M, horizon+1) int, includes final state
    actions: np.ndarray         # (M, horizon) int
    probs: np.ndarray           # (M,) behavior-model probability, sums to 1
    returns: np.ndarray         # (M,) true discounted return
    costs: np.ndarray           # (M,) true discounted cost
    start_probs: np.ndarray     # (S,)
    policy: np.ndarray          # (S, A) empirical behavior policy
    kernel: np.ndarray          # (S, A, S) empirical transition model
    count_sa: np.ndarray        # (S, A) visit counts
    reward_sa: np.ndarray       # (S, A) true per-step reward
    cost_sa: np.ndarray         # (S, A) true per-step cost
    kernel_true: np.ndarray     # (S, A, S) exact env dynamics

    @property
    def n_traj(self) -> int:
        return len(self.probs)


def build_table(env, dataset) -> TrajectoryTable:
    """Count-based empirical model plus depth-first trajectory enumeration."""
    H = env.spec.max_len
    S, A = env.n_states, env.n_actions
    count_s = np.zeros(S)
    count_sa = np.zeros((S, A))
    count_sas = np.zeros((S, A, S))
    start_counts = np.zeros(S)
    for ep in dataset.episodes:
        start_counts[int(ep.states[0])] += 1
        for s, a, s2 in zip(ep.states, ep.actions, ep.next_states):
            count_s[int(s)] += 1
            count_sa[int(s), int(a)] += 1
            count_sas[int(s), int(a), int(s2)] += 1
    start_probs = start_counts / start_counts.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        policy = np.where(count_s[:, None] > 0, count_sa / count_s[:, None], 0.0)
        kernel = np.where(count_sa[:, :, None] > 0,
                          count_sas / count_sa[:, :, None], 0.0)

    reward_sa = np.array([[env.reward(s, a) for a in range(A)] for s in range(S)])
    cost_sa = np.array([[env.cost(s, a) for a in range(A)] for s in range(S)])
    kernel_true = np.stack([[env.transition_probs(s, a) for a in range(A)]
                            for s in range(S)])

    # depth-first walk over observed branches only
    all_states, all_actions, all_probs = [], [], []
    stack = [((s0,), (), start_probs[s0]) for s0 in range(S) if start_probs[s0] > 0]
    while stack:
        ss, aa, p = stack.pop()
        if len(aa) == H:
            all_states.append(ss)
            all_actions.append(aa)
            all_probs.append(p)
            continue
        s = ss[-1]
        for a in range(A):
            pa = policy[s, a]
            if pa == 0.0:
                continue
            for s2 in range(S):
                pt = kernel[s, a, s2]
                if pt > 0.0:
                    stack.append((ss + (s2,), aa + (a,), p * pa * pt))

    st = np.array(all_states, dtype=np.int64)
    ac = np.array(all_actions, dtype=np.int64)
    pr = np.array(all_probs)
    if abs(pr.sum() - 1.0) > 1e-9:
        # a reachable state has no outgoing data, so the empirical model is
        # not a full-depth trajectory distribution
        raise UndefinedBoundError(
            "empirical model drops probability mass; collect more episodes")
    disc = np.power(env.spec.gamma, np.arange(H))
    rets = (reward_sa[st[:, :H], ac] * disc).sum(axis=1)
    csts = (cost_sa[st[:, :H], ac] * disc).sum(axis=1)
    return TrajectoryTable(env.spec.gamma, H, st, ac, pr, rets, csts,
                           start_probs, policy, kernel, count_sa,
                           reward_sa, cost_sa, kernel_true)


# ---------------------------------------------------------------------------
# closed-form reweightings


@dataclass
class ReweightedDistribution:
    q: np.ndarray
    budget: float
    alpha: float
    log_partition: float
    kl: float              # KL(q || behavior), the epsilon this q achieves
    safe_mask: np.ndarray
    unsafe_mass: float = 0.0


def safe_mass(table: TrajectoryTable, budget: float) -> float:
    return float(table.probs[table.costs <= budget].sum())


def feasible(table: TrajectoryTable, budget: float, eps: float) -> bool:
    """Whether the trust region is wide enough to reach the safe set;
    equality counts as feasible (up to float tolerance)."""
    return safe_mass(table, budget) >= np.exp(-eps) * (1.0 - 1e-12)


def _kl(q: np.ndarray, p: np.ndarray) -> float:
    nz = q > 0
    return float(np.sum(q[nz] * (np.log(q[nz]) - np.log(p[nz]))))


def optimal_reweighted(table: TrajectoryTable, budget: float,
                       alpha: float) -> ReweightedDistribution:
    """Exponential-twist optimum restricted to the safe set.

    q(tau) proportional to p(tau) * exp(alpha * R(tau)) when C(tau) <= budget,
    zero otherwise. Raises InfeasibleBudgetError when nothing is safe.
    """
    safe = table.costs <= budget
    if not safe.any() or table.probs[safe].sum() <= 0.0:
        raise InfeasibleBudgetError(f"no trajectory satisfies budget {budget}")
    expo = np.where(safe, alpha * table.returns, -np.inf)
    shift = expo[safe].max()
    w = np.where(safe, table.probs * np.exp(expo - shift), 0.0)
    z = w.sum()
    q = w / z
    log_partition = float(np.log(z) + shift)
    return ReweightedDistribution(q, budget, alpha, log_partition,
                                  _kl(q, table.probs), safe)


def smoothed_reweighted(table: TrajectoryTable, budget: float, alpha: float,
                        penalty: float) -> ReweightedDistribution:
    """Full-support relaxation: the hard safety wall becomes a linear
    overspend penalty with slope `penalty` (strict overspend only; hitting
    the budget exactly is safe)."""
    over = np.where(table.costs > budget, table.costs - budget, 0.0)
    objective = table.returns - penalty * over
    expo = alpha * objective
    shift = expo.max()
    w = table.probs * np.exp(expo - shift)
    z = w.sum()
    q = w / z
    safe = table.costs <= budget
    return ReweightedDistribution(q, budget, alpha, float(np.log(z) + shift),
                                  _kl(q, table.probs), safe,
                                  unsafe_mass=float(q[~safe].sum()))


def expected_return(table: TrajectoryTable, q: np.ndarray) -> float:
    return float(q @ table.returns)


def expected_cost(table: TrajectoryTable, q: np.ndarray) -> float:
    return float(q @ table.costs)


def total_variation(q1: np.ndarray, q2: np.ndarray) -> float:
    return 0.5 * float(np.abs(q1 - q2).sum())


def kkt_residual(table: TrajectoryTable, dist: ReweightedDistribution) -> float:
    """max | log q - log p - alpha R + log Z | over the safe support; zero for
    the exact closed form."""
    m = dist.safe_mask & (dist.q > 0)
    resid = (np.log(dist.q[m]) - np.log(table.probs[m])
             - dist.alpha * table.returns[m] + dist.log_partition)
    return float(np.abs(resid).max())


def sample_feasible(table: TrajectoryTable, dist: ReweightedDistribution,
                    n: int, rng: np.random.Generator,
                    bisect_iters: int = 40) -> np.ndarray:
    """Random safe-support distributions with KL(q||p) <= dist.kl.

    Draws a Dirichlet direction on the safe set and mixes toward it from the
    optimum as far as the trust region allows (largest feasible mixing weight
    found by bisection; the KL is convex along the segment).
    """
    safe_idx = np.where(dist.safe_mask)[0]
    p = table.probs
    q_opt = dist.q
    eps = dist.kl + 1e-12
    out = np.empty((n, table.n_traj))
    targets = np.zeros((n, table.n_traj))
    draws = rng.dirichlet(np.ones(len(safe_idx)), size=n)
    targets[:, safe_idx] = draws
    # also mix toward renormalized-safe behavior: always feasible, adds spread
    p_safe = np.where(dist.safe_mask, p, 0.0)
    p_safe = p_safe / p_safe.sum()
    use_psafe = rng.random(n) < 0.25
    targets[use_psafe] = p_safe
    lam_frac = rng.random(n)
    for i in range(n):
        u = targets[i]
        lo, hi = 0.0, 1.0
        if _kl((1.0 - hi) * q_opt + hi * u, p) <= eps:
            lam_max = 1.0
        else:
            for _ in range(bisect_iters):
                mid = 0.5 * (lo + hi)
                if _kl((1.0 - mid) * q_opt + mid * u, p) <= eps:
                    lo = mid
                else:
                    hi = mid
            lam_max = lo
        lam = lam_max * lam_frac[i]
        out[i] = (1.0 - lam) * q_opt + lam * u
    return out


# ---------------------------------------------------------------------------
# policies and exact evaluation


def policy_from_q(table: TrajectoryTable, q: np.ndarray) -> np.ndarray:
    """Step-indexed policy induced by a trajectory distribution.

    pi[t, s, a] is the conditional of q at step t; states q never visits at
    step t fall back to the empirical behavior policy.
    """
    H = table.horizon
    S, A = table.policy.shape
    pol = np.zeros((H, S, A))
    mass = np.zeros((H, S))
    ts = np.broadcast_to(np.arange(H), table.actions.shape)
    np.add.at(pol, (ts, table.states[:, :H], table.actions), q[:, None])
    np.add.at(mass, (ts, table.states[:, :H]), q[:, None])
    filled = mass > 0
    pol[filled] /= mass[filled][:, None]
    fallback = np.broadcast_to(table.policy, (H, S, A))
    pol[~filled] = fallback[~filled]
    # rows with no data at all: uniform
    row_sums = pol.sum(axis=2)
    empty = row_sums == 0
    pol[empty] = 1.0 / A
    return pol


def exact_policy_return(table: TrajectoryTable, pol: np.ndarray,
                        dynamics: str = "true") -> float:
    """J(pi) under the exact or the empirical kernel, by forward DP from the
    dataset's start distribution."""
    kernel = table.kernel_true if dynamics == "true" else table.kernel
    d = table.start_probs.copy()
    total = 0.0
    for t in range(table.horizon):
        da = d[:, None] * pol[t]
        total += (table.gamma ** t) * float((da * table.reward_sa).sum())
        d = np.einsum("sa,sax->x", da, kernel)
    return total


def _geom(gamma: float, horizon: int) -> float:
    if gamma == 1.0:
        return float(horizon)
    return (1.0 - gamma ** horizon) / (1.0 - gamma)


@dataclass
class BoundInputs:
    """Constants for the finite-sample error bounds.

    c_transition / c_cost play the per-count concentration roles; fit them
    from data (fit_* helpers) or supply them from a known noise scale.
    count_scale rescales all visit counts (e.g. 2.0 models a dataset twice
    the size with the same visitation pattern).
    """

    reward_max: float
    c_transition: float = 0.0
    c_cost: float = 0.0
    delta: float = 0.05
    count_scale: float = 1.0
    stochastic: bool = True


@dataclass
class BoundParts:
    total: float
    mismatch: float      # trust-region (distribution shift) share
    uncertainty: float   # finite-count (model error) share


def uncertainty_expectation(table: TrajectoryTable, pol: np.ndarray,
                            count_scale: float = 1.0) -> float:
    """E over (pi, empirical kernel) of sum_t gamma^t / sqrt(N(s_t, a_t))."""
    counts = table.count_sa * count_scale
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(counts > 0, 1.0 / np.sqrt(np.maximum(counts, 1e-300)), np.inf)
    d = table.start_probs.copy()
    total = 0.0
    for t in range(table.horizon):
        da = d[:, None] * pol[t]
        if np.any((da > 0) & (counts == 0)):
            raise UndefinedBoundError("policy visits a state-action pair with zero count")
        total += (table.gamma ** t) * float((da * np.where(da > 0, inv_sqrt, 0.0)).sum())
        d = np.einsum("sa,sax->x", da, table.kernel)
    return total


def reward_gap_bound(table: TrajectoryTable, pol: np.ndarray,
                     inputs: BoundInputs, eps: float) -> BoundParts:
    """Upper bound on |E_q R - J_true(pi)| for a policy pi derived from a
    trust-region distribution q with KL(q||behavior) <= eps."""
    g = _geom(table.gamma, table.horizon)
    mismatch = 0.0
    if inputs.stochastic:
        mismatch = 2.0 * inputs.reward_max * g * np.sqrt(table.horizon * eps / 2.0)
    unc = (2.0 * inputs.reward_max * g * inputs.c_transition
           * uncertainty_expectation(table, pol, inputs.count_scale))
    return BoundParts(mismatch + unc, mismatch, unc)


def fit_transition_constant(table: TrajectoryTable) -> float:
    """Smallest constant making the per-pair concentration assumption hold on
    the observed support: max over (s,a) of sqrt(N) * TV(true || empirical)."""
    tv = 0.5 * np.abs(table.kernel_true - table.kernel).sum(axis=2)
    seen = table.count_sa > 0
    return float((np.sqrt(table.count_sa[seen]) * tv[seen]).max())


def fit_cost_constant(table: TrajectoryTable, cost_emp: np.ndarray) -> float:
    """max over observed (s,a) of sqrt(N) * |true cost - estimated cost|."""
    seen = table.count_sa > 0
    dev = np.abs(table.cost_sa - cost_emp)
    return float((np.sqrt(table.count_sa[seen]) * dev[seen]).max())


def cost_gap_bound(table: TrajectoryTable, states: np.ndarray, actions: np.ndarray,
                   inputs: BoundInputs) -> float:
    """sum_t gamma^t * c_cost / sqrt(N(s_t, a_t)) along one trajectory."""
    counts = table.count_sa[np.asarray(states)[:len(actions)], actions] * inputs.count_scale
    if np.any(counts == 0):
        raise UndefinedBoundError("trajectory visits a pair with zero count")
    disc = np.power(table.gamma, np.arange(len(actions)))
    return float((disc * inputs.c_cost / np.sqrt(counts)).sum())


def cost_gap_bounds_all(table: TrajectoryTable, inputs: BoundInputs) -> np.ndarray:
    counts = table.count_sa[table.states[:, :table.horizon], table.actions]
    counts = counts * inputs.count_scale
    disc = np.power(table.gamma, np.arange(table.horizon))
    return (disc * inputs.c_cost / np.sqrt(counts)).sum(axis=1)


def _norm_ppf(p: float) -> float:
    """Standard normal quantile (Acklam's rational approximation, ~1e-9)."""
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    plow, phigh = 0.02425, 1 - 0.02425
    if p < plow:
        qq = np.sqrt(-2 * np.log(p))
        return (((((c[0] * qq + c[1]) * qq + c[2]) * qq + c[3]) * qq + c[4]) * qq + c[5]) / \
               ((((d[0] * qq + d[1]) * qq + d[2]) * qq + d[3]) * qq + 1)
    if p > phigh:
        return -_norm_ppf(1 - p)
    qq = p - 0.5
    r = qq * qq
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * qq / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)


def simulate_cost_estimation_trials(table: TrajectoryTable, sigma: float,
                                    delta: float, n_trials: int,
                                    rng: np.random.Generator) -> float:
    """Monte-Carlo check of the per-trajectory cost bound under Gaussian
    cost-observation noise.

    Each trial perturbs every observed pair's cost estimate by its sampling
    error sigma / sqrt(N), draws one trajectory from the behavior model, and
    tests |C - C_hat| <= bound with c_cost = sigma * z_{1 - delta/2}.
    Returns the passing fraction.
    """
    seen = np.argwhere(table.count_sa > 0)
    n_pairs = len(seen)
    counts = table.count_sa[seen[:, 0], seen[:, 1]]
    # discounted occurrence weights of each pair in each trajectory
    disc = np.power(table.gamma, np.arange(table.horizon))
    W = np.zeros((table.n_traj, n_pairs))
    pair_index = {(int(s), int(a)): k for k, (s, a) in enumerate(seen)}
    for t in range(table.horizon):
        for m in range(table.n_traj):
            k = pair_index[(int(table.states[m, t]), int(table.actions[m, t]))]
            W[m, k] += disc[t]
    inputs = BoundInputs(reward_max=0.0, c_cost=sigma * _norm_ppf(1.0 - delta / 2.0))
    bounds = cost_gap_bounds_all(table, inputs)
    ms = rng.choice(table.n_traj, size=n_trials, p=table.probs)
    noise = rng.normal(0.0, sigma / np.sqrt(counts), size=(n_trials, n_pairs))
    gaps = np.einsum("ij,ij->i", noise, W[ms])
    return float(np.mean(np.abs(gaps) <= bounds[ms]))


def rollout_model(table: TrajectoryTable, n: int, rng: np.random.Generator):
    """Vectorized rollouts under the empirical (policy, kernel) pair."""
    H = table.horizon
    S, A = table.policy.shape
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    cdf_pol = np.cumsum(table.policy, axis=1)
    cdf_ker = np.cumsum(table.kernel, axis=2)
    states[:, 0] = rng.choice(S, size=n, p=table.start_probs)
    for t in range(H):
        u = rng.random(n)
        actions[:, t] = (u[:, None] > cdf_pol[states[:, t]]).sum(axis=1)
        u = rng.random(n)
        rows = cdf_ker[states[:, t], actions[:, t]]
        states[:, t + 1] = (u[:, None] > rows).sum(axis=1)
    return states, actions


def oracle_report(env, dataset, budgets, alpha: float,
                  penalties=(0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0)) -> dict:
    """JSON-ready per-budget summary of the exact analysis."""
    table = build_table(env, dataset)
    report = {
        "env": env.spec.name,
        "alpha": alpha,
        "n_trajectories": int(table.n_traj),
        "budgets": [],
    }
    for b in budgets:
        entry = {"budget": float(b), "safe_mass": safe_mass(table, b)}
        try:
            dist = optimal_reweighted(table, b, alpha)
            entry.update({
                "feasible": True,
                "achieved_kl": dist.kl,
                "log_partition": dist.log_partition,
                "expected_return": expected_return(table, dist.q),
                "expected_cost": expected_cost(table, dist.q),
                "smoothed_unsafe_mass": {
                    str(n): smoothed_reweighted(table, b, alpha, n).unsafe_mass
                    for n in penalties
                },
            })
        except InfeasibleBudgetError:
            entry["feasible"] = False
        report["budgets"].append(entry)
    return report
