"""No-U-Turn sampling with windowed warmup adaptation.

Multinomial NUTS with the generalised U-turn criterion (including the checks
across merged subtrees), a diagonal inverse metric and dual-averaging step
size adaptation. Warmup follows the usual schedule: a fast initial buffer,
doubling slow windows that re-estimate the metric, and a terminal buffer.
"""

from __future__ import annotations

import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._accel import worker_count
from .diagnostics import STAT_NAMES, DrawsMatrix


@dataclass(frozen=True)
class SamplerConfig:
    """``iters`` counts warmup; ``iters - warmup`` draws are kept per chain."""

    n_chains: int = 2
    iters: int = 1000
    warmup: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    divergence_threshold: float = 1000.0
    seed: int = 0
    init_step_size: float = 0.1
    progress: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 < self.warmup < self.iters:
            raise ValueError("need 0 < warmup < iters")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class ChainState:
    position: np.ndarray
    logp: float
    grad: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    rng: np.random.Generator
    momentum: np.ndarray = None
    divergences: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if np.any(self.inv_mass <= 0):
            raise ValueError("inverse mass diagonal must be positive")


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain,)))


def leapfrog(position, momentum, step_size, inv_mass, grad_fn, grad=None):
    """One leapfrog step.

    ``grad_fn(q)`` returns ``(log_density, gradient)``; ``grad`` is the
    gradient at ``position`` if already known. Returns
    ``(position, momentum, log_density, gradient)``.
    """
    if grad is None:
        _, grad = grad_fn(position)
    p = momentum + 0.5 * step_size * grad
    q = position + step_size * inv_mass * p
    lp, g = grad_fn(q)
    p = p + 0.5 * step_size * g
    return q, p, lp, g


def hamiltonian(logp, momentum, inv_mass) -> float:
    return -logp + 0.5 * float(momentum @ (inv_mass * momentum))


class _Tree:
    __slots__ = (
        "q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus",
        "rho", "q_prop", "lp_prop", "g_prop", "log_w", "stop",
    )


class _Trajectory:
    """Bookkeeping for one NUTS transition."""

    def __init__(self, logp_grad, eps, inv_mass, H0, rng, threshold):
        self.logp_grad = logp_grad
        self.eps = eps
        self.inv_mass = inv_mass
        self.H0 = H0
        self.rng = rng
        self.threshold = threshold
        self.sum_accept = 0.0
        self.n_leapfrog = 0
        self.diverged = False

    def no_uturn(self, p_sharp_minus, p_sharp_plus, rho) -> bool:
        return float(p_sharp_minus @ rho) > 0 and float(p_sharp_plus @ rho) > 0

    def merge(self, left: _Tree, right: _Tree) -> _Tree:
        """Join two adjacent subtrees (``left`` precedes ``right`` in time)."""
        t = _Tree()
        t.q_minus, t.p_minus, t.g_minus = left.q_minus, left.p_minus, left.g_minus
        t.q_plus, t.p_plus, t.g_plus = right.q_plus, right.p_plus, right.g_plus
        t.rho = left.rho + right.rho
        m = self.inv_mass
        t.stop = not (
            self.no_uturn(m * left.p_minus, m * right.p_plus, t.rho)
            and self.no_uturn(m * left.p_minus, m * right.p_minus, left.rho + right.p_minus)
            and self.no_uturn(m * left.p_plus, m * right.p_plus, right.rho + left.p_plus)
        )
        return t

    def leaf(self, q, p, g, direction) -> _Tree:
        q1, p1, lp1, g1 = leapfrog(q, p, direction * self.eps, self.inv_mass, self.logp_grad, g)
        H = hamiltonian(lp1, p1, self.inv_mass) if np.isfinite(lp1) else math.inf
        dH = H - self.H0
        if not math.isfinite(dH):
            dH = math.inf
        self.n_leapfrog += 1
        self.sum_accept += math.exp(-dH) if dH > 0 else 1.0
        t = _Tree()
        t.q_minus = t.q_plus = t.q_prop = q1
        t.p_minus = t.p_plus = t.rho = p1
        t.g_minus = t.g_plus = t.g_prop = g1
        t.lp_prop = lp1
        t.log_w = -dH
        t.stop = dH > self.threshold
        if t.stop:
            self.diverged = True
        return t

    def build(self, q, p, g, depth, direction) -> _Tree:
        if depth == 0:
            return self.leaf(q, p, g, direction)
        first = self.build(q, p, g, depth - 1, direction)
        if first.stop:
            return first
        if direction > 0:
            second = self.build(first.q_plus, first.p_plus, first.g_plus, depth - 1, direction)
        else:
            second = self.build(first.q_minus, first.p_minus, first.g_minus, depth - 1, direction)
        if second.stop:
            return second
        t = self.merge(first, second) if direction > 0 else self.merge(second, first)
        t.log_w = np.logaddexp(first.log_w, second.log_w)
        if math.log(self.rng.random()) < second.log_w - t.log_w:
            t.q_prop, t.lp_prop, t.g_prop = second.q_prop, second.lp_prop, second.g_prop
        else:
            t.q_prop, t.lp_prop, t.g_prop = first.q_prop, first.lp_prop, first.g_prop
        return t


def nuts_transition(state: ChainState, logp_grad, max_tree_depth=10, divergence_threshold=1000.0):
    """Advance ``state`` by one NUTS transition (in place).

    Returns ``(state, accept_stat, tree_depth, diverged, n_leapfrog)``.
    """
    rng = state.rng
    p0 = rng.standard_normal(state.position.size) / np.sqrt(state.inv_mass)
    state.momentum = p0
    H0 = hamiltonian(state.logp, p0, state.inv_mass)
    traj = _Trajectory(logp_grad, state.step_size, state.inv_mass, H0, rng, divergence_threshold)

    tree = _Tree()
    tree.q_minus = tree.q_plus = tree.q_prop = state.position
    tree.p_minus = tree.p_plus = tree.rho = p0
    tree.g_minus = tree.g_plus = tree.g_prop = state.grad
    tree.lp_prop = state.logp
    tree.log_w = 0.0
    q_new, lp_new, g_new = state.position, state.logp, state.grad

    depth = 0
    while depth < max_tree_depth:
        direction = 1 if rng.random() < 0.5 else -1
        if direction > 0:
            sub = traj.build(tree.q_plus, tree.p_plus, tree.g_plus, depth, direction)
        else:
            sub = traj.build(tree.q_minus, tree.p_minus, tree.g_minus, depth, direction)
        depth += 1
        if sub.stop:
            break
        if math.log(rng.random()) < sub.log_w - tree.log_w:
            q_new, lp_new, g_new = sub.q_prop, sub.lp_prop, sub.g_prop
        merged = traj.merge(tree, sub) if direction > 0 else traj.merge(sub, tree)
        merged.log_w = np.logaddexp(tree.log_w, sub.log_w)
        tree = merged
        if tree.stop:
            break

    state.position, state.logp, state.grad = q_new, lp_new, g_new
    if traj.diverged:
        state.divergences += 1
    accept = traj.sum_accept / max(traj.n_leapfrog, 1)
    return state, accept, depth, traj.diverged, traj.n_leapfrog


# ---- adaptation --------------------------------------------------------------


class DualAveraging:
    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept) -> float:
        self.counter += 1
        accept = min(1.0, accept)
        w = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - w) * self.s_bar + w * (self.target - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = x_eta * x + (1.0 - x_eta) * self.x_bar
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


class WelfordVariance:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self):
        n = self.n
        var = self.m2 / (n - 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def adaptation_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Return ``(slow_start, slow_end, window_ends)`` for a warmup length.

    Short warmups use 15% / 75% / 10% splits; fewer than 20 iterations adapt
    the step size only.
    """
    if warmup < 20:
        return warmup, warmup, []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    end_limit = warmup - term_buffer
    ends, start, size = [], init_buffer, base_window
    while start < end_limit:
        end = start + size
        if end + 2 * size > end_limit:
            end = end_limit
        ends.append(end)
        start, size = end, 2 * size
    return init_buffer, end_limit, ends


def find_reasonable_step_size(state: ChainState, logp_grad, max_iter=100) -> float:
    """Double or halve the step until one leapfrog step crosses 80% acceptance."""
    eps = state.step_size
    log_target = math.log(0.8)
    direction = 0
    for _ in range(max_iter):
        p = state.rng.standard_normal(state.position.size) / np.sqrt(state.inv_mass)
        H0 = hamiltonian(state.logp, p, state.inv_mass)
        _, p1, lp1, _ = leapfrog(state.position, p, eps, state.inv_mass, logp_grad, state.grad)
        H1 = hamiltonian(lp1, p1, state.inv_mass) if np.isfinite(lp1) else math.inf
        delta = H0 - H1 if math.isfinite(H1) else -math.inf
        if direction == 0:
            direction = 1 if delta > log_target else -1
        if direction == 1 and not delta > log_target:
            break
        if direction == -1 and not delta < log_target:
            break
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        if eps < 1e-12 or eps > 1e7:
            break
    return eps


def adapt(state: ChainState, logp_grad, config: SamplerConfig, record=None):
    """Run warmup on ``state``; returns it with tuned step size and metric.

    ``record(it, accept, depth, diverged, n_leapfrog)`` is called per warmup
    iteration if given.
    """
    if config.warmup <= 0:
        raise ValueError("warmup must be positive")
    slow_start, slow_end, ends = adaptation_windows(config.warmup)
    ends = set(ends)
    state.step_size = find_reasonable_step_size(state, logp_grad)
    da = DualAveraging(state.step_size, config.target_accept)
    var = WelfordVariance(state.position.size)
    for it in range(config.warmup):
        _, accept, depth, diverged, n_leap = nuts_transition(
            state, logp_grad, config.max_tree_depth, config.divergence_threshold
        )
        if record is not None:
            record(it, accept, depth, diverged, n_leap)
        state.step_size = da.update(accept)
        if slow_start <= it < slow_end:
            var.add(state.position)
        if it + 1 in ends:
            state.inv_mass = var.regularized_variance()
            var = WelfordVariance(state.position.size)
            state.step_size = find_reasonable_step_size(state, logp_grad)
            da.restart(state.step_size)
    state.step_size = da.final_step_size
    state.divergences = 0
    return state


# ---- drivers -----------------------------------------------------------------


def _progress(config, chain, it, total):
    if config.progress and (it + 1) % 100 == 0:
        print(f"chain {chain}: iteration {it + 1}/{total}", file=sys.stderr, flush=True)


def sample_chain(logp_grad, x0, config: SamplerConfig, chain: int = 0, rng=None):
    """Warm up and sample one chain from ``x0``.

    Returns a dict with ``draws`` (kept unconstrained positions), per-draw
    ``logp``, ``accept_stat``, ``tree_depth``, ``n_leapfrog``, ``divergent``,
    the adapted ``step_size``/``inv_mass`` and the mean warmup acceptance.
    """
    rng = rng if rng is not None else chain_rng(config.seed, chain)
    x0 = np.asarray(x0, dtype=float)
    lp, g = logp_grad(x0)
    if not np.isfinite(lp) or not np.all(np.isfinite(g)):
        raise RuntimeError("initial point has non-finite log density or gradient")
    state = ChainState(x0.copy(), float(lp), g, config.init_step_size, np.ones(x0.size), rng)
    warm_accept = []

    def record(it, accept, depth, diverged, n_leap):
        warm_accept.append(accept)
        _progress(config, chain, it, config.iters)

    adapt(state, logp_grad, config, record)
    n_keep = config.iters - config.warmup
    draws = np.empty((n_keep, x0.size))
    stats = {name: np.empty(n_keep) for name in ("logp", "accept_stat", "tree_depth", "n_leapfrog", "divergent")}
    for i in range(n_keep):
        _, accept, depth, diverged, n_leap = nuts_transition(
            state, logp_grad, config.max_tree_depth, config.divergence_threshold
        )
        draws[i] = state.position
        stats["logp"][i] = state.logp
        stats["accept_stat"][i] = accept
        stats["tree_depth"][i] = depth
        stats["n_leapfrog"][i] = n_leap
        stats["divergent"][i] = diverged
        _progress(config, chain, config.warmup + i, config.iters)
    return {
        "draws": draws,
        **stats,
        "step_size": state.step_size,
        "inv_mass": state.inv_mass.copy(),
        "warmup_accept": float(np.mean(warm_accept)),
    }


def run_chains(logp_grad, inits, config: SamplerConfig):
    """Run ``config.n_chains`` chains serially; ``inits`` is one start per chain."""
    return [sample_chain(logp_grad, inits[c], config, c) for c in range(config.n_chains)]


def _initial_point(posterior, rng, attempts=100):
    from .inference import initial_point

    for _ in range(attempts):
        x = initial_point(posterior.dataset, posterior.prior, rng)
        lp, g = posterior(x)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return x
    raise RuntimeError(
        f"could not find a starting point with finite log posterior after {attempts} attempts; "
        "check the dataset and the Weibull prior bounds"
    )


def _model_chain(dataset, prior, config, chain):
    from .inference import JointPosterior

    posterior = JointPosterior(dataset, prior)
    rng = chain_rng(config.seed, chain)
    x0 = _initial_point(posterior, rng)
    return sample_chain(posterior, x0, config, chain, rng)


def run(dataset, prior=None, config: SamplerConfig | None = None, workers=None) -> DrawsMatrix:
    """Fit the joint model; returns constrained draws plus derived columns.

    Chains are independent and seeded from ``(config.seed, chain)``; with more
    than one worker they run in separate processes. Output does not depend on
    the schedule.
    """
    from .inference import PriorConfig, constrained_names, constrained_values

    config = config or SamplerConfig()
    dataset = list(dataset)
    prior = (prior or PriorConfig()).resolve(dataset)
    n_workers = min(worker_count(workers), config.n_chains)
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            futures = [pool.submit(_model_chain, dataset, prior, config, c) for c in range(config.n_chains)]
            chains = [f.result() for f in futures]
    else:
        chains = [_model_chain(dataset, prior, config, c) for c in range(config.n_chains)]

    n = len(dataset)
    bounds = (prior.weibull_bound_k, prior.weibull_bound_xi)
    names = constrained_names(dataset)
    n_keep = config.iters - config.warmup
    values = np.empty((config.n_chains, n_keep, len(names) + len(STAT_NAMES)))
    for c, res in enumerate(chains):
        for i, x in enumerate(res["draws"]):
            values[c, i, : len(names)] = constrained_values(x, n, bounds)
        values[c, :, len(names):] = np.column_stack(
            [res["logp"], res["accept_stat"], res["tree_depth"], res["n_leapfrog"], res["divergent"],
             np.full(n_keep, res["step_size"])]
        )
    return DrawsMatrix(names=names + list(STAT_NAMES), values=values)
