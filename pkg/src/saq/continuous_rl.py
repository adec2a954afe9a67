"""Continuous-action CQL and BC baselines over the raw action space.

Unlike the discrete pipeline, the conservatism penalty here cannot be summed
in closed form: log integral exp Q(s, a) over the action box is estimated by
importance-weighting policy and uniform samples. A midpoint-quadrature oracle
over the 2-D action box provides the exact value so the estimation gap can be
measured.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .data import TransitionDataset
from .envs import MazeSpec, maze_step
from .metrics import MetricTrace
from .nets import MLP
from .serialize import read_model, split_blocks, write_model

CONTINUOUS_MAGIC = b"SAQC"
CONTINUOUS_ALGORITHMS = ("cql", "bc")

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ACTION_CLAMP = 1.0 - 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class ContinuousConfig:
    algorithm: str = "cql"        # cql | bc
    alpha: float = 1.0            # conservatism weight
    gamma: float = 0.99
    n_samples: int = 10           # penalty samples per source (policy + uniform)
    learning_rate: float = 3e-4
    batch_size: int = 64
    gradient_steps: int = 20000
    target_update_period: int = 200
    hidden: tuple[int, ...] = (64, 64)
    grid_resolution: int = 48     # quadrature resolution for the logged exact penalty
    log_period: int = 100
    eval_period: int = 1000
    eval_episodes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in CONTINUOUS_ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not (0 <= self.gamma < 1):
            raise ValueError("gamma must be in [0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


class SquashedGaussianPolicy:
    """State -> Gaussian over pre-squash actions; tanh maps them into [-1, 1].

    The log-std head is bounded smoothly into [LOG_STD_MIN, LOG_STD_MAX] so a
    runaway head cannot produce degenerate densities.
    """

    def __init__(self, state_dim: int, action_dim: int, hidden, rng):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.params = ParameterSet()
        self.net = MLP(self.params, "policy", state_dim, list(hidden), 2 * action_dim, rng)
        # constant selection matrices splitting the head into mean / log-std
        eye = np.eye(action_dim)
        zero = np.zeros((action_dim, action_dim))
        self._sel_mean = np.vstack([eye, zero])
        self._sel_ls = np.vstack([zero, eye])

    def heads(self, states: Tensor) -> tuple[Tensor, Tensor]:
        """(mean, bounded log-std) tensors, each (N, action_dim)."""
        out = self.net(states)
        mean = ad.matmul(out, Tensor(self._sel_mean))
        raw = ad.matmul(out, Tensor(self._sel_ls))
        half_span = 0.5 * (LOG_STD_MAX - LOG_STD_MIN)
        mid = 0.5 * (LOG_STD_MAX + LOG_STD_MIN)
        log_std = ad.add(ad.scale(ad.tanh(raw), half_span), Tensor(np.float64(mid)))
        return mean, log_std

    def _heads_np(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std = self.heads(Tensor(np.atleast_2d(states)))
        return mean.data, log_std.data

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Squashed stochastic actions, one per state (no gradient)."""
        mean, log_std = self._heads_np(states)
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return np.tanh(u)

    def mean_action(self, state: np.ndarray) -> np.ndarray:
        mean, _ = self._heads_np(np.atleast_2d(state))
        return np.tanh(mean[0])

    def log_density(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """log pi(a | s) of squashed actions, with the tanh change-of-variable
        correction; boundary actions are pulled inside by ACTION_CLAMP."""
        mean, log_std = self._heads_np(states)
        a = np.clip(actions, -ACTION_CLAMP, ACTION_CLAMP)
        u = np.arctanh(a)
        z = (u - mean) / np.exp(log_std)
        gauss = -0.5 * z**2 - log_std - _HALF_LOG_2PI
        correction = np.log1p(-a**2)
        return (gauss - correction).sum(axis=1)


class ContinuousQNetwork:
    """(state concat action) -> scalar Q."""

    def __init__(self, state_dim: int, action_dim: int, hidden, rng):
        self.params = ParameterSet()
        self.net = MLP(self.params, "q", state_dim + action_dim, list(hidden), 1, rng)

    def __call__(self, states_actions: Tensor) -> Tensor:
        return self.net(states_actions)

    def values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return self.net(Tensor(x)).data[:, 0]

    def clone_into(self, other: "ContinuousQNetwork"):
        other.params.copy_values_from(self.params)


def continuous_bc_loss(policy: SquashedGaussianPolicy, batch) -> Tensor:
    """Mean negative log-density of dataset actions under the squashed Gaussian."""
    states, actions = batch[0], batch[1]
    a = np.clip(actions, -ACTION_CLAMP, ACTION_CLAMP)
    u = np.arctanh(a)                        # constant pre-squash targets
    correction = np.log1p(-a**2).sum(axis=1)  # constant w.r.t. parameters
    mean, log_std = policy.heads(Tensor(states))
    inv_std = ad.exp(ad.neg(log_std))
    z = ad.mul(ad.sub(Tensor(u), mean), inv_std)
    per_dim = ad.sub(ad.scale(ad.mul(z, z), -0.5), log_std)
    log_gauss = ad.add(ad.reduce_sum(per_dim, axis=1),
                       Tensor(np.full(len(states), -policy.action_dim * _HALF_LOG_2PI)))
    log_prob = ad.sub(log_gauss, Tensor(correction))
    return ad.neg(ad.reduce_mean(log_prob))


def _penalty_estimate(q: ContinuousQNetwork, policy: SquashedGaussianPolicy,
                      states: np.ndarray, n_samples: int,
                      rng: np.random.Generator) -> Tensor:
    """Importance-weighted estimate of mean_s log integral exp Q(s, a) da.

    Mixes n_samples policy draws and n_samples uniform draws per state; each
    sample is weighted by 1/density under its own proposal.
    """
    n, action_dim = len(states), policy.action_dim
    a_pol = np.stack([policy.sample(states, rng) for _ in range(n_samples)],
                     axis=1)                               # (N, M, A)
    a_uni = rng.uniform(-1.0, 1.0, size=(n, n_samples, action_dim))
    actions = np.concatenate([a_pol, a_uni], axis=1)       # (N, 2M, A)
    # every sample is weighted by the mixture density 0.5*(pi + uniform), which
    # bounds the importance weights (a lone pi in the denominator has unbounded
    # variance where the policy is narrow)
    log_uniform = -action_dim * np.log(2.0)
    log_w = np.empty((n, 2 * n_samples))
    for j in range(2 * n_samples):
        log_pi = policy.log_density(states, actions[:, j])
        m = np.maximum(log_pi, log_uniform)
        log_w[:, j] = m + np.log(0.5 * (np.exp(log_pi - m) + np.exp(log_uniform - m)))

    flat = np.concatenate(
        [np.repeat(states, 2 * n_samples, axis=0), actions.reshape(-1, action_dim)],
        axis=1)
    qs = ad.reshape(q(Tensor(flat)), (n, 2 * n_samples))
    adjusted = ad.sub(qs, Tensor(log_w + np.log(2.0 * n_samples)))
    return ad.reduce_mean(ad.logsumexp(adjusted))


def continuous_cql_loss(q: ContinuousQNetwork, target_q: ContinuousQNetwork,
                        policy: SquashedGaussianPolicy, batch, alpha: float,
                        gamma: float, n_samples: int, rng: np.random.Generator):
    """Sampled-penalty CQL objective. Returns (total, bellman, estimated_penalty)."""
    states, actions, rewards, next_states, terminals = batch
    a_next = policy.sample(next_states, rng)
    tq = target_q.values(next_states, a_next)
    target = rewards + gamma * tq * (~terminals)

    x = np.concatenate([states, actions], axis=1)
    q_sa = ad.reshape(q(Tensor(x)), (len(states),))
    diff = ad.sub(q_sa, Tensor(target))
    bellman = ad.scale(ad.reduce_mean(ad.mul(diff, diff)), 0.5)

    log_integral = _penalty_estimate(q, policy, states, n_samples, rng)
    penalty = ad.sub(log_integral, ad.reduce_mean(q_sa))
    total = ad.add(bellman, ad.scale(penalty, alpha))
    return total, bellman, penalty


def exact_penalty_grid(q: ContinuousQNetwork, batch, grid_resolution: int = 512) -> float:
    """Quadrature oracle for the conservatism penalty over the [-1, 1]^2 box:
    mean_s [log integral exp Q(s, a) da] - mean_s Q(s, a_data), with the
    integral computed by midpoint summation on a grid_resolution^2 lattice."""
    states, actions = np.atleast_2d(batch[0]), np.atleast_2d(batch[1])
    if actions.shape[1] != 2:
        raise ValueError("the grid oracle supports 2-D actions only")
    if grid_resolution < 16:
        raise ValueError("grid_resolution must be >= 16")
    centers = -1.0 + (2.0 * np.arange(grid_resolution) + 1.0) / grid_resolution
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    log_cell_area = 2.0 * np.log(2.0 / grid_resolution)

    log_integrals = np.empty(len(states))
    for i, s in enumerate(states):
        qs = q.values(np.broadcast_to(s, (len(grid), len(s))), grid)
        m = qs.max()
        log_integrals[i] = m + np.log(np.exp(qs - m).sum()) + log_cell_area
    q_data = q.values(states, actions)
    return float(log_integrals.mean() - q_data.mean())


class ContinuousAgent:
    """Squashed-Gaussian policy plus (for CQL) online and target Q networks."""

    def __init__(self, state_dim: int, action_dim: int, config: ContinuousConfig):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 19]))
        self.policy = SquashedGaussianPolicy(state_dim, action_dim, config.hidden, rng)
        if config.algorithm == "cql":
            self.q = ContinuousQNetwork(state_dim, action_dim, config.hidden, rng)
            self.target_q = ContinuousQNetwork(state_dim, action_dim, config.hidden, rng)
            self.q.clone_into(self.target_q)
        else:
            self.q = self.target_q = None

    def act(self, state: np.ndarray, mode: str = "greedy",
            rng: np.random.Generator | None = None) -> np.ndarray:
        if mode == "greedy":
            return self.policy.mean_action(state)
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            return self.policy.sample(np.atleast_2d(state), rng)[0]
        raise ValueError(f"unknown action mode {mode!r}")

    def _param_sets(self):
        sets = [self.policy.params]
        if self.q is not None:
            sets += [self.q.params, self.target_q.params]
        return sets

    def save(self, path):
        dims = [self.state_dim, self.action_dim, len(self.config.hidden),
                *self.config.hidden, CONTINUOUS_ALGORITHMS.index(self.config.algorithm)]
        blocks = []
        for ps in self._param_sets():
            blocks += [ps[p].data for p in ps.names()]
        write_model(path, CONTINUOUS_MAGIC, dims, blocks)

    @classmethod
    def load(cls, path, config: ContinuousConfig | None = None) -> "ContinuousAgent":
        dims, payload = read_model(path, CONTINUOUS_MAGIC, n_dims=3)
        n_hidden = dims[2]
        dims, payload = read_model(path, CONTINUOUS_MAGIC, n_dims=4 + n_hidden)
        state_dim, action_dim = dims[0], dims[1]
        hidden = tuple(dims[3:3 + n_hidden])
        algo = CONTINUOUS_ALGORITHMS[dims[3 + n_hidden]]
        if config is None:
            config = ContinuousConfig(algorithm=algo, hidden=hidden)
        else:
            config = replace(config, algorithm=algo, hidden=hidden)
        agent = cls(state_dim, action_dim, config)
        shapes = []
        for ps in agent._param_sets():
            shapes += [ps[p].data.shape for p in ps.names()]
        arrays = split_blocks(payload, shapes)
        i = 0
        for ps in agent._param_sets():
            for p in ps.names():
                ps[p].data = arrays[i]
                i += 1
        return agent


def _evaluate_continuous(agent: ContinuousAgent, spec: MazeSpec, episodes: int) -> float:
    hits = 0
    for _ in range(episodes):
        state = spec.cell_center(spec.start)
        for _ in range(spec.max_episode_len):
            state, _, terminal = maze_step(spec, state, agent.act(state))
            if terminal:
                hits += 1
                break
    return hits / episodes


def _policy_improvement_loss(policy: SquashedGaussianPolicy, q: ContinuousQNetwork,
                             states: np.ndarray, rng: np.random.Generator) -> Tensor:
    """-mean Q(s, a~) with a reparameterized squashed sample a~."""
    mean, log_std = policy.heads(Tensor(states))
    eps = rng.standard_normal(mean.data.shape)
    u = ad.add(mean, ad.mul(ad.exp(log_std), Tensor(eps)))
    a = ad.tanh(u)
    x = ad.concat([Tensor(states), a], axis=1)
    return ad.neg(ad.reduce_mean(ad.reshape(q(x), (len(states),))))


def train_continuous_cql(dataset: TransitionDataset, config: ContinuousConfig,
                         eval_env: MazeSpec | None = None):
    """Train the continuous baseline (CQL or BC per config). Returns
    (agent, MetricTrace); for CQL the trace carries both the sampled penalty
    estimate and the quadrature-exact penalty at every logging step."""
    agent = ContinuousAgent(dataset.state_dim, dataset.actions.shape[1], config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 37]))
    lr = config.learning_rate
    n = len(dataset)

    if config.algorithm == "cql":
        columns = ["step", "total", "bellman", "penalty_estimated", "penalty_exact",
                   "eval_success"]
    else:
        columns = ["step", "bc_loss", "eval_success"]
    trace = MetricTrace(columns)

    for step in range(1, config.gradient_steps + 1):
        # a batch size covering the dataset means full-batch training
        idx = (np.arange(n) if config.batch_size >= n
               else rng.integers(0, n, size=config.batch_size))
        batch = (dataset.states[idx], dataset.actions[idx], dataset.rewards[idx],
                 dataset.next_states[idx], dataset.terminals[idx])
        do_eval = step % config.eval_period == 0 or step == config.gradient_steps
        do_log = do_eval or step % config.log_period == 0
        if config.algorithm == "cql":
            total, bellman, penalty = continuous_cql_loss(
                agent.q, agent.target_q, agent.policy, batch, config.alpha,
                config.gamma, config.n_samples, rng)
            ad.backward(total)
            ad.adam_step(agent.q.params, lr)
            agent.policy.params.zero_grad()
            p_loss = _policy_improvement_loss(agent.policy, agent.q, batch[0], rng)
            ad.backward(p_loss)
            ad.adam_step(agent.policy.params, lr)
            agent.q.params.zero_grad()
            if step % config.target_update_period == 0:
                agent.q.clone_into(agent.target_q)
            if do_log:
                exact = exact_penalty_grid(agent.q, batch, config.grid_resolution)
                row = [total.data, bellman.data, penalty.data, exact]
        else:
            loss = continuous_bc_loss(agent.policy, batch)
            ad.backward(loss)
            ad.adam_step(agent.policy.params, lr)
            if do_log:
                row = [loss.data]
        if do_log:
            success = (_evaluate_continuous(agent, eval_env, config.eval_episodes)
                       if do_eval and eval_env is not None else float("nan"))
            trace.log(step, *[float(v) for v in row], success)
    return agent, trace
