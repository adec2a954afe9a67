"""Discrete-action offline RL over quantized action codes.

All regularizers that are expectations over actions (the conservatism
penalty, the behavior KL, the backup expectation) are computed exactly by
summing over the K codes, which is the whole point of quantizing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .data import DiscreteTransitionDataset
from .envs import MazeSpec, maze_step
from .metrics import MetricTrace
from .nets import MLP
from .quantizer import QuantizerModel
from .serialize import read_model, split_blocks, write_model

AGENT_MAGIC = b"SAQA"

ALGORITHMS = ("cql", "iql", "brac", "bc")


@dataclass
class AlgoConfig:
    algorithm: str = "cql"
    alpha: float = 1.0            # CQL conservatism weight
    tau: float = 0.7              # IQL expectile
    lam: float = 1.0              # IQL Lagrange temperature
    beta: float = 1.0             # BRAC KL weight
    alpha_ent: float = 0.1        # BRAC entropy weight
    gamma: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 64
    gradient_steps: int = 20000
    target_update_period: int = 200
    hidden: tuple[int, ...] = (64, 64)
    exact_backup: bool = False    # CQL: expectation over all codes instead of a sampled a'
    behavior_pretrain_steps: int = 2000  # BRAC: BC-train pi_beta before the main loop
    log_period: int = 100
    eval_period: int = 1000
    eval_episodes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must be in (0, 1)")
        if not (0 < self.tau < 1):
            raise ValueError("tau must be in (0, 1)")
        for name in ("alpha", "lam", "beta", "alpha_ent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class _Net:
    """A network with its own parameter set (so each gets its own optimizer state)."""

    def __init__(self, in_dim, hidden, out_dim, rng):
        self.params = ParameterSet()
        self.net = MLP(self.params, "net", in_dim, list(hidden), out_dim, rng)

    def __call__(self, x) -> Tensor:
        return self.net(x)

    def values(self, x) -> np.ndarray:
        return self.net(Tensor(np.atleast_2d(x))).data

    def clone_into(self, other: "_Net"):
        other.params.copy_values_from(self.params)


def _sample_indices(rng, n: int, batch_size: int):
    """Minibatch indices with replacement; a batch size covering the dataset
    means full-batch training (deterministic, no sampling noise)."""
    if batch_size >= n:
        return np.arange(n)
    return rng.integers(0, n, size=batch_size)


def _batch_of(dataset: DiscreteTransitionDataset, idx):
    return (dataset.states[idx], dataset.codes[idx], dataset.rewards[idx],
            dataset.next_states[idx], dataset.terminals[idx])


# ---- losses ----------------------------------------------------------------


def cql_loss(q: _Net, target: _Net, batch, alpha: float, gamma: float,
             rng: np.random.Generator, exact_backup: bool = False):
    """SAQ-CQL objective. Returns (total, bellman, penalty) tensors.

    The conservatism penalty logsumexp_i Q(s, a_i) - Q(s, a_data) is an exact
    sum over all K codes. The backup samples a' from the softmax policy at s'
    (exact_backup=True integrates over all codes instead).
    """
    states, codes, rewards, next_states, terminals = batch
    K = q.net.dims[-1]
    if codes.min() < 0 or codes.max() >= K:
        raise ValueError(f"dataset code outside [0, {K})")

    tq = target.values(next_states)                      # (N, K), constant
    online_next = q.values(next_states)
    logits = online_next - online_next.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)            # softmax policy at s'
    if exact_backup:
        next_value = (probs * tq).sum(axis=1)
    else:
        cdf = probs.cumsum(axis=1)
        draws = (cdf < rng.random((len(states), 1))).sum(axis=1)
        next_value = np.take_along_axis(tq, draws[:, None], axis=1)[:, 0]
    target_value = rewards + gamma * next_value * (~terminals)

    qs = q(Tensor(states))
    q_sa = ad.gather(qs, codes)
    diff = ad.sub(q_sa, Tensor(target_value))
    bellman = ad.scale(ad.reduce_mean(ad.mul(diff, diff)), 0.5)
    penalty = ad.reduce_mean(ad.sub(ad.logsumexp(qs), q_sa))
    total = ad.add(bellman, ad.scale(penalty, alpha))
    return total, bellman, penalty


def cql_bc_identity(q_values: np.ndarray, codes: np.ndarray):
    """Both sides of the penalty == discrete BC NLL identity and their gap.

    The NLL side is computed through an explicit softmax normalization so the
    two routes share no code.
    """
    q_values = np.atleast_2d(q_values)
    lse = np.log(np.exp(q_values - q_values.max(axis=1, keepdims=True)).sum(axis=1)) \
        + q_values.max(axis=1)
    q_data = np.take_along_axis(q_values, np.asarray(codes)[:, None], axis=1)[:, 0]
    penalty = float(np.mean(lse - q_data))

    shifted = np.exp(q_values - q_values.max(axis=1, keepdims=True))
    pi = shifted / shifted.sum(axis=1, keepdims=True)
    nll = float(-np.mean(np.log(np.take_along_axis(pi, np.asarray(codes)[:, None], axis=1)[:, 0])))
    return penalty, nll, abs(penalty - nll)


def iql_value_loss(v: _Net, target_q: _Net, batch, tau: float):
    """Expectile regression of V toward target-Q at dataset codes."""
    states, codes, *_ = batch
    q_sa = np.take_along_axis(target_q.values(states), codes[:, None], axis=1)[:, 0]
    vs = ad.reshape(v(Tensor(states)), (len(states),))
    u = ad.sub(Tensor(q_sa), vs)
    weight = np.abs(tau - (u.data < 0))  # constant w.r.t. the graph
    return ad.reduce_mean(ad.mul(Tensor(weight), ad.mul(u, u)))


def iql_q_loss(q: _Net, v: _Net, batch, gamma: float):
    states, codes, rewards, next_states, terminals = batch
    v_next = v.values(next_states)[:, 0]
    target = rewards + gamma * v_next * (~terminals)
    q_sa = ad.gather(q(Tensor(states)), codes)
    d = ad.sub(Tensor(target), q_sa)
    return ad.reduce_mean(ad.mul(d, d))


def iql_closed_form_policy(advantages: np.ndarray, behavior_probs: np.ndarray,
                           lam: float) -> np.ndarray:
    """pi*(a|s) proportional to exp[A/lam + log pi_beta], normalized over codes.

    Codes with zero behavior probability get exactly zero probability.
    Works on single vectors or batches (last axis = codes).
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    a = np.asarray(advantages, dtype=np.float64)
    b = np.asarray(behavior_probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = a / lam + np.where(b > 0, np.log(np.where(b > 0, b, 1.0)), -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def brac_q_loss(q: _Net, target_q: _Net, policy: _Net, behavior: _Net, batch,
                gamma: float, beta: float):
    """Bellman update with the behavior log-likelihood bonus; the expectation
    over a' is an exact sum over codes."""
    states, codes, rewards, next_states, terminals = batch
    pi = _softmax_np(policy.values(next_states))
    log_b = _log_softmax_np(behavior.values(next_states))
    tq = target_q.values(next_states)
    expected = (pi * (tq + beta * log_b)).sum(axis=1)
    target = rewards + gamma * expected * (~terminals)
    q_sa = ad.gather(q(Tensor(states)), codes)
    d = ad.sub(Tensor(target), q_sa)
    return ad.reduce_mean(ad.mul(d, d))


def brac_policy_loss(policy: _Net, q: _Net, behavior: _Net, batch,
                     beta: float, alpha_ent: float):
    """Negated exact-policy objective:
    -mean_s sum_i pi(i|s) [Q(s,i) + beta log pi_b(i|s) - alpha_ent log pi(i|s)]."""
    states = batch[0]
    logits = policy(Tensor(states))
    logp = ad.log_softmax(logits)
    p = ad.softmax(logits)
    const = q.values(states) + beta * _log_softmax_np(behavior.values(states))
    inner = ad.add(Tensor(const), ad.scale(logp, -alpha_ent))
    per_state = ad.reduce_sum(ad.mul(p, inner), axis=1)
    return ad.neg(ad.reduce_mean(per_state))


def exact_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) summed over codes; p_i = 0 terms contribute 0; support
    violation returns +inf."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def bc_loss(policy_logits: Tensor, codes: np.ndarray):
    """Mean negative log softmax probability of the dataset code."""
    return ad.reduce_mean(ad.neg(ad.gather(ad.log_softmax(policy_logits), codes)))


def _softmax_np(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _log_softmax_np(x, floor=-30.0):
    lse = np.log(np.exp(x - x.max(axis=-1, keepdims=True)).sum(axis=-1, keepdims=True)) \
        + x.max(axis=-1, keepdims=True)
    return np.maximum(x - lse, floor)


# ---- agent -----------------------------------------------------------------


class DiscreteAgent:
    """Q-network over K codes plus the optional value/behavior/policy heads
    the configured algorithm needs."""

    def __init__(self, state_dim: int, num_codes: int, config: AlgoConfig):
        self.state_dim = state_dim
        self.K = num_codes
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
        h = config.hidden
        algo = config.algorithm
        self.q = _Net(state_dim, h, num_codes, rng) if algo != "bc" else None
        self.target_q = _Net(state_dim, h, num_codes, rng) if algo != "bc" else None
        if self.q is not None:
            self.q.clone_into(self.target_q)
        self.v = _Net(state_dim, h, 1, rng) if algo == "iql" else None
        self.behavior = _Net(state_dim, h, num_codes, rng) if algo in ("iql", "brac") else None
        self.policy = _Net(state_dim, h, num_codes, rng) if algo in ("brac", "bc") else None

    def policy_probs(self, states: np.ndarray) -> np.ndarray:
        """Probability over codes at each state, per the algorithm's policy class."""
        states = np.atleast_2d(states)
        algo = self.config.algorithm
        if algo == "cql":
            return _softmax_np(self.q.values(states))
        if algo in ("bc", "brac"):
            return _softmax_np(self.policy.values(states))
        # iql: closed-form composite of advantage and behavior
        qs = self.q.values(states)
        vs = self.v.values(states)
        adv = qs - vs
        b = _softmax_np(self.behavior.values(states))
        return iql_closed_form_policy(adv, b, self.config.lam)

    def _nets(self):
        named = [("q", self.q), ("target_q", self.target_q), ("v", self.v),
                 ("behavior", self.behavior), ("policy", self.policy)]
        return [(n, net) for n, net in named if net is not None]

    def save(self, path):
        dims = [self.state_dim, self.K, len(self.config.hidden), *self.config.hidden,
                ALGORITHMS.index(self.config.algorithm)]
        blocks = []
        for _, net in self._nets():
            blocks += [net.params[p].data for p in net.params.names()]
        write_model(path, AGENT_MAGIC, dims, blocks)

    @classmethod
    def load(cls, path, config: AlgoConfig | None = None) -> "DiscreteAgent":
        dims, payload = read_model(path, AGENT_MAGIC, n_dims=3)
        n_hidden = dims[2]
        dims, payload = read_model(path, AGENT_MAGIC, n_dims=4 + n_hidden)
        state_dim, K = dims[0], dims[1]
        hidden = tuple(dims[3:3 + n_hidden])
        algo = ALGORITHMS[dims[3 + n_hidden]]
        if config is None:
            config = AlgoConfig(algorithm=algo, hidden=hidden)
        else:
            config = replace(config, algorithm=algo, hidden=hidden)
        agent = cls(state_dim, K, config)
        shapes = []
        for _, net in agent._nets():
            shapes += [net.params[p].data.shape for p in net.params.names()]
        arrays = split_blocks(payload, shapes)
        i = 0
        for _, net in agent._nets():
            for p in net.params.names():
                net.params[p].data = arrays[i]
                i += 1
        return agent


def act(agent: DiscreteAgent, quantizer: QuantizerModel, state, mode: str = "greedy",
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick a code from the policy (argmax or categorical sample; argmax breaks
    ties toward the lowest index) and decode it to a continuous action."""
    probs = agent.policy_probs(np.asarray(state, dtype=np.float64)[None, :])[0]
    if mode == "greedy":
        code = int(np.argmax(probs))
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        code = int(rng.choice(len(probs), p=probs / probs.sum()))
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    return quantizer.decode_action(state, code)


def evaluate_success(agent: DiscreteAgent, quantizer: QuantizerModel, spec: MazeSpec,
                     episodes: int = 5) -> float:
    """Greedy evaluation success rate on the maze."""
    hits = 0
    for _ in range(episodes):
        state = spec.cell_center(spec.start)
        for _ in range(spec.max_episode_len):
            action = act(agent, quantizer, state, "greedy")
            state, _, terminal = maze_step(spec, state, action)
            if terminal:
                hits += 1
                break
    return hits / episodes


def train_agent(dataset: DiscreteTransitionDataset, quantizer: QuantizerModel,
                config: AlgoConfig, eval_env: MazeSpec | None = None):
    """Run the configured algorithm. Returns (agent, MetricTrace)."""
    if dataset.num_codes != quantizer.K:
        raise ValueError(
            f"dataset has {dataset.num_codes} codes but quantizer has {quantizer.K}")
    agent = DiscreteAgent(dataset.state_dim, dataset.num_codes, config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 29]))
    algo = config.algorithm
    lr = config.learning_rate

    columns = {"cql": ["step", "total", "bellman", "penalty", "eval_success"],
               "iql": ["step", "q_loss", "v_loss", "bc_loss", "eval_success"],
               "brac": ["step", "q_loss", "policy_loss", "kl", "eval_success"],
               "bc": ["step", "bc_loss", "eval_success"]}[algo]
    trace = MetricTrace(columns)

    n = len(dataset)
    if algo == "brac" and config.gradient_steps > 0:
        # the behavior policy is learned first; an untrained pi_beta gives the
        # policy objective no pull toward the data support
        for _ in range(config.behavior_pretrain_steps):
            idx = _sample_indices(rng, n, config.batch_size)
            loss = bc_loss(agent.behavior(Tensor(dataset.states[idx])), dataset.codes[idx])
            ad.backward(loss)
            ad.adam_step(agent.behavior.params, lr)

    for step in range(1, config.gradient_steps + 1):
        idx = _sample_indices(rng, n, config.batch_size)
        batch = _batch_of(dataset, idx)
        row = {}
        if algo == "cql":
            total, bellman, penalty = cql_loss(
                agent.q, agent.target_q, batch, config.alpha, config.gamma, rng,
                config.exact_backup)
            ad.backward(total)
            ad.adam_step(agent.q.params, lr)
            row = {"total": total.data, "bellman": bellman.data, "penalty": penalty.data}
        elif algo == "iql":
            v_loss = iql_value_loss(agent.v, agent.target_q, batch, config.tau)
            ad.backward(v_loss)
            ad.adam_step(agent.v.params, lr)
            q_loss = iql_q_loss(agent.q, agent.v, batch, config.gamma)
            ad.backward(q_loss)
            ad.adam_step(agent.q.params, lr)
            b_loss = bc_loss(agent.behavior(Tensor(batch[0])), batch[1])
            ad.backward(b_loss)
            ad.adam_step(agent.behavior.params, lr)
            row = {"q_loss": q_loss.data, "v_loss": v_loss.data, "bc_loss": b_loss.data}
        elif algo == "brac":
            b_loss = bc_loss(agent.behavior(Tensor(batch[0])), batch[1])
            ad.backward(b_loss)
            ad.adam_step(agent.behavior.params, lr)
            q_loss = brac_q_loss(agent.q, agent.target_q, agent.policy, agent.behavior,
                                 batch, config.gamma, config.beta)
            ad.backward(q_loss)
            ad.adam_step(agent.q.params, lr)
            p_loss = brac_policy_loss(agent.policy, agent.q, agent.behavior, batch,
                                      config.beta, config.alpha_ent)
            ad.backward(p_loss)
            ad.adam_step(agent.policy.params, lr)
            pi = _softmax_np(agent.policy.values(batch[0]))
            pb = _softmax_np(agent.behavior.values(batch[0]))
            mean_kl = float(np.mean([exact_kl(pi[i], pb[i]) for i in range(len(pi))]))
            row = {"q_loss": q_loss.data, "policy_loss": p_loss.data, "kl": mean_kl}
        else:  # bc
            loss = bc_loss(agent.policy(Tensor(batch[0])), batch[1])
            ad.backward(loss)
            ad.adam_step(agent.policy.params, lr)
            row = {"bc_loss": loss.data}

        if agent.q is not None and step % config.target_update_period == 0:
            agent.q.clone_into(agent.target_q)

        do_eval = step % config.eval_period == 0 or step == config.gradient_steps
        if do_eval or step % config.log_period == 0:
            success = (evaluate_success(agent, quantizer, eval_env, config.eval_episodes)
                       if do_eval and eval_env is not None else float("nan"))
            trace.log(step, *[float(row[c]) for c in columns[1:-1]], success)
    return agent, trace
