"""State-conditioned scalar-code VQ-VAE over actions.

The encoder maps (state, action) to a D-dimensional embedding, which snaps
to the nearest of K codebook vectors; the decoder maps (state, code vector)
back to a continuous action. Training uses the three-term objective:
reconstruction, codebook pull, and weighted commitment, with straight-through
gradients past the nearest-code selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .data import DiscreteTransitionDataset, TransitionDataset
from .metrics import MetricTrace
from .nets import MLP
from .serialize import read_model, split_blocks, write_model

QUANTIZER_MAGIC = b"SAQM"


@dataclass
class Codebook:
    vectors: np.ndarray  # (K, D)

    @property
    def K(self):
        return self.vectors.shape[0]

    @property
    def D(self):
        return self.vectors.shape[1]


@dataclass
class QuantizerTrainConfig:
    codebook_size: int = 32
    embedding_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    commitment_weight: float = 0.25
    dead_code_reinit_period: int = 5
    seed: int = 0
    state_conditioned: bool = True  # False = ablation: encoder/decoder blind to state
    activation: str = "relu"  # tanh plateaus well above the bimodal noise floor

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        for name in ("embedding_dim", "epochs", "batch_size", "dead_code_reinit_period"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.commitment_weight < 0:
            raise ValueError("bad learning rate or commitment weight")


def nearest_code(embedding: np.ndarray, codebook: Codebook) -> int:
    """Index of the codebook vector nearest in L2; lowest index wins ties."""
    return int(nearest_codes(np.asarray(embedding)[None, :], codebook.vectors)[0])


def nearest_codes(embeddings: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    d = (
        (embeddings * embeddings).sum(axis=1, keepdims=True)
        - 2.0 * embeddings @ vectors.T
        + (vectors * vectors).sum(axis=1)
    )
    return np.argmin(d, axis=1)


class QuantizerModel:
    def __init__(self, state_dim: int, action_dim: int, config: QuantizerTrainConfig,
                 rng: np.random.Generator):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        self.K = config.codebook_size
        self.D = config.embedding_dim
        self.state_conditioned = config.state_conditioned
        self.params = ParameterSet()
        enc_in = (state_dim if self.state_conditioned else 0) + action_dim
        dec_in = (state_dim if self.state_conditioned else 0) + self.D
        self.encoder = MLP(self.params, "encoder", enc_in, list(config.hidden), self.D, rng,
                           activation=config.activation)
        self.decoder = MLP(self.params, "decoder", dec_in, list(config.hidden), action_dim, rng,
                           activation=config.activation)
        self.params.add("codebook", rng.normal(0.0, 0.1, size=(self.K, self.D)))

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.params["codebook"].data)

    def _encoder_input(self, states, actions):
        if self.state_conditioned:
            return np.concatenate([states, actions], axis=1)
        return np.asarray(actions)

    def encode(self, states, actions) -> np.ndarray:
        """Continuous embeddings for a batch of (state, action)."""
        return self.encoder(Tensor(self._encoder_input(states, actions))).data

    def encode_codes(self, states, actions) -> np.ndarray:
        return nearest_codes(self.encode(states, actions), self.codebook.vectors)

    def decode(self, states, codes) -> np.ndarray:
        """Deterministic decoder output for a batch of (state, code index)."""
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.K):
            raise ValueError(f"code index outside [0, {self.K})")
        vecs = self.codebook.vectors[codes]
        if self.state_conditioned:
            x = np.concatenate([np.asarray(states), vecs], axis=1)
        else:
            x = vecs
        return self.decoder(Tensor(x)).data

    def decode_action(self, state, code: int) -> np.ndarray:
        return self.decode(np.asarray(state, dtype=np.float64)[None, :], np.array([code]))[0]

    # -- serialization ------------------------------------------------------

    def _block_names(self):
        return self.encoder.param_names() + self.decoder.param_names() + ["codebook"]

    def save(self, path):
        dims = [self.state_dim, self.action_dim, self.K, self.D,
                1 if self.state_conditioned else 0, len(self.config.hidden),
                *self.config.hidden]
        blocks = [self.params[n].data for n in self._block_names()]
        write_model(path, QUANTIZER_MAGIC, dims, blocks)

    @classmethod
    def load(cls, path) -> "QuantizerModel":
        dims, payload = read_model(path, QUANTIZER_MAGIC, n_dims=6)
        state_dim, action_dim, K, D, cond, n_hidden = dims
        # re-read now that the hidden-layer count is known
        dims, payload = read_model(path, QUANTIZER_MAGIC, n_dims=6 + n_hidden)
        hidden = tuple(dims[6:])
        config = QuantizerTrainConfig(codebook_size=K, embedding_dim=D, hidden=hidden,
                                      state_conditioned=bool(cond))
        model = cls(state_dim, action_dim, config, np.random.default_rng(0))
        names = model._block_names()
        shapes = [model.params[n].data.shape for n in names]
        for name, arr in zip(names, split_blocks(payload, shapes)):
            model.params[name].data = arr
        return model


def _select_codes(model: QuantizerModel, emb: Tensor) -> tuple[np.ndarray, Tensor]:
    """Nearest codes for a batch of embeddings plus the selected code vectors
    as a tensor differentiable into the codebook (one-hot matmul)."""
    codebook = model.params["codebook"]
    codes = nearest_codes(emb.data, codebook.data)
    onehot = np.zeros((len(codes), model.K))
    onehot[np.arange(len(codes)), codes] = 1.0
    selected = ad.matmul(Tensor(onehot), codebook)
    return codes, selected


def quantizer_loss(model: QuantizerModel, states, actions):
    """Returns (total, reconstruction, codebook_term, commitment_term) tensors
    plus the selected code indices."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape[1] != model.action_dim or states.shape[1] != model.state_dim:
        raise ValueError(
            f"batch dims ({states.shape[1]}, {actions.shape[1]}) do not match model "
            f"({model.state_dim}, {model.action_dim})")
    emb = model.encoder(Tensor(model._encoder_input(states, actions)))
    codes, selected = _select_codes(model, emb)

    # straight-through: decoder input carries values of the selected code but
    # passes its gradient to the encoder embedding verbatim
    z = ad.add(emb, ad.stop_gradient(ad.sub(selected, emb)))
    if model.state_conditioned:
        dec_in = ad.concat([Tensor(states), z])
    else:
        dec_in = z
    recon = ad.mse(model.decoder(dec_in), Tensor(actions))

    diff_cb = ad.sub(ad.stop_gradient(emb), selected)
    codebook_term = ad.reduce_mean(ad.reduce_sum(ad.mul(diff_cb, diff_cb), axis=1))
    diff_cm = ad.sub(emb, ad.stop_gradient(selected))
    commitment = ad.scale(
        ad.reduce_mean(ad.reduce_sum(ad.mul(diff_cm, diff_cm), axis=1)),
        model.config.commitment_weight)

    total = ad.add(ad.add(recon, codebook_term), commitment)
    return total, recon, codebook_term, commitment, codes


def train_quantizer(dataset: TransitionDataset, config: QuantizerTrainConfig,
                    trace: MetricTrace | None = None) -> QuantizerModel:
    """Train a quantizer on a dataset; deterministic given config.seed."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    model = QuantizerModel(dataset.state_dim, dataset.action_dim, config, rng)

    states, actions = dataset.states, dataset.actions
    n = len(dataset)
    batch_size = min(config.batch_size, n)

    # data-dependent codebook init: K distinct encoder outputs plus noise
    first = rng.choice(n, size=min(n, 4 * config.codebook_size), replace=n < 4 * config.codebook_size)
    emb0 = model.encode(states[first], actions[first])
    picks = rng.choice(len(emb0), size=config.codebook_size, replace=len(emb0) < config.codebook_size)
    model.params["codebook"].data = emb0[picks] + rng.normal(0.0, 1e-3, size=(config.codebook_size, config.embedding_dim))

    if trace is None:
        trace = MetricTrace(["epoch", "total", "reconstruction", "codebook", "commitment", "utilization"])
    model.trace = trace

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        usage = np.zeros(config.codebook_size, dtype=np.int64)
        sums = np.zeros(4)
        n_batches = 0
        last_emb = None
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            total, recon, cb, cm, codes = quantizer_loss(model, states[idx], actions[idx])
            ad.backward(total)
            ad.adam_step(model.params, config.learning_rate)
            usage += np.bincount(codes, minlength=config.codebook_size)
            sums += [float(total.data), float(recon.data), float(cb.data), float(cm.data)]
            n_batches += 1
            last_emb = model.encode(states[idx], actions[idx])
        utilization = float(np.mean(usage > 0))
        trace.log(epoch, *(sums / n_batches), utilization)

        if (epoch + 1) % config.dead_code_reinit_period == 0:
            dead = np.flatnonzero(usage == 0)
            if len(dead) and last_emb is not None:
                picks = rng.integers(0, len(last_emb), size=len(dead))
                cb = model.params["codebook"].data.copy()
                cb[dead] = last_emb[picks] + rng.normal(0.0, 1e-3, size=(len(dead), config.embedding_dim))
                model.params["codebook"].data = cb
    return model


def quantize_dataset(dataset: TransitionDataset, model: QuantizerModel) -> DiscreteTransitionDataset:
    """Replace continuous actions by nearest-code indices; keep originals."""
    if dataset.state_dim != model.state_dim or dataset.action_dim != model.action_dim:
        raise ValueError("dataset dimensions do not match quantizer")
    codes = model.encode_codes(dataset.states, dataset.actions)
    meta = dict(dataset.metadata)
    meta["quantizer_codebook_size"] = model.K
    return DiscreteTransitionDataset(
        states=dataset.states.copy(),
        codes=codes,
        original_actions=dataset.actions.copy(),
        rewards=dataset.rewards.copy(),
        next_states=dataset.next_states.copy(),
        terminals=dataset.terminals.copy(),
        num_codes=model.K,
        metadata=meta,
    )


def reconstruction_mse(model: QuantizerModel, dataset: TransitionDataset) -> float:
    """Mean squared error of encode -> nearest code -> decode on a dataset."""
    codes = model.encode_codes(dataset.states, dataset.actions)
    recon = model.decode(dataset.states, codes)
    return float(np.mean((recon - dataset.actions) ** 2))


def codebook_utilization(discrete: DiscreteTransitionDataset):
    """Histogram over the K codes and the number of dead (zero-occupancy) codes."""
    if len(discrete) == 0:
        raise ValueError("empty dataset")
    hist = np.bincount(discrete.codes, minlength=discrete.num_codes)
    return hist, int(np.sum(hist == 0))
