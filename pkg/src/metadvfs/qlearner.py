"""Branched-action deep Q-learning on the LTC backbone.

One linear head per frequency branch (CPU clusters + GPU), per-branch TD
targets averaged in the loss, replay with in-episode sequence sampling for
hidden-state warm-up, and fitted Q evaluation (FQE) as the offline value
oracle used by the task-forest and the effectiveness analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, field

import numpy as np

from .ltc import (
    BackboneConfig,
    LtcNetwork,
    Params,
    tree_zeros_like,
)
from .rngstream import substream
from .simenv import Action, Dataset


class ArityMismatch(Exception):
    pass


class NonConvergence(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    discount_factor: float = 0.95
    learn_rate: float = 1e-3
    batch_size: int = 32
    sequence_len: int = 8
    target_update_interval: int = 200
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 2000
    train_steps: int = 5000
    hidden_dims: tuple[int, ...] = (16,)
    backbone_kind: str = "ltc"
    steps_per_input: int = 4
    dt: float = 0.25
    fqe_iterations: int = 50
    fqe_grad_steps: int = 10
    fqe_tol: float = 1e-3
    fqe_learn_rate: float = 1e-2

    def __post_init__(self):
        if not (0.0 <= self.discount_factor < 1.0):
            raise ValueError("discount_factor must be in [0, 1)")
        if not (self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ValueError("need epsilon_end <= epsilon_start <= 1")

    def epsilon_at(self, step: int) -> float:
        frac = min(1.0, step / max(1, self.epsilon_decay_steps))
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass(frozen=True)
class QEstimate:
    value: float
    n_states: int
    seed: int
    converged: bool = True
    residual: float = 0.0
    member_values: dict | None = None  # per-member breakdown for multi-source fits


@dataclass
class StateNormalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray) -> "StateNormalizer":
        mean = states.mean(axis=0)
        scale = states.std(axis=0)
        scale = np.where(scale < 1e-6, 1.0, scale)
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "StateNormalizer":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


class Adam:
    """Plain Adam; state keyed like the parameter tree, fully deterministic."""

    def __init__(self, params: Params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = tree_zeros_like(params)
        self.v = tree_zeros_like(params)
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)


class LtcQNetwork:
    """Backbone plus per-branch Q heads (implemented as one sliced readout)."""

    def __init__(self, net: LtcNetwork, branch_arity: tuple[int, ...], normalizer: StateNormalizer):
        self.net = net
        self.branch_arity = tuple(branch_arity)
        self.normalizer = normalizer
        self._offsets = np.cumsum([0] + list(branch_arity))

    @classmethod
    def init(cls, state_dim: int, branch_arity: tuple[int, ...], config: TrainConfig, seed: int) -> "LtcQNetwork":
        bc = BackboneConfig(
            input_dim=state_dim,
            hidden_dims=config.hidden_dims,
            output_dim=int(sum(branch_arity)),
            kind=config.backbone_kind,
            steps_per_input=config.steps_per_input,
            dt=config.dt,
        )
        return cls(LtcNetwork.init(bc, seed), branch_arity, StateNormalizer.identity(state_dim))

    def copy(self) -> "LtcQNetwork":
        return LtcQNetwork(
            self.net.copy(),
            self.branch_arity,
            StateNormalizer(self.normalizer.mean.copy(), self.normalizer.scale.copy()),
        )

    @property
    def params(self) -> Params:
        return self.net.params

    def branch_slices(self, ys: np.ndarray) -> list[np.ndarray]:
        return [ys[..., self._offsets[j] : self._offsets[j + 1]] for j in range(len(self.branch_arity))]

    def q_sequence(self, states_seq: np.ndarray):
        """states_seq: (B, L, d) raw states.  Returns (ys (L,B,out), trace)."""
        xs = self.normalizer(states_seq).transpose(1, 0, 2)
        ys, hT, trace = self.net.forward(xs)
        return ys, trace

    def greedy_actions(self, states: np.ndarray) -> np.ndarray:
        """Per-branch argmax from a single-tick forward (zero hidden warm-up)."""
        ys, _ = self.q_sequence(states[:, None, :])
        q = ys[-1]
        return np.stack([b.argmax(axis=1) for b in self.branch_slices(q)], axis=1)

    def act(self, hidden, state: np.ndarray, epsilon: float, rng: np.random.Generator):
        """Epsilon-greedy action for one state; advances the hidden state."""
        x = self.normalizer(state[None, :])[None, :, :]  # (T=1, B=1, d)
        hidden, y, _ = self.net.step(hidden if hidden is not None else self.net.zero_hidden(1), x[0])
        idx = []
        for j, branch in enumerate(self.branch_slices(y[0])):
            if rng.uniform() < epsilon:
                idx.append(int(rng.integers(self.branch_arity[j])))
            else:
                idx.append(int(branch.argmax()))
        return Action.from_indices(idx), hidden

    def save(self, path) -> None:
        self.net.params["__norm_mean__"] = self.normalizer.mean
        self.net.params["__norm_scale__"] = self.normalizer.scale
        self.net.params["__arity__"] = np.array(self.branch_arity, dtype=np.int64)
        try:
            self.net.save(path)
        finally:
            for k in ("__norm_mean__", "__norm_scale__", "__arity__"):
                self.net.params.pop(k, None)

    @classmethod
    def load(cls, path) -> "LtcQNetwork":
        net = LtcNetwork.load(path)
        mean = net.params.pop("__norm_mean__")
        scale = net.params.pop("__norm_scale__")
        arity = tuple(int(a) for a in net.params.pop("__arity__"))
        return cls(net, arity, StateNormalizer(mean=mean, scale=scale))


class QPolicy:
    """Stateful greedy policy over a Q-network, usable with simenv.rollout."""

    def __init__(self, qnet: LtcQNetwork, epsilon: float = 0.0, rng: np.random.Generator | None = None):
        self.qnet = qnet
        self.epsilon = epsilon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = None

    def reset(self):
        self.hidden = None

    def __call__(self, spec, state) -> Action:
        action, self.hidden = self.qnet.act(self.hidden, state.vector(), self.epsilon, self.rng)
        return action


class ReplayMemory:
    """Ring buffer of transitions; sequence samples never cross episodes."""

    def __init__(self, capacity: int, state_dim: int, n_branches: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, n_branches), dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.episode_ids = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self._head = 0

    def add(self, state, action, reward, next_state, episode_id: int) -> None:
        i = self._head
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.episode_ids[i] = episode_id
        self._head = (self._head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ReplayMemory":
        mem = cls(len(ds), ds.state_dim, ds.actions.shape[1])
        for i in range(len(ds)):
            mem.add(ds.states[i], ds.actions[i], ds.rewards[i], ds.next_states[i], int(ds.episode_ids[i]))
        return mem

    def valid_sequence_ends(self, seq_len: int) -> np.ndarray:
        """Indices usable as sequence ends without crossing an episode edge."""
        n = self.size
        ends = []
        for e in range(n):
            s = e - seq_len + 1
            if s < 0:
                continue
            if self._head != 0 and self.size == self.capacity and s < self._head <= e:
                continue  # window wraps over the ring head
            if np.all(self.episode_ids[s : e + 1] == self.episode_ids[e]):
                ends.append(e)
        return np.array(ends, dtype=np.int64)

    def sample_sequences(self, ends_pool: np.ndarray, batch: int, seq_len: int, rng: np.random.Generator):
        ends = ends_pool[rng.integers(len(ends_pool), size=batch)]
        offs = np.arange(-seq_len + 1, 1)
        win = ends[:, None] + offs[None, :]
        return {
            "states": self.states[win],  # (B, L, d)
            "actions": self.actions[ends],  # (B, J)
            "rewards": self.rewards[ends],  # (B,)
            "next_states": self.next_states[ends],  # (B, d)
            "tail_states": self.states[win[:, 1:]],  # (B, L-1, d) warm-up for s'
        }


def td_train_step(qnet: LtcQNetwork, target_net: LtcQNetwork, batch: dict, config: TrainConfig, opt: Adam) -> float:
    """One TD gradient step; per-branch targets averaged in the loss."""
    B = batch["states"].shape[0]
    J = len(qnet.branch_arity)
    gamma = config.discount_factor

    # target: warm the target net over the shifted sequence ending at s'
    next_seq = np.concatenate([batch["tail_states"], batch["next_states"][:, None, :]], axis=1)
    ys_t, _ = target_net.q_sequence(next_seq)
    q_next = ys_t[-1]
    targets = np.stack(
        [batch["rewards"] + gamma * b.max(axis=1) for b in target_net.branch_slices(q_next)], axis=1
    )  # (B, J)

    ys, trace = qnet.q_sequence(batch["states"])
    q_last = ys[-1]
    taken = np.stack(
        [b[np.arange(B), batch["actions"][:, j]] for j, b in enumerate(qnet.branch_slices(q_last))],
        axis=1,
    )
    err = taken - targets
    loss = float(np.mean(err**2))

    dys = np.zeros_like(ys)
    scale = 2.0 / (B * J)
    for j in range(J):
        col = qnet._offsets[j] + batch["actions"][:, j]
        dys[-1][np.arange(B), col] += scale * err[:, j]
    grads, _, _ = qnet.net.backward(trace, dys)
    opt.step(qnet.params, grads)
    return loss


def _check_arity(datasets: list[Dataset]) -> tuple[int, tuple[int, ...]]:
    arity = datasets[0].branch_arity
    dim = datasets[0].state_dim
    for d in datasets:
        if d.branch_arity != arity or d.state_dim != dim:
            raise ArityMismatch(f"{d.branch_arity}/{d.state_dim} vs {arity}/{dim}")
    return dim, arity


def train_on_dataset(datasets: Dataset | list[Dataset], config: TrainConfig, seed: int) -> LtcQNetwork:
    """Offline branched DQN training on recorded samples; seed-deterministic."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    if not datasets or any(len(d) == 0 for d in datasets):
        raise ValueError("nonempty dataset(s) required")
    dim, arity = _check_arity(datasets)
    data = Dataset.concat(datasets) if len(datasets) > 1 else datasets[0]

    rng = substream(seed, "dqn", "train")
    qnet = LtcQNetwork.init(dim, arity, config, substream(seed, "dqn", "init"))
    qnet.normalizer = StateNormalizer.fit(data.states)
    if config.train_steps == 0:
        return qnet
    target = qnet.copy()
    mem = ReplayMemory.from_dataset(data)
    counts = np.bincount(data.episode_ids)
    seq_len = min(config.sequence_len, int(counts[counts > 0].min()))
    ends = mem.valid_sequence_ends(seq_len)
    opt = Adam(qnet.params, config.learn_rate)
    for step in range(config.train_steps):
        batch = mem.sample_sequences(ends, config.batch_size, seq_len, rng)
        td_train_step(qnet, target, batch, config, opt)
        if (step + 1) % config.target_update_interval == 0:
            target = qnet.copy()
    return qnet


def td_loss_and_grads(qnet: LtcQNetwork, target_net: LtcQNetwork, batch: dict, config: TrainConfig):
    """TD loss and parameter gradients without applying an update (MAML inner/outer)."""
    B = batch["states"].shape[0]
    J = len(qnet.branch_arity)
    next_seq = np.concatenate([batch["tail_states"], batch["next_states"][:, None, :]], axis=1)
    ys_t, _ = target_net.q_sequence(next_seq)
    targets = np.stack(
        [
            batch["rewards"] + config.discount_factor * b.max(axis=1)
            for b in target_net.branch_slices(ys_t[-1])
        ],
        axis=1,
    )
    ys, trace = qnet.q_sequence(batch["states"])
    taken = np.stack(
        [b[np.arange(B), batch["actions"][:, j]] for j, b in enumerate(qnet.branch_slices(ys[-1]))],
        axis=1,
    )
    err = taken - targets
    loss = float(np.mean(err**2))
    dys = np.zeros_like(ys)
    scale = 2.0 / (B * J)
    for j in range(J):
        col = qnet._offsets[j] + batch["actions"][:, j]
        dys[-1][np.arange(B), col] += scale * err[:, j]
    grads, _, _ = qnet.net.backward(trace, dys)
    return loss, grads


def fqe_q_value(policy_net: LtcQNetwork, dataset: Dataset, config: TrainConfig, seed: int) -> QEstimate:
    """Fitted Q evaluation of the greedy policy of ``policy_net``.

    Iterated full-batch Bellman regression; deterministic per seed and
    invariant to transition order.  Returns the average evaluated Q over the
    dataset's states.
    """
    if len(dataset) == 0:
        raise ValueError("nonempty dataset required")
    gamma = config.discount_factor
    pi_next = policy_net.greedy_actions(dataset.next_states)  # (N, J)
    pi_here = policy_net.greedy_actions(dataset.states)

    eval_cfg = replace(config, hidden_dims=config.hidden_dims)
    qhat = LtcQNetwork.init(dataset.state_dim, dataset.branch_arity, eval_cfg, substream(seed, "fqe", "init"))
    qhat.normalizer = StateNormalizer.fit(dataset.states)
    opt = Adam(qhat.params, config.fqe_learn_rate)
    N = len(dataset)
    J = len(dataset.branch_arity)
    offsets = qhat._offsets
    states_seq = dataset.states[:, None, :]
    arange = np.arange(N)

    residual = np.inf
    converged = False
    for _ in range(config.fqe_iterations):
        # Bellman targets under the frozen current iterate
        ys_next, _ = qhat.q_sequence(dataset.next_states[:, None, :])
        q_next = ys_next[-1]
        y = np.stack(
            [
                dataset.rewards + gamma * b[arange, pi_next[:, j]]
                for j, b in enumerate(qhat.branch_slices(q_next))
            ],
            axis=1,
        )
        for _ in range(config.fqe_grad_steps):
            ys, trace = qhat.q_sequence(states_seq)
            taken = np.stack(
                [b[arange, dataset.actions[:, j]] for j, b in enumerate(qhat.branch_slices(ys[-1]))],
                axis=1,
            )
            err = taken - y
            dys = np.zeros_like(ys)
            scale = 2.0 / (N * J)
            for j in range(J):
                col = offsets[j] + dataset.actions[:, j]
                np.add.at(dys[-1], (arange, col), scale * err[:, j])
            grads, _, _ = qhat.net.backward(trace, dys)
            opt.step(qhat.params, grads)
        residual = float(np.mean(np.abs(err)))
        if residual < config.fqe_tol:
            converged = True
            break

    ys, _ = qhat.q_sequence(states_seq)
    q_all = ys[-1]
    value = float(
        np.mean(
            np.stack(
                [b[arange, pi_here[:, j]] for j, b in enumerate(qhat.branch_slices(q_all))], axis=1
            )
        )
    )
    return QEstimate(value=value, n_states=N, seed=seed, converged=converged, residual=residual)
