"""Multi-layer liquid time-constant network with exact unrolled gradients.

Each layer integrates  tau * dh/dt = -h + tanh(W h + U inp + b)  by explicit
Euler sub-steps; the input layer is held at x over the tick and the readout
is linear.  The backward pass replays the cached forward trace in reverse,
so gradients are exact for the discretized computation (checked against
central finite differences in the test suite).

Time constants are stored as raw parameters with tau = softplus(raw) + 0.01,
keeping tau positive under arbitrary gradient updates.

A plain tanh-RNN backbone with the identical step/forward/backward interface
backs the no-liquid-network ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

TAU_MIN = 1e-2
BLOWUP_BOUND = 1e6

Params = dict[str, np.ndarray]


class NumericalBlowup(Exception):
    pass


class TraceMismatch(Exception):
    pass


# -- parameter-tree helpers (used by trainers and the meta-learner) ---------


def tree_copy(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}


def tree_zeros_like(p: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in p.items()}


def tree_axpy(alpha: float, x: Params, y: Params) -> Params:
    """y + alpha * x, elementwise over the tree."""
    return {k: y[k] + alpha * x[k] for k in y}


def tree_add_(acc: Params, x: Params, scale: float = 1.0) -> None:
    for k in acc:
        acc[k] += scale * x[k]


def tree_scale_(p: Params, scale: float) -> None:
    for k in p:
        p[k] *= scale


def tree_allclose(a: Params, b: Params, atol: float = 0.0) -> bool:
    return set(a) == set(b) and all(np.allclose(a[k], b[k], atol=atol, rtol=0.0) for k in a)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    kind: str = "ltc"  # "ltc" | "rnn"
    steps_per_input: int = 4
    dt: float = 0.25

    def __post_init__(self):
        if self.kind not in ("ltc", "rnn"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.steps_per_input < 1 or self.dt <= 0:
            raise ValueError("solver needs steps_per_input >= 1 and dt > 0")


class LtcNetwork:
    """Parameter container plus forward/backward for one backbone."""

    def __init__(self, config: BackboneConfig, params: Params):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: BackboneConfig, seed: int | np.random.Generator) -> "LtcNetwork":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params: Params = {}
        prev = config.input_dim
        # tau ~ 1.0 at init: softplus(raw) + TAU_MIN = 1
        raw_tau_init = float(np.log(np.expm1(1.0 - TAU_MIN)))
        for l, n in enumerate(config.hidden_dims):
            params[f"W{l}"] = rng.uniform(-1, 1, (n, n)) / np.sqrt(n)
            params[f"U{l}"] = rng.uniform(-1, 1, (n, prev)) / np.sqrt(prev)
            params[f"b{l}"] = np.zeros(n)
            if config.kind == "ltc":
                params[f"raw_tau{l}"] = np.full(n, raw_tau_init)
            prev = n
        params["Wout"] = rng.uniform(-1, 1, (config.output_dim, prev)) / np.sqrt(prev)
        params["bout"] = np.zeros(config.output_dim)
        return cls(config, params)

    def copy(self) -> "LtcNetwork":
        return LtcNetwork(self.config, tree_copy(self.params))

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_hidden(self, batch: int) -> list[np.ndarray]:
        return [np.zeros((batch, n)) for n in self.config.hidden_dims]

    def _tau(self, l: int) -> np.ndarray:
        return _softplus(self.params[f"raw_tau{l}"]) + TAU_MIN

    # -- forward ------------------------------------------------------------

    def step(self, h_prev: list[np.ndarray], x: np.ndarray):
        """One input tick.  x: (B, input_dim).  Returns (h_new, y, tick_trace)."""
        cfg, p = self.config, self.params
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise TraceMismatch(f"input shape {x.shape} != (B, {cfg.input_dim})")
        h = [hl.copy() for hl in h_prev]
        n_sub = cfg.steps_per_input if cfg.kind == "ltc" else 1
        subs = []
        for _ in range(n_sub):
            layer_recs = []
            inp = x
            for l in range(len(cfg.hidden_dims)):
                h_old = h[l]
                pre = h_old @ p[f"W{l}"].T + inp @ p[f"U{l}"].T + p[f"b{l}"]
                act = np.tanh(pre)
                if cfg.kind == "ltc":
                    tau = self._tau(l)
                    h_new = h_old + cfg.dt * (act - h_old) / tau
                else:
                    h_new = act
                layer_recs.append((h_old, act, inp))
                h[l] = h_new
                inp = h_new  # layer l feeds layer l+1 its end-of-substep state
            subs.append(layer_recs)
        if any(np.max(np.abs(hl)) > BLOWUP_BOUND for hl in h):
            raise NumericalBlowup("hidden state exceeded bound")
        y = h[-1] @ p["Wout"].T + p["bout"]
        return h, y, (subs, h[-1])

    def forward(self, xs: np.ndarray, h0: list[np.ndarray] | None = None):
        """Sequence forward.  xs: (T, B, input_dim).  Returns (ys, hT, trace)."""
        T, B = xs.shape[0], xs.shape[1]
        h = h0 if h0 is not None else self.zero_hidden(B)
        ys, trace = [], []
        for t in range(T):
            h, y, tick = self.step(h, xs[t])
            ys.append(y)
            trace.append(tick)
        return np.stack(ys), h, trace

    # -- backward -----------------------------------------------------------

    def backward(self, trace, dys: np.ndarray, dh_last: list[np.ndarray] | None = None):
        """Exact reverse-mode pass through the cached forward trace.

        dys: (T, B, output_dim) gradients w.r.t. the per-tick outputs.
        Returns (param gradients, input gradients (T, B, input_dim), dh0).
        """
        cfg, p = self.config, self.params
        T = len(trace)
        if dys.shape[0] != T:
            raise TraceMismatch(f"{dys.shape[0]} output grads for {T} traced ticks")
        L = len(cfg.hidden_dims)
        B = dys.shape[1]
        grads = tree_zeros_like(p)
        dh = dh_last if dh_last is not None else [np.zeros((B, n)) for n in cfg.hidden_dims]
        dh = [g.copy() for g in dh]
        dxs = np.zeros((T, B, cfg.input_dim))
        taus = [self._tau(l) for l in range(L)] if cfg.kind == "ltc" else None
        for t in range(T - 1, -1, -1):
            dy = dys[t]
            subs, h_end_last = trace[t]
            grads["Wout"] += dy.T @ h_end_last
            grads["bout"] += dy.sum(axis=0)
            dh[-1] = dh[-1] + dy @ p["Wout"]
            for s in range(len(subs) - 1, -1, -1):
                for l in range(L - 1, -1, -1):
                    h_old, act, inp = subs[s][l]
                    d_new = dh[l]
                    if cfg.kind == "ltc":
                        tau = taus[l]
                        r = cfg.dt / tau
                        dact = d_new * r
                        # dh_new/dtau = -dt (act - h_old) / tau^2
                        dtau = (d_new * (-(cfg.dt) * (act - h_old) / tau**2)).sum(axis=0)
                        grads[f"raw_tau{l}"] += dtau * _sigmoid(p[f"raw_tau{l}"])
                        d_old = d_new * (1.0 - r)
                    else:
                        dact = d_new
                        d_old = np.zeros_like(d_new)
                    dpre = dact * (1.0 - act**2)
                    grads[f"W{l}"] += dpre.T @ h_old
                    grads[f"U{l}"] += dpre.T @ inp
                    grads[f"b{l}"] += dpre.sum(axis=0)
                    d_old = d_old + dpre @ p[f"W{l}"]
                    dinp = dpre @ p[f"U{l}"]
                    if l == 0:
                        dxs[t] += dinp
                    else:
                        dh[l - 1] = dh[l - 1] + dinp
                    dh[l] = d_old
        return grads, dxs, dh

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        buf = {k: v for k, v in self.params.items()}
        cfg = json.dumps(
            {
                "input_dim": self.config.input_dim,
                "hidden_dims": list(self.config.hidden_dims),
                "output_dim": self.config.output_dim,
                "kind": self.config.kind,
                "steps_per_input": self.config.steps_per_input,
                "dt": self.config.dt,
            },
            sort_keys=True,
        )
        np.savez(path, __config__=np.frombuffer(cfg.encode(), dtype=np.uint8), **buf)

    @classmethod
    def load(cls, path) -> "LtcNetwork":
        with np.load(path) as z:
            cfg = json.loads(bytes(z["__config__"]).decode())
            params = {k: z[k].copy() for k in z.files if k != "__config__"}
        config = BackboneConfig(
            input_dim=cfg["input_dim"],
            hidden_dims=tuple(cfg["hidden_dims"]),
            output_dim=cfg["output_dim"],
            kind=cfg["kind"],
            steps_per_input=cfg["steps_per_input"],
            dt=cfg["dt"],
        )
        return cls(config, params)


def with_rnn_backbone(config: BackboneConfig) -> BackboneConfig:
    """Same dimensions, plain tanh-RNN cells (ablation backbone)."""
    return BackboneConfig(
        input_dim=config.input_dim,
        hidden_dims=config.hidden_dims,
        output_dim=config.output_dim,
        kind="rnn",
        steps_per_input=config.steps_per_input,
        dt=config.dt,
    )
