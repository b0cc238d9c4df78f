"""Seedable DVFS environments generated from device/application metadata.

One environment per device-application combination.  Delivered capacity is
linear in frequency, dynamic power follows the cubic CMOS law, and the
per-step reward trades power against a category-specific quality term with
a latency overshoot penalty:

    r = -lam * P + beta * Q - latency_weight * max(0, L - L*)

State vector column order (fixed, documented for dataset files):
    [ipc, util per CPU cluster..., freq per CPU cluster (GHz)...,
     gpu_util, gpu_freq (GHz), power (W)]
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .metadata import CombinationKey, MetadataRecord, SchemaViolation
from .rngstream import substream


class InvalidMetadata(Exception):
    pass


N_CPU_LEVELS = 8
N_GPU_LEVELS = 6
FPS_CAP = 120.0  # ceiling for variable-target apps
EMA_ALPHA = 0.1  # latency-satisfaction smoothing for interactive quality

SENSITIVITY_MULT = {"low": 0.6, "medium": 1.0, "high": 1.45, "very_high": 2.0}


@dataclass(frozen=True)
class ClusterSpec:
    core_count: int
    freq_levels: tuple[int, ...]  # MHz, strictly ascending
    capacity_coeff: float
    power_coeff: float
    static_power_mw: float


@dataclass(frozen=True)
class WorkloadProfile:
    category: str  # video | interactive | graphics
    target_fps: float | None  # None means variable
    nominal_fps: float
    cpu_work_per_frame: float  # mean work units per frame
    gpu_work_per_frame: float
    io_weight: float


@dataclass(frozen=True)
class EnvSpec:
    combination: CombinationKey
    cpu_clusters: tuple[ClusterSpec, ...]
    gpu: ClusterSpec
    process_efficiency: float
    workload: WorkloadProfile
    seed: int

    @property
    def branch_arity(self) -> tuple[int, ...]:
        return tuple(len(c.freq_levels) for c in self.cpu_clusters) + (len(self.gpu.freq_levels),)

    @property
    def state_dim(self) -> int:
        k = len(self.cpu_clusters)
        return 1 + 2 * k + 3  # ipc, utils, freqs, gpu_util, gpu_freq, power

    def to_dict(self) -> dict:
        d = asdict(self)
        d["combination"] = {
            "device_id": self.combination.device_id,
            "app_id": self.combination.app_id,
            "merged_attributes": self.combination.merged_attributes,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        combo = CombinationKey(
            device_id=d["combination"]["device_id"],
            app_id=d["combination"]["app_id"],
            merged_attributes=dict(d["combination"]["merged_attributes"]),
        )
        mk_cluster = lambda c: ClusterSpec(
            core_count=int(c["core_count"]),
            freq_levels=tuple(int(f) for f in c["freq_levels"]),
            capacity_coeff=float(c["capacity_coeff"]),
            power_coeff=float(c["power_coeff"]),
            static_power_mw=float(c["static_power_mw"]),
        )
        wl = d["workload"]
        return cls(
            combination=combo,
            cpu_clusters=tuple(mk_cluster(c) for c in d["cpu_clusters"]),
            gpu=mk_cluster(d["gpu"]),
            process_efficiency=float(d["process_efficiency"]),
            workload=WorkloadProfile(
                category=wl["category"],
                target_fps=None if wl["target_fps"] is None else float(wl["target_fps"]),
                nominal_fps=float(wl["nominal_fps"]),
                cpu_work_per_frame=float(wl["cpu_work_per_frame"]),
                gpu_work_per_frame=float(wl["gpu_work_per_frame"]),
                io_weight=float(wl["io_weight"]),
            ),
            seed=int(d["seed"]),
        )


@dataclass
class Action:
    cluster_freq_idx: list[int]
    gpu_freq_idx: int

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(self.cluster_freq_idx) + (self.gpu_freq_idx,)

    @classmethod
    def from_indices(cls, idx) -> "Action":
        idx = [int(i) for i in idx]
        return cls(cluster_freq_idx=idx[:-1], gpu_freq_idx=idx[-1])


@dataclass
class EnvState:
    ipc: float
    cpu_util: list[float]
    cpu_freq: list[float]  # MHz
    gpu_util: float
    gpu_freq: float  # MHz
    power_mw: float

    def vector(self) -> np.ndarray:
        return np.array(
            [self.ipc]
            + list(self.cpu_util)
            + [f / 1000.0 for f in self.cpu_freq]
            + [self.gpu_util, self.gpu_freq / 1000.0, self.power_mw / 1000.0],
            dtype=np.float64,
        )


@dataclass
class StepOutcome:
    next_state: EnvState
    reward: float
    perf: float
    power_mw: float
    latency_ms: float


@dataclass(frozen=True)
class RewardConfig:
    lam: float | None = None  # None -> 1 / P_max(env)
    beta: float = 1.0
    latency_weight: float = 0.5
    l_star_ms: float | None = None  # None -> 1000/target, or 100 for variable


def _parse_range(token: str) -> tuple[int, int]:
    lo, hi = token.split("-")
    return int(lo), int(hi)


def _freq_levels(lo: int, hi: int, n: int) -> tuple[int, ...]:
    levels = np.geomspace(lo, hi, n)
    out = sorted({int(round(f)) for f in levels})
    if len(out) != n:
        raise InvalidMetadata(f"degenerate frequency range {lo}-{hi}")
    return tuple(out)


def capacity(cluster: ClusterSpec, freq_mhz: float, process_efficiency: float) -> float:
    """Delivered capacity in work units / second (linear in frequency)."""
    return cluster.capacity_coeff * cluster.core_count * (freq_mhz / 1000.0) * process_efficiency


def dynamic_power_mw(cluster: ClusterSpec, freq_mhz: float, util: float) -> float:
    """Cubic-law dynamic power at a frequency and utilization."""
    return cluster.power_coeff * util * (freq_mhz / 1000.0) ** 3


def generate_env(device: MetadataRecord, app: MetadataRecord, seed: int) -> EnvSpec:
    """Deterministic EnvSpec from two metadata records and a seed."""
    if device.kind != "device" or app.kind != "application":
        raise SchemaViolation("generate_env needs (device, application) records")
    combo = CombinationKey.from_records(device, app)

    try:
        topology = [int(n) for n in device.attributes["cpu_topology"].split("+")]
        cpu_lo, cpu_hi = _parse_range(device.attributes["cpu_freq_range"])
        gpu_lo, gpu_hi = _parse_range(device.attributes["gpu_freq_range"])
        node_nm = int(device.attributes["process_node"].rstrip("nm"))
        vendor = device.attributes.get("chipset_vendor", "unknown")
    except (KeyError, ValueError) as exc:
        raise InvalidMetadata(f"{device.id}: {exc}") from exc

    # Silicon character is drawn per (vendor, process node): devices built on
    # the same fabrication line share capacity/power coefficients up to a
    # small per-device binning jitter.  The same device paired with two
    # applications therefore exposes the same silicon, and devices whose
    # vendor/node metadata match are dynamically near-identical.
    rng = substream(seed, "envgen", "silicon", vendor, str(node_nm))
    dev_rng = substream(seed, "envgen", "device", device.id)

    def jitter() -> float:
        return 1.0 + 0.04 * (dev_rng.uniform() - 0.5)

    # Smaller process nodes get strictly higher efficiency: the +/-2% jitter
    # band cannot cross the gap between adjacent node classes.
    process_efficiency = math.sqrt(10.0 / node_nm) * jitter()

    clusters = []
    for n_cores in topology:
        kappa = rng.uniform(0.5, 1.0)
        clusters.append(
            ClusterSpec(
                core_count=n_cores,
                freq_levels=_freq_levels(cpu_lo, cpu_hi, N_CPU_LEVELS),
                capacity_coeff=kappa * jitter(),
                power_coeff=kappa * n_cores * rng.uniform(12.0, 20.0) * jitter(),
                static_power_mw=rng.uniform(20.0, 80.0) * jitter(),
            )
        )
    gpu = ClusterSpec(
        core_count=1,
        freq_levels=_freq_levels(gpu_lo, gpu_hi, N_GPU_LEVELS),
        capacity_coeff=rng.uniform(4.0, 8.0) * jitter(),
        power_coeff=rng.uniform(800.0, 1600.0) * jitter(),
        static_power_mw=rng.uniform(30.0, 100.0) * jitter(),
    )

    fps_token = combo.merged_attributes["app.target_fps"]
    target = None if fps_token == "variable" else float(fps_token)
    nominal = target if target is not None else 60.0
    sens = lambda key: SENSITIVITY_MULT[combo.merged_attributes[f"app.{key}"]]
    cpu_work = 0.16 * sens("cpu_sensitivity")
    gpu_work = 0.05 * sens("gpu_sensitivity")
    category = combo.merged_attributes["app.category"]
    if category == "graphics":
        gpu_work = max(gpu_work, 1.3 * cpu_work)  # graphics is GPU-bound by construction
    workload = WorkloadProfile(
        category=category,
        target_fps=target,
        nominal_fps=nominal,
        cpu_work_per_frame=cpu_work,
        gpu_work_per_frame=gpu_work,
        io_weight=0.1 * sens("io_sensitivity"),
    )
    return EnvSpec(
        combination=combo,
        cpu_clusters=tuple(clusters),
        gpu=gpu,
        process_efficiency=process_efficiency,
        workload=workload,
        seed=seed,
    )


def max_power_mw(spec: EnvSpec) -> float:
    """Power at all-max frequencies and full utilization (incl. statics)."""
    total = 0.0
    for c in list(spec.cpu_clusters) + [spec.gpu]:
        total += dynamic_power_mw(c, c.freq_levels[-1], 1.0) + c.static_power_mw
    return total


def static_power_mw(spec: EnvSpec) -> float:
    return sum(c.static_power_mw for c in list(spec.cpu_clusters) + [spec.gpu])


def reference_fps(spec: EnvSpec) -> float:
    """Achievable fps at max frequencies under mean demand (graphics quality anchor)."""
    wl = spec.workload
    c_cpu = sum(capacity(c, c.freq_levels[-1], spec.process_efficiency) for c in spec.cpu_clusters)
    c_gpu = capacity(spec.gpu, spec.gpu.freq_levels[-1], spec.process_efficiency)
    frame_time = max(wl.cpu_work_per_frame / c_cpu, wl.gpu_work_per_frame / c_gpu, 1e-9)
    return min(FPS_CAP, 1.0 / frame_time)


def default_l_star_ms(spec: EnvSpec) -> float:
    t = spec.workload.target_fps
    return 1000.0 / t if t is not None else 100.0


class DvfsEnv:
    """Single-owner mutable MDP for one device-application combination."""

    def __init__(self, spec: EnvSpec, reward_config: RewardConfig = RewardConfig()):
        self.spec = spec
        self.reward_config = reward_config
        self.lam = reward_config.lam if reward_config.lam is not None else 1.0 / max_power_mw(spec)
        self.l_star_ms = (
            reward_config.l_star_ms if reward_config.l_star_ms is not None else default_l_star_ms(spec)
        )
        self._fps_ref = reference_fps(spec)
        self._static_mw = static_power_mw(spec)
        self._rng: np.random.Generator | None = None
        self.state: EnvState | None = None

    # -- demand processes ---------------------------------------------------

    def _reset_demand(self):
        self._ar = 0.0
        self._regime_burst = False
        self._latency_ema = 1.0

    def _draw_demand(self, rng: np.random.Generator) -> tuple[float, float]:
        wl = self.spec.workload
        if wl.category == "interactive":
            p_switch = 0.35 if self._regime_burst else 0.15
            if rng.uniform() < p_switch:
                self._regime_burst = not self._regime_burst
            scale = 2.2 if self._regime_burst else 0.25
            noise = 1.0 + 0.2 * rng.standard_normal()
        else:
            self._ar = 0.9 * self._ar + 0.1 * rng.standard_normal()
            wobble = 0.15 if wl.category == "video" else 0.10
            scale = 1.0
            noise = 1.0 + wobble * self._ar + 0.05 * wl.io_weight * rng.standard_normal()
        factor = max(0.0, scale * noise)
        return wl.cpu_work_per_frame * factor, wl.gpu_work_per_frame * factor

    # -- MDP interface ------------------------------------------------------

    def reset(self, seed: int) -> EnvState:
        self._rng = substream(seed, "env", self.spec.combination.id)
        self._reset_demand()
        spec = self.spec
        mid = [len(c.freq_levels) // 2 for c in spec.cpu_clusters]
        state = EnvState(
            ipc=1.5,
            cpu_util=[0.0] * len(spec.cpu_clusters),
            cpu_freq=[float(spec.cpu_clusters[i].freq_levels[mid[i]]) for i in range(len(mid))],
            gpu_util=0.0,
            gpu_freq=float(spec.gpu.freq_levels[len(spec.gpu.freq_levels) // 2]),
            power_mw=self._static_mw,
        )
        self.state = state
        return state

    def step(self, action: Action, demand: tuple[float, float] | None = None) -> StepOutcome:
        """Advance one tick.  ``demand`` overrides the stochastic draw (tests)."""
        if self._rng is None:
            raise RuntimeError("call reset() before step()")
        spec, wl = self.spec, self.spec.workload
        freqs = [
            float(spec.cpu_clusters[i].freq_levels[action.cluster_freq_idx[i]])
            for i in range(len(spec.cpu_clusters))
        ]
        gpu_freq = float(spec.gpu.freq_levels[action.gpu_freq_idx])

        d_cpu, d_gpu = self._draw_demand(self._rng) if demand is None else demand
        c_cpu = sum(
            capacity(spec.cpu_clusters[i], freqs[i], spec.process_efficiency)
            for i in range(len(freqs))
        )
        c_gpu = capacity(spec.gpu, gpu_freq, spec.process_efficiency)

        t_cpu = d_cpu / c_cpu
        t_gpu = d_gpu / c_gpu
        frame_time = max(t_cpu, t_gpu, 1e-9)
        ideal = 1.0 / wl.nominal_fps
        latency_ms = 1000.0 * max(t_cpu, t_gpu)

        cpu_util = min(1.0, t_cpu / ideal)
        gpu_util = min(1.0, t_gpu / ideal)
        fps_limit = wl.target_fps if wl.target_fps is not None else FPS_CAP
        fps = min(fps_limit, 1.0 / frame_time)

        power = self._static_mw
        for i, c in enumerate(spec.cpu_clusters):
            power += dynamic_power_mw(c, freqs[i], cpu_util)
        power += dynamic_power_mw(spec.gpu, gpu_freq, gpu_util)

        # category quality term
        if wl.category == "video":
            quality = min(1.0, fps / wl.target_fps)
        elif wl.category == "interactive":
            hit = 1.0 if latency_ms <= self.l_star_ms else 0.0
            self._latency_ema = (1.0 - EMA_ALPHA) * self._latency_ema + EMA_ALPHA * hit
            quality = self._latency_ema
        else:
            quality = min(1.0, fps / self._fps_ref)

        rc = self.reward_config
        reward = -self.lam * power + rc.beta * quality - rc.latency_weight * max(
            0.0, latency_ms - self.l_star_ms
        )

        ipc = float(
            np.clip(2.0 - 1.2 * max(cpu_util, gpu_util) + 0.05 * self._rng.standard_normal(), 0.1, 3.0)
        )
        next_state = EnvState(
            ipc=ipc,
            cpu_util=[cpu_util] * len(freqs),
            cpu_freq=freqs,
            gpu_util=gpu_util,
            gpu_freq=gpu_freq,
            power_mw=power,
        )
        self.state = next_state
        perf = fps if wl.category != "interactive" else 1000.0 / max(latency_ms, 1.0)
        return StepOutcome(
            next_state=next_state, reward=reward, perf=perf, power_mw=power, latency_ms=latency_ms
        )


def schedutil_policy(spec: EnvSpec, state: EnvState, headroom_factor: float = 1.25) -> Action:
    """Utilization ladder: lowest level >= headroom * util * current frequency."""

    def pick(levels: tuple[int, ...], util: float, current: float) -> int:
        want = headroom_factor * util * current
        for i, f in enumerate(levels):
            if f >= want:
                return i
        return len(levels) - 1

    idx = [
        pick(spec.cpu_clusters[i].freq_levels, state.cpu_util[i], state.cpu_freq[i])
        for i in range(len(spec.cpu_clusters))
    ]
    gpu_idx = pick(spec.gpu.freq_levels, state.gpu_util, state.gpu_freq)
    return Action(cluster_freq_idx=idx, gpu_freq_idx=gpu_idx)


class ExploringPolicy:
    """Schedutil with per-branch epsilon-random overrides.

    Offline training and FQE need action coverage that the deterministic
    ladder cannot provide; this is the standard behavior policy for data
    collection.  Deterministic per seed: reset() rewinds the noise stream.
    """

    def __init__(self, epsilon: float, seed: int, headroom_factor: float = 1.25):
        if not (0.0 <= epsilon <= 1.0):
            raise ValueError("epsilon must be in [0, 1]")
        self.epsilon = epsilon
        self.seed = seed
        self.headroom_factor = headroom_factor
        self.reset()

    def reset(self) -> None:
        self._rng = substream(self.seed, "explore")

    def __call__(self, spec: EnvSpec, state: EnvState) -> Action:
        action = schedutil_policy(spec, state, self.headroom_factor)
        arity = spec.branch_arity
        for j, n in enumerate(arity):
            if self._rng.uniform() < self.epsilon:
                idx = int(self._rng.integers(n))
                if j < len(action.cluster_freq_idx):
                    action.cluster_freq_idx[j] = idx
                else:
                    action.gpu_freq_idx = idx
        return action


# -- trajectories -----------------------------------------------------------


@dataclass
class Dataset:
    """Recorded transitions with episode boundaries, for replay and FQE."""

    states: np.ndarray  # (T, d)
    actions: np.ndarray  # (T, n_branches) int
    rewards: np.ndarray  # (T,)
    next_states: np.ndarray  # (T, d)
    episode_ids: np.ndarray  # (T,) int
    branch_arity: tuple[int, ...]
    source_ids: tuple[str, ...] = ()  # combination ids this data came from

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    def episode_starts(self) -> np.ndarray:
        ids = self.episode_ids
        return np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        arity = parts[0].branch_arity
        for p in parts:
            if p.branch_arity != arity:
                raise ValueError(f"branch arity mismatch: {p.branch_arity} vs {arity}")
        offset, episode_ids = 0, []
        for p in parts:
            episode_ids.append(p.episode_ids + offset)
            offset += int(p.episode_ids.max()) + 1 if len(p) else 0
        return Dataset(
            states=np.concatenate([p.states for p in parts]),
            actions=np.concatenate([p.actions for p in parts]),
            rewards=np.concatenate([p.rewards for p in parts]),
            next_states=np.concatenate([p.next_states for p in parts]),
            episode_ids=np.concatenate(episode_ids),
            branch_arity=arity,
            source_ids=tuple(sid for p in parts for sid in p.source_ids),
        )

    def save_jsonl(self, path) -> None:
        """One transition per line: episode, state, action indices, reward, next state."""
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "branch_arity": list(self.branch_arity),
                "source_ids": list(self.source_ids),
                "columns": ["episode", "state", "action", "reward", "next_state"],
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i in range(len(self)):
                row = [
                    int(self.episode_ids[i]),
                    [float(x) for x in self.states[i]],
                    [int(a) for a in self.actions[i]],
                    float(self.rewards[i]),
                    [float(x) for x in self.next_states[i]],
                ]
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Dataset":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        if not rows:
            raise ValueError(f"empty dataset file {path}")
        return cls(
            states=np.array([r[1] for r in rows], dtype=np.float64),
            actions=np.array([r[2] for r in rows], dtype=np.int64),
            rewards=np.array([r[3] for r in rows], dtype=np.float64),
            next_states=np.array([r[4] for r in rows], dtype=np.float64),
            episode_ids=np.array([r[0] for r in rows], dtype=np.int64),
            branch_arity=tuple(header["branch_arity"]),
            source_ids=tuple(header["source_ids"]),
        )


def rollout(env: DvfsEnv, policy, horizon: int, seed: int, episode_id: int = 0) -> tuple[Dataset, dict]:
    """Run ``horizon`` steps under ``policy(spec, state) -> Action``.

    Returns the recorded transitions and episode metrics (mean perf, power,
    reward, latency).  Fully determined by (env spec, policy, horizon, seed).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = env.reset(seed)
    if hasattr(policy, "reset"):
        policy.reset()
    states, actions, rewards, next_states = [], [], [], []
    perfs, powers, lats, fps_list = [], [], [], []
    for _ in range(horizon):
        action = policy(env.spec, state)
        out = env.step(action)
        states.append(state.vector())
        actions.append(action.as_tuple())
        rewards.append(out.reward)
        next_states.append(out.next_state.vector())
        perfs.append(out.perf)
        powers.append(out.power_mw)
        lats.append(out.latency_ms)
        state = out.next_state
    ds = Dataset(
        states=np.array(states),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards),
        next_states=np.array(next_states),
        episode_ids=np.full(horizon, episode_id, dtype=np.int64),
        branch_arity=env.spec.branch_arity,
        source_ids=(env.spec.combination.id,),
    )
    metrics = {
        "mean_perf": float(np.mean(perfs)),
        "mean_power_mw": float(np.mean(powers)),
        "mean_reward": float(np.mean(rewards)),
        "mean_latency_ms": float(np.mean(lats)),
        "perf_values": np.array(perfs),
        "latency_values": np.array(lats),
    }
    return ds, metrics
