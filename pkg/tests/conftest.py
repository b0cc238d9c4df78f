import json
from pathlib import Path

import pytest

from metadvfs import metadata, qlearner, simenv
from metadvfs.rngstream import seed_for

CATALOG_DIR = Path(__file__).resolve().parents[1] / "src" / "metadvfs" / "catalogs"

SMALL_TRAIN = qlearner.TrainConfig(
    train_steps=150,
    hidden_dims=(10,),
    steps_per_input=2,
    target_update_interval=50,
    fqe_iterations=15,
    fqe_grad_steps=5,
)


@pytest.fixture(scope="session")
def toy_catalog():
    return metadata.load_catalog(CATALOG_DIR / "toy6.json")


@pytest.fixture(scope="session")
def toy_combos(toy_catalog):
    devices = [r for r in toy_catalog if r.kind == "device"]
    apps = [r for r in toy_catalog if r.kind == "application"]
    return [(d, a) for d in devices for a in apps]


def collect(device, app, root_seed=0, horizon=120, epsilon=0.2):
    """Exploring-schedutil rollout on a fresh env: the standard offline source."""
    spec = simenv.generate_env(device, app, root_seed)
    env = simenv.DvfsEnv(spec)
    policy = simenv.ExploringPolicy(epsilon, seed_for(root_seed, "behavior", spec.combination.id))
    ds, metrics = simenv.rollout(
        env, policy, horizon, seed_for(root_seed, "collect", spec.combination.id)
    )
    return spec, ds, metrics


@pytest.fixture(scope="session")
def toy_datasets(toy_combos):
    out = []
    for d, a in toy_combos:
        spec, ds, _ = collect(d, a)
        out.append((spec.combination, ds))
    return out


def write_catalog(path: Path, records: list[dict]) -> Path:
    path.write_text(json.dumps(records, indent=2))
    return path
