"""Session fixtures for the desk-scale experiment stack.

Training the full roster takes minutes on one core, so checkpoints are
cached under ``.cache/`` keyed by the training hash (dataset + training
hyperparameters + schedule).  Delete ``.cache`` for a fully cold run.
"""

from dataclasses import replace
from pathlib import Path

import pytest

from vcekit.config import load_config
from vcekit.harness import ensure_models, load_splits, make_noise_schedule

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".cache"


@pytest.fixture(scope="session")
def desk_cfg():
    cfg = load_config(ROOT / "configs" / "desk.ini")
    tag = cfg.training_hash()[:12]
    return replace(cfg, models=replace(cfg.models,
                                       models_dir=str(CACHE / f"desk-models-{tag}")))


@pytest.fixture(scope="session")
def desk_models(desk_cfg):
    # superset roster: the acceptance suite also probes a random-weight subject
    roster = replace(desk_cfg.models, subjects=("standard", "robustnoise", "randomnet"))
    return ensure_models(replace(desk_cfg, models=roster), log=print)


@pytest.fixture(scope="session")
def desk_splits(desk_cfg):
    return load_splits(desk_cfg)


@pytest.fixture(scope="session")
def desk_sched(desk_cfg):
    return make_noise_schedule(desk_cfg)
