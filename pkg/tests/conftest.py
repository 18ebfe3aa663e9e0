import hashlib
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advpnml import harness  # noqa: E402
from advpnml.attacks import AttackConfig  # noqa: E402
from advpnml.datasets import SyntheticSpec, gen_synthetic, open_mnist  # noqa: E402
from advpnml.models import ModelSpec, load_checkpoint  # noqa: E402
from advpnml.training import TrainConfig, train  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"


@pytest.fixture(scope="session")
def mnist_test(tmp_path_factory):
    return open_mnist(
        MNIST_DIR / "t10k-images-idx3-ubyte.gz",
        MNIST_DIR / "t10k-labels-idx1-ubyte.gz",
        tmp_path_factory.mktemp("mnist"),
    )


@pytest.fixture(scope="session")
def mnist_train(tmp_path_factory):
    return open_mnist(
        MNIST_DIR / "train-images-idx3-ubyte.gz",
        MNIST_DIR / "train-labels-idx1-ubyte.gz",
        tmp_path_factory.mktemp("mnist"),
    )


@pytest.fixture(scope="session")
def toy_train():
    return gen_synthetic(SyntheticSpec(n_per_class=500, seed=0))


@pytest.fixture(scope="session")
def toy_test():
    return gen_synthetic(SyntheticSpec(n_per_class=200, seed=1))


@pytest.fixture(scope="session")
def toy_model(toy_train):
    """Small PGD-trained MLP shared by tests that need a fitted toy model."""
    cfg = TrainConfig(
        epochs=8,
        batch_size=50,
        learning_rate=0.01,
        adversary=AttackConfig(0.5, 0.25, iterations=4, clamp=None),
        seed=0,
    )
    params, _ = train(ModelSpec.mlp(), toy_train, cfg)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ pipeline runs

CONFIGS = ROOT / "configs"
REFERENCE_DIR = ROOT / "runs" / "reference"


def source_digest(config_path):
    """Hash of the package sources and one config file."""
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "advpnml").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(Path(config_path).read_bytes())
    return h.hexdigest()[:16]


@dataclass
class PipelineRun:
    cfg: dict
    out: Path
    seconds: float
    cache: dict = field(default_factory=dict)


def run_pipeline(config_path, out, cache=None):
    """``train`` followed by ``eval`` for one config file."""
    cfg = harness.load_config(config_path)
    cache = {} if cache is None else cache
    started = time.perf_counter()
    harness.cmd_train(cfg, out, echo=lambda *_: None)
    harness.cmd_eval(cfg, out, cache=cache)
    return PipelineRun(cfg, Path(out), time.perf_counter() - started, cache)


def reference_run(config_path):
    """A stored earlier run of the same sources and config, made on first use."""
    out = REFERENCE_DIR / f"{Path(config_path).stem}-{source_digest(config_path)}"
    if not (out / "results.csv").exists():
        run_pipeline(config_path, out)
    return out


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    return run_pipeline(CONFIGS / "toy.json", tmp_path_factory.mktemp("toy_run"))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    return run_pipeline(CONFIGS / "mnist_desk.json", tmp_path_factory.mktemp("desk_run"))


@pytest.fixture(scope="session")
def desk_params(desk_run):
    return load_checkpoint(desk_run.out / "model.ckpt")


@pytest.fixture(scope="session")
def desk_test(desk_run):
    return harness.load_datasets(desk_run.cfg)[1]
