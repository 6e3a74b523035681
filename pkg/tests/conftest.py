import numpy as np
import pytest
import torch

from btdnet.config import Config
from btdnet.data import MODALITIES, PAD_VALUE, Scan, Volume
from btdnet.synth import generate_synthetic


def tiny_config(t: int = 8) -> Config:
    """Desk-scale config: tiny backbone, short sequences, narrow layers."""
    cfg = Config()
    for m in cfg.model.t:
        cfg.model.t[m] = t
    cfg.model.rnn_units = 16
    cfg.model.routing_units = 12
    cfg.model.fusion_units = 16
    return cfg


def make_padded_scan(
    rng: np.random.Generator,
    cfg: Config,
    lengths: dict | None = None,
    label: int = 0,
    scan_id: str = "s0",
) -> Scan:
    """Random [-1, 1] scan, grayscale replicated to 3 channels, padded to t."""
    volumes = {}
    for m in MODALITIES:
        t = cfg.model.t[m]
        l = lengths[m] if lengths else int(rng.integers(1, t + 1))
        px = np.full((t, 224, 224, 3), PAD_VALUE, dtype=np.float32)
        px[:l] = rng.uniform(-1.0, 1.0, size=(l, 224, 224, 1)).astype(np.float32)
        volumes[m] = Volume(m, px, l)
    return Scan(scan_id, volumes, label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """A small end-to-end dataset: 16 scans generated and preprocessed once."""
    from btdnet.data import prep_dataset

    root = tmp_path_factory.mktemp("mini") / "d"
    cfg = Config()
    cfg.synth.num_scans = 16
    cfg.synth.seed = 5
    cfg.synth.slice_range = {m: (6, 10) for m in MODALITIES}
    generate_synthetic(cfg.synth, root)
    prep = prep_dataset(root)
    return {"raw_root": root, "prep_root": prep.root}


def mini_train_config() -> Config:
    """Training config matched to the mini dataset (t=12)."""
    cfg = tiny_config(t=12)
    cfg.train.folds = 2
    cfg.train.epochs_phase1 = 2
    cfg.train.epochs_phase2 = 2
    cfg.train.lr_phase1 = 1e-3
    cfg.train.lr_phase2 = 1e-3
    cfg.train.seed = 3
    return cfg
