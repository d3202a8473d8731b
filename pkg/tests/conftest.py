import numpy as np
import pytest
import torch

from pixseg.vlm import PaletteEntry, make_palette_vectors, stub_encoder

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def palette():
    vecs = make_palette_vectors(len(COLORS), 16, seed=0)
    return [PaletteEntry(n, c, vecs[i]) for i, (n, c) in enumerate(COLORS.items())]


@pytest.fixture
def stub(palette):
    return stub_encoder(palette)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny synthetic corpus (8 train, 4 eval images of 24x24) plus config."""
    from pixseg.cli import gen_synth

    root = tmp_path_factory.mktemp("corpus")
    gen_synth(root, seed=0, n_train=8, n_eval=4, size=24)
    return root


def small_config_dict(**train):
    from pixseg.cli import synthetic_config

    data = synthetic_config(seed=0, iterations=train.pop("iterations", 6))
    data["train"].update({"batch_size": 2, "anchors_per_view": 64, "hidden": 8, "top_m": 8, "unknown_u": 8,
                          "segments_per_view": 16, **train})
    data["eval"]["segments"] = 16
    return data


def small_config(root, **train):
    from pixseg.config import from_dict

    return from_dict(small_config_dict(**train), base_dir=root, check_paths=True)
