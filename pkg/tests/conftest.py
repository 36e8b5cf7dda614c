import numpy as np
import pytest

from u2ad.config import ModelConfig, PhantomConfig, from_dict
from u2ad.model import init_model
from u2ad.patching import build_patch_grid
from u2ad.phantom import embed_anomalies, generate_phantom

SMALL_SITE = {
    "height": 64,
    "width": 48,
    "sc_width": [6, 8],
    "csf_margin": [3, 4],
    "curvature": 3,
    "vertical_margin": 4,
}


def tiny_config(**sections):
    """A configuration small enough for unit tests (seconds of CPU)."""
    base = {
        "phantom": {"healthy": dict(SMALL_SITE), "target": dict(SMALL_SITE), "n_healthy": 6, "n_target": 6, "prevalence": 0.5},
        "model": {"embed_dim": 16, "encoder_depth": 1, "decoder_depth": 1, "num_heads": 2},
        "schedule": {"pretrain_epochs": 2, "adapt_epochs": 6, "stage1_epochs": 3, "augment": False, "adapt_augment": False},
        "uncertainty": {"mc_samples": 3, "refresh_interval": 2},
        "eval": {"repeats": 2, "folds": 2, "k_values": [2, 3], "noise_variances": [0.0, 0.4], "downsample_factors": [1, 2]},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    return from_dict(base)


@pytest.fixture
def small_site():
    return PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in SMALL_SITE.items()})


@pytest.fixture
def small_case(small_site):
    return generate_phantom(3, small_site)


@pytest.fixture
def small_anomalous_case(small_site):
    return embed_anomalies(generate_phantom(5, small_site), 2, np.random.default_rng(0))


@pytest.fixture
def small_grid(small_case):
    return build_patch_grid(small_case.roi_mask, 8)


@pytest.fixture
def micro_model():
    cfg = ModelConfig(patch_size=8, embed_dim=16, encoder_depth=1, decoder_depth=1, num_heads=2)
    return init_model(cfg, np.random.default_rng(0), (64, 48))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
