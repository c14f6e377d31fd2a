import numpy as np
import pytest
import torch

from iscl.data import DatasetSplit
from iscl.models import DiscriminatorConfig, ExtractorConfig, GeneratorConfig, ModelConfig
from iscl.noise import NoiseSpec, apply_charge, membrane_phantom
from iscl.data import ImageTensor, quantize


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        GeneratorConfig(base_width=4, n_residual_blocks=1, n_downsamples=2),
        ExtractorConfig(depth=3, width=4),
        DiscriminatorConfig(base_width=4, n_downsamples=3),
    )


def phantom_split(n_clean=12, n_noisy=12, n_val=3, size=64, amplitude=0.4, seed=0) -> DatasetSplit:
    spec = NoiseSpec("charge", amplitude, 3.0, density=3e-3, seed=seed)

    def ph(i):
        return membrane_phantom(size, np.random.default_rng([seed, i]))

    def q(a):
        return (quantize(a) / 255.0).astype(np.float32)

    clean = [q(ph(i)) for i in range(n_clean)]
    noisy = [q(apply_charge(ImageTensor(ph(1000 + i)), spec.reseeded(i)).pixels) for i in range(n_noisy)]
    vc = [q(ph(5000 + i)) for i in range(n_val)]
    vn = [q(apply_charge(ImageTensor(v), spec.reseeded(9000 + i)).pixels) for i, v in enumerate(vc)]
    return DatasetSplit.from_arrays(clean, noisy, vn, vc)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture(scope="session")
def small_split():
    return phantom_split()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# acceptance lines, printed once more at the end of the session
REPORT: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
