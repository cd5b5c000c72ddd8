import numpy as np
import pytest
import torch

from advunmix.data import write_idx
from advunmix.separator import ArchDescriptor

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """4x4 single-channel architecture used by the finite-difference checks."""
    return ArchDescriptor(4, 4, 1, base_channels=3)


@pytest.fixture
def toy_arch():
    return ArchDescriptor(8, 8, 1, base_channels=8)


def make_mnist_dir(path, n=60, seed=0, split="train"):
    """Write a fake IDX split: random digits with labels cycling 0..9."""
    r = np.random.default_rng(seed)
    images = r.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = np.arange(n, dtype=np.uint8) % 10
    stem = "train" if split == "train" else "t10k"
    path.mkdir(parents=True, exist_ok=True)
    write_idx(images, labels, path / f"{stem}-images-idx3-ubyte", path / f"{stem}-labels-idx1-ubyte")
    return images, labels


@pytest.fixture
def mnist_dir(tmp_path):
    d = tmp_path / "mnist"
    make_mnist_dir(d)
    return d


def constant_mask_model(arch, logit, dtype=torch.float32):
    """A MaskNet whose output is sigmoid(logit) everywhere, independent of the input."""
    from advunmix.separator import MaskNet

    model = MaskNet(arch).to(dtype)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.decoder[-1].bias.fill_(logit)
    return model


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
