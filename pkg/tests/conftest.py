import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dinolab.config import config_from_dict  # noqa: E402
from dinolab.synthetic import make_texture_dataset  # noqa: E402


def small_config(tmp_path=None, **sections):
    """A few-second configuration: d=32, 56 px images (4x4 token grid)."""
    d = {
        "encoder": {"weight_id": "toy:0", "depth": 12, "embed_dim": 32, "num_heads": 2, "patch_size": 14},
        "decoder": {"num_layers": 8},
        "scoring": {"z_percent": 1.0, "sigma": 4.0},
        "data": {"image_size": 56, "layout": "mvtec"},
        "train": {"total_iters": 30, "warmup_iters": 5, "batch_size": 4, "seed": 0, "log_every": 1},
    }
    if tmp_path is not None:
        d["train"]["out_dir"] = str(Path(tmp_path) / "run")
    for name, values in sections.items():
        d.setdefault(name, {}).update(values)
    return config_from_dict(d)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("textures")
    return make_texture_dataset(root, seed=3, size=56, n_train=8, n_test_good=3, n_test_defect=1)


# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.details = number, title, []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = "; ".join(self.details)
        if exc is not None:
            detail = f"{detail}; {exc_type.__name__}: {exc}".strip("; ")
        ACCEPTANCE[self.number] = (self.title, exc is None, detail)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
