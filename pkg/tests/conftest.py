import numpy as np
import pytest
from hypothesis import settings

from dualpath_vlm.abstractor import AbstractorConfig
from dualpath_vlm.lm import LMConfig
from dualpath_vlm.model import ModelConfig
from dualpath_vlm.vision import VisionConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, str] = {}


def small_config(variant: str = "dual_path", seed: int = 0) -> ModelConfig:
    """A shrunken model that keeps every code path (GQA, windows, both abstractor paths)."""
    vision = VisionConfig(patch_size=8, d_v=16, n_blocks=1, n_heads=2, mlp_ratio=2, image_size=16, seed=seed)
    abstractor = AbstractorConfig(d_v=16, d_q=16, d_lm=16, num_queries=3, qformer_blocks=1, qformer_heads=2,
                                  mlp_hidden=24, seed=seed)
    lm = LMConfig(d_lm=16, n_layers=2, n_heads=4, n_kv_heads=2, sliding_window=6, max_seq_len=96, seed=seed)
    return ModelConfig(vision, abstractor, lm, max_new_tokens=4).with_variant(variant)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
