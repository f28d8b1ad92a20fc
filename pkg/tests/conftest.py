"""Shared test helpers: finite-difference oracle, tiny model builders, and
the session-wide end-to-end effect run used by the acceptance criteria and
the teacher directional checks."""

import time

import numpy as np
import pytest

from dualdistill import pipeline, vit


def central_diff(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Independent gradient oracle: central finite differences, elementwise.

    ``f`` maps the array to a float and must not mutate its argument.
    """
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        fp = f(arr)
        arr[i] = orig - eps
        fm = f(arr)
        arr[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return grad


def assert_close_grads(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = 1e-4, atol: float = 1e-8) -> None:
    """Relative check with an absolute floor for near-zero entries."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= rtol * scale) | (diff <= atol)
    if not ok.all():
        worst = np.unravel_index(np.argmax(diff / np.maximum(scale, atol)), diff.shape)
        raise AssertionError(
            f"gradient mismatch at {worst}: analytic={analytic[worst]!r} "
            f"numeric={numeric[worst]!r} (max rel {np.max(diff / np.maximum(scale, atol)):.3e})")


def toy_config(**overrides) -> vit.ViTConfig:
    base = dict(image_size=8, patch_size=4, channels=1, depth=2, heads=2, dim=8,
                mlp_ratio=4)
    base.update(overrides)
    return vit.ViTConfig(**base)


def toy_images(n: int = 2, size: int = 8, seed: int = 0) -> np.ndarray:
    gen = np.random.default_rng(seed)
    return gen.integers(0, 256, (n, 1, size, size), dtype=np.uint8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def effect_result():
    """One desk-scale run: proxy teachers, then hybrid vs feature-only arms
    over three seeds. Takes on the order of twenty minutes; shared by the
    acceptance criteria and the teacher directional tests."""
    cfg = pipeline.EffectCheckConfig()
    t0 = time.time()
    result = pipeline.run_effect_check(cfg, seeds=(1, 2, 3),
                                       log=lambda m: print(f"  {m}", flush=True))
    result.runtime = time.time() - t0
    return result
