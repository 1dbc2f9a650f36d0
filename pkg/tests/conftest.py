import numpy as np
import pytest

from armkit.tensor import Tensor, parameter


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def loop_depthwise(x, kernels):
    """Nested-loop depthwise cross-correlation with zero "same" padding."""
    B, C, H, W = x.shape
    k = kernels.shape[-1]
    p = k // 2
    out = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            ker = kernels[b, c] if kernels.ndim == 4 else kernels[c]
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - p, j + v - p
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += x[b, c, ii, jj] * ker[u, v]
                    out[b, c, i, j] = acc
    return out


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe loss sum(out * weights) with fixed random weights."""
    return (out * Tensor(weights)).sum()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


__all__ = ["Tensor", "parameter", "loop_depthwise", "weighted_sum"]
