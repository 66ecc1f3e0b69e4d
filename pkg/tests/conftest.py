import numpy as np
import pytest

from commscale import autodiff as ad

_ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--extended", action="store_true", default=False,
                     help="run long-budget training criteria")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--extended"):
        return
    skip = pytest.mark.skip(reason="needs --extended")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def report(label: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        return ok

    return report


def rel_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error with an absolute floor for identically-zero gradients."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(build_loss, arrays, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build_loss(tensors)`` receives one leaf Tensor per array (sharing memory)
    and returns a scalar Tensor.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(leaves)
    ad.backward(loss)
    numeric = ad.numerical_grad(lambda: build_loss([ad.Tensor(a) for a in arrays]).item(), arrays, step)
    errors = []
    for leaf, num in zip(leaves, numeric):
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errors.append(rel_error(g, num))
    return max(errors)
