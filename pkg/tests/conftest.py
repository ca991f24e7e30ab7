import numpy as np
import pytest

from cezsl.datamodel import SynthSpec, generate_synthetic


@pytest.fixture(scope="session")
def synth_ds():
    return generate_synthetic(SynthSpec(seed=0))


@pytest.fixture(scope="session")
def small_ds():
    # fast fixture for smoke runs: 3 seen, 2 unseen, tiny dimensions
    return generate_synthetic(SynthSpec(seen=3, unseen=2, visual_dim=6, prototype_dim=4,
                                        samples_per_class=12, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _grad_error(loss_fn, params, grads, h=1e-5):
    """Largest elementwise relative error between ``grads`` and central
    differences of ``loss_fn()`` taken over every entry of ``params``."""
    from cezsl.numkernel import finite_difference_grad, max_relative_error

    worst = 0.0
    for name, value in params.items():
        original = value.copy()

        def f(v, name=name):
            params[name] = v
            return loss_fn()

        num = finite_difference_grad(f, original, h)
        params[name] = original
        analytic = grads.get(name, np.zeros_like(original))
        worst = max(worst, max_relative_error(analytic, num))
    return worst


@pytest.fixture
def grad_error():
    return _grad_error


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    lines = request.config.stash[_ACCEPTANCE]

    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
