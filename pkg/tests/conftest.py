import numpy as np
import pytest

from metavgan import genmodel as gm
from metavgan.datasets import SyntheticBenchSpec, make_synthetic
from metavgan.neural import make_rng


def tiny_config(**kw) -> gm.ModelConfig:
    base = dict(feature_dim=6, attr_dim=3, latent_dim=2, encoder_hidden=(5, 4), decoder_hidden=(5,),
                disc_hidden=(5, 4), dropout_rate=0.0)
    base.update(kw)
    return gm.ModelConfig(**base)


def jittered_model(cfg: gm.ModelConfig, seed: int) -> gm.ModelParams:
    """Random init with non-zero biases so no unit sits exactly on the relu kink."""
    rng = make_rng(seed, 99)
    p = gm.init_model(cfg, rng)
    for k, v in p.as_dict().items():
        setattr(p, k, v + 0.1 * rng.standard_normal(v.size))
    return p


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    return rng.standard_normal((4, 6)), rng.standard_normal((4, 3))


@pytest.fixture(scope="session")
def synthetic():
    return make_synthetic(SyntheticBenchSpec(seed=0))


def loss_grad_error(loss_fn, params: gm.ModelParams, key: str, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between a loss's analytic gradient and central differences.

    ``loss_fn(params, rng)`` is re-run with a fresh generator per probe so the
    noise it draws stays fixed.
    """
    from metavgan.neural import finite_diff_grad, max_relative_error

    analytic = loss_fn(params, make_rng(seed, 7)).grads[key]

    def f(theta):
        q = params.copy()
        setattr(q, key, theta)
        return loss_fn(q, make_rng(seed, 7)).value

    return max_relative_error(analytic, finite_diff_grad(f, getattr(params, key), h))


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; ``verdict(label, ok, detail)`` prints it and returns ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
