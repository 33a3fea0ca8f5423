import numpy as np
import pytest

from perceiver_ts import tensor as T
from perceiver_ts.model import ModelConfig, Forecaster, forward


def toy_config(**kw) -> ModelConfig:
    """C=2, N=4, M=2, D=D_L=8: the size used for end-to-end gradient checks."""
    base = dict(n_channels=2, lookback=4, horizon=4, patch_len=2, d_model=8, d_latent=8, n_latents=2,
                n_self_layers=1, n_heads=2)
    base.update(kw)
    return ModelConfig(**base).validate()


def randomize(model: Forecaster, rng: np.random.Generator, scale: float = 0.3) -> Forecaster:
    """Replace every parameter by N(0, scale^2) draws (layer-norm gains around 1)."""
    for name, t in model.params.tensors.items():
        base = 1.0 if name.rsplit(".", 1)[-1].endswith("_g") else 0.0
        t.data = base + scale * rng.normal(size=t.shape)
    return model


def pipeline_loss(model: Forecaster, windows, plans):
    pred, _ = forward(windows, plans, model.params, model.config)
    tgt = np.stack([w[:, np.concatenate([np.arange((j - 1) * model.config.patch_len, j * model.config.patch_len)
                                         for j in p.target_patches])] for w, p in zip(windows, plans)])
    return T.mse(pred, tgt)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
