"""Finite-difference verification harness for every op, the losses, and the
downsized end-to-end model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from cmunet.engine.gradcheck import ENGINE_CHECKS, OpCheck, finite_diff_gradient, run_check, uniform
from cmunet.engine.tensor import Tensor
from cmunet.losses import bce_loss, combined_loss, dice_loss
from cmunet.model import ModelConfig, build_model, forward

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
MODEL_EPS = 1e-6
# conv biases feeding train-mode BN have an exactly-zero true gradient
MODEL_GRAD_FLOOR = 1e-6


def _fixed_target(shape: tuple[int, ...]) -> Tensor:
    rng = np.random.default_rng(1234)
    return Tensor((rng.random(shape) < 0.4).astype(np.float64), dtype=np.float64)


_LOSS_SHAPE = (2, 1, 8, 8)

LOSS_CHECKS: dict[str, OpCheck] = {
    c.name: c
    for c in [
        OpCheck("bce_loss", lambda r: [uniform(r, _LOSS_SHAPE, -3, 3)],
                lambda z: bce_loss(z, _fixed_target(_LOSS_SHAPE))),
        OpCheck("dice_loss", lambda r: [uniform(r, _LOSS_SHAPE, 0.05, 0.95)],
                lambda p: dice_loss(p, _fixed_target(_LOSS_SHAPE))),
        OpCheck("combined_loss", lambda r: [uniform(r, _LOSS_SHAPE, -3, 3)],
                lambda z: combined_loss(z, _fixed_target(_LOSS_SHAPE))),
    ]
}

ALL_CHECKS: dict[str, OpCheck] = {**ENGINE_CHECKS, **LOSS_CHECKS}


@dataclass(frozen=True)
class CheckRow:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def model_gradcheck(seed: int = 0, eps: float = MODEL_EPS, per_tensor: int = 3, batch: int = 2,
                    config: ModelConfig | None = None) -> dict[str, float]:
    """Relative error per parameter tensor of the combined loss of a float64
    model, comparing autodiff with central differences on ``per_tensor``
    randomly chosen entries of every trainable tensor."""
    config = config or ModelConfig.small(32)
    model = build_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    size = config.input_size
    x = Tensor(rng.random((batch, config.in_channels, size, size)), dtype=np.float64)
    target = Tensor((rng.random((batch, 1, size, size)) < 0.3).astype(np.float64), dtype=np.float64)
    # snapshot running stats so every evaluation sees the same buffers
    buffers = {n: b.data.copy() for n, b in model.buffers.items()}

    def loss_value() -> Tensor:
        for n, b in model.buffers.items():
            b.data = buffers[n].copy()
        return combined_loss(forward(model, x, training=True), target)

    model.zero_grad()
    loss_value().backward()

    errors: dict[str, float] = {}
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        picks = rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)
        original = p.data

        def fn(t: Tensor) -> Tensor:
            p.data = t.data
            return loss_value()

        numeric = finite_diff_gradient(fn, Tensor(original, dtype=np.float64), eps, indices=picks)
        p.data = original
        flat_a, flat_n = analytic.reshape(-1), numeric.reshape(-1)
        scale = max(np.abs(flat_a).max(), MODEL_GRAD_FLOOR)
        errors[name] = float(np.abs(flat_a[picks] - flat_n[picks]).max() / scale)
    return errors


def run_gradcheck(selector: str = "all", eps: float = 1e-3, seed: int = 0,
                  checks: Mapping[str, OpCheck] | None = None) -> list[CheckRow]:
    """Rows for the selected op (or ``all`` / ``ops`` / ``model``)."""
    checks = ALL_CHECKS if checks is None else checks
    if selector in ("all", "ops"):
        names = list(checks)
    elif selector == "model":
        names = []
    elif selector in checks:
        names = [selector]
    else:
        raise KeyError(f"unknown gradcheck selector {selector!r}; choose from all, ops, model, {', '.join(checks)}")
    rows = [CheckRow(n, run_check(checks[n], seeds=range(seed, seed + 10), eps=eps), OP_TOLERANCE) for n in names]
    if selector in ("all", "model"):
        rows.append(CheckRow("model", max(model_gradcheck(seed=seed).values()), MODEL_TOLERANCE))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op'.ljust(width)}  max_rel_err  tolerance  status"]
    for r in rows:
        lines.append(f"{r.name.ljust(width)}  {r.error:11.3e}  {r.tolerance:9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
