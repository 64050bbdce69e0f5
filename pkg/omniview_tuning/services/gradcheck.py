"""Finite-difference verification of every hand-derived gradient."""
import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from omniview_tuning.services.linalg import GradCheckReport, Objective, finite_difference_check
from omniview_tuning.services.losses import ItcBatch, VcBatch, itc_loss, vc_loss
from omniview_tuning.services.model import EncoderConfig, init_model_state
from omniview_tuning.services.trainer import TrainConfig, TrainingBatch, batch_objective


logger = logging.getLogger(__name__)

CHECKS = ("itc", "vc", "composite")
GradientHook = Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]]


@dataclass(frozen=True)
class GradCheckRow:
    check: str
    configuration: int
    group: str
    relative_error: float
    passed: bool


@dataclass(frozen=True)
class GradCheckSuite:
    rows: tuple[GradCheckRow, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def max_relative_error(self) -> float:
        return max((row.relative_error for row in self.rows), default=0.0)

    def group_maxima(self) -> list[tuple[str, str, float]]:
        """(check, parameter group, max relative error over configurations)."""
        maxima: dict[tuple[str, str], float] = {}
        for row in self.rows:
            key = (row.check, row.group)
            maxima[key] = max(maxima.get(key, 0.0), row.relative_error)
        return [(check, group, error) for (check, group), error in maxima.items()]


def corrupt_gradients(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Negative control: scales every analytic gradient by 1.1."""
    return {name: 1.1 * value for name, value in grads.items()}


def run_gradient_suite(
    configurations: int = 20,
    seed: int = 0,
    tolerance: float = 1e-4,
    h: float = 1e-4,
    gradient_hook: GradientHook | None = None,
) -> GradCheckSuite:
    rows: list[GradCheckRow] = []
    for index in range(configurations):
        rng = np.random.default_rng([seed, index])
        for check, (objective, params) in (
            ("itc", _itc_case(rng)),
            ("vc", _vc_case(rng, index)),
            ("composite", _composite_case(rng, index)),
        ):
            report = finite_difference_check(_hooked(objective, gradient_hook), params, h)
            rows.extend(_rows(check, index, report, tolerance))

    suite = GradCheckSuite(rows=tuple(rows), tolerance=tolerance)
    for row in suite.rows:
        if not row.passed:
            logger.warning(
                "%s config %d: %s relative error %.3e", row.check, row.configuration, row.group, row.relative_error
            )
    return suite


def _rows(check: str, index: int, report: GradCheckReport, tolerance: float) -> list[GradCheckRow]:
    return [
        GradCheckRow(
            check=check,
            configuration=index,
            group=error.name,
            relative_error=error.relative_error,
            passed=error.relative_error < tolerance,
        )
        for error in report.errors
    ]


def _hooked(objective: Objective, hook: GradientHook | None) -> Objective:
    if hook is None:
        return objective

    def wrapped(params):
        value, grads = objective(params)
        return value, hook(dict(grads))

    return wrapped


def _itc_case(rng: np.random.Generator) -> tuple[Objective, dict]:
    n, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
    params = {
        "image": rng.normal(size=(n, d)),
        "text": rng.normal(size=(n, d)),
        "temperature": np.array(rng.uniform(0.1, 1.0)),
    }

    def objective(p: Mapping[str, np.ndarray]):
        result = itc_loss(ItcBatch(p["image"], p["text"], float(p["temperature"])))
        return result.loss, {
            "image": result.grad_image,
            "text": result.grad_text,
            "temperature": np.array(result.grad_temperature),
        }

    return objective, params


def _vc_case(rng: np.random.Generator, index: int) -> tuple[Objective, dict]:
    n, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
    anchors = rng.normal(size=(n, d))
    # hinge margin stays far from the kink for random directions
    mode, margin = ("hinge", 0.01) if index % 2 else ("additive", 0.1)

    def objective(p: Mapping[str, np.ndarray]):
        result = vc_loss(VcBatch(p["outliers"], anchors, margin, mode))
        return result.loss, {"outliers": result.grad_outliers}

    return objective, {"outliers": rng.normal(size=(n, d))}


def _composite_case(rng: np.random.Generator, index: int) -> tuple[Objective, dict]:
    """Full path: LoRA-adapted encoder, VIFormer, fusion, ITC + lam * VC."""
    d = int(rng.integers(4, 7))
    if index % 2:
        visual = EncoderConfig(input_dim=12, embed_dim=d, architecture="attention", token_count=3, token_dim=4)
    else:
        visual = EncoderConfig(input_dim=12, embed_dim=d)
    state = init_model_state(
        visual,
        lora_rank=2,
        alpha=float(rng.uniform(0.05, 0.95)),
        temperature=float(rng.uniform(0.2, 1.0)),
        train_temperature=True,
        seed=int(rng.integers(2**31)),
    )
    params = {}
    for name, value in state.trainable_parameters().items():
        if name == "log_temperature":
            params[name] = np.array(state.log_temperature)
        elif name.endswith("_gain"):
            params[name] = 1.0 + rng.normal(0.0, 0.1, size=value.shape)
        else:
            params[name] = rng.normal(0.0, 0.3, size=value.shape)

    n = int(rng.integers(2, 9))
    outliers = int(rng.integers(1, n + 1))
    batch = TrainingBatch(
        inputs=rng.normal(size=(n, visual.input_dim)),
        text_embeddings=rng.normal(size=(n, d)),
        outlier_rows=tuple(int(i) for i in rng.choice(n, size=outliers, replace=False)),
        anchors=rng.normal(size=(outliers, d)),
    )
    cfg = TrainConfig(lam=float(rng.uniform(0.5, 2.0)), margin=0.05, embed_dim=d, lora_rank=2)

    def objective(p: Mapping[str, np.ndarray]):
        result = batch_objective(state.with_trainable(p), batch, cfg)
        return result.loss, result.grads

    if not math.isfinite(objective(params)[0]):
        raise RuntimeError(f"composite configuration {index} is not finite at its start point")
    return objective, params
