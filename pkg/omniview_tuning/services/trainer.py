"""Alternating training loop: per-epoch anchor/outlier planning on frozen
snapshots, then mini-batch descent on the adapters, the VIFormer and
(optionally) the temperature. Base encoder weights never change here."""
import logging
import math
import time
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from omniview_tuning import config
from omniview_tuning.services.evaluation import (
    ClassBank,
    ModelTextEmbedder,
    build_class_bank,
    invariance_report,
    zero_shot_classify,
)
from omniview_tuning.services.exceptions import (
    ConfigError,
    DatasetError,
    DimensionError,
    FrozenWeightsModified,
    NonFiniteError,
)
from omniview_tuning.services.linalg import Matrix
from omniview_tuning.services.losses import (
    ItcBatch,
    MarginMode,
    VcBatch,
    itc_loss,
    total_loss,
    vc_loss,
)
from omniview_tuning.services.model import (
    Architecture,
    EncoderConfig,
    ModelState,
    encode_base,
    encode_base_vjp,
    encode_texts,
    featurize_captions,
    frozen_checksum,
    image_backward,
    image_forward,
    init_model_state,
    save_checkpoint,
)
from omniview_tuning.services.synthdata import DatasetSplits, MultiViewDataset
from omniview_tuning.services.viewpoints import (
    EpochPlan,
    ObjectEmbeddings,
    SamplingMode,
    plan_for_mode,
)


logger = logging.getLogger(__name__)

Params = dict[str, NDArray[np.float64]]

INVARIANCE_EPSILON = 0.1
_PRETRAIN_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    alpha: float = 0.1
    k: int = 5
    margin: float = 0.0
    margin_mode: MarginMode = "additive"
    lora_rank: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    sampling_mode: SamplingMode = "ovt"
    train_temperature: bool = False
    temperature: float = 0.07
    clean_mix_ratio: float = 0.5
    use_viformer: bool = True
    neighbors: int = config.NEAREST_NEIGHBORS
    embed_dim: int = 16
    architecture: Architecture = "linear"
    token_count: int = 0
    pretrain_epochs: int = 40
    pretrain_learning_rate: float = 0.5
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"train.lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"train.alpha must lie in [0, 1], got {self.alpha}")
        for name in ("k", "lora_rank", "batch_size", "neighbors", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "pretrain_epochs", "token_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0, got {getattr(self, name)}")
        if self.learning_rate < 0 or self.pretrain_learning_rate < 0:
            raise ConfigError("train learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.clean_mix_ratio <= 1.0:
            raise ConfigError(f"train.clean_mix_ratio must lie in [0, 1], got {self.clean_mix_ratio}")
        if self.temperature <= 0:
            raise ConfigError(f"train.temperature must be positive, got {self.temperature}")
        if self.margin_mode not in ("additive", "hinge"):
            raise ConfigError(f"unknown train.margin_mode {self.margin_mode!r}")
        if self.sampling_mode not in ("ovt", "ros", "raos"):
            raise ConfigError(f"unknown train.sampling_mode {self.sampling_mode!r}")
        if self.architecture not in ("linear", "attention"):
            raise ConfigError(f"unknown train.architecture {self.architecture!r}")

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        if self.architecture == "linear":
            return EncoderConfig(input_dim=input_dim, embed_dim=self.embed_dim)
        if self.token_count < 1 or input_dim % self.token_count:
            raise ConfigError(
                f"train.token_count={self.token_count} must divide input_dim {input_dim}"
            )
        return EncoderConfig(
            input_dim=input_dim,
            embed_dim=self.embed_dim,
            architecture="attention",
            token_count=self.token_count,
            token_dim=input_dim // self.token_count,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    itc_loss: float
    vc_loss: float
    total_loss: float
    mean_intra_object_distance: float
    outlier_mean_distance: float
    zero_shot_top1: float
    seconds: float


@dataclass(frozen=True)
class TrainLog:
    records: tuple[EpochRecord, ...]

    def __post_init__(self):
        epochs = [r.epoch for r in self.records]
        if epochs != sorted(set(epochs)):
            raise ConfigError("train log epochs must increase monotonically")

    @property
    def first(self) -> EpochRecord:
        return self.records[0]

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]

    def rows(self, record_wall_time: bool = False) -> list[dict]:
        rows = []
        for record in self.records:
            row = asdict(record)
            if not record_wall_time:
                row["seconds"] = None
            rows.append(row)
        return rows


@dataclass(frozen=True)
class TrainingData:
    """Dataset arrays computed once per fit; text embeddings are frozen."""

    multiview_inputs: Matrix
    multiview_text: Matrix
    object_rows: dict[int, list[int]]
    view_ids: dict[int, tuple[int, ...]]
    clean_inputs: Matrix
    clean_text: Matrix
    holdout_inputs: Matrix
    holdout_labels: tuple[str, ...]
    bank: ClassBank

    @property
    def has_clean(self) -> bool:
        return self.clean_inputs.shape[0] > 0


@dataclass(frozen=True)
class TrainingBatch:
    inputs: Matrix
    text_embeddings: Matrix
    outlier_rows: tuple[int, ...]
    anchors: Matrix


@dataclass(frozen=True)
class BatchObjective:
    loss: float
    itc: float
    vc: float
    grads: Params


@dataclass(frozen=True)
class EpochOutcome:
    state: ModelState
    record: EpochRecord
    plan: EpochPlan


@dataclass(frozen=True)
class FitResult:
    state: ModelState
    log: TrainLog


class Momentum:
    def __init__(self, coefficient: float):
        self.coefficient = coefficient
        self._velocity: Params = {}

    def __call__(self, grads: Mapping[str, NDArray[np.float64]]) -> Params:
        for name, grad in grads.items():
            previous = self._velocity.get(name)
            self._velocity[name] = grad if previous is None else self.coefficient * previous + grad
        return dict(self._velocity)


def build_model(cfg: TrainConfig, input_dim: int) -> ModelState:
    return init_model_state(
        cfg.encoder_config(input_dim),
        lora_rank=cfg.lora_rank,
        alpha=cfg.alpha,
        temperature=cfg.temperature,
        train_temperature=cfg.train_temperature,
        use_viformer=cfg.use_viformer,
        seed=cfg.seed,
    )


def sgd_step(
    params: Mapping[str, NDArray[np.float64]],
    grads: Mapping[str, NDArray[np.float64]],
    learning_rate: float,
) -> Params:
    """p <- p - eta * g for every parameter; missing gradients count as zero."""
    if learning_rate < 0:
        raise ConfigError(f"learning rate must be >= 0, got {learning_rate}")
    updated: Params = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        if name not in grads:
            updated[name] = value
            continue
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"gradient for {name} contains NaN or Inf")
        updated[name] = value - learning_rate * grad
    return updated


def prepare_training_data(
    state: ModelState,
    multiview: MultiViewDataset,
    clean: MultiViewDataset,
    holdout: MultiViewDataset | None = None,
) -> TrainingData:
    if len(multiview) == 0:
        raise DatasetError("multi-view training set is empty")
    for name, dataset in (("multi-view", multiview), ("clean", clean), ("held-out", holdout)):
        if dataset is not None and len(dataset) and dataset.input_dim != state.visual.input_dim:
            raise DatasetError(
                f"{name} inputs have dim {dataset.input_dim}, "
                f"model expects {state.visual.input_dim}"
            )

    # zero-shot is scored on clean (non-hard) views only
    source = holdout if holdout is not None and len(holdout) else clean if len(clean) else multiview
    scored = [r for r in source.records if not r.is_hard_view] or list(source.records)
    labels = sorted(
        {r.category for d in (multiview, clean, source) for r in d.records}
    )
    object_rows = multiview.object_rows()
    empty = np.empty((0, state.visual.embed_dim))
    return TrainingData(
        multiview_inputs=multiview.inputs(),
        multiview_text=encode_texts(multiview.captions(), state),
        object_rows=object_rows,
        view_ids={
            object_id: tuple(multiview.records[i].view_id for i in rows)
            for object_id, rows in object_rows.items()
        },
        clean_inputs=clean.inputs() if len(clean) else np.empty((0, state.visual.input_dim)),
        clean_text=encode_texts(clean.captions(), state) if len(clean) else empty,
        holdout_inputs=np.stack([r.x for r in scored]),
        holdout_labels=tuple(r.category for r in scored),
        bank=build_class_bank(labels, ModelTextEmbedder(state)),
    )


def batch_objective(state: ModelState, batch: TrainingBatch, cfg: TrainConfig) -> BatchObjective:
    """ITC plus lam-weighted VC on one batch, with gradients of the trainable parameters."""
    forward = image_forward(state, batch.inputs)
    itc = itc_loss(ItcBatch(forward.fused, batch.text_embeddings, state.temperature))
    outlier_rows = list(batch.outlier_rows)
    vc = vc_loss(VcBatch(forward.fused[outlier_rows], batch.anchors, cfg.margin, cfg.margin_mode))

    grad = itc.grad_image.copy()
    if outlier_rows:
        np.add.at(grad, outlier_rows, cfg.lam * vc.grad_outliers)
    grads = image_backward(state, forward, grad)
    if state.train_temperature:
        grads["log_temperature"] = np.array(_log_temperature_grad(state, itc.grad_temperature))
    return BatchObjective(
        loss=total_loss(itc.loss, vc.loss, cfg.lam), itc=itc.loss, vc=vc.loss, grads=grads
    )


def plan_epoch(
    state: ModelState,
    data: TrainingData,
    cfg: TrainConfig,
    rng: np.random.Generator,
    threads: int = config.OVT_THREADS,
) -> EpochPlan:
    """Maximization step on a fresh embedding snapshot of every multi-view sample."""
    embeddings = image_forward(state, data.multiview_inputs).fused
    objects = [
        ObjectEmbeddings(object_id, embeddings[rows], data.view_ids[object_id])
        for object_id, rows in data.object_rows.items()
    ]
    return plan_for_mode(
        objects, cfg.k, cfg.sampling_mode, rng, neighbors=cfg.neighbors, threads=threads
    )


def iterate_batches(
    data: TrainingData,
    plan: EpochPlan,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Iterator[TrainingBatch]:
    """Shuffled mixed batches; the clean share is drawn cyclically from the clean set."""
    anchor_for_row = {
        data.object_rows[object_id][index]: plan.anchors[object_id]
        for object_id, selection in plan.outliers.items()
        for index in selection.indices
    }
    clean_count = round(cfg.batch_size * cfg.clean_mix_ratio) if data.has_clean else 0
    multiview_count = cfg.batch_size - clean_count

    if multiview_count == 0:
        clean_order = rng.permutation(data.clean_inputs.shape[0])
        for start in range(0, len(clean_order), cfg.batch_size):
            rows = clean_order[start : start + cfg.batch_size]
            yield _assemble(data, np.empty(0, dtype=int), rows, anchor_for_row)
        return

    multiview_order = rng.permutation(data.multiview_inputs.shape[0])
    clean_order = rng.permutation(data.clean_inputs.shape[0]) if clean_count else np.empty(0, dtype=int)
    cursor = 0
    for start in range(0, len(multiview_order), multiview_count):
        multiview_rows = multiview_order[start : start + multiview_count]
        clean_rows = np.empty(0, dtype=int)
        if clean_count:
            positions = np.arange(cursor, cursor + clean_count) % len(clean_order)
            clean_rows = clean_order[positions]
            cursor = (cursor + clean_count) % len(clean_order)
        yield _assemble(data, multiview_rows, clean_rows, anchor_for_row)


def run_epoch(
    state: ModelState,
    data: TrainingData,
    cfg: TrainConfig,
    *,
    epoch: int,
    rng: np.random.Generator,
    momentum: Momentum | None = None,
    update: bool = True,
) -> EpochOutcome:
    started = time.perf_counter()
    plan = plan_epoch(state, data, cfg, rng)

    itc_values, vc_values, totals = [], [], []
    for index, batch in enumerate(iterate_batches(data, plan, cfg, rng)):
        objective = batch_objective(state, batch, cfg)
        if not math.isfinite(objective.loss):
            raise NonFiniteError(
                f"loss is {objective.loss} in epoch {epoch}, batch {index} "
                f"({batch.inputs.shape[0]} samples, {len(batch.outlier_rows)} outliers)"
            )
        itc_values.append(objective.itc)
        vc_values.append(objective.vc)
        totals.append(objective.loss)
        if update:
            grads = momentum(objective.grads) if momentum is not None else objective.grads
            state = state.with_trainable(
                sgd_step(state.trainable_parameters(), grads, cfg.learning_rate)
            )

    record = EpochRecord(
        epoch=epoch,
        itc_loss=float(np.mean(itc_values)),
        vc_loss=float(np.mean(vc_values)),
        total_loss=float(np.mean(totals)),
        mean_intra_object_distance=_mean_intra_object_distance(state, data),
        outlier_mean_distance=plan.mean_outlier_distance(),
        zero_shot_top1=_zero_shot_top1(state, data),
        seconds=time.perf_counter() - started,
    )
    return EpochOutcome(state=state, record=record, plan=plan)


def fit(
    state: ModelState,
    multiview: MultiViewDataset,
    clean: MultiViewDataset,
    cfg: TrainConfig,
    *,
    holdout: MultiViewDataset | None = None,
    checkpoint_path: Path | None = None,
) -> FitResult:
    """Epoch 0 is an evaluation pass of the initial state; epochs 1..E train."""
    if cfg.epochs < 1:
        raise ConfigError(f"train.epochs must be >= 1, got {cfg.epochs}")
    data = prepare_training_data(state, multiview, clean, holdout)
    checksum = frozen_checksum(state)
    rng = np.random.default_rng(cfg.seed)
    momentum = Momentum(cfg.momentum) if cfg.momentum else None

    records = [run_epoch(state, data, cfg, epoch=0, rng=rng, update=False).record]
    _log_record(records[0], cfg.epochs)
    for epoch in range(1, cfg.epochs + 1):
        outcome = run_epoch(state, data, cfg, epoch=epoch, rng=rng, momentum=momentum)
        state = outcome.state
        records.append(outcome.record)
        _log_record(outcome.record, cfg.epochs)

    if frozen_checksum(state) != checksum:
        raise FrozenWeightsModified("frozen encoder weights changed during training")
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return FitResult(state=state, log=TrainLog(tuple(records)))


def pretrain(state: ModelState, clean: MultiViewDataset, cfg: TrainConfig) -> ModelState:
    """Contrastive pretraining of the base encoders on the clean pairs.

    Stands in for a pretrained checkpoint: the weights it produces are the
    frozen weights of the subsequent fine-tuning."""
    if cfg.pretrain_epochs == 0 or len(clean) == 0:
        return state
    if clean.input_dim != state.visual.input_dim:
        raise DatasetError(
            f"clean inputs have dim {clean.input_dim}, model expects {state.visual.input_dim}"
        )
    inputs = clean.inputs()
    features = featurize_captions(clean.captions(), state.text.input_dim)
    rng = np.random.default_rng([cfg.seed, _PRETRAIN_STREAM])
    params: Params = {f"visual.{n}": w for n, w in state.visual_weights.items()}
    params["text.weight"] = state.text_weight

    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        order = rng.permutation(inputs.shape[0])
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            visual = {n: params[f"visual.{n}"] for n in state.visual_weights}
            image, cache = encode_base(visual, state.visual, inputs[rows])
            text = features[rows] @ params["text.weight"].T
            itc = itc_loss(ItcBatch(image, text, state.temperature))
            if not math.isfinite(itc.loss):
                raise NonFiniteError(f"pretraining loss is {itc.loss} in epoch {epoch}")
            grads = {
                f"visual.{n}": g for n, g in encode_base_vjp(state.visual, cache, itc.grad_image).items()
            }
            grads["text.weight"] = itc.grad_text.T @ features[rows]
            params = sgd_step(params, grads, cfg.pretrain_learning_rate)
            losses.append(itc.loss)
        logger.info("pretrain epoch %d/%d: itc %.4f", epoch, cfg.pretrain_epochs, np.mean(losses))

    return state.with_base_weights(
        {n: params[f"visual.{n}"] for n in state.visual_weights}, params["text.weight"]
    )


def train_from_scratch(
    cfg: TrainConfig, splits: DatasetSplits, checkpoint_path: Path | None = None
) -> FitResult:
    """Fresh model, contrastive pretraining on the clean set, then fit."""
    state = pretrain(build_model(cfg, splits.multiview.input_dim), splits.clean, cfg)
    return fit(
        state,
        splits.multiview,
        splits.clean,
        cfg,
        holdout=splits.holdout,
        checkpoint_path=checkpoint_path,
    )


def final_summary(log: TrainLog) -> dict[str, float]:
    last = asdict(log.last)
    return {column: last[column] for column in config.SUMMARY_COLUMNS}


def _assemble(
    data: TrainingData,
    multiview_rows: Sequence[int],
    clean_rows: Sequence[int],
    anchor_for_row: Mapping[int, NDArray[np.float64]],
) -> TrainingBatch:
    outlier_rows = tuple(p for p, row in enumerate(multiview_rows) if int(row) in anchor_for_row)
    anchors = [anchor_for_row[int(multiview_rows[p])] for p in outlier_rows]
    return TrainingBatch(
        inputs=np.vstack([data.multiview_inputs[multiview_rows], data.clean_inputs[clean_rows]]),
        text_embeddings=np.vstack([data.multiview_text[multiview_rows], data.clean_text[clean_rows]]),
        outlier_rows=outlier_rows,
        anchors=np.stack(anchors) if anchors else np.empty((0, data.multiview_text.shape[1])),
    )


def _log_temperature_grad(state: ModelState, grad_temperature: float) -> float:
    low, high = config.TEMPERATURE_BOUNDS
    tau = math.exp(state.log_temperature)
    if not low <= tau <= high:
        return 0.0
    return grad_temperature * tau


def _mean_intra_object_distance(state: ModelState, data: TrainingData) -> float:
    embeddings = image_forward(state, data.multiview_inputs).fused
    groups = [embeddings[rows] for rows in data.object_rows.values()]
    return invariance_report(groups, INVARIANCE_EPSILON).mean_max_distance


def _zero_shot_top1(state: ModelState, data: TrainingData) -> float:
    embeddings = image_forward(state, data.holdout_inputs).fused
    return zero_shot_classify(
        embeddings, data.bank, data.holdout_labels, k=1, temperature=state.temperature
    ).top1


def _log_record(record: EpochRecord, epochs: int) -> None:
    logger.info(
        "epoch %d/%d: itc %.4f, vc %.4f, intra-object %.4f, zero-shot %.3f",
        record.epoch,
        epochs,
        record.itc_loss,
        record.vc_loss,
        record.mean_intra_object_distance,
        record.zero_shot_top1,
    )
