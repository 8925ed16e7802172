"""Teacher pretraining, joint training of the two branches, evaluation, ablation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffnum as dn
from . import losses as L
from . import networks as nw
from .config import ConfigError
from .event_repr import ReprKind, embed, input_channels
from .metrics import confusion_matrix, depth_metrics, scores_from_confusion
from .datasets import SimConfig, render_split
from .synth import NUM_CLASSES, Sample

log = logging.getLogger(__name__)

ARMS = ("CE", "CE+EIT", "CE+EIT+SC", "CE+EIT+FL", "FULL")
ARM_TERMS = {
    "CE": frozenset(),
    "CE+EIT": frozenset({"eit"}),
    "CE+EIT+SC": frozenset({"eit", "sc"}),
    "CE+EIT+FL": frozenset({"eit", "fl"}),
    "FULL": frozenset({"eit", "sc", "fl", "pl"}),
}
TASKS = ("segmentation", "depth")


class MissingTeacher(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "segmentation"
    representation: str = "multichannel"
    bins: int = 4
    window: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 5e-6
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    fl_stop_gradient: bool = False
    arm: str = "FULL"
    num_classes: int = NUM_CLASSES
    ignore_label: int = 255
    # teacher pretraining
    teacher_lr: float = 0.3
    teacher_epochs: int = 25
    teacher_batch_size: int = 2
    # synthetic data
    data_seed: int = 0
    train_seconds: float = 60.0
    test_seconds: float = 10.0
    clip_seconds: float = 0.5
    train_stride: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", "task")
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}", "arm")
        try:
            ReprKind(self.representation)
        except ValueError:
            raise ConfigError(f"unknown representation {self.representation!r}", "representation") from None
        for key in ("lambda1", "lambda2", "lambda3", "lambda4", "lr", "weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", key)
        for key in ("batch_size", "teacher_batch_size", "bins", "train_stride"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        if self.window <= 0:
            raise ConfigError("window must be positive", "window")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def arm_lambdas(self) -> tuple[float, float, float, float]:
        terms = ARM_TERMS[self.arm]
        return tuple(lam if name in terms else 0.0 for lam, name in zip(self.lambdas, ("eit", "sc", "fl", "pl")))

    @property
    def needs_teacher(self) -> bool:
        return bool(ARM_TERMS[self.arm] & {"sc", "pl"})

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.task == "segmentation" else 1

    @property
    def in_channels(self) -> int:
        return input_channels(self.representation, self.bins)

    def sim_config(self) -> SimConfig:
        return SimConfig(
            seed=self.data_seed,
            window=self.window,
            clip_seconds=self.clip_seconds,
            train_seconds=self.train_seconds,
            test_seconds=self.test_seconds,
        )


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ArrayDataset:
    inputs: np.ndarray  # N×C×H×W event tensors
    aps: np.ndarray  # N×1×H×W intensity frames in [-1, 1]
    labels: np.ndarray  # N×H×W class ids
    depth: np.ndarray  # N×H×W metres

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.inputs[idx], self.aps[idx], self.labels[idx], self.depth[idx])


def arrays_from_samples(samples: list[Sample], representation: str, bins: int) -> ArrayDataset:
    return ArrayDataset(
        inputs=np.stack([embed(s.window, representation, bins).data for s in samples]),
        aps=np.stack([s.frame.intensity for s in samples]),
        labels=np.stack([s.frame.labels for s in samples]),
        depth=np.stack([s.frame.depth for s in samples]),
    )


def build_samples(config: TrainConfig, split: str) -> list[Sample]:
    samples = render_split(config.sim_config(), split)
    if split == "train" and config.train_stride > 1:
        samples = samples[:: config.train_stride]
    return samples


def build_split(config: TrainConfig, split: str, samples: list[Sample] | None = None) -> ArrayDataset:
    samples = build_samples(config, split) if samples is None else samples
    return arrays_from_samples(samples, config.representation, config.bins)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def sgd_step(params: nw.Params, lr: float, weight_decay: float = 0.0) -> None:
    """w <- w - lr * (g + wd * w) for every trainable parameter, then clear grads."""
    for path, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise L.DivergenceError(f"non-finite gradient in {path}")
    for p in params.values():
        if not p.requires_grad or p.grad is None:
            continue
        p.data -= lr * (p.grad + weight_decay * p.data)
        p.grad = np.zeros_like(p.data)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init_ss, order_ss = ss.spawn(2)
    return int(init_ss.generate_state(1)[0]), np.random.default_rng(order_ss)


def _supervision(config: TrainConfig, out: nw.EELOutput, labels, depth) -> dn.Tensor:
    if config.task == "depth":
        return L.log_l1(out.depth.reshape(out.depth.shape[0], *out.depth.shape[2:]), depth)
    return L.cross_entropy(out.logits, labels, config.ignore_label)


@dataclass
class EvalReport:
    task: str
    arm: str
    seed: int
    metrics: dict
    history: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def predict(params: nw.Params, inputs: np.ndarray, task: str, batch_size: int = 16) -> np.ndarray:
    """End-task predictions from the encoder + end-task decoder only."""
    outs = []
    for start in range(0, len(inputs), batch_size):
        out = nw.eel_forward(params, dn.Tensor(inputs[start:start + batch_size]), task)
        if task == "depth":
            outs.append(out.depth.data[:, 0])
        else:
            outs.append(out.logits.data.argmax(axis=1))
    return np.concatenate(outs)


def evaluate(params: nw.Params, data: ArrayDataset, config: TrainConfig, inputs: np.ndarray | None = None) -> dict:
    pred = predict(params, data.inputs if inputs is None else inputs, config.task)
    if config.task == "depth":
        return depth_metrics(pred, data.depth).as_dict()
    scores = scores_from_confusion(confusion_matrix(pred, data.labels, config.num_classes, config.ignore_label))
    return {"miou": scores.miou, "accuracy": scores.accuracy, "per_class_iou": scores.per_class_iou}


def teacher_outputs(teacher: nw.Params, aps: np.ndarray, task: str, batch_size: int = 16) -> np.ndarray:
    outs = [
        nw.teacher_forward(teacher, dn.Tensor(aps[s:s + batch_size]), task).data
        for s in range(0, len(aps), batch_size)
    ]
    return np.concatenate(outs)


def train_teacher(config: TrainConfig, train: ArrayDataset, test: ArrayDataset | None = None):
    """Train the end-task network on clean intensity frames; returns (frozen params, report)."""
    start = time.perf_counter()
    init_seed, order_rng = _streams(config.seed)
    params = nw.init_params(nw.eel_manifest(1, config.out_channels), init_seed)
    history = []
    for epoch in range(config.teacher_epochs):
        for idx in _batches(len(train), config.teacher_batch_size, order_rng):
            out = nw.eel_forward(params, dn.Tensor(train.aps[idx]), config.task)
            loss = _supervision(config, out, train.labels[idx], train.depth[idx])
            if not np.isfinite(loss.item()):
                raise L.DivergenceError("teacher loss is not finite")
            dn.backward(loss)
            sgd_step(params, config.teacher_lr, config.weight_decay)
            history.append(loss.item())
        log.info("teacher epoch %d loss %.4f", epoch, np.mean(history[-10:]) if history else float("nan"))
    frozen = nw.freeze(params)
    metrics = evaluate(frozen, test, config, inputs=test.aps) if test is not None else {}
    report = EvalReport(config.task, "teacher", config.seed, metrics, history, time.perf_counter() - start)
    return frozen, report


def train_dtl(
    config: TrainConfig,
    train: ArrayDataset,
    test: ArrayDataset | None = None,
    teacher: nw.Params | None = None,
    teacher_on_aps: np.ndarray | None = None,
):
    """Joint training over the arm-masked objective; returns (params, report)."""
    if config.needs_teacher and teacher is None:
        raise MissingTeacher(f"arm {config.arm} needs a teacher network")
    if train.inputs.shape[1] != config.in_channels:
        raise ValueError(f"dataset has {train.inputs.shape[1]} channels, config expects {config.in_channels}")
    start = time.perf_counter()
    terms = ARM_TERMS[config.arm]
    lambdas = config.arm_lambdas
    task = config.task
    init_seed, order_rng = _streams(config.seed)
    params = nw.init_params(nw.model_manifest(config.in_channels, config.out_channels), init_seed)
    if teacher is not None:
        teacher = {k: dn.Tensor(v.data) for k, v in teacher.items()}  # never accumulates grads
    if config.needs_teacher and teacher_on_aps is None:
        teacher_on_aps = teacher_outputs(teacher, train.aps, task)

    history = []
    for _ in range(config.epochs):
        for idx in _batches(len(train), config.batch_size, order_rng):
            out = nw.eel_forward(params, dn.Tensor(train.inputs[idx]), task)
            ce = _supervision(config, out, train.labels[idx], train.depth[idx])
            eit = sc = fl = pl = 0.0
            if "eit" in terms:
                gen = nw.eit_decoder_forward(params, out.penultimate)
                eit = L.eit_reconstruction(gen.image, train.aps[idx])
                if "sc" in terms:
                    on_gen = nw.teacher_forward(teacher, gen.image, task)
                    sc = L.semantic_consistency(on_gen, teacher_on_aps[idx], task)
                if "fl" in terms:
                    fl = L.feature_transfer(
                        L.affinity_graph(gen.penultimate),
                        L.affinity_graph(out.penultimate),
                        stop_gradient=config.fl_stop_gradient,
                    )
            if "pl" in terms:
                pl = L.prediction_transfer(out.prediction, teacher_on_aps[idx], task)
            parts = L.total_loss(ce, eit, sc, fl, pl, lambdas)
            dn.backward(parts.tensor)
            sgd_step(params, config.lr, config.weight_decay)
            parts.tensor = None
            history.append(parts.as_dict())

    metrics = evaluate(params, test, config) if test is not None else {}
    report = EvalReport(task, config.arm, config.seed, metrics, history, time.perf_counter() - start)
    return params, report


def eel_params(params: nw.Params) -> nw.Params:
    """Drop the image-translation decoder; what remains is all inference needs."""
    return {k: v for k, v in params.items() if not k.startswith("eit.")}


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    arm: str
    seed: int
    miou: float
    accuracy: float


def run_ablation(
    config: TrainConfig,
    seeds,
    train: ArrayDataset,
    test: ArrayDataset,
    teacher: nw.Params,
    arms=ARMS,
):
    """Train every arm for every seed; returns (rows, per-arm mean MIoU, reports)."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    t_aps = teacher_outputs(teacher, train.aps, config.task)
    rows, reports = [], []
    for seed in seeds:
        for arm in arms:
            cfg = replace(config, arm=arm, seed=seed)
            _, report = train_dtl(cfg, train, test, teacher, teacher_on_aps=t_aps)
            rows.append(AblationRow(arm, seed, report.metrics["miou"], report.metrics["accuracy"]))
            reports.append(report)
            log.info("arm %-10s seed %d miou %.4f", arm, seed, report.metrics["miou"])
    means = {arm: float(np.mean([r.miou for r in rows if r.arm == arm])) for arm in arms}
    return rows, means, reports


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = ["arm,seed,miou,accuracy"]
    lines += [f"{r.arm},{r.seed},{r.miou:.6f},{r.accuracy:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
