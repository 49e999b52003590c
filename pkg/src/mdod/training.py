"""RoI sampling, the two likelihood losses, and the optimisation loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from mdod import diffcore as dc
from mdod.diffcore import Tensor
from mdod.geometry import Box, iou_matrix
from mdod.mixture import LOG_2PI, LOG_PI, MixtureModel, sample_components, underflow_count
from mdod.network import Detector, HeadConfig, MixtureTensors

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "loss_moc", "loss_mm", "foreground_ratio", "underflow_cauchy", "underflow_gaussian"]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 2.0
    roi_multiplier: int = 3
    iou_threshold: float = 0.5
    distribution: str = "cauchy"
    learning_rate: float = 1e-2
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    head: HeadConfig = field(default_factory=HeadConfig)
    nms_threshold: float = 0.5
    score_threshold: float = 0.05
    pi_filter_threshold: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.0
    grad_clip: float = 10.0
    empty_scene_rois: int = 16
    checkpoint_every: int = 10
    abort_on_nonfinite: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("iou_threshold", "nms_threshold", "score_threshold", "pi_filter_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.distribution not in ("cauchy", "gaussian"):
            raise ValueError(f"distribution must be cauchy or gaussian, got {self.distribution!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.roi_multiplier < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("roi_multiplier and batch_size must be >= 1, epochs >= 0")


# -- RoI sampling --------------------------------------------------------------

@dataclass
class RoISet:
    boxes: np.ndarray        # (n, 4) ltrb copies of sampled component locations
    class_ids: np.ndarray    # (n,) class index, ``background`` for unmatched
    components: np.ndarray   # (n,) index of the sampled component
    background: int

    def __len__(self):
        return len(self.class_ids)

    @property
    def entries(self) -> list[tuple[Box, int, int]]:
        return [(Box(*b, class_id=int(c)), int(c), int(k))
                for b, c, k in zip(self.boxes, self.class_ids, self.components)]


def _gt_arrays(gts: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([g.ltrb for g in gts], dtype=np.float64).reshape(-1, 4)
    classes = np.array([-1 if g.class_id is None else g.class_id for g in gts], dtype=np.int64)
    return boxes, classes


def sample_rois(model: MixtureModel, gts: Sequence[Box], n: int, iou_threshold: float,
                rng: np.random.Generator) -> RoISet:
    """Draw ``n`` components by pi, copy their locations, and label by best-IoU ground truth.

    A candidate takes the class of its highest-IoU ground truth when that IoU
    is strictly above ``iou_threshold``; otherwise it is background.
    """
    if n < 1:
        raise ValueError("need at least one RoI")
    comps = sample_components(model.pi, n, rng)
    boxes = model.boxes_ltrb()[comps]
    labels = np.full(n, model.background, dtype=np.int64)
    if gts:
        gt_boxes, gt_classes = _gt_arrays(gts)
        ious = iou_matrix(boxes, gt_boxes)
        best = np.argmax(ious, axis=1)
        hit = ious[np.arange(n), best] > iou_threshold
        labels[hit] = gt_classes[best[hit]]
    return RoISet(boxes.copy(), labels, comps, model.background)


def foreground_ratio(rois: RoISet) -> float:
    if len(rois) == 0:
        raise ValueError("foreground ratio of an empty RoI set is undefined")
    return float(np.mean(rois.class_ids != rois.background))


# -- losses --------------------------------------------------------------------

def _as_tensors(model) -> MixtureTensors:
    return MixtureTensors.from_model(model) if isinstance(model, MixtureModel) else model


def _encode(boxes_ltrb: np.ndarray, box_format: str) -> np.ndarray:
    if box_format == "ltrb":
        return boxes_ltrb
    l, t, r, b = boxes_ltrb.T
    return np.stack([(l + r) / 2, (t + b) / 2, r - l, b - t], axis=1)


def component_logpdf(x: np.ndarray, mu: Tensor, scale: Tensor, distribution: str) -> Tensor:
    """``(N, K)`` joint coordinate log-densities of fixed boxes ``x`` (N, 4)."""
    d = mu.reshape((1,) + mu.shape) - x[:, None, :]
    s = scale.reshape((1,) + scale.shape)
    if distribution == "cauchy":
        per_coord = dc.log(s) - dc.log(d * d + s * s) - LOG_PI
    elif distribution == "gaussian":
        z = d / s
        per_coord = -0.5 * LOG_2PI - dc.log(s) - 0.5 * (z * z)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return per_coord.sum(axis=2)


def loss_moc(model: Union[MixtureTensors, MixtureModel], gts: Sequence[Box],
             distribution: str = "cauchy") -> Tensor:
    """Mean negative log-likelihood of the ground-truth coordinates (classes ignored)."""
    if not gts:
        raise ValueError("coordinate loss needs at least one ground-truth box")
    m = _as_tensors(model)
    x = _encode(_gt_arrays(gts)[0], m.box_format)
    comp = component_logpdf(x, m.mu, m.gamma, distribution)
    ll = dc.logsumexp(comp + m.log_pi.reshape(1, m.K), axis=1)
    return -ll.mean()


def loss_mm(model: Union[MixtureTensors, MixtureModel], rois: RoISet,
            distribution: str = "cauchy") -> Tensor:
    """Mean negative log-likelihood of the labelled RoIs under the full mixture.

    Locations, scales and mixing weights enter as constants; only the class
    probabilities receive gradient.
    """
    if len(rois) == 0:
        raise ValueError("class loss needs at least one RoI")
    m = _as_tensors(model)
    x = _encode(rois.boxes, m.box_format)
    coords = dc.stop_gradient(component_logpdf(x, m.mu, m.gamma, distribution)
                              + m.log_pi.reshape(1, m.K))
    cls_ll = m.log_p[np.arange(m.K)[None, :], rois.class_ids[:, None]]
    return -dc.logsumexp(coords + cls_ll, axis=1).mean()


def total_loss(l_moc: Optional[Tensor], l_mm: Tensor, alpha: float) -> Tensor:
    if l_moc is None:
        return l_mm * alpha
    return l_moc + l_mm * alpha


# -- optimisation ----------------------------------------------------------------

class NonFiniteLossError(RuntimeError):
    def __init__(self, scene_ids: Sequence[str], values: dict):
        self.scene_ids = list(scene_ids)
        self.values = values
        super().__init__(f"non-finite loss on scenes {self.scene_ids}: {values}")


class Optimizer:
    """SGD (optionally with momentum) or Adam, with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.state: dict[str, dict[str, np.ndarray]] = {k: {} for k in params}
        self.steps = 0

    def step(self) -> float:
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if self.config.grad_clip and norm > self.config.grad_clip:
            scale = self.config.grad_clip / norm
        self.steps += 1
        lr = self.config.learning_rate
        for k, t in self.params.items():
            g = grads[k] * scale
            st = self.state[k]
            if self.config.optimizer == "adam":
                b1, b2, eps = 0.9, 0.999, 1e-8
                st["m"] = b1 * st.get("m", 0.0) + (1 - b1) * g
                st["v"] = b2 * st.get("v", 0.0) + (1 - b2) * g * g
                mhat = st["m"] / (1 - b1 ** self.steps)
                vhat = st["v"] / (1 - b2 ** self.steps)
                t.data = t.data - lr * mhat / (np.sqrt(vhat) + eps)
            else:
                if self.config.momentum:
                    st["v"] = self.config.momentum * st.get("v", 0.0) + g
                    g = st["v"]
                t.data = t.data - lr * g
            t.grad = None
        return norm


@dataclass
class StepMetrics:
    loss: float
    loss_moc: float
    loss_mm: float
    n_moc: int
    n_mm: int
    foreground: int
    rois: int
    underflow_counts: dict[str, tuple[int, int]]
    grad_norm: float = float("nan")


def scene_losses(detector: Detector, scenes: Sequence, config: TrainConfig, rng: np.random.Generator,
                 with_underflow: bool = True, roi_sets: Sequence[RoISet] | None = None):
    """Forward a batch; returns (loss tensor, per-scene parts, roi sets, underflow counts).

    ``roi_sets`` replaces the sampling step with previously drawn RoIs.
    """
    fixed = roi_sets
    images = np.stack([s.image for s in scenes])
    batch = detector(images)
    total = None
    parts = []
    roi_sets = []
    under = {"cauchy": [0, 0], "gaussian": [0, 0]}
    for i, scene in enumerate(scenes):
        mt = batch.image(i)
        model = mt.to_model()
        gts = list(scene.annotations)
        if gts:
            l_moc = loss_moc(mt, gts, config.distribution)
            n = config.roi_multiplier * len(gts)
        else:
            l_moc = None
            n = config.empty_scene_rois
        rois = fixed[i] if fixed is not None else sample_rois(model, gts, n, config.iou_threshold, rng)
        l_mm = loss_mm(mt, rois, config.distribution)
        scene_loss = total_loss(l_moc, l_mm, config.alpha)
        total = scene_loss if total is None else total + scene_loss
        parts.append((scene.image_id, l_moc, l_mm))
        roi_sets.append(rois)
        if with_underflow and gts:
            for dist in under:
                zeros, pairs = underflow_count(gts, model, dist, "half")
                under[dist][0] += zeros
                under[dist][1] += pairs
    return total * (1.0 / len(scenes)), parts, roi_sets, under


def train_step(detector: Detector, scenes: Sequence, config: TrainConfig, rng: np.random.Generator,
               optimizer: Optimizer) -> StepMetrics:
    """One forward/backward/update over a batch of scenes."""
    loss, parts, roi_sets, under = scene_losses(detector, scenes, config, rng)
    if not np.isfinite(loss.item()):
        bad = [sid for sid, a, b in parts
               if (a is not None and not np.isfinite(a.item())) or not np.isfinite(b.item())]
        raise NonFiniteLossError(bad or [sid for sid, _, _ in parts], {"loss": loss.item()})
    dc.backward(loss)
    norm = optimizer.step()
    moc = [a.item() for _, a, _ in parts if a is not None]
    mm = [b.item() for _, _, b in parts]
    fg = sum(int(np.sum(r.class_ids != r.background)) for r in roi_sets)
    return StepMetrics(loss=loss.item(), loss_moc=float(np.sum(moc)), loss_mm=float(np.sum(mm)),
                       n_moc=len(moc), n_mm=len(mm), foreground=fg, rois=sum(len(r) for r in roi_sets),
                       underflow_counts={k: tuple(v) for k, v in under.items()}, grad_norm=norm)


@dataclass
class EpochDiagnostics:
    epoch: int
    loss_moc: float
    loss_mm: float
    foreground_ratio: float
    underflow_cauchy: float
    underflow_gaussian: float
    nonfinite_steps: int = 0

    def row(self) -> list:
        return [self.epoch, self.loss_moc, self.loss_mm, self.foreground_ratio,
                self.underflow_cauchy, self.underflow_gaussian]


def write_metrics_csv(path, history: Sequence[EpochDiagnostics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for d in history:
            writer.writerow([d.epoch] + [repr(float(v)) for v in d.row()[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def save_checkpoint(path, detector: Detector, epoch: int) -> None:
    state = detector.state_dict()
    state["meta.epoch"] = np.array([float(epoch)])
    dc.save_tensors(path, state)


def load_checkpoint(path, detector: Detector) -> int:
    """Load parameters in place; returns the stored epoch (0 if absent)."""
    state = dc.load_tensors(path)
    epoch = int(state.pop("meta.epoch", np.array([0.0]))[0])
    extra = set(state) - set(detector.params)
    if extra:
        raise dc.CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    detector.load_state_dict(state)
    return epoch


def train_loop(dataset: Sequence, config: TrainConfig, detector: Optional[Detector] = None,
               out_dir=None, on_epoch: Optional[Callable[[EpochDiagnostics], None]] = None
               ) -> tuple[Detector, list[EpochDiagnostics]]:
    """Train for ``config.epochs`` epochs; writes metrics and checkpoints when ``out_dir`` is given."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    detector = detector or Detector(config.head, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = Optimizer(detector.params, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[EpochDiagnostics] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        sums = dict(moc=0.0, n_moc=0, mm=0.0, n_mm=0, fg=0, rois=0, nonfinite=0)
        under = {"cauchy": [0, 0], "gaussian": [0, 0]}
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            try:
                m = train_step(detector, batch, config, rng, optimizer)
            except NonFiniteLossError as exc:
                if config.abort_on_nonfinite:
                    raise
                log.warning("skipping step: %s", exc)
                sums["nonfinite"] += 1
                continue
            sums["moc"] += m.loss_moc
            sums["n_moc"] += m.n_moc
            sums["mm"] += m.loss_mm
            sums["n_mm"] += m.n_mm
            sums["fg"] += m.foreground
            sums["rois"] += m.rois
            for k, (a, b) in m.underflow_counts.items():
                under[k][0] += a
                under[k][1] += b
        diag = EpochDiagnostics(
            epoch=epoch,
            loss_moc=sums["moc"] / max(sums["n_moc"], 1),
            loss_mm=sums["mm"] / max(sums["n_mm"], 1),
            foreground_ratio=sums["fg"] / max(sums["rois"], 1),
            underflow_cauchy=under["cauchy"][0] / max(under["cauchy"][1], 1),
            underflow_gaussian=under["gaussian"][0] / max(under["gaussian"][1], 1),
            nonfinite_steps=sums["nonfinite"],
        )
        history.append(diag)
        log.info("epoch %d: moc %.4f mm %.4f fg %.3f underflow c/g %.3f/%.3f", epoch, diag.loss_moc,
                 diag.loss_mm, diag.foreground_ratio, diag.underflow_cauchy, diag.underflow_gaussian)
        if on_epoch is not None:
            on_epoch(diag)
        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint-{epoch:04d}", detector, epoch)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", history)
        save_checkpoint(out / "checkpoint-final", detector, config.epochs)
    return detector, history


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
