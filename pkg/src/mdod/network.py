"""Toy feature pyramid and the mixture-parameter head.

Every spatial cell of every pyramid level is one mixture component. The head
emits four raw maps per level (location, scale, class logits, mixing logit);
decoding turns them into box locations in pixels, positive scales, class
probabilities and a mixing vector normalised jointly over all levels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from mdod import diffcore as dc
from mdod.diffcore import Tensor
from mdod.mixture import MixtureModel

GAMMA_FLOOR = 1e-4


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 3
    feature_width: int = 32
    levels: tuple[int, ...] = (3, 4, 5)
    use_ltrb: bool = True
    use_center_limit: bool = True
    use_level_scale: bool = True
    gamma_floor: float = GAMMA_FLOOR

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_width < 1:
            raise ValueError("num_classes and feature_width must be positive")
        levels = tuple(int(v) for v in self.levels)
        if list(levels) != list(range(levels[0], levels[0] + len(levels))) or levels[0] < 1:
            raise ValueError(f"levels must be consecutive positive integers, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2 ** lvl for lvl in self.levels)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["levels"] = list(self.levels)
        return out


# Table-2 style presets: each row drops one more component
ABLATIONS = {
    "full": {},
    "no-level-scale": {"use_level_scale": False},
    "no-center-limit": {"use_level_scale": False, "use_center_limit": False},
    "no-ltrb": {"use_ltrb": False},
}


def apply_ablation(config: HeadConfig, name: str) -> HeadConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(config, **ABLATIONS[name])


def level_scale(level: int, config: HeadConfig) -> float:
    return 2.0 ** (level - 5) if config.use_level_scale else 1.0


def center_offsets(height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel centres of the cells of an ``height x width`` map, each ``(height, width)``."""
    xs = (np.arange(width) + 0.5) * stride
    ys = (np.arange(height) + 0.5) * stride
    return np.broadcast_to(xs[None, :], (height, width)), np.broadcast_to(ys[:, None], (height, width))


@dataclass
class PyramidLevel:
    level: int
    stride: int
    features: Tensor


@dataclass
class RawOutputs:
    level: int
    stride: int
    o1: Tensor
    o2: Tensor
    o3: Tensor
    o4: Tensor


@dataclass
class ParameterMaps:
    level: int
    stride: int
    mu: Tensor
    gamma: Tensor
    log_p: Tensor
    pi_logit: Tensor

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.log_p.data)


@dataclass
class MixtureTensors:
    """Differentiable mixture parameters of one image: ``mu``/``gamma`` ``(K, 4)``,
    ``log_p`` ``(K, C+1)``, ``log_pi`` ``(K,)``."""

    mu: Tensor
    gamma: Tensor
    log_p: Tensor
    log_pi: Tensor
    box_format: str = "ltrb"

    @property
    def K(self) -> int:
        return self.log_pi.shape[0]

    def to_model(self) -> MixtureModel:
        return MixtureModel(mu=self.mu.data, gamma=self.gamma.data, p=np.exp(self.log_p.data),
                            pi=np.exp(self.log_pi.data), box_format=self.box_format,
                            log_pi=self.log_pi.data, log_p=self.log_p.data)

    @classmethod
    def from_model(cls, model: MixtureModel, requires_grad: bool = False) -> MixtureTensors:
        return cls(mu=Tensor(model.mu, requires_grad), gamma=Tensor(model.gamma, requires_grad),
                   log_p=Tensor(model.log_p, requires_grad), log_pi=Tensor(model.log_pi, requires_grad),
                   box_format=model.box_format)


@dataclass
class MixtureBatch:
    """Batched mixture parameters, leading axis = image."""

    mu: Tensor
    gamma: Tensor
    log_p: Tensor
    log_pi: Tensor
    box_format: str
    maps: list[ParameterMaps] = field(default_factory=list, repr=False)

    def __len__(self):
        return self.mu.shape[0]

    def image(self, i: int) -> MixtureTensors:
        return MixtureTensors(self.mu[i], self.gamma[i], self.log_p[i], self.log_pi[i], self.box_format)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Detector:
    """Parameters plus the forward pass. Parameters are plain leaf tensors in ``self.params``."""

    STEM_WIDTHS = (16, 24)

    def __init__(self, config: HeadConfig = HeadConfig(), seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        f = config.feature_width
        n_down = config.levels[-1]
        widths = [3]
        for i in range(n_down):
            widths.append(self.STEM_WIDTHS[i] if i < config.levels[0] - 1 and i < len(self.STEM_WIDTHS) else f)
        for i in range(n_down):
            self._conv(rng, f"backbone.down{i}", 3, widths[i], widths[i + 1])
        for lvl in config.levels:
            self._conv(rng, f"backbone.lateral{lvl}", 1, widths[lvl], f)
        self._conv(rng, "head.conv3x3", 3, f, f)
        self._conv(rng, "head.conv1x1", 1, f, f)
        self._conv(rng, "head.out_mu", 1, f, 4)
        self._conv(rng, "head.out_gamma", 1, f, 4)
        self._conv(rng, "head.out_cls", 1, f, config.num_classes + 1)
        self._conv(rng, "head.out_pi", 1, f, 1)
        # softplus(bias) = 1: initial scales start near one stride
        self.params["head.out_gamma.b"].data[:] = np.log(np.e - 1.0)

    def _conv(self, rng, name: str, k: int, cin: int, cout: int) -> None:
        self.params[f"{name}.w"] = Tensor(_he_uniform(rng, (k, k, cin, cout)), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def _apply(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return dc.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    # -- state ---------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise dc.CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != t.shape:
                raise dc.CheckpointError(f"parameter {k}: checkpoint shape {value.shape}, model shape {t.shape}")
            t.data = value.copy()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward ---------------------------------------------------------------
    def backbone_forward(self, images) -> list[PyramidLevel]:
        x = dc.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        largest = self.config.strides[-1]
        if x.shape[1] % largest or x.shape[2] % largest:
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} is not divisible by stride {largest}")
        taps = {}
        for i in range(self.config.levels[-1]):
            x = dc.swish(self._apply(f"backbone.down{i}", x, stride=2))
            if i + 1 in self.config.levels:
                taps[i + 1] = x
        merged = None
        out = []
        for lvl in reversed(self.config.levels):
            lat = self._apply(f"backbone.lateral{lvl}", taps[lvl])
            merged = lat if merged is None else lat + dc.upsample_nearest(merged)
            out.append(PyramidLevel(lvl, 2 ** lvl, merged))
        return out[::-1]

    def head_forward(self, pyramid: list[PyramidLevel]) -> list[RawOutputs]:
        out = []
        for lev in pyramid:
            h = dc.swish(self._apply("head.conv3x3", lev.features))
            h = dc.swish(self._apply("head.conv1x1", h))
            out.append(RawOutputs(lev.level, lev.stride,
                                  self._apply("head.out_mu", h), self._apply("head.out_gamma", h),
                                  self._apply("head.out_cls", h), self._apply("head.out_pi", h)))
        return out

    def decode(self, raw: list[RawOutputs]) -> list[ParameterMaps]:
        return [ParameterMaps(r.level, r.stride, decode_mu(r.o1, r.level, r.stride, self.config),
                              decode_gamma(r.o2, r.level, r.stride, self.config),
                              decode_p(r.o3), r.o4) for r in raw]

    def forward(self, images) -> MixtureBatch:
        maps = self.decode(self.head_forward(self.backbone_forward(images)))
        return flatten_to_mixture(maps, "ltrb" if self.config.use_ltrb else "xywh")

    __call__ = forward


def decode_mu(o1: Tensor, level: int, stride: int, config: HeadConfig) -> Tensor:
    """Raw ``(N, h, w, 4)`` location outputs to pixel boxes (ltrb or xywh)."""
    s = level_scale(level, config)
    o = o1 * s
    xbar, ybar = center_offsets(o.shape[1], o.shape[2], stride)
    dx, dy, dw, dh = (o[..., c] for c in range(4))
    if config.use_center_limit:
        cx = xbar + dc.tanh_act(dx) * float(stride)
        cy = ybar + dc.tanh_act(dy) * float(stride)
    else:
        cx = xbar + dx
        cy = ybar + dy
    w = dc.softplus_act(dw) * float(stride)
    h = dc.softplus_act(dh) * float(stride)
    if config.use_ltrb:
        parts = [cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5]
    else:
        parts = [cx, cy, w, h]
    return dc.concat([p.reshape(p.shape + (1,)) for p in parts], axis=-1)


def decode_gamma(o2: Tensor, level: int, stride: int, config: HeadConfig) -> Tensor:
    s = level_scale(level, config)
    return dc.clamp_min(dc.softplus_act(o2 * s) * float(stride), config.gamma_floor)


def decode_p(o3: Tensor) -> Tensor:
    """Log class probabilities, normalised over the channel axis."""
    return dc.log_softmax(o3, axis=-1)


def decode_pi(pi_logits: list[Tensor]) -> Tensor:
    """One softmax over every cell of every level: ``(N, K)`` log mixing weights."""
    flat = [t.reshape(t.shape[0], -1) for t in pi_logits]
    return dc.log_softmax(dc.concat(flat, axis=1), axis=1)


def flatten_to_mixture(maps: list[ParameterMaps], box_format: str = "ltrb",
                       log_pi: Optional[Tensor] = None) -> MixtureBatch:
    """Stack per-level maps into ``(N, K, ...)`` tensors, level-major then row-major."""
    n = maps[0].mu.shape[0]

    def stack(attr: str) -> Tensor:
        parts = [getattr(m, attr) for m in maps]
        return dc.concat([p.reshape(n, p.shape[1] * p.shape[2], p.shape[3]) for p in parts], axis=1)

    if log_pi is None:
        log_pi = decode_pi([m.pi_logit for m in maps])
    return MixtureBatch(stack("mu"), stack("gamma"), stack("log_p"), log_pi, box_format, maps)


def component_index(maps: list[ParameterMaps], level: int, i: int, j: int) -> int:
    """Flat component index of cell ``(i, j)`` at ``level``."""
    offset = 0
    for m in maps:
        h, w = m.mu.shape[1:3]
        if m.level == level:
            return offset + i * w + j
        offset += h * w
    raise KeyError(level)
