"""Three-stage single-image denoising.

Stage 1 trains the network on the two diagonal half-resolution views of the
noisy image to predict noise residuals, giving ``xbar = y - f(y)``.
Stage 2 freezes that network and, for each shuffle stride ``j``, denoises the
pixel-shuffled sub-images, reassembles them, and denoises the reassembled
image once more at full resolution; the results are averaged with ``xbar``.
Stage 3 fine-tunes the network to map the smooth blend back towards the
noisy input (direct image prediction), recovering foreground detail.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import model
from .model import DenoiserNet, init_net
from .noise import psnr
from .sampling import pair_downsample_t, pd_down, pd_up
from .tensor import AdamState, NonFiniteError, Tensor, adam_step, add, mse, sub

__all__ = [
    "DenoiseReport",
    "PipelineConfig",
    "PipelineError",
    "StageOutputs",
    "blend",
    "denoise",
    "detail_recover",
    "pd_estimate",
    "refine_pd",
    "residual_denoise",
    "stage1_loss",
    "stage3_loss",
    "train_stage1",
    "train_stage3",
]

log = logging.getLogger(__name__)

StepCallback = Callable[[int, float], None]


@dataclass
class PipelineConfig:
    iterations: int = 2000
    lr: float = 1e-3
    J: tuple[int, ...] = (2, 4)
    seed: int = 0
    channels: int | None = None
    # None: same count as stage 1
    stage3_iterations: int | None = None
    # "finetune" starts stage 3 from the stage-1 weights, "fresh" re-initialises
    stage3_init: str = "finetune"
    padding: str = "reflect"

    def __post_init__(self):
        self.J = tuple(sorted({int(j) for j in self.J}))

    @property
    def iterations_stage3(self) -> int:
        return self.iterations if self.stage3_iterations is None else self.stage3_iterations

    def validate(self, shape: tuple[int, ...] | None = None) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.stage3_iterations is not None and self.stage3_iterations < 1:
            raise ValueError(f"stage3_iterations must be >= 1, got {self.stage3_iterations}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.stage3_init not in ("finetune", "fresh"):
            raise ValueError(f"stage3_init must be 'finetune' or 'fresh', got {self.stage3_init!r}")
        if self.padding != "reflect":
            raise ValueError(f"only reflect padding is supported, got {self.padding!r}")
        if self.channels is not None and self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        for j in self.J:
            if j < 2:
                raise ValueError(f"shuffle stride must be >= 2, got {j}")
        if shape is not None:
            h, w = shape[:2]
            if min(h, w) < 3:
                raise ValueError(f"image must be at least 3x3, got {h}x{w}")
            for j in self.J:
                if j > min(h, w):
                    raise ValueError(f"shuffle stride {j} exceeds image size {h}x{w}")
            if self.channels is not None and len(shape) == 3 and shape[2] != self.channels:
                raise ValueError(f"config expects {self.channels} channels, image has {shape[2]}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["J"] = list(self.J)
        return d


@dataclass
class StageOutputs:
    xbar: np.ndarray
    refined: dict[int, np.ndarray]
    blend: np.ndarray
    final: np.ndarray
    # trained networks keyed "stage1" and "stage3"
    networks: dict[str, DenoiserNet] = field(default_factory=dict)


@dataclass
class DenoiseReport:
    config: dict
    height: int
    width: int
    channels: int
    seed: int
    timings: dict[str, float] = field(default_factory=dict)
    total_seconds: float = 0.0
    psnr: dict[str, float] = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"image: {self.height}x{self.width}x{self.channels}  seed: {self.seed}",
            "config: " + ", ".join(f"{k}={v}" for k, v in self.config.items()),
        ]
        for stage, sec in self.timings.items():
            lines.append(f"  {stage:<16s} {sec:9.3f} s")
        lines.append(f"  {'total':<16s} {self.total_seconds:9.3f} s")
        for name, val in self.psnr.items():
            lines.append(f"  psnr_{name:<11s} {val:9.3f} dB")
        if self.failed_stage:
            lines.append(f"FAILED in {self.failed_stage}: {self.error}")
        return "\n".join(lines)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, report: DenoiseReport, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.report = report


def _as_image(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[:, :, None]
    if y.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {y.shape}")
    return y


def _batch(img: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None], dtype=dtype))


def stage1_loss(net: DenoiserNet, y: Tensor, views: Tensor, views_swapped: Tensor) -> Tensor:
    """Residual loss plus consistency loss on the diagonal views of ``y``.

    ``views`` is ``[D1(y), D2(y)]`` stacked on the batch axis and
    ``views_swapped`` is ``[D2(y), D1(y)]``.
    """
    restored = sub(views, net(views))
    loss_res = mse(restored, views_swapped)
    full = sub(y, net(y))
    loss_cons = mse(restored, pair_downsample_t(full, swap=True))
    return add(loss_res, loss_cons)


def stage3_loss(net: DenoiserNet, blended_views: Tensor, target_views_swapped: Tensor, blended: Tensor) -> Tensor:
    """Direct-prediction residual and consistency losses for detail recovery."""
    pred = net(blended_views)
    loss_res = mse(pred, target_views_swapped)
    loss_cons = mse(pred, pair_downsample_t(net(blended), swap=True))
    return add(loss_res, loss_cons)


def _fit(net: DenoiserNet, loss_fn: Callable[[DenoiserNet], Tensor], iterations: int, lr: float,
         stage: str, on_step: StepCallback | None) -> DenoiserNet:
    params = net.parameters()
    state = AdamState.zeros_like([p.data for p in params], names=[n for n, _ in net.named_parameters()])
    for it in range(iterations):
        net.zero_grad()
        loss = loss_fn(net)
        value = loss.item()
        if not math.isfinite(value):
            norms = ", ".join(f"{n}={np.linalg.norm(p.data):.3g}" for n, p in net.named_parameters())
            raise NonFiniteError(f"{stage}: loss became {value} at iteration {it}; parameter norms {norms}")
        loss.backward()
        adam_step([p.data for p in params], [p.grad for p in params], state, lr)
        if on_step is not None:
            on_step(it, value)
        if it % 500 == 0:
            log.debug("%s iteration %d loss %.6g", stage, it, value)
    return net


def train_stage1(y: np.ndarray, cfg: PipelineConfig, on_step: StepCallback | None = None,
                 dtype=np.float32) -> DenoiserNet:
    """Fit the residual-noise network on a single noisy image."""
    y = _as_image(y)
    cfg.validate(y.shape)
    channels = cfg.channels or y.shape[2]
    net = init_net(channels, cfg.seed, dtype=dtype)
    yt = _batch(y, dtype)
    views = pair_downsample_t(yt)
    views_swapped = pair_downsample_t(yt, swap=True)
    return _fit(net, lambda n: stage1_loss(n, yt, views, views_swapped), cfg.iterations, cfg.lr, "stage1", on_step)


def residual_denoise(y: np.ndarray, net: DenoiserNet) -> np.ndarray:
    """``clamp(y - f(y))``."""
    y = _as_image(y)
    return np.clip(y - model.apply(net, y[None])[0], 0.0, 1.0)


def pd_estimate(y: np.ndarray, net: DenoiserNet, j: int) -> np.ndarray:
    """Denoise the stride-``j`` shuffled sub-images and reassemble them (unclamped)."""
    y = _as_image(y)
    subs, layout = pd_down(y, j)
    subs = np.asarray(subs, dtype=net.dtype)
    return pd_up(subs - model.apply(net, subs), layout)


def refine_pd(y: np.ndarray, net: DenoiserNet, j: int) -> np.ndarray:
    """Shuffle-domain estimate followed by a full-resolution residual pass, clamped."""
    coarse = pd_estimate(y, net, j)
    return np.clip(coarse - model.apply(net, coarse[None])[0], 0.0, 1.0)


def blend(xbar: np.ndarray, refined: Mapping[int, np.ndarray]) -> np.ndarray:
    """Arithmetic mean of ``xbar`` and every refined estimate."""
    acc = np.asarray(xbar, dtype=np.float64).copy()
    for j in sorted(refined):
        img = refined[j]
        if img.shape != xbar.shape:
            raise ValueError(f"refined estimate for j={j} has shape {img.shape}, expected {xbar.shape}")
        acc += img
    return (acc / (1 + len(refined))).astype(np.asarray(xbar).dtype)


def train_stage3(blended: np.ndarray, y: np.ndarray, cfg: PipelineConfig, net_init: DenoiserNet,
                 on_step: StepCallback | None = None) -> DenoiserNet:
    """Fine-tune the network to predict ``y``'s views from the blend's views."""
    blended = _as_image(blended)
    y = _as_image(y)
    if blended.shape != y.shape:
        raise ValueError(f"blend shape {blended.shape} differs from input shape {y.shape}")
    cfg.validate(y.shape)
    dtype = net_init.dtype
    if cfg.stage3_init == "finetune":
        net = net_init.copy()
    else:
        net = init_net(net_init.channels, cfg.seed + 1, dtype=dtype)
    bt = _batch(blended, dtype)
    blended_views = pair_downsample_t(bt)
    target_swapped = pair_downsample_t(_batch(y, dtype), swap=True)
    return _fit(net, lambda n: stage3_loss(n, blended_views, target_swapped, bt),
                cfg.iterations_stage3, cfg.lr, "stage3", on_step)


def detail_recover(blended: np.ndarray, net: DenoiserNet) -> np.ndarray:
    """``clamp(f*(blend))`` -- the final output."""
    blended = _as_image(blended)
    return np.clip(model.apply(net, blended[None])[0], 0.0, 1.0)


def denoise(y: np.ndarray, cfg: PipelineConfig | None = None, clean: np.ndarray | None = None,
            on_step: Callable[[str, int, float], None] | None = None):
    """Run all three stages on ``y``.

    Returns ``(final, StageOutputs, DenoiseReport)``.  When ``clean`` is
    given the report carries PSNR values for every stage.  Failures are
    re-raised as :class:`PipelineError` carrying the partial report.
    """
    cfg = cfg or PipelineConfig()
    y = _as_image(np.asarray(y, dtype=np.float32))
    h, w, c = y.shape
    report = DenoiseReport(config=cfg.as_dict(), height=h, width=w, channels=c, seed=cfg.seed)
    stage = "validate"
    start = time.perf_counter()

    def cb(name):
        if on_step is None:
            return None
        return lambda it, loss: on_step(name, it, loss)

    def timed(name, fn, *args):
        nonlocal stage
        stage = name
        t0 = time.perf_counter()
        out = fn(*args)
        report.timings[name] = time.perf_counter() - t0
        return out

    try:
        timed("validate", cfg.validate, y.shape)
        if clean is not None:
            clean = _as_image(clean)
            if clean.shape != y.shape:
                raise ValueError(f"ground truth shape {clean.shape} differs from input shape {y.shape}")
        net = timed("stage1_train", lambda: train_stage1(y, cfg, on_step=cb("stage1")))
        xbar = timed("stage1_denoise", residual_denoise, y, net)
        refined = {}
        for j in cfg.J:
            refined[j] = timed(f"stage2_refine_j{j}", refine_pd, y, net, j)
        mixed = timed("stage2_blend", blend, xbar, refined)
        net3 = timed("stage3_train", lambda: train_stage3(mixed, y, cfg, net, on_step=cb("stage3")))
        final = timed("stage3_recover", detail_recover, mixed, net3)
    except Exception as exc:
        report.total_seconds = time.perf_counter() - start
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        raise PipelineError(stage, report, exc) from exc
    report.total_seconds = time.perf_counter() - start

    outputs = StageOutputs(xbar=xbar, refined=refined, blend=mixed, final=final,
                           networks={"stage1": net, "stage3": net3})
    if clean is not None:
        report.psnr["noisy"] = psnr(y, clean)
        report.psnr["xbar"] = psnr(xbar, clean)
        for j, img in refined.items():
            report.psnr[f"refined_j{j}"] = psnr(img, clean)
        report.psnr["blend"] = psnr(mixed, clean)
        report.psnr["final"] = psnr(final, clean)
    return final, outputs, report
