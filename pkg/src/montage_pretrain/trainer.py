"""Pre-training loop, learning-rate schedule, evaluation and config files."""
from __future__ import annotations

import configparser
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .erf import erf_grid, region_masks
from .montage import MontageTemplate, PatchSource, batch_stream, make_template, stack_batch
from .network import (Architecture, FeatureGeometry, NetworkParams, build_graph, init_params,
                      save_checkpoint, sgd_step)
from .objective import (OBJECTIVE_ALIASES, OBJECTIVES, SoftLabelField, hard_label_field, home_regions,
                        objective_loss, region_pool_weights, soft_label_field)
from .sampling import SampleSet

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "lr", "loss", "L1", "L2", "L3", "L4")
FULL_BATCH = 512
FULL_LR_START, FULL_LR_PEAK = 0.2, 0.8


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Every knob of a pre-training run. Defaults are the desk-scale profile."""

    total_iters: int = 2000
    warmup_iters: int = 40
    lr_start: float | None = None  # None: full-scale value scaled by batch / 512
    lr_peak: float | None = None
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_assembled: int = 8
    refresh_interval: int = 200
    tau: float = 0.7
    objective: str = "erf_adaptive"
    seed: int = 0
    canvas_w: int = 96
    canvas_h: int = 96
    split_x: int = 24
    split_y: int = 24
    channels: tuple[int, ...] = (16, 32, 64)
    erf_stride: int = 1
    erf_mode: str = "abs"
    adjust_mode: str = "padcrop"
    relax_groups: bool = False
    replacement: bool = False
    jobs: int = 1

    def __post_init__(self):
        self.objective = OBJECTIVE_ALIASES.get(self.objective, self.objective)
        self.channels = tuple(int(c) for c in self.channels)
        scale = self.batch_assembled / FULL_BATCH
        if self.lr_start is None:
            self.lr_start = FULL_LR_START * scale
        if self.lr_peak is None:
            self.lr_peak = FULL_LR_PEAK * scale

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        base = dict(total_iters=64000, warmup_iters=1250, lr_start=0.2, lr_peak=0.8, batch_assembled=512,
                    refresh_interval=5000, canvas_w=224, canvas_h=224, split_x=64, split_y=64,
                    channels=(16, 32, 64, 64))
        return cls(**{**base, **overrides})

    def validate(self) -> "TrainConfig":
        problems = []
        if self.total_iters < 0:
            problems.append("total_iters must be >= 0")
        # total_iters = 0 is the "write the initialization" run, exempt from the warmup bound
        if self.warmup_iters < 0 or (self.total_iters > 0 and self.warmup_iters >= self.total_iters):
            problems.append(f"warmup_iters ({self.warmup_iters}) must be >= 0 and below total_iters "
                            f"({self.total_iters}); pass a smaller warmup for short runs")
        if not self.lr_start <= self.lr_peak:
            problems.append("lr_start must not exceed lr_peak")
        if self.refresh_interval < 1:
            problems.append("refresh_interval must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            problems.append("tau must lie in [0, 1]")
        if self.objective not in OBJECTIVES:
            problems.append(f"objective must be one of {OBJECTIVES}")
        if self.batch_assembled < 1:
            problems.append("batch_assembled must be >= 1")
        if self.erf_stride < 1:
            problems.append("erf_stride must be >= 1")
        try:
            self.template()
        except ValueError as e:
            problems.append(str(e))
        if not problems:
            try:
                FeatureGeometry.for_input(self.architecture(5), self.canvas_h, self.canvas_w)
            except ValueError as e:
                problems.append(str(e))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def template(self) -> MontageTemplate:
        return make_template(self.canvas_w, self.canvas_h, self.split_x, self.split_y)

    def architecture(self, num_classes: int) -> Architecture:
        return Architecture(num_classes=num_classes, channels=self.channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d


def _coerce(name: str, raw: str, ftype):
    raw = raw.strip()
    if ftype in ("int",):
        return int(raw)
    if ftype in ("float", "float | None"):
        return None if raw.lower() in ("", "none", "auto") else float(raw)
    if ftype == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if ftype.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines (``#`` comments) into TrainConfig keyword arguments.

    ``canvas`` accepts ``96`` or ``96x80`` and sets canvas_w/canvas_h;
    ``template`` accepts ``WxH:SX,SY``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"config file: {e}") from None
    types = {f.name: str(f.type) for f in dataclasses.fields(TrainConfig)}
    out: dict = {}
    for key, raw in cp["config"].items():
        key = key.strip().replace("-", "_")
        try:
            if key == "canvas":
                w, _, h = raw.strip().lower().partition("x")
                out["canvas_w"], out["canvas_h"] = int(w), int(h or w)
            elif key == "template":
                size, split = raw.strip().split(":")
                w, h = size.lower().split("x")
                sx, sy = split.split(",")
                out.update(canvas_w=int(w), canvas_h=int(h), split_x=int(sx), split_y=int(sy))
            elif key in types:
                out[key] = _coerce(key, raw, types[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return out


def load_config(path: str | Path | None = None, profile: str = "desk", **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    factory = TrainConfig.full if profile == "full" else TrainConfig.desk
    try:
        return factory(**values).validate()
    except TypeError as e:
        raise ConfigError(str(e)) from None


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then cosine decay to 0 at total_iters."""
    warm, total = config.warmup_iters, config.total_iters
    if iteration < warm:
        return config.lr_start + (config.lr_peak - config.lr_start) * iteration / warm
    if total == warm:
        return config.lr_peak
    progress = (iteration - warm) / (total - warm)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    params: NetworkParams
    init_params: NetworkParams
    metrics: list[tuple]
    refreshes: list[int] = field(default_factory=list)
    label_field: SoftLabelField | None = None
    checkpoints: list[Path] = field(default_factory=list)


def format_metric(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path: str | Path, rows: Iterable[tuple]) -> None:
    lines = [",".join(METRICS_HEADER)]
    lines += [",".join(format_metric(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path: str | Path) -> np.ndarray:
    return np.genfromtxt(path, delimiter=",", names=True)


def train(config: TrainConfig, samples: SampleSet, source: Callable | None = None,
          out_dir: str | Path | None = None,
          on_step: Callable[[int, SoftLabelField | None, object], None] | None = None,
          params: NetworkParams | None = None) -> TrainResult:
    """Run ``config.total_iters`` SGD steps of Montage pre-training.

    The soft-label field (ERF objective) is rebuilt at every multiple of
    ``refresh_interval`` from the current parameters, on the first assembled
    image of that step's batch; at iteration 0 that means the random init.
    Checkpoints go to ``out_dir`` at every refresh boundary and at the end.
    """
    config.validate()
    source = source or PatchSource()
    template = config.template()
    arch = config.architecture(samples.num_classes)
    geo = FeatureGeometry.for_input(arch, config.canvas_h, config.canvas_w)
    masks = region_masks(template, config.canvas_h, config.canvas_w)
    params = params or init_params(arch, config.seed)
    start = params
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult(params, start, [])
    field_ = hard_label_field(template, geo) if config.objective == "blockwise" else None

    def checkpoint(it: int, final: bool = False):
        if out is None:
            return
        path = out / ("final.ckpt" if final else f"iter-{it:06d}.ckpt")
        save_checkpoint(path, params, {"iteration": it, "objective": config.objective, "seed": config.seed,
                                       "template": template.spec()})
        result.checkpoints.append(path)

    state: dict = {}
    if config.total_iters > 0:
        stream = batch_stream(samples, source, template, config.batch_assembled, config.seed,
                              replacement=config.replacement, relax_groups=config.relax_groups,
                              mode=config.adjust_mode, jobs=config.jobs)
        for it in range(config.total_iters):
            x, y = stack_batch(next(stream))
            if it % config.refresh_interval == 0:
                if config.objective == "erf_adaptive":
                    grid = erf_grid(params, x[0], masks, stride=config.erf_stride, mode=config.erf_mode,
                                    fallback="uniform")
                    field_ = soft_label_field(grid, template, geo, config.tau, stamp=it)
                elif field_ is not None:
                    field_.stamp = it
                result.refreshes.append(it)
                checkpoint(it)
            lr = lr_at(it, config)
            graph = build_graph(params, x)
            rep = objective_loss(config.objective, graph, y, template, field_)
            loss = rep.value
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at iteration {it} (lr={lr}); "
                    f"loss map stats: {_stats(rep.loss_map)}; param norm {params.norm():.4g}")
            rep.loss.backward()
            params, state = sgd_step(params, graph.param_grads(), lr, config.weight_decay, config.momentum, state)
            result.metrics.append((it, lr, loss, *rep.region_losses))
            if on_step is not None:
                on_step(it, field_, rep)
            if it % 100 == 0:
                log.info("iter %d lr %.5f loss %.4f", it, lr, loss)
        stream.close()
    result.params = params
    result.label_field = field_
    checkpoint(config.total_iters, final=True)
    if out is not None:
        write_metrics(out / "metrics.csv", result.metrics)
    return result


def _stats(a) -> str:
    if a is None:
        return "n/a"
    a = np.asarray(a)
    finite = np.isfinite(a)
    if not finite.any():
        return f"all {a.size} entries non-finite"
    return f"min={a[finite].min():.4g} max={a[finite].max():.4g} non-finite={int((~finite).sum())}"


@dataclass
class EvalReport:
    accuracy: float
    region_accuracy: np.ndarray  # (4,)
    class_accuracy: np.ndarray  # (K,), NaN where the class never occurs
    macro_accuracy: float
    count: int

    def to_dict(self) -> dict:
        fix = lambda a: [None if not np.isfinite(v) else float(v) for v in a]  # noqa: E731
        return {"accuracy": self.accuracy, "macro_accuracy": self.macro_accuracy, "count": self.count,
                "region_accuracy": fix(self.region_accuracy), "class_accuracy": fix(self.class_accuracy)}


def evaluate(params: NetworkParams, samples: SampleSet, template: MontageTemplate,
             source: Callable | None = None, seed: int = 0, batch_size: int = 32, epochs: int = 1,
             relax_groups: bool = False) -> EvalReport:
    """Top-1 accuracy of region-averaged logits on freshly assembled images."""
    geo = FeatureGeometry.for_input(params.arch, template.canvas_h, template.canvas_w)
    pool = region_pool_weights(home_regions(template, geo))
    k = params.arch.num_classes
    correct = np.zeros((4, k))
    total = np.zeros((4, k))
    for batch in batch_stream(samples, source or PatchSource(), template, batch_size, seed, epochs=epochs,
                              relax_groups=relax_groups):
        x, y = stack_batch(batch)
        logits = build_graph(params, x, param_grad=False).logits.data
        pred = np.einsum("nchw,rhw->nrc", logits, pool).argmax(axis=2)
        truth = y.argmax(axis=2)
        for r in range(4):
            np.add.at(total[r], truth[:, r], 1)
            np.add.at(correct[r], truth[:, r], pred[:, r] == truth[:, r])
    n = int(total.sum())
    if n == 0:
        raise ValueError("evaluation set produced no assembled images")
    per_class_total = total.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        class_acc = np.where(per_class_total > 0, correct.sum(axis=0) / per_class_total, np.nan)
    return EvalReport(float(correct.sum() / n), correct.sum(axis=1) / total.sum(axis=1), class_acc,
                      float(np.nanmean(class_acc)), n)
