"""Dataset synthesis, the training loop, whole-cloud inference and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import AdamState, ContractError, NumericError, Tape, adam_step
from .geometry import (
    AugmentConfig,
    PointCloud,
    TriangleMesh,
    apply_similarity,
    farthest_point_sample,
    normalize_to_unit_sphere,
    random_similarity,
    sample_mesh,
)
from .losses import LossConfig, joint_loss, metric_cd, metric_hd, metric_p2f, metric_uniformity
from .network import EvaConfig, EvaParams, forward
from .shapes import make_shape

log = logging.getLogger(__name__)

# narrower network and gentler loss weights that train in minutes on a CPU;
# at this scale the default uniform and weight-decay terms swamp the Chamfer term
DESK_MODEL = dict(growth=8, stem=16, C1=64, C2=128, mlp_widths=(128, 64, 32))
DESK_LOSS = dict(beta=1e-5, gamma=1e-5)


@dataclass
class TrainSample:
    input: PointCloud
    gt: PointCloud
    source: str
    patch_seed: int

    def __post_init__(self):
        if len(self.gt) % len(self.input):
            raise ContractError("|gt| must be a multiple of |input|")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 8
    lr: float = 1e-3
    rng_seed: int = 0
    # None disables augmentation
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cd: float


@dataclass
class TrainState:
    params: EvaParams
    config: EvaConfig
    adam: AdamState
    epoch: int = 0
    rng_seed: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, config: EvaConfig, rng_seed: int = 0, lr: float = 1e-3) -> "TrainState":
        params = EvaParams.init(config, rng_seed)
        return cls(params, config, AdamState.for_params(params.parameters(), lr=lr), 0, rng_seed,
                   np.random.default_rng([rng_seed, 1]))


# ------------------------------------------------------------------ data


def _crop_patch(dense: np.ndarray, seed_idx: int, size: int) -> np.ndarray:
    """The ball around a seed with the smallest radius holding ``size`` points.

    Points are taken by ascending distance with ties to the lower index, the
    same order a ball query returns.
    """
    d = dense - dense[seed_idx]
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    return dense[np.argsort(d2, kind="stable")[:size]]


def generate_dataset(shape_set, patches_per_shape: int = 24, gt_points: int = 1024, rate: int = 4,
                     rng_seed: int = 0, dense_points: int = 8192) -> list[TrainSample]:
    """Normalized gt patches cropped around FPS seeds of densely sampled shapes.

    ``shape_set`` maps names to meshes (or is a sequence of shape names). The
    stored ``input`` is one random subset; training redraws it every epoch.
    """
    if rate < 1 or gt_points % rate:
        raise ValueError(f"gt_points={gt_points} must be divisible by rate={rate}")
    if not isinstance(shape_set, dict):
        shape_set = {name: make_shape(name) for name in shape_set}
    rng = np.random.default_rng(rng_seed)
    samples = []
    for name, mesh in shape_set.items():
        dense = sample_mesh(mesh, dense_points, rng.integers(2**63)).points
        if len(dense) < gt_points:
            log.warning("shape %s: %d points is fewer than a %d-point patch; skipped", name, len(dense), gt_points)
            continue
        seeds = farthest_point_sample(dense, min(patches_per_shape, len(dense)), int(rng.integers(len(dense))))
        for s in seeds:
            gt = normalize_to_unit_sphere(_crop_patch(dense, int(s), gt_points))
            pick = rng.choice(gt_points, gt_points // rate, replace=False)
            samples.append(TrainSample(PointCloud(gt.points[pick], gt.transform), gt, name, int(s)))
    return samples


def make_eval_input(gt, rate: int, rng_seed=0, oversample: int = 6) -> PointCloud:
    """Sparse, well-spread input from a dense gt cloud.

    Randomly keeps ``oversample / 4`` times the target size, then FPS thins
    that to ``target = |gt| / rate``; e.g. 8192 -> 3072 random -> 2048.
    """
    pts = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64)
    if rate < 1 or len(pts) % rate:
        raise ValueError(f"|gt|={len(pts)} is not divisible by rate={rate}")
    target = len(pts) // rate
    inter = _intermediate_size(len(pts), target, oversample)
    rng = np.random.default_rng(rng_seed)
    sub = pts[np.sort(rng.choice(len(pts), inter, replace=False))]
    return PointCloud(sub[farthest_point_sample(sub, target, 0)])


def _intermediate_size(n_gt: int, target: int, oversample: int) -> int:
    inter = target * oversample // 4
    if inter < target or inter > n_gt:
        raise ValueError(f"cannot draw {inter} intermediate points from {n_gt} for a {target}-point input")
    return inter


def _training_pair(sample: TrainSample, rng: np.random.Generator, augment: AugmentConfig | None):
    gt = sample.gt.points
    n = len(sample.input)
    inp = gt[rng.choice(len(gt), n, replace=False)]
    if augment is not None:
        t = random_similarity(rng, augment)
        inp, gt = apply_similarity(inp, t), apply_similarity(gt, t)
    return inp, gt


def train_epoch(state: TrainState, samples: Sequence[TrainSample], loss_config: LossConfig,
                batch: int, augment: AugmentConfig | None) -> EpochRecord:
    rng = state.rng
    order = rng.permutation(len(samples))
    losses, cds, counts = [], [], []
    for start in range(0, len(order), batch):
        chunk = [samples[i] for i in order[start:start + batch]]
        pairs = [_training_pair(s, rng, augment) for s in chunk]
        inp = np.stack([p[0] for p in pairs])
        gt = np.stack([p[1] for p in pairs])
        R = gt.shape[1] // inp.shape[1]
        with Tape() as tape:
            pred = forward(inp, state.params, state.config, R=R, rng_seed=int(rng.integers(2**63)))
            loss, terms = joint_loss(pred, gt, state.params, loss_config, return_terms=True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {state.epoch + 1}")
            tape.backward(loss)
        adam_step(state.params.parameters(), state.adam)
        losses.append(value)
        cds.append(terms["cd"])
        counts.append(len(chunk))
    w = np.asarray(counts, dtype=np.float64)
    state.epoch += 1
    rec = EpochRecord(state.epoch, float(np.dot(losses, w) / w.sum()), float(np.dot(cds, w) / w.sum()))
    state.history.append(rec)
    return rec


def train(samples: Sequence[TrainSample], config: EvaConfig, loss_config: LossConfig | None = None,
          epochs: int = 100, batch: int = 8, rng_seed: int = 0, *, lr: float = 1e-3,
          augment: AugmentConfig | None = AugmentConfig(), state: TrainState | None = None,
          on_epoch: Callable[[TrainState, EpochRecord], None] | None = None,
          dump_path=None) -> TrainState:
    """Train until ``state.epoch == epochs``; pass ``state`` to resume.

    A non-finite loss raises :class:`NumericError` (with the state attached as
    ``.state`` and, when ``dump_path`` is given, saved there as a checkpoint).
    """
    if not samples:
        raise ValueError("train needs at least one sample")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    loss_config = loss_config or LossConfig()
    if state is None:
        state = TrainState.fresh(config, rng_seed, lr)
    while state.epoch < epochs:
        try:
            rec = train_epoch(state, samples, loss_config, batch, augment)
        except NumericError as exc:
            exc.state = state
            if dump_path is not None:
                from .io import save_checkpoint

                save_checkpoint(dump_path, state)
            raise
        log.info("epoch %d loss %.6g cd %.6g", rec.epoch, rec.loss, rec.cd)
        if on_epoch is not None:
            on_epoch(state, rec)
    return state


# ------------------------------------------------------------------ inference


def _model(state):
    if isinstance(state, tuple):
        return state
    return state.params, state.config


def upsample_cloud(cloud, state, R: int = 4, patch_size: int = 256, rng_seed: int = 0,
                   overlap: float = 2.0) -> PointCloud:
    """Patch-wise upsampling of a whole cloud to exactly ``R * |cloud|`` points.

    ``state`` is a :class:`TrainState` or a ``(params, config)`` pair.
    """
    params, config = _model(state)
    if R > config.K:
        raise ValueError(f"rate R={R} exceeds the neighbourhood size K={config.K}; R must satisfy R <= K")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n <= patch_size:
        unit = normalize_to_unit_sphere(pts)
        out = forward(unit.points, params, config, R=R, anchor_mode="nearest").data
        return PointCloud(out * unit.transform[1] + unit.transform[0])
    n_patches = math.ceil(overlap * n / patch_size)
    start = int(np.random.default_rng(rng_seed).integers(n))
    seeds = farthest_point_sample(pts, n_patches, start)
    patches = [normalize_to_unit_sphere(_crop_patch(pts, int(s), patch_size)) for s in seeds]
    out = forward(np.stack([p.points for p in patches]), params, config, R=R, anchor_mode="nearest").data
    merged = np.concatenate([o * p.transform[1] + p.transform[0] for o, p in zip(out, patches)])
    return PointCloud(merged[farthest_point_sample(merged, R * n, 0)])


def duplicate_points(cloud, R: int) -> PointCloud:
    """Naive upsampling: every point repeated ``R`` times."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return PointCloud(np.repeat(pts, R, axis=0))


@dataclass
class EvalItem:
    name: str
    input: PointCloud
    gt: PointCloud
    mesh: TriangleMesh | None = None


@dataclass
class MetricReport:
    # (shape, metric, p or None, value)
    rows: list[tuple[str, str, float | None, float]] = field(default_factory=list)

    def add(self, shape: str, metric: str, value: float, p: float | None = None) -> None:
        self.rows.append((shape, metric, p, float(value)))

    def values(self, metric: str, p: float | None = None, shape: str | None = None) -> list[float]:
        return [v for s, m, pp, v in self.rows
                if m == metric and pp == p and (shape is None or s == shape) and s != "mean"]

    def mean(self, metric: str, p: float | None = None) -> float:
        vals = self.values(metric, p)
        if not vals:
            raise KeyError(f"no {metric} values in report")
        return float(np.mean(vals))


def make_eval_set(names, gt_points: int = 8192, rate: int = 4, rng_seed: int = 0) -> list[EvalItem]:
    """Whole-shape evaluation items: dense gt, sparse input by :func:`make_eval_input`."""
    rng = np.random.default_rng(rng_seed)
    items = []
    for name in names:
        mesh = make_shape(name)
        gt = sample_mesh(mesh, gt_points, rng.integers(2**63))
        items.append(EvalItem(name, make_eval_input(gt, rate, rng.integers(2**63)), gt, mesh))
    return items


def evaluate(state, eval_set: Sequence[EvalItem], R: int = 4, patch_size: int = 256,
             p_list=LossConfig().p_list, rng_seed: int = 0) -> MetricReport:
    """Upsample every item and score it against its gt (and mesh, for P2F).

    ``state`` may also be a callable ``(input_cloud, R) -> PointCloud``.
    """
    report = MetricReport()
    for item in eval_set:
        if callable(state):
            pred = state(item.input, R)
        else:
            pred = upsample_cloud(item.input, state, R, patch_size, rng_seed)
        report.add(item.name, "cd", metric_cd(pred, item.gt))
        report.add(item.name, "hd", metric_hd(pred, item.gt))
        if item.mesh is not None:
            report.add(item.name, "p2f", metric_p2f(pred, item.mesh))
        else:
            log.info("no mesh for %s; P2F skipped", item.name)
        for p in p_list:
            report.add(item.name, "uniformity", metric_uniformity(pred, p), p)
    for metric, p in sorted({(m, pp) for _, m, pp, _ in report.rows}, key=lambda t: (t[0], t[1] or 0)):
        report.add("mean", metric, report.mean(metric, p), p)
    return report
