"""Desk-scale two-stage fitting and the streaming simulation.

Stage 1 places queries at noised furthest-point samples of the LiDAR points
and trains offsets, child shapes, colours and velocities against the
denoising target plus rendered depth and colour. Stage 2 fits occupancy by
splatting the decoded Gaussians into the voxel grid under a class-balanced
cross-entropy. Query parameters are optimized directly; there is no network.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .blocked import prepare_blocked, splat_backward_blocked, splat_forward_blocked
from .core import (
    LOGIT_MAX,
    GaussianParams,
    GaussOccError,
    OccupancyField,
    Pose,
    QueryParams,
    VoxelGrid,
    decode_queries,
    decode_queries_vjp,
    quat_normalize,
)
from .metrics import evaluate, lidar_rays
from .optim import AdamConfig, make_optimizer
from .propagation import QueryQueue, advance_queries, gather_history, push_frame, select_queries
from .rendering import RenderConfig, depth_loss, render, render_backward, rgb_loss, warp_gaussians, warp_vjp
from .sampling import InvalidLoss, LossWeights, denoise_loss, fps_points, noise_init, pretrain_loss, DenoiseBatch
from .scene import SyntheticScene
from .splatting import SplatConfig

DIVERGENCE_LIMIT = 1e6
PROB_EPS = 1e-9
# reference grid extent the inference separation distance was tuned for
REFERENCE_EXTENT = 80.0


class DivergenceError(GaussOccError):
    def __init__(self, stage, step, loss, diagnostics):
        self.stage = stage
        self.step = step
        self.loss = loss
        self.diagnostics = diagnostics
        super().__init__(f"{stage} diverged at step {step}: loss={loss!r} ({json.dumps(diagnostics, sort_keys=True)})")


@dataclass
class Stage1Config:
    steps: int = 200
    noise_bound: float = 1.0
    weights: tuple = (1.0, 1.0, 1.0)  # denoise, depth, rgb
    warp: bool = True
    neighbors: tuple = (-1, 1)
    render_every: int = 1


@dataclass
class Stage2Config:
    steps: int = 1800
    init: str = "pretrained"  # or "random"
    empty_fraction: float = 0.1
    class_weight_cap: float = 10.0
    neighbor_weight: float = 0.5
    neighbors: tuple = (-1, 1)
    opacity_weighted: bool = True


@dataclass
class StreamConfig:
    frames: int = 8
    steps_per_frame: int = 120
    propagation: str = "delta"  # "delta", "topk" or "none"
    propagated_fraction: float = 0.5
    delta: float = 1.6  # metres at the reference extent; scaled to the grid
    queue_capacity: int = 4
    fresh_init: str = "points"  # or "uniform"
    # also move carried queries by their velocity; off because velocities fit
    # over a short per-frame budget are noisy and the shift compounds
    advance_velocity: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    frame: int = 0
    queries: int = 80
    children: int = 5
    scale_min: float = 0.1
    scale_max: float = 1.5
    init_scale: float = 0.6
    child_spread: float = 1.0
    velocity_lr: float = 5e-2
    cutoff_sigma: float = 3.0
    deterministic: bool = True
    threads: int | None = None
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stream: StreamConfig = field(default_factory=StreamConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _from_dict(cls, d or {})

    def splat_config(self, opacity_weighted=None) -> SplatConfig:
        return SplatConfig(
            cutoff_sigma=self.cutoff_sigma,
            opacity_weighted=self.stage2.opacity_weighted if opacity_weighted is None else opacity_weighted,
            deterministic=self.deterministic,
            threads=self.threads,
        )


def _from_dict(cls, d):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in d.items():
        if k not in names:
            raise ValueError(f"unknown config key {k!r} for {cls.__name__}")
        f = names[k]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if isinstance(v, dict) and sub is not None and dataclasses.is_dataclass(sub):
            kwargs[k] = _from_dict(sub, v)
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# query initialization


def _children(K, J, cfg: PipelineConfig, rng):
    return dict(
        child_offsets=rng.uniform(-cfg.child_spread, cfg.child_spread, size=(K, J, 3)),
        child_quats=np.tile([1.0, 0.0, 0.0, 0.0], (K, J, 1)),
        child_log_scales=np.full((K, J, 3), math.log(cfg.init_scale)),
        child_opacity_logits=np.zeros((K, J)),
    )


def init_queries_from_points(points, K, C, cfg: PipelineConfig, seed, noise_bound, colors=False):
    """Queries anchored at noised FPS samples; returns (queries, denoise batch)."""
    J = cfg.children
    targets = fps_points(points, K)
    anchors = noise_init(targets, noise_bound, seed)
    rng = np.random.default_rng([seed, 1])
    qp = QueryParams(
        anchors=anchors,
        offsets=np.zeros((K, 3)),
        opacity_logits=np.zeros(K),
        velocities=np.zeros((K, 3)),
        class_logits=np.zeros((K, C)),
        child_color_logits=np.zeros((K, J, 3)) if colors else None,
        **_children(K, J, cfg, rng),
    )
    return qp, DenoiseBatch(targets, anchors, noise_bound)


def init_queries_uniform(grid: VoxelGrid, K, cfg: PipelineConfig, seed):
    """Queries spread over the grid volume by a scrambled Halton sequence."""
    J = cfg.children
    u = qmc.Halton(d=3, scramble=True, seed=seed).random(K)
    extent = np.asarray(grid.dims) * grid.voxel_size
    rng = np.random.default_rng([seed, 2])
    return QueryParams(
        anchors=grid.origin + u * extent,
        offsets=np.zeros((K, 3)),
        opacity_logits=np.zeros(K),
        velocities=np.zeros((K, 3)),
        class_logits=np.zeros((K, grid.class_count)),
        **_children(K, J, cfg, rng),
    )


def _clamp(qp: QueryParams, cfg: PipelineConfig):
    np.clip(qp.child_log_scales, math.log(cfg.scale_min), math.log(cfg.scale_max), out=qp.child_log_scales)
    qp.child_quats[...] = quat_normalize(qp.child_quats.reshape(-1, 4)).reshape(qp.child_quats.shape)
    np.clip(qp.opacity_logits, -LOGIT_MAX, LOGIT_MAX, out=qp.opacity_logits)
    np.clip(qp.child_opacity_logits, -LOGIT_MAX, LOGIT_MAX, out=qp.child_opacity_logits)


def _optimizer(qp: QueryParams, cfg: PipelineConfig, steps: int):
    adam = dataclasses.replace(cfg.adam, total_steps=steps)
    return make_optimizer(adam, qp.arrays().keys(), overrides={"velocities": cfg.velocity_lr})


def _check(stage, step, loss, diag):
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(stage, step, loss, diag)


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    queries: QueryParams
    batch: DenoiseBatch
    curve: list
    report: dict


def _neighbor_frames(scene: SyntheticScene, f: int, offsets, enabled: bool):
    if not enabled:
        return []
    return [f + o for o in offsets if o != 0 and 0 <= f + o < len(scene.frames)]


def _warp_to(scene, gp: GaussianParams, src: int, dst: int):
    dt = scene.frames[dst].timestamp - scene.frames[src].timestamp
    ego = scene.relative_pose(src, dst)
    return warp_gaussians(gp, dt, ego, window=abs(dt) + 1e-9), dt, ego


def _render_frame_loss(scene, gp, frame, cfg: PipelineConfig, wd, wr, want_grad=True):
    """Mean depth/rgb loss over the rig; gradients w.r.t. gp (means, quats, log_scales, opacities, colors)."""
    n = len(gp)
    g = dict(means=np.zeros((n, 3)), quats=np.zeros((n, 4)), log_scales=np.zeros((n, 3)), opacities=np.zeros(n), colors=np.zeros((n, 3)))
    ld = lr = 0.0
    nd = 0
    cams = scene.cameras
    for ci, cam in enumerate(cams):
        out = render(gp, cam, cfg.render, with_rgb=True)
        tgt_d = scene.frames[frame].depths[ci]
        tgt_c = scene.frames[frame].images[ci]
        mask_d = (tgt_d > 0) & out.valid
        l_r, g_r = rgb_loss(out.rgb, tgt_c, np.ones(tgt_d.shape, dtype=bool))
        lr += l_r / len(cams)
        d_depth = None
        if mask_d.any():
            l_d, g_d = depth_loss(out.depth, tgt_d, mask_d)
            ld += l_d / len(cams)
            nd += 1
            d_depth = wd * g_d / len(cams)
        if want_grad:
            rg = render_backward(gp, cam, cfg.render, d_depth=d_depth, d_rgb=wr * g_r / len(cams), out=out)
            g["means"] += rg.means
            g["quats"] += rg.quats
            g["log_scales"] += rg.log_scales
            g["opacities"] += rg.opacities
            g["colors"] += rg.colors
    return ld, lr, g


def fit_stage1(scene: SyntheticScene, cfg: PipelineConfig, log=None) -> Stage1Result:
    s1 = cfg.stage1
    f = cfg.frame
    frame = scene.frames[f]
    weights = LossWeights(*s1.weights)
    qp, batch = init_queries_from_points(frame.points, cfg.queries, scene.num_classes, cfg, cfg.seed, s1.noise_bound, colors=True)
    opt = _optimizer(qp, cfg, s1.steps)
    nbrs = _neighbor_frames(scene, f, s1.neighbors, s1.warp)
    render_on = weights.depth > 0 or weights.rgb > 0
    curve = []
    for step in range(s1.steps):
        l_dn, g_off = denoise_loss(batch, qp.offsets)
        gp = decode_queries(qp)
        n = len(gp)
        gm, gq, gs, ga, gc, gv = (np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)))
        l_d = l_r = 0.0
        if render_on and step % s1.render_every == 0:
            frames = [f] + nbrs
            for fr in frames:
                if fr == f:
                    target, dt, ego = gp, 0.0, None
                else:
                    target, dt, ego = _warp_to(scene, gp, f, fr)
                ld, lr, g = _render_frame_loss(scene, target, fr, cfg, weights.depth / len(frames), weights.rgb / len(frames))
                l_d += ld / len(frames)
                l_r += lr / len(frames)
                if ego is None:
                    gm += g["means"]
                    gq += g["quats"]
                else:
                    dm, dq, dv = warp_vjp(gp, dt, ego, g["means"], g["quats"])
                    gm += dm
                    gq += dq
                    gv += dv
                gs += g["log_scales"]
                ga += g["opacities"]
                gc += g["colors"]
        diag = {"denoise": l_dn, "depth": l_d, "rgb": l_r}
        try:
            loss = pretrain_loss(weights, l_dn, l_d, l_r)
        except InvalidLoss:
            raise DivergenceError("stage1", step, math.nan, diag) from None
        _check("stage1", step, loss, diag)
        grads = decode_queries_vjp(qp, gm, gq, gs, ga, None, gv, gc)
        grads["offsets"] = grads["offsets"] + weights.denoise * g_off
        opt.update(qp.arrays(), grads)
        _clamp(qp, cfg)
        curve.append({"step": step, "loss": loss, "denoise": l_dn, "depth": l_d, "rgb": l_r})
        if log and (step % 50 == 0 or step == s1.steps - 1):
            log(f"stage1 {step:5d} loss={loss:.4f} denoise={l_dn:.3f} depth={l_d:.3f} rgb={l_r:.4f}")
    return Stage1Result(qp, batch, curve, stage1_report(scene, qp, batch, cfg))


def depth_mae(scene: SyntheticScene, qp: QueryParams, cfg: PipelineConfig, frames) -> float:
    """Depth MAE of the warped prediction over frames, pixels valid in both."""
    gp = decode_queries(qp)
    err = 0.0
    cnt = 0
    for fr in frames:
        target = gp if fr == cfg.frame else _warp_to(scene, gp, cfg.frame, fr)[0]
        for ci, cam in enumerate(scene.cameras):
            out = render(target, cam, cfg.render)
            tgt = scene.frames[fr].depths[ci]
            m = (tgt > 0) & out.valid
            err += float(np.abs(out.depth - tgt)[m].sum())
            cnt += int(m.sum())
    return err / max(cnt, 1)


def stage1_report(scene, qp, batch, cfg) -> dict:
    f = cfg.frame
    res = batch.noised_init + qp.offsets - batch.clean_targets
    around = [x for x in (f - 1, f, f + 1) if 0 <= x < len(scene.frames)]
    return {
        "denoise_residual": float(np.linalg.norm(res, axis=1).mean()),
        "depth_mae": depth_mae(scene, qp, cfg, [f]),
        "depth_mae_neighbors": depth_mae(scene, qp, cfg, around),
    }


# ---------------------------------------------------------------------------
# stage 2


def class_weights(labels_flat, C, empty_fraction, cap):
    """Inverse-frequency weights over C+1 labels, empties counted after subsampling."""
    counts = np.bincount(labels_flat, minlength=C + 1).astype(np.float64)
    counts[C] *= empty_fraction
    present = counts > 0
    w = np.zeros(C + 1)
    w[present] = counts[present].max() / counts[present]
    return np.minimum(w, cap)


def occupancy_ce(field: OccupancyField, labels_flat, mask, weights):
    """Weighted mean CE over masked voxels and its upstream gradient on the field."""
    idx = np.flatnonzero(mask)
    y = labels_flat[idx]
    p = field.probs[idx, y]
    w = weights[y]
    Z = w.sum()
    loss = float(np.sum(-w * np.log(p + PROB_EPS)) / Z)
    up = np.zeros_like(field.probs)
    up[idx, y] = -w / ((p + PROB_EPS) * Z)
    return loss, up


@dataclass
class Stage2Result:
    queries: QueryParams
    gaussians: GaussianParams
    curve: list
    metrics: dict
    prediction: VoxelGrid


class _Stage2Problem:
    """Per-frame supervision for stage 2: labels, class weights, neighbour frames."""

    def __init__(self, scene: SyntheticScene, f: int, cfg: PipelineConfig, neighbors):
        self.scene = scene
        self.f = f
        self.cfg = cfg
        self.splat = cfg.splat_config()
        C = scene.num_classes
        self.C = C
        self.frames = [f] + list(neighbors)
        self.labels = {fr: scene.frames[fr].gt.flat_labels().astype(np.int64) for fr in self.frames}
        self.weights = {fr: class_weights(self.labels[fr], C, cfg.stage2.empty_fraction, cfg.stage2.class_weight_cap) for fr in self.frames}

    def step(self, qp: QueryParams, rng):
        cfg, s2 = self.cfg, self.cfg.stage2
        gp = decode_queries(qp)
        n = len(gp)
        grid = self.scene.grid
        total = 0.0
        parts = {}
        gm, gq, gs, ga, gcl, gv = (np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, self.C)), np.zeros((n, 3)))
        for fr in self.frames:
            wgt = 1.0 if fr == self.f else s2.neighbor_weight
            if fr == self.f:
                target, dt, ego = gp, 0.0, None
            else:
                target, dt, ego = _warp_to(self.scene, gp, self.f, fr)
            labels = self.labels[fr]
            empty = labels == self.C
            mask = ~empty | (rng.random(labels.size) < s2.empty_fraction)
            ctx = prepare_blocked(target, grid, self.splat)
            fld = splat_forward_blocked(target, grid, self.splat, ctx)
            loss, up = occupancy_ce(fld, labels, mask, self.weights[fr])
            total += wgt * loss
            parts[str(fr)] = loss
            g = splat_backward_blocked(target, grid, self.splat, wgt * up, ctx)
            if ego is None:
                gm += g.means
                gq += g.quats
            else:
                dm, dq, dv = warp_vjp(gp, dt, ego, g.means, g.quats)
                gm += dm
                gq += dq
                gv += dv
            gs += g.log_scales
            ga += g.opacities
            gcl += g.class_logits
        grads = decode_queries_vjp(qp, gm, gq, gs, ga, gcl, gv)
        return total, parts, grads


def predict(qp: QueryParams, grid: VoxelGrid, splat: SplatConfig) -> VoxelGrid:
    gp = decode_queries(qp)
    return splat_forward_blocked(gp, grid, splat).to_grid(grid)


def frame_metrics(scene: SyntheticScene, qp: QueryParams, f: int, cfg: PipelineConfig, splat=None) -> tuple[dict, VoxelGrid]:
    pred = predict(qp, scene.grid, splat or cfg.splat_config())
    rays = lidar_rays(scene.sensor, scene.spec["lidar"]["rings"], scene.spec["lidar"]["azimuths"], tuple(scene.spec["lidar"]["elevation_deg"]))
    return evaluate(pred, scene.frames[f].gt, rays), pred


def optimize_stage2(scene, qp: QueryParams, f: int, steps: int, cfg: PipelineConfig, neighbors, rng, log=None, tag="stage2"):
    problem = _Stage2Problem(scene, f, cfg, neighbors)
    opt = _optimizer(qp, cfg, steps)
    curve = []
    for step in range(steps):
        loss, parts, grads = problem.step(qp, rng)
        _check(tag, step, loss, parts)
        opt.update(qp.arrays(), grads)
        _clamp(qp, cfg)
        curve.append({"step": step, "loss": loss})
        if log and (step % 100 == 0 or step == steps - 1):
            log(f"{tag} {step:5d} loss={loss:.4f}")
    return curve


def fit_stage2(scene: SyntheticScene, init: QueryParams | None, cfg: PipelineConfig, log=None) -> Stage2Result:
    """Fit occupancy on cfg.frame. With `init` None the queries start uniform."""
    f = cfg.frame
    qp = init.copy() if init is not None else init_queries_uniform(scene.grid, cfg.queries, cfg, cfg.seed)
    qp.child_color_logits = None
    rng = np.random.default_rng([cfg.seed, 3])
    nbrs = _neighbor_frames(scene, f, cfg.stage2.neighbors, cfg.stage2.neighbor_weight > 0)
    curve = optimize_stage2(scene, qp, f, cfg.stage2.steps, cfg, nbrs, rng, log)
    metrics, pred = frame_metrics(scene, qp, f, cfg)
    return Stage2Result(qp, decode_queries(qp), curve, metrics, pred)


@dataclass
class PipelineResult:
    stage1: Stage1Result | None
    stage2: Stage2Result
    seconds: float
    steps: int

    def report(self) -> dict:
        out = {"stage2": self.stage2.metrics, "steps": self.steps}
        if self.stage1 is not None:
            out["stage1"] = self.stage1.report
        return out


def run_pipeline(scene: SyntheticScene, cfg: PipelineConfig, log=None) -> PipelineResult:
    t0 = time.perf_counter()
    s1 = None
    init = None
    steps = cfg.stage2.steps
    if cfg.stage2.init == "pretrained":
        s1 = fit_stage1(scene, cfg, log)
        init = s1.queries
        steps += cfg.stage1.steps
    elif cfg.stage2.init != "random":
        raise ValueError(f"unknown stage2 init {cfg.stage2.init!r}")
    s2 = fit_stage2(scene, init, cfg, log)
    return PipelineResult(s1, s2, time.perf_counter() - t0, steps)


# ---------------------------------------------------------------------------
# streaming


def separation(cfg: PipelineConfig, grid: VoxelGrid) -> float:
    extent = float(np.max(np.asarray(grid.dims) * grid.voxel_size))
    return cfg.stream.delta * extent / REFERENCE_EXTENT


def stream_sim(scene: SyntheticScene, cfg: PipelineConfig, log=None) -> list[dict]:
    """Fit frame after frame, carrying selected queries forward through the queue."""
    sc = cfg.stream
    if sc.propagation not in ("delta", "topk", "none"):
        raise ValueError(f"unknown propagation mode {sc.propagation!r}")
    F = min(sc.frames, len(scene.frames))
    K = cfg.queries
    k_prop = max(1, int(round(sc.propagated_fraction * K)))
    delta = separation(cfg, scene.grid) if sc.propagation == "delta" else 0.0
    queue = QueryQueue(sc.queue_capacity)
    rng = np.random.default_rng([cfg.seed, 4])
    rows = []
    for f in range(F):
        frame = scene.frames[f]
        carried = None
        if sc.propagation != "none" and queue.latest is not None:
            fid, carried = gather_history(queue, frame.pose)[-1]
            if sc.advance_velocity:
                carried = advance_queries(carried, frame.timestamp - scene.frames[fid].timestamp)
        n_fresh = K - (carried.num_queries if carried is not None else 0)
        seed = int(rng.integers(2**31))
        if sc.fresh_init == "points":
            fresh, _ = init_queries_from_points(frame.points, n_fresh, scene.num_classes, cfg, seed, cfg.stage1.noise_bound)
        else:
            fresh = init_queries_uniform(scene.grid, n_fresh, cfg, seed)
        qp = fresh if carried is None else QueryParams.concat([carried, fresh])
        nbrs = [f - 1] if f > 0 and cfg.stage2.neighbor_weight > 0 else []
        optimize_stage2(scene, qp, f, sc.steps_per_frame, cfg, nbrs, rng, log, tag=f"frame{f}")
        m, _ = frame_metrics(scene, qp, f, cfg)
        rows.append({"frame": f, "propagated": K - n_fresh, **{k: m[k] for k in ("iou", "miou", "rayiou")}})
        if log:
            log(f"frame {f}: iou={m['iou']:.3f} miou={m['miou']:.3f} rayiou={m['rayiou']:.3f} propagated={K - n_fresh}")
        if sc.propagation != "none":
            queue = push_frame(queue, f, select_queries(qp, k_prop, delta), frame.pose, k=k_prop)
    return rows


# ---------------------------------------------------------------------------
# query parameter files


def queries_to_json(qp: QueryParams) -> str:
    d = {k: (None if v is None else np.asarray(v).tolist()) for k, v in qp.__dict__.items()}
    return json.dumps(d, sort_keys=True) + "\n"


def queries_from_json(text: str) -> QueryParams:
    d = json.loads(text)
    return QueryParams(**{k: (None if v is None else np.asarray(v, dtype=np.float64)) for k, v in d.items()})
