"""Two-stage optimization of the Gaussian scene with prior-regularized losses.

Stage 1 (warm-up) trains the canonical Gaussians only; the deformation field
is untouched, bit for bit.  Stage 2 optimizes Gaussians and deformation
jointly, rendering each view at its timestamp.  The objective per step is

    total = w_rgb * L_rgb + w_diffusion * L_diffusion + w_geo * L_geo

where L_rgb is the masked mean absolute color error on the training view,
L_diffusion is the score-distillation residual on a sampled novel view, and
L_geo is 1 - PearsonCorr between rendered and provider depth.  Excluded
(tool) pixels contribute exactly zero loss and zero gradient.

Densification (split on large view-space positional gradients) and opacity
pruning run every `densify_interval` iterations during warm-up only, with
Adam moment vectors resized alongside the parameter arrays.
"""

import json
import logging
import time as _time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .deformation import DeformationHead, EncodingField, apply_deformation, \
    deformation_backward
from .exceptions import NumericalDegeneracyError, ValidationError
from .priors import (
    DiffusionSchedule,
    draw_noise,
    geo_loss,
    make_denoiser,
    make_depth_provider,
    sds_residual,
)
from .rasterizer import RenderSettings, render, render_backward
from .scene import CameraView, GaussianCloud, look_at_w2c, sh_coeff_count
from .dataio import save_checkpoint, load_checkpoint

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    rgb: float = 1.0
    diffusion: float = 0.001
    geo: float = 0.01


@dataclass
class TrainConfig:
    warmup_iters: int = 1000
    main_iters: int = 3000
    lr: float = 1.6e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    weights: LossWeights = dc_field(default_factory=LossWeights)
    seed: int = 0
    view_budget: int = 0              # 0 = use every manifest view
    use_diffusion_prior: bool = True
    use_geo_prior: bool = True
    denoiser: str = "oracle"          # config key prior.denoiser
    depth_provider: str = "oracle"    # config key prior.depth
    init_points: int = 400
    sh_degree: int = 2
    densify_interval: int = 200
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    densify_scale_shrink: float = 1.6
    novel_angle_deg: float = 5.0
    checkpoint_every: int = 500
    dtype: str = "float32"
    threads: int = 1
    depth_accum_threshold: float = 0.1   # rendered-alpha floor for depth validity
    diffusion_steps: int = 1000
    diffusion_beta_start: float = 1e-4
    diffusion_beta_end: float = 0.02
    field_levels: int = 2
    field_base_resolution: int = 32
    field_features: int = 16

    @property
    def total_iters(self):
        return self.warmup_iters + self.main_iters

    def to_json(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "weights"}
        d["weights"] = vars(self.weights)
        d["prior"] = {"denoiser": self.denoiser, "depth": self.depth_provider}
        return d


def inverse_sigmoid(x):
    return float(np.log(x / (1.0 - x)))


def select_view_subset(n_total, budget):
    """Evenly strided view indices (endpoints included) for a sparse budget."""
    if budget <= 0 or budget >= n_total:
        return list(range(n_total))
    if budget == 1:
        return [0]
    idx = np.round(np.linspace(0, n_total - 1, budget)).astype(int)
    return sorted(set(int(i) for i in idx))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def masked_rgb_loss(pred, gt, mask=None):
    """Mean absolute error over unmasked pixels; gradient sign(diff)/N there.

    mask: (H, W) with 1 = excluded.  Excluded pixels contribute bit-zero loss
    and gradient regardless of their values.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    diff = pred - gt
    if mask is not None:
        keep = (np.asarray(mask) == 0).astype(pred.dtype)[..., None]
    else:
        keep = np.ones(pred.shape[:2], dtype=pred.dtype)[..., None]
    n = float(keep.sum()) * pred.shape[-1]
    if n == 0:
        log.warning("masked_rgb_loss: every pixel is masked out; loss treated as 0")
        return 0.0, np.zeros_like(pred)
    loss = float(np.sum(keep * np.abs(diff)) / n)
    grad = keep * np.sign(diff) / pred.dtype.type(n)
    return loss, grad.astype(pred.dtype)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def resize(self, name, survivors, n_children):
        """Keep surviving rows, append zero-moment rows for new children."""
        for store in (self.m, self.v):
            old = store[name]
            kept = old[survivors]
            if n_children:
                pad = np.zeros((n_children,) + old.shape[1:], dtype=old.dtype)
                kept = np.concatenate([kept, pad], axis=0)
            store[name] = kept


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-15,
              only=None):
    """In-place Adam update.  `only` restricts which parameter names move."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if only is not None and name not in only:
            continue
        g = grads.get(name)
        if g is None:
            continue
        dt = p.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        p -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))


# --------------------------------------------------------------------------
# novel-view sampling
# --------------------------------------------------------------------------

def rodrigues_rotate(vec, axis, theta):
    """Rotate vec about unit axis by theta (right-handed)."""
    vec = np.asarray(vec, dtype=float)
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    return (vec * np.cos(theta) + np.cross(k, vec) * np.sin(theta)
            + k * np.dot(k, vec) * (1.0 - np.cos(theta)))


def estimate_centroid(views):
    """Least-squares intersection of the camera optical axes."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for v in views:
        d = v.optical_axis
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ v.camera_center
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol


def sample_novel_view(views, rng, angle_range_deg=5.0, time=None):
    """Perturb a training camera by a small rotation about the mean up-axis
    through the scene centroid, re-aimed at the centroid."""
    if not views:
        raise ValidationError("need at least one training view")
    centroid = estimate_centroid(views)
    up = np.mean([v.up_axis for v in views], axis=0)
    n = np.linalg.norm(up)
    if n < 1e-9:
        raise ValidationError("training cameras have no consistent up-axis")
    up = up / n
    base = views[int(rng.integers(len(views)))]
    theta = np.deg2rad(float(rng.uniform(-angle_range_deg, angle_range_deg)))
    center = centroid + rodrigues_rotate(base.camera_center - centroid, up, theta)
    w2c = look_at_w2c(center, centroid, up)
    return CameraView(width=base.width, height=base.height, fx=base.fx, fy=base.fy,
                      cx=base.cx, cy=base.cy, w2c=w2c,
                      time=base.time if time is None else time)


# --------------------------------------------------------------------------
# training state
# --------------------------------------------------------------------------

class TrainState:
    def __init__(self, cloud, field, head, config, views, all_views,
                 denoiser=None, depth_provider=None):
        self.cloud = cloud
        self.field = field
        self.head = head
        self.config = config
        self.views = views              # training subset
        self.all_views = all_views      # every manifest view (for checkpoints)
        self.schedule = DiffusionSchedule(config.diffusion_steps,
                                          config.diffusion_beta_start,
                                          config.diffusion_beta_end)
        self.denoiser = denoiser
        self.depth_provider = depth_provider
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.settings = RenderSettings(threads=config.threads)
        self.adam = AdamState({**cloud.params(), **field.params(), **head.params()})
        self._grad_sum = np.zeros(len(cloud))
        self._grad_count = np.zeros(len(cloud))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype).type

    def all_params(self):
        return {**self.cloud.params(), **self.field.params(), **self.head.params()}

    def in_warmup(self):
        return self.iteration < self.config.warmup_iters


def init_cloud(dataset_bounds, config):
    """Random initialization inside the scene bounds."""
    lo, hi = dataset_bounds
    rng = np.random.default_rng(config.seed + 17)
    n = config.init_points
    k = sh_coeff_count(config.sh_degree)
    span = np.asarray(hi) - np.asarray(lo)
    spacing = float(np.prod(span) ** (1.0 / 3.0) / max(n, 1) ** (1.0 / 3.0))
    positions = rng.uniform(lo, hi, (n, 3))
    rotations = rng.normal(0.0, 1.0, (n, 4))
    log_scales = np.log(0.7 * spacing) + rng.uniform(-0.2, 0.2, (n, 3))
    opacities = np.full(n, inverse_sigmoid(0.1))
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.uniform(-0.35, 0.35, (n, 3))
    dtype = np.dtype(config.dtype)
    return GaussianCloud(positions, rotations, log_scales, opacities, sh,
                         config.sh_degree).astype(dtype)


def init_state(dataset, config):
    cloud = init_cloud((dataset.bounds_lo, dataset.bounds_hi), config)
    dtype = np.dtype(config.dtype)
    fld = EncodingField(dataset.bounds_lo, dataset.bounds_hi,
                        n_levels=config.field_levels,
                        base_resolution=config.field_base_resolution,
                        features_per_level=config.field_features,
                        seed=config.seed + 31, dtype=dtype)
    head = DeformationHead(fld.latent_dim, seed=config.seed + 47, dtype=dtype)
    subset = select_view_subset(len(dataset.views), config.view_budget)
    views = [dataset.views[i] for i in subset]
    sched = DiffusionSchedule(config.diffusion_steps, config.diffusion_beta_start,
                              config.diffusion_beta_end)
    denoiser = make_denoiser(config.denoiser, sched) if config.use_diffusion_prior else None
    depth = None
    if config.use_geo_prior:
        depth = make_depth_provider(config.depth_provider, scene=dataset.scene)
    state = TrainState(cloud, fld, head, config, views, dataset.views,
                       denoiser=denoiser, depth_provider=depth)
    return state


# --------------------------------------------------------------------------
# one optimization step
# --------------------------------------------------------------------------

def _zero_cloud_grads(cloud):
    return {k: np.zeros_like(v) for k, v in cloud.params().items()}


def _accumulate(target, src):
    for k, v in src.items():
        if k in target:
            target[k] += v
        else:
            target[k] = v.copy()


def _render_stage(state, view, tau):
    """Render canonically during warm-up, deformed at tau afterwards."""
    if state.in_warmup():
        out = render(state.cloud, view, dtype=state.dtype, settings=state.settings,
                     save_ctx=True)
        return out, None
    deformed, dctx = apply_deformation(state.cloud, state.field, state.head, tau)
    out = render(deformed, view, dtype=state.dtype, settings=state.settings,
                 save_ctx=True)
    return out, dctx


def _backprop_render(state, ctx, dctx, grads_out, grad_color=None, grad_depth_norm=None):
    """Backward through one render (+ deformation when active); returns render grads."""
    rg = render_backward(ctx, grad_color=grad_color, grad_depth_norm=grad_depth_norm)
    if dctx is None:
        _accumulate(grads_out, rg.cloud_grads())
    else:
        dgrads, gpos = deformation_backward(dctx, rg.positions, rg.rotations,
                                            rg.log_scales)
        _accumulate(grads_out, {"positions": gpos,
                                "rotations": rg.rotations,
                                "log_scales": rg.log_scales,
                                "opacities": rg.opacities,
                                "sh": rg.sh})
        _accumulate(grads_out, dgrads)
    return rg


def train_step(state):
    """One composite-loss optimization step; returns the log record."""
    cfg = state.config
    w = cfg.weights
    dtype = state.dtype
    t0 = _time.perf_counter()

    view = state.views[state.iteration % len(state.views)]
    out, dctx = _render_stage(state, view, view.time)

    grads = {}
    l_rgb, g_rgb = masked_rgb_loss(out.color, view.gt_image.astype(dtype), view.mask)
    grad_color = dtype(w.rgb) * g_rgb

    l_geo = 0.0
    grad_depth_norm = None
    if cfg.use_geo_prior and state.depth_provider is not None:
        prior_depth = state.depth_provider.predict_depth(out.color, view)
        valid = out.accum_alpha > cfg.depth_accum_threshold
        valid &= np.isfinite(prior_depth) & (prior_depth > 0)
        if view.mask is not None:
            valid &= view.mask == 0
        geo = geo_loss(out.depth_norm, prior_depth, valid)
        l_geo = geo.loss
        grad_depth_norm = (dtype(w.geo) * geo.grad).astype(dtype)

    rg_train = _backprop_render(state, out.ctx, dctx, grads,
                                grad_color=grad_color,
                                grad_depth_norm=grad_depth_norm)

    l_diff = 0.0
    if cfg.use_diffusion_prior and state.denoiser is not None:
        tau = float(state.rng.choice([v.time for v in state.views]))
        novel = sample_novel_view(state.views, state.rng, cfg.novel_angle_deg,
                                  time=tau)
        nout, ndctx = _render_stage(state, novel, tau)
        draw = draw_noise(state.rng, nout.color.shape, state.schedule)
        sds = sds_residual(nout.color, state.denoiser, state.schedule, draw)
        l_diff = sds.loss
        _backprop_render(state, nout.ctx, ndctx, grads,
                         grad_color=(dtype(w.diffusion) * sds.grad_image).astype(dtype))

    # densification statistics come from the training view only
    if state.in_warmup():
        state._grad_sum += rg_train.mean2d_norm
        state._grad_count += rg_train.visible

    params = state.all_params()
    trainable = set(state.cloud.params())
    if not state.in_warmup():
        trainable |= set(state.field.params()) | set(state.head.params())
    adam_step(params, grads, state.adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps, only=trainable)

    state.iteration += 1
    terms = {"l_rgb": float(l_rgb), "l_diff": float(l_diff), "l_geo": float(l_geo)}
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalDegeneracyError(
                f"loss term {name} became non-finite at iteration {state.iteration}",
                term=name, value=value, iteration=state.iteration)
    record = {
        "iter": state.iteration,
        **terms,
        "total": float(w.rgb * l_rgb + w.diffusion * l_diff + w.geo * l_geo),
        "n_gaussians": len(state.cloud),
        "wall_ms": (_time.perf_counter() - t0) * 1000.0,
    }

    if (state.in_warmup() and cfg.densify_interval > 0
            and state.iteration % cfg.densify_interval == 0):
        densify_and_prune(state)
    return record


# --------------------------------------------------------------------------
# densify / prune
# --------------------------------------------------------------------------

def densify_and_prune(state):
    """Split high-gradient Gaussians (children at +/- an offset inside the
    parent's 1-sigma extent, scales shrunk), then prune transparent ones.
    Adam moments follow the parameter rows; children start with zero moments."""
    cfg = state.config
    cloud = state.cloud
    n = len(cloud)
    avg = np.where(state._grad_count > 0, state._grad_sum / np.maximum(state._grad_count, 1), 0.0)
    split = avg > cfg.densify_grad_threshold

    from .scene import normalize_quaternion, quat_to_rotmat
    dtype = cloud.positions.dtype.type

    children = {k: [] for k in cloud.FIELDS}
    parents_removed = np.zeros(n, dtype=bool)
    split_idx = np.nonzero(split)[0]
    for i in split_idx:
        parents_removed[i] = True
        R = quat_to_rotmat(normalize_quaternion(cloud.rotations[i]))
        s = np.exp(cloud.log_scales[i])
        zdraw = np.clip(state.rng.normal(0.0, 1.0, 3), -1.0, 1.0).astype(dtype)
        offset = R @ (s * zdraw)
        new_logs = cloud.log_scales[i] - dtype(np.log(cfg.densify_scale_shrink))
        for sgn in (1.0, -1.0):
            children["positions"].append(cloud.positions[i] + dtype(sgn) * offset)
            children["rotations"].append(cloud.rotations[i].copy())
            children["log_scales"].append(new_logs.copy())
            children["opacities"].append(cloud.opacities[i])
            children["sh"].append(cloud.sh[i].copy())

    base = 1.0 / (1.0 + np.exp(-cloud.opacities))
    prune = base < cfg.prune_opacity
    survivors = ~(parents_removed | prune)

    n_children = 2 * len(split_idx)
    new_params = {}
    for k in cloud.FIELDS:
        kept = cloud.params()[k][survivors]
        if n_children:
            kid = np.stack(children[k]) if k != "opacities" \
                else np.asarray(children[k], dtype=dtype)
            kept = np.concatenate([kept, kid], axis=0)
        new_params[k] = kept
        state.adam.resize(k, survivors, n_children)

    state.cloud = GaussianCloud(new_params["positions"], new_params["rotations"],
                                new_params["log_scales"], new_params["opacities"],
                                new_params["sh"], cloud.sh_degree).astype(dtype)
    state._grad_sum = np.zeros(len(state.cloud))
    state._grad_count = np.zeros(len(state.cloud))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def state_to_tensors(state):
    t = {}
    for k, v in state.cloud.params().items():
        t[f"gauss/{k}"] = v
    for k, v in state.field.params().items():
        t[f"field/{k}"] = v
    for k, v in state.head.params().items():
        t[f"head/{k}"] = v
    t["meta/iteration"] = np.array([state.iteration], dtype=np.float32)
    t["meta/sh_degree"] = np.array([state.cloud.sh_degree], dtype=np.float32)
    t["field/bounds_lo"] = state.field.bounds_lo
    t["field/bounds_hi"] = state.field.bounds_hi
    t["field/shape"] = np.array([state.field.n_levels, state.field.base_resolution,
                                 state.field.features_per_level], dtype=np.float32)
    t["meta/train_ids"] = np.array([v.view_id for v in state.views], dtype=np.float32)
    for v in state.all_views:
        t[f"camera/{v.view_id}/w2c"] = v.w2c
        t[f"camera/{v.view_id}/intrinsics"] = np.array([v.fx, v.fy, v.cx, v.cy])
        t[f"camera/{v.view_id}/shape"] = np.array([v.width, v.height, v.time])
    return t


@dataclass
class LoadedCheckpoint:
    cloud: GaussianCloud
    field: EncodingField
    head: DeformationHead
    cameras: dict                  # view_id -> CameraView (no ground truth attached)
    iteration: int
    train_ids: list


def load_state_tensors(tensors, dtype=np.float32):
    sh_degree = int(tensors["meta/sh_degree"][0])
    cloud = GaussianCloud(tensors["gauss/positions"], tensors["gauss/rotations"],
                          tensors["gauss/log_scales"], tensors["gauss/opacities"],
                          tensors["gauss/sh"], sh_degree).astype(dtype)
    levels, base_res, feats = (int(x) for x in tensors["field/shape"])
    fld = EncodingField(tensors["field/bounds_lo"], tensors["field/bounds_hi"],
                        n_levels=levels, base_resolution=base_res,
                        features_per_level=feats, dtype=dtype)
    for name in list(fld.params()):
        key = f"field/{name}"
        lvl = int(name.split("_")[1][1:])
        pk = name.split("_")[2]
        fld.levels[lvl][(int(pk[0]), int(pk[1]))] = tensors[key].astype(dtype)
    head = DeformationHead(fld.latent_dim, dtype=dtype)
    for pname in head.PARAM_NAMES:
        setattr(head, pname, tensors[f"head/mlp_{pname}"].astype(dtype))
    cameras = {}
    ids = sorted(int(k.split("/")[1]) for k in tensors if k.startswith("camera/")
                 and k.endswith("/w2c"))
    for vid in ids:
        fx, fy, cx, cy = (float(x) for x in tensors[f"camera/{vid}/intrinsics"])
        w, h, tau = tensors[f"camera/{vid}/shape"]
        cameras[vid] = CameraView(width=int(w), height=int(h), fx=fx, fy=fy, cx=cx,
                                  cy=cy, w2c=np.asarray(tensors[f"camera/{vid}/w2c"],
                                                        dtype=float),
                                  time=float(np.clip(tau, 0.0, 1.0)), view_id=vid)
    return LoadedCheckpoint(cloud=cloud, field=fld, head=head, cameras=cameras,
                            iteration=int(tensors["meta/iteration"][0]),
                            train_ids=[int(i) for i in tensors.get("meta/train_ids", [])])


def load_checkpoint_state(path, dtype=np.float32):
    return load_state_tensors(load_checkpoint(path), dtype=dtype)


# --------------------------------------------------------------------------
# schedule driver
# --------------------------------------------------------------------------

def run_schedule(dataset, config, out_dir=None, progress=None):
    """Full two-stage run; writes checkpoints + NDJSON log when out_dir given.

    Returns (state, records).
    """
    state = init_state(dataset, config)
    records = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / "train_log.ndjson", "w")
    try:
        for it in range(config.total_iters):
            rec = train_step(state)
            records.append(rec)
            if log_f is not None:
                log_f.write(json.dumps(rec) + "\n")
            if out_dir is not None and config.checkpoint_every > 0 \
                    and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{state.iteration:06d}.esck",
                                state_to_tensors(state))
            if progress is not None:
                progress(rec)
    finally:
        if log_f is not None:
            log_f.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final.esck", state_to_tensors(state))
        with open(out_dir / "config.json", "w") as f:
            json.dump(config.to_json(), f, indent=2)
    return state, records
