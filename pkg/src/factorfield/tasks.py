"""Training objectives and data pipelines: 2D images, SDFs, toy radiance
fields and multi-signal shared-basis fitting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model, tape
from .io_formats import MetricReport, Schedule
from .params import AdamState, ParamStore, adam_step, zero_grads
from .tape import Node

PSNR_CEILING = 99.0


class TrainingDiverged(RuntimeError):
    pass


def psnr(pred: np.ndarray, target: np.ndarray, ceiling: float = PSNR_CEILING) -> float:
    """-10 log10(MSE) for signals in [0, 1], capped for a perfect fit."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return ceiling
    return min(ceiling, -10.0 * np.log10(mse))


def giou(pred_sdf: np.ndarray, true_sdf: np.ndarray) -> float:
    """IoU of the positive-sign sets; 1.0 when both sets are empty."""
    p = np.asarray(pred_sdf) > 0
    t = np.asarray(true_sdf) > 0
    if p.shape != t.shape:
        raise ValueError("pred and true sample counts differ")
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


# ---------------------------------------------------------------------------
# signals


@dataclass
class ImageSignal:
    """Float image in [0, 1]; pixel centers map to (i + 0.5) in pixel units."""

    values: np.ndarray  # (H, W, Q)
    mask: np.ndarray | None = None  # True where the pixel is observed

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)
        if self.values.ndim != 3 or self.values.shape[2] not in (1, 3, 4):
            raise ValueError("image values must be (H, W, Q) with Q in {1, 3, 4}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def coords_targets(self, observed_only: bool = True):
        h, w, q = self.values.shape
        ys, xs = np.mgrid[0:h, 0:w]
        coords = np.stack([(xs + 0.5), (ys + 0.5)], axis=-1).reshape(-1, 2).astype(np.float64)
        targets = self.values.reshape(-1, q)
        if observed_only and self.mask is not None:
            keep = self.mask.reshape(-1)
            coords, targets = coords[keep], targets[keep]
        return coords, targets

    def bbox(self):
        return (0.0, 0.0), (float(self.width), float(self.height))


@dataclass
class SdfSampleSet:
    points: np.ndarray  # (N, 3)
    values: np.ndarray  # (N,)
    near_surface: np.ndarray | None = None  # bool tags

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (np.isfinite(self.points).all() and np.isfinite(self.values).all()):
            raise ValueError("SDF samples must be finite")

    @property
    def near_fraction(self) -> float:
        if self.near_surface is None:
            return 0.0
        return float(np.mean(self.near_surface))


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit length
    rgb: np.ndarray | None  # (R, 3) targets, None for pure rendering
    near: float
    far: float

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("ray directions must be unit length")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if not self.near < self.far:
            raise ValueError("near must be < far")

    def __len__(self) -> int:
        return len(self.origins)

    def take(self, idx) -> "RayBatch":
        rgb = None if self.rgb is None else self.rgb[idx]
        return RayBatch(self.origins[idx], self.directions[idx], rgb, self.near, self.far)


# ---------------------------------------------------------------------------
# volume rendering


def composite_alpha(alphas: np.ndarray, colors: np.ndarray, background=0.0):
    """Alpha-composite given per-sample alphas directly.

    Returns (pixel colors, per-sample weights, residual transmittance) with
    weights_i = T_i * alpha_i and T_i the product of (1 - alpha_j) for j < i.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    trans = np.cumprod(1.0 - alphas, axis=-1)
    t_excl = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    weights = t_excl * alphas
    residual = trans[..., -1]
    out = (weights[..., None] * colors).sum(axis=-2) + residual[..., None] * np.asarray(background)
    return out, weights, residual


def stratified_ts(n_rays: int, n_samples: int, near: float, far: float, rng) -> np.ndarray:
    """Stratified sample depths: one uniform draw per bin per ray."""
    edges = np.linspace(near, far, n_samples + 1)
    lo, width = edges[:-1], edges[1] - edges[0]
    if rng is None:
        return np.broadcast_to(lo + width / 2.0, (n_rays, n_samples)).copy()
    return lo + width * rng.random((n_rays, n_samples))


def _deltas(ts: np.ndarray, far: float) -> np.ndarray:
    d = np.diff(ts, axis=1)
    last = np.maximum(far - ts[:, -1:], 1e-6)
    return np.concatenate([d, last], axis=1)


def render_rays(
    config: model.ModelConfig,
    store: ParamStore,
    rays: RayBatch,
    n_samples: int,
    rng=None,
    training: bool = False,
) -> Node:
    """Differentiable ray rendering through the volume projection head.

    Per-sample alpha_i = 1 - exp(-sigma_i delta_i); transmittance comes from
    the exclusive cumulative sum of sigma * delta, so the conservation
    identity sum(T_i alpha_i) + T_residual = 1 holds for any density.
    """
    n_rays = len(rays)
    ts = stratified_ts(n_rays, n_samples, rays.near, rays.far, rng if training else None)
    pts = rays.origins[:, None, :] + ts[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape)
    sigma, rgb = model.query_field(
        config, store, pts.reshape(-1, 3), dirs.reshape(-1, 3), training=training, rng=rng
    )
    sigma = tape.reshape(sigma, (n_rays, n_samples))
    rgb = tape.reshape(rgb, (n_rays, n_samples, 3))
    deltas = _deltas(ts, rays.far).astype(store.dtype)
    tau = sigma * Node(deltas)
    accum = tape.cumsum(tau, axis=1)
    t_excl = tape.exp(-(accum - tau))
    alpha = 1.0 - tape.exp(-tau)
    weights = t_excl * alpha
    out = tape.nsum(tape.reshape(weights, (n_rays, n_samples, 1)) * rgb, axis=1)
    residual = tape.exp(-accum[:, -1:])
    background = np.full(3, config.projection.background, dtype=store.dtype)
    return out + residual * Node(background)


def render_rays_field(field_fn, rays: RayBatch, n_samples: int, background=1.0, rng=None):
    """Render an analytic (sigma, rgb) field; used to synthesize training data."""
    n_rays = len(rays)
    ts = stratified_ts(n_rays, n_samples, rays.near, rays.far, rng)
    pts = rays.origins[:, None, :] + ts[..., None] * rays.directions[:, None, :]
    sigma, rgb = field_fn(pts.reshape(-1, 3))
    sigma = np.asarray(sigma, dtype=np.float64).reshape(n_rays, n_samples)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(n_rays, n_samples, 3)
    alphas = 1.0 - np.exp(-sigma * _deltas(ts, rays.far))
    out, _, _ = composite_alpha(alphas, rgb, background)
    return out


# ---------------------------------------------------------------------------
# cameras


def look_at_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera matrix (3x4); camera looks along -z toward target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return np.concatenate([rot, position[:, None]], axis=1)


def orbit_poses(n: int, radius: float, elevation: float = 0.5) -> list[np.ndarray]:
    """Poses on a circle around the origin at constant elevation."""
    poses = []
    for i in range(n):
        phi = 2.0 * np.pi * i / n
        z = radius * elevation / np.sqrt(1.0 + elevation**2)
        r = radius / np.sqrt(1.0 + elevation**2)
        poses.append(look_at_pose((r * np.cos(phi), r * np.sin(phi), z)))
    return poses


def camera_rays(pose: np.ndarray, width: int, height: int, focal: float):
    """Pinhole rays through every pixel center. Returns origins, unit dirs."""
    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    cam = np.stack(
        [(xs - width / 2.0) / focal, (ys - height / 2.0) / focal, np.ones_like(xs)], axis=-1
    )
    dirs = cam.reshape(-1, 3) @ pose[:, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose[:, 3], dirs.shape).copy()
    return origins, dirs


# ---------------------------------------------------------------------------
# synthetic data


def band_limited_image(width: int, height: int, max_freq: float = 12.0, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Random sum of low-frequency sinusoids, normalized into [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width]
    u, v = xs / width, ys / height
    img = np.zeros((height, width, channels))
    for c in range(channels):
        acc = np.zeros((height, width))
        for _ in range(24):
            fx, fy = rng.uniform(-max_freq, max_freq, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.2, 1.0) / (1.0 + np.hypot(fx, fy) / 4.0)
            acc += amp * np.sin(2 * np.pi * (fx * u + fy * v) + phase)
        img[:, :, c] = acc
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def sphere_sdf(points: np.ndarray, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Positive inside, negative outside."""
    d = np.asarray(points, dtype=np.float64) - np.asarray(center)
    return radius - np.linalg.norm(d, axis=-1)


def torus_sdf(points: np.ndarray, major: float = 0.6, minor: float = 0.25) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    q = np.hypot(np.hypot(p[..., 0], p[..., 1]) - major, p[..., 2])
    return minor - q


def _sphere_surface(n, rng, radius=1.0):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return radius * v


def _torus_surface(n, rng, major=0.6, minor=0.25):
    theta = rng.uniform(0, 2 * np.pi, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    ring = (major + minor * np.cos(phi))
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=-1)


SDF_SHAPES = {
    "sphere": (sphere_sdf, _sphere_surface),
    "torus": (torus_sdf, _torus_surface),
}


def make_sdf_samples(shape: str, count: int, seed: int = 0, bbox=(-1.0, 1.0), near_fraction: float = 0.8) -> SdfSampleSet:
    """Training points for an analytic shape: near-surface points are surface
    samples plus Gaussian offsets (sigma = 1% of the bbox diagonal), the rest
    uniform in the box. ``bbox`` is (lo, hi) with scalar or per-axis bounds."""
    if shape not in SDF_SHAPES:
        raise ValueError(f"unknown shape {shape!r}; valid: {', '.join(SDF_SHAPES)}")
    sdf_fn, surface_fn = SDF_SHAPES[shape]
    rng = np.random.default_rng(seed)
    lo = np.broadcast_to(np.asarray(bbox[0], dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(bbox[1], dtype=np.float64), (3,))
    n_near = int(round(count * near_fraction))
    sigma = 0.01 * np.linalg.norm(hi - lo)
    near = surface_fn(n_near, rng) + rng.normal(scale=sigma, size=(n_near, 3))
    near = np.clip(near, lo, hi)
    uniform = rng.uniform(lo, hi, size=(count - n_near, 3))
    points = np.concatenate([near, uniform], axis=0)
    tags = np.zeros(count, dtype=bool)
    tags[:n_near] = True
    return SdfSampleSet(points, sdf_fn(points), tags)


@dataclass
class ToyScene:
    """Analytic emissive blob with closed-form (density, color)."""

    blob_radius: float = 0.5
    density_scale: float = 25.0
    bbox_min: tuple = (-1.2, -1.2, -1.2)
    bbox_max: tuple = (1.2, 1.2, 1.2)

    def field(self, points: np.ndarray):
        p = np.asarray(points, dtype=np.float64)
        r = np.linalg.norm(p, axis=-1)
        sigma = self.density_scale * np.exp(-((r / self.blob_radius) ** 2) * 2.0)
        rgb = np.clip(0.5 + 0.5 * p / self.blob_radius, 0.0, 1.0)
        return sigma, rgb


def make_toy_views(scene: ToyScene, n_views: int, width: int, height: int, n_samples: int = 128, radius: float = 2.5):
    """Deterministic renders of the analytic scene from orbit cameras."""
    focal = 1.1 * width
    near, far = radius - 1.4, radius + 1.4
    images, ray_batches = [], []
    for pose in orbit_poses(n_views, radius):
        origins, dirs = camera_rays(pose, width, height, focal)
        rays = RayBatch(origins, dirs, None, near, far)
        rgb = render_rays_field(scene.field, rays, n_samples, background=1.0)
        images.append(rgb.reshape(height, width, 3))
        ray_batches.append(RayBatch(origins, dirs, rgb, near, far))
    return images, ray_batches


# ---------------------------------------------------------------------------
# training loops


def _freeze(store: ParamStore, names) -> None:
    for name in names:
        store[name].learnable = False


def _ema_smooth(losses, beta=0.99):
    out, acc = [], None
    for x in losses:
        acc = x if acc is None else beta * acc + (1 - beta) * x
        out.append(acc)
    return out


def train_direct(
    config: model.ModelConfig,
    data,
    schedule: Schedule,
    store: ParamStore | None = None,
    freeze=(),
    eval_data=None,
) -> tuple[ParamStore, MetricReport]:
    """Fit direct observations (image pixels or SDF samples) with Adam + MSE."""
    if isinstance(data, ImageSignal):
        coords, targets = data.coords_targets()
    else:
        coords, targets = data.points, data.values[:, None]
    if len(coords) == 0:
        raise ValueError("empty training data")
    if store is None:
        store = model.new_store(config, seed=schedule.seed)
    if freeze:
        _freeze(store, freeze)
    adam = AdamState(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.eps)
    rng = np.random.default_rng(schedule.seed)
    report = MetricReport()
    t0 = time.perf_counter()
    for step in range(1, schedule.steps + 1):
        idx = rng.integers(0, len(coords), size=min(schedule.batch, len(coords)))
        pred = model.forward(config, store, coords[idx], training=True, rng=rng)
        err = pred - Node(targets[idx].astype(store.dtype))
        loss = tape.nmean(tape.square(err))
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        zero_grads(store)
        tape.backward(loss)
        adam_step(adam, store)
        if step % schedule.log_every == 0 or step == schedule.steps:
            report.log(step, loss_val, (time.perf_counter() - t0) * 1000.0)

    final = {"seed": schedule.seed, "steps": schedule.steps}
    final.update(model.param_count(config))
    if isinstance(data, ImageSignal):
        pred = evaluate_batched(config, store, coords)
        final["psnr"] = psnr(pred, targets)
        if data.mask is not None:
            all_coords, all_targets = data.coords_targets(observed_only=False)
            full = evaluate_batched(config, store, all_coords)
            hidden = ~data.mask.reshape(-1)
            if hidden.any():
                final["masked_psnr"] = psnr(full[hidden], all_targets[hidden])
    else:
        pred = evaluate_batched(config, store, coords)[:, 0]
        final["rmse"] = float(np.sqrt(np.mean((pred - data.values) ** 2)))
        final["mae"] = float(np.mean(np.abs(pred - data.values)))
        if eval_data is not None:
            ep = evaluate_batched(config, store, eval_data.points)[:, 0]
            final["giou"] = giou(ep, eval_data.values)
    final["time_s"] = time.perf_counter() - t0
    report.final = final
    return store, report


def evaluate_batched(config: model.ModelConfig, store: ParamStore, coords: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Dropout-free forward evaluation in chunks."""
    outs = []
    for start in range(0, len(coords), chunk):
        outs.append(model.forward(config, store, coords[start : start + chunk]).value)
    return np.concatenate(outs, axis=0)


def render_image(config, store, pose, width, height, focal, near, far, n_samples, chunk=4096):
    origins, dirs = camera_rays(pose, width, height, focal)
    outs = []
    for start in range(0, len(origins), chunk):
        rays = RayBatch(origins[start : start + chunk], dirs[start : start + chunk], None, near, far)
        outs.append(render_rays(config, store, rays, n_samples).value)
    return np.concatenate(outs, axis=0).reshape(height, width, 3)


def train_radiance(
    config: model.ModelConfig,
    train_rays: list,
    schedule: Schedule,
    store: ParamStore | None = None,
    heldout_rays: list | None = None,
) -> tuple[ParamStore, MetricReport]:
    """Inverse volume rendering against observed ray colors."""
    origins = np.concatenate([r.origins for r in train_rays], axis=0)
    dirs = np.concatenate([r.directions for r in train_rays], axis=0)
    rgb = np.concatenate([r.rgb for r in train_rays], axis=0)
    near, far = train_rays[0].near, train_rays[0].far
    pool = RayBatch(origins, dirs, rgb, near, far)
    if store is None:
        store = model.new_store(config, seed=schedule.seed)
    adam = AdamState(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.eps)
    rng = np.random.default_rng(schedule.seed)
    report = MetricReport()
    t0 = time.perf_counter()
    for step in range(1, schedule.steps + 1):
        idx = rng.integers(0, len(pool), size=min(schedule.batch, len(pool)))
        batch = pool.take(idx)
        pred = render_rays(config, store, batch, schedule.n_samples, rng=rng, training=True)
        loss = tape.nmean(tape.square(pred - Node(batch.rgb.astype(store.dtype))))
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        zero_grads(store)
        tape.backward(loss)
        adam_step(adam, store)
        if step % schedule.log_every == 0 or step == schedule.steps:
            report.log(step, loss_val, (time.perf_counter() - t0) * 1000.0)

    final = {"seed": schedule.seed, "steps": schedule.steps}
    final.update(model.param_count(config))
    if heldout_rays:
        preds, targets = [], []
        for rb in heldout_rays:
            for start in range(0, len(rb), 4096):
                sub = rb.take(np.arange(start, min(start + 4096, len(rb))))
                preds.append(render_rays(config, store, sub, schedule.n_samples).value)
                targets.append(sub.rgb)
        final["psnr"] = psnr(np.concatenate(preds), np.concatenate(targets))
    final["time_s"] = time.perf_counter() - t0
    report.final = final
    return store, report


# ---------------------------------------------------------------------------
# multi-signal shared-basis training


@dataclass
class MultiSignalSession:
    config: model.ModelConfig
    stores: list  # one ParamStore per signal; shared tensors are one object
    shared_names: list


def build_shared_session(config: model.ModelConfig, n_signals: int, seed: int = 0) -> MultiSignalSession:
    """Per-signal stores that physically share basis/projection tensors."""
    if n_signals < 1:
        raise ValueError("need at least one signal")
    stores = [model.new_store(config, seed=seed + j) for j in range(n_signals)]
    shared = model.shared_param_names(config, stores[0])
    for other in stores[1:]:
        for name in shared:
            other._params[name] = stores[0][name]
    return MultiSignalSession(config, stores, shared)


def train_shared(
    config: model.ModelConfig,
    signals: list,
    schedule: Schedule,
    session: MultiSignalSession | None = None,
) -> tuple[MultiSignalSession, MetricReport]:
    """Joint fitting: shared tensors accumulate gradients from every signal,
    coefficient tensors only from their own."""
    if session is None:
        session = build_shared_session(config, len(signals), seed=schedule.seed)
    if len(session.stores) != len(signals):
        raise ValueError("session/signal count mismatch")
    datasets = []
    for sig in signals:
        if not isinstance(sig, ImageSignal):
            raise ValueError("shared training currently handles image signals")
        datasets.append(sig.coords_targets())

    named = {}
    for j, store in enumerate(session.stores):
        for name in store.names():
            key = name if name in session.shared_names else f"s{j}:{name}"
            named[key] = store[name]
    tensors = [named[k] for k in sorted(named)]

    adam = AdamState(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.eps)
    rngs = [np.random.default_rng(schedule.seed + j) for j in range(len(signals))]
    report = MetricReport()
    t0 = time.perf_counter()
    for step in range(1, schedule.steps + 1):
        zero_grads(tensors)
        total = 0.0
        for j, (coords, targets) in enumerate(datasets):
            rng = rngs[j]
            idx = rng.integers(0, len(coords), size=min(schedule.batch, len(coords)))
            store = session.stores[j]
            pred = model.forward(config, store, coords[idx], training=True, rng=rng)
            loss = tape.nmean(tape.square(pred - Node(targets[idx].astype(store.dtype))))
            if not np.isfinite(float(loss.value)):
                raise TrainingDiverged(f"non-finite loss at step {step} (signal {j})")
            tape.backward(loss)
            total += float(loss.value)
        adam_step(adam, {k: named[k] for k in named})
        if step % schedule.log_every == 0 or step == schedule.steps:
            report.log(step, total / len(signals), (time.perf_counter() - t0) * 1000.0)

    final = {"seed": schedule.seed, "steps": schedule.steps, "signals": len(signals)}
    psnrs = []
    for j, (coords, targets) in enumerate(datasets):
        pred = evaluate_batched(config, session.stores[j], coords)
        psnrs.append(float(psnr(pred, targets)))
    final["psnr_per_signal"] = psnrs
    final["time_s"] = time.perf_counter() - t0
    report.final = final
    return session, report


def mean_coefficient_values(session: MultiSignalSession) -> dict:
    """Per-cell mean of each non-shared tensor across the session's signals;
    used to initialize coefficients for a new signal."""
    out = {}
    for name in session.stores[0].names():
        if name in session.shared_names:
            continue
        stacked = np.stack([s[name].values for s in session.stores])
        out[name] = stacked.mean(axis=0)
    return out


def adapt_to_new_signal(
    session: MultiSignalSession,
    config: model.ModelConfig,
    signal: ImageSignal,
    schedule: Schedule,
    init_from_mean: bool = True,
) -> tuple[ParamStore, MetricReport]:
    """Fit a new signal with the pretrained shared tensors frozen."""
    store = model.new_store(config, seed=schedule.seed)
    for name in session.shared_names:
        store._params[name] = session.stores[0][name]
    if init_from_mean:
        for name, values in mean_coefficient_values(session).items():
            store[name].values[...] = values
    return train_direct(config, signal, schedule, store=store, freeze=session.shared_names)
