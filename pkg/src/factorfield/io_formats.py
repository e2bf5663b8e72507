"""File formats: images, SDF samples, checkpoints, metric logs, configs.

All multi-byte binary encodings are little-endian. Every format round-trips
bit-exactly; checkpoints serialize tensors in sorted-name order so files are
byte-deterministic.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import factors, model, transforms
from .params import ParamStore, ParamTensor

CHECKPOINT_MAGIC = b"FFLD"
CHECKPOINT_VERSION = 1
SDF_MAGIC = b"SDF1"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Schedule:
    steps: int = 5000
    batch: int = 4096
    lr: float = 0.02
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    n_samples: int = 512  # ray samples for volume tasks
    log_every: int = 50


@dataclass
class MetricReport:
    """Per-step loss trajectory plus final run metrics."""

    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def log(self, step: int, loss: float, wall_ms: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.records.append({"step": step, "loss": float(loss), "wall_ms": float(wall_ms)})


def save_metrics(path, report: MetricReport) -> None:
    """One self-describing JSON record per line; final record tagged."""
    with open(path, "w") as fh:
        for rec in report.records:
            fh.write(json.dumps({"kind": "step", **rec}) + "\n")
        fh.write(json.dumps({"kind": "final", **report.final}) + "\n")


def load_metrics(path) -> MetricReport:
    report = MetricReport()
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "step":
                report.records.append(rec)
            else:
                report.final = rec
    return report


# ---------------------------------------------------------------------------
# images


def save_ppm(path, values: np.ndarray) -> None:
    """Binary P6 PPM from float values in [0, 1] (H, W, 3)."""
    arr = np.clip(np.asarray(values), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError("PPM requires (H, W, 3) values")
    h, w, _ = arr.shape
    data = np.round(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header at byte {pos}")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise FormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    need = w * h * 3
    pixels = raw[pos : pos + need]
    if len(pixels) < need:
        raise FormatError(f"{path}: truncated pixel data, missing {need - len(pixels)} bytes")
    data = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def save_image(path, values: np.ndarray) -> None:
    """PNG (via Pillow) or PPM by extension; bytes are v = round(value*255)."""
    path = str(path)
    if path.endswith(".ppm"):
        save_ppm(path, values)
        return
    from PIL import Image

    arr = np.clip(np.asarray(values), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path)


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM to floats in [0, 1], shape (H, W, Q)."""
    path = str(path)
    if path.endswith(".ppm"):
        return load_ppm(path)
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("L", "RGB", "RGBA"):
            img = img.convert("RGB")
        data = np.asarray(img)
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# SDF sample files


def save_sdf_samples(path, points: np.ndarray, values: np.ndarray) -> None:
    """Header (magic, count u64) then per-record f32 (x, y, z, sdf)."""
    points = np.asarray(points, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) != len(values):
        raise FormatError("expected (N, 3) points and (N,) values")
    records = np.concatenate([points, values[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SDF_MAGIC)
        fh.write(struct.pack("<Q", len(points)))
        fh.write(records.tobytes())


def load_sdf_samples(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SDF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<Q", raw, 4)
    need = count * 16
    body = raw[12:]
    if len(body) != need:
        raise FormatError(f"{path}: record count {count} does not match file size")
    records = np.frombuffer(body, dtype="<f4").reshape(count, 4)
    return records[:, :3].astype(np.float64), records[:, 3].astype(np.float64)


# ---------------------------------------------------------------------------
# configuration text


def format_config(config: model.ModelConfig, schedule: Schedule | None = None) -> str:
    """Fully-resolved key=value text; parse_config inverts it exactly."""
    lines = []
    lines.append(f"dims={config.dims}")
    lines.append(f"connector={config.connector}")
    lines.append(f"mu={config.dropout_mu!r}")
    c = config.contraction
    lines.append(f"contraction={c.mode}")
    lines.append("bbox_min=" + ",".join(repr(v) for v in c.bbox_min))
    lines.append("bbox_max=" + ",".join(repr(v) for v in c.bbox_max))
    p = config.projection
    lines.append(f"projection={p.kind}")
    lines.append(f"out_dim={p.output_dim}")
    lines.append(f"proj_layers={p.layers}")
    lines.append(f"proj_width={p.width}")
    lines.append(f"proj_activation={p.activation}")
    lines.append(f"view_pe_levels={p.view_pe_levels}")
    lines.append(f"density_activation={p.density_activation}")
    lines.append(f"background={p.background!r}")
    if schedule is not None:
        lines.append(f"steps={schedule.steps}")
        lines.append(f"batch={schedule.batch}")
        lines.append(f"lr={schedule.lr!r}")
        lines.append(f"seed={schedule.seed}")
        lines.append(f"beta1={schedule.beta1!r}")
        lines.append(f"beta2={schedule.beta2!r}")
        lines.append(f"eps={schedule.eps!r}")
        lines.append(f"n_samples={schedule.n_samples}")
        lines.append(f"log_every={schedule.log_every}")
    for i, f in enumerate(config.factors):
        lines.append(f"[factor.{i}]")
        lines.append(f"kind={f.kind}")
        lines.append(f"transform={f.transform.kind}")
        if f.transform.frequencies:
            lines.append("freqs=" + ",".join(repr(v) for v in f.transform.frequencies))
        if f.transform.kind == transforms.HASHING:
            lines.append(f"hash_log2={f.table_log2_size}")
        if f.transform.pairs:
            lines.append("pairs=true")
        lines.append("channels=" + ",".join(str(v) for v in f.channels_per_level))
        if f.grid_resolutions:
            res = []
            for r in f.grid_resolutions:
                if isinstance(r, tuple):
                    res.append("x".join(str(v) for v in r))
                else:
                    res.append(str(r))
            lines.append("resolutions=" + ";".join(res))
        if f.kind == factors.MLP:
            lines.append(f"mlp_layers={f.mlp_layers}")
            lines.append(f"mlp_width={f.mlp_width}")
            lines.append(f"mlp_activation={f.mlp_activation}")
        if f.axis_rotation:
            lines.append(f"rotation={f.axis_rotation}")
        lines.append(f"shared={'true' if f.shared else 'false'}")
    return "\n".join(lines) + "\n"


_TOP_KEYS = {
    "preset", "dims", "connector", "mu", "contraction", "bbox_min", "bbox_max",
    "projection", "out_dim", "proj_layers", "proj_width", "proj_activation",
    "view_pe_levels", "density_activation", "background",
    "steps", "batch", "lr", "seed", "beta1", "beta2", "eps", "n_samples",
    "log_every", "eta", "levels", "freqs", "coef_res", "signal_extent",
}
_FACTOR_KEYS = {
    "kind", "transform", "freqs", "hash_log2", "pairs", "channels",
    "resolutions", "mlp_layers", "mlp_width", "mlp_activation", "rotation",
    "shared",
}


def _parse_float_list(text):
    return tuple(float(v) for v in text.split(",") if v != "")


def _parse_bool(text, lineno):
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ConfigError(f"line {lineno}: expected a boolean, got {text!r}")


def parse_config(text: str):
    """Resolve config text to (ModelConfig, Schedule).

    A ``preset`` key seeds defaults; explicit keys and [factor.N] sections
    override them. Unknown keys are errors with line numbers.
    """
    top: dict = {}
    factor_sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section.startswith("factor."):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            try:
                idx = int(section.split(".", 1)[1])
            except ValueError:
                raise ConfigError(f"line {lineno}: bad factor index in [{section}]") from None
            current = factor_sections.setdefault(idx, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if current is None:
            if key not in _TOP_KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = (value, lineno)
        else:
            if key not in _FACTOR_KEYS:
                raise ConfigError(f"line {lineno}: unknown factor key {key!r}")
            current[key] = (value, lineno)

    def top_val(key, default=None):
        return top[key][0] if key in top else default

    def to_int(key, default):
        if key not in top:
            return default
        value, lineno = top[key]
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be an integer") from None

    def to_float(key, default):
        if key not in top:
            return default
        value, lineno = top[key]
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} must be a number") from None

    schedule = Schedule(
        steps=to_int("steps", 5000),
        batch=to_int("batch", 4096),
        lr=to_float("lr", 0.02),
        seed=to_int("seed", 0),
        beta1=to_float("beta1", 0.9),
        beta2=to_float("beta2", 0.99),
        eps=to_float("eps", 1e-15),
        n_samples=to_int("n_samples", 512),
        log_every=to_int("log_every", 50),
    )

    dims = to_int("dims", 2)
    preset_name = top_val("preset")
    if preset_name is not None and not factor_sections:
        kwargs = {}
        if "eta" in top:
            kwargs["eta"] = to_int("eta", None)
        if "levels" in top:
            kwargs["levels"] = to_int("levels", 6)
        if "freqs" in top:
            kwargs["frequencies"] = _parse_float_list(top["freqs"][0])
        if "coef_res" in top:
            kwargs["coef_resolution"] = to_int("coef_res", None)
        if "signal_extent" in top:
            kwargs["signal_extent"] = to_float("signal_extent", None)
        if "bbox_min" in top:
            kwargs["bbox_min"] = _parse_float_list(top["bbox_min"][0])
        if "bbox_max" in top:
            kwargs["bbox_max"] = _parse_float_list(top["bbox_max"][0])
        if "projection" in top:
            kwargs["projection_kind"] = top_val("projection")
        if "out_dim" in top:
            kwargs["out_dim"] = to_int("out_dim", 3)
        if "mu" in top:
            kwargs["dropout_mu"] = to_float("mu", 0.1)
        try:
            config = model.preset(preset_name, dims=dims, **kwargs)
        except ValueError as exc:
            raise ConfigError(f"line {top['preset'][1]}: {exc}") from None
        return config, schedule
    if preset_name is not None:
        raise ConfigError("a config may use either a preset or explicit [factor.N] sections")
    if not factor_sections:
        raise ConfigError("config defines no factors and no preset")

    factor_specs = []
    for idx in sorted(factor_sections):
        sec = factor_sections[idx]

        def sec_val(key, default=None):
            return sec[key][0] if key in sec else default

        tkind = sec_val("transform", transforms.IDENTITY)
        freqs = _parse_float_list(sec_val("freqs", "")) if "freqs" in sec else ()
        pairs = _parse_bool(*sec["pairs"]) if "pairs" in sec else False
        hash_log2 = int(sec_val("hash_log2", 19))
        try:
            tspec = transforms.TransformSpec(tkind, freqs, hash_table_log2_size=hash_log2, pairs=pairs)
        except ValueError as exc:
            raise ConfigError(f"factor {idx}: {exc}") from None
        channels = tuple(int(v) for v in sec_val("channels", "1").split(","))
        resolutions = []
        for part in sec_val("resolutions", "").split(";"):
            if not part:
                continue
            if "x" in part:
                resolutions.append(tuple(int(v) for v in part.split("x")))
            else:
                resolutions.append(int(part))
        try:
            spec = factors.FactorSpec(
                kind=sec_val("kind", factors.DENSE_GRID),
                transform=tspec,
                channels_per_level=channels,
                grid_resolutions=tuple(resolutions),
                mlp_layers=int(sec_val("mlp_layers", 2)),
                mlp_width=int(sec_val("mlp_width", 32)),
                mlp_activation=sec_val("mlp_activation", "relu"),
                table_log2_size=hash_log2,
                axis_rotation=int(sec_val("rotation", 0)),
                shared=_parse_bool(*sec["shared"]) if "shared" in sec else False,
            )
        except ValueError as exc:
            raise ConfigError(f"factor {idx}: {exc}") from None
        factor_specs.append(spec)

    projection = model.ProjectionSpec(
        kind=top_val("projection", model.MLP_PROJ),
        output_dim=to_int("out_dim", 3),
        layers=to_int("proj_layers", 2),
        width=to_int("proj_width", 64),
        activation=top_val("proj_activation", "relu"),
        view_pe_levels=to_int("view_pe_levels", 2),
        density_activation=top_val("density_activation", "softplus"),
        background=to_float("background", 1.0),
    )
    contraction = transforms.ContractionSpec(
        top_val("contraction", "bounded"),
        _parse_float_list(top_val("bbox_min", ",".join(["0.0"] * dims))),
        _parse_float_list(top_val("bbox_max", ",".join(["1.0"] * dims))),
    )
    try:
        config = model.ModelConfig(
            dims=dims,
            factors=tuple(factor_specs),
            connector=top_val("connector", model.PRODUCT),
            projection=projection,
            contraction=contraction,
            dropout_mu=to_float("mu", 0.1),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config, schedule


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config_text: str, store: ParamStore) -> None:
    """Write magic, version, config text, then tensors sorted by name."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    encoded = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    names = store.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        pt = store[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", _DTYPE_CODES[pt.values.dtype]))
        buf.write(struct.pack("<B", pt.values.ndim))
        for extent in pt.values.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(struct.pack("<B", 1 if pt.learnable else 0))
        buf.write(np.ascontiguousarray(pt.values).astype(pt.values.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read back (config_text, ParamStore). Bit-exact inverse of save."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (config_len,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    config_text = raw[pos : pos + config_len].decode("utf-8")
    pos += config_len
    (n_tensors,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    store = None
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dtype_code, rank = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if dtype_code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {dtype_code}")
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        (learnable,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dtype = _CODE_DTYPES[dtype_code]
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=count, offset=pos)
        pos += values.nbytes
        if store is None:
            store = ParamStore(dtype=dtype)
        values = values.astype(dtype).reshape(shape)
        pt = ParamTensor(name, values.copy(), np.zeros(shape, dtype=dtype), bool(learnable))
        store.adopt(pt)
    if store is None:
        store = ParamStore()
    return config_text, store
