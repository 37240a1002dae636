"""File formats: PGM images, CSV tables, weight blobs and YAML configs."""
import csv
import os
import shutil
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigError, IoError, ShapeMismatch
from .network import ConvLayer, Network, UpsampleLayer

SCHEMA_VERSION = 1
WEIGHTS_MAGIC = b"SPWT"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, conv layer count: 16 bytes


# --------------------------------------------------------------------------
# PGM


def write_pgm(image, path):
    """Binary 8-bit PGM: ``P5\\n<W> <H>\\n255\\n`` then the pixels row-major."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeMismatch(f"PGM image must be 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        if np.issubdtype(img.dtype, np.integer) and img.size and (img.min() < 0 or img.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    H, W = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(img).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _pgm_tokens(data, count, pos):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos + 1  # one whitespace byte ends the header


def read_pgm(path):
    """Read a binary (P5) 8-bit PGM into a ``uint8`` array ``(H, W)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    toks, pos = _pgm_tokens(data, 4, 0)
    if toks[0] != b"P5":
        raise IoError(f"{path}: not a binary PGM (magic {toks[0]!r})")
    try:
        W, H, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise IoError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise IoError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pix = data[pos:pos + W * H]
    if len(pix) != W * H:
        raise IoError(f"{path}: expected {W * H} pixel bytes, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(H, W).copy()


def load_image_dir(directory, size, channels, count):
    """First ``count`` PGMs of a directory (sorted by name) as ``(B, C, M, M)`` in ``[0, 1]``."""
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise ConfigError(f"no .pgm images in {directory}")
    imgs = []
    for p in paths[:count]:
        img = read_pgm(p)
        if img.shape != (size, size):
            raise ConfigError(f"{p} is {img.shape[1]}x{img.shape[0]}, expected {size}x{size}")
        imgs.append(np.repeat(img[None].astype(np.float64) / 255.0, channels, axis=0))
    return np.stack(imgs)


# --------------------------------------------------------------------------
# CSV


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.9g" % float(v)
    if isinstance(v, (tuple, list)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def write_csv(rows, path, header):
    """UTF-8 CSV, header first, floats to 9 significant digits, LF line endings."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ShapeMismatch(f"row has {len(row)} fields, header has {len(header)}")
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_csv(path):
    """Header and rows of a CSV written by :func:`write_csv` (values left as strings)."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise IoError(f"{path} is empty")
    return rows[0], rows[1:]


def transfer_rows(field, layer=0):
    """Rows ``(layer, u, v, d, c, re, im)`` of a ``(M, N, D, C)`` complex field."""
    mats = np.asarray(field)
    M, N, D, C = mats.shape
    return [
        (layer, u, v, d, c, mats[u, v, d, c].real, mats[u, v, d, c].imag)
        for u in range(M) for v in range(N) for d in range(D) for c in range(C)
    ]


TRANSFER_HEADER = ["layer", "u", "v", "d", "c", "re", "im"]


def write_transfer_csv(fields_, path):
    """Several ``(M, N, D, C)`` fields in one CSV, tagged by their list position."""
    rows = []
    for l, f in enumerate(fields_):
        rows.extend(transfer_rows(getattr(f, "matrices", f), l))
    write_csv(rows, path, TRANSFER_HEADER)


def grid_rows(grid):
    g = np.asarray(grid)
    return [(u, v, g[u, v]) for u in range(g.shape[0]) for v in range(g.shape[1])]


def write_grid_csv(grid, path):
    write_csv(grid_rows(grid), path, ["u", "v", "value"])


# --------------------------------------------------------------------------
# weights


def dump_weights(net, path):
    """Little-endian blob: 16-byte header then each conv layer's weights and bias as float64."""
    convs = net.conv_layers
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(convs)))
            for layer in convs:
                fh.write(layer.weights.astype("<f8").tobytes())
                fh.write(layer.bias.astype("<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_weights(template, path):
    """Fill ``template``'s conv layers from a blob written by :func:`dump_weights`."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise IoError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise IoError(f"{path}: bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise IoError(f"{path}: unsupported version {version}")
    if count != template.depth:
        raise ShapeMismatch(f"blob has {count} conv layers, network has {template.depth}")
    need = 8 * sum(l.weights.size + l.bias.size for l in template.conv_layers)
    if len(data) - _HEADER.size != need:
        raise IoError(f"{path}: expected {need} payload bytes, found {len(data) - _HEADER.size}")
    theta = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    from .network import unflatten_params

    return unflatten_params(template, theta)


# --------------------------------------------------------------------------
# configuration


_LAYER_KEYS = {
    "conv": {"type", "in_channels", "out_channels", "kernel_size", "padding", "activation", "init_mean",
             "init_std", "zero_bias", "canvas"},
    "upsample": {"type", "ratio"},
}


def _experiment_fields():
    from .experiments import ExperimentConfig

    return {f.name for f in fields(ExperimentConfig)}


def read_config(path):
    """Parse and validate a YAML config file into a plain dict."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return validate_config(doc if doc is not None else {})


def validate_config(doc):
    """Check keys, types and ranges; returns the document with tuples for list fields."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    allowed = _experiment_fields() | {"schema_version", "network"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(doc)
    if "seed" in out:
        out["seed"] = _int(out["seed"], "seed", lo=0)
    for key in ("kernel_sizes", "means", "variants"):
        if key in out:
            if not isinstance(out[key], list):
                raise ConfigError(f"{key} must be a list")
            out[key] = tuple(out[key])
    if "network" in out:
        out["network"] = validate_network(out["network"])
    return out


def _int(v, name, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{name} must be >= {lo}")
    return v


def _num(v, name, lo=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    if not np.isfinite(v) or (lo is not None and v < lo):
        raise ConfigError(f"{name} out of range: {v!r}")
    return float(v)


def validate_network(spec):
    """Validate a ``network`` section: ``size``, optional ``learning_rate`` and ``layers``."""
    if not isinstance(spec, dict):
        raise ConfigError("network must be a mapping")
    unknown = sorted(set(spec) - {"size", "learning_rate", "layers"})
    if unknown:
        raise ConfigError(f"unknown network keys: {', '.join(unknown)}")
    size = spec.get("size", 8)
    size = (size, size) if isinstance(size, int) else size
    if not isinstance(size, (list, tuple)) or len(size) != 2:
        raise ConfigError("network.size must be an integer or a pair")
    size = tuple(_int(s, "network.size", lo=1) for s in size)
    layers = spec.get("layers")
    if not isinstance(layers, list) or not layers:
        raise ConfigError("network.layers must be a non-empty list")
    checked = []
    for i, l in enumerate(layers):
        if not isinstance(l, dict) or l.get("type") not in _LAYER_KEYS:
            raise ConfigError(f"layer {i}: type must be one of {sorted(_LAYER_KEYS)}")
        extra = sorted(set(l) - _LAYER_KEYS[l["type"]])
        if extra:
            raise ConfigError(f"layer {i}: unknown keys {', '.join(extra)}")
        l = dict(l)
        if l["type"] == "upsample":
            l["ratio"] = _int(l.get("ratio", 2), f"layer {i} ratio", lo=2)
        else:
            for k in ("in_channels", "out_channels", "kernel_size"):
                if k not in l:
                    raise ConfigError(f"layer {i}: missing {k}")
                l[k] = _int(l[k], f"layer {i} {k}", lo=1)
            l["init_mean"] = _num(l.get("init_mean", 0.0), f"layer {i} init_mean")
            l["init_std"] = _num(l.get("init_std", 0.1), f"layer {i} init_std", lo=0)
            l["zero_bias"] = bool(l.get("zero_bias", False))
        checked.append(l)
    return {"size": size, "learning_rate": _num(spec.get("learning_rate", 0.01), "learning_rate", lo=0),
            "layers": checked}


def network_from_config(spec, seed=42):
    """Network template described by a validated ``network`` section."""
    layers = []
    try:
        for l in spec["layers"]:
            if l["type"] == "upsample":
                layers.append(UpsampleLayer(l["ratio"]))
                continue
            kw = {k: l[k] for k in ("padding", "activation", "canvas") if k in l}
            layers.append(ConvLayer.template(
                l["in_channels"], l["out_channels"], l["kernel_size"], init_mean=l["init_mean"],
                init_std=l["init_std"], zero_bias=l["zero_bias"], **kw,
            ))
        return Network(tuple(layers), learning_rate=spec["learning_rate"], seed=seed)
    except ValueError as exc:
        raise ConfigError(f"invalid network: {exc}") from exc


def config_to_yaml(cfg):
    """Deterministic YAML rendering of an experiment config (as written next to results)."""
    d = {"schema_version": SCHEMA_VERSION}
    for k, v in cfg.to_dict().items():
        d[k] = list(v) if isinstance(v, tuple) else v
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=None)


# --------------------------------------------------------------------------
# report directories


def report_dir(out_dir, experiment, seed):
    return Path(out_dir) / experiment / f"seed-{seed}"


def write_report(report, out_dir, cfg=None):
    """Write a report under ``<out>/<experiment>/seed-<seed>/``; returns that path.

    Files are staged in a sibling directory and moved into place at the end,
    so a failure never leaves a half-written result directory.
    """
    final = report_dir(out_dir, report.experiment, report.seed)
    stage = final.with_name(final.name + ".partial")
    try:
        if stage.exists():
            shutil.rmtree(stage)
        stage.mkdir(parents=True)
        write_csv(
            [(n, ";".join(str(i) for i in idx), v) for n, idx, v in report.rows],
            stage / "metrics.csv", ["name", "index", "value"],
        )
        write_csv(
            [("check", k, v) for k, v in sorted(report.checks.items())]
            + [("flag", k, v) for k, v in sorted(report.flags.items())],
            stage / "checks.csv", ["kind", "name", "value"],
        )
        for name, (header, rows) in sorted(report.tables.items()):
            write_csv(rows, stage / f"{name}.csv", header)
        for name, img in sorted(report.images.items()):
            write_pgm(img, stage / f"{name}.pgm")
        if cfg is not None:
            (stage / "config.yaml").write_text(config_to_yaml(cfg), encoding="utf-8")
        if final.exists():
            shutil.rmtree(final)
        os.replace(stage, final)
    except OSError as exc:
        shutil.rmtree(stage, ignore_errors=True)
        raise IoError(f"cannot write report to {final}: {exc}") from exc
    except Exception:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    report.artifacts = sorted(p.name for p in final.iterdir())
    return final
