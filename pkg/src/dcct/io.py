"""Images (binary PPM), checkpoints, score tables and config files.

Checkpoint layout (all integers little-endian)::

    b"DCCT" | u16 version | u32 meta_len | meta (UTF-8 JSON) |
    u32 n_tensors | n x [u16 name_len | name | u8 ndim | ndim x u32 | u64 offset] |
    float32 payload

Offsets are relative to the start of the payload. Everything is validated
before any payload byte is interpreted.
"""
from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import condmodel as cm, numcore as nc
from .pipeline import Classifier, ClassifierConfig, CompatibilityError, DetectorBundle, TrainConfig

MAGIC = b"DCCT"
VERSION = 1
IMAGE_SUFFIXES = (".ppm",)


class ParseError(ValueError):
    """Malformed image or checkpoint file."""


class CheckpointVersionError(ParseError):
    pass


# ----------------------------------------------------------------------------
# atomic writes


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------------
# PPM


def _ppm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens (comments allowed)."""
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("PPM header ended early")
        toks.append(buf[start:pos])
    return toks, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    toks, pos = _ppm_tokens(buf, 4)
    if toks[0] != b"P6":
        raise ParseError(f"not a binary PPM (magic {toks[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as e:
        raise ParseError(f"non-numeric PPM header field: {e}") from None
    if w <= 0 or h <= 0:
        raise ParseError(f"bad PPM extents {w}x{h}")
    if maxval != 255:
        raise ParseError(f"only 8-bit PPM is supported (maxval {maxval})")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated PPM payload: {len(buf) - pos} of {need} bytes")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / 255.0


def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ParseError(f"unsupported image format {path.suffix!r} (binary PPM only)")
    return decode_ppm(path.read_bytes())


def save_image(image, path):
    atomic_write(path, encode_ppm(image))


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root) -> tuple[list[Path], np.ndarray]:
    """``root/photographic`` and ``root/generated``; label = subdirectory (0/1)."""
    root = Path(root)
    paths, labels = [], []
    for lab, sub in enumerate(("photographic", "generated")):
        if (root / sub).is_dir():
            found = list_images(root / sub)
            paths += found
            labels += [lab] * len(found)
    return paths, np.asarray(labels, dtype=int)


# ----------------------------------------------------------------------------
# checkpoint container


def write_container(meta: dict, tensors: dict) -> bytes:
    names = sorted(tensors)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    head = [MAGIC, struct.pack("<HI", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(names))]
    payload, offset = [], 0
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                    + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", offset))
        payload.append(arr.tobytes())
        offset += arr.nbytes
    return b"".join(head + payload)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.buf):
            raise ParseError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(buf: bytes) -> tuple[dict, dict]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("not a DCCT checkpoint (bad magic)")
    version, meta_len = r.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"corrupt checkpoint metadata: {e}") from None
    (count,) = r.unpack("<I", "tensor count")
    directory = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(nlen, "tensor name").decode()
        except UnicodeDecodeError:
            raise ParseError("corrupt tensor name") from None
        (ndim,) = r.unpack("<B", "tensor rank")
        if ndim > 4:
            raise ParseError(f"tensor {name!r} has rank {ndim} > 4")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        (offset,) = r.unpack("<Q", "tensor offset")
        directory.append((name, shape, offset))
    base = r.pos
    payload_len = len(buf) - base
    tensors = {}
    for name, shape, offset in directory:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset > payload_len or nbytes > payload_len - offset:
            raise ParseError(f"tensor {name!r} overruns the payload")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=base + offset).reshape(shape).astype(np.float32)
    return meta, tensors


# ----------------------------------------------------------------------------
# model (de)serialisation


def _cond_meta(m: cm.CondModel) -> dict:
    return {"config": asdict(m.config), "meta": m.meta}


def _cond_from(meta: dict, tensors: dict) -> cm.CondModel:
    cfg = cm.CondNetConfig(**meta["config"])
    params = {k: nc.Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    expected = cm.init_params(cfg, 0)
    if set(expected) != set(params):
        raise ParseError("checkpoint tensors do not match the stored model config")
    for k, v in expected.items():
        if v.shape != params[k].shape:
            raise ParseError(f"tensor {k!r} has shape {params[k].shape}, config implies {v.shape}")
    return cm.CondModel(cfg, params, dict(meta["meta"]))


def _cls_tensors(c: Classifier) -> dict:
    out = {k: v.data for k, v in c.params.items()}
    out["norm.mu"], out["norm.sd"] = c.norm_mu, c.norm_sd
    return out


def _cls_from(meta: dict, tensors: dict) -> Classifier:
    cfg = ClassifierConfig(**meta["config"])
    mu, sd = tensors.pop("norm.mu"), tensors.pop("norm.sd")
    params = {k: nc.Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    return Classifier(cfg, params, mu, sd)


def checkpoint_bytes(obj) -> bytes:
    if isinstance(obj, cm.CondModel):
        return write_container({"kind": "condmodel", **_cond_meta(obj)}, {k: v.data for k, v in obj.params.items()})
    if isinstance(obj, DetectorBundle):
        meta = {"kind": "bundle", "threshold": obj.threshold, "train_config": asdict(obj.config),
                "classifier": asdict(obj.classifier.config)}
        tensors = {f"cls/{k}": v for k, v in _cls_tensors(obj.classifier).items()}
        for role in ("p", "q"):
            m = getattr(obj, role)
            if m is not None:
                meta[role] = _cond_meta(m)
                tensors.update({f"{role}/{k}": v.data for k, v in m.params.items()})
        return write_container(meta, tensors)
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def checkpoint_from_bytes(buf: bytes):
    meta, tensors = read_container(buf)
    try:
        kind = meta["kind"]
        if kind == "condmodel":
            return _cond_from(meta, tensors)
        if kind == "bundle":
            parts = {}
            for role in ("p", "q", "cls"):
                pre = role + "/"
                parts[role] = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
            p = _cond_from(meta["p"], parts["p"]) if "p" in meta else None
            q = _cond_from(meta["q"], parts["q"]) if "q" in meta else None
            clf = _cls_from({"config": meta["classifier"]}, parts["cls"])
            return DetectorBundle(p, q, clf, float(meta["threshold"]), TrainConfig(**meta["train_config"]))
    except (KeyError, TypeError) as e:
        raise ParseError(f"incomplete checkpoint metadata: {e}") from None
    raise ParseError(f"unknown checkpoint kind {kind!r}")


def save_checkpoint(obj, path):
    atomic_write(path, checkpoint_bytes(obj))


def load_checkpoint(path, expect_t: int | None = None):
    obj = checkpoint_from_bytes(Path(path).read_bytes())
    if expect_t is not None:
        models = [obj] if isinstance(obj, cm.CondModel) else [m for m in (obj.p, obj.q) if m is not None]
        for m in models:
            if m.t != expect_t:
                raise CompatibilityError(f"checkpoint has t={m.t} but the pipeline is configured with t={expect_t}")
    return obj


# ----------------------------------------------------------------------------
# text tables


def fmt_float(v) -> str:
    return f"{float(v):.6f}"


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write(path, buf.getvalue())


def read_scores(path) -> np.ndarray:
    """Scores from a CSV with a ``D`` or ``score`` column, or one number per line."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return np.zeros(0)
    first = lines[0].split(",")
    for col in ("D", "score"):
        if col in first:
            rows = csv.DictReader(_io.StringIO(text))
            return np.array([float(r[col]) for r in rows])
    try:
        return np.array([float(ln.split(",")[-1]) for ln in lines])
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return TrainConfig.from_kv(Path(path).read_text(), base)
