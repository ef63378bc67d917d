"""Model file format: a JSON manifest followed by little-endian tensor blobs.

Layout::

    QWTMODEL <version> <manifest-length>\\n
    <manifest: UTF-8 JSON, sorted keys>\\n
    <blob section>

Blob offsets in the manifest are relative to the start of the blob section.
Every blob carries a CRC-32. Quantized weights are stored as ``u8-packed``
codes: each row is a little-endian bitstream of ``bits``-wide codes, padded
to a whole byte.

Quantized files do not embed the full-precision weights. They point at the FP
model they came from (``reference``: relative path plus SHA-256), which
compensation and finetuning need as the teacher.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch

from .compensation import CompensationModule
from .errors import LoadError, ModelIOError
from .netgraph import ArchConfig, BlockNetwork, Mode, build_network
from .quantizer import QuantParams, QuantScheme

MAGIC = b"QWTMODEL"
FORMAT_VERSION = "1.0"
DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4"), "f16": np.dtype("<f2")}


# ------------------------------------------------------------------ packing


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.atleast_2d(np.asarray(codes)).astype(np.uint16)
    if codes.size and codes.max() >= (1 << bits):
        raise ValueError(f"code exceeds {bits} bits")
    rows, cols = codes.shape
    bitplanes = (codes[:, :, None] >> np.arange(bits, dtype=np.uint16)) & 1
    return np.packbits(bitplanes.reshape(rows, cols * bits).astype(np.uint8), axis=1, bitorder="little").tobytes()


def unpack_codes(buf: bytes, rows: int, cols: int, bits: int) -> np.ndarray:
    row_bytes = math.ceil(cols * bits / 8)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(rows, row_bytes)
    flat = np.unpackbits(raw, axis=1, count=cols * bits, bitorder="little").reshape(rows, cols, bits)
    return (flat.astype(np.uint16) << np.arange(bits, dtype=np.uint16)).sum(axis=2).astype(np.uint8)


def _blob_length(dtype: str, shape, bits: int | None) -> int:
    if dtype == "u8-packed":
        rows, cols = shape
        return rows * math.ceil(cols * bits / 8)
    return int(np.prod(shape, dtype=np.int64)) * DTYPES[dtype].itemsize


# ------------------------------------------------------------------- writer


class _BlobWriter:
    def __init__(self):
        self.entries: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, dtype: str, shape, payload: bytes, bits: int | None = None):
        entry = {"name": name, "dtype": dtype, "shape": [int(s) for s in shape],
                 "offset": self.offset, "length": len(payload), "crc32": zlib.crc32(payload)}
        if bits is not None:
            entry["bits"] = bits
        assert len(payload) == _blob_length(dtype, entry["shape"], bits)
        self.entries.append(entry)
        self.chunks.append(payload)
        self.offset += len(payload)

    def floats(self, name: str, t, dtype: str):
        a = np.asarray(t.numpy() if isinstance(t, torch.Tensor) else t)
        self.add(name, dtype, a.shape, a.astype(DTYPES[dtype]).tobytes())

    def packed(self, name: str, codes: np.ndarray, bits: int):
        codes = np.atleast_2d(codes)
        self.add(name, "u8-packed", codes.shape, pack_codes(codes, bits), bits)

    def qparams(self, prefix: str, p: QuantParams) -> dict:
        self.floats(f"{prefix}.scale", np.atleast_1d(p.scale), "f64")
        self.packed(f"{prefix}.zero_point", np.atleast_1d(p.zero_point)[None, :], p.bits)
        return {"bits": p.bits, "axis": p.axis, "scale": f"{prefix}.scale", "zero_point": f"{prefix}.zero_point"}


def _op_record(op) -> dict:
    return {"name": op.name, "kind": op.kind, "attrs": op.attrs, "params": sorted(op.params)}


def _structure(net: BlockNetwork) -> dict:
    return {
        "stem": [_op_record(o) for o in net.stem],
        "blocks": [{"d_in": b.d_in, "d_out": b.d_out, "ops": [_op_record(o) for o in b.ops]} for b in net.blocks],
        "neck": [_op_record(o) for o in net.neck],
        "head": _op_record(net.head),
    }


def _body_ops(net: BlockNetwork):
    yield from net.stem
    for b in net.blocks:
        yield from b.ops
    yield from net.neck


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _unjson_float(v):
    return float(v) if isinstance(v, str) else v


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode_model(net: BlockNetwork, path: Path | None = None) -> tuple[bytes, int]:
    """Serialize ``net``; returns ``(file_bytes, header_length)``."""
    w = _BlobWriter()
    quantized = net.state is not Mode.FP
    manifest: dict = {
        "format": "qwt-model",
        "format_version": FORMAT_VERSION,
        "arch": dataclasses.asdict(net.config),
        "state": net.state.value,
        "structure": _structure(net),
        "scheme": dataclasses.asdict(net.scheme) if net.scheme is not None else None,
        "meta": _jsonable({k: v for k, v in net.meta.items() if k != "fp_reference"}),
        "offsets_relative_to": "blob_section",
    }

    for op in _body_ops(net):
        for pname, t in op.params.items():
            key = f"{op.name}.{pname}"
            if quantized and key in net.weight_codes:
                continue
            w.floats(key, t, "f32")
    head = net.quant_head if quantized else net.head
    for pname, t in head.params.items():
        w.floats(f"{head.name}.{pname}", t, "f32")

    if quantized:
        wq = {}
        for key, p in net.weight_qparams.items():
            w.packed(f"{key}.codes", net.weight_codes[key], p.bits)
            wq[key] = {**w.qparams(key, p), "codes": f"{key}.codes"}
        manifest["weight_qparams"] = wq
        manifest["act_qparams"] = {name: w.qparams(f"act.{name}", p) for name, p in net.act_qparams.items()}
        ref = net.meta.get("fp_reference")
        if ref and path is not None:
            rel = os.path.relpath(ref["path"], Path(path).resolve().parent)
            manifest["reference"] = {"path": rel, "sha256": ref["sha256"]}
        else:
            manifest["reference"] = None

    if net.state is Mode.QUANT_QWT:
        comps = []
        for i, m in enumerate(net.compensation):
            if m.structure == "block_diagonal":
                g = m.group_size
                blocks = np.stack([m.weight[s:s + g, s:s + g] for s in range(0, m.d_in, g)])
                w.floats(f"comp.{i}.weight", blocks, "f16")
            else:
                w.floats(f"comp.{i}.weight", m.weight, "f16")
            w.floats(f"comp.{i}.bias", m.bias, "f16")
            comps.append({"index": i, "structure": m.structure, "group_size": m.group_size,
                          "d_in": m.d_in, "d_out": m.d_out, "r2": _jsonable(m.r2), "gated": m.gated,
                          "weight": f"comp.{i}.weight", "bias": f"comp.{i}.bias"})
        manifest["compensation"] = comps

    manifest["tensors"] = w.entries
    text = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    header = MAGIC + f" {FORMAT_VERSION} {len(text)}\n".encode("ascii") + text + b"\n"
    return header + b"".join(w.chunks), len(header)


def _default_mode(path):
    # mkstemp creates 0600 files; give the result the usual umask-derived mode
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(path, 0o666 & ~umask)


def save_model(net: BlockNetwork, path) -> int:
    """Write atomically (temp file + rename). Returns the manifest/header byte count."""
    path = Path(path)
    data, header_len = encode_model(net, path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            _default_mode(tmp)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise ModelIOError(f"cannot write model file {path}: {e}") from e
    return header_len


# ------------------------------------------------------------------- reader


def _parse_header(data: bytes, path) -> tuple[dict, int]:
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(MAGIC):
        raise LoadError(f"{path}: not a model file (bad magic)")
    try:
        _, version, length = data[:nl].decode("ascii").split(" ")
        length = int(length)
    except ValueError as e:
        raise LoadError(f"{path}: malformed header line") from e
    major = version.split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise LoadError(f"{path}: unsupported format_version {version}")
    start = nl + 1
    if start + length + 1 > len(data):
        raise LoadError(f"{path}: manifest of {length} bytes at offset {start} exceeds file size {len(data)}")
    try:
        manifest = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LoadError(f"{path}: malformed manifest: {e}") from e
    if manifest.get("format_version") != version:
        raise LoadError(f"{path}: format_version in manifest disagrees with header")
    return manifest, start + length + 1


class _BlobReader:
    def __init__(self, data: bytes, base: int, entries: list[dict], path):
        self.data = data
        self.base = base
        self.path = path
        self.entries = {}
        spans = []
        blob_len = len(data) - base
        for e in entries:
            for field in ("name", "dtype", "shape", "offset", "length", "crc32"):
                if field not in e:
                    raise LoadError(f"{path}: tensor entry missing field {field!r}")
            name = e["name"]
            if e["dtype"] not in (*DTYPES, "u8-packed"):
                raise LoadError(f"{path}: tensor {name}: unknown dtype {e['dtype']!r}")
            expect = _blob_length(e["dtype"], e["shape"], e.get("bits"))
            if expect != e["length"]:
                raise LoadError(f"{path}: tensor {name}: length {e['length']} does not match dtype/shape ({expect})")
            if e["offset"] < 0 or e["offset"] + e["length"] > blob_len:
                raise LoadError(
                    f"{path}: tensor {name} at offset {base + e['offset']} with length {e['length']} "
                    f"runs past end of file ({len(data)} bytes)"
                )
            spans.append((e["offset"], e["offset"] + e["length"], name))
            self.entries[name] = e
        spans.sort()
        for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise LoadError(f"{path}: tensors {n0} and {n1} overlap")

    def raw(self, name: str) -> tuple[dict, bytes]:
        e = self.entries.get(name)
        if e is None:
            raise LoadError(f"{self.path}: missing tensor {name!r}")
        s = self.base + e["offset"]
        payload = self.data[s:s + e["length"]]
        if zlib.crc32(payload) != e["crc32"]:
            raise LoadError(f"{self.path}: checksum mismatch in tensor {name!r}")
        return e, payload

    def floats(self, name: str) -> np.ndarray:
        e, payload = self.raw(name)
        if e["dtype"] not in DTYPES:
            raise LoadError(f"{self.path}: tensor {name!r} is not a float tensor")
        return np.frombuffer(payload, dtype=DTYPES[e["dtype"]]).astype(np.float64).reshape(e["shape"])

    def packed(self, name: str) -> np.ndarray:
        e, payload = self.raw(name)
        if e["dtype"] != "u8-packed":
            raise LoadError(f"{self.path}: tensor {name!r} is not packed")
        rows, cols = e["shape"]
        return unpack_codes(payload, rows, cols, e["bits"])

    def qparams(self, rec: dict, per_tensor: bool) -> QuantParams:
        scale = self.floats(rec["scale"])
        zp = self.packed(rec["zero_point"])[0].astype(np.int64)
        if per_tensor:
            scale, zp = scale[0], zp[0]
        return QuantParams(scale, zp, rec["bits"], rec["axis"])


def _field(manifest: dict, name: str, path):
    if name not in manifest:
        raise LoadError(f"{path}: manifest is missing field {name!r}")
    return manifest[name]


def load_model(path, resolve_reference: bool = True) -> BlockNetwork:
    """Rebuild a network. For quantized files the FP reference is loaded when present."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ModelIOError(f"cannot read model file {path}: {e}") from e
    manifest, base = _parse_header(data, path)
    reader = _BlobReader(data, base, _field(manifest, "tensors", path), path)
    try:
        cfg = ArchConfig(**_field(manifest, "arch", path))
        state = Mode(_field(manifest, "state", path))
    except (TypeError, ValueError) as e:
        raise LoadError(f"{path}: bad arch/state field: {e}") from e

    net = build_network(cfg, 0)
    if _structure(net) != _field(manifest, "structure", path):
        raise LoadError(f"{path}: structure does not match arch config")
    net.meta = {k: v for k, v in manifest.get("meta", {}).items()}
    quantized = state is not Mode.FP
    wq = manifest.get("weight_qparams", {}) if quantized else {}

    for op in _body_ops(net):
        for pname in op.params:
            key = f"{op.name}.{pname}"
            if key in wq:
                op.params[pname] = None
            else:
                op.params[pname] = torch.from_numpy(reader.floats(key))
    head = {p: torch.from_numpy(reader.floats(f"{net.head.name}.{p}")) for p in net.head.params}

    if not quantized:
        net.head.params.update(head)
        return net

    scheme = _field(manifest, "scheme", path)
    net.scheme = QuantScheme(**scheme) if scheme else None
    net.quant_head = dataclasses.replace(net.head, params=head, attrs=dict(net.head.attrs))
    for key, rec in wq.items():
        p = reader.qparams(rec, rec["axis"] is None)
        net.weight_qparams[key] = p
        net.weight_codes[key] = reader.packed(rec["codes"])
    for name, rec in _field(manifest, "act_qparams", path).items():
        net.act_qparams[name] = reader.qparams(rec, True)
    net.state = state
    net.fp_available = not wq

    if state is Mode.QUANT_QWT:
        comps = _field(manifest, "compensation", path)
        if len(comps) != net.depth:
            raise LoadError(f"{path}: compensation list has {len(comps)} entries for {net.depth} blocks")
        for rec in comps:
            wt = reader.floats(rec["weight"])
            if rec["structure"] == "block_diagonal":
                g = rec["group_size"]
                full = np.zeros((rec["d_out"], rec["d_in"]))
                for k, s in enumerate(range(0, rec["d_in"], g)):
                    full[s:s + g, s:s + g] = wt[k]
                wt = full
            net.compensation[rec["index"]] = CompensationModule(
                wt, reader.floats(rec["bias"]), rec["gated"], _unjson_float(rec["r2"]),
                rec["structure"], rec["group_size"])

    ref = manifest.get("reference")
    if ref:
        ref_path = (path.resolve().parent / ref["path"]).resolve()
        net.meta["fp_reference"] = {"path": str(ref_path), "sha256": ref["sha256"]}
        if resolve_reference and wq and ref_path.exists():
            attach_reference(net, ref_path, ref["sha256"])
    return net


def attach_reference(net: BlockNetwork, ref_path, sha256: str | None = None):
    """Fill the FP weights of a loaded quantized network from its FP model file."""
    ref_path = Path(ref_path)
    if sha256 is not None and file_sha256(ref_path) != sha256:
        raise LoadError(f"{ref_path}: checksum of FP reference does not match")
    fp = load_model(ref_path)
    if fp.state is not Mode.FP or fp.config != net.config:
        raise LoadError(f"{ref_path}: reference is not an FP model of the same architecture")
    for op, ref_op in zip(_body_ops(net), _body_ops(fp)):
        for pname, t in ref_op.params.items():
            if op.params[pname] is None:
                op.params[pname] = t
    net.head = fp.head
    net.fp_available = True
    net.meta["fp_reference"] = {"path": str(ref_path.resolve()), "sha256": file_sha256(ref_path)}


def set_reference(net: BlockNetwork, fp_path):
    net.meta["fp_reference"] = {"path": str(Path(fp_path).resolve()), "sha256": file_sha256(fp_path)}
