"""Block-structured toy networks and their FP / quantized / compensated execution.

Activations flow as ``(batch, tokens, width)`` float64 tensors. MLPs carry a
single token, transformers carry a cls token plus patch tokens, and the 1x1-conv
ResNet carries one token per spatial position. Every token is one column of a
calibration matrix.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, StateError
from .quantizer import QuantParams, QuantScheme, RangeRecorder, dequantize, fake_quant_t

if TYPE_CHECKING:
    from .compensation import CompensationModule

ARCHS = ("mlp", "mini_transformer", "conv1x1_resnet")
QUANTIZED_KINDS = ("affine", "conv1x1_grouped")


class Mode(str, Enum):
    FP = "FP"
    QUANT = "QUANT"
    QUANT_QWT = "QUANT_QWT"


@dataclass(frozen=True)
class ArchConfig:
    arch: str = "mlp"
    depth: int = 3
    width: int = 64
    classes: int = 10
    input_dim: int = 32
    heads: int = 4
    seq_len: int = 16
    mlp_ratio: int = 2
    positions: int = 4

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        for name in ("depth", "width", "classes", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.arch == "mini_transformer":
            if self.heads < 1 or self.width % self.heads:
                raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
            if self.seq_len < 2:
                raise ConfigError("seq_len counts the cls token and needs at least one patch")
        if self.arch == "conv1x1_resnet" and self.positions < 1:
            raise ConfigError("positions must be positive")

    @property
    def patches(self) -> int:
        return self.seq_len - 1

    @property
    def patch_dim(self) -> int:
        return math.ceil(self.input_dim / self.patches)


@dataclass
class Op:
    kind: str
    name: str = ""
    params: dict[str, torch.Tensor | None] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


@dataclass
class Block:
    ops: list[Op]
    d_in: int
    d_out: int


@dataclass
class CalibrationCapture:
    block_index: int
    Xz: np.ndarray
    Y: np.ndarray
    Yz: np.ndarray

    def __post_init__(self):
        n = self.Xz.shape[1]
        if self.Y.shape[1] != n or self.Yz.shape[1] != n:
            raise ShapeError("capture matrices must share the column count")
        if self.Y.shape != self.Yz.shape:
            raise ShapeError("Y and Yz shapes differ")

    @property
    def N(self) -> int:
        return self.Xz.shape[1]

    @property
    def d_in(self) -> int:
        return self.Xz.shape[0]

    @property
    def d_out(self) -> int:
        return self.Y.shape[0]


@dataclass
class ForwardResult:
    logits: torch.Tensor
    features: torch.Tensor
    block_outputs: list[torch.Tensor] | None = None


@dataclass
class BlockNetwork:
    config: ArchConfig
    stem: list[Op]
    blocks: list[Block]
    neck: list[Op]
    head: Op
    state: Mode = Mode.FP
    fp_available: bool = True
    scheme: QuantScheme | None = None
    weight_qparams: dict[str, QuantParams] = field(default_factory=dict)
    weight_codes: dict[str, np.ndarray] = field(default_factory=dict)
    act_qparams: dict[str, QuantParams] = field(default_factory=dict)
    quant_head: Op | None = None
    compensation: list["CompensationModule | None"] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    _qweight_cache: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.d_out != b.d_in:
                raise ShapeError(f"block widths do not chain: {a.d_out} -> {b.d_in}")
        if not self.compensation:
            self.compensation = [None] * len(self.blocks)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def all_ops(self):
        yield from self.stem
        for b in self.blocks:
            yield from b.ops
        yield from self.neck
        yield self.head

    def quantizable_weights(self):
        """``(key, op)`` for every weight fake-quantized in QUANT mode."""
        for op in self.stem:
            if op.kind in QUANTIZED_KINDS:
                yield f"{op.name}.weight", op
        for b in self.blocks:
            for op in b.ops:
                if op.kind in QUANTIZED_KINDS:
                    yield f"{op.name}.weight", op

    def activation_points(self) -> list[str]:
        names = []
        for i, b in enumerate(self.blocks):
            names.append(block_input_name(i))
            for op in b.ops:
                if op.kind == "softmax_attention":
                    names += [f"{op.name}.q", f"{op.name}.k", f"{op.name}.v"]
        return names

    def qweight(self, key: str) -> torch.Tensor:
        w = self._qweight_cache.get(key)
        if w is None:
            p = self.weight_qparams[key]
            w = torch.from_numpy(dequantize(self.weight_codes[key], p))
            self._qweight_cache[key] = w
        return w

    def clear_quant(self):
        self.weight_qparams.clear()
        self.weight_codes.clear()
        self.act_qparams.clear()
        self._qweight_cache.clear()
        self.quant_head = None
        self.scheme = None
        self.compensation = [None] * len(self.blocks)
        self.state = Mode.FP

    def clone(self) -> "BlockNetwork":
        return copy.deepcopy(self)


def block_input_name(i: int) -> str:
    return f"blocks.{i}.input"


# ---------------------------------------------------------------- construction


def _f32(a: np.ndarray) -> torch.Tensor:
    # parameters live in float64 but always hold float32-representable values
    return torch.from_numpy(np.asarray(a, dtype=np.float32).astype(np.float64))


def _uniform(rng: np.random.Generator, shape, bound: float) -> torch.Tensor:
    return _f32(rng.uniform(-bound, bound, size=shape))


def _affine(rng, name, d_in, d_out, kind="affine", groups=1) -> Op:
    fan_in = d_in // groups
    bound = 1.0 / math.sqrt(fan_in)
    params = {
        "weight": _uniform(rng, (d_out, fan_in), bound),
        "bias": _uniform(rng, (d_out,), bound),
    }
    attrs = {"groups": groups} if kind == "conv1x1_grouped" else {}
    return Op(kind, name, params, attrs)


def _layernorm(name, d, eps=1e-5) -> Op:
    return Op("layernorm", name, {"gamma": _f32(np.ones(d)), "beta": _f32(np.zeros(d))}, {"eps": eps})


def build_network(cfg: ArchConfig, seed: int = 0) -> BlockNetwork:
    cfg.validate()
    rng = np.random.default_rng(seed)
    w = cfg.width
    stem: list[Op] = []
    blocks: list[Block] = []

    if cfg.arch == "mlp":
        stem = [_affine(rng, "stem.embed", cfg.input_dim, w)]
        for i in range(cfg.depth):
            ops = [_affine(rng, f"blocks.{i}.fc", w, w), Op("relu", f"blocks.{i}.relu")]
            blocks.append(Block(ops, w, w))
        neck = [Op("global_pool", "neck.pool")]

    elif cfg.arch == "mini_transformer":
        hidden = cfg.mlp_ratio * w
        stem = [
            Op("patchify", "stem.patchify", attrs={"patches": cfg.patches, "patch_dim": cfg.patch_dim}),
            _affine(rng, "stem.embed", cfg.patch_dim, w),
            Op("cls_prepend", "stem.cls", {"cls": _uniform(rng, (w,), 0.02)}),
            Op("pos_embed", "stem.pos", {"pos": _uniform(rng, (cfg.seq_len, w), 0.02)}),
        ]
        for i in range(cfg.depth):
            p = f"blocks.{i}"
            ops = [
                Op("residual_begin", f"{p}.res1"),
                _layernorm(f"{p}.ln1", w),
                _affine(rng, f"{p}.qkv", w, 3 * w),
                Op("softmax_attention", f"{p}.attn", attrs={"heads": cfg.heads}),
                _affine(rng, f"{p}.proj", w, w),
                Op("residual_add", f"{p}.add1"),
                Op("residual_begin", f"{p}.res2"),
                _layernorm(f"{p}.ln2", w),
                _affine(rng, f"{p}.fc1", w, hidden),
                Op("gelu", f"{p}.gelu"),
                _affine(rng, f"{p}.fc2", hidden, w),
                Op("residual_add", f"{p}.add2"),
            ]
            blocks.append(Block(ops, w, w))
        neck = [_layernorm("neck.norm", w), Op("cls_pool", "neck.pool")]

    else:
        stem = [
            _affine(rng, "stem.embed", cfg.input_dim, cfg.positions * w),
            Op("to_positions", "stem.positions", attrs={"positions": cfg.positions}),
            Op("relu", "stem.relu"),
        ]
        for i in range(cfg.depth):
            p = f"blocks.{i}"
            ops = [
                Op("residual_begin", f"{p}.res"),
                _affine(rng, f"{p}.conv1", w, w, kind="conv1x1_grouped"),
                Op("relu", f"{p}.relu1"),
                _affine(rng, f"{p}.conv2", w, w, kind="conv1x1_grouped"),
                Op("residual_add", f"{p}.add"),
                Op("relu", f"{p}.relu2"),
            ]
            blocks.append(Block(ops, w, w))
        neck = [Op("global_pool", "neck.pool")]

    head = _affine(rng, "head", w, cfg.classes, kind="classifier_head")
    return BlockNetwork(cfg, stem, blocks, neck, head, meta={"init_seed": seed})


# ------------------------------------------------------------------- execution


class _Runner:
    def __init__(self, net: BlockNetwork, mode: Mode, *, ste=False, recorder: RangeRecorder | None = None,
                 comp_override=None, head_override=None):
        self.net = net
        self.mode = mode
        self.ste = ste
        self.recorder = recorder
        self.comp_override = comp_override
        self.head_override = head_override

    def param(self, op: Op, pname: str) -> torch.Tensor:
        if self.mode is not Mode.FP and pname == "weight":
            key = f"{op.name}.weight"
            if key in self.net.weight_codes:
                return self.net.qweight(key)
        t = op.params.get(pname)
        if t is None:
            raise StateError(f"{op.name}.{pname} has no full-precision value in this network")
        return t

    def act(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if self.recorder is not None:
            self.recorder.record(name, x)
        if self.mode is Mode.FP:
            return x
        p = self.net.act_qparams.get(name)
        if p is None:
            return x
        return fake_quant_t(x, p, self.ste)

    def run_ops(self, ops: list[Op], h: torch.Tensor) -> torch.Tensor:
        stack = []
        for op in ops:
            k = op.kind
            if k == "affine":
                h = F.linear(h, self.param(op, "weight"), self.param(op, "bias"))
            elif k == "conv1x1_grouped":
                h = _grouped_linear(h, self.param(op, "weight"), self.param(op, "bias"), op.attrs.get("groups", 1))
            elif k == "relu":
                h = torch.relu(h)
            elif k == "gelu":
                h = F.gelu(h)
            elif k == "layernorm":
                h = F.layer_norm(h, h.shape[-1:], op.params["gamma"], op.params["beta"], op.attrs["eps"])
            elif k == "softmax_attention":
                h = self._attention(op, h)
            elif k == "residual_begin":
                stack.append(h)
            elif k == "residual_add":
                h = stack.pop() + h
            elif k == "global_pool":
                h = h.mean(dim=1)
            elif k == "cls_pool":
                h = h[:, 0]
            elif k == "patchify":
                b = h.shape[0]
                total = op.attrs["patches"] * op.attrs["patch_dim"]
                h = F.pad(h, (0, total - h.shape[1])).reshape(b, op.attrs["patches"], op.attrs["patch_dim"])
            elif k == "to_positions":
                b = h.shape[0]
                h = h.reshape(b, op.attrs["positions"], -1)
            elif k == "cls_prepend":
                cls = op.params["cls"].expand(h.shape[0], 1, -1)
                h = torch.cat([cls, h], dim=1)
            elif k == "pos_embed":
                h = h + op.params["pos"]
            else:
                raise ConfigError(f"unknown op kind {k!r}")
        if stack:
            raise ShapeError("unbalanced residual_begin/residual_add")
        return h

    def _attention(self, op: Op, h: torch.Tensor) -> torch.Tensor:
        heads = op.attrs["heads"]
        b, t, three_d = h.shape
        d = three_d // 3
        q, k, v = h.split(d, dim=-1)
        q = self.act(f"{op.name}.q", q)
        k = self.act(f"{op.name}.k", k)
        v = self.act(f"{op.name}.v", v)
        dh = d // heads
        q = q.reshape(b, t, heads, dh).transpose(1, 2)
        k = k.reshape(b, t, heads, dh).transpose(1, 2)
        v = v.reshape(b, t, heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        return (att @ v).transpose(1, 2).reshape(b, t, d)

    def comp(self, i: int):
        if self.comp_override is not None and i in self.comp_override:
            return self.comp_override[i]
        m = self.net.compensation[i]
        if m is None or m.gated:
            # a gated module is exactly zero; skipping keeps outputs bitwise equal
            return None
        return torch.from_numpy(m.weight), torch.from_numpy(m.bias)

    def block(self, i: int, x: torch.Tensor, apply_comp: bool) -> torch.Tensor:
        xz = self.act(block_input_name(i), x)
        y = self.run_ops(self.net.blocks[i].ops, xz)
        if apply_comp:
            c = self.comp(i)
            if c is not None:
                y = y + F.linear(xz, c[0], c[1])
        return y

    def head(self) -> Op:
        if self.head_override is not None:
            return self.head_override
        if self.mode is not Mode.FP and self.net.quant_head is not None:
            return self.net.quant_head
        return self.net.head


def _grouped_linear(h, weight, bias, groups):
    if groups == 1:
        return F.linear(h, weight, bias)
    parts = h.chunk(groups, dim=-1)
    ws = weight.chunk(groups, dim=0)
    return torch.cat([F.linear(p, wg) for p, wg in zip(parts, ws)], dim=-1) + bias


def _check_mode(net: BlockNetwork, mode: Mode):
    mode = Mode(mode)
    if mode is Mode.FP:
        if not net.fp_available:
            raise StateError("full-precision weights are not available in this network")
    elif mode is Mode.QUANT:
        if net.state not in (Mode.QUANT, Mode.QUANT_QWT):
            raise StateError(f"QUANT forward needs a quantized network, state is {net.state.value}")
    elif net.state is not Mode.QUANT_QWT:
        raise StateError(f"QUANT_QWT forward needs compensation modules, state is {net.state.value}")
    return mode


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
    if x.dtype != torch.float64:
        x = x.to(torch.float64)
    if x.dim() != 2:
        raise ShapeError(f"inputs must be (batch, features), got {tuple(x.shape)}")
    return x


def to_tokens(h: torch.Tensor) -> torch.Tensor:
    return h.unsqueeze(1) if h.dim() == 2 else h


def forward(net: BlockNetwork, x, mode: Mode | str = Mode.FP, *, return_blocks=False, ste=False,
            recorder: RangeRecorder | None = None, comp_override=None, head_override=None) -> ForwardResult:
    mode = _check_mode(net, mode)
    r = _Runner(net, mode, ste=ste, recorder=recorder, comp_override=comp_override, head_override=head_override)
    h = to_tokens(r.run_ops(net.stem, _as_batch(x)))
    outs = [] if return_blocks else None
    apply_comp = mode is Mode.QUANT_QWT
    for i in range(net.depth):
        h = r.block(i, h, apply_comp)
        if outs is not None:
            outs.append(h)
    feats = r.run_ops(net.neck, h)
    head = r.head()
    logits = F.linear(feats, head.params["weight"], head.params["bias"])
    return ForwardResult(logits, feats, outs)


def penultimate(net: BlockNetwork, x, mode: Mode | str = Mode.FP) -> torch.Tensor:
    """Features fed to the classifier: cls token for transformers, pooled otherwise."""
    with torch.no_grad():
        return forward(net, x, mode).features


def record_activations(net: BlockNetwork, x) -> RangeRecorder:
    """FP pass that records every value arriving at each activation quant point."""
    rec = RangeRecorder()
    with torch.no_grad():
        forward(net, x, Mode.FP, recorder=rec)
    return rec


def _flatten_cols(h: torch.Tensor) -> np.ndarray:
    # (batch, tokens, d) -> (d, batch*tokens), sample-major column order
    return h.reshape(-1, h.shape[-1]).T.numpy().copy()


def block_input(net: BlockNetwork, x, i: int) -> torch.Tensor:
    """Raw (pre-quantization) input of block ``i`` under the current quantized state.

    Compensation already attached to blocks ``< i`` is applied.
    """
    if net.state not in (Mode.QUANT, Mode.QUANT_QWT):
        raise StateError("capture needs a quantized network")
    r = _Runner(net, Mode.QUANT)
    with torch.no_grad():
        h = to_tokens(r.run_ops(net.stem, _as_batch(x)))
        for j in range(i):
            h = r.block(j, h, apply_comp=True)
    return h


def capture_from_input(net: BlockNetwork, h: torch.Tensor, i: int) -> tuple[CalibrationCapture, torch.Tensor, torch.Tensor]:
    """Build the capture for block ``i`` from its raw input tokens.

    Returns the capture plus the quantized input and quantized block output as
    tensors, so a sequential caller can continue the forward pass.
    """
    if not net.fp_available:
        raise StateError("compensation needs full-precision block weights")
    rq = _Runner(net, Mode.QUANT)
    rf = _Runner(net, Mode.FP)
    blk = net.blocks[i]
    with torch.no_grad():
        xz = rq.act(block_input_name(i), h)
        yz = rq.run_ops(blk.ops, xz)
        y = rf.run_ops(blk.ops, xz)
    cap = CalibrationCapture(i, _flatten_cols(xz), _flatten_cols(y), _flatten_cols(yz))
    return cap, xz, yz


def capture_block(net: BlockNetwork, x, i: int, target: str = "fp_block") -> CalibrationCapture:
    """Regression data for block ``i``.

    ``target="fp_block"`` feeds the quantized inputs through the full-precision
    block; ``target="fp_model"`` instead uses the FP model's own block output
    on the same calibration samples.
    """
    if not 0 <= i < net.depth:
        raise ShapeError(f"block index {i} out of range for {net.depth} blocks")
    h = block_input(net, x, i)
    cap, _, _ = capture_from_input(net, h, i)
    if target == "fp_model":
        with torch.no_grad():
            y = forward(net, x, Mode.FP, return_blocks=True).block_outputs[i]
        cap = CalibrationCapture(i, cap.Xz, _flatten_cols(y), cap.Yz)
    elif target != "fp_block":
        raise ConfigError(f"unknown capture target {target!r}")
    return cap
