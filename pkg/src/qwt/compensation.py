"""Closed-form linear compensation of quantized blocks.

For block ``i`` the quantized output is corrected as
``y = l_q(x_q) + W @ x_q + b`` where ``(W, b)`` is the least-squares fit of
the residual ``Y - Yz`` on the quantized inputs ``Xz`` (with a ones-row for
the bias). A fit whose R^2 against the FP targets is not strictly positive is
replaced by zeros.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import tensor_core
from .errors import ConfigError, ShapeError, SingularSystemError, StateError
from .netgraph import (BlockNetwork, CalibrationCapture, Mode, _as_batch, _flatten_cols, _Runner,
                       capture_from_input, forward, to_tokens)

log = logging.getLogger(__name__)

FP16_MAX = float(np.finfo(np.float16).max)
DEFAULT_GROUP_SIZE = 64


@dataclass
class CompensationModule:
    weight: np.ndarray
    bias: np.ndarray
    gated: bool = False
    r2: float = float("nan")
    structure: str = "dense"
    group_size: int | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("compensation weight must be (d_out, d_in) with a d_out bias")
        if self.structure not in ("dense", "block_diagonal"):
            raise ConfigError(f"unknown structure {self.structure!r}")
        if self.structure == "block_diagonal":
            d_out, d_in = self.weight.shape
            g = self.group_size
            if g is None or d_in != d_out or d_in % g:
                raise ConfigError("block_diagonal needs a square weight divisible by group_size")

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        """Stored parameter count (only diagonal groups for block_diagonal)."""
        if self.structure == "block_diagonal":
            return self.d_in * self.group_size + self.d_out
        return self.weight.size + self.bias.size

    def is_zero(self) -> bool:
        return not self.weight.any() and not self.bias.any()

    def predict(self, Xz: np.ndarray) -> np.ndarray:
        return self.weight @ Xz + self.bias[:, None]

    @classmethod
    def zeros(cls, d_out: int, d_in: int, structure="dense", group_size=None, r2=float("nan"), gated=True):
        return cls(np.zeros((d_out, d_in)), np.zeros(d_out), gated, r2, structure, group_size)


def compute_r2(Y, Ypred) -> float:
    """1 - SSE/SST with SST taken around the per-row means of ``Y``."""
    Y = tensor_core.as_matrix(Y, "Y")
    Ypred = tensor_core.as_matrix(Ypred, "Ypred")
    if Y.shape != Ypred.shape:
        raise ShapeError(f"shape mismatch {Y.shape} vs {Ypred.shape}")
    _, sst = tensor_core.column_stats(Y)
    e = Y - Ypred
    sse = float(np.sum(e * e))
    if sst == 0.0:
        return 1.0 if sse == 0.0 else -math.inf
    return 1.0 - sse / sst


def _lstsq_aug(Xz: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R ~ W @ Xz + b`` through the augmented normal equations."""
    n = Xz.shape[1]
    Xa = np.vstack([Xz, np.ones((1, n))])
    gram = tensor_core.matmul(Xa, Xa.T)
    rhs = tensor_core.matmul(Xa, R.T)
    Wa = tensor_core.spd_solve(gram, rhs).T
    return Wa[:, :-1].copy(), Wa[:, -1].copy()


def _check_capture(cap: CalibrationCapture):
    if cap.N < cap.d_in + 1:
        log.warning("block %d: %d calibration columns for %d unknowns; relying on jitter",
                    cap.block_index, cap.N, cap.d_in + 1)


def solve_dense(cap: CalibrationCapture) -> tuple[np.ndarray, np.ndarray, float]:
    """Dense ``(W, bias, r2)``. A singular system yields zeros and ``r2 = -inf``."""
    _check_capture(cap)
    R = cap.Y - cap.Yz
    try:
        W, b = _lstsq_aug(cap.Xz, R)
    except SingularSystemError:
        log.warning("block %d: singular Gram matrix, module gated", cap.block_index)
        return np.zeros((cap.d_out, cap.d_in)), np.zeros(cap.d_out), -math.inf
    r2 = compute_r2(cap.Y, cap.Yz + W @ cap.Xz + b[:, None])
    return W, b, r2


def solve_blockdiagonal(cap: CalibrationCapture, group_size: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Independent per-group fits; equivalent to a grouped 1x1 convolution."""
    d_in, d_out = cap.d_in, cap.d_out
    if group_size < 1 or d_in != d_out or d_in % group_size:
        raise ConfigError(
            f"group-wise compensation needs d_in == d_out divisible by {group_size}, got {d_in}->{d_out}"
        )
    _check_capture(CalibrationCapture(cap.block_index, cap.Xz[:group_size], cap.Y[:group_size], cap.Yz[:group_size]))
    R = cap.Y - cap.Yz
    W = np.zeros((d_out, d_in))
    b = np.zeros(d_out)
    for g0 in range(0, d_in, group_size):
        sl = slice(g0, g0 + group_size)
        try:
            Wg, bg = _lstsq_aug(cap.Xz[sl], R[sl])
        except SingularSystemError:
            log.warning("block %d: singular Gram in group at %d, module gated", cap.block_index, g0)
            return np.zeros((d_out, d_in)), np.zeros(d_out), -math.inf
        W[sl, sl] = Wg
        b[sl] = bg
    r2 = compute_r2(cap.Y, cap.Yz + W @ cap.Xz + b[:, None])
    return W, b, r2


def gate(module: CompensationModule, r2: float) -> CompensationModule:
    """Keep the fit only when ``r2 > 0``; otherwise zero it and mark it gated."""
    if r2 > 0:
        return CompensationModule(module.weight, module.bias, False, r2, module.structure, module.group_size)
    return CompensationModule.zeros(module.d_out, module.d_in, module.structure, module.group_size, r2, gated=True)


def round_fp16(a: np.ndarray) -> np.ndarray:
    a = np.clip(np.asarray(a, dtype=np.float64), -FP16_MAX, FP16_MAX)
    return a.astype(np.float16).astype(np.float64)


def to_storage_precision(module: CompensationModule) -> CompensationModule:
    return CompensationModule(round_fp16(module.weight), round_fp16(module.bias), module.gated,
                              module.r2, module.structure, module.group_size)


def solve_module(cap: CalibrationCapture, structure: str = "dense", group_size: int = DEFAULT_GROUP_SIZE
                 ) -> tuple[CompensationModule, CompensationModule]:
    """Solve and gate one block. Returns ``(pre_rounding, stored)`` modules."""
    if structure == "dense":
        W, b, r2 = solve_dense(cap)
        g = None
    elif structure in ("block_diagonal", "groupwise"):
        W, b, r2 = solve_blockdiagonal(cap, group_size)
        structure, g = "block_diagonal", group_size
    else:
        raise ConfigError(f"unknown structure {structure!r}")
    solved = gate(CompensationModule(W, b, False, r2, structure, g), r2)
    return solved, to_storage_precision(solved)


def _mse(a: np.ndarray) -> float:
    return float(np.mean(a * a))


@dataclass
class BlockReport:
    index: int
    r2: float
    mse_before: float
    mse_after: float
    mse_after_stored: float
    gated: bool


@dataclass
class InsertionReport:
    blocks: list[BlockReport] = field(default_factory=list)

    @property
    def r2(self) -> list[float]:
        return [b.r2 for b in self.blocks]

    @property
    def mse_before(self) -> list[float]:
        return [b.mse_before for b in self.blocks]

    @property
    def mse_after(self) -> list[float]:
        return [b.mse_after for b in self.blocks]


def insert_sequential(net: BlockNetwork, calib, structure: str = "dense", group_size: int = DEFAULT_GROUP_SIZE,
                      target: str = "fp_block") -> tuple[BlockNetwork, InsertionReport]:
    """Attach a compensation module to every block, first to last.

    Each block's capture is taken with all earlier (already rounded) modules
    active, so later modules also absorb upstream residual error. ``mse_after``
    refers to the solved module before fp16 rounding.
    """
    if net.state is not Mode.QUANT:
        raise StateError(f"insert_sequential needs a QUANT network, state is {net.state.value}")
    x = _as_batch(calib)
    r = _Runner(net, Mode.QUANT)
    fp_outs = None
    if target == "fp_model":
        fp_outs = _fp_block_outputs(net, x)
    elif target != "fp_block":
        raise ConfigError(f"unknown capture target {target!r}")

    net.compensation = [None] * net.depth
    report = InsertionReport()
    with torch.no_grad():
        h = to_tokens(r.run_ops(net.stem, x))
        for i in range(net.depth):
            cap, xz, yz = capture_from_input(net, h, i)
            if fp_outs is not None:
                cap = CalibrationCapture(i, cap.Xz, fp_outs[i], cap.Yz)
            solved, stored = solve_module(cap, structure, group_size)
            resid = cap.Y - cap.Yz
            report.blocks.append(BlockReport(
                index=i,
                r2=solved.r2,
                mse_before=_mse(resid),
                mse_after=_mse(resid - solved.predict(cap.Xz)),
                mse_after_stored=_mse(resid - stored.predict(cap.Xz)),
                gated=solved.gated,
            ))
            net.compensation[i] = stored
            h = yz
            if not stored.gated:
                h = yz + F.linear(xz, torch.from_numpy(stored.weight), torch.from_numpy(stored.bias))
    net.state = Mode.QUANT_QWT
    return net, report


def _fp_block_outputs(net: BlockNetwork, x) -> list[np.ndarray]:
    with torch.no_grad():
        outs = forward(net, x, Mode.FP, return_blocks=True).block_outputs
    return [_flatten_cols(o) for o in outs]
