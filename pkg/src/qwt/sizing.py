"""On-disk size accounting. MB is 10**6 bytes."""
from __future__ import annotations

import math

from .netgraph import BlockNetwork, Mode

MB = 1_000_000
FP32_BYTES = 4
FP16_BYTES = 2
SCALE_BYTES = 8


def fp_bytes(numel: int, bytes_per_param: int = FP32_BYTES) -> int:
    return numel * bytes_per_param


def fp32_size_mb(n_params: float) -> float:
    return n_params * FP32_BYTES / MB


def packed_bytes(rows: int, cols: int, bits: int) -> int:
    """Sub-byte codes, each row padded to a whole byte."""
    return rows * math.ceil(cols * bits / 8)


def qparams_bytes(channels: int, bits: int) -> int:
    # float64 scale per channel, zero-points packed at the tensor's bit-width
    return SCALE_BYTES * channels + packed_bytes(1, channels, bits)


def compensation_bytes(d_out: int, d_in: int, count: int = 1, group_size: int | None = None) -> int:
    """fp16 storage of ``count`` modules; block-diagonal keeps only diagonal groups."""
    w = d_out * (group_size if group_size else d_in)
    return count * FP16_BYTES * (w + d_out)


def _op_bytes(net: BlockNetwork, op, quantized: bool) -> int:
    total = 0
    for pname, t in op.params.items():
        key = f"{op.name}.{pname}"
        if quantized and key in net.weight_codes:
            p = net.weight_qparams[key]
            rows, cols = net.weight_codes[key].shape
            total += packed_bytes(rows, cols, p.bits) + qparams_bytes(p.channels, p.bits)
        else:
            total += fp_bytes(t.numel())
    return total


def model_size(net: BlockNetwork) -> int:
    """Bytes needed to store ``net`` in its current state."""
    quantized = net.state is not Mode.FP
    total = 0
    for op in [*net.stem, *(o for b in net.blocks for o in b.ops), *net.neck]:
        total += _op_bytes(net, op, quantized)
    head = net.quant_head if quantized and net.quant_head is not None else net.head
    total += _op_bytes(net, head, False)
    if quantized:
        total += sum(qparams_bytes(p.channels, p.bits) for p in net.act_qparams.values())
    if net.state is Mode.QUANT_QWT:
        total += sum(FP16_BYTES * m.n_params for m in net.compensation if m is not None)
    return total
