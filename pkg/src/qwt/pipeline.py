"""End-to-end workflow: toy data, FP training, PTQ, compensation, finetune, eval."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .compensation import DEFAULT_GROUP_SIZE, InsertionReport, insert_sequential, round_fp16
from .errors import ConfigError, StateError, TrainingError
from .netgraph import BlockNetwork, Mode, Op, forward, record_activations
from .quantizer import DISABLED_BITS, QuantScheme, quantize
from .sizing import MB, model_size

log = logging.getLogger(__name__)

CALIB_SIZE = 512


# ------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 10
    dim: int = 32
    n_train: int = 8000
    n_test: int = 2000
    seed: int = 0
    center_scale: float = 1.0
    noise: float = 1.0
    # per-dimension scales drawn log-uniformly in [1/spread, spread]
    dim_spread: float = 2.0
    # per-dimension noise multipliers, log-uniform in [1/noise_spread, noise_spread]
    noise_spread: float = 1.0


@dataclass
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    config: DatasetConfig

    @property
    def classes(self) -> int:
        return self.config.classes


def _blobs(cfg: DatasetConfig, rng: np.random.Generator, centers: np.ndarray, sigma: np.ndarray, n: int):
    y = rng.integers(0, cfg.classes, size=n)
    x = centers[y] + sigma * rng.standard_normal((n, cfg.dim))
    return x, y


def _scaled(xy, scales):
    return xy[0] * scales, xy[1]


def _spirals(cfg: DatasetConfig, rng: np.random.Generator, proj: np.ndarray, n: int):
    y = rng.integers(0, cfg.classes, size=n)
    t = rng.uniform(0.05, 1.0, size=n)
    angle = 2 * np.pi * y / cfg.classes + 3 * np.pi * t
    pts = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    pts += 0.02 * cfg.noise * rng.standard_normal(pts.shape)
    x = 4 * pts @ proj + 0.02 * cfg.noise * rng.standard_normal((n, cfg.dim))
    return x, y


def make_dataset(cfg: DatasetConfig = DatasetConfig()) -> ToyDataset:
    """Gaussian blobs or multi-arm spirals; train and test are independent draws."""
    if cfg.classes < 2 or cfg.dim < 2:
        raise ConfigError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "blobs":
        centers = cfg.center_scale * rng.standard_normal((cfg.classes, cfg.dim))
        log_s = math.log(cfg.dim_spread)
        scales = np.exp(rng.uniform(-log_s, log_s, size=cfg.dim))
        log_n = math.log(cfg.noise_spread)
        sigma = cfg.noise * np.exp(rng.uniform(-log_n, log_n, size=cfg.dim))
        draw = lambda n: _scaled(_blobs(cfg, rng, centers, sigma, n), scales)  # noqa: E731
    elif cfg.kind == "spirals":
        proj, _ = np.linalg.qr(rng.standard_normal((cfg.dim, 2)))
        draw = lambda n: _spirals(cfg, rng, proj.T, n)  # noqa: E731
    else:
        raise ConfigError(f"unknown dataset kind {cfg.kind!r}")
    xtr, ytr = draw(cfg.n_train)
    xte, yte = draw(cfg.n_test)
    return ToyDataset(xtr, ytr, xte, yte, cfg)


def sample_calibration(dataset: ToyDataset, n: int = CALIB_SIZE, seed: int = 0) -> np.ndarray:
    """Uniform subset of the training inputs without replacement."""
    total = len(dataset.x_train)
    if n < 1 or n > total:
        raise ConfigError(f"cannot draw {n} calibration samples from {total} training samples")
    idx = np.random.default_rng(seed).choice(total, size=n, replace=False)
    return dataset.x_train[idx]


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0


def _fp_params(net: BlockNetwork) -> list[torch.Tensor]:
    out = []
    for op in net.all_ops():
        out.extend(t for t in op.params.values() if t is not None)
    return out


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def train_toy(net: BlockNetwork, dataset: ToyDataset, cfg: TrainConfig = TrainConfig()) -> BlockNetwork:
    """Minibatch SGD on cross-entropy. Returns a new FP network, weights rounded to float32."""
    if net.state is not Mode.FP or not net.fp_available:
        raise StateError("train_toy needs a full-precision network")
    net = net.clone()
    if cfg.epochs == 0:
        return net
    params = _fp_params(net)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.from_numpy(dataset.x_train)
    y = torch.from_numpy(dataset.y_train)
    for epoch in range(cfg.epochs):
        for idx in _batches(len(x), cfg.batch_size, gen):
            loss = F.cross_entropy(forward(net, x[idx], Mode.FP).logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        for p in params:
            p.requires_grad_(False)
            p.copy_(p.to(torch.float32).to(torch.float64))
    net.meta["train"] = {"epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed}
    return net


# -------------------------------------------------------------- quantization


def quantize_model(net: BlockNetwork, scheme: QuantScheme, calib) -> BlockNetwork:
    """Fit weight params from the FP weights and activation params from an FP calibration pass."""
    if not net.fp_available:
        raise StateError("quantize_model needs full-precision weights")
    if net.state is not Mode.FP:
        net = net.clone()
        net.clear_quant()
    else:
        net = net.clone()
    if scheme.weight_bits != DISABLED_BITS:
        for key, op in net.quantizable_weights():
            w = op.params["weight"].numpy()
            p = scheme.fit_weight(w)
            net.weight_qparams[key] = p
            net.weight_codes[key] = quantize(w, p).astype(np.uint8)
    if scheme.act_bits != DISABLED_BITS:
        rec = record_activations(net, calib)
        for name in net.activation_points():
            net.act_qparams[name] = scheme.fit_activation(rec.values(name))
    net.quant_head = copy.deepcopy(net.head)
    net.scheme = scheme
    net.state = Mode.QUANT
    net.meta.pop("compensation", None)
    net.meta.pop("finetune", None)
    return net


def compensate_model(net: BlockNetwork, calib, structure: str = "dense", group_size: int = DEFAULT_GROUP_SIZE,
                     target: str = "fp_block") -> tuple[BlockNetwork, InsertionReport]:
    if net.state is not Mode.QUANT:
        raise StateError(f"compensate_model needs a QUANT network, state is {net.state.value}")
    net, report = insert_sequential(net.clone(), calib, structure, group_size, target)
    net.meta["compensation"] = {
        "structure": "dense" if structure == "dense" else "block_diagonal",
        "group_size": None if structure == "dense" else group_size,
        "per_block": [
            {"index": b.index, "r2": b.r2, "mse_before": b.mse_before, "mse_after": b.mse_after,
             "mse_after_stored": b.mse_after_stored, "gated": b.gated}
            for b in report.blocks
        ],
    }
    return net, report


def feature_mse(net: BlockNetwork, x, mode: Mode, reference: BlockNetwork | None = None) -> float:
    """Mean squared distance between ``mode`` features and FP features."""
    ref = reference if reference is not None else net
    with torch.no_grad():
        f_fp = forward(ref, x, Mode.FP).features
        f_q = forward(net, x, mode).features
    return float(torch.mean((f_fp - f_q) ** 2))


# ------------------------------------------------------------------ finetune


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 1
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    ste: bool = True


@dataclass
class TrainableState:
    """Leaf tensors for compensation and head parameters, plus masks."""

    comp: dict[int, tuple[torch.Tensor, torch.Tensor]]
    masks: dict[int, torch.Tensor]
    head: Op

    def tensors(self) -> list[torch.Tensor]:
        out = []
        for w, b in self.comp.values():
            out += [w, b]
        return out + [self.head.params["weight"], self.head.params["bias"]]


def trainable_state(net: BlockNetwork) -> TrainableState:
    if net.state is not Mode.QUANT_QWT:
        raise StateError("finetune needs a QUANT_QWT network")
    comp, masks = {}, {}
    for i, m in enumerate(net.compensation):
        w = torch.from_numpy(m.weight.copy()).requires_grad_(True)
        b = torch.from_numpy(m.bias.copy()).requires_grad_(True)
        comp[i] = (w, b)
        if m.structure == "block_diagonal":
            mask = torch.zeros_like(w)
            for g0 in range(0, m.d_in, m.group_size):
                mask[g0:g0 + m.group_size, g0:g0 + m.group_size] = 1.0
            masks[i] = mask
    src = net.quant_head
    head = Op(src.kind, src.name, {k: v.clone().requires_grad_(True) for k, v in src.params.items()}, dict(src.attrs))
    return TrainableState(comp, masks, head)


def finetune_loss(net: BlockNetwork, st: TrainableState, x, y, teacher_features: torch.Tensor,
                  ste: bool = True) -> torch.Tensor:
    """Cross-entropy plus squared L2 distance of penultimate features, unweighted."""
    comp = {}
    for i, (w, b) in st.comp.items():
        comp[i] = (w * st.masks[i] if i in st.masks else w, b)
    out = forward(net, x, Mode.QUANT_QWT, ste=ste, comp_override=comp, head_override=st.head)
    l_cls = F.cross_entropy(out.logits, torch.as_tensor(y))
    l_dis = ((out.features - teacher_features) ** 2).sum(dim=1).mean()
    return l_cls + l_dis


def teacher_features(teacher: BlockNetwork, x) -> torch.Tensor:
    with torch.no_grad():
        return forward(teacher, x, Mode.FP).features


def finetune(net: BlockNetwork, dataset: ToyDataset, cfg: FinetuneConfig = FinetuneConfig(),
             teacher: BlockNetwork | None = None, monitor=None) -> tuple[BlockNetwork, list[float]]:
    """Tune compensation modules and the classifier head; the quantized backbone stays frozen.

    ``teacher`` defaults to the network's own FP weights. If ``monitor``
    (inputs, labels) is given, the full finetune loss on it is logged before
    training and after every tenth of an epoch.
    """
    if net.state is not Mode.QUANT_QWT:
        raise StateError("finetune needs a QUANT_QWT network")
    teacher = teacher if teacher is not None else net
    if not teacher.fp_available:
        raise StateError("finetune needs full-precision teacher weights")
    net = net.clone()
    st = trainable_state(net)
    params = st.tensors()
    opt = torch.optim.SGD(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.from_numpy(dataset.x_train)
    y = torch.from_numpy(dataset.y_train)
    t_all = teacher_features(teacher, x)
    curve: list[float] = []

    def _monitor():
        if monitor is not None:
            mx, my = monitor
            with torch.no_grad():
                curve.append(float(finetune_loss(net, st, mx, my, teacher_features(teacher, mx), cfg.ste)))

    n_batches = math.ceil(len(x) / cfg.batch_size)
    every = max(1, n_batches // 10)
    _monitor()
    for epoch in range(cfg.epochs):
        for step, idx in enumerate(_batches(len(x), cfg.batch_size, gen)):
            loss = finetune_loss(net, st, x[idx], y[idx], t_all[idx], cfg.ste)
            if not torch.isfinite(loss):
                raise TrainingError(f"finetune loss diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if (step + 1) % every == 0 or step + 1 == n_batches:
                _monitor()

    with torch.no_grad():
        for i, (w, b) in st.comp.items():
            m = net.compensation[i]
            wv = (w * st.masks[i]) if i in st.masks else w
            m.weight = round_fp16(wv.numpy())
            m.bias = round_fp16(b.numpy())
            m.gated = m.gated and m.is_zero()
        for k, v in st.head.params.items():
            net.quant_head.params[k] = v.detach().to(torch.float32).to(torch.float64)
    net.meta["finetune"] = {"epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed}
    return net, curve


# -------------------------------------------------------------------- eval


@dataclass
class EvalReport:
    top1: float
    model_size_bytes: int
    mode: str
    per_block_r2: list[float] = field(default_factory=list)
    per_block_mse_before: list[float] = field(default_factory=list)
    per_block_mse_after: list[float] = field(default_factory=list)
    per_block_gated: list[bool] = field(default_factory=list)
    feature_mse: float | None = None

    @property
    def size_mb(self) -> float:
        return self.model_size_bytes / MB

    def to_json_dict(self) -> dict:
        def num(v):
            return v if v is None or math.isfinite(v) else None

        return {
            "top1": self.top1,
            "size_bytes": self.model_size_bytes,
            "size_mb": self.size_mb,
            "mode": self.mode,
            "feature_mse": num(self.feature_mse),
            "per_block": [
                {"index": i, "r2": num(r2), "mse_before": mb, "mse_after": ma, "gated": g}
                for i, (r2, mb, ma, g) in enumerate(zip(self.per_block_r2, self.per_block_mse_before,
                                                        self.per_block_mse_after, self.per_block_gated))
            ],
        }


def accuracy(net: BlockNetwork, x, y, mode: Mode) -> float:
    with torch.no_grad():
        pred = forward(net, x, mode).logits.argmax(dim=1).numpy()
    return float(np.mean(pred == np.asarray(y)))


def evaluate(net: BlockNetwork, dataset: ToyDataset, mode: Mode | None = None,
             reference: BlockNetwork | None = None) -> EvalReport:
    mode = Mode(mode) if mode is not None else net.state
    rep = EvalReport(
        top1=accuracy(net, dataset.x_test, dataset.y_test, mode),
        model_size_bytes=model_size(net),
        mode=mode.value,
    )
    comp = net.meta.get("compensation")
    if comp and mode is Mode.QUANT_QWT:
        blocks = comp["per_block"]
        rep.per_block_r2 = [float(b["r2"]) for b in blocks]  # may round-trip through JSON as "-inf"
        rep.per_block_mse_before = [b["mse_before"] for b in blocks]
        rep.per_block_mse_after = [b["mse_after"] for b in blocks]
        rep.per_block_gated = [b["gated"] for b in blocks]
    ref = reference if reference is not None else (net if net.fp_available else None)
    if mode is not Mode.FP and ref is not None:
        rep.feature_mse = feature_mse(net, dataset.x_test, mode, ref)
    return rep
