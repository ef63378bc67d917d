"""Seeded toy experiments comparing FP, PTQ, PTQ + compensation and finetuned compensation."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .netgraph import ArchConfig, Mode, build_network
from .pipeline import (CALIB_SIZE, DatasetConfig, FinetuneConfig, TrainConfig, accuracy, compensate_model,
                       feature_mse, finetune, make_dataset, quantize_model, sample_calibration, train_toy)
from .quantizer import QuantScheme


@dataclass(frozen=True)
class TrendConfig:
    arch: ArchConfig
    train: TrainConfig
    structure: str = "dense"
    group_size: int = 64
    scheme: QuantScheme = QuantScheme(4, 4)
    finetune_lr: float = 1e-3
    finetune_epochs: int = 1
    calib_n: int = CALIB_SIZE
    data: DatasetConfig = DatasetConfig()


TREND_PRESETS = {
    "mlp": TrendConfig(ArchConfig("mlp", depth=3, width=64), TrainConfig(epochs=10, lr=0.01)),
    "mini_transformer": TrendConfig(ArchConfig("mini_transformer", depth=2, width=32, heads=4, seq_len=16),
                                    TrainConfig(epochs=10, lr=0.025), finetune_lr=1e-2),
    "conv1x1_resnet": TrendConfig(ArchConfig("conv1x1_resnet", depth=4, width=128), TrainConfig(epochs=5, lr=0.01),
                                  structure="groupwise"),
}


@dataclass
class SeedResult:
    seed: int
    fp: float
    ptq: float
    qwt: float
    qwt_ft: float
    feat_mse_ptq: float
    feat_mse_qwt: float
    block_mse_before: list[float]
    block_mse_after: list[float]
    r2: list[float]
    finetune_curve: list[float]


@dataclass
class TrendResult:
    arch: str
    seeds: list[SeedResult] = field(default_factory=list)
    seconds: float = 0.0

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(s, attr) for s in self.seeds]))

    @property
    def feature_mse_reduction(self) -> float:
        return 1.0 - self.mean("feat_mse_qwt") / self.mean("feat_mse_ptq")

    @property
    def lsq_violations(self) -> list[tuple[int, int]]:
        """(seed, block) pairs where compensation raised calibration MSE."""
        return [(s.seed, i) for s in self.seeds
                for i, (b, a) in enumerate(zip(s.block_mse_before, s.block_mse_after)) if a > b]

    def summary(self) -> dict:
        return {"arch": self.arch, "fp": self.mean("fp"), "ptq": self.mean("ptq"), "qwt": self.mean("qwt"),
                "qwt_ft": self.mean("qwt_ft"), "feature_mse_reduction": self.feature_mse_reduction,
                "seconds": self.seconds}


def run_seed(cfg: TrendConfig, dataset, seed: int) -> SeedResult:
    net = train_toy(build_network(cfg.arch, seed), dataset, TrainConfig(**{**asdict(cfg.train), "seed": seed}))
    calib = sample_calibration(dataset, cfg.calib_n, seed)
    q = quantize_model(net, cfg.scheme, calib)
    c, rep = compensate_model(q, calib, cfg.structure, cfg.group_size)
    ft, curve = finetune(c, dataset, FinetuneConfig(epochs=cfg.finetune_epochs, lr=cfg.finetune_lr, seed=seed),
                         monitor=(dataset.x_train[:512], dataset.y_train[:512]))
    xt, yt = dataset.x_test, dataset.y_test
    return SeedResult(
        seed=seed,
        fp=accuracy(net, xt, yt, Mode.FP),
        ptq=accuracy(q, xt, yt, Mode.QUANT),
        qwt=accuracy(c, xt, yt, Mode.QUANT_QWT),
        qwt_ft=accuracy(ft, xt, yt, Mode.QUANT_QWT),
        feat_mse_ptq=feature_mse(q, calib, Mode.QUANT),
        feat_mse_qwt=feature_mse(c, calib, Mode.QUANT_QWT),
        block_mse_before=list(rep.mse_before),
        block_mse_after=list(rep.mse_after),
        r2=list(rep.r2),
        finetune_curve=curve,
    )


def run_trend(arch: str, seeds=range(5), cfg: TrendConfig | None = None, log=None) -> TrendResult:
    cfg = cfg or TREND_PRESETS[arch]
    t0 = time.perf_counter()
    dataset = make_dataset(cfg.data)
    res = TrendResult(arch)
    for s in seeds:
        r = run_seed(cfg, dataset, s)
        res.seeds.append(r)
        if log:
            log(f"{arch} seed {s}: fp {r.fp:.4f} ptq {r.ptq:.4f} qwt {r.qwt:.4f} qwt* {r.qwt_ft:.4f} "
                f"feat mse {r.feat_mse_ptq:.4g} -> {r.feat_mse_qwt:.4g}")
    res.seconds = time.perf_counter() - t0
    return res
