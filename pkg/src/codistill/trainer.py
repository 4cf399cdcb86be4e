"""Collaborative training loop for the student pair.

Each step forwards both students on the batch, assembles one objective per
student (cross-entropy + weighted alignment + weighted selective transfer),
runs one backward pass per objective, and applies SGD with momentum to the
convolutional side and AdamW to the attention side. The adapters train with
the student whose objective they serve.

The two objectives are gradient-isolated by construction: every borrowed
block, counterpart feature and counterpart prediction enters a student's
objective detached, so backward(L_cnn) cannot move the ViT and vice versa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsd import RegionGrid, bsd_loss, build_pixel_mask, build_region_mask, pixel_loss, region_ce, region_loss
from .data import ConfusionMatrix, miou_from_confusion, predict_labels, update_confusion
from .errors import ConfigError, TrainingError
from .hfd import AdapterSet, apply_adapter, hfd_loss_cnn, hfd_loss_vit, init_adapters
from .losses import pixel_ce
from .recordio import read_archive, write_archive
from .seeding import substream
from .students import (
    ArchConfig,
    StudentParams,
    cnn_forward,
    detach_params,
    init_cnn_params,
    init_vit_params,
    vit_forward,
)
from .tensor import Tensor, zero_grads


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0  # pixel- vs region-grain balance inside the selective term
    beta: float = 0.1  # weight of the feature-alignment term
    gamma: float = 1.0  # weight of the selective-transfer term
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    sgd: SGDConfig = field(default_factory=SGDConfig)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    hfd_on: bool = True
    region_bsd_on: bool = True
    pixel_bsd_on: bool = True
    eval_every: int = 50
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.sgd.lr <= 0 or self.adamw.lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.sgd.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.sgd.momentum}")
        for b in (self.adamw.beta1, self.adamw.beta2):
            if not 0 <= b < 1:
                raise ConfigError(f"adamw betas must be in [0, 1), got {b}")
        if self.adamw.eps <= 0:
            raise ConfigError("adamw eps must be positive")
        if self.sgd.weight_decay < 0 or self.adamw.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    # effective toggles: a term with weight 0 is never assembled, so turning
    # a toggle off and zeroing its weight give bitwise-identical trajectories
    @property
    def hfd_active(self):
        return self.hfd_on and self.beta != 0.0

    @property
    def region_active(self):
        return self.region_bsd_on and self.gamma != 0.0

    @property
    def pixel_active(self):
        return self.pixel_bsd_on and self.gamma != 0.0 and self.alpha != 0.0


# optimizer update rules ------------------------------------------------

def sgd_momentum_update(p, g, v, lr, mu, wd):
    """Weight decay folds into the gradient before the momentum buffer."""
    g = g + wd * p
    v_new = mu * v + g
    return p - lr * v_new, v_new


def adamw_update(p, g, m1, m2, t, lr, beta1, beta2, eps, wd):
    """Decoupled weight decay with bias-corrected moment estimates; t >= 1."""
    m1_new = beta1 * m1 + (1.0 - beta1) * g
    m2_new = beta2 * m2 + (1.0 - beta2) * g * g
    m_hat = m1_new / (1.0 - beta1**t)
    v_hat = m2_new / (1.0 - beta2**t)
    p_new = p - lr * wd * p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p_new, m1_new, m2_new


class SgdMomentum:
    def __init__(self, named_params, cfg: SGDConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            p.data, self.velocity[name] = sgd_momentum_update(
                p.data, p.grad, self.velocity[name], self.cfg.lr, self.cfg.momentum, self.cfg.weight_decay
            )

    def zero_grad(self):
        zero_grads(p for _, p in self.params)


class AdamW:
    def __init__(self, named_params, cfg: AdamWConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.m1 = {name: np.zeros_like(p.data) for name, p in self.params}
        self.m2 = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def step(self):
        self.t += 1
        c = self.cfg
        for name, p in self.params:
            if p.grad is None:
                continue
            p.data, self.m1[name], self.m2[name] = adamw_update(
                p.data, p.grad, self.m1[name], self.m2[name], self.t, c.lr, c.beta1, c.beta2, c.eps, c.weight_decay
            )

    def zero_grad(self):
        zero_grads(p for _, p in self.params)


# objective assembly ----------------------------------------------------

def total_objective(out_c, out_v, labels, params_c, params_v, adapters: AdapterSet, acfg: ArchConfig, tcfg: TrainConfig):
    """Per-image objectives for both students plus the logged term values.

    Disabled or zero-weight terms are never assembled, contributing exactly
    0 to value and gradient. Returns (loss_cnn, loss_vit, parts dict).
    """
    l_ce_c, ce_map_c = pixel_ce(out_c.prediction, labels)
    l_ce_v, ce_map_v = pixel_ce(out_v.prediction, labels)
    loss_c, loss_v = l_ce_c, l_ce_v
    parts = dict.fromkeys(("l_hfd_c", "l_hfd_v", "l_r_c", "l_r_v", "l_p_c", "l_p_v", "m_hat", "m"), 0.0)
    parts["l_ce_c"] = l_ce_c.item()
    parts["l_ce_v"] = l_ce_v.item()

    if tcfg.hfd_active:
        l_hfd_c = hfd_loss_cnn(out_c.f1, adapters.c1, params_v, acfg, out_v.f2)
        l_hfd_v = hfd_loss_vit(out_v.f1, adapters.v1, params_c, acfg, out_c.f2)
        loss_c = loss_c + tcfg.beta * l_hfd_c
        loss_v = loss_v + tcfg.beta * l_hfd_v
        parts["l_hfd_c"] = l_hfd_c.item()
        parts["l_hfd_v"] = l_hfd_v.item()

    if tcfg.region_active or tcfg.pixel_active:
        lr_pair = (Tensor(0.0), Tensor(0.0))
        lp_pair = (Tensor(0.0), Tensor(0.0))
        if tcfg.region_active:
            fl_c = apply_adapter(out_c.fl, adapters.cl)
            fl_v = apply_adapter(out_v.fl, adapters.vl)
            grid = RegionGrid.for_shapes(labels.shape, fl_c.shape[1:])
            region_mask = build_region_mask(region_ce(ce_map_c, grid), region_ce(ce_map_v, grid))
            lr_pair = region_loss(fl_c, fl_v, region_mask)
            parts["l_r_c"] = lr_pair[0].item()
            parts["l_r_v"] = lr_pair[1].item()
            parts["m_hat"] = float(region_mask.count)
        if tcfg.pixel_active:
            pixel_mask = build_pixel_mask(ce_map_c, ce_map_v)
            lp_pair = pixel_loss(out_c.prediction, out_v.prediction, pixel_mask)
            parts["l_p_c"] = lp_pair[0].item()
            parts["l_p_v"] = lp_pair[1].item()
            parts["m"] = float(pixel_mask.count)
        l_bsd_c, l_bsd_v = bsd_loss(lr_pair, lp_pair, tcfg.alpha)
        loss_c = loss_c + tcfg.gamma * l_bsd_c
        loss_v = loss_v + tcfg.gamma * l_bsd_v

    return loss_c, loss_v, parts


# training state ---------------------------------------------------------

@dataclass
class TrainState:
    acfg: ArchConfig
    params_c: StudentParams
    params_v: StudentParams
    adapters: AdapterSet
    opt_c: SgdMomentum
    opt_v: AdamW
    step: int = 0


def make_train_state(acfg: ArchConfig, tcfg: TrainConfig) -> TrainState:
    params_c = init_cnn_params(acfg, substream(tcfg.seed, "init_cnn"))
    params_v = init_vit_params(acfg, substream(tcfg.seed, "init_vit"))
    adapters = init_adapters(acfg, substream(tcfg.seed, "init_adapters"))
    opt_c = SgdMomentum(list(params_c.items()) + adapters.cnn_side(), tcfg.sgd)
    opt_v = AdamW(list(params_v.items()) + adapters.vit_side(), tcfg.adamw)
    return TrainState(acfg=acfg, params_c=params_c, params_v=params_v, adapters=adapters, opt_c=opt_c, opt_v=opt_v)


def train_step(batch, state: TrainState, tcfg: TrainConfig) -> dict:
    """One collaborative update on a list of (image, labels) samples."""
    step = state.step + 1
    state.opt_c.zero_grad()
    state.opt_v.zero_grad()
    total_c = total_v = None
    sums: dict = {}
    for image, labels in batch:
        out_c = cnn_forward(Tensor(image), state.params_c, state.acfg)
        out_v = vit_forward(Tensor(image), state.params_v, state.acfg)
        loss_c, loss_v, parts = total_objective(out_c, out_v, labels, state.params_c, state.params_v, state.adapters, state.acfg, tcfg)
        total_c = loss_c if total_c is None else total_c + loss_c
        total_v = loss_v if total_v is None else total_v + loss_v
        for key, value in parts.items():
            sums[key] = sums.get(key, 0.0) + value
    scale = 1.0 / len(batch)
    means = {key: value * scale for key, value in sums.items()}
    for name, value in means.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} ({value}) at step {step}")
    (total_c * scale).backward()
    (total_v * scale).backward()
    state.opt_c.step()
    state.opt_v.step()
    state.step = step
    return means


def evaluate(params_c, params_v, acfg: ArchConfig, dataset):
    """(mIoU of the CNN student, mIoU of the ViT student) on a dataset."""
    frozen_c, frozen_v = detach_params(params_c), detach_params(params_v)
    cm_c = ConfusionMatrix.empty(acfg.num_classes)
    cm_v = ConfusionMatrix.empty(acfg.num_classes)
    for image, labels in dataset:
        x = Tensor(image)
        update_confusion(cm_c, predict_labels(cnn_forward(x, frozen_c, acfg).prediction), labels)
        update_confusion(cm_v, predict_labels(vit_forward(x, frozen_v, acfg).prediction), labels)
    return miou_from_confusion(cm_c), miou_from_confusion(cm_v)


# metrics log -------------------------------------------------------------

METRIC_FIELDS = ("l_ce_c", "l_ce_v", "l_hfd_c", "l_hfd_v", "l_r_c", "l_r_v", "l_p_c", "l_p_v", "m_hat", "m", "miou_c", "miou_v")
METRICS_HEADER = "# step " + " ".join(METRIC_FIELDS)


def format_metrics_line(step: int, record: dict) -> str:
    return f"{step} " + " ".join(format(record[name], ".9g") for name in METRIC_FIELDS)


def parse_metrics_line(line: str) -> dict:
    fields = line.split()
    out = {"step": int(fields[0])}
    for name, raw in zip(METRIC_FIELDS, fields[1:]):
        out[name] = float(raw)
    return out


# checkpoints --------------------------------------------------------------

def save_checkpoint(path, acfg: ArchConfig, params_c, params_v, adapters: AdapterSet) -> None:
    records = [
        ("config/input_hw", np.array(acfg.input_hw, dtype=float)),
        ("config/num_classes", np.array([float(acfg.num_classes)])),
        ("config/cnn_channels", np.array(acfg.cnn_channels, dtype=float)),
        ("config/vit_dims", np.array(acfg.vit_dims, dtype=float)),
        ("config/patch_size", np.array([float(acfg.patch_size)])),
        ("config/num_heads", np.array([float(acfg.num_heads)])),
        ("config/ffn_ratio", np.array([float(acfg.ffn_ratio)])),
    ]
    records += [(f"cnn/{name}", p.data) for name, p in params_c.items()]
    records += [(f"vit/{name}", p.data) for name, p in params_v.items()]
    records += [(name, p.data) for name, p in adapters.cnn_side() + adapters.vit_side()]
    write_archive(path, records)


def load_checkpoint(path):
    blob = read_archive(path)
    acfg = ArchConfig(
        input_hw=tuple(int(v) for v in blob["config/input_hw"]),
        num_classes=int(blob["config/num_classes"][0]),
        cnn_channels=tuple(int(v) for v in blob["config/cnn_channels"]),
        vit_dims=tuple(int(v) for v in blob["config/vit_dims"]),
        patch_size=int(blob["config/patch_size"][0]),
        num_heads=int(blob["config/num_heads"][0]),
        ffn_ratio=int(blob["config/ffn_ratio"][0]),
    )
    params_c = {k[4:]: Tensor(v, requires_grad=True) for k, v in blob.items() if k.startswith("cnn/")}
    params_v = {k[4:]: Tensor(v, requires_grad=True) for k, v in blob.items() if k.startswith("vit/")}
    adapters = init_adapters(acfg, substream(0, "init_adapters"))
    for adapter, tag in ((adapters.c1, "adapter_c1"), (adapters.v1, "adapter_v1"), (adapters.cl, "adapter_cl"), (adapters.vl, "adapter_vl")):
        adapter.weight.data = blob[f"{tag}/weight"].copy()
        adapter.bias.data = blob[f"{tag}/bias"].copy()
    return acfg, params_c, params_v, adapters


# full run ------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    records: list
    miou_c: float
    miou_v: float


def run_training(train_set, eval_set, acfg: ArchConfig, tcfg: TrainConfig, out_dir=None) -> RunResult:
    """Run tcfg.steps collaborative steps; optionally write metrics/checkpoints.

    Batch order comes from the `shuffle` sub-stream of the seed: epochs of
    random permutations, consumed batch_size indices at a time. Evaluation
    runs every eval_every steps and always at the final step, on eval_set
    when given and on the training set otherwise.
    """
    state = make_train_state(acfg, tcfg)
    shuffle = substream(tcfg.seed, "shuffle")
    eval_on = eval_set if eval_set is not None else train_set
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.log", "w")
        log_fh.write(METRICS_HEADER + "\n")

    def index_stream():
        while True:
            for i in shuffle.permutation(len(train_set)):
                yield int(i)

    indices = index_stream()
    records = []
    miou_c = miou_v = float("nan")
    try:
        for step in range(1, tcfg.steps + 1):
            batch = [train_set[next(indices)] for _ in range(tcfg.batch_size)]
            record = train_step(batch, state, tcfg)
            if step % tcfg.eval_every == 0 or step == tcfg.steps:
                miou_c, miou_v = evaluate(state.params_c, state.params_v, acfg, eval_on)
                record["miou_c"], record["miou_v"] = miou_c, miou_v
            else:
                record["miou_c"] = record["miou_v"] = float("nan")
            records.append({"step": step, **record})
            if log_fh is not None:
                log_fh.write(format_metrics_line(step, record) + "\n")
            if out_dir is not None and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{step:06d}.bin", acfg, state.params_c, state.params_v, state.adapters)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final.bin", acfg, state.params_c, state.params_v, state.adapters)
    return RunResult(state=state, records=records, miou_c=miou_c, miou_v=miou_v)
