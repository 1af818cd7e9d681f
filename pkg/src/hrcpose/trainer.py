"""Training loop: contrastive + pose regression losses, AdamW, plateau schedule.

Overall loss per step::

    total = L_CL_R + L_CL_t + lambda_basic * L_basic

where ``L_basic`` averages over the batch

    (1 - cos(r_x))  [asymmetric only] + (1 - cos(r_y)) + |t - t*|_1 + |s - s*|_1

Every step is a pure function of ``(params, optimizer state, step index)``:
batch indices and augmentation draw from ``default_rng([seed, step])``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import hrcl
from .diffcore import Tape
from .encoder import EncoderParams, ModelConfig, branch_inputs, build_graph, config_dict, init_params, param_specs
from .errors import CheckpointError, CheckpointVersionError, ConfigError, NumericError
from .geometry import Pose
from .synthdata import GenConfig, augment

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HRCCKPT\x00"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "lr", "loss_total", "loss_cl_R", "loss_cl_t", "loss_basic")


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 4000
    lr: float = 1e-3
    weight_decay: float = 1e-3
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-5
    threshold: float = 1e-4
    lambda_basic: float = 1.0
    seed: int = 0
    eval_interval: int = 20
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 2 or self.steps < 0 or self.eval_interval < 1:
            raise ConfigError("batch_size >= 2, steps >= 0 and eval_interval >= 1 required")
        if not (self.lr >= 0 and self.weight_decay >= 0 and self.min_lr >= 0):
            raise ConfigError("learning rates and weight decay must be nonnegative")
        if not 0 < self.factor < 1:
            raise ConfigError("scheduler factor must be in (0, 1)")
        if self.patience < 1:
            raise ConfigError("scheduler patience must be at least 1")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams):
        return cls(
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations
    without a relative improvement larger than ``threshold``."""

    lr: float
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 0.0
    threshold: float = 1e-4
    best: float = math.inf
    num_bad: int = 0

    def step(self, value):
        value = float(value)
        if not math.isfinite(value):
            raise NumericError(f"scheduler received non-finite value {value}")
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.num_bad = 0
        return self.lr

    def state_dict(self):
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d

    @classmethod
    def from_state(cls, d):
        d = dict(d)
        d["best"] = math.inf if d["best"] is None else d["best"]
        return cls(**d)


def plateau_step(scheduler: PlateauScheduler, monitored):
    return scheduler.step(monitored)


def adamw_update(params, grads, state: OptimizerState, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW step with decoupled weight decay.

    ``params`` and ``grads`` are dicts of arrays. Returns new
    ``(params, state)``; the inputs are not modified.
    """
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        p = p * (1.0 - lr * wd)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p[k], new_m[k], new_v[k] = p, m, v
    return new_p, OptimizerState(new_m, new_v, t)


# ------------------------------------------------------------------ losses


def basic_pose_loss(pred: Pose, gt: Pose, cat) -> float:
    """Regression loss between two poses (unit normals assumed)."""
    loss = 1.0 - float(pred.r_y @ gt.r_y) / float(np.linalg.norm(pred.r_y))
    if not cat.symmetric:
        loss += 1.0 - float(pred.r_x @ gt.r_x) / float(np.linalg.norm(pred.r_x))
    loss += float(np.abs(pred.t - gt.t).sum()) + float(np.abs(pred.s - gt.s).sum())
    return loss


def add_basic_loss(tape: Tape, rot6, t_res, s, batch):
    """Graph form of the basic loss, averaged over the batch.

    Inputs declared: ``gt_rx``, ``gt_ry`` (B, 3), ``rx_weight`` (B,) holding
    0 for symmetric samples, ``ones`` (B,), ``t_target`` (B, 3) = t* - centroid,
    ``s_gt`` (B, 3).
    """
    gt_rx = tape.input("gt_rx", (batch, 3), requires_grad=False)
    gt_ry = tape.input("gt_ry", (batch, 3), requires_grad=False)
    rx_w = tape.input("rx_weight", (batch,), requires_grad=False)
    ones = tape.input("ones", (batch,), requires_grad=False)
    t_target = tape.input("t_target", (batch, 3), requires_grad=False)
    s_gt = tape.input("s_gt", (batch, 3), requires_grad=False)
    cos_x = tape.rowdot(tape.normalize_rows(tape.columns(rot6, 0, 3)), gt_rx)
    cos_y = tape.rowdot(tape.normalize_rows(tape.columns(rot6, 3, 6)), gt_ry)
    lx = tape.sum(tape.mul(tape.sub(ones, cos_x), rx_w))
    ly = tape.sum(tape.sub(ones, cos_y))
    lt = tape.sum(tape.abs(tape.sub(t_res, t_target)))
    ls = tape.sum(tape.abs(tape.sub(s, s_gt)))
    total = tape.add(tape.add(lx, ly), tape.add(lt, ls))
    return tape.scale(total, 1.0 / batch, name="basic")


def basic_bindings(samples, centroids):
    poses = [s.pose for s in samples]
    b = len(samples)
    return {
        "gt_rx": np.stack([p.r_x for p in poses]),
        "gt_ry": np.stack([p.r_y for p in poses]),
        "rx_weight": np.array([0.0 if s.symmetric else 1.0 for s in samples]),
        "ones": np.ones(b),
        "t_target": np.stack([p.t for p in poses]) - centroids,
        "s_gt": np.stack([p.s for p in poses]),
    }


class TrainingGraph:
    """The full per-step graph for one batch size, built once and re-evaluated."""

    def __init__(self, model_cfg: ModelConfig, cl_cfg: hrcl.CLConfig, lambda_basic, batch, dtype=np.float32):
        self.model_cfg, self.cl_cfg, self.batch = model_cfg, cl_cfg, batch
        self.lambda_basic = float(lambda_basic)
        self.tape = tape = Tape(dtype)
        self.nodes = nodes = build_graph(tape, model_cfg, batch)
        self.basic = add_basic_loss(tape, nodes["rot6"], nodes["t_res"], nodes["s"], batch)
        total = tape.scale(self.basic, self.lambda_basic)
        self.cl = None
        if not cl_cfg.off:
            self.cl = hrcl.add_cl_terms(tape, {"R": nodes["f_R"], "t": nodes["f_t"]}, batch, cl_cfg)
            for g in hrcl.BRANCHES:
                if self.cl[g]["cl"] is not None:
                    total = tape.add(total, self.cl[g]["cl"])
        self.total = total

    def bindings(self, arrays, samples):
        pts = np.stack([s.points for s in samples])
        x_R, x_t, centroids = branch_inputs(pts, self.model_cfg)
        b = {**arrays, "x_R": x_R, "x_t": x_t}
        b.update(basic_bindings(samples, centroids))
        if self.cl is not None:
            cats = [s.category for s in samples]
            table = {s.category: _SymFlag(s.symmetric) for s in samples}
            dm = hrcl.distance_matrices([s.pose for s in samples], cats, table, self.cl_cfg.ignore_category)
            b.update(hrcl.mask_bindings(dm))
        return b

    def run(self, arrays, samples, with_grad=True):
        """Forward (and backward). Returns ``(breakdown, grads)``."""
        outs = [self.basic]
        cl_nodes = []
        if self.cl is not None:
            cl_nodes = [self.cl[g]["cl"] for g in hrcl.BRANCHES]
            outs += [n for n in cl_nodes if n is not None]
        vals = self.tape.evaluate(self.bindings(arrays, samples), outs)
        basic = float(vals[0])
        cl_vals = iter(vals[1:])
        cl = [float(next(cl_vals)) if n is not None else 0.0 for n in cl_nodes] or [0.0, 0.0]
        breakdown = {
            "loss_cl_R": cl[0],
            "loss_cl_t": cl[1],
            "loss_basic": basic,
        }
        # reported total is the exact weighted sum of the reported terms
        breakdown["loss_total"] = cl[0] + cl[1] + self.lambda_basic * basic
        grads = self.tape.gradients(self.total) if with_grad else None
        if grads is not None:
            grads = {k: grads[k] for k in arrays}
        return breakdown, grads


@dataclass(frozen=True)
class _SymFlag:
    symmetric: bool


# ------------------------------------------------------------------ steps


def draw_batch(dataset, cfg: TrainConfig, gen_cfg: GenConfig, step):
    """Batch of (augmented) samples for a step; deterministic in ``(cfg.seed, step)``."""
    rng = np.random.default_rng([int(cfg.seed), int(step), 0xB7])
    idx = rng.choice(len(dataset), size=cfg.batch_size, replace=False)
    batch = [dataset[i] for i in idx]
    if cfg.augment:
        batch = [augment(s, rng, gen_cfg) for s in batch]
    return batch, idx


def train_step(params: EncoderParams, opt_state: OptimizerState, batch, cfg: TrainConfig,
               cl_cfg: hrcl.CLConfig | None = None, lr=None, graph: TrainingGraph | None = None):
    """One forward/backward/AdamW update.

    Returns ``(params', opt_state', breakdown)``. Raises NumericError on a
    non-finite loss.
    """
    cl_cfg = cl_cfg or hrcl.CLConfig()
    if graph is None:
        dtype = next(iter(params.arrays.values())).dtype
        graph = TrainingGraph(params.config, cl_cfg, cfg.lambda_basic, len(batch), dtype)
    breakdown, grads = graph.run(params.arrays, batch)
    if not all(math.isfinite(v) for v in breakdown.values()):
        raise NumericError(f"non-finite loss {breakdown}")
    lr = cfg.lr if lr is None else lr
    new_arrays, new_state = adamw_update(params.arrays, grads, opt_state, lr, cfg.weight_decay)
    return EncoderParams(params.config, new_arrays, params.version), new_state, breakdown


@dataclass
class TrainState:
    params: EncoderParams
    opt: OptimizerState
    scheduler: PlateauScheduler
    step: int = 0
    window: list = field(default_factory=list)


def new_train_state(model_cfg: ModelConfig, cfg: TrainConfig):
    params = init_params(cfg.seed, model_cfg)
    sched = PlateauScheduler(cfg.lr, cfg.patience, cfg.factor, cfg.min_lr, cfg.threshold)
    return TrainState(params, OptimizerState.zeros_like(params), sched)


def train(dataset, model_cfg: ModelConfig, cl_cfg: hrcl.CLConfig, cfg: TrainConfig,
          gen_cfg: GenConfig | None = None, state: TrainState | None = None,
          until=None, log_rows=None, progress=None):
    """Run training steps ``state.step .. until`` (default ``cfg.steps``).

    ``log_rows`` (a list) receives one dict per step with the CSV columns.
    Returns the final TrainState.
    """
    gen_cfg = gen_cfg or GenConfig()
    state = state or new_train_state(model_cfg, cfg)
    until = cfg.steps if until is None else until
    graph = TrainingGraph(model_cfg, cl_cfg, cfg.lambda_basic, cfg.batch_size)
    while state.step < until:
        batch, idx = draw_batch(dataset, cfg, gen_cfg, state.step)
        lr = state.scheduler.lr
        try:
            state.params, state.opt, br = train_step(
                state.params, state.opt, batch, cfg, cl_cfg, lr=lr, graph=graph
            )
        except NumericError as exc:
            raise NumericError(
                f"step {state.step}: {exc}; batch rng seed [{cfg.seed}, {state.step}, 0xB7], "
                f"dataset indices {idx.tolist()}"
            ) from None
        if log_rows is not None:
            log_rows.append({"step": state.step, "lr": lr, **br})
        state.window.append(br["loss_total"])
        state.step += 1
        if len(state.window) == cfg.eval_interval:
            state.scheduler.step(sum(state.window) / len(state.window))
            state.window = []
        if progress is not None:
            progress(state.step, br)
    return state


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(state: TrainState, path, extra=None):
    """Binary checkpoint.

    Layout: 8-byte magic, uint32 LE header length, UTF-8 JSON header, then
    float32 LE arrays in :func:`param_specs` order: all parameters, then the
    first moments, then the second moments.
    """
    cfg = state.params.config
    specs = param_specs(cfg)
    header = {
        "v": CHECKPOINT_VERSION,
        "widths": list(cfg.widths),
        "D": cfg.dim,
        "N_p": cfg.n_points,
        "model": config_dict(cfg),
        "arrays": [[n, list(s)] for n, s in specs],
        "step": state.step,
        "opt_step": state.opt.step,
        "scheduler": state.scheduler.state_dict(),
        "window": [float(x) for x in state.window],
        "extra": extra or {},
    }
    blobs = []
    for group in (state.params.arrays, state.opt.m, state.opt.v):
        for name, shape in specs:
            arr = np.asarray(group[name])
            if arr.shape != tuple(shape):
                raise CheckpointError(f"{name}: shape {arr.shape} != {shape}")
            blobs.append(arr.astype("<f4").tobytes())
    payload = b"".join(blobs)
    header["payload_bytes"] = len(payload)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(payload)


def load_checkpoint(path):
    """Returns ``(TrainState, header)``. Nothing is returned on any format error."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 12:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointVersionError(f"{path}: corrupt header") from None
    if not isinstance(header, dict) or header.get("v") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('v') if isinstance(header, dict) else None!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        cfg = ModelConfig(**header["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"{path}: corrupt header ({exc})") from None
    specs = param_specs(cfg)
    payload = data[12 + hlen:]
    expected = 3 * 4 * sum(int(np.prod(s)) for _, s in specs)
    if len(payload) != expected or header.get("payload_bytes") != expected:
        raise CheckpointError(f"{path}: truncated or oversized payload ({len(payload)} of {expected} bytes)")
    off = 0
    groups = []
    for _ in range(3):
        g = {}
        for name, shape in specs:
            n = int(np.prod(shape))
            g[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
        groups.append(g)
    state = TrainState(
        EncoderParams(cfg, groups[0]),
        OptimizerState(groups[1], groups[2], int(header["opt_step"])),
        PlateauScheduler.from_state(header["scheduler"]),
        int(header["step"]),
        list(header.get("window", [])),
    )
    return state, header
