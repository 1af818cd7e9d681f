"""Paired per-point encoders (rotation branch, translation branch) and pose heads.

Each branch is a shared per-point MLP ``3 -> 64 -> 128 -> D`` with relu
after the hidden layers, max-pooled over points into a global embedding.
The rotation branch sees points centered on their bounding-box midpoint;
the translation branch sees raw camera-frame points. Both are multiplied by
``input_scale`` (meters -> decimeters by default).

Heads, each ``in -> 64 -> out`` with a relu hidden layer:

* rotation: ``f_R -> 6`` raw normals, orthonormalized with ``r_y`` kept.
* translation: ``[f_t, max-pooled coordinates] -> 3`` residual in meters,
  added to the point centroid.
* size: ``f_R -> 3``, mapped to meters by ``size_scale * softplus(z)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Tape
from .errors import DegenerateNormalsError, InputError, ShapeError
from .geometry import Pose, rotation_from_normals

PARAMS_VERSION = 1


@dataclass
class ModelConfig:
    n_points: int = 256
    dim: int = 128
    widths: tuple = (64, 128)
    head_hidden: int = 64
    input_scale: float = 10.0
    size_scale: float = 0.1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.dim < 1 or self.n_points < 1 or not self.widths:
            raise ValueError("model dimensions must be positive")


def param_specs(cfg: ModelConfig):
    """Parameter names and shapes, in checkpoint order."""
    specs = []
    for branch in ("R", "t"):
        fan = 3
        for li, w in enumerate((*cfg.widths, cfg.dim), start=1):
            specs.append((f"enc{branch}.W{li}", (fan, w)))
            specs.append((f"enc{branch}.b{li}", (w,)))
            fan = w
    h = cfg.head_hidden
    for head, fan, out in (("rot", cfg.dim, 6), ("trans", cfg.dim + 3, 3), ("size", cfg.dim, 3)):
        specs += [
            (f"{head}.W1", (fan, h)), (f"{head}.b1", (h,)),
            (f"{head}.W2", (h, out)), (f"{head}.b2", (out,)),
        ]
    return specs


@dataclass
class EncoderParams:
    config: ModelConfig
    arrays: dict
    version: int = PARAMS_VERSION

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def astype(self, dtype):
        return EncoderParams(
            self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.version
        )


def init_params(seed, cfg: ModelConfig, dtype=np.float32) -> EncoderParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng([int(seed), 0x1E])
    arrays = {}
    for name, shape in param_specs(cfg):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return EncoderParams(cfg, arrays)


@dataclass
class Embeddings:
    f_pc_R: np.ndarray
    f_pc_t: np.ndarray
    f_R: np.ndarray
    f_t: np.ndarray
    pooled_coords: np.ndarray = field(default=None, repr=False)


# ------------------------------------------------------------------ graph


def branch_inputs(points, cfg: ModelConfig):
    """Per-branch network inputs for a ``(B, N_p, 3)`` stack of point clouds.

    Returns ``(x_R, x_t, centroids)`` with the inputs flattened to ``(B*N_p, 3)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ShapeError(f"points must be (B, N_p, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InputError("points contain NaN or Inf")
    mid = 0.5 * (pts.min(axis=1, keepdims=True) + pts.max(axis=1, keepdims=True))
    x_R = ((pts - mid) * cfg.input_scale).reshape(-1, 3)
    x_t = (pts * cfg.input_scale).reshape(-1, 3)
    return x_R, x_t, pts.mean(axis=1)


def _branch(tape, prefix, x, cfg, groups, names):
    h = x
    n_layers = len(cfg.widths) + 1
    for li in range(1, n_layers + 1):
        h = tape.affine(h, names[f"{prefix}.W{li}"], names[f"{prefix}.b{li}"])
        if li < n_layers:
            h = tape.relu(h)
    return h, tape.maxpool(h, groups)


def _mlp_head(tape, prefix, x, names):
    h = tape.relu(tape.affine(x, names[f"{prefix}.W1"], names[f"{prefix}.b1"]))
    return tape.affine(h, names[f"{prefix}.W2"], names[f"{prefix}.b2"])


def build_graph(tape: Tape, cfg: ModelConfig, batch: int):
    """Add the encoder and heads for ``batch`` point clouds to ``tape``.

    Leaves: every parameter, plus inputs ``x_R`` and ``x_t`` (no gradient).
    Returns a dict of named nodes.
    """
    pn = {name: tape.param(name, shape) for name, shape in param_specs(cfg)}
    rows = batch * cfg.n_points
    x_R = tape.input("x_R", (rows, 3), requires_grad=False)
    x_t = tape.input("x_t", (rows, 3), requires_grad=False)
    f_pc_R, f_R = _branch(tape, "encR", x_R, cfg, batch, pn)
    f_pc_t, f_t = _branch(tape, "enct", x_t, cfg, batch, pn)
    # max-pool is per column, so pooling [f_pc_t, coords] equals [f_t, pooled coords]
    coords = tape.maxpool(x_t, batch)
    f_t_aug = tape.concat(f_t, coords)
    rot6 = _mlp_head(tape, "rot", f_R, pn)
    t_res = _mlp_head(tape, "trans", f_t_aug, pn)
    s = tape.scale(tape.softplus(_mlp_head(tape, "size", f_R, pn)), cfg.size_scale)
    return {
        "params": pn, "x_R": x_R, "x_t": x_t,
        "f_pc_R": f_pc_R, "f_pc_t": f_pc_t, "f_R": f_R, "f_t": f_t, "coords": coords,
        "rot6": rot6, "t_res": t_res, "s": s,
    }


def _head_graph(cfg: ModelConfig, dtype):
    tape = Tape(dtype)
    pn = {name: tape.param(name, shape) for name, shape in param_specs(cfg) if not name.startswith("enc")}
    f_R = tape.input("f_R", requires_grad=False)
    f_t_aug = tape.input("f_t_aug", requires_grad=False)
    rot6 = _mlp_head(tape, "rot", f_R, pn)
    t_res = _mlp_head(tape, "trans", f_t_aug, pn)
    s = tape.scale(tape.softplus(_mlp_head(tape, "size", f_R, pn)), cfg.size_scale)
    return tape, (rot6, t_res, s)


# ------------------------------------------------------------------ public ops


def encode_batch(params: EncoderParams, points, dtype=None):
    """Encode a ``(B, N_p, 3)`` stack. Returns Embeddings with a leading batch axis."""
    cfg = params.config
    dtype = dtype or next(iter(params.arrays.values())).dtype
    x_R, x_t, _ = branch_inputs(points, cfg)
    batch = x_R.shape[0] // cfg.n_points
    if x_R.shape[0] != batch * cfg.n_points:
        raise ShapeError("point count does not match the model configuration")
    tape = Tape(dtype)
    nodes = build_graph(tape, cfg, batch)
    f_pc_R, f_pc_t, f_R, f_t, coords = tape.evaluate(
        {**params.arrays, "x_R": x_R, "x_t": x_t},
        [nodes[k] for k in ("f_pc_R", "f_pc_t", "f_R", "f_t", "coords")],
    )
    n = cfg.n_points
    return Embeddings(
        f_pc_R.reshape(batch, n, -1), f_pc_t.reshape(batch, n, -1), f_R, f_t, coords
    )


def encode(params: EncoderParams, points) -> Embeddings:
    """Embeddings of one ``(N_p, 3)`` point cloud."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape != (params.config.n_points, 3):
        raise ShapeError(f"points must be ({params.config.n_points}, 3), got {pts.shape}")
    e = encode_batch(params, pts[None])
    return Embeddings(e.f_pc_R[0], e.f_pc_t[0], e.f_R[0], e.f_t[0], e.pooled_coords[0])


def normals_from_raw(raw6):
    """Orthonormal ``(r_x, r_y)`` from 6 raw outputs, with a fallback for degenerate ones.

    Returns ``(r_x, r_y, degenerate)``.
    """
    raw6 = np.asarray(raw6, dtype=np.float64)
    try:
        M = rotation_from_normals(raw6[:3], raw6[3:])
        return M[:, 0], M[:, 1], False
    except DegenerateNormalsError:
        ry = raw6[3:]
        ry = ry / np.linalg.norm(ry) if np.linalg.norm(ry) > 1e-12 else np.array([0.0, 1.0, 0.0])
        # nearest basis direction least aligned with r_y, then orthogonalize
        helper = np.eye(3)[int(np.argmin(np.abs(ry)))]
        M = rotation_from_normals(helper, ry)
        return M[:, 0], M[:, 1], True


def poses_from_outputs(rot6, t_res, s, centroids):
    poses, diagnostics = [], []
    for b in range(len(rot6)):
        r_x, r_y, degenerate = normals_from_raw(rot6[b])
        if degenerate:
            diagnostics.append({"index": b, "issue": "degenerate predicted normals"})
        t = np.asarray(centroids[b], dtype=np.float64) + np.asarray(t_res[b], dtype=np.float64)
        poses.append(Pose(r_x, r_y, t, np.asarray(s[b], dtype=np.float64)))
    return poses, diagnostics


def heads_forward(params: EncoderParams, emb: Embeddings, centroid, diagnostics=None) -> Pose:
    """Predicted pose from one sample's embeddings and point centroid.

    Degenerate raw normals are replaced by the nearest valid orthonormal
    pair; pass a list as ``diagnostics`` to collect such events.
    """
    cfg = params.config
    dtype = next(iter(params.arrays.values())).dtype
    tape, outs = _head_graph(cfg, dtype)
    f_R = np.asarray(emb.f_R).reshape(1, -1)
    f_t_aug = np.concatenate([np.asarray(emb.f_t).reshape(1, -1), np.asarray(emb.pooled_coords).reshape(1, 3)], axis=1)
    bindings = {k: v for k, v in params.arrays.items() if not k.startswith("enc")}
    rot6, t_res, s = tape.evaluate({**bindings, "f_R": f_R, "f_t_aug": f_t_aug}, outs)
    poses, diag = poses_from_outputs(rot6, t_res, s, [centroid])
    if diagnostics is not None:
        diagnostics.extend(diag)
    return poses[0]


def predict(params: EncoderParams, samples, chunk=32):
    """Predicted poses and global embeddings for a list of samples.

    Returns ``(poses, f_R, f_t, diagnostics)``.
    """
    cfg = params.config
    dtype = next(iter(params.arrays.values())).dtype
    poses, fR, ft, diagnostics = [], [], [], []
    tapes = {}
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        pts = np.stack([s.points for s in part])
        x_R, x_t, centroids = branch_inputs(pts, cfg)
        b = len(part)
        if b not in tapes:
            tape = Tape(dtype)
            tapes[b] = (tape, build_graph(tape, cfg, b))
        tape, nodes = tapes[b]
        f_R, f_t, rot6, t_res, s = tape.evaluate(
            {**params.arrays, "x_R": x_R, "x_t": x_t},
            [nodes[k] for k in ("f_R", "f_t", "rot6", "t_res", "s")],
        )
        p, diag = poses_from_outputs(rot6, t_res, s, centroids)
        for d in diag:
            d["index"] += start
        poses += p
        diagnostics += diag
        fR.append(np.array(f_R))
        ft.append(np.array(f_t))
    dim = cfg.dim
    fR = np.concatenate(fR) if fR else np.zeros((0, dim))
    ft = np.concatenate(ft) if ft else np.zeros((0, dim))
    return poses, fR, ft, diagnostics


def config_dict(cfg: ModelConfig):
    d = asdict(cfg)
    d["widths"] = list(cfg.widths)
    return d
