"""Dual-branch encoder-decoder and the teacher-student parameter pair.

The network is a miniature V-Net-style encoder-decoder: strided 2x
downsampling, transposed 2x upsampling, skip concatenation, and two heads on
the shared decoder output: per-category segmentation scores and a
tanh-bounded signed-distance regression.  Dropout sits at the bottleneck and
the two coarsest decoder levels.  Parameters live in a flat name->array dict
so EMA updates, SGD and checkpointing are plain array arithmetic.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from mcseg import nn
from mcseg.errors import InvalidConfigError, InvalidInputError, InvalidStateError, NumericalError

_DTYPE_TAGS = {"float32": "f32", "float64": "f64"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class NetConfig:
    dims: int = 2
    in_channels: int = 1
    num_categories: int = 2
    base_width: int = 8
    depth: int = 3
    dropout_rate: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise InvalidConfigError(f"dims must be 2 or 3, got {self.dims}")
        if self.depth < 2:
            raise InvalidConfigError("depth must be >= 2")
        if self.num_categories < 2:
            raise InvalidConfigError("num_categories must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfigError("dropout_rate must be in [0, 1)")
        if self.dtype not in _DTYPE_TAGS:
            raise InvalidConfigError(f"dtype must be one of {list(_DTYPE_TAGS)}")

    @property
    def widths(self):
        return [self.base_width * (2 ** l) for l in range(self.depth)]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class DualBranchNet:
    """Parameter container plus forward/backward passes."""

    def __init__(self, cfg: NetConfig, params: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    def copy(self) -> "DualBranchNet":
        return DualBranchNet(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def _decoder_dropout(self, level: int) -> bool:
        # dropout on the two coarsest decoder levels (coarsest = depth-2)
        return self.cfg.dropout_rate > 0 and level >= self.cfg.depth - 3

    def forward(
        self,
        images: np.ndarray,
        dropout_on: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Run the network; returns (seg_scores, dist_pred).

        seg_scores are pre-softmax per-category maps (B, C, *S); dist_pred is
        the tanh-bounded distance regression (B, 1, *S).
        """
        scores, dist, _ = self._run(images, dropout_on, rng, want_cache=False)
        return scores, dist

    def forward_cache(self, images, dropout_on=False, rng=None):
        return self._run(images, dropout_on, rng, want_cache=True)

    def _run(self, images, dropout_on, rng, want_cache):
        cfg = self.cfg
        p = self.params
        x = np.asarray(images, dtype=cfg.np_dtype)
        if x.ndim != cfg.dims + 2 or x.shape[1] != cfg.in_channels:
            raise InvalidInputError(
                f"expected input (B, {cfg.in_channels}, *spatial[{cfg.dims}]), got {x.shape}"
            )
        min_extent = 2 ** (cfg.depth - 1)
        if any(s % min_extent for s in x.shape[2:]):
            raise InvalidInputError(
                f"spatial extents {x.shape[2:]} must be multiples of {min_extent}"
            )
        if dropout_on and cfg.dropout_rate > 0 and rng is None:
            raise InvalidInputError("dropout_on=True requires an rng")

        cache: Dict[str, object] = {}

        def conv_relu(name, h):
            z = nn.conv_same(h, p[f"{name}.w"], p[f"{name}.b"])
            if want_cache:
                cache[name] = (h, z)
            return nn.relu(z)

        def drop(name, h):
            if not dropout_on or cfg.dropout_rate <= 0:
                return h
            mask = nn.dropout_mask(h.shape, cfg.dropout_rate, rng, cfg.np_dtype)
            if want_cache:
                cache[name] = mask
            return h * mask

        h = x
        skips = []
        for l in range(cfg.depth - 1):
            h = conv_relu(f"enc{l}.c1", h)
            h = conv_relu(f"enc{l}.c2", h)
            skips.append(h)
            if want_cache:
                cache[f"down{l}.x"] = h
            h = nn.down2(h, p[f"down{l}.w"], p[f"down{l}.b"])
        h = conv_relu("bot.c1", h)
        h = conv_relu("bot.c2", h)
        h = drop("bot.drop", h)
        for l in reversed(range(cfg.depth - 1)):
            if want_cache:
                cache[f"up{l}.x"] = h
            h = nn.up2(h, p[f"up{l}.w"], p[f"up{l}.b"])
            h = np.concatenate([h, skips[l]], axis=1)
            h = conv_relu(f"dec{l}.c1", h)
            h = conv_relu(f"dec{l}.c2", h)
            if self._decoder_dropout(l):
                h = drop(f"dec{l}.drop", h)
        if want_cache:
            cache["heads.x"] = h
        scores = nn.conv1(h, p["seg.w"], p["seg.b"])
        dist = np.tanh(nn.conv1(h, p["dist.w"], p["dist.b"]))
        # keep the regression output strictly inside (-1, 1): float tanh
        # saturates to exactly +-1.0 where its derivative is already 0
        limit = np.nextafter(cfg.np_dtype.type(1.0), cfg.np_dtype.type(0.0))
        np.clip(dist, -limit, limit, out=dist)
        if want_cache:
            cache["dist.t"] = dist
        if not np.isfinite(scores).all() or not np.isfinite(dist).all():
            raise NumericalError(
                "non-finite network output "
                f"(scores finite={np.isfinite(scores).all()}, dist finite={np.isfinite(dist).all()})"
            )
        return scores, dist, cache

    def backward(
        self, cache: Dict[str, object], d_scores: np.ndarray, d_dist: np.ndarray
    ) -> Dict[str, np.ndarray]:
        """Map output gradients to parameter gradients for one cached forward."""
        cfg = self.cfg
        p = self.params
        grads: Dict[str, np.ndarray] = {}

        def conv_relu_bwd(name, g):
            h_in, z = cache[name]
            gz = nn.relu_vjp(z, g)
            dx, dw, db = nn.conv_same_vjp(h_in, p[f"{name}.w"], gz)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return dx

        def drop_bwd(name, g):
            mask = cache.get(name)
            return g if mask is None else g * mask

        h_heads = cache["heads.x"]
        dist = cache["dist.t"]
        g_seg, grads["seg.w"], grads["seg.b"] = nn.conv1_vjp(h_heads, p["seg.w"], d_scores)
        d_zdist = d_dist * (1.0 - dist * dist)
        g_dist, grads["dist.w"], grads["dist.b"] = nn.conv1_vjp(h_heads, p["dist.w"], d_zdist)
        g = g_seg + g_dist

        skip_grads = {}
        for l in range(cfg.depth - 1):  # decoder blocks in reverse execution order
            if self._decoder_dropout(l):
                g = drop_bwd(f"dec{l}.drop", g)
            g = conv_relu_bwd(f"dec{l}.c2", g)
            g = conv_relu_bwd(f"dec{l}.c1", g)
            w_l = cfg.widths[l]
            g_up, skip_grads[l] = g[:, :w_l], g[:, w_l:]
            g, grads[f"up{l}.w"], grads[f"up{l}.b"] = nn.up2_vjp(
                cache[f"up{l}.x"], p[f"up{l}.w"], g_up
            )
        g = drop_bwd("bot.drop", g)
        g = conv_relu_bwd("bot.c2", g)
        g = conv_relu_bwd("bot.c1", g)
        for l in reversed(range(cfg.depth - 1)):
            g, grads[f"down{l}.w"], grads[f"down{l}.b"] = nn.down2_vjp(
                cache[f"down{l}.x"], p[f"down{l}.w"], g
            )
            g = g + skip_grads[l]
            g = conv_relu_bwd(f"enc{l}.c2", g)
            g = conv_relu_bwd(f"enc{l}.c1", g)
        return grads


def build_network(cfg: NetConfig, seed: int = 0) -> DualBranchNet:
    """Deterministic fan-in-scaled normal initialization for a fixed seed."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    k = (3,) * cfg.dims
    two = (2,) * cfg.dims
    kvol = int(np.prod(k))
    widths = cfg.widths
    params: Dict[str, np.ndarray] = {}

    def conv(name, ci, co, kernel):
        fan_in = ci * int(np.prod(kernel))
        params[f"{name}.w"] = nn.he_normal(rng, (co, ci) + kernel, fan_in, dt)
        params[f"{name}.b"] = np.zeros(co, dtype=dt)

    prev = cfg.in_channels
    for l in range(cfg.depth - 1):
        conv(f"enc{l}.c1", prev, widths[l], k)
        conv(f"enc{l}.c2", widths[l], widths[l], k)
        conv(f"down{l}", widths[l], widths[l + 1], two)
        prev = widths[l + 1]
    conv("bot.c1", widths[-1], widths[-1], k)
    conv("bot.c2", widths[-1], widths[-1], k)
    for l in reversed(range(cfg.depth - 1)):
        fan_in = widths[l + 1]
        params[f"up{l}.w"] = nn.he_normal(
            rng, (widths[l + 1], widths[l]) + two, fan_in * int(np.prod(two)), dt
        )
        params[f"up{l}.b"] = np.zeros(widths[l], dtype=dt)
        conv(f"dec{l}.c1", 2 * widths[l], widths[l], k)
        conv(f"dec{l}.c2", widths[l], widths[l], k)
    params["seg.w"] = nn.he_normal(rng, (cfg.num_categories, widths[0]), widths[0], dt)
    params["seg.b"] = np.zeros(cfg.num_categories, dtype=dt)
    params["dist.w"] = nn.he_normal(rng, (1, widths[0]), widths[0], dt)
    params["dist.b"] = np.zeros(1, dtype=dt)
    return DualBranchNet(cfg, params)


def mc_forward(
    net: DualBranchNet, images: np.ndarray, passes: int, rng: Optional[np.random.Generator]
) -> np.ndarray:
    """Stochastic forward passes under dropout; returns (T, B, C, *S) softmax maps.

    The mean over the leading axis is the averaged probability used for the
    predictive-entropy uncertainty estimate.
    """
    if passes < 1:
        raise InvalidInputError("mc_forward needs at least one pass")
    x = np.asarray(images, dtype=net.cfg.np_dtype)
    tiled = np.concatenate([x] * passes, axis=0)
    scores, _ = net.forward(tiled, dropout_on=True, rng=rng)
    probs = nn.softmax(scores, axis=1)
    return probs.reshape((passes, x.shape[0]) + probs.shape[1:])


@dataclass
class TeacherStudentPair:
    student: DualBranchNet
    teacher: DualBranchNet
    alpha: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfigError("alpha must be in [0, 1]")
        s_keys = set(self.student.params)
        t_keys = set(self.teacher.params)
        if s_keys != t_keys:
            raise InvalidStateError("student/teacher parameter names differ")
        for k in s_keys:
            if self.student.params[k].shape != self.teacher.params[k].shape:
                raise InvalidStateError(f"shape mismatch for parameter {k!r}")


def make_pair(student: DualBranchNet, alpha: float = 0.99) -> TeacherStudentPair:
    return TeacherStudentPair(student=student, teacher=student.copy(), alpha=alpha)


def ema_update(pair: TeacherStudentPair, step: Optional[int] = None) -> TeacherStudentPair:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place.

    ``step`` is accepted for interface symmetry with the training loop; the
    decay is constant.
    """
    alpha = pair.alpha
    for name, sv in pair.student.params.items():
        tv = pair.teacher.params[name]
        if tv.shape != sv.shape:
            raise InvalidStateError(f"shape mismatch for parameter {name!r}")
        tv *= alpha
        tv += (1.0 - alpha) * sv
    return pair


# ---------------------------------------------------------------------------
# checkpoints: manifest JSON + raw little-endian payload


def _flatten_sections(sections: Dict[str, Dict[str, np.ndarray]]):
    for section, params in sections.items():
        for name in sorted(params):
            yield f"{section}/{name}", params[name]


def save_checkpoint(
    path: Union[str, Path],
    pair: TeacherStudentPair,
    step: int,
    momentum: Optional[Dict[str, np.ndarray]] = None,
    train_config: Optional[dict] = None,
    seed: Optional[int] = None,
) -> Path:
    """Write a cross-platform checkpoint: index JSON plus one .bin payload."""
    path = Path(path)
    if path.suffix != ".json":
        path = Path(str(path) + ".json")
    payload_path = path.with_suffix(".bin")
    sections = {"student": pair.student.params, "teacher": pair.teacher.params}
    if momentum is not None:
        sections["momentum"] = momentum
    index = {}
    offset = 0
    chunks = []
    for full_name, arr in _flatten_sections(sections):
        tag = _DTYPE_TAGS[str(arr.dtype)]
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        index[full_name] = {"offset": offset, "shape": list(arr.shape), "dtype": tag}
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "step": int(step),
        "alpha": float(pair.alpha),
        "net_config": asdict(pair.student.cfg),
        "train_config": train_config,
        "seed": seed,
        "payload": payload_path.name,
        "params": index,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    payload_path.write_bytes(b"".join(chunks))
    return path


@dataclass
class CheckpointBundle:
    pair: TeacherStudentPair
    momentum: Dict[str, np.ndarray]
    step: int
    train_config: Optional[dict] = None
    seed: Optional[int] = None


def load_checkpoint(path: Union[str, Path]) -> CheckpointBundle:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cfg = NetConfig(**manifest["net_config"])
    raw = path.with_name(manifest["payload"]).read_bytes()
    sections: Dict[str, Dict[str, np.ndarray]] = {"student": {}, "teacher": {}, "momentum": {}}
    for full_name, meta in manifest["params"].items():
        section, name = full_name.split("/", 1)
        dtype = np.dtype(_TAG_DTYPES[meta["dtype"]]).newbyteorder("<")
        shape = tuple(meta["shape"])
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=meta["offset"])
        sections[section][name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    pair = TeacherStudentPair(
        student=DualBranchNet(cfg, sections["student"]),
        teacher=DualBranchNet(cfg, sections["teacher"]),
        alpha=manifest["alpha"],
    )
    return CheckpointBundle(
        pair=pair,
        momentum=sections["momentum"],
        step=manifest["step"],
        train_config=manifest.get("train_config"),
        seed=manifest.get("seed"),
    )
