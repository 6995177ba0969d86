"""End-to-end training loop for the teacher-student pair.

One step: sample a two-stream batch, run the student with dropout, run the
teacher (single target pass plus stochastic passes for the uncertainty mask),
combine supervised and consistency gradients, apply one SGD-with-momentum
update to the student, then the EMA update to the teacher.  All randomness is
drawn from per-(seed, step, role) streams, so runs are reproducible and a
resumed run continues the interrupted history bit-exactly.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mcseg import data as data_mod
from mcseg import model as model_mod
from mcseg import nn
from mcseg import objectives as obj
from mcseg.data import Batch, Dataset, Volume, sample_batch
from mcseg.errors import InvalidConfigError, InvalidInputError, NumericalError
from mcseg.geometry import sdf_normalize, sdf_transform
from mcseg.model import (
    DualBranchNet,
    NetConfig,
    TeacherStudentPair,
    build_network,
    ema_update,
    load_checkpoint,
    make_pair,
    mc_forward,
    save_checkpoint,
)
from mcseg.objectives import LossBreakdown, lr_schedule

log = logging.getLogger(__name__)

# rng stream roles, keyed per (seed, step)
_ROLE_SAMPLE = 0
_ROLE_AUGMENT = 1
_ROLE_STUDENT_DROP = 2
_ROLE_TEACHER_DROP = 3
_ROLE_MC = 4
_ROLE_NOISE = 5


def step_rng(seed: int, step: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, role)))


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    max_iters: int = 2000
    lr0: float = 0.01
    lr_decay: float = 0.1
    lr_decay_every: int = 800
    momentum: float = 0.9
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    patch: Tuple[int, ...] = (64, 64)
    w_max: float = 0.1
    ramp_squared: bool = False
    beta: float = 0.75
    k: float = 1500.0
    alpha: float = 0.99
    mc_passes: int = 8
    seed: int = 0
    use_dis_supervision: bool = True
    use_itc: bool = True
    use_ctc: bool = True
    use_uncertainty_mask: bool = True
    augment: bool = True
    teacher_noise: float = 0.0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 200
    eval_stride: Optional[Tuple[int, ...]] = None  # default: half the patch
    eval_use_teacher: bool = False

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.eval_stride is not None:
            self.eval_stride = tuple(int(s) for s in self.eval_stride)
        if self.max_iters <= 0:
            raise InvalidConfigError("max_iters must be positive")
        if len(self.patch) != self.net.dims:
            raise InvalidConfigError(f"patch {self.patch} must have {self.net.dims} axes")
        if self.mc_passes < 1:
            raise InvalidConfigError("mc_passes must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidConfigError("beta must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = d.pop("net", {})
        if isinstance(net, dict):
            net = NetConfig(**net)
        return cls(net=net, **d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    cfg: TrainConfig
    pair: TeacherStudentPair
    momentum: Dict[str, np.ndarray]
    step: int = 0
    history: List[LossBreakdown] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    student = build_network(cfg.net, seed=cfg.seed)
    pair = make_pair(student, alpha=cfg.alpha)
    momentum = {k: np.zeros_like(v) for k, v in student.params.items()}
    return TrainState(cfg=cfg, pair=pair, momentum=momentum)


def _augment_batch(batch: Batch, rng: np.random.Generator) -> Batch:
    n_lab = int(batch.labeled_flags.sum())
    images = []
    masks = []
    for i in range(batch.images.shape[0]):
        flips, rot = data_mod.sample_flip_rot(batch.images.ndim - 2, rng)
        images.append(data_mod.apply_flip_rot(batch.images[i, 0], flips, rot))
        if i < n_lab and batch.masks is not None:
            masks.append(data_mod.apply_flip_rot(batch.masks[i], flips, rot))
    return Batch(
        images=np.stack(images)[:, None],
        masks=np.stack(masks) if masks else None,
        labeled_flags=batch.labeled_flags,
        case_ids=batch.case_ids,
    )


def _sdf_targets(masks: np.ndarray, dtype) -> np.ndarray:
    out = np.empty((masks.shape[0], 1) + masks.shape[1:], dtype=dtype)
    for i in range(masks.shape[0]):
        out[i, 0] = sdf_normalize(sdf_transform(masks[i]))
    return out


def train_step(state: TrainState, batch: Batch) -> TrainState:
    """One optimization step (Algorithm: supervised + masked consistency +
    SGD on the student, then EMA on the teacher)."""
    cfg = state.cfg
    t = state.step
    num_cat = cfg.net.num_categories
    dtype = cfg.net.np_dtype
    student = state.pair.student
    teacher = state.pair.teacher

    x = np.ascontiguousarray(batch.images, dtype=dtype)
    n_lab = int(batch.labeled_flags.sum())

    scores, dist, cache = student.forward_cache(
        x, dropout_on=True, rng=step_rng(cfg.seed, t, _ROLE_STUDENT_DROP)
    )
    probs = nn.softmax(scores, axis=1)

    d_probs = np.zeros_like(probs)
    d_scores = np.zeros_like(scores)
    d_dist = np.zeros_like(dist)

    sup_dice = sup_ce = sup_dis = 0.0
    if n_lab:
        y = batch.masks
        sup_dice, g = obj.dice_loss(probs[:n_lab], y, grad=True)
        d_probs[:n_lab] += g
        sup_ce, g = obj.ce_loss(scores[:n_lab], y, grad=True)
        d_scores[:n_lab] += g
        if cfg.use_dis_supervision:
            gt_sdf = _sdf_targets(y, dtype)
            sup_dis, g = obj.dist_loss(dist[:n_lab], gt_sdf, grad=True)
            d_dist[:n_lab] += g

    lam = obj.rampup_weight(t, cfg.max_iters, cfg.w_max, cfg.ramp_squared)
    lambda_i = lam if cfg.use_itc else 0.0
    lambda_c = lam if cfg.use_ctc else 0.0
    u_th = obj.threshold_schedule(t, cfg.max_iters, num_cat)

    itc_val = ctc_val = 0.0
    if cfg.use_itc:
        x_teacher = x
        if cfg.teacher_noise > 0:
            noise = step_rng(cfg.seed, t, _ROLE_NOISE).standard_normal(x.shape)
            x_teacher = x + cfg.teacher_noise * noise.astype(dtype)
        t_scores, t_dist = teacher.forward(
            x_teacher, dropout_on=True, rng=step_rng(cfg.seed, t, _ROLE_TEACHER_DROP)
        )
        t_probs = nn.softmax(t_scores, axis=1)
        if cfg.use_uncertainty_mask:
            stack = mc_forward(teacher, x_teacher, cfg.mc_passes, step_rng(cfg.seed, t, _ROLE_MC))
            u = obj.predictive_entropy(stack.mean(axis=0))
            mask = obj.certainty_mask(u, u_th)
        else:
            mask = np.ones((x.shape[0],) + x.shape[2:], dtype=bool)
        itc_val, (g_seg, g_dist) = obj.intra_task_consistency(
            probs, dist, t_probs, t_dist, mask, cfg.beta, grad=True
        )
        d_probs += dtype.type(lambda_i) * g_seg
        d_dist += dtype.type(lambda_i) * g_dist
    if cfg.use_ctc:
        ctc_val, (g_probs, g_dist) = obj.cross_task_consistency(probs, dist, cfg.k, grad=True)
        d_probs += dtype.type(lambda_c) * g_probs
        d_dist += dtype.type(lambda_c) * g_dist

    try:
        breakdown = obj.total_loss(
            step=t,
            sup_dice=sup_dice,
            sup_ce=sup_ce,
            sup_dis=sup_dis,
            itc=itc_val,
            ctc=ctc_val,
            lambda_i=lambda_i,
            lambda_c=lambda_c,
            u_th=u_th,
            beta=cfg.beta,
        )
    except NumericalError as exc:
        raise NumericalError(f"{exc} [batch cases: {batch.case_ids}]") from exc

    d_scores += nn.softmax_vjp(probs, d_probs, axis=1)
    grads = student.backward(cache, d_scores, d_dist)

    lr = lr_schedule(t, cfg.lr0, cfg.lr_decay, cfg.lr_decay_every)
    mu = dtype.type(cfg.momentum)
    lr_t = dtype.type(lr)
    for name, g in grads.items():
        buf = state.momentum[name]
        buf *= mu
        buf += g
        student.params[name] -= lr_t * buf
    ema_update(state.pair, step=t)

    state.history.append(breakdown)
    state.step += 1
    return state


def write_history_csv(history: Sequence[LossBreakdown], path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = [LossBreakdown.csv_header()] + [b.csv_row() for b in history]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def train(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Optional[Dataset] = None,
    out_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
):
    """Run the full loop; returns (state, report) where report is the final
    held-out MetricReport (None without a test set).

    The labeled/unlabeled split must already be applied to ``train_ds``.
    With ``out_dir`` set, emits checkpoint.json/.bin, history.csv and, when a
    test set is given, report.csv.
    """
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        restored = TrainConfig.from_dict(bundle.train_config) if bundle.train_config else cfg
        if restored.fingerprint() != cfg.fingerprint():
            raise InvalidConfigError("checkpoint config does not match the requested config")
        state = TrainState(cfg=cfg, pair=bundle.pair, momentum=bundle.momentum, step=bundle.step)
    else:
        state = init_state(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    while state.step < cfg.max_iters:
        t = state.step
        batch = sample_batch(
            train_ds,
            cfg.patch,
            step_rng(cfg.seed, t, _ROLE_SAMPLE),
            n_labeled=cfg.batch_labeled,
            n_unlabeled=cfg.batch_unlabeled,
        )
        if cfg.augment:
            batch = _augment_batch(batch, step_rng(cfg.seed, t, _ROLE_AUGMENT))
        train_step(state, batch)
        b = state.history[-1]
        if cfg.log_every and (t + 1) % cfg.log_every == 0:
            log.info(
                "step %d/%d total=%.4f dice=%.4f ce=%.4f dis=%.4f itc=%.5f ctc=%.5f lr=%.4g",
                t + 1, cfg.max_iters, b.total, b.sup_dice, b.sup_ce, b.sup_dis, b.itc, b.ctc,
                lr_schedule(t, cfg.lr0, cfg.lr_decay, cfg.lr_decay_every),
            )
        if (
            out_dir is not None
            and cfg.checkpoint_every
            and state.step % cfg.checkpoint_every == 0
            and state.step < cfg.max_iters
        ):
            save_checkpoint(
                out_dir / f"checkpoint_{state.step:06d}.json",
                state.pair,
                state.step,
                momentum=state.momentum,
                train_config=cfg.to_dict(),
                seed=cfg.seed,
            )

    report = None
    if out_dir is not None:
        save_checkpoint(
            out_dir / "checkpoint.json",
            state.pair,
            state.step,
            momentum=state.momentum,
            train_config=cfg.to_dict(),
            seed=cfg.seed,
        )
        write_history_csv(state.history, out_dir / "history.csv")
    if test_ds is not None:
        from mcseg.evaluation import InferConfig, evaluate, write_report_csv

        net = state.pair.teacher if cfg.eval_use_teacher else state.pair.student
        infer = InferConfig(patch=cfg.patch, stride=cfg.eval_stride)
        report = evaluate(net, test_ds, infer, config_fingerprint=cfg.fingerprint())
        if out_dir is not None:
            write_report_csv(report, out_dir / "report.csv")
    return state, report


def sliding_window_predict(
    net_or_fn: Union[DualBranchNet, Callable[[np.ndarray], np.ndarray]],
    volume: Union[Volume, np.ndarray],
    patch: Sequence[int],
    stride: Optional[Sequence[int]] = None,
    window_batch: int = 8,
) -> np.ndarray:
    """Overlap-averaged patch predictions over a full volume.

    Accepts a network or any callable mapping (B, 1, *patch) images to
    (B, C, *patch) probabilities.  Every voxel is covered at least once: the
    final window per axis is clamped to the volume edge, and volumes smaller
    than the patch are reflect-padded then cropped back.  Returns (C, *S).
    """
    arr = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    patch = tuple(int(p) for p in patch)
    if len(patch) != arr.ndim:
        raise InvalidInputError(f"patch {patch} must match volume dims {arr.ndim}")
    stride = tuple(int(s) for s in (stride if stride is not None else [max(1, p // 2) for p in patch]))
    if any(s > p for s, p in zip(stride, patch)):
        raise InvalidInputError(f"stride {stride} must not exceed patch {patch}")

    if isinstance(net_or_fn, DualBranchNet):
        net = net_or_fn

        def predict(images: np.ndarray) -> np.ndarray:
            s, _ = net.forward(images, dropout_on=False)
            return nn.softmax(s, axis=1)

    else:
        predict = net_or_fn

    padded = data_mod.pad_reflect(arr, patch)
    pad_offsets = tuple((pd - d) // 2 for pd, d in zip(padded.shape, arr.shape))

    starts_per_axis = []
    for size, p, s in zip(padded.shape, patch, stride):
        starts = list(range(0, size - p + 1, s))
        if starts[-1] != size - p:
            starts.append(size - p)
        starts_per_axis.append(starts)
    origins = [()]
    for starts in starts_per_axis:
        origins = [o + (s,) for o in origins for s in starts]

    prob_sum = None
    counts = np.zeros(padded.shape, dtype=np.float64)
    for i in range(0, len(origins), window_batch):
        group = origins[i : i + window_batch]
        windows = [tuple(slice(o, o + p) for o, p in zip(origin, patch)) for origin in group]
        images = np.stack([padded[w] for w in windows]).astype(np.float32)[:, None]
        probs = np.asarray(predict(images), dtype=np.float64)
        if prob_sum is None:
            prob_sum = np.zeros((probs.shape[1],) + padded.shape, dtype=np.float64)
        for w, pr in zip(windows, probs):
            prob_sum[(slice(None),) + w] += pr
            counts[w] += 1.0
    assert counts.min() >= 1.0
    out = prob_sum / counts
    crop = tuple(slice(o, o + d) for o, d in zip(pad_offsets, arr.shape))
    return out[(slice(None),) + crop]
