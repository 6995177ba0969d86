"""Segmentation metrics, per-case reports and the experiment harness.

Region metrics (Dice, Jaccard) come from voxel counts; boundary metrics
(ASD, 95HD) pool both directed surface-distance sets before reducing, with
the 95th percentile linearly interpolated.  Cases whose prediction or ground
truth has empty foreground get NaN boundary metrics and are excluded from
those aggregates with a logged warning.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mcseg.data import Dataset, LabelMask
from mcseg.errors import InvalidInputError, UndefinedSurfaceError
from mcseg.geometry import surface_distances
from mcseg.model import DualBranchNet, load_checkpoint
from mcseg.trainer import TrainConfig, sliding_window_predict, train

log = logging.getLogger(__name__)

METRIC_NAMES = ("dice", "jaccard", "asd", "hd95")


def _fg(mask, foreground: int) -> np.ndarray:
    arr = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    return arr == foreground


def dice(a, b, foreground: int = 1) -> float:
    """Region overlap 2|A&B| / (|A| + |B|); two empty masks give 1.0."""
    fa, fb = _fg(a, foreground), _fg(b, foreground)
    if fa.shape != fb.shape:
        raise InvalidInputError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    denom = int(fa.sum()) + int(fb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((fa & fb).sum()) / denom


def jaccard(a, b, foreground: int = 1) -> float:
    """Intersection over union; two empty masks give 1.0."""
    fa, fb = _fg(a, foreground), _fg(b, foreground)
    if fa.shape != fb.shape:
        raise InvalidInputError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    union = int((fa | fb).sum())
    if union == 0:
        return 1.0
    return int((fa & fb).sum()) / union


def _pooled_distances(a, b, foreground: int, spacing) -> np.ndarray:
    sd = surface_distances(a, b, foreground=foreground, spacing=spacing)
    return np.concatenate([sd.a_to_b, sd.b_to_a])


def asd(a, b, foreground: int = 1, spacing=None) -> float:
    """Mean of the pooled two-directional surface distances."""
    return float(_pooled_distances(a, b, foreground, spacing).mean())


def hd95(a, b, foreground: int = 1, spacing=None) -> float:
    """95th percentile (linear interpolation) of the pooled surface distances."""
    return float(np.percentile(_pooled_distances(a, b, foreground, spacing), 95))


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    jaccard: float
    asd: float
    hd95: float


@dataclass
class MetricReport:
    per_case: List[CaseMetrics]
    aggregate: Dict[str, Tuple[float, float]]  # metric -> (mean, sd)
    config_fingerprint: str = ""

    def mean(self, metric: str) -> float:
        return self.aggregate[metric][0]


def _aggregate(per_case: List[CaseMetrics]) -> Dict[str, Tuple[float, float]]:
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(c, name) for c in per_case], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[name] = (float("nan"), float("nan"))
        else:
            out[name] = (float(vals.mean()), float(vals.std()))
    return out


@dataclass
class InferConfig:
    patch: Tuple[int, ...] = (64, 64)
    stride: Optional[Tuple[int, ...]] = None
    foreground: int = 1
    window_batch: int = 8


def evaluate(
    predictor: Union[DualBranchNet, Callable, str, Path],
    test_set: Dataset,
    infer: InferConfig,
    config_fingerprint: str = "",
) -> MetricReport:
    """Sliding-window inference plus argmax over a labeled test set.

    ``predictor`` may be a network, a checkpoint path (the student is used),
    or any callable mapping (B, 1, *patch) to (B, C, *patch) probabilities.
    """
    if isinstance(predictor, (str, Path)):
        predictor = load_checkpoint(predictor).pair.student
    per_case = []
    for vol, mask in test_set.cases:
        if mask is None:
            raise InvalidInputError(f"test case {vol.id!r} has no ground-truth mask")
        probs = sliding_window_predict(
            predictor, vol, infer.patch, infer.stride, window_batch=infer.window_batch
        )
        pred = np.argmax(probs, axis=0).astype(np.uint8)
        d = dice(pred, mask, infer.foreground)
        j = jaccard(pred, mask, infer.foreground)
        try:
            a_val = asd(pred, mask, infer.foreground)
            h_val = hd95(pred, mask, infer.foreground)
        except UndefinedSurfaceError:
            log.warning(
                "case %s: empty foreground in prediction or truth; "
                "boundary metrics recorded as NaN and excluded from aggregates",
                vol.id,
            )
            a_val = h_val = float("nan")
        per_case.append(CaseMetrics(vol.id, d, j, a_val, h_val))
    return MetricReport(
        per_case=per_case,
        aggregate=_aggregate(per_case),
        config_fingerprint=config_fingerprint,
    )


def write_report_csv(report: MetricReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = ["case_id,dice,jaccard,asd,hd95"]
    for c in report.per_case:
        lines.append(f"{c.case_id},{c.dice!r},{c.jaccard!r},{c.asd!r},{c.hd95!r}")
    means = [report.aggregate[m][0] for m in METRIC_NAMES]
    sds = [report.aggregate[m][1] for m in METRIC_NAMES]
    lines.append("__mean__," + ",".join(repr(v) for v in means))
    lines.append("__sd__," + ",".join(repr(v) for v in sds))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# experiment harness

ABLATION_ROWS: List[Tuple[str, dict]] = [
    ("sup_seg", {"use_dis_supervision": False, "use_itc": False, "use_ctc": False}),
    ("sup_seg_dis", {"use_dis_supervision": True, "use_itc": False, "use_ctc": False}),
    # consistency on the segmentation output only: the distance branch is
    # excluded from self-ensembling via beta = 1
    ("itc_seg_only", {"use_dis_supervision": False, "use_itc": True, "use_ctc": False, "beta": 1.0}),
    ("dis_itc", {"use_dis_supervision": True, "use_itc": True, "use_ctc": False}),
    ("dis_ctc", {"use_dis_supervision": True, "use_itc": False, "use_ctc": True}),
    ("full", {"use_dis_supervision": True, "use_itc": True, "use_ctc": True}),
]

BETA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
FRACTION_GRID = (0.05, 0.1, 0.15, 0.2, 0.3, 0.5)


@dataclass
class GridRow:
    name: str
    cfg: TrainConfig
    reports: List[MetricReport] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        vals = [r.mean(metric) for r in self.reports]
        return float(np.mean(vals))


@dataclass
class ExperimentGrid:
    rows: List[GridRow]
    seeds: List[int]

    def row(self, name: str) -> GridRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _run_rows(
    named_cfgs: List[Tuple[str, TrainConfig]],
    train_ds: Dataset,
    test_ds: Dataset,
    seeds: Sequence[int],
) -> ExperimentGrid:
    import time

    rows = []
    for name, cfg in named_cfgs:
        row = GridRow(name=name, cfg=cfg)
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            t0 = time.perf_counter()
            _, report = train(run_cfg, train_ds, test_ds=test_ds)
            row.seconds.append(time.perf_counter() - t0)
            row.reports.append(report)
            log.info(
                "grid row %s seed %d: dice=%.4f (%.1fs)",
                name, seed, report.mean("dice"), row.seconds[-1],
            )
        rows.append(row)
    return ExperimentGrid(rows=rows, seeds=[int(s) for s in seeds])


def run_ablation(
    base_cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset,
    seeds: Sequence[int],
    out_dir: Optional[Union[str, Path]] = None,
) -> ExperimentGrid:
    """Train the six flag combinations of the ablation table over the given
    seeds (labeled/unlabeled split fixed by ``train_ds``)."""
    named = [(name, replace(base_cfg, **flags)) for name, flags in ABLATION_ROWS]
    grid = _run_rows(named, train_ds, test_ds, seeds)
    if out_dir is not None:
        write_grid_csv(grid, Path(out_dir) / "grid.csv", flag_columns=True)
    return grid


def sweep_beta(
    base_cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset,
    seeds: Sequence[int],
    out_dir: Optional[Union[str, Path]] = None,
    betas: Sequence[float] = BETA_GRID,
) -> ExperimentGrid:
    """Full method at each consistency balance weight."""
    named = [(f"beta_{b:g}", replace(base_cfg, beta=float(b))) for b in betas]
    grid = _run_rows(named, train_ds, test_ds, seeds)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_grid_csv(grid, out_dir / "grid.csv")
        _plot_metric(
            [float(b) for b in betas], grid, "consistency balance weight", out_dir / "grid.png"
        )
    return grid


def sweep_fraction(
    base_cfg: TrainConfig,
    full_train_ds: Dataset,
    test_ds: Dataset,
    seeds: Sequence[int],
    out_dir: Optional[Union[str, Path]] = None,
    fractions: Sequence[float] = FRACTION_GRID,
    split_seed: int = 0,
) -> ExperimentGrid:
    """Full method at each labeled fraction; ``full_train_ds`` must be the
    unsplit (fully labeled) training set."""
    from mcseg.data import split_labeled

    import time

    rows = []
    for frac in fractions:
        ds = split_labeled(full_train_ds, float(frac), seed=split_seed)
        row = GridRow(name=f"fraction_{frac:g}", cfg=base_cfg)
        for seed in seeds:
            run_cfg = replace(base_cfg, seed=int(seed))
            t0 = time.perf_counter()
            _, report = train(run_cfg, ds, test_ds=test_ds)
            row.seconds.append(time.perf_counter() - t0)
            row.reports.append(report)
            log.info("fraction %.2f seed %d: dice=%.4f", frac, seed, report.mean("dice"))
        rows.append(row)
    grid = ExperimentGrid(rows=rows, seeds=[int(s) for s in seeds])
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_grid_csv(grid, out_dir / "grid.csv")
        _plot_metric([float(f) for f in fractions], grid, "labeled fraction", out_dir / "grid.png")
    return grid


def write_grid_csv(
    grid: ExperimentGrid, path: Union[str, Path], flag_columns: bool = False
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "name"
    if flag_columns:
        header += ",seg,dis,itc,ctc"
    header += "," + ",".join(METRIC_NAMES)
    lines = [header]
    for row in grid.rows:
        cells = [row.name]
        if flag_columns:
            cfg = row.cfg
            cells += [
                "1",
                "1" if cfg.use_dis_supervision else "0",
                "1" if cfg.use_itc else "0",
                "1" if cfg.use_ctc else "0",
            ]
        cells += [repr(row.mean(m)) for m in METRIC_NAMES]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _plot_metric(xs: List[float], grid: ExperimentGrid, xlabel: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ys = [row.mean("dice") for row in grid.rows]
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean test Dice")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
