"""Semi-supervised segmentation via uncertainty-guided mutual consistency.

A dual-branch encoder-decoder (segmentation scores + tanh-bounded signed
distance regression) is trained with supervised losses on labeled volumes
plus uncertainty-masked intra-task and cross-task consistency losses on all
volumes, under a mean-teacher EMA scheme.  Pure numpy with numba-JIT hot
kernels (see mcseg.backend).
"""

__version__ = "0.1.0"

from mcseg.geometry import (  # noqa: F401
    inverse_sdf,
    sdf_normalize,
    sdf_transform,
    surface_distances,
)
from mcseg.model import NetConfig, build_network, ema_update, make_pair, mc_forward  # noqa: F401
from mcseg.trainer import TrainConfig, train, train_step  # noqa: F401
