"""Transport maps: analytical, affine, composed and trainable triangular."""

from .analytical import AnalyticalBananaMap, AnalyticalQuarticMap, AnalyticalQuarticToBananaMap
from .base import AffineMap, ComposedMap, IdentityMap, TransportMap, compose, finite_difference_log_det
from .training import MapTrainer, TrainingResult, kl_sa_loss, train, variance_diagnostic
from .triangular import MonotoneTriangularMap, hermite_table, total_order_multi_indices

__all__ = [
    "AffineMap",
    "AnalyticalBananaMap",
    "AnalyticalQuarticMap",
    "AnalyticalQuarticToBananaMap",
    "ComposedMap",
    "IdentityMap",
    "MapTrainer",
    "MonotoneTriangularMap",
    "TrainingResult",
    "TransportMap",
    "compose",
    "finite_difference_log_det",
    "hermite_table",
    "kl_sa_loss",
    "total_order_multi_indices",
    "train",
    "variance_diagnostic",
]
