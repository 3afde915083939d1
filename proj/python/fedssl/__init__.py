"""Federated semi-supervised intrusion detection on NSL-KDD."""

from ._core import (
    CLASS_NAMES,
    DATA_ROOT_ENV,
    ArchitectureSpec,
    ConfigError,
    DataError,
    FedsslError,
    LabelError,
    ParseError,
    RunConfig,
    ShapeError,
    TrainingError,
    count_flops,
    count_params,
    cross_entropy,
    imbalance_ratios,
    map_class,
    metrics,
    ntxent,
    prepare,
    report,
    taxonomy_version,
    train,
    write_synthetic,
)

__all__ = [name for name in dir() if not name.startswith("_")]
